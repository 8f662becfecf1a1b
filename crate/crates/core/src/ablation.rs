//! Estimator and margin ablations, and one-parameter sensitivity sweeps.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::estimators::Scorer;
use crate::head::HeadParams;
use crate::losses::MarginKind;
use crate::metrics::EvalResult;
use crate::tensor::ImageRgb;
use crate::trainer::{evaluate, train, TrainConfig};
use crate::world::{EvalSample, FrozenModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    /// Untrained head; raw energy of the segmentation logits.
    Jem,
    /// Classification loss only, scored by the head softmax.
    Tae,
    /// Margin loss only, scored by the residual estimator.
    Tore,
    /// Both losses, combined score.
    Both,
    StaticMargin,
    DynamicMargin,
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::Jem,
        Arm::Tae,
        Arm::Tore,
        Arm::Both,
        Arm::StaticMargin,
        Arm::DynamicMargin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Jem => "jem",
            Arm::Tae => "tae",
            Arm::Tore => "tore",
            Arm::Both => "both",
            Arm::StaticMargin => "static_margin",
            Arm::DynamicMargin => "dynamic_margin",
        }
    }

    pub fn scorer(self) -> Scorer {
        match self {
            Arm::Jem => Scorer::Jem,
            Arm::Tae => Scorer::Tae,
            Arm::Tore => Scorer::Tore,
            Arm::Both | Arm::StaticMargin | Arm::DynamicMargin => Scorer::Combined,
        }
    }

    /// Training config for the arm, or `None` when the arm is not trained.
    pub fn train_config(self, base: &TrainConfig) -> Option<TrainConfig> {
        let mut cfg = base.clone();
        match self {
            Arm::Jem => return None,
            Arm::Tae => cfg.loss.w_o = 0.0,
            Arm::Tore => cfg.loss.w_a = 0.0,
            Arm::Both => {}
            Arm::StaticMargin => cfg.loss.margin = MarginKind::Static,
            Arm::DynamicMargin => cfg.loss.margin = MarginKind::Dynamic,
        }
        Some(cfg)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub arm: Arm,
    pub result: EvalResult,
    pub aborted: usize,
}

fn run_arm(
    arm: Arm,
    images: &[ImageRgb],
    frozen: &FrozenModel,
    eval_set: &[EvalSample],
    base: &TrainConfig,
) -> Result<ArmResult> {
    let (head, aborted) = match arm.train_config(base) {
        Some(cfg) => {
            let (head, log) = train(images, frozen, &cfg)?;
            (head, log.aborted)
        }
        None => (HeadParams::init(&base.head, base.seed)?, 0),
    };
    let rows = evaluate(&head, frozen, eval_set, base.lambda, &[arm.scorer()])?;
    Ok(ArmResult {
        arm,
        result: rows[0].1,
        aborted,
    })
}

/// Trains and evaluates every arm. Arms whose training config coincides are
/// trained once. With `threads`, arms run concurrently, each single-threaded
/// unless `base.parallel` is set; results do not depend on it.
pub fn run_ablation(
    images: &[ImageRgb],
    frozen: &FrozenModel,
    eval_set: &[EvalSample],
    base: &TrainConfig,
    threads: bool,
) -> Result<Vec<ArmResult>> {
    let mut unique: Vec<Arm> = Vec::new();
    for arm in Arm::ALL {
        let key = (arm.train_config(base), arm.scorer());
        if !unique.iter().any(|&u| (u.train_config(base), u.scorer()) == key) {
            unique.push(arm);
        }
    }
    let computed: Vec<ArmResult> = if threads {
        std::thread::scope(|s| {
            let handles: Vec<_> = unique
                .iter()
                .map(|&arm| s.spawn(move || run_arm(arm, images, frozen, eval_set, base)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation arm panicked"))
                .collect::<Result<_>>()
        })?
    } else {
        unique
            .iter()
            .map(|&arm| run_arm(arm, images, frozen, eval_set, base))
            .collect::<Result<_>>()?
    };
    Ok(Arm::ALL
        .iter()
        .map(|&arm| {
            let key = (arm.train_config(base), arm.scorer());
            let src = computed
                .iter()
                .find(|r| (r.arm.train_config(base), r.arm.scorer()) == key)
                .expect("every arm has a representative");
            ArmResult { arm, ..src.clone() }
        })
        .collect())
}

pub const ABLATION_CSV_HEADER: &str = "arm,scorer,ap,auroc,fpr95,n_pos,n_neg";

pub fn ablation_csv(rows: &[ArmResult]) -> String {
    let mut out = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let e = &r.result;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.arm,
            r.arm.scorer(),
            e.ap,
            e.auroc,
            e.fpr95,
            e.n_pos,
            e.n_neg
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    Gamma,
    Patches,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Gamma => "gamma",
            SweepParam::Patches => "patches",
        }
    }

    pub fn apply(self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        match self {
            SweepParam::Lambda => cfg.lambda = value,
            SweepParam::Gamma => cfg.loss.gamma = value,
            SweepParam::Patches => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("patch count {value} is not a positive integer")));
                }
                cfg.patches.num_patches = value as usize;
            }
        }
        Ok(cfg)
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "gamma" => Ok(SweepParam::Gamma),
            "patches" => Ok(SweepParam::Patches),
            _ => Err(Error::Config(format!("unknown sweep parameter {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub result: EvalResult,
}

/// Trains with each value substituted and evaluates the combined score.
pub fn run_sweep(
    images: &[ImageRgb],
    frozen: &FrozenModel,
    eval_set: &[EvalSample],
    base: &TrainConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    values
        .iter()
        .map(|&value| {
            let cfg = param.apply(base, value)?;
            let (head, _) = train(images, frozen, &cfg)?;
            let rows = evaluate(&head, frozen, eval_set, cfg.lambda, &[Scorer::Combined])?;
            Ok(SweepRow {
                param,
                value,
                result: rows[0].1,
            })
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "param,value,ap,auroc,fpr95";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.param, r.value, r.result.ap, r.result.auroc, r.result.fpr95
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_configs() {
        let base = TrainConfig::default();
        assert!(Arm::Jem.train_config(&base).is_none());
        assert_eq!(Arm::Tae.train_config(&base).unwrap().loss.w_o, 0.0);
        assert_eq!(Arm::Tore.train_config(&base).unwrap().loss.w_a, 0.0);
        assert_eq!(Arm::DynamicMargin.train_config(&base), Arm::Both.train_config(&base));
        assert_eq!(
            Arm::StaticMargin.train_config(&base).unwrap().loss.margin,
            MarginKind::Static
        );
    }

    #[test]
    fn sweep_param_parsing_and_application() {
        let base = TrainConfig::default();
        assert_eq!("gamma".parse::<SweepParam>().unwrap(), SweepParam::Gamma);
        assert!("eta".parse::<SweepParam>().is_err());
        assert_eq!(SweepParam::Patches.apply(&base, 4.0).unwrap().patches.num_patches, 4);
        assert!(SweepParam::Patches.apply(&base, 2.5).is_err());
        assert_eq!(SweepParam::Lambda.apply(&base, 0.25).unwrap().lambda, 0.25);
    }
}
