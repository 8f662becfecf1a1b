//! The self-supervised training loop and pooled evaluation.
//!
//! Each iteration pastes synthetic outliers into a batch of training images,
//! scores the pasted pixels, refines them into anomaly / ignored sets, and
//! takes one optimizer step on the head. The frozen model is only read.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::{scores_from_logits, Scorer};
use crate::head::{HeadConfig, HeadParams};
use crate::losses::{total_loss, LossConfig};
use crate::metrics::{evaluate_scores, EvalResult};
use crate::optim::{Adam, AdamConfig};
use crate::patch::{synthesize_scene, PastedScene, PatchConfig};
use crate::refine::{refine_partition, PixelClass, PixelPartition, RefineOptions};
use crate::rng;
use crate::tensor::{ImageRgb, Tensor, IGNORE};
use crate::world::{EvalSample, FrozenModel};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Refinement scores use JEM alone while `iteration < warmup_iters`.
    pub warmup_iters: usize,
    /// Weight of the residual estimator in the combined score.
    pub lambda: f64,
    pub patches: PatchConfig,
    pub loss: LossConfig,
    pub refine: RefineOptions,
    pub optimizer: AdamConfig,
    pub head: HeadConfig,
    pub seed: u64,
    /// Run synthesis, encoding and refinement of batch images on the rayon pool.
    pub parallel: bool,
    /// Write wall time into the log; off keeps logs byte-reproducible.
    pub record_timing: bool,
    /// Fraction of aborted iterations above which the run fails.
    pub max_abort_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            warmup_iters: 200,
            lambda: 0.5,
            patches: PatchConfig::default(),
            loss: LossConfig::default(),
            refine: RefineOptions::default(),
            optimizer: AdamConfig::default(),
            head: HeadConfig::default(),
            seed: 0,
            parallel: false,
            record_timing: false,
            max_abort_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 40k iterations with a 6k warmup.
    pub fn full_scale() -> Self {
        Self {
            iterations: 40_000,
            warmup_iters: 6_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.warmup_iters > self.iterations {
            return Err(Error::Config("warmup_iters must not exceed iterations".into()));
        }
        if !self.lambda.is_finite() || !self.loss.gamma.is_finite() {
            return Err(Error::Config("lambda and gamma must be finite".into()));
        }
        if self.patches.num_patches == 0 {
            return Err(Error::Config("num_patches must be >= 1".into()));
        }
        if self.refine.num_bins < 2 {
            return Err(Error::Config("num_bins must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.max_abort_fraction) {
            return Err(Error::Config("max_abort_fraction must be in [0, 1]".into()));
        }
        self.optimizer.validate()?;
        self.head.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    pub l_a: f64,
    pub l_o: f64,
    pub n_ood: usize,
    pub n_ignored: usize,
    /// Mean refinement threshold over the batch.
    pub eta: f64,
    pub ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub aborted: usize,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "iter,l_a,l_o,n_ood,n_ignored,eta,ms";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.iteration, r.l_a, r.l_o, r.n_ood, r.n_ignored, r.eta, r.ms
            )
            .unwrap();
        }
        out
    }
}

/// One training image after synthesis, frozen inference and refinement.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub target: usize,
    pub scene: PastedScene,
    pub features: Tensor,
    pub seg_logits: Tensor,
    pub scores: Vec<f64>,
    pub partition: PixelPartition,
}

/// Scores driving refinement: JEM before the warmup boundary, the combined
/// score of the current head (eval mode) from it on.
pub fn refinement_scores(
    iteration: usize,
    cfg: &TrainConfig,
    head: &HeadParams,
    features: &Tensor,
    seg_logits: &Tensor,
) -> Result<Vec<f64>> {
    if iteration < cfg.warmup_iters {
        scores_from_logits(None, seg_logits, cfg.lambda, Scorer::Jem)
    } else {
        let head_logits = head.forward_eval(features)?;
        scores_from_logits(Some(&head_logits), seg_logits, cfg.lambda, Scorer::Combined)
    }
}

/// Steps (1)-(4) for batch slot `lane` of `iteration`. The slot's PRNG stream
/// picks the target image, then drives patch synthesis.
pub fn prepare_image(
    images: &[ImageRgb],
    frozen: &FrozenModel,
    head: &HeadParams,
    cfg: &TrainConfig,
    iteration: usize,
    lane: usize,
) -> Result<PreparedImage> {
    let mut prng = rng::stream(cfg.seed, iteration as u64, lane as u64);
    let target = prng.random_range(0..images.len());
    let donors: Vec<&ImageRgb> = images
        .iter()
        .enumerate()
        .filter_map(|(i, img)| (i != target).then_some(img))
        .collect();
    let scene = synthesize_scene(&images[target], &donors, &cfg.patches, &mut prng)?;
    let features = frozen.encode(&scene.image);
    let seg_logits = frozen.decode(&features)?;
    let scores = refinement_scores(iteration, cfg, head, &features, &seg_logits)?;
    let partition = match refine_partition(&scores, &scene.regions, &cfg.refine) {
        Ok(p) => p,
        // nothing was pasted: the whole image is normal
        Err(Error::EmptyRegion) => PixelPartition::from_classes(vec![PixelClass::Normal; scores.len()], Vec::new()),
        Err(e) => return Err(e),
    };
    Ok(PreparedImage {
        target,
        scene,
        features,
        seg_logits,
        scores,
        partition,
    })
}

/// Stacks `[C, H, W]` tensors into channel-major `[C, B, H, W]`.
pub fn stack_batch(items: &[&Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 || items.iter().any(|t| t.shape() != shape.as_slice()) {
        return Err(Error::Shape("batch items must share one [C,H,W] shape".into()));
    }
    let (c, plane) = (shape[0], shape[1] * shape[2]);
    let b = items.len();
    let mut data = vec![0.0; c * b * plane];
    for (i, t) in items.iter().enumerate() {
        for ch in 0..c {
            let dst = (ch * b + i) * plane;
            data[dst..dst + plane].copy_from_slice(&t.data()[ch * plane..(ch + 1) * plane]);
        }
    }
    Tensor::new(vec![c, b, shape[1], shape[2]], data)
}

/// Progress hook, called after every iteration with the updated head and the
/// record, or `None` when the iteration was aborted.
pub type Observer<'a> = dyn FnMut(usize, &HeadParams, Option<&TrainRecord>) -> Result<()> + 'a;

pub fn train(images: &[ImageRgb], frozen: &FrozenModel, cfg: &TrainConfig) -> Result<(HeadParams, TrainLog)> {
    train_with(images, frozen, cfg, &mut |_, _, _| Ok(()))
}

pub fn train_with(
    images: &[ImageRgb],
    frozen: &FrozenModel,
    cfg: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<(HeadParams, TrainLog)> {
    cfg.validate()?;
    if images.len() < 2 {
        return Err(Error::InvalidInput("training needs at least 2 images".into()));
    }
    if cfg.head.feature_dim != frozen.feature_dim() {
        return Err(Error::Config(format!(
            "head expects {} features, frozen model yields {}",
            cfg.head.feature_dim,
            frozen.feature_dim()
        )));
    }
    let mut head = HeadParams::init(&cfg.head, cfg.seed)?;
    let mut adam = Adam::new(cfg.optimizer.clone(), &head);
    let mut log = TrainLog::default();
    let max_aborted = (cfg.max_abort_fraction * cfg.iterations as f64).floor() as usize;

    for iteration in 0..cfg.iterations {
        let start = Instant::now();
        let prepare = |lane: usize| prepare_image(images, frozen, &head, cfg, iteration, lane);
        let prepared: Vec<PreparedImage> = if cfg.parallel {
            (0..cfg.batch_size).into_par_iter().map(prepare).collect::<Result<_>>()?
        } else {
            (0..cfg.batch_size).map(prepare).collect::<Result<_>>()?
        };
        let features = stack_batch(&prepared.iter().map(|p| &p.features).collect::<Vec<_>>())?;
        let seg = stack_batch(&prepared.iter().map(|p| &p.seg_logits).collect::<Vec<_>>())?;
        let partition = PixelPartition::concat(&prepared.iter().map(|p| p.partition.clone()).collect::<Vec<_>>());

        let (head_logits, cache, stats) = head.forward_batch(&features)?;
        let loss = match total_loss(&head_logits, &seg, &partition, &cfg.loss) {
            Ok(l) => l,
            Err(Error::DegeneratePartition(why)) => {
                log::debug!("iteration {iteration} aborted: {why}");
                log.aborted += 1;
                if log.aborted > max_aborted {
                    return Err(Error::TooManyAborts {
                        aborted: log.aborted,
                        total: cfg.iterations,
                    });
                }
                observer(iteration, &head, None)?;
                continue;
            }
            Err(e) => return Err(e),
        };
        if !(loss.l_a.is_finite() && loss.l_o.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite loss at iteration {iteration}")));
        }
        let grads = head.backward(&cache, &loss.grad)?;
        head.update_running_stats(&stats);
        adam.step(&mut head, &grads)?;

        let record = TrainRecord {
            iteration,
            l_a: loss.l_a,
            l_o: loss.l_o,
            n_ood: partition.count(PixelClass::Anomaly),
            n_ignored: partition.count(PixelClass::Ignored),
            eta: partition.eta(),
            ms: if cfg.record_timing { start.elapsed().as_millis() as u64 } else { 0 },
        };
        if iteration % 100 == 0 {
            log::info!(
                "iter {iteration}: l_a {:.4} l_o {:.4} ood {} ignored {}",
                record.l_a,
                record.l_o,
                record.n_ood,
                record.n_ignored
            );
        }
        log.records.push(record);
        observer(iteration, &head, Some(&record))?;
    }
    Ok((head, log))
}

/// Pooled per-pixel scores and binary ground truth over an eval set;
/// [`IGNORE`] pixels are dropped.
pub fn pooled_scores(
    head: &HeadParams,
    frozen: &FrozenModel,
    eval_set: &[EvalSample],
    lambda: f64,
    scorers: &[Scorer],
) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    let mut scores = vec![Vec::new(); scorers.len()];
    let mut labels = Vec::new();
    for sample in eval_set {
        let truth = sample.anomaly.labels();
        if let Some(bad) = truth.iter().find(|&&v| v > 1 && v != IGNORE) {
            return Err(Error::InvalidInput(format!("anomaly mask value {bad}")));
        }
        let features = frozen.encode(&sample.image);
        let seg = frozen.decode(&features)?;
        let head_logits = if scorers.iter().any(|s| s.needs_head()) {
            Some(head.forward_eval(&features)?)
        } else {
            None
        };
        for (out, &scorer) in scores.iter_mut().zip(scorers) {
            let s = scores_from_logits(head_logits.as_ref(), &seg, lambda, scorer)?;
            out.extend(s.iter().zip(truth).filter(|(_, &t)| t != IGNORE).map(|(&v, _)| v));
        }
        labels.extend(truth.iter().filter(|&&t| t != IGNORE).map(|&t| t == 1));
    }
    Ok((scores, labels))
}

/// Pooled AP / AUROC / FPR95 for each scorer.
pub fn evaluate(
    head: &HeadParams,
    frozen: &FrozenModel,
    eval_set: &[EvalSample],
    lambda: f64,
    scorers: &[Scorer],
) -> Result<Vec<(Scorer, EvalResult)>> {
    let (scores, labels) = pooled_scores(head, frozen, eval_set, lambda, scorers)?;
    scorers
        .iter()
        .zip(&scores)
        .map(|(&s, v)| Ok((s, evaluate_scores(v, &labels)?)))
        .collect()
}

pub const EVAL_CSV_HEADER: &str = "scorer,ap,auroc,fpr95,n_pos,n_neg";

pub fn eval_csv(rows: &[(Scorer, EvalResult)]) -> String {
    let mut out = format!("{EVAL_CSV_HEADER}\n");
    for (s, r) in rows {
        writeln!(out, "{},{},{},{},{},{}", s, r.ap, r.auroc, r.fpr95, r.n_pos, r.n_neg).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Dataset, FrozenConfig, SceneSpec};

    fn tiny() -> (Dataset, FrozenModel, TrainConfig) {
        let spec = SceneSpec {
            height: 32,
            width: 32,
            ..SceneSpec::default()
        };
        let ds = Dataset::generate(&spec, 4, 2).unwrap();
        let frozen = FrozenModel::fit(&spec, &FrozenConfig { n_scenes: 4, ..FrozenConfig::default() }).unwrap();
        let cfg = TrainConfig {
            iterations: 6,
            warmup_iters: 3,
            batch_size: 2,
            head: HeadConfig { hidden: 8, ..HeadConfig::default() },
            ..TrainConfig::default()
        };
        (ds, frozen, cfg)
    }

    #[test]
    fn zero_iterations_returns_initial_head() {
        let (ds, frozen, cfg) = tiny();
        let cfg = TrainConfig { iterations: 0, warmup_iters: 0, ..cfg };
        let (head, log) = train(&ds.train, &frozen, &cfg).unwrap();
        assert_eq!(head, HeadParams::init(&cfg.head, cfg.seed).unwrap());
        assert!(log.records.is_empty());
        assert_eq!(log.to_csv(), format!("{}\n", TrainLog::CSV_HEADER));
    }

    #[test]
    fn one_record_per_completed_iteration() {
        let (ds, frozen, cfg) = tiny();
        let (_, log) = train(&ds.train, &frozen, &cfg).unwrap();
        assert_eq!(log.records.len() + log.aborted, cfg.iterations);
        assert!(log.records.iter().all(|r| r.l_a.is_finite() && r.l_o.is_finite() && r.ms == 0));
    }

    #[test]
    fn parallel_matches_serial() {
        let (ds, frozen, cfg) = tiny();
        let a = train(&ds.train, &frozen, &cfg).unwrap();
        let b = train(&ds.train, &frozen, &TrainConfig { parallel: true, ..cfg }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (ds, frozen, cfg) = tiny();
        assert!(matches!(train(&ds.train[..1], &frozen, &cfg), Err(Error::InvalidInput(_))));
        let bad = TrainConfig { warmup_iters: 10, ..cfg.clone() };
        assert!(matches!(train(&ds.train, &frozen, &bad), Err(Error::Config(_))));
        let bad = TrainConfig { head: HeadConfig { feature_dim: 3, ..cfg.head.clone() }, ..cfg };
        assert!(matches!(train(&ds.train, &frozen, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn stack_batch_is_channel_major() {
        let a = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let s = stack_batch(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), [2, 2, 1, 2]);
        assert_eq!(s.data(), [1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn eval_csv_layout() {
        let (ds, frozen, cfg) = tiny();
        let head = HeadParams::init(&cfg.head, 0).unwrap();
        let rows = evaluate(&head, &frozen, &ds.eval, 0.5, &Scorer::ALL).unwrap();
        let csv = eval_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], EVAL_CSV_HEADER);
        assert_eq!(lines.len(), 1 + Scorer::ALL.len());
        assert!(lines[1].starts_with("combined,"));
    }
}
