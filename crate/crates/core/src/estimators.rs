//! Closed-form anomaly likelihood scores.
//!
//! Every score follows one convention: larger means more anomalous. The
//! intractable normalizers of the joint energy model never appear; they cancel
//! or only shift all pixels by the same constant.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::head::HeadParams;
use crate::io::write_tensor;
use crate::tensor::Tensor;

/// `log sum exp`, shifted by the maximum for overflow safety.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Negative free energy of the segmentation logits, `-log sum_y exp(logit_y)`.
pub fn jem_score(seg_logits: &[f64]) -> f64 {
    -log_sum_exp(seg_logits)
}

/// `log softmax(head_logits)[o]` for the two-way head.
pub fn tae_log_prob(head_logits: [f64; 2], o: usize) -> f64 {
    assert!(o < 2, "anomaly indicator must be 0 or 1");
    // log sigma(a - b) = -softplus(b - a)
    let d = head_logits[1 - o] - head_logits[o];
    -(d.max(0.0) + (-d.abs()).exp().ln_1p())
}

/// Anomaly log-likelihood of the residual estimator, up to an additive
/// constant shared by every pixel: `head_logits[1] + jem_score(seg_logits)`.
pub fn tore_log_prob_residual(head_logits: [f64; 2], seg_logits: &[f64]) -> f64 {
    head_logits[1] + jem_score(seg_logits)
}

/// `tae_log_prob(o = 1) + lambda * tore_log_prob_residual`.
pub fn combined_score(head_logits: [f64; 2], seg_logits: &[f64], lambda: f64) -> f64 {
    tae_log_prob(head_logits, 1) + lambda * tore_log_prob_residual(head_logits, seg_logits)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baselines {
    /// Negated maximum softmax probability.
    pub msp: f64,
    /// Shannon entropy of the softmax, in nats.
    pub entropy: f64,
    /// Negated maximum logit.
    pub max_logit: f64,
}

pub fn baseline_scores(seg_logits: &[f64]) -> Baselines {
    let lse = log_sum_exp(seg_logits);
    let max = seg_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let entropy = seg_logits
        .iter()
        .map(|&l| {
            let log_p = l - lse;
            -log_p.exp() * log_p
        })
        .sum::<f64>();
    Baselines {
        msp: -(max - lse).exp(),
        entropy: entropy.max(0.0),
        max_logit: -max,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    Combined,
    Tae,
    Tore,
    Jem,
    Msp,
    Entropy,
    MaxLogit,
}

impl Scorer {
    pub const ALL: [Scorer; 7] = [
        Scorer::Combined,
        Scorer::Tae,
        Scorer::Tore,
        Scorer::Jem,
        Scorer::Msp,
        Scorer::Entropy,
        Scorer::MaxLogit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scorer::Combined => "combined",
            Scorer::Tae => "tae",
            Scorer::Tore => "tore",
            Scorer::Jem => "jem",
            Scorer::Msp => "msp",
            Scorer::Entropy => "entropy",
            Scorer::MaxLogit => "max_logit",
        }
    }

    pub fn needs_head(self) -> bool {
        matches!(self, Scorer::Combined | Scorer::Tae | Scorer::Tore)
    }

    /// Score of a single pixel. `head_logits` is ignored by head-free scorers.
    pub fn score(self, head_logits: [f64; 2], seg_logits: &[f64], lambda: f64) -> f64 {
        match self {
            Scorer::Combined => combined_score(head_logits, seg_logits, lambda),
            Scorer::Tae => tae_log_prob(head_logits, 1),
            Scorer::Tore => tore_log_prob_residual(head_logits, seg_logits),
            Scorer::Jem => jem_score(seg_logits),
            Scorer::Msp => baseline_scores(seg_logits).msp,
            Scorer::Entropy => baseline_scores(seg_logits).entropy,
            Scorer::MaxLogit => baseline_scores(seg_logits).max_logit,
        }
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scorer::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown scorer {s:?}")))
    }
}

/// Per-pixel anomaly scores of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
    pub scorer: Scorer,
    pub lambda: f64,
}

impl ScoreMap {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.scores.clone()).expect("score map shape")
    }

    /// Writes `<stem>.tnsr` and a `<stem>.txt` sidecar naming the scorer and lambda.
    pub fn save(&self, tensor_path: &Path) -> Result<()> {
        write_tensor(tensor_path, &self.to_tensor())?;
        let sidecar = tensor_path.with_extension("txt");
        let text = format!(
            "scorer = {}\nlambda = {}\nheight = {}\nwidth = {}\n",
            self.scorer, self.lambda, self.height, self.width
        );
        std::fs::write(&sidecar, text).map_err(|e| Error::io(sidecar, e))
    }
}

/// Applies `scorer` pixelwise. `head_logits` must be `[2, P]` (any trailing
/// layout) when the scorer needs the head; `seg_logits` is `[K, P]`.
pub fn scores_from_logits(
    head_logits: Option<&Tensor>,
    seg_logits: &Tensor,
    lambda: f64,
    scorer: Scorer,
) -> Result<Vec<f64>> {
    let k = seg_logits.shape()[0];
    let pixels = seg_logits.len() / k;
    let head = match (scorer.needs_head(), head_logits) {
        (true, None) => {
            return Err(Error::InvalidInput(format!(
                "scorer {scorer} needs head logits"
            )))
        }
        (true, Some(h)) => {
            if h.shape()[0] != 2 || h.len() != 2 * pixels {
                return Err(Error::Shape(format!(
                    "head logits {:?} vs {pixels} pixels",
                    h.shape()
                )));
            }
            Some(h.data())
        }
        (false, _) => None,
    };
    let seg = seg_logits.data();
    let mut column = vec![0.0; k];
    Ok((0..pixels)
        .map(|p| {
            for (c, v) in column.iter_mut().enumerate() {
                *v = seg[c * pixels + p];
            }
            let h = head.map_or([0.0, 0.0], |h| [h[p], h[pixels + p]]);
            scorer.score(h, &column, lambda)
        })
        .collect())
}

/// Scores every pixel of an image; the head runs in eval mode.
pub fn score_map(
    head: &HeadParams,
    features: &Tensor,
    seg_logits: &Tensor,
    lambda: f64,
    scorer: Scorer,
) -> Result<ScoreMap> {
    if features.rank() != 3 || seg_logits.rank() != 3 {
        return Err(Error::Shape(format!(
            "expected [D,H,W] features and [K,H,W] logits, got {:?} and {:?}",
            features.shape(),
            seg_logits.shape()
        )));
    }
    let (height, width) = (features.shape()[1], features.shape()[2]);
    if seg_logits.shape()[1..] != features.shape()[1..] {
        return Err(Error::Shape(format!(
            "features {:?} vs logits {:?}",
            features.shape(),
            seg_logits.shape()
        )));
    }
    let head_logits = if scorer.needs_head() {
        Some(head.forward_eval(features)?)
    } else {
        None
    };
    let scores = scores_from_logits(head_logits.as_ref(), seg_logits, lambda, scorer)?;
    Ok(ScoreMap {
        height,
        width,
        scores,
        scorer,
        lambda,
    })
}
