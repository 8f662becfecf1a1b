//! Adaptive mask refinement: split pasted pixels into anomaly and ignored sets
//! by a grid-scanned threshold on their anomaly scores.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Unweighted sum of the two group variances.
    #[default]
    Eq11,
    /// Count-weighted within-class variance (classic Otsu).
    Otsu,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineOptions {
    pub num_bins: usize,
    pub mode: ThresholdMode,
    /// Threshold each pasted polygon separately instead of pooling them.
    pub per_polygon: bool,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            num_bins: 256,
            mode: ThresholdMode::Eq11,
            per_polygon: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub eta: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelClass {
    Normal,
    Anomaly,
    Ignored,
}

impl PixelClass {
    /// Tri-valued debug encoding: 0 normal, 128 ignored, 255 anomaly.
    pub fn debug_value(self) -> u8 {
        match self {
            PixelClass::Normal => 0,
            PixelClass::Ignored => 128,
            PixelClass::Anomaly => 255,
        }
    }
}

/// Disjoint anomaly / normal / ignored sets over the pixels of one image (or
/// a batch of images laid end to end).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPartition {
    classes: Vec<PixelClass>,
    /// Threshold per refined group (one when pooled).
    thresholds: Vec<f64>,
}

impl PixelPartition {
    pub fn from_classes(classes: Vec<PixelClass>, thresholds: Vec<f64>) -> Self {
        Self { classes, thresholds }
    }

    pub fn classes(&self) -> &[PixelClass] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// Mean of the thresholds used.
    pub fn eta(&self) -> f64 {
        self.thresholds.iter().sum::<f64>() / self.thresholds.len().max(1) as f64
    }

    fn indices(&self, class: PixelClass) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| (c == class).then_some(i))
            .collect()
    }

    pub fn ood(&self) -> Vec<usize> {
        self.indices(PixelClass::Anomaly)
    }

    pub fn id(&self) -> Vec<usize> {
        self.indices(PixelClass::Normal)
    }

    pub fn ignored(&self) -> Vec<usize> {
        self.indices(PixelClass::Ignored)
    }

    pub fn count(&self, class: PixelClass) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }

    /// Lays several partitions end to end (batch pooling).
    pub fn concat(parts: &[PixelPartition]) -> Self {
        Self {
            classes: parts.iter().flat_map(|p| p.classes.iter().copied()).collect(),
            thresholds: parts.iter().flat_map(|p| p.thresholds.iter().copied()).collect(),
        }
    }
}

fn population_var(sum: f64, sum_sq: f64, n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let mean = sum / n as f64;
    (sum_sq / n as f64 - mean * mean).max(0.0)
}

/// Threshold-search objective of the split `sorted[..split] | sorted[split..]`.
pub fn split_objective(sorted: &[f64], split: usize, mode: ThresholdMode) -> f64 {
    let stats = |g: &[f64]| {
        let n = g.len();
        if n < 2 {
            return 0.0;
        }
        let mean = g.iter().sum::<f64>() / n as f64;
        g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
    };
    let (below, above) = sorted.split_at(split);
    combine(stats(below), below.len(), stats(above), above.len(), mode)
}

fn combine(var_b: f64, n_b: usize, var_a: f64, n_a: usize, mode: ThresholdMode) -> f64 {
    match mode {
        ThresholdMode::Eq11 => var_a + var_b,
        ThresholdMode::Otsu => (n_a as f64 * var_a + n_b as f64 * var_b) / (n_a + n_b) as f64,
    }
}

/// Grid search for the threshold `eta` minimizing the split objective over
/// `num_bins` evenly spaced candidates in `[min, max]`. Pixels with
/// `score >= eta` form the upper group. Ties go to the smallest candidate.
pub fn search_threshold(scores: &[f64], num_bins: usize, mode: ThresholdMode) -> Result<Threshold> {
    if scores.is_empty() {
        return Err(Error::EmptyRegion);
    }
    if num_bins < 2 {
        return Err(Error::Config("num_bins must be >= 2".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite anomaly score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], *sorted.last().unwrap());

    // Prefix sums of centered scores; identical splits then yield
    // bit-identical objectives, which keeps the tie-break exact.
    let n = sorted.len();
    let center = sorted.iter().sum::<f64>() / n as f64;
    let mut sum = vec![0.0; n + 1];
    let mut sum_sq = vec![0.0; n + 1];
    for (i, &s) in sorted.iter().enumerate() {
        let c = s - center;
        sum[i + 1] = sum[i] + c;
        sum_sq[i + 1] = sum_sq[i] + c * c;
    }
    let objective_at = |split: usize| {
        let var_b = population_var(sum[split], sum_sq[split], split);
        let var_a = population_var(sum[n] - sum[split], sum_sq[n] - sum_sq[split], n - split);
        combine(var_b, split, var_a, n - split, mode)
    };

    let mut best: Option<(f64, f64)> = None;
    let mut last_split = usize::MAX;
    let mut last_obj = 0.0;
    for j in 0..num_bins {
        let eta = if j + 1 == num_bins {
            hi
        } else {
            lo + (hi - lo) * (j as f64 / (num_bins - 1) as f64)
        };
        let split = sorted.partition_point(|&s| s < eta);
        if split != last_split {
            last_split = split;
            last_obj = objective_at(split);
        }
        if best.is_none_or(|(_, obj)| last_obj < obj) {
            best = Some((eta, last_obj));
        }
    }
    let (eta, objective) = best.unwrap();
    Ok(Threshold { eta, objective })
}

/// Splits the pasted pixels (`regions[i] != 0`) into anomaly (`score >= eta`)
/// and ignored; every other pixel is normal.
pub fn refine_partition(scores: &[f64], regions: &[u16], opts: &RefineOptions) -> Result<PixelPartition> {
    if scores.len() != regions.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} region ids",
            scores.len(),
            regions.len()
        )));
    }
    let mut classes: Vec<PixelClass> = regions
        .iter()
        .map(|&r| if r == 0 { PixelClass::Normal } else { PixelClass::Ignored })
        .collect();

    let mut groups: Vec<u16> = if opts.per_polygon {
        let mut ids: Vec<u16> = regions.iter().copied().filter(|&r| r != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    } else {
        vec![0]
    };
    if !regions.iter().any(|&r| r != 0) {
        return Err(Error::EmptyRegion);
    }
    let mut thresholds = Vec::with_capacity(groups.len());
    for group in groups.drain(..) {
        let member = |r: u16| if opts.per_polygon { r == group } else { r != 0 };
        let group_scores: Vec<f64> = scores
            .iter()
            .zip(regions)
            .filter_map(|(&s, &r)| member(r).then_some(s))
            .collect();
        let t = search_threshold(&group_scores, opts.num_bins, opts.mode)?;
        for (i, (&s, &r)) in scores.iter().zip(regions).enumerate() {
            if member(r) && s >= t.eta {
                classes[i] = PixelClass::Anomaly;
            }
        }
        thresholds.push(t.eta);
    }
    Ok(PixelPartition { classes, thresholds })
}
