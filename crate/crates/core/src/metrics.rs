//! Pixel-level AP, AUROC and FPR at a target TPR, with tied scores grouped
//! into a single operating point.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EvalResult {
    pub ap: f64,
    pub auroc: f64,
    pub fpr95: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 {
        return Err(Error::Metric("no positive samples"));
    }
    if n_neg == 0 {
        return Err(Error::Metric("no negative samples"));
    }
    Ok((n_pos, n_neg))
}

/// Cumulative (tp, fp) at each distinct score, scanning from the highest.
fn operating_points(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_ends = order
            .get(rank + 1)
            .is_none_or(|&next| scores[next] != scores[i]);
        if group_ends {
            points.push((tp, fp));
        }
    }
    points
}

/// Area under the ROC curve; ties count one half (midrank convention).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (n_pos, n_neg) = check(scores, labels)?;
    // trapezoids between grouped operating points
    let mut area = 0.0;
    let (mut prev_tp, mut prev_fp) = (0usize, 0usize);
    for (tp, fp) in operating_points(scores, labels) {
        area += (fp - prev_fp) as f64 * (tp + prev_tp) as f64 / 2.0;
        prev_tp = tp;
        prev_fp = fp;
    }
    Ok(area / (n_pos as f64 * n_neg as f64))
}

/// Non-interpolated average precision: sum of recall increments times the
/// precision at each tie group.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (n_pos, _) = check(scores, labels)?;
    let mut ap = 0.0;
    let mut prev_tp = 0usize;
    for (tp, fp) in operating_points(scores, labels) {
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / n_pos as f64 * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    Ok(ap)
}

/// FPR of the first operating point (descending thresholds) whose TPR reaches
/// `target`.
pub fn fpr_at_tpr(scores: &[f64], labels: &[bool], target: f64) -> Result<f64> {
    let (n_pos, n_neg) = check(scores, labels)?;
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::InvalidInput(format!("target TPR {target}")));
    }
    let (_, fp) = operating_points(scores, labels)
        .into_iter()
        .find(|&(tp, _)| tp as f64 / n_pos as f64 >= target)
        .expect("the last operating point has TPR 1");
    Ok(fp as f64 / n_neg as f64)
}

pub fn evaluate_scores(scores: &[f64], labels: &[bool]) -> Result<EvalResult> {
    let (n_pos, n_neg) = check(scores, labels)?;
    Ok(EvalResult {
        ap: average_precision(scores, labels)?,
        auroc: auroc(scores, labels)?,
        fpr95: fpr_at_tpr(scores, labels, 0.95)?,
        n_pos,
        n_neg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.7, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[3.0, 2.0, 1.0], &[true, true, false]).unwrap(), 1.0);
        assert!(matches!(average_precision(&[1.0, 2.0], &[false, false]), Err(Error::Metric(_))));
        // threshold 0.8: P=1, R=1/2; threshold 0.6: P=2/3, R=1; threshold 0.2 adds nothing
        let ap = average_precision(&[0.8, 0.6, 0.6, 0.2], &[true, false, true, false]).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr_at_tpr(&[0.9, 0.8, 0.2], &[true, true, false], 0.95).unwrap(), 0.0);
        let scores: Vec<f64> = (0..40).rev().map(f64::from).collect();
        let labels: Vec<bool> = (0..40).map(|i| i < 20).collect();
        assert_eq!(fpr_at_tpr(&scores, &labels, 0.95).unwrap(), 0.0);
        // a negative tied with the last positives is swept in with them
        assert_eq!(fpr_at_tpr(&[1.0, 0.5, 0.5], &[true, true, false], 0.95).unwrap(), 1.0);
    }

    #[test]
    fn length_mismatch() {
        assert!(auroc(&[1.0], &[true, false]).is_err());
    }
}
