//! Training objectives over a pixel partition, with gradients with respect to
//! the head logits.
//!
//! Head logits are `[2, P]` and segmentation logits `[K, P]` in any trailing
//! layout whose pixel order matches the partition. Set reductions are means.

use crate::error::{Error, Result};
use crate::estimators::{jem_score, tae_log_prob};
use crate::refine::{PixelClass, PixelPartition};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginKind {
    /// Margin absorbs the JEM means of both sets.
    #[default]
    Dynamic,
    /// Hinge on the anomaly channel alone with the fixed margin.
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub gamma: f64,
    pub w_a: f64,
    pub w_o: f64,
    pub margin: MarginKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 15.0,
            w_a: 1.0,
            w_o: 1.0,
            margin: MarginKind::Dynamic,
        }
    }
}

/// One loss term and its gradient, `[2, P]` flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct LossPart {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub l_a: f64,
    pub l_o: f64,
    /// Same shape as the head logits; zero at ignored pixels.
    pub grad: Tensor,
}

struct Sets {
    ood: Vec<usize>,
    id: Vec<usize>,
}

fn sets(head_logits: &Tensor, partition: &PixelPartition) -> Result<(usize, Sets)> {
    if head_logits.shape()[0] != 2 {
        return Err(Error::Shape(format!("head logits {:?}", head_logits.shape())));
    }
    let pixels = head_logits.len() / 2;
    if pixels != partition.len() {
        return Err(Error::Shape(format!(
            "{pixels} head pixels vs partition of {}",
            partition.len()
        )));
    }
    let s = Sets {
        ood: partition.ood(),
        id: partition.id(),
    };
    if s.ood.is_empty() {
        return Err(Error::DegeneratePartition("empty anomaly set"));
    }
    if s.id.is_empty() {
        return Err(Error::DegeneratePartition("empty normal set"));
    }
    Ok((pixels, s))
}

/// Cross-entropy of the task-agnostic estimator: mean `-log p(o=1)` over the
/// anomaly set plus mean `-log p(o=0)` over the normal set.
pub fn loss_tae(head_logits: &Tensor, partition: &PixelPartition) -> Result<LossPart> {
    let (p, s) = sets(head_logits, partition)?;
    let h = head_logits.data();
    let mut grad = vec![0.0; 2 * p];
    let mut value = 0.0;
    for (set, target, n) in [(&s.ood, 1usize, s.ood.len()), (&s.id, 0, s.id.len())] {
        let inv = 1.0 / n as f64;
        let mut acc = 0.0;
        for &i in set.iter() {
            let logits = [h[i], h[p + i]];
            acc -= tae_log_prob(logits, target);
            // softmax minus one-hot
            let p1 = tae_log_prob(logits, 1).exp();
            let p0 = tae_log_prob(logits, 0).exp();
            grad[i] = inv * (p0 - (target == 0) as u8 as f64);
            grad[p + i] = inv * (p1 - (target == 1) as u8 as f64);
        }
        value += acc * inv;
    }
    Ok(LossPart { value, grad })
}

fn mean_over(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

/// Per-pixel JEM of `[K, P]` segmentation logits.
pub fn jem_per_pixel(seg_logits: &Tensor) -> Vec<f64> {
    let k = seg_logits.shape()[0];
    let p = seg_logits.len() / k;
    let d = seg_logits.data();
    let mut column = vec![0.0; k];
    (0..p)
        .map(|i| {
            for (c, v) in column.iter_mut().enumerate() {
                *v = d[c * p + i];
            }
            jem_score(&column)
        })
        .collect()
}

/// Effective margin `gamma + mean_id JEM - mean_ood JEM`.
pub fn dynamic_margin(jem: &[f64], partition: &PixelPartition, gamma: f64) -> Result<f64> {
    let (ood, id) = (partition.ood(), partition.id());
    if ood.is_empty() || id.is_empty() {
        return Err(Error::DegeneratePartition("empty set in margin"));
    }
    Ok(gamma + mean_over(id.iter().map(|&i| jem[i]), id.len())
        - mean_over(ood.iter().map(|&i| jem[i]), ood.len()))
}

/// Hinge `{mean_id h[1] - mean_ood h[1] + margin}_+` on the anomaly channel.
pub fn hinge_on_anomaly_channel(head_logits: &Tensor, partition: &PixelPartition, margin: f64) -> Result<LossPart> {
    let (p, s) = sets(head_logits, partition)?;
    let h1 = &head_logits.data()[p..];
    let arg = mean_over(s.id.iter().map(|&i| h1[i]), s.id.len())
        - mean_over(s.ood.iter().map(|&i| h1[i]), s.ood.len())
        + margin;
    let mut grad = vec![0.0; 2 * p];
    // subgradient 0 at the kink
    if arg > 0.0 {
        let (gi, go) = (1.0 / s.id.len() as f64, -1.0 / s.ood.len() as f64);
        s.id.iter().for_each(|&i| grad[p + i] = gi);
        s.ood.iter().for_each(|&i| grad[p + i] = go);
    }
    Ok(LossPart {
        value: arg.max(0.0),
        grad,
    })
}

/// Margin loss of the residual estimator with the energy-guided margin.
pub fn loss_tore(head_logits: &Tensor, seg_logits: &Tensor, partition: &PixelPartition, gamma: f64) -> Result<LossPart> {
    if seg_logits.len() / seg_logits.shape()[0] != partition.len() {
        return Err(Error::Shape("segmentation logits do not match partition".into()));
    }
    let jem = jem_per_pixel(seg_logits);
    let margin = dynamic_margin(&jem, partition, gamma)?;
    hinge_on_anomaly_channel(head_logits, partition, margin)
}

/// Margin loss with the JEM terms removed.
pub fn loss_tore_static(head_logits: &Tensor, partition: &PixelPartition, gamma: f64) -> Result<LossPart> {
    hinge_on_anomaly_channel(head_logits, partition, gamma)
}

/// `w_a * l_a + w_o * l_o` and its gradient.
pub fn total_loss(
    head_logits: &Tensor,
    seg_logits: &Tensor,
    partition: &PixelPartition,
    cfg: &LossConfig,
) -> Result<LossValue> {
    let a = loss_tae(head_logits, partition)?;
    let o = match cfg.margin {
        MarginKind::Dynamic => loss_tore(head_logits, seg_logits, partition, cfg.gamma)?,
        MarginKind::Static => loss_tore_static(head_logits, partition, cfg.gamma)?,
    };
    let grad: Vec<f64> = a
        .grad
        .iter()
        .zip(&o.grad)
        .map(|(ga, go)| cfg.w_a * ga + cfg.w_o * go)
        .collect();
    debug_assert!(partition
        .classes()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == PixelClass::Ignored)
        .all(|(i, _)| grad[i] == 0.0 && grad[partition.len() + i] == 0.0));
    Ok(LossValue {
        total: cfg.w_a * a.value + cfg.w_o * o.value,
        l_a: a.value,
        l_o: o.value,
        grad: Tensor::new(head_logits.shape().to_vec(), grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;
    use PixelClass::*;

    fn part(classes: &[PixelClass]) -> PixelPartition {
        PixelPartition::from_classes(classes.to_vec(), vec![0.0])
    }

    fn logits(pairs: &[[f64; 2]]) -> Tensor {
        let mut d: Vec<f64> = pairs.iter().map(|p| p[0]).collect();
        d.extend(pairs.iter().map(|p| p[1]));
        Tensor::new(vec![2, pairs.len()], d).unwrap()
    }

    fn random_instance(seed: u64, n: usize, k: usize) -> (Tensor, Tensor, PixelPartition) {
        let mut rng = rng::seeded(seed);
        let mut classes: Vec<PixelClass> = (0..n)
            .map(|_| [Normal, Anomaly, Ignored][rng.random_range(0..3)])
            .collect();
        classes[0] = Anomaly;
        classes[1] = Normal;
        let h = Tensor::new(vec![2, n], (0..2 * n).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
        let s = Tensor::new(vec![k, n], (0..k * n).map(|_| rng.random_range(-6.0..6.0)).collect()).unwrap();
        (h, s, part(&classes))
    }

    /// Direct evaluation of the cross-entropy from softmax probabilities.
    fn tae_oracle(h: &Tensor, p: &PixelPartition) -> f64 {
        let n = p.len();
        let prob1 = |i: usize| {
            let (a, b) = (h.data()[i].exp(), h.data()[n + i].exp());
            b / (a + b)
        };
        let ood = p.ood();
        let id = p.id();
        -ood.iter().map(|&i| prob1(i).ln()).sum::<f64>() / ood.len() as f64
            - id.iter().map(|&i| (1.0 - prob1(i)).ln()).sum::<f64>() / id.len() as f64
    }

    /// Direct evaluation of the margin loss from full residual scores.
    fn tore_oracle(h: &Tensor, s: &Tensor, p: &PixelPartition, gamma: f64) -> f64 {
        let n = p.len();
        let k = s.shape()[0];
        let score = |i: usize| {
            let lse = (0..k).map(|c| s.data()[c * n + i].exp()).sum::<f64>().ln();
            h.data()[n + i] - lse
        };
        let id = p.id();
        let ood = p.ood();
        let m_id = id.iter().map(|&i| score(i)).sum::<f64>() / id.len() as f64;
        let m_ood = ood.iter().map(|&i| score(i)).sum::<f64>() / ood.len() as f64;
        (m_id - m_ood + gamma).max(0.0)
    }

    fn finite_diff(h: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let step = 1e-6;
        (0..h.len())
            .map(|j| {
                let mut up = h.clone();
                up.data_mut()[j] += step;
                let mut dn = h.clone();
                dn.data_mut()[j] -= step;
                (f(&up) - f(&dn)) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn tae_symmetric_case() {
        let l = loss_tae(&logits(&[[0.0, 0.0], [0.0, 0.0]]), &part(&[Anomaly, Normal])).unwrap();
        assert!((l.value - 1.3862943611198906).abs() < 1e-12);
    }

    #[test]
    fn tae_saturated_case() {
        let l = loss_tae(&logits(&[[-100.0, 100.0], [100.0, -100.0]]), &part(&[Anomaly, Normal])).unwrap();
        assert!(l.value.abs() < 1e-80);
    }

    #[test]
    fn tae_matches_oracles() {
        for seed in 0..10 {
            let (h, _, p) = random_instance(seed, 4, 3);
            let l = loss_tae(&h, &p).unwrap();
            assert!((l.value - tae_oracle(&h, &p)).abs() < 1e-12);
            let fd = finite_diff(&h, |t| loss_tae(t, &p).unwrap().value);
            for (a, n) in l.grad.iter().zip(fd) {
                assert!((a - n).abs() < 1e-8, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn tore_hinge_cases() {
        // s = h[1] + JEM with JEM = -log 2 everywhere; shifting h[1] sets the means
        let seg = Tensor::zeros(vec![2, 2]);
        let p = part(&[Normal, Anomaly]);
        let h = logits(&[[0.0, -5.0], [0.0, 20.0]]);
        let l = loss_tore(&h, &seg, &p, 15.0).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad.iter().all(|&g| g == 0.0));
        let h = logits(&[[0.0, 3.0], [0.0, 3.0]]);
        assert_eq!(loss_tore(&h, &seg, &p, 15.0).unwrap().value, 15.0);
    }

    #[test]
    fn tore_matches_oracles() {
        for seed in 0..10 {
            let (h, s, p) = random_instance(100 + seed, 6, 4);
            for gamma in [0.0, 2.0, 15.0] {
                let l = loss_tore(&h, &s, &p, gamma).unwrap();
                assert!((l.value - tore_oracle(&h, &s, &p, gamma)).abs() < 1e-12);
                if l.value > 1e-3 {
                    let fd = finite_diff(&h, |t| loss_tore(t, &s, &p, gamma).unwrap().value);
                    for (a, n) in l.grad.iter().zip(fd) {
                        assert!((a - n).abs() < 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn hinge_boundary_subgradient_is_zero() {
        let p = part(&[Normal, Anomaly]);
        let h = logits(&[[0.0, 1.0], [0.0, 3.0]]);
        let l = loss_tore_static(&h, &p, 2.0).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn degenerate_partitions() {
        let h = logits(&[[0.0, 0.0], [0.0, 0.0]]);
        assert!(matches!(loss_tae(&h, &part(&[Normal, Ignored])), Err(Error::DegeneratePartition(_))));
        assert!(matches!(loss_tae(&h, &part(&[Anomaly, Ignored])), Err(Error::DegeneratePartition(_))));
        assert!(loss_tore(&h, &Tensor::zeros(vec![3, 2]), &part(&[Anomaly, Anomaly]), 1.0).is_err());
    }

    #[test]
    fn total_is_weighted_sum() {
        for seed in 0..5 {
            let (h, s, p) = random_instance(200 + seed, 8, 3);
            let only_a = total_loss(&h, &s, &p, &LossConfig { w_o: 0.0, ..Default::default() }).unwrap();
            assert_eq!(only_a.total, only_a.l_a);
            let only_o = total_loss(&h, &s, &p, &LossConfig { w_a: 0.0, ..Default::default() }).unwrap();
            assert_eq!(only_o.total, only_o.l_o);
            let both = total_loss(&h, &s, &p, &LossConfig::default()).unwrap();
            let expected = tae_oracle(&h, &p) + tore_oracle(&h, &s, &p, 15.0);
            assert!((both.total - expected).abs() < 1e-12);
            for i in p.ignored() {
                assert_eq!(both.grad.data()[i], 0.0);
                assert_eq!(both.grad.data()[p.len() + i], 0.0);
            }
        }
    }

    #[test]
    fn shift_invariance_of_tae_only() {
        let (h, s, p) = random_instance(300, 6, 3);
        let mut shifted = h.clone();
        let n = p.len();
        for i in 0..n {
            let c = 0.5 + i as f64;
            shifted.data_mut()[i] += c;
            shifted.data_mut()[n + i] += c;
        }
        let a = loss_tae(&h, &p).unwrap().value;
        let b = loss_tae(&shifted, &p).unwrap().value;
        assert!((a - b).abs() < 1e-12);
        let oa = loss_tore(&h, &s, &p, 15.0).unwrap().value;
        let ob = loss_tore(&shifted, &s, &p, 15.0).unwrap().value;
        assert_ne!(oa, ob);
    }
}
