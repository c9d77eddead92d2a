use rand::seq::index;
use rand::Rng;

use super::targets::TargetMap;
use super::TrainConfig;
use crate::geometry::ClassId;
use crate::net::class_offset;
use crate::tensor::{Scalar, Tensor};

/// Value and derivative of smooth-L1 with transition `beta`.
pub fn smooth_l1(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar loss with its gradient with respect to the header activations.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

/// Number of regression components per class.
pub fn reg_components(class: ClassId) -> usize {
    if class.has_extent() {
        6
    } else {
        2
    }
}

/// Mean over positives of the gamma-weighted smooth-L1 error. Zero without positives.
pub fn regression_loss<T: Scalar>(header: &Tensor<T>, t: &TargetMap, gamma: &[f64; 6], beta: f64) -> LossValue<T> {
    let mut grad = Tensor::zeros(header.shape());
    let n = t.positive_count();
    if n == 0 {
        return LossValue { value: 0.0, grad };
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    for class in ClassId::ALL {
        let o = class_offset(class);
        let ct = t.class(class);
        for (cell, target) in ct.positives() {
            let (j, i) = (cell / t.width, cell % t.width);
            for d in 0..reg_components(class) {
                let pred = header.at3(o + 1 + d, j, i).f64();
                let (v, g) = smooth_l1(pred - target[d], beta);
                total += gamma[d] * v;
                grad.set3(o + 1 + d, j, i, T::of(gamma[d] * g * inv));
            }
        }
    }
    LossValue { value: total * inv, grad }
}

/// Samples up to `sample` of `candidates` uniformly, then keeps the `k` with
/// the largest loss. Ties keep the earlier candidate.
pub fn mine_hard_negatives(candidates: &[usize], losses: &[f64], sample: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let picked: Vec<usize> = if candidates.len() <= sample {
        candidates.to_vec()
    } else {
        let mut idx = index::sample(rng, candidates.len(), sample).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| candidates[i]).collect()
    };
    let mut scored: Vec<(usize, f64)> = picked.into_iter().map(|c| (c, losses[c])).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored.into_iter().map(|(c, _)| c).collect()
}

/// Binary cross-entropy over positives plus, per class, the mean over the
/// hard negatives mined from a random sample.
pub fn classification_loss<T: Scalar>(header: &Tensor<T>, t: &TargetMap, cfg: &TrainConfig, rng: &mut impl Rng) -> LossValue<T> {
    let mut grad = Tensor::zeros(header.shape());
    let n = t.positive_count();
    let mut total = 0.0;
    for class in ClassId::ALL {
        let o = class_offset(class);
        let ct = t.class(class);
        let logit = |cell: usize| header.at3(o, cell / t.width, cell % t.width).f64();
        if n > 0 {
            for (cell, _) in ct.positives() {
                let x = logit(cell);
                total += softplus(-x) / n as f64;
                grad.set3(o, cell / t.width, cell % t.width, T::of((sigmoid(x) - 1.0) / n as f64));
            }
        }
        let negs = ct.negatives();
        if negs.is_empty() {
            continue;
        }
        let losses: Vec<f64> = (0..t.width * t.height).map(|c| softplus(logit(c))).collect();
        let kept = mine_hard_negatives(&negs, &losses, cfg.negative_samples[class.index()], cfg.hard_negatives, rng);
        let k = kept.len() as f64;
        for cell in kept {
            total += losses[cell] / k;
            grad.set3(o, cell / t.width, cell % t.width, T::of(sigmoid(logit(cell)) / k));
        }
    }
    LossValue { value: total, grad }
}

pub fn total_loss(reg: f64, cls: f64, alpha: f64) -> f64 {
    reg + alpha * cls
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacketLoss<T> {
    pub reg: f64,
    pub cls: f64,
    pub total: f64,
    pub grad: Tensor<T>,
}

pub fn packet_loss<T: Scalar>(header: &Tensor<T>, t: &TargetMap, cfg: &TrainConfig, rng: &mut impl Rng) -> PacketLoss<T> {
    let reg = regression_loss(header, t, &cfg.gamma, cfg.beta);
    let cls = classification_loss(header, t, cfg, rng);
    let mut grad = reg.grad;
    let mut gc = cls.grad;
    gc.scale(T::of(cfg.alpha));
    grad.add_assign(&gc);
    PacketLoss { reg: reg.value, cls: cls.value, total: total_loss(reg.value, cls.value, cfg.alpha), grad }
}
