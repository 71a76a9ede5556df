//! Loss terms for one student: classification over the six samples of a
//! quadruple, tempered KL on mixed and endpoint logits, last-layer feature
//! distance, detached confidence weights, and their warmed-up total.
//!
//! Everything here works on plain slices and tensors in `f64`. The
//! differentiable versions used during training live on [`crate::graph`] and
//! call back into these for their values.

use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardRecord, Network};
use crate::error::{Error, Result};
use crate::mixing::LocallyMixedPair;
use crate::sampling::Quadruple;
use crate::tensor::Tensor;

/// Balancing weights, temperature and warm-up length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdHyperparams {
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub temperature: f64,
    pub warmup_epochs: usize,
}

impl Default for KdHyperparams {
    fn default() -> Self {
        Self {
            beta: 4.0,
            gamma: 0.04,
            delta: 2.0,
            temperature: 4.0,
            warmup_epochs: 20,
        }
    }
}

impl KdHyperparams {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma), ("delta", self.delta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidHyperparameter {
                    name,
                    value: v,
                    reason: "loss weights must be finite and non-negative",
                });
            }
        }
        Ok(())
    }
}

/// The four terms for one student on one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub m_logit: f64,
    pub fea: f64,
    pub e_logit: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub m_logit: f64,
    pub fea: f64,
    pub e_logit: f64,
    pub warmup: f64,
    pub total: f64,
}

/// `cls + warmup·(β·m_logit + γ·fea + δ·e_logit)`.
pub fn total_loss(parts: LossParts, hp: &KdHyperparams, warmup: f64) -> LossBreakdown {
    let kd = hp.beta * parts.m_logit + hp.gamma * parts.fea + hp.delta * parts.e_logit;
    LossBreakdown {
        cls: parts.cls,
        m_logit: parts.m_logit,
        fea: parts.fea,
        e_logit: parts.e_logit,
        warmup,
        total: parts.cls + warmup * kd,
    }
}

/// Linear ramp `min(epoch / warmup_epochs, 1)`.
pub fn warmup_factor(epoch: usize, warmup_epochs: usize) -> f64 {
    if warmup_epochs == 0 {
        1.0
    } else {
        (epoch as f64 / warmup_epochs as f64).min(1.0)
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidHyperparameter {
            name: "temperature",
            value: t,
            reason: "temperature must be positive",
        })
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(&[a.len()], &[b.len()]));
    }
    Ok(())
}

/// Stable `log Σ exp`.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

pub fn softmax_tempered(z: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
    softmax(&scaled)
}

/// `−Σ_j target_j · log softmax(logits)_j`.
pub fn soft_cross_entropy(logits: &[f64], target: &[f64]) -> Result<f64> {
    check_len(logits, target)?;
    let logp = log_softmax(logits);
    Ok(-target
        .iter()
        .zip(&logp)
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, lp)| t * lp)
        .sum::<f64>())
}

/// `T²·KL(softmax(teacher/T) ‖ softmax(student/T))`.
pub fn kl_with_temperature(student: &[f64], teacher: &[f64], temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    check_len(student, teacher)?;
    let zs: Vec<f64> = student.iter().map(|v| v / temperature).collect();
    let zt: Vec<f64> = teacher.iter().map(|v| v / temperature).collect();
    let (ls, lt) = (log_softmax(&zs), log_softmax(&zt));
    let kl: f64 = lt
        .iter()
        .zip(&ls)
        .map(|(t, s)| if *t == f64::NEG_INFINITY { 0.0 } else { t.exp() * (t - s) })
        .sum();
    // rounding can leave a tiny negative residue for identical inputs
    Ok(temperature * temperature * kl.max(0.0))
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Linear interpolation of one axis with half-pixel centers.
fn resize_axis(data: &[f64], dims: &[usize; 3], axis: usize, new_len: usize) -> Vec<f64> {
    let old_len = dims[axis];
    let mut out_dims = *dims;
    out_dims[axis] = new_len;
    let stride = |d: &[usize; 3], a: usize| d[a + 1..].iter().product::<usize>();
    let (in_stride, out_stride) = (stride(dims, axis), stride(&out_dims, axis));
    let outer: usize = dims[..axis].iter().product();
    let inner = in_stride;
    let mut out = vec![0.0; outer * new_len * inner];
    let scale = old_len as f64 / new_len as f64;
    for o in 0..outer {
        for i in 0..new_len {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (old_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(old_len - 1);
            let frac = src - lo as f64;
            for j in 0..inner {
                let a = data[o * old_len * in_stride + lo * in_stride + j];
                let b = data[o * old_len * in_stride + hi * in_stride + j];
                out[o * new_len * out_stride + i * out_stride + j] = a + frac * (b - a);
            }
        }
    }
    out
}

/// Resize a `C×H×W` map (or an `n×C×H×W` batch, sample by sample) to the
/// per-sample shape `target`: height, then width, then channels.
pub fn resize_feature(feature: &Tensor, target: &[usize]) -> Result<Tensor> {
    let (batch, dims): (Option<usize>, [usize; 3]) = match feature.shape() {
        &[c, h, w] => (None, [c, h, w]),
        &[n, c, h, w] => (Some(n), [c, h, w]),
        other => return Err(Error::shape(&[0, 0, 0], other)),
    };
    let target: [usize; 3] = target.try_into().map_err(|_| Error::shape(&[0, 0, 0], target))?;
    if dims == target {
        return Ok(feature.clone());
    }
    if target.iter().chain(&dims).any(|&d| d == 0) {
        return Err(Error::shape(&target, &dims));
    }
    let per = dims.iter().product::<usize>();
    let mut out = Vec::new();
    for s in 0..batch.unwrap_or(1) {
        let mut cur = feature.data()[s * per..(s + 1) * per].to_vec();
        let mut cur_dims = dims;
        for axis in [1, 2, 0] {
            if cur_dims[axis] != target[axis] {
                cur = resize_axis(&cur, &cur_dims, axis, target[axis]);
                cur_dims[axis] = target[axis];
            }
        }
        out.extend(cur);
    }
    let mut shape: Vec<usize> = batch.into_iter().collect();
    shape.extend_from_slice(&target);
    Tensor::new(shape, out)
}

/// `‖s − resize(t)‖₂ / (H·W·C)` for single `C×H×W` feature maps.
pub fn feature_kd(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    if student.shape().len() != 3 {
        return Err(Error::shape(&[0, 0, 0], student.shape()));
    }
    let t = resize_feature(teacher, student.shape())?;
    Ok(l2_distance(student.data(), t.data()) / student.numel() as f64)
}

/// `l_t / (l_s + l_t)`, or ½ when both are zero.
pub fn confidence_weight(student_ce: f64, teacher_ce: f64) -> f64 {
    let denom = student_ce + teacher_ce;
    if denom > 0.0 {
        teacher_ce / denom
    } else {
        0.5
    }
}

pub fn confidence_weights(l_s1: f64, l_t1: f64, l_s2: f64, l_t2: f64) -> (f64, f64) {
    (confidence_weight(l_s1, l_t1), confidence_weight(l_s2, l_t2))
}

/// Sum of the six cross-entropies of one quadruple, with plain
/// evaluation-mode forwards.
pub fn classification_loss(student: &Network, quad: &Quadruple, pair: &LocallyMixedPair) -> Result<f64> {
    let k = student.num_classes();
    let onehot = |c: usize| {
        let mut v = vec![0.0; k];
        v[c] = 1.0;
        v
    };
    let (yc, yd) = (onehot(quad.class_c), onehot(quad.class_d));
    let batch = Tensor::stack(&[&quad.c1, &quad.c2, &quad.d1, &quad.d2, &pair.m1, &pair.m2])?;
    let rec = student.infer(&batch)?;
    let targets = [&yc, &yc, &yd, &yd, &pair.soft_label, &pair.soft_label];
    targets
        .iter()
        .enumerate()
        .map(|(r, t)| soft_cross_entropy(rec.logits.row(r), t))
        .sum()
}

/// Tempered KL between two mixed forwards over the same pair, averaged over
/// the batch. Both records must carry the same `λ₂`.
pub fn mixed_logit_kd(student: &ForwardRecord, teacher: &ForwardRecord, temperature: f64) -> Result<f64> {
    match (student.lambda2, teacher.lambda2) {
        (Some(a), Some(b)) if a == b => {}
        (a, b) => {
            return Err(Error::Protocol(format!(
                "mixed logit distillation needs equal λ₂, got {a:?} and {b:?}"
            )))
        }
    }
    mean_tempered_kl(&student.logits, &teacher.logits, temperature, None)
}

pub(crate) fn mean_tempered_kl(student: &Tensor, teacher: &Tensor, t: f64, weights: Option<&[f64]>) -> Result<f64> {
    teacher.ensure_shape(student.shape())?;
    let n = student.rows();
    let mut total = 0.0;
    for r in 0..n {
        let w = weights.map_or(1.0, |w| w[r]);
        total += w * kl_with_temperature(student.row(r), teacher.row(r), t)?;
    }
    Ok(total / n as f64)
}

/// Confidence-weighted endpoint KL on `m1` and `m2`. Returns the loss and the
/// two weights. With `fixed_weights` the weights are taken as given instead
/// of being computed from the cross-entropies.
#[allow(clippy::too_many_arguments)]
pub fn endpoint_logit_kd(
    student: &Network,
    teacher: &Network,
    m1: &Tensor,
    m2: &Tensor,
    y1: &[f64],
    y2: &[f64],
    temperature: f64,
    fixed_weights: Option<(f64, f64)>,
) -> Result<(f64, (f64, f64))> {
    check_temperature(temperature)?;
    let batch = Tensor::stack(&[m1, m2])?;
    let s = student.infer(&batch)?.logits;
    let t = teacher.infer(&batch)?.logits;
    let weights = match fixed_weights {
        Some(w) => w,
        None => confidence_weights(
            soft_cross_entropy(s.row(0), y1)?,
            soft_cross_entropy(t.row(0), y1)?,
            soft_cross_entropy(s.row(1), y2)?,
            soft_cross_entropy(t.row(1), y2)?,
        ),
    };
    let loss = weights.0 * kl_with_temperature(s.row(0), t.row(0), temperature)?
        + weights.1 * kl_with_temperature(s.row(1), t.row(1), temperature)?;
    Ok((loss, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn saturated_prediction_has_no_loss() {
        let logits = [-30.0, 30.0, -30.0];
        assert!(soft_cross_entropy(&logits, &[0.0, 1.0, 0.0]).unwrap() < 1e-6);
    }

    #[test]
    fn uniform_prediction_costs_ln2() {
        let ln2 = std::f64::consts::LN_2;
        assert_abs_diff_eq!(soft_cross_entropy(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), ln2, epsilon = 1e-12);
        assert_abs_diff_eq!(soft_cross_entropy(&[0.0, 0.0], &[0.25, 0.75]).unwrap(), ln2, epsilon = 1e-12);
        assert!(soft_cross_entropy(&[0.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_with_temperature(&[1.0, -2.0, 0.5], &[1.0, -2.0, 0.5], 4.0).unwrap(), 0.0);
        // teacher (0.8, 0.2) ⇔ logits (ln 4, 0); student uniform
        let v = kl_with_temperature(&[0.0, 0.0], &[4f64.ln(), 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(v, 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.1927, epsilon = 5e-5);
        assert!(matches!(
            kl_with_temperature(&[0.0], &[0.0], 0.0),
            Err(Error::InvalidHyperparameter { .. })
        ));
    }

    #[test]
    fn temperature_rescaling_identity() {
        let (s, t, temp) = ([1.5, -0.5, 2.0], [0.2, 0.9, -1.0], 3.0);
        let scaled_s: Vec<f64> = s.iter().map(|v| v / temp).collect();
        let scaled_t: Vec<f64> = t.iter().map(|v| v / temp).collect();
        let lhs = kl_with_temperature(&s, &t, temp).unwrap();
        let rhs = temp * temp * kl_with_temperature(&scaled_s, &scaled_t, 1.0).unwrap();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn feature_kd_examples() {
        let f = Tensor::from_fn(&[2, 3, 3], |i| i as f64 * 0.1);
        assert_eq!(feature_kd(&f, &f).unwrap(), 0.0);
        let ones = Tensor::full(&[2, 2, 2], 1.0);
        let zeros = Tensor::zeros(&[2, 2, 2]);
        assert_abs_diff_eq!(feature_kd(&ones, &zeros).unwrap(), 8f64.sqrt() / 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(feature_kd(&ones, &zeros).unwrap(), 0.35355, epsilon = 1e-5);
        assert_eq!(resize_feature(&f, &[2, 3, 3]).unwrap(), f);
    }

    #[test]
    fn resize_keeps_constants_and_reaches_target_shape() {
        let f = Tensor::full(&[4, 4, 4], 2.5);
        let r = resize_feature(&f, &[2, 3, 5]).unwrap();
        assert_eq!(r.shape(), &[2, 3, 5]);
        assert!(r.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        // a 2-wide ramp upsampled to 4 with half-pixel centers
        let ramp = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let up = resize_feature(&ramp, &[1, 1, 4]).unwrap();
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn confidence_weight_examples() {
        assert_eq!(confidence_weight(0.7, 0.7), 0.5);
        assert_eq!(confidence_weights(1.0, 3.0, 2.0, 2.0), (0.75, 0.5));
        assert_eq!(confidence_weight(0.0, 0.0), 0.5);
        // the teacher's mirror weight completes the student's to 1
        let (ls, lt) = (0.3, 1.9);
        assert_abs_diff_eq!(confidence_weight(ls, lt) + confidence_weight(lt, ls), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn warmup_examples() {
        assert_eq!(warmup_factor(0, 20), 0.0);
        assert_eq!(warmup_factor(10, 20), 0.5);
        assert_eq!(warmup_factor(20, 20), 1.0);
        assert_eq!(warmup_factor(57, 20), 1.0);
        assert_eq!(warmup_factor(0, 0), 1.0);
    }

    #[test]
    fn total_loss_examples() {
        let hp = KdHyperparams::default();
        let parts = LossParts {
            cls: 1.0,
            m_logit: 0.5,
            fea: 0.25,
            e_logit: 0.1,
        };
        assert_abs_diff_eq!(total_loss(parts, &hp, 1.0).total, 3.21, epsilon = 1e-12);
        assert_eq!(total_loss(parts, &hp, 0.0).total, 1.0);
        assert_eq!(total_loss(LossParts::default(), &hp, 1.0).total, 0.0);
    }

    proptest! {
        #[test]
        fn losses_are_finite_and_non_negative(
            s in prop::collection::vec(-1e4f64..1e4, 5),
            t in prop::collection::vec(-1e4f64..1e4, 5),
            temp in 0.5f64..10.0,
        ) {
            let kl = kl_with_temperature(&s, &t, temp).unwrap();
            prop_assert!(kl.is_finite() && kl >= 0.0);
            let target = softmax(&t);
            let ce = soft_cross_entropy(&s, &target).unwrap();
            prop_assert!(ce.is_finite() && ce >= -1e-9);
        }

        #[test]
        fn breakdown_invariant_holds(
            cls in 0.0f64..10.0, m in 0.0f64..10.0, f in 0.0f64..10.0, e in 0.0f64..10.0, w in 0.0f64..=1.0,
        ) {
            let hp = KdHyperparams::default();
            let b = total_loss(LossParts { cls, m_logit: m, fea: f, e_logit: e }, &hp, w);
            let expected = cls + w * (hp.beta * m + hp.gamma * f + hp.delta * e);
            prop_assert!((b.total - expected).abs() <= 1e-12 * (1.0 + expected));
            prop_assert!(b.total >= 0.0);
        }
    }
}
