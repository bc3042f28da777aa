//! Training losses and their analytic gradients.
//!
//! Every loss takes probability maps (post-softmax) and returns a scalar.
//! The `*_grad` variants also return the gradient with respect to each
//! probability input, laid out like the input; chain it through
//! [`crate::ops::softmax_backward`] to reach the logits.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::{LossToggles, LossWeights};
use crate::error::{Error, Result};
use crate::maps::{MaskMap, ProbMap};
use crate::ops::{for_each_pixel, one_hot_encode};

/// Clamp applied to probabilities before any logarithm or division.
pub const PROB_EPS: f64 = 1e-8;
/// Additive smoothing in the Dice numerator and denominator.
pub const DICE_SMOOTH: f64 = 1e-5;

fn check_target(probs: &ProbMap, target: &MaskMap, context: &'static str) -> Result<()> {
    probs.shape().ensure_same(&target.shape(), context)
}

/// Mean per-pixel negative log-likelihood of the target class.
pub fn ce_loss(probs: &ProbMap, target: &MaskMap) -> Result<f64> {
    ce_loss_grad(probs, target).map(|(v, _)| v)
}

pub fn ce_loss_grad(probs: &ProbMap, target: &MaskMap) -> Result<(f64, Vec<f64>)> {
    check_target(probs, target, "cross-entropy")?;
    let shape = probs.shape();
    let n = shape.pixels() as f64;
    let mut grad = vec![0.0; shape.len()];
    let mut total = 0.0;
    for b in 0..shape.batch {
        for y in 0..shape.height {
            for x in 0..shape.width {
                let c = usize::from(target.get(b, y, x));
                let i = shape.index(b, c, y, x);
                let p = probs.as_slice()[i];
                if p > PROB_EPS {
                    total -= libm::log(p);
                    grad[i] = -1.0 / (n * p);
                } else {
                    total -= libm::log(PROB_EPS);
                }
            }
        }
    }
    Ok((total / n, grad))
}

/// Soft Dice coefficient of every class, pooled over the batch.
pub fn dice_per_class(probs: &ProbMap, target: &MaskMap) -> Result<Vec<f64>> {
    check_target(probs, target, "dice")?;
    let (inter, sums) = dice_terms(probs, target);
    Ok(inter
        .iter()
        .zip(&sums)
        .map(|(&i, &s)| (2.0 * i + DICE_SMOOTH) / (s + DICE_SMOOTH))
        .collect())
}

fn dice_terms(probs: &ProbMap, target: &MaskMap) -> (Vec<f64>, Vec<f64>) {
    let shape = probs.shape();
    let mut inter = vec![0.0; shape.classes];
    let mut sums = vec![0.0; shape.classes];
    for b in 0..shape.batch {
        for y in 0..shape.height {
            for x in 0..shape.width {
                let t = usize::from(target.get(b, y, x));
                for c in 0..shape.classes {
                    let p = probs.get(b, c, y, x);
                    sums[c] += p;
                    if c == t {
                        inter[c] += p;
                        sums[c] += 1.0;
                    }
                }
            }
        }
    }
    (inter, sums)
}

/// `1 − mean_c Dice_c`, in `[0, 1]`.
pub fn dice_loss(probs: &ProbMap, target: &MaskMap) -> Result<f64> {
    dice_loss_grad(probs, target).map(|(v, _)| v)
}

pub fn dice_loss_grad(probs: &ProbMap, target: &MaskMap) -> Result<(f64, Vec<f64>)> {
    check_target(probs, target, "dice")?;
    let shape = probs.shape();
    let classes = shape.classes as f64;
    let (inter, sums) = dice_terms(probs, target);
    let mut mean = 0.0;
    let mut num = vec![0.0; shape.classes];
    let mut den = vec![0.0; shape.classes];
    for c in 0..shape.classes {
        num[c] = 2.0 * inter[c] + DICE_SMOOTH;
        den[c] = sums[c] + DICE_SMOOTH;
        mean += num[c] / den[c];
    }
    mean /= classes;
    let mut grad = vec![0.0; shape.len()];
    for b in 0..shape.batch {
        for y in 0..shape.height {
            for x in 0..shape.width {
                let t = usize::from(target.get(b, y, x));
                for c in 0..shape.classes {
                    let g = if c == t { 1.0 } else { 0.0 };
                    let d = (2.0 * g * den[c] - num[c]) / (den[c] * den[c]);
                    grad[shape.index(b, c, y, x)] = -d / classes;
                }
            }
        }
    }
    Ok((1.0 - mean, grad))
}

/// Cross-entropy plus Dice.
pub fn supervised_loss(probs: &ProbMap, target: &MaskMap) -> Result<f64> {
    Ok(ce_loss(probs, target)? + dice_loss(probs, target)?)
}

pub fn supervised_loss_grad(probs: &ProbMap, target: &MaskMap) -> Result<(f64, Vec<f64>)> {
    let (ce, mut grad) = ce_loss_grad(probs, target)?;
    let (dice, dgrad) = dice_loss_grad(probs, target)?;
    grad.iter_mut().zip(dgrad).for_each(|(g, d)| *g += d);
    Ok((ce + dice, grad))
}

/// Cross pseudo-supervision between two models' predictions on the same
/// unlabelled batch. Values and the gradients that reach each model.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSupervision {
    /// Supervised loss of `p1` against the hard labels of `p2`.
    pub semi1: f64,
    /// Supervised loss of `p2` against the hard labels of `p1`.
    pub semi2: f64,
    /// ∂semi1/∂p1. There is no ∂semi1/∂p2: the labels are integer masks.
    pub grad1: Vec<f64>,
    /// ∂semi2/∂p2.
    pub grad2: Vec<f64>,
}

pub fn cross_supervision_losses(p1: &ProbMap, p2: &ProbMap) -> Result<(f64, f64)> {
    let cs = cross_supervision_grads(p1, p2)?;
    Ok((cs.semi1, cs.semi2))
}

pub fn cross_supervision_grads(p1: &ProbMap, p2: &ProbMap) -> Result<CrossSupervision> {
    p1.shape().ensure_same(&p2.shape(), "cross supervision")?;
    let pseudo1 = one_hot_encode(p1);
    let pseudo2 = one_hot_encode(p2);
    let (semi1, grad1) = supervised_loss_grad(p1, &pseudo2)?;
    let (semi2, grad2) = supervised_loss_grad(p2, &pseudo1)?;
    Ok(CrossSupervision {
        semi1,
        semi2,
        grad1,
        grad2,
    })
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::InvalidArgument(alloc::format!(
            "mix ratio {sigma} outside [0, 1]"
        )));
    }
    Ok(())
}

/// `sigma·x_i + (1 − sigma)·x_j`, elementwise.
pub fn mixup(x_i: &[f32], x_j: &[f32], sigma: f64) -> Result<Vec<f32>> {
    check_sigma(sigma)?;
    if x_i.len() != x_j.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "mixup operands differ in length: {} vs {}",
            x_i.len(),
            x_j.len()
        )));
    }
    let s = sigma as f32;
    Ok(x_i
        .iter()
        .zip(x_j)
        .map(|(&a, &b)| s * a + (1.0 - s) * b)
        .collect())
}

/// Mixup of two distributions; the result is again a distribution.
pub fn mix_probs(p_i: &ProbMap, p_j: &ProbMap, sigma: f64) -> Result<ProbMap> {
    check_sigma(sigma)?;
    p_i.shape().ensure_same(&p_j.shape(), "mixup")?;
    let data = p_i
        .as_slice()
        .iter()
        .zip(p_j.as_slice())
        .map(|(&a, &b)| sigma * a + (1.0 - sigma) * b)
        .collect();
    Ok(ProbMap::from_raw(p_i.shape(), data))
}

/// Mean squared difference between the student's prediction on the mixed
/// input and the mix of the teacher's predictions on the two halves.
pub fn interpolation_consistency_loss(
    student: &ProbMap,
    teacher_i: &ProbMap,
    teacher_j: &ProbMap,
    sigma: f64,
) -> Result<f64> {
    interpolation_consistency_grad(student, teacher_i, teacher_j, sigma).map(|(v, _)| v)
}

/// Gradient flows to the student only; teacher maps are constants.
pub fn interpolation_consistency_grad(
    student: &ProbMap,
    teacher_i: &ProbMap,
    teacher_j: &ProbMap,
    sigma: f64,
) -> Result<(f64, Vec<f64>)> {
    student
        .shape()
        .ensure_same(&teacher_i.shape(), "interpolation consistency")?;
    let target = mix_probs(teacher_i, teacher_j, sigma)?;
    let m = student.shape().len() as f64;
    let mut total = 0.0;
    let grad = student
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&s, &t)| {
            let d = s - t;
            total += d * d;
            2.0 * d / m
        })
        .collect();
    Ok((total / m, grad))
}

/// Mean over pixels of `KL(p1 ‖ p2)` with both inputs clamped at
/// [`PROB_EPS`].
pub fn kl_pixel_loss(p1: &ProbMap, p2: &ProbMap) -> Result<f64> {
    kl_pixel_grad(p1, p2).map(|(v, _, _)| v)
}

pub fn kl_pixel_grad(p1: &ProbMap, p2: &ProbMap) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    p1.shape().ensure_same(&p2.shape(), "kl divergence")?;
    let n = p1.shape().pixels() as f64;
    let a = p1.as_slice();
    let b = p2.as_slice();
    let mut g1 = vec![0.0; a.len()];
    let mut g2 = vec![0.0; a.len()];
    let mut total = 0.0;
    for i in 0..a.len() {
        let q1 = a[i].max(PROB_EPS);
        let q2 = b[i].max(PROB_EPS);
        let log_ratio = libm::log(q1) - libm::log(q2);
        total += q1 * log_ratio;
        if a[i] > PROB_EPS {
            g1[i] = (log_ratio + 1.0) / n;
        }
        if b[i] > PROB_EPS {
            g2[i] = -q1 / (q2 * n);
        }
    }
    // Clamping can leave tiny negative sums where both inputs are ≈ 0.
    Ok((total.max(0.0) / n, g1, g2))
}

/// Mean pairwise cosine similarity between the class-probability planes of
/// each image, averaged over the batch. In `[0, 1]`.
pub fn inter_class_similarity(p: &ProbMap) -> f64 {
    inter_class_similarity_grad(p).0
}

pub fn inter_class_similarity_grad(p: &ProbMap) -> (f64, Vec<f64>) {
    let shape = p.shape();
    let plane = shape.plane();
    let data = p.as_slice();
    let pairs = (shape.classes * (shape.classes - 1) / 2) as f64;
    let scale = 1.0 / (pairs * shape.batch as f64);
    let mut grad = vec![0.0; data.len()];
    let mut total = 0.0;
    for b in 0..shape.batch {
        let start = |c: usize| shape.index(b, c, 0, 0);
        let norms: Vec<f64> = (0..shape.classes)
            .map(|c| libm::sqrt(data[start(c)..start(c) + plane].iter().map(|v| v * v).sum()))
            .collect();
        for c in 0..shape.classes {
            for d in c + 1..shape.classes {
                let u = &data[start(c)..start(c) + plane];
                let v = &data[start(d)..start(d) + plane];
                let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                let denom = norms[c] * norms[d] + PROB_EPS;
                total += dot / denom;
                // ∂cos/∂u = v/D − dot·‖v‖·u / (‖u‖·D²)
                let coef_u = if norms[c] > 0.0 {
                    dot * norms[d] / (norms[c] * denom * denom)
                } else {
                    0.0
                };
                let coef_v = if norms[d] > 0.0 {
                    dot * norms[c] / (norms[d] * denom * denom)
                } else {
                    0.0
                };
                for k in 0..plane {
                    grad[start(c) + k] += scale * (v[k] / denom - coef_u * u[k]);
                    grad[start(d) + k] += scale * (u[k] / denom - coef_v * v[k]);
                }
            }
        }
    }
    (total * scale, grad)
}

/// Mean over pixels of the largest class probability. In `[1/C, 1]`.
pub fn intra_pixel_confidence(p: &ProbMap) -> f64 {
    intra_pixel_confidence_grad(p).0
}

pub fn intra_pixel_confidence_grad(p: &ProbMap) -> (f64, Vec<f64>) {
    let shape = p.shape();
    let n = shape.pixels() as f64;
    let data = p.as_slice();
    let mut grad = vec![0.0; data.len()];
    let mut total = 0.0;
    for_each_pixel(shape, |idx| {
        let mut best = idx[0];
        for &i in &idx[1..] {
            if data[i] > data[best] {
                best = i;
            }
        }
        total += data[best];
        grad[best] = 1.0 / n;
    });
    (total / n, grad)
}

/// Gap between inter-class similarity and intra-pixel confidence, averaged
/// over both models and shifted by one so it lies in `[0, 2]`.
pub fn mig_loss(p1: &ProbMap, p2: &ProbMap) -> Result<f64> {
    mig_grad(p1, p2).map(|(v, _, _)| v)
}

pub fn mig_grad(p1: &ProbMap, p2: &ProbMap) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    p1.shape().ensure_same(&p2.shape(), "mig")?;
    if p1.shape().classes < 2 {
        return Err(Error::TooFewClasses {
            min: 2,
            actual: p1.shape().classes,
        });
    }
    let gap = |p: &ProbMap| {
        let (ics, gi) = inter_class_similarity_grad(p);
        let (ipc, gc) = intra_pixel_confidence_grad(p);
        let grad: Vec<f64> = gi.iter().zip(&gc).map(|(a, b)| 0.5 * (a - b)).collect();
        (ics - ipc, grad)
    };
    let (gap1, g1) = gap(p1);
    let (gap2, g2) = gap(p2);
    Ok(((gap1 + gap2) / 2.0 + 1.0, g1, g2))
}

/// Mutual agreement loss: pixel KL plus MIG. Gradients reach both inputs.
pub fn mac_loss(p1: &ProbMap, p2: &ProbMap) -> Result<f64> {
    mac_grad(p1, p2).map(|(v, _, _)| v)
}

pub fn mac_grad(p1: &ProbMap, p2: &ProbMap) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (kl, mut g1, mut g2) = kl_pixel_grad(p1, p2)?;
    let (mig, m1, m2) = mig_grad(p1, p2)?;
    g1.iter_mut().zip(m1).for_each(|(g, m)| *g += m);
    g2.iter_mut().zip(m2).for_each(|(g, m)| *g += m);
    Ok((kl + mig, g1, g2))
}

/// Unweighted loss components of one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub sup1: f64,
    pub sup2: f64,
    pub semi1: f64,
    pub semi2: f64,
    pub con: f64,
    pub mac: f64,
}

/// Loss components together with the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub sup1: f64,
    pub sup2: f64,
    pub semi1: f64,
    pub semi2: f64,
    pub con: f64,
    pub mac: f64,
    pub total: f64,
}

impl LossBundle {
    /// Recomputes the weighted sum from the stored components.
    pub fn weighted_sum(&self, weights: &LossWeights) -> f64 {
        (self.sup1 + self.sup2)
            + weights.lambda * (self.semi1 + self.semi2)
            + weights.tau * self.con
            + weights.beta * self.mac
    }

    pub fn components(&self) -> [f64; 6] {
        [self.sup1, self.sup2, self.semi1, self.semi2, self.con, self.mac]
    }
}

/// `(sup1 + sup2) + λ(semi1 + semi2) + τ·con + β·mac`; disabled losses
/// contribute exactly zero and are recorded as zero.
pub fn total_loss(c: &LossComponents, weights: &LossWeights, toggles: &LossToggles) -> LossBundle {
    let (semi1, semi2) = if toggles.semi {
        (c.semi1, c.semi2)
    } else {
        (0.0, 0.0)
    };
    let con = if toggles.con { c.con } else { 0.0 };
    let mac = if toggles.mac { c.mac } else { 0.0 };
    let mut bundle = LossBundle {
        sup1: c.sup1,
        sup2: c.sup2,
        semi1,
        semi2,
        con,
        mac,
        total: 0.0,
    };
    bundle.total = bundle.weighted_sum(weights);
    bundle
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::Shape;
    use approx::assert_abs_diff_eq;

    fn constant(shape: Shape, per_class: &[f64]) -> ProbMap {
        let mut data = vec![0.0; shape.len()];
        for i in 0..shape.len() {
            let (_, c, _, _) = shape.unravel(i);
            data[i] = per_class[c];
        }
        ProbMap::new(shape, data).unwrap()
    }

    fn zeros_mask(shape: Shape) -> MaskMap {
        MaskMap::new(shape.batch, shape.height, shape.width, shape.classes, vec![0; shape.pixels()]).unwrap()
    }

    #[test]
    fn ce_of_perfect_prediction_is_zero() {
        let m = MaskMap::new(1, 2, 2, 2, vec![0, 1, 1, 0]).unwrap();
        let p = m.one_hot();
        assert_abs_diff_eq!(ce_loss(&p, &m).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ce_closed_forms() {
        let s = Shape::new(1, 2, 3, 3);
        let y = zeros_mask(s);
        assert_abs_diff_eq!(ce_loss(&constant(s, &[0.5, 0.5]), &y).unwrap(), core::f64::consts::LN_2, epsilon = 1e-12);
        // ln 4
        assert_abs_diff_eq!(ce_loss(&constant(s, &[0.25, 0.75]), &y).unwrap(), 1.386_294_361_119_890_6, epsilon = 1e-12);
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let m = MaskMap::new(1, 2, 2, 2, vec![0, 1, 1, 0]).unwrap();
        assert_abs_diff_eq!(dice_loss(&m.one_hot(), &m).unwrap(), 0.0, epsilon = 1e-9);
        let flipped = MaskMap::new(1, 2, 2, 2, vec![1, 0, 0, 1]).unwrap();
        let per_class = dice_per_class(&flipped.one_hot(), &m).unwrap();
        assert!(per_class[1] < 1e-5, "foreground dice {}", per_class[1]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = constant(Shape::new(1, 2, 2, 2), &[0.5, 0.5]);
        let b = constant(Shape::new(1, 2, 2, 3), &[0.5, 0.5]);
        assert!(matches!(kl_pixel_loss(&a, &b), Err(Error::ShapeMismatch { .. })));
        assert!(mig_loss(&a, &b).is_err());
        assert!(interpolation_consistency_loss(&a, &b, &b, 0.5).is_err());
        assert!(cross_supervision_losses(&a, &b).is_err());
        assert!(ce_loss(&a, &zeros_mask(b.shape())).is_err());
    }

    #[test]
    fn mixup_edge_cases() {
        let x = [0.1f32, 0.7, 0.3];
        assert_eq!(mixup(&x, &x, 0.5).unwrap(), x);
        assert_eq!(mixup(&x, &[9.0, 9.0, 9.0], 1.0).unwrap(), x);
        assert_eq!(mixup(&[0.0; 4], &[1.0; 4], 0.5).unwrap(), [0.5; 4]);
        assert!(mixup(&x, &x[..2], 0.5).is_err());
        assert!(mixup(&x, &x, 1.5).is_err());
    }

    #[test]
    fn consistency_closed_forms() {
        let s = Shape::new(2, 2, 3, 3);
        let ones = ProbMap::from_raw(s, vec![1.0; s.len()]);
        let zeros = ProbMap::from_raw(s, vec![0.0; s.len()]);
        assert_abs_diff_eq!(interpolation_consistency_loss(&ones, &zeros, &zeros, 0.5).unwrap(), 1.0);
        let a = constant(s, &[0.2, 0.8]);
        let b = constant(s, &[0.6, 0.4]);
        let mixed = mix_probs(&a, &b, 0.5).unwrap();
        assert_eq!(interpolation_consistency_loss(&mixed, &a, &b, 0.5).unwrap(), 0.0);
        let st = constant(s, &[0.9, 0.1]);
        assert_eq!(
            interpolation_consistency_loss(&st, &a, &b, 0.5).unwrap(),
            interpolation_consistency_loss(&st, &b, &a, 0.5).unwrap()
        );
    }

    #[test]
    fn mig_extremes() {
        let s = Shape::new(1, 2, 2, 2);
        // disjoint confident supports
        let m = MaskMap::new(1, 2, 2, 2, vec![0, 1, 1, 0]).unwrap().one_hot();
        assert_abs_diff_eq!(mig_loss(&m, &m).unwrap(), 0.0, epsilon = 1e-8);
        let u = constant(s, &[0.5, 0.5]);
        assert_abs_diff_eq!(inter_class_similarity(&u), 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(intra_pixel_confidence(&u), 0.5);
        assert_abs_diff_eq!(mig_loss(&u, &u).unwrap(), 1.5, epsilon = 1e-8);
    }

    #[test]
    fn total_loss_arithmetic() {
        let c = LossComponents {
            sup1: 1.0,
            sup2: 1.0,
            semi1: 1.0,
            semi2: 1.0,
            con: 1.0,
            mac: 1.0,
        };
        let w = LossWeights::default();
        let all = total_loss(&c, &w, &LossToggles::all());
        assert_eq!(all.total, 23.0);
        let none = total_loss(&c, &w, &LossToggles::none());
        assert_eq!(none.total, 2.0);
        assert_eq!((none.semi1, none.con, none.mac), (0.0, 0.0, 0.0));
    }
}
