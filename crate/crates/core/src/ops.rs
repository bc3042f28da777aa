//! Softmax over the class axis and hard pseudo-labelling.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::maps::{LogitMap, MaskMap, ProbMap, Shape};

/// Per-pixel softmax over the class axis. Stable under large logits.
pub fn softmax(logits: &LogitMap) -> ProbMap {
    let shape = logits.shape();
    let src = logits.as_slice();
    let mut out = vec![0.0; src.len()];
    for_each_pixel(shape, |idx| {
        let max = idx.iter().map(|&i| src[i]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &i in idx {
            let e = libm::exp(src[i] - max);
            out[i] = e;
            sum += e;
        }
        for &i in idx {
            out[i] /= sum;
        }
    });
    ProbMap::from_raw(shape, out)
}

/// Vector-Jacobian product of [`softmax`]: maps a gradient with respect to
/// the probabilities onto the logits that produced them.
pub fn softmax_backward(probs: &ProbMap, grad_probs: &[f64]) -> Vec<f64> {
    let shape = probs.shape();
    let p = probs.as_slice();
    assert_eq!(p.len(), grad_probs.len(), "gradient length mismatch");
    let mut out = vec![0.0; p.len()];
    for_each_pixel(shape, |idx| {
        let dot: f64 = idx.iter().map(|&i| p[i] * grad_probs[i]).sum();
        for &i in idx {
            out[i] = p[i] * (grad_probs[i] - dot);
        }
    });
    out
}

/// Hard pseudo-labels: per-pixel argmax, lowest class index on ties.
///
/// The returned mask is a plain integer map, so nothing computed from it can
/// carry gradient back to the model that produced `probs`.
pub fn one_hot_encode(probs: &ProbMap) -> MaskMap {
    argmax(probs.shape(), probs.as_slice())
}

/// Per-pixel argmax of raw scores, same tie rule as [`one_hot_encode`].
pub fn argmax_logits(logits: &LogitMap) -> MaskMap {
    argmax(logits.shape(), logits.as_slice())
}

fn argmax(shape: Shape, values: &[f64]) -> MaskMap {
    let mut labels = Vec::with_capacity(shape.pixels());
    for b in 0..shape.batch {
        for y in 0..shape.height {
            for x in 0..shape.width {
                let mut best = 0;
                let mut best_v = values[shape.index(b, 0, y, x)];
                for c in 1..shape.classes {
                    let v = values[shape.index(b, c, y, x)];
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                labels.push(best as u8);
            }
        }
    }
    MaskMap::new(shape.batch, shape.height, shape.width, shape.classes, labels)
        .expect("argmax yields valid class indices")
}

/// Calls `f` with the flat indices of the class entries of every pixel.
pub(crate) fn for_each_pixel(shape: Shape, mut f: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; shape.classes];
    for b in 0..shape.batch {
        for y in 0..shape.height {
            for x in 0..shape.width {
                for (c, slot) in idx.iter_mut().enumerate() {
                    *slot = shape.index(b, c, y, x);
                }
                f(&idx);
            }
        }
    }
}

/// Validates logits then applies [`softmax`].
pub fn softmax_checked(shape: Shape, logits: Vec<f64>) -> Result<ProbMap> {
    Ok(softmax(&LogitMap::new(shape, logits)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn logits(classes: usize, values: &[f64]) -> LogitMap {
        let n = values.len() / classes;
        LogitMap::new(Shape::new(1, classes, 1, n), values.to_vec()).unwrap()
    }

    #[test]
    fn zero_logits_give_uniform() {
        let p = softmax(&logits(2, &[0.0; 8]));
        assert!(p.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saturated_logits() {
        let p = softmax(&logits(2, &[1000.0, 0.0]));
        assert_abs_diff_eq!(p.get(0, 0, 0, 0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.get(0, 1, 0, 0), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn unit_logit_closed_form() {
        // e / (e + 1) and 1 / (e + 1), evaluated separately.
        let p = softmax(&logits(2, &[1.0, 0.0]));
        assert_abs_diff_eq!(p.get(0, 0, 0, 0), 0.731_058_578_630_004_9, epsilon = 1e-15);
        assert_abs_diff_eq!(p.get(0, 1, 0, 0), 0.268_941_421_369_995_1, epsilon = 1e-15);
    }

    #[test]
    fn ties_break_to_lowest_class() {
        let s = Shape::new(1, 2, 1, 2);
        let p = ProbMap::new(s, vec![0.5, 0.9, 0.5, 0.1]).unwrap();
        assert_eq!(one_hot_encode(&p).as_slice(), &[0, 0]);
    }

    #[test]
    fn one_hot_round_trip() {
        let m = MaskMap::new(2, 2, 2, 3, vec![0, 1, 2, 2, 1, 0, 0, 1]).unwrap();
        assert_eq!(one_hot_encode(&m.one_hot()), m);
    }
}
