//! Dice score and boundary-distance metrics for binary masks.
//!
//! Boundaries are the 4-connected erosion residue of the foreground (pixels
//! outside the image count as background). Nearest boundary distances come
//! from an exact squared Euclidean distance transform, so every distance is
//! the square root of an integer and agrees bit-for-bit with an all-pairs
//! search.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::MaskMap;

/// Foreground pixels of a single-image mask (any non-zero class).
fn foreground(mask: &MaskMap) -> Vec<bool> {
    mask.as_slice().iter().map(|&v| v != 0).collect()
}

fn check_pair(pred: &MaskMap, gt: &MaskMap) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch { context: "metric", left: pred.shape(), right: gt.shape() });
    }
    if pred.batch() != 1 {
        return Err(Error::InvalidArgument(format!("metrics take one image, got batch {}", pred.batch())));
    }
    Ok(())
}

/// Dice similarity in percent; two empty masks score 100.
pub fn dsc(pred: &MaskMap, gt: &MaskMap) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch { context: "dsc", left: pred.shape(), right: gt.shape() });
    }
    let (p, g) = (foreground(pred), foreground(gt));
    let inter = p.iter().zip(&g).filter(|(a, b)| **a && **b).count();
    let total = p.iter().filter(|v| **v).count() + g.iter().filter(|v| **v).count();
    if total == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / total as f64)
}

/// 4-connected boundary of a `h×w` foreground plane.
pub fn boundary(fg: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && fg[y as usize * w + x as usize];
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

const INF: i64 = i64::MAX / 4;

/// 1-D lower envelope of parabolas (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[i64], out: &mut [i64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let first = match f.iter().position(|&x| x < INF) {
        Some(i) => i,
        None => {
            out.fill(INF);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if f[q] >= INF {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as i64) - (f[p] + (p * p) as i64)) as f64 / (2 * (q - p)) as f64;
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as i64 - p as i64;
        *o = d * d + f[p];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel
/// of `sites`; `None` when `sites` is empty.
pub fn squared_edt(sites: &[bool], h: usize, w: usize) -> Option<Vec<i64>> {
    if !sites.iter().any(|s| *s) {
        return None;
    }
    let n = h.max(w);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut col = vec![0i64; h];
    let mut col_out = vec![0i64; h];
    let mut grid = vec![INF; h * w];
    for x in 0..w {
        for y in 0..h {
            col[y] = if sites[y * w + x] { 0 } else { INF };
        }
        edt_1d(&col, &mut col_out, &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0i64; w];
    for y in 0..h {
        let row = &grid[y * w..(y + 1) * w];
        edt_1d(row, &mut row_out, &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    Some(grid)
}

/// Nearest-boundary distances from each boundary pixel of `a` to the
/// boundary of `b`, followed by those from `b` to `a`. `None` if either mask
/// has no foreground.
pub fn surface_distances(pred: &MaskMap, gt: &MaskMap) -> Result<Option<Vec<f64>>> {
    check_pair(pred, gt)?;
    let (h, w) = (pred.height(), pred.width());
    let ba = boundary(&foreground(pred), h, w);
    let bb = boundary(&foreground(gt), h, w);
    let (da, db) = match (squared_edt(&ba, h, w), squared_edt(&bb, h, w)) {
        (Some(da), Some(db)) => (da, db),
        _ => return Ok(None),
    };
    let mut out = Vec::new();
    for (i, _) in ba.iter().enumerate().filter(|(_, b)| **b) {
        out.push(libm::sqrt(db[i] as f64));
    }
    for (i, _) in bb.iter().enumerate().filter(|(_, b)| **b) {
        out.push(libm::sqrt(da[i] as f64));
    }
    Ok(Some(out))
}

/// Linear-interpolation percentile of `values` (`q` in `[0, 100]`).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = libm::floor(rank) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * t
}

/// Mean accumulated in ascending order, so the result does not depend on
/// which mask came first.
pub fn mean_sorted(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Distance reported when exactly one of the masks is empty.
pub fn sentinel(h: usize, w: usize) -> f64 {
    libm::sqrt((h * h + w * w) as f64)
}

/// Outcome of comparing a distance metric's inputs.
enum Surface {
    BothEmpty,
    OneEmpty,
    Distances(Vec<f64>),
}

fn surface(pred: &MaskMap, gt: &MaskMap) -> Result<Surface> {
    let p_any = pred.as_slice().iter().any(|&v| v != 0);
    let g_any = gt.as_slice().iter().any(|&v| v != 0);
    check_pair(pred, gt)?;
    Ok(match (p_any, g_any) {
        (false, false) => Surface::BothEmpty,
        (true, true) => Surface::Distances(surface_distances(pred, gt)?.expect("non-empty masks have boundaries")),
        _ => Surface::OneEmpty,
    })
}

/// 95th percentile of the pooled symmetric boundary distances.
pub fn hd95(pred: &MaskMap, gt: &MaskMap) -> Result<f64> {
    Ok(match surface(pred, gt)? {
        Surface::BothEmpty => 0.0,
        Surface::OneEmpty => sentinel(pred.height(), pred.width()),
        Surface::Distances(d) => percentile(&d, 95.0),
    })
}

/// Mean of the pooled symmetric boundary distances.
pub fn asd(pred: &MaskMap, gt: &MaskMap) -> Result<f64> {
    Ok(match surface(pred, gt)? {
        Surface::BothEmpty => 0.0,
        Surface::OneEmpty => sentinel(pred.height(), pred.width()),
        Surface::Distances(d) => mean_sorted(d),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub dsc: f64,
    pub hd95: f64,
    pub asd: f64,
    /// Prediction empty while the ground truth is not.
    pub empty_pred: bool,
}

impl ImageMetrics {
    pub fn compute(id: impl Into<String>, pred: &MaskMap, gt: &MaskMap) -> Result<Self> {
        let empty_pred = pred.as_slice().iter().all(|&v| v == 0) && gt.as_slice().iter().any(|&v| v != 0);
        let (hd, mean) = match surface(pred, gt)? {
            Surface::BothEmpty => (0.0, 0.0),
            Surface::OneEmpty => {
                let s = sentinel(pred.height(), pred.width());
                (s, s)
            }
            Surface::Distances(d) => (percentile(&d, 95.0), mean_sorted(d)),
        };
        Ok(Self { id: id.into(), dsc: dsc(pred, gt)?, hd95: hd, asd: mean, empty_pred })
    }
}

/// Per-image metrics and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dsc: f64,
    pub hd95: f64,
    pub asd: f64,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::InvalidArgument("cannot report on an empty dataset".into()));
        }
        let n = per_image.len() as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        Ok(Self { dsc: mean(|m| m.dsc), hd95: mean(|m| m.hd95), asd: mean(|m| m.asd), per_image })
    }

    pub fn empty_predictions(&self) -> usize {
        self.per_image.iter().filter(|m| m.empty_pred).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> MaskMap {
        let mut d = vec![0u8; h * w];
        for &(y, x) in on {
            d[y * w + x] = 1;
        }
        MaskMap::binary(h, w, d).unwrap()
    }

    fn square(y0: usize, x0: usize, side: usize) -> MaskMap {
        let mut on = Vec::new();
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                on.push((y, x));
            }
        }
        mask(16, 16, &on)
    }

    #[test]
    fn dsc_cases() {
        let a = square(2, 2, 4);
        assert_eq!(dsc(&a, &a).unwrap(), 100.0);
        assert_eq!(dsc(&a, &square(10, 10, 4)).unwrap(), 0.0);
        assert_eq!(dsc(&a, &square(2, 4, 4)).unwrap(), 50.0);
    }

    #[test]
    fn shifted_pixel() {
        let a = mask(8, 8, &[(4, 1)]);
        let b = mask(8, 8, &[(4, 4)]);
        assert_eq!(hd95(&a, &b).unwrap(), 3.0);
        assert_eq!(asd(&a, &b).unwrap(), 3.0);
    }

    #[test]
    fn identical_is_zero() {
        let a = square(3, 5, 6);
        let m = ImageMetrics::compute("x", &a, &a).unwrap();
        assert_eq!((m.dsc, m.hd95, m.asd), (100.0, 0.0, 0.0));
    }

    #[test]
    fn empty_prediction_sentinel() {
        let gt = square(3, 3, 3);
        let m = ImageMetrics::compute("x", &mask(16, 16, &[]), &gt).unwrap();
        assert!(m.empty_pred);
        assert_eq!(m.hd95, sentinel(16, 16));
        assert_eq!(m.dsc, 0.0);
    }

    #[test]
    fn boundary_of_square_is_ring() {
        let fg = foreground(&square(0, 0, 3));
        let b = boundary(&fg, 16, 16);
        assert_eq!(b.iter().filter(|v| **v).count(), 8);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[0.0, 10.0], 95.0), 9.5);
        assert_eq!(percentile(&[4.0], 95.0), 4.0);
    }

    #[test]
    fn report_means() {
        let a = square(2, 2, 4);
        let r = MetricReport::from_images(vec![
            ImageMetrics::compute("a", &a, &a).unwrap(),
            ImageMetrics::compute("b", &a, &square(2, 4, 4)).unwrap(),
        ])
        .unwrap();
        assert_eq!(r.dsc, 75.0);
        assert!(MetricReport::from_images(Vec::new()).is_err());
    }
}
