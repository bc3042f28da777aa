//! Samples, labelled/unlabelled splitting, preprocessing and augmentation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{self, Image};
use crate::maps::MaskMap;

/// One image with an optional single-plane mask of the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Option<MaskMap>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Image, mask: Option<MaskMap>) -> Result<Self> {
        if let Some(m) = &mask {
            if m.batch() != 1 || m.height() != image.height() || m.width() != image.width() {
                return Err(Error::InvalidArgument(format!(
                    "mask {}x{} does not match image {}x{}",
                    m.height(),
                    m.width(),
                    image.height(),
                    image.width()
                )));
            }
        }
        Ok(Self { id: id.into(), image, mask })
    }

    pub fn unlabelled(mut self) -> Self {
        self.mask = None;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub labelled_fraction: f64,
    pub seed: u64,
    pub group_by_case: bool,
}

/// Splits `samples` into labelled and unlabelled sets.
///
/// `case_ids[i]` names the case of `samples[i]`; cases are the unit of
/// selection when `group_by_case` is set, otherwise every sample is its own
/// unit. `round(fraction × units)` units are drawn with a seeded shuffle.
/// Both outputs keep the input order, and unlabelled samples lose their
/// masks.
pub fn split_labelled(
    samples: Vec<Sample>,
    spec: &SplitSpec,
    case_ids: Option<&[String]>,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(spec.labelled_fraction > 0.0 && spec.labelled_fraction <= 1.0) {
        return Err(Error::InvalidSplit(format!(
            "labelled fraction must lie in (0, 1], got {}",
            spec.labelled_fraction
        )));
    }
    let unit_of: Vec<usize> = match (spec.group_by_case, case_ids) {
        (true, Some(ids)) => {
            if ids.len() != samples.len() {
                return Err(Error::InvalidSplit(format!(
                    "{} case ids for {} samples",
                    ids.len(),
                    samples.len()
                )));
            }
            let mut index: BTreeMap<&str, usize> = BTreeMap::new();
            ids.iter()
                .map(|id| {
                    let next = index.len();
                    *index.entry(id.as_str()).or_insert(next)
                })
                .collect()
        }
        (true, None) => {
            return Err(Error::InvalidSplit("group_by_case requires case ids".into()));
        }
        (false, _) => (0..samples.len()).collect(),
    };
    let units = unit_of.iter().max().map_or(0, |m| m + 1);
    let chosen = libm::round(spec.labelled_fraction * units as f64) as usize;
    if chosen == 0 {
        return Err(Error::InvalidSplit(format!(
            "fraction {} of {} units selects nothing",
            spec.labelled_fraction, units
        )));
    }
    let mut order: Vec<usize> = (0..units).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut labelled_unit = alloc::vec![false; units];
    for &u in &order[..chosen.min(units)] {
        labelled_unit[u] = true;
    }
    let mut labelled = Vec::new();
    let mut unlabelled = Vec::new();
    for (s, u) in samples.into_iter().zip(unit_of) {
        if labelled_unit[u] {
            labelled.push(s);
        } else {
            unlabelled.push(s.unlabelled());
        }
    }
    Ok((labelled, unlabelled))
}

/// Probabilities and magnitudes of the labelled-data augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotation_prob: f64,
    pub rotation_degrees: f64,
    pub brightness_contrast_prob: f64,
    pub brightness_limit: f64,
    pub contrast_limit: f64,
    pub blur_prob: f64,
    pub blur_max_kernel: usize,
    pub noise_prob: f64,
    pub noise_std_min: f64,
    pub noise_std_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_prob: 0.5,
            rotation_degrees: 20.0,
            brightness_contrast_prob: 0.5,
            brightness_limit: 0.2,
            contrast_limit: 0.2,
            blur_prob: 0.3,
            blur_max_kernel: 7,
            noise_prob: 0.3,
            noise_std_min: 0.01,
            noise_std_max: 0.05,
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn disabled() -> Self {
        Self { rotation_prob: 0.0, brightness_contrast_prob: 0.0, blur_prob: 0.0, noise_prob: 0.0, ..Self::default() }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (key, p) in [
            ("augment.rotation_prob", self.rotation_prob),
            ("augment.brightness_contrast_prob", self.brightness_contrast_prob),
            ("augment.blur_prob", self.blur_prob),
            ("augment.noise_prob", self.noise_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("{key} must lie in [0, 1], got {p}"));
            }
        }
        for (key, v) in [
            ("augment.rotation_degrees", self.rotation_degrees),
            ("augment.brightness_limit", self.brightness_limit),
            ("augment.contrast_limit", self.contrast_limit),
            ("augment.noise_std_min", self.noise_std_min),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("{key} must be a non-negative number, got {v}"));
            }
        }
        if self.contrast_limit >= 1.0 {
            out.push(format!("augment.contrast_limit must be below 1, got {}", self.contrast_limit));
        }
        if !(self.noise_std_max >= self.noise_std_min) {
            out.push(format!(
                "augment.noise_std_max ({}) must be at least noise_std_min ({})",
                self.noise_std_max, self.noise_std_min
            ));
        }
        if self.blur_max_kernel < 3 || self.blur_max_kernel % 2 == 0 {
            out.push(format!("augment.blur_max_kernel must be odd and ≥ 3, got {}", self.blur_max_kernel));
        }
        out
    }
}

/// Applies rotation (to image and mask), then brightness/contrast, blur and
/// noise (image only). Each op fires with its own probability.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    if rng.random::<f64>() < cfg.rotation_prob {
        let deg = rng.random_range(-cfg.rotation_degrees..=cfg.rotation_degrees) as f32;
        image = image.rotate(deg);
        mask = mask.map(|m| rotate_mask(&m, deg));
    }
    if rng.random::<f64>() < cfg.brightness_contrast_prob {
        let alpha = 1.0 + rng.random_range(-cfg.contrast_limit..=cfg.contrast_limit);
        let beta = rng.random_range(-cfg.brightness_limit..=cfg.brightness_limit);
        image = image.brightness_contrast(alpha as f32, beta as f32);
    }
    if rng.random::<f64>() < cfg.blur_prob {
        let steps = (cfg.blur_max_kernel.max(3) - 3) / 2;
        let k = 3 + 2 * rng.random_range(0..=steps);
        image = image.box_blur(k);
    }
    if rng.random::<f64>() < cfg.noise_prob {
        let std = rng.random_range(cfg.noise_std_min..=cfg.noise_std_max);
        image = image.add_noise(std as f32, rng);
    }
    Sample { id: sample.id.clone(), image, mask }
}

/// Rotates a single-plane mask with nearest-neighbour sampling.
pub fn rotate_mask(mask: &MaskMap, degrees: f32) -> MaskMap {
    let data = image::rotate_nearest(mask.as_slice(), mask.height(), mask.width(), degrees);
    MaskMap::new(1, mask.height(), mask.width(), mask.classes(), data).expect("rotation keeps labels")
}

/// Resizes to `size×size` three-channel `[0, 1]` input: bilinear for the
/// image, nearest-neighbour for the mask.
pub fn preprocess(sample: &Sample, size: usize) -> Result<Sample> {
    if size == 0 {
        return Err(Error::InvalidArgument("input size must be positive".into()));
    }
    let mut image = sample.image.to_rgb().resize_bilinear(size, size);
    image.clamp_unit();
    let mask = match &sample.mask {
        Some(m) => {
            let data = image::resize_nearest(m.as_slice(), m.height(), m.width(), size, size);
            Some(MaskMap::new(1, size, size, m.classes(), data)?)
        }
        None => None,
    };
    Sample::new(sample.id.clone(), image, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let img = Image::zeros(1, 2, 2);
                let mask = MaskMap::binary(2, 2, vec![0, 1, 1, 0]).unwrap();
                Sample::new(format!("s{i:03}"), img, Some(mask)).unwrap()
            })
            .collect()
    }

    fn spec(f: f64) -> SplitSpec {
        SplitSpec { labelled_fraction: f, seed: 3, group_by_case: false }
    }

    #[test]
    fn five_percent_of_500() {
        let (l, u) = split_labelled(samples(500), &spec(0.05), None).unwrap();
        assert_eq!((l.len(), u.len()), (25, 475));
        assert!(u.iter().all(|s| s.mask.is_none()));
    }

    #[test]
    fn full_fraction_and_tiny_fraction() {
        let (l, u) = split_labelled(samples(10), &spec(1.0), None).unwrap();
        assert_eq!((l.len(), u.len()), (10, 0));
        assert!(split_labelled(samples(10), &spec(0.01), None).is_err());
    }

    #[test]
    fn cases_stay_together() {
        let ids: Vec<String> = (0..12).map(|i| (i / 4).to_string()).collect();
        let s = SplitSpec { labelled_fraction: 0.34, seed: 9, group_by_case: true };
        let (l, _) = split_labelled(samples(12), &s, Some(&ids)).unwrap();
        assert_eq!(l.len(), 4);
    }

    #[test]
    fn disabled_augment_is_identity() {
        let s = &samples(1)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(s, &AugmentConfig::disabled(), &mut rng), *s);
    }

    #[test]
    fn default_augment_is_valid() {
        assert!(AugmentConfig::default().problems().is_empty());
        let bad = AugmentConfig { blur_prob: 1.5, blur_max_kernel: 4, ..AugmentConfig::default() };
        assert_eq!(bad.problems().len(), 2);
    }

    #[test]
    fn preprocess_replicates_gray() {
        let img = Image::new(1, 3, 5, (0..15).map(|i| i as f32 / 15.0).collect()).unwrap();
        let s = Sample::new("a", img, None).unwrap();
        let p = preprocess(&s, 8).unwrap();
        assert_eq!(p.image.channels(), 3);
        assert_eq!(p.image.plane(0), p.image.plane(1));
    }
}
