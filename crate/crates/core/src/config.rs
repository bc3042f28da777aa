//! Training configuration, loss weights, ablation toggles and baseline modes.
//!
//! Every field is addressable by a dotted key (`epochs`,
//! `loss_weights.beta`, `ablation.mac`, ...). Unknown keys are rejected and
//! [`TrainConfig::validate`] reports every problem at once.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arch::{Scale, SegmenterSpec};
use crate::data::AugmentConfig;
use crate::error::{Error, Result};

/// Trade-off weights of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Cross-supervision weight.
    pub lambda: f64,
    /// Interpolation-consistency weight.
    pub tau: f64,
    /// Mutual-agreement weight.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            tau: 1.0,
            beta: 10.0,
        }
    }
}

/// Which unsupervised losses take part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub semi: bool,
    pub con: bool,
    pub mac: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl LossToggles {
    pub const fn all() -> Self {
        Self {
            semi: true,
            con: true,
            mac: true,
        }
    }

    pub const fn none() -> Self {
        Self {
            semi: false,
            con: false,
            mac: false,
        }
    }

    /// A loss with zero weight is treated as switched off, so a zero weight
    /// and a disabled toggle train identically.
    pub fn effective(&self, weights: &LossWeights) -> Self {
        Self {
            semi: self.semi && weights.lambda > 0.0,
            con: self.con && weights.tau > 0.0,
            mac: self.mac && weights.beta > 0.0,
        }
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.semi {
            parts.push("semi");
        }
        if self.con {
            parts.push("con");
        }
        if self.mac {
            parts.push("mac");
        }
        if parts.is_empty() {
            "sup".to_string()
        } else {
            parts.join("+")
        }
    }
}

/// Training regime. `Pccl` is the full method; the others are the
/// reproduced baselines assembled from the same components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    Pccl,
    SupervisedOnly,
    /// Mean teacher on the lightweight student.
    Mt,
    /// Cross pseudo-supervision between the two students.
    Cps,
    /// Interpolation consistency with an EMA teacher of the lightweight student.
    Ict,
}

impl BaselineMode {
    pub const ALL: [BaselineMode; 5] = [
        BaselineMode::Pccl,
        BaselineMode::SupervisedOnly,
        BaselineMode::Mt,
        BaselineMode::Cps,
        BaselineMode::Ict,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineMode::Pccl => "pccl",
            BaselineMode::SupervisedOnly => "supervised_only",
            BaselineMode::Mt => "mt",
            BaselineMode::Cps => "cps",
            BaselineMode::Ict => "ict",
        }
    }

    /// Whether the transformer student takes part.
    pub fn uses_second_student(&self) -> bool {
        matches!(self, BaselineMode::Pccl | BaselineMode::Cps)
    }

    /// Toggles actually used under this mode. Only `Pccl` honours the
    /// configured ablation toggles; the baselines fix their own.
    pub fn toggles(&self, configured: &LossToggles) -> LossToggles {
        match self {
            BaselineMode::Pccl => *configured,
            BaselineMode::SupervisedOnly => LossToggles::none(),
            BaselineMode::Mt | BaselineMode::Ict => LossToggles {
                semi: false,
                con: true,
                mac: false,
            },
            BaselineMode::Cps => LossToggles {
                semi: true,
                con: false,
                mac: false,
            },
        }
    }
}

impl fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidValue {
                key: "mode".into(),
                value: s.into(),
                reason: "expected one of pccl, supervised_only, mt, cps, ict".into(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub labelled_batch: usize,
    /// Must be even: mixup pairs its first and second halves.
    pub unlabelled_batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub input_size: usize,
    /// Mixup combination ratio.
    pub mix_ratio: f64,
    /// Upper bound of the warmed-up EMA decay.
    pub ema_decay: f64,
    pub seed: u64,
    pub scale: Scale,
    pub num_classes: usize,
    pub labelled_fraction: f64,
    pub group_by_case: bool,
    pub loss_weights: LossWeights,
    pub ablation: LossToggles,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            labelled_batch: 1,
            unlabelled_batch: 4,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0001,
            input_size: 448,
            mix_ratio: 0.5,
            ema_decay: 0.99,
            seed: 1337,
            scale: Scale::Paper,
            num_classes: 2,
            labelled_fraction: 0.05,
            group_by_case: false,
            loss_weights: LossWeights::default(),
            ablation: LossToggles::all(),
            augment: AugmentConfig::default(),
        }
    }
}

/// Documentation row for one configuration key.
#[derive(Debug, Clone, Copy)]
pub struct KeyInfo {
    pub key: &'static str,
    pub help: &'static str,
}

pub const KEYS: &[KeyInfo] = &[
    KeyInfo { key: "epochs", help: "training epochs (one epoch exhausts the labelled pool)" },
    KeyInfo { key: "labelled_batch", help: "labelled images per step" },
    KeyInfo { key: "unlabelled_batch", help: "unlabelled images per step, even" },
    KeyInfo { key: "learning_rate", help: "SGD learning rate (constant)" },
    KeyInfo { key: "momentum", help: "SGD momentum" },
    KeyInfo { key: "weight_decay", help: "SGD weight decay" },
    KeyInfo { key: "input_size", help: "square input side in pixels" },
    KeyInfo { key: "mix_ratio", help: "mixup combination ratio in [0, 1]" },
    KeyInfo { key: "ema_decay", help: "EMA teacher decay cap in [0, 1)" },
    KeyInfo { key: "seed", help: "master random seed" },
    KeyInfo { key: "scale", help: "model scale: paper | desk" },
    KeyInfo { key: "num_classes", help: "segmentation classes including background" },
    KeyInfo { key: "labelled_fraction", help: "share of training images with visible masks, in (0, 1]" },
    KeyInfo { key: "group_by_case", help: "keep all images of a case on one side of the split" },
    KeyInfo { key: "loss_weights.lambda", help: "cross-supervision weight" },
    KeyInfo { key: "loss_weights.tau", help: "interpolation-consistency weight" },
    KeyInfo { key: "loss_weights.beta", help: "mutual-agreement weight" },
    KeyInfo { key: "ablation.semi", help: "enable cross-supervision loss" },
    KeyInfo { key: "ablation.con", help: "enable interpolation-consistency loss" },
    KeyInfo { key: "ablation.mac", help: "enable mutual-agreement loss" },
    KeyInfo { key: "augment.rotation_prob", help: "probability of a random rotation" },
    KeyInfo { key: "augment.rotation_degrees", help: "maximum absolute rotation angle" },
    KeyInfo { key: "augment.brightness_contrast_prob", help: "probability of brightness/contrast jitter" },
    KeyInfo { key: "augment.brightness_limit", help: "maximum additive brightness shift" },
    KeyInfo { key: "augment.contrast_limit", help: "maximum relative contrast change" },
    KeyInfo { key: "augment.blur_prob", help: "probability of a box blur" },
    KeyInfo { key: "augment.blur_max_kernel", help: "largest (odd) blur kernel, smallest is 3" },
    KeyInfo { key: "augment.noise_prob", help: "probability of additive gaussian noise" },
    KeyInfo { key: "augment.noise_std_min", help: "lower bound of the noise standard deviation" },
    KeyInfo { key: "augment.noise_std_max", help: "upper bound of the noise standard deviation" },
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: format!("cannot parse as {}", core::any::type_name::<T>()),
    })
}

impl TrainConfig {
    /// Published settings: 400 epochs at 448 px with the full-size models.
    pub fn paper() -> Self {
        Self::default()
    }

    /// Reduced protocol that trains in minutes on a CPU.
    pub fn desk() -> Self {
        Self {
            epochs: 60,
            input_size: 64,
            scale: Scale::Desk,
            ..Self::default()
        }
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let a = &mut self.augment;
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "labelled_batch" => self.labelled_batch = parse(key, value)?,
            "unlabelled_batch" => self.unlabelled_batch = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "input_size" => self.input_size = parse(key, value)?,
            "mix_ratio" => self.mix_ratio = parse(key, value)?,
            "ema_decay" => self.ema_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "scale" => self.scale = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "labelled_fraction" => self.labelled_fraction = parse(key, value)?,
            "group_by_case" => self.group_by_case = parse(key, value)?,
            "loss_weights.lambda" => self.loss_weights.lambda = parse(key, value)?,
            "loss_weights.tau" => self.loss_weights.tau = parse(key, value)?,
            "loss_weights.beta" => self.loss_weights.beta = parse(key, value)?,
            "ablation.semi" => self.ablation.semi = parse(key, value)?,
            "ablation.con" => self.ablation.con = parse(key, value)?,
            "ablation.mac" => self.ablation.mac = parse(key, value)?,
            "augment.rotation_prob" => a.rotation_prob = parse(key, value)?,
            "augment.rotation_degrees" => a.rotation_degrees = parse(key, value)?,
            "augment.brightness_contrast_prob" => a.brightness_contrast_prob = parse(key, value)?,
            "augment.brightness_limit" => a.brightness_limit = parse(key, value)?,
            "augment.contrast_limit" => a.contrast_limit = parse(key, value)?,
            "augment.blur_prob" => a.blur_prob = parse(key, value)?,
            "augment.blur_max_kernel" => a.blur_max_kernel = parse(key, value)?,
            "augment.noise_prob" => a.noise_prob = parse(key, value)?,
            "augment.noise_std_min" => a.noise_std_min = parse(key, value)?,
            "augment.noise_std_max" => a.noise_std_max = parse(key, value)?,
            _ => return Err(Error::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Textual value of one field, in the form [`TrainConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Result<String> {
        let a = &self.augment;
        Ok(match key {
            "epochs" => self.epochs.to_string(),
            "labelled_batch" => self.labelled_batch.to_string(),
            "unlabelled_batch" => self.unlabelled_batch.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "input_size" => self.input_size.to_string(),
            "mix_ratio" => self.mix_ratio.to_string(),
            "ema_decay" => self.ema_decay.to_string(),
            "seed" => self.seed.to_string(),
            "scale" => self.scale.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "labelled_fraction" => self.labelled_fraction.to_string(),
            "group_by_case" => self.group_by_case.to_string(),
            "loss_weights.lambda" => self.loss_weights.lambda.to_string(),
            "loss_weights.tau" => self.loss_weights.tau.to_string(),
            "loss_weights.beta" => self.loss_weights.beta.to_string(),
            "ablation.semi" => self.ablation.semi.to_string(),
            "ablation.con" => self.ablation.con.to_string(),
            "ablation.mac" => self.ablation.mac.to_string(),
            "augment.rotation_prob" => a.rotation_prob.to_string(),
            "augment.rotation_degrees" => a.rotation_degrees.to_string(),
            "augment.brightness_contrast_prob" => a.brightness_contrast_prob.to_string(),
            "augment.brightness_limit" => a.brightness_limit.to_string(),
            "augment.contrast_limit" => a.contrast_limit.to_string(),
            "augment.blur_prob" => a.blur_prob.to_string(),
            "augment.blur_max_kernel" => a.blur_max_kernel.to_string(),
            "augment.noise_prob" => a.noise_prob.to_string(),
            "augment.noise_std_min" => a.noise_std_min.to_string(),
            "augment.noise_std_max" => a.noise_std_max.to_string(),
            _ => return Err(Error::UnknownKey(key.into())),
        })
    }

    /// Model specs implied by `scale`, `input_size` and `num_classes`.
    pub fn segmenter_specs(&self) -> (SegmenterSpec, SegmenterSpec) {
        (
            SegmenterSpec::lightweight(self.scale, self.input_size, self.num_classes),
            SegmenterSpec::transformer(self.scale, self.input_size, self.num_classes),
        )
    }

    /// Collects every violated constraint.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                out.push(msg);
            }
        };
        check(self.epochs >= 1, format!("epochs must be ≥ 1, got {}", self.epochs));
        check(
            self.labelled_batch >= 1,
            format!("labelled_batch must be ≥ 1, got {}", self.labelled_batch),
        );
        check(
            self.unlabelled_batch >= 2 && self.unlabelled_batch % 2 == 0,
            format!(
                "unlabelled_batch must be even and ≥ 2, got {}",
                self.unlabelled_batch
            ),
        );
        let non_negative = [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("loss_weights.lambda", self.loss_weights.lambda),
            ("loss_weights.tau", self.loss_weights.tau),
            ("loss_weights.beta", self.loss_weights.beta),
        ];
        for (key, v) in non_negative {
            check(
                v.is_finite() && v >= 0.0,
                format!("{key} must be finite and ≥ 0, got {v}"),
            );
        }
        check(
            (0.0..1.0).contains(&self.momentum),
            format!("momentum must lie in [0, 1), got {}", self.momentum),
        );
        check(
            (0.0..=1.0).contains(&self.mix_ratio),
            format!("mix_ratio must lie in [0, 1], got {}", self.mix_ratio),
        );
        check(
            (0.0..1.0).contains(&self.ema_decay),
            format!("ema_decay must lie in [0, 1), got {}", self.ema_decay),
        );
        check(
            self.labelled_fraction > 0.0 && self.labelled_fraction <= 1.0,
            format!(
                "labelled_fraction must lie in (0, 1], got {}",
                self.labelled_fraction
            ),
        );
        check(
            (2..=255).contains(&self.num_classes),
            format!("num_classes must lie in [2, 255], got {}", self.num_classes),
        );
        for p in self.augment.problems() {
            out.push(p);
        }
        let (light, trans) = self.segmenter_specs();
        for spec in [light, trans] {
            if let Err(e) = spec.validate() {
                out.push(format!("input_size {}: {e}", self.input_size));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_published_settings() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.loss_weights.lambda, c.loss_weights.tau, c.loss_weights.beta),
            (5.0, 1.0, 10.0)
        );
        assert_eq!((c.epochs, c.labelled_batch, c.unlabelled_batch), (400, 1, 4));
        assert_eq!((c.learning_rate, c.momentum, c.weight_decay), (0.01, 0.9, 0.0001));
        assert_eq!((c.input_size, c.mix_ratio), (448, 0.5));
        c.validate().unwrap();
        TrainConfig::desk().validate().unwrap();
    }

    #[test]
    fn every_key_round_trips() {
        let mut c = TrainConfig::default();
        for info in KEYS {
            let v = c.get(info.key).unwrap();
            c.set(info.key, &v).unwrap();
        }
        assert_eq!(c, TrainConfig::default());
    }

    #[test]
    fn unknown_key_rejected() {
        let mut c = TrainConfig::default();
        assert!(matches!(c.set("loss_weights.gamma", "1"), Err(Error::UnknownKey(_))));
        assert!(matches!(c.set("epochs", "many"), Err(Error::InvalidValue { .. })));
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut c = TrainConfig::default();
        c.unlabelled_batch = 3;
        c.learning_rate = -1.0;
        c.input_size = 450;
        match c.validate() {
            Err(Error::InvalidConfig(p)) => assert!(p.len() >= 3, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_weight_disables_toggle() {
        let w = LossWeights {
            lambda: 5.0,
            tau: 0.0,
            beta: 0.0,
        };
        assert_eq!(
            LossToggles::all().effective(&w),
            LossToggles {
                semi: true,
                con: false,
                mac: false
            }
        );
    }

    #[test]
    fn mode_parsing() {
        for m in BaselineMode::ALL {
            assert_eq!(m.as_str().parse::<BaselineMode>().unwrap(), m);
        }
        assert!("dan".parse::<BaselineMode>().is_err());
    }
}
