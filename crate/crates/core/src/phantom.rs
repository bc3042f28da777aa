//! Synthetic ultrasound-like ellipse phantoms with exact masks.
//!
//! Each phantom is a filled ellipse standing in for a fetal head: a bright
//! rim ("skull") around an interior only slightly brighter than a textured
//! background, under multiplicative speckle. Part of the rim may be dropped
//! to imitate acoustic shadowing, so the interior has to be inferred from
//! shape rather than read off intensity.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Geometry and contrast of one phantom, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseParams {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the rotated x direction.
    pub a: f64,
    pub b: f64,
    /// Rotation in radians.
    pub theta: f64,
    pub background: f64,
    pub interior: f64,
    pub rim: f64,
    pub rim_width: f64,
    /// Angular interval (start, length) in radians where the rim is absent.
    pub dropout: (f64, f64),
}

impl EllipseParams {
    /// Normalised radial coordinate of pixel centre `(x, y)`: `≤ 1` inside.
    pub fn radial(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = (libm::sin(self.theta), libm::cos(self.theta));
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        libm::sqrt(u * u + v * v)
    }

    /// Interior predicate evaluated at the centre of pixel `(x, y)`.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f64 - self.cx, y as f64 - self.cy);
        let (s, c) = (libm::sin(self.theta), libm::cos(self.theta));
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }

    fn angle(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = (libm::sin(self.theta), libm::cos(self.theta));
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        wrap_angle(libm::atan2(v, u))
    }
}

fn wrap_angle(a: f64) -> f64 {
    let r = libm::fmod(a, 2.0 * PI);
    if r < 0.0 {
        r + 2.0 * PI
    } else {
        r
    }
}

/// Knobs controlling how hard the phantoms are to segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    /// Semi-axis range as a fraction of the image side.
    pub axis_min: f64,
    pub axis_max: f64,
    pub background: (f64, f64),
    /// Interior brightness offset over the local background.
    pub interior_offset: (f64, f64),
    pub rim: (f64, f64),
    /// Rim thickness as a fraction of the shorter semi-axis.
    pub rim_width: (f64, f64),
    /// Probability that an arc of the rim is missing, and its max length.
    pub dropout_prob: f64,
    pub dropout_max: f64,
    /// Relative std of the multiplicative speckle.
    pub speckle: f64,
    /// Amplitude of the low-frequency background texture.
    pub texture: f64,
    /// Number of bright distractor blobs.
    pub distractors: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            axis_min: 0.16,
            axis_max: 0.34,
            background: (0.18, 0.32),
            interior_offset: (0.02, 0.10),
            rim: (0.55, 0.85),
            rim_width: (0.08, 0.16),
            dropout_prob: 0.5,
            dropout_max: 0.5 * PI,
            speckle: 0.45,
            texture: 0.10,
            distractors: 2,
        }
    }
}

/// A rendered phantom: 8-bit grayscale pixels and a 0/1 mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub size: usize,
    pub params: EllipseParams,
    pub image: Vec<u8>,
    pub mask: Vec<u8>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Draws ellipse parameters that keep the ellipse (and its rim) inside a
/// `size×size` image.
pub fn sample_params<R: Rng + ?Sized>(size: usize, cfg: &PhantomConfig, rng: &mut R) -> EllipseParams {
    let s = size as f64;
    let a = uniform(rng, (cfg.axis_min * s, cfg.axis_max * s));
    let b = uniform(rng, (cfg.axis_min * s, cfg.axis_max * s));
    let rim_width = uniform(rng, cfg.rim_width) * a.min(b);
    let reach = a.max(b) + rim_width + 1.0;
    let lo = reach.min(s / 2.0);
    let hi = (s - 1.0 - reach).max(lo);
    let cx = uniform(rng, (lo, hi));
    let cy = uniform(rng, (lo, hi));
    let theta = rng.random_range(0.0..PI);
    let background = uniform(rng, cfg.background);
    let interior = background + uniform(rng, cfg.interior_offset);
    let rim = uniform(rng, cfg.rim);
    let dropout = if rng.random::<f64>() < cfg.dropout_prob {
        (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..cfg.dropout_max.max(1e-9)))
    } else {
        (0.0, 0.0)
    };
    EllipseParams { cx, cy, a, b, theta, background, interior, rim, rim_width, dropout }
}

/// Exact ground-truth mask of `p` on a `size×size` grid.
pub fn render_mask(p: &EllipseParams, size: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            out.push(p.contains(x, y) as u8);
        }
    }
    out
}

/// Renders one phantom.
pub fn generate<R: Rng + ?Sized>(size: usize, cfg: &PhantomConfig, rng: &mut R) -> Phantom {
    let p = sample_params(size, cfg, rng);
    let s = size as f64;
    let base = p.background;
    // low-frequency texture: a few random plane waves
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = rng.random_range(1.0..4.0) * 2.0 * PI / s;
            let dir = rng.random_range(0.0..2.0 * PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            (freq * libm::cos(dir), freq * libm::sin(dir), phase)
        })
        .collect();
    let blobs: Vec<(f64, f64, f64, f64)> = (0..cfg.distractors)
        .map(|_| {
            let r = rng.random_range(0.03..0.08) * s;
            (rng.random_range(0.0..s), rng.random_range(0.0..s), r, uniform(rng, cfg.rim) * 0.8)
        })
        .collect();
    let speckle = Normal::new(1.0, cfg.speckle.max(0.0)).expect("finite speckle");
    let ring = p.rim_width / p.a.min(p.b);
    let mut image = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let tex: f64 = waves.iter().map(|(kx, ky, ph)| libm::sin(kx * fx + ky * fy + ph)).sum::<f64>() / 3.0;
            let mut v = base * (1.0 + cfg.texture * tex / base.max(1e-3));
            let r = p.radial(fx, fy);
            if r <= 1.0 {
                v += p.interior - base;
            }
            if (r - 1.0).abs() <= ring / 2.0 {
                let ang = p.angle(fx, fy);
                let off = wrap_angle(ang - p.dropout.0);
                if off >= p.dropout.1 {
                    let w = 1.0 - ((r - 1.0).abs() / (ring / 2.0));
                    v = v.max(p.rim * (0.5 + 0.5 * w));
                }
            }
            for &(bx, by, br, bv) in &blobs {
                let d2 = (fx - bx) * (fx - bx) + (fy - by) * (fy - by);
                if d2 <= br * br {
                    v = v.max(bv);
                }
            }
            let noisy = v * speckle.sample(rng).max(0.0);
            image.push(libm::round(noisy.clamp(0.0, 1.0) * 255.0) as u8);
        }
    }
    Phantom { size, params: p, image, mask: render_mask(&p, size) }
}
