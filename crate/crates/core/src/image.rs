//! Planar float images and the pixel transforms used by preprocessing and
//! augmentation.
//!
//! Images are stored channel-major (`C×H×W`) with values in `[0, 1]`. Masks
//! travel alongside as single-plane `u8` label maps and only ever see
//! nearest-neighbour resampling, so no new class index can appear.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "zero-area image {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::InvalidArgument(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite pixel at {i}")));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    /// 8-bit interleaved pixels (`H×W×C`) scaled to `[0, 1]`.
    pub fn from_u8_interleaved(channels: usize, height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != channels * height * width {
            return Err(Error::InvalidArgument(format!(
                "expected {} bytes, got {}",
                channels * height * width,
                bytes.len()
            )));
        }
        let plane = height * width;
        let mut data = vec![0.0; bytes.len()];
        for (i, px) in bytes.chunks_exact(channels.max(1)).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                data[c * plane + i] = v as f32 / 255.0;
            }
        }
        Self::new(channels, height, width, data)
    }

    /// Interleaved 8-bit pixels, rounding and clamping to `[0, 255]`.
    pub fn to_u8_interleaved(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(self.data.len());
        for i in 0..plane {
            for c in 0..self.channels {
                let v = self.data[c * plane + i].clamp(0.0, 1.0) * 255.0;
                out.push(libm::roundf(v) as u8);
            }
        }
        out
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Replicates a single-channel image to three channels; other images
    /// are returned unchanged.
    pub fn to_rgb(&self) -> Self {
        if self.channels != 1 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(3 * self.data.len());
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Self { channels: 3, height: self.height, width: self.width, data }
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Self {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let sy = self.height as f32 / out_h as f32;
        let sx = self.width as f32 / out_w as f32;
        let mut data = Vec::with_capacity(self.channels * out_h * out_w);
        for c in 0..self.channels {
            let src = self.plane(c);
            for y in 0..out_h {
                let fy = ((y as f32 + 0.5) * sy - 0.5).max(0.0);
                for x in 0..out_w {
                    let fx = ((x as f32 + 0.5) * sx - 0.5).max(0.0);
                    data.push(bilinear(src, self.height, self.width, fy, fx));
                }
            }
        }
        Self { channels: self.channels, height: out_h, width: out_w, data }
    }

    /// Rotation by `degrees` (counter-clockwise) about the image centre;
    /// uncovered pixels are filled with 0.
    pub fn rotate(&self, degrees: f32) -> Self {
        let (h, w) = (self.height, self.width);
        let map = RotationMap::new(h, w, degrees);
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            let src = self.plane(c);
            for y in 0..h {
                for x in 0..w {
                    let (fy, fx) = map.source(y, x);
                    let inside = fy > -1.0 && fx > -1.0 && fy < h as f32 && fx < w as f32;
                    data.push(if inside { bilinear_zero(src, h, w, fy, fx) } else { 0.0 });
                }
            }
        }
        Self { channels: self.channels, height: h, width: w, data }
    }

    /// `alpha * v + beta`, clamped to `[0, 1]`.
    pub fn brightness_contrast(&self, alpha: f32, beta: f32) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = (alpha * *v + beta).clamp(0.0, 1.0);
        }
        out
    }

    /// Mean filter with an odd `k×k` kernel and replicated borders.
    pub fn box_blur(&self, k: usize) -> Self {
        let r = (k / 2) as isize;
        let (h, w) = (self.height as isize, self.width as isize);
        let norm = 1.0 / ((2 * r + 1) * (2 * r + 1)) as f32;
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            let src = self.plane(c);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for dy in -r..=r {
                        let yy = (y + dy).clamp(0, h - 1) as usize;
                        for dx in -r..=r {
                            let xx = (x + dx).clamp(0, w - 1) as usize;
                            acc += src[yy * self.width + xx];
                        }
                    }
                    data.push(acc * norm);
                }
            }
        }
        Self { channels: self.channels, height: self.height, width: self.width, data }
    }

    /// Additive zero-mean gaussian noise, clamped to `[0, 1]`.
    pub fn add_noise<R: Rng + ?Sized>(&self, std: f32, rng: &mut R) -> Self {
        let mut out = self.clone();
        if std <= 0.0 {
            return out;
        }
        let normal = Normal::new(0.0f32, std).expect("positive std");
        for v in &mut out.data {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
        out
    }
}

/// Nearest-neighbour resize of a label plane.
pub fn resize_nearest(src: &[u8], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = ((y * h) / out_h).min(h - 1);
        for x in 0..out_w {
            let sx = ((x * w) / out_w).min(w - 1);
            out.push(src[sy * w + sx]);
        }
    }
    out
}

/// Nearest-neighbour rotation of a label plane with the same geometry as
/// [`Image::rotate`]; uncovered pixels become background.
pub fn rotate_nearest(src: &[u8], h: usize, w: usize, degrees: f32) -> Vec<u8> {
    let map = RotationMap::new(h, w, degrees);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = map.source(y, x);
            let (ry, rx) = (libm::roundf(fy), libm::roundf(fx));
            let inside = ry >= 0.0 && rx >= 0.0 && (ry as usize) < h && (rx as usize) < w;
            out.push(if inside { src[ry as usize * w + rx as usize] } else { 0 });
        }
    }
    out
}

struct RotationMap {
    cos: f32,
    sin: f32,
    cy: f32,
    cx: f32,
}

impl RotationMap {
    fn new(h: usize, w: usize, degrees: f32) -> Self {
        let rad = degrees.to_radians();
        let (sin, cos) = if degrees == 0.0 { (0.0, 1.0) } else { (libm::sinf(rad), libm::cosf(rad)) };
        Self { cos, sin, cy: (h as f32 - 1.0) / 2.0, cx: (w as f32 - 1.0) / 2.0 }
    }

    /// Source coordinate sampled by output pixel `(y, x)` (inverse map).
    fn source(&self, y: usize, x: usize) -> (f32, f32) {
        let dy = y as f32 - self.cy;
        let dx = x as f32 - self.cx;
        let sx = self.cos * dx - self.sin * dy + self.cx;
        let sy = self.sin * dx + self.cos * dy + self.cy;
        (sy, sx)
    }
}

fn bilinear(src: &[f32], h: usize, w: usize, fy: f32, fx: f32) -> f32 {
    let y0 = (fy as usize).min(h - 1);
    let x0 = (fx as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ty = fy - y0 as f32;
    let tx = fx - x0 as f32;
    let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
    let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
    top * (1.0 - ty) + bot * ty
}

/// Bilinear sample treating everything outside the image as 0.
fn bilinear_zero(src: &[f32], h: usize, w: usize, fy: f32, fx: f32) -> f32 {
    let y0 = libm::floorf(fy) as isize;
    let x0 = libm::floorf(fx) as isize;
    let ty = fy - y0 as f32;
    let tx = fx - x0 as f32;
    let at = |y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[y as usize * w + x as usize]
        }
    };
    let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
    let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
    top * (1.0 - ty) + bot * ty
}
