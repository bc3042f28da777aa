//! Segmenter specifications and their analytic cost profiles.
//!
//! Two families are supported: a lightweight convolutional U-shaped network
//! with tokenized shifted-MLP stages, and a U-shaped windowed-attention
//! transformer with patch merging/expanding. [`profile`] walks a spec layer
//! by layer and returns the exact trainable parameter count and the
//! multiply-accumulate count of convolutions, linear layers and attention
//! matmuls.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterKind {
    LightweightConv,
    WindowedTransformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Paper,
    Desk,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Paper => "paper",
            Scale::Desk => "desk",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            _ => Err(Error::InvalidValue {
                key: "scale".into(),
                value: s.into(),
                reason: "expected paper or desk".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterSpec {
    pub kind: SegmenterKind,
    pub scale: Scale,
    pub input_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Lightweight: the five encoder widths (three conv stages, two
    /// tokenized stages).
    pub encoder_channels: Vec<usize>,
    /// Hidden width of an MLP relative to its input width.
    pub mlp_ratio: f64,
    /// Transformer: widths of the encoder stages before the bottleneck.
    pub block_dims: Vec<usize>,
    pub bottleneck_dim: usize,
    /// Transformer: blocks per encoder stage; the decoder mirrors them.
    pub depths: Vec<usize>,
    pub bottleneck_depth: usize,
    /// Attention heads per stage, bottleneck last.
    pub num_heads: Vec<usize>,
    pub window_size: usize,
    pub patch_size: usize,
}

impl SegmenterSpec {
    pub fn lightweight(scale: Scale, input_size: usize, num_classes: usize) -> Self {
        let encoder_channels = match scale {
            Scale::Paper => vec![32, 64, 128, 160, 256],
            Scale::Desk => vec![8, 16, 32, 40, 64],
        };
        Self {
            kind: SegmenterKind::LightweightConv,
            scale,
            input_size,
            in_channels: 3,
            num_classes,
            encoder_channels,
            mlp_ratio: 0.625,
            block_dims: Vec::new(),
            bottleneck_dim: 0,
            depths: Vec::new(),
            bottleneck_depth: 0,
            num_heads: Vec::new(),
            window_size: 0,
            patch_size: 0,
        }
    }

    pub fn transformer(scale: Scale, input_size: usize, num_classes: usize) -> Self {
        let (block_dims, bottleneck_dim, window_size) = match scale {
            Scale::Paper => (vec![96, 192, 384], 768, 7),
            Scale::Desk => (vec![24, 48, 96], 192, 4),
        };
        Self {
            kind: SegmenterKind::WindowedTransformer,
            scale,
            input_size,
            in_channels: 3,
            num_classes,
            encoder_channels: Vec::new(),
            mlp_ratio: 4.0,
            block_dims,
            bottleneck_dim,
            depths: vec![3, 6, 1],
            bottleneck_depth: 2,
            num_heads: vec![3, 6, 12, 24],
            window_size,
            patch_size: 4,
        }
    }

    /// Hidden width of the tokenized MLPs for a token width `dim`.
    pub fn mlp_hidden(&self, dim: usize) -> usize {
        let h = libm::round(dim as f64 * self.mlp_ratio) as usize;
        h.max(1)
    }

    /// Token-grid side at each transformer level, bottleneck last.
    pub fn token_sides(&self) -> Vec<usize> {
        let base = self.input_size / self.patch_size.max(1);
        (0..=self.block_dims.len()).map(|i| base >> i).collect()
    }

    /// Window side actually used at a level: clipped to the grid when the
    /// grid is smaller than the window.
    pub fn effective_window(&self, side: usize) -> usize {
        self.window_size.min(side)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArch(msg));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be ≥ 2, got {}", self.num_classes));
        }
        if self.in_channels == 0 || self.input_size == 0 {
            return fail("input size and channels must be positive".into());
        }
        match self.kind {
            SegmenterKind::LightweightConv => {
                if self.encoder_channels.len() != 5 || self.encoder_channels.contains(&0) {
                    return fail(format!(
                        "lightweight encoder needs five positive widths, got {:?}",
                        self.encoder_channels
                    ));
                }
                if self.input_size % 32 != 0 {
                    return fail(format!(
                        "lightweight input size must be a multiple of 32 (five 2x reductions), got {}",
                        self.input_size
                    ));
                }
                if !(self.mlp_ratio > 0.0) {
                    return fail(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
                }
            }
            SegmenterKind::WindowedTransformer => {
                let stages = self.block_dims.len();
                if stages == 0 || self.depths.len() != stages || self.num_heads.len() != stages + 1 {
                    return fail(format!(
                        "transformer needs matching block_dims/depths and one head count per level plus the bottleneck (dims {:?}, depths {:?}, heads {:?})",
                        self.block_dims, self.depths, self.num_heads
                    ));
                }
                let mut dims = self.block_dims.clone();
                dims.push(self.bottleneck_dim);
                for pair in dims.windows(2) {
                    if pair[1] != 2 * pair[0] {
                        return fail(format!(
                            "patch merging doubles the width: expected {} after {}, got {}",
                            2 * pair[0],
                            pair[0],
                            pair[1]
                        ));
                    }
                }
                for (d, h) in dims.iter().zip(&self.num_heads) {
                    if *h == 0 || d % h != 0 {
                        return fail(format!("width {d} not divisible by {h} heads"));
                    }
                }
                if self.patch_size == 0 || self.window_size == 0 {
                    return fail("patch and window sizes must be positive".into());
                }
                let granularity = self.patch_size << stages;
                if self.input_size % granularity != 0 {
                    return fail(format!(
                        "input size {} must be a multiple of patch {} × 2^{} = {}",
                        self.input_size, self.patch_size, stages, granularity
                    ));
                }
                for side in self.token_sides() {
                    if side > self.window_size && side % self.window_size != 0 {
                        return fail(format!(
                            "token grid {side}×{side} cannot be tiled by {}×{} windows",
                            self.window_size, self.window_size
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Trainable parameters and multiply-accumulates of one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub params: u64,
    pub macs: u64,
}

impl Profile {
    /// Conventional FLOP figure: two per multiply-accumulate.
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }

    fn add(&mut self, params: usize, macs: usize) {
        self.params += params as u64;
        self.macs += macs as u64;
    }

    fn conv(&mut self, cin: usize, cout: usize, k: usize, out_side: usize, bias: bool, groups: usize) {
        let weights = cin / groups * cout * k * k;
        self.add(weights + if bias { cout } else { 0 }, weights * out_side * out_side);
    }

    fn linear(&mut self, inp: usize, out: usize, tokens: usize, bias: bool) {
        self.add(inp * out + if bias { out } else { 0 }, inp * out * tokens);
    }

    fn norm(&mut self, dim: usize) {
        self.add(2 * dim, 0);
    }
}

/// Analytic profile of `spec` at its configured input size.
pub fn profile(spec: &SegmenterSpec) -> Profile {
    match spec.kind {
        SegmenterKind::LightweightConv => profile_lightweight(spec),
        SegmenterKind::WindowedTransformer => profile_transformer(spec),
    }
}

fn shifted_mlp_block(p: &mut Profile, spec: &SegmenterSpec, dim: usize, side: usize) {
    let hidden = spec.mlp_hidden(dim);
    let tokens = side * side;
    p.norm(dim);
    p.linear(dim, hidden, tokens, true);
    p.conv(hidden, hidden, 3, side, true, hidden);
    p.linear(hidden, dim, tokens, true);
}

fn profile_lightweight(spec: &SegmenterSpec) -> Profile {
    let s = spec.input_size;
    let c = &spec.encoder_channels;
    let mut p = Profile::default();
    // convolutional encoder; each conv runs before its 2x max-pool
    p.conv(spec.in_channels, c[0], 3, s, true, 1);
    p.norm(c[0]);
    p.conv(c[0], c[1], 3, s / 2, true, 1);
    p.norm(c[1]);
    p.conv(c[1], c[2], 3, s / 4, true, 1);
    p.norm(c[2]);
    // tokenized stages: overlapping stride-2 patch embedding, block, norm
    p.conv(c[2], c[3], 3, s / 16, true, 1);
    p.norm(c[3]);
    shifted_mlp_block(&mut p, spec, c[3], s / 16);
    p.norm(c[3]);
    p.conv(c[3], c[4], 3, s / 32, true, 1);
    p.norm(c[4]);
    shifted_mlp_block(&mut p, spec, c[4], s / 32);
    p.norm(c[4]);
    // decoder
    p.conv(c[4], c[3], 3, s / 32, true, 1);
    p.norm(c[3]);
    shifted_mlp_block(&mut p, spec, c[3], s / 16);
    p.norm(c[3]);
    p.conv(c[3], c[2], 3, s / 16, true, 1);
    p.norm(c[2]);
    shifted_mlp_block(&mut p, spec, c[2], s / 8);
    p.norm(c[2]);
    p.conv(c[2], c[1], 3, s / 8, true, 1);
    p.norm(c[1]);
    p.conv(c[1], c[0], 3, s / 4, true, 1);
    p.norm(c[0]);
    p.conv(c[0], c[0], 3, s / 2, true, 1);
    p.conv(c[0], spec.num_classes, 1, s, true, 1);
    p
}

fn swin_block(p: &mut Profile, spec: &SegmenterSpec, dim: usize, heads: usize, side: usize) {
    let tokens = side * side;
    let window = spec.effective_window(side);
    let n = window * window;
    let hidden = spec.mlp_hidden(dim);
    p.norm(dim);
    p.linear(dim, 3 * dim, tokens, true);
    // relative position bias table
    p.add((2 * window - 1) * (2 * window - 1) * heads, 0);
    // q·kᵀ and attn·v inside each window
    p.add(0, 2 * n * dim * tokens);
    p.linear(dim, dim, tokens, true);
    p.norm(dim);
    p.linear(dim, hidden, tokens, true);
    p.linear(hidden, dim, tokens, true);
}

fn profile_transformer(spec: &SegmenterSpec) -> Profile {
    let sides = spec.token_sides();
    let mut dims = spec.block_dims.clone();
    dims.push(spec.bottleneck_dim);
    let stages = spec.block_dims.len();
    let mut p = Profile::default();
    // patch embedding
    p.conv(spec.in_channels, dims[0], spec.patch_size, sides[0], true, 1);
    p.norm(dims[0]);
    for i in 0..stages {
        for _ in 0..spec.depths[i] {
            swin_block(&mut p, spec, dims[i], spec.num_heads[i], sides[i]);
        }
        // patch merging: norm over 4C, 4C -> 2C without bias
        p.norm(4 * dims[i]);
        p.linear(4 * dims[i], 2 * dims[i], sides[i + 1] * sides[i + 1], false);
    }
    for _ in 0..spec.bottleneck_depth {
        swin_block(&mut p, spec, dims[stages], spec.num_heads[stages], sides[stages]);
    }
    p.norm(dims[stages]);
    for i in (0..stages).rev() {
        // patch expanding from level i+1: C -> 2C linear, norm over C/2
        let from = dims[i + 1];
        p.linear(from, 2 * from, sides[i + 1] * sides[i + 1], false);
        p.norm(from / 2);
        // skip fusion: concat then 2C -> C
        p.linear(2 * dims[i], dims[i], sides[i] * sides[i], true);
        for _ in 0..spec.depths[i] {
            swin_block(&mut p, spec, dims[i], spec.num_heads[i], sides[i]);
        }
    }
    p.norm(dims[0]);
    // final patch expanding back to full resolution
    let f = spec.patch_size * spec.patch_size;
    p.linear(dims[0], f * dims[0], sides[0] * sides[0], false);
    p.norm(dims[0]);
    p.conv(dims[0], spec.num_classes, 1, spec.input_size, false, 1);
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for scale in [Scale::Paper, Scale::Desk] {
            let size = if scale == Scale::Paper { 448 } else { 64 };
            SegmenterSpec::lightweight(scale, size, 2).validate().unwrap();
            SegmenterSpec::transformer(scale, size, 2).validate().unwrap();
        }
    }

    #[test]
    fn window_tiling_errors() {
        let spec = SegmenterSpec::transformer(Scale::Paper, 480, 2);
        assert!(spec.validate().is_err());
        let spec = SegmenterSpec::transformer(Scale::Paper, 440, 2);
        assert!(spec.validate().is_err());
        assert!(SegmenterSpec::lightweight(Scale::Desk, 48, 2).validate().is_err());
    }

    #[test]
    fn single_conv_hand_count() {
        let mut p = Profile::default();
        p.conv(1, 1, 3, 4, false, 1);
        assert_eq!(p.params, 9);
        assert_eq!(p.macs, 9 * 16);
    }

    #[test]
    fn desk_window_clips_at_bottleneck() {
        let spec = SegmenterSpec::transformer(Scale::Desk, 64, 2);
        assert_eq!(spec.token_sides(), vec![16, 8, 4, 2]);
        assert_eq!(spec.effective_window(2), 2);
    }
}
