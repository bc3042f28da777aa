//! U-shaped windowed-attention transformer with patch merging in the
//! encoder and patch expanding in the decoder.

use candle_core::{Device, Module, Tensor};
use pccl_core::arch::SegmenterSpec;

use crate::error::Result;
use crate::nn::{self, Builder, Conv2d, Init, LayerNorm, Linear};

/// Additive mask value separating tokens that came from different regions
/// after the cyclic shift.
const MASK_NEG: f32 = -100.0;

#[derive(Clone)]
struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    /// `(1, heads, N, N)` relative position bias gathered from the table.
    bias_table: Tensor,
    bias_index: Tensor,
    heads: usize,
    scale: f64,
}

impl WindowAttention {
    fn new(b: &mut Builder, dim: usize, heads: usize, window: usize) -> Result<Self> {
        let span = 2 * window - 1;
        let bias_table = b.param("relative_position_bias_table", &[span * span, heads], Init::TruncNormal(0.02))?;
        let n = window * window;
        let mut index = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let dy = (i / window) as i64 - (j / window) as i64 + window as i64 - 1;
                let dx = (i % window) as i64 - (j % window) as i64 + window as i64 - 1;
                index.push((dy * span as i64 + dx) as u32);
            }
        }
        Ok(Self {
            qkv: Linear::trunc_normal(&mut b.sub("qkv"), dim, 3 * dim, true)?,
            proj: Linear::trunc_normal(&mut b.sub("proj"), dim, dim, true)?,
            bias_table,
            bias_index: Tensor::from_vec(index, n * n, &b.device())?,
            heads,
            scale: ((dim / heads) as f64).powf(-0.5),
        })
    }

    /// `x`: windows `(B·nW, N, C)`; `mask`: `(nW, N, N)`.
    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let (bw, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((bw, n, 3, self.heads, hd))?.permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)?.contiguous()? * self.scale)?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        nn::record_macs(2 * bw * n * n * c);
        let mut attn = q.matmul(&k.t()?)?;
        let bias = self
            .bias_table
            .index_select(&self.bias_index, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?
            .unsqueeze(0)?;
        attn = attn.broadcast_add(&bias)?;
        if let Some(mask) = mask {
            let nw = mask.dim(0)?;
            attn = attn
                .reshape((bw / nw, nw, self.heads, n, n))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((bw, self.heads, n, n))?;
        }
        let attn = crate::kernels::softmax_last(&attn)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((bw, n, c))?;
        self.proj.forward(&out)
    }
}

#[derive(Clone)]
struct SwinBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    window: usize,
    shift: usize,
    mask: Option<Tensor>,
}

impl SwinBlock {
    fn new(b: &mut Builder, spec: &SegmenterSpec, dim: usize, heads: usize, side: usize, shifted: bool) -> Result<Self> {
        let window = spec.effective_window(side);
        let shift = if shifted && side > window { window / 2 } else { 0 };
        let mask = if shift > 0 { Some(shift_mask(side, window, shift, &b.device())?) } else { None };
        let hidden = spec.mlp_hidden(dim);
        Ok(Self {
            norm1: LayerNorm::new(&mut b.sub("norm1"), dim)?,
            attn: WindowAttention::new(&mut b.sub("attn"), dim, heads, window)?,
            norm2: LayerNorm::new(&mut b.sub("norm2"), dim)?,
            fc1: Linear::trunc_normal(&mut b.sub("mlp.fc1"), dim, hidden, true)?,
            fc2: Linear::trunc_normal(&mut b.sub("mlp.fc2"), hidden, dim, true)?,
            window,
            shift,
            mask,
        })
    }

    /// `x`: `(B, H, W, C)`.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let ws = self.window;
        let mut y = self.norm1.forward(x)?;
        if self.shift > 0 {
            y = nn::roll(&nn::roll(&y, 1, self.shift)?, 2, self.shift)?;
        }
        let windows = y
            .reshape((b, h / ws, ws, w / ws, ws, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b * (h / ws) * (w / ws), ws * ws, c))?;
        let attended = self.attn.forward(&windows, self.mask.as_ref())?;
        let mut y = attended
            .reshape((b, h / ws, w / ws, ws, ws, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, h, w, c))?;
        if self.shift > 0 {
            y = nn::roll(&nn::roll(&y, 1, h - self.shift)?, 2, w - self.shift)?;
        }
        let x = (x + y)?;
        let m = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?)?;
        x + m
    }
}

/// Attention mask for shifted windows: tokens from different regions of the
/// rolled map must not attend to each other.
fn shift_mask(side: usize, window: usize, shift: usize, device: &Device) -> Result<Tensor> {
    let region = |i: usize| {
        if i < side - window {
            0
        } else if i < side - shift {
            1
        } else {
            2
        }
    };
    let nw = (side / window) * (side / window);
    let n = window * window;
    let mut data = Vec::with_capacity(nw * n * n);
    for wy in 0..side / window {
        for wx in 0..side / window {
            let labels: Vec<usize> = (0..n)
                .map(|t| {
                    let (y, x) = (wy * window + t / window, wx * window + t % window);
                    region(y) * 3 + region(x)
                })
                .collect();
            for i in 0..n {
                for j in 0..n {
                    data.push(if labels[i] == labels[j] { 0.0 } else { MASK_NEG });
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (nw, n, n), device)?)
}

#[derive(Clone)]
struct PatchMerging {
    norm: LayerNorm,
    reduction: Linear,
}

impl PatchMerging {
    fn new(b: &mut Builder, dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut b.sub("norm"), 4 * dim)?,
            reduction: Linear::trunc_normal(&mut b.sub("reduction"), 4 * dim, 2 * dim, false)?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let merged = x
            .reshape((b, h / 2, 2, w / 2, 2, c))?
            .permute((0, 1, 3, 4, 2, 5))?
            .contiguous()?
            .reshape((b, h / 2, w / 2, 4 * c))?;
        self.reduction.forward(&self.norm.forward(&merged)?)
    }
}

/// Linear expansion followed by a depth-to-space rearrangement.
#[derive(Clone)]
struct PatchExpand {
    expand: Linear,
    norm: LayerNorm,
    factor: usize,
}

impl PatchExpand {
    /// 2× expansion halving the width.
    fn double(b: &mut Builder, dim: usize) -> Result<Self> {
        Ok(Self {
            expand: Linear::trunc_normal(&mut b.sub("expand"), dim, 2 * dim, false)?,
            norm: LayerNorm::new(&mut b.sub("norm"), dim / 2)?,
            factor: 2,
        })
    }

    /// `factor`× expansion keeping the width.
    fn keep_width(b: &mut Builder, dim: usize, factor: usize) -> Result<Self> {
        Ok(Self {
            expand: Linear::trunc_normal(&mut b.sub("expand"), dim, factor * factor * dim, false)?,
            norm: LayerNorm::new(&mut b.sub("norm"), dim)?,
            factor,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = self.expand.forward(x)?;
        let (b, h, w, c) = y.dims4()?;
        let f = self.factor;
        let out = c / (f * f);
        let y = y
            .reshape((b, h, w, f, f, out))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, h * f, w * f, out))?;
        self.norm.forward(&y)
    }
}

#[derive(Clone)]
pub struct SwinUnet {
    patch_embed: Conv2d,
    embed_norm: LayerNorm,
    encoder: Vec<Vec<SwinBlock>>,
    merges: Vec<PatchMerging>,
    bottleneck: Vec<SwinBlock>,
    norm: LayerNorm,
    expands: Vec<PatchExpand>,
    fuse: Vec<Linear>,
    decoder: Vec<Vec<SwinBlock>>,
    norm_up: LayerNorm,
    final_expand: PatchExpand,
    head: Conv2d,
}

fn stage(b: &mut Builder, spec: &SegmenterSpec, depth: usize, dim: usize, heads: usize, side: usize) -> Result<Vec<SwinBlock>> {
    (0..depth).map(|i| SwinBlock::new(&mut b.sub(format!("blocks.{i}")), spec, dim, heads, side, i % 2 == 1)).collect()
}

impl SwinUnet {
    pub fn new(b: &mut Builder, spec: &SegmenterSpec) -> Result<Self> {
        let sides = spec.token_sides();
        let mut dims = spec.block_dims.clone();
        dims.push(spec.bottleneck_dim);
        let stages = spec.block_dims.len();
        let patch_embed = Conv2d::new(&mut b.sub("patch_embed.proj"), spec.in_channels, dims[0], spec.patch_size, spec.patch_size, 0, true)?;
        let embed_norm = LayerNorm::new(&mut b.sub("patch_embed.norm"), dims[0])?;
        let mut encoder = Vec::new();
        let mut merges = Vec::new();
        for i in 0..stages {
            encoder.push(stage(&mut b.sub(format!("layers.{i}")), spec, spec.depths[i], dims[i], spec.num_heads[i], sides[i])?);
            merges.push(PatchMerging::new(&mut b.sub(format!("layers.{i}.downsample")), dims[i])?);
        }
        let bottleneck = stage(&mut b.sub("bottleneck"), spec, spec.bottleneck_depth, dims[stages], spec.num_heads[stages], sides[stages])?;
        let norm = LayerNorm::new(&mut b.sub("norm"), dims[stages])?;
        let mut expands = Vec::new();
        let mut fuse = Vec::new();
        let mut decoder = Vec::new();
        for i in (0..stages).rev() {
            expands.push(PatchExpand::double(&mut b.sub(format!("layers_up.{i}.upsample")), dims[i + 1])?);
            fuse.push(Linear::trunc_normal(&mut b.sub(format!("concat_back_dim.{i}")), 2 * dims[i], dims[i], true)?);
            decoder.push(stage(&mut b.sub(format!("layers_up.{i}")), spec, spec.depths[i], dims[i], spec.num_heads[i], sides[i])?);
        }
        Ok(Self {
            patch_embed,
            embed_norm,
            encoder,
            merges,
            bottleneck,
            norm,
            expands,
            fuse,
            decoder,
            norm_up: LayerNorm::new(&mut b.sub("norm_up"), dims[0])?,
            final_expand: PatchExpand::keep_width(&mut b.sub("up"), dims[0], spec.patch_size)?,
            head: Conv2d::new(&mut b.sub("output"), dims[0], spec.num_classes, 1, 1, 0, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut t = self.patch_embed.forward(x)?.permute((0, 2, 3, 1))?.contiguous()?;
        t = self.embed_norm.forward(&t)?;
        let mut skips = Vec::new();
        for (blocks, merge) in self.encoder.iter().zip(&self.merges) {
            for blk in blocks {
                t = blk.forward(&t)?;
            }
            skips.push(t.clone());
            t = merge.forward(&t)?;
        }
        for blk in &self.bottleneck {
            t = blk.forward(&t)?;
        }
        t = self.norm.forward(&t)?;
        for ((expand, fuse), blocks) in self.expands.iter().zip(&self.fuse).zip(&self.decoder) {
            t = expand.forward(&t)?;
            let skip = skips.pop().expect("one skip per decoder stage");
            t = fuse.forward(&Tensor::cat(&[t, skip], 3)?)?;
            for blk in blocks {
                t = blk.forward(&t)?;
            }
        }
        t = self.final_expand.forward(&self.norm_up.forward(&t)?)?;
        self.head.forward(&t.permute((0, 3, 1, 2))?.contiguous()?)
    }
}
