//! Lightweight convolutional segmenter: three conv stages, two tokenized
//! shifted-MLP stages and a mirrored decoder with additive skips.

use candle_core::{Module, Tensor};
use pccl_core::arch::SegmenterSpec;

use crate::error::Result;
use crate::nn::{self, BatchNorm2d, Builder, Conv2d, DepthwiseConv3, LayerNorm, Linear};

const SHIFT_GROUPS: usize = 5;

/// Tokenized MLP block with axial shifts around the hidden projection.
#[derive(Clone)]
struct ShiftedBlock {
    norm: LayerNorm,
    fc1: Linear,
    dwconv: DepthwiseConv3,
    fc2: Linear,
}

impl ShiftedBlock {
    fn new(b: &mut Builder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut b.sub("norm"), dim)?,
            fc1: Linear::new(&mut b.sub("fc1"), dim, hidden, true)?,
            dwconv: DepthwiseConv3::new(&mut b.sub("dwconv"), hidden)?,
            fc2: Linear::new(&mut b.sub("fc2"), hidden, dim, true)?,
        })
    }

    /// `x`: tokens `(B, H·W, C)`.
    fn forward(&self, x: &Tensor, h: usize, w: usize) -> candle_core::Result<Tensor> {
        let y = self.norm.forward(x)?;
        let y = axial_shift(&to_map(&y, h, w)?, 3)?;
        let y = self.fc1.forward(&to_tokens(&y)?)?;
        let y = self.dwconv.forward(&to_map(&y, h, w)?)?.gelu_erf()?;
        let y = axial_shift(&y, 2)?;
        let y = self.fc2.forward(&to_tokens(&y)?)?;
        x + y
    }
}

/// Splits channels into groups shifted by -2..=2 along `dim`.
fn axial_shift(x: &Tensor, dim: usize) -> candle_core::Result<Tensor> {
    let pad = (SHIFT_GROUPS / 2) as isize;
    let groups = x.chunk(SHIFT_GROUPS, 1)?;
    let shifted = groups
        .iter()
        .enumerate()
        .map(|(i, g)| nn::shift(g, dim, i as isize - pad))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Tensor::cat(&shifted, 1)
}

fn to_tokens(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()
}

fn to_map(x: &Tensor, h: usize, w: usize) -> candle_core::Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))
}

/// Overlapping stride-2 patch embedding, token block, and trailing norm.
#[derive(Clone)]
struct TokenStage {
    embed: Conv2d,
    embed_norm: LayerNorm,
    block: ShiftedBlock,
    norm: LayerNorm,
}

impl TokenStage {
    fn new(b: &mut Builder, cin: usize, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            embed: Conv2d::new(&mut b.sub("patch_embed.proj"), cin, dim, 3, 2, 1, true)?,
            embed_norm: LayerNorm::new(&mut b.sub("patch_embed.norm"), dim)?,
            block: ShiftedBlock::new(&mut b.sub("block"), dim, hidden)?,
            norm: LayerNorm::new(&mut b.sub("norm"), dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = self.embed.forward(x)?;
        let (_, _, h, w) = y.dims4()?;
        let t = self.embed_norm.forward(&to_tokens(&y)?)?;
        let t = self.norm.forward(&self.block.forward(&t, h, w)?)?;
        to_map(&t, h, w)
    }
}

#[derive(Clone)]
struct DecoderBlock {
    block: ShiftedBlock,
    norm: LayerNorm,
}

impl DecoderBlock {
    fn new(b: &mut Builder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            block: ShiftedBlock::new(&mut b.sub("block"), dim, hidden)?,
            norm: LayerNorm::new(&mut b.sub("norm"), dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let t = self.block.forward(&to_tokens(x)?, h, w)?;
        to_map(&self.norm.forward(&t)?, h, w)
    }
}

#[derive(Clone)]
pub struct Unext {
    enc: Vec<(Conv2d, BatchNorm2d)>,
    tok1: TokenStage,
    tok2: TokenStage,
    dec: Vec<(Conv2d, Option<BatchNorm2d>)>,
    dblock1: DecoderBlock,
    dblock2: DecoderBlock,
    head: Conv2d,
}

impl Unext {
    pub fn new(b: &mut Builder, spec: &SegmenterSpec) -> Result<Self> {
        let c = &spec.encoder_channels;
        let widths = [spec.in_channels, c[0], c[1], c[2]];
        let mut enc = Vec::new();
        for i in 0..3 {
            enc.push((
                Conv2d::new(&mut b.sub(format!("encoder{}", i + 1)), widths[i], widths[i + 1], 3, 1, 1, true)?,
                BatchNorm2d::new(&mut b.sub(format!("ebn{}", i + 1)), widths[i + 1])?,
            ));
        }
        let tok1 = TokenStage::new(&mut b.sub("stage4"), c[2], c[3], spec.mlp_hidden(c[3]))?;
        let tok2 = TokenStage::new(&mut b.sub("stage5"), c[3], c[4], spec.mlp_hidden(c[4]))?;
        let dec_widths = [(c[4], c[3]), (c[3], c[2]), (c[2], c[1]), (c[1], c[0]), (c[0], c[0])];
        let mut dec = Vec::new();
        for (i, &(cin, cout)) in dec_widths.iter().enumerate() {
            let conv = Conv2d::new(&mut b.sub(format!("decoder{}", i + 1)), cin, cout, 3, 1, 1, true)?;
            let bn = if i < 4 { Some(BatchNorm2d::new(&mut b.sub(format!("dbn{}", i + 1)), cout)?) } else { None };
            dec.push((conv, bn));
        }
        Ok(Self {
            enc,
            tok1,
            tok2,
            dec,
            dblock1: DecoderBlock::new(&mut b.sub("dblock1"), c[3], spec.mlp_hidden(c[3]))?,
            dblock2: DecoderBlock::new(&mut b.sub("dblock2"), c[2], spec.mlp_hidden(c[2]))?,
            head: Conv2d::new(&mut b.sub("final"), c[0], spec.num_classes, 1, 1, 0, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut skips = Vec::with_capacity(4);
        let mut out = x.clone();
        for (conv, bn) in &self.enc {
            out = bn.forward(&conv.forward(&out)?, train)?.max_pool2d(2)?.relu()?;
            skips.push(out.clone());
        }
        out = self.tok1.forward(&out)?;
        skips.push(out.clone());
        out = self.tok2.forward(&out)?;
        for (i, (conv, bn)) in self.dec.iter().enumerate() {
            let mut y = conv.forward(&out)?;
            if let Some(bn) = bn {
                y = bn.forward(&y, train)?;
            }
            out = nn::upsample2x(&y)?.relu()?;
            if i < 4 {
                out = (out + &skips[3 - i])?;
            }
            match i {
                0 => out = self.dblock1.forward(&out)?,
                1 => out = self.dblock2.forward(&out)?,
                _ => {}
            }
        }
        self.head.forward(&out)
    }
}
