//! The two student segmenters behind one type, plus EMA teacher updates.

mod swin;
mod unext;

use candle_core::{Device, Tensor};
use pccl_core::arch::{self, SegmenterKind, SegmenterSpec};
use pccl_core::ema;

pub use swin::SwinUnet;
pub use unext::Unext;

use crate::error::{Error, Result};
use crate::nn::{self, Builder, ParamStore};

#[derive(Clone)]
enum Net {
    Lightweight(Unext),
    Transformer(SwinUnet),
}

/// A built segmenter: its spec, named parameters and the layer graph that
/// reads them.
pub struct Segmenter {
    spec: SegmenterSpec,
    seed: u64,
    store: ParamStore,
    net: Net,
}

impl Segmenter {
    /// Builds a freshly initialised model. The same spec and seed always
    /// give the same parameters.
    pub fn build(spec: &SegmenterSpec, seed: u64, device: &Device) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new(device);
        let mut rng = nn::init_rng(seed);
        let net = {
            let mut b = Builder::new(&mut store, &mut rng);
            match spec.kind {
                SegmenterKind::LightweightConv => Net::Lightweight(Unext::new(&mut b, spec)?),
                SegmenterKind::WindowedTransformer => Net::Transformer(SwinUnet::new(&mut b, spec)?),
            }
        };
        Ok(Self { spec: spec.clone(), seed, store, net })
    }

    pub fn spec(&self) -> &SegmenterSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// `(B, 3, S, S)` images to `(B, C, S, S)` logits. `train` selects batch
    /// statistics over running statistics in the normalisation layers.
    pub fn forward(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        let s = self.spec.input_size;
        let dims = images.dims();
        if dims.len() != 4 || dims[1] != self.spec.in_channels || dims[2] != s || dims[3] != s {
            return Err(Error::Usage(format!(
                "expected images of shape (B, {}, {s}, {s}), got {dims:?}",
                self.spec.in_channels
            )));
        }
        let out = match &self.net {
            Net::Lightweight(m) => m.forward(images, train)?,
            Net::Transformer(m) => m.forward(images)?,
        };
        Ok(out)
    }

    pub fn count_parameters(&self) -> u64 {
        self.store.num_params()
    }

    /// Twice the multiply-accumulates of one forward pass at `input_size`.
    pub fn count_flops(&self, input_size: usize) -> u64 {
        let spec = SegmenterSpec { input_size, ..self.spec.clone() };
        arch::profile(&spec).flops()
    }

    /// Independent copy with its own storage.
    pub fn duplicate(&self) -> Result<Self> {
        let copy = Self::build(&self.spec, self.seed, self.device())?;
        copy.copy_from(self)?;
        Ok(copy)
    }

    /// Overwrites every parameter and buffer with `other`'s values.
    pub fn copy_from(&self, other: &Segmenter) -> Result<()> {
        self.zip_tensors(other, |dst, src| {
            dst.set(&src.as_tensor().copy()?)?;
            Ok(())
        })
    }

    /// `self <- decay·self + (1 − decay)·student` over parameters and
    /// normalisation buffers.
    pub fn ema_from(&self, student: &Segmenter, decay: f64) -> Result<()> {
        self.zip_tensors(student, |dst, src| {
            let mut t = flat(dst.as_tensor())?;
            ema::ema_update(&mut t, &flat(src.as_tensor())?, decay)?;
            dst.set(&Tensor::from_vec(t, dst.shape(), dst.device())?)?;
            Ok(())
        })
    }

    /// Parameter values in name order, one flat buffer per tensor.
    pub fn flat_params(&self) -> Result<Vec<Vec<f32>>> {
        self.store.params().values().map(|v| flat(v.as_tensor())).collect()
    }

    fn zip_tensors(
        &self,
        other: &Segmenter,
        mut f: impl FnMut(&candle_core::Var, &candle_core::Var) -> Result<()>,
    ) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::Usage("models have different specs".into()));
        }
        for ((name, dst), (other_name, src)) in self.store.named_tensors().zip(other.store.named_tensors()) {
            debug_assert_eq!(name, other_name);
            if dst.shape() != src.shape() {
                return Err(Error::Usage(format!("shape mismatch for {name}")));
            }
            f(dst, src)?;
        }
        Ok(())
    }
}

fn flat(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_vec1::<f32>()?)
}
