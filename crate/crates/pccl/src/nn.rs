//! Parameter storage and the layers both segmenters are assembled from.
//!
//! Parameters are candle [`Var`]s registered under stable dotted names so
//! that checkpoints, optimizer state and the EMA teacher can all be matched
//! up by name. Initialisation draws from a seeded ChaCha stream, never from
//! the backend's own generator.

use std::cell::Cell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::kernels;

thread_local! {
    static MACS: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` and returns the multiply-accumulates recorded by the layers it
/// executed on this thread.
pub fn count_macs<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let previous = MACS.with(|m| m.replace(Some(0)));
    let out = f();
    let counted = MACS.with(|m| m.replace(previous)).unwrap_or(0);
    (out, counted)
}

pub(crate) fn record_macs(n: usize) {
    MACS.with(|m| {
        if let Some(v) = m.get() {
            m.set(Some(v + n as u64));
        }
    });
}

pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
}

/// Named trainable parameters plus non-trainable running buffers.
#[derive(Clone)]
pub struct ParamStore {
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(device: &Device) -> Self {
        Self { device: device.clone(), params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn param_vars(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn num_params(&self) -> u64 {
        self.params.values().map(|v| v.elem_count() as u64).sum()
    }

    /// Every named tensor, parameters and buffers alike.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter().chain(self.buffers.iter())
    }

    /// Deep copy with fresh storage, so updates to one never reach the other.
    pub fn deep_clone(&self) -> Result<Self> {
        let copy = |m: &BTreeMap<String, Var>| -> Result<BTreeMap<String, Var>> {
            m.iter().map(|(k, v)| Ok((k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?))).collect()
        };
        Ok(Self { device: self.device.clone(), params: copy(&self.params)?, buffers: copy(&self.buffers)? })
    }
}

/// Registers parameters under a dotted prefix while drawing initial values
/// from one seeded stream.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: impl std::fmt::Display) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Builder { store: self.store, rng: self.rng, prefix }
    }

    fn key(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound) as f32).collect()
            }
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut *self.rng);
                        if v.abs() <= 2.0 * std {
                            break v as f32;
                        }
                    })
                    .collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.store.device)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.store.params.insert(self.key(name), var);
        Ok(out)
    }

    pub fn buffer(&mut self, name: &str, value: f32, len: usize) -> Result<Var> {
        let t = Tensor::from_vec(vec![value; len], len, &self.store.device)?;
        let var = Var::from_tensor(&t)?;
        self.store.buffers.insert(self.key(name), var.clone());
        Ok(var)
    }
}

/// Seeded generator for parameter initialisation.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
    inp: usize,
    out: usize,
}

impl Linear {
    /// Uniform fan-in initialisation.
    pub fn new(b: &mut Builder, inp: usize, out: usize, bias: bool) -> Result<Self> {
        let weight = b.param("weight", &[out, inp], Init::FanIn(inp))?;
        let bias = if bias { Some(b.param("bias", &[out], Init::FanIn(inp))?) } else { None };
        Ok(Self { weight, bias, inp, out })
    }

    /// Truncated-normal weights and zero bias.
    pub fn trunc_normal(b: &mut Builder, inp: usize, out: usize, bias: bool) -> Result<Self> {
        let weight = b.param("weight", &[out, inp], Init::TruncNormal(0.02))?;
        let bias = if bias { Some(b.param("bias", &[out], Init::Zeros)?) } else { None };
        Ok(Self { weight, bias, inp, out })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        record_macs(x.elem_count() / self.inp * self.out * self.inp);
        let mut dims = x.dims().to_vec();
        let rows = x.elem_count() / self.inp;
        let mut y = x.reshape((rows, self.inp))?.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = (&y + kernels::repeat_channel(b, &[rows, self.out], 1)?)?;
        }
        *dims.last_mut().expect("linear input has a feature axis") = self.out;
        y.reshape(dims)
    }
}

#[derive(Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, cin: usize, cout: usize, k: usize, stride: usize, padding: usize, bias: bool) -> Result<Self> {
        let fan_in = cin * k * k;
        let weight = b.param("weight", &[cout, cin, k, k], Init::FanIn(fan_in))?;
        let bias = if bias { Some(b.param("bias", &[cout], Init::FanIn(fan_in))?) } else { None };
        Ok(Self { weight, bias, stride, padding })
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = kernels::conv2d(x, &self.weight, self.stride, self.padding)?;
        let (cout, cin, kh, kw) = self.weight.dims4()?;
        record_macs(y.elem_count() / cout * cout * cin * kh * kw);
        match &self.bias {
            Some(b) => &y + kernels::repeat_channel(b, y.dims(), 1)?,
            None => Ok(y),
        }
    }
}

/// 3×3 depthwise convolution with zero padding.
#[derive(Clone)]
pub struct DepthwiseConv3 {
    /// `(C, 9)` view of the `(C, 1, 3, 3)` weight.
    weight: Tensor,
    bias: Tensor,
}

impl DepthwiseConv3 {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        let weight = b.param("weight", &[channels, 1, 3, 3], Init::FanIn(9))?;
        let bias = b.param("bias", &[channels], Init::FanIn(9))?;
        Ok(Self { weight: weight.reshape((channels, 9))?, bias })
    }
}

impl Module for DepthwiseConv3 {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        record_macs(x.elem_count() * 9);
        kernels::depthwise3(x, &self.weight, &self.bias)
    }
}

/// Normalisation over the last dimension.
#[derive(Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, dim: usize) -> Result<Self> {
        Ok(Self { weight: b.param("weight", &[dim], Init::Ones)?, bias: b.param("bias", &[dim], Init::Zeros)? })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        kernels::layer_norm(x, &self.weight, &self.bias, 1e-5)
    }
}

/// Batch normalisation over `(N, H, W)` with running statistics for
/// evaluation.
#[derive(Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
}

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

impl BatchNorm2d {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: b.param("weight", &[channels], Init::Ones)?,
            bias: b.param("bias", &[channels], Init::Zeros)?,
            running_mean: b.buffer("running_mean", 0.0, channels)?,
            running_var: b.buffer("running_var", 1.0, channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if train {
            let (mean, var) = kernels::batch_moments(x)?;
            let count = (n * h * w) as f64;
            let unbiased = count / (count - 1.0).max(1.0);
            let blend = |running: &Var, batch: Vec<f64>, k: f64| -> candle_core::Result<()> {
                let old = running.as_tensor().to_vec1::<f32>()?;
                let new: Vec<f32> = old
                    .iter()
                    .zip(batch)
                    .map(|(&r, b)| ((1.0 - BN_MOMENTUM) * r as f64 + BN_MOMENTUM * b * k) as f32)
                    .collect();
                running.set(&Tensor::from_vec(new, c, x.device())?)
            };
            blend(&self.running_mean, mean, 1.0)?;
            blend(&self.running_var, var, unbiased)?;
            return kernels::batch_norm_train(x, &self.weight, &self.bias, BN_EPS);
        }
        let scale = (&self.weight / (self.running_var.as_tensor() + BN_EPS)?.sqrt()?)?;
        let shift = (&self.bias - (self.running_mean.as_tensor() * &scale)?)?;
        let dims = x.dims();
        (x * kernels::repeat_channel(&scale, dims, 1)?)? + kernels::repeat_channel(&shift, dims, 1)?
    }
}

/// Bilinear 2× upsampling (half-pixel centres, edge replication) of an
/// `(N, C, H, W)` tensor.
pub fn upsample2x(x: &Tensor) -> candle_core::Result<Tensor> {
    let x = upsample_axis(x, 2)?;
    upsample_axis(&x, 3)
}

fn upsample_axis(x: &Tensor, dim: usize) -> candle_core::Result<Tensor> {
    let n = x.dim(dim)?;
    let (prev, next) = if n == 1 {
        (x.clone(), x.clone())
    } else {
        (
            Tensor::cat(&[x.narrow(dim, 0, 1)?, x.narrow(dim, 0, n - 1)?], dim)?,
            Tensor::cat(&[x.narrow(dim, 1, n - 1)?, x.narrow(dim, n - 1, 1)?], dim)?,
        )
    };
    let base = (x * 0.75)?;
    let even = (&base + (prev * 0.25)?)?;
    let odd = (base + (next * 0.25)?)?;
    let mut dims = x.dims().to_vec();
    dims[dim] *= 2;
    Tensor::stack(&[even, odd], dim + 1)?.reshape(dims)
}

/// Zero-filled shift by `s` positions along `dim`.
pub fn shift(x: &Tensor, dim: usize, s: isize) -> candle_core::Result<Tensor> {
    let n = x.dim(dim)?;
    let k = s.unsigned_abs();
    if s == 0 {
        return Ok(x.clone());
    }
    if k >= n {
        return x.zeros_like();
    }
    let mut zshape = x.dims().to_vec();
    zshape[dim] = k;
    let zeros = Tensor::zeros(zshape, x.dtype(), x.device())?;
    if s > 0 {
        Tensor::cat(&[zeros, x.narrow(dim, 0, n - k)?], dim)
    } else {
        Tensor::cat(&[x.narrow(dim, k, n - k)?, zeros], dim)
    }
}

/// Cyclic roll so that `out[i] = x[(i + s) mod n]` along `dim`.
pub fn roll(x: &Tensor, dim: usize, s: usize) -> candle_core::Result<Tensor> {
    let n = x.dim(dim)?;
    let s = s % n;
    if s == 0 {
        return Ok(x.clone());
    }
    Tensor::cat(&[x.narrow(dim, s, n - s)?, x.narrow(dim, 0, s)?], dim)
}

pub fn f32_tensor(data: Vec<f32>, shape: &[usize], device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(DType::F32)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f32], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn upsample_matches_half_pixel_bilinear() {
        let x = t(&[0.0, 4.0], &[1, 1, 1, 2]);
        let y = upsample2x(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // rows are duplicated; columns 0, 1, 3, 4
        assert_eq!(&y[..4], &[0.0, 1.0, 3.0, 4.0]);
        assert_eq!(&y[4..], &y[..4]);
    }

    #[test]
    fn shift_and_roll() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[4]);
        assert_eq!(shift(&x, 0, 1).unwrap().to_vec1::<f32>().unwrap(), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(shift(&x, 0, -2).unwrap().to_vec1::<f32>().unwrap(), vec![3.0, 4.0, 0.0, 0.0]);
        assert_eq!(shift(&x, 0, 5).unwrap().to_vec1::<f32>().unwrap(), vec![0.0; 4]);
        assert_eq!(roll(&x, 0, 1).unwrap().to_vec1::<f32>().unwrap(), vec![2.0, 3.0, 4.0, 1.0]);
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        let mut store = ParamStore::new(&Device::Cpu);
        let mut rng = init_rng(0);
        let mut b = Builder::new(&mut store, &mut rng);
        let dw = DepthwiseConv3::new(&mut b.sub("dw"), 3).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 5, 4), &Device::Cpu).unwrap();
        let ours = dw.forward(&x).unwrap();
        let w = store.params()["dw.weight"].as_tensor().clone();
        let bias = store.params()["dw.bias"].as_tensor().reshape((1, 3, 1, 1)).unwrap();
        let reference = x.conv2d(&w, 1, 1, 1, 3).unwrap().broadcast_add(&bias).unwrap();
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn layer_norm_normalises() {
        let mut store = ParamStore::new(&Device::Cpu);
        let mut rng = init_rng(0);
        let ln = LayerNorm::new(&mut Builder::new(&mut store, &mut rng), 4).unwrap();
        let y = ln.forward(&t(&[1.0, 2.0, 3.0, 4.0], &[1, 4])).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().sum::<f32>().abs() < 1e-5);
        assert!((v.iter().map(|a| a * a).sum::<f32>() / 4.0 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn mac_counter_counts_linear() {
        let mut store = ParamStore::new(&Device::Cpu);
        let mut rng = init_rng(0);
        let lin = Linear::new(&mut Builder::new(&mut store, &mut rng), 3, 5, true).unwrap();
        let x = Tensor::zeros((7, 3), DType::F32, &Device::Cpu).unwrap();
        let (_, macs) = count_macs(|| lin.forward(&x).unwrap());
        assert_eq!(macs, 7 * 3 * 5);
    }
}
