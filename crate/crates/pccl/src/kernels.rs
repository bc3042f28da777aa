//! Fused CPU kernels with hand-written backward passes for the layers whose
//! composed-op form is dominated by allocation and strided reductions.
//!
//! Every kernel works on contiguous f32 data; the public wrappers make their
//! inputs contiguous first.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor};

type CResult<T> = candle_core::Result<T>;

fn slice<'a>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [f32]> {
    let data = s.as_slice::<f32>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("fused kernels need contiguous inputs"),
    }
}

fn host(t: &Tensor) -> CResult<Vec<f32>> {
    t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()
}

fn check_f32(t: &Tensor) -> CResult<Tensor> {
    if t.dtype() != DType::F32 {
        candle_core::bail!("fused kernels support f32 only, got {:?}", t.dtype());
    }
    t.contiguous()
}

/// Repeats a length-`c` vector to `(outer, c, inner)`.
struct Repeat {
    outer: usize,
    c: usize,
    inner: usize,
    shape: Shape,
}

impl CustomOp1 for Repeat {
    fn name(&self) -> &'static str {
        "repeat-channel"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let v = slice(s, l)?;
        let mut out = Vec::with_capacity(self.outer * self.c * self.inner);
        for _ in 0..self.outer {
            if self.inner == 1 {
                out.extend_from_slice(v);
            } else {
                for &x in v {
                    out.extend(std::iter::repeat_n(x, self.inner));
                }
            }
        }
        Ok((CpuStorage::F32(out), self.shape.clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let g = host(grad)?;
        let mut acc = vec![0f64; self.c];
        for chunk in g.chunks_exact(self.c * self.inner) {
            if self.inner == 1 {
                acc.iter_mut().zip(chunk).for_each(|(a, &x)| *a += x as f64);
                continue;
            }
            for (a, row) in acc.iter_mut().zip(chunk.chunks_exact(self.inner)) {
                *a += row.iter().map(|&x| x as f64).sum::<f64>();
            }
        }
        let acc: Vec<f32> = acc.into_iter().map(|x| x as f32).collect();
        Ok(Some(Tensor::from_vec(acc, self.c, arg.device())?))
    }
}

/// `v` (length `shape[dim]`) repeated along every other axis of `shape`.
pub fn repeat_channel(v: &Tensor, shape: &[usize], dim: usize) -> CResult<Tensor> {
    let c = shape[dim];
    if v.elem_count() != c {
        candle_core::bail!("repeat_channel: {} values for an axis of {c}", v.elem_count());
    }
    let op = Repeat {
        outer: shape[..dim].iter().product(),
        c,
        inner: shape[dim + 1..].iter().product(),
        shape: Shape::from_dims(shape),
    };
    check_f32(v)?.flatten_all()?.apply_op1(op)
}

/// Normalisation over the last axis with affine weight and bias.
struct LayerNormOp {
    eps: f64,
}

fn row_stats(row: &[f32], eps: f64) -> (f32, f32) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = row.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean as f32, (1.0 / (var + eps).sqrt()) as f32)
}

impl CustomOp3 for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let (x, w, b) = (slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?);
        let c = w.len();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(c) {
            let (mean, rstd) = row_stats(row, self.eps);
            out.extend(row.iter().zip(w).zip(b).map(|((&v, &w), &b)| (v - mean) * rstd * w + b));
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (xv, wv, gv) = (host(x)?, host(w)?, host(grad)?);
        let c = wv.len();
        let mut dx = Vec::with_capacity(xv.len());
        let mut dw = vec![0f64; c];
        let mut db = vec![0f64; c];
        let mut xhat = vec![0f32; c];
        for (row, g) in xv.chunks_exact(c).zip(gv.chunks_exact(c)) {
            let (mean, rstd) = row_stats(row, self.eps);
            let (mut sum_g, mut sum_gx) = (0f64, 0f64);
            for i in 0..c {
                xhat[i] = (row[i] - mean) * rstd;
                dw[i] += (g[i] * xhat[i]) as f64;
                db[i] += g[i] as f64;
                let gw = (g[i] * wv[i]) as f64;
                sum_g += gw;
                sum_gx += gw * xhat[i] as f64;
            }
            let (mg, mgx) = ((sum_g / c as f64) as f32, (sum_gx / c as f64) as f32);
            dx.extend((0..c).map(|i| rstd * (g[i] * wv[i] - mg - xhat[i] * mgx)));
        }
        let dev = x.device();
        let to = |v: Vec<f64>| Tensor::from_vec(v.into_iter().map(|x| x as f32).collect::<Vec<_>>(), c, dev);
        Ok((Some(Tensor::from_vec(dx, x.shape(), dev)?), Some(to(dw)?), Some(to(db)?)))
    }
}

pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> CResult<Tensor> {
    check_f32(x)?.apply_op3(&check_f32(weight)?, &check_f32(bias)?, LayerNormOp { eps })
}

/// Training-mode batch normalisation of `(N, C, H, W)` with batch
/// statistics (biased variance).
struct BatchNormOp {
    eps: f64,
}

/// Per-channel mean and biased variance of `(N, C, H·W)` data.
fn channel_moments(x: &[f32], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * hw) as f64;
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    for s in x.chunks_exact(c * hw) {
        for (m, plane) in mean.iter_mut().zip(s.chunks_exact(hw)) {
            *m += plane.iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for s in x.chunks_exact(c * hw) {
        for ((v, plane), m) in var.iter_mut().zip(s.chunks_exact(hw)).zip(&mean) {
            *v += plane.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// Per-channel batch mean and biased variance of an `(N, C, H, W)` tensor.
pub fn batch_moments(x: &Tensor) -> CResult<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = x.dims4()?;
    Ok(channel_moments(&host(x)?, n, c, h * w))
}

impl CustomOp3 for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let (x, w, b) = (slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?);
        let (n, c, h, wd) = l1.shape().dims4()?;
        let hw = h * wd;
        let (mean, var) = channel_moments(x, n, c, hw);
        let mut out = Vec::with_capacity(x.len());
        for s in x.chunks_exact(c * hw) {
            for (ch, plane) in s.chunks_exact(hw).enumerate() {
                let scale = (w[ch] as f64 / (var[ch] + self.eps).sqrt()) as f32;
                let shift = b[ch] - mean[ch] as f32 * scale;
                out.extend(plane.iter().map(|&v| v * scale + shift));
            }
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (n, c, h, wd) = x.dims4()?;
        let hw = h * wd;
        let (xv, wv, gv) = (host(x)?, host(w)?, host(grad)?);
        let (mean, var) = channel_moments(&xv, n, c, hw);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut db = vec![0f64; c];
        let mut dw = vec![0f64; c];
        for (s, g) in xv.chunks_exact(c * hw).zip(gv.chunks_exact(c * hw)) {
            for ch in 0..c {
                let (plane, gp) = (&s[ch * hw..(ch + 1) * hw], &g[ch * hw..(ch + 1) * hw]);
                for (&v, &gg) in plane.iter().zip(gp) {
                    db[ch] += gg as f64;
                    dw[ch] += gg as f64 * (v as f64 - mean[ch]) * rstd[ch];
                }
            }
        }
        let count = (n * hw) as f64;
        let mut dx = Vec::with_capacity(xv.len());
        for (s, g) in xv.chunks_exact(c * hw).zip(gv.chunks_exact(c * hw)) {
            for ch in 0..c {
                let k = wv[ch] as f64 * rstd[ch];
                let (mdy, mdyx) = (db[ch] / count, dw[ch] / count);
                let (plane, gp) = (&s[ch * hw..(ch + 1) * hw], &g[ch * hw..(ch + 1) * hw]);
                dx.extend(plane.iter().zip(gp).map(|(&v, &gg)| {
                    let xhat = (v as f64 - mean[ch]) * rstd[ch];
                    (k * (gg as f64 - mdy - xhat * mdyx)) as f32
                }));
            }
        }
        let dev = x.device();
        let to = |v: Vec<f64>| Tensor::from_vec(v.into_iter().map(|x| x as f32).collect::<Vec<_>>(), c, dev);
        Ok((Some(Tensor::from_vec(dx, x.shape(), dev)?), Some(to(dw)?), Some(to(db)?)))
    }
}

pub fn batch_norm_train(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> CResult<Tensor> {
    check_f32(x)?.apply_op3(&check_f32(weight)?, &check_f32(bias)?, BatchNormOp { eps })
}

/// 3×3 depthwise convolution, stride 1, zero padding 1. Weight `(C, 9)`,
/// bias `(C)`.
struct Depthwise3;

fn depthwise_plane(x: &[f32], w: &[f32], h: usize, wd: usize, out: &mut [f32]) {
    for i in 0..h {
        for j in 0..wd {
            let mut acc = 0f32;
            for dy in 0..3 {
                let y = i + dy;
                if y < 1 || y > h {
                    continue;
                }
                for dx in 0..3 {
                    let xx = j + dx;
                    if xx < 1 || xx > wd {
                        continue;
                    }
                    acc += w[dy * 3 + dx] * x[(y - 1) * wd + xx - 1];
                }
            }
            out[i * wd + j] += acc;
        }
    }
}

impl CustomOp3 for Depthwise3 {
    fn name(&self) -> &'static str {
        "depthwise-3x3"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let (x, w, b) = (slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?);
        let (_, c, h, wd) = l1.shape().dims4()?;
        let hw = h * wd;
        let mut out = vec![0f32; x.len()];
        for (s, o) in x.chunks_exact(c * hw).zip(out.chunks_exact_mut(c * hw)) {
            for ch in 0..c {
                let op = &mut o[ch * hw..(ch + 1) * hw];
                op.fill(b[ch]);
                depthwise_plane(&s[ch * hw..(ch + 1) * hw], &w[ch * 9..ch * 9 + 9], h, wd, op);
            }
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (_, c, h, wd) = x.dims4()?;
        let hw = h * wd;
        let (xv, wv, gv) = (host(x)?, host(w)?, host(grad)?);
        let mut dx = vec![0f32; xv.len()];
        let mut dw = vec![0f64; c * 9];
        let mut db = vec![0f64; c];
        for ((s, g), d) in xv.chunks_exact(c * hw).zip(gv.chunks_exact(c * hw)).zip(dx.chunks_exact_mut(c * hw)) {
            for ch in 0..c {
                let (plane, gp) = (&s[ch * hw..(ch + 1) * hw], &g[ch * hw..(ch + 1) * hw]);
                db[ch] += gp.iter().map(|&v| v as f64).sum::<f64>();
                // the input gradient is the output gradient convolved with the flipped kernel
                let k = &wv[ch * 9..ch * 9 + 9];
                let flipped: [f32; 9] = std::array::from_fn(|i| k[8 - i]);
                depthwise_plane(gp, &flipped, h, wd, &mut d[ch * hw..(ch + 1) * hw]);
                for dy in 0..3 {
                    for dxo in 0..3 {
                        let mut acc = 0f64;
                        for i in 0..h {
                            let y = i + dy;
                            if y < 1 || y > h {
                                continue;
                            }
                            for j in 0..wd {
                                let xx = j + dxo;
                                if xx < 1 || xx > wd {
                                    continue;
                                }
                                acc += (gp[i * wd + j] * plane[(y - 1) * wd + xx - 1]) as f64;
                            }
                        }
                        dw[ch * 9 + dy * 3 + dxo] += acc;
                    }
                }
            }
        }
        let dev = x.device();
        let to = |v: Vec<f64>, len: usize| Tensor::from_vec(v.into_iter().map(|x| x as f32).collect::<Vec<_>>(), len, dev);
        Ok((Some(Tensor::from_vec(dx, x.shape(), dev)?), Some(to(dw, c * 9)?.reshape((c, 9))?), Some(to(db, c)?)))
    }
}

pub fn depthwise3(x: &Tensor, weight: &Tensor, bias: &Tensor) -> CResult<Tensor> {
    check_f32(x)?.apply_op3(&check_f32(weight)?, &check_f32(bias)?, Depthwise3)
}

/// Patch extraction for convolution as a matrix product: `(N, C, H, W)` to
/// `(C·k·k, N·OH·OW)`.
struct Unfold {
    k: usize,
    stride: usize,
    pad: usize,
}

impl Unfold {
    fn out_side(&self, side: usize) -> usize {
        (side + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Calls `f(row, col, input_index)` for every in-bounds tap.
    fn for_each(&self, (n, c, h, w): (usize, usize, usize, usize), mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_side(h), self.out_side(w));
        let cols = n * oh * ow;
        let k = self.k;
        for ch in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    for b in 0..n {
                        let plane = (b * c + ch) * h * w;
                        for oy in 0..oh {
                            let y = (oy * self.stride + ky) as isize - self.pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let base = row * cols + (b * oh + oy) * ow;
                            for ox in 0..ow {
                                let x = (ox * self.stride + kx) as isize - self.pad as isize;
                                if x >= 0 && x < w as isize {
                                    f(row, base + ox, plane + y as usize * w + x as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let x = slice(s, l)?;
        let dims = l.shape().dims4()?;
        let (n, c, h, w) = dims;
        let rows = c * self.k * self.k;
        let cols = n * self.out_side(h) * self.out_side(w);
        let mut out = vec![0f32; rows * cols];
        self.for_each(dims, |_, o, i| out[o] = x[i]);
        Ok((CpuStorage::F32(out), Shape::from_dims(&[rows, cols])))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let g = host(grad)?;
        let mut dx = vec![0f32; arg.elem_count()];
        self.for_each(arg.dims4()?, |_, o, i| dx[i] += g[o]);
        Ok(Some(Tensor::from_vec(dx, arg.shape(), arg.device())?))
    }
}

/// Convolution of `(N, C, H, W)` with `(O, C, k, k)` weights as one matrix
/// product over unfolded patches.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> CResult<Tensor> {
    let (n, _, h, w) = x.dims4()?;
    let (o, c, k, _) = weight.dims4()?;
    let op = Unfold { k, stride, pad };
    let (oh, ow) = (op.out_side(h), op.out_side(w));
    let cols = check_f32(x)?.apply_op1(op)?;
    weight
        .reshape((o, c * k * k))?
        .matmul(&cols)?
        .reshape((o, n, oh, ow))?
        .permute((1, 0, 2, 3))?
        .contiguous()
}

/// Softmax over the last axis.
struct SoftmaxLast;

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let x = slice(s, l)?;
        let n = l.shape().dims().last().copied().unwrap_or(1);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(n) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let start = out.len();
            out.extend(row.iter().map(|&v| (v - max).exp()));
            let sum: f32 = out[start..].iter().sum();
            out[start..].iter_mut().for_each(|v| *v /= sum);
        }
        Ok((CpuStorage::F32(out), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let n = arg.dims().last().copied().unwrap_or(1);
        let (y, g) = (host(res)?, host(grad)?);
        let mut dx = Vec::with_capacity(y.len());
        for (yr, gr) in y.chunks_exact(n).zip(g.chunks_exact(n)) {
            let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            dx.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
        }
        Ok(Some(Tensor::from_vec(dx, arg.shape(), arg.device())?))
    }
}

pub fn softmax_last(x: &Tensor) -> CResult<Tensor> {
    check_f32(x)?.apply_op1(SoftmaxLast)
}
