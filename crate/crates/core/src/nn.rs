//! Neural building blocks on top of candle tensors: a seeded parameter store,
//! weight-normalized convolutions, a polyphase transposed convolution, norms,
//! and an FFT-backed differentiable STFT.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle::{CpuStorage, CustomOp1, CustomOp3, DType, Device, Layout, Shape, Tensor, Var, WithDType, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::par::{self, Exec};

/// Stable 64-bit digest of a byte string (first 8 bytes of SHA-256).
pub fn digest64(bytes: &[u8]) -> u64 {
    let h = Sha256::digest(bytes);
    u64::from_be_bytes(h[..8].try_into().expect("sha256 is 32 bytes"))
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64),
    Normal(f64),
}

/// Named trainable variables with seeded, order-independent initialization.
#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    prefix: String,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { vars: Arc::default(), prefix: String::new(), seed, dtype, device: Device::Cpu }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Scoped view that prefixes every name with `name.`.
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self { prefix, ..self.clone() }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Returns the variable `name`, creating it with `init` on first use.
    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let mut vars = self.vars.lock().expect("param store poisoned");
        if let Some(v) = vars.get(&full) {
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ digest64(full.as_bytes()));
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(a) => (0..n).map(|_| rng.gen_range(-a..=a)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| {
                    // Box-Muller keeps the draw sequence independent of rand_distr versions.
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen();
                    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        vars.insert(full, var);
        Ok(out)
    }

    /// All variables, sorted by name.
    pub fn all(&self) -> Vec<(String, Var)> {
        let vars = self.vars.lock().expect("param store poisoned");
        vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Variables whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.all().into_iter().filter(|(k, _)| k.starts_with(prefix)).collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.lock().expect("param store poisoned").get(name).cloned()
    }

    pub fn num_parameters(&self) -> usize {
        self.all().iter().map(|(_, v)| v.elem_count()).sum()
    }
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// Numerically stable softmax over the last dimension from primitive ops.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &ParamStore, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: ps.get(&[d_out, d_in], "weight", Init::Uniform(bound))?,
            bias: Some(ps.get(&[d_out], "bias", Init::Zeros)?),
        })
    }

    pub fn zeroed(ps: &ParamStore, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.get(&[d_out, d_in], "weight", Init::Zeros)?,
            bias: Some(ps.get(&[d_out], "bias", Init::Zeros)?),
        })
    }

    pub fn no_bias(ps: &ParamStore, d_in: usize, d_out: usize, init: Init) -> Result<Self> {
        Ok(Self { weight: ps.get(&[d_out, d_in], "weight", init)?, bias: None })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

/// Layer norm over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &ParamStore, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.get(&[dim], "gamma", Init::Const(1.0))?,
            beta: ps.get(&[dim], "beta", Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }

    /// Normalizes the channel axis of a `(B, C, T)` tensor.
    pub fn forward_channels(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(&x.transpose(1, 2)?)?.transpose(1, 2)?)
    }
}

/// Weight-normalized 1-D convolution with explicit zero padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    v: Tensor,
    g: Tensor,
    bias: Tensor,
    stride: usize,
    dilation: usize,
    pad_left: usize,
    pad_right: usize,
}

impl Conv1d {
    /// "Same"-length convolution (for stride 1).
    pub fn new(ps: &ParamStore, c_in: usize, c_out: usize, kernel: usize, dilation: usize) -> Result<Self> {
        let total = (kernel - 1) * dilation;
        Self::with_padding(ps, c_in, c_out, kernel, 1, dilation, total - total / 2, total / 2)
    }

    /// Strided convolution whose output length is exactly `len / stride`
    /// for inputs whose length is a multiple of `stride`.
    pub fn strided(ps: &ParamStore, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        let total = kernel - stride;
        Self::with_padding(ps, c_in, c_out, kernel, stride, 1, total - total / 2, total / 2)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_padding(
        ps: &ParamStore,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Self> {
        let bound = (3.0 / (c_in * kernel) as f64).sqrt();
        let v = ps.get(&[c_out, c_in, kernel], "v", Init::Uniform(bound))?;
        // start with g = ||v|| so the effective weight equals v
        let g = match ps.var(&ps.full_name("g")) {
            Some(g) => g.as_tensor().clone(),
            None => {
                let norm = v.sqr()?.sum_keepdim(2)?.sum_keepdim(1)?.sqrt()?;
                let norm: Vec<f64> = norm.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
                let g = ps.get(&[c_out, 1, 1], "g", Init::Zeros)?;
                let init = Tensor::from_vec(norm, (c_out, 1, 1), ps.device())?.to_dtype(ps.dtype())?;
                ps.var(&ps.full_name("g")).expect("just created").set(&init)?;
                g
            }
        };
        let bias = ps.get(&[c_out], "bias", Init::Zeros)?;
        Ok(Self { v, g, bias, stride, dilation, pad_left, pad_right })
    }

    pub fn weight(&self) -> Result<Tensor> {
        let norm = (self.v.sqr()?.sum_keepdim(2)?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
        Ok(self.v.broadcast_div(&norm)?.broadcast_mul(&self.g)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = if self.pad_left + self.pad_right > 0 {
            x.pad_with_zeros(D::Minus1, self.pad_left, self.pad_right)?
        } else {
            x.clone()
        };
        let y = x.conv1d(&self.weight()?, 0, self.stride, self.dilation, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

/// Transposed 1-D convolution with kernel `2 * stride`, written in polyphase
/// form: output sample `t * stride + r` mixes input frames `t` and `t - 1`
/// through phase `r` of the kernel. Output length is exactly `len * stride`.
#[derive(Debug, Clone)]
pub struct Upsample1d {
    conv: Conv1d,
    c_out: usize,
    stride: usize,
}

impl Upsample1d {
    pub fn new(ps: &ParamStore, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let conv = Conv1d::with_padding(ps, c_in, c_out * stride, 2, 1, 1, 1, 0)?;
        Ok(Self { conv, c_out, stride })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, t) = x.dims3()?;
        let y = self.conv.forward(x)?;
        let y = y.reshape((b, self.c_out, self.stride, t))?.transpose(2, 3)?;
        Ok(y.reshape((b, self.c_out, t * self.stride))?)
    }
}

/// Depthwise 1-D convolution (one kernel per channel), "same" length.
#[derive(Debug, Clone)]
pub struct DepthwiseConv1d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl DepthwiseConv1d {
    pub fn new(ps: &ParamStore, channels: usize, kernel: usize) -> Result<Self> {
        let bound = (3.0 / kernel as f64).sqrt();
        Ok(Self {
            weight: ps.get(&[channels, kernel], "weight", Init::Uniform(bound))?,
            bias: ps.get(&[channels], "bias", Init::Zeros)?,
            kernel,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let t = x.dim(2)?;
        let half = self.kernel / 2;
        let xp = x.pad_with_zeros(D::Minus1, half, self.kernel - 1 - half)?;
        let mut acc: Option<Tensor> = None;
        for k in 0..self.kernel {
            let w = self.weight.narrow(1, k, 1)?.reshape((1, (), 1))?;
            let term = xp.narrow(2, k, t)?.broadcast_mul(&w)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
        Ok(acc.expect("kernel > 0").broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

/// Plain 2-D convolution over `(B, C, H, W)` with explicit zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    pad_h: usize,
    pad_w: usize,
}

impl Conv2d {
    pub fn new(ps: &ParamStore, c_in: usize, c_out: usize, kh: usize, kw: usize) -> Result<Self> {
        let bound = (3.0 / (c_in * kh * kw) as f64).sqrt();
        Ok(Self {
            weight: ps.get(&[c_out, c_in, kh, kw], "weight", Init::Uniform(bound))?,
            bias: ps.get(&[c_out], "bias", Init::Zeros)?,
            pad_h: kh / 2,
            pad_w: kw / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, kh, kw) = self.weight.dims4()?;
        let op = Conv2dOp { kh, kw, pad_h: self.pad_h, pad_w: self.pad_w };
        Ok(x.contiguous()?.apply_op3(&self.weight, &self.bias, op)?)
    }
}

/// Same-size stride-1 2-D convolution with zero padding, fused with its
/// bias. Each item is unfolded into patches and reduced with row updates
/// that vectorize; batch items run independently.
#[derive(Debug, Clone, Copy)]
struct Conv2dOp {
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
}

fn axpy<T: WithDType>(y: &mut [T], x: &[T], a: T) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * *xv;
    }
}

fn dot<T: WithDType>(a: &[T], b: &[T]) -> T {
    let zero = T::from_f64(0.0);
    let mut acc = [zero; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = zero;
    for v in acc {
        s += v;
    }
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

impl Conv2dOp {
    /// Calls `f(src, dst, len)` for every contiguous run copying an input
    /// row segment of one item into its patch matrix.
    fn runs(&self, c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.kh * self.kw;
        for ci in 0..c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (ci * k + i * self.kw + j) * h * w;
                    let w0 = self.pad_w.saturating_sub(j);
                    let w1 = (w + self.pad_w).saturating_sub(j).min(w);
                    if w0 >= w1 {
                        continue;
                    }
                    for hi in 0..h {
                        let src_h = hi + i;
                        if src_h < self.pad_h || src_h - self.pad_h >= h {
                            continue;
                        }
                        let src = (ci * h + src_h - self.pad_h) * w + w0 + j - self.pad_w;
                        f(src, row + hi * w + w0, w1 - w0);
                    }
                }
            }
        }
    }

    fn unfold<T: WithDType>(&self, x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
        let mut out = vec![T::from_f64(0.0); c * self.kh * self.kw * h * w];
        self.runs(c, h, w, |s, d, n| out[d..d + n].copy_from_slice(&x[s..s + n]));
        out
    }

    fn forward<T: WithDType>(&self, x: &[T], wt: &[T], bias: &[T], dims: (usize, usize, usize, usize, usize)) -> Vec<T> {
        let (b, c, o, h, w) = dims;
        let (k, p) = (c * self.kh * self.kw, h * w);
        par::map_range(b, Exec::Parallel, |bi| {
            let cols = self.unfold(&x[bi * c * p..(bi + 1) * c * p], c, h, w);
            let mut y = vec![T::from_f64(0.0); o * p];
            for oi in 0..o {
                let row = &mut y[oi * p..(oi + 1) * p];
                row.fill(bias[oi]);
                for ki in 0..k {
                    axpy(row, &cols[ki * p..(ki + 1) * p], wt[oi * k + ki]);
                }
            }
            y
        })
        .concat()
    }

    /// Gradients for input, weight and bias.
    fn backward<T: WithDType>(&self, x: &[T], wt: &[T], g: &[T], dims: (usize, usize, usize, usize, usize)) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (b, c, o, h, w) = dims;
        let (k, p) = (c * self.kh * self.kw, h * w);
        let zero = T::from_f64(0.0);
        let parts = par::map_range(b, Exec::Parallel, |bi| {
            let cols = self.unfold(&x[bi * c * p..(bi + 1) * c * p], c, h, w);
            let gi = &g[bi * o * p..(bi + 1) * o * p];
            let mut gcols = vec![zero; k * p];
            let mut gw = vec![zero; o * k];
            let mut gb = vec![zero; o];
            for oi in 0..o {
                let grow = &gi[oi * p..(oi + 1) * p];
                gb[oi] = grow.iter().fold(zero, |a, v| a + *v);
                for ki in 0..k {
                    gw[oi * k + ki] = dot(grow, &cols[ki * p..(ki + 1) * p]);
                    axpy(&mut gcols[ki * p..(ki + 1) * p], grow, wt[oi * k + ki]);
                }
            }
            let mut gx = vec![zero; c * p];
            self.runs(c, h, w, |s, d, n| {
                for (dst, v) in gx[s..s + n].iter_mut().zip(&gcols[d..d + n]) {
                    *dst += *v;
                }
            });
            (gx, gw, gb)
        });
        let mut gw = vec![zero; o * k];
        let mut gb = vec![zero; o];
        let mut gx = Vec::with_capacity(b * c * p);
        for (px, pw, pb) in parts {
            gx.extend(px);
            gw.iter_mut().zip(pw).for_each(|(a, v)| *a += v);
            gb.iter_mut().zip(pb).for_each(|(a, v)| *a += v);
        }
        (gx, gw, gb)
    }
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout) -> candle::Result<&'a [T]> {
    let (start, end) = layout.contiguous_offsets().ok_or_else(|| candle::Error::Msg("expected a contiguous input".into()))?;
    Ok(&v[start..end])
}

impl CustomOp3 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d-same"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout, s3: &CpuStorage, l3: &Layout) -> candle::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let o = l2.shape().dims4()?.0;
        let dims = (b, c, o, h, w);
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(wt), CpuStorage::F32(bias)) => {
                CpuStorage::F32(self.forward(contiguous_slice(x, l1)?, contiguous_slice(wt, l2)?, contiguous_slice(bias, l3)?, dims))
            }
            (CpuStorage::F64(x), CpuStorage::F64(wt), CpuStorage::F64(bias)) => {
                CpuStorage::F64(self.forward(contiguous_slice(x, l1)?, contiguous_slice(wt, l2)?, contiguous_slice(bias, l3)?, dims))
            }
            _ => return Err(candle::Error::Msg("conv2d supports matching f32 or f64 operands".into())),
        };
        Ok((out, Shape::from((b, o, h, w))))
    }

    fn bwd(&self, x: &Tensor, wt: &Tensor, bias: &Tensor, _res: &Tensor, g: &Tensor) -> candle::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let o = wt.dims4()?.0;
        let dims = (b, c, o, h, w);
        let dev = x.device();
        let (gx, gw, gb) = match x.dtype() {
            DType::F32 => {
                let (gx, gw, gb) = self.backward(&x.flatten_all()?.to_vec1::<f32>()?, &wt.flatten_all()?.to_vec1::<f32>()?, &g.flatten_all()?.to_vec1::<f32>()?, dims);
                (Tensor::from_vec(gx, x.shape(), dev)?, Tensor::from_vec(gw, wt.shape(), dev)?, Tensor::from_vec(gb, bias.shape(), dev)?)
            }
            DType::F64 => {
                let (gx, gw, gb) = self.backward(&x.flatten_all()?.to_vec1::<f64>()?, &wt.flatten_all()?.to_vec1::<f64>()?, &g.flatten_all()?.to_vec1::<f64>()?, dims);
                (Tensor::from_vec(gx, x.shape(), dev)?, Tensor::from_vec(gw, wt.shape(), dev)?, Tensor::from_vec(gb, bias.shape(), dev)?)
            }
            dt => return Err(candle::Error::Msg(format!("conv2d does not support {dt:?}"))),
        };
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

/// Leaky ReLU with a hand-written backward pass.
#[derive(Debug, Clone, Copy)]
pub struct LeakyRelu(pub f64);

impl LeakyRelu {
    fn apply<T: WithDType>(&self, x: &[T]) -> Vec<T> {
        let s = T::from_f64(self.0);
        let zero = T::from_f64(0.0);
        x.iter().map(|&v| if v > zero { v } else { v * s }).collect()
    }

    fn grad<T: WithDType>(&self, x: &[T], g: &[T]) -> Vec<T> {
        let s = T::from_f64(self.0);
        let zero = T::from_f64(0.0);
        x.iter().zip(g).map(|(&v, &gv)| if v > zero { gv } else { gv * s }).collect()
    }
}

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.apply(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.apply(contiguous_slice(v, layout)?)),
            _ => return Err(candle::Error::Msg("leaky relu supports f32 and f64".into())),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, g: &Tensor) -> candle::Result<Option<Tensor>> {
        let out = match arg.dtype() {
            DType::F32 => Tensor::from_vec(self.grad(&arg.flatten_all()?.to_vec1::<f32>()?, &g.flatten_all()?.to_vec1::<f32>()?), arg.shape(), arg.device())?,
            DType::F64 => Tensor::from_vec(self.grad(&arg.flatten_all()?.to_vec1::<f64>()?, &g.flatten_all()?.to_vec1::<f64>()?), arg.shape(), arg.device())?,
            dt => return Err(candle::Error::Msg(format!("leaky relu does not support {dt:?}"))),
        };
        Ok(Some(out))
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(LeakyRelu(slope))?)
}

/// Folds pairs of adjacent positions on the last axis into channels:
/// `(B, C, H, W)` → `(B, 2C, H, ceil(W/2))`. A stride-1 convolution after this
/// fold is a stride-2 convolution on the original axis.
pub fn fold_last_axis(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let x = if w % 2 == 1 { x.pad_with_zeros(3, 0, 1)? } else { x.clone() };
    let w2 = x.dim(3)? / 2;
    let x = x.reshape((b, c, h, w2, 2))?.permute((0, 1, 4, 2, 3))?;
    Ok(x.reshape((b, c * 2, h, w2))?)
}

/// Centered STFT of a batch of signals `(B, L)` returning
/// `(B, L / hop + 1, n_fft / 2 + 1, 2)` with real and imaginary parts.
/// Reflect padding by `n_fft / 2` on both sides. Backward pass is exact.
#[derive(Clone)]
pub struct StftOp {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl StftOp {
    /// Hann window; `normalized` scales it to unit energy.
    pub fn new(n_fft: usize, hop: usize, normalized: bool) -> Self {
        let mut window: Vec<f64> = (0..n_fft)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / n_fft as f64).cos())
            .collect();
        if normalized {
            let e = window.iter().map(|w| w * w).sum::<f64>().sqrt();
            window.iter_mut().for_each(|w| *w /= e);
        }
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n_fft);
        let inv = planner.plan_fft_inverse(n_fft);
        Self { n_fft, hop, window, fwd, inv }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    fn reflect(&self, i: isize, len: usize) -> usize {
        if len == 1 {
            return 0;
        }
        let period = 2 * (len as isize - 1);
        let mut m = i.rem_euclid(period);
        if m >= len as isize {
            m = period - m;
        }
        m as usize
    }

    fn forward_rows(&self, x: &[f64], batch: usize, len: usize) -> Vec<f64> {
        let frames = self.n_frames(len);
        let bins = self.n_bins();
        let per_item = frames * bins * 2;
        let mut out = vec![0.0; batch * per_item];
        par::for_each_chunk_mut(&mut out, per_item, Exec::Parallel, |b, chunk| {
            let sig = &x[b * len..(b + 1) * len];
            let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
            for f in 0..frames {
                let start = (f * self.hop) as isize - (self.n_fft / 2) as isize;
                for (n, c) in buf.iter_mut().enumerate() {
                    *c = Complex64::new(sig[self.reflect(start + n as isize, len)] * self.window[n], 0.0);
                }
                self.fwd.process(&mut buf);
                let row = &mut chunk[f * bins * 2..(f + 1) * bins * 2];
                for k in 0..bins {
                    row[2 * k] = buf[k].re;
                    row[2 * k + 1] = buf[k].im;
                }
            }
        });
        out
    }

    fn backward_rows(&self, g: &[f64], batch: usize, len: usize) -> Vec<f64> {
        let frames = self.n_frames(len);
        let bins = self.n_bins();
        let mut out = vec![0.0; batch * len];
        par::for_each_chunk_mut(&mut out, len, Exec::Parallel, |b, dx| {
            let gb = &g[b * frames * bins * 2..(b + 1) * frames * bins * 2];
            let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
            for f in 0..frames {
                buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
                for k in 0..bins {
                    buf[k] = Complex64::new(gb[(f * bins + k) * 2], gb[(f * bins + k) * 2 + 1]);
                }
                // d/dx_n of Re/Im of sum_n x_n w_n e^{-i 2 pi k n / N}
                self.inv.process(&mut buf);
                let start = (f * self.hop) as isize - (self.n_fft / 2) as isize;
                for n in 0..self.n_fft {
                    dx[self.reflect(start + n as isize, len)] += buf[n].re * self.window[n];
                }
            }
        });
        out
    }
}

fn storage_to_f64(storage: &CpuStorage, layout: &Layout) -> candle::Result<Vec<f64>> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle::Error::Msg("stft expects a contiguous input".into()))?;
    Ok(match storage {
        CpuStorage::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[start..end].to_vec(),
        _ => return Err(candle::Error::Msg("stft supports f32 and f64".into())),
    })
}

impl CustomOp1 for StftOp {
    fn name(&self) -> &'static str {
        "stft"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle::Result<(CpuStorage, Shape)> {
        let (batch, len) = layout.shape().dims2()?;
        let x = storage_to_f64(storage, layout)?;
        let out = self.forward_rows(&x, batch, len);
        let shape = Shape::from((batch, self.n_frames(len), self.n_bins(), 2));
        let storage = match storage {
            CpuStorage::F32(_) => CpuStorage::F32(out.into_iter().map(|v| v as f32).collect()),
            _ => CpuStorage::F64(out),
        };
        Ok((storage, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle::Result<Option<Tensor>> {
        let (batch, len) = arg.dims2()?;
        let g: Vec<f64> = grad_res.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let dx = self.backward_rows(&g, batch, len);
        let t = Tensor::from_vec(dx, (batch, len), arg.device())?.to_dtype(arg.dtype())?;
        Ok(Some(t))
    }
}

/// Complex STFT `(B, frames, bins, 2)` of a `(B, L)` signal.
pub fn stft(x: &Tensor, op: &StftOp) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(op.clone())?)
}

/// Sum of squared gradients over a set of variables.
pub fn grad_norm(grads: &candle::backprop::GradStore, vars: &[(String, Var)]) -> Result<f64> {
    let mut acc = 0.0f64;
    for (_, v) in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            acc += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(acc.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let ps = ParamStore::new(seed, DType::F64);
        ps.get(shape, "x", Init::Normal(1.0)).unwrap().detach()
    }

    #[test]
    fn init_is_order_independent() {
        let a = ParamStore::new(3, DType::F32);
        let b = ParamStore::new(3, DType::F32);
        let a1 = a.pp("m").get(&[4], "w1", Init::Normal(1.0)).unwrap();
        let _ = a.pp("m").get(&[4], "w2", Init::Normal(1.0)).unwrap();
        let _ = b.pp("m").get(&[4], "w2", Init::Normal(1.0)).unwrap();
        let b1 = b.pp("m").get(&[4], "w1", Init::Normal(1.0)).unwrap();
        assert_eq!(a1.to_vec1::<f32>().unwrap(), b1.to_vec1::<f32>().unwrap());
        assert_eq!(a.all().len(), 2);
    }

    #[test]
    fn upsample_multiplies_length() {
        let ps = ParamStore::new(0, DType::F32);
        for s in [8, 5, 4, 2] {
            let up = Upsample1d::new(&ps.pp(format!("u{s}")), 3, 2, s).unwrap();
            let x = Tensor::ones((2, 3, 7), DType::F32, &Device::Cpu).unwrap();
            assert_eq!(up.forward(&x).unwrap().dims3().unwrap(), (2, 2, 7 * s));
        }
    }

    #[test]
    fn upsample_matches_direct_transposed_conv() {
        // y[t*s + r] = W_r x[t] + W_{r+s} x[t-1]
        let ps = ParamStore::new(1, DType::F64);
        let (c_in, c_out, s, t) = (3, 2, 4, 5);
        let up = Upsample1d::new(&ps, c_in, c_out, s).unwrap();
        let x = randn(&[1, c_in, t], 9);
        let y: Vec<Vec<f64>> = up.forward(&x).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        let w: Vec<Vec<Vec<f64>>> = up.conv.weight().unwrap().to_vec3().unwrap();
        let bias: Vec<f64> = up.conv.bias.to_vec1().unwrap();
        let xv: Vec<Vec<f64>> = x.squeeze(0).unwrap().to_vec2().unwrap();
        for o in 0..c_out {
            for tt in 0..t {
                for r in 0..s {
                    let row = o * s + r;
                    let mut acc = bias[row];
                    for c in 0..c_in {
                        acc += w[row][c][1] * xv[c][tt];
                        if tt > 0 {
                            acc += w[row][c][0] * xv[c][tt - 1];
                        }
                    }
                    assert!((y[o][tt * s + r] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn strided_conv_divides_length() {
        let ps = ParamStore::new(0, DType::F32);
        for s in [2, 4, 5, 8] {
            let c = Conv1d::strided(&ps.pp(format!("d{s}")), 2, 3, 2 * s, s).unwrap();
            let x = Tensor::ones((1, 2, 40 * s), DType::F32, &Device::Cpu).unwrap();
            assert_eq!(c.forward(&x).unwrap().dims3().unwrap(), (1, 3, 40));
        }
    }

    #[test]
    fn conv2d_matches_library_convolution() {
        let ps = ParamStore::new(4, DType::F64);
        for (c_in, c_out, kh, kw, h, w) in [(2, 3, 3, 9, 6, 11), (4, 2, 3, 5, 1, 3), (1, 1, 3, 3, 4, 4)] {
            let conv = Conv2d::new(&ps.pp(format!("c{c_in}{kw}{h}")), c_in, c_out, kh, kw).unwrap();
            let xv = Var::from_tensor(&randn(&[2, c_in, h, w], (c_in * 100 + kw) as u64)).unwrap();
            let probe = randn(&[2, c_out, h, w], 77);
            let ours = conv.forward(xv.as_tensor()).unwrap();
            let padded = xv.as_tensor().pad_with_zeros(2, kh / 2, kh / 2).unwrap().pad_with_zeros(3, kw / 2, kw / 2).unwrap();
            let lib = padded.conv2d(&conv.weight, 0, 1, 1, 1).unwrap().broadcast_add(&conv.bias.reshape((1, (), 1, 1)).unwrap()).unwrap();
            let diff = (&ours - &lib).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-12, "forward differs by {diff}");
            let g1 = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (&lib * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for t in [xv.as_tensor(), &conv.weight] {
                let d = (g1.get(t).unwrap() - g2.get(t).unwrap()).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
                assert!(d < 1e-10, "gradient differs by {d}");
            }
        }
    }

    #[test]
    fn fold_matches_strided_indexing() {
        let x = randn(&[1, 1, 2, 6], 2);
        let f = fold_last_axis(&x).unwrap();
        assert_eq!(f.dims4().unwrap(), (1, 2, 2, 3));
        let xv: Vec<Vec<f64>> = x.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        let even: Vec<Vec<f64>> = f.narrow(1, 0, 1).unwrap().squeeze(0).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        let odd: Vec<Vec<f64>> = f.narrow(1, 1, 1).unwrap().squeeze(0).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        for h in 0..2 {
            for w in 0..3 {
                assert_eq!(even[h][w], xv[h][2 * w]);
                assert_eq!(odd[h][w], xv[h][2 * w + 1]);
            }
        }
    }

    #[test]
    fn stft_matches_direct_dft() {
        let op = StftOp::new(16, 4, false);
        let x = randn(&[2, 37], 3);
        let y: Vec<f64> = stft(&x, &op).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let xv: Vec<Vec<f64>> = x.to_vec2().unwrap();
        let frames = op.n_frames(37);
        let bins = op.n_bins();
        for b in 0..2 {
            for f in 0..frames {
                for k in 0..bins {
                    let (mut re, mut im) = (0.0, 0.0);
                    for n in 0..16 {
                        let idx = op.reflect((f * 4) as isize - 8 + n as isize, 37);
                        let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / 16.0;
                        re += xv[b][idx] * op.window[n] * ang.cos();
                        im += xv[b][idx] * op.window[n] * ang.sin();
                    }
                    let base = ((b * frames + f) * bins + k) * 2;
                    assert!((y[base] - re).abs() < 1e-9 && (y[base + 1] - im).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn stft_gradient_matches_finite_differences() {
        let op = StftOp::new(16, 4, true);
        let x = Var::from_tensor(&randn(&[1, 29], 4)).unwrap();
        let weights = randn(&[1, op.n_frames(29), op.n_bins(), 2], 5);
        let loss = |t: &Tensor| -> Tensor { stft(t, &op).unwrap().mul(&weights).unwrap().sqr().unwrap().sum_all().unwrap() };
        let grads = loss(x.as_tensor()).backward().unwrap();
        let g: Vec<f64> = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = x.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        for i in [0usize, 3, 14, 28] {
            let h = 1e-6;
            let mut p = base.clone();
            p[i] += h;
            let mut m = base.clone();
            m[i] -= h;
            let lp = loss(&Tensor::from_vec(p, (1, 29), &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap();
            let lm = loss(&Tensor::from_vec(m, (1, 29), &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "index {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = randn(&[3, 5], 6);
        let s: Vec<Vec<f64>> = softmax_last(&x).unwrap().to_vec2().unwrap();
        for row in s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
