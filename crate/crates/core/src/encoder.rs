//! Attribute encoders: a strided convolutional content encoder (50 Hz), a
//! max-pooled prosody encoder over the low mel band, and an ECAPA-style
//! global speaker encoder.

use candle::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, MelSpectrogram, FRAME_HOP, PROSODY_BINS};
use crate::error::{Error, Result};
use crate::nn::{gelu, softmax_last, Conv1d, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Reference,
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub content_strides: Vec<usize>,
    pub content_blocks: usize,
    pub base_channels: usize,
    pub latent_dim: usize,
    pub prosody_pool_stride: usize,
    pub speaker_dim: usize,
    pub speaker_channels: usize,
    pub n_mels: usize,
    /// Exclude the speaker encoder from optimization.
    pub freeze_speaker: bool,
    pub scale: Scale,
}

impl EncoderConfig {
    pub fn reference() -> Self {
        Self {
            content_strides: vec![2, 4, 5, 8],
            content_blocks: 4,
            base_channels: 32,
            latent_dim: 256,
            prosody_pool_stride: 8,
            speaker_dim: 192,
            speaker_channels: 256,
            n_mels: 80,
            freeze_speaker: false,
            scale: Scale::Reference,
        }
    }

    /// Narrow widths, identical rate structure.
    pub fn tiny() -> Self {
        Self { base_channels: 4, latent_dim: 64, speaker_channels: 32, scale: Scale::Tiny, ..Self::reference() }
    }

    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Reference => Self::reference(),
            Scale::Tiny => Self::tiny(),
        }
    }

    pub fn hop(&self) -> usize {
        self.content_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop() != FRAME_HOP {
            return Err(Error::Config(format!("content strides multiply to {}, expected {FRAME_HOP}", self.hop())));
        }
        if self.content_blocks != self.content_strides.len() {
            return Err(Error::Config("one convolution block per stride".into()));
        }
        if self.prosody_pool_stride != 8 {
            return Err(Error::Config("prosody pooling stride must be 8".into()));
        }
        if self.n_mels < PROSODY_BINS {
            return Err(Error::Config(format!("need at least {PROSODY_BINS} mel bins")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Content,
    Prosody,
}

/// Continuous frame-level features, `n_frames × dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub values: Vec<f32>,
    pub n_frames: usize,
    pub dim: usize,
    pub frame_rate: f64,
    pub attribute: Attribute,
}

impl LatentSequence {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// `(1, T, D)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.values.clone(), (1, self.n_frames, self.dim), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// From a `(1, T, D)` or `(T, D)` tensor.
    pub fn from_tensor(t: &Tensor, frame_rate: f64, attribute: Attribute) -> Result<Self> {
        let t = if t.rank() == 3 { t.squeeze(0)? } else { t.clone() };
        let (n_frames, dim) = t.dims2()?;
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        Ok(Self { values, n_frames, dim, frame_rate, attribute })
    }

    pub fn mean_pool(&self) -> Vec<f32> {
        let mut m = vec![0.0f64; self.dim];
        for t in 0..self.n_frames {
            for (acc, &v) in m.iter_mut().zip(self.frame(t)) {
                *acc += v as f64;
            }
        }
        m.into_iter().map(|v| (v / self.n_frames as f64) as f32).collect()
    }
}

/// One utterance-level speaker vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEmbedding {
    pub values: Vec<f32>,
}

impl GlobalEmbedding {
    pub fn norm(&self) -> f32 {
        self.values.iter().map(|v| v * v).sum::<f32>().sqrt()
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.values.clone(), (1, self.values.len()), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 2 { t.squeeze(0)? } else { t.clone() };
        Ok(Self { values: t.to_dtype(DType::F32)?.to_vec1()? })
    }
}

/// `(B, T, C)` tensor from a batch of equally long mel spectrograms.
pub fn mel_batch_tensor(mels: &[&MelSpectrogram], dtype: DType) -> Result<Tensor> {
    let first = mels.first().ok_or_else(|| Error::EmptyInput("empty mel batch".into()))?;
    let (t, c) = (first.n_frames, first.n_bins);
    let mut data = Vec::with_capacity(mels.len() * t * c);
    for m in mels {
        if m.n_frames != t || m.n_bins != c {
            return Err(Error::Contract("mel batch items must share a shape".into()));
        }
        data.extend_from_slice(&m.values);
    }
    Ok(Tensor::from_vec(data, (mels.len(), t, c), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `(B, L)` tensor from equally long waveforms.
pub fn wave_batch_tensor(audio: &[&AudioBuffer], dtype: DType) -> Result<Tensor> {
    let first = audio.first().ok_or_else(|| Error::EmptyInput("empty audio batch".into()))?;
    let len = first.len();
    let mut data = Vec::with_capacity(audio.len() * len);
    for a in audio {
        if a.len() != len {
            return Err(Error::Contract("audio batch items must share a length".into()));
        }
        data.extend_from_slice(&a.samples);
    }
    Ok(Tensor::from_vec(data, (audio.len(), len), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub(crate) struct ResidualUnit {
    conv1: Conv1d,
    conv2: Conv1d,
}

impl ResidualUnit {
    pub(crate) fn new(ps: &ParamStore, channels: usize) -> Result<Self> {
        let hidden = (channels / 2).max(1);
        Ok(Self {
            conv1: Conv1d::new(&ps.pp("conv1"), channels, hidden, 3, 1)?,
            conv2: Conv1d::new(&ps.pp("conv2"), hidden, channels, 1, 1)?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&x.elu(1.0)?)?;
        let h = self.conv2.forward(&h.elu(1.0)?)?;
        Ok((x + h)?)
    }
}

/// Waveform → 50 Hz content features.
#[derive(Debug, Clone)]
pub struct ContentEncoder {
    conv_in: Conv1d,
    blocks: Vec<(ResidualUnit, Conv1d)>,
    conv_out: Conv1d,
    hop: usize,
    latent_dim: usize,
}

impl ContentEncoder {
    pub fn new(ps: &ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut ch = cfg.base_channels;
        let conv_in = Conv1d::new(&ps.pp("conv_in"), 1, ch, 7, 1)?;
        let mut blocks = Vec::new();
        for (i, &s) in cfg.content_strides.iter().enumerate() {
            let bp = ps.pp(format!("block{i}"));
            let res = ResidualUnit::new(&bp.pp("res"), ch)?;
            let down = Conv1d::strided(&bp.pp("down"), ch, ch * 2, 2 * s, s)?;
            blocks.push((res, down));
            ch *= 2;
        }
        let conv_out = Conv1d::new(&ps.pp("conv_out"), ch, cfg.latent_dim, 7, 1)?;
        Ok(Self { conv_in, blocks, conv_out, hop: cfg.hop(), latent_dim: cfg.latent_dim })
    }

    /// `(B, L)` waveform → `(B, L / 320, D)`.
    pub fn forward(&self, wave: &Tensor) -> Result<Tensor> {
        let (_, len) = wave.dims2()?;
        if len == 0 || len % self.hop != 0 {
            return Err(Error::Contract(format!("content encoder needs a positive multiple of {} samples, got {len}", self.hop)));
        }
        let mut h = self.conv_in.forward(&wave.unsqueeze(1)?)?;
        for (res, down) in &self.blocks {
            h = res.forward(&h)?;
            h = down.forward(&h.elu(1.0)?)?;
        }
        let h = self.conv_out.forward(&h.elu(1.0)?)?;
        Ok(h.transpose(1, 2)?)
    }

    pub fn encode(&self, audio: &AudioBuffer, dtype: DType) -> Result<LatentSequence> {
        let x = wave_batch_tensor(&[audio], dtype)?;
        let z = self.forward(&x)?;
        LatentSequence::from_tensor(&z, audio.sample_rate as f64 / self.hop as f64, Attribute::Content)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }
}

#[derive(Debug, Clone)]
struct ConvStack {
    conv1: Conv1d,
    norm1: LayerNorm,
    conv2: Conv1d,
    norm2: LayerNorm,
}

impl ConvStack {
    fn new(ps: &ParamStore, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv1d::new(&ps.pp("conv1"), c_in, c_out, 5, 1)?,
            norm1: LayerNorm::new(&ps.pp("norm1"), c_out)?,
            conv2: Conv1d::new(&ps.pp("conv2"), c_out, c_out, 5, 1)?,
            norm2: LayerNorm::new(&ps.pp("norm2"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = gelu(&self.norm1.forward_channels(&self.conv1.forward(x)?)?)?;
        gelu(&self.norm2.forward_channels(&self.conv2.forward(&h)?)?)
    }
}

/// Max pooling over time with ceil semantics. Tail padding carries a large
/// negative offset so it never wins (and never shares) a window maximum.
pub fn max_pool_time_ceil(x: &Tensor, stride: usize) -> Result<Tensor> {
    let (b, c, t) = x.dims3()?;
    let out = t.div_ceil(stride);
    let pad = out * stride - t;
    let x = if pad > 0 {
        let mask: Vec<f32> = (0..out * stride).map(|i| if i < t { 0.0 } else { -1e9 }).collect();
        let mask = Tensor::from_vec(mask, (1, 1, out * stride), x.device())?.to_dtype(x.dtype())?;
        x.pad_with_zeros(D::Minus1, 0, pad)?.broadcast_add(&mask)?
    } else {
        x.clone()
    };
    Ok(x.reshape((b, c, out, stride))?.max(D::Minus1)?)
}

/// Low-band mel → ~6.25 Hz prosody features.
#[derive(Debug, Clone)]
pub struct ProsodyEncoder {
    stack1: ConvStack,
    stack2: ConvStack,
    pool: usize,
}

impl ProsodyEncoder {
    pub fn new(ps: &ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            stack1: ConvStack::new(&ps.pp("stack1"), PROSODY_BINS, cfg.latent_dim)?,
            stack2: ConvStack::new(&ps.pp("stack2"), cfg.latent_dim, cfg.latent_dim)?,
            pool: cfg.prosody_pool_stride,
        })
    }

    /// `(B, T, 20)` → `(B, ceil(T / 8), D)`.
    pub fn forward(&self, mel20: &Tensor) -> Result<Tensor> {
        let (_, t, bins) = mel20.dims3()?;
        if bins != PROSODY_BINS {
            return Err(Error::Config(format!("prosody encoder expects {PROSODY_BINS} bins, got {bins}")));
        }
        if t == 0 {
            return Err(Error::EmptyInput("no mel frames".into()));
        }
        let h = self.stack1.forward(&mel20.transpose(1, 2)?)?;
        let h = max_pool_time_ceil(&h, self.pool)?;
        let h = self.stack2.forward(&h)?;
        Ok(h.transpose(1, 2)?)
    }

    pub fn encode(&self, mel20: &MelSpectrogram, dtype: DType) -> Result<LatentSequence> {
        if mel20.n_bins != PROSODY_BINS {
            return Err(Error::Config(format!("prosody encoder expects {PROSODY_BINS} bins, got {}", mel20.n_bins)));
        }
        let z = self.forward(&mel_batch_tensor(&[mel20], dtype)?)?;
        LatentSequence::from_tensor(&z, mel20.frame_rate / self.pool as f64, Attribute::Prosody)
    }
}

/// Anything that maps a `(B, T, n_mels)` mel batch to unit-norm `(B, D_s)`
/// speaker vectors. A frozen external embedding provider can implement this
/// in place of the built-in network.
pub trait SpeakerEncoder: Send + Sync {
    fn embed(&self, mel: &Tensor) -> Result<Tensor>;
    fn dim(&self) -> usize;
}

fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

#[derive(Debug, Clone)]
struct SeBlock {
    pre: Conv1d,
    pre_norm: LayerNorm,
    dilated: Conv1d,
    dil_norm: LayerNorm,
    post: Conv1d,
    post_norm: LayerNorm,
    se_down: Linear,
    se_up: Linear,
}

impl SeBlock {
    fn new(ps: &ParamStore, ch: usize, dilation: usize) -> Result<Self> {
        let bottleneck = (ch / 4).max(1);
        Ok(Self {
            pre: Conv1d::new(&ps.pp("pre"), ch, ch, 1, 1)?,
            pre_norm: LayerNorm::new(&ps.pp("pre_norm"), ch)?,
            dilated: Conv1d::new(&ps.pp("dilated"), ch, ch, 3, dilation)?,
            dil_norm: LayerNorm::new(&ps.pp("dil_norm"), ch)?,
            post: Conv1d::new(&ps.pp("post"), ch, ch, 1, 1)?,
            post_norm: LayerNorm::new(&ps.pp("post_norm"), ch)?,
            se_down: Linear::new(&ps.pp("se_down"), ch, bottleneck)?,
            se_up: Linear::new(&ps.pp("se_up"), bottleneck, ch)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.pre_norm.forward_channels(&self.pre.forward(x)?.relu()?)?;
        let h = self.dil_norm.forward_channels(&self.dilated.forward(&h)?.relu()?)?;
        let h = self.post_norm.forward_channels(&self.post.forward(&h)?.relu()?)?;
        // squeeze-excitation channel attention
        let s = h.mean(D::Minus1)?;
        let s = sigmoid(&self.se_up.forward(&self.se_down.forward(&s)?.relu()?)?)?;
        let h = h.broadcast_mul(&s.unsqueeze(2)?)?;
        Ok((x + h)?)
    }
}

/// ECAPA-style speaker network: dilated SE blocks, multi-layer feature
/// aggregation and attentive statistics pooling.
#[derive(Debug, Clone)]
pub struct EcapaSpeakerEncoder {
    conv_in: Conv1d,
    norm_in: LayerNorm,
    blocks: Vec<SeBlock>,
    mfa: Conv1d,
    att1: Conv1d,
    att2: Conv1d,
    pool_norm: LayerNorm,
    fc: Linear,
    dim: usize,
}

impl EcapaSpeakerEncoder {
    pub fn new(ps: &ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        let ch = cfg.speaker_channels;
        let agg = 3 * ch;
        let att_hidden = (ch / 2).max(8);
        Ok(Self {
            conv_in: Conv1d::new(&ps.pp("conv_in"), cfg.n_mels, ch, 5, 1)?,
            norm_in: LayerNorm::new(&ps.pp("norm_in"), ch)?,
            blocks: [2, 3, 4]
                .iter()
                .enumerate()
                .map(|(i, &d)| SeBlock::new(&ps.pp(format!("block{i}")), ch, d))
                .collect::<Result<_>>()?,
            mfa: Conv1d::new(&ps.pp("mfa"), agg, agg, 1, 1)?,
            att1: Conv1d::new(&ps.pp("att1"), 3 * agg, att_hidden, 1, 1)?,
            att2: Conv1d::new(&ps.pp("att2"), att_hidden, agg, 1, 1)?,
            pool_norm: LayerNorm::new(&ps.pp("pool_norm"), 2 * agg)?,
            fc: Linear::new(&ps.pp("fc"), 2 * agg, cfg.speaker_dim)?,
            dim: cfg.speaker_dim,
        })
    }

    pub fn encode(&self, mel: &MelSpectrogram, dtype: DType) -> Result<GlobalEmbedding> {
        GlobalEmbedding::from_tensor(&self.embed(&mel_batch_tensor(&[mel], dtype)?)?)
    }
}

impl SpeakerEncoder for EcapaSpeakerEncoder {
    fn embed(&self, mel: &Tensor) -> Result<Tensor> {
        let (_, t, _) = mel.dims3()?;
        if t < 2 {
            return Err(Error::InputTooShort(format!("speaker encoder needs at least 2 frames, got {t}")));
        }
        let x = mel.transpose(1, 2)?;
        let x = x.broadcast_sub(&x.mean_keepdim(D::Minus1)?)?;
        let mut h = self.norm_in.forward_channels(&self.conv_in.forward(&x)?.relu()?)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            h = b.forward(&h)?;
            outs.push(h.clone());
        }
        let h = self.mfa.forward(&Tensor::cat(&outs, 1)?)?.relu()?;

        // attentive statistics pooling with global context
        let mean = h.mean_keepdim(D::Minus1)?;
        let std = (h.broadcast_sub(&mean)?.sqr()?.mean_keepdim(D::Minus1)? + 1e-6)?.sqrt()?;
        let ctx = Tensor::cat(&[h.clone(), mean.broadcast_as(h.shape())?, std.broadcast_as(h.shape())?], 1)?;
        let a = self.att2.forward(&self.att1.forward(&ctx)?.tanh()?)?;
        let alpha = softmax_last(&a)?;
        let mu = (&alpha * &h)?.sum(D::Minus1)?;
        let second = (&alpha * h.sqr()?)?.sum(D::Minus1)?;
        let sigma = ((second - mu.sqr()?)?.relu()? + 1e-6)?.sqrt()?;
        let pooled = self.pool_norm.forward(&Tensor::cat(&[mu, sigma], 1)?)?;
        let e = self.fc.forward(&pooled)?;
        let n = (e.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
        Ok(e.broadcast_div(&n)?)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{compute_mel, prosody_slice, MelConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn noise(len: usize, seed: u64) -> AudioBuffer {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new((0..len).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16_000).unwrap()
    }

    fn mel_of(len: usize, seed: u64) -> MelSpectrogram {
        compute_mel(&noise(len, seed), &MelConfig::default()).unwrap()
    }

    #[test]
    fn content_frame_counts() {
        let ps = ParamStore::new(0, DType::F32);
        let enc = ContentEncoder::new(&ps, &EncoderConfig::tiny()).unwrap();
        for (len, frames) in [(16_000, 50), (320, 1), (3_200, 10)] {
            let z = enc.encode(&noise(len, 1), DType::F32).unwrap();
            assert_eq!((z.n_frames, z.dim), (frames, 64));
            assert_eq!(z.frame_rate, 50.0);
        }
        assert!(matches!(enc.encode(&noise(1000, 1), DType::F32), Err(Error::Contract(_))));
    }

    #[test]
    fn reference_content_width() {
        let ps = ParamStore::new(0, DType::F32);
        let enc = ContentEncoder::new(&ps, &EncoderConfig::reference()).unwrap();
        let z = enc.encode(&noise(3_200, 2), DType::F32).unwrap();
        assert_eq!((z.n_frames, z.dim), (10, 256));
    }

    #[test]
    fn prosody_rate() {
        let ps = ParamStore::new(0, DType::F32);
        let enc = ProsodyEncoder::new(&ps, &EncoderConfig::tiny()).unwrap();
        for (len, t_out) in [(16_000, 7), (2_560, 1), (128_000, 50)] {
            let mel = prosody_slice(&mel_of(len, 3)).unwrap();
            let z = enc.encode(&mel, DType::F32).unwrap();
            assert_eq!(z.n_frames, t_out);
            assert!((z.frame_rate - 6.25).abs() < 1e-12);
        }
        let full = mel_of(3200, 4);
        assert!(matches!(enc.encode(&full, DType::F32), Err(Error::Config(_))));
    }

    #[test]
    fn ceil_pool_matches_window_max() {
        let x = Tensor::from_vec((0..11).map(|v| ((v * 7) % 5) as f32).collect::<Vec<_>>(), (1, 1, 11), &Device::Cpu).unwrap();
        let y: Vec<f32> = max_pool_time_ceil(&x, 8).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let xv: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(y.len(), 2);
        assert_eq!(y[0], xv[..8].iter().cloned().fold(f32::MIN, f32::max));
        assert_eq!(y[1], xv[8..].iter().cloned().fold(f32::MIN, f32::max));
    }

    #[test]
    fn speaker_embedding_contract() {
        let ps = ParamStore::new(0, DType::F32);
        let enc = EcapaSpeakerEncoder::new(&ps, &EncoderConfig::tiny()).unwrap();
        let mel = mel_of(16_000, 5);
        let e = enc.encode(&mel, DType::F32).unwrap();
        assert_eq!(e.values.len(), 192);
        assert!((e.norm() - 1.0).abs() < 1e-5);
        assert_eq!(enc.encode(&mel, DType::F32).unwrap(), e);
        let long = enc.encode(&mel.concat(&mel).unwrap(), DType::F32).unwrap();
        assert_eq!(long.values.len(), 192);

        let mut short = mel.clone();
        short.n_frames = 1;
        short.values.truncate(80);
        assert!(matches!(enc.encode(&short, DType::F32), Err(Error::InputTooShort(_))));
    }

    #[test]
    fn speaker_embedding_is_batch_independent() {
        let ps = ParamStore::new(0, DType::F32);
        let enc = EcapaSpeakerEncoder::new(&ps, &EncoderConfig::tiny()).unwrap();
        let (a, b) = (mel_of(6400, 6), mel_of(6400, 7));
        let single = enc.embed(&mel_batch_tensor(&[&a], DType::F32).unwrap()).unwrap();
        let pair = enc.embed(&mel_batch_tensor(&[&b, &a], DType::F32).unwrap()).unwrap();
        let s: Vec<f32> = single.flatten_all().unwrap().to_vec1().unwrap();
        let p: Vec<f32> = pair.get(1).unwrap().to_vec1().unwrap();
        for (x, y) in s.iter().zip(&p) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    /// Central differences of `loss(encoder(x))` w.r.t. sampled input elements.
    fn check_input_gradient(f: impl Fn(&Tensor) -> Tensor, x: Tensor, idx: &[usize]) {
        let var = candle::Var::from_tensor(&x).unwrap();
        let grads = f(var.as_tensor()).backward().unwrap();
        let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        for &i in idx {
            let h = 1e-5;
            let eval = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                f(&Tensor::from_vec(v, x.shape(), &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(rel < 1e-3 || (fd - g[i]).abs() < 1e-9, "element {i}: fd {fd} vs backprop {}", g[i]);
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = EncoderConfig::tiny();
        let ps = ParamStore::new(3, DType::F64);
        let content = ContentEncoder::new(&ps.pp("content"), &cfg).unwrap();
        let prosody = ProsodyEncoder::new(&ps.pp("prosody"), &cfg).unwrap();
        let speaker = EcapaSpeakerEncoder::new(&ps.pp("speaker"), &cfg).unwrap();
        let w = ps.get(&[64], "probe", crate::nn::Init::Normal(1.0)).unwrap().detach();
        let ws = ps.get(&[192], "probe_s", crate::nn::Init::Normal(1.0)).unwrap().detach();

        let wave = noise(640, 8);
        let x = wave_batch_tensor(&[&wave], DType::F64).unwrap();
        check_input_gradient(|t| content.forward(t).unwrap().broadcast_mul(&w).unwrap().sum_all().unwrap(), x, &[3, 100, 333, 500, 639]);

        let mel = mel_of(16_000, 9);
        let m20 = mel_batch_tensor(&[&prosody_slice(&mel).unwrap()], DType::F64).unwrap();
        check_input_gradient(|t| prosody.forward(t).unwrap().broadcast_mul(&w).unwrap().sum_all().unwrap(), m20, &[0, 21, 400, 777, 999]);

        let small = mel_of(3200, 10);
        let m80 = mel_batch_tensor(&[&small], DType::F64).unwrap();
        check_input_gradient(|t| speaker.embed(t).unwrap().broadcast_mul(&ws).unwrap().sum_all().unwrap(), m80, &[5, 81, 300, 555, 799]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn content_length_law(frames in 1usize..60) {
            let ps = ParamStore::new(0, DType::F32);
            let enc = ContentEncoder::new(&ps, &EncoderConfig::tiny()).unwrap();
            let z = enc.encode(&AudioBuffer::new(vec![0.1; frames * 320], 16_000).unwrap(), DType::F32).unwrap();
            prop_assert_eq!(z.n_frames, frames);
        }

        #[test]
        fn prosody_rate_law(t in 1usize..200) {
            let ps = ParamStore::new(0, DType::F32);
            let enc = ProsodyEncoder::new(&ps, &EncoderConfig::tiny()).unwrap();
            let x = Tensor::zeros((1, t, 20), DType::F32, &Device::Cpu).unwrap();
            prop_assert_eq!(enc.forward(&x).unwrap().dim(1).unwrap(), t.div_ceil(8));
        }

        #[test]
        fn speaker_shape_is_length_independent(t in 2usize..120) {
            let ps = ParamStore::new(0, DType::F32);
            let enc = EcapaSpeakerEncoder::new(&ps, &EncoderConfig::tiny()).unwrap();
            let x = Tensor::ones((1, t, 80), DType::F32, &Device::Cpu).unwrap();
            prop_assert_eq!(enc.embed(&x).unwrap().dims2().unwrap(), (1, 192));
        }
    }
}
