//! Training objectives: a multi-scale STFT discriminator, hinge adversarial
//! losses, feature matching, multi-scale mel reconstruction, the cosine
//! content loss and the weighted generator aggregate.

use candle::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::audio::mel_filterbank;
use crate::encoder::Scale;
use crate::error::{Error, Result};
use crate::nn::{self, fold_last_axis, stft, Conv2d, Linear, ParamStore, StftOp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adv: f64,
    pub feat: f64,
    pub rec: f64,
    pub vq: f64,
    pub content: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { adv: 3.0, feat: 3.0, rec: 1.0, vq: 1.0, content: 10.0 }
    }
}

impl LossWeights {
    /// Weighted sum of plain numbers in `(adv, feat, rec, vq, content)` order.
    pub fn combine(&self, c: [f64; 5]) -> f64 {
        self.adv * c[0] + self.feat * c[1] + self.rec * c[2] + self.vq * c[3] + self.content * c[4]
    }
}

/// The five generator loss terms; each must be present to form a total.
#[derive(Debug, Clone, Default)]
pub struct GeneratorLosses {
    pub adv: Option<Tensor>,
    pub feat: Option<Tensor>,
    pub rec: Option<Tensor>,
    pub vq: Option<Tensor>,
    pub content: Option<Tensor>,
}

pub fn generator_total(c: &GeneratorLosses, w: &LossWeights) -> Result<Tensor> {
    let parts = [("adv", &c.adv, w.adv), ("feat", &c.feat, w.feat), ("rec", &c.rec, w.rec), ("vq", &c.vq, w.vq), ("content", &c.content, w.content)];
    let mut total: Option<Tensor> = None;
    for (name, t, weight) in parts {
        let t = t.as_ref().ok_or_else(|| Error::Config(format!("missing loss component `{name}`")))?;
        let term = (t * weight)?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(total.expect("five components"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub windows: Vec<usize>,
    pub channels: usize,
}

impl DiscriminatorConfig {
    pub fn reference() -> Self {
        Self { windows: vec![1024, 512, 256, 128, 64], channels: 32 }
    }

    pub fn tiny() -> Self {
        Self { channels: 4, ..Self::reference() }
    }

    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Reference => Self::reference(),
            Scale::Tiny => Self::tiny(),
        }
    }
}

pub struct DiscriminatorOutput {
    /// One `(B, 1, frames, bins')` score map per scale.
    pub logits: Vec<Tensor>,
    /// Per scale, the activations of every hidden layer.
    pub features: Vec<Vec<Tensor>>,
}

impl DiscriminatorOutput {
    pub fn detach(&self) -> Self {
        Self {
            logits: self.logits.iter().map(|t| t.detach()).collect(),
            features: self.features.iter().map(|f| f.iter().map(|t| t.detach()).collect()).collect(),
        }
    }
}

const FOLDED_LAYERS: usize = 3;

fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    nn::leaky_relu(x, 0.2)
}

/// One resolution: a 2-D conv stack over the real/imaginary spectrogram,
/// time on the third axis and frequency on the fourth.
#[derive(Clone)]
struct ScaleDiscriminator {
    stft: StftOp,
    conv_in: Conv2d,
    folded: Vec<Conv2d>,
    conv_mid: Conv2d,
    conv_post: Conv2d,
}

impl ScaleDiscriminator {
    fn new(ps: &ParamStore, window: usize, ch: usize) -> Result<Self> {
        Ok(Self {
            stft: StftOp::new(window, window / 4, true),
            conv_in: Conv2d::new(&ps.pp("conv_in"), 2, ch, 3, 9)?,
            folded: (0..FOLDED_LAYERS)
                .map(|i| Conv2d::new(&ps.pp(format!("conv{i}")), 2 * ch, ch, 3, 5))
                .collect::<Result<_>>()?,
            conv_mid: Conv2d::new(&ps.pp("conv_mid"), ch, ch, 3, 3)?,
            conv_post: Conv2d::new(&ps.pp("conv_post"), ch, 1, 3, 3)?,
        })
    }

    fn forward(&self, wave: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let spec = stft(wave, &self.stft)?.permute((0, 3, 1, 2))?.contiguous()?;
        let mut feats = Vec::with_capacity(FOLDED_LAYERS + 2);
        let mut h = leaky_relu(&self.conv_in.forward(&spec)?)?;
        feats.push(h.clone());
        for conv in &self.folded {
            h = leaky_relu(&conv.forward(&fold_last_axis(&h)?)?)?;
            feats.push(h.clone());
        }
        h = leaky_relu(&self.conv_mid.forward(&h)?)?;
        feats.push(h.clone());
        Ok((self.conv_post.forward(&h)?, feats))
    }
}

/// Multi-scale STFT discriminator.
#[derive(Clone)]
pub struct MsStftDiscriminator {
    scales: Vec<ScaleDiscriminator>,
    max_window: usize,
}

impl MsStftDiscriminator {
    pub fn new(ps: &ParamStore, cfg: &DiscriminatorConfig) -> Result<Self> {
        if cfg.windows.is_empty() || cfg.windows.iter().any(|&w| w < 8 || w % 4 != 0) {
            return Err(Error::Config("discriminator windows must be multiples of 4 and at least 8".into()));
        }
        let scales = cfg
            .windows
            .iter()
            .map(|&w| ScaleDiscriminator::new(&ps.pp(format!("scale{w}")), w, cfg.channels))
            .collect::<Result<_>>()?;
        Ok(Self { scales, max_window: *cfg.windows.iter().max().expect("non-empty") })
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// `(B, L)` waveform batch.
    pub fn forward(&self, wave: &Tensor) -> Result<DiscriminatorOutput> {
        let len = wave.dim(1)?;
        if len < self.max_window {
            return Err(Error::InputTooShort(format!("discriminator needs at least {} samples, got {len}", self.max_window)));
        }
        let mut logits = Vec::with_capacity(self.scales.len());
        let mut features = Vec::with_capacity(self.scales.len());
        for s in &self.scales {
            let (l, f) = s.forward(wave)?;
            logits.push(l);
            features.push(f);
        }
        Ok(DiscriminatorOutput { logits, features })
    }
}

/// Hinge losses: `(generator adversarial, discriminator)`.
pub fn adversarial_losses(real: &DiscriminatorOutput, fake: &DiscriminatorOutput) -> Result<(Tensor, Tensor)> {
    if real.logits.len() != fake.logits.len() || real.logits.is_empty() {
        return Err(Error::Contract("discriminator outputs have different scale counts".into()));
    }
    let n = real.logits.len() as f64;
    let mut gen = Vec::with_capacity(real.logits.len());
    let mut disc = Vec::with_capacity(real.logits.len());
    for (r, f) in real.logits.iter().zip(&fake.logits) {
        let dr = (1.0 - r)?.relu()?.mean_all()?;
        let df = (f + 1.0)?.relu()?.mean_all()?;
        disc.push((dr + df)?);
        gen.push((1.0 - f)?.relu()?.mean_all()?);
    }
    Ok(((Tensor::stack(&gen, 0)?.sum_all()? / n)?, (Tensor::stack(&disc, 0)?.sum_all()? / n)?))
}

/// Generator hinge term from the fake logits alone.
pub fn generator_adversarial(fake: &DiscriminatorOutput) -> Result<Tensor> {
    let n = fake.logits.len() as f64;
    let terms = fake.logits.iter().map(|f| Ok((1.0 - f)?.relu()?.mean_all()?)).collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / n)?)
}

/// Relative L1 distance between real and fake activations, averaged over
/// scales and layers.
pub fn feature_matching_loss(real: &DiscriminatorOutput, fake: &DiscriminatorOutput) -> Result<Tensor> {
    let mut terms = Vec::new();
    for (rs, fs) in real.features.iter().zip(&fake.features) {
        if rs.len() != fs.len() {
            return Err(Error::Contract("feature layer counts differ".into()));
        }
        for (r, f) in rs.iter().zip(fs) {
            let num = (r - f)?.abs()?.mean_all()?;
            let den = (r.abs()?.mean_all()? + 1e-12)?;
            terms.push((num / den)?);
        }
    }
    if terms.is_empty() {
        return Err(Error::Contract("no discriminator features".into()));
    }
    let n = terms.len() as f64;
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / n)?)
}

pub const MEL_LOSS_BANDS: usize = 64;

struct MelScale {
    stft: StftOp,
    /// `(bins, n_mels)`.
    fb: Tensor,
}

/// Waveform L1 plus mel-magnitude L1 and L2 at windows `2^5 .. 2^11`.
pub struct ReconstructionLoss {
    scales: Vec<MelScale>,
}

impl ReconstructionLoss {
    pub fn new(sample_rate: u32, dtype: DType) -> Result<Self> {
        let scales = (5..=11)
            .map(|i| {
                let w = 1usize << i;
                let bins = w / 2 + 1;
                let fb = mel_filterbank(sample_rate, w, MEL_LOSS_BANDS, 0.0, sample_rate as f32 / 2.0);
                let fb = Tensor::from_vec(fb, (MEL_LOSS_BANDS, bins), &Device::Cpu)?.t()?.contiguous()?.to_dtype(dtype)?;
                Ok(MelScale { stft: StftOp::new(w, w / 4, true), fb })
            })
            .collect::<Result<_>>()?;
        Ok(Self { scales })
    }

    fn mel(&self, s: &MelScale, x: &Tensor) -> Result<Tensor> {
        let spec = stft(x, &s.stft)?;
        let mag = (spec.sqr()?.sum(D::Minus1)? + 1e-8)?.sqrt()?;
        Ok(mag.broadcast_matmul(&s.fb)?)
    }

    /// `(B, L)` reference and estimate.
    pub fn forward(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        if x.dims() != y.dims() {
            return Err(Error::Contract(format!("reconstruction inputs differ in shape: {:?} vs {:?}", x.dims(), y.dims())));
        }
        let mut total = (x - y)?.abs()?.mean_all()?;
        for s in &self.scales {
            let d = (self.mel(s, x)? - self.mel(s, y)?)?;
            total = ((total + d.abs()?.mean_all()?)? + d.sqr()?.mean_all()?)?;
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineMode {
    /// Cosine along time for each dimension.
    #[default]
    PerDimension,
    /// Cosine across dimensions for each frame.
    PerFrame,
}

/// `1 − mean cos` between `(B, T, D)` prediction and target, after
/// truncating both to the shorter length.
pub fn cosine_content_loss(pred: &Tensor, target: &Tensor, mode: CosineMode) -> Result<Tensor> {
    let (_, tp, dp) = pred.dims3()?;
    let (_, tt, dt) = target.dims3()?;
    if dp != dt {
        return Err(Error::Config(format!("content prediction dim {dp} differs from target dim {dt}")));
    }
    let t = tp.min(tt);
    if t < 2 {
        return Err(Error::InputTooShort(format!("content loss needs at least 2 aligned frames, got {t}")));
    }
    let p = pred.narrow(1, 0, t)?;
    let y = target.narrow(1, 0, t)?;
    let axis = match mode {
        CosineMode::PerDimension => 1,
        CosineMode::PerFrame => 2,
    };
    let dot = (&p * &y)?.sum(axis)?;
    let np = p.sqr()?.sum(axis)?.sqrt()?;
    let ny = y.sqr()?.sum(axis)?.sqrt()?;
    let cos = (dot / (np * ny)?.maximum(1e-8)?)?;
    Ok((1.0 - cos.mean_all()?)?)
}

/// Projection of the codec's content features up to the teacher width,
/// followed by the cosine loss.
#[derive(Debug, Clone)]
pub struct ContentLoss {
    proj: Linear,
    mode: CosineMode,
}

impl ContentLoss {
    pub fn new(ps: &ParamStore, d_in: usize, d_teacher: usize, mode: CosineMode) -> Result<Self> {
        Ok(Self { proj: Linear::new(ps, d_in, d_teacher)?, mode })
    }

    pub fn forward(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        cosine_content_loss(&self.proj.forward(pred)?, target, self.mode)
    }
}
