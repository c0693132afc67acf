//! Decoder stack: a transformer over quantized content, additive fusion of
//! prosody and speaker conditions, a ConvNeXt backbone and a mirrored
//! upsampling synthesizer (×320).

use candle::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::audio::FRAME_HOP;
use crate::encoder::{ResidualUnit, Scale};
use crate::error::{Error, Result};
use crate::nn::{gelu, softmax_last, Conv1d, DepthwiseConv1d, Init, LayerNorm, Linear, ParamStore, Upsample1d};

pub const PROSODY_REPEAT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// `content + proj_p(prosody) + proj_s(speaker)`.
    Add,
    /// `proj([content, prosody, speaker])`.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub transformer_layers: usize,
    pub transformer_dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub convnext_blocks: usize,
    pub convnext_dim: usize,
    pub up_strides: Vec<usize>,
    pub base_channels: usize,
    pub prosody_dim: usize,
    pub speaker_dim: usize,
    pub fusion: Fusion,
    pub layer_scale_init: f64,
    pub scale: Scale,
}

impl DecoderConfig {
    pub fn reference() -> Self {
        Self {
            transformer_layers: 4,
            transformer_dim: 256,
            heads: 4,
            ffn_mult: 4,
            convnext_blocks: 8,
            convnext_dim: 256,
            up_strides: vec![8, 5, 4, 2],
            base_channels: 32,
            prosody_dim: 256,
            speaker_dim: 192,
            fusion: Fusion::Add,
            layer_scale_init: 1e-6,
            scale: Scale::Reference,
        }
    }

    pub fn tiny() -> Self {
        Self {
            transformer_dim: 64,
            convnext_blocks: 4,
            convnext_dim: 64,
            base_channels: 4,
            prosody_dim: 64,
            scale: Scale::Tiny,
            ..Self::reference()
        }
    }

    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Reference => Self::reference(),
            Scale::Tiny => Self::tiny(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let total: usize = self.up_strides.iter().product();
        if total != FRAME_HOP {
            return Err(Error::Config(format!("upsampling strides multiply to {total}, expected {FRAME_HOP}")));
        }
        if self.heads == 0 || self.transformer_dim % self.heads != 0 {
            return Err(Error::Config("transformer dim must divide evenly into heads".into()));
        }
        if self.transformer_dim != self.convnext_dim {
            return Err(Error::Config("transformer and backbone widths must match".into()));
        }
        Ok(())
    }
}

/// `(T, D)` sinusoidal position table.
pub fn sinusoidal_positions(t: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let mut pe = vec![0.0f64; t * dim];
    for pos in 0..t {
        for i in 0..dim / 2 {
            let freq = (10_000f64).powf(-((2 * i) as f64) / dim as f64);
            pe[pos * dim + 2 * i] = (pos as f64 * freq).sin();
            pe[pos * dim + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    Ok(Tensor::from_vec(pe, (t, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((b, t, 3, self.heads, dh))?;
        let head = |i: usize| -> Result<Tensor> { Ok(qkv.narrow(2, i, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?) };
        let (q, k, v) = (head(0)?, head(1)?, head(2)?);
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let ctx = softmax_last(&scores)?.matmul(&v)?;
        let ctx = ctx.transpose(1, 2)?.reshape((b, t, d))?;
        self.out.forward(&ctx)
    }
}

#[derive(Debug, Clone)]
struct TransformerLayer {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl TransformerLayer {
    fn new(ps: &ParamStore, dim: usize, heads: usize, mult: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&ps.pp("norm1"), dim)?,
            attn: SelfAttention {
                qkv: Linear::new(&ps.pp("qkv"), dim, 3 * dim)?,
                out: Linear::new(&ps.pp("attn_out"), dim, dim)?,
                heads,
            },
            norm2: LayerNorm::new(&ps.pp("norm2"), dim)?,
            ff1: Linear::new(&ps.pp("ff1"), dim, dim * mult)?,
            ff2: Linear::new(&ps.pp("ff2"), dim * mult, dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let h = self.ff2.forward(&gelu(&self.ff1.forward(&self.norm2.forward(&x)?)?)?)?;
        Ok((x + h)?)
    }
}

/// Pre-norm transformer encoder over the whole utterance (non-causal).
#[derive(Debug, Clone)]
pub struct ContentDecoder {
    layers: Vec<TransformerLayer>,
    norm: LayerNorm,
    dim: usize,
}

impl ContentDecoder {
    pub fn new(ps: &ParamStore, cfg: &DecoderConfig) -> Result<Self> {
        let layers = (0..cfg.transformer_layers)
            .map(|i| TransformerLayer::new(&ps.pp(format!("layer{i}")), cfg.transformer_dim, cfg.heads, cfg.ffn_mult))
            .collect::<Result<_>>()?;
        Ok(Self { layers, norm: LayerNorm::new(&ps.pp("norm"), cfg.transformer_dim)?, dim: cfg.transformer_dim })
    }

    /// `(B, T, D)` → `(B, T, D)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, t, d) = x.dims3()?;
        if d != self.dim {
            return Err(Error::Config(format!("content decoder expects dim {}, got {d}", self.dim)));
        }
        let mut h = x.broadcast_add(&sinusoidal_positions(t, d, x.dtype())?)?;
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        self.norm.forward(&h)
    }
}

/// Nearest-neighbour repeat ×8 along time, truncated to `t` frames.
pub fn repeat_prosody(prosody: &Tensor, t: usize) -> Result<Tensor> {
    let (b, tp, d) = prosody.dims3()?;
    if tp != t.div_ceil(PROSODY_REPEAT) {
        return Err(Error::Alignment(format!("{tp} prosody frames for {t} content frames, expected {}", t.div_ceil(PROSODY_REPEAT))));
    }
    let up = prosody.unsqueeze(2)?.broadcast_as((b, tp, PROSODY_REPEAT, d))?.reshape((b, tp * PROSODY_REPEAT, d))?;
    Ok(up.narrow(1, 0, t)?)
}

/// Which conditions entered the fused features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FusedSources {
    pub prosody: bool,
    pub speaker: bool,
}

#[derive(Debug, Clone)]
pub struct ConditionedFeatures {
    /// `(B, T, D)` at the content frame rate.
    pub values: Tensor,
    pub sources: FusedSources,
}

#[derive(Debug, Clone)]
enum FusionLayers {
    Add { prosody: Linear, speaker: Linear },
    Concat(Linear),
}

#[derive(Debug, Clone)]
pub struct ConditionFusion {
    layers: FusionLayers,
    prosody_dim: usize,
    speaker_dim: usize,
}

impl ConditionFusion {
    pub fn new(ps: &ParamStore, cfg: &DecoderConfig) -> Result<Self> {
        let d = cfg.transformer_dim;
        let layers = match cfg.fusion {
            Fusion::Add => FusionLayers::Add {
                prosody: Linear::new(&ps.pp("prosody"), cfg.prosody_dim, d)?,
                speaker: Linear::new(&ps.pp("speaker"), cfg.speaker_dim, d)?,
            },
            Fusion::Concat => FusionLayers::Concat(Linear::new(&ps.pp("concat"), d + cfg.prosody_dim + cfg.speaker_dim, d)?),
        };
        Ok(Self { layers, prosody_dim: cfg.prosody_dim, speaker_dim: cfg.speaker_dim })
    }

    /// `content (B, T, D)`, `prosody (B, ceil(T/8), Dp)`, `speaker (B, Ds)`.
    /// Missing conditions contribute zeros.
    pub fn forward(&self, content: &Tensor, prosody: Option<&Tensor>, speaker: Option<&Tensor>) -> Result<ConditionedFeatures> {
        let (b, t, _) = content.dims3()?;
        let sources = FusedSources { prosody: prosody.is_some(), speaker: speaker.is_some() };
        let p_up = match prosody {
            Some(p) => repeat_prosody(p, t)?,
            None => Tensor::zeros((b, t, self.prosody_dim), content.dtype(), content.device())?,
        };
        let s = match speaker {
            Some(s) => s.clone(),
            None => Tensor::zeros((b, self.speaker_dim), content.dtype(), content.device())?,
        };
        let values = match &self.layers {
            FusionLayers::Add { prosody, speaker } => {
                let s = speaker.forward(&s)?.unsqueeze(1)?;
                content.add(&prosody.forward(&p_up)?)?.broadcast_add(&s)?
            }
            FusionLayers::Concat(proj) => {
                let s_t = s.unsqueeze(1)?.broadcast_as((b, t, self.speaker_dim))?;
                proj.forward(&Tensor::cat(&[content, &p_up, &s_t.contiguous()?], 2)?)?
            }
        };
        Ok(ConditionedFeatures { values, sources })
    }
}

#[derive(Debug, Clone)]
struct ConvNextBlock {
    dw: DepthwiseConv1d,
    norm: LayerNorm,
    pw1: Linear,
    pw2: Linear,
    gamma: Tensor,
}

impl ConvNextBlock {
    fn new(ps: &ParamStore, dim: usize, layer_scale: f64) -> Result<Self> {
        Ok(Self {
            dw: DepthwiseConv1d::new(&ps.pp("dw"), dim, 7)?,
            norm: LayerNorm::new(&ps.pp("norm"), dim)?,
            pw1: Linear::new(&ps.pp("pw1"), dim, dim * 4)?,
            pw2: Linear::new(&ps.pp("pw2"), dim * 4, dim)?,
            gamma: ps.get(&[dim], "gamma", Init::Const(layer_scale))?,
        })
    }

    /// `(B, T, D)` → `(B, T, D)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.dw.forward(&x.transpose(1, 2)?)?.transpose(1, 2)?;
        let h = self.pw2.forward(&gelu(&self.pw1.forward(&self.norm.forward(&h)?)?)?)?;
        Ok((x + h.broadcast_mul(&self.gamma)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    blocks: Vec<ConvNextBlock>,
    norm: LayerNorm,
}

impl Backbone {
    pub fn new(ps: &ParamStore, cfg: &DecoderConfig) -> Result<Self> {
        let blocks = (0..cfg.convnext_blocks)
            .map(|i| ConvNextBlock::new(&ps.pp(format!("block{i}")), cfg.convnext_dim, cfg.layer_scale_init))
            .collect::<Result<_>>()?;
        Ok(Self { blocks, norm: LayerNorm::new(&ps.pp("norm"), cfg.convnext_dim)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        self.norm.forward(&h)
    }
}

/// Features at 50 Hz → waveform, one transposed-conv stage per stride.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    conv_in: Conv1d,
    stages: Vec<(Upsample1d, ResidualUnit)>,
    conv_out: Conv1d,
}

impl Synthesizer {
    pub fn new(ps: &ParamStore, cfg: &DecoderConfig) -> Result<Self> {
        let mut ch = cfg.base_channels << cfg.up_strides.len();
        let conv_in = Conv1d::new(&ps.pp("conv_in"), cfg.convnext_dim, ch, 7, 1)?;
        let mut stages = Vec::new();
        for (i, &s) in cfg.up_strides.iter().enumerate() {
            let sp = ps.pp(format!("stage{i}"));
            let up = Upsample1d::new(&sp.pp("up"), ch, ch / 2, s)?;
            ch /= 2;
            stages.push((up, ResidualUnit::new(&sp.pp("res"), ch)?));
        }
        let conv_out = Conv1d::new(&ps.pp("conv_out"), ch, 1, 7, 1)?;
        Ok(Self { conv_in, stages, conv_out })
    }

    /// `(B, T, D)` → `(B, T·320)` in `[-1, 1]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(&x.transpose(1, 2)?)?;
        for (up, res) in &self.stages {
            h = res.forward(&up.forward(&h.elu(1.0)?)?)?;
        }
        let y = self.conv_out.forward(&h.elu(1.0)?)?.tanh()?;
        Ok(y.squeeze(1)?)
    }
}

/// Output of a full decoder pass.
pub struct DecoderOutput {
    pub wave: Tensor,
    /// Content-decoder output, the decoder-side semantic tap.
    pub content: Tensor,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub content: ContentDecoder,
    pub fusion: ConditionFusion,
    pub backbone: Backbone,
    pub synth: Synthesizer,
}

impl Decoder {
    pub fn new(ps: &ParamStore, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            content: ContentDecoder::new(&ps.pp("content"), cfg)?,
            fusion: ConditionFusion::new(&ps.pp("fusion"), cfg)?,
            backbone: Backbone::new(&ps.pp("backbone"), cfg)?,
            synth: Synthesizer::new(&ps.pp("synth"), cfg)?,
        })
    }

    pub fn forward(&self, content_q: &Tensor, prosody_q: &Tensor, speaker: &Tensor) -> Result<DecoderOutput> {
        let content = self.content.forward(content_q)?;
        let fused = self.fusion.forward(&content, Some(prosody_q), Some(speaker))?;
        let wave = self.synth.forward(&self.backbone.forward(&fused.values)?)?;
        Ok(DecoderOutput { wave, content })
    }
}
