//! The generator: encoders, quantizers and decoder under one parameter store,
//! with the inference paths between audio and token streams.

use candle::{DType, Device, Tensor, Var};
use half::f16;
use serde::{Deserialize, Serialize};

use crate::audio::{compute_mel, prosody_slice, AudioBuffer, MelConfig, MelSpectrogram, FRAME_HOP, REFERENCE_SAMPLE_RATE};
use crate::bitstream::{self, SpeakerPayload, StreamHeader, TokenStream};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{mel_batch_tensor, wave_batch_tensor, ContentEncoder, EcapaSpeakerEncoder, EncoderConfig, ProsodyEncoder, Scale, SpeakerEncoder};
use crate::error::{Error, Result};
use crate::loss::{ContentLoss, CosineMode, DiscriminatorConfig};
use crate::nn::{digest64, ParamStore};
use crate::par::Exec;
use crate::quant::{Codebook, GroupQuantizer, GroupQuantizerConfig, CODEBOOK_SIZE};
use crate::strategy::{SpeakerMode, StrategyConfig};

pub const SPEAKER_PREFIX: &str = "speaker_encoder.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub seed: u64,
    pub strategy: StrategyConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub discriminator: DiscriminatorConfig,
    pub gvq: GroupQuantizerConfig,
    pub codebook_size: usize,
    pub teacher_dim: usize,
    pub cosine_mode: CosineMode,
    pub mel: MelConfig,
}

impl ModelConfig {
    pub fn new(scale: Scale, strategy: StrategyConfig, seed: u64) -> Self {
        let encoder = EncoderConfig::for_scale(scale);
        Self {
            seed,
            strategy,
            decoder: DecoderConfig::for_scale(scale),
            discriminator: DiscriminatorConfig::for_scale(scale),
            gvq: GroupQuantizerConfig { speaker_dim: encoder.speaker_dim, ..Default::default() },
            encoder,
            codebook_size: CODEBOOK_SIZE,
            teacher_dim: 128,
            cosine_mode: CosineMode::default(),
            mel: MelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.gvq.validate()?;
        self.mel.validate()?;
        let d = self.encoder.latent_dim;
        if self.decoder.transformer_dim != d || self.decoder.prosody_dim != d {
            return Err(Error::Config(format!("decoder widths must equal the latent dim {d}")));
        }
        if self.encoder.speaker_dim != bitstream::SPEAKER_DIM || self.gvq.speaker_dim != bitstream::SPEAKER_DIM || self.decoder.speaker_dim != bitstream::SPEAKER_DIM {
            return Err(Error::Config(format!("speaker dim must be {}", bitstream::SPEAKER_DIM)));
        }
        if self.gvq.num_groups != bitstream::SPEAKER_GROUPS || self.gvq.entries_per_group > 1 << bitstream::SPEAKER_INDEX_BITS {
            return Err(Error::Config("speaker quantizer does not fit the stream layout".into()));
        }
        if self.codebook_size == 0 || self.codebook_size > 1 << bitstream::TOKEN_BITS {
            return Err(Error::Config(format!("codebook size must be in 1..={}", 1 << bitstream::TOKEN_BITS)));
        }
        if self.mel.sample_rate != REFERENCE_SAMPLE_RATE || self.mel.hop != FRAME_HOP || self.mel.n_mels != self.encoder.n_mels {
            return Err(Error::Config("mel frontend must run at 16 kHz with a 320-sample hop and the encoder's bin count".into()));
        }
        Ok(())
    }
}

/// Continuous features of one utterance.
pub struct Analysis {
    /// `(1, T, D)`.
    pub content: Tensor,
    /// `(1, ceil(T/8), D)`.
    pub prosody: Tensor,
    /// `(1, 192)`.
    pub speaker: Tensor,
    pub num_samples: usize,
}

pub struct Codec {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub content_encoder: ContentEncoder,
    pub prosody_encoder: ProsodyEncoder,
    pub speaker_encoder: EcapaSpeakerEncoder,
    pub decoder: Decoder,
    pub content_loss: ContentLoss,
    pub content_codebook: Codebook,
    pub prosody_codebook: Codebook,
    pub speaker_gvq: Option<GroupQuantizer>,
    pub exec: Exec,
}

/// Mel with at least two frames, repeating a lone frame.
pub fn speaker_mel(mel: &MelSpectrogram) -> MelSpectrogram {
    if mel.n_frames >= 2 {
        return mel.clone();
    }
    let mut m = mel.clone();
    m.values.extend_from_slice(&mel.values);
    m.n_frames *= 2;
    m
}

impl Codec {
    pub fn new(cfg: ModelConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let ps = ParamStore::new(cfg.seed, dtype);
        let d = cfg.encoder.latent_dim;
        let speaker_gvq = match cfg.strategy.speaker_mode {
            SpeakerMode::Gvq => Some(GroupQuantizer::new(cfg.gvq, cfg.seed ^ 0x6A09_E667)?),
            SpeakerMode::Continuous => None,
        };
        Ok(Self {
            content_encoder: ContentEncoder::new(&ps.pp("content_encoder"), &cfg.encoder)?,
            prosody_encoder: ProsodyEncoder::new(&ps.pp("prosody_encoder"), &cfg.encoder)?,
            speaker_encoder: EcapaSpeakerEncoder::new(&ps.pp("speaker_encoder"), &cfg.encoder)?,
            decoder: Decoder::new(&ps.pp("decoder"), &cfg.decoder)?,
            content_loss: ContentLoss::new(&ps.pp("content_proj"), d, cfg.teacher_dim, cfg.cosine_mode)?,
            content_codebook: Codebook::new(cfg.codebook_size, d),
            prosody_codebook: Codebook::new(cfg.codebook_size, d),
            speaker_gvq,
            params: ps,
            exec: Exec::default(),
            cfg,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Parameters updated by the generator optimizer.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        let freeze = self.cfg.encoder.freeze_speaker;
        self.params.all().into_iter().filter(|(n, _)| !(freeze && n.starts_with(SPEAKER_PREFIX))).collect()
    }

    /// Identifies the codebooks a stream's tokens index into.
    pub fn codebook_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for cb in [&self.content_codebook, &self.prosody_codebook] {
            bytes.extend_from_slice(&(cb.k as u64).to_be_bytes());
            bytes.extend_from_slice(&(cb.dim as u64).to_be_bytes());
            bytes.extend(cb.entries_bytes());
        }
        if let Some(g) = &self.speaker_gvq {
            for cb in &g.groups {
                bytes.extend(cb.entries_bytes());
            }
        }
        digest64(&bytes)
    }

    fn check_rate(&self, audio: &AudioBuffer) -> Result<()> {
        if audio.sample_rate != self.cfg.mel.sample_rate {
            return Err(Error::Config(format!("model runs at {} Hz, got {} Hz audio", self.cfg.mel.sample_rate, audio.sample_rate)));
        }
        if audio.is_empty() {
            return Err(Error::EmptyInput("cannot encode empty audio".into()));
        }
        Ok(())
    }

    pub fn speaker_embedding(&self, audio: &AudioBuffer) -> Result<Tensor> {
        self.check_rate(audio)?;
        let mel = compute_mel(&audio.padded_to_multiple(FRAME_HOP), &self.cfg.mel)?;
        self.speaker_encoder.embed(&mel_batch_tensor(&[&speaker_mel(&mel)], self.dtype())?)
    }

    pub fn analyze(&self, audio: &AudioBuffer) -> Result<Analysis> {
        self.check_rate(audio)?;
        let padded = audio.padded_to_multiple(FRAME_HOP);
        let mel = compute_mel(&padded, &self.cfg.mel)?;
        let content = self.content_encoder.forward(&wave_batch_tensor(&[&padded], self.dtype())?)?;
        let prosody = self.prosody_encoder.forward(&mel_batch_tensor(&[&prosody_slice(&mel)?], self.dtype())?)?;
        let speaker = self.speaker_encoder.embed(&mel_batch_tensor(&[&speaker_mel(&mel)], self.dtype())?)?;
        Ok(Analysis { content, prosody, speaker, num_samples: audio.len() })
    }

    fn rows(t: &Tensor) -> Result<Vec<f32>> {
        Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }

    pub fn speaker_payload(&self, speaker: &Tensor) -> Result<SpeakerPayload> {
        let values = Self::rows(speaker)?;
        Ok(match &self.speaker_gvq {
            Some(g) => {
                let r = g.quantize(&crate::encoder::GlobalEmbedding { values }, self.exec)?;
                SpeakerPayload::Indices(r.indices.iter().map(|&i| i as u16).collect())
            }
            None => SpeakerPayload::Continuous(values.iter().map(|&v| f16::from_f32(v)).collect()),
        })
    }

    /// Token stream for `audio`, taking the speaker from `speaker` when given.
    pub fn encode_tokens(&self, a: &Analysis, speaker: Option<SpeakerPayload>) -> Result<TokenStream> {
        let content = self.content_codebook.quantize_rows(&Self::rows(&a.content)?, self.exec)?;
        let prosody = self.prosody_codebook.quantize_rows(&Self::rows(&a.prosody)?, self.exec)?;
        let speaker = match speaker {
            Some(s) => s,
            None => self.speaker_payload(&a.speaker)?,
        };
        let num_samples = u32::try_from(a.num_samples).map_err(|_| Error::Encode("utterance too long for the stream header".into()))?;
        let ts = TokenStream {
            header: StreamHeader {
                version: bitstream::VERSION,
                sample_rate: self.cfg.mel.sample_rate,
                num_samples,
                strategy: self.cfg.strategy.tag(),
                codebook_hash: self.codebook_hash(),
            },
            content_tokens: content.indices,
            prosody_tokens: prosody.indices,
            speaker,
        };
        ts.validate()?;
        Ok(ts)
    }

    pub fn encode(&self, audio: &AudioBuffer) -> Result<TokenStream> {
        self.encode_tokens(&self.analyze(audio)?, None)
    }

    pub fn speaker_tensor(&self, payload: &SpeakerPayload) -> Result<Tensor> {
        let values = match (payload, &self.speaker_gvq) {
            (SpeakerPayload::Indices(idx), Some(g)) => g.dequantize(&idx.iter().map(|&i| i as u32).collect::<Vec<_>>())?.values,
            (SpeakerPayload::Continuous(v), None) => v.iter().map(|x| x.to_f32()).collect(),
            (SpeakerPayload::Indices(_), None) => return Err(Error::Strategy("stream carries speaker indices but the model has a continuous speaker path".into())),
            (SpeakerPayload::Continuous(_), Some(_)) => return Err(Error::Strategy("stream carries a continuous speaker vector but the model quantizes speakers".into())),
        };
        let n = values.len();
        Ok(Tensor::from_vec(values, (1, n), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    pub fn decode(&self, ts: &TokenStream) -> Result<AudioBuffer> {
        if ts.header.codebook_hash != self.codebook_hash() {
            return Err(Error::ModelMismatch { stream: ts.header.codebook_hash, model: self.codebook_hash() });
        }
        let d = self.cfg.encoder.latent_dim;
        let nc = ts.content_tokens.len();
        let c = Tensor::from_vec(self.content_codebook.lookup(&ts.content_tokens)?, (1, nc, d), &Device::Cpu)?.to_dtype(self.dtype())?;
        let np = ts.prosody_tokens.len();
        let p = Tensor::from_vec(self.prosody_codebook.lookup(&ts.prosody_tokens)?, (1, np, d), &Device::Cpu)?.to_dtype(self.dtype())?;
        let s = self.speaker_tensor(&ts.speaker)?;
        let wave = self.decoder.forward(&c, &p, &s)?.wave;
        let mut samples = Self::rows(&wave)?;
        samples.truncate(ts.header.num_samples as usize);
        AudioBuffer::new(samples, ts.header.sample_rate)
    }
}
