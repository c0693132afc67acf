//! The optimization loop: one discriminator update then one generator
//! update per step, strategy-dependent content-loss taps and augmentation,
//! EMA codebooks, checkpoints and NDJSON metrics.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{compute_mel_batch, prosody_slice, sr_augment, sr_augment_wave, write_wav, AudioBuffer, FRAME_HOP};
use crate::checkpoint;
use crate::data::{Dataset, DatasetManifest};
use crate::encoder::{mel_batch_tensor, wave_batch_tensor, Scale, SpeakerEncoder};
use crate::error::{Error, Result};
use crate::loss::{adversarial_losses, feature_matching_loss, generator_adversarial, generator_total, GeneratorLosses, LossWeights, MsStftDiscriminator, ReconstructionLoss};
use crate::model::{speaker_mel, Codec, ModelConfig};
use crate::nn::{grad_norm, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::par::Exec;
use crate::strategy::{ContentTap, SpeakerMode, StrategyConfig};
use crate::teacher::{make_teacher, TeacherKind};

const DISC_SEED_SALT: u64 = 0xD15C_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub segment_seconds: f64,
    pub steps: u64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub teacher: TeacherKind,
    pub checkpoint_every: u64,
    /// Dead-code revival cadence for the content and prosody codebooks.
    pub reseed_every: u64,
    pub sr_ratio_min: f64,
    pub sr_ratio_max: f64,
    /// Sequential kernels only; metric logs are then reproducible bit for bit.
    pub deterministic: bool,
}

impl TrainConfig {
    pub fn new(scale: Scale, strategy: StrategyConfig, seed: u64) -> Self {
        Self {
            model: ModelConfig::new(scale, strategy, seed),
            batch_size: 4,
            segment_seconds: 1.0,
            steps: 200,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            teacher: TeacherKind::DeskStub,
            checkpoint_every: 100,
            reseed_every: 10,
            sr_ratio_min: 0.85,
            sr_ratio_max: 1.15,
            deterministic: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let samples = (self.segment_seconds * self.model.mel.sample_rate as f64).round();
        if !(samples >= (2 * FRAME_HOP) as f64) {
            return Err(Error::Config("segments must span at least two frames".into()));
        }
        if !(self.sr_ratio_min > 0.0 && self.sr_ratio_min <= self.sr_ratio_max && self.sr_ratio_max.is_finite()) {
            return Err(Error::Config("sr ratio range must satisfy 0 < min <= max".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }

    pub fn exec(&self) -> Exec {
        if self.deterministic {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

/// The nine per-step numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub adv: f64,
    pub feat: f64,
    pub rec: f64,
    pub vq: f64,
    pub content: f64,
    pub total: f64,
    pub disc: f64,
    pub perplexity_content: f64,
    pub perplexity_prosody: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub grad_norm: f64,
    pub metrics: StepMetrics,
}

/// Counters that expose which strategy-dependent paths a step took.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Hooks {
    pub augment_calls: u64,
    pub encoder_tap_losses: u64,
    pub decoder_tap_losses: u64,
    pub speaker_passthroughs: u64,
    pub speaker_quantizations: u64,
    pub reseeded: u64,
}

pub struct Batch {
    pub audio: Vec<AudioBuffer>,
    /// `(B, T, D_t)` teacher frames, row-major.
    pub targets: Vec<f32>,
    pub target_dim: usize,
}

/// The tensor the content loss compares against the teacher. Under a
/// decoder tap the encoder outputs are not part of the loss graph at all.
pub fn content_tap<'a>(strategy: &StrategyConfig, encoder_out: &'a Tensor, quantized: &'a Tensor, decoder_content: &'a Tensor) -> &'a Tensor {
    match strategy.content_loss_tap {
        ContentTap::EncoderOutput if strategy.tap_quantized => quantized,
        ContentTap::EncoderOutput => encoder_out,
        ContentTap::DecoderOutput => decoder_content,
    }
}

/// Per-step random stream derived from the run seed.
pub fn step_rng(seed: u64, step: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(step);
    rng
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub codec: Codec,
    pub disc_params: ParamStore,
    pub disc: MsStftDiscriminator,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    pub recon: ReconstructionLoss,
    /// Completed steps.
    pub step: u64,
    pub hooks: Hooks,
    /// Where non-finite batches are written before aborting.
    pub dump_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut codec = Codec::new(cfg.model.clone(), DType::F32)?;
        codec.exec = cfg.exec();
        let disc_params = ParamStore::new(cfg.model.seed ^ DISC_SEED_SALT, DType::F32);
        let disc = MsStftDiscriminator::new(&disc_params.pp("disc"), &cfg.model.discriminator)?;
        let gen_opt = Adam::new(codec.trainable(), cfg.adam)?;
        let disc_opt = Adam::new(disc_params.all(), cfg.adam)?;
        let recon = ReconstructionLoss::new(cfg.model.mel.sample_rate, DType::F32)?;
        Ok(Self { cfg, codec, disc_params, disc, gen_opt, disc_opt, recon, step: 0, hooks: Hooks::default(), dump_dir: None })
    }

    /// The batch for the next step: clips and crop offsets drawn from the
    /// step's random stream.
    pub fn make_batch(&self, data: &Dataset) -> Result<Batch> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("no clips loaded".into()));
        }
        let mut rng = step_rng(self.cfg.model.seed, self.step, 0xBA7C);
        let mut audio = Vec::with_capacity(self.cfg.batch_size);
        let mut targets = Vec::new();
        for _ in 0..self.cfg.batch_size {
            let i = rng.gen_range(0..data.len());
            let frame = rng.gen_range(0..data.crop_positions(i));
            let (a, t) = data.segment(i, frame);
            audio.push(a);
            targets.extend(t);
        }
        Ok(Batch { audio, targets, target_dim: data.clips[0].target.dim })
    }

    fn dump(&self, batch: &Batch, detail: &str) -> String {
        let Some(dir) = &self.dump_dir else {
            return detail.to_string();
        };
        let dir = dir.join(format!("nonfinite-step{:06}", self.step));
        let written = fs::create_dir_all(&dir).is_ok()
            && batch.audio.iter().enumerate().all(|(i, a)| write_wav(&dir.join(format!("item{i}.wav")), a).is_ok())
            && fs::write(dir.join("detail.txt"), detail).is_ok();
        if written {
            format!("{detail}; batch written to {}", dir.display())
        } else {
            format!("{detail}; batch dump to {} failed", dir.display())
        }
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<MetricsRecord> {
        let exec = self.cfg.exec();
        let strategy = self.cfg.model.strategy.clone();
        let mut rng = step_rng(self.cfg.model.seed, self.step, 0x57E9);
        let b = batch.audio.len();
        let len = batch.audio[0].len();
        if batch.audio.iter().any(|a| a.len() != len) || len % FRAME_HOP != 0 {
            return Err(Error::Contract("batch segments must share one length that is a multiple of 320".into()));
        }
        let t = len / FRAME_HOP;
        let mels = compute_mel_batch(&batch.audio, &self.cfg.model.mel, exec)?;

        let (content_in, prosody_mels) = if strategy.sr_augmentation {
            let mut waves = Vec::with_capacity(b);
            let mut pm = Vec::with_capacity(b);
            for (a, m) in batch.audio.iter().zip(&mels) {
                let ratio = rng.gen_range(self.cfg.sr_ratio_min..=self.cfg.sr_ratio_max);
                waves.push(sr_augment_wave(a, ratio)?);
                pm.push(prosody_slice(&sr_augment(m, ratio)?)?);
                self.hooks.augment_calls += 1;
            }
            (waves, pm)
        } else {
            (batch.audio.clone(), mels.iter().map(prosody_slice).collect::<Result<Vec<_>>>()?)
        };

        let dtype = DType::F32;
        let wave_real = wave_batch_tensor(&batch.audio.iter().collect::<Vec<_>>(), dtype)?;
        let wave_in = wave_batch_tensor(&content_in.iter().collect::<Vec<_>>(), dtype)?;
        let codec = &mut self.codec;
        let z_c = codec.content_encoder.forward(&wave_in)?;
        let z_p = codec.prosody_encoder.forward(&mel_batch_tensor(&prosody_mels.iter().collect::<Vec<_>>(), dtype)?)?;
        let spk_mels: Vec<_> = mels.iter().map(speaker_mel).collect();
        let s = codec.speaker_encoder.embed(&mel_batch_tensor(&spk_mels.iter().collect::<Vec<_>>(), dtype)?)?;

        for (cb, z) in [(&mut codec.content_codebook, &z_c), (&mut codec.prosody_codebook, &z_p)] {
            if !cb.initialized {
                let frames: Vec<f32> = z.detach().flatten_all()?.to_vec1()?;
                cb.kmeans_init(&frames, &mut rng, exec);
            }
        }
        let qc = codec.content_codebook.quantize_train(&z_c, exec)?;
        let qp = codec.prosody_codebook.quantize_train(&z_p, exec)?;
        let mut vq = (&qc.commit + &qp.commit)?;
        let (speaker, speaker_stats) = match (&strategy.speaker_mode, &codec.speaker_gvq) {
            (SpeakerMode::Gvq, Some(g)) => {
                self.hooks.speaker_quantizations += 1;
                let (out, commit, stats) = g.quantize_train(&s, exec)?;
                vq = (vq + commit)?;
                (out, Some(stats))
            }
            (SpeakerMode::Continuous, None) => {
                self.hooks.speaker_passthroughs += 1;
                (s, None)
            }
            _ => return Err(Error::Strategy("speaker quantizer does not match the strategy".into())),
        };
        let out = codec.decoder.forward(&qc.output, &qp.output, &speaker)?;
        let wave_hat = out.wave;

        let real = self.disc.forward(&wave_real)?;
        let fake = self.disc.forward(&wave_hat.detach())?;
        let (_, disc_loss) = adversarial_losses(&real, &fake)?;
        let disc_value = disc_loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !disc_value.is_finite() {
            let detail = self.dump(batch, &format!("discriminator loss is {disc_value}"));
            return Err(Error::NonFinite { step: self.step, detail });
        }
        self.disc_opt.step(&disc_loss.backward()?)?;

        let real = self.disc.forward(&wave_real)?.detach();
        let fake = self.disc.forward(&wave_hat)?;
        let adv = generator_adversarial(&fake)?;
        let feat = feature_matching_loss(&real, &fake)?;
        let rec = self.recon.forward(&wave_real, &wave_hat)?;
        match strategy.content_loss_tap {
            ContentTap::EncoderOutput => self.hooks.encoder_tap_losses += 1,
            ContentTap::DecoderOutput => self.hooks.decoder_tap_losses += 1,
        }
        let pred = content_tap(&strategy, &z_c, &qc.output, &out.content).clone();
        let target = Tensor::from_vec(batch.targets.clone(), (b, t, batch.target_dim), &Device::Cpu)?;
        let content = self.codec.content_loss.forward(&pred, &target)?;
        let losses = GeneratorLosses { adv: Some(adv), feat: Some(feat), rec: Some(rec), vq: Some(vq), content: Some(content) };
        let total = generator_total(&losses, &self.cfg.weights)?;
        let scalar = |t: &Option<Tensor>| -> Result<f64> { Ok(t.as_ref().expect("all terms set").to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let parts = [scalar(&losses.adv)?, scalar(&losses.feat)?, scalar(&losses.rec)?, scalar(&losses.vq)?, scalar(&losses.content)?];
        if parts.iter().any(|v| !v.is_finite()) {
            let detail = self.dump(batch, &format!("generator losses (adv, feat, rec, vq, content) = {parts:?}"));
            return Err(Error::NonFinite { step: self.step, detail });
        }
        let grads = total.backward()?;
        let gnorm = grad_norm(&grads, self.gen_opt.vars())?;
        self.gen_opt.step(&grads)?;

        let codec = &mut self.codec;
        codec.content_codebook.ema_update(&qc.frames, &qc.indices);
        codec.prosody_codebook.ema_update(&qp.frames, &qp.indices);
        if let (Some(g), Some(stats)) = (&mut codec.speaker_gvq, speaker_stats) {
            g.ema_update(&stats);
        }
        self.step += 1;
        if self.cfg.reseed_every > 0 && self.step % self.cfg.reseed_every == 0 {
            self.hooks.reseeded += codec.content_codebook.reseed(&qc.frames, &mut rng) as u64;
            self.hooks.reseeded += codec.prosody_codebook.reseed(&qp.frames, &mut rng) as u64;
        }

        let [a, f, r, v, c] = parts;
        Ok(MetricsRecord {
            step: self.step,
            grad_norm: gnorm,
            metrics: StepMetrics {
                adv: a,
                feat: f,
                rec: r,
                vq: v,
                content: c,
                total: self.cfg.weights.combine(parts),
                disc: disc_value,
                perplexity_content: codec.content_codebook.usage_perplexity() as f64,
                perplexity_prosody: codec.prosody_codebook.usage_perplexity() as f64,
            },
        })
    }
}

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:06}.ckpt")
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Keeps only records up to and including `step`.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for r in read_metrics(path)?.into_iter().filter(|r| r.step <= step) {
        kept.push_str(&serde_json::to_string(&r)?);
        kept.push('\n');
    }
    fs::write(path, kept)?;
    Ok(())
}

/// Trains until `cfg.steps` steps are complete, writing metrics to
/// `out_dir/metrics.ndjson` and checkpoints under `out_dir/checkpoints`.
/// Returns the final checkpoint.
pub fn run_training(cfg: TrainConfig, manifest: &DatasetManifest, out_dir: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    let mut trainer = match resume {
        Some(p) => {
            let t = checkpoint::load_trainer(p)?;
            if t.cfg.model != cfg.model {
                return Err(Error::Checkpoint("checkpoint model configuration differs from the requested one".into()));
            }
            let mut t = t;
            t.cfg.steps = cfg.steps;
            t.cfg.checkpoint_every = cfg.checkpoint_every;
            t
        }
        None => Trainer::new(cfg)?,
    };
    run_trainer(&mut trainer, manifest, out_dir)
}

pub fn run_trainer(trainer: &mut Trainer, manifest: &DatasetManifest, out_dir: &Path) -> Result<PathBuf> {
    let teacher = make_teacher(&trainer.cfg.teacher, trainer.cfg.model.teacher_dim, trainer.cfg.model.seed)?;
    let mut manifest = manifest.clone();
    manifest.segment_seconds = trainer.cfg.segment_seconds;
    let data = Dataset::load(&manifest, teacher.as_ref())?;
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir)?;
    trainer.dump_dir.get_or_insert_with(|| out_dir.join("dumps"));
    let metrics_path = out_dir.join(METRICS_FILE);
    truncate_metrics(&metrics_path, trainer.step)?;
    let mut log = OpenOptions::new().create(true).append(true).open(&metrics_path)?;
    let mut last = ckpt_dir.join(checkpoint_name(trainer.step));
    if trainer.step == 0 || !last.exists() {
        checkpoint::save_trainer(trainer, &last)?;
    }
    while trainer.step < trainer.cfg.steps {
        let batch = trainer.make_batch(&data)?;
        let rec = trainer.train_step(&batch)?;
        writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        log::info!("step {} total {:.4} rec {:.4}", rec.step, rec.metrics.total, rec.metrics.rec);
        if trainer.step % trainer.cfg.checkpoint_every.max(1) == 0 || trainer.step == trainer.cfg.steps {
            last = ckpt_dir.join(checkpoint_name(trainer.step));
            checkpoint::save_trainer(trainer, &last)?;
        }
    }
    log.flush()?;
    Ok(last)
}
