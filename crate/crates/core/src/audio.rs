//! Deterministic DSP frontend: WAV I/O, resampling, log-mel extraction,
//! prosody band slicing and spectrogram-resize augmentation.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};

pub const REFERENCE_SAMPLE_RATE: u32 = 16_000;
/// Samples per content frame; shared by the mel hop and the encoder stride product.
pub const FRAME_HOP: usize = 320;
pub const PROSODY_BINS: usize = 20;
pub const PEAK_LEVEL: f32 = 0.95;

/// Mono PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Zero-pads to the next multiple of `multiple` samples.
    pub fn padded_to_multiple(&self, multiple: usize) -> AudioBuffer {
        let target = self.len().div_ceil(multiple).max(1) * multiple;
        let mut samples = self.samples.clone();
        samples.resize(target, 0.0);
        AudioBuffer { samples, sample_rate: self.sample_rate }
    }

    /// Scales so that max |x| equals `peak`. Silent buffers are left alone.
    pub fn peak_normalize(&mut self, peak: f32) {
        let max = self.samples.iter().fold(0.0f32, |m, x| m.max(x.abs()));
        if max > 0.0 {
            let g = peak / max;
            self.samples.iter_mut().for_each(|x| *x *= g);
        }
    }
}

/// Reads a WAV file (PCM integer or float32), averages channels to mono and
/// resamples to `target_rate`.
pub fn load_audio(path: &Path, target_rate: u32) -> Result<AudioBuffer> {
    let decode_err = |reason: String| Error::Decode { path: path.to_path_buf(), reason };
    let mut reader = hound::WavReader::open(path).map_err(|e| decode_err(e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(decode_err("zero channels".into()));
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| decode_err(e.to_string()))?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| decode_err(e.to_string()))?
        }
    };
    let mono = downmix(&interleaved, channels);
    if mono.is_empty() {
        return Err(Error::EmptyInput(format!("{} contains no samples", path.display())));
    }
    let samples = if spec.sample_rate == target_rate {
        mono
    } else {
        resample(&mono, spec.sample_rate, target_rate)
    };
    AudioBuffer::new(samples, target_rate)
}

fn downmix(interleaved: &[f32], channels: usize) -> Vec<f32> {
    if channels == 1 {
        return interleaved.to_vec();
    }
    interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect()
}

/// Writes 16-bit PCM mono WAV.
pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for &s in &audio.samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        w.write_sample(v).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.finalize().map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Output length of [`resample`]: `ceil(n * to / from)`.
pub fn resampled_len(n: usize, from: u32, to: u32) -> usize {
    ((n as u64 * to as u64).div_ceil(from as u64)) as usize
}

const SINC_ZERO_CROSSINGS: f64 = 16.0;

/// Band-limited resampling by windowed-sinc interpolation (Hann window,
/// cutoff at the lower Nyquist frequency).
pub fn resample(x: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to {
        return x.to_vec();
    }
    let out_len = resampled_len(x.len(), from, to);
    let ratio = to as f64 / from as f64;
    let cutoff = ratio.min(1.0);
    let half_width = SINC_ZERO_CROSSINGS / cutoff;
    (0..out_len)
        .map(|j| {
            let t = j as f64 / ratio;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(x.len() - 1);
            let mut acc = 0.0f64;
            for (k, &xk) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - k as f64;
                let arg = d * cutoff;
                let sinc = if arg.abs() < 1e-12 {
                    1.0
                } else {
                    (std::f64::consts::PI * arg).sin() / (std::f64::consts::PI * arg)
                };
                let w = 0.5 + 0.5 * (std::f64::consts::PI * d / half_width).cos();
                acc += xk as f64 * cutoff * sinc * w;
            }
            acc as f32
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
}

impl WindowKind {
    pub fn coefficients(self, len: usize) -> Vec<f32> {
        match self {
            // periodic Hann
            WindowKind::Hann => (0..len)
                .map(|n| {
                    let p = 2.0 * std::f64::consts::PI * n as f64 / len as f64;
                    (0.5 - 0.5 * p.cos()) as f32
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub win_length: usize,
    pub n_mels: usize,
    pub fmin: f32,
    pub fmax: f32,
    pub window: WindowKind,
    pub log_floor: f32,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: REFERENCE_SAMPLE_RATE,
            n_fft: 1024,
            hop: FRAME_HOP,
            win_length: 1024,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            window: WindowKind::Hann,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels < PROSODY_BINS {
            return Err(Error::Config(format!(
                "n_mels = {} but the prosody slice needs at least {PROSODY_BINS}",
                self.n_mels
            )));
        }
        if self.hop == 0 || FRAME_HOP % self.hop != 0 {
            return Err(Error::Config(format!("hop {} must divide {FRAME_HOP}", self.hop)));
        }
        if self.win_length > self.n_fft || self.win_length == 0 {
            return Err(Error::Config("win_length must be in 1..=n_fft".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        if !(self.fmax > self.fmin) || self.fmax > self.sample_rate as f32 / 2.0 + 1e-3 {
            return Err(Error::Config("need fmin < fmax <= Nyquist".into()));
        }
        Ok(())
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// Canonical frame count: `ceil(len / hop)`.
    pub fn num_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank, `n_mels × (n_fft/2 + 1)` row-major.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize, fmin: f32, fmax: f32) -> Vec<f32> {
    let n_bins = n_fft / 2 + 1;
    let mel_lo = hz_to_mel(fmin as f64);
    let mel_hi = hz_to_mel(fmax as f64);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut fb = vec![0.0f32; n_mels * n_bins];
    for m in 0..n_mels {
        let (l, c, r) = (points[m], points[m + 1], points[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb[m * n_bins + b] = w as f32;
        }
    }
    fb
}

/// Index into `x` under reflect padding, valid for any offset.
fn reflect_index(i: isize, len: usize) -> usize {
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

/// Magnitude STFT with centered reflect padding, returning `frames × bins`.
struct MagnitudeStft {
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    n_fft: usize,
    hop: usize,
}

impl MagnitudeStft {
    fn new(n_fft: usize, win_length: usize, hop: usize, window: WindowKind) -> Self {
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n_fft);
        let mut w = vec![0.0f32; n_fft];
        let offset = (n_fft - win_length) / 2;
        w[offset..offset + win_length].copy_from_slice(&window.coefficients(win_length));
        Self { fft, window: w, n_fft, hop }
    }

    fn frame_spectrum(&self, x: &[f32], frame: usize, buf: &mut [Complex32]) {
        let start = (frame * self.hop) as isize - (self.n_fft / 2) as isize;
        for (n, b) in buf.iter_mut().enumerate() {
            let v = x[reflect_index(start + n as isize, x.len())];
            *b = Complex32::new(v * self.window[n], 0.0);
        }
        self.fft.process(buf);
    }
}

/// Log-mel spectrogram, `n_frames × n_bins` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Vec<f32>,
    pub n_frames: usize,
    pub n_bins: usize,
    pub frame_rate: f64,
    pub config: MelConfig,
}

impl MelSpectrogram {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.n_bins..(t + 1) * self.n_bins]
    }

    pub fn column(&self, b: usize) -> Vec<f32> {
        (0..self.n_frames).map(|t| self.values[t * self.n_bins + b]).collect()
    }

    /// Concatenates along time.
    pub fn concat(&self, other: &MelSpectrogram) -> Result<MelSpectrogram> {
        if self.n_bins != other.n_bins {
            return Err(Error::Config("bin count mismatch".into()));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Ok(MelSpectrogram { values, n_frames: self.n_frames + other.n_frames, ..self.clone() })
    }
}

/// Log-mel spectrogram with exactly `ceil(len / hop)` frames.
pub fn compute_mel(audio: &AudioBuffer, cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if audio.is_empty() {
        return Err(Error::EmptyInput("cannot compute a mel spectrogram of empty audio".into()));
    }
    let stft = MagnitudeStft::new(cfg.n_fft, cfg.win_length, cfg.hop, cfg.window);
    let n_bins = cfg.n_fft / 2 + 1;
    let fb = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax);
    let n_frames = cfg.num_frames(audio.len());
    let floor_log = cfg.log_floor.ln();
    let mut values = vec![floor_log; n_frames * cfg.n_mels];
    let mut buf = vec![Complex32::new(0.0, 0.0); cfg.n_fft];
    let mut mag = vec![0.0f32; n_bins];
    for t in 0..n_frames {
        stft.frame_spectrum(&audio.samples, t, &mut buf);
        for (m, b) in mag.iter_mut().zip(&buf) {
            *m = b.norm();
        }
        let row = &mut values[t * cfg.n_mels..(t + 1) * cfg.n_mels];
        for (mi, out) in row.iter_mut().enumerate() {
            let filt = &fb[mi * n_bins..(mi + 1) * n_bins];
            let e: f32 = filt.iter().zip(&mag).map(|(w, m)| w * m).sum();
            *out = e.max(cfg.log_floor).ln();
        }
    }
    Ok(MelSpectrogram { values, n_frames, n_bins: cfg.n_mels, frame_rate: cfg.frame_rate(), config: cfg.clone() })
}

/// [`compute_mel`] over a batch of utterances.
pub fn compute_mel_batch(audio: &[AudioBuffer], cfg: &MelConfig, exec: Exec) -> Result<Vec<MelSpectrogram>> {
    par::map_slice(audio, exec, |a| compute_mel(a, cfg)).into_iter().collect()
}

/// The low `PROSODY_BINS` bins of every frame.
pub fn prosody_slice(mel: &MelSpectrogram) -> Result<MelSpectrogram> {
    if mel.n_bins < PROSODY_BINS {
        return Err(Error::Config(format!("prosody slice needs {PROSODY_BINS} bins, got {}", mel.n_bins)));
    }
    let values = (0..mel.n_frames).flat_map(|t| mel.frame(t)[..PROSODY_BINS].iter().copied()).collect();
    Ok(MelSpectrogram { values, n_bins: PROSODY_BINS, ..mel.clone() })
}

/// Linearly resamples `src` to `m` points (endpoints aligned), then pads with
/// the edge value or truncates to `src.len()`.
fn resize_row(src: &[f32], m: usize, out: &mut [f32]) {
    let n = src.len();
    let scale = if m > 1 { (n - 1) as f64 / (m - 1) as f64 } else { 0.0 };
    let mut last = src[0];
    for (j, o) in out.iter_mut().enumerate() {
        if j < m {
            let p = j as f64 * scale;
            let i0 = (p.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let frac = (p - i0 as f64) as f32;
            last = src[i0] + (src[i1] - src[i0]) * frac;
            *o = last;
        } else {
            *o = last;
        }
    }
}

fn resized_len(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio).round() as usize).max(1)
}

/// Spectrogram-resize augmentation along the frequency axis.
pub fn sr_augment(mel: &MelSpectrogram, ratio: f64) -> Result<MelSpectrogram> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::Parameter(format!("resize ratio must be positive, got {ratio}")));
    }
    if ratio == 1.0 {
        return Ok(mel.clone());
    }
    let m = resized_len(mel.n_bins, ratio);
    let mut values = vec![0.0f32; mel.values.len()];
    for t in 0..mel.n_frames {
        resize_row(mel.frame(t), m, &mut values[t * mel.n_bins..(t + 1) * mel.n_bins]);
    }
    Ok(MelSpectrogram { values, ..mel.clone() })
}

/// Waveform counterpart of [`sr_augment`]: the linear-frequency STFT
/// magnitude is resized per frame, recombined with the original phase and
/// resynthesized by weighted overlap-add. Length is preserved.
pub fn sr_augment_wave(audio: &AudioBuffer, ratio: f64) -> Result<AudioBuffer> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::Parameter(format!("resize ratio must be positive, got {ratio}")));
    }
    if audio.is_empty() {
        return Err(Error::EmptyInput("cannot augment empty audio".into()));
    }
    if ratio == 1.0 {
        return Ok(audio.clone());
    }
    const N_FFT: usize = 1024;
    const HOP: usize = 256;
    let stft = MagnitudeStft::new(N_FFT, N_FFT, HOP, WindowKind::Hann);
    let ifft = FftPlanner::<f32>::new().plan_fft_inverse(N_FFT);
    let n_bins = N_FFT / 2 + 1;
    let m = resized_len(n_bins, ratio);
    let len = audio.len();
    let n_frames = len / HOP + 1;
    let pad = N_FFT / 2;
    let mut out = vec![0.0f32; len + 2 * pad];
    let mut norm = vec![0.0f32; len + 2 * pad];
    let mut buf = vec![Complex32::new(0.0, 0.0); N_FFT];
    let mut mag = vec![0.0f32; n_bins];
    let mut warped = vec![0.0f32; n_bins];
    for t in 0..n_frames {
        stft.frame_spectrum(&audio.samples, t, &mut buf);
        for (m, b) in mag.iter_mut().zip(&buf) {
            *m = b.norm();
        }
        resize_row(&mag, m, &mut warped);
        for k in 0..n_bins {
            let phase = buf[k].arg();
            buf[k] = Complex32::from_polar(warped[k], phase);
        }
        for k in 1..N_FFT / 2 {
            buf[N_FFT - k] = buf[k].conj();
        }
        ifft.process(&mut buf);
        let start = t * HOP;
        for n in 0..N_FFT {
            let w = stft.window[n];
            out[start + n] += buf[n].re / N_FFT as f32 * w;
            norm[start + n] += w * w;
        }
    }
    let samples = (pad..pad + len).map(|i| if norm[i] > 1e-8 { out[i] / norm[i] } else { 0.0 }).collect();
    AudioBuffer::new(samples, audio.sample_rate)
}
