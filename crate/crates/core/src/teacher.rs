//! Frame-level targets for the content loss.
//!
//! The desk stub is a fixed random projection of four frames of mel
//! context: deterministic, cheap and non-semantic. The external teacher
//! reads precomputed features from sidecar files next to the audio.
//!
//! Sidecar format (`<audio file name>.feat`, little-endian): magic `TFEA`,
//! `u32` frame count, `u32` feature dim, then `frames × dim` `f32` values.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{compute_mel, AudioBuffer, MelConfig, FRAME_HOP};
use crate::error::{Error, Result};

pub const STUB_CONTEXT: usize = 4;
pub const SIDECAR_MAGIC: [u8; 4] = *b"TFEA";
pub const SIDECAR_EXT: &str = "feat";

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTarget {
    pub values: Vec<f32>,
    pub n_frames: usize,
    pub dim: usize,
    pub frame_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TeacherKind {
    DeskStub,
    /// Sidecar features, looked up next to the audio or inside `dir`.
    External { dir: Option<PathBuf> },
}

pub trait SemanticTeacher: Send + Sync {
    /// Target for `audio`; `source` is the file it came from, if any.
    fn target(&self, audio: &AudioBuffer, source: Option<&Path>) -> Result<SemanticTarget>;
    fn dim(&self) -> usize;
}

pub fn make_teacher(kind: &TeacherKind, dim: usize, seed: u64) -> Result<Box<dyn SemanticTeacher>> {
    Ok(match kind {
        TeacherKind::DeskStub => Box::new(DeskStubTeacher::new(dim, seed)?),
        TeacherKind::External { dir } => Box::new(ExternalTeacher { dir: dir.clone(), dim }),
    })
}

pub struct DeskStubTeacher {
    /// `dim × (STUB_CONTEXT · n_mels)`.
    proj: Vec<f32>,
    dim: usize,
    mel: MelConfig,
}

impl DeskStubTeacher {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("teacher dim must be positive".into()));
        }
        let mel = MelConfig::default();
        let width = STUB_CONTEXT * mel.n_mels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7EAC_4E55);
        let std = 1.0 / (width as f64).sqrt();
        let proj = (0..dim * width)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                (std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
            })
            .collect();
        Ok(Self { proj, dim, mel })
    }
}

impl SemanticTeacher for DeskStubTeacher {
    fn target(&self, audio: &AudioBuffer, _source: Option<&Path>) -> Result<SemanticTarget> {
        let mel = compute_mel(&audio.padded_to_multiple(FRAME_HOP), &self.mel)?;
        let (t, c) = (mel.n_frames, mel.n_bins);
        let width = STUB_CONTEXT * c;
        let mut values = vec![0.0f32; t * self.dim];
        let mut ctx = vec![0.0f32; width];
        for f in 0..t {
            for k in 0..STUB_CONTEXT {
                let src = f.saturating_sub(STUB_CONTEXT - 1 - k);
                ctx[k * c..(k + 1) * c].copy_from_slice(mel.frame(src));
            }
            for d in 0..self.dim {
                let w = &self.proj[d * width..(d + 1) * width];
                values[f * self.dim + d] = w.iter().zip(&ctx).map(|(a, b)| a * b).sum();
            }
        }
        Ok(SemanticTarget { values, n_frames: t, dim: self.dim, frame_rate: mel.frame_rate })
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

pub struct ExternalTeacher {
    dir: Option<PathBuf>,
    dim: usize,
}

pub fn sidecar_path(source: &Path, dir: Option<&Path>) -> PathBuf {
    let mut name = source.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(SIDECAR_EXT);
    match dir {
        Some(d) => d.join(name),
        None => source.with_file_name(name),
    }
}

pub fn write_sidecar(path: &Path, target: &SemanticTarget) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + target.values.len() * 4);
    bytes.extend_from_slice(&SIDECAR_MAGIC);
    bytes.extend_from_slice(&(target.n_frames as u32).to_le_bytes());
    bytes.extend_from_slice(&(target.dim as u32).to_le_bytes());
    for v in &target.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<SemanticTarget> {
    let bytes = fs::read(path).map_err(|e| Error::TeacherUnavailable(format!("{}: {e}", path.display())))?;
    let bad = |why: &str| Error::TeacherUnavailable(format!("{}: {why}", path.display()));
    if bytes.len() < 12 || bytes[..4] != SIDECAR_MAGIC {
        return Err(bad("not a feature sidecar"));
    }
    let n_frames = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 12 + n_frames * dim * 4 {
        return Err(bad("size does not match header"));
    }
    let values = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(SemanticTarget { values, n_frames, dim, frame_rate: 50.0 })
}

impl SemanticTeacher for ExternalTeacher {
    fn target(&self, _audio: &AudioBuffer, source: Option<&Path>) -> Result<SemanticTarget> {
        let source = source.ok_or_else(|| Error::TeacherUnavailable("external features need the source file path".into()))?;
        let path = sidecar_path(source, self.dir.as_deref());
        let t = read_sidecar(&path)?;
        if t.dim != self.dim {
            return Err(Error::TeacherUnavailable(format!("{} has dim {}, expected {}", path.display(), t.dim, self.dim)));
        }
        Ok(t)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}
