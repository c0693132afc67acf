//! Dataset manifests, in-memory training corpora and a seeded synthetic
//! speech-like corpus.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::audio::{load_audio, write_wav, AudioBuffer, FRAME_HOP, PEAK_LEVEL, REFERENCE_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::teacher::{SemanticTarget, SemanticTeacher};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub duration: f64,
    pub speaker: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub segment_seconds: f64,
    /// Files passed over during the scan (undecodable or too short).
    #[serde(default)]
    pub skipped: usize,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_slice(&fs::read(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Loads a JSON manifest, or scans `path` when it is a directory.
    pub fn open(path: &Path, segment_seconds: f64) -> Result<Self> {
        if path.is_dir() {
            build_manifest_with(path, segment_seconds)
        } else if path.is_file() {
            Self::load(path)
        } else {
            Err(Error::Path(format!("{} does not exist", path.display())))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::EmptyDataset("manifest has no entries".into()));
        }
        for e in &self.entries {
            if !e.path.is_file() {
                return Err(Error::Path(format!("{} does not exist", e.path.display())));
            }
            if e.duration + 1e-9 < self.segment_seconds {
                return Err(Error::Config(format!("{} is shorter than the {} s segment", e.path.display(), self.segment_seconds)));
            }
        }
        Ok(())
    }
}

pub fn build_manifest(root: &Path) -> Result<DatasetManifest> {
    build_manifest_with(root, 1.0)
}

/// Recursive scan for decodable WAV files at least `segment_seconds` long,
/// sorted by path. The speaker id is the parent directory relative to `root`.
pub fn build_manifest_with(root: &Path, segment_seconds: f64) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Path(format!("{} is not a directory", root.display())));
    }
    let mut entries = Vec::new();
    let mut skipped = 0;
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io(std::io::Error::other(e)))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        let duration = match hound::WavReader::open(path) {
            Ok(r) => {
                let spec = r.spec();
                r.duration() as f64 / spec.sample_rate as f64
            }
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        if duration + 1e-9 < segment_seconds {
            skipped += 1;
            continue;
        }
        let speaker = path
            .parent()
            .and_then(|p| p.strip_prefix(root).ok())
            .filter(|p| !p.as_os_str().is_empty())
            .map(|p| p.to_string_lossy().into_owned());
        entries.push(ManifestEntry { path: path.to_path_buf(), duration, speaker });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    if skipped > 0 {
        log::warn!("skipped {skipped} file(s) under {} that are not decodable audio or are too short", root.display());
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset(format!("no usable audio under {}", root.display())));
    }
    Ok(DatasetManifest { entries, segment_seconds, skipped })
}

pub struct Clip {
    pub audio: AudioBuffer,
    pub path: PathBuf,
    pub target: SemanticTarget,
}

/// Peak-normalized clips with their whole-utterance teacher targets.
pub struct Dataset {
    pub clips: Vec<Clip>,
    pub segment_samples: usize,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest, teacher: &dyn SemanticTeacher) -> Result<Self> {
        manifest.validate()?;
        let segment_samples = ((manifest.segment_seconds * REFERENCE_SAMPLE_RATE as f64).round() as usize).div_ceil(FRAME_HOP) * FRAME_HOP;
        let mut clips = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let mut audio = load_audio(&e.path, REFERENCE_SAMPLE_RATE)?;
            audio.peak_normalize(PEAK_LEVEL);
            if audio.len() < segment_samples {
                audio.samples.resize(segment_samples, 0.0);
            }
            let target = teacher.target(&audio, Some(&e.path))?;
            clips.push(Clip { audio, path: e.path.clone(), target });
        }
        Ok(Self { clips, segment_samples })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Frame-aligned crop of clip `i` starting at content frame `frame`,
    /// with the matching teacher frames (the last frame repeats if short).
    pub fn segment(&self, i: usize, frame: usize) -> (AudioBuffer, Vec<f32>) {
        let clip = &self.clips[i];
        let start = frame * FRAME_HOP;
        let audio = AudioBuffer { samples: clip.audio.samples[start..start + self.segment_samples].to_vec(), sample_rate: clip.audio.sample_rate };
        let t = self.segment_samples / FRAME_HOP;
        let tg = &clip.target;
        let mut target = Vec::with_capacity(t * tg.dim);
        for f in frame..frame + t {
            let src = f.min(tg.n_frames.saturating_sub(1));
            target.extend_from_slice(&tg.values[src * tg.dim..(src + 1) * tg.dim]);
        }
        (audio, target)
    }

    /// Number of valid crop start frames for clip `i`.
    pub fn crop_positions(&self, i: usize) -> usize {
        (self.clips[i].audio.len() - self.segment_samples) / FRAME_HOP + 1
    }
}

/// A speech-like test signal: a gliding harmonic tone with a per-voice spectral
/// tilt and formant, amplitude modulation and additive noise, peaking at 0.7.
pub fn synthetic_clip(seed: u64, index: usize, num_samples: usize, speaker: usize) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let sr = REFERENCE_SAMPLE_RATE as f64;
    let base_f0 = [105.0, 140.0, 185.0, 225.0, 260.0][speaker % 5];
    let tilt: f64 = [0.55, 0.7, 0.8, 0.65, 0.9][speaker % 5];
    let formant = [700.0, 1100.0, 1500.0, 900.0, 1900.0][speaker % 5];
    let f0 = base_f0 * rng.gen_range(0.9..1.1);
    let glide = rng.gen_range(-0.25..0.25);
    let syll = rng.gen_range(2.5..5.0);
    let harmonics = rng.gen_range(4..9);
    let noise = rng.gen_range(0.01..0.04);
    let mut phase = 0.0f64;
    let samples: Vec<f32> = (0..num_samples)
        .map(|n| {
            let t = n as f64 / sr;
            let f = f0 * (1.0 + glide * t / (num_samples as f64 / sr)) * (1.0 + 0.02 * (2.0 * std::f64::consts::PI * 5.0 * t).sin());
            phase += 2.0 * std::f64::consts::PI * f / sr;
            let mut s = 0.0f64;
            for h in 1..=harmonics {
                let fh = f * h as f64;
                if fh >= sr / 2.0 {
                    break;
                }
                let boost = 1.0 + 2.0 * (-((fh - formant) / 300.0).powi(2)).exp();
                s += tilt.powi(h as i32 - 1) * boost * (phase * h as f64).sin();
            }
            let env = 0.55 + 0.45 * (2.0 * std::f64::consts::PI * syll * t).sin();
            (0.25 * env * s + noise * rng.gen_range(-1.0..1.0)) as f32
        })
        .collect();
    let mut audio = AudioBuffer { samples, sample_rate: REFERENCE_SAMPLE_RATE };
    audio.peak_normalize(0.7);
    audio
}

/// Writes `n` synthetic clips as `spk<k>/clip<i>.wav` under `dir`.
pub fn write_synthetic_corpus(dir: &Path, n: usize, seconds: f64, seed: u64) -> Result<Vec<PathBuf>> {
    let len = (seconds * REFERENCE_SAMPLE_RATE as f64).round() as usize;
    let mut paths = Vec::with_capacity(n);
    for i in 0..n {
        let speaker = i % 5;
        let sub = dir.join(format!("spk{speaker}"));
        fs::create_dir_all(&sub)?;
        let path = sub.join(format!("clip{i:04}.wav"));
        write_wav(&path, &synthetic_clip(seed, i, len, speaker))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::DeskStubTeacher;

    #[test]
    fn manifest_scan_is_sorted_recursive_and_counts_skips() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("b/nested")).unwrap();
        let clip = synthetic_clip(0, 0, 16_000, 0);
        for p in ["b/nested/z.wav", "a.wav", "b/c.wav"] {
            write_wav(&dir.path().join(p), &clip).unwrap();
        }
        fs::write(dir.path().join("notes.txt"), "hello").unwrap();
        write_wav(&dir.path().join("short.wav"), &synthetic_clip(0, 1, 800, 0)).unwrap();
        let m = build_manifest(dir.path()).unwrap();
        let names: Vec<_> = m.entries.iter().map(|e| e.path.strip_prefix(dir.path()).unwrap().to_path_buf()).collect();
        assert_eq!(names, [PathBuf::from("a.wav"), PathBuf::from("b/c.wav"), PathBuf::from("b/nested/z.wav")]);
        assert_eq!(m.skipped, 2);
        assert_eq!(m.entries[2].speaker.as_deref(), Some("b/nested"));
        assert_eq!(m.entries[0].speaker, None);
        assert!((m.entries[0].duration - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(build_manifest(dir.path()), Err(Error::EmptyDataset(_))));
        assert!(matches!(build_manifest(&dir.path().join("missing")), Err(Error::Path(_))));
    }

    #[test]
    fn segments_align_with_teacher_frames() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_corpus(dir.path(), 2, 1.5, 3).unwrap();
        let m = build_manifest(dir.path()).unwrap();
        let teacher = DeskStubTeacher::new(16, 0).unwrap();
        let ds = Dataset::load(&m, &teacher).unwrap();
        assert_eq!(ds.segment_samples, 16_000);
        assert_eq!(ds.crop_positions(0), 26);
        let (audio, target) = ds.segment(0, 25);
        assert_eq!(audio.len(), 16_000);
        assert_eq!(target.len(), 50 * 16);
        let tg = &ds.clips[0].target;
        assert_eq!(&target[..16], &tg.values[25 * 16..26 * 16]);
        let peak = ds.clips[0].audio.samples.iter().fold(0.0f32, |m, x| m.max(x.abs()));
        assert!((peak - PEAK_LEVEL).abs() < 1e-6);
    }

    #[test]
    fn synthetic_clips_are_seeded() {
        assert_eq!(synthetic_clip(1, 3, 1000, 2), synthetic_clip(1, 3, 1000, 2));
        assert_ne!(synthetic_clip(1, 3, 1000, 2), synthetic_clip(1, 4, 1000, 2));
        assert!(synthetic_clip(1, 3, 16_000, 4).samples.iter().all(|v| v.abs() < 1.0));
    }
}
