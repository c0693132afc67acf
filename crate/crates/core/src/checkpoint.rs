//! Checkpoint archive: magic `FRCK`, a little-endian `u32` manifest length,
//! a JSON manifest, then every tensor as little-endian `f32` in manifest
//! order. Writes go to a temporary file that is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Codec;
use crate::quant::Codebook;
use crate::train::{TrainConfig, Trainer};

pub const ARCHIVE_MAGIC: [u8; 4] = *b"FRCK";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the blob section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookMeta {
    pub k: usize,
    pub dim: usize,
    pub initialized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub step: u64,
    pub config: TrainConfig,
    pub gen_opt_t: u64,
    pub disc_opt_t: u64,
    pub codebooks: BTreeMap<String, CodebookMeta>,
    pub tensors: Vec<TensorEntry>,
}

pub struct Archive {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

type Blobs = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

fn tensor_blob(t: &Tensor) -> Result<(Vec<usize>, Vec<f32>)> {
    Ok((t.dims().to_vec(), t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?))
}

fn put_vars(blobs: &mut Blobs, prefix: &str, vars: &[(String, Var)]) -> Result<()> {
    for (name, v) in vars {
        blobs.insert(format!("{prefix}/{name}"), tensor_blob(v.as_tensor())?);
    }
    Ok(())
}

fn put_map(blobs: &mut Blobs, prefix: &str, map: &BTreeMap<String, Tensor>) -> Result<()> {
    for (name, t) in map {
        blobs.insert(format!("{prefix}/{name}"), tensor_blob(t)?);
    }
    Ok(())
}

fn put_codebook(blobs: &mut Blobs, metas: &mut BTreeMap<String, CodebookMeta>, name: &str, cb: &Codebook) {
    let (k, d) = (cb.k, cb.dim);
    blobs.insert(format!("cb/{name}/entries"), (vec![k, d], cb.entries.clone()));
    blobs.insert(format!("cb/{name}/embed_avg"), (vec![k, d], cb.embed_avg.clone()));
    blobs.insert(format!("cb/{name}/cluster_size"), (vec![k], cb.cluster_size.clone()));
    blobs.insert(format!("cb/{name}/usage_ema"), (vec![k], cb.usage_ema.clone()));
    metas.insert(name.to_string(), CodebookMeta { k, dim: d, initialized: cb.initialized });
}

fn codebooks(codec: &Codec) -> Vec<(String, &Codebook)> {
    let mut out = vec![("content".to_string(), &codec.content_codebook), ("prosody".to_string(), &codec.prosody_codebook)];
    if let Some(g) = &codec.speaker_gvq {
        out.extend(g.groups.iter().enumerate().map(|(i, cb)| (format!("speaker{i}"), cb)));
    }
    out
}

pub fn encode_archive(manifest_base: Manifest, blobs: &Blobs) -> Result<Vec<u8>> {
    let mut manifest = manifest_base;
    manifest.tensors.clear();
    let mut offset = 0;
    for (name, (shape, data)) in blobs {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Checkpoint(format!("tensor {name} has {} values for shape {shape:?}", data.len())));
        }
        manifest.tensors.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset });
        offset += data.len();
    }
    let json = serde_json::to_vec(&manifest)?;
    let mut bytes = Vec::with_capacity(8 + json.len() + offset * 4);
    bytes.extend_from_slice(&ARCHIVE_MAGIC);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, data) in blobs.values() {
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn decode_archive(bytes: &[u8]) -> Result<Archive> {
    let bad = |why: String| Error::Checkpoint(why);
    if bytes.len() < 8 || bytes[..4] != ARCHIVE_MAGIC {
        return Err(bad("not a checkpoint archive".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(8..8 + n).ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(format!("bad manifest: {e}")))?;
    if manifest.version != ARCHIVE_VERSION {
        return Err(bad(format!("unsupported archive version {}", manifest.version)));
    }
    let blob = &bytes[8 + n..];
    let mut tensors = BTreeMap::new();
    let mut expected = 0;
    for e in &manifest.tensors {
        let len: usize = e.shape.iter().product();
        if e.offset != expected {
            return Err(bad(format!("tensor {} is out of place", e.name)));
        }
        let raw = blob.get(e.offset * 4..(e.offset + len) * 4).ok_or_else(|| bad(format!("tensor {} is truncated", e.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.insert(e.name.clone(), (e.shape.clone(), data));
        expected += len;
    }
    if blob.len() != expected * 4 {
        return Err(bad("trailing bytes after the last tensor".into()));
    }
    Ok(Archive { manifest, tensors })
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode_archive(&bytes)
}

/// Writes `bytes` to `path` through a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn trainer_archive(t: &Trainer) -> Result<Vec<u8>> {
    let mut blobs = Blobs::new();
    let mut metas = BTreeMap::new();
    put_vars(&mut blobs, "gen", &t.codec.params.all())?;
    put_vars(&mut blobs, "disc", &t.disc_params.all())?;
    put_map(&mut blobs, "gen_opt/m", &t.gen_opt.m)?;
    put_map(&mut blobs, "gen_opt/v", &t.gen_opt.v)?;
    put_map(&mut blobs, "disc_opt/m", &t.disc_opt.m)?;
    put_map(&mut blobs, "disc_opt/v", &t.disc_opt.v)?;
    for (name, cb) in codebooks(&t.codec) {
        put_codebook(&mut blobs, &mut metas, &name, cb);
    }
    let manifest = Manifest {
        version: ARCHIVE_VERSION,
        step: t.step,
        config: t.cfg.clone(),
        gen_opt_t: t.gen_opt.t,
        disc_opt_t: t.disc_opt.t,
        codebooks: metas,
        tensors: Vec::new(),
    };
    encode_archive(manifest, &blobs)
}

pub fn save_trainer(t: &Trainer, path: &Path) -> Result<()> {
    write_atomic(path, &trainer_archive(t)?)
}

/// Generator and codebooks only; enough for [`load_codec`] but not for
/// resuming.
pub fn model_archive(t: &Trainer) -> Result<Vec<u8>> {
    let mut blobs = Blobs::new();
    let mut metas = BTreeMap::new();
    put_vars(&mut blobs, "gen", &t.codec.params.all())?;
    for (name, cb) in codebooks(&t.codec) {
        put_codebook(&mut blobs, &mut metas, &name, cb);
    }
    let manifest = Manifest {
        version: ARCHIVE_VERSION,
        step: t.step,
        config: t.cfg.clone(),
        gen_opt_t: 0,
        disc_opt_t: 0,
        codebooks: metas,
        tensors: Vec::new(),
    };
    encode_archive(manifest, &blobs)
}

pub fn save_model(t: &Trainer, path: &Path) -> Result<()> {
    write_atomic(path, &model_archive(t)?)
}

fn take(a: &Archive, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let (s, data) = a.tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
    if s != shape {
        return Err(Error::Checkpoint(format!("tensor {name} has shape {s:?}, expected {shape:?}")));
    }
    Ok(data.clone())
}

fn restore_vars(a: &Archive, prefix: &str, vars: &[(String, Var)]) -> Result<()> {
    let expected = a.tensors.keys().filter(|k| k.strip_prefix(prefix).is_some_and(|r| r.starts_with('/'))).count();
    if expected != vars.len() {
        return Err(Error::Checkpoint(format!("{prefix}: archive has {expected} tensors, model has {}", vars.len())));
    }
    for (name, v) in vars {
        let data = take(a, &format!("{prefix}/{name}"), v.dims())?;
        v.set(&Tensor::from_vec(data, v.dims(), &Device::Cpu)?.to_dtype(v.dtype())?)?;
    }
    Ok(())
}

fn restore_map(a: &Archive, prefix: &str, vars: &[(String, Var)]) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for (name, v) in vars {
        let data = take(a, &format!("{prefix}/{name}"), v.dims())?;
        out.insert(name.clone(), Tensor::from_vec(data, v.dims(), &Device::Cpu)?.to_dtype(v.dtype())?);
    }
    Ok(out)
}

fn restore_codebook(a: &Archive, name: &str, cb: &mut Codebook) -> Result<()> {
    let meta = a.manifest.codebooks.get(name).ok_or_else(|| Error::Checkpoint(format!("missing codebook {name}")))?;
    if (meta.k, meta.dim) != (cb.k, cb.dim) {
        return Err(Error::Checkpoint(format!("codebook {name} is {}×{}, model expects {}×{}", meta.k, meta.dim, cb.k, cb.dim)));
    }
    let (k, d) = (cb.k, cb.dim);
    cb.entries = take(a, &format!("cb/{name}/entries"), &[k, d])?;
    cb.embed_avg = take(a, &format!("cb/{name}/embed_avg"), &[k, d])?;
    cb.cluster_size = take(a, &format!("cb/{name}/cluster_size"), &[k])?;
    cb.usage_ema = take(a, &format!("cb/{name}/usage_ema"), &[k])?;
    cb.initialized = meta.initialized;
    Ok(())
}

fn restore_codec(a: &Archive, codec: &mut Codec) -> Result<()> {
    restore_vars(a, "gen", &codec.params.all())?;
    restore_codebook(a, "content", &mut codec.content_codebook)?;
    restore_codebook(a, "prosody", &mut codec.prosody_codebook)?;
    if let Some(g) = &mut codec.speaker_gvq {
        for (i, cb) in g.groups.iter_mut().enumerate() {
            restore_codebook(a, &format!("speaker{i}"), cb)?;
        }
    }
    Ok(())
}

pub fn load_trainer(path: &Path) -> Result<Trainer> {
    let a = read_archive(path)?;
    let mut t = Trainer::new(a.manifest.config.clone())?;
    restore_codec(&a, &mut t.codec)?;
    restore_vars(&a, "disc", &t.disc_params.all())?;
    let gm = restore_map(&a, "gen_opt/m", t.gen_opt.vars())?;
    let gv = restore_map(&a, "gen_opt/v", t.gen_opt.vars())?;
    t.gen_opt.load_state(gm, gv, a.manifest.gen_opt_t)?;
    let dm = restore_map(&a, "disc_opt/m", t.disc_opt.vars())?;
    let dv = restore_map(&a, "disc_opt/v", t.disc_opt.vars())?;
    t.disc_opt.load_state(dm, dv, a.manifest.disc_opt_t)?;
    t.step = a.manifest.step;
    Ok(t)
}

/// The generator of a checkpoint, ready for inference.
pub fn load_codec(path: &Path) -> Result<Codec> {
    let a = read_archive(path)?;
    let mut codec = Codec::new(a.manifest.config.model.clone(), DType::F32)?;
    restore_codec(&a, &mut codec)?;
    if !codec.content_codebook.initialized || !codec.prosody_codebook.initialized {
        log::warn!("{} holds codebooks that were never trained", path.display());
    }
    Ok(codec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Scale;
    use crate::strategy::StrategyConfig;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(TrainConfig::new(Scale::Tiny, StrategyConfig::v2(), 3)).unwrap();
        t.step = 17;
        t.codec.content_codebook.entries[5] = 0.25;
        t.codec.content_codebook.initialized = true;
        let p1 = dir.path().join("a.ckpt");
        save_trainer(&t, &p1).unwrap();
        let back = load_trainer(&p1).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.codec.content_codebook, t.codec.content_codebook);
        let p2 = dir.path().join("b.ckpt");
        save_trainer(&back, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert!(!dir.path().join("a.ckpt.tmp").exists());
    }

    #[test]
    fn damaged_archives_are_rejected() {
        let t = Trainer::new(TrainConfig::new(Scale::Tiny, StrategyConfig::v1(), 3)).unwrap();
        let bytes = trainer_archive(&t).unwrap();
        assert!(decode_archive(&bytes).is_ok());
        assert!(matches!(decode_archive(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        assert!(matches!(decode_archive(b"nope"), Err(Error::Checkpoint(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_archive(&extra), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn codec_loads_from_a_trainer_archive() {
        let dir = tempfile::tempdir().unwrap();
        let t = Trainer::new(TrainConfig::new(Scale::Tiny, StrategyConfig::v3(), 4)).unwrap();
        let p = dir.path().join("c.ckpt");
        save_trainer(&t, &p).unwrap();
        let codec = load_codec(&p).unwrap();
        assert_eq!(codec.codebook_hash(), t.codec.codebook_hash());
        let name = "decoder.synth.conv_out.v";
        let a = codec.params.var(name).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = t.codec.params.var(name).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_archive_loads_for_inference_only() {
        let dir = tempfile::tempdir().unwrap();
        let t = Trainer::new(TrainConfig::new(Scale::Tiny, StrategyConfig::v2(), 4)).unwrap();
        let p = dir.path().join("m.ckpt");
        save_model(&t, &p).unwrap();
        assert!(fs::metadata(&p).unwrap().len() < trainer_archive(&t).unwrap().len() as u64);
        assert_eq!(load_codec(&p).unwrap().codebook_hash(), t.codec.codebook_hash());
        assert!(matches!(load_trainer(&p), Err(Error::Checkpoint(_))));
    }
}
