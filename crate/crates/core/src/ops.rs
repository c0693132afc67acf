//! File-level operations behind the command-line tools.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use candle::{DType, Tensor};

use crate::audio::{load_audio, write_wav, AudioBuffer};
use crate::bitstream::{self, rate_report, RateReport, SpeakerPayload, TokenStream};
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::model::Codec;

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Path(format!("{} does not exist", path.display())))
    }
}

fn read_input(codec: &Codec, path: &Path) -> Result<AudioBuffer> {
    require_file(path)?;
    load_audio(path, codec.cfg.mel.sample_rate)
}

/// Encodes a WAV file into a `.frc` stream.
pub fn encode_file(codec: &Codec, input: &Path, output: &Path) -> Result<RateReport> {
    let ts = codec.encode(&read_input(codec, input)?)?;
    fs::write(output, bitstream::pack(&ts)?)?;
    Ok(rate_report(&ts))
}

pub fn read_stream(codec: &Codec, path: &Path) -> Result<TokenStream> {
    require_file(path)?;
    bitstream::unpack_for_model(&fs::read(path)?, codec.codebook_hash())
}

/// Decodes a `.frc` stream to a WAV file of the original length.
pub fn decode_file(codec: &Codec, input: &Path, output: &Path) -> Result<AudioBuffer> {
    let audio = codec.decode(&read_stream(codec, input)?)?;
    write_wav(output, &audio)?;
    Ok(audio)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvertSpeaker {
    /// The target's continuous embedding; needs a continuous speaker path.
    #[default]
    Continuous,
    /// The target's group-quantizer indices, for quantized-speaker models.
    TargetIndices,
}

/// Content and prosody of `source` voiced with the speaker of `target`.
pub fn convert(codec: &Codec, source: &AudioBuffer, target: &AudioBuffer, mode: ConvertSpeaker) -> Result<(TokenStream, AudioBuffer)> {
    let quantized = codec.speaker_gvq.is_some();
    match (mode, quantized) {
        (ConvertSpeaker::Continuous, true) => {
            return Err(Error::Strategy("this model quantizes speakers; pass the target-indices option to convert with them".into()))
        }
        (ConvertSpeaker::TargetIndices, false) => return Err(Error::Strategy("this model has no speaker quantizer".into())),
        _ => {}
    }
    let payload = codec.speaker_payload(&codec.speaker_embedding(target)?)?;
    let ts = codec.encode_tokens(&codec.analyze(source)?, Some(payload))?;
    let out = codec.decode(&ts)?;
    Ok((ts, out))
}

pub fn convert_files(codec: &Codec, source: &Path, target: &Path, output: &Path, mode: ConvertSpeaker) -> Result<TokenStream> {
    let src = read_input(codec, source)?;
    let tgt = read_input(codec, target)?;
    let (ts, out) = convert(codec, &src, &tgt, mode)?;
    write_wav(output, &out)?;
    Ok(ts)
}

/// Human-readable description of a stream; no model needed.
pub fn inspect_bytes(bytes: &[u8]) -> Result<String> {
    let ts = bitstream::unpack(bytes)?;
    let h = &ts.header;
    let mut s = String::new();
    let _ = writeln!(s, "format: FRCD v{}", h.version);
    let _ = writeln!(s, "strategy: {}", h.strategy);
    let _ = writeln!(s, "sample rate: {} Hz", h.sample_rate);
    let _ = writeln!(s, "samples: {}", h.num_samples);
    let _ = writeln!(s, "codebook hash: {:016x}", h.codebook_hash);
    let _ = writeln!(s, "content tokens: {}", ts.content_tokens.len());
    let _ = writeln!(s, "prosody tokens: {}", ts.prosody_tokens.len());
    let _ = match &ts.speaker {
        SpeakerPayload::Indices(v) => writeln!(s, "speaker: {} speaker indices ({} bits each)", v.len(), bitstream::SPEAKER_INDEX_BITS),
        SpeakerPayload::Continuous(v) => writeln!(s, "speaker: continuous speaker, {} × float16", v.len()),
    };
    let _ = write!(s, "{}", rate_report(&ts));
    Ok(s)
}

pub fn inspect_file(path: &Path) -> Result<String> {
    require_file(path)?;
    inspect_bytes(&fs::read(path)?)
}

fn mean_rows(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.squeeze(0)?.mean(0)?.to_vec1()?)
}

/// One row per utterance: id, speaker embedding, then time-averaged content
/// and prosody latents.
pub fn embedding_rows(codec: &Codec, manifest: &DatasetManifest) -> Result<Vec<(String, Vec<f32>)>> {
    if manifest.entries.is_empty() {
        return Err(Error::EmptyDataset("manifest has no entries".into()));
    }
    manifest
        .entries
        .iter()
        .map(|e| {
            let a = codec.analyze(&read_input(codec, &e.path)?)?;
            let mut row = a.speaker.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            row.extend(mean_rows(&a.content)?);
            row.extend(mean_rows(&a.prosody)?);
            Ok((e.path.display().to_string(), row))
        })
        .collect()
}

pub fn embedding_header(codec: &Codec) -> Vec<String> {
    let d = codec.cfg.encoder.latent_dim;
    let mut h = vec!["id".to_string()];
    h.extend((0..bitstream::SPEAKER_DIM).map(|i| format!("speaker_{i}")));
    h.extend((0..d).map(|i| format!("content_{i}")));
    h.extend((0..d).map(|i| format!("prosody_{i}")));
    h
}

/// Writes the embedding table as CSV; returns the row count.
pub fn export_embeddings(codec: &Codec, manifest: &DatasetManifest, output: &Path) -> Result<usize> {
    let rows = embedding_rows(codec, manifest)?;
    let mut w = csv::Writer::from_path(output).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(embedding_header(codec)).map_err(csv_err)?;
    for (id, values) in &rows {
        let mut rec = vec![id.clone()];
        rec.extend(values.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(rows.len())
}
