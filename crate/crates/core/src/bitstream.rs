//! `.frc` token streams.
//!
//! Layout (all integers big-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `FRCD` |
//! | 1 | version |
//! | 4 | sample rate (Hz) |
//! | 4 | original sample count |
//! | 1 | strategy tag (1, 2, 3) |
//! | 8 | codebook hash |
//!
//! The payload follows as one MSB-first bit string: 8-bit content tokens,
//! 8-bit prosody tokens, then either eight 10-bit speaker indices (tag 2) or
//! 192 IEEE half floats (tags 1 and 3), zero-padded to a whole byte.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::audio::FRAME_HOP;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FRCD";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 22;
pub const TOKEN_BITS: usize = 8;
pub const SPEAKER_INDEX_BITS: usize = 10;
pub const SPEAKER_GROUPS: usize = 8;
pub const SPEAKER_DIM: usize = 192;
pub const PROSODY_DOWNSAMPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyTag {
    V1 = 1,
    V2 = 2,
    V3 = 3,
}

impl StrategyTag {
    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(Self::V1),
            2 => Ok(Self::V2),
            3 => Ok(Self::V3),
            _ => Err(Error::Format(format!("unknown strategy tag {b}"))),
        }
    }

    pub fn uses_gvq(self) -> bool {
        self == Self::V2
    }
}

impl std::fmt::Display for StrategyTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "v{}", *self as u8)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpeakerPayload {
    /// Group-quantized speaker embedding.
    Indices(Vec<u16>),
    /// Continuous speaker embedding.
    Continuous(Vec<f16>),
}

impl SpeakerPayload {
    pub fn bits(&self) -> usize {
        match self {
            Self::Indices(v) => v.len() * SPEAKER_INDEX_BITS,
            Self::Continuous(v) => v.len() * 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub version: u8,
    pub sample_rate: u32,
    pub num_samples: u32,
    pub strategy: StrategyTag,
    pub codebook_hash: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    pub header: StreamHeader,
    pub content_tokens: Vec<u32>,
    pub prosody_tokens: Vec<u32>,
    pub speaker: SpeakerPayload,
}

pub fn content_frames(num_samples: usize) -> usize {
    num_samples.div_ceil(FRAME_HOP)
}

pub fn prosody_frames(content: usize) -> usize {
    content.div_ceil(PROSODY_DOWNSAMPLE)
}

impl TokenStream {
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.num_samples == 0 {
            return Err(Error::Encode("empty utterance".into()));
        }
        if h.sample_rate == 0 {
            return Err(Error::Encode("sample rate must be positive".into()));
        }
        let nc = content_frames(h.num_samples as usize);
        if self.content_tokens.len() != nc {
            return Err(Error::Encode(format!("{} content tokens for {} samples, expected {nc}", self.content_tokens.len(), h.num_samples)));
        }
        if self.prosody_tokens.len() != prosody_frames(nc) {
            return Err(Error::Encode(format!("{} prosody tokens, expected {}", self.prosody_tokens.len(), prosody_frames(nc))));
        }
        if let Some(t) = self.content_tokens.iter().chain(&self.prosody_tokens).find(|&&t| t >= 1 << TOKEN_BITS) {
            return Err(Error::Encode(format!("token {t} does not fit in {TOKEN_BITS} bits")));
        }
        match (&self.speaker, h.strategy.uses_gvq()) {
            (SpeakerPayload::Indices(v), true) => {
                if v.len() != SPEAKER_GROUPS {
                    return Err(Error::Encode(format!("expected {SPEAKER_GROUPS} speaker indices, got {}", v.len())));
                }
                if let Some(i) = v.iter().find(|&&i| i as usize >= 1 << SPEAKER_INDEX_BITS) {
                    return Err(Error::Encode(format!("speaker index {i} does not fit in {SPEAKER_INDEX_BITS} bits")));
                }
            }
            (SpeakerPayload::Continuous(v), false) => {
                if v.len() != SPEAKER_DIM {
                    return Err(Error::Encode(format!("expected {SPEAKER_DIM} speaker values, got {}", v.len())));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Encode("non-finite speaker value".into()));
                }
            }
            _ => return Err(Error::Encode(format!("speaker payload does not match strategy {}", h.strategy))),
        }
        Ok(())
    }

    pub fn payload_bits(&self) -> usize {
        TOKEN_BITS * (self.content_tokens.len() + self.prosody_tokens.len()) + self.speaker.bits()
    }
}

fn payload_bits_for(num_samples: usize, strategy: StrategyTag) -> usize {
    let nc = content_frames(num_samples);
    let speaker = if strategy.uses_gvq() { SPEAKER_GROUPS * SPEAKER_INDEX_BITS } else { SPEAKER_DIM * 16 };
    TOKEN_BITS * (nc + prosody_frames(nc)) + speaker
}

struct BitWriter {
    bytes: Vec<u8>,
    used: usize,
}

impl BitWriter {
    fn put(&mut self, value: u32, bits: usize) {
        for i in (0..bits).rev() {
            if self.used % 8 == 0 {
                self.bytes.push(0);
            }
            if (value >> i) & 1 == 1 {
                *self.bytes.last_mut().expect("pushed") |= 0x80 >> (self.used % 8);
            }
            self.used += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl BitReader<'_> {
    fn get(&mut self, bits: usize) -> Result<u32> {
        let mut v = 0u32;
        for _ in 0..bits {
            let byte = *self.bytes.get(self.pos / 8).ok_or_else(|| Error::CorruptStream("payload ends early".into()))?;
            v = (v << 1) | ((byte >> (7 - self.pos % 8)) & 1) as u32;
            self.pos += 1;
        }
        Ok(v)
    }
}

pub fn pack(ts: &TokenStream) -> Result<Vec<u8>> {
    ts.validate()?;
    let h = &ts.header;
    let mut out = Vec::with_capacity(HEADER_LEN + ts.payload_bits().div_ceil(8));
    out.extend_from_slice(&MAGIC);
    out.push(h.version);
    out.extend_from_slice(&h.sample_rate.to_be_bytes());
    out.extend_from_slice(&h.num_samples.to_be_bytes());
    out.push(h.strategy as u8);
    out.extend_from_slice(&h.codebook_hash.to_be_bytes());
    let mut w = BitWriter { bytes: out, used: HEADER_LEN * 8 };
    for &t in ts.content_tokens.iter().chain(&ts.prosody_tokens) {
        w.put(t, TOKEN_BITS);
    }
    match &ts.speaker {
        SpeakerPayload::Indices(v) => v.iter().for_each(|&i| w.put(i as u32, SPEAKER_INDEX_BITS)),
        SpeakerPayload::Continuous(v) => v.iter().for_each(|x| w.put(x.to_bits() as u32, 16)),
    }
    Ok(w.bytes)
}

/// Parses and checks the fixed header only.
pub fn read_header(bytes: &[u8]) -> Result<StreamHeader> {
    if bytes.len() < MAGIC.len() || bytes[..4] != MAGIC {
        return Err(Error::Format("not a token stream (bad magic)".into()));
    }
    if bytes.len() < 5 || bytes[4] != VERSION {
        return match bytes.get(4) {
            Some(v) => Err(Error::Format(format!("unsupported stream version {v}"))),
            None => Err(Error::CorruptStream("header ends early".into())),
        };
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::CorruptStream("header ends early".into()));
    }
    let u32_at = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let header = StreamHeader {
        version: bytes[4],
        sample_rate: u32_at(5),
        num_samples: u32_at(9),
        strategy: StrategyTag::from_byte(bytes[13])?,
        codebook_hash: u64::from_be_bytes(bytes[14..22].try_into().expect("8 bytes")),
    };
    if header.num_samples == 0 || header.sample_rate == 0 {
        return Err(Error::CorruptStream("zero sample count or sample rate".into()));
    }
    Ok(header)
}

pub fn unpack(bytes: &[u8]) -> Result<TokenStream> {
    let header = read_header(bytes)?;
    let n = header.num_samples as usize;
    let bits = payload_bits_for(n, header.strategy);
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != bits.div_ceil(8) {
        return Err(Error::CorruptStream(format!("payload is {} bytes, header implies {}", payload.len(), bits.div_ceil(8))));
    }
    let mut r = BitReader { bytes: payload, pos: 0 };
    let nc = content_frames(n);
    let content_tokens = (0..nc).map(|_| r.get(TOKEN_BITS)).collect::<Result<Vec<_>>>()?;
    let prosody_tokens = (0..prosody_frames(nc)).map(|_| r.get(TOKEN_BITS)).collect::<Result<Vec<_>>>()?;
    let speaker = if header.strategy.uses_gvq() {
        SpeakerPayload::Indices((0..SPEAKER_GROUPS).map(|_| Ok(r.get(SPEAKER_INDEX_BITS)? as u16)).collect::<Result<_>>()?)
    } else {
        let v = (0..SPEAKER_DIM).map(|_| Ok(f16::from_bits(r.get(16)? as u16))).collect::<Result<Vec<_>>>()?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::CorruptStream("non-finite speaker value".into()));
        }
        SpeakerPayload::Continuous(v)
    };
    if r.get(bits.div_ceil(8) * 8 - bits)? != 0 {
        return Err(Error::CorruptStream("nonzero padding bits".into()));
    }
    Ok(TokenStream { header, content_tokens, prosody_tokens, speaker })
}

/// [`unpack`], refusing streams produced with different codebooks.
pub fn unpack_for_model(bytes: &[u8], model_hash: u64) -> Result<TokenStream> {
    let ts = unpack(bytes)?;
    if ts.header.codebook_hash != model_hash {
        return Err(Error::ModelMismatch { stream: ts.header.codebook_hash, model: model_hash });
    }
    Ok(ts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub duration_secs: f64,
    pub content_tokens: usize,
    pub prosody_tokens: usize,
    pub tokens: usize,
    /// Token count over the padded duration.
    pub tokens_per_second: f64,
    /// Long-utterance limit: `50 + 50/8`.
    pub asymptotic_tokens_per_second: f64,
    pub frame_bits_per_second: f64,
    pub asymptotic_frame_bits_per_second: f64,
    pub speaker_bits: usize,
    pub header_bits: usize,
    pub total_bytes: usize,
}

pub fn rate_report(ts: &TokenStream) -> RateReport {
    let sr = ts.header.sample_rate as f64;
    let nc = ts.content_tokens.len();
    let np = ts.prosody_tokens.len();
    let duration = (nc * FRAME_HOP) as f64 / sr;
    let frame_rate = sr / FRAME_HOP as f64;
    let asym = frame_rate * (1.0 + 1.0 / PROSODY_DOWNSAMPLE as f64);
    RateReport {
        duration_secs: duration,
        content_tokens: nc,
        prosody_tokens: np,
        tokens: nc + np,
        tokens_per_second: (nc + np) as f64 / duration,
        asymptotic_tokens_per_second: asym,
        frame_bits_per_second: (TOKEN_BITS * (nc + np)) as f64 / duration,
        asymptotic_frame_bits_per_second: asym * TOKEN_BITS as f64,
        speaker_bits: ts.speaker.bits(),
        header_bits: HEADER_LEN * 8,
        total_bytes: HEADER_LEN + ts.payload_bits().div_ceil(8),
    }
}

fn num(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.2}")
    }
}

impl std::fmt::Display for RateReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "duration: {} s", num(self.duration_secs))?;
        writeln!(f, "tokens: {} ({} content + {} prosody)", self.tokens, self.content_tokens, self.prosody_tokens)?;
        writeln!(f, "rate: {} tokens/s (asymptotic {} tokens/s)", num(self.tokens_per_second), num(self.asymptotic_tokens_per_second))?;
        writeln!(
            f,
            "frame-level bitrate: {} bits/s (asymptotic {} bits/s = {} kbps)",
            num(self.frame_bits_per_second),
            num(self.asymptotic_frame_bits_per_second),
            num(self.asymptotic_frame_bits_per_second / 1000.0)
        )?;
        write!(f, "speaker payload: {} bits, header: {} bits, file: {} bytes", self.speaker_bits, self.header_bits, self.total_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream(num_samples: u32, strategy: StrategyTag, seed: u32) -> TokenStream {
        let nc = content_frames(num_samples as usize);
        let speaker = if strategy.uses_gvq() {
            SpeakerPayload::Indices((0..8).map(|i| ((i * 131 + seed) % 1024) as u16).collect())
        } else {
            SpeakerPayload::Continuous((0..192).map(|i| f16::from_f32(((i + seed) as f32 * 0.37).sin() / 14.0)).collect())
        };
        TokenStream {
            header: StreamHeader { version: VERSION, sample_rate: 16_000, num_samples, strategy, codebook_hash: 0xDEAD_BEEF_0123_4567 },
            content_tokens: (0..nc as u32).map(|i| (i * 7 + seed) % 256).collect(),
            prosody_tokens: (0..prosody_frames(nc) as u32).map(|i| (i * 13 + seed) % 256).collect(),
            speaker,
        }
    }

    #[test]
    fn one_second_v2_bit_accounting() {
        let ts = stream(16_000, StrategyTag::V2, 1);
        assert_eq!((ts.content_tokens.len(), ts.prosody_tokens.len()), (50, 7));
        assert_eq!(ts.payload_bits(), 50 * 8 + 7 * 8 + 80);
        let bytes = pack(&ts).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 67);
        assert_eq!(&bytes[..4], b"FRCD");
    }

    #[test]
    fn continuous_speaker_size() {
        let ts = stream(16_000, StrategyTag::V1, 2);
        assert_eq!(ts.speaker.bits(), 192 * 16);
        assert_eq!(pack(&ts).unwrap().len(), HEADER_LEN + 57 + 384);
    }

    #[test]
    fn rates() {
        let r = rate_report(&stream(16_000, StrategyTag::V2, 0));
        assert_eq!(r.tokens, 57);
        assert_eq!(r.tokens_per_second, 57.0);
        assert_eq!(r.frame_bits_per_second, 456.0);
        assert_eq!(r.asymptotic_frame_bits_per_second, 450.0);
        assert_eq!(r.asymptotic_tokens_per_second, 56.25);
        assert!(r.to_string().contains("57 tokens/s"));
        let r8 = rate_report(&stream(8 * 16_000, StrategyTag::V1, 0));
        assert_eq!((r8.tokens, r8.tokens_per_second), (450, 56.25));
        assert_eq!(r8.frame_bits_per_second, 450.0);
        let half = rate_report(&stream(8_000, StrategyTag::V1, 0));
        assert_eq!(half.tokens, 29);
    }

    #[test]
    fn invalid_streams_are_encode_errors() {
        let mut ts = stream(16_000, StrategyTag::V2, 0);
        ts.content_tokens[3] = 256;
        assert!(matches!(pack(&ts), Err(Error::Encode(_))));
        let mut ts = stream(16_000, StrategyTag::V1, 0);
        ts.header.num_samples = 0;
        assert!(matches!(pack(&ts), Err(Error::Encode(_))));
        let mut ts = stream(16_000, StrategyTag::V2, 0);
        ts.header.strategy = StrategyTag::V3;
        assert!(matches!(pack(&ts), Err(Error::Encode(_))));
    }

    #[test]
    fn header_errors() {
        let bytes = pack(&stream(3_200, StrategyTag::V3, 4)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(unpack(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(unpack(&bad), Err(Error::Format(_))));
        assert!(matches!(unpack(&bytes[..bytes.len() - 1]), Err(Error::CorruptStream(_))));
        assert!(matches!(unpack(&bytes[..10]), Err(Error::CorruptStream(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(unpack(&long), Err(Error::CorruptStream(_))));
        assert!(matches!(unpack_for_model(&bytes, 1), Err(Error::ModelMismatch { .. })));
        assert!(unpack_for_model(&bytes, 0xDEAD_BEEF_0123_4567).is_ok());
    }

    #[test]
    fn payload_bit_flips_never_panic() {
        for strategy in [StrategyTag::V1, StrategyTag::V2] {
            let ts = stream(4_480, strategy, 5);
            let bytes = pack(&ts).unwrap();
            for bit in 0..bytes.len() * 8 {
                let mut b = bytes.clone();
                b[bit / 8] ^= 0x80 >> (bit % 8);
                match unpack(&b) {
                    Ok(u) => assert_ne!(u, ts),
                    Err(Error::CorruptStream(_)) | Err(Error::Format(_)) => {}
                    Err(e) => panic!("unexpected error {e}"),
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn roundtrip(n in 1u32..200_000, tag in 1u8..=3, seed in 0u32..10_000) {
            let ts = stream(n, StrategyTag::from_byte(tag).unwrap(), seed);
            prop_assert_eq!(unpack(&pack(&ts).unwrap()).unwrap(), ts);
        }

        #[test]
        fn length_is_monotone(n in 1u32..100_000, tag in 1u8..=3) {
            let s = StrategyTag::from_byte(tag).unwrap();
            let a = pack(&stream(n, s, 0)).unwrap().len();
            let b = pack(&stream(n + 320, s, 0)).unwrap().len();
            prop_assert!(b > a);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let _ = unpack(&bytes);
            let mut framed = b"FRCD\x01".to_vec();
            framed.extend_from_slice(&bytes);
            let _ = unpack(&framed);
        }
    }
}
