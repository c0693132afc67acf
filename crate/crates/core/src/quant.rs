//! Discrete bottlenecks: single-codebook vector quantizers for content and
//! prosody, a group vector quantizer for the speaker embedding, and the
//! continuous speaker pass-through.

use candle::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Attribute, GlobalEmbedding, LatentSequence};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

pub const CODEBOOK_SIZE: usize = 256;
pub const EMA_DECAY: f32 = 0.99;
pub const DEAD_CODE_THRESHOLD: f32 = 2.0;
pub const COMMITMENT_BETA: f64 = 0.25;
const KMEANS_ITERS: usize = 10;

/// Index of the nearest row of `entries` (`k × dim`) to every row of `data`
/// under squared Euclidean distance. Ties go to the lowest index.
pub fn nearest_indices(entries: &[f32], dim: usize, data: &[f32], exec: Exec) -> Vec<u32> {
    let n = data.len() / dim;
    par::map_range(n, exec, |i| nearest_one(entries, dim, &data[i * dim..(i + 1) * dim]).0)
}

fn nearest_one(entries: &[f32], dim: usize, x: &[f32]) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (k, e) in entries.chunks_exact(dim).enumerate() {
        let d: f64 = x.iter().zip(e).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        if d < best.1 {
            best = (k as u32, d);
        }
    }
    best
}

/// `exp(entropy)` of a count distribution; 1 for an empty one.
pub fn perplexity_of(counts: &[f32]) -> f32 {
    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    if total <= 0.0 {
        return 1.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    h.exp() as f32
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub indices: Vec<u32>,
    /// Same layout as the input (`n × dim`).
    pub quantized: Vec<f32>,
    pub commit_loss: f32,
    pub perplexity: f32,
}

/// Output of the differentiable training path.
pub struct TrainQuantized {
    /// Straight-through output: forward value equals the codebook rows,
    /// gradient w.r.t. the input is the identity.
    pub output: Tensor,
    /// `β · mean((x − sg(q))²)`.
    pub commit: Tensor,
    pub indices: Vec<u32>,
    /// Detached input rows, for the EMA update.
    pub frames: Vec<f32>,
}

/// Straight-through estimator: `x + sg(q − x)`.
pub fn straight_through(x: &Tensor, q: &Tensor) -> Result<Tensor> {
    Ok((x + (q - x)?.detach())?)
}

/// One codebook with EMA statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub entries: Vec<f32>,
    pub k: usize,
    pub dim: usize,
    /// Exponentially decayed hit counts (horizon ≈ 1 / (1 − decay) updates).
    pub usage_ema: Vec<f32>,
    pub cluster_size: Vec<f32>,
    pub embed_avg: Vec<f32>,
    pub initialized: bool,
}

impl Codebook {
    /// Zero entries awaiting data-driven initialization.
    pub fn new(k: usize, dim: usize) -> Self {
        Self {
            entries: vec![0.0; k * dim],
            k,
            dim,
            usage_ema: vec![0.0; k],
            cluster_size: vec![1.0; k],
            embed_avg: vec![0.0; k * dim],
            initialized: false,
        }
    }

    pub fn from_entries(entries: Vec<f32>, k: usize, dim: usize) -> Result<Self> {
        if entries.len() != k * dim {
            return Err(Error::Config(format!("expected {k}×{dim} entries, got {}", entries.len())));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("codebook entries must be finite".into()));
        }
        let mut cb = Self::new(k, dim);
        cb.embed_avg = entries.clone();
        cb.entries = entries;
        cb.initialized = true;
        Ok(cb)
    }

    /// Uniform entries in `[-1/K, 1/K]`.
    pub fn uniform(k: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let a = 1.0 / k as f32;
        let entries = (0..k * dim).map(|_| rng.gen_range(-a..=a)).collect();
        Self::from_entries(entries, k, dim).expect("shape is consistent")
    }

    pub fn entry(&self, k: usize) -> &[f32] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.dim {
            return Err(Error::Config(format!("latent dim {dim} does not match codebook dim {}", self.dim)));
        }
        Ok(())
    }

    /// Lloyd's k-means from `k` seeded picks of `frames`; with fewer frames
    /// than entries, picks repeat with a small jitter.
    pub fn kmeans_init(&mut self, frames: &[f32], rng: &mut impl Rng, exec: Exec) {
        let n = frames.len() / self.dim;
        if n == 0 {
            return;
        }
        let scale = (frames.iter().map(|v| v * v).sum::<f32>() / frames.len() as f32).sqrt().max(1e-3);
        let mut centers: Vec<f32> = Vec::with_capacity(self.k * self.dim);
        for _ in 0..self.k {
            let i = rng.gen_range(0..n);
            let row = &frames[i * self.dim..(i + 1) * self.dim];
            if n >= self.k {
                centers.extend_from_slice(row);
            } else {
                centers.extend(row.iter().map(|v| v + 1e-2 * scale * rng.gen_range(-1.0f32..1.0)));
            }
        }
        if n >= self.k {
            for _ in 0..KMEANS_ITERS {
                let assign = nearest_indices(&centers, self.dim, frames, exec);
                let mut sums = vec![0.0f64; self.k * self.dim];
                let mut counts = vec![0usize; self.k];
                for (i, &a) in assign.iter().enumerate() {
                    counts[a as usize] += 1;
                    for d in 0..self.dim {
                        sums[a as usize * self.dim + d] += frames[i * self.dim + d] as f64;
                    }
                }
                for c in 0..self.k {
                    if counts[c] > 0 {
                        for d in 0..self.dim {
                            centers[c * self.dim + d] = (sums[c * self.dim + d] / counts[c] as f64) as f32;
                        }
                    }
                }
            }
        }
        self.embed_avg = centers.clone();
        self.entries = centers;
        self.cluster_size = vec![1.0; self.k];
        self.usage_ema = vec![0.0; self.k];
        self.initialized = true;
    }

    /// Nearest-entry quantization of a latent sequence (inference path).
    pub fn quantize(&self, latent: &LatentSequence, exec: Exec) -> Result<QuantizationResult> {
        self.check_dim(latent.dim)?;
        self.quantize_rows(&latent.values, exec)
    }

    pub fn quantize_rows(&self, rows: &[f32], exec: Exec) -> Result<QuantizationResult> {
        if rows.len() % self.dim != 0 {
            return Err(Error::Config("row data is not a multiple of the codebook dim".into()));
        }
        let indices = nearest_indices(&self.entries, self.dim, rows, exec);
        let quantized: Vec<f32> = indices.iter().flat_map(|&i| self.entry(i as usize).iter().copied()).collect();
        let sq: f64 = rows.iter().zip(&quantized).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        let commit_loss = if rows.is_empty() { 0.0 } else { (COMMITMENT_BETA * sq / rows.len() as f64) as f32 };
        let mut counts = vec![0.0f32; self.k];
        for &i in &indices {
            counts[i as usize] += 1.0;
        }
        Ok(QuantizationResult { indices, quantized, commit_loss, perplexity: perplexity_of(&counts) })
    }

    /// Table lookup; out-of-range indices are a corrupt stream.
    pub fn dequantize(&self, indices: &[u32], frame_rate: f64, attribute: Attribute) -> Result<LatentSequence> {
        let values = self.lookup(indices)?;
        Ok(LatentSequence { values, n_frames: indices.len(), dim: self.dim, frame_rate, attribute })
    }

    pub fn lookup(&self, indices: &[u32]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i as usize >= self.k {
                return Err(Error::CorruptStream(format!("token {i} out of range for codebook of size {}", self.k)));
            }
            out.extend_from_slice(self.entry(i as usize));
        }
        Ok(out)
    }

    /// Differentiable path over a `(..., dim)` tensor.
    pub fn quantize_train(&self, x: &Tensor, exec: Exec) -> Result<TrainQuantized> {
        let dim = *x.dims().last().ok_or_else(|| Error::Config("scalar input to quantizer".into()))?;
        self.check_dim(dim)?;
        let frames: Vec<f32> = x.detach().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let indices = nearest_indices(&self.entries, self.dim, &frames, exec);
        let q = Tensor::from_vec(self.lookup(&indices)?, x.shape(), &Device::Cpu)?.to_dtype(x.dtype())?;
        let commit = ((x - &q)?.sqr()?.mean_all()? * COMMITMENT_BETA)?;
        Ok(TrainQuantized { output: straight_through(x, &q)?, commit, indices, frames })
    }

    /// EMA update of entries and usage from one batch of assignments.
    pub fn ema_update(&mut self, frames: &[f32], indices: &[u32]) {
        let mut counts = vec![0.0f32; self.k];
        let mut sums = vec![0.0f32; self.k * self.dim];
        for (i, &a) in indices.iter().enumerate() {
            let a = a as usize;
            counts[a] += 1.0;
            for d in 0..self.dim {
                sums[a * self.dim + d] += frames[i * self.dim + d];
            }
        }
        for c in 0..self.k {
            self.usage_ema[c] = EMA_DECAY * self.usage_ema[c] + counts[c];
            self.cluster_size[c] = EMA_DECAY * self.cluster_size[c] + (1.0 - EMA_DECAY) * counts[c];
            for d in 0..self.dim {
                let j = c * self.dim + d;
                self.embed_avg[j] = EMA_DECAY * self.embed_avg[j] + (1.0 - EMA_DECAY) * sums[j];
            }
            if self.cluster_size[c] > 1e-20 {
                for d in 0..self.dim {
                    let j = c * self.dim + d;
                    self.entries[j] = self.embed_avg[j] / self.cluster_size[c];
                }
            }
        }
    }

    /// Re-initializes entries whose decayed usage is below the dead-code
    /// threshold to random rows of `frames`. Returns how many were reseeded.
    pub fn reseed(&mut self, frames: &[f32], rng: &mut impl Rng) -> usize {
        let n = frames.len() / self.dim;
        if n == 0 {
            return 0;
        }
        let mut reseeded = 0;
        for c in 0..self.k {
            if self.usage_ema[c] < DEAD_CODE_THRESHOLD {
                let i = rng.gen_range(0..n);
                let row = &frames[i * self.dim..(i + 1) * self.dim];
                self.entries[c * self.dim..(c + 1) * self.dim].copy_from_slice(row);
                self.embed_avg[c * self.dim..(c + 1) * self.dim].copy_from_slice(row);
                self.cluster_size[c] = 1.0;
                reseeded += 1;
            }
        }
        reseeded
    }

    /// Perplexity of the decayed usage distribution.
    pub fn usage_perplexity(&self) -> f32 {
        perplexity_of(&self.usage_ema)
    }

    pub fn entries_bytes(&self) -> Vec<u8> {
        self.entries.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GroupQuantizerConfig {
    pub num_groups: usize,
    pub entries_per_group: usize,
    pub speaker_dim: usize,
}

impl Default for GroupQuantizerConfig {
    fn default() -> Self {
        Self { num_groups: 8, entries_per_group: 1024, speaker_dim: 192 }
    }
}

impl GroupQuantizerConfig {
    pub fn group_dim(&self) -> usize {
        self.speaker_dim / self.num_groups
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_groups == 0 || self.speaker_dim % self.num_groups != 0 {
            return Err(Error::Config(format!(
                "speaker dim {} is not divisible into {} groups",
                self.speaker_dim, self.num_groups
            )));
        }
        Ok(())
    }
}

/// Group vector quantizer: contiguous sub-vectors, one codebook each.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupQuantizer {
    pub cfg: GroupQuantizerConfig,
    pub groups: Vec<Codebook>,
}

impl GroupQuantizer {
    pub fn new(cfg: GroupQuantizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = (0..cfg.num_groups).map(|_| Codebook::uniform(cfg.entries_per_group, cfg.group_dim(), &mut rng)).collect();
        Ok(Self { cfg, groups })
    }

    pub fn quantize(&self, emb: &GlobalEmbedding, exec: Exec) -> Result<QuantizationResult> {
        if emb.values.len() != self.cfg.speaker_dim {
            return Err(Error::Config(format!("embedding dim {} != {}", emb.values.len(), self.cfg.speaker_dim)));
        }
        let gd = self.cfg.group_dim();
        let mut indices = Vec::with_capacity(self.cfg.num_groups);
        let mut quantized = Vec::with_capacity(self.cfg.speaker_dim);
        let mut commit = 0.0f32;
        for (g, cb) in self.groups.iter().enumerate() {
            let r = cb.quantize_rows(&emb.values[g * gd..(g + 1) * gd], exec)?;
            indices.extend(r.indices);
            quantized.extend(r.quantized);
            commit += r.commit_loss / self.cfg.num_groups as f32;
        }
        let mut counts = vec![0.0f32; self.cfg.entries_per_group];
        for &i in &indices {
            counts[i as usize] += 1.0;
        }
        Ok(QuantizationResult { indices, quantized, commit_loss: commit, perplexity: perplexity_of(&counts) })
    }

    pub fn dequantize(&self, indices: &[u32]) -> Result<GlobalEmbedding> {
        if indices.len() != self.cfg.num_groups {
            return Err(Error::CorruptStream(format!("expected {} speaker indices, got {}", self.cfg.num_groups, indices.len())));
        }
        let mut values = Vec::with_capacity(self.cfg.speaker_dim);
        for (cb, &i) in self.groups.iter().zip(indices) {
            values.extend(cb.lookup(&[i])?);
        }
        Ok(GlobalEmbedding { values })
    }

    /// Differentiable path over `(B, speaker_dim)`; returns the
    /// straight-through output, the mean commitment term, and per-group
    /// `(frames, indices)` for the EMA update.
    pub fn quantize_train(&self, x: &Tensor, exec: Exec) -> Result<(Tensor, Tensor, Vec<(Vec<f32>, Vec<u32>)>)> {
        let gd = self.cfg.group_dim();
        let mut outs = Vec::with_capacity(self.cfg.num_groups);
        let mut commit: Option<Tensor> = None;
        let mut stats = Vec::with_capacity(self.cfg.num_groups);
        for (g, cb) in self.groups.iter().enumerate() {
            let r = cb.quantize_train(&x.narrow(1, g * gd, gd)?, exec)?;
            outs.push(r.output);
            commit = Some(match commit {
                Some(c) => (c + r.commit)?,
                None => r.commit,
            });
            stats.push((r.frames, r.indices));
        }
        let commit = (commit.expect("at least one group") / self.cfg.num_groups as f64)?;
        Ok((Tensor::cat(&outs, 1)?, commit, stats))
    }

    pub fn ema_update(&mut self, stats: &[(Vec<f32>, Vec<u32>)]) {
        for (cb, (frames, idx)) in self.groups.iter_mut().zip(stats) {
            cb.ema_update(frames, idx);
        }
    }
}

/// Continuous speaker path: the embedding passes through unchanged.
pub fn speaker_passthrough(emb: &GlobalEmbedding) -> GlobalEmbedding {
    emb.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Independent reference: full distance table in f64, explicit argmin.
    fn brute_force(entries: &[f32], dim: usize, data: &[f32]) -> Vec<u32> {
        let k = entries.len() / dim;
        data.chunks_exact(dim)
            .map(|x| {
                let dists: Vec<f64> = (0..k)
                    .map(|c| (0..dim).map(|d| (x[d] as f64 - entries[c * dim + d] as f64).powi(2)).sum())
                    .collect();
                let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
                dists.iter().position(|&d| d == min).unwrap() as u32
            })
            .collect()
    }

    fn random_rows(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<f32> {
        (0..n * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }

    fn latent(values: Vec<f32>, dim: usize) -> LatentSequence {
        let n_frames = values.len() / dim;
        LatentSequence { values, n_frames, dim, frame_rate: 50.0, attribute: Attribute::Content }
    }

    #[test]
    fn exact_match_gives_its_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cb = Codebook::from_entries(random_rows(256, 16, &mut rng), 256, 16).unwrap();
        let r = cb.quantize(&latent(cb.entry(17).to_vec(), 16), Exec::Sequential).unwrap();
        assert_eq!(r.indices, vec![17]);
        assert_eq!(r.commit_loss, 0.0);
        assert_eq!(r.quantized, cb.entry(17));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let mut entries = vec![0.0f32; 4 * 2];
        entries[2..4].copy_from_slice(&[1.0, 0.0]);
        entries[6..8].copy_from_slice(&[-1.0, 0.0]);
        entries[0..2].copy_from_slice(&[5.0, 5.0]);
        entries[4..6].copy_from_slice(&[5.0, -5.0]);
        let cb = Codebook::from_entries(entries, 4, 2).unwrap();
        let r = cb.quantize(&latent(vec![0.0, 0.0], 2), Exec::Parallel).unwrap();
        assert_eq!(r.indices, vec![1]);
    }

    #[test]
    fn matches_brute_force_and_modes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cb = Codebook::from_entries(random_rows(256, 32, &mut rng), 256, 32).unwrap();
        let data = random_rows(50, 32, &mut rng);
        let seq = nearest_indices(&cb.entries, 32, &data, Exec::Sequential);
        let par = nearest_indices(&cb.entries, 32, &data, Exec::Parallel);
        assert_eq!(seq, par);
        assert_eq!(seq, brute_force(&cb.entries, 32, &data));
    }

    #[test]
    fn dequantize_roundtrip_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cb = Codebook::from_entries(random_rows(256, 8, &mut rng), 256, 8).unwrap();
        let x = latent(random_rows(20, 8, &mut rng), 8);
        let r = cb.quantize(&x, Exec::Parallel).unwrap();
        let back = cb.dequantize(&r.indices, 50.0, Attribute::Content).unwrap();
        assert_eq!(back.values, r.quantized);
        let zeros = cb.dequantize(&[0, 0, 0], 50.0, Attribute::Content).unwrap();
        assert!(zeros.values.chunks(8).all(|c| c == cb.entry(0)));
        assert!(matches!(cb.dequantize(&[256], 50.0, Attribute::Content), Err(Error::CorruptStream(_))));
        // idempotence
        let again = cb.quantize(&back, Exec::Parallel).unwrap();
        assert_eq!(again.indices, r.indices);
    }

    #[test]
    fn dim_mismatch_is_a_config_error() {
        let cb = Codebook::new(4, 8);
        assert!(matches!(cb.quantize(&latent(vec![0.0; 6], 6), Exec::Parallel), Err(Error::Config(_))));
        let gq = GroupQuantizer::new(GroupQuantizerConfig::default(), 0).unwrap();
        assert!(matches!(gq.quantize(&GlobalEmbedding { values: vec![0.0; 10] }, Exec::Parallel), Err(Error::Config(_))));
        assert!(GroupQuantizerConfig { speaker_dim: 190, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn straight_through_jacobian_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cb = Codebook::from_entries(random_rows(256, 8, &mut rng), 256, 8).unwrap();
        let x0: Vec<f64> = (0..5 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = candle::Var::from_vec(x0.clone(), (5, 8), &Device::Cpu).unwrap();
        let out = cb.quantize_train(x.as_tensor(), Exec::Sequential).unwrap().output;
        let offset = (&out - x.as_tensor()).unwrap().detach();
        // surrogate with the stop-gradient offset frozen at x0
        let eval = |v: Vec<f64>| -> Vec<f64> {
            let t = Tensor::from_vec(v, (5, 8), &Device::Cpu).unwrap();
            (t + &offset).unwrap().flatten_all().unwrap().to_vec1().unwrap()
        };
        let flat = out.flatten_all().unwrap();
        for (i, j) in [(0usize, 0usize), (7, 13), (20, 20), (33, 5), (39, 39)] {
            let h = 1e-6;
            let mut p = x0.clone();
            p[j] += h;
            let mut m = x0.clone();
            m[j] -= h;
            let fd = (eval(p)[i] - eval(m)[i]) / (2.0 * h);
            let grads = flat.get(i).unwrap().backward().unwrap();
            let g: Vec<f64> = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((fd - want).abs() < 1e-4);
            assert!((g[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gvq_indices_and_exact_reconstruction() {
        let gq = GroupQuantizer::new(GroupQuantizerConfig::default(), 7).unwrap();
        let values: Vec<f32> = gq.groups.iter().flat_map(|g| g.entry(5).to_vec()).collect();
        let r = gq.quantize(&GlobalEmbedding { values: values.clone() }, Exec::Parallel).unwrap();
        assert_eq!(r.indices, vec![5; 8]);
        assert_eq!(r.commit_loss, 0.0);
        assert_eq!(gq.dequantize(&r.indices).unwrap().values, values);
        assert!(matches!(gq.dequantize(&[1024, 0, 0, 0, 0, 0, 0, 0]), Err(Error::CorruptStream(_))));
    }

    #[test]
    fn gvq_matches_per_group_brute_force() {
        let gq = GroupQuantizer::new(GroupQuantizerConfig::default(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let values: Vec<f32> = (0..192).map(|_| rng.gen_range(-0.002f32..0.002)).collect();
            let r = gq.quantize(&GlobalEmbedding { values: values.clone() }, Exec::Parallel).unwrap();
            assert_eq!(r.indices.len(), 8);
            for g in 0..8 {
                let want = brute_force(&gq.groups[g].entries, 24, &values[g * 24..(g + 1) * 24]);
                assert_eq!(r.indices[g], want[0]);
                assert!(r.indices[g] < 1024);
            }
        }
    }

    #[test]
    fn passthrough_is_identity() {
        let e = GlobalEmbedding { values: vec![0.6, 0.8] };
        let p = speaker_passthrough(&e);
        assert_eq!(p, e);
        assert_eq!(p.norm(), e.norm());
    }

    #[test]
    fn reseed_bounds_and_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let frames = random_rows(30, 4, &mut rng);
        let mut fresh = Codebook::new(256, 4);
        let n = fresh.reseed(&frames, &mut rng);
        assert!(n <= 256);
        assert_eq!(n, 256);
        for c in 0..256 {
            let e = fresh.entry(c);
            assert!(frames.chunks(4).any(|f| f == e));
        }
        fresh.usage_ema = vec![10.0; 256];
        assert_eq!(fresh.reseed(&frames, &mut rng), 0);
    }

    #[test]
    fn perplexity_bounds() {
        assert_eq!(perplexity_of(&[5.0, 0.0, 0.0]), 1.0);
        assert!((perplexity_of(&[1.0; 256]) - 256.0).abs() < 1e-2);
        assert_eq!(perplexity_of(&[0.0; 4]), 1.0);
    }

    #[test]
    fn ema_training_avoids_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dim = 8;
        let mut cb = Codebook::new(256, dim);
        cb.kmeans_init(&random_rows(512, dim, &mut rng), &mut rng, Exec::Parallel);
        for _ in 0..100 {
            let batch = random_rows(200, dim, &mut rng);
            let idx = nearest_indices(&cb.entries, dim, &batch, Exec::Parallel);
            cb.ema_update(&batch, &idx);
            cb.reseed(&batch, &mut rng);
        }
        let p = cb.usage_perplexity();
        assert!(p > 256.0 / 8.0, "perplexity {p}");
        assert!(p <= 256.0);
        assert!(cb.entries.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gvq_error_shrinks_with_more_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let unit = |rng: &mut ChaCha8Rng| {
            let v: Vec<f32> = (0..192).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<f32>>()
        };
        let pool: Vec<Vec<f32>> = (0..1024).map(|_| unit(&mut rng)).collect();
        let test: Vec<Vec<f32>> = (0..64).map(|_| unit(&mut rng)).collect();
        // the 1024-entry books contain the 64-entry books as a prefix
        let err_for = |k: usize| {
            let cfg = GroupQuantizerConfig { entries_per_group: k, ..Default::default() };
            let mut gq = GroupQuantizer::new(cfg, 0).unwrap();
            for (g, cb) in gq.groups.iter_mut().enumerate() {
                cb.entries = pool[..k].iter().flat_map(|v| v[g * 24..(g + 1) * 24].to_vec()).collect();
            }
            test.iter()
                .map(|v| gq.quantize(&GlobalEmbedding { values: v.clone() }, Exec::Parallel).unwrap().commit_loss)
                .sum::<f32>()
        };
        let small = err_for(64);
        let large = err_for(1024);
        assert!(large < small, "{large} >= {small}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn quantize_invariants(seed in 0u64..10_000, n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = Codebook::from_entries(random_rows(256, 6, &mut rng), 256, 6).unwrap();
            let x = latent(random_rows(n, 6, &mut rng), 6);
            let r = cb.quantize(&x, Exec::Parallel).unwrap();
            prop_assert_eq!(&r.indices, &brute_force(&cb.entries, 6, &x.values));
            prop_assert!(r.indices.iter().all(|&i| i < 256));
            prop_assert!(r.perplexity >= 1.0 && r.perplexity <= 256.0 + 1e-3);
            for (t, &i) in r.indices.iter().enumerate() {
                prop_assert_eq!(&r.quantized[t * 6..(t + 1) * 6], cb.entry(i as usize));
            }
        }
    }
}
