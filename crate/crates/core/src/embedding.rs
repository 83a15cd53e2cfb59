//! Deterministic speaker embeddings from log-mel statistics.
//!
//! A reference utterance is summarized by the per-band mean and standard
//! deviation of its 40-band log-mel spectrogram over active frames. The band means are taken
//! relative to their average across bands so that the summary ignores
//! overall gain. The 80 statistics are mapped to `D` dimensions through a
//! fixed matrix with orthonormal columns and L2-normalized.
//!
//! Raw summaries of different speakers are dominated by the spectral shape
//! all speech shares, so their embeddings sit within a few degrees of each
//! other. An optional [`Background`], fitted on a set of reference
//! utterances, standardizes each statistic before projection and leaves
//! mostly the speaker-specific part.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{Stft, StftConfig, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const EMBEDDING_DIM: usize = 256;
pub const MEL_BANDS: usize = 40;
const PROJECTION_SEED: u64 = 0x5eed_e111_b0a7;
const LOG_FLOOR: f64 = 1e-8;
/// Frames whose energy is below this fraction of the loudest frame's
/// (40 dB) are left out of the statistics.
const ACTIVE_RANGE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub vector: Vec<f64>,
    pub source: String,
}

impl SpeakerEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over the bins of a `fft_size` transform.
pub fn mel_filterbank(n_bands: usize, fft_size: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_bins = fft_size / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
    let edges: Vec<f64> = (0..n_bands + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_bands + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / fft_size as f64;
    (0..n_bands)
        .map(|b| {
            let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

/// `n` orthonormal vectors of length `len` (`n ≤ len`).
fn orthonormal<R: Rng>(n: usize, len: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for c in &out {
                let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        out.push(v);
    }
    out
}

/// Seeded `dim × inputs` projection, stored as `inputs` columns. Columns
/// are orthonormal when `dim ≥ inputs`, rows otherwise.
fn projection(dim: usize, inputs: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    if dim >= inputs {
        return orthonormal(inputs, dim, &mut rng);
    }
    let rows = orthonormal(dim, inputs, &mut rng);
    (0..inputs).map(|i| rows.iter().map(|r| r[i]).collect()).collect()
}

/// Population mean of the log-mel statistics. Subtracting it removes the
/// profile every voice shares, which otherwise dominates the cosine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub mean: Vec<f64>,
}

impl Background {
    /// Per-statistic mean over `summaries`, each the output of
    /// [`EmbeddingExtractor::statistics`].
    pub fn fit(summaries: &[Vec<f64>]) -> Result<Self> {
        let n = 2 * MEL_BANDS;
        if summaries.len() < 2 {
            return Err(Error::DegenerateReference(format!(
                "background needs at least 2 references, got {}",
                summaries.len()
            )));
        }
        if let Some(bad) = summaries.iter().find(|s| s.len() != n) {
            return Err(Error::dim("background statistics", &[n], &[bad.len()]));
        }
        let k = summaries.len() as f64;
        let mean = (0..n).map(|i| summaries.iter().map(|s| s[i]).sum::<f64>() / k).collect();
        Ok(Self { mean })
    }

    fn check(&self) -> Result<()> {
        let n = 2 * MEL_BANDS;
        if self.mean.len() != n {
            return Err(Error::dim("background", &[n], &[self.mean.len()]));
        }
        if !self.mean.iter().all(|m| m.is_finite()) {
            return Err(Error::Config("background mean must be finite".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bg: Self = serde_json::from_slice(&fs::read(path).map_err(|e| Error::io(path, e))?)?;
        bg.check()?;
        Ok(bg)
    }
}

/// Computes speaker embeddings; holds the filterbank and projection.
#[derive(Clone)]
pub struct EmbeddingExtractor {
    stft: Stft,
    filters: Vec<Vec<f64>>,
    proj: Vec<Vec<f64>>,
    dim: usize,
    background: Option<Background>,
}

impl Default for EmbeddingExtractor {
    fn default() -> Self {
        Self::new(EMBEDDING_DIM)
    }
}

impl EmbeddingExtractor {
    pub fn new(dim: usize) -> Self {
        let cfg = StftConfig::default();
        Self {
            stft: Stft::new(cfg).expect("default STFT config is valid"),
            filters: mel_filterbank(MEL_BANDS, cfg.fft_size, SAMPLE_RATE),
            proj: projection(dim, 2 * MEL_BANDS),
            dim,
            background: None,
        }
    }

    pub fn with_background(mut self, background: Option<Background>) -> Result<Self> {
        if let Some(bg) = &background {
            bg.check()?;
        }
        self.background = background;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn background(&self) -> Option<&Background> {
        self.background.as_ref()
    }

    /// Per-band mean (gain-normalized) and std of log-mel energies.
    pub fn statistics(&self, samples: &[f64]) -> Result<Vec<f64>> {
        if samples.len() < SAMPLE_RATE as usize {
            return Err(Error::DegenerateReference(format!(
                "reference is {} samples, need at least 1 s",
                samples.len()
            )));
        }
        if samples.iter().all(|v| *v == 0.0) {
            return Err(Error::DegenerateReference("reference is silent".into()));
        }
        let spec = self.stft.analyze(samples)?;
        let energies: Vec<Vec<f64>> = (0..spec.n_frames())
            .map(|r| {
                let row = spec.mag.row(r);
                self.filters
                    .iter()
                    .map(|filt| filt.iter().zip(row).map(|(w, m)| w * m * m).sum())
                    .collect()
            })
            .collect();
        // Frames more than ACTIVE_RANGE below the loudest one are pauses;
        // their log energies sit on the floor whatever the gain.
        let totals: Vec<f64> = energies.iter().map(|e| e.iter().sum()).collect();
        let loudest = totals.iter().cloned().fold(0.0, f64::max);
        let mut sum = vec![0.0; MEL_BANDS];
        let mut sum_sq = vec![0.0; MEL_BANDS];
        let mut t = 0usize;
        for (e, total) in energies.iter().zip(&totals) {
            if *total < loudest * ACTIVE_RANGE {
                continue;
            }
            t += 1;
            for (b, v) in e.iter().enumerate() {
                let l = (v + LOG_FLOOR).ln();
                sum[b] += l;
                sum_sq[b] += l * l;
            }
        }
        if t == 0 {
            return Err(Error::DegenerateReference("reference has no active frames".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / t as f64).collect();
        let std: Vec<f64> = sum_sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / t as f64 - m * m).max(0.0).sqrt())
            .collect();
        let level = mean.iter().sum::<f64>() / MEL_BANDS as f64;
        Ok(mean.iter().map(|m| m - level).chain(std).collect())
    }

    pub fn compute(&self, reference: &Waveform, source: impl Into<String>) -> Result<SpeakerEmbedding> {
        if reference.num_channels() != 1 {
            return Err(Error::Precondition("reference must be mono".into()));
        }
        let mut stats = self.statistics(reference.samples())?;
        if let Some(bg) = &self.background {
            stats.iter_mut().zip(&bg.mean).for_each(|(s, m)| *s -= m);
        }
        let mut v = vec![0.0; self.dim];
        for (s, col) in stats.iter().zip(&self.proj) {
            v.iter_mut().zip(col).for_each(|(o, c)| *o += s * c);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0) {
            return Err(Error::DegenerateReference("flat log-mel statistics".into()));
        }
        v.iter_mut().for_each(|x| *x /= n);
        Ok(SpeakerEmbedding {
            vector: v,
            source: source.into(),
        })
    }
}

/// Embedding with the default extractor.
pub fn compute_embedding(reference: &Waveform) -> Result<SpeakerEmbedding> {
    EmbeddingExtractor::default().compute(reference, "")
}

pub fn cosine_similarity(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim("cosine_similarity", &[a.dim()], &[b.dim()]));
    }
    let d: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
    Ok(d.clamp(-1.0, 1.0))
}

#[derive(Serialize, Deserialize)]
struct CacheIndex {
    dim: usize,
    #[serde(default)]
    background: Option<Background>,
    /// Utterance id -> offset in floats into the binary file.
    offsets: BTreeMap<String, u64>,
}

/// On-disk embedding store: `<stem>.bin` holds little-endian f32 vectors,
/// `<stem>.json` maps utterance ids to float offsets.
#[derive(Debug, Default, Clone)]
pub struct EmbeddingCache {
    dim: usize,
    /// Background the stored vectors were computed with.
    background: Option<Background>,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            background: None,
            entries: BTreeMap::new(),
        }
    }

    /// An empty cache for vectors produced by `extractor`.
    pub fn for_extractor(extractor: &EmbeddingExtractor) -> Self {
        Self {
            dim: extractor.dim(),
            background: extractor.background().cloned(),
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn background(&self) -> Option<&Background> {
        self.background.as_ref()
    }

    /// Whether the stored vectors match what `extractor` would compute.
    pub fn matches(&self, extractor: &EmbeddingExtractor) -> bool {
        self.dim == extractor.dim() && self.background.as_ref() == extractor.background()
    }

    pub fn insert(&mut self, id: impl Into<String>, emb: &SpeakerEmbedding) -> Result<()> {
        if emb.dim() != self.dim {
            return Err(Error::dim("embedding cache", &[self.dim], &[emb.dim()]));
        }
        self.entries.insert(id.into(), emb.vector.clone());
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<SpeakerEmbedding> {
        self.entries.get(id).map(|v| SpeakerEmbedding {
            vector: v.clone(),
            source: id.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        (stem.with_extension("bin"), stem.with_extension("json"))
    }

    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let (bin, json) = Self::paths(stem.as_ref());
        let mut bytes = Vec::with_capacity(self.entries.len() * self.dim * 4);
        let mut offsets = BTreeMap::new();
        for (i, (id, v)) in self.entries.iter().enumerate() {
            offsets.insert(id.clone(), (i * self.dim) as u64);
            for x in v {
                bytes.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        let mut f = fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&bin, e))?;
        let index = CacheIndex {
            dim: self.dim,
            background: self.background.clone(),
            offsets,
        };
        fs::write(&json, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&json, e))
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let (bin, json) = Self::paths(stem.as_ref());
        let index: CacheIndex =
            serde_json::from_slice(&fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut entries = BTreeMap::new();
        for (id, off) in index.offsets {
            let off = off as usize;
            let v = floats.get(off..off + index.dim).ok_or_else(|| Error::Format {
                path: bin.clone(),
                reason: format!("offset {off} for `{id}` out of range"),
            })?;
            entries.insert(id, v.iter().map(|x| *x as f64).collect());
        }
        Ok(Self {
            dim: index.dim,
            background: index.background,
            entries,
        })
    }
}
