use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::alignment::align_pair;
use crate::dsp::{read_wav, Waveform};
use crate::embedding::{Background, EmbeddingCache, EmbeddingExtractor};
use crate::error::{Error, Result};
use crate::model::Variant;
use crate::scene::SceneRecord;

/// One scene held in memory, with the truth already aligned to mixture
/// channel 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub mixture: Waveform,
    pub truth: Vec<f64>,
    pub embedding: Vec<f64>,
    /// `align_pair` lag that was undone on the truth.
    pub lag: i64,
    pub saturated: bool,
}

/// Model input for one scene: the mixture channel(s), aligned truth and
/// speaker embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub input: Waveform,
    pub truth: Vec<f64>,
    pub embedding: Vec<f64>,
    pub lag: i64,
    pub saturated: bool,
}

impl Sample {
    /// Channel index fed to a model: both channels for dual, otherwise one
    /// drawn uniformly when `rng` is given and channel 1 when it is not.
    pub fn pick_channel<R: Rng + ?Sized>(&self, variant: Variant, rng: Option<&mut R>) -> Option<usize> {
        match (variant, rng) {
            (Variant::Dual, _) => None,
            (_, Some(rng)) if self.mixture.num_channels() > 1 => {
                Some(rng.random_range(0..self.mixture.num_channels()))
            }
            _ => Some(0),
        }
    }

    pub fn input(&self, variant: Variant, channel: Option<usize>) -> Result<Waveform> {
        match channel {
            None if variant == Variant::Dual => {
                if self.mixture.num_channels() != 2 {
                    return Err(Error::VariantMismatch(format!(
                        "scene {} has {} channel(s); the dual model needs 2",
                        self.id,
                        self.mixture.num_channels()
                    )));
                }
                Ok(self.mixture.clone())
            }
            Some(c) if c < self.mixture.num_channels() => Ok(self.mixture.split_channel(c)),
            _ => Err(Error::Precondition(format!("bad channel choice {channel:?} for {variant}"))),
        }
    }
}

/// Reads, aligns and embeds one record.
pub fn load_sample(
    record: &SceneRecord,
    base: &Path,
    max_lag: usize,
    extractor: &EmbeddingExtractor,
    cache: Option<&EmbeddingCache>,
) -> Result<Sample> {
    let mixture = read_wav(record.mix_path(base))?;
    let truth = read_wav(record.truth_path(base))?;
    if truth.num_channels() != 1 {
        return Err(Error::Format {
            path: record.truth_path(base),
            reason: "truth must be mono".into(),
        });
    }
    let aligned = align_pair(truth.samples(), mixture.channel(0), max_lag)?;
    if aligned.samples.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateScene(format!(
            "scene {}: aligned truth is silent",
            record.id
        )));
    }
    if let Some(c) = cache.filter(|c| !c.matches(extractor)) {
        return Err(Error::Config(format!(
            "embedding cache (dim {}) was built with a different extractor than the one in use (dim {})",
            c.dim(),
            extractor.dim()
        )));
    }
    let embedding = match cache.and_then(|c| c.get(&record.id)) {
        Some(e) => e,
        None => {
            let reference = read_wav(record.reference_path(base))?;
            extractor.compute(&reference, record.reference.display().to_string())?
        }
    };
    Ok(Sample {
        id: record.id.clone(),
        mixture,
        truth: aligned.samples,
        embedding: embedding.vector,
        lag: aligned.estimate.lag,
        saturated: aligned.saturated,
    })
}

/// [`load_sample`] followed by the channel choice of [`Sample::pick_channel`].
#[allow(clippy::too_many_arguments)]
pub fn prepare_sample<R: Rng + ?Sized>(
    record: &SceneRecord,
    base: &Path,
    variant: Variant,
    max_lag: usize,
    extractor: &EmbeddingExtractor,
    cache: Option<&EmbeddingCache>,
    rng: Option<&mut R>,
) -> Result<PreparedSample> {
    let s = load_sample(record, base, max_lag, extractor, cache)?;
    let input = s.input(variant, s.pick_channel(variant, rng))?;
    Ok(PreparedSample {
        input,
        truth: s.truth,
        embedding: s.embedding,
        lag: s.lag,
        saturated: s.saturated,
    })
}

/// Background statistics over the distinct reference utterances of
/// `records`. Unreadable references are skipped.
pub fn fit_background(records: &[SceneRecord], base: &Path) -> Result<Background> {
    let mut paths: Vec<_> = records.iter().map(|r| r.reference_path(base)).collect();
    paths.sort();
    paths.dedup();
    let extractor = EmbeddingExtractor::default();
    let stats: Vec<Result<Vec<f64>>> = paths
        .par_iter()
        .map(|p| extractor.statistics(read_wav(p)?.samples()))
        .collect();
    let mut kept = Vec::with_capacity(stats.len());
    for (p, s) in paths.iter().zip(stats) {
        match s {
            Ok(s) => kept.push(s),
            Err(e) if e.is_data_error() => log::warn!("background: skipping {}: {e}", p.display()),
            Err(e) => return Err(e),
        }
    }
    Background::fit(&kept)
}

/// Scenes loaded for training or evaluation.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Records that could not be used, with the reason.
    pub skipped: Vec<(String, String)>,
    /// Background the embeddings were computed with.
    pub background: Option<Background>,
}

impl Dataset {
    /// Loads `records` in parallel, keeping manifest order. Records with
    /// unreadable or degenerate audio are skipped and listed.
    pub fn load(
        records: &[SceneRecord],
        base: &Path,
        max_lag: usize,
        extractor: &EmbeddingExtractor,
        cache: Option<&EmbeddingCache>,
    ) -> Result<Self> {
        let results: Vec<Result<Sample>> = records
            .par_iter()
            .map(|r| load_sample(r, base, max_lag, extractor, cache))
            .collect();
        let mut out = Dataset {
            background: extractor.background().cloned(),
            ..Default::default()
        };
        for (r, res) in records.iter().zip(results) {
            match res {
                Ok(s) => out.samples.push(s),
                Err(e) if e.is_data_error() => {
                    log::warn!("skipping scene {}: {e}", r.id);
                    out.skipped.push((r.id.clone(), e.to_string()));
                }
                Err(e) => return Err(e),
            }
        }
        let saturated = out.samples.iter().filter(|s| s.saturated).count();
        if saturated > 0 {
            log::warn!("{saturated} scene(s) hit the alignment lag bound");
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
