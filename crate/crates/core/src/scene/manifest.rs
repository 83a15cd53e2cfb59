use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mix_scene, GeometrySpec, MixSpec, RoomSpec, SceneGeometry};
use crate::alignment::{gcc_phat_delay, DEFAULT_MAX_LAG};
use crate::dsp::{read_wav, write_wav, SampleFormat, Waveform};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Number of scenes per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitSpec {
    /// Scene counts for durations given in hours, assuming scenes of
    /// `scene_seconds` each.
    pub fn from_hours(train: f64, valid: f64, test: f64, scene_seconds: f64) -> Self {
        let n = |h: f64| (h * 3600.0 / scene_seconds).round().max(0.0) as usize;
        Self {
            train: n(train),
            valid: n(valid),
            test: n(test),
        }
    }
}

impl Default for SplitSpec {
    /// 0.2 / 0.05 / 0.05 hours of roughly 2.5 s scenes.
    fn default() -> Self {
        Self::from_hours(0.2, 0.05, 0.05, 2.5)
    }
}

/// Distributions scenes are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub room: RoomSpec,
    pub t60_range: (f64, f64),
    pub geometry: GeometrySpec,
    pub sir_range_db: (f64, f64),
    pub max_delay_injection: usize,
    /// Share of speakers held out for the test split.
    pub test_speaker_fraction: f64,
    pub max_lag: usize,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            room: RoomSpec::default(),
            t60_range: (0.45, 0.55),
            geometry: GeometrySpec::default(),
            sir_range_db: (-5.0, 5.0),
            max_delay_injection: 1200,
            test_speaker_fraction: 0.2,
            max_lag: DEFAULT_MAX_LAG,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    pub split: Split,
    pub target_speaker: String,
    pub interferer_speaker: String,
    /// Source utterances, relative to the corpus directory.
    pub target_utterance: String,
    pub interferer_utterance: String,
    pub reference_utterance: String,
    /// Rendered audio, relative to the manifest's directory.
    pub mix: PathBuf,
    pub truth: PathBuf,
    pub reference: PathBuf,
    pub injected_delay: usize,
    /// `gcc_phat_delay(truth, mixture channel 1)` on the rendered audio.
    pub measured_lag: i64,
    pub sir_db: Option<f64>,
    pub geometry: SceneGeometry,
    pub room: RoomSpec,
    pub seed: u64,
    pub num_samples: usize,
}

impl SceneRecord {
    pub fn mix_path(&self, base: &Path) -> PathBuf {
        base.join(&self.mix)
    }

    pub fn truth_path(&self, base: &Path) -> PathBuf {
        base.join(&self.truth)
    }

    pub fn reference_path(&self, base: &Path) -> PathBuf {
        base.join(&self.reference)
    }
}

#[derive(Clone, Debug)]
pub struct ManifestSummary {
    pub manifest: PathBuf,
    pub records: Vec<SceneRecord>,
    /// Corpus files that could not be read, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

struct Utterance {
    speaker: usize,
    rel: String,
    wave: Waveform,
}

struct Corpus {
    speakers: Vec<String>,
    utterances: Vec<Utterance>,
    skipped: Vec<(PathBuf, String)>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn scan_corpus(dir: &Path) -> Result<Corpus> {
    let mut corpus = Corpus {
        speakers: Vec::new(),
        utterances: Vec::new(),
        skipped: Vec::new(),
    };
    for spk_dir in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let name = spk_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut found = false;
        for file in sorted_entries(&spk_dir)? {
            if file.extension().and_then(|e| e.to_str()) != Some("wav") {
                continue;
            }
            let rel = format!(
                "{name}/{}",
                file.file_name().unwrap_or_default().to_string_lossy()
            );
            match read_wav(&file).and_then(|w| {
                if w.num_channels() == 1 {
                    Ok(w)
                } else {
                    Err(Error::Corpus("expected mono audio".into()))
                }
            }) {
                Ok(wave) => {
                    corpus.utterances.push(Utterance {
                        speaker: corpus.speakers.len(),
                        rel,
                        wave,
                    });
                    found = true;
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", file.display());
                    corpus.skipped.push((file, e.to_string()));
                }
            }
        }
        if found {
            corpus.speakers.push(name);
        }
    }
    Ok(corpus)
}

/// Number of (target utterance, interferer utterance) pairs with distinct
/// speakers, where the target speaker has a second utterance to enroll with.
pub fn count_pairs(files_per_speaker: &[usize]) -> usize {
    let total: usize = files_per_speaker.iter().sum();
    files_per_speaker
        .iter()
        .filter(|n| **n >= 2)
        .map(|n| n * (total - n))
        .sum()
}

fn pairs(utts: &[Utterance], pool: &[usize]) -> Vec<(usize, usize)> {
    let files_of = |s: usize| utts.iter().filter(move |u| u.speaker == s).count();
    let mut out = Vec::new();
    for (ti, t) in utts.iter().enumerate() {
        if !pool.contains(&t.speaker) || files_of(t.speaker) < 2 {
            continue;
        }
        for (ii, i) in utts.iter().enumerate() {
            if pool.contains(&i.speaker) && i.speaker != t.speaker {
                out.push((ti, ii));
            }
        }
    }
    out
}

struct Plan {
    record: SceneRecord,
    target: usize,
    interferer: usize,
    reference: usize,
    spec: MixSpec,
}

/// Renders a simulated corpus of scenes from a directory of speaker
/// subdirectories holding mono 16 kHz WAV files.
///
/// Audio goes to `out_dir/{mix,truth,ref}/scene_<id>.wav` and the records
/// to `out_dir/manifest.jsonl`. Train and valid scenes draw on one set of
/// speakers, test scenes on a disjoint set.
pub fn build_manifest(
    corpus_dir: impl AsRef<Path>,
    splits: &SplitSpec,
    sim: &SimulationSpec,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<ManifestSummary> {
    let (corpus_dir, out_dir) = (corpus_dir.as_ref(), out_dir.as_ref());
    let corpus = scan_corpus(corpus_dir)?;
    let n_spk = corpus.speakers.len();
    if n_spk < 4 {
        return Err(Error::Corpus(format!(
            "need at least 4 speakers with readable audio, found {n_spk} in {}",
            corpus_dir.display()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n_spk).collect();
    order.shuffle(&mut rng);
    let n_test = if splits.test > 0 {
        ((n_spk as f64 * sim.test_speaker_fraction).round() as usize).clamp(2, n_spk - 2)
    } else {
        0
    };
    let (test_spk, train_spk) = order.split_at(n_test);

    let mut train_pairs = pairs(&corpus.utterances, train_spk);
    let mut test_pairs = pairs(&corpus.utterances, test_spk);
    train_pairs.shuffle(&mut rng);
    test_pairs.shuffle(&mut rng);
    if splits.train > train_pairs.len() {
        return Err(Error::Shortfall {
            split: "train".into(),
            requested: splits.train,
            available: train_pairs.len(),
        });
    }
    if splits.valid > train_pairs.len() - splits.train {
        return Err(Error::Shortfall {
            split: "valid".into(),
            requested: splits.valid,
            available: train_pairs.len() - splits.train,
        });
    }
    if splits.test > test_pairs.len() {
        return Err(Error::Shortfall {
            split: "test".into(),
            requested: splits.test,
            available: test_pairs.len(),
        });
    }
    let chosen = train_pairs[..splits.train]
        .iter()
        .map(|p| (Split::Train, *p))
        .chain(
            train_pairs[splits.train..splits.train + splits.valid]
                .iter()
                .map(|p| (Split::Valid, *p)),
        )
        .chain(test_pairs[..splits.test].iter().map(|p| (Split::Test, *p)));

    let utts = &corpus.utterances;
    let mut plans = Vec::new();
    for (k, (split, (ti, ii))) in chosen.enumerate() {
        let spk = utts[ti].speaker;
        let others: Vec<usize> = (0..utts.len())
            .filter(|j| *j != ti && utts[*j].speaker == spk)
            .collect();
        let ri = others[rng.random_range(0..others.len())];
        let mut room = sim.room;
        room.t60 = if sim.t60_range.1 > sim.t60_range.0 {
            rng.random_range(sim.t60_range.0..=sim.t60_range.1)
        } else {
            sim.t60_range.0
        };
        let geometry = SceneGeometry::sample(&room, &sim.geometry, &mut rng)?;
        let sir = if sim.sir_range_db.1 > sim.sir_range_db.0 {
            rng.random_range(sim.sir_range_db.0..=sim.sir_range_db.1)
        } else {
            sim.sir_range_db.0
        };
        let delay = rng.random_range(0..=sim.max_delay_injection);
        let scene_seed: u64 = rng.random();
        let id = format!("{k:05}");
        let wav = |kind: &str| PathBuf::from(kind).join(format!("scene_{id}.wav"));
        plans.push(Plan {
            record: SceneRecord {
                id: id.clone(),
                split,
                target_speaker: corpus.speakers[spk].clone(),
                interferer_speaker: corpus.speakers[utts[ii].speaker].clone(),
                target_utterance: utts[ti].rel.clone(),
                interferer_utterance: utts[ii].rel.clone(),
                reference_utterance: utts[ri].rel.clone(),
                mix: wav("mix"),
                truth: wav("truth"),
                reference: wav("ref"),
                injected_delay: delay,
                measured_lag: 0,
                sir_db: Some(sir),
                geometry,
                room,
                seed: scene_seed,
                num_samples: 0,
            },
            target: ti,
            interferer: ii,
            reference: ri,
            spec: MixSpec {
                sir_db: Some(sir),
                delay_injection: delay,
                seed: scene_seed,
            },
        });
    }

    for kind in ["mix", "truth", "ref"] {
        let d = out_dir.join(kind);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let records = plans
        .into_par_iter()
        .map(|plan| {
            let mut rec = plan.record;
            let scene = mix_scene(
                &utts[plan.target].wave,
                &utts[plan.interferer].wave,
                &rec.geometry,
                &rec.room,
                &plan.spec,
            )?;
            rec.measured_lag =
                gcc_phat_delay(scene.truth.samples(), scene.mixture.channel(0), sim.max_lag)?.lag;
            rec.num_samples = scene.mixture.len();
            write_wav(out_dir.join(&rec.mix), &scene.mixture, SampleFormat::Float32)?;
            write_wav(out_dir.join(&rec.truth), &scene.truth, SampleFormat::Float32)?;
            write_wav(
                out_dir.join(&rec.reference),
                &utts[plan.reference].wave,
                SampleFormat::Float32,
            )?;
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = out_dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &records)?;
    Ok(ManifestSummary {
        manifest,
        records,
        skipped: corpus.skipped,
    })
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[SceneRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SceneRecord>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}
