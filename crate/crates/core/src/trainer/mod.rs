//! Adam training with validation-driven early stopping, checkpoints and
//! SDR evaluation.

mod adam;
mod checkpoint;
mod data;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, RngState, FORMAT_VERSION, MAGIC};
pub use data::{fit_background, load_sample, prepare_sample, Dataset, PreparedSample, Sample};

use crate::alignment::DEFAULT_MAX_LAG;
use crate::dsp::{Stft, SAMPLE_RATE};
use crate::embedding::SpeakerEmbedding;
use crate::error::{Error, Result};
use crate::model::{build_model, separate_utterance, ModelConfig, ModelParams, Variant};
use crate::objectives::{sdr, si_snr_loss, si_snr_with, ResidualForm, ScorePair, SiSnrOptions};
use crate::tensor::{Gradients, Tape};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    8
}
fn default_max_epochs() -> usize {
    100
}
fn default_patience() -> usize {
    5
}
fn default_max_lag() -> usize {
    DEFAULT_MAX_LAG
}
fn default_crop() -> f64 {
    4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_lag")]
    pub max_lag: usize,
    /// Training crop length; shorter scenes are used whole.
    #[serde(default = "default_crop")]
    pub crop_seconds: f64,
    /// Hard cap on optimizer steps across all epochs.
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default)]
    pub residual: ResidualForm,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            learning_rate: default_lr(),
            batch_size: default_batch(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            seed: 0,
            max_lag: default_max_lag(),
            crop_seconds: default_crop(),
            max_steps: None,
            residual: ResidualForm::default(),
        }
    }

    pub fn variant(&self) -> Variant {
        self.model.variant
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        // lr = 0 is allowed as a frozen schedule.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and ≥ 0", self.learning_rate)));
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size, patience and max_epochs must be ≥ 1".into()));
        }
        if !(self.crop_seconds > 0.0) {
            return Err(Error::Config("crop_seconds must be positive".into()));
        }
        Ok(())
    }

    fn loss_options(&self) -> SiSnrOptions {
        SiSnrOptions {
            residual: self.residual,
            ..SiSnrOptions::default()
        }
    }

    fn crop_len(&self) -> usize {
        (self.crop_seconds * SAMPLE_RATE as f64).round() as usize
    }
}

/// Runtime switches for [`fit`] that do not affect the trajectory.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Continue from `out_dir/last.ckpt` when it exists.
    pub resume: bool,
    /// Stop (as if interrupted) after this many completed epochs.
    pub halt_after_epoch: Option<usize>,
    /// Write checkpoints every this many epochs (and always on exit);
    /// 0 is treated as 1.
    pub checkpoint_every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    MaxSteps,
    Halted,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub stop: StopReason,
    /// (epoch, train loss, valid SI-SNR) for epochs run by this call.
    pub history: Vec<(usize, f64, f64)>,
}

#[derive(Serialize)]
struct LogRow {
    epoch: usize,
    steps: u64,
    train_loss: f64,
    valid_si_snr: f64,
    best_valid_si_snr: f64,
    wall_secs: f64,
}

struct BatchItem<'d> {
    sample: &'d Sample,
    channel: Option<usize>,
    range: std::ops::Range<usize>,
}

/// Loss and parameter gradients for one (cropped) sample.
fn sample_gradient(
    params: &ModelParams,
    stft: &Stft,
    item: &BatchItem<'_>,
    opts: SiSnrOptions,
) -> Result<(f64, Gradients)> {
    let variant = params.variant();
    let r = item.range.clone();
    let chans: Vec<&[f64]> = match item.channel {
        None => item.sample.mixture.channels().iter().map(|c| &c[r.clone()]).collect(),
        Some(c) => vec![&item.sample.mixture.channel(c)[r.clone()]],
    };
    if chans.len() != variant.channels() {
        return Err(Error::VariantMismatch(format!(
            "{variant} needs {} channel(s), got {}",
            variant.channels(),
            chans.len()
        )));
    }
    let specs = chans.iter().map(|c| stft.analyze(c)).collect::<Result<Vec<_>>>()?;
    let truth = &item.sample.truth[r.clone()];
    let mut tape = Tape::new();
    let view = params.view();
    let est = view.estimate_taped(
        &mut tape,
        stft,
        &specs[0],
        specs.get(1).map(|s| &s.mag),
        &item.sample.embedding,
        r.len(),
    )?;
    let loss = si_snr_loss(&mut tape, &[est], &[truth], opts)?;
    let value = tape.value(loss).data()[0];
    Ok((value, tape.backward(loss)?))
}

/// Channel-1 (or dual) separation of one sample.
pub fn separate_sample(params: &ModelParams, sample: &Sample) -> Result<Vec<f64>> {
    let variant = params.variant();
    let input = sample.input(variant, sample.pick_channel::<ChaCha8Rng>(variant, None))?;
    let emb = SpeakerEmbedding {
        vector: sample.embedding.clone(),
        source: sample.id.clone(),
    };
    Ok(separate_utterance(params, &input, &emb)?.into_channels().remove(0))
}

/// Mean SI-SNR of the separated outputs against the aligned truths.
pub fn mean_si_snr(params: &ModelParams, data: &Dataset, opts: SiSnrOptions) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Corpus("no scenes to score".into()));
    }
    let scores = data
        .samples
        .par_iter()
        .map(|s| si_snr_with(ScorePair::new(&separate_sample(params, s)?, &s.truth)?, opts))
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn append_log(path: &Path, row: &LogRow) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_vec(row)?;
    line.push(b'\n');
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

/// Trains until patience, `max_epochs` or `max_steps` runs out.
///
/// Writes `best.ckpt`, `last.ckpt` and `train_log.jsonl` into `out_dir`.
/// The trajectory depends only on the data, the configuration and its seed.
pub fn fit(
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
    opts: &FitOptions,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Corpus("training set is empty".into()));
    }
    if valid.is_empty() {
        return Err(Error::Corpus("validation set is empty".into()));
    }
    if valid.background != train.background {
        return Err(Error::Config(
            "training and validation embeddings use different backgrounds".into(),
        ));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let log_path = out_dir.join(TRAIN_LOG);

    let (mut state, mut rng, mut best) = if opts.resume && last_path.exists() {
        let state = Checkpoint::load(&last_path)?;
        if state.train.as_ref() != Some(cfg) || state.background != train.background {
            return Err(Error::Config(format!(
                "{} was written with a different training configuration",
                last_path.display()
            )));
        }
        let rng = state
            .rng
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no rng state".into()))?
            .restore()?;
        let best = if best_path.exists() {
            Checkpoint::load(&best_path)?
        } else {
            state.clone()
        };
        log::info!("resuming from epoch {}", state.epoch);
        (state, rng, best)
    } else {
        let params = build_model(&cfg.model, cfg.seed)?;
        let mut state = Checkpoint::initial(params);
        state.train = Some(cfg.clone());
        state.background = train.background.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        if log_path.exists() {
            fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
        }
        let best = state.clone();
        (state, rng, best)
    };

    let stft = Stft::new(cfg.model.stft)?;
    let loss_opts = cfg.loss_options();
    let crop = cfg.crop_len();
    let variant = cfg.variant();
    let mut history = Vec::new();
    let mut best_dirty = false;
    let start = Instant::now();

    let stop = loop {
        if state.epoch >= cfg.max_epochs {
            break StopReason::MaxEpochs;
        }
        if cfg.max_steps.is_some_and(|m| state.adam.step >= m) {
            break StopReason::MaxSteps;
        }
        if opts.halt_after_epoch.is_some_and(|h| state.epoch >= h) {
            break StopReason::Halted;
        }
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| state.adam.step >= m) {
                break;
            }
            let items: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&i| {
                    let sample = &train.samples[i];
                    let len = sample.mixture.len();
                    let start = if len > crop { rng.random_range(0..=len - crop) } else { 0 };
                    BatchItem {
                        sample,
                        channel: sample.pick_channel(variant, Some(&mut rng)),
                        range: start..(start + crop).min(len),
                    }
                })
                .collect();
            let results = items
                .par_iter()
                .map(|it| sample_gradient(&state.params, &stft, it, loss_opts))
                .collect::<Result<Vec<_>>>();
            let results = match results {
                Ok(r) => r,
                Err(e) if e.is_numerical() => {
                    log::error!("epoch {epoch}: {e}");
                    return Err(diverged(epoch, &last_path));
                }
                Err(e) => return Err(e),
            };
            let n = results.len() as f64;
            let batch_loss = results.iter().map(|(l, _)| l).sum::<f64>() / n;
            if !batch_loss.is_finite() {
                log::error!("epoch {epoch}: training loss is {batch_loss}");
                return Err(diverged(epoch, &last_path));
            }
            for (_, g) in &results {
                g.accumulate_into(&mut state.params.vars)?;
            }
            for v in &mut state.params.vars {
                v.grad.scale(1.0 / n);
            }
            if let Err(e) = adam_step(&mut state.params.vars, &mut state.adam, cfg.learning_rate) {
                log::error!("epoch {epoch}: {e}");
                return Err(diverged(epoch, &last_path));
            }
            loss_sum += batch_loss;
            loss_count += 1;
        }
        let train_loss = loss_sum / loss_count.max(1) as f64;
        let valid_si_snr = mean_si_snr(&state.params, valid, loss_opts)?;
        state.epoch = epoch;
        state.rng = Some(RngState::capture(&rng));
        let improved = state.best_valid_si_snr.is_none_or(|b| valid_si_snr > b);
        if improved {
            state.best_valid_si_snr = Some(valid_si_snr);
            state.bad_epochs = 0;
            best = state.clone();
            best_dirty = true;
        } else {
            state.bad_epochs += 1;
        }
        if epoch % opts.checkpoint_every.max(1) == 0 {
            persist(&state, &best, &mut best_dirty, &last_path, &best_path)?;
        }
        append_log(
            &log_path,
            &LogRow {
                epoch,
                steps: state.adam.step,
                train_loss,
                valid_si_snr,
                best_valid_si_snr: state.best_valid_si_snr.unwrap_or(valid_si_snr),
                wall_secs: start.elapsed().as_secs_f64(),
            },
        )?;
        log::info!(
            "epoch {epoch}: train loss {train_loss:.3}, valid SI-SNR {valid_si_snr:.3} dB{}",
            if improved { " (best)" } else { "" }
        );
        history.push((epoch, train_loss, valid_si_snr));
        if state.bad_epochs >= cfg.patience {
            break StopReason::Patience;
        }
    };
    persist(&state, &best, &mut best_dirty, &last_path, &best_path)?;
    Ok(FitOutcome {
        best,
        last: state,
        stop,
        history,
    })
}

fn persist(
    last: &Checkpoint,
    best: &Checkpoint,
    best_dirty: &mut bool,
    last_path: &Path,
    best_path: &Path,
) -> Result<()> {
    if *best_dirty || !best_path.exists() {
        best.save(best_path)?;
        *best_dirty = false;
    }
    last.save(last_path)
}

fn diverged(epoch: usize, last: &Path) -> Error {
    Error::Diverged {
        epoch,
        last_good: last.exists().then(|| last.to_path_buf()),
    }
}

/// One evaluated scene; SDR and SI-SNR in dB.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub before_sdr: f64,
    pub after_sdr: f64,
    pub improved_sdr: f64,
    pub before_si_snr: f64,
    pub after_si_snr: f64,
    pub lag: i64,
    pub saturated: bool,
}

/// Means over all rows, in the Before/After/Improved layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub aggregate: bool,
    pub count: usize,
    pub before_sdr: f64,
    pub after_sdr: f64,
    pub improved_sdr: f64,
    pub si_snr_improvement: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregate: EvalAggregate,
}

impl EvalReport {
    /// One JSON line per scene, then the aggregate line.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for r in &self.rows {
            out.extend(serde_json::to_vec(r)?);
            out.push(b'\n');
        }
        out.extend(serde_json::to_vec(&self.aggregate)?);
        out.push(b'\n');
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Scores every sample: plain SDR before (mixture channel 1) and after
/// separation, plus SI-SNR for reference.
pub fn evaluate(params: &ModelParams, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Corpus("no scenes to evaluate".into()));
    }
    let rows = data
        .samples
        .par_iter()
        .map(|s| {
            let est = separate_sample(params, s)?;
            let mix = s.mixture.channel(0);
            let before_sdr = sdr(ScorePair::new(mix, &s.truth)?)?;
            let after_sdr = sdr(ScorePair::new(&est, &s.truth)?)?;
            let opts = SiSnrOptions::default();
            Ok(EvalRow {
                id: s.id.clone(),
                before_sdr,
                after_sdr,
                improved_sdr: after_sdr - before_sdr,
                before_si_snr: si_snr_with(ScorePair::new(mix, &s.truth)?, opts)?,
                after_si_snr: si_snr_with(ScorePair::new(&est, &s.truth)?, opts)?,
                lag: s.lag,
                saturated: s.saturated,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let aggregate = EvalAggregate {
        aggregate: true,
        count: rows.len(),
        before_sdr: mean(|r| r.before_sdr),
        after_sdr: mean(|r| r.after_sdr),
        improved_sdr: mean(|r| r.improved_sdr),
        si_snr_improvement: mean(|r| r.after_si_snr - r.before_si_snr),
    };
    Ok(EvalReport { rows, aggregate })
}

#[cfg(test)]
mod tests;
