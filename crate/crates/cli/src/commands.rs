use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;

use lstmformer::alignment::gcc_phat_delay;
use lstmformer::dsp::{read_wav, write_wav, SampleFormat, Waveform};
use lstmformer::embedding::{EmbeddingCache, EmbeddingExtractor};
use lstmformer::model::{build_model, count_macs, count_params, separate_utterance, ModelConfig};
use lstmformer::scene::voice::{generate_corpus, CorpusSpec};
use lstmformer::scene::{build_manifest, load_manifest, SceneRecord, SimulationSpec, Split, SplitSpec};
use lstmformer::trainer::{evaluate, fit, fit_background, Checkpoint, Dataset, FitOptions, TrainConfig};
use lstmformer::{Error, Result};

use crate::{
    AlignArgs, Command, CorpusArgs, EmbedArgs, EvaluateArgs, InitArgs, InspectArgs, SeparateArgs,
    SimulateArgs, TrainArgs,
};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Corpus(a) => corpus(a),
        Command::Simulate(a) => simulate(a),
        Command::Align(a) => align(a),
        Command::Embed(a) => embed(a),
        Command::Train(a) => train(a),
        Command::Separate(a) => separate(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Inspect(a) => inspect(a),
        Command::Init(a) => init(a),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Scene paths in a manifest are relative to its directory.
fn manifest_base(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn records_in(manifest: &Path, split: Split) -> Result<Vec<SceneRecord>> {
    let records: Vec<_> = load_manifest(manifest)?
        .into_iter()
        .filter(|r| r.split == split)
        .collect();
    if records.is_empty() {
        return Err(Error::Corpus(format!(
            "{} has no {} scenes",
            manifest.display(),
            split.name()
        )));
    }
    Ok(records)
}

fn corpus(a: CorpusArgs) -> Result<()> {
    let spec = CorpusSpec {
        speakers: a.speakers,
        utterances_per_speaker: a.utterances,
        min_seconds: a.min_seconds,
        max_seconds: a.max_seconds,
        seed: a.seed,
    };
    let voices = generate_corpus(&a.out, &spec)?;
    println!(
        "wrote {} speakers x {} utterances to {}",
        voices.len(),
        a.utterances,
        a.out.display()
    );
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let sim = match &a.sim {
        Some(p) => read_json::<SimulationSpec>(p)?,
        None => SimulationSpec::default(),
    };
    let fifth = (a.scenes as f64 / 5.0).round() as usize;
    let valid = a.valid_scenes.unwrap_or(fifth);
    let test = a.test_scenes.unwrap_or(fifth);
    let train = a.scenes.checked_sub(valid + test).ok_or_else(|| {
        Error::Config(format!(
            "{} scenes cannot hold {valid} valid and {test} test scenes",
            a.scenes
        ))
    })?;
    let split = SplitSpec { train, valid, test };
    let summary = build_manifest(&a.corpus, &split, &sim, a.seed, &a.out)?;
    for (path, reason) in &summary.skipped {
        warn!("skipped {}: {reason}", path.display());
    }
    println!(
        "wrote {} scenes (train {train}, valid {valid}, test {test}) to {}; {} corpus file(s) skipped",
        summary.records.len(),
        summary.manifest.display(),
        summary.skipped.len()
    );
    Ok(())
}

/// `lag` is positive when mixture channel 1 lags the truth, as in the
/// manifest's `measured_lag`.
#[derive(Serialize)]
struct AlignRow {
    id: String,
    lag: i64,
    peak_strength: f64,
    saturated: bool,
    injected_delay: usize,
    measured_lag: i64,
}

fn align(a: AlignArgs) -> Result<()> {
    let base = manifest_base(&a.manifest);
    let records = load_manifest(&a.manifest)?;
    let mut rows = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for r in &records {
        let aligned = read_wav(r.truth_path(&base)).and_then(|truth| {
            let mix = read_wav(r.mix_path(&base))?;
            gcc_phat_delay(truth.samples(), mix.channel(0), a.max_lag)
        });
        match aligned {
            Ok(est) => rows.push(AlignRow {
                id: r.id.clone(),
                lag: est.lag,
                peak_strength: est.peak_strength,
                saturated: a.max_lag > 0 && est.lag.unsigned_abs() as usize == a.max_lag,
                injected_delay: r.injected_delay,
                measured_lag: r.measured_lag,
            }),
            Err(e) if e.is_data_error() => {
                warn!("skipping scene {}: {e}", r.id);
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    write_text(&a.report, &jsonl(&rows)?)?;
    let saturated = rows.iter().filter(|r| r.saturated).count();
    println!(
        "aligned {} scenes ({saturated} at the lag bound, {skipped} skipped) -> {}",
        rows.len(),
        a.report.display()
    );
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<()> {
    let base = manifest_base(&a.manifest);
    let records = load_manifest(&a.manifest)?;
    let background = if a.no_background {
        None
    } else {
        Some(fit_background(&records_in(&a.manifest, Split::Train)?, &base)?)
    };
    let extractor = EmbeddingExtractor::new(a.dim).with_background(background)?;
    let mut cache = EmbeddingCache::for_extractor(&extractor);
    for r in &records {
        let emb = read_wav(r.reference_path(&base))
            .and_then(|w| extractor.compute(&w, r.reference.display().to_string()));
        match emb {
            Ok(e) => cache.insert(r.id.clone(), &e)?,
            Err(e) if e.is_data_error() => warn!("skipping scene {}: {e}", r.id),
            Err(e) => return Err(e),
        }
    }
    cache.save(&a.cache)?;
    println!("cached {} embeddings (dim {}) at {}", cache.len(), a.dim, a.cache.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = read_json(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(e) = a.max_epochs {
        cfg.max_epochs = e;
    }
    cfg.validate()?;
    let valid_manifest = a.valid.clone().unwrap_or_else(|| a.manifest.clone());
    let train_records = records_in(&a.manifest, Split::Train)?;
    let valid_records = records_in(&valid_manifest, Split::Valid)?;
    let train_base = manifest_base(&a.manifest);

    let cache = a.cache.as_ref().map(EmbeddingCache::load).transpose()?;
    let background = match &cache {
        Some(c) => c.background().cloned(),
        None if a.no_background => None,
        None => Some(fit_background(&train_records, &train_base)?),
    };
    let extractor = EmbeddingExtractor::new(cfg.model.emb_dim).with_background(background)?;
    let load = |records: &[SceneRecord], manifest: &Path| {
        let d = Dataset::load(records, &manifest_base(manifest), cfg.max_lag, &extractor, cache.as_ref())?;
        if !d.skipped.is_empty() {
            warn!("{} scene(s) skipped from {}", d.skipped.len(), manifest.display());
        }
        Ok::<_, Error>(d)
    };
    let train_set = load(&train_records, &a.manifest)?;
    let valid_set = load(&valid_records, &valid_manifest)?;
    info!(
        "training {} on {} scenes, validating on {}",
        cfg.variant(),
        train_set.len(),
        valid_set.len()
    );
    let opts = FitOptions {
        resume: a.resume,
        checkpoint_every: a.checkpoint_every,
        halt_after_epoch: a.halt_after,
    };
    let out = fit(&train_set, &valid_set, &cfg, &a.out, &opts)?;
    println!(
        "stopped ({:?}) after {} epochs; best valid SI-SNR {:.3} dB at epoch {} -> {}",
        out.stop,
        out.last.epoch,
        out.best.best_valid_si_snr.unwrap_or(f64::NAN),
        out.best.epoch,
        a.out.display()
    );
    Ok(())
}

fn load_extractor(ck: &Checkpoint) -> Result<EmbeddingExtractor> {
    EmbeddingExtractor::new(ck.params.config().emb_dim).with_background(ck.background.clone())
}

fn separate(a: SeparateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let reference = read_wav(&a.reference)?;
    if reference.num_channels() != 1 {
        return Err(Error::Format {
            path: a.reference.clone(),
            reason: "enrollment utterance must be mono".into(),
        });
    }
    let emb = load_extractor(&ck)?.compute(&reference, a.reference.display().to_string())?;
    let mut mix = read_wav(&a.mix)?;
    if ck.params.variant().channels() == 1 && mix.num_channels() > 1 {
        mix = mix.split_channel(0);
    }
    let out: Waveform = separate_utterance(&ck.params, &mix, &emb)?;
    write_wav(&a.out, &out, SampleFormat::Float32)?;
    println!("wrote {} samples to {}", out.len(), a.out.display());
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let records = records_in(&a.manifest, a.split)?;
    let max_lag = ck
        .train
        .as_ref()
        .map(|t| t.max_lag)
        .unwrap_or(lstmformer::alignment::DEFAULT_MAX_LAG);
    let data = Dataset::load(&records, &manifest_base(&a.manifest), max_lag, &load_extractor(&ck)?, None)?;
    if !data.skipped.is_empty() {
        warn!("{} scene(s) skipped", data.skipped.len());
    }
    let report = evaluate(&ck.params, &data)?;
    report.write_jsonl(&a.report)?;
    let g = &report.aggregate;
    println!("{:<8} {:>7} {:>10} {:>10} {:>12}", "scenes", "model", "before_sdr", "after_sdr", "improved_sdr");
    println!(
        "{:<8} {:>7} {:>10.3} {:>10.3} {:>12.3}",
        g.count,
        ck.params.variant().name(),
        g.before_sdr,
        g.after_sdr,
        g.improved_sdr
    );
    Ok(())
}

/// Reads either a TrainConfig (has a `model` key) or a bare ModelConfig.
fn model_config_from(path: &Path) -> Result<ModelConfig> {
    let value: serde_json::Value = read_json(path)?;
    let parsed = if value.get("model").is_some() {
        serde_json::from_value::<TrainConfig>(value).map(|t| t.model)
    } else {
        serde_json::from_value::<ModelConfig>(value)
    };
    parsed.map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[derive(Serialize)]
struct Inspection {
    variant: String,
    params: usize,
    seconds: f64,
    frames: usize,
    macs: u64,
    transform_macs: u64,
    layers: Vec<(String, u64)>,
}

fn inspect(a: InspectArgs) -> Result<()> {
    let cfg = match (&a.config, a.variant) {
        (Some(p), _) => model_config_from(p)?,
        (None, Some(v)) => ModelConfig::preset(v),
        (None, None) => return Err(Error::Config("pass --config or --variant".into())),
    };
    cfg.validate()?;
    if !(a.seconds >= 0.0) {
        return Err(Error::Config("--seconds must be ≥ 0".into()));
    }
    let params = count_params(&build_model(&cfg, 0)?);
    let macs = count_macs(&cfg, a.seconds);
    let row = Inspection {
        variant: cfg.variant.name().to_string(),
        params,
        seconds: a.seconds,
        frames: macs.frames,
        macs: macs.network,
        transform_macs: macs.transforms,
        layers: macs.layers,
    };
    if a.json {
        println!("{}", serde_json::to_string(&row)?);
        return Ok(());
    }
    println!("variant         {}", row.variant);
    println!("params          {} ({:.2}M)", row.params, row.params as f64 / 1e6);
    println!(
        "macs            {} ({:.2}M per {} s, {} frames)",
        row.macs,
        row.macs as f64 / 1e6,
        row.seconds,
        row.frames
    );
    println!("transform_macs  {} (fixed STFT/iSTFT, not in macs)", row.transform_macs);
    for (name, m) in &row.layers {
        println!("  {name:<10} {m}");
    }
    Ok(())
}

fn init(a: InitArgs) -> Result<()> {
    let model = match a.micro {
        Some(w) => ModelConfig::micro(a.variant, Default::default(), w, lstmformer::embedding::EMBEDDING_DIM),
        None => ModelConfig::preset(a.variant),
    };
    let cfg = TrainConfig::new(model);
    cfg.validate()?;
    write_text(&a.out, &(serde_json::to_string_pretty(&cfg)? + "\n"))?;
    println!("wrote {} config to {}", a.variant, a.out.display());
    Ok(())
}
