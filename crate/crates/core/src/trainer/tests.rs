use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::alignment::gcc_phat_delay;
use crate::embedding::{Background, EmbeddingCache, EmbeddingExtractor};
use crate::model::ConstantMask;
use crate::scene::voice::{generate_corpus, CorpusSpec};
use crate::scene::{build_manifest, SceneRecord, SimulationSpec, SplitSpec};
use crate::tensor::{Tensor, Variable};

fn scalar(name: &str, v: f64, g: f64) -> Variable {
    let mut var = Variable::new(name, Tensor::vector(vec![v]));
    var.grad = Tensor::vector(vec![g]);
    var
}

#[test]
fn adam_zero_gradient_changes_nothing() {
    let mut vars = vec![
        Variable::new("a", Tensor::vector(vec![1.0, -2.0])),
        Variable::new("b", Tensor::full(&[2, 2], 0.5)),
    ];
    let before = vars.clone();
    let mut st = AdamState::new(&vars);
    adam_step(&mut vars, &mut st, 1e-3).unwrap();
    assert_eq!(vars, before);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let lr = 1e-4;
    let mut vars = vec![scalar("p", 0.0, 1.0)];
    let mut st = AdamState::new(&vars);
    adam_step(&mut vars, &mut st, lr).unwrap();
    let p = vars[0].value.data()[0];
    assert!((p + lr).abs() < 1e-8 * lr, "{p}");
    assert_eq!(vars[0].grad.data()[0], 0.0);
    assert_eq!(st.step, 1);
}

#[test]
fn adam_matches_scalar_recurrence() {
    let lr = 0.01;
    let mut vars = vec![scalar("p", 0.7, 0.0)];
    let mut st = AdamState::new(&vars);
    let (mut p, mut m, mut v) = (0.7_f64, 0.0_f64, 0.0_f64);
    for (t, g) in [0.3, -1.2, 2.5].iter().enumerate() {
        vars[0].grad = Tensor::vector(vec![*g]);
        adam_step(&mut vars, &mut st, lr).unwrap();
        let t = t as i32 + 1;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        p -= lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        assert!((vars[0].value.data()[0] - p).abs() < 1e-15);
    }
}

#[test]
fn adam_updates_only_variables_with_gradient() {
    let mut vars = vec![scalar("moving", 1.0, 0.5), scalar("still", 1.0, 0.0)];
    let mut st = AdamState::new(&vars);
    adam_step(&mut vars, &mut st, 0.1).unwrap();
    assert_ne!(vars[0].value.data()[0], 1.0);
    assert_eq!(vars[1].value.data()[0], 1.0);
    // Momentum from the first step does not leak into a zero-gradient step.
    let snapshot = vars[0].value.clone();
    adam_step(&mut vars, &mut st, 0.1).unwrap();
    assert_eq!(vars[0].value, snapshot);
}

#[test]
fn adam_rejects_nan_gradient_untouched() {
    let mut vars = vec![scalar("ok", 1.0, 0.5), scalar("fc3.bias", 2.0, f64::NAN)];
    let mut st = AdamState::new(&vars);
    match adam_step(&mut vars, &mut st, 0.1) {
        Err(Error::NanGradient(name)) => assert_eq!(name, "fc3.bias"),
        other => panic!("{other:?}"),
    }
    assert_eq!(vars[0].value.data()[0], 1.0);
    assert_eq!(st.step, 0);
}

#[test]
fn rng_state_round_trip_continues_stream() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    rng.set_stream(1);
    for _ in 0..13 {
        rng.random::<u32>();
    }
    let mut copy = RngState::capture(&rng).restore().unwrap();
    for _ in 0..50 {
        assert_eq!(rng.random::<u64>(), copy.random::<u64>());
    }
}

fn tiny_model(variant: Variant) -> ModelConfig {
    ModelConfig::micro(variant, crate::dsp::StftConfig::default(), 4, 8)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let params = build_model(&tiny_model(Variant::Dual), 3).unwrap();
    let mut ck = Checkpoint::initial(params);
    ck.adam.m[0].data_mut()[0] = 0.25;
    ck.adam.v[2].data_mut()[1] = 1e-300;
    ck.adam.step = 17;
    ck.epoch = 4;
    ck.best_valid_si_snr = Some(3.0 / 7.0);
    ck.rng = Some(RngState::capture(&ChaCha8Rng::seed_from_u64(1)));
    ck.train = Some(TrainConfig::new(tiny_model(Variant::Dual)));
    ck.background = Some(Background {
        mean: (0..80).map(|i| i as f64 / 3.0).collect(),
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    assert!(!dir.path().join("x.ckpt.tmp").exists());
}

#[test]
fn corrupt_checkpoints_rejected() {
    let ck = Checkpoint::initial(build_model(&tiny_model(Variant::SingleHalf), 0).unwrap());
    let bytes = ck.to_bytes().unwrap();
    let p = Path::new("mem.ckpt");
    let fmt = |b: &[u8]| matches!(Checkpoint::from_bytes(b, p), Err(Error::Format { .. }));
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 1;
    assert!(fmt(&bad_magic));
    let mut bad_version = bytes.clone();
    bad_version[8] = 99;
    assert!(fmt(&bad_version));
    assert!(fmt(&bytes[..bytes.len() - 8]));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(fmt(&trailing));
    assert!(fmt(&bytes[..10]));
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    base: PathBuf,
    records: Vec<SceneRecord>,
}

fn fixture(scenes: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    generate_corpus(
        root.join("corpus"),
        &CorpusSpec {
            speakers: 4,
            utterances_per_speaker: 2,
            min_seconds: 0.9,
            max_seconds: 1.0,
            seed: 8,
        },
    )
    .unwrap();
    let mut sim = SimulationSpec::default();
    sim.max_delay_injection = 200;
    sim.max_lag = 400;
    let split = SplitSpec {
        train: scenes,
        valid: 0,
        test: 0,
    };
    let s = build_manifest(root.join("corpus"), &split, &sim, 2, root.join("scenes")).unwrap();
    Fixture {
        _dir: dir,
        base: root.join("scenes"),
        root,
        records: s.records,
    }
}

impl Fixture {
    fn dataset(&self, emb_dim: usize) -> Dataset {
        Dataset::load(&self.records, &self.base, 400, &EmbeddingExtractor::new(emb_dim), None).unwrap()
    }

    fn extractor_with_background(&self, emb_dim: usize) -> EmbeddingExtractor {
        let bg = fit_background(&self.records, &self.base).unwrap();
        EmbeddingExtractor::new(emb_dim).with_background(Some(bg)).unwrap()
    }
}

#[test]
fn prepared_truth_is_aligned_and_shaped() {
    let fx = fixture(2);
    let mut rec = fx.records[0].clone();
    // Re-render the truth with a known 80-sample advance.
    let truth = crate::dsp::read_wav(rec.truth_path(&fx.base)).unwrap();
    let shifted = crate::alignment::shift(truth.samples(), rec.injected_delay as i64 - 80, truth.len());
    crate::dsp::write_wav(
        rec.truth_path(&fx.base),
        &crate::dsp::Waveform::mono(shifted),
        crate::dsp::SampleFormat::Float32,
    )
    .unwrap();
    rec.injected_delay = 80;
    let ex = EmbeddingExtractor::new(8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let dual = prepare_sample(&rec, &fx.base, Variant::Dual, 400, &ex, None, Some(&mut rng)).unwrap();
    assert_eq!(dual.input.num_channels(), 2);
    assert_eq!(dual.lag, -80);
    let residual = gcc_phat_delay(dual.input.channel(0), &dual.truth, 400).unwrap();
    assert_eq!(residual.lag, 0);
    assert_eq!(dual.embedding.len(), 8);

    let mix = crate::dsp::read_wav(rec.mix_path(&fx.base)).unwrap();
    for _ in 0..4 {
        let s = prepare_sample::<ChaCha8Rng>(&rec, &fx.base, Variant::SingleEqual, 400, &ex, None, None).unwrap();
        assert_eq!(s.input.num_channels(), 1);
        assert_eq!(s.input.samples(), mix.channel(0));
    }
    let mut seen = [false; 2];
    let sample = load_sample(&rec, &fx.base, 400, &ex, None).unwrap();
    for _ in 0..32 {
        let c = sample.pick_channel(Variant::SingleHalf, Some(&mut rng)).unwrap();
        seen[c] = true;
    }
    assert_eq!(seen, [true, true]);
}

#[test]
fn unreadable_scene_is_skipped_and_counted() {
    let fx = fixture(3);
    std::fs::write(fx.records[1].mix_path(&fx.base), b"junk").unwrap();
    let d = fx.dataset(8);
    assert_eq!(d.len(), 2);
    assert_eq!(d.skipped.len(), 1);
    assert_eq!(d.skipped[0].0, fx.records[1].id);
}

fn quick_config(variant: Variant) -> TrainConfig {
    let mut cfg = TrainConfig::new(tiny_model(variant));
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 2;
    cfg.max_epochs = 4;
    cfg.patience = 10;
    cfg.seed = 11;
    cfg.max_lag = 400;
    cfg.crop_seconds = 0.6;
    cfg
}

#[test]
fn frozen_schedule_stops_after_two_epochs() {
    let fx = fixture(3);
    let d = fx.dataset(8);
    let mut cfg = quick_config(Variant::SingleHalf);
    cfg.learning_rate = 0.0;
    cfg.patience = 1;
    let out = fit(&d, &d, &cfg, fx.root.join("run"), &FitOptions::default()).unwrap();
    assert_eq!(out.stop, StopReason::Patience);
    assert_eq!(out.history.len(), 2);
    assert_eq!(out.history[0].2, out.history[1].2);
    let init = build_model(&cfg.model, cfg.seed).unwrap();
    assert_eq!(out.best.params, init);
    let log = std::fs::read_to_string(fx.root.join("run").join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn background_fits_distinct_references() {
    let fx = fixture(4);
    let bg = fit_background(&fx.records, &fx.base).unwrap();
    let mut refs: Vec<PathBuf> = fx.records.iter().map(|r| r.reference_path(&fx.base)).collect();
    refs.sort();
    refs.dedup();
    let ex = EmbeddingExtractor::default();
    let stats: Vec<Vec<f64>> = refs
        .iter()
        .map(|p| ex.statistics(crate::dsp::read_wav(p).unwrap().samples()).unwrap())
        .collect();
    let k = stats.len() as f64;
    for i in 0..80 {
        let m = stats.iter().map(|s| s[i]).sum::<f64>() / k;
        assert!((bg.mean[i] - m).abs() < 1e-12);
    }
    // Duplicated records do not reweight the fit.
    let mut doubled = fx.records.clone();
    doubled.extend(fx.records.iter().cloned());
    assert_eq!(fit_background(&doubled, &fx.base).unwrap(), bg);
}

#[test]
fn background_travels_with_checkpoints() {
    let fx = fixture(3);
    let ex = fx.extractor_with_background(8);
    let d = Dataset::load(&fx.records, &fx.base, 400, &ex, None).unwrap();
    assert_eq!(d.background.as_ref(), ex.background());
    let mut cfg = quick_config(Variant::SingleHalf);
    cfg.max_epochs = 1;
    let out = fit(&d, &d, &cfg, fx.root.join("run"), &FitOptions::default()).unwrap();
    assert_eq!(out.best.background.as_ref(), ex.background());
    let saved = Checkpoint::load(fx.root.join("run").join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(saved.background, d.background);

    // Mixing embeddings from different extractors is refused.
    let plain = fx.dataset(8);
    assert!(matches!(
        fit(&d, &plain, &cfg, fx.root.join("mixed"), &FitOptions::default()),
        Err(Error::Config(_))
    ));
    cfg.max_epochs = 2;
    let resume = FitOptions {
        resume: true,
        ..Default::default()
    };
    assert!(matches!(
        fit(&plain, &plain, &cfg, fx.root.join("run"), &resume),
        Err(Error::Config(_))
    ));
    let stale = EmbeddingCache::new(8);
    assert!(matches!(
        Dataset::load(&fx.records, &fx.base, 400, &ex, Some(&stale)),
        Err(Error::Config(_))
    ));
}

#[test]
fn training_is_deterministic_and_resumable() {
    let fx = fixture(4);
    let ex = fx.extractor_with_background(8);
    let d = Dataset::load(&fx.records, &fx.base, 400, &ex, None).unwrap();
    let cfg = quick_config(Variant::Dual);
    let a = fit(&d, &d, &cfg, fx.root.join("a"), &FitOptions::default()).unwrap();
    let b = fit(&d, &d, &cfg, fx.root.join("b"), &FitOptions::default()).unwrap();
    let bytes = |dir: &str, f: &str| std::fs::read(fx.root.join(dir).join(f)).unwrap();
    assert_eq!(bytes("a", BEST_CHECKPOINT), bytes("b", BEST_CHECKPOINT));
    assert_eq!(a.history, b.history);
    assert!(a.last.adam.step > 0);
    assert_ne!(a.last.params, build_model(&cfg.model, cfg.seed).unwrap());

    let halted = FitOptions {
        halt_after_epoch: Some(2),
        ..Default::default()
    };
    let first = fit(&d, &d, &cfg, fx.root.join("c"), &halted).unwrap();
    assert_eq!(first.stop, StopReason::Halted);
    let resume = FitOptions {
        resume: true,
        ..Default::default()
    };
    let rest = fit(&d, &d, &cfg, fx.root.join("c"), &resume).unwrap();
    assert_eq!(rest.history.first().map(|h| h.0), Some(3));
    assert_eq!(bytes("a", BEST_CHECKPOINT), bytes("c", BEST_CHECKPOINT));
    assert_eq!(bytes("a", LAST_CHECKPOINT), bytes("c", LAST_CHECKPOINT));

    let mut other = cfg.clone();
    other.seed += 1;
    assert!(matches!(
        fit(&d, &d, &other, fx.root.join("c"), &resume),
        Err(Error::Config(_))
    ));
}

#[test]
fn best_checkpoint_tracks_best_validation() {
    let fx = fixture(4);
    let d = fx.dataset(8);
    let mut cfg = quick_config(Variant::SingleEqual);
    cfg.max_epochs = 5;
    cfg.learning_rate = 3e-2;
    let out = fit(&d, &d, &cfg, fx.root.join("run"), &FitOptions::default()).unwrap();
    let best = out.history.iter().map(|h| h.2).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best.best_valid_si_snr, Some(best));
    let score = mean_si_snr(&out.best.params, &d, SiSnrOptions::default()).unwrap();
    assert_eq!(score, best);
    let disk = Checkpoint::load(fx.root.join("run").join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(disk, out.best);
}

#[test]
fn max_steps_caps_training() {
    let fx = fixture(4);
    let d = fx.dataset(8);
    let mut cfg = quick_config(Variant::Dual);
    cfg.batch_size = 1;
    cfg.max_steps = Some(3);
    let out = fit(&d, &d, &cfg, fx.root.join("run"), &FitOptions::default()).unwrap();
    assert_eq!(out.last.adam.step, 3);
    assert_eq!(out.stop, StopReason::MaxSteps);
}

#[test]
fn non_finite_input_reports_divergence() {
    let fx = fixture(2);
    let mut d = fx.dataset(8);
    let ch: Vec<Vec<f64>> = d.samples[0]
        .mixture
        .channels()
        .iter()
        .map(|c| c.iter().map(|_| f64::NAN).collect())
        .collect();
    for s in &mut d.samples {
        s.mixture = crate::dsp::Waveform::from_channels(ch.clone()).unwrap();
        s.truth.truncate(ch[0].len());
        s.truth.resize(ch[0].len(), 0.01);
    }
    match fit(&d, &d, &quick_config(Variant::Dual), fx.root.join("run"), &FitOptions::default()) {
        Err(Error::Diverged { epoch, last_good }) => {
            assert_eq!(epoch, 1);
            assert!(last_good.is_none());
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn empty_sets_and_bad_configs_rejected() {
    let fx = fixture(2);
    let d = fx.dataset(8);
    let empty = Dataset::default();
    let cfg = quick_config(Variant::Dual);
    assert!(matches!(fit(&empty, &d, &cfg, fx.root.join("r"), &FitOptions::default()), Err(Error::Corpus(_))));
    assert!(matches!(fit(&d, &empty, &cfg, fx.root.join("r"), &FitOptions::default()), Err(Error::Corpus(_))));
    let mut bad = cfg.clone();
    bad.batch_size = 0;
    assert!(bad.validate().is_err());
    bad = cfg.clone();
    bad.learning_rate = f64::NAN;
    assert!(bad.validate().is_err());
    bad = cfg;
    bad.patience = 0;
    assert!(bad.validate().is_err());
}

#[test]
fn pass_through_mask_scores_zero_improvement() {
    let fx = fixture(3);
    let d = fx.dataset(8);
    let mut p = build_model(&tiny_model(Variant::Dual), 1).unwrap();
    p.force_constant_mask(ConstantMask::One);
    let rep = evaluate(&p, &d).unwrap();
    assert_eq!(rep.rows.len(), 3);
    // Exact on the fully overlapped interior; the uncovered tail after
    // the last frame costs a few thousandths of a dB.
    for r in &rep.rows {
        assert!(r.improved_sdr.abs() < 1e-2, "{r:?}");
    }
    let stft = Stft::new(p.config().stft).unwrap();
    for s in &d.samples {
        let est = separate_sample(&p, s).unwrap();
        let mix = s.mixture.channel(0);
        for i in stft.interior(mix.len()) {
            assert!((est[i] - mix[i]).abs() < 1e-6);
        }
    }
    let path = fx.root.join("eval/report.jsonl");
    rep.write_jsonl(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    let agg: EvalAggregate = serde_json::from_str(lines[3]).unwrap();
    assert!(agg.aggregate);
    assert_eq!(agg.count, 3);
    let row: EvalRow = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(row, rep.rows[0]);
}

#[test]
fn train_config_json_defaults() {
    let model = tiny_model(Variant::SingleHalf);
    let json = format!("{{\"model\": {}}}", serde_json::to_string(&model).unwrap());
    let cfg: TrainConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(cfg, TrainConfig::new(model));
    assert_eq!(cfg.learning_rate, 1e-4);
    assert_eq!(cfg.patience, 5);
    let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
}
