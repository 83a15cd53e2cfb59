use std::collections::HashSet;
use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::voice::{generate_corpus, CorpusSpec};
use super::*;
use crate::alignment::gcc_phat_delay;

fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-0.3..0.3)).collect()
}

fn geometry() -> SceneGeometry {
    SceneGeometry {
        target: Point::new(1.5, 2.0, 1.5),
        interferer: Point::new(2.8, 0.8, 1.5),
        mic1: Point::new(1.43, 1.5, 1.5),
        mic2: Point::new(1.57, 1.5, 1.5),
    }
}

#[test]
fn anechoic_rir_is_one_delayed_impulse() {
    let room = RoomSpec::anechoic();
    let src = Point::new(1.0, 1.0, 1.5);
    let mic = Point::new(1.343, 1.0, 1.5);
    let h = synth_rir(&room, &src, &mic, 0).unwrap();
    assert_eq!(h.len(), 17);
    assert!(h[..16].iter().all(|v| *v == 0.0));
    assert!((h[16] - 1.0 / 0.343).abs() < 1e-12);

    let far = Point::new(2.0, 3.0, 2.0);
    let h = synth_rir(&room, &src, &far, 0).unwrap();
    let d = src.distance(&far);
    assert_eq!(h.len() - 1, (d * 16_000.0 / 343.0).round() as usize);
}

#[test]
fn rir_rejects_bad_geometry() {
    let room = RoomSpec::default();
    let p = Point::new(1.0, 1.0, 1.0);
    let q = Point::new(1.005, 1.0, 1.0);
    assert!(matches!(synth_rir(&room, &p, &q, 0), Err(Error::Geometry(_))));
    let out = Point::new(5.0, 1.0, 1.0);
    assert!(matches!(synth_rir(&room, &p, &out, 0), Err(Error::Geometry(_))));
}

#[test]
fn tail_envelope_is_minus_60_db_at_t60() {
    let room = RoomSpec::default();
    let db = 20.0 * room.tail_envelope(room.t60).log10();
    assert!((db + 60.0).abs() < 1.0, "{db}");
}

#[test]
fn measured_decay_matches_t60() {
    // Schroeder backward integration on the generated tail; the slope of
    // the -5..-25 dB span extrapolates to T60.
    let room = RoomSpec {
        t60: 0.5,
        ..RoomSpec::default()
    };
    let src = Point::new(1.0, 1.0, 1.5);
    let mic = Point::new(2.5, 2.5, 1.5);
    let h = synth_rir(&room, &src, &mic, 3).unwrap();
    let onset = h.iter().position(|v| *v != 0.0).unwrap();
    let tail = &h[onset + 1..];
    let mut edc: Vec<f64> = tail.iter().rev().scan(0.0, |acc, v| {
        *acc += v * v;
        Some(*acc)
    }).collect();
    edc.reverse();
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / edc[0]).log10()).collect();
    let t5 = db.iter().position(|d| *d <= -5.0).unwrap() as f64 / 16_000.0;
    let t25 = db.iter().position(|d| *d <= -25.0).unwrap() as f64 / 16_000.0;
    let t60 = 3.0 * (t25 - t5);
    assert!((t60 - 0.5).abs() < 0.05, "{t60}");
}

#[test]
fn tail_energy_equals_direct_energy_at_critical_distance() {
    let room = RoomSpec::default();
    let rc = room.critical_distance();
    let src = Point::new(1.0, 1.0, 1.5);
    let mic = Point::new(1.0 + rc, 1.0, 1.5);
    let h = synth_rir(&room, &src, &mic, 4).unwrap();
    let onset = h.iter().position(|v| *v != 0.0).unwrap();
    let direct = h[onset] * h[onset];
    let tail: f64 = h[onset + 1..].iter().map(|v| v * v).sum();
    assert!((10.0 * (direct / tail).log10()).abs() < 1e-9);
}

#[test]
fn convolution_matches_direct_sum() {
    let x = noise(300, 1);
    let h = noise(120, 2);
    let fast = convolve(&x, &h, 419);
    for n in 0..419 {
        let mut acc = 0.0;
        for k in 0..x.len() {
            if n >= k && n - k < h.len() {
                acc += x[k] * h[n - k];
            }
        }
        assert!((fast[n] - acc).abs() < 1e-12, "{n}");
    }
    let short = convolve(&x[..10], &h[..3], 12);
    assert!((short[11] - x[9] * h[2]).abs() < 1e-15);
}

#[test]
fn equidistant_anechoic_channels_are_identical() {
    let room = RoomSpec::anechoic();
    let mut g = geometry();
    g.target = Point::new(1.5, 2.0, 1.5);
    let clean = Waveform::mono(noise(2000, 3));
    let out = spatialize_source(&clean, &g.target, &g, &room, 5).unwrap();
    assert_eq!(out.num_channels(), 2);
    assert_eq!(out.len(), clean.len());
    assert_eq!(out.channel(0), out.channel(1));
}

#[test]
fn farther_mic_is_delayed_three_samples() {
    let room = RoomSpec::anechoic();
    let g = SceneGeometry {
        target: Point::new(1.0, 1.0, 1.5),
        interferer: Point::new(3.0, 3.0, 1.5),
        mic1: Point::new(1.5, 1.0, 1.5),
        mic2: Point::new(1.5643, 1.0, 1.5),
    };
    let mut clean = vec![0.0; 400];
    clean[10] = 1.0;
    let out = spatialize_source(&Waveform::mono(clean), &g.target, &g, &room, 0).unwrap();
    let first = |c: &[f64]| c.iter().position(|v| *v != 0.0).unwrap();
    assert_eq!(first(out.channel(1)) - first(out.channel(0)), 3);
}

#[test]
fn silence_spatializes_to_silence() {
    let g = geometry();
    let out = spatialize_source(&Waveform::mono(vec![0.0; 1000]), &g.target, &g, &RoomSpec::default(), 1).unwrap();
    assert!(out.channels().iter().flatten().all(|v| *v == 0.0));
}

#[test]
fn target_only_scene_equals_truth() {
    let t = Waveform::mono(noise(8000, 4));
    let i = Waveform::mono(noise(8000, 5));
    let spec = MixSpec {
        sir_db: None,
        delay_injection: 0,
        seed: 6,
    };
    let s = mix_scene(&t, &i, &geometry(), &RoomSpec::anechoic(), &spec).unwrap();
    assert_eq!(s.mixture.channel(0), s.truth.samples());
}

#[test]
fn injected_delay_is_measured_by_gcc_phat() {
    let t = Waveform::mono(noise(16_000, 7));
    let i = Waveform::mono(noise(16_000, 8));
    let spec = MixSpec {
        sir_db: Some(0.0),
        delay_injection: 80,
        seed: 9,
    };
    let s = mix_scene(&t, &i, &geometry(), &RoomSpec::default(), &spec).unwrap();
    let d = gcc_phat_delay(s.truth.samples(), s.mixture.channel(0), 1600).unwrap();
    assert_eq!(d.lag, 80);
}

#[test]
fn zero_db_sir_balances_energy_at_mic1() {
    let t = Waveform::mono(noise(12_000, 10));
    let i: Vec<f64> = noise(12_000, 11).iter().map(|v| v * 0.2).collect();
    let spec = MixSpec {
        sir_db: Some(0.0),
        delay_injection: 0,
        seed: 12,
    };
    let s = mix_scene(&t, &Waveform::mono(i), &geometry(), &RoomSpec::default(), &spec).unwrap();
    let e = |x: &[f64], g: f64| x.iter().map(|v| (g * v).powi(2)).sum::<f64>();
    let et = e(s.target_image.channel(0), s.target_gain);
    let ei = e(s.interferer_image.channel(0), s.interferer_gain);
    assert!((10.0 * (et / ei).log10()).abs() < 0.1);
}

#[test]
fn mixture_is_sum_of_components() {
    let t = Waveform::mono(noise(9000, 13));
    let i = Waveform::mono(noise(10_000, 14));
    let spec = MixSpec {
        sir_db: Some(-3.0),
        delay_injection: 40,
        seed: 15,
    };
    let s = mix_scene(&t, &i, &geometry(), &RoomSpec::default(), &spec).unwrap();
    assert_eq!(s.mixture.len(), 9000);
    assert!(s.mixture.peak() <= PEAK_LIMIT + 1e-12);
    for c in 0..2 {
        for n in 0..9000 {
            let want = s.target_gain * s.target_image.channel(c)[n]
                + s.interferer_gain * s.interferer_image.channel(c)[n]
                + s.noise.channel(c)[n];
            assert_eq!(s.mixture.channel(c)[n], want);
        }
    }
}

#[test]
fn degenerate_scenes_rejected() {
    let t = Waveform::mono(noise(4000, 16));
    let silent = Waveform::mono(vec![0.0; 4000]);
    let spec = MixSpec {
        sir_db: Some(0.0),
        delay_injection: 0,
        seed: 0,
    };
    assert!(matches!(
        mix_scene(&t, &silent, &geometry(), &RoomSpec::default(), &spec),
        Err(Error::DegenerateScene(_))
    ));
    let loud = MixSpec {
        sir_db: Some(20.0),
        ..spec
    };
    assert!(mix_scene(&t, &t, &geometry(), &RoomSpec::default(), &loud).is_err());
    let mut g = geometry();
    std::mem::swap(&mut g.target, &mut g.interferer);
    assert!(matches!(
        mix_scene(&t, &t, &g, &RoomSpec::default(), &spec),
        Err(Error::Geometry(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn sampled_geometries_are_valid(seed in any::<u64>()) {
        let room = RoomSpec::default();
        let spec = GeometrySpec::default();
        let g = SceneGeometry::sample(&room, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(g.validate(&room).is_ok());
        let c = g.mic_center();
        prop_assert!((g.target.distance(&c) - 0.5).abs() < 1e-9);
        prop_assert!((g.interferer.distance(&c) - 1.8).abs() < 1e-9);
        prop_assert!((g.mic1.distance(&g.mic2) - 0.14).abs() < 1e-9);
    }
}

fn small_corpus(dir: &Path, speakers: usize, utts: usize) {
    generate_corpus(
        dir,
        &CorpusSpec {
            speakers,
            utterances_per_speaker: utts,
            min_seconds: 0.4,
            max_seconds: 0.5,
            seed: 3,
        },
    )
    .unwrap();
}

fn quiet_sim() -> SimulationSpec {
    let mut sim = SimulationSpec::default();
    sim.room.noise_floor_db = None;
    sim.max_lag = 400;
    sim.max_delay_injection = 300;
    sim
}

#[test]
fn minimal_corpus_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    small_corpus(&corpus, 4, 2);
    let splits = SplitSpec {
        train: 4,
        valid: 0,
        test: 0,
    };
    let out = dir.path().join("scenes");
    let summary = build_manifest(&corpus, &splits, &quiet_sim(), 1, &out).unwrap();
    assert_eq!(summary.records.len(), 4);
    assert!(summary.skipped.is_empty());
    let loaded = load_manifest(&summary.manifest).unwrap();
    assert_eq!(loaded, summary.records);
    for r in &loaded {
        assert_ne!(r.target_speaker, r.interferer_speaker);
        assert_ne!(r.reference_utterance, r.target_utterance);
        assert!(r.reference_utterance.starts_with(&r.target_speaker));
        assert!((r.measured_lag - r.injected_delay as i64).abs() <= 1, "{r:?}");
        let mix = crate::dsp::read_wav(r.mix_path(&out)).unwrap();
        assert_eq!(mix.num_channels(), 2);
        assert_eq!(mix.len(), r.num_samples);
        assert!(r.truth_path(&out).exists() && r.reference_path(&out).exists());
    }
}

#[test]
fn manifests_are_reproducible_and_splits_disjoint() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    small_corpus(&corpus, 6, 3);
    let splits = SplitSpec {
        train: 6,
        valid: 2,
        test: 3,
    };
    let a = build_manifest(&corpus, &splits, &quiet_sim(), 7, dir.path().join("a")).unwrap();
    let b = build_manifest(&corpus, &splits, &quiet_sim(), 7, dir.path().join("b")).unwrap();
    let bytes = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(bytes(&a.manifest), bytes(&b.manifest));
    let r = &a.records[0];
    assert_eq!(
        bytes(&r.mix_path(&dir.path().join("a"))),
        bytes(&r.mix_path(&dir.path().join("b")))
    );

    let speakers = |split: Split| -> HashSet<String> {
        a.records
            .iter()
            .filter(|r| r.split == split)
            .flat_map(|r| [r.target_speaker.clone(), r.interferer_speaker.clone()])
            .collect()
    };
    assert!(speakers(Split::Train).is_disjoint(&speakers(Split::Test)));
    let ids: HashSet<_> = a.records.iter().map(|r| r.id.clone()).collect();
    assert_eq!(ids.len(), 11);
    let pairs: HashSet<_> = a
        .records
        .iter()
        .map(|r| (r.target_utterance.clone(), r.interferer_utterance.clone()))
        .collect();
    assert_eq!(pairs.len(), 11);
}

#[test]
fn shortfall_reports_available_pairs() {
    // Brute-force count over 2 train speakers with 2 files each.
    let files = [(0, 0), (0, 1), (1, 0), (1, 1)];
    let mut brute = 0;
    for t in &files {
        for i in &files {
            if t.0 != i.0 {
                brute += 1;
            }
        }
    }
    assert_eq!(count_pairs(&[2, 2]), brute);
    assert_eq!(count_pairs(&[1, 3, 2]), 3 * 3 + 2 * 4);

    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    small_corpus(&corpus, 4, 2);
    let splits = SplitSpec {
        train: brute + 1,
        valid: 0,
        test: 1,
    };
    match build_manifest(&corpus, &splits, &quiet_sim(), 1, dir.path().join("s")) {
        Err(Error::Shortfall {
            split,
            requested,
            available,
        }) => {
            assert_eq!(split, "train");
            assert_eq!(requested, brute + 1);
            assert_eq!(available, brute);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn corpus_problems_reported() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    small_corpus(&corpus, 3, 2);
    let splits = SplitSpec {
        train: 1,
        valid: 0,
        test: 0,
    };
    assert!(matches!(
        build_manifest(&corpus, &splits, &quiet_sim(), 1, dir.path().join("s")),
        Err(Error::Corpus(_))
    ));

    small_corpus(&dir.path().join("corpus4"), 4, 2);
    let bad = dir.path().join("corpus4/spk_000/broken.wav");
    std::fs::write(&bad, b"not a wav").unwrap();
    let s = build_manifest(dir.path().join("corpus4"), &splits, &quiet_sim(), 1, dir.path().join("t")).unwrap();
    assert_eq!(s.skipped.len(), 1);
    assert_eq!(s.skipped[0].0, bad);
    assert_eq!(s.records.len(), 1);
}
