//! Synthetic speech-like corpus used in place of clean read speech.
//!
//! Each speaker has a fundamental frequency, a vocal-tract scale that moves
//! all formants, a spectral tilt and a speaking rate. Utterances are strings
//! of voiced syllables (harmonic source shaped by formant resonances),
//! optionally preceded by a fricative noise burst, separated by short gaps.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{write_wav, SampleFormat, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Leading and trailing silence of every utterance, in samples.
pub const EDGE_SILENCE: usize = 1600;

// (F1, F2, F3) in Hz for a reference adult vocal tract.
const VOWELS: [[f64; 3]; 8] = [
    [730.0, 1090.0, 2440.0],
    [530.0, 1840.0, 2480.0],
    [270.0, 2290.0, 3010.0],
    [570.0, 840.0, 2410.0],
    [300.0, 870.0, 2240.0],
    [660.0, 1720.0, 2410.0],
    [440.0, 1020.0, 2240.0],
    [490.0, 1350.0, 1690.0],
];
const BANDWIDTHS: [f64; 3] = [80.0, 100.0, 140.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoiceProfile {
    pub f0: f64,
    /// Multiplies every formant frequency.
    pub formant_scale: f64,
    /// Source roll-off in dB per octave (negative).
    pub tilt_db: f64,
    pub syllables_per_sec: f64,
    /// Relative level of aspiration noise in voiced segments.
    pub breathiness: f64,
    /// Indices into the vowel table this speaker favours.
    pub vowel_bias: Vec<usize>,
}

impl VoiceProfile {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let f0 = (85f64.ln() + rng.random::<f64>() * (255f64 / 85.0).ln()).exp();
        let mut vowel_bias: Vec<usize> = (0..VOWELS.len()).collect();
        for i in (1..vowel_bias.len()).rev() {
            vowel_bias.swap(i, rng.random_range(0..=i));
        }
        vowel_bias.truncate(4);
        Self {
            f0,
            formant_scale: rng.random_range(0.85..1.25),
            tilt_db: rng.random_range(-14.0..-8.0),
            syllables_per_sec: rng.random_range(3.0..5.5),
            breathiness: rng.random_range(0.005..0.04),
            vowel_bias,
        }
    }
}

fn formant_gain(f: f64, formants: &[f64; 3]) -> f64 {
    formants
        .iter()
        .zip(BANDWIDTHS)
        .map(|(fc, bw)| {
            let fc2 = fc * fc;
            fc2 / ((fc2 - f * f).powi(2) + (bw * f).powi(2)).sqrt()
        })
        .product()
}

/// One utterance of roughly `seconds` duration (excluding edge silence).
pub fn synthesize_utterance(voice: &VoiceProfile, seconds: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = SAMPLE_RATE as f64;
    let body = (seconds * fs) as usize;
    let mut out = vec![0.0; EDGE_SILENCE];
    let mut harm_phase = 0.0_f64;
    while out.len() < EDGE_SILENCE + body {
        // optional fricative onset
        if rng.random::<f64>() < 0.4 {
            let n = (rng.random_range(0.02..0.06) * fs) as usize;
            let mut prev = 0.0;
            let level = rng.random_range(0.01..0.03);
            for i in 0..n {
                let w: f64 = StandardNormal.sample(&mut rng);
                // first difference tilts the noise towards high frequencies
                let v = w - prev;
                prev = w;
                let env = (std::f64::consts::PI * i as f64 / n as f64).sin();
                out.push(level * env * v);
            }
        }
        let dur = rng.random_range(0.6..1.4) / voice.syllables_per_sec;
        let n = (dur * fs) as usize;
        let vowel = if rng.random::<f64>() < 0.75 {
            voice.vowel_bias[rng.random_range(0..voice.vowel_bias.len())]
        } else {
            rng.random_range(0..VOWELS.len())
        };
        let next = VOWELS[rng.random_range(0..VOWELS.len())];
        let accent = rng.random_range(-0.12..0.18);
        let glide = rng.random_range(-0.1..0.1);
        let level = rng.random_range(0.5..1.0);
        let block = 80;
        let mut amps: Vec<f64> = Vec::new();
        for start in (0..n).step_by(block) {
            let pos = start as f64 / n as f64;
            let f0 = voice.f0 * (1.0 + accent * (std::f64::consts::PI * pos).sin() + glide * pos);
            let formants: [f64; 3] = std::array::from_fn(|k| {
                let a = VOWELS[vowel][k];
                let b = next[k];
                voice.formant_scale * (a + (b - a) * 0.4 * pos * pos)
            });
            let n_harm = ((7600.0 / f0) as usize).max(1);
            amps.clear();
            let mut norm = 0.0;
            for h in 1..=n_harm {
                let f = h as f64 * f0;
                let tilt = 10f64.powf(voice.tilt_db * (f / f0).log2() / 20.0);
                let a = tilt * formant_gain(f, &formants);
                norm += a * a;
                amps.push(a);
            }
            let scale = 0.12 * level / norm.sqrt().max(1e-12);
            for i in start..(start + block).min(n) {
                let pos = i as f64 / n as f64;
                let env = if pos < 0.15 {
                    0.5 - 0.5 * (std::f64::consts::PI * pos / 0.15).cos()
                } else if pos > 0.8 {
                    0.5 + 0.5 * (std::f64::consts::PI * (pos - 0.8) / 0.2).cos()
                } else {
                    1.0
                };
                harm_phase = (harm_phase + TAU * f0 / fs) % TAU;
                let mut s = 0.0;
                for (h, a) in amps.iter().enumerate() {
                    s += a * ((h + 1) as f64 * harm_phase).sin();
                }
                let breath: f64 = StandardNormal.sample(&mut rng);
                out.push(env * (scale * s + 0.12 * level * voice.breathiness * breath));
            }
        }
        // Mostly short inter-syllable gaps, with occasional phrase pauses.
        let gap = if rng.random::<f64>() < 0.3 {
            rng.random_range(0.15..0.45)
        } else {
            rng.random_range(0.02..0.12)
        };
        let gap = (gap * fs) as usize;
        out.extend(std::iter::repeat_n(0.0, gap));
    }
    out.truncate(EDGE_SILENCE + body);
    out.extend(std::iter::repeat_n(0.0, EDGE_SILENCE));
    Waveform::mono(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    /// Range of utterance body durations in seconds.
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            speakers: 40,
            utterances_per_speaker: 8,
            min_seconds: 1.8,
            max_seconds: 2.6,
            seed: 0,
        }
    }
}

/// Writes `dir/spk_XXX/utt_YY.wav` and `dir/speakers.json`; returns the
/// speaker profiles in id order.
pub fn generate_corpus(dir: impl AsRef<Path>, spec: &CorpusSpec) -> Result<Vec<VoiceProfile>> {
    if spec.speakers == 0 || spec.utterances_per_speaker == 0 {
        return Err(Error::Config("corpus needs speakers and utterances".into()));
    }
    if !(spec.min_seconds > 0.0 && spec.max_seconds >= spec.min_seconds) {
        return Err(Error::Config("invalid utterance duration range".into()));
    }
    let dir = dir.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut profiles = Vec::with_capacity(spec.speakers);
    for s in 0..spec.speakers {
        let voice = VoiceProfile::random(&mut rng);
        let spk_dir = dir.join(format!("spk_{s:03}"));
        fs::create_dir_all(&spk_dir).map_err(|e| Error::io(&spk_dir, e))?;
        for u in 0..spec.utterances_per_speaker {
            let secs = rng.random_range(spec.min_seconds..=spec.max_seconds);
            let wave = synthesize_utterance(&voice, secs, rng.random());
            write_wav(spk_dir.join(format!("utt_{u:02}.wav")), &wave, SampleFormat::Float32)?;
        }
        profiles.push(voice);
    }
    let index: PathBuf = dir.join("speakers.json");
    fs::write(&index, serde_json::to_vec_pretty(&profiles)?).map_err(|e| Error::io(&index, e))?;
    Ok(profiles)
}
