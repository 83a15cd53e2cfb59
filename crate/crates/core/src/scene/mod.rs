//! Two-source, two-microphone scene simulation.
//!
//! Impulse responses are a direct-path spike followed by an exponentially
//! decaying noise tail. The tail level follows the diffuse-field model: its
//! energy is independent of distance and equals the direct-path energy at
//! the room's critical distance.

mod manifest;
pub mod voice;

pub use manifest::{
    build_manifest, count_pairs, load_manifest, write_manifest, ManifestSummary, SceneRecord,
    SimulationSpec, Split, SplitSpec,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::alignment::shift;
use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;
const MIN_SEPARATION: f64 = 0.01;
const LN_1000: f64 = 6.907_755_278_982_137;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, o: &Point) -> f64 {
        ((self.x - o.x).powi(2) + (self.y - o.y).powi(2) + (self.z - o.z).powi(2)).sqrt()
    }

    pub fn midpoint(&self, o: &Point) -> Point {
        Point::new((self.x + o.x) / 2.0, (self.y + o.y) / 2.0, (self.z + o.z) / 2.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub width: f64,
    pub length: f64,
    pub height: f64,
    /// Reverberation time in seconds; 0 disables the tail.
    pub t60: f64,
    /// Level of the additive white noise in dBFS RMS; `None` for no noise.
    pub noise_floor_db: Option<f64>,
}

impl Default for RoomSpec {
    fn default() -> Self {
        Self {
            width: 3.3,
            length: 3.5,
            height: 2.3,
            t60: 0.5,
            noise_floor_db: Some(-50.0),
        }
    }
}

impl RoomSpec {
    pub fn anechoic() -> Self {
        Self {
            t60: 0.0,
            noise_floor_db: None,
            ..Self::default()
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0.0..=self.width).contains(&p.x)
            && (0.0..=self.length).contains(&p.y)
            && (0.0..=self.height).contains(&p.z)
    }

    pub fn volume(&self) -> f64 {
        self.width * self.length * self.height
    }

    /// Distance at which direct and reverberant energy are equal
    /// (Sabine estimate).
    pub fn critical_distance(&self) -> f64 {
        0.057 * (self.volume() / self.t60).sqrt()
    }

    /// Amplitude envelope of the reverberant tail `t` seconds after the
    /// direct path, relative to its onset.
    pub fn tail_envelope(&self, t: f64) -> f64 {
        (-LN_1000 * t / self.t60).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub target: Point,
    pub interferer: Point,
    pub mic1: Point,
    pub mic2: Point,
}

/// Distances used when sampling geometries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometrySpec {
    pub mic_spacing: f64,
    pub target_distance: f64,
    pub interferer_distance: f64,
    pub height: f64,
    /// Minimum distance from any wall.
    pub margin: f64,
}

impl Default for GeometrySpec {
    fn default() -> Self {
        Self {
            mic_spacing: 0.14,
            target_distance: 0.5,
            interferer_distance: 1.8,
            height: 1.5,
            margin: 0.2,
        }
    }
}

impl SceneGeometry {
    pub fn mic_center(&self) -> Point {
        self.mic1.midpoint(&self.mic2)
    }

    pub fn validate(&self, room: &RoomSpec) -> Result<()> {
        for (name, p) in [
            ("target", &self.target),
            ("interferer", &self.interferer),
            ("mic1", &self.mic1),
            ("mic2", &self.mic2),
        ] {
            if !room.contains(p) {
                return Err(Error::Geometry(format!("{name} {p:?} is outside the room")));
            }
        }
        let spacing = self.mic1.distance(&self.mic2);
        if !(spacing > 0.01 && spacing < 0.20) {
            return Err(Error::Geometry(format!(
                "mic spacing {spacing:.4} m outside (0.01, 0.20)"
            )));
        }
        let c = self.mic_center();
        if self.target.distance(&c) >= self.interferer.distance(&c) {
            return Err(Error::Geometry(
                "target must be closer to the microphones than the interferer".into(),
            ));
        }
        Ok(())
    }

    /// Random placement: microphone pair on a random axis, sources at the
    /// given distances in random directions, all at the same height.
    pub fn sample<R: Rng + ?Sized>(room: &RoomSpec, spec: &GeometrySpec, rng: &mut R) -> Result<Self> {
        let on_circle = |c: &Point, r: f64, a: f64| Point::new(c.x + r * a.cos(), c.y + r * a.sin(), c.z);
        let inside = |p: &Point| {
            p.x >= spec.margin
                && p.x <= room.width - spec.margin
                && p.y >= spec.margin
                && p.y <= room.length - spec.margin
        };
        for _ in 0..1000 {
            let center = Point::new(
                rng.random_range(spec.margin..room.width - spec.margin),
                rng.random_range(spec.margin..room.length - spec.margin),
                spec.height,
            );
            let axis: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let mic1 = on_circle(&center, spec.mic_spacing / 2.0, axis);
            let mic2 = on_circle(&center, spec.mic_spacing / 2.0, axis + std::f64::consts::PI);
            let target = on_circle(&center, spec.target_distance, rng.random_range(0.0..std::f64::consts::TAU));
            let interferer = on_circle(
                &center,
                spec.interferer_distance,
                rng.random_range(0.0..std::f64::consts::TAU),
            );
            if [mic1, mic2, target, interferer].iter().all(inside) {
                let g = SceneGeometry {
                    target,
                    interferer,
                    mic1,
                    mic2,
                };
                g.validate(room)?;
                return Ok(g);
            }
        }
        Err(Error::Geometry(format!(
            "could not place sources at {} m and {} m in a {}×{} m room",
            spec.target_distance, spec.interferer_distance, room.width, room.length
        )))
    }
}

/// Impulse response from `src` to `mic`.
pub fn synth_rir(room: &RoomSpec, src: &Point, mic: &Point, seed: u64) -> Result<Vec<f64>> {
    if !room.contains(src) || !room.contains(mic) {
        return Err(Error::Geometry("source or microphone outside the room".into()));
    }
    if room.t60 < 0.0 || !room.t60.is_finite() {
        return Err(Error::Geometry(format!("invalid t60 {}", room.t60)));
    }
    let d = src.distance(mic);
    if d < MIN_SEPARATION {
        return Err(Error::Geometry(format!(
            "source and microphone {d:.4} m apart"
        )));
    }
    let fs = SAMPLE_RATE as f64;
    let onset = (d * fs / SPEED_OF_SOUND).round() as usize;
    let direct = 1.0 / d.max(0.1);
    if room.t60 == 0.0 {
        let mut h = vec![0.0; onset + 1];
        h[onset] = direct;
        return Ok(h);
    }
    let tail_len = (room.t60 * fs).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tail: Vec<f64> = (1..=tail_len)
        .map(|n| {
            let w: f64 = StandardNormal.sample(&mut rng);
            w * room.tail_envelope(n as f64 / fs)
        })
        .collect();
    let energy: f64 = tail.iter().map(|v| v * v).sum();
    let want = 1.0 / room.critical_distance().powi(2);
    let g = (want / energy).sqrt();
    tail.iter_mut().for_each(|v| *v *= g);

    let mut h = vec![0.0; onset + 1];
    h[onset] = direct;
    h.extend(tail);
    Ok(h)
}

/// Linear convolution of `x` and `h`, first `out_len` samples.
pub fn convolve(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; out_len];
    }
    let full = x.len() + h.len() - 1;
    if h.len() < 64 || x.len() < 64 {
        return (0..out_len)
            .map(|n| {
                if n >= full {
                    return 0.0;
                }
                let lo = n.saturating_sub(h.len() - 1);
                let hi = n.min(x.len() - 1);
                (lo..=hi).map(|k| x[k] * h[n - k]).sum()
            })
            .collect();
    }
    let n = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let spectrum = |v: &[f64]| {
        let mut buf: Vec<Complex64> = v.iter().map(|s| Complex64::new(*s, 0.0)).collect();
        buf.resize(n, Complex64::new(0.0, 0.0));
        fwd.process(&mut buf);
        buf
    };
    let mut a = spectrum(x);
    let b = spectrum(h);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= q);
    inv.process(&mut a);
    (0..out_len)
        .map(|i| if i < full { a[i].re / n as f64 } else { 0.0 })
        .collect()
}

/// Renders a mono source at `src` into both microphones; the result has
/// the length of `clean`.
pub fn spatialize_source(
    clean: &Waveform,
    src: &Point,
    geometry: &SceneGeometry,
    room: &RoomSpec,
    seed: u64,
) -> Result<Waveform> {
    if clean.num_channels() != 1 {
        return Err(Error::Precondition("source must be mono".into()));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let channels = [geometry.mic1, geometry.mic2]
        .iter()
        .map(|mic| {
            let h = synth_rir(room, src, mic, seeds.random())?;
            Ok(convolve(clean.samples(), &h, clean.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    Waveform::from_channels(channels)
}

/// Mixing parameters for one scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    /// Target-to-interferer energy ratio at mic 1; `None` mutes the
    /// interferer.
    pub sir_db: Option<f64>,
    /// Samples by which the mixture recording lags the ground truth.
    pub delay_injection: usize,
    pub seed: u64,
}

/// Output of [`mix_scene`] with every component needed to re-synthesize
/// the mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedScene {
    pub mixture: Waveform,
    pub truth: Waveform,
    /// Spatialized target and interferer before gains.
    pub target_image: Waveform,
    pub interferer_image: Waveform,
    pub noise: Waveform,
    pub target_gain: f64,
    pub interferer_gain: f64,
}

pub const PEAK_LIMIT: f64 = 0.9;

/// Mixes two sources in a room.
///
/// The interferer is scaled to the requested SIR at mic 1, noise is added,
/// and everything is scaled jointly so the mixture peak is at most
/// [`PEAK_LIMIT`]. The truth is the target at mic 1, advanced by
/// `delay_injection` samples so the mixture lags it by that amount.
pub fn mix_scene(
    target: &Waveform,
    interferer: &Waveform,
    geometry: &SceneGeometry,
    room: &RoomSpec,
    spec: &MixSpec,
) -> Result<MixedScene> {
    if target.num_channels() != 1 || interferer.num_channels() != 1 {
        return Err(Error::Precondition("sources must be mono".into()));
    }
    if let Some(sir) = spec.sir_db {
        if !(-10.0..=10.0).contains(&sir) {
            return Err(Error::Precondition(format!("SIR {sir} dB outside [-10, 10]")));
        }
    }
    geometry.validate(room)?;
    let len = target.len().min(interferer.len());
    let energy = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
    let tgt = Waveform::mono(target.samples()[..len].to_vec());
    let itf = Waveform::mono(interferer.samples()[..len].to_vec());
    if energy(tgt.samples()) == 0.0 || energy(itf.samples()) == 0.0 {
        return Err(Error::DegenerateScene("a source has zero energy".into()));
    }

    let mut seeds = ChaCha8Rng::seed_from_u64(spec.seed);
    let target_image = spatialize_source(&tgt, &geometry.target, geometry, room, seeds.random())?;
    let interferer_image =
        spatialize_source(&itf, &geometry.interferer, geometry, room, seeds.random())?;
    let noise_seed: u64 = seeds.random();

    let mut interferer_gain = match spec.sir_db {
        None => 0.0,
        Some(sir) => {
            let et = energy(target_image.channel(0));
            let ei = energy(interferer_image.channel(0));
            if ei == 0.0 || et == 0.0 {
                return Err(Error::DegenerateScene("a source image has zero energy".into()));
            }
            (et / (ei * 10f64.powf(sir / 10.0))).sqrt()
        }
    };
    let sigma = room.noise_floor_db.map_or(0.0, |db| 10f64.powf(db / 20.0));
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut noise: Vec<Vec<f64>> = (0..2)
        .map(|_| {
            (0..len)
                .map(|_| {
                    let w: f64 = StandardNormal.sample(&mut rng);
                    sigma * w
                })
                .collect()
        })
        .collect();

    let raw = |c: usize, n: usize, gt: f64, gi: f64, noise: &[Vec<f64>]| {
        gt * target_image.channel(c)[n] + gi * interferer_image.channel(c)[n] + noise[c][n]
    };
    let peak = (0..2)
        .flat_map(|c| (0..len).map(move |n| (c, n)))
        .map(|(c, n)| raw(c, n, 1.0, interferer_gain, &noise).abs())
        .fold(0.0, f64::max);
    let norm = if peak > PEAK_LIMIT { PEAK_LIMIT / peak } else { 1.0 };
    let target_gain = norm;
    interferer_gain *= norm;
    noise.iter_mut().flatten().for_each(|v| *v *= norm);

    let mixture = Waveform::from_channels(
        (0..2)
            .map(|c| (0..len).map(|n| raw(c, n, target_gain, interferer_gain, &noise)).collect())
            .collect(),
    )?;
    let direct: Vec<f64> = target_image.channel(0).iter().map(|v| v * target_gain).collect();
    let truth = Waveform::mono(shift(&direct, -(spec.delay_injection as i64), len));
    Ok(MixedScene {
        mixture,
        truth,
        target_image,
        interferer_image,
        noise: Waveform::from_channels(noise)?,
        target_gain,
        interferer_gain,
    })
}

#[cfg(test)]
mod tests;
