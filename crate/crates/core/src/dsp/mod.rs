//! Fixed analysis/synthesis transforms and waveform containers.
//!
//! The analysis transform frames the signal with a periodic Hann window,
//! zero-pads each frame to the FFT size and keeps magnitude and phase of the
//! non-negative bins. Synthesis is weighted overlap-add divided by the summed
//! squared window, which reconstructs the input exactly wherever frames fully
//! overlap.

mod wav;

pub use wav::{read_wav, write_wav, SampleFormat};

use std::f64::consts::PI;
use std::ops::Range;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

pub const SAMPLE_RATE: u32 = 16_000;

/// Sampled audio at 16 kHz, one or two equal-length channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    channels: Vec<Vec<f64>>,
}

impl Waveform {
    pub fn mono(samples: Vec<f64>) -> Self {
        Self {
            channels: vec![samples],
        }
    }

    pub fn stereo(first: Vec<f64>, second: Vec<f64>) -> Result<Self> {
        if first.len() != second.len() {
            return Err(Error::dim("waveform channels", &[first.len()], &[second.len()]));
        }
        Ok(Self {
            channels: vec![first, second],
        })
    }

    pub fn from_channels(channels: Vec<Vec<f64>>) -> Result<Self> {
        match channels.len() {
            1 => Ok(Self { channels }),
            2 => {
                let mut it = channels.into_iter();
                let a = it.next().unwrap();
                let b = it.next().unwrap();
                Self::stereo(a, b)
            }
            n => Err(Error::Precondition(format!("expected 1 or 2 channels, got {n}"))),
        }
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / SAMPLE_RATE as f64
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// Mono view of channel `i`.
    pub fn split_channel(&self, i: usize) -> Waveform {
        Waveform::mono(self.channels[i].clone())
    }

    pub fn samples(&self) -> &[f64] {
        &self.channels[0]
    }

    pub fn peak(&self) -> f64 {
        self.channels
            .iter()
            .flatten()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, g: f64) {
        self.channels.iter_mut().flatten().for_each(|v| *v *= g);
    }
}

/// Frame geometry of the analysis/synthesis pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub window_length: usize,
    pub fft_size: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    /// 25 ms periodic Hann window, 512-point FFT (257 bins), 10 ms hop.
    fn default() -> Self {
        Self {
            window_length: 400,
            fft_size: 512,
            hop: 160,
        }
    }
}

impl StftConfig {
    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames produced for a signal of `len` samples (0 if shorter than one window).
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.window_length {
            0
        } else {
            1 + (len - self.window_length) / self.hop
        }
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Magnitude and phase spectrograms, both T×F.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramPair {
    pub mag: Tensor,
    pub phase: Tensor,
    pub cfg: StftConfig,
}

impl SpectrogramPair {
    pub fn n_frames(&self) -> usize {
        self.mag.rows()
    }

    pub fn n_bins(&self) -> usize {
        self.mag.cols()
    }

    /// `[mag; phase]` along the feature axis (T×2F).
    pub fn stacked(&self) -> Tensor {
        let (t, f) = self.mag.dims2();
        let mut out = Vec::with_capacity(t * 2 * f);
        for r in 0..t {
            out.extend_from_slice(self.mag.row(r));
            out.extend_from_slice(self.phase.row(r));
        }
        Tensor::matrix(t, 2 * f, out).expect("non-empty spectrogram")
    }
}

/// Analysis/synthesis processor for one [`StftConfig`], with cached FFT plans.
#[derive(Clone)]
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    env_floor: f64,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    /// Validates the configuration, including that overlapped squared
    /// windows never vanish in the steady state.
    pub fn new(cfg: StftConfig) -> Result<Self> {
        if cfg.window_length == 0 || cfg.hop == 0 || cfg.fft_size < 2 {
            return Err(Error::Config(format!("degenerate STFT config {cfg:?}")));
        }
        if cfg.window_length > cfg.fft_size {
            return Err(Error::Config(format!(
                "window length {} exceeds fft size {}",
                cfg.window_length, cfg.fft_size
            )));
        }
        if cfg.fft_size % 2 != 0 {
            return Err(Error::Config("fft size must be even".into()));
        }
        let window = hann_periodic(cfg.window_length);
        // Steady-state sum of squared windows over one hop period.
        let mut min_env = f64::INFINITY;
        let mut max_env = 0.0_f64;
        for n in 0..cfg.hop {
            let mut e = 0.0;
            let mut k = n;
            while k < cfg.window_length {
                e += window[k] * window[k];
                k += cfg.hop;
            }
            min_env = min_env.min(e);
            max_env = max_env.max(e);
        }
        if !(min_env > 1e-3 * max_env) {
            return Err(Error::Config(format!(
                "window/hop pair {}/{} does not overlap-add to a nonvanishing envelope",
                cfg.window_length, cfg.hop
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
            cfg,
            window,
            env_floor: 0.1 * min_env,
        })
    }

    pub fn config(&self) -> StftConfig {
        self.cfg
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Complex spectra of every frame (F bins each).
    pub fn complex_frames(&self, samples: &[f64]) -> Result<Vec<Vec<Complex64>>> {
        let n_frames = self.cfg.n_frames(samples.len());
        if n_frames == 0 {
            return Err(Error::InputTooShort {
                len: samples.len(),
                min: self.cfg.window_length,
            });
        }
        let f = self.cfg.n_bins();
        let mut buf = vec![Complex64::new(0.0, 0.0); self.cfg.fft_size];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        let mut out = Vec::with_capacity(n_frames);
        for t in 0..n_frames {
            let start = t * self.cfg.hop;
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (i, (b, w)) in buf.iter_mut().zip(&self.window).enumerate() {
                *b = Complex64::new(samples[start + i] * w, 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            out.push(buf[..f].to_vec());
        }
        Ok(out)
    }

    /// Magnitude/phase analysis of a mono signal.
    pub fn analyze(&self, samples: &[f64]) -> Result<SpectrogramPair> {
        let frames = self.complex_frames(samples)?;
        let (t, f) = (frames.len(), self.cfg.n_bins());
        let mut mag = Vec::with_capacity(t * f);
        let mut phase = Vec::with_capacity(t * f);
        for frame in &frames {
            for c in frame {
                mag.push(c.norm());
                let mut p = c.im.atan2(c.re);
                if p <= -PI {
                    p = PI;
                }
                phase.push(p);
            }
        }
        Ok(SpectrogramPair {
            mag: Tensor::matrix(t, f, mag)?,
            phase: Tensor::matrix(t, f, phase)?,
            cfg: self.cfg,
        })
    }

    fn check_synthesis(&self, mag: &Tensor, phase: &Tensor, out_len: usize) -> Result<()> {
        if mag.shape() != phase.shape() {
            return Err(Error::dim("istft", mag.shape(), phase.shape()));
        }
        if mag.cols() != self.cfg.n_bins() {
            return Err(Error::dim("istft bins", mag.shape(), &[self.cfg.n_bins()]));
        }
        let t = mag.rows();
        if self.cfg.n_frames(out_len) != t {
            return Err(Error::Precondition(format!(
                "output length {out_len} inconsistent with {t} frames"
            )));
        }
        Ok(())
    }

    /// Summed squared window at each output sample, floored.
    fn envelope(&self, n_frames: usize, out_len: usize) -> Vec<f64> {
        let mut env = vec![0.0; out_len];
        for t in 0..n_frames {
            let start = t * self.cfg.hop;
            for (i, w) in self.window.iter().enumerate() {
                env[start + i] += w * w;
            }
        }
        env.iter_mut().for_each(|e| *e = e.max(self.env_floor));
        env
    }

    /// Weighted overlap-add synthesis of `out_len` samples.
    pub fn synthesize(&self, mag: &Tensor, phase: &Tensor, out_len: usize) -> Result<Vec<f64>> {
        self.check_synthesis(mag, phase, out_len)?;
        let (t, f) = mag.dims2();
        let n = self.cfg.fft_size;
        let mut out = vec![0.0; out_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        for frame in 0..t {
            for k in 0..f {
                let c = Complex64::from_polar(mag.get(frame, k), phase.get(frame, k));
                buf[k] = c;
                if k > 0 && k < n - k {
                    buf[n - k] = c.conj();
                }
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = frame * self.cfg.hop;
            for (i, w) in self.window.iter().enumerate() {
                out[start + i] += w * buf[i].re / n as f64;
            }
        }
        let env = self.envelope(t, out_len);
        for (o, e) in out.iter_mut().zip(&env) {
            *o /= e;
        }
        Ok(out)
    }

    /// Gradient of a scalar loss w.r.t. the magnitudes, given its gradient
    /// w.r.t. the synthesized samples. Synthesis is linear in magnitude.
    pub fn synthesize_adjoint(&self, grad_out: &[f64], phase: &Tensor) -> Tensor {
        let (t, f) = phase.dims2();
        let n = self.cfg.fft_size;
        let env = self.envelope(t, grad_out.len());
        let mut grad = vec![0.0; t * f];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        for frame in 0..t {
            let start = frame * self.cfg.hop;
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (i, w) in self.window.iter().enumerate() {
                buf[i] = Complex64::new(w * grad_out[start + i] / env[start + i], 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..f {
                let weight = if k == 0 || 2 * k == n { 1.0 } else { 2.0 };
                let rot = Complex64::from_polar(1.0, phase.get(frame, k));
                grad[frame * f + k] = weight / n as f64 * (rot * buf[k].conj()).re;
            }
        }
        Tensor::matrix(t, f, grad).expect("phase shape is valid")
    }

    /// Samples whose reconstruction involves every overlapping frame.
    pub fn interior(&self, len: usize) -> Range<usize> {
        let t = self.cfg.n_frames(len);
        let lo = self.cfg.window_length.saturating_sub(self.cfg.hop);
        let hi = (t * self.cfg.hop).min(len);
        lo.min(hi)..hi
    }

    /// Records synthesis on `tape` with a differentiable magnitude input.
    /// The phase is a constant.
    pub fn synthesize_taped(
        &self,
        tape: &mut Tape<'_>,
        mag: NodeId,
        phase: &Tensor,
        out_len: usize,
    ) -> Result<NodeId> {
        let samples = self.synthesize(tape.value(mag), phase, out_len)?;
        let this = self.clone();
        let phase = phase.clone();
        Ok(tape.custom(
            &[mag],
            Tensor::vector(samples),
            Box::new(move |g: &Tensor, _: &[&Tensor]| {
                vec![Some(this.synthesize_adjoint(g.data(), &phase))]
            }),
        ))
    }
}

/// Analyzes a mono waveform.
pub fn stft_analyze(wave: &Waveform, cfg: StftConfig) -> Result<SpectrogramPair> {
    if wave.num_channels() != 1 {
        return Err(Error::Precondition(
            "analysis expects a mono waveform; split channels first".into(),
        ));
    }
    Stft::new(cfg)?.analyze(wave.samples())
}

/// Synthesizes a mono waveform of `out_length` samples.
pub fn istft_synthesize(
    mag: &Tensor,
    phase: &Tensor,
    cfg: StftConfig,
    out_length: usize,
) -> Result<Waveform> {
    Ok(Waveform::mono(Stft::new(cfg)?.synthesize(mag, phase, out_length)?))
}

/// Elementwise `m1 ⊙ r` with `r` required to lie in `[0, 1]`.
pub fn apply_mask(m1: &Tensor, r: &Tensor) -> Result<Tensor> {
    if m1.shape() != r.shape() {
        return Err(Error::dim("apply_mask", m1.shape(), r.shape()));
    }
    if let Some(bad) = r.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Contract(format!("mask value {bad} outside [0, 1]")));
    }
    let data = m1.data().iter().zip(r.data()).map(|(m, v)| m * v).collect();
    Tensor::new(m1.shape(), data)
}
