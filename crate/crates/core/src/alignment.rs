//! GCC-PHAT delay estimation and integer-sample alignment of a target
//! recording to a mixture channel.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 100 ms at 16 kHz.
pub const DEFAULT_MAX_LAG: usize = 1600;

const PHAT_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayEstimate {
    /// Positive when the second signal lags the first.
    pub lag: i64,
    /// Correlation peak divided by the transform length, in `[0, 1]`.
    pub peak_strength: f64,
}

/// Estimates the delay of `b` relative to `a` within `±max_lag` samples.
pub fn gcc_phat_delay(a: &[f64], b: &[f64], max_lag: usize) -> Result<DelayEstimate> {
    let min_len = 2 * max_lag;
    if a.len() < min_len.max(1) || b.len() < min_len.max(1) {
        return Err(Error::InputTooShort {
            len: a.len().min(b.len()),
            min: min_len.max(1),
        });
    }
    if a.iter().all(|v| *v == 0.0) || b.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateSignal("all-zero input to delay estimation".into()));
    }
    let n = (a.len() + b.len()).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    let spectrum = |x: &[f64]| {
        let mut buf: Vec<Complex64> = x.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        buf.resize(n, Complex64::new(0.0, 0.0));
        fwd.process(&mut buf);
        buf
    };
    let fa = spectrum(a);
    let mut cross = spectrum(b);
    for (c, x) in cross.iter_mut().zip(&fa) {
        let g = *c * x.conj();
        *c = g / g.norm().max(PHAT_FLOOR);
    }
    inv.process(&mut cross);

    let max_lag = max_lag as i64;
    let mut best = (0_i64, f64::NEG_INFINITY);
    for lag in -max_lag..=max_lag {
        let idx = lag.rem_euclid(n as i64) as usize;
        let v = cross[idx].re;
        if v > best.1 {
            best = (lag, v);
        }
    }
    Ok(DelayEstimate {
        lag: best.0,
        peak_strength: (best.1 / n as f64).clamp(0.0, 1.0),
    })
}

/// Delays `x` by `k` samples (advances when negative), zero-filling, and
/// returns exactly `out_len` samples.
pub fn shift(x: &[f64], k: i64, out_len: usize) -> Vec<f64> {
    (0..out_len as i64)
        .map(|n| {
            let src = n - k;
            if src >= 0 && (src as usize) < x.len() {
                x[src as usize]
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedTarget {
    pub samples: Vec<f64>,
    pub estimate: DelayEstimate,
    /// The lag hit the search bound; the true offset may be larger.
    pub saturated: bool,
}

/// Shifts `target` so that it lines up with `mixture`, returning a signal of
/// the mixture's length.
pub fn align_pair(target: &[f64], mixture: &[f64], max_lag: usize) -> Result<AlignedTarget> {
    let estimate = gcc_phat_delay(mixture, target, max_lag)?;
    let saturated = estimate.lag.unsigned_abs() as usize == max_lag && max_lag > 0;
    if saturated {
        log::warn!("alignment lag saturated at ±{max_lag} samples");
    }
    Ok(AlignedTarget {
        samples: shift(target, -estimate.lag, mixture.len()),
        estimate,
        saturated,
    })
}

/// Applies a previously measured lag (as returned in [`AlignedTarget`]).
pub fn apply_lag(target: &[f64], lag: i64, out_len: usize) -> Vec<f64> {
    shift(target, -lag, out_len)
}
