//! SI-SNR training objective and SDR evaluation metric.

use std::f64::consts::LN_10;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Added to the SDR error energy before taking the ratio.
pub const EPS: f64 = 1e-8;
/// SI-SNR regularizer, as a fraction of the estimate's energy. Being
/// relative it keeps the ratio exactly gain invariant.
pub const SI_SNR_EPS: f64 = 1e-12;
/// Upper clamp of reported SI-SNR / SDR values, in dB.
pub const CLAMP_DB: f64 = 60.0;
/// Smallest ratio taken to the log; keeps silent estimates finite.
const RATIO_FLOOR: f64 = 1e-30;

/// How the noise residual is formed after projecting onto the reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualForm {
    /// `e = ŝ − s_target`, which makes the ratio gain invariant.
    #[default]
    Projected,
    /// `e = ŝ − s`, kept for comparison runs.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiSnrOptions {
    pub zero_mean: bool,
    pub residual: ResidualForm,
}

impl Default for SiSnrOptions {
    fn default() -> Self {
        Self {
            zero_mean: true,
            residual: ResidualForm::Projected,
        }
    }
}

/// Estimate/reference pair of equal length with a non-silent reference.
#[derive(Clone, Copy, Debug)]
pub struct ScorePair<'a> {
    pub estimate: &'a [f64],
    pub reference: &'a [f64],
}

impl<'a> ScorePair<'a> {
    pub fn new(estimate: &'a [f64], reference: &'a [f64]) -> Result<Self> {
        if estimate.len() != reference.len() {
            return Err(Error::dim("score pair", &[estimate.len()], &[reference.len()]));
        }
        if estimate.is_empty() {
            return Err(Error::DegenerateReference("empty signals".into()));
        }
        Ok(Self {
            estimate,
            reference,
        })
    }
}

fn centered(x: &[f64], zero_mean: bool) -> Vec<f64> {
    if !zero_mean {
        return x.to_vec();
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Shared forward computation: returns (ratio, dL/dx) where the loss is the
/// negative SI-SNR in dB for this single pair.
struct SiSnrParts {
    target_energy: f64,
    /// Residual energy plus the regularizer.
    noise_energy: f64,
    /// d(−SI-SNR)/d(estimate), including the mean-removal Jacobian.
    grad: Vec<f64>,
}

fn si_snr_parts(est: &[f64], reference: &[f64], opts: SiSnrOptions) -> Result<SiSnrParts> {
    let x = centered(est, opts.zero_mean);
    let y = centered(reference, opts.zero_mean);
    let ref_energy = dot(&y, &y);
    if !(ref_energy > 0.0) {
        return Err(Error::DegenerateReference(
            "reference has zero energy".into(),
        ));
    }
    let p = dot(&x, &y);
    let scale = p / ref_energy;
    let target_energy = p * p / ref_energy;
    let residual: Vec<f64> = match opts.residual {
        ResidualForm::Projected => x.iter().zip(&y).map(|(a, b)| a - scale * b).collect(),
        ResidualForm::Literal => x.iter().zip(&y).map(|(a, b)| a - b).collect(),
    };
    let noise_energy = dot(&residual, &residual) + SI_SNR_EPS * dot(&x, &x);

    // L = −(10/ln10)(ln T − ln D), D = E + ε·X; dT/dx = 2p·y/Y, dD/dx = 2e + 2ε·x.
    let k = -10.0 / LN_10;
    let mut grad = vec![0.0; x.len()];
    if ratio(target_energy, noise_energy) > RATIO_FLOOR && p != 0.0 {
        for (((g, yv), ev), xv) in grad.iter_mut().zip(&y).zip(&residual).zip(&x) {
            *g = k * (2.0 * yv / p - 2.0 * (ev + SI_SNR_EPS * xv) / noise_energy);
        }
        if opts.zero_mean {
            let m = grad.iter().sum::<f64>() / grad.len() as f64;
            grad.iter_mut().for_each(|g| *g -= m);
        }
    }
    Ok(SiSnrParts {
        target_energy,
        noise_energy,
        grad,
    })
}

/// `num / den`, with an empty numerator counting as the floor.
fn ratio(num: f64, den: f64) -> f64 {
    if num > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn ratio_db(num: f64, den: f64) -> f64 {
    10.0 * ratio(num, den).max(RATIO_FLOOR).log10()
}

/// SI-SNR in dB, clamped to at most [`CLAMP_DB`].
pub fn si_snr(pair: ScorePair<'_>) -> Result<f64> {
    si_snr_with(pair, SiSnrOptions::default())
}

pub fn si_snr_with(pair: ScorePair<'_>, opts: SiSnrOptions) -> Result<f64> {
    let parts = si_snr_parts(pair.estimate, pair.reference, opts)?;
    Ok(ratio_db(parts.target_energy, parts.noise_energy).min(CLAMP_DB))
}

/// Mean negative SI-SNR over a batch of taped estimates against detached
/// references. Not clamped.
pub fn si_snr_loss(
    tape: &mut Tape<'_>,
    estimates: &[NodeId],
    references: &[&[f64]],
    opts: SiSnrOptions,
) -> Result<NodeId> {
    if estimates.is_empty() || estimates.len() != references.len() {
        return Err(Error::dim(
            "si_snr_loss batch",
            &[estimates.len()],
            &[references.len()],
        ));
    }
    let n = estimates.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(estimates.len());
    for (e, r) in estimates.iter().zip(references) {
        let est = tape.value(*e);
        let pair = ScorePair::new(est.data(), r)?;
        let parts = si_snr_parts(pair.estimate, pair.reference, opts)?;
        total -= ratio_db(parts.target_energy, parts.noise_energy);
        let mut g = Tensor::new(est.shape(), parts.grad)?;
        g.scale(1.0 / n);
        grads.push(g);
    }
    Ok(tape.custom(
        estimates,
        Tensor::scalar(total / n),
        Box::new(move |g: &Tensor, _: &[&Tensor]| {
            let s = g.data()[0];
            grads
                .iter()
                .map(|gi| {
                    let mut gi = gi.clone();
                    gi.scale(s);
                    Some(gi)
                })
                .collect()
        }),
    ))
}

/// Plain signal-to-distortion ratio `‖s‖² / ‖s − ŝ‖²` in dB, clamped.
pub fn sdr(pair: ScorePair<'_>) -> Result<f64> {
    let ref_energy = dot(pair.reference, pair.reference);
    if !(ref_energy > 0.0) {
        return Err(Error::DegenerateReference(
            "reference has zero energy".into(),
        ));
    }
    let err: f64 = pair
        .estimate
        .iter()
        .zip(pair.reference)
        .map(|(a, b)| (b - a).powi(2))
        .sum();
    Ok(ratio_db(ref_energy, err + EPS).min(CLAMP_DB))
}

/// `sdr(ŝ, s) − sdr(mixture reference channel, s)`.
pub fn sdr_improvement(mix_ref_channel: &[f64], estimate: &[f64], reference: &[f64]) -> Result<f64> {
    let after = sdr(ScorePair::new(estimate, reference)?)?;
    let before = sdr(ScorePair::new(mix_ref_channel, reference)?)?;
    Ok(after - before)
}
