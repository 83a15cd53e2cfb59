use super::{NodeId, Tape, Tensor, Variable};
use crate::error::{Error, Result};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

fn eval<F>(build_loss: &F, vars: &[Variable]) -> Result<f64>
where
    F: for<'a> Fn(&'a [Variable], &mut Tape<'a>) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = build_loss(vars, &mut tape)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares taped gradients against five-point central differences.
///
/// `build_loss` records a scalar loss on the supplied tape using the given
/// variables (by index). Every element of every trainable variable is
/// perturbed by `±step` and `±2·step`. For each variable the relative error
/// is `‖a − n‖ / max(‖a‖, ‖n‖, 1e-12)` over its elements; the result is the
/// largest such error.
pub fn finite_difference_check<F>(build_loss: F, params: &[Variable], step: f64) -> Result<f64>
where
    F: for<'a> Fn(&'a [Variable], &mut Tape<'a>) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::Precondition(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let analytic = {
        let mut tape = Tape::new();
        let loss = build_loss(params, &mut tape)?;
        let grads = tape.backward(loss)?;
        let mut acc: Vec<Tensor> = params.iter().map(|v| Tensor::zeros(v.value.shape())).collect();
        for (i, g) in grads.iter() {
            acc[i].add_assign(g);
        }
        acc
    };

    let first = eval(&build_loss, params)?;
    let second = eval(&build_loss, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut work = params.to_vec();
    let mut worst = 0.0_f64;
    for vi in 0..work.len() {
        if !work[vi].trainable {
            continue;
        }
        let (mut diff_sq, mut a_sq, mut n_sq) = (0.0, 0.0, 0.0);
        for k in 0..work[vi].numel() {
            let orig = work[vi].value.data()[k];
            let mut at = |offset: f64| {
                work[vi].value.data_mut()[k] = orig + offset;
                eval(&build_loss, &work)
            };
            let (p2, p1, m1, m2) = (at(2.0 * step)?, at(step)?, at(-step)?, at(-2.0 * step)?);
            work[vi].value.data_mut()[k] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            let a = analytic[vi].data()[k];
            diff_sq += (a - numeric).powi(2);
            a_sq += a * a;
            n_sq += numeric * numeric;
        }
        let rel = diff_sq.sqrt() / a_sq.sqrt().max(n_sq.sqrt()).max(1e-12);
        log::debug!("fd: {} relative error {rel:e}", work[vi].name);
        worst = worst.max(rel);
    }
    Ok(worst)
}
