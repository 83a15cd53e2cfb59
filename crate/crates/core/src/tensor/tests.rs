use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn var(name: &str, t: Tensor) -> Variable {
    Variable::new(name, t)
}

fn rows(r: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(r).unwrap()
}

fn lstm_vars(din: usize, h: usize, seed: u64) -> Vec<Variable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        var("wx", Tensor::uniform(&[din, 4 * h], 0.5, &mut rng)),
        var("wh", Tensor::uniform(&[h, 4 * h], 0.5, &mut rng)),
        var("b", Tensor::uniform(&[4 * h], 0.5, &mut rng)),
    ]
}

/// `Σ out ⊙ probe` with a fixed probe, so every output element matters.
fn probe_loss(tape: &mut Tape<'_>, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = Tensor::uniform(tape.value(out).shape(), 1.0, &mut rng);
    let p = tape.input(probe);
    let m = tape.mul(out, p)?;
    Ok(tape.sum(m))
}

#[test]
fn linear_identity() {
    let mut tape = Tape::new();
    let x = tape.input(rows(&[vec![1.0, 2.0]]));
    let w = tape.input(rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let b = tape.input(Tensor::vector(vec![0.0, 0.0]));
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
}

#[test]
fn linear_hand_product() {
    // [1,2]·[[1,1],[0,1]] = [1,3]; + [1,-1] = [2,2]
    let mut tape = Tape::new();
    let x = tape.input(rows(&[vec![1.0, 2.0]]));
    let w = tape.input(rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]));
    let b = tape.input(Tensor::vector(vec![1.0, -1.0]));
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 2.0]);
}

#[test]
fn linear_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(&[3, 5]));
    let w = tape.input(Tensor::zeros(&[4, 2]));
    let b = tape.input(Tensor::zeros(&[2]));
    let err = tape.linear(x, w, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[3, 5]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn linear_is_linear_without_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::uniform(&[4, 6], 1.0, &mut rng);
    let y = Tensor::uniform(&[4, 6], 1.0, &mut rng);
    let w = Tensor::uniform(&[6, 3], 1.0, &mut rng);
    let (alpha, beta) = (0.7, -1.3);
    let run = |input: Tensor| {
        let mut tape = Tape::new();
        let xi = tape.input(input);
        let wi = tape.input(w.clone());
        let bi = tape.input(Tensor::zeros(&[3]));
        let out = tape.linear(xi, wi, bi).unwrap();
        tape.value(out).clone()
    };
    let mut combo = x.clone();
    combo.scale(alpha);
    let mut sy = y.clone();
    sy.scale(beta);
    combo.add_assign(&sy);
    let lhs = run(combo);
    let mut rhs = run(x);
    rhs.scale(alpha);
    let mut ry = run(y);
    ry.scale(beta);
    rhs.add_assign(&ry);
    for (a, b) in lhs.data().iter().zip(rhs.data()) {
        assert!((a - b).abs() < 1e-10);
    }
}

fn layer_norm_of(x: Tensor, gamma: Vec<f64>, beta: Vec<f64>, eps: f64) -> Tensor {
    let mut tape = Tape::new();
    let xi = tape.input(x);
    let g = tape.input(Tensor::vector(gamma));
    let b = tape.input(Tensor::vector(beta));
    let y = tape.layer_norm(xi, g, b, eps).unwrap();
    tape.value(y).clone()
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let y = layer_norm_of(rows(&[vec![3.0; 4]]), vec![1.0; 4], vec![0.0; 4], 1e-5);
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn layer_norm_unit_pair() {
    // mean 0, var 1 -> ±1/sqrt(1 + 1e-5)
    let y = layer_norm_of(rows(&[vec![1.0, -1.0]]), vec![1.0; 2], vec![0.0; 2], 1e-5);
    let expect = 1.0 / (1.0_f64 + 1e-5).sqrt();
    assert!((y.data()[0] - expect).abs() < 1e-12);
    assert!((y.data()[1] + expect).abs() < 1e-12);
    assert!((y.data()[0] - 0.99999).abs() < 1e-5);
}

#[test]
fn layer_norm_zero_gain_gives_bias() {
    let y = layer_norm_of(
        rows(&[vec![1.0, 7.0], vec![-2.0, 0.5]]),
        vec![0.0; 2],
        vec![5.0; 2],
        1e-5,
    );
    assert!(y.data().iter().all(|v| *v == 5.0));
}

#[test]
fn layer_norm_output_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut x = Tensor::uniform(&[5, 32], 10.0, &mut rng);
    x.data_mut().iter_mut().for_each(|v| *v += 3.0);
    let y = layer_norm_of(x, vec![1.0; 32], vec![0.0; 32], 1e-5);
    for r in 0..5 {
        let row = y.row(r);
        let mean = row.iter().sum::<f64>() / 32.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-8);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

fn run_lstm(x: Tensor, vars: &[Variable]) -> Tensor {
    let mut tape = Tape::new();
    let xi = tape.input(x);
    let wx = tape.param(0, &vars[0]);
    let wh = tape.param(1, &vars[1]);
    let b = tape.param(2, &vars[2]);
    let h = tape.lstm(xi, wx, wh, b).unwrap();
    tape.value(h).clone()
}

#[test]
fn lstm_zero_network_outputs_zero() {
    let vars = vec![
        var("wx", Tensor::zeros(&[3, 8])),
        var("wh", Tensor::zeros(&[2, 8])),
        var("b", Tensor::zeros(&[8])),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = run_lstm(Tensor::uniform(&[5, 3], 2.0, &mut rng), &vars);
    assert_eq!(out.shape(), &[5, 2]);
    assert!(out.data().iter().all(|v| *v == 0.0));
}

#[test]
fn lstm_single_step_scalar_oracle() {
    let (x, wi, wf, wg, wo, bi, bf, bg, bo) = (0.8, 0.3, -0.4, 1.1, 0.6, 0.1, 1.0, -0.2, 0.05);
    let vars = vec![
        var("wx", rows(&[vec![wi, wf, wg, wo]])),
        var("wh", rows(&[vec![0.9, 0.9, 0.9, 0.9]])),
        var("b", Tensor::vector(vec![bi, bf, bg, bo])),
    ];
    let out = run_lstm(rows(&[vec![x]]), &vars);
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    // h0 = c0 = 0, so the recurrent weights contribute nothing.
    let i = sig(wi * x + bi);
    let f = sig(wf * x + bf);
    let g = (wg * x + bg).tanh();
    let o = sig(wo * x + bo);
    let c = f * 0.0 + i * g;
    let h = o * c.tanh();
    assert!((out.data()[0] - h).abs() < 1e-15);
}

#[test]
fn lstm_is_causal() {
    let vars = lstm_vars(3, 4, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::uniform(&[8, 3], 1.0, &mut rng);
    let base = run_lstm(x.clone(), &vars);
    for t in 0..8 {
        let mut perturbed = x.clone();
        for r in t + 1..8 {
            perturbed.row_mut(r).iter_mut().for_each(|v| *v += 5.0);
        }
        let out = run_lstm(perturbed, &vars);
        for r in 0..=t {
            assert_eq!(out.row(r), base.row(r), "frame {r} changed");
        }
    }
}

#[test]
fn reverse_pass_quadratic() {
    let mut vars = vec![var("w", Tensor::vector(vec![1.0, 2.0, 3.0]))];
    let mut tape = Tape::new();
    let w = tape.param_copy(0, &vars[0]);
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.sum(sq);
    reverse_pass(&tape, loss, &mut vars).unwrap();
    assert_eq!(vars[0].grad.data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn unreachable_variable_keeps_zero_grad() {
    let mut vars = vec![
        var("used", Tensor::vector(vec![1.0, 2.0])),
        var("unused", Tensor::vector(vec![4.0, 5.0])),
    ];
    let mut tape = Tape::new();
    let a = tape.param_copy(0, &vars[0]);
    let _b = tape.param_copy(1, &vars[1]);
    let loss = tape.sum(a);
    reverse_pass(&tape, loss, &mut vars).unwrap();
    assert_eq!(vars[0].grad.data(), &[1.0, 1.0]);
    assert_eq!(vars[1].grad.data(), &[0.0, 0.0]);
}

#[test]
fn frozen_variable_receives_no_grad() {
    let mut vars = vec![Variable::frozen("w", Tensor::vector(vec![1.0, 2.0]))];
    let mut tape = Tape::new();
    let a = tape.param_copy(0, &vars[0]);
    let loss = tape.sum(a);
    reverse_pass(&tape, loss, &mut vars).unwrap();
    assert_eq!(vars[0].grad.data(), &[0.0, 0.0]);
}

#[test]
fn reverse_pass_rejects_non_scalar_and_empty_tape() {
    let mut vars = vec![var("w", Tensor::vector(vec![1.0, 2.0]))];
    let mut tape = Tape::new();
    let a = tape.param_copy(0, &vars[0]);
    assert!(matches!(
        reverse_pass(&tape, a, &mut vars),
        Err(Error::Precondition(_))
    ));
    let empty = Tape::new();
    assert!(empty.backward(a).is_err());
}

#[test]
fn fd_exact_on_quadratic() {
    let params = vec![var("p", Tensor::vector(vec![1.0, -1.0]))];
    let err = finite_difference_check(
        |vars, tape| {
            let p = tape.param(0, &vars[0]);
            let sq = tape.mul(p, p)?;
            Ok(tape.sum(sq))
        },
        &params,
        DEFAULT_FD_STEP,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn fd_rejects_zero_step() {
    let params = vec![var("p", Tensor::vector(vec![1.0]))];
    let res = finite_difference_check(
        |vars, tape| {
            let p = tape.param(0, &vars[0]);
            Ok(tape.sum(p))
        },
        &params,
        0.0,
    );
    assert!(matches!(res, Err(Error::Precondition(_))));
}

#[test]
fn fd_detects_nondeterminism() {
    use std::sync::atomic::{AtomicU64, Ordering};
    let counter = AtomicU64::new(0);
    let params = vec![var("p", Tensor::vector(vec![1.0]))];
    let res = finite_difference_check(
        |vars, tape| {
            let n = counter.fetch_add(1, Ordering::Relaxed) as f64;
            let p = tape.param(0, &vars[0]);
            let c = tape.input(Tensor::vector(vec![n]));
            let s = tape.add(p, c)?;
            Ok(tape.sum(s))
        },
        &params,
        1e-5,
    );
    assert!(matches!(res, Err(Error::Determinism { .. })));
}

#[test]
fn fd_linear_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = vec![
        var("w1", Tensor::uniform(&[4, 5], 0.5, &mut rng)),
        var("b1", Tensor::uniform(&[5], 0.5, &mut rng)),
        var("w2", Tensor::uniform(&[5, 3], 0.5, &mut rng)),
        var("b2", Tensor::uniform(&[3], 0.5, &mut rng)),
    ];
    let x = Tensor::uniform(&[6, 4], 1.0, &mut rng);
    let err = finite_difference_check(
        |vars, tape| {
            let xi = tape.input(x.clone());
            let w1 = tape.param(0, &vars[0]);
            let b1 = tape.param(1, &vars[1]);
            let w2 = tape.param(2, &vars[2]);
            let b2 = tape.param(3, &vars[3]);
            let h = tape.linear(xi, w1, b1)?;
            let h = tape.sigmoid(h);
            let y = tape.linear(h, w2, b2)?;
            probe_loss(tape, y, 17)
        },
        &params,
        DEFAULT_FD_STEP,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn fd_lstm() {
    let params = lstm_vars(3, 4, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = Tensor::uniform(&[7, 3], 1.0, &mut rng);
    let err = finite_difference_check(
        |vars, tape| {
            let xi = tape.input(x.clone());
            let wx = tape.param(0, &vars[0]);
            let wh = tape.param(1, &vars[1]);
            let b = tape.param(2, &vars[2]);
            let h = tape.lstm(xi, wx, wh, b)?;
            probe_loss(tape, h, 23)
        },
        &params,
        DEFAULT_FD_STEP,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn fd_lstm_input_gradient() {
    // Route the LSTM input through a trainable layer so dx is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut params = lstm_vars(3, 3, 32);
    params.push(var("w_in", Tensor::uniform(&[2, 3], 0.7, &mut rng)));
    params.push(var("b_in", Tensor::uniform(&[3], 0.7, &mut rng)));
    let x = Tensor::uniform(&[5, 2], 1.0, &mut rng);
    let err = finite_difference_check(
        |vars, tape| {
            let xi = tape.input(x.clone());
            let w = tape.param(3, &vars[3]);
            let b0 = tape.param(4, &vars[4]);
            let z = tape.linear(xi, w, b0)?;
            let wx = tape.param(0, &vars[0]);
            let wh = tape.param(1, &vars[1]);
            let b = tape.param(2, &vars[2]);
            let h = tape.lstm(z, wx, wh, b)?;
            probe_loss(tape, h, 33)
        },
        &params,
        DEFAULT_FD_STEP,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn fd_layer_norm_relu_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let params = vec![
        var("a", Tensor::uniform(&[4, 3], 1.0, &mut rng)),
        var("c", Tensor::uniform(&[4, 2], 1.0, &mut rng)),
        var("gamma", Tensor::uniform(&[5], 1.0, &mut rng)),
        var("beta", Tensor::uniform(&[5], 1.0, &mut rng)),
    ];
    let err = finite_difference_check(
        |vars, tape| {
            let a = tape.param(0, &vars[0]);
            let c = tape.param(1, &vars[1]);
            let g = tape.param(2, &vars[2]);
            let b = tape.param(3, &vars[3]);
            let cat = tape.concat_cols(a, c)?;
            let n = tape.layer_norm(cat, g, b, 1e-5)?;
            let skip = tape.add(n, cat)?;
            let r = tape.relu(skip);
            probe_loss(tape, r, 43)
        },
        &params,
        DEFAULT_FD_STEP,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn custom_op_backward_is_applied() {
    // y = 3·x through a custom rule
    let mut vars = vec![var("x", Tensor::vector(vec![1.0, 2.0]))];
    let mut tape = Tape::new();
    let x = tape.param_copy(0, &vars[0]);
    let mut v = tape.value(x).clone();
    v.scale(3.0);
    let y = tape.custom(
        &[x],
        v,
        Box::new(|g: &Tensor, _: &[&Tensor]| {
            let mut g = g.clone();
            g.scale(3.0);
            vec![Some(g)]
        }),
    );
    let loss = tape.sum(y);
    reverse_pass(&tape, loss, &mut vars).unwrap();
    assert_eq!(vars[0].grad.data(), &[3.0, 3.0]);
}

#[test]
fn fd_flags_a_wrong_element_in_a_large_tensor() {
    // Squares every entry but gets the derivative of one entry wrong by 5%.
    let vals: Vec<f64> = (0..200).map(|i| 0.1 + i as f64 * 0.01).collect();
    let params = vec![var("x", Tensor::vector(vals))];
    let err = finite_difference_check(
        |vars, tape| {
            let x = tape.param(0, &vars[0]);
            let mut v = tape.value(x).clone();
            v.data_mut().iter_mut().for_each(|e| *e *= *e);
            let y = tape.custom(
                &[x],
                v,
                Box::new(|g: &Tensor, ins: &[&Tensor]| {
                    let mut d = ins[0].clone();
                    d.scale(2.0);
                    d.data_mut()[199] *= 1.05;
                    for (di, gi) in d.data_mut().iter_mut().zip(g.data()) {
                        *di *= gi;
                    }
                    vec![Some(d)]
                }),
            );
            Ok(tape.sum(y))
        },
        &params,
        DEFAULT_FD_STEP,
    )
    .unwrap();
    assert!(err > 1e-3, "{err}");
}
