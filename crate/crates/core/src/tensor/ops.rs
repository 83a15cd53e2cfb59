use super::{gemm, Tensor};
use crate::error::{Error, Result};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) struct NormCache {
    xhat: Tensor,
    rstd: Vec<f64>,
}

pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Tensor, NormCache) {
    let (t, d) = x.dims2();
    let mut xhat = x.clone();
    let mut out = x.clone();
    let mut rstd = Vec::with_capacity(t);
    for r in 0..t {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * rs;
        }
        let xh = xhat.row(r).to_vec();
        for (((o, h), g), b) in out.row_mut(r).iter_mut().zip(&xh).zip(gamma).zip(beta) {
            *o = g * h + b;
        }
    }
    (out, NormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward(
    g: &Tensor,
    gamma: &[f64],
    cache: &NormCache,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (t, d) = g.dims2();
    let mut dx = g.clone();
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..t {
        let gr = g.row(r);
        let xh = cache.xhat.row(r);
        for j in 0..d {
            dgamma[j] += gr[j] * xh[j];
            dbeta[j] += gr[j];
            dxhat[j] = gr[j] * gamma[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let rs = cache.rstd[r];
        for ((o, dh), h) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xh) {
            *o = rs * (dh - mean_dxhat - h * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

/// Activations kept from the forward sweep for backpropagation through time.
pub(crate) struct LstmCache {
    h: usize,
    /// Post-activation gates, T×4H in [i, f, g, o] order.
    gates: Vec<f64>,
    /// Cell state after each frame, T×H.
    cell: Vec<f64>,
    /// tanh of the cell state, T×H.
    cell_tanh: Vec<f64>,
    /// Hidden state after each frame, T×H.
    hidden: Vec<f64>,
    h0: Vec<f64>,
    c0: Vec<f64>,
}

pub(crate) fn lstm_forward(
    x: &Tensor,
    wx: &Tensor,
    wh: &Tensor,
    b: &[f64],
    h0: &[f64],
    c0: &[f64],
) -> Result<(Tensor, LstmCache)> {
    let (t, din) = x.dims2();
    let h = wh.rows();
    let g4 = 4 * h;
    let mut gates = Vec::with_capacity(t * g4);
    for _ in 0..t {
        gates.extend_from_slice(b);
    }
    gemm(t, din, g4, x.data(), false, wx.data(), false, 1.0, &mut gates);

    let mut cell = vec![0.0; t * h];
    let mut cell_tanh = vec![0.0; t * h];
    let mut hidden = vec![0.0; t * h];
    let mut h_prev = h0.to_vec();
    let mut c_prev = c0.to_vec();
    for step in 0..t {
        let z = &mut gates[step * g4..(step + 1) * g4];
        gemm(1, h, g4, &h_prev, false, wh.data(), false, 1.0, z);
        let (zi, rest) = z.split_at_mut(h);
        let (zf, rest) = rest.split_at_mut(h);
        let (zg, zo) = rest.split_at_mut(h);
        let c = &mut cell[step * h..(step + 1) * h];
        let ct = &mut cell_tanh[step * h..(step + 1) * h];
        let hh = &mut hidden[step * h..(step + 1) * h];
        for j in 0..h {
            let i = sigmoid(zi[j]);
            let f = sigmoid(zf[j]);
            let g = zg[j].tanh();
            let o = sigmoid(zo[j]);
            zi[j] = i;
            zf[j] = f;
            zg[j] = g;
            zo[j] = o;
            c[j] = f * c_prev[j] + i * g;
            ct[j] = c[j].tanh();
            hh[j] = o * ct[j];
        }
        if !c.iter().chain(hh.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                site: "lstm state".into(),
                frame: step,
            });
        }
        h_prev.copy_from_slice(hh);
        c_prev.copy_from_slice(c);
    }
    let out = Tensor::matrix(t, h, hidden.clone())?;
    Ok((
        out,
        LstmCache {
            h,
            gates,
            cell,
            cell_tanh,
            hidden,
            h0: h0.to_vec(),
            c0: c0.to_vec(),
        },
    ))
}

pub(crate) struct LstmGrads {
    pub dx: Option<Tensor>,
    pub dwx: Tensor,
    pub dwh: Tensor,
    pub db: Vec<f64>,
}

pub(crate) fn lstm_backward(
    g_out: &Tensor,
    x: &Tensor,
    wx: &Tensor,
    wh: &Tensor,
    cache: &LstmCache,
    want_dx: bool,
) -> LstmGrads {
    let (t, din) = x.dims2();
    let h = cache.h;
    let g4 = 4 * h;
    let mut dz = vec![0.0; t * g4];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    for step in (0..t).rev() {
        let gate = &cache.gates[step * g4..(step + 1) * g4];
        let (gi, gf, gg, go) = (&gate[..h], &gate[h..2 * h], &gate[2 * h..3 * h], &gate[3 * h..]);
        let ct = &cache.cell_tanh[step * h..(step + 1) * h];
        let c_prev = if step == 0 {
            &cache.c0[..]
        } else {
            &cache.cell[(step - 1) * h..step * h]
        };
        let go_row = g_out.row(step);
        let dzs = &mut dz[step * g4..(step + 1) * g4];
        for j in 0..h {
            let dh = go_row[j] + dh_next[j];
            let d_o = dh * ct[j];
            let dc = dh * go[j] * (1.0 - ct[j] * ct[j]) + dc_next[j];
            let di = dc * gg[j];
            let dg = dc * gi[j];
            let df = dc * c_prev[j];
            dc_next[j] = dc * gf[j];
            dzs[j] = di * gi[j] * (1.0 - gi[j]);
            dzs[h + j] = df * gf[j] * (1.0 - gf[j]);
            dzs[2 * h + j] = dg * (1.0 - gg[j] * gg[j]);
            dzs[3 * h + j] = d_o * go[j] * (1.0 - go[j]);
        }
        gemm(1, g4, h, dzs, false, wh.data(), true, 0.0, &mut dh_next);
    }

    // Hidden states shifted by one frame: row s is h_{s-1}.
    let mut h_prev = Vec::with_capacity(t * h);
    h_prev.extend_from_slice(&cache.h0);
    h_prev.extend_from_slice(&cache.hidden[..(t - 1) * h]);
    let mut dwh = vec![0.0; h * g4];
    gemm(h, t, g4, &h_prev, true, &dz, false, 0.0, &mut dwh);
    let mut dwx = vec![0.0; din * g4];
    gemm(din, t, g4, x.data(), true, &dz, false, 0.0, &mut dwx);
    let mut db = vec![0.0; g4];
    for step in 0..t {
        for (d, v) in db.iter_mut().zip(&dz[step * g4..(step + 1) * g4]) {
            *d += v;
        }
    }
    let dx = want_dx.then(|| {
        let mut dx = vec![0.0; t * din];
        gemm(t, g4, din, &dz, false, wx.data(), true, 0.0, &mut dx);
        Tensor::matrix(t, din, dx).expect("shape from input")
    });
    LstmGrads {
        dx,
        dwx: Tensor::matrix(din, g4, dwx).expect("shape from weight"),
        dwh: Tensor::matrix(h, g4, dwh).expect("shape from weight"),
        db,
    }
}
