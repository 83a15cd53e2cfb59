use std::borrow::Cow;

use super::ops::{self, LstmCache, NormCache};
use super::{gemm, Tensor, Variable};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Local backward rule for an op recorded through [`Tape::custom`].
///
/// Receives the gradient of the loss w.r.t. the op output and the values of
/// its inputs, and returns one optional gradient per input (same order).
pub trait BackwardFn: Send + Sync {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor]) -> Vec<Option<Tensor>>;
}

impl<F> BackwardFn for F
where
    F: Fn(&Tensor, &[&Tensor]) -> Vec<Option<Tensor>> + Send + Sync,
{
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor]) -> Vec<Option<Tensor>> {
        self(grad_out, inputs)
    }
}

enum Op {
    Input,
    Param(usize),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    ConcatCols(NodeId, NodeId),
    Sum(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: NormCache,
    },
    Lstm {
        x: NodeId,
        wx: NodeId,
        wh: NodeId,
        b: NodeId,
        cache: LstmCache,
    },
    Custom {
        inputs: Vec<NodeId>,
        rule: Box<dyn BackwardFn>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// Define-by-run record of one forward pass.
///
/// Parameters are borrowed from their [`Variable`]s for the lifetime of the
/// tape, so a tape is cheap to rebuild every training step.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a constant; no gradient is propagated past it.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Cow::Owned(t), Op::Input)
    }

    /// Records parameter `index` of the caller's variable set.
    pub fn param(&mut self, index: usize, var: &'a Variable) -> NodeId {
        self.push(Cow::Borrowed(&var.value), Op::Param(index))
    }

    /// Like [`Tape::param`] but takes a copy of the value, leaving the
    /// variable free to be mutated while the tape is alive.
    pub fn param_copy(&mut self, index: usize, var: &Variable) -> NodeId {
        self.push(Cow::Owned(var.value.clone()), Op::Param(index))
    }

    /// `x·w + b` for `x` T×Din, `w` Din×Dout, `b` of length Dout.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (t, din) = xv.dims2();
        if wv.rank() != 2 || wv.rows() != din {
            return Err(Error::dim("linear", xv.shape(), wv.shape()));
        }
        let dout = wv.cols();
        if bv.len() != dout {
            return Err(Error::dim("linear bias", wv.shape(), bv.shape()));
        }
        let mut out = Vec::with_capacity(t * dout);
        for _ in 0..t {
            out.extend_from_slice(bv.data());
        }
        gemm(t, din, dout, xv.data(), false, wv.data(), false, 1.0, &mut out);
        let out = Tensor::matrix(t, dout, out)?;
        Ok(self.push(Cow::Owned(out), Op::Linear { x, w, b }))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(op, av.shape(), bv.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(Cow::Owned(out), Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        Ok(self.push(Cow::Owned(out), Op::Mul(a, b)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(Cow::Owned(out), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = ops::sigmoid(*v));
        self.push(Cow::Owned(out), Op::Sigmoid(a))
    }

    /// Concatenates two T×_ matrices along the feature axis.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((ta, ca), (tb, cb)) = (av.dims2(), bv.dims2());
        if ta != tb {
            return Err(Error::dim("concat", av.shape(), bv.shape()));
        }
        let mut out = Vec::with_capacity(ta * (ca + cb));
        for r in 0..ta {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let out = Tensor::matrix(ta, ca + cb, out)?;
        Ok(self.push(Cow::Owned(out), Op::ConcatCols(a, b)))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(a))
    }

    /// Per-row normalization over the feature axis followed by an affine map.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Precondition("layer norm eps must be positive".into()));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if gv.len() != d || bv.len() != d {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let (out, cache) = ops::layer_norm_forward(xv, gv.data(), bv.data(), eps);
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
        ))
    }

    /// Unidirectional LSTM from zero initial state; see [`Tape::lstm_with_state`].
    pub fn lstm(&mut self, x: NodeId, wx: NodeId, wh: NodeId, b: NodeId) -> Result<NodeId> {
        let h = self.value(wh).rows();
        self.lstm_with_state(x, wx, wh, b, &vec![0.0; h], &vec![0.0; h])
    }

    /// Left-to-right LSTM over the rows of `x` (T×Din).
    ///
    /// `wx` is Din×4H, `wh` is H×4H and `b` has length 4H, gate blocks in the
    /// order input, forget, cell, output. Returns the hidden state of every
    /// frame as a T×H matrix.
    pub fn lstm_with_state(
        &mut self,
        x: NodeId,
        wx: NodeId,
        wh: NodeId,
        b: NodeId,
        h0: &[f64],
        c0: &[f64],
    ) -> Result<NodeId> {
        let (xv, wxv, whv, bv) = (self.value(x), self.value(wx), self.value(wh), self.value(b));
        let h = whv.rows();
        if whv.rank() != 2 || whv.cols() != 4 * h {
            return Err(Error::dim("lstm recurrent weight", whv.shape(), &[h, 4 * h]));
        }
        if wxv.rank() != 2 || wxv.rows() != xv.cols() || wxv.cols() != 4 * h {
            return Err(Error::dim("lstm input weight", xv.shape(), wxv.shape()));
        }
        if bv.len() != 4 * h {
            return Err(Error::dim("lstm bias", whv.shape(), bv.shape()));
        }
        if h0.len() != h || c0.len() != h {
            return Err(Error::dim("lstm state", &[h], &[h0.len(), c0.len()]));
        }
        let (out, cache) = ops::lstm_forward(xv, wxv, whv, bv.data(), h0, c0)?;
        Ok(self.push(
            Cow::Owned(out),
            Op::Lstm {
                x,
                wx,
                wh,
                b,
                cache,
            },
        ))
    }

    /// Records an op computed outside the engine together with its backward rule.
    pub fn custom(
        &mut self,
        inputs: &[NodeId],
        value: Tensor,
        rule: Box<dyn BackwardFn>,
    ) -> NodeId {
        self.push(
            Cow::Owned(value),
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`, returning gradients of every
    /// parameter node that the loss depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Precondition("tape is empty".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Precondition(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut params = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(var) => {
                    params.push((*var, g));
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (t, din) = xv.dims2();
                    let dout = wv.cols();
                    if self.needs_grad(*x) {
                        let mut dx = vec![0.0; t * din];
                        gemm(t, dout, din, g.data(), false, wv.data(), true, 0.0, &mut dx);
                        accumulate(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                    }
                    if self.needs_grad(*w) {
                        let mut dw = vec![0.0; din * dout];
                        gemm(din, t, dout, xv.data(), true, g.data(), false, 0.0, &mut dw);
                        accumulate(&mut grads, *w, Tensor::new(wv.shape(), dw)?);
                    }
                    if self.needs_grad(*b) {
                        let mut db = vec![0.0; dout];
                        for r in 0..t {
                            for (d, v) in db.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::new(self.value(*b).shape(), db)?);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let mut ga = g.clone();
                    for (o, v) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *o *= v;
                    }
                    let mut gb = g;
                    for (o, v) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *o *= v;
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    for (o, y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        if *y <= 0.0 {
                            *o = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    for (o, y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        *o *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let t = g.rows();
                    let mut ga = Vec::with_capacity(t * ca);
                    let mut gb = Vec::with_capacity(t * cb);
                    for r in 0..t {
                        let row = g.row(r);
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    accumulate(&mut grads, *a, Tensor::new(self.value(*a).shape(), ga)?);
                    accumulate(&mut grads, *b, Tensor::new(self.value(*b).shape(), gb)?);
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(self.value(*a).shape(), gv));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dg, db) = ops::layer_norm_backward(&g, self.value(*gamma).data(), cache);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, Tensor::new(self.value(*gamma).shape(), dg)?);
                    accumulate(&mut grads, *beta, Tensor::new(self.value(*beta).shape(), db)?);
                }
                Op::Lstm {
                    x,
                    wx,
                    wh,
                    b,
                    cache,
                } => {
                    let lg = ops::lstm_backward(
                        &g,
                        self.value(*x),
                        self.value(*wx),
                        self.value(*wh),
                        cache,
                        self.needs_grad(*x),
                    );
                    if let Some(dx) = lg.dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate(&mut grads, *wx, lg.dwx);
                    accumulate(&mut grads, *wh, lg.dwh);
                    accumulate(&mut grads, *b, Tensor::new(self.value(*b).shape(), lg.db)?);
                }
                Op::Custom { inputs, rule } => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|i| self.value(*i)).collect();
                    let gs = rule.backward(&g, &vals);
                    for (i, gi) in inputs.iter().zip(gs) {
                        if let Some(gi) = gi {
                            if gi.shape() != self.value(*i).shape() {
                                return Err(Error::dim(
                                    "custom backward",
                                    self.value(*i).shape(),
                                    gi.shape(),
                                ));
                            }
                            accumulate(&mut grads, *i, gi);
                        }
                    }
                }
            }
        }
        params.reverse();
        Ok(Gradients { params })
    }

    /// Inputs never need a gradient; everything else might.
    fn needs_grad(&self, id: NodeId) -> bool {
        !matches!(self.nodes[id.0].op, Op::Input)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Parameter gradients produced by [`Tape::backward`], keyed by the variable
/// index passed to [`Tape::param`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: Vec<(usize, Tensor)>,
}

impl Gradients {
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.params.iter().map(|(i, g)| (*i, g))
    }

    /// Adds these gradients into the matching trainable variables.
    pub fn accumulate_into(&self, vars: &mut [Variable]) -> Result<()> {
        for (i, g) in self.iter() {
            let var = vars
                .get_mut(i)
                .ok_or_else(|| Error::Precondition(format!("no variable with index {i}")))?;
            if !var.trainable {
                continue;
            }
            if var.grad.shape() != g.shape() {
                return Err(Error::dim("gradient", var.grad.shape(), g.shape()));
            }
            var.grad.add_assign(g);
        }
        Ok(())
    }
}

/// Backpropagates `loss` and accumulates d(loss)/d(v) into every trainable
/// variable that was recorded on `tape`.
///
/// The tape must not borrow `vars`; record parameters with
/// [`Tape::param_copy`], or call [`Tape::backward`] and apply the returned
/// [`Gradients`] once the tape is dropped.
pub fn reverse_pass(tape: &Tape<'_>, loss: NodeId, vars: &mut [Variable]) -> Result<()> {
    tape.backward(loss)?.accumulate_into(vars)
}
