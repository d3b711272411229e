//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in evaluation order, so the node list is
//! already topologically sorted and [`Tape::backward`] is a single reverse sweep.
//! Parameters are registered once per tape; using the same parameter in several
//! places (the tracker runs its language model twice per sample) accumulates
//! every path's contribution into one gradient.

use std::collections::HashMap;

use super::matrix::dot;
use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Gelu(Var),
    MaskedSoftmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<Option<usize>>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    Sum(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a parameter, `None` when the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.grads[v.0].as_ref())
    }

    pub fn var(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Parameters touched by the tape with their gradients.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> + '_ {
        self.params
            .iter()
            .filter_map(|(p, v)| self.grads[v.0].as_ref().map(|g| (*p, g)))
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

/// Softmax of each row restricted to entries where `mask == 1`. Masked entries
/// are exactly zero; rows with no unmasked entry are all zero.
pub fn masked_row_softmax(scores: &Matrix, mask: &Matrix) -> Result<Matrix> {
    if scores.shape() != mask.shape() {
        return Err(Error::shape("masked_row_softmax", scores.shape(), mask.shape()));
    }
    let mut out = Matrix::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        let s = scores.row(r);
        let m = mask.row(r);
        let max = s
            .iter()
            .zip(m)
            .filter(|(_, &mv)| mv != 0.0)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let o = out.row_mut(r);
        let mut total = 0.0;
        for ((ov, &sv), &mv) in o.iter_mut().zip(s).zip(m) {
            if mv != 0.0 {
                *ov = (sv - max).exp();
                total += *ov;
            }
        }
        for ov in o.iter_mut() {
            *ov /= total;
        }
    }
    Ok(out)
}

pub fn leaky_relu(x: &Matrix, slope: f64) -> Matrix {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives a gradient (data, masks).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A non-parameter leaf whose gradient is tracked; useful for probing
    /// input sensitivities.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a parameter leaf; repeated calls with the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a `1 × cols` row vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if bs.0 != 1 || bs.1 != xs.1 {
            return Err(Error::shape("add_bias", xs, bs));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).as_slice().to_vec();
        for r in 0..xs.0 {
            for (v, bv) in value.row_mut(r).iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// `max(x, slope·x)` for `slope ≥ 0`; the subgradient at 0 is `slope`.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        if !(slope >= 0.0) {
            return Err(Error::Contract(format!("leaky_relu slope must be >= 0, got {slope}")));
        }
        let value = leaky_relu(self.value(a), slope);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LeakyRelu(a, slope), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row softmax over entries where `mask` is 1. The mask is treated as a constant.
    pub fn masked_row_softmax(&mut self, scores: Var, mask: Var) -> Result<Var> {
        let value = masked_row_softmax(self.value(scores), self.value(mask))?;
        let rg = self.rg(&[scores]);
        Ok(self.push(value, Op::MaskedSoftmax(scores), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Matrix::concat_rows(&mats)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Matrix::concat_cols(&mats)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, end)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, end)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    /// Output row `i` is row `rows[i]` of `a`, or zeros for `None`.
    pub fn select_rows(&mut self, a: Var, rows: &[Option<usize>]) -> Result<Var> {
        let src = self.value(a);
        let mut value = Matrix::zeros(rows.len(), src.cols());
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = *r {
                if r >= src.rows() {
                    return Err(Error::shape("select_rows", src.shape(), (r, 0)));
                }
                value.row_mut(i).copy_from_slice(src.row(r));
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SelectRows(a, rows.to_vec()), rg))
    }

    /// Row-wise layer normalisation with `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != (1, xs.1) {
                return Err(Error::shape("layer_norm", xs, self.shape(p)));
            }
        }
        let (rows, cols) = xs;
        let xv = self.value(x);
        let g = self.value(gain).as_slice();
        let b = self.value(bias).as_slice();
        let mut normalized = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let n = (row[c] - mean) * is;
                normalized.set(r, c, n);
                out.set(r, c, n * g[c] + b[c]);
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean token cross-entropy of `logits` rows against `targets`; `1 × 1`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() || lv.rows() == 0 {
            return Err(Error::shape("cross_entropy", lv.shape(), (targets.len(), 1)));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(Error::Contract(format!("target id {t} outside vocabulary of {}", lv.cols())));
        }
        let ones = Matrix::filled(lv.rows(), lv.cols(), 1.0);
        let probs = masked_row_softmax(lv, &ones)?;
        let n = targets.len() as f64;
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -probs.get(r, t).max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / n;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a 1x1 loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let needs = |v: &Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a.0], g.matmul_nt(self.value(*b))?);
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], self.value(*a).matmul_tn(&g)?);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a.0], g.matmul(self.value(*b))?);
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], g.matmul_tn(self.value(*a))?);
                    }
                }
                Op::Add(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::AddBias(x, b) => {
                    if needs(b) {
                        let mut gb = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (acc, v) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads[b.0], gb);
                    }
                    if needs(x) {
                        accumulate(&mut grads[x.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a.0], g.hadamard(self.value(*b))?);
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], g.hadamard(self.value(*a))?);
                    }
                }
                Op::Scale(a, f) => accumulate(&mut grads[a.0], g.scale(*f)),
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (gv, &xv) in ga.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        if xv <= 0.0 {
                            *gv *= slope;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    for (gv, &y) in ga.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        *gv *= 1.0 - y * y;
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (gv, &xv) in ga.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        *gv *= gelu_grad(xv);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::MaskedSoftmax(s) => {
                    let y = &node.value;
                    let mut gs = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner = dot(yr, gr);
                        for (c, o) in gs.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - inner);
                        }
                    }
                    accumulate(&mut grads[s.0], gs);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.shape(*p).0;
                        if needs(p) {
                            accumulate(&mut grads[p.0], g.slice_rows(offset, offset + n)?);
                        }
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.shape(*p).1;
                        if needs(p) {
                            accumulate(&mut grads[p.0], g.slice_cols(offset, offset + n)?);
                        }
                        offset += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..g.rows() {
                        ga.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SelectRows(a, rows) => {
                    let (n, cols) = self.shape(*a);
                    let mut ga = Matrix::zeros(n, cols);
                    for (i, r) in rows.iter().enumerate() {
                        if let Some(r) = *r {
                            for (acc, v) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                                *acc += v;
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let (rows, cols) = normalized.shape();
                    let gv = self.value(*gain).as_slice();
                    if needs(gain) || needs(bias) {
                        let mut gg = Matrix::zeros(1, cols);
                        let mut gb = Matrix::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                gg.as_mut_slice()[c] += g.get(r, c) * normalized.get(r, c);
                                gb.as_mut_slice()[c] += g.get(r, c);
                            }
                        }
                        if needs(gain) {
                            accumulate(&mut grads[gain.0], gg);
                        }
                        if needs(bias) {
                            accumulate(&mut grads[bias.0], gb);
                        }
                    }
                    if needs(x) {
                        let n = cols as f64;
                        let mut gx = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            let xhat = normalized.row(r);
                            let ghat: Vec<f64> = (0..cols).map(|c| g.get(r, c) * gv[c]).collect();
                            let sum_g: f64 = ghat.iter().sum();
                            let sum_gx = dot(&ghat, xhat);
                            for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                                *o = inv_std[r] / n * (n * ghat[c] - sum_g - xhat[c] * sum_gx);
                            }
                        }
                        accumulate(&mut grads[x.0], gx);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g.get(0, 0) / targets.len() as f64;
                    let mut gl = probs.scale(scale);
                    for (r, &t) in targets.iter().enumerate() {
                        let v = gl.get(r, t);
                        gl.set(r, t, v - scale);
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(*a);
                    accumulate(&mut grads[a.0], Matrix::filled(rows, cols, g.get(0, 0)));
                }
            }
        }

        let params = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        Ok(Gradients { grads, params })
    }
}
