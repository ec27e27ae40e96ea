//! Reverse-mode differentiation over a recorded tape.
//!
//! The op vocabulary is the fixed set the actor, critic and baseline losses
//! are built from. Nodes created from [`Graph::constant`] (and every node
//! computed only from constants) carry no gradient and are skipped on the
//! backward sweep.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Argument bound for `exp`, keeps outputs finite.
const EXP_ARG_MAX: f64 = 700.0;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `x · w + b`, with `x: [B, in]`, `w: [in, out]`, `b: [out]`.
    Affine(Var, Var, Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Scale(Var, f64),
    Offset(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    /// `[B, n] + [n]` broadcast over rows.
    AddRow(Var, Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    SumCols(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of tensor operations.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    tanh_grad_sign: f64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

fn col_sums(t: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; t.cols()];
    for row in t.rows_iter() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Forward affine map shared by the tape and by graph-free inference, so both
/// paths produce bit-identical outputs.
pub(crate) fn affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (fan_in, fan_out) = match w.shape() {
        [i, o] => (*i, *o),
        s => {
            return Err(Error::Contract(format!(
                "weight must be a matrix, got {s:?}"
            )))
        }
    };
    if x.cols() != fan_in {
        return Err(Error::Contract(format!(
            "input has {} features, layer expects {fan_in}",
            x.cols()
        )));
    }
    if b.len() != fan_out {
        return Err(Error::Contract(format!(
            "bias has {} entries, layer has {fan_out} outputs",
            b.len()
        )));
    }
    let rows = x.rows();
    let mut out = vec![0.0; rows * fan_out];
    gemm(
        rows,
        fan_in,
        fan_out,
        x.data(),
        false,
        w.data(),
        false,
        &mut out,
        false,
    );
    for row in out.chunks_exact_mut(fan_out) {
        for (o, bias) in row.iter_mut().zip(b.data()) {
            *o += bias;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-empty") = fan_out;
    Tensor::new(shape, out)
}

pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            tanh_grad_sign: 1.0,
        }
    }

    /// Flips the sign of the tanh derivative on the backward pass. Used only
    /// to check that the gradient checker catches a broken derivative.
    #[doc(hidden)]
    pub fn inject_tanh_derivative_fault(&mut self) {
        self.tanh_grad_sign = -1.0;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Contract(format!(
                "{what}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        what: &str,
    ) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = affine_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Affine(x, w, b), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, relu, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.min(EXP_ARG_MAX).exp(), Op::Exp(x))
    }

    /// Natural log; arguments are floored at the smallest positive normal.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(f64::MIN_POSITIVE).ln(), Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| if y < x { y } else { x }, Op::Min(a, b), "min")
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let va = self.value(a);
        let vr = self.value(row);
        if vr.len() != va.cols() {
            return Err(Error::Contract(format!(
                "add_row: row of {} entries for {} columns",
                vr.len(),
                va.cols()
            )));
        }
        let mut data = va.data().to_vec();
        for chunk in data.chunks_exact_mut(vr.len()) {
            for (d, r) in chunk.iter_mut().zip(vr.data()) {
                *d += r;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Concatenates along the last dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat of nothing".into()));
        };
        let rows = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Contract("concat: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x);
        if start >= end || end > v.cols() {
            return Err(Error::Contract(format!(
                "slice {start}..{end} out of {} columns",
                v.cols()
            )));
        }
        let data: Vec<f64> = v
            .rows_iter()
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let value = Tensor::matrix(v.rows(), end - start, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceCols(x, start), rg))
    }

    /// Row sums, `[B, n] -> [B, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data: Vec<f64> = v.rows_iter().map(|r| r.iter().sum()).collect();
        let value = Tensor::matrix(v.rows(), 1, data).expect("rows > 0");
        let rg = self.rg(x);
        self.push(value, Op::SumCols(x), rg)
    }

    /// Mean of all entries, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    // Leaves keep their gradient for the caller.
                    grads[idx] = Some(dy);
                }
                Op::Affine(x, w, b) => {
                    let (vx, vw) = (self.value(*x), self.value(*w));
                    let (rows, fan_in, fan_out) = (vx.rows(), vw.shape()[0], vw.shape()[1]);
                    if self.rg(*x) {
                        let mut dx = vec![0.0; rows * fan_in];
                        gemm(
                            rows,
                            fan_out,
                            fan_in,
                            dy.data(),
                            false,
                            vw.data(),
                            true,
                            &mut dx,
                            false,
                        );
                        accumulate(&mut grads[x.0], Tensor::new(vx.shape().to_vec(), dx)?);
                    }
                    if self.rg(*w) {
                        let mut dw = vec![0.0; fan_in * fan_out];
                        gemm(
                            fan_in,
                            rows,
                            fan_out,
                            vx.data(),
                            true,
                            dy.data(),
                            false,
                            &mut dw,
                            false,
                        );
                        accumulate(&mut grads[w.0], Tensor::new(vw.shape().to_vec(), dw)?);
                    }
                    if self.rg(*b) {
                        let db = col_sums(&dy);
                        accumulate(
                            &mut grads[b.0],
                            Tensor::new(self.value(*b).shape().to_vec(), db)?,
                        );
                    }
                }
                Op::Tanh(x) => {
                    let sign = self.tanh_grad_sign;
                    let d = zip_map(&dy, &node.value, |g, y| sign * g * (1.0 - y * y));
                    accumulate(&mut grads[x.0], d);
                }
                Op::Relu(x) => {
                    let d = zip_map(&dy, self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads[x.0], d);
                }
                Op::Exp(x) => {
                    let d = zip_map(&dy, &node.value, |g, y| g * y);
                    accumulate(&mut grads[x.0], d);
                }
                Op::Log(x) => {
                    let d = zip_map(&dy, self.value(*x), |g, v| g / v.max(f64::MIN_POSITIVE));
                    accumulate(&mut grads[x.0], d);
                }
                Op::Square(x) => {
                    let d = zip_map(&dy, self.value(*x), |g, v| 2.0 * g * v);
                    accumulate(&mut grads[x.0], d);
                }
                Op::Clamp(x, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let d = zip_map(&dy, self.value(*x), |g, v| {
                        if (lo..=hi).contains(&v) {
                            g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads[x.0], d);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut grads[x.0], dy.map(|g| g * c));
                }
                Op::Offset(x) => accumulate(&mut grads[x.0], dy),
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], dy.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], dy);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], dy.map(|g| -g));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], dy);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], zip_map(&dy, self.value(*b), |g, v| g * v));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], zip_map(&dy, self.value(*a), |g, v| g * v));
                    }
                }
                Op::Min(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let pick_b: Vec<bool> = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(x, y)| y < x)
                        .collect();
                    if self.rg(*a) {
                        let data = dy
                            .data()
                            .iter()
                            .zip(&pick_b)
                            .map(|(&g, &pb)| if pb { 0.0 } else { g })
                            .collect();
                        accumulate(&mut grads[a.0], Tensor::new(dy.shape().to_vec(), data)?);
                    }
                    if self.rg(*b) {
                        let data = dy
                            .data()
                            .iter()
                            .zip(&pick_b)
                            .map(|(&g, &pb)| if pb { g } else { 0.0 })
                            .collect();
                        accumulate(&mut grads[b.0], Tensor::new(dy.shape().to_vec(), data)?);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let dr = col_sums(&dy);
                        accumulate(
                            &mut grads[row.0],
                            Tensor::new(self.value(*row).shape().to_vec(), dr)?,
                        );
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], dy);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let width = self.value(*p).cols();
                        if self.rg(*p) {
                            let data: Vec<f64> = dy
                                .rows_iter()
                                .flat_map(|r| r[offset..offset + width].iter().copied())
                                .collect();
                            accumulate(
                                &mut grads[p.0],
                                Tensor::new(self.value(*p).shape().to_vec(), data)?,
                            );
                        }
                        offset += width;
                    }
                }
                Op::SliceCols(x, start) => {
                    let vx = self.value(*x);
                    let (cols, width) = (vx.cols(), dy.cols());
                    let mut data = vec![0.0; vx.len()];
                    for (r, g) in data.chunks_exact_mut(cols).zip(dy.rows_iter()) {
                        r[*start..*start + width].copy_from_slice(g);
                    }
                    accumulate(&mut grads[x.0], Tensor::new(vx.shape().to_vec(), data)?);
                }
                Op::SumCols(x) => {
                    let vx = self.value(*x);
                    let cols = vx.cols();
                    let data: Vec<f64> = dy
                        .data()
                        .iter()
                        .flat_map(|&g| std::iter::repeat_n(g, cols))
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::new(vx.shape().to_vec(), data)?);
                }
                Op::Mean(x) => {
                    let vx = self.value(*x);
                    let g = dy.data()[0] / vx.len() as f64;
                    accumulate(&mut grads[x.0], Tensor::filled(vx.shape(), g));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn zip_map(dy: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = dy
        .data()
        .iter()
        .zip(other.data())
        .map(|(&g, &v)| f(g, v))
        .collect();
    Tensor::new(dy.shape().to_vec(), data).expect("same shape")
}
