//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is an append-only arena of nodes. Every primitive application
//! pushes a node holding its output value, its inputs and whatever it needs
//! for the backward pass (only dropout carries extra state: its mask). Node
//! indices are handed out as [`Var`] handles, so the tape is always in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use selfdistill::autodiff::Tape;
//! use selfdistill::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::vector(vec![1.0, -2.0]).unwrap());
//! let sq = tape.mul(w, w).unwrap();
//! let s = tape.sum(sq).unwrap();
//! let loss = tape.affine(s, 0.5, 0.0).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[1.0, -2.0]);
//! ```

mod gradcheck;
mod optim;

pub use gradcheck::finite_difference_check;
pub use optim::{adam_step, AdamConfig, AdamState};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt, matmul_at_b, matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable primitives. Binary elementwise ops accept a right-hand side
/// of the same shape, a single element, or a single row broadcast over the
/// rows of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    /// `scale * x + shift`
    Affine {
        scale: f64,
        shift: f64,
    },
    Relu,
    Sigmoid,
    /// Row-wise softmax over the last axis.
    Softmax,
    /// Natural log of `x` clamped to `[min, max]`; zero gradient outside.
    Log {
        min: f64,
        max: f64,
    },
    Sum,
    Mean,
    /// Inverted dropout with a stored keep-mask; kept units are scaled.
    Dropout {
        mask: Vec<bool>,
        scale: f64,
    },
    ConcatCols,
    SliceCols {
        start: usize,
        end: usize,
    },
    GatherRows {
        indices: Vec<usize>,
    },
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Affine { .. } => "affine",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax => "softmax",
            Primitive::Log { .. } => "log",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Dropout { .. } => "dropout",
            Primitive::ConcatCols => "concat_cols",
            Primitive::SliceCols { .. } => "slice_cols",
            Primitive::GatherRows { .. } => "gather_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Option<Primitive>,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
}

fn broadcast_kind(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Result<Broadcast> {
    if lhs.shape() == rhs.shape() {
        Ok(Broadcast::Same)
    } else if rhs.is_scalar() {
        Ok(Broadcast::Scalar)
    } else if lhs.is_matrix() && rhs.rows() == 1 && rhs.cols() == lhs.cols() && rhs.shape().len() <= 2 {
        Ok(Broadcast::Row)
    } else {
        Err(Error::shape(
            op,
            format!("cannot broadcast {:?} onto {:?}", rhs.shape(), lhs.shape()),
        ))
    }
}

fn rhs_index(kind: Broadcast, i: usize, cols: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Scalar => 0,
        Broadcast::Row => i % cols,
    }
}

/// Sums a full-shape gradient back down to the broadcast operand's shape.
fn reduce_to(kind: Broadcast, grad: Vec<f64>, target: &Tensor, cols: usize) -> Tensor {
    let data = match kind {
        Broadcast::Same => grad,
        Broadcast::Scalar => vec![grad.iter().sum()],
        Broadcast::Row => {
            let mut acc = vec![0.0; cols];
            for row in grad.chunks(cols) {
                for (a, g) in acc.iter_mut().zip(row) {
                    *a += g;
                }
            }
            acc
        }
    };
    Tensor::new(target.shape().to_vec(), data).expect("reduced shape")
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` for nodes that do
    /// not require gradients.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates: every node is stored as a constant and
    /// nothing is retained for a backward pass.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = self.recording;
        self.push(value, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Applies `op` to `inputs`, recording a node when gradients are enabled.
    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::ConcatCols => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::shape(
                op.name(),
                format!("expected {arity} inputs, got {}", inputs.len()),
            ));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = forward(&op, &values)?;
        if !out.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if !requires_grad {
            return Ok(self.push(out, false));
        }
        self.nodes.push(Node {
            op: Some(op),
            inputs: inputs.to_vec(),
            value: out,
            requires_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.apply(Primitive::Affine { scale, shift }, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[a])
    }
    /// `ln(clamp(x, min, max))`.
    pub fn log_clamped(&mut self, a: Var, min: f64, max: f64) -> Result<Var> {
        self.apply(Primitive::Log { min, max }, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[a])
    }
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::ConcatCols, &[a, b])
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::SliceCols { start, end }, &[a])
    }
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::GatherRows { indices }, &[a])
    }

    /// Inverted dropout: zeroes each unit with probability `p` and scales the
    /// survivors by `1/(1-p)`. The sampled mask is stored on the node.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        let n = self.nodes[a.0].value.len();
        let mask: Vec<bool> = if p == 0.0 {
            vec![true; n]
        } else {
            (0..n).map(|_| rng.gen::<f64>() >= p).collect()
        };
        self.apply(
            Primitive::Dropout {
                mask,
                scale: 1.0 / (1.0 - p),
            },
            &[a],
        )
    }

    /// Reverse sweep from a scalar `loss`. Every trainable leaf receives a
    /// gradient, zero when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if root.requires_grad {
            grads[loss.0] = Some(Tensor::filled(root.value.shape(), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(upstream) = grads[idx].take() else { continue };
            let input_values: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = backward_op(op, &input_values, &node.value, &upstream);
            for ((var, g), value) in node.inputs.iter().zip(input_grads).zip(&input_values) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), value.len());
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep the gradient of the root and of leaves; intermediates are
            // consumed above.
            if idx == loss.0 {
                grads[idx] = Some(upstream);
            }
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.op.is_none() && node.requires_grad {
                let slot = &mut grads[idx];
                match slot {
                    Some(g) if !g.all_finite() => return Err(Error::NonFinite(format!("gradient of node {idx}"))),
                    Some(_) => {}
                    None => *slot = Some(Tensor::zeros(node.value.shape())),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Overflow-safe logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of `row` written into `out`.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn forward(op: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    match op {
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if !a.is_matrix() || !b.is_matrix() || a.cols() != b.rows() {
                return Err(Error::shape(name, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut out = vec![0.0; m * n];
            matmul_into(a.data(), b.data(), &mut out, m, k, n);
            Tensor::matrix(m, n, out)
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let kind = broadcast_kind(name, a, b)?;
            let cols = a.cols();
            let f: fn(f64, f64) -> f64 = match op {
                Primitive::Add => |x, y| x + y,
                Primitive::Sub => |x, y| x - y,
                Primitive::Mul => |x, y| x * y,
                _ => |x, y| x / y,
            };
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data()[rhs_index(kind, i, cols)]))
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        Primitive::Affine { scale, shift } => Ok(inputs[0].map(|x| scale * x + shift)),
        Primitive::Relu => Ok(inputs[0].map(|x| x.max(0.0))),
        Primitive::Sigmoid => Ok(inputs[0].map(sigmoid)),
        Primitive::Softmax => {
            let a = inputs[0];
            let cols = a.cols();
            let mut data = vec![0.0; a.len()];
            for (row, out) in a.data().chunks(cols).zip(data.chunks_mut(cols)) {
                softmax_row(row, out);
            }
            Tensor::new(a.shape().to_vec(), data)
        }
        Primitive::Log { min, max } => {
            if !(min > &0.0 && min < max) {
                return Err(Error::invalid(format!("log clamp [{min}, {max}]")));
            }
            Ok(inputs[0].map(|x| x.clamp(*min, *max).ln()))
        }
        Primitive::Sum => Ok(Tensor::scalar(inputs[0].sum())),
        Primitive::Mean => Ok(Tensor::scalar(inputs[0].sum() / inputs[0].len() as f64)),
        Primitive::Dropout { mask, scale } => {
            let a = inputs[0];
            if mask.len() != a.len() {
                return Err(Error::shape(name, "mask length differs from input"));
            }
            let data = a
                .data()
                .iter()
                .zip(mask)
                .map(|(&x, &keep)| if keep { x * scale } else { 0.0 })
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        Primitive::ConcatCols => {
            let (a, b) = (inputs[0], inputs[1]);
            if !a.is_matrix() || !b.is_matrix() || a.rows() != b.rows() {
                return Err(Error::shape(name, format!("{:?} | {:?}", a.shape(), b.shape())));
            }
            let mut data = Vec::with_capacity(a.len() + b.len());
            for r in 0..a.rows() {
                data.extend_from_slice(a.row(r));
                data.extend_from_slice(b.row(r));
            }
            Tensor::matrix(a.rows(), a.cols() + b.cols(), data)
        }
        Primitive::SliceCols { start, end } => {
            let a = inputs[0];
            if !a.is_matrix() || start >= end || *end > a.cols() {
                return Err(Error::shape(name, format!("[{start}, {end}) of {:?}", a.shape())));
            }
            let mut data = Vec::with_capacity(a.rows() * (end - start));
            for row in a.row_iter() {
                data.extend_from_slice(&row[*start..*end]);
            }
            Tensor::matrix(a.rows(), end - start, data)
        }
        Primitive::GatherRows { indices } => {
            if indices.is_empty() || !inputs[0].is_matrix() {
                return Err(Error::shape(name, "empty index set or non-matrix input"));
            }
            inputs[0].select_rows(indices)
        }
    }
}

fn backward_op(op: &Primitive, inputs: &[&Tensor], out: &Tensor, up: &Tensor) -> Vec<Tensor> {
    let like = |t: &Tensor, data: Vec<f64>| Tensor::new(t.shape().to_vec(), data).expect("shape");
    match op {
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let da = matmul_a_bt(up.data(), b.data(), m, n, k);
            let db = matmul_at_b(a.data(), up.data(), m, k, n);
            vec![like(a, da), like(b, db)]
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let kind = broadcast_kind("backward", a, b).expect("checked in forward");
            let cols = a.cols();
            let bv = |i: usize| b.data()[rhs_index(kind, i, cols)];
            let g = up.data();
            let (da, db): (Vec<f64>, Vec<f64>) = match op {
                Primitive::Add => (g.to_vec(), g.to_vec()),
                Primitive::Sub => (g.to_vec(), g.iter().map(|x| -x).collect()),
                Primitive::Mul => (
                    g.iter().enumerate().map(|(i, gi)| gi * bv(i)).collect(),
                    g.iter().zip(a.data()).map(|(gi, ai)| gi * ai).collect(),
                ),
                _ => (
                    g.iter().enumerate().map(|(i, gi)| gi / bv(i)).collect(),
                    g.iter()
                        .zip(a.data())
                        .enumerate()
                        .map(|(i, (gi, ai))| -gi * ai / (bv(i) * bv(i)))
                        .collect(),
                ),
            };
            vec![like(a, da), reduce_to(kind, db, b, cols)]
        }
        Primitive::Affine { scale, .. } => vec![up.map(|g| g * scale)],
        Primitive::Relu => {
            let a = inputs[0];
            let d = up
                .data()
                .iter()
                .zip(a.data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            vec![like(a, d)]
        }
        Primitive::Sigmoid => {
            let d = up
                .data()
                .iter()
                .zip(out.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            vec![like(out, d)]
        }
        Primitive::Softmax => {
            let cols = out.cols();
            let mut d = vec![0.0; out.len()];
            for ((y, g), dx) in out
                .data()
                .chunks(cols)
                .zip(up.data().chunks(cols))
                .zip(d.chunks_mut(cols))
            {
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for ((dxi, yi), gi) in dx.iter_mut().zip(y).zip(g) {
                    *dxi = yi * (gi - dot);
                }
            }
            vec![like(out, d)]
        }
        Primitive::Log { min, max } => {
            let a = inputs[0];
            let d = up
                .data()
                .iter()
                .zip(a.data())
                .map(|(g, &x)| if x >= *min && x <= *max { g / x } else { 0.0 })
                .collect();
            vec![like(a, d)]
        }
        Primitive::Sum => vec![Tensor::filled(inputs[0].shape(), up.item())],
        Primitive::Mean => {
            let n = inputs[0].len() as f64;
            vec![Tensor::filled(inputs[0].shape(), up.item() / n)]
        }
        Primitive::Dropout { mask, scale } => {
            let d = up
                .data()
                .iter()
                .zip(mask)
                .map(|(g, &keep)| if keep { g * scale } else { 0.0 })
                .collect();
            vec![like(inputs[0], d)]
        }
        Primitive::ConcatCols => {
            let (a, b) = (inputs[0], inputs[1]);
            let (ca, cb) = (a.cols(), b.cols());
            let mut da = Vec::with_capacity(a.len());
            let mut db = Vec::with_capacity(b.len());
            for row in up.row_iter() {
                da.extend_from_slice(&row[..ca]);
                db.extend_from_slice(&row[ca..ca + cb]);
            }
            vec![like(a, da), like(b, db)]
        }
        Primitive::SliceCols { start, end } => {
            let a = inputs[0];
            let cols = a.cols();
            let width = end - start;
            let mut d = vec![0.0; a.len()];
            for (r, row) in up.row_iter().enumerate() {
                d[r * cols + start..r * cols + start + width].copy_from_slice(row);
            }
            vec![like(a, d)]
        }
        Primitive::GatherRows { indices } => {
            let a = inputs[0];
            let cols = a.cols();
            let mut d = vec![0.0; a.len()];
            for (row, &i) in up.row_iter().zip(indices) {
                for (dst, g) in d[i * cols..(i + 1) * cols].iter_mut().zip(row) {
                    *dst += g;
                }
            }
            vec![like(a, d)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 7]));
        let y = tape.softmax(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn matmul_of_ones() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::filled(&[2, 3], 1.0));
        let b = tape.constant(Tensor::filled(&[3, 1], 1.0));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 3.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1.0));
        let z = tape.constant(Tensor::scalar(0.0));
        assert!(matches!(tape.div(a, z), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![0.3, -1.0, 2.0]).unwrap());
        let s = tape.sum(w).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, -2.0]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        let l = tape.affine(s, 0.5, 0.0).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn ignored_parameter_gets_exact_zero() {
        let mut tape = Tape::new();
        let used = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let unused = tape.leaf(Tensor::vector(vec![5.0]).unwrap());
        let l = tape.sum(used).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn broadcasting_row_bias_gradient_sums_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(m(3, 2, &[1., 2., 3., 4., 5., 6.]));
        let b = tape.leaf(m(1, 2, &[0.5, -0.5]));
        let y = tape.add(x, b).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let mut tape = Tape::no_grad();
        let w = tape.leaf(Tensor::scalar(2.0));
        let y = tape.mul(w, w).unwrap();
        assert!(!tape.requires_grad(y));
        let g = tape.backward(y).unwrap();
        assert!(g.get(w).is_none());
    }

    #[test]
    fn dropout_mask_is_reused_in_backward() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = tape.leaf(Tensor::filled(&[4, 8], 1.0));
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        // Forward values and gradients share the same mask and scale.
        assert_eq!(tape.value(y).data(), g.get(x).unwrap().data());
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn zero_rate_dropout_is_identity() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = tape.leaf(m(2, 2, &[1.5, -2.0, 0.25, 3.0]));
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(tape.value(x), tape.value(y));
    }

    #[test]
    fn clamped_log_is_finite_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 1.0]).unwrap());
        let y = tape.log_clamped(x, 1e-12, 1.0 - 1e-12).unwrap();
        assert!((tape.value(y).data()[0] - 1e-12f64.ln()).abs() < 1e-12);
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0]);
    }
}
