//! Supervision and distillation losses for the three tasks and their
//! λ-weighted combination. Every loss is built on a [`Tape`] so it can be
//! differentiated; targets enter as constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{NUM_AU, NUM_EXPR};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to this range before any log.
pub const PROB_MIN: f64 = 1e-12;
pub const PROB_MAX: f64 = 1.0 - 1e-12;

fn check_cols(op: &'static str, t: &Tensor, cols: usize) -> Result<()> {
    if !t.is_matrix() || t.cols() != cols {
        return Err(Error::shape(
            op,
            format!("expected batch x {cols}, got {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn check_same_rows(op: &'static str, tape: &Tape, logits: Var, targets: &Tensor) -> Result<()> {
    let rows = tape.value(logits).rows();
    if targets.rows() != rows {
        return Err(Error::shape(
            op,
            format!("{rows} prediction rows but {} target rows", targets.rows()),
        ));
    }
    Ok(())
}

/// Weighted binary cross entropy where `weights[c]` scales only the
/// positive-label term; mean over batch and the 12 classes.
fn weighted_bce(tape: &mut Tape, logits: Var, targets: &Tensor, weights: &[f64]) -> Result<Var> {
    let cols = targets.cols();
    let pos = targets
        .data()
        .iter()
        .enumerate()
        .map(|(i, y)| y * weights[i % cols])
        .collect();
    let neg = targets.data().iter().map(|y| 1.0 - y).collect();
    let pos = tape.constant(Tensor::new(targets.shape().to_vec(), pos)?);
    let neg = tape.constant(Tensor::new(targets.shape().to_vec(), neg)?);
    let p = tape.sigmoid(logits)?;
    let log_p = tape.log_clamped(p, PROB_MIN, PROB_MAX)?;
    let q = tape.affine(p, -1.0, 1.0)?;
    let log_q = tape.log_clamped(q, PROB_MIN, PROB_MAX)?;
    let a = tape.mul(log_p, pos)?;
    let b = tape.mul(log_q, neg)?;
    let total = tape.add(a, b)?;
    let m = tape.mean(total)?;
    tape.affine(m, -1.0, 0.0)
}

fn check_au_weights(weights: &[f64]) -> Result<()> {
    if weights.len() != NUM_AU || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::invalid("AU loss needs 12 finite positive class weights"));
    }
    Ok(())
}

/// Class-reweighted BCE against binary labels.
pub fn au_supervised(tape: &mut Tape, logits: Var, labels: &Tensor, weights: &[f64]) -> Result<Var> {
    check_cols("au_supervised", labels, NUM_AU)?;
    check_same_rows("au_supervised", tape, logits, labels)?;
    check_au_weights(weights)?;
    if labels.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid("AU labels must be 0 or 1"));
    }
    weighted_bce(tape, logits, labels, weights)
}

/// The supervised AU loss with soft teacher probabilities as targets.
pub fn au_distill(tape: &mut Tape, logits: Var, teacher: &Tensor, weights: &[f64]) -> Result<Var> {
    check_cols("au_distill", teacher, NUM_AU)?;
    check_same_rows("au_distill", tape, logits, teacher)?;
    check_au_weights(weights)?;
    if teacher.data().iter().any(|y| !(0.0..=1.0).contains(y)) {
        return Err(Error::invalid("AU teacher probabilities must lie in [0, 1]"));
    }
    weighted_bce(tape, logits, teacher, weights)
}

/// Batch mean of `-w[y] log softmax(z)[y]`.
pub fn expr_supervised(tape: &mut Tape, logits: Var, one_hot: &Tensor, weights: &[f64]) -> Result<Var> {
    check_cols("expr_supervised", one_hot, NUM_EXPR)?;
    check_same_rows("expr_supervised", tape, logits, one_hot)?;
    if weights.len() != NUM_EXPR || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::invalid("EXPR loss needs 7 finite positive class weights"));
    }
    let mut scaled = Vec::with_capacity(one_hot.len());
    for row in one_hot.row_iter() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!("EXPR label row {row:?} is not one-hot")));
        }
        scaled.extend(row.iter().zip(weights).map(|(y, w)| y * w));
    }
    let target = tape.constant(Tensor::new(one_hot.shape().to_vec(), scaled)?);
    let p = tape.softmax(logits)?;
    let log_p = tape.log_clamped(p, PROB_MIN, PROB_MAX)?;
    let prod = tape.mul(log_p, target)?;
    let total = tape.sum(prod)?;
    tape.affine(total, -1.0 / one_hot.rows() as f64, 0.0)
}

/// Batch mean of `KL(teacher || softmax(logits))`.
pub fn expr_distill(tape: &mut Tape, logits: Var, teacher: &Tensor) -> Result<Var> {
    check_cols("expr_distill", teacher, NUM_EXPR)?;
    check_same_rows("expr_distill", tape, logits, teacher)?;
    for row in teacher.row_iter() {
        if row.iter().any(|&v| v < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("EXPR teacher row is not a distribution"));
        }
    }
    let neg_entropy: f64 = teacher.data().iter().filter(|&&t| t > 0.0).map(|&t| t * t.ln()).sum();
    let t = tape.constant(teacher.clone());
    let p = tape.softmax(logits)?;
    let log_p = tape.log_clamped(p, PROB_MIN, PROB_MAX)?;
    let prod = tape.mul(log_p, t)?;
    let cross = tape.sum(prod)?;
    let b = teacher.rows() as f64;
    tape.affine(cross, -1.0 / b, neg_entropy / b)
}

/// Concordance correlation coefficient with population moments.
///
/// Two constant, identical sequences give 1.
pub fn ccc(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.len() < 2 {
        return Err(Error::invalid("CCC needs two equal-length sequences of length >= 2"));
    }
    let n = predictions.len() as f64;
    let mx = predictions.iter().sum::<f64>() / n;
    let my = targets.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in predictions.iter().zip(targets) {
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
        cov += (x - mx) * (y - my);
    }
    let den = (vx + vy) / n + (mx - my) * (mx - my);
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * cov / n / den)
}

/// CCC between two `batch × 1` nodes.
pub fn ccc_on_tape(tape: &mut Tape, predictions: Var, targets: Var) -> Result<Var> {
    let (px, py) = (tape.value(predictions), tape.value(targets));
    if px.shape() != py.shape() || !px.is_matrix() || px.cols() != 1 || px.rows() < 2 {
        return Err(Error::shape(
            "ccc",
            format!(
                "need matching batch x 1 inputs with batch >= 2, got {:?} and {:?}",
                px.shape(),
                py.shape()
            ),
        ));
    }
    let mx = tape.mean(predictions)?;
    let my = tape.mean(targets)?;
    let dx = tape.sub(predictions, mx)?;
    let dy = tape.sub(targets, my)?;
    let dxx = tape.mul(dx, dx)?;
    let dyy = tape.mul(dy, dy)?;
    let dxy = tape.mul(dx, dy)?;
    let vx = tape.mean(dxx)?;
    let vy = tape.mean(dyy)?;
    let cov = tape.mean(dxy)?;
    let gap = tape.sub(mx, my)?;
    let gap2 = tape.mul(gap, gap)?;
    let v = tape.add(vx, vy)?;
    let den = tape.add(v, gap2)?;
    if tape.value(den).item() == 0.0 {
        return Ok(tape.constant(Tensor::scalar(1.0)));
    }
    let num = tape.affine(cov, 2.0, 0.0)?;
    tape.div(num, den)
}

/// `(1 - CCC_valence) + (1 - CCC_arousal)` for `batch × 2` inputs.
pub fn va_ccc_loss(tape: &mut Tape, va_scalars: Var, targets: Var) -> Result<Var> {
    let mut loss = tape.constant(Tensor::scalar(2.0));
    for dim in 0..2 {
        let p = tape.slice_cols(va_scalars, dim, dim + 1)?;
        let t = tape.slice_cols(targets, dim, dim + 1)?;
        let c = ccc_on_tape(tape, p, t)?;
        loss = tape.sub(loss, c)?;
    }
    Ok(loss)
}

pub fn va_supervised(tape: &mut Tape, va_scalars: Var, targets: &Tensor) -> Result<Var> {
    check_cols("va_supervised", targets, 2)?;
    check_same_rows("va_supervised", tape, va_scalars, targets)?;
    let t = tape.constant(targets.clone());
    va_ccc_loss(tape, va_scalars, t)
}

/// Negative-CCC loss against the teacher's decoded scalars.
pub fn va_distill(tape: &mut Tape, va_scalars: Var, teacher: &Tensor) -> Result<Var> {
    check_cols("va_distill", teacher, 2)?;
    check_same_rows("va_distill", tape, va_scalars, teacher)?;
    let t = tape.constant(teacher.clone());
    va_ccc_loss(tape, va_scalars, t)
}

/// Task weights `λ` in AU, EXPR, VA order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights(pub [f64; 3]);

impl TaskWeights {
    pub fn uniform() -> Self {
        Self([1.0 / 3.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.0.iter().sum();
        if self.0.iter().any(|l| !(l.is_finite() && *l >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "task weights {:?} are not a probability vector",
                self.0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub au: f64,
    pub expr: f64,
    pub va: f64,
    pub lambdas: TaskWeights,
    pub combined: f64,
}

pub fn combine_losses(losses: [f64; 3], lambdas: TaskWeights) -> Result<LossBreakdown> {
    lambdas.validate()?;
    let [au, expr, va] = losses;
    let [la, le, lv] = lambdas.0;
    Ok(LossBreakdown {
        au,
        expr,
        va,
        lambdas,
        combined: la * au + le * expr + lv * va,
    })
}

/// Differentiable λ-weighted sum of the three task losses.
pub fn combine_on_tape(tape: &mut Tape, losses: [Var; 3], lambdas: TaskWeights) -> Result<Var> {
    lambdas.validate()?;
    let mut total = tape.affine(losses[0], lambdas.0[0], 0.0)?;
    for (&l, &w) in losses[1..].iter().zip(&lambdas.0[1..]) {
        let scaled = tape.affine(l, w, 0.0)?;
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}
