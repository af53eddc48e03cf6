//! Entropy-based uncertainty decomposition, NLL/RMSE, emotion metrics and
//! out-of-distribution separation.

use serde::{Deserialize, Serialize};

use crate::data::{discretize_va, Label, NUM_AU, NUM_EXPR};
use crate::error::{Error, Result};
use crate::losses::{ccc, PROB_MIN};
use crate::model::ProbOutputs;

const SIMPLEX_TOL: f64 = 1e-6;

fn check_distribution(probs: &[f64]) -> Result<()> {
    if probs.len() < 2 {
        return Err(Error::invalid("entropy needs at least two outcomes"));
    }
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|&p| !(p >= -SIMPLEX_TOL)) || (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("{probs:?} is not a distribution")));
    }
    Ok(())
}

fn entropy_unchecked(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    check_distribution(probs)?;
    Ok(entropy_unchecked(probs))
}

/// Entropy divided by `ln k`, in `[0, 1]`.
pub fn normalized_entropy(probs: &[f64]) -> Result<f64> {
    Ok(entropy(probs)? / (probs.len() as f64).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyTriple {
    pub total: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

impl UncertaintyTriple {
    /// Divides all three components by `ln k`.
    pub fn normalized(self, outcomes: usize) -> Self {
        let z = (outcomes as f64).ln();
        Self {
            total: self.total / z,
            aleatoric: self.aleatoric / z,
            epistemic: self.epistemic / z,
        }
    }
}

/// Total = entropy of the mean, aleatoric = mean member entropy,
/// epistemic = their difference (the mutual information).
pub fn decompose_uncertainty<R: AsRef<[f64]>>(members: &[R]) -> Result<UncertaintyTriple> {
    let first = members
        .first()
        .ok_or_else(|| Error::invalid("decomposition needs at least one member"))?
        .as_ref();
    let k = first.len();
    let mut mean = vec![0.0; k];
    let mut aleatoric = 0.0;
    for m in members {
        let m = m.as_ref();
        if m.len() != k {
            return Err(Error::invalid(format!(
                "members disagree on outcome count ({k} vs {})",
                m.len()
            )));
        }
        aleatoric += entropy(m)?;
        for (a, p) in mean.iter_mut().zip(m) {
            *a += p;
        }
    }
    let t = members.len() as f64;
    mean.iter_mut().for_each(|v| *v /= t);
    aleatoric /= t;
    let total = entropy_unchecked(&mean);
    Ok(UncertaintyTriple {
        total,
        aleatoric,
        // Jensen guarantees >= 0; clip rounding noise only.
        epistemic: (total - aleatoric).max(0.0),
    })
}

/// Log with a floor, so certain mistakes cost a large finite amount.
fn clamp_log(p: f64) -> f64 {
    p.max(PROB_MIN).ln()
}

/// Mean binary NLL per AU over the rows of `probs` (`batch × 12`).
pub fn nll_au(probs: &[[f64; NUM_AU]], labels: &[[bool; NUM_AU]]) -> Result<[f64; NUM_AU]> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::invalid("AU NLL needs matching nonempty predictions and labels"));
    }
    let mut out = [0.0; NUM_AU];
    for (p, y) in probs.iter().zip(labels) {
        for c in 0..NUM_AU {
            out[c] -= if y[c] { clamp_log(p[c]) } else { clamp_log(1.0 - p[c]) };
        }
    }
    let n = probs.len() as f64;
    Ok(out.map(|v| v / n))
}

/// Mean categorical NLL of the true class.
pub fn nll_categorical<R: AsRef<[f64]>>(probs: &[R], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::invalid("NLL needs matching nonempty predictions and labels"));
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        let p = p.as_ref();
        let py = p
            .get(y)
            .ok_or_else(|| Error::invalid(format!("label {y} out of range for {} classes", p.len())))?;
        total -= clamp_log(*py);
    }
    Ok(total / probs.len() as f64)
}

pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::invalid("RMSE needs matching nonempty sequences"));
    }
    let sq: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sq / predictions.len() as f64).sqrt())
}

/// F1 per class from parallel predicted/true class indices; a class absent
/// from both gets F1 = 0.
pub fn per_class_f1(predicted: &[usize], truth: &[usize], classes: usize) -> Vec<f64> {
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    (0..classes)
        .map(|c| {
            let den = 2 * tp[c] + fp[c] + fn_[c];
            if den == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / den as f64
            }
        })
        .collect()
}

fn binary_f1(predicted: impl Iterator<Item = bool>, truth: impl Iterator<Item = bool>) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, t) in predicted.zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmotionMetrics {
    pub au_f1: f64,
    pub au_accuracy: f64,
    /// `0.5 F1 + 0.5 accuracy`
    pub au: f64,
    pub expr_f1: f64,
    pub expr_accuracy: f64,
    /// `0.67 F1 + 0.33 accuracy`
    pub expr: f64,
    pub valence_ccc: f64,
    pub arousal_ccc: f64,
    /// Sum of the AU metric, the EXPR metric and both CCCs.
    pub total: f64,
}

impl EmotionMetrics {
    /// Per-task values fed to the balancer: AU, EXPR, and the CCC sum.
    pub fn per_task(&self) -> [f64; 3] {
        [self.au, self.expr, self.valence_ccc + self.arousal_ccc]
    }
}

/// Instances of an evaluation set grouped by task, with their rows in a
/// [`ProbOutputs`] batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupedLabels {
    pub au_rows: Vec<usize>,
    pub au: Vec<[bool; NUM_AU]>,
    pub expr_rows: Vec<usize>,
    pub expr: Vec<usize>,
    pub va_rows: Vec<usize>,
    pub va: Vec<[f64; 2]>,
}

impl GroupedLabels {
    pub fn new<'a>(labels: impl IntoIterator<Item = &'a Label>) -> Self {
        let mut g = Self::default();
        for (row, label) in labels.into_iter().enumerate() {
            match label {
                Label::Au(b) => {
                    g.au_rows.push(row);
                    g.au.push(*b);
                }
                Label::Expr(k) => {
                    g.expr_rows.push(row);
                    g.expr.push(*k);
                }
                Label::Va(v) => {
                    g.va_rows.push(row);
                    g.va.push(*v);
                }
            }
        }
        g
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.au.is_empty() || self.expr.is_empty() || self.va.len() < 2 {
            return Err(Error::invalid(
                "evaluation needs AU and EXPR instances and at least two VA instances",
            ));
        }
        Ok(())
    }
}

fn au_rows(probs: &ProbOutputs, rows: &[usize]) -> Vec<[f64; NUM_AU]> {
    rows.iter()
        .map(|&r| probs.au.row(r).try_into().expect("12 AU columns"))
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn emotion_metrics(probs: &ProbOutputs, labels: &GroupedLabels) -> Result<EmotionMetrics> {
    labels.check_nonempty()?;
    let au_pred: Vec<[bool; NUM_AU]> = au_rows(probs, &labels.au_rows)
        .iter()
        .map(|r| r.map(|p| p >= 0.5))
        .collect();
    let au_f1 = (0..NUM_AU)
        .map(|c| binary_f1(au_pred.iter().map(|r| r[c]), labels.au.iter().map(|r| r[c])))
        .sum::<f64>()
        / NUM_AU as f64;
    let correct = au_pred
        .iter()
        .zip(&labels.au)
        .map(|(p, y)| p.iter().zip(y).filter(|(a, b)| a == b).count())
        .sum::<usize>();
    let au_accuracy = correct as f64 / (NUM_AU * labels.au.len()) as f64;

    let expr_pred: Vec<usize> = labels.expr_rows.iter().map(|&r| argmax(probs.expr.row(r))).collect();
    let expr_f1 = per_class_f1(&expr_pred, &labels.expr, NUM_EXPR).iter().sum::<f64>() / NUM_EXPR as f64;
    let hits = expr_pred.iter().zip(&labels.expr).filter(|(p, t)| p == t).count();
    let expr_accuracy = hits as f64 / labels.expr.len() as f64;

    let pick = |dim: usize| -> Vec<f64> { labels.va_rows.iter().map(|&r| probs.va.get(r, dim)).collect() };
    let truth = |dim: usize| -> Vec<f64> { labels.va.iter().map(|v| v[dim]).collect() };
    let valence_ccc = ccc(&pick(0), &truth(0))?;
    let arousal_ccc = ccc(&pick(1), &truth(1))?;

    let au = 0.5 * au_f1 + 0.5 * au_accuracy;
    let expr = 0.67 * expr_f1 + 0.33 * expr_accuracy;
    Ok(EmotionMetrics {
        au_f1,
        au_accuracy,
        au,
        expr_f1,
        expr_accuracy,
        expr,
        valence_ccc,
        arousal_ccc,
        total: au + expr + valence_ccc + arousal_ccc,
    })
}

/// NLL and RMSE of one prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyMetrics {
    pub au_nll: [f64; NUM_AU],
    pub au_nll_mean: f64,
    pub expr_nll: f64,
    /// NLL of the true valence / arousal bin.
    pub valence_nll: f64,
    pub arousal_nll: f64,
    pub valence_rmse: f64,
    pub arousal_rmse: f64,
}

pub fn uncertainty_metrics(probs: &ProbOutputs, labels: &GroupedLabels) -> Result<UncertaintyMetrics> {
    labels.check_nonempty()?;
    let au_nll = nll_au(&au_rows(probs, &labels.au_rows), &labels.au)?;
    let expr_probs: Vec<&[f64]> = labels.expr_rows.iter().map(|&r| probs.expr.row(r)).collect();
    let expr_nll = nll_categorical(&expr_probs, &labels.expr)?;
    let mut bin_nll = [0.0; 2];
    let mut bin_rmse = [0.0; 2];
    for dim in 0..2 {
        let block = if dim == 0 { &probs.valence } else { &probs.arousal };
        let rows: Vec<&[f64]> = labels.va_rows.iter().map(|&r| block.row(r)).collect();
        let bins = labels
            .va
            .iter()
            .map(|v| discretize_va(v[dim]))
            .collect::<Result<Vec<_>>>()?;
        bin_nll[dim] = nll_categorical(&rows, &bins)?;
        let pred: Vec<f64> = labels.va_rows.iter().map(|&r| probs.va.get(r, dim)).collect();
        let truth: Vec<f64> = labels.va.iter().map(|v| v[dim]).collect();
        bin_rmse[dim] = rmse(&pred, &truth)?;
    }
    Ok(UncertaintyMetrics {
        au_nll,
        au_nll_mean: au_nll.iter().sum::<f64>() / NUM_AU as f64,
        expr_nll,
        valence_nll: bin_nll[0],
        arousal_nll: bin_nll[1],
        valence_rmse: bin_rmse[0],
        arousal_rmse: bin_rmse[1],
    })
}

pub const HISTOGRAM_BINS: usize = 10;

/// Fraction of `values` in each of `bins` equal-width bins over `[0, 1]`;
/// the last bin is closed. An empty input gives all zeros.
pub fn histogram(values: &[f64], bins: usize) -> Vec<f64> {
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = values.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodSeparation {
    pub tau: f64,
    pub in_domain_below: f64,
    pub ood_below: f64,
    pub in_domain_histogram: Vec<f64>,
    pub ood_histogram: Vec<f64>,
}

/// Fractions of normalised epistemic values strictly below `tau`.
pub fn ood_separation(in_domain: &[f64], ood: &[f64], tau: f64) -> Result<OodSeparation> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau {tau} outside (0, 1)")));
    }
    let below = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().filter(|&&e| e < tau).count() as f64 / v.len() as f64
        }
    };
    Ok(OodSeparation {
        tau,
        in_domain_below: below(in_domain),
        ood_below: below(ood),
        in_domain_histogram: histogram(in_domain, HISTOGRAM_BINS),
        ood_histogram: histogram(ood, HISTOGRAM_BINS),
    })
}

/// Per-row normalised uncertainty of an ensemble for one categorical block;
/// `block` picks the block out of each member's outputs.
pub fn row_uncertainty(
    members: &[ProbOutputs],
    block: impl Fn(&ProbOutputs) -> &crate::tensor::Tensor,
) -> Result<Vec<UncertaintyTriple>> {
    let first = members
        .first()
        .ok_or_else(|| Error::invalid("decomposition needs at least one member"))?;
    let k = block(first).cols();
    (0..block(first).rows())
        .map(|r| {
            let rows: Vec<&[f64]> = members.iter().map(|m| block(m).row(r)).collect();
            Ok(decompose_uncertainty(&rows)?.normalized(k))
        })
        .collect()
}

/// Per-row normalised uncertainty of AU `c` as a two-outcome distribution.
pub fn au_uncertainty(members: &[ProbOutputs], c: usize) -> Result<Vec<UncertaintyTriple>> {
    let first = members
        .first()
        .ok_or_else(|| Error::invalid("decomposition needs at least one member"))?;
    (0..first.au.rows())
        .map(|r| {
            let rows: Vec<[f64; 2]> = members
                .iter()
                .map(|m| {
                    let p = m.au.get(r, c);
                    [p, 1.0 - p]
                })
                .collect();
            Ok(decompose_uncertainty(&rows)?.normalized(2))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalized_entropy_examples() {
        assert!((normalized_entropy(&[1.0 / 7.0; 7]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(normalized_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let h = normalized_entropy(&[0.75, 0.25]).unwrap();
        assert!((h - 0.8113).abs() < 1e-4, "{h}");
        assert!(normalized_entropy(&[1.0]).is_err());
        assert!(normalized_entropy(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn entropy_is_permutation_invariant() {
        let a = normalized_entropy(&[0.1, 0.2, 0.7]).unwrap();
        let b = normalized_entropy(&[0.7, 0.1, 0.2]).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn decomposition_examples() {
        let same = [[0.2, 0.3, 0.5]; 4];
        let u = decompose_uncertainty(&same).unwrap();
        assert!(u.epistemic.abs() < 1e-12);
        assert!((u.total - u.aleatoric).abs() < 1e-12);

        let u = decompose_uncertainty(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(u.aleatoric, 0.0);
        assert!((u.total - 2f64.ln()).abs() < 1e-15);
        assert!((u.normalized(2).epistemic - 1.0).abs() < 1e-15);

        assert!(decompose_uncertainty(&[vec![0.5, 0.5], vec![1.0, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn decomposition_identity_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let k = rng.gen_range(2..8);
            let t = rng.gen_range(1..6);
            let members: Vec<Vec<f64>> = (0..t)
                .map(|_| {
                    let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
                    let s: f64 = raw.iter().sum();
                    raw.iter().map(|v| v / s).collect()
                })
                .collect();
            let u = decompose_uncertainty(&members).unwrap();
            assert!((u.total - u.aleatoric - u.epistemic).abs() < 1e-9);
            assert!(u.epistemic >= 0.0 && u.aleatoric >= 0.0);
        }
    }

    #[test]
    fn nll_examples() {
        assert_eq!(nll_categorical(&[[0.0, 1.0, 0.0]], &[1]).unwrap(), 0.0);
        let u = nll_categorical(&[[1.0 / 7.0; 7]], &[3]).unwrap();
        assert!((u - 1.9459).abs() < 1e-4);
        let au = nll_au(&[[0.5; NUM_AU]], &[[true; NUM_AU]]).unwrap();
        assert!(au.iter().all(|v| (v - 2f64.ln()).abs() < 1e-15));
        assert!(nll_categorical(&[[0.5, 0.5]], &[2]).is_err());
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[0.1, 0.2], &[0.1, 0.2]).unwrap(), 0.0);
        assert!((rmse(&[0.3, 0.4], &[0.0, 0.1]).unwrap() - 0.3).abs() < 1e-12);
        assert!((rmse(&[0.0, 0.0], &[0.3, -0.4]).unwrap() - 0.3536).abs() < 1e-4);
    }

    /// Brute-force confusion-matrix macro F1.
    fn f1_oracle(pred: &[usize], truth: &[usize], k: usize) -> f64 {
        let mut cm = vec![vec![0usize; k]; k];
        for (&p, &t) in pred.iter().zip(truth) {
            cm[t][p] += 1;
        }
        let mut total = 0.0;
        for c in 0..k {
            let tp = cm[c][c] as f64;
            let col: usize = (0..k).map(|r| cm[r][c]).sum();
            let row: usize = cm[c].iter().sum();
            let precision = if col == 0 { 0.0 } else { tp / col as f64 };
            let recall = if row == 0 { 0.0 } else { tp / row as f64 };
            if precision + recall > 0.0 {
                total += 2.0 * precision * recall / (precision + recall);
            }
        }
        total / k as f64
    }

    #[test]
    fn single_class_predictions_on_balanced_set() {
        let truth: Vec<usize> = (0..70).map(|i| i % 7).collect();
        let pred = vec![2; 70];
        let f1: f64 = per_class_f1(&pred, &truth, 7).iter().sum::<f64>() / 7.0;
        assert!((f1 - (2.0 / 8.0) / 7.0).abs() < 1e-12);
        assert!((f1 - f1_oracle(&pred, &truth, 7)).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let truth: Vec<usize> = (0..40).map(|_| rng.gen_range(0..7)).collect();
            let pred: Vec<usize> = (0..40).map(|_| rng.gen_range(0..7)).collect();
            let f1: f64 = per_class_f1(&pred, &truth, 7).iter().sum::<f64>() / 7.0;
            assert!((f1 - f1_oracle(&pred, &truth, 7)).abs() < 1e-12);
        }
    }

    fn outputs_for(labels: &[Label]) -> ProbOutputs {
        let n = labels.len();
        let mut au = vec![0.5; n * NUM_AU];
        let mut expr = vec![0.0; n * NUM_EXPR];
        let mut valence = vec![0.0; n * 20];
        let mut arousal = vec![0.0; n * 20];
        for (r, l) in labels.iter().enumerate() {
            match l {
                Label::Au(b) => {
                    for c in 0..NUM_AU {
                        au[r * NUM_AU + c] = if b[c] { 1.0 } else { 0.0 };
                    }
                    expr[r * NUM_EXPR] = 1.0;
                    valence[r * 20] = 1.0;
                    arousal[r * 20] = 1.0;
                }
                Label::Expr(k) => {
                    expr[r * NUM_EXPR + k] = 1.0;
                    valence[r * 20] = 1.0;
                    arousal[r * 20] = 1.0;
                }
                Label::Va(v) => {
                    expr[r * NUM_EXPR] = 1.0;
                    valence[r * 20 + discretize_va(v[0]).unwrap()] = 1.0;
                    arousal[r * 20 + discretize_va(v[1]).unwrap()] = 1.0;
                }
            }
        }
        use crate::tensor::Tensor;
        ProbOutputs::with_decoded_va(
            Tensor::matrix(n, NUM_AU, au).unwrap(),
            Tensor::matrix(n, NUM_EXPR, expr).unwrap(),
            Tensor::matrix(n, 20, valence).unwrap(),
            Tensor::matrix(n, 20, arousal).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let labels = vec![
            Label::Au([
                true, false, true, false, true, false, true, false, true, false, true, false,
            ]),
            Label::Au([
                false, true, false, true, false, true, false, true, false, true, false, true,
            ]),
            Label::Expr(0),
            Label::Expr(1),
            Label::Expr(2),
            Label::Expr(3),
            Label::Expr(4),
            Label::Expr(5),
            Label::Expr(6),
            // Bin centres decode exactly.
            Label::Va([-0.95, 0.45]),
            Label::Va([0.05, -0.35]),
            Label::Va([0.85, 0.95]),
        ];
        let probs = outputs_for(&labels);
        let g = GroupedLabels::new(&labels);
        let m = emotion_metrics(&probs, &g).unwrap();
        assert!((m.au - 1.0).abs() < 1e-12);
        assert!((m.expr - 1.0).abs() < 1e-12);
        assert!((m.valence_ccc - 1.0).abs() < 1e-12);
        assert!((m.arousal_ccc - 1.0).abs() < 1e-12);
        assert!((m.total - 4.0).abs() < 1e-12);
        let u = uncertainty_metrics(&probs, &g).unwrap();
        assert!(u.au_nll_mean.abs() < 1e-9 && u.expr_nll.abs() < 1e-9);
        assert!(u.valence_rmse < 1e-12);
    }

    #[test]
    fn histograms_sum_to_one() {
        let h = histogram(&[0.0, 0.05, 0.5, 1.0, 0.99], 10);
        assert_eq!(h.len(), 10);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(h[0], 0.4);
        assert_eq!(h[9], 0.4);
    }

    #[test]
    fn ood_separation_examples() {
        let a = [0.01, 0.2, 0.03];
        let s = ood_separation(&a, &a, 0.05).unwrap();
        assert_eq!(s.in_domain_below, s.ood_below);
        let s = ood_separation(&[0.0; 5], &[1.0; 5], 0.05).unwrap();
        assert_eq!((s.in_domain_below, s.ood_below), (1.0, 0.0));
        assert!(ood_separation(&a, &a, 1.0).is_err());
    }
}
