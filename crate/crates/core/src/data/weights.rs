use serde::{Deserialize, Serialize};

use super::{Label, MultitaskDataset, Split, NUM_AU, NUM_EXPR};
use crate::error::{Error, Result};

/// Fixed AU weights from a real, heavily imbalanced corpus (AU1 … AU26).
pub const REFERENCE_AU_WEIGHTS: [f64; NUM_AU] = [7.7, 24.7, 5.3, 2.9, 1.5, 1.9, 3.0, 32.3, 32.3, 32.3, 0.59, 11.5];

/// Fixed expression weights from the same corpus
/// (neutral, anger, disgust, fear, happiness, sadness, surprise).
pub const REFERENCE_EXPR_WEIGHTS: [f64; NUM_EXPR] = [0.02, 0.2, 0.33, 0.24, 0.03, 0.05, 0.1];

/// Per-class loss weights for the two classification tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub au: Vec<f64>,
    pub expr: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform() -> Self {
        Self {
            au: vec![1.0; NUM_AU],
            expr: vec![1.0; NUM_EXPR],
        }
    }

    pub fn reference() -> Self {
        Self {
            au: REFERENCE_AU_WEIGHTS.to_vec(),
            expr: REFERENCE_EXPR_WEIGHTS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.au.len() != NUM_AU || self.expr.len() != NUM_EXPR {
            return Err(Error::invalid("class weights need 12 AU and 7 EXPR entries"));
        }
        if self.au.iter().chain(&self.expr).any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("class weights must be finite and positive"));
        }
        Ok(())
    }
}

/// AU weight = negatives / positives; EXPR weight = inverse class frequency
/// normalised to sum to one. Counts use training instances only.
pub fn compute_class_weights(dataset: &MultitaskDataset) -> Result<ClassWeights> {
    let mut pos = [0usize; NUM_AU];
    let mut neg = [0usize; NUM_AU];
    let mut expr_counts = [0usize; NUM_EXPR];
    for inst in dataset.instances.iter().filter(|i| i.split == Split::Train) {
        match &inst.label {
            Label::Au(bits) => {
                for (c, &b) in bits.iter().enumerate() {
                    if b {
                        pos[c] += 1;
                    } else {
                        neg[c] += 1;
                    }
                }
            }
            Label::Expr(k) => expr_counts[*k] += 1,
            Label::Va(_) => {}
        }
    }
    let mut au = Vec::with_capacity(NUM_AU);
    for c in 0..NUM_AU {
        if pos[c] == 0 || neg[c] == 0 {
            return Err(Error::invalid(format!(
                "AU class {c} has {} positive and {} negative training instances",
                pos[c], neg[c]
            )));
        }
        au.push(neg[c] as f64 / pos[c] as f64);
    }
    if let Some(k) = (0..NUM_EXPR).find(|&k| expr_counts[k] == 0) {
        return Err(Error::invalid(format!("EXPR class {k} has no training instances")));
    }
    let total: usize = expr_counts.iter().sum();
    let inv: Vec<f64> = expr_counts.iter().map(|&n| total as f64 / n as f64).collect();
    let norm: f64 = inv.iter().sum();
    let expr = inv.iter().map(|v| v / norm).collect();
    Ok(ClassWeights { au, expr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Instance;

    fn au_instance(id: usize, bits: [bool; NUM_AU]) -> Instance {
        Instance {
            id,
            features: vec![0.0],
            label: Label::Au(bits),
            split: Split::Train,
        }
    }

    fn expr_instances(counts: [usize; NUM_EXPR], start: usize) -> Vec<Instance> {
        let mut out = Vec::new();
        for (k, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                out.push(Instance {
                    id: start + out.len(),
                    features: vec![0.0],
                    label: Label::Expr(k),
                    split: Split::Train,
                });
            }
        }
        out
    }

    fn dataset(au_rows: Vec<[bool; NUM_AU]>) -> MultitaskDataset {
        let mut instances: Vec<Instance> = au_rows
            .into_iter()
            .enumerate()
            .map(|(i, b)| au_instance(i, b))
            .collect();
        let n = instances.len();
        instances.extend(expr_instances([1; NUM_EXPR], n));
        MultitaskDataset { dim: 1, instances }
    }

    #[test]
    fn au_weight_is_negative_to_positive_ratio() {
        // AU0: 10 positives, 30 negatives. Every other AU alternates.
        let rows = (0..40)
            .map(|i| {
                let mut b = [i % 2 == 0; NUM_AU];
                b[0] = i < 10;
                b
            })
            .collect();
        let w = compute_class_weights(&dataset(rows)).unwrap();
        assert_eq!(w.au[0], 3.0);
        assert_eq!(w.au[1], 1.0);
    }

    #[test]
    fn flipping_labels_inverts_au_weights() {
        let rows: Vec<[bool; NUM_AU]> = (0..50)
            .map(|i| std::array::from_fn(|c| (i + c) % (c + 2) == 0))
            .collect();
        let flipped = rows.iter().map(|b| b.map(|v| !v)).collect();
        let w = compute_class_weights(&dataset(rows)).unwrap();
        let wf = compute_class_weights(&dataset(flipped)).unwrap();
        for (a, b) in w.au.iter().zip(&wf.au) {
            assert!((a * b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn expr_weights_are_normalised_inverse_frequency() {
        let mut ds = dataset(vec![[true; NUM_AU], [false; NUM_AU]]);
        ds.instances.retain(|i| i.task() != crate::data::Task::Expr);
        ds.instances.extend(expr_instances([40, 10, 10, 10, 10, 10, 10], 2));
        let w = compute_class_weights(&ds).unwrap();
        let total: f64 = w.expr.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((w.expr[1] / w.expr[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn empty_class_is_named_in_the_error() {
        let ds = dataset(vec![[true; NUM_AU], [true; NUM_AU]]);
        let err = compute_class_weights(&ds).unwrap_err().to_string();
        assert!(err.contains("AU class 0"), "{err}");

        let mut ds = dataset(vec![[true; NUM_AU], [false; NUM_AU]]);
        ds.instances.retain(|i| i.label != Label::Expr(3));
        let err = compute_class_weights(&ds).unwrap_err().to_string();
        assert!(err.contains("EXPR class 3"), "{err}");
    }

    #[test]
    fn reference_fixture_is_valid() {
        ClassWeights::reference().validate().unwrap();
    }
}
