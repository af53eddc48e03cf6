//! Valence/arousal discretisation into 20 equal bins over `[-1, 1]`.

use crate::error::{Error, Result};

pub const VA_BINS: usize = 20;
const BIN_WIDTH: f64 = 2.0 / VA_BINS as f64;

/// Centre of bin `k`: `-0.95 + 0.1 k`.
pub fn bin_center(k: usize) -> f64 {
    -1.0 + BIN_WIDTH * (k as f64 + 0.5)
}

/// Half-open bins `[-1 + 0.1k, -1 + 0.1(k+1))`; `1.0` falls into the last bin.
pub fn discretize_va(value: f64) -> Result<usize> {
    if !(-1.0..=1.0).contains(&value) {
        return Err(Error::invalid(format!("valence/arousal {value} outside [-1, 1]")));
    }
    let k = ((value + 1.0) / BIN_WIDTH).floor() as usize;
    Ok(k.min(VA_BINS - 1))
}

pub fn va_one_hot(value: f64) -> Result<[f64; VA_BINS]> {
    let mut out = [0.0; VA_BINS];
    out[discretize_va(value)?] = 1.0;
    Ok(out)
}

/// Expected bin centre under `probs`.
pub fn decode_expectation(probs: &[f64]) -> Result<f64> {
    if probs.len() != VA_BINS {
        return Err(Error::invalid(format!(
            "expected {VA_BINS} bin probabilities, got {}",
            probs.len()
        )));
    }
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("bin probabilities are not a distribution"));
    }
    Ok(probs.iter().enumerate().map(|(k, p)| p * bin_center(k)).sum())
}
