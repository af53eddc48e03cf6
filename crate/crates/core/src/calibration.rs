//! Post-hoc temperature scaling and Monte-Carlo dropout.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax_row};
use crate::data::{discretize_va, VA_BINS};
use crate::error::{Error, Result};
use crate::model::{Mode, ModelOutput, MultitaskModel, ProbOutputs};
use crate::tensor::Tensor;
use crate::uncertainty::{nll_au, nll_categorical, GroupedLabels};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchBracket {
    pub low: f64,
    pub high: f64,
    pub tolerance: f64,
}

impl Default for SearchBracket {
    fn default() -> Self {
        Self {
            low: 0.05,
            high: 20.0,
            tolerance: 1e-4,
        }
    }
}

impl SearchBracket {
    pub fn validate(&self) -> Result<()> {
        if !(self.low > 0.0 && self.low < 1.0 && self.high > 1.0 && self.tolerance > 0.0) {
            return Err(Error::Config(format!(
                "temperature bracket must satisfy 0 < low < 1 < high and tolerance > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// One temperature per head: AU (shared by all 12), EXPR, valence, arousal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSet {
    pub au: f64,
    pub expr: f64,
    pub valence: f64,
    pub arousal: f64,
}

impl TemperatureSet {
    pub fn identity() -> Self {
        Self {
            au: 1.0,
            expr: 1.0,
            valence: 1.0,
            arousal: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.au, self.expr, self.valence, self.arousal];
        if all.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::invalid(format!("temperatures must be positive, got {all:?}")));
        }
        Ok(())
    }
}

/// Result of a one-dimensional temperature search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub nll: f64,
    /// The search ended worse than `T = 1`, which was used instead.
    pub fell_back: bool,
}

/// Golden-section minimisation of `f` over the bracket. A flat objective
/// returns the bracket midpoint.
pub fn golden_section(f: impl Fn(f64) -> f64, bracket: SearchBracket) -> Result<TemperatureFit> {
    bracket.validate()?;
    let (mut a, mut b) = (bracket.low, bracket.high);
    let mid = 0.5 * (a + b);
    let probes = [f(a), f(mid), f(b)];
    let (lo, hi) = probes
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::NonFinite("temperature objective".into()));
    }
    if hi - lo <= 1e-12 * (1.0 + lo.abs()) {
        return Ok(TemperatureFit {
            temperature: mid,
            nll: probes[1],
            fell_back: false,
        });
    }
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > bracket.tolerance {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let t = 0.5 * (a + b);
    let (ft, f1) = (f(t), f(1.0));
    if ft > f1 {
        return Ok(TemperatureFit {
            temperature: 1.0,
            nll: f1,
            fell_back: true,
        });
    }
    Ok(TemperatureFit {
        temperature: t,
        nll: ft,
        fell_back: false,
    })
}

fn scaled_softmax(rows: &[&[f64]], t: f64) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let scaled: Vec<f64> = r.iter().map(|z| z / t).collect();
            let mut out = vec![0.0; r.len()];
            softmax_row(&scaled, &mut out);
            out
        })
        .collect()
}

/// Per-head temperature fits on one labelled set of logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFits {
    pub au: TemperatureFit,
    pub expr: TemperatureFit,
    pub valence: TemperatureFit,
    pub arousal: TemperatureFit,
}

impl TemperatureFits {
    pub fn temperatures(&self) -> TemperatureSet {
        TemperatureSet {
            au: self.au.temperature,
            expr: self.expr.temperature,
            valence: self.valence.temperature,
            arousal: self.arousal.temperature,
        }
    }
}

/// Minimises each head's NLL over its temperature on the labelled rows of
/// `output`.
pub fn fit_temperature(
    output: &ModelOutput,
    labels: &GroupedLabels,
    bracket: SearchBracket,
) -> Result<TemperatureFits> {
    if labels.au.is_empty() || labels.expr.is_empty() || labels.va.is_empty() {
        return Err(Error::invalid("temperature fitting needs instances of every task"));
    }
    let au_logits: Vec<&[f64]> = labels.au_rows.iter().map(|&r| output.au_logits.row(r)).collect();
    let au = golden_section(
        |t| {
            let probs: Vec<[f64; 12]> = au_logits
                .iter()
                .map(|row| std::array::from_fn(|c| sigmoid(row[c] / t)))
                .collect();
            let per = nll_au(&probs, &labels.au).expect("validated shapes");
            per.iter().sum::<f64>() / per.len() as f64
        },
        bracket,
    )?;

    let expr_logits: Vec<&[f64]> = labels.expr_rows.iter().map(|&r| output.expr_logits.row(r)).collect();
    let expr = golden_section(
        |t| nll_categorical(&scaled_softmax(&expr_logits, t), &labels.expr).expect("validated shapes"),
        bracket,
    )?;

    let mut va_fits = Vec::with_capacity(2);
    for dim in 0..2 {
        let rows: Vec<&[f64]> = labels
            .va_rows
            .iter()
            .map(|&r| &output.va_logits.row(r)[dim * VA_BINS..(dim + 1) * VA_BINS])
            .collect();
        let bins = labels
            .va
            .iter()
            .map(|v| discretize_va(v[dim]))
            .collect::<Result<Vec<_>>>()?;
        va_fits.push(golden_section(
            |t| nll_categorical(&scaled_softmax(&rows, t), &bins).expect("validated shapes"),
            bracket,
        )?);
    }
    Ok(TemperatureFits {
        au,
        expr,
        valence: va_fits[0],
        arousal: va_fits[1],
    })
}

/// Probabilities of `logits / T` per head.
pub fn apply_temperature(output: &ModelOutput, temps: TemperatureSet) -> Result<ProbOutputs> {
    temps.validate()?;
    let au = output.au_logits.map(|z| sigmoid(z / temps.au));
    let softmax_block = |logits: &Tensor, cols: std::ops::Range<usize>, t: f64| -> Result<Tensor> {
        let rows: Vec<&[f64]> = logits.row_iter().map(|r| &r[cols.clone()]).collect();
        Tensor::from_rows(&scaled_softmax(&rows, t))
    };
    let expr = softmax_block(&output.expr_logits, 0..output.expr_logits.cols(), temps.expr)?;
    let valence = softmax_block(&output.va_logits, 0..VA_BINS, temps.valence)?;
    let arousal = softmax_block(&output.va_logits, VA_BINS..2 * VA_BINS, temps.arousal)?;
    ProbOutputs::with_decoded_va(au, expr, valence, arousal)
}

/// The individual dropout-active forward passes.
pub fn mc_dropout_samples(
    model: &MultitaskModel,
    features: &Tensor,
    passes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ProbOutputs>> {
    if passes == 0 {
        return Err(Error::invalid("MC dropout needs at least one pass"));
    }
    (0..passes)
        .map(|_| Ok(model.forward(features, Mode::Train(rng))?.probs))
        .collect()
}

/// Mean of `passes` dropout-active forward passes.
pub fn mc_dropout_predict(
    model: &MultitaskModel,
    features: &Tensor,
    passes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ProbOutputs> {
    ProbOutputs::mean(&mc_dropout_samples(model, features, passes, rng)?)
}
