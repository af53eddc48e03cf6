//! Multitask network: a ReLU feedforward backbone shared by three heads
//! (12 AU logits, 7 EXPR logits, 40 VA logits split into two 20-way groups),
//! plus deep-ensemble averaging and JSON checkpoints.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::data::{bin_center, NUM_AU, NUM_EXPR, VA_BINS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VA_LOGITS: usize = 2 * VA_BINS;

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_dropout() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Dropout rate applied to each head's input in training mode.
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

impl ArchConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: default_hidden(),
            dropout: default_dropout(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be > 0".into()));
        }
        if self.hidden.is_empty() {
            return Err(Error::Config("at least one hidden layer is required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn feature_width(&self) -> usize {
        *self.hidden.last().expect("validated")
    }

    /// Weights plus biases of every layer.
    pub fn parameter_count(&self) -> usize {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        let backbone: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let f = self.feature_width();
        backbone + [NUM_AU, NUM_EXPR, VA_LOGITS].iter().map(|&o| f * o + o).sum::<usize>()
    }
}

/// Affine layer `x · W + b` with `W` of shape `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn glorot(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| rng.gen_range(-limit..limit)).collect();
        Self {
            weight: Tensor::matrix(inputs, outputs, data).expect("shape"),
            bias: Tensor::zeros(&[1, outputs]),
        }
    }

    fn zeroed(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskModel {
    pub arch: ArchConfig,
    pub seed: u64,
    pub backbone: Vec<Dense>,
    pub au_head: Dense,
    pub expr_head: Dense,
    pub va_head: Dense,
}

/// Forward-pass mode. Training mode needs a random stream for dropout.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Per-task probability outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbOutputs {
    /// `batch × 12` independent Bernoulli probabilities.
    pub au: Tensor,
    /// `batch × 7`, rows on the simplex.
    pub expr: Tensor,
    /// `batch × 20`, rows on the simplex.
    pub valence: Tensor,
    /// `batch × 20`, rows on the simplex.
    pub arousal: Tensor,
    /// `batch × 2` expectation decodes of the valence/arousal bins.
    pub va: Tensor,
}

impl ProbOutputs {
    pub fn len(&self) -> usize {
        self.au.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rebuilds `va` from the bin probabilities.
    pub fn with_decoded_va(au: Tensor, expr: Tensor, valence: Tensor, arousal: Tensor) -> Result<Self> {
        let va = decode_rows(&valence, &arousal)?;
        Ok(Self {
            au,
            expr,
            valence,
            arousal,
            va,
        })
    }

    /// Elementwise mean of several outputs over the same batch.
    pub fn mean(items: &[ProbOutputs]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot average an empty set of outputs"))?;
        let avg = |get: fn(&ProbOutputs) -> &Tensor| -> Result<Tensor> {
            let shape = get(first).shape().to_vec();
            let mut acc = vec![0.0; get(first).len()];
            for item in items {
                let t = get(item);
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape("mean", "outputs over different batches"));
                }
                for (a, v) in acc.iter_mut().zip(t.data()) {
                    *a += v;
                }
            }
            let n = items.len() as f64;
            acc.iter_mut().for_each(|v| *v /= n);
            Tensor::new(shape, acc)
        };
        Self::with_decoded_va(
            avg(|p| &p.au)?,
            avg(|p| &p.expr)?,
            avg(|p| &p.valence)?,
            avg(|p| &p.arousal)?,
        )
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            au: self.au.select_rows(rows)?,
            expr: self.expr.select_rows(rows)?,
            valence: self.valence.select_rows(rows)?,
            arousal: self.arousal.select_rows(rows)?,
            va: self.va.select_rows(rows)?,
        })
    }
}

fn decode_rows(valence: &Tensor, arousal: &Tensor) -> Result<Tensor> {
    let centers: Vec<f64> = (0..VA_BINS).map(bin_center).collect();
    let decode = |row: &[f64]| row.iter().zip(&centers).map(|(p, c)| p * c).sum::<f64>();
    let mut data = Vec::with_capacity(2 * valence.rows());
    for (v, a) in valence.row_iter().zip(arousal.row_iter()) {
        data.push(decode(v));
        data.push(decode(a));
    }
    Tensor::matrix(valence.rows(), 2, data)
}

/// Logits and probabilities of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub au_logits: Tensor,
    pub expr_logits: Tensor,
    pub va_logits: Tensor,
    pub probs: ProbOutputs,
}

/// Tape handles for every head output of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TapeOutputs {
    pub au_logits: Var,
    pub expr_logits: Var,
    pub va_logits: Var,
    pub au_probs: Var,
    pub expr_probs: Var,
    pub valence_probs: Var,
    pub arousal_probs: Var,
    /// `batch × 2` decoded valence/arousal.
    pub va_scalars: Var,
}

/// Decodes a `batch × 40` VA logit block into bin probabilities and scalars.
pub fn va_head_on_tape(tape: &mut Tape, va_logits: Var) -> Result<(Var, Var, Var)> {
    let v_logits = tape.slice_cols(va_logits, 0, VA_BINS)?;
    let a_logits = tape.slice_cols(va_logits, VA_BINS, VA_LOGITS)?;
    let valence = tape.softmax(v_logits)?;
    let arousal = tape.softmax(a_logits)?;
    let centers = tape.constant(Tensor::matrix(VA_BINS, 1, (0..VA_BINS).map(bin_center).collect()).expect("shape"));
    let v = tape.matmul(valence, centers)?;
    let a = tape.matmul(arousal, centers)?;
    let scalars = tape.concat_cols(v, a)?;
    Ok((valence, arousal, scalars))
}

impl MultitaskModel {
    /// Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![arch.input_dim];
        widths.extend(&arch.hidden);
        let backbone = widths.windows(2).map(|w| Dense::glorot(w[0], w[1], &mut rng)).collect();
        let f = arch.feature_width();
        Ok(Self {
            arch: arch.clone(),
            seed,
            backbone,
            au_head: Dense::glorot(f, NUM_AU, &mut rng),
            expr_head: Dense::glorot(f, NUM_EXPR, &mut rng),
            va_head: Dense::glorot(f, VA_LOGITS, &mut rng),
        })
    }

    /// Same architecture with every weight and bias set to zero.
    pub fn zeroed(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            seed: self.seed,
            backbone: self.backbone.iter().map(Dense::zeroed).collect(),
            au_head: self.au_head.zeroed(),
            expr_head: self.expr_head.zeroed(),
            va_head: self.va_head.zeroed(),
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.backbone
            .iter()
            .chain([&self.au_head, &self.expr_head, &self.va_head])
    }

    /// Parameters in a fixed order: each layer's weight then bias.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.backbone
            .iter_mut()
            .chain([&mut self.au_head, &mut self.expr_head, &mut self.va_head])
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Pushes every parameter onto `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Forward pass on a tape using parameter handles from [`register`].
    ///
    /// [`register`]: MultitaskModel::register
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &[Var],
        features: Var,
        mode: &mut Mode<'_>,
    ) -> Result<TapeOutputs> {
        let width = tape.value(features).cols();
        if width != self.arch.input_dim {
            return Err(Error::shape(
                "forward",
                format!("features have width {width}, model expects {}", self.arch.input_dim),
            ));
        }
        let mut h = features;
        let n_backbone = self.backbone.len();
        for layer in 0..n_backbone {
            let z = tape.matmul(h, params[2 * layer])?;
            let z = tape.add(z, params[2 * layer + 1])?;
            h = tape.relu(z)?;
        }
        let p = self.arch.dropout;
        let mut head = |tape: &mut Tape, idx: usize| -> Result<Var> {
            let input = match mode {
                Mode::Train(rng) => tape.dropout(h, p, *rng)?,
                Mode::Eval => h,
            };
            let z = tape.matmul(input, params[2 * (n_backbone + idx)])?;
            tape.add(z, params[2 * (n_backbone + idx) + 1])
        };
        let au_logits = head(tape, 0)?;
        let expr_logits = head(tape, 1)?;
        let va_logits = head(tape, 2)?;
        let au_probs = tape.sigmoid(au_logits)?;
        let expr_probs = tape.softmax(expr_logits)?;
        let (valence_probs, arousal_probs, va_scalars) = va_head_on_tape(tape, va_logits)?;
        Ok(TapeOutputs {
            au_logits,
            expr_logits,
            va_logits,
            au_probs,
            expr_probs,
            valence_probs,
            arousal_probs,
            va_scalars,
        })
    }

    pub fn forward(&self, features: &Tensor, mut mode: Mode<'_>) -> Result<ModelOutput> {
        let mut tape = Tape::no_grad();
        let params: Vec<Var> = self.params().into_iter().map(|p| tape.constant(p.clone())).collect();
        let x = tape.constant(features.clone());
        let out = self.forward_on_tape(&mut tape, &params, x, &mut mode)?;
        let get = |v: Var| tape.value(v).clone();
        Ok(ModelOutput {
            au_logits: get(out.au_logits),
            expr_logits: get(out.expr_logits),
            va_logits: get(out.va_logits),
            probs: ProbOutputs {
                au: get(out.au_probs),
                expr: get(out.expr_probs),
                valence: get(out.valence_probs),
                arousal: get(out.arousal_probs),
                va: get(out.va_scalars),
            },
        })
    }

    pub fn predict(&self, features: &Tensor) -> Result<ProbOutputs> {
        Ok(self.forward(features, Mode::Eval)?.probs)
    }

    /// SHA-256 over the architecture and the exact parameter bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("serialisable"));
        for p in self.params() {
            for &v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Mean of the members' eval-mode probability outputs.
pub fn ensemble_predict(models: &[MultitaskModel], features: &Tensor) -> Result<ProbOutputs> {
    let first = models
        .first()
        .ok_or_else(|| Error::invalid("an ensemble needs at least one member"))?;
    if let Some(m) = models.iter().find(|m| m.arch != first.arch) {
        return Err(Error::ArchMismatch(format!(
            "member with seed {} differs from member with seed {}",
            m.seed, first.seed
        )));
    }
    let outputs = models.iter().map(|m| m.predict(features)).collect::<Result<Vec<_>>>()?;
    ProbOutputs::mean(&outputs)
}

/// SHA-256 over the members' fingerprints, in order.
pub fn ensemble_fingerprint(models: &[MultitaskModel]) -> String {
    let mut h = Sha256::new();
    for m in models {
        h.update(m.fingerprint().as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParameterRecord {
    backbone: Vec<LayerRecord>,
    au_head: LayerRecord,
    expr_head: LayerRecord,
    va_head: LayerRecord,
}

/// On-disk model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub seed: u64,
    pub generation: usize,
    pub member_index: usize,
    parameters: ParameterRecord,
}

impl LayerRecord {
    fn from_dense(d: &Dense) -> Self {
        Self {
            weight: d.weight.to_rows(),
            bias: d.bias.data().to_vec(),
        }
    }

    fn to_dense(&self, inputs: usize, outputs: usize) -> Result<Dense> {
        let weight = Tensor::from_rows(&self.weight).map_err(|_| Error::ArchMismatch("ragged weight matrix".into()))?;
        if weight.shape() != [inputs, outputs] || self.bias.len() != outputs {
            return Err(Error::ArchMismatch(format!(
                "layer {inputs}x{outputs} stored as {:?} with {} biases",
                weight.shape(),
                self.bias.len()
            )));
        }
        Ok(Dense {
            weight,
            bias: Tensor::matrix(1, outputs, self.bias.clone())?,
        })
    }
}

impl Checkpoint {
    pub fn new(model: &MultitaskModel, generation: usize, member_index: usize) -> Self {
        Self {
            arch: model.arch.clone(),
            seed: model.seed,
            generation,
            member_index,
            parameters: ParameterRecord {
                backbone: model.backbone.iter().map(LayerRecord::from_dense).collect(),
                au_head: LayerRecord::from_dense(&model.au_head),
                expr_head: LayerRecord::from_dense(&model.expr_head),
                va_head: LayerRecord::from_dense(&model.va_head),
            },
        }
    }

    pub fn model(&self) -> Result<MultitaskModel> {
        self.arch.validate()?;
        let mut widths = vec![self.arch.input_dim];
        widths.extend(&self.arch.hidden);
        if self.parameters.backbone.len() != widths.len() - 1 {
            return Err(Error::ArchMismatch("backbone depth differs from arch".into()));
        }
        let backbone = self
            .parameters
            .backbone
            .iter()
            .zip(widths.windows(2))
            .map(|(rec, w)| rec.to_dense(w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        let f = self.arch.feature_width();
        Ok(MultitaskModel {
            arch: self.arch.clone(),
            seed: self.seed,
            backbone,
            au_head: self.parameters.au_head.to_dense(f, NUM_AU)?,
            expr_head: self.parameters.expr_head.to_dense(f, NUM_EXPR)?,
            va_head: self.parameters.va_head.to_dense(f, VA_LOGITS)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(rows: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, dim, (0..rows * dim).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let arch = ArchConfig::new(16);
        assert_eq!(
            MultitaskModel::init(&arch, 7).unwrap(),
            MultitaskModel::init(&arch, 7).unwrap()
        );
        assert_ne!(
            MultitaskModel::init(&arch, 7).unwrap().params(),
            MultitaskModel::init(&arch, 8).unwrap().params()
        );
    }

    #[test]
    fn default_parameter_count() {
        // 16*64+64 + 64*64+64 + 64*12+12 + 64*7+7 + 64*40+40
        let expected = 1088 + 4160 + 780 + 455 + 2600;
        assert_eq!(expected, 9083);
        let arch = ArchConfig::new(16);
        assert_eq!(arch.parameter_count(), expected);
        assert_eq!(MultitaskModel::init(&arch, 0).unwrap().parameter_count(), expected);
    }

    #[test]
    fn zero_width_layer_is_rejected() {
        let mut arch = ArchConfig::new(16);
        arch.hidden = vec![64, 0];
        assert!(MultitaskModel::init(&arch, 0).is_err());
    }

    #[test]
    fn zero_parameters_give_neutral_outputs() {
        let model = MultitaskModel::init(&ArchConfig::new(5), 1).unwrap().zeroed();
        let p = model.predict(&features(4, 5, 0)).unwrap();
        assert!(p.au.data().iter().all(|&v| v == 0.5));
        assert!(p.expr.data().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
        assert!(p.va.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn eval_forward_is_deterministic_and_rows_are_normalised() {
        let model = MultitaskModel::init(&ArchConfig::new(6), 3).unwrap();
        let x = features(10, 6, 1);
        let a = model.predict(&x).unwrap();
        let b = model.predict(&x).unwrap();
        assert_eq!(a, b);
        for t in [&a.expr, &a.valence, &a.arousal] {
            for row in t.row_iter() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(a.va.data().iter().all(|v| v.abs() <= 0.95 + 1e-12));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let model = MultitaskModel::init(&ArchConfig::new(6), 3).unwrap();
        assert!(model.predict(&features(2, 5, 0)).is_err());
    }

    #[test]
    fn inverted_dropout_preserves_the_mean_scale() {
        // Identity-like setup: measure mean(kept * scale) over many masks.
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = tape.constant(Tensor::filled(&[100, 100], 1.0));
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        let mean = tape.value(y).sum() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn train_mode_is_reproducible_from_rng_state() {
        let model = MultitaskModel::init(&ArchConfig::new(6), 3).unwrap();
        let x = features(8, 6, 1);
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let a = model.forward(&x, Mode::Train(&mut r1)).unwrap();
        let b = model.forward(&x, Mode::Train(&mut r2)).unwrap();
        assert_eq!(a, b);
        let eval = model.forward(&x, Mode::Eval).unwrap();
        assert_ne!(a.probs, eval.probs);
    }

    #[test]
    fn ensemble_of_identical_members_equals_member() {
        let model = MultitaskModel::init(&ArchConfig::new(6), 3).unwrap();
        let x = features(5, 6, 2);
        let single = model.predict(&x).unwrap();
        let ens = ensemble_predict(&[model.clone(), model.clone(), model], &x).unwrap();
        assert!(single.expr.max_abs_diff(&ens.expr) < 1e-15);
        assert!(single.va.max_abs_diff(&ens.va) < 1e-15);
    }

    #[test]
    fn ensemble_averages_probabilities() {
        let rows = |a: f64| {
            let mut r = vec![0.0; 7];
            r[0] = a;
            r[1] = 1.0 - a;
            Tensor::from_rows(&[r]).unwrap()
        };
        let mk = |a: f64| ProbOutputs {
            au: Tensor::filled(&[1, 12], a),
            expr: rows(a),
            valence: Tensor::filled(&[1, 20], 0.05),
            arousal: Tensor::filled(&[1, 20], 0.05),
            va: Tensor::zeros(&[1, 2]),
        };
        let m = ProbOutputs::mean(&[mk(0.8), mk(0.6)]).unwrap();
        assert!((m.expr.get(0, 0) - 0.7).abs() < 1e-15);
        assert!((m.expr.get(0, 1) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn architecture_mismatch_is_reported() {
        let a = MultitaskModel::init(&ArchConfig::new(6), 3).unwrap();
        let mut arch = ArchConfig::new(6);
        arch.hidden = vec![32];
        let b = MultitaskModel::init(&arch, 3).unwrap();
        assert!(matches!(
            ensemble_predict(&[a, b], &features(2, 6, 0)),
            Err(Error::ArchMismatch(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let model = MultitaskModel::init(&ArchConfig::new(6), 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        Checkpoint::new(&model, 2, 4).save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!((ck.generation, ck.member_index, ck.seed), (2, 4, 21));
        let back = ck.model().unwrap();
        assert_eq!(back, model);
        assert_eq!(back.fingerprint(), model.fingerprint());
    }
}
