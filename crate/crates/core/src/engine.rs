//! Teacher/student generations.
//!
//! Generation 0 trains `T` teachers on each instance's own labels. The
//! teacher ensemble then labels every training instance for all three tasks,
//! and generation 1 trains `T` fresh students on those soft labels; each later
//! generation learns from the previous generation's ensemble.
//!
//! Run directory layout:
//!
//! ```text
//! gen{k}/member{t}.json        checkpoints
//! gen{k}/soft_labels.jsonl     ensemble outputs on the training split
//! gen{k}/soft_labels.meta.json producing-ensemble checksum, row count, file hash
//! report.json                  GenerationReport
//! timings.json                 wall-clock seconds per stage
//! manifest.json                SHA-256 of every other file
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{adam_step, AdamState, Tape, Var};
use crate::balancer::BalancerState;
use crate::config::{ClassWeighting, RunConfig, TrainConfig};
use crate::data::{
    compute_class_weights, read_records, sample_balanced_batch, ClassWeights, MultitaskDataset, Split, NUM_AU,
    NUM_EXPR, VA_BINS,
};
use crate::error::{Error, Result};
use crate::losses::{self, combine_on_tape, LossBreakdown, TaskWeights};
use crate::model::{
    ensemble_fingerprint, ensemble_predict, Checkpoint, Mode, MultitaskModel, ProbOutputs, TapeOutputs,
};
use crate::tensor::Tensor;
use crate::uncertainty::{emotion_metrics, uncertainty_metrics, EmotionMetrics, GroupedLabels, UncertaintyMetrics};

/// Independent 64-bit seed for `stream` under `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.next_u64()
}

/// A dataset with the lookups training and validation need.
#[derive(Debug, Clone)]
pub struct PreparedData<'a> {
    pub dataset: &'a MultitaskDataset,
    pub weights: ClassWeights,
    pub train_pools: [Vec<usize>; 3],
    pub train_positions: Vec<usize>,
    pub val_positions: Vec<usize>,
    pub val_features: Tensor,
    pub val_labels: GroupedLabels,
}

impl<'a> PreparedData<'a> {
    pub fn new(dataset: &'a MultitaskDataset, weighting: ClassWeighting) -> Result<Self> {
        let weights = match weighting {
            ClassWeighting::Computed => compute_class_weights(dataset)?,
            ClassWeighting::Uniform => ClassWeights::uniform(),
        };
        let val_positions = dataset.indices(Split::Val);
        let train_positions = dataset.indices(Split::Train);
        if val_positions.is_empty() || train_positions.is_empty() {
            return Err(Error::invalid("training needs nonempty train and val splits"));
        }
        Ok(Self {
            weights,
            train_pools: dataset.indices_by_task(Split::Train),
            train_positions,
            val_features: dataset.features(&val_positions)?,
            val_labels: GroupedLabels::new(val_positions.iter().map(|&p| &dataset.instances[p].label)),
            val_positions,
            dataset,
        })
    }
}

/// Ensemble outputs over the training split, used as distillation targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelSet {
    /// Generation of the ensemble that produced the labels.
    pub generation: usize,
    /// [`ensemble_fingerprint`] of that ensemble.
    pub checksum: String,
    pub ids: Vec<usize>,
    pub probs: ProbOutputs,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SoftLabelRecord {
    id: usize,
    au: Vec<f64>,
    expr: Vec<f64>,
    valence: Vec<f64>,
    arousal: Vec<f64>,
    va: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftLabelMeta {
    pub generation: usize,
    pub checksum: String,
    pub count: usize,
    pub file_sha256: String,
}

pub const SOFT_LABELS_FILE: &str = "soft_labels.jsonl";
pub const SOFT_LABELS_META: &str = "soft_labels.meta.json";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

/// Eval-mode ensemble predictions for every training instance.
pub fn generate_soft_labels(
    ensemble: &[MultitaskModel],
    dataset: &MultitaskDataset,
    generation: usize,
) -> Result<SoftLabelSet> {
    let positions = dataset.indices(Split::Train);
    let probs = ensemble_predict(ensemble, &dataset.features(&positions)?)?;
    Ok(SoftLabelSet {
        generation,
        checksum: ensemble_fingerprint(ensemble),
        ids: positions.iter().map(|&p| dataset.instances[p].id).collect(),
        probs,
    })
}

impl SoftLabelSet {
    pub fn write(&self, dir: &Path) -> Result<SoftLabelMeta> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SOFT_LABELS_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for (row, &id) in self.ids.iter().enumerate() {
            let rec = SoftLabelRecord {
                id,
                au: self.probs.au.row(row).to_vec(),
                expr: self.probs.expr.row(row).to_vec(),
                valence: self.probs.valence.row(row).to_vec(),
                arousal: self.probs.arousal.row(row).to_vec(),
                va: self.probs.va.row(row).to_vec(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        drop(w);
        let meta = SoftLabelMeta {
            generation: self.generation,
            checksum: self.checksum.clone(),
            count: self.ids.len(),
            file_sha256: sha256_file(&path)?,
        };
        write_json(&dir.join(SOFT_LABELS_META), &meta)?;
        Ok(meta)
    }

    /// Reads a cache, checking its row count and file hash against the meta.
    pub fn read(dir: &Path) -> Result<Self> {
        let meta: SoftLabelMeta = read_json(&dir.join(SOFT_LABELS_META))?;
        let path = dir.join(SOFT_LABELS_FILE);
        let found = sha256_file(&path)?;
        if found != meta.file_sha256 {
            return Err(Error::Checksum {
                expected: meta.file_sha256,
                found,
            });
        }
        let recs = read_records::<SoftLabelRecord>(&path)?;
        if recs.len() != meta.count || recs.is_empty() {
            return Err(Error::invalid(format!(
                "{}: {} rows, meta says {}",
                path.display(),
                recs.len(),
                meta.count
            )));
        }
        let n = recs.len();
        let block = |get: fn(&SoftLabelRecord) -> &Vec<f64>, cols: usize| -> Result<Tensor> {
            let mut data = Vec::with_capacity(n * cols);
            for r in &recs {
                if get(r).len() != cols {
                    return Err(Error::invalid(format!("soft label {} has a malformed block", r.id)));
                }
                data.extend_from_slice(get(r));
            }
            Tensor::matrix(n, cols, data)
        };
        let probs = ProbOutputs {
            au: block(|r| &r.au, NUM_AU)?,
            expr: block(|r| &r.expr, NUM_EXPR)?,
            valence: block(|r| &r.valence, VA_BINS)?,
            arousal: block(|r| &r.arousal, VA_BINS)?,
            va: block(|r| &r.va, 2)?,
        };
        Ok(Self {
            generation: meta.generation,
            checksum: meta.checksum,
            ids: recs.iter().map(|r| r.id).collect(),
            probs,
        })
    }

    /// Soft-label row for each dataset position, if labelled.
    fn rows_by_position(&self, dataset: &MultitaskDataset) -> Vec<Option<usize>> {
        let by_id: HashMap<usize, usize> = self.ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        dataset.instances.iter().map(|i| by_id.get(&i.id).copied()).collect()
    }
}

/// What a member is trained against.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// Each instance's own ground-truth label.
    Hard,
    /// All three tasks from an ensemble's soft labels.
    Soft(&'a SoftLabelSet),
}

/// Identifies a member and seeds its batches and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemberJob {
    pub generation: usize,
    pub member: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean over the epoch's steps; `lambdas` are the weights used.
    pub loss: LossBreakdown,
    pub validation: EmotionMetrics,
    /// Balancer state after this epoch's validation.
    pub stall: [u32; 3],
    pub next_lambdas: TaskWeights,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
}

fn hard_losses(tape: &mut Tape, out: &TapeOutputs, batch: &[usize], data: &PreparedData<'_>) -> Result<[Var; 3]> {
    let mut rows: [Vec<usize>; 3] = Default::default();
    let mut ys: [Vec<f64>; 3] = Default::default();
    for (r, &pos) in batch.iter().enumerate() {
        let label = &data.dataset.instances[pos].label;
        let t = label.task().index();
        rows[t].push(r);
        ys[t].extend(label.to_vec());
    }
    let [au_rows, expr_rows, va_rows] = rows;
    let [au_y, expr_y, va_y] = ys;
    let au_targets = Tensor::matrix(au_rows.len(), NUM_AU, au_y)?;
    let expr_targets = Tensor::matrix(expr_rows.len(), NUM_EXPR, expr_y)?;
    let va_targets = Tensor::matrix(va_rows.len(), 2, va_y)?;
    let au_logits = tape.gather_rows(out.au_logits, au_rows)?;
    let expr_logits = tape.gather_rows(out.expr_logits, expr_rows)?;
    let va_scalars = tape.gather_rows(out.va_scalars, va_rows)?;
    Ok([
        losses::au_supervised(tape, au_logits, &au_targets, &data.weights.au)?,
        losses::expr_supervised(tape, expr_logits, &expr_targets, &data.weights.expr)?,
        losses::va_supervised(tape, va_scalars, &va_targets)?,
    ])
}

fn soft_losses(tape: &mut Tape, out: &TapeOutputs, teacher: &ProbOutputs, weights: &ClassWeights) -> Result<[Var; 3]> {
    Ok([
        losses::au_distill(tape, out.au_logits, &teacher.au, &weights.au)?,
        losses::expr_distill(tape, out.expr_logits, &teacher.expr)?,
        losses::va_distill(tape, out.va_scalars, &teacher.va)?,
    ])
}

/// Trains `model` with balanced batches, Adam and the stall-counter task
/// weights, which are updated from validation metrics after every epoch.
pub fn train_member(
    mut model: MultitaskModel,
    data: &PreparedData<'_>,
    targets: Targets<'_>,
    hyper: &TrainConfig,
    job: MemberJob,
) -> Result<(MultitaskModel, TrainingHistory)> {
    hyper.validate()?;
    if model.arch.input_dim != data.dataset.dim {
        return Err(Error::ArchMismatch(format!(
            "model input {} but dataset has {} features",
            model.arch.input_dim, data.dataset.dim
        )));
    }
    let mut history = TrainingHistory::default();
    if hyper.epochs == 0 {
        return Ok((model, history));
    }
    let soft_rows = match targets {
        Targets::Soft(s) => Some((s, s.rows_by_position(data.dataset))),
        Targets::Hard => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
    let mut adam = AdamState::new(hyper.adam, model.params().iter().map(|p| p.shape()));
    let mut balancer = BalancerState::new();
    let steps = (data.train_positions.len() / hyper.batch_size).max(1);

    for epoch in 0..hyper.epochs {
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::Diverged {
                generation: job.generation,
                member: job.member,
                epoch,
            },
            other => other,
        };
        let lr = hyper.learning_rate_at(epoch);
        let lambdas = balancer.lambdas;
        let mut sums = [0.0; 3];
        for _ in 0..steps {
            let batch = sample_balanced_batch(&data.train_pools, hyper.batch_size, &mut rng)?;
            let mut tape = Tape::new();
            let params = model.register(&mut tape);
            let x = tape.constant(data.dataset.features(&batch)?);
            let out = model
                .forward_on_tape(&mut tape, &params, x, &mut Mode::Train(&mut rng))
                .map_err(diverged)?;
            let parts = match &soft_rows {
                None => hard_losses(&mut tape, &out, &batch, data),
                Some((soft, lookup)) => {
                    let rows = batch
                        .iter()
                        .map(|&p| {
                            lookup[p].ok_or_else(|| {
                                Error::invalid(format!("no soft label for instance {}", data.dataset.instances[p].id))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    soft_losses(&mut tape, &out, &soft.probs.select_rows(&rows)?, &data.weights)
                }
            }
            .map_err(diverged)?;
            let total = combine_on_tape(&mut tape, parts, lambdas)?;
            let mut grads = tape.backward(total).map_err(diverged)?;
            let grads: Vec<Tensor> = params
                .iter()
                .map(|&p| grads.take(p).expect("every parameter is a leaf"))
                .collect();
            adam_step(&mut model.params_mut(), &grads, &mut adam, lr).map_err(diverged)?;
            for (s, v) in sums.iter_mut().zip(parts) {
                *s += tape.value(v).item();
            }
        }
        let mean = sums.map(|s| s / steps as f64);
        let loss = losses::combine_losses(mean, lambdas)?;
        if !loss.combined.is_finite() {
            return Err(diverged(Error::NonFinite("training loss".into())));
        }
        let validation = emotion_metrics(&model.predict(&data.val_features)?, &data.val_labels)?;
        balancer.update(validation.per_task())?;
        history.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            loss,
            validation,
            stall: balancer.stall,
            next_lambdas: balancer.lambdas,
        });
    }
    Ok((model, history))
}

/// Emotion and uncertainty metrics of one prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub emotion: EmotionMetrics,
    pub uncertainty: UncertaintyMetrics,
}

impl MetricsRow {
    pub fn compute(probs: &ProbOutputs, labels: &GroupedLabels) -> Result<Self> {
        Ok(Self {
            emotion: emotion_metrics(probs, labels)?,
            uncertainty: uncertainty_metrics(probs, labels)?,
        })
    }

    /// Field-wise mean.
    pub fn mean(rows: &[MetricsRow]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("cannot average zero metric rows"));
        }
        let n = rows.len() as f64;
        let avg = |f: &dyn Fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            emotion: EmotionMetrics {
                au_f1: avg(&|r| r.emotion.au_f1),
                au_accuracy: avg(&|r| r.emotion.au_accuracy),
                au: avg(&|r| r.emotion.au),
                expr_f1: avg(&|r| r.emotion.expr_f1),
                expr_accuracy: avg(&|r| r.emotion.expr_accuracy),
                expr: avg(&|r| r.emotion.expr),
                valence_ccc: avg(&|r| r.emotion.valence_ccc),
                arousal_ccc: avg(&|r| r.emotion.arousal_ccc),
                total: avg(&|r| r.emotion.total),
            },
            uncertainty: UncertaintyMetrics {
                au_nll: std::array::from_fn(|c| avg(&|r| r.uncertainty.au_nll[c])),
                au_nll_mean: avg(&|r| r.uncertainty.au_nll_mean),
                expr_nll: avg(&|r| r.uncertainty.expr_nll),
                valence_nll: avg(&|r| r.uncertainty.valence_nll),
                arousal_nll: avg(&|r| r.uncertainty.arousal_nll),
                valence_rmse: avg(&|r| r.uncertainty.valence_rmse),
                arousal_rmse: avg(&|r| r.uncertainty.arousal_rmse),
            },
        })
    }
}

pub const JENSEN_SLACK: f64 = 1e-9;

/// Ensemble NLL must not exceed the mean member NLL for any classification
/// output.
pub fn check_jensen(ensemble: &UncertaintyMetrics, member_mean: &UncertaintyMetrics) -> Result<()> {
    let mut pairs = vec![
        ("AU mean", ensemble.au_nll_mean, member_mean.au_nll_mean),
        ("EXPR", ensemble.expr_nll, member_mean.expr_nll),
        ("valence bins", ensemble.valence_nll, member_mean.valence_nll),
        ("arousal bins", ensemble.arousal_nll, member_mean.arousal_nll),
    ];
    for c in 0..NUM_AU {
        pairs.push(("AU", ensemble.au_nll[c], member_mean.au_nll[c]));
    }
    for (name, ens, mean) in pairs {
        if ens > mean + JENSEN_SLACK {
            return Err(Error::Invariant(format!(
                "{name} ensemble NLL {ens} exceeds mean member NLL {mean}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberSummary {
    pub member: usize,
    /// Base seed of the member slot.
    pub seed: u64,
    /// Checkpoint path relative to the run directory.
    pub checkpoint: String,
    pub history: TrainingHistory,
    pub validation: MetricsRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub generation: usize,
    /// Checksum of the ensemble whose soft labels this generation learned
    /// from; `None` for the teachers.
    pub teacher_checksum: Option<String>,
    pub ensemble_checksum: String,
    pub members: Vec<MemberSummary>,
    /// Mean of the members' validation rows.
    pub single_mean: MetricsRow,
    pub ensemble: MetricsRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub members: usize,
    pub generations: Vec<GenerationSummary>,
}

impl GenerationReport {
    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub generation: usize,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub soft_label_seconds: f64,
}

pub fn generation_dir(out_dir: &Path, generation: usize) -> PathBuf {
    out_dir.join(format!("gen{generation}"))
}

pub fn checkpoint_name(generation: usize, member: usize) -> String {
    format!("gen{generation}/member{member}.json")
}

/// Base seed of each member slot.
pub fn member_seeds(cfg: &RunConfig) -> Vec<u64> {
    match &cfg.member_seeds {
        Some(s) => s.clone(),
        None => (0..cfg.members as u64).map(|t| derive_seed(cfg.seed, t)).collect(),
    }
}

/// Seeds for a member's initial weights and for its training stream.
pub fn generation_seeds(member_seed: u64, generation: usize) -> (u64, u64) {
    let g = generation as u64;
    (derive_seed(member_seed, 2 * g), derive_seed(member_seed, 2 * g + 1))
}

pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Trains generation 0 and `cfg.generations` student generations, writing
/// every artifact under `cfg.out_dir`. Members of a generation train in
/// parallel on up to `workers` threads; results do not depend on `workers`.
pub fn run_generations(cfg: &RunConfig, dataset: &MultitaskDataset, workers: usize) -> Result<GenerationReport> {
    cfg.validate()?;
    if workers == 0 {
        return Err(Error::Config("workers must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Invariant(format!("thread pool: {e}")))?;
    let data = PreparedData::new(dataset, cfg.train.class_weights)?;
    let arch = cfg.model.arch(dataset.dim);
    let seeds = member_seeds(cfg);
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut report = GenerationReport {
        members: cfg.members,
        generations: Vec::new(),
    };
    let mut timings = Vec::new();
    let mut soft: Option<SoftLabelSet> = None;
    for generation in 0..=cfg.generations {
        let mut timing = StageTimings {
            generation,
            ..Default::default()
        };
        let gen_dir = generation_dir(out, generation);
        std::fs::create_dir_all(&gen_dir).map_err(|e| Error::io(&gen_dir, e))?;

        let started = Instant::now();
        let targets = match &soft {
            Some(s) => Targets::Soft(s),
            None => Targets::Hard,
        };
        let trained: Vec<(MultitaskModel, TrainingHistory)> = pool.install(|| {
            seeds
                .par_iter()
                .enumerate()
                .map(|(member, &seed)| {
                    let (init_seed, train_seed) = generation_seeds(seed, generation);
                    let model = MultitaskModel::init(&arch, init_seed)?;
                    let job = MemberJob {
                        generation,
                        member,
                        seed: train_seed,
                    };
                    let result = train_member(model, &data, targets, &cfg.train, job)?;
                    Checkpoint::new(&result.0, generation, member)
                        .save(&out.join(checkpoint_name(generation, member)))?;
                    Ok(result)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        timing.train_seconds = started.elapsed().as_secs_f64();

        let started = Instant::now();
        let models: Vec<MultitaskModel> = trained.iter().map(|(m, _)| m.clone()).collect();
        let member_rows = pool.install(|| {
            models
                .par_iter()
                .map(|m| MetricsRow::compute(&m.predict(&data.val_features)?, &data.val_labels))
                .collect::<Result<Vec<_>>>()
        })?;
        let single_mean = MetricsRow::mean(&member_rows)?;
        let ensemble = MetricsRow::compute(&ensemble_predict(&models, &data.val_features)?, &data.val_labels)?;
        check_jensen(&ensemble.uncertainty, &single_mean.uncertainty)?;
        timing.eval_seconds = started.elapsed().as_secs_f64();

        let members = trained
            .into_iter()
            .zip(member_rows)
            .enumerate()
            .map(|(member, ((_, history), validation))| MemberSummary {
                member,
                seed: seeds[member],
                checkpoint: checkpoint_name(generation, member),
                history,
                validation,
            })
            .collect();
        let ensemble_checksum = ensemble_fingerprint(&models);
        report.generations.push(GenerationSummary {
            generation,
            teacher_checksum: soft.as_ref().map(|s| s.checksum.clone()),
            ensemble_checksum: ensemble_checksum.clone(),
            members,
            single_mean,
            ensemble,
        });

        if generation < cfg.generations {
            let started = Instant::now();
            generate_soft_labels(&models, dataset, generation)?.write(&gen_dir)?;
            let cached = SoftLabelSet::read(&gen_dir)?;
            if cached.checksum != ensemble_checksum {
                return Err(Error::Checksum {
                    expected: ensemble_checksum,
                    found: cached.checksum,
                });
            }
            soft = Some(cached);
            timing.soft_label_seconds = started.elapsed().as_secs_f64();
        }
        timings.push(timing);
    }
    write_json(&out.join(REPORT_FILE), &report)?;
    write_json(&out.join(TIMINGS_FILE), &timings)?;
    write_manifest(out)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Hashes every file under `dir` except the manifest itself and timings,
/// in sorted path order.
pub fn write_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.retain(|p| p != Path::new(MANIFEST_FILE) && p.file_name() != Some(TIMINGS_FILE.as_ref()));
    files.sort();
    let entries = files
        .iter()
        .map(|rel| {
            let full = dir.join(rel);
            let bytes = std::fs::metadata(&full).map_err(|e| Error::io(&full, e))?.len();
            Ok(ManifestEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: sha256_file(&full)?,
                bytes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&dir.join(MANIFEST_FILE), &entries)?;
    Ok(entries)
}

/// Loads `gen{k}/member*.json` for one generation, in member order.
pub fn load_generation(out_dir: &Path, generation: usize) -> Result<Vec<MultitaskModel>> {
    let dir = generation_dir(out_dir, generation);
    let mut models = Vec::new();
    loop {
        let path = out_dir.join(checkpoint_name(generation, models.len()));
        if !path.exists() {
            break;
        }
        let ck = Checkpoint::load(&path)?;
        if ck.generation != generation || ck.member_index != models.len() {
            return Err(Error::invalid(format!(
                "{} claims generation {} member {}",
                path.display(),
                ck.generation,
                ck.member_index
            )));
        }
        models.push(ck.model()?);
    }
    if models.is_empty() {
        return Err(Error::invalid(format!("no checkpoints in {}", dir.display())));
    }
    Ok(models)
}

/// Number of consecutive `gen{k}` directories holding checkpoints.
pub fn count_generations(out_dir: &Path) -> usize {
    (0..)
        .take_while(|&k| out_dir.join(checkpoint_name(k, 0)).exists())
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GeneratorConfig};
    use crate::model::ArchConfig;

    fn small_data(n: usize, seed: u64) -> MultitaskDataset {
        let mut cfg = GeneratorConfig::small(n);
        cfg.imbalance = 0.3;
        generate_dataset(&cfg, seed).unwrap()
    }

    fn quick_train() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 12,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let ds = small_data(600, 1);
        let data = PreparedData::new(&ds, ClassWeighting::Computed).unwrap();
        let model = MultitaskModel::init(&ArchConfig::new(ds.dim), 5).unwrap();
        let hyper = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let job = MemberJob {
            generation: 0,
            member: 0,
            seed: 1,
        };
        let (trained, history) = train_member(model.clone(), &data, Targets::Hard, &hyper, job).unwrap();
        assert_eq!(trained, model);
        assert!(history.epochs.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_data(600, 2);
        let data = PreparedData::new(&ds, ClassWeighting::Computed).unwrap();
        let model = MultitaskModel::init(&ArchConfig::new(ds.dim), 5).unwrap();
        let job = MemberJob {
            generation: 0,
            member: 0,
            seed: 9,
        };
        let a = train_member(model.clone(), &data, Targets::Hard, &quick_train(), job).unwrap();
        let b = train_member(model.clone(), &data, Targets::Hard, &quick_train(), job).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, model);
        assert_eq!(a.1.epochs.len(), 2);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let ds = small_data(600, 2);
        let data = PreparedData::new(&ds, ClassWeighting::Uniform).unwrap();
        let model = MultitaskModel::init(&ArchConfig::new(ds.dim + 1), 5).unwrap();
        let job = MemberJob {
            generation: 0,
            member: 0,
            seed: 9,
        };
        assert!(matches!(
            train_member(model, &data, Targets::Hard, &quick_train(), job),
            Err(Error::ArchMismatch(_))
        ));
    }

    #[test]
    fn single_member_soft_labels_equal_its_outputs() {
        let ds = small_data(600, 3);
        let model = MultitaskModel::init(&ArchConfig::new(ds.dim), 5).unwrap();
        let soft = generate_soft_labels(std::slice::from_ref(&model), &ds, 0).unwrap();
        let train = ds.indices(Split::Train);
        assert_eq!(soft.ids.len(), train.len());
        let direct = model.predict(&ds.features(&train).unwrap()).unwrap();
        assert_eq!(soft.probs.expr, direct.expr);
        for row in soft.probs.expr.row_iter() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn soft_label_cache_round_trips_and_detects_tampering() {
        let ds = small_data(600, 4);
        let models: Vec<_> = (0..2)
            .map(|s| MultitaskModel::init(&ArchConfig::new(ds.dim), s).unwrap())
            .collect();
        let soft = generate_soft_labels(&models, &ds, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        soft.write(dir.path()).unwrap();
        let first = std::fs::read(dir.path().join(SOFT_LABELS_FILE)).unwrap();
        assert_eq!(SoftLabelSet::read(dir.path()).unwrap(), soft);
        soft.write(dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join(SOFT_LABELS_FILE)).unwrap(), first);

        let mut text = String::from_utf8(first).unwrap();
        text.insert(text.len() - 3, '1');
        std::fs::write(dir.path().join(SOFT_LABELS_FILE), text).unwrap();
        assert!(matches!(SoftLabelSet::read(dir.path()), Err(Error::Checksum { .. })));
    }

    #[test]
    fn soft_training_runs_on_every_instance() {
        let ds = small_data(600, 5);
        let data = PreparedData::new(&ds, ClassWeighting::Computed).unwrap();
        let teacher = MultitaskModel::init(&ArchConfig::new(ds.dim), 1).unwrap();
        let soft = generate_soft_labels(&[teacher], &ds, 0).unwrap();
        let student = MultitaskModel::init(&ArchConfig::new(ds.dim), 2).unwrap();
        let job = MemberJob {
            generation: 1,
            member: 0,
            seed: 3,
        };
        let (_, history) = train_member(student, &data, Targets::Soft(&soft), &quick_train(), job).unwrap();
        assert!(history.epochs.iter().all(|e| e.loss.combined.is_finite()));
    }

    #[test]
    fn derived_seeds_are_distinct() {
        let a = generation_seeds(7, 0);
        let b = generation_seeds(7, 1);
        assert_ne!(a.0, a.1);
        assert_ne!(a, b);
        assert_eq!(derive_seed(1, 2), derive_seed(1, 2));
    }

    #[test]
    fn jensen_check_flags_violations() {
        let m = UncertaintyMetrics {
            au_nll: [0.3; NUM_AU],
            au_nll_mean: 0.3,
            expr_nll: 1.0,
            valence_nll: 2.0,
            arousal_nll: 2.0,
            valence_rmse: 0.1,
            arousal_rmse: 0.1,
        };
        check_jensen(&m, &m).unwrap();
        let mut worse = m.clone();
        worse.expr_nll = 1.1;
        assert!(matches!(check_jensen(&worse, &m), Err(Error::Invariant(_))));
    }
}
