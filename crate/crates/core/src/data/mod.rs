//! Multitask datasets: one label type per instance, train/validation splits,
//! and the JSON-lines on-disk format.

mod generator;
mod sampler;
mod store;
mod va;
mod weights;

pub use generator::{generate_dataset, generate_ood, GeneratorConfig, SyntheticGenerator};
pub use sampler::sample_balanced_batch;
pub use store::{
    generator_checksum, load_dataset_dir, write_dataset_dir, DatasetFile, DatasetManifest, DATASET_MANIFEST, OOD_FILE,
};
pub use va::{bin_center, decode_expectation, discretize_va, va_one_hot, VA_BINS};
pub use weights::{compute_class_weights, ClassWeights, REFERENCE_AU_WEIGHTS, REFERENCE_EXPR_WEIGHTS};

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_AU: usize = 12;
pub const NUM_EXPR: usize = 7;

/// Which of the three emotion tasks an instance is labelled for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "AU")]
    Au,
    #[serde(rename = "EXPR")]
    Expr,
    #[serde(rename = "VA")]
    Va,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Au, Task::Expr, Task::Va];

    pub fn index(self) -> usize {
        match self {
            Task::Au => 0,
            Task::Expr => 1,
            Task::Va => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Au => "AU",
            Task::Expr => "EXPR",
            Task::Va => "VA",
        }
    }
}

/// The single label carried by an instance.
#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    /// 12 binary action-unit indicators.
    Au([bool; NUM_AU]),
    /// Index of the expression class.
    Expr(usize),
    /// Valence and arousal in `[-1, 1]`.
    Va([f64; 2]),
}

impl Label {
    pub fn task(&self) -> Task {
        match self {
            Label::Au(_) => Task::Au,
            Label::Expr(_) => Task::Expr,
            Label::Va(_) => Task::Va,
        }
    }

    /// The `y` vector of the file format: 12 binaries, a 7-way one-hot, or a
    /// valence/arousal pair.
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            Label::Au(bits) => bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            Label::Expr(k) => (0..NUM_EXPR).map(|j| if j == *k { 1.0 } else { 0.0 }).collect(),
            Label::Va(va) => va.to_vec(),
        }
    }

    pub fn from_vec(task: Task, y: &[f64]) -> Result<Self> {
        match task {
            Task::Au => {
                if y.len() != NUM_AU {
                    return Err(Error::invalid(format!("AU label needs 12 values, got {}", y.len())));
                }
                let mut bits = [false; NUM_AU];
                for (b, &v) in bits.iter_mut().zip(y) {
                    *b = match v {
                        v if v == 1.0 => true,
                        v if v == 0.0 => false,
                        _ => return Err(Error::invalid(format!("AU label value {v} is not binary"))),
                    };
                }
                Ok(Label::Au(bits))
            }
            Task::Expr => {
                if y.len() != NUM_EXPR {
                    return Err(Error::invalid(format!("EXPR label needs 7 values, got {}", y.len())));
                }
                let ones: Vec<usize> = (0..NUM_EXPR).filter(|&k| y[k] == 1.0).collect();
                if ones.len() != 1 || y.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::invalid("EXPR label is not one-hot"));
                }
                Ok(Label::Expr(ones[0]))
            }
            Task::Va => {
                if y.len() != 2 || y.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                    return Err(Error::invalid("VA label needs two values in [-1, 1]"));
                }
                Ok(Label::Va([y[0], y[1]]))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: usize,
    pub features: Vec<f64>,
    pub label: Label,
    pub split: Split,
}

impl Instance {
    pub fn task(&self) -> Task {
        self.label.task()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskDataset {
    pub dim: usize,
    pub instances: Vec<Instance>,
}

/// Row-major feature matrix that may be empty (unlike [`Tensor`]).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.rows)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for row in &self.rows {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        let n = self.rows.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

impl MultitaskDataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.instances.len())
            .filter(|&i| self.instances[i].split == split)
            .collect()
    }

    /// Positions of `split` instances, grouped by task in [`Task::ALL`] order.
    pub fn indices_by_task(&self, split: Split) -> [Vec<usize>; 3] {
        let mut out: [Vec<usize>; 3] = Default::default();
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.split == split {
                out[inst.task().index()].push(i);
            }
        }
        out
    }

    pub fn features(&self, positions: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(positions.len() * self.dim);
        for &p in positions {
            data.extend_from_slice(&self.instances[p].features);
        }
        Tensor::matrix(positions.len(), self.dim, data)
    }

    pub fn split_features(&self, split: Split) -> FeatureMatrix {
        FeatureMatrix {
            dim: self.dim,
            rows: self
                .instances
                .iter()
                .filter(|i| i.split == split)
                .map(|i| i.features.clone())
                .collect(),
        }
    }

    /// Checks the structural invariants of a dataset.
    pub fn validate(&self) -> Result<()> {
        for inst in &self.instances {
            if inst.features.len() != self.dim {
                return Err(Error::invalid(format!(
                    "instance {} has {} features, expected {}",
                    inst.id,
                    inst.features.len(),
                    self.dim
                )));
            }
            if !inst.features.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("instance {} has non-finite features", inst.id)));
            }
            Label::from_vec(inst.task(), &inst.label.to_vec())?;
        }
        Ok(())
    }

    /// Writes `train.jsonl` and `val.jsonl` into `dir`.
    pub fn write_jsonl(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (split, name) in [(Split::Train, "train.jsonl"), (Split::Val, "val.jsonl")] {
            let path = dir.join(name);
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            for inst in self.instances.iter().filter(|i| i.split == split) {
                let rec = InstanceRecord {
                    id: inst.id,
                    x: inst.features.clone(),
                    task: inst.task(),
                    y: inst.label.to_vec(),
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn read_jsonl(dir: &Path) -> Result<Self> {
        let mut instances = Vec::new();
        let mut dim = None;
        for (split, name) in [(Split::Train, "train.jsonl"), (Split::Val, "val.jsonl")] {
            let path = dir.join(name);
            for rec in read_records::<InstanceRecord>(&path)? {
                match dim {
                    None => dim = Some(rec.x.len()),
                    Some(d) if d != rec.x.len() => {
                        return Err(Error::invalid(format!(
                            "{}: instance {} has {} features, expected {d}",
                            path.display(),
                            rec.id,
                            rec.x.len()
                        )))
                    }
                    _ => {}
                }
                instances.push(Instance {
                    id: rec.id,
                    label: Label::from_vec(rec.task, &rec.y)?,
                    features: rec.x,
                    split,
                });
            }
        }
        instances.sort_by_key(|i| i.id);
        let ds = MultitaskDataset {
            dim: dim.ok_or_else(|| Error::invalid(format!("{}: empty dataset", dir.display())))?,
            instances,
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    id: usize,
    x: Vec<f64>,
    task: Task,
    y: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureRecord {
    id: usize,
    x: Vec<f64>,
}

pub(crate) fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

impl FeatureMatrix {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (id, x) in self.rows.iter().enumerate() {
            serde_json::to_writer(&mut w, &FeatureRecord { id, x: x.clone() })?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path, dim: usize) -> Result<Self> {
        let mut recs = read_records::<FeatureRecord>(path)?;
        recs.sort_by_key(|r| r.id);
        if let Some(bad) = recs.iter().find(|r| r.x.len() != dim) {
            return Err(Error::invalid(format!(
                "{}: row {} has {} features, expected {dim}",
                path.display(),
                bad.id,
                bad.x.len()
            )));
        }
        Ok(Self {
            dim,
            rows: recs.into_iter().map(|r| r.x).collect(),
        })
    }
}
