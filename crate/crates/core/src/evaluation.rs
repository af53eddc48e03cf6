//! Post-run evaluation: per-member, single-model and ensemble rows for every
//! generation, temperature-scaled and MC-dropout teacher baselines, OOD
//! separation and entropy histograms, plus CSV rendering.
//!
//! The validation split is divided per task into two random halves: the
//! temperature is fitted on half A, and every method row is scored on half B.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{apply_temperature, fit_temperature, mc_dropout_predict, SearchBracket, TemperatureFits};
use crate::config::EvalConfig;
use crate::data::{FeatureMatrix, MultitaskDataset, Split, NUM_AU, NUM_EXPR};
use crate::engine::{check_jensen, count_generations, derive_seed, load_generation, MetricsRow};
use crate::error::{Error, Result};
use crate::model::{ensemble_predict, Mode, MultitaskModel, ProbOutputs};
use crate::tensor::Tensor;
use crate::uncertainty::{
    au_uncertainty, histogram, ood_separation, row_uncertainty, GroupedLabels, OodSeparation, UncertaintyTriple,
    HISTOGRAM_BINS,
};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub tau: f64,
    pub mc_passes: usize,
    pub bracket: SearchBracket,
    pub seed: u64,
    /// Generation used for the OOD section and histograms; the last one
    /// when `None`.
    pub generation: Option<usize>,
}

impl From<&EvalConfig> for EvalOptions {
    fn from(c: &EvalConfig) -> Self {
        Self {
            tau: c.tau,
            mc_passes: c.mc_passes,
            bracket: c.temperature_bracket,
            seed: c.seed,
            generation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    /// `gen{k}/member{t}`, `gen{k}/single`, `gen{k}/ensemble`, `ts` or `mc`.
    pub method: String,
    pub generation: Option<usize>,
    pub member: Option<usize>,
    pub metrics: MetricsRow,
    /// False when the method does not apply to VA regression.
    pub va_reported: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRecord {
    pub label: String,
    /// `total`, `aleatoric` or `epistemic`.
    pub kind: String,
    /// Fractions over equal-width bins covering `[0, 1]`.
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub generation: usize,
    pub in_domain_count: usize,
    pub ood_count: usize,
    /// Normalised epistemic uncertainty of the EXPR head.
    pub expr: OodSeparation,
    /// Per-instance mean over the 12 AUs.
    pub au: OodSeparation,
    pub valence: OodSeparation,
    pub arousal: OodSeparation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub generations: usize,
    pub evaluated_generation: usize,
    pub fit_instances: usize,
    pub eval_instances: usize,
    pub mc_passes: usize,
    /// Temperature fits of each teacher on half A.
    pub temperatures: Vec<TemperatureFits>,
    pub rows: Vec<MethodRow>,
    pub ood: Option<OodReport>,
    pub histograms: Vec<HistogramRecord>,
}

impl UncertaintyReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Validation positions split per task into halves A and B.
pub fn split_validation_halves(dataset: &MultitaskDataset, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for mut pool in dataset.indices_by_task(Split::Val) {
        pool.shuffle(&mut rng);
        let half = pool.len() / 2;
        a.extend_from_slice(&pool[..half]);
        b.extend_from_slice(&pool[half..]);
    }
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

struct Labelled {
    features: Tensor,
    labels: GroupedLabels,
}

impl Labelled {
    fn new(dataset: &MultitaskDataset, positions: &[usize]) -> Result<Self> {
        Ok(Self {
            features: dataset.features(positions)?,
            labels: GroupedLabels::new(positions.iter().map(|&p| &dataset.instances[p].label)),
        })
    }
}

fn generation_rows(generation: usize, models: &[MultitaskModel], set: &Labelled) -> Result<Vec<MethodRow>> {
    let mut rows = Vec::new();
    let mut member_metrics = Vec::new();
    for (t, m) in models.iter().enumerate() {
        let metrics = MetricsRow::compute(&m.predict(&set.features)?, &set.labels)?;
        member_metrics.push(metrics.clone());
        rows.push(MethodRow {
            method: format!("gen{generation}/member{t}"),
            generation: Some(generation),
            member: Some(t),
            metrics,
            va_reported: true,
        });
    }
    let single = MetricsRow::mean(&member_metrics)?;
    let ensemble = MetricsRow::compute(&ensemble_predict(models, &set.features)?, &set.labels)?;
    check_jensen(&ensemble.uncertainty, &single.uncertainty)?;
    for (name, metrics) in [("single", single), ("ensemble", ensemble)] {
        rows.push(MethodRow {
            method: format!("gen{generation}/{name}"),
            generation: Some(generation),
            member: None,
            metrics,
            va_reported: true,
        });
    }
    Ok(rows)
}

fn triple_histograms(label: &str, values: &[UncertaintyTriple], out: &mut Vec<HistogramRecord>) {
    if values.is_empty() {
        return;
    }
    let parts: [(&str, fn(&UncertaintyTriple) -> f64); 3] = [
        ("total", |u| u.total),
        ("aleatoric", |u| u.aleatoric),
        ("epistemic", |u| u.epistemic),
    ];
    for (kind, get) in parts {
        let v: Vec<f64> = values.iter().map(get).collect();
        out.push(HistogramRecord {
            label: label.to_string(),
            kind: kind.to_string(),
            ratios: histogram(&v, HISTOGRAM_BINS),
        });
    }
}

fn member_outputs(models: &[MultitaskModel], x: &Tensor) -> Result<Vec<ProbOutputs>> {
    models.iter().map(|m| m.predict(x)).collect()
}

fn mean_au_epistemic(members: &[ProbOutputs]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; members[0].len()];
    for c in 0..NUM_AU {
        for (a, u) in acc.iter_mut().zip(au_uncertainty(members, c)?) {
            *a += u.epistemic / NUM_AU as f64;
        }
    }
    Ok(acc)
}

fn ood_report(
    generation: usize,
    models: &[MultitaskModel],
    in_domain: &Tensor,
    ood: &FeatureMatrix,
    tau: f64,
) -> Result<OodReport> {
    let ind = member_outputs(models, in_domain)?;
    let (ood_out, ood_count) = if ood.is_empty() {
        (None, 0)
    } else {
        (Some(member_outputs(models, &ood.to_tensor()?)?), ood.len())
    };
    let epistemic = |members: &[ProbOutputs], which: usize| -> Result<Vec<f64>> {
        let triples = match which {
            0 => return mean_au_epistemic(members),
            1 => row_uncertainty(members, |p| &p.expr)?,
            2 => row_uncertainty(members, |p| &p.valence)?,
            _ => row_uncertainty(members, |p| &p.arousal)?,
        };
        Ok(triples.iter().map(|u| u.epistemic).collect())
    };
    let mut seps = Vec::with_capacity(4);
    for which in 0..4 {
        let a = epistemic(&ind, which)?;
        let b = match &ood_out {
            Some(o) => epistemic(o, which)?,
            None => Vec::new(),
        };
        seps.push(ood_separation(&a, &b, tau)?);
    }
    let [au, expr, valence, arousal]: [OodSeparation; 4] = seps.try_into().expect("four tasks");
    Ok(OodReport {
        generation,
        in_domain_count: in_domain.rows(),
        ood_count,
        expr,
        au,
        valence,
        arousal,
    })
}

fn histograms(models: &[MultitaskModel], x: &Tensor) -> Result<Vec<HistogramRecord>> {
    let members = member_outputs(models, x)?;
    let mut out = Vec::new();
    for c in 0..NUM_AU {
        triple_histograms(&format!("AU{c}"), &au_uncertainty(&members, c)?, &mut out);
    }
    let expr = row_uncertainty(&members, |p| &p.expr)?;
    triple_histograms("EXPR", &expr, &mut out);
    let mean = ProbOutputs::mean(&members)?;
    let predicted: Vec<usize> = mean
        .expr
        .row_iter()
        .map(|r| {
            (0..NUM_EXPR)
                .max_by(|&i, &j| r[i].total_cmp(&r[j]).then(j.cmp(&i)))
                .expect("7 classes")
        })
        .collect();
    for k in 0..NUM_EXPR {
        let group: Vec<UncertaintyTriple> = expr
            .iter()
            .zip(&predicted)
            .filter(|(_, &p)| p == k)
            .map(|(u, _)| *u)
            .collect();
        triple_histograms(&format!("EXPR/predicted{k}"), &group, &mut out);
    }
    triple_histograms("valence", &row_uncertainty(&members, |p| &p.valence)?, &mut out);
    triple_histograms("arousal", &row_uncertainty(&members, |p| &p.arousal)?, &mut out);
    Ok(out)
}

/// Scores every stored generation and the two teacher baselines.
pub fn evaluate(
    run_dir: &Path,
    dataset: &MultitaskDataset,
    ood: Option<&FeatureMatrix>,
    opts: &EvalOptions,
) -> Result<UncertaintyReport> {
    opts.bracket.validate()?;
    if opts.mc_passes == 0 {
        return Err(Error::Config("mc_passes must be >= 1".into()));
    }
    let generations = count_generations(run_dir);
    if generations == 0 {
        return Err(Error::invalid(format!("no checkpoints under {}", run_dir.display())));
    }
    let evaluated = opts.generation.unwrap_or(generations - 1);
    if evaluated >= generations {
        return Err(Error::Config(format!(
            "generation {evaluated} requested but the run has {generations}"
        )));
    }
    let all: Vec<Vec<MultitaskModel>> = (0..generations)
        .map(|k| load_generation(run_dir, k))
        .collect::<Result<_>>()?;
    if let Some(m) = all.iter().flatten().find(|m| m.arch.input_dim != dataset.dim) {
        return Err(Error::ArchMismatch(format!(
            "checkpoint expects {} features, dataset has {}",
            m.arch.input_dim, dataset.dim
        )));
    }

    let (half_a, half_b) = split_validation_halves(dataset, opts.seed);
    let fit = Labelled::new(dataset, &half_a)?;
    let eval = Labelled::new(dataset, &half_b)?;

    let mut rows = Vec::new();
    for (k, models) in all.iter().enumerate() {
        rows.extend(generation_rows(k, models, &eval)?);
    }

    let teachers = &all[0];
    let mut temperatures = Vec::with_capacity(teachers.len());
    let mut ts_rows = Vec::with_capacity(teachers.len());
    let mut mc_rows = Vec::with_capacity(teachers.len());
    for (t, model) in teachers.iter().enumerate() {
        let fits = fit_temperature(&model.forward(&fit.features, Mode::Eval)?, &fit.labels, opts.bracket)?;
        let scaled = apply_temperature(&model.forward(&eval.features, Mode::Eval)?, fits.temperatures())?;
        ts_rows.push(MetricsRow::compute(&scaled, &eval.labels)?);
        temperatures.push(fits);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, t as u64));
        let mc = mc_dropout_predict(model, &eval.features, opts.mc_passes, &mut rng)?;
        mc_rows.push(MetricsRow::compute(&mc, &eval.labels)?);
    }
    rows.push(MethodRow {
        method: "ts".into(),
        generation: Some(0),
        member: None,
        metrics: MetricsRow::mean(&ts_rows)?,
        va_reported: false,
    });
    rows.push(MethodRow {
        method: "mc".into(),
        generation: Some(0),
        member: None,
        metrics: MetricsRow::mean(&mc_rows)?,
        va_reported: true,
    });

    let val_positions = dataset.indices(Split::Val);
    let val = dataset.features(&val_positions)?;
    let chosen = &all[evaluated];
    let ood = match ood {
        Some(o) => {
            if !o.is_empty() && o.dim != dataset.dim {
                return Err(Error::ArchMismatch(format!(
                    "OOD features have width {}, dataset has {}",
                    o.dim, dataset.dim
                )));
            }
            Some(ood_report(evaluated, chosen, &val, o, opts.tau)?)
        }
        None => None,
    };

    Ok(UncertaintyReport {
        generations,
        evaluated_generation: evaluated,
        fit_instances: half_a.len(),
        eval_instances: half_b.len(),
        mc_passes: opts.mc_passes,
        temperatures,
        rows,
        ood,
        histograms: histograms(chosen, &val)?,
    })
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

pub const AU_NLL_CSV: &str = "au_nll.csv";
pub const EXPR_VA_CSV: &str = "expr_va.csv";
pub const EMOTION_CSV: &str = "emotion.csv";
pub const OOD_CSV: &str = "ood.csv";
pub const HISTOGRAM_CSV: &str = "histograms.csv";

/// CSV tables derived from a report, as `(file name, contents)`.
pub fn render_csvs(report: &UncertaintyReport) -> Vec<(&'static str, String)> {
    let mut au = String::from("method");
    for c in 0..NUM_AU {
        au.push_str(&format!(",AU{c}"));
    }
    au.push_str(",avg\n");
    let mut expr_va = String::from("method,expr_nll,valence_rmse,arousal_rmse\n");
    let mut emotion = String::from(
        "method,au_f1,au_accuracy,au_metric,expr_f1,expr_accuracy,expr_metric,valence_ccc,arousal_ccc,total\n",
    );
    for row in &report.rows {
        let u = &row.metrics.uncertainty;
        let e = &row.metrics.emotion;
        au.push_str(&row.method);
        for v in u.au_nll {
            au.push(',');
            au.push_str(&fmt(v));
        }
        au.push_str(&format!(",{}\n", fmt(u.au_nll_mean)));
        let (vr, ar) = if row.va_reported {
            (fmt(u.valence_rmse), fmt(u.arousal_rmse))
        } else {
            ("-".into(), "-".into())
        };
        expr_va.push_str(&format!("{},{},{vr},{ar}\n", row.method, fmt(u.expr_nll)));
        emotion.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            row.method,
            fmt(e.au_f1),
            fmt(e.au_accuracy),
            fmt(e.au),
            fmt(e.expr_f1),
            fmt(e.expr_accuracy),
            fmt(e.expr),
            fmt(e.valence_ccc),
            fmt(e.arousal_ccc),
            fmt(e.total)
        ));
    }

    let mut ood = String::from("task,generation,tau,in_domain_below,ood_below,in_domain_count,ood_count\n");
    let mut hist = String::from("label,bin_low,bin_high,ratio\n");
    let mut push_hist = |label: &str, ratios: &[f64]| {
        let width = 1.0 / ratios.len() as f64;
        for (b, r) in ratios.iter().enumerate() {
            hist.push_str(&format!(
                "{label},{},{},{}\n",
                fmt(b as f64 * width),
                fmt((b + 1) as f64 * width),
                fmt(*r)
            ));
        }
    };
    for h in &report.histograms {
        push_hist(&format!("{}/{}", h.label, h.kind), &h.ratios);
    }
    if let Some(o) = &report.ood {
        for (task, s) in [
            ("AU", &o.au),
            ("EXPR", &o.expr),
            ("valence", &o.valence),
            ("arousal", &o.arousal),
        ] {
            ood.push_str(&format!(
                "{task},{},{},{},{},{},{}\n",
                o.generation,
                fmt(s.tau),
                fmt(s.in_domain_below),
                fmt(s.ood_below),
                o.in_domain_count,
                o.ood_count
            ));
            push_hist(&format!("{task}/epistemic/in_domain"), &s.in_domain_histogram);
            push_hist(&format!("{task}/epistemic/ood"), &s.ood_histogram);
        }
    }
    vec![
        (AU_NLL_CSV, au),
        (EXPR_VA_CSV, expr_va),
        (EMOTION_CSV, emotion),
        (OOD_CSV, ood),
        (HISTOGRAM_CSV, hist),
    ]
}

pub fn write_csvs(report: &UncertaintyReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    render_csvs(report)
        .into_iter()
        .map(|(name, text)| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GeneratorConfig, Task};
    use crate::model::{ArchConfig, Checkpoint};

    fn fixture(members: usize, generations: usize) -> (tempfile::TempDir, MultitaskDataset) {
        let mut cfg = GeneratorConfig::small(600);
        cfg.imbalance = 0.3;
        let ds = generate_dataset(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for k in 0..generations {
            std::fs::create_dir_all(dir.path().join(format!("gen{k}"))).unwrap();
            for t in 0..members {
                let m = MultitaskModel::init(&ArchConfig::new(ds.dim), (10 * k + t) as u64).unwrap();
                Checkpoint::new(&m, k, t)
                    .save(&dir.path().join(format!("gen{k}/member{t}.json")))
                    .unwrap();
            }
        }
        (dir, ds)
    }

    fn opts() -> EvalOptions {
        EvalOptions::from(&EvalConfig::default())
    }

    #[test]
    fn halves_partition_validation_per_task() {
        let (_d, ds) = fixture(1, 1);
        let (a, b) = split_validation_halves(&ds, 3);
        let mut all = [a.clone(), b.clone()].concat();
        all.sort();
        assert_eq!(all, ds.indices(Split::Val));
        for task in Task::ALL {
            let count = |v: &[usize]| v.iter().filter(|&&p| ds.instances[p].task() == task).count();
            assert!(count(&a).abs_diff(count(&b)) <= 1);
        }
    }

    #[test]
    fn single_member_ensemble_row_equals_member_row() {
        let (dir, ds) = fixture(1, 1);
        let r = evaluate(dir.path(), &ds, None, &opts()).unwrap();
        let member = &r.row("gen0/member0").unwrap().metrics;
        assert_eq!(&r.row("gen0/ensemble").unwrap().metrics, member);
        assert_eq!(&r.row("gen0/single").unwrap().metrics, member);
        assert!(r.ood.is_none());
    }

    #[test]
    fn report_structure_and_csvs() {
        let (dir, ds) = fixture(2, 2);
        let ood = crate::data::generate_ood(&GeneratorConfig::small(600), 1).unwrap();
        let r = evaluate(dir.path(), &ds, Some(&ood), &opts()).unwrap();
        assert_eq!(r.generations, 2);
        assert_eq!(r.rows.len(), 2 * (2 + 2) + 2);
        assert!(!r.row("ts").unwrap().va_reported);
        for h in &r.histograms {
            assert!((h.ratios.iter().sum::<f64>() - 1.0).abs() < 1e-6, "{}", h.label);
        }
        let csvs = render_csvs(&r);
        let expr_va = &csvs.iter().find(|(n, _)| *n == EXPR_VA_CSV).unwrap().1;
        assert!(expr_va.lines().any(|l| l.starts_with("ts,") && l.ends_with(",-,-")));
        assert!(expr_va.lines().filter(|l| l.ends_with(",-,-")).count() == 1);

        let again = evaluate(dir.path(), &ds, Some(&ood), &opts()).unwrap();
        assert_eq!(render_csvs(&again), csvs);

        let path = dir.path().join("report.json");
        r.write(&path).unwrap();
        assert_eq!(UncertaintyReport::read(&path).unwrap(), r);
    }

    #[test]
    fn missing_generation_is_a_config_error() {
        let (dir, ds) = fixture(1, 1);
        let mut o = opts();
        o.generation = Some(3);
        assert!(evaluate(dir.path(), &ds, None, &o).unwrap_err().is_config_error());
    }
}
