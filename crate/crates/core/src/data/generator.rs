//! Synthetic stand-in for a multitask affect dataset.
//!
//! Latent vectors come from a skewed Gaussian mixture and are used directly as
//! features. The mixture is concentrated near a `manifold_dim`-dimensional
//! coordinate subspace: means and unit-variance noise live there, and the
//! remaining coordinates only carry small noise. Out-of-distribution samples
//! are pushed off that subspace. Each instance carries one label type:
//! - AU: 12 thresholded random projections, thresholds chosen to hit target
//!   positive rates that fall off linearly with the AU index;
//! - EXPR: argmax of a biased 7-way linear map;
//! - VA: two bounded smooth functions of the latent squashed by `tanh`.
//!
//! Label noise flips AU bits / EXPR classes and perturbs VA before the squash.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureMatrix, Instance, Label, MultitaskDataset, Split, Task, NUM_AU, NUM_EXPR};
use crate::error::{Error, Result};

const STRUCTURE_STREAM: u64 = 0;
const SAMPLE_STREAM: u64 = 1;
const OOD_STREAM: u64 = 2;
const PILOT_SAMPLES: usize = 4000;

fn default_proportions() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}
fn default_mean_spread() -> f64 {
    2.0
}
fn default_au_noise() -> f64 {
    0.05
}
fn default_expr_noise() -> f64 {
    0.2
}
fn default_va_noise() -> f64 {
    0.1
}
fn default_imbalance() -> f64 {
    0.85
}
fn default_ood_shift() -> f64 {
    64.0
}
fn default_val_fraction() -> f64 {
    0.2
}
fn default_n_ood() -> usize {
    500
}
fn default_manifold_dim() -> usize {
    4
}
fn default_off_manifold_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Number of in-domain instances.
    pub n: usize,
    /// Feature dimension.
    pub dim: usize,
    pub mixture_components: usize,
    /// Relative share of AU, EXPR and VA instances.
    #[serde(default = "default_proportions")]
    pub task_proportions: [f64; 3],
    /// Standard deviation of the mixture means around the origin.
    #[serde(default = "default_mean_spread")]
    pub mean_spread: f64,
    /// Probability of flipping each AU bit.
    #[serde(default = "default_au_noise")]
    pub au_noise: f64,
    /// Probability of replacing the EXPR class by a uniformly drawn one.
    #[serde(default = "default_expr_noise")]
    pub expr_noise: f64,
    /// Standard deviation of the noise added to VA before `tanh`.
    #[serde(default = "default_va_noise")]
    pub va_noise: f64,
    /// Skew knob in `[0, 1)`: mixture weights, AU positive rates and EXPR
    /// class frequencies all become more unbalanced as it grows.
    #[serde(default = "default_imbalance")]
    pub imbalance: f64,
    /// Distance the out-of-distribution mixture is shifted by, along a
    /// direction orthogonal to the data subspace.
    #[serde(default = "default_ood_shift")]
    pub ood_shift: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Number of out-of-distribution feature vectors.
    #[serde(default = "default_n_ood")]
    pub n_ood: usize,
    /// Coordinates carrying the mixture structure; clipped to `dim`.
    #[serde(default = "default_manifold_dim")]
    pub manifold_dim: usize,
    /// Noise standard deviation in the other coordinates.
    #[serde(default = "default_off_manifold_scale")]
    pub off_manifold_scale: f64,
}

impl GeneratorConfig {
    /// A default-valued configuration with `n` instances in 16 dimensions.
    pub fn small(n: usize) -> Self {
        Self {
            n,
            dim: 16,
            mixture_components: 4,
            task_proportions: default_proportions(),
            mean_spread: default_mean_spread(),
            au_noise: default_au_noise(),
            expr_noise: default_expr_noise(),
            va_noise: default_va_noise(),
            imbalance: default_imbalance(),
            ood_shift: default_ood_shift(),
            val_fraction: default_val_fraction(),
            n_ood: default_n_ood(),
            manifold_dim: default_manifold_dim(),
            off_manifold_scale: default_off_manifold_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n == 0 {
            return bad("n must be > 0".into());
        }
        if self.dim == 0 {
            return bad("dim must be > 0".into());
        }
        if self.mixture_components == 0 {
            return bad("mixture_components must be > 0".into());
        }
        if self.task_proportions.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return bad("task_proportions must all be positive".into());
        }
        for (name, v) in [("au_noise", self.au_noise), ("expr_noise", self.expr_noise)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1)"));
            }
        }
        if !(self.va_noise >= 0.0 && self.va_noise.is_finite()) {
            return bad("va_noise must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.imbalance) {
            return bad("imbalance must lie in [0, 1)".into());
        }
        if !(self.ood_shift >= 0.0 && self.ood_shift.is_finite()) {
            return bad("ood_shift must be >= 0".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)".into());
        }
        if !(self.mean_spread >= 0.0 && self.mean_spread.is_finite()) {
            return bad("mean_spread must be >= 0".into());
        }
        if self.manifold_dim == 0 {
            return bad("manifold_dim must be > 0".into());
        }
        if !(self.off_manifold_scale >= 0.0 && self.off_manifold_scale.is_finite()) {
            return bad("off_manifold_scale must be >= 0".into());
        }
        Ok(())
    }
}

/// The fixed random structure behind a dataset: mixture, projections and
/// label rules. Fully determined by `(config, seed)`.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    config: GeneratorConfig,
    seed: u64,
    means: Vec<Vec<f64>>,
    mixture_weights: Vec<f64>,
    au_directions: Vec<Vec<f64>>,
    au_thresholds: Vec<f64>,
    expr_weights: Vec<Vec<f64>>,
    expr_bias: Vec<f64>,
    va_directions: [Vec<f64>; 4],
    ood_direction: Vec<f64>,
}

fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * std_normal(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl SyntheticGenerator {
    pub fn new(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let m = config.manifold_dim.min(d);
        let mut rng = rng_stream(seed, STRUCTURE_STREAM);
        let means = (0..config.mixture_components)
            .map(|_| {
                let mut v = normal_vec(&mut rng, d, config.mean_spread);
                v[m..].iter_mut().for_each(|x| *x = 0.0);
                v
            })
            .collect();
        let raw: Vec<f64> = (0..config.mixture_components)
            .map(|k| (-2.0 * config.imbalance * k as f64).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        let mixture_weights = raw.iter().map(|w| w / total).collect();
        // Label rules only read the structured coordinates.
        let proj_scale = 1.0 / (m as f64).sqrt();
        let direction = |rng: &mut ChaCha8Rng| {
            let mut v = normal_vec(rng, d, proj_scale);
            v[m..].iter_mut().for_each(|x| *x = 0.0);
            v
        };
        let au_directions: Vec<Vec<f64>> = (0..NUM_AU).map(|_| direction(&mut rng)).collect();
        let expr_weights = (0..NUM_EXPR).map(|_| direction(&mut rng)).collect();
        let expr_bias = (0..NUM_EXPR)
            .map(|k| -1.5 * config.imbalance * k as f64 / (NUM_EXPR - 1) as f64)
            .collect();
        let va_directions: [Vec<f64>; 4] = std::array::from_fn(|_| direction(&mut rng));
        let mut ood_direction = normal_vec(&mut rng, d, 1.0);
        if m < d {
            ood_direction[..m].iter_mut().for_each(|x| *x = 0.0);
        }
        let norm = dot(&ood_direction, &ood_direction).sqrt();
        ood_direction.iter_mut().for_each(|v| *v /= norm);

        let mut gen = Self {
            config: config.clone(),
            seed,
            means,
            mixture_weights,
            au_directions,
            au_thresholds: vec![0.0; NUM_AU],
            expr_weights,
            expr_bias,
            va_directions,
            ood_direction,
        };
        // Thresholds at the (1 - rate) quantile of a pilot sample.
        let pilot: Vec<Vec<f64>> = (0..PILOT_SAMPLES).map(|_| gen.sample_latent(&mut rng, 0.0)).collect();
        for c in 0..NUM_AU {
            let mut proj: Vec<f64> = pilot.iter().map(|z| dot(z, &gen.au_directions[c])).collect();
            proj.sort_by(f64::total_cmp);
            // Flip noise pulls the observed rate towards 0.5; aim the clean
            // rule so that the noisy rate lands on the target.
            let eta = config.au_noise;
            let rate = ((gen.au_target_rate(c) - eta) / (1.0 - 2.0 * eta)).max(0.005);
            let q = ((1.0 - rate) * PILOT_SAMPLES as f64) as usize;
            gen.au_thresholds[c] = proj[q.min(PILOT_SAMPLES - 1)];
        }
        Ok(gen)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Target (observed, after noise) positive rate of AU `c`, from 0.5 down
    /// to `0.5 (1 - imbalance)`.
    pub fn au_target_rate(&self, c: usize) -> f64 {
        let min_rate = 0.5 * (1.0 - self.config.imbalance);
        0.5 - (0.5 - min_rate) * c as f64 / (NUM_AU - 1) as f64
    }

    pub fn mixture_means(&self) -> &[Vec<f64>] {
        &self.means
    }

    fn sample_latent(&self, rng: &mut ChaCha8Rng, shift: f64) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = self.mixture_weights.len() - 1;
        for (j, w) in self.mixture_weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = j;
                break;
            }
        }
        let m = self.config.manifold_dim.min(self.config.dim);
        let off = self.config.off_manifold_scale;
        self.means[k]
            .iter()
            .zip(&self.ood_direction)
            .enumerate()
            .map(|(j, (mu, dir))| {
                let scale = if j < m { 1.0 } else { off };
                mu + shift * dir + scale * std_normal(rng)
            })
            .collect()
    }

    /// Noise-free AU rule.
    pub fn au_rule(&self, z: &[f64]) -> [bool; NUM_AU] {
        std::array::from_fn(|c| dot(z, &self.au_directions[c]) > self.au_thresholds[c])
    }

    /// Noise-free EXPR rule.
    pub fn expr_rule(&self, z: &[f64]) -> usize {
        let scores: Vec<f64> = (0..NUM_EXPR)
            .map(|k| dot(z, &self.expr_weights[k]) + self.expr_bias[k])
            .collect();
        argmax(&scores)
    }

    /// Valence/arousal before noise and squashing.
    fn va_raw(&self, z: &[f64]) -> [f64; 2] {
        let [v1, v2, a1, a2] = &self.va_directions;
        [
            0.8 * dot(z, v1) + 0.5 * dot(z, v2).sin(),
            0.8 * dot(z, a1) + 0.5 * dot(z, a2).cos(),
        ]
    }

    /// Noise-free VA rule.
    pub fn va_rule(&self, z: &[f64]) -> [f64; 2] {
        self.va_raw(z).map(f64::tanh)
    }

    pub fn generate(&self) -> Result<MultitaskDataset> {
        let cfg = &self.config;
        let mut rng = rng_stream(self.seed, SAMPLE_STREAM);
        let counts = task_counts(cfg.n, &cfg.task_proportions);
        let mut tags: Vec<Task> = Task::ALL
            .iter()
            .zip(counts)
            .flat_map(|(&t, c)| std::iter::repeat_n(t, c))
            .collect();
        tags.shuffle(&mut rng);

        let mut instances = Vec::with_capacity(cfg.n);
        for (id, &task) in tags.iter().enumerate() {
            let z = self.sample_latent(&mut rng, 0.0);
            let label = match task {
                Task::Au => {
                    let mut bits = self.au_rule(&z);
                    for b in bits.iter_mut() {
                        if rng.gen::<f64>() < cfg.au_noise {
                            *b = !*b;
                        }
                    }
                    Label::Au(bits)
                }
                Task::Expr => {
                    let mut k = self.expr_rule(&z);
                    if rng.gen::<f64>() < cfg.expr_noise {
                        k = rng.gen_range(0..NUM_EXPR);
                    }
                    Label::Expr(k)
                }
                Task::Va => {
                    let raw = self.va_raw(&z);
                    Label::Va(raw.map(|r| {
                        let noise = std_normal(&mut rng);
                        (r + cfg.va_noise * noise).tanh().clamp(-1.0, 1.0)
                    }))
                }
            };
            instances.push(Instance {
                id,
                features: z,
                label,
                split: Split::Train,
            });
        }

        // Stratified split: the same validation fraction within each task.
        for task in Task::ALL {
            let mut ids: Vec<usize> = instances.iter().filter(|i| i.task() == task).map(|i| i.id).collect();
            ids.shuffle(&mut rng);
            let n_val = (ids.len() as f64 * cfg.val_fraction).round() as usize;
            if n_val == 0 || n_val == ids.len() {
                return Err(Error::Config(format!(
                    "{} instances of task {} cannot be split with val_fraction {}",
                    ids.len(),
                    task.name(),
                    cfg.val_fraction
                )));
            }
            for &id in &ids[..n_val] {
                instances[id].split = Split::Val;
            }
        }
        Ok(MultitaskDataset {
            dim: cfg.dim,
            instances,
        })
    }

    /// Out-of-distribution features: the same mixture, every mean moved by
    /// `ood_shift` along a fixed random unit direction.
    pub fn generate_ood(&self) -> FeatureMatrix {
        let mut rng = rng_stream(self.seed, OOD_STREAM);
        FeatureMatrix {
            dim: self.config.dim,
            rows: (0..self.config.n_ood)
                .map(|_| self.sample_latent(&mut rng, self.config.ood_shift))
                .collect(),
        }
    }

    /// In-domain features drawn from the OOD stream (no shift); the control
    /// sample for OOD comparisons.
    pub fn sample_in_domain(&self, n: usize) -> FeatureMatrix {
        let mut rng = rng_stream(self.seed, OOD_STREAM);
        FeatureMatrix {
            dim: self.config.dim,
            rows: (0..n).map(|_| self.sample_latent(&mut rng, 0.0)).collect(),
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Splits `n` by `proportions` with largest-remainder rounding.
fn task_counts(n: usize, proportions: &[f64; 3]) -> [usize; 3] {
    let total: f64 = proportions.iter().sum();
    let exact: Vec<f64> = proportions.iter().map(|p| n as f64 * p / total).collect();
    let mut counts: [usize; 3] = std::array::from_fn(|i| exact[i].floor() as usize);
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for i in order {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

pub fn generate_dataset(config: &GeneratorConfig, seed: u64) -> Result<MultitaskDataset> {
    SyntheticGenerator::new(config, seed)?.generate()
}

pub fn generate_ood(config: &GeneratorConfig, seed: u64) -> Result<FeatureMatrix> {
    Ok(SyntheticGenerator::new(config, seed)?.generate_ood())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_proportions_give_equal_task_counts() {
        let ds = generate_dataset(&GeneratorConfig::small(300), 1).unwrap();
        for task in Task::ALL {
            let n = ds.instances.iter().filter(|i| i.task() == task).count();
            assert_eq!(n, 100, "{task:?}");
        }
    }

    #[test]
    fn task_counts_absorb_remainders() {
        assert_eq!(task_counts(10, &[1.0, 1.0, 1.0]), [4, 3, 3]);
        assert_eq!(task_counts(7, &[2.0, 1.0, 1.0]), [3, 2, 2]);
    }

    #[test]
    fn zero_noise_labels_follow_the_rules() {
        let mut cfg = GeneratorConfig::small(240);
        cfg.au_noise = 0.0;
        cfg.expr_noise = 0.0;
        cfg.va_noise = 0.0;
        let gen = SyntheticGenerator::new(&cfg, 9).unwrap();
        let ds = gen.generate().unwrap();
        for inst in &ds.instances {
            match &inst.label {
                Label::Au(bits) => assert_eq!(*bits, gen.au_rule(&inst.features)),
                Label::Expr(k) => assert_eq!(*k, gen.expr_rule(&inst.features)),
                Label::Va(va) => assert_eq!(*va, gen.va_rule(&inst.features)),
            }
        }
    }

    #[test]
    fn default_imbalance_yields_a_rare_au() {
        let ds = generate_dataset(&GeneratorConfig::small(3000), 2).unwrap();
        let au: Vec<&[bool; NUM_AU]> = ds
            .instances
            .iter()
            .filter_map(|i| match &i.label {
                Label::Au(b) => Some(b),
                _ => None,
            })
            .collect();
        let rates: Vec<f64> = (0..NUM_AU)
            .map(|c| au.iter().filter(|b| b[c]).count() as f64 / au.len() as f64)
            .collect();
        assert!(rates.iter().any(|&r| r < 0.10), "{rates:?}");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig::small(90);
        assert_eq!(generate_dataset(&cfg, 4).unwrap(), generate_dataset(&cfg, 4).unwrap());
        assert_ne!(generate_dataset(&cfg, 4).unwrap(), generate_dataset(&cfg, 5).unwrap());
    }

    #[test]
    fn every_instance_has_one_consistent_label_and_the_split_partitions() {
        let ds = generate_dataset(&GeneratorConfig::small(150), 3).unwrap();
        ds.validate().unwrap();
        let train = ds.indices(Split::Train).len();
        let val = ds.indices(Split::Val).len();
        assert_eq!(train + val, 150);
        for (task, ids) in Task::ALL.iter().zip(ds.indices_by_task(Split::Val)) {
            assert!(!ids.is_empty(), "{task:?}");
        }
        for inst in &ds.instances {
            if let Label::Va(va) = inst.label {
                assert!(va.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn ood_shift_moves_the_sample_mean() {
        let cfg = GeneratorConfig::small(600);
        let gen = SyntheticGenerator::new(&cfg, 11).unwrap();
        let ood = gen.generate_ood();
        let ind = gen.generate().unwrap();
        let a = ood.mean();
        let b = ind.split_features(Split::Train).mean();
        let dist = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(dist >= 5.0, "{dist}");
    }

    #[test]
    fn zero_shift_reproduces_the_in_domain_distribution() {
        let mut cfg = GeneratorConfig::small(60);
        cfg.ood_shift = 0.0;
        cfg.n_ood = 200;
        let gen = SyntheticGenerator::new(&cfg, 11).unwrap();
        assert_eq!(gen.generate_ood(), gen.sample_in_domain(200));
    }

    #[test]
    fn empty_ood_set_is_allowed() {
        let mut cfg = GeneratorConfig::small(60);
        cfg.n_ood = 0;
        assert!(generate_ood(&cfg, 1).unwrap().is_empty());
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let mut cfg = GeneratorConfig::small(60);
        cfg.mixture_components = 0;
        assert!(matches!(generate_dataset(&cfg, 1), Err(Error::Config(_))));
        let cfg = GeneratorConfig::small(3);
        assert!(generate_dataset(&cfg, 1).is_err());
    }
}
