//! Correlation-shift environments in the style of colored digits, rendered
//! as feature vectors.
//!
//! Every sample draws a latent digit `d`, a (possibly flipped) label `y` and
//! a color `c` whose agreement with `y` is the environment's `rho`. The
//! feature vector is a noisy one-hot color block followed by a noisy shape
//! prototype for `d`. The digit and color are stored as diagnostics and are
//! never fed to a learner.

use std::io::Write;

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::causal::ScmSpec;
use crate::error::{Error, Result};

/// Layout and noise levels of the feature vector. Shared by all
/// environments of one experiment so the labeling mechanism is common.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayout {
    pub n_classes: usize,
    pub shape_dims: usize,
    pub color_scale: f64,
    pub color_noise: f64,
    /// Norm of every shape prototype.
    pub shape_scale: f64,
    pub shape_noise: f64,
    /// Seed for the shape prototypes.
    pub prototype_seed: u64,
}

impl Default for FeatureLayout {
    fn default() -> Self {
        Self {
            n_classes: 2,
            shape_dims: 14,
            color_scale: 1.0,
            color_noise: 0.1,
            shape_scale: 3.0,
            shape_noise: 1.0,
            prototype_seed: 0,
        }
    }
}

impl FeatureLayout {
    pub fn color_dims(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.color_dims() + self.shape_dims
    }

    /// One prototype per class: mutually orthogonal directions of norm
    /// `shape_scale`.
    pub fn prototypes(&self) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.prototype_seed);
        let mut protos = Array2::<f64>::zeros((self.n_classes, self.shape_dims));
        for k in 0..self.n_classes {
            loop {
                let mut v: Array1<f64> =
                    (0..self.shape_dims).map(|_| rng.sample(StandardNormal)).collect();
                for j in 0..k {
                    let prev = protos.row(j);
                    let proj = v.dot(&prev);
                    v.scaled_add(-proj, &prev);
                }
                let norm = v.dot(&v).sqrt();
                if norm > 1e-6 {
                    protos.row_mut(k).assign(&(v / norm));
                    break;
                }
            }
        }
        protos * self.shape_scale
    }

    fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.shape_dims < self.n_classes.max(2) {
            return Err(Error::invalid("shape_dims must be at least max(2, n_classes)"));
        }
        for (name, v) in [
            ("color_scale", self.color_scale),
            ("color_noise", self.color_noise),
            ("shape_scale", self.shape_scale),
            ("shape_noise", self.shape_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// One environment: color-label agreement `rho`, label noise, size and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub rho: f64,
    pub label_noise: f64,
    pub n: usize,
    pub seed: u64,
    /// Environment tag written on every sample.
    pub env: usize,
    pub layout: FeatureLayout,
}

impl EnvSpec {
    pub fn new(rho: f64, label_noise: f64, n: usize, seed: u64) -> Self {
        Self {
            rho,
            label_noise,
            n,
            seed,
            env: 0,
            layout: FeatureLayout::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("rho {} not in [0, 1]", self.rho)));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::invalid(format!(
                "label_noise {} not in [0, 1)",
                self.label_noise
            )));
        }
        if self.n == 0 {
            return Err(Error::invalid("n must be at least 1"));
        }
        self.layout.validate()
    }
}

/// The three canonical environments "+90", "+80" and "-90" (percent
/// color-label agreement) with label noise 0.25. Per-environment sample seeds derive from `seed`; the
/// prototypes use `seed` directly.
pub fn canonical_envs(n: usize, seed: u64) -> Vec<(String, EnvSpec)> {
    [("+90", 0.9), ("+80", 0.8), ("-90", 0.1)]
        .into_iter()
        .enumerate()
        .map(|(i, (name, rho))| {
            let mut spec = EnvSpec::new(rho, 0.25, n, derive_seed(seed, &[i as u64]));
            spec.env = i;
            spec.layout.prototype_seed = seed;
            (name.to_string(), spec)
        })
        .collect()
}

/// Mixes a base seed with a path of integers (splitmix64 finalizer).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in path {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Labeled feature vectors with environment tags and hidden diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub envs: Vec<usize>,
    /// Latent digit, diagnostic only.
    pub digits: Vec<usize>,
    /// Color bit, diagnostic only.
    pub colors: Vec<usize>,
    pub n_classes: usize,
}

impl EnvDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Sorted, deduplicated environment tags present in the dataset.
    pub fn env_ids(&self) -> Vec<usize> {
        let mut ids = self.envs.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn subset(&self, ids: &[usize]) -> EnvDataset {
        let mut features = Array2::zeros((ids.len(), self.dim()));
        for (row, &i) in ids.iter().enumerate() {
            features.row_mut(row).assign(&self.features.row(i));
        }
        let pick = |v: &[usize]| ids.iter().map(|&i| v[i]).collect::<Vec<_>>();
        EnvDataset {
            features,
            labels: pick(&self.labels),
            envs: pick(&self.envs),
            digits: pick(&self.digits),
            colors: pick(&self.colors),
            n_classes: self.n_classes,
        }
    }

    /// Concatenates datasets in order.
    pub fn concat(parts: &[&EnvDataset]) -> Result<EnvDataset> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let dim = first.dim();
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let mut features = Array2::zeros((total, dim));
        let mut out = EnvDataset {
            features: Array2::zeros((0, dim)),
            labels: Vec::with_capacity(total),
            envs: Vec::with_capacity(total),
            digits: Vec::with_capacity(total),
            colors: Vec::with_capacity(total),
            n_classes: first.n_classes,
        };
        let mut offset = 0;
        for p in parts {
            if p.dim() != dim {
                return Err(Error::Shape {
                    expected: dim,
                    got: p.dim(),
                });
            }
            features
                .slice_mut(s![offset..offset + p.len(), ..])
                .assign(&p.features);
            offset += p.len();
            out.labels.extend_from_slice(&p.labels);
            out.envs.extend_from_slice(&p.envs);
            out.digits.extend_from_slice(&p.digits);
            out.colors.extend_from_slice(&p.colors);
            out.n_classes = out.n_classes.max(p.n_classes);
        }
        out.features = features;
        Ok(out)
    }

    /// Writes `env,y,d,c,x0,...,x{k-1}` with a header row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "env,y,d,c")?;
        for k in 0..self.dim() {
            write!(out, ",x{k}")?;
        }
        writeln!(out)?;
        for i in 0..self.len() {
            write!(
                out,
                "{},{},{},{}",
                self.envs[i], self.labels[i], self.digits[i], self.colors[i]
            )?;
            for v in self.features.row(i) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Returns `keep` with probability `p`, otherwise a uniformly chosen
/// different class.
fn keep_or_flip<R: Rng>(rng: &mut R, keep: usize, p: f64, n_classes: usize) -> usize {
    if rng.random::<f64>() < p {
        keep
    } else {
        let other = rng.random_range(0..n_classes - 1);
        if other >= keep {
            other + 1
        } else {
            other
        }
    }
}

/// Samples one environment. Deterministic given the spec.
pub fn make_environment(spec: &EnvSpec) -> Result<EnvDataset> {
    spec.validate()?;
    let layout = &spec.layout;
    let k = layout.n_classes;
    let protos = layout.prototypes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut features = Array2::zeros((spec.n, layout.dim()));
    let mut labels = Vec::with_capacity(spec.n);
    let mut digits = Vec::with_capacity(spec.n);
    let mut colors = Vec::with_capacity(spec.n);
    for (i, mut row) in features.outer_iter_mut().enumerate() {
        debug_assert!(i < spec.n);
        let d = rng.random_range(0..k);
        let y = keep_or_flip(&mut rng, d, 1.0 - spec.label_noise, k);
        let c = keep_or_flip(&mut rng, y, spec.rho, k);
        for j in 0..k {
            let on = if j == c { layout.color_scale } else { 0.0 };
            let noise: f64 = rng.sample(StandardNormal);
            row[j] = on + layout.color_noise * noise;
        }
        for j in 0..layout.shape_dims {
            let noise: f64 = rng.sample(StandardNormal);
            row[k + j] = protos[[d, j]] + layout.shape_noise * noise;
        }
        labels.push(y);
        digits.push(d);
        colors.push(c);
    }
    Ok(EnvDataset {
        features,
        labels,
        envs: vec![spec.env; spec.n],
        digits,
        colors,
        n_classes: k,
    })
}

/// Seeded shuffle split into `(train, val)` with `round(ratio * n)` training
/// samples, clamped so both parts are nonempty.
pub fn split_train_val(
    dataset: &EnvDataset,
    ratio: f64,
    seed: u64,
) -> Result<(EnvDataset, EnvDataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} not in (0, 1)")));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(Error::invalid("need at least two samples to split"));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let (train, val) = ids.split_at(n_train);
    Ok((dataset.subset(train), dataset.subset(val)))
}

fn symmetric_channel(keep: f64, k: usize) -> Vec<f64> {
    let off = (1.0 - keep) / (k - 1) as f64;
    let mut rows = vec![off; k * k];
    for i in 0..k {
        rows[i * k + i] = keep;
    }
    rows
}

/// Discrete latent model of the given environments: `Y` uniform,
/// `Z` = color with `P(z = y) = rho`, and `X = (s, z)` encoded as
/// `s * k + z` where the shape `s` equals the digit, so
/// `P(s = y) = 1 - label_noise`. `P(Y)` and `P(X | Y, Z)` are shared.
pub fn latent_scm(specs: &[EnvSpec]) -> Result<ScmSpec> {
    let first = specs.first().ok_or_else(|| Error::invalid("no environments"))?;
    let k = first.layout.n_classes;
    for spec in specs {
        spec.validate()?;
        if spec.layout.n_classes != k || spec.label_noise != first.label_noise {
            return Err(Error::invalid(
                "environments must share class count and label noise",
            ));
        }
    }
    // With d uniform and a symmetric flip, P(d | y) is the same channel.
    let shape_given_y = symmetric_channel(1.0 - first.label_noise, k);
    let mut x_given_yz = vec![0.0; k * k * k * k];
    for y in 0..k {
        for z in 0..k {
            let row = (y * k + z) * (k * k);
            for s in 0..k {
                x_given_yz[row + s * k + z] = shape_given_y[y * k + s];
            }
        }
    }
    let z_given_y = specs
        .iter()
        .map(|spec| symmetric_channel(spec.rho, k))
        .collect();
    ScmSpec::new(
        k,
        k,
        k * k,
        vec![1.0 / k as f64; k],
        z_given_y,
        x_given_yz,
    )
}

/// Single-environment latent model of `spec`.
pub fn latent_joint(spec: &EnvSpec) -> Result<ScmSpec> {
    latent_scm(std::slice::from_ref(spec))
}
