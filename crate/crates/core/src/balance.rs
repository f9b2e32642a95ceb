//! Indirect-effect extraction and balanced batches.
//!
//! Stage 1 trains an extractor `G: x -> z_hat` jointly with a discriminator
//! `D: (z_hat, onehot(y)) -> domain` by minimizing the domain cross-entropy.
//! Since `(Z, Y)` screens the domain label off from everything else, the
//! extractor has to encode the environment-dependent attribute.
//!
//! Stage 2 pairs every sample with its nearest neighbor in `z_hat` among
//! samples of the same environment and a different class, and appends the
//! partner to the batch with a class-dependent acceptance probability that
//! keeps the batch label marginal equal to the training-set marginal.

use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::EnvDataset;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, cross_entropy_rows, MlpGrads, MlpModel, OptimState};

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Config {
    pub z_dim: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            z_dim: 4,
            hidden: 32,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            batch_size: 128,
            steps: 2000,
            eval_every: 100,
        }
    }
}

/// Extractor and discriminator heads learned in stage 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Model {
    pub extractor: MlpModel,
    pub discriminator: MlpModel,
    /// Environment tag of each discriminator output.
    pub domains: Vec<usize>,
    pub n_classes: usize,
}

impl Stage1Model {
    pub fn new(extractor: MlpModel, discriminator: MlpModel, domains: Vec<usize>, n_classes: usize) -> Result<Self> {
        if domains.len() < 2 {
            return Err(Error::invalid("stage 1 needs at least two training environments"));
        }
        if extractor.output_dim() + n_classes != discriminator.input_dim() {
            return Err(Error::Shape {
                expected: extractor.output_dim() + n_classes,
                got: discriminator.input_dim(),
            });
        }
        if discriminator.output_dim() != domains.len() {
            return Err(Error::Shape {
                expected: domains.len(),
                got: discriminator.output_dim(),
            });
        }
        Ok(Self {
            extractor,
            discriminator,
            domains,
            n_classes,
        })
    }

    pub fn z_dim(&self) -> usize {
        self.extractor.output_dim()
    }

    fn discriminator_input(&self, z: ArrayView2<'_, f64>, labels: &[usize]) -> Array2<f64> {
        let k = z.ncols();
        let mut input = Array2::zeros((z.nrows(), k + self.n_classes));
        input.slice_mut(s![.., ..k]).assign(&z);
        for (row, &y) in labels.iter().enumerate() {
            input[[row, k + y]] = 1.0;
        }
        input
    }

    fn domain_targets(&self, envs: &[usize]) -> Result<Vec<usize>> {
        envs.iter()
            .map(|e| {
                self.domains
                    .iter()
                    .position(|d| d == e)
                    .ok_or(Error::UnknownEnvironment(*e))
            })
            .collect()
    }

    /// Fraction of samples whose environment the discriminator predicts.
    pub fn domain_accuracy(&self, data: &EnvDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        let targets = self.domain_targets(&data.envs)?;
        let z = self.extractor.forward_batch(data.features.view())?;
        let logits = self
            .discriminator
            .forward_batch(self.discriminator_input(z.view(), &data.labels).view())?;
        let hits = argmax_rows(logits.view())
            .iter()
            .zip(&targets)
            .filter(|(p, t)| p == t)
            .count();
        Ok(hits as f64 / data.len() as f64)
    }
}

/// Trains stage 1 on `train` and returns the checkpoint with the best
/// domain accuracy on `val` (earliest on ties).
pub fn train_stage1(
    train: &EnvDataset,
    val: &EnvDataset,
    config: &Stage1Config,
    seed: u64,
) -> Result<(Stage1Model, f64)> {
    let domains = train.env_ids();
    if domains.len() < 2 {
        return Err(Error::invalid("stage 1 needs at least two training environments"));
    }
    if let Some(&e) = val.env_ids().iter().find(|e| !domains.contains(e)) {
        return Err(Error::invalid(format!(
            "validation environment {e} is not a training environment"
        )));
    }
    if config.batch_size == 0 || config.steps == 0 || config.eval_every == 0 {
        return Err(Error::invalid("batch_size, steps and eval_every must be positive"));
    }
    let k = train.n_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extractor = MlpModel::init(&[train.dim(), config.hidden, config.z_dim], &mut rng)?;
    let discriminator = MlpModel::init(&[config.z_dim + k, config.hidden, domains.len()], &mut rng)?;
    let mut model = Stage1Model::new(extractor, discriminator, domains, k)?;
    let targets = model.domain_targets(&train.envs)?;

    let mut opt_g = OptimState::adam(config.learning_rate, config.weight_decay);
    let mut opt_d = OptimState::adam(config.learning_rate, config.weight_decay);
    let mut best = (model.clone(), f64::NEG_INFINITY);
    let n = train.len();
    let mut x = Array2::zeros((config.batch_size, train.dim()));
    let mut labels = vec![0; config.batch_size];
    let mut batch_targets = vec![0; config.batch_size];
    for step in 1..=config.steps {
        for row in 0..config.batch_size {
            let i = rng.random_range(0..n);
            x.row_mut(row).assign(&train.features.row(i));
            labels[row] = train.labels[i];
            batch_targets[row] = targets[i];
        }
        let g_cache = model.extractor.forward_cached(x.view())?;
        let d_in = model.discriminator_input(g_cache.logits().view(), &labels);
        let d_cache = model.discriminator.forward_cached(d_in.view())?;
        let (_, mut grad) = cross_entropy_rows(d_cache.logits().view(), &batch_targets)?;
        grad /= config.batch_size as f64;
        let mut d_grads = MlpGrads::zeros_like(&model.discriminator);
        let d_input_grad = model.discriminator.backward_cached(&d_cache, grad.view(), &mut d_grads)?;
        let mut g_grads = MlpGrads::zeros_like(&model.extractor);
        model.extractor.backward_cached(
            &g_cache,
            d_input_grad.slice(s![.., ..config.z_dim]),
            &mut g_grads,
        )?;
        opt_d.step(&mut model.discriminator, &d_grads)?;
        opt_g.step(&mut model.extractor, &g_grads)?;

        if step % config.eval_every == 0 || step == config.steps {
            let acc = model.domain_accuracy(val)?;
            if acc > best.1 {
                best = (model.clone(), acc);
            }
        }
    }
    Ok(best)
}

/// Representation `G(x)` of every sample, one row per sample.
pub fn extract_representations(model: &Stage1Model, data: &EnvDataset) -> Result<Array2<f64>> {
    model.extractor.forward_batch(data.features.view())
}

/// Options for [`build_match_index`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchOptions {
    /// Allow partners from other environments.
    pub cross_environment: bool,
    /// Standardize each representation dimension before matching.
    pub standardize: bool,
}

#[derive(Debug, Clone)]
struct Pool {
    env: usize,
    class: usize,
    ids: Vec<usize>,
    reps: Array2<f64>,
}

/// Per-class acceptance probabilities for matched partners.
#[derive(Debug, Clone, PartialEq)]
pub struct AcceptanceTable {
    pub probs: Vec<f64>,
}

impl AcceptanceTable {
    pub fn constant(n_classes: usize, p: f64) -> Self {
        Self {
            probs: vec![p.clamp(0.0, 1.0); n_classes],
        }
    }
}

/// Per-`(environment, class)` pools of representations for opposite-label
/// nearest-neighbor lookup.
#[derive(Debug, Clone)]
pub struct MatchIndex {
    pools: Vec<Pool>,
    labels: Vec<usize>,
    envs: Vec<usize>,
    reps: Array2<f64>,
    n_classes: usize,
    label_marginal: Vec<f64>,
    options: MatchOptions,
    matches: Option<Vec<usize>>,
    matched_frequency: Option<Vec<f64>>,
    acceptance: Option<AcceptanceTable>,
}

fn standardize(reps: &Array2<f64>) -> Array2<f64> {
    let mut out = reps.clone();
    let n = reps.nrows().max(1) as f64;
    for mut col in out.columns_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        col.mapv_inplace(|v| (v - mean) / sd);
    }
    out
}

/// Builds the pools. Fails when some environment holds a single class.
pub fn build_match_index(
    data: &EnvDataset,
    reps: &Array2<f64>,
    options: MatchOptions,
) -> Result<MatchIndex> {
    if reps.nrows() != data.len() {
        return Err(Error::Shape {
            expected: data.len(),
            got: reps.nrows(),
        });
    }
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let reps = if options.standardize {
        standardize(reps)
    } else {
        reps.clone()
    };
    let mut grouped: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in 0..data.len() {
        grouped.entry((data.envs[i], data.labels[i])).or_default().push(i);
    }
    for env in data.env_ids() {
        let classes: Vec<usize> = grouped.keys().filter(|(e, _)| *e == env).map(|k| k.1).collect();
        if classes.len() < 2 {
            return Err(Error::NoOppositeClass {
                env,
                class: classes[0],
            });
        }
    }
    let pools = grouped
        .into_iter()
        .map(|((env, class), ids)| {
            let mut pool_reps = Array2::zeros((ids.len(), reps.ncols()));
            for (row, &i) in ids.iter().enumerate() {
                pool_reps.row_mut(row).assign(&reps.row(i));
            }
            Pool {
                env,
                class,
                ids,
                reps: pool_reps,
            }
        })
        .collect();
    let n_classes = data.n_classes.max(data.labels.iter().max().map_or(0, |m| m + 1));
    let mut label_marginal = vec![0.0; n_classes];
    for &y in &data.labels {
        label_marginal[y] += 1.0 / data.len() as f64;
    }
    Ok(MatchIndex {
        pools,
        labels: data.labels.clone(),
        envs: data.envs.clone(),
        reps,
        n_classes,
        label_marginal,
        options,
        matches: None,
        matched_frequency: None,
        acceptance: None,
    })
}

fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum()
}

impl MatchIndex {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn label(&self, id: usize) -> usize {
        self.labels[id]
    }

    pub fn env(&self, id: usize) -> usize {
        self.envs[id]
    }

    /// Training-set label marginal `P_D`.
    pub fn label_marginal(&self) -> &[f64] {
        &self.label_marginal
    }

    /// `(environment, class, size)` of every pool.
    pub fn pool_sizes(&self) -> Vec<(usize, usize, usize)> {
        self.pools.iter().map(|p| (p.env, p.class, p.ids.len())).collect()
    }

    pub fn matched_frequency(&self) -> Option<&[f64]> {
        self.matched_frequency.as_deref()
    }

    pub fn acceptance(&self) -> Option<&AcceptanceTable> {
        self.acceptance.as_ref()
    }

    /// Nearest sample (Euclidean, lowest id on ties) with a different class,
    /// restricted to the same environment unless cross-environment matching
    /// is enabled.
    pub fn find_match(&self, id: usize) -> Result<usize> {
        if id >= self.len() {
            return Err(Error::Index {
                index: id,
                len: self.len(),
            });
        }
        let (env, class) = (self.envs[id], self.labels[id]);
        let query = self.reps.row(id);
        let mut best: Option<(f64, usize)> = None;
        for pool in self
            .pools
            .iter()
            .filter(|p| p.class != class && (self.options.cross_environment || p.env == env))
        {
            for (row, &cand) in pool.reps.outer_iter().zip(&pool.ids) {
                let d = squared_distance(query, row);
                let better = match best {
                    None => true,
                    Some((bd, bid)) => d < bd || (d == bd && cand < bid),
                };
                if better {
                    best = Some((d, cand));
                }
            }
        }
        best.map(|(_, j)| j)
            .ok_or(Error::NoOppositeClass { env, class })
    }

    /// Partner of `id`, from the cached pass when calibrated.
    pub fn matched(&self, id: usize) -> Result<usize> {
        match &self.matches {
            Some(m) => m.get(id).copied().ok_or(Error::Index {
                index: id,
                len: m.len(),
            }),
            None => self.find_match(id),
        }
    }

    /// Matches every sample once, records the matched-label frequencies and
    /// derives the acceptance table.
    pub fn calibrate_acceptance(&mut self) -> Result<AcceptanceTable> {
        let matches = (0..self.len())
            .map(|i| self.find_match(i))
            .collect::<Result<Vec<_>>>()?;
        let mut freq = vec![0.0; self.n_classes];
        for &j in &matches {
            freq[self.labels[j]] += 1.0 / matches.len() as f64;
        }
        let table = acceptance_from_frequencies(&self.label_marginal, &freq)?;
        self.matches = Some(matches);
        self.matched_frequency = Some(freq);
        self.acceptance = Some(table.clone());
        Ok(table)
    }
}

/// `a(y) = kappa * P_D(y) / M(y)` with `kappa = min_y M(y) / P_D(y)`, so
/// that accepted partners are distributed as `P_D` and the binding class
/// is always accepted.
pub fn acceptance_from_frequencies(label_marginal: &[f64], matched: &[f64]) -> Result<AcceptanceTable> {
    if label_marginal.len() != matched.len() {
        return Err(Error::Shape {
            expected: label_marginal.len(),
            got: matched.len(),
        });
    }
    if let Some(y) = (0..matched.len()).find(|&y| label_marginal[y] > 0.0 && matched[y] <= 0.0) {
        return Err(Error::Calibration(y));
    }
    let kappa = (0..matched.len())
        .filter(|&y| label_marginal[y] > 0.0)
        .map(|y| matched[y] / label_marginal[y])
        .fold(f64::INFINITY, f64::min);
    let probs = (0..matched.len())
        .map(|y| {
            if matched[y] > 0.0 {
                (kappa * label_marginal[y] / matched[y]).min(1.0)
            } else {
                0.0
            }
        })
        .collect();
    Ok(AcceptanceTable { probs })
}

/// Originals followed by the accepted partners. One uniform draw is made per
/// original, whatever the acceptance table says.
pub fn balance_batch<R: Rng + ?Sized>(
    batch: &[usize],
    index: &MatchIndex,
    acceptance: &AcceptanceTable,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut out = batch.to_vec();
    for &id in batch {
        let partner = index.matched(id)?;
        let u: f64 = rng.random();
        if u < acceptance.probs[index.labels[partner]] {
            out.push(partner);
        }
    }
    Ok(out)
}

/// Balanced validation multiset: every validation id once, plus the
/// accepted partners found by matching within the validation set itself.
pub fn balance_validation<R: Rng + ?Sized>(
    val: &EnvDataset,
    stage1: &Stage1Model,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let reps = extract_representations(stage1, val)?;
    let mut index = build_match_index(val, &reps, MatchOptions::default())?;
    let acceptance = index.calibrate_acceptance()?;
    let all: Vec<usize> = (0..val.len()).collect();
    balance_batch(&all, &index, &acceptance, rng)
}
