//! ERM, DRM, VREx and GroupDRO trainers sharing one loop.
//!
//! Every step draws an environment-stratified batch, optionally appends
//! matched partners (DRM), and minimizes a per-sample weighted
//! cross-entropy whose weights encode the algorithm. Training-domain
//! validation accuracy, optionally on a balanced validation multiset, and
//! held-out test accuracy are recorded at every checkpoint.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::balance::{balance_batch, AcceptanceTable, MatchIndex};
use crate::data::{derive_seed, EnvDataset};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, cross_entropy_rows, MlpGrads, MlpModel, OptimKind, OptimState};

/// Base objective. DRM is ERM with balanced batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    Erm,
    Drm,
    Vrex,
    GroupDro,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Erm, Algorithm::Drm, Algorithm::Vrex, Algorithm::GroupDro];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Erm => "erm",
            Algorithm::Drm => "drm",
            Algorithm::Vrex => "vrex",
            Algorithm::GroupDro => "groupdro",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "erm" => Ok(Algorithm::Erm),
            "drm" => Ok(Algorithm::Drm),
            "vrex" => Ok(Algorithm::Vrex),
            "groupdro" => Ok(Algorithm::GroupDro),
            other => Err(Error::invalid(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Hidden widths; input and output dims come from the data.
    pub hidden: Vec<usize>,
    pub vrex_beta: f64,
    pub groupdro_eta: f64,
    pub optimizer: OptimKind,
    pub eval_every: usize,
    pub seed: u64,
    /// Append matched partners to each batch. On by default for DRM only.
    pub balanced_batches: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self::new(Algorithm::Erm)
    }
}

impl TrainerConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            batch_size: 64,
            steps: 2000,
            hidden: vec![64, 64],
            vrex_beta: 1.0,
            groupdro_eta: 1e-2,
            optimizer: OptimKind::Adam,
            eval_every: 50,
            seed: 0,
            balanced_batches: algorithm == Algorithm::Drm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 || self.eval_every == 0 {
            return Err(Error::invalid("batch_size, steps and eval_every must be positive"));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("vrex_beta", self.vrex_beta),
            ("groupdro_eta", self.groupdro_eta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Batch balancing state handed to the trainer.
#[derive(Debug, Clone, Copy)]
pub struct Balancer<'a> {
    pub index: &'a MatchIndex,
    pub acceptance: &'a AcceptanceTable,
}

/// What the trainer evaluates at each checkpoint.
#[derive(Debug, Clone, Copy)]
pub struct EvalSets<'a> {
    pub val: &'a EnvDataset,
    /// Multiset of ids into `val`.
    pub balanced_val: Option<&'a [usize]>,
    pub test: Option<&'a EnvDataset>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    /// Mean objective over the steps since the previous checkpoint.
    pub train_loss: f64,
    pub val_acc: f64,
    pub balanced_val_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub checkpoints: Vec<Checkpoint>,
    /// Mean appended partners per step (zero without balancing).
    pub mean_appended: f64,
}

/// Population variance of the per-environment risks.
pub fn penalty_vrex(risks: &[f64]) -> f64 {
    if risks.is_empty() {
        return 0.0;
    }
    let n = risks.len() as f64;
    let mean = risks.iter().sum::<f64>() / n;
    risks.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n
}

/// Exponentiated-gradient step on the group weights.
pub fn groupdro_update(weights: &[f64], risks: &[f64], eta: f64) -> Result<Vec<f64>> {
    if weights.len() != risks.len() {
        return Err(Error::Shape {
            expected: weights.len(),
            got: risks.len(),
        });
    }
    let raw: Vec<f64> = weights.iter().zip(risks).map(|(q, r)| q * (eta * r).exp()).collect();
    let total: f64 = raw.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::NonFinite("group weights"));
    }
    Ok(raw.into_iter().map(|q| q / total).collect())
}

/// Per-environment weights `w_e` such that `sum_e w_e R_e` has the same
/// gradient as `mean(R) + beta * var(R)`.
pub fn vrex_env_weights(risks: &[f64], beta: f64) -> Vec<f64> {
    let n = risks.len() as f64;
    let mean = risks.iter().sum::<f64>() / n;
    risks.iter().map(|r| 1.0 / n + 2.0 * beta / n * (r - mean)).collect()
}

pub fn predict(model: &MlpModel, data: &EnvDataset) -> Result<Vec<usize>> {
    Ok(argmax_rows(model.forward_batch(data.features.view())?.view()))
}

/// Classification accuracy.
pub fn evaluate(model: &MlpModel, data: &EnvDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let preds = predict(model, data)?;
    Ok(accuracy(&preds, &data.labels, None))
}

fn accuracy(preds: &[usize], labels: &[usize], ids: Option<&[usize]>) -> f64 {
    match ids {
        None => preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64,
        Some(ids) => ids.iter().filter(|&&i| preds[i] == labels[i]).count() as f64 / ids.len() as f64,
    }
}

/// Samples `batch_size` ids with replacement, split as evenly as possible
/// across environments (earlier environments take the remainder).
fn stratified_batch(by_env: &[Vec<usize>], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = by_env.len();
    let mut out = Vec::with_capacity(batch_size);
    for (e, ids) in by_env.iter().enumerate() {
        let take = batch_size / k + usize::from(e < batch_size % k);
        for _ in 0..take {
            out.push(ids[rng.random_range(0..ids.len())]);
        }
    }
    out
}

/// Trains a classifier on the pooled training environments.
pub fn train(
    config: &TrainerConfig,
    data: &EnvDataset,
    eval: EvalSets<'_>,
    balancer: Option<Balancer<'_>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() || eval.val.is_empty() {
        return Err(Error::invalid("training and validation data must be non-empty"));
    }
    if let Some(ids) = eval.balanced_val {
        if let Some(&bad) = ids.iter().find(|&&i| i >= eval.val.len()) {
            return Err(Error::Index {
                index: bad,
                len: eval.val.len(),
            });
        }
        if ids.is_empty() {
            return Err(Error::invalid("balanced validation multiset is empty"));
        }
    }
    let balancer = if config.balanced_batches {
        let b = balancer.ok_or_else(|| Error::invalid("balanced batches need a match index"))?;
        if b.index.len() != data.len() {
            return Err(Error::Shape {
                expected: data.len(),
                got: b.index.len(),
            });
        }
        Some(b)
    } else {
        None
    };

    let envs = data.env_ids();
    let by_env: Vec<Vec<usize>> = envs
        .iter()
        .map(|&e| (0..data.len()).filter(|&i| data.envs[i] == e).collect())
        .collect();
    let mut dims = vec![data.dim()];
    dims.extend(&config.hidden);
    dims.push(data.n_classes);

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0]));
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[1]));
    let mut balance_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[2]));
    let mut model = MlpModel::init(&dims, &mut init_rng)?;
    let mut opt = OptimState::new(config.optimizer, config.learning_rate, config.weight_decay);
    let mut group_q = vec![1.0 / envs.len() as f64; envs.len()];

    let mut checkpoints = Vec::new();
    let mut loss_acc = 0.0;
    let mut loss_steps = 0usize;
    let mut appended = 0usize;
    for step in 1..=config.steps {
        let mut ids = stratified_batch(&by_env, config.batch_size, &mut batch_rng);
        if let Some(b) = balancer {
            let originals = ids.len();
            ids = balance_batch(&ids, b.index, b.acceptance, &mut balance_rng)?;
            appended += ids.len() - originals;
        }
        let mut x = Array2::zeros((ids.len(), data.dim()));
        let mut targets = Vec::with_capacity(ids.len());
        let mut env_of = Vec::with_capacity(ids.len());
        for (row, &i) in ids.iter().enumerate() {
            x.row_mut(row).assign(&data.features.row(i));
            targets.push(data.labels[i]);
            env_of.push(envs.iter().position(|&e| e == data.envs[i]).unwrap_or(0));
        }
        let cache = model.forward_cached(x.view())?;
        let (losses, mut grad) = cross_entropy_rows(cache.logits().view(), &targets)?;

        let sample_weights: Vec<f64> = match config.algorithm {
            Algorithm::Erm | Algorithm::Drm => vec![1.0 / ids.len() as f64; ids.len()],
            Algorithm::Vrex | Algorithm::GroupDro => {
                let mut sums = vec![0.0; envs.len()];
                let mut counts = vec![0usize; envs.len()];
                for (l, &e) in losses.iter().zip(&env_of) {
                    sums[e] += l;
                    counts[e] += 1;
                }
                let present: Vec<usize> = (0..envs.len()).filter(|&e| counts[e] > 0).collect();
                let risks: Vec<f64> = present.iter().map(|&e| sums[e] / counts[e] as f64).collect();
                let env_w = if config.algorithm == Algorithm::Vrex {
                    vrex_env_weights(&risks, config.vrex_beta)
                } else {
                    let q: Vec<f64> = present.iter().map(|&e| group_q[e]).collect();
                    let updated = groupdro_update(&q, &risks, config.groupdro_eta)?;
                    let mass: f64 = q.iter().sum();
                    for (&e, w) in present.iter().zip(&updated) {
                        group_q[e] = w * mass;
                    }
                    updated
                };
                let mut per_env = vec![0.0; envs.len()];
                for (&e, w) in present.iter().zip(&env_w) {
                    per_env[e] = w / counts[e] as f64;
                }
                env_of.iter().map(|&e| per_env[e]).collect()
            }
        };
        let objective: f64 = match config.algorithm {
            Algorithm::Vrex => {
                let mut sums = vec![0.0; envs.len()];
                let mut counts = vec![0usize; envs.len()];
                for (l, &e) in losses.iter().zip(&env_of) {
                    sums[e] += l;
                    counts[e] += 1;
                }
                let risks: Vec<f64> = (0..envs.len())
                    .filter(|&e| counts[e] > 0)
                    .map(|e| sums[e] / counts[e] as f64)
                    .collect();
                risks.iter().sum::<f64>() / risks.len() as f64 + config.vrex_beta * penalty_vrex(&risks)
            }
            _ => losses.iter().zip(&sample_weights).map(|(l, w)| l * w).sum(),
        };
        for (mut row, w) in grad.rows_mut().into_iter().zip(&sample_weights) {
            row *= *w;
        }
        let mut grads = MlpGrads::zeros_like(&model);
        model.backward_cached(&cache, grad.view(), &mut grads)?;
        opt.step(&mut model, &grads)?;
        loss_acc += objective;
        loss_steps += 1;

        if step % config.eval_every == 0 || step == config.steps {
            let preds = predict(&model, eval.val)?;
            let val_acc = accuracy(&preds, &eval.val.labels, None);
            let balanced_val_acc = eval
                .balanced_val
                .map(|ids| accuracy(&preds, &eval.val.labels, Some(ids)));
            let test_acc = eval.test.map(|t| evaluate(&model, t)).transpose()?;
            checkpoints.push(Checkpoint {
                step,
                train_loss: loss_acc / loss_steps as f64,
                val_acc,
                balanced_val_acc,
                test_acc,
            });
            loss_acc = 0.0;
            loss_steps = 0;
        }
    }
    Ok(TrainOutcome {
        model,
        checkpoints,
        mean_appended: appended as f64 / config.steps as f64,
    })
}

/// ERM on uniformly pooled batches.
pub fn train_erm(config: &TrainerConfig, data: &EnvDataset, eval: EvalSets<'_>) -> Result<TrainOutcome> {
    let config = TrainerConfig {
        algorithm: Algorithm::Erm,
        balanced_batches: false,
        ..config.clone()
    };
    train(&config, data, eval, None)
}

/// ERM on balanced batches.
pub fn train_drm(
    config: &TrainerConfig,
    data: &EnvDataset,
    eval: EvalSets<'_>,
    balancer: Balancer<'_>,
) -> Result<TrainOutcome> {
    let config = TrainerConfig {
        algorithm: Algorithm::Drm,
        balanced_batches: true,
        ..config.clone()
    };
    train(&config, data, eval, Some(balancer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::balance::{build_match_index, MatchOptions};
    use crate::data::{canonical_envs, make_environment};

    fn pooled(n: usize) -> (EnvDataset, EnvDataset) {
        let envs = canonical_envs(n, 3);
        let a = make_environment(&envs[0].1).unwrap();
        let b = make_environment(&envs[1].1).unwrap();
        let t = make_environment(&envs[2].1).unwrap();
        (EnvDataset::concat(&[&a, &b]).unwrap(), t)
    }

    fn small(algorithm: Algorithm) -> TrainerConfig {
        TrainerConfig {
            steps: 60,
            eval_every: 20,
            hidden: vec![16],
            batch_size: 32,
            ..TrainerConfig::new(algorithm)
        }
    }

    #[test]
    fn vrex_penalty_examples() {
        assert!((penalty_vrex(&[0.2, 0.4]) - 0.01).abs() < 1e-12);
        assert_eq!(penalty_vrex(&[0.3, 0.3, 0.3]), 0.0);
        let w = vrex_env_weights(&[0.2, 0.4], 0.0);
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn vrex_weights_match_finite_difference() {
        let risks = [0.3, 0.7, 0.4];
        let beta = 2.5;
        let obj = |r: &[f64]| r.iter().sum::<f64>() / 3.0 + beta * penalty_vrex(r);
        let w = vrex_env_weights(&risks, beta);
        for e in 0..3 {
            let mut up = risks;
            let mut down = risks;
            up[e] += 1e-6;
            down[e] -= 1e-6;
            let fd = (obj(&up) - obj(&down)) / 2e-6;
            assert!((fd - w[e]).abs() < 1e-6, "{e}: {fd} vs {}", w[e]);
        }
    }

    #[test]
    fn groupdro_example() {
        let q = groupdro_update(&[0.5, 0.5], &[0.0, std::f64::consts::LN_2], 1.0).unwrap();
        assert!((q[0] - 1.0 / 3.0).abs() < 1e-12 && (q[1] - 2.0 / 3.0).abs() < 1e-12);
        let same = groupdro_update(&[0.2, 0.8], &[0.4, 0.4], 0.7).unwrap();
        assert!((same[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn evaluate_examples() {
        let (data, _) = pooled(50);
        let zero = MlpModel::zeros(&[data.dim(), 2]).unwrap();
        // All-zero logits predict class 0 everywhere.
        let expected = data.labels.iter().filter(|&&y| y == 0).count() as f64 / data.len() as f64;
        assert_eq!(evaluate(&zero, &data).unwrap(), expected);
        assert!(evaluate(&zero, &data.subset(&[])).is_err());
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("irm".parse::<Algorithm>().is_err());
    }

    #[test]
    fn stratified_batches_split_evenly() {
        let by_env = vec![vec![0, 1], vec![2, 3, 4], vec![5]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = stratified_batch(&by_env, 8, &mut rng);
        assert_eq!(batch.len(), 8);
        assert_eq!(batch.iter().filter(|&&i| i < 2).count(), 3);
        assert_eq!(batch.iter().filter(|&&i| (2..5).contains(&i)).count(), 3);
        assert_eq!(batch.iter().filter(|&&i| i == 5).count(), 2);
    }

    #[test]
    fn zero_acceptance_reproduces_erm_exactly() {
        let (data, test) = pooled(200);
        let index = build_match_index(&data, &data.features, MatchOptions::default()).unwrap();
        let none = AcceptanceTable::constant(2, 0.0);
        let eval = EvalSets {
            val: &data,
            balanced_val: None,
            test: Some(&test),
        };
        let cfg = small(Algorithm::Erm);
        let erm = train_erm(&cfg, &data, eval).unwrap();
        let drm = train_drm(
            &cfg,
            &data,
            eval,
            Balancer {
                index: &index,
                acceptance: &none,
            },
        )
        .unwrap();
        assert_eq!(erm.model, drm.model);
        assert_eq!(erm.checkpoints, drm.checkpoints);
        assert_eq!(drm.mean_appended, 0.0);
    }

    #[test]
    fn full_acceptance_appends_every_partner() {
        let (data, _) = pooled(100);
        let index = build_match_index(&data, &data.features, MatchOptions::default()).unwrap();
        let all = AcceptanceTable::constant(2, 1.0);
        let eval = EvalSets {
            val: &data,
            balanced_val: None,
            test: None,
        };
        let out = train_drm(
            &small(Algorithm::Drm),
            &data,
            eval,
            Balancer {
                index: &index,
                acceptance: &all,
            },
        )
        .unwrap();
        assert_eq!(out.mean_appended, 32.0);
    }

    #[test]
    fn zero_learning_rate_leaves_initialization() {
        let (data, _) = pooled(60);
        let eval = EvalSets {
            val: &data,
            balanced_val: None,
            test: None,
        };
        let cfg = TrainerConfig {
            learning_rate: 0.0,
            ..small(Algorithm::Erm)
        };
        let a = train_erm(&cfg, &data, eval).unwrap();
        let cfg2 = TrainerConfig { steps: 1, ..cfg };
        let b = train_erm(&cfg2, &data, eval).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn every_algorithm_trains_and_records_checkpoints() {
        let (data, test) = pooled(150);
        let index = build_match_index(&data, &data.features, MatchOptions::default()).unwrap();
        let table = AcceptanceTable::constant(2, 0.5);
        let bal: Vec<usize> = (0..data.len()).chain(0..10).collect();
        let eval = EvalSets {
            val: &data,
            balanced_val: Some(&bal),
            test: Some(&test),
        };
        for alg in Algorithm::ALL {
            let out = train(
                &small(alg),
                &data,
                eval,
                Some(Balancer {
                    index: &index,
                    acceptance: &table,
                }),
            )
            .unwrap();
            let steps: Vec<usize> = out.checkpoints.iter().map(|c| c.step).collect();
            assert_eq!(steps, vec![20, 40, 60], "{alg}");
            for c in &out.checkpoints {
                assert!(c.train_loss.is_finite());
                assert!((0.0..=1.0).contains(&c.val_acc));
                assert!(c.balanced_val_acc.is_some() && c.test_acc.is_some());
            }
        }
    }

    #[test]
    fn balanced_batches_require_an_index() {
        let (data, _) = pooled(40);
        let eval = EvalSets {
            val: &data,
            balanced_val: None,
            test: None,
        };
        assert!(train(&small(Algorithm::Drm), &data, eval, None).is_err());
        let bad = TrainerConfig {
            learning_rate: f64::NAN,
            ..small(Algorithm::Erm)
        };
        assert!(train(&bad, &data, eval, None).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let (data, _) = pooled(80);
        let eval = EvalSets {
            val: &data,
            balanced_val: None,
            test: None,
        };
        for alg in [Algorithm::Vrex, Algorithm::GroupDro] {
            let a = train(&small(alg), &data, eval, None).unwrap();
            let b = train(&small(alg), &data, eval, None).unwrap();
            assert_eq!(a.model, b.model);
        }
    }
}
