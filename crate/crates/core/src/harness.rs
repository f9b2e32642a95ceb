//! Sweeps, model selection, reporting and the exact-theory checks.
//!
//! A sweep holds out each test environment in turn, trains on the rest
//! with randomly sampled hyperparameters, and records every checkpoint's
//! plain validation accuracy, balanced validation accuracy and test
//! accuracy. Selection reads validation columns only; test accuracy is
//! carried along for the report.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balance::{
    balance_batch, balance_validation, build_match_index, extract_representations, train_stage1,
    AcceptanceTable, MatchIndex, MatchOptions, Stage1Config, Stage1Model,
};
use crate::causal::{
    balance, check_assumption1, complete_divergence, domain_bayes_accuracy, joint, random_scm,
    theorem1_reports, x_marginal, HypothesisClass, RandomScmParams, INEQ_TOL,
};
use crate::data::{derive_seed, latent_scm, make_environment, split_train_val, EnvDataset, EnvSpec};
use crate::error::{Error, Result};
use crate::train::{evaluate, train, train_erm, Algorithm, Balancer, EvalSets, TrainerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SelectionMode {
    PlainVal,
    BalancedVal,
}

impl SelectionMode {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMode::PlainVal => "plain_val",
            SelectionMode::BalancedVal => "balanced_val",
        }
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain_val" => Ok(SelectionMode::PlainVal),
            "balanced_val" => Ok(SelectionMode::BalancedVal),
            other => Err(Error::invalid(format!("unknown selection mode `{other}`"))),
        }
    }
}

/// Fixed values that replace the sampled hyperparameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HyperOverrides {
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub hidden_width: Option<usize>,
    pub steps: Option<usize>,
    pub vrex_beta: Option<f64>,
    pub groupdro_eta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypers {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub hidden_width: usize,
    pub steps: usize,
    pub vrex_beta: f64,
    pub groupdro_eta: f64,
}

/// Draws one hyperparameter set. Every value is drawn, overridden or not,
/// so overrides never shift the random stream.
pub fn sample_hypers<R: Rng + ?Sized>(rng: &mut R, overrides: &HyperOverrides) -> Hypers {
    let log_uniform = |rng: &mut R, lo: f64, hi: f64| 10f64.powf(rng.random_range(lo..hi));
    let lr = log_uniform(rng, -4.0, -2.0);
    let wd = log_uniform(rng, -6.0, -2.0);
    let batch = [32, 64, 128][rng.random_range(0..3)];
    let width = [32, 64, 128][rng.random_range(0..3)];
    let beta = log_uniform(rng, -1.0, 2.0);
    let eta = log_uniform(rng, -3.0, -1.0);
    Hypers {
        learning_rate: overrides.learning_rate.unwrap_or(lr),
        weight_decay: overrides.weight_decay.unwrap_or(wd),
        batch_size: overrides.batch_size.unwrap_or(batch),
        hidden_width: overrides.hidden_width.unwrap_or(width),
        steps: overrides.steps.unwrap_or(2000),
        vrex_beta: overrides.vrex_beta.unwrap_or(beta),
        groupdro_eta: overrides.groupdro_eta.unwrap_or(eta),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Named environments. Sample and prototype seeds are re-derived per
    /// sweep seed.
    pub environments: Vec<(String, EnvSpec)>,
    pub algorithms: Vec<Algorithm>,
    pub n_trials: usize,
    pub selection: Vec<SelectionMode>,
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    /// Held-out environments to evaluate; all when `None`.
    pub test_envs: Option<Vec<String>>,
    pub val_fraction: f64,
    pub eval_every: usize,
    pub hidden_layers: usize,
    pub overrides: HyperOverrides,
    pub stage1: Stage1Config,
    /// Train stage 1 once per held-out environment instead of per trial.
    pub share_stage1: bool,
    pub match_options: MatchOptions,
    /// Append every matched partner (acceptance 1 for all classes).
    pub unconditional_acceptance: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            environments: canonical(20000, 0.25),
            algorithms: vec![Algorithm::Erm, Algorithm::Drm],
            n_trials: 8,
            selection: vec![SelectionMode::PlainVal, SelectionMode::BalancedVal],
            seeds: vec![0, 1, 2],
            master_seed: 0,
            test_envs: None,
            val_fraction: 0.2,
            eval_every: 50,
            hidden_layers: 2,
            overrides: HyperOverrides::default(),
            stage1: Stage1Config::default(),
            share_stage1: false,
            match_options: MatchOptions::default(),
            unconditional_acceptance: false,
            out_dir: None,
        }
    }
}

fn canonical(n: usize, label_noise: f64) -> Vec<(String, EnvSpec)> {
    [("+90", 0.9), ("+80", 0.8), ("-90", 0.1)]
        .into_iter()
        .map(|(name, rho)| (name.to_string(), EnvSpec::new(rho, label_noise, n, 0)))
        .collect()
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        msg: format!("bad value `{value}` for `{key}`"),
    })
}

fn parse_list<T: FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|v| parse_value(line, key, v))
        .collect()
}

#[derive(Default)]
struct EnvBlock {
    name: String,
    line: usize,
    rho: Option<f64>,
    label_noise: Option<f64>,
    n: Option<usize>,
}

impl SweepConfig {
    /// Parses `key = value` lines followed by optional `[env NAME]` blocks
    /// (keys `rho`, `label_noise`, `n`). `#` starts a comment. Without env
    /// blocks the three canonical environments are used.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = SweepConfig::default();
        let mut n = 20000usize;
        let mut label_noise = 0.25f64;
        let mut blocks: Vec<EnvBlock> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(header) = content.strip_prefix('[') {
                let inner = header.strip_suffix(']').ok_or_else(|| Error::Config {
                    line,
                    msg: "unterminated section header".into(),
                })?;
                let name = inner
                    .trim()
                    .split_once(char::is_whitespace)
                    .filter(|(kind, _)| *kind == "env")
                    .map(|(_, name)| name.trim())
                    .ok_or_else(|| Error::Config {
                        line,
                        msg: format!("expected `[env NAME]`, got `[{inner}]`"),
                    })?;
                if blocks.iter().any(|b| b.name == name) {
                    return Err(Error::Config {
                        line,
                        msg: format!("duplicate environment `{name}`"),
                    });
                }
                blocks.push(EnvBlock {
                    name: name.to_string(),
                    line,
                    ..EnvBlock::default()
                });
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(block) = blocks.last_mut() {
                match key {
                    "rho" => block.rho = Some(parse_value(line, key, value)?),
                    "label_noise" => block.label_noise = Some(parse_value(line, key, value)?),
                    "n" => block.n = Some(parse_value(line, key, value)?),
                    _ => {
                        return Err(Error::Config {
                            line,
                            msg: format!("unknown environment key `{key}`"),
                        })
                    }
                }
                continue;
            }
            let o = &mut cfg.overrides;
            match key {
                "master_seed" | "seed" => cfg.master_seed = parse_value(line, key, value)?,
                "seeds" => cfg.seeds = parse_list(line, key, value)?,
                "algorithms" => cfg.algorithms = parse_list(line, key, value)?,
                "n_trials" => cfg.n_trials = parse_value(line, key, value)?,
                "selection" => cfg.selection = parse_list(line, key, value)?,
                "test_envs" => cfg.test_envs = Some(parse_list(line, key, value)?),
                "n" => n = parse_value(line, key, value)?,
                "label_noise" => label_noise = parse_value(line, key, value)?,
                "val_fraction" => cfg.val_fraction = parse_value(line, key, value)?,
                "eval_every" => cfg.eval_every = parse_value(line, key, value)?,
                "hidden_layers" => cfg.hidden_layers = parse_value(line, key, value)?,
                "lr" => o.learning_rate = Some(parse_value(line, key, value)?),
                "weight_decay" => o.weight_decay = Some(parse_value(line, key, value)?),
                "batch_size" => o.batch_size = Some(parse_value(line, key, value)?),
                "hidden_width" => o.hidden_width = Some(parse_value(line, key, value)?),
                "steps" => o.steps = Some(parse_value(line, key, value)?),
                "vrex_beta" => o.vrex_beta = Some(parse_value(line, key, value)?),
                "groupdro_eta" => o.groupdro_eta = Some(parse_value(line, key, value)?),
                "stage1_steps" => cfg.stage1.steps = parse_value(line, key, value)?,
                "stage1_lr" => cfg.stage1.learning_rate = parse_value(line, key, value)?,
                "stage1_z_dim" => cfg.stage1.z_dim = parse_value(line, key, value)?,
                "stage1_hidden" => cfg.stage1.hidden = parse_value(line, key, value)?,
                "share_stage1" => cfg.share_stage1 = parse_value(line, key, value)?,
                "cross_environment" => cfg.match_options.cross_environment = parse_value(line, key, value)?,
                "standardize" => cfg.match_options.standardize = parse_value(line, key, value)?,
                "unconditional_acceptance" => cfg.unconditional_acceptance = parse_value(line, key, value)?,
                "out_dir" => cfg.out_dir = Some(PathBuf::from(value)),
                _ => {
                    return Err(Error::Config {
                        line,
                        msg: format!("unknown key `{key}`"),
                    })
                }
            }
        }
        cfg.environments = if blocks.is_empty() {
            canonical(n, label_noise)
        } else {
            blocks
                .into_iter()
                .map(|b| {
                    let rho = b.rho.ok_or_else(|| Error::Config {
                        line: b.line,
                        msg: format!("environment `{}` has no rho", b.name),
                    })?;
                    let spec = EnvSpec::new(rho, b.label_noise.unwrap_or(label_noise), b.n.unwrap_or(n), 0);
                    Ok((b.name, spec))
                })
                .collect::<Result<_>>()?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.environments.len() < 2 {
            return Err(Error::invalid("a sweep needs at least two environments"));
        }
        for (_, spec) in &self.environments {
            spec.validate()?;
        }
        if self.n_trials == 0 || self.algorithms.is_empty() || self.seeds.is_empty() || self.selection.is_empty() {
            return Err(Error::invalid("n_trials, algorithms, seeds and selection must be non-empty"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid("val_fraction must lie in (0, 1)"));
        }
        if let Some(tests) = &self.test_envs {
            for t in tests {
                if !self.environments.iter().any(|(n, _)| n == t) {
                    return Err(Error::invalid(format!("unknown test environment `{t}`")));
                }
            }
        }
        Ok(())
    }

    /// Environment specs for one sweep seed: shared prototypes, one sample
    /// stream per environment.
    pub fn environments_for_seed(&self, seed: u64) -> Vec<(String, EnvSpec)> {
        let base = derive_seed(self.master_seed, &[seed]);
        self.environments
            .iter()
            .enumerate()
            .map(|(i, (name, spec))| {
                let mut spec = spec.clone();
                spec.seed = derive_seed(base, &[i as u64]);
                spec.env = i;
                spec.layout.prototype_seed = base;
                (name.clone(), spec)
            })
            .collect()
    }

    pub fn generate(&self, seed: u64) -> Result<Vec<(String, EnvDataset)>> {
        self.environments_for_seed(seed)
            .into_iter()
            .map(|(name, spec)| Ok((name, make_environment(&spec)?)))
            .collect()
    }

    /// Held-out environment indices in configuration order.
    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.environments.len())
            .filter(|&i| match &self.test_envs {
                None => true,
                Some(t) => t.contains(&self.environments[i].0),
            })
            .collect()
    }

    fn needs_stage1(&self) -> bool {
        self.algorithms.contains(&Algorithm::Drm) || self.selection.contains(&SelectionMode::BalancedVal)
    }

    fn trainer_config(&self, algorithm: Algorithm, hypers: &Hypers, seed: u64) -> TrainerConfig {
        TrainerConfig {
            learning_rate: hypers.learning_rate,
            weight_decay: hypers.weight_decay,
            batch_size: hypers.batch_size,
            steps: hypers.steps,
            hidden: vec![hypers.hidden_width; self.hidden_layers],
            vrex_beta: hypers.vrex_beta,
            groupdro_eta: hypers.groupdro_eta,
            eval_every: self.eval_every,
            seed,
            ..TrainerConfig::new(algorithm)
        }
    }
}

/// One checkpoint of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub test_env: String,
    pub trial: usize,
    pub algorithm: String,
    pub step: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub hidden_width: usize,
    pub vrex_beta: f64,
    pub groupdro_eta: f64,
    pub stage1_val_acc: Option<f64>,
    pub train_loss: f64,
    pub val_acc: f64,
    pub balanced_val_acc: Option<f64>,
    pub test_acc: f64,
}

impl TrialRecord {
    pub fn validation(&self, mode: SelectionMode) -> Option<f64> {
        match mode {
            SelectionMode::PlainVal => Some(self.val_acc),
            SelectionMode::BalancedVal => self.balanced_val_acc,
        }
    }
}

/// Training/validation split and everything derived from stage 1 for one
/// held-out environment.
pub struct Fold {
    pub test_name: String,
    pub train: EnvDataset,
    pub val: EnvDataset,
    pub test: EnvDataset,
}

/// Splits every non-test environment into train/validation parts.
pub fn make_fold(
    envs: &[(String, EnvDataset)],
    test: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<Fold> {
    let mut trains = Vec::new();
    let mut vals = Vec::new();
    for (i, (_, data)) in envs.iter().enumerate().filter(|(i, _)| *i != test) {
        let (tr, va) = split_train_val(data, 1.0 - val_fraction, derive_seed(seed, &[i as u64]))?;
        trains.push(tr);
        vals.push(va);
    }
    Ok(Fold {
        test_name: envs[test].0.clone(),
        train: EnvDataset::concat(&trains.iter().collect::<Vec<_>>())?,
        val: EnvDataset::concat(&vals.iter().collect::<Vec<_>>())?,
        test: envs[test].1.clone(),
    })
}

/// Stage-1 products for one trial.
pub struct Stage1Bundle {
    pub model: Stage1Model,
    pub val_acc: f64,
    pub balanced_val: Vec<usize>,
    pub index: Option<(MatchIndex, AcceptanceTable)>,
}

fn stage1_bundle(config: &SweepConfig, fold: &Fold, seed: u64, with_index: bool) -> Result<Stage1Bundle> {
    let (model, val_acc) = train_stage1(&fold.train, &fold.val, &config.stage1, derive_seed(seed, &[0]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let balanced_val = balance_validation(&fold.val, &model, &mut rng)?;
    let index = if with_index {
        let reps = extract_representations(&model, &fold.train)?;
        let mut index = build_match_index(&fold.train, &reps, config.match_options)?;
        let mut table = index.calibrate_acceptance()?;
        if config.unconditional_acceptance {
            table = AcceptanceTable::constant(index.n_classes(), 1.0);
        }
        Some((index, table))
    } else {
        None
    };
    Ok(Stage1Bundle {
        model,
        val_acc,
        balanced_val,
        index,
    })
}

/// Runs the whole sweep and returns one record per checkpoint, in
/// (seed, test environment, trial, algorithm, step) order. `progress`
/// receives a line per finished trial.
pub fn run_sweep(config: &SweepConfig, progress: &mut dyn FnMut(&str)) -> Result<Vec<TrialRecord>> {
    config.validate()?;
    let mut records = Vec::new();
    let with_index = config.algorithms.contains(&Algorithm::Drm);
    for &seed in &config.seeds {
        let envs = config.generate(seed)?;
        for t in config.test_indices() {
            let fold_seed = derive_seed(config.master_seed, &[seed, t as u64]);
            let fold = make_fold(&envs, t, config.val_fraction, fold_seed)?;
            let shared = if config.needs_stage1() && config.share_stage1 {
                Some(stage1_bundle(config, &fold, derive_seed(fold_seed, &[u64::MAX]), with_index)?)
            } else {
                None
            };
            for trial in 0..config.n_trials {
                let trial_seed = derive_seed(fold_seed, &[trial as u64]);
                let hypers = sample_hypers(
                    &mut ChaCha8Rng::seed_from_u64(derive_seed(trial_seed, &[0])),
                    &config.overrides,
                );
                let own = if config.needs_stage1() && shared.is_none() {
                    Some(stage1_bundle(config, &fold, derive_seed(trial_seed, &[1]), with_index)?)
                } else {
                    None
                };
                let bundle = shared.as_ref().or(own.as_ref());
                for &algorithm in &config.algorithms {
                    let tc = config.trainer_config(algorithm, &hypers, derive_seed(trial_seed, &[2]));
                    let eval = EvalSets {
                        val: &fold.val,
                        balanced_val: bundle.map(|b| b.balanced_val.as_slice()),
                        test: Some(&fold.test),
                    };
                    let balancer = bundle
                        .and_then(|b| b.index.as_ref())
                        .map(|(index, acceptance)| Balancer { index, acceptance });
                    let outcome = train(&tc, &fold.train, eval, balancer)?;
                    let best = outcome
                        .checkpoints
                        .iter()
                        .map(|c| c.val_acc)
                        .fold(f64::NEG_INFINITY, f64::max);
                    progress(&format!(
                        "seed {seed} test {} trial {trial} {algorithm}: best val {best:.3}",
                        fold.test_name
                    ));
                    for c in outcome.checkpoints {
                        records.push(TrialRecord {
                            seed,
                            test_env: fold.test_name.clone(),
                            trial,
                            algorithm: algorithm.name().to_string(),
                            step: c.step,
                            lr: hypers.learning_rate,
                            weight_decay: hypers.weight_decay,
                            batch_size: hypers.batch_size,
                            hidden_width: hypers.hidden_width,
                            vrex_beta: hypers.vrex_beta,
                            groupdro_eta: hypers.groupdro_eta,
                            stage1_val_acc: bundle.map(|b| b.val_acc),
                            train_loss: c.train_loss,
                            val_acc: c.val_acc,
                            balanced_val_acc: c.balanced_val_acc,
                            test_acc: c.test_acc.unwrap_or(f64::NAN),
                        });
                    }
                }
            }
        }
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<TrialRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::csv(path, e))
}

/// Index of the record with the highest validation accuracy under `mode`.
/// Ties go to the earliest checkpoint, then to the lowest trial id.
pub fn select_model(records: &[TrialRecord], mode: SelectionMode) -> Option<usize> {
    let mut best: Option<(f64, usize, usize, usize)> = None;
    for (i, r) in records.iter().enumerate() {
        let Some(v) = r.validation(mode) else { continue };
        let better = match best {
            None => true,
            Some((bv, bstep, btrial, _)) => {
                v > bv || (v == bv && (r.step < bstep || (r.step == bstep && r.trial < btrial)))
            }
        };
        if better {
            best = Some((v, r.step, r.trial, i));
        }
    }
    best.map(|b| b.3)
}

/// Table row name for an algorithm under a selection mode.
pub fn row_label(algorithm: &str, mode: SelectionMode) -> String {
    let balanced = mode == SelectionMode::BalancedVal;
    match (algorithm, balanced) {
        ("erm", false) => "ERM".into(),
        ("erm", true) => "ERM+VB".into(),
        ("drm", false) => "ERM+TB".into(),
        ("drm", true) => "DRM".into(),
        ("vrex", b) => if b { "VREx+VB" } else { "VREx" }.into(),
        ("groupdro", b) => if b { "GroupDRO+VB" } else { "GroupDRO" }.into(),
        (other, b) => format!("{other}{}", if b { "+VB" } else { "" }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Cell {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, stderr, n })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub label: String,
    pub cells: Vec<Option<Cell>>,
}

impl ResultRow {
    fn present(&self) -> impl Iterator<Item = f64> + '_ {
        self.cells.iter().flatten().map(|c| c.mean)
    }

    pub fn min(&self) -> Option<f64> {
        self.present().reduce(f64::min)
    }

    pub fn avg(&self) -> Option<f64> {
        let v: Vec<f64> = self.present().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn incomplete(&self) -> bool {
        self.cells.iter().any(Option::is_none)
    }
}

/// Accuracies (fractions) per row and held-out environment.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub envs: Vec<String>,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn row(&self, label: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn cell(&self, label: &str, env: &str) -> Option<Cell> {
        let j = self.envs.iter().position(|e| e == env)?;
        self.row(label)?.cells[j]
    }

    /// Table-style CSV in percent with one decimal; missing cells are `NA`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["algorithm".to_string()];
        header.extend(self.envs.iter().map(|e| format!("env_{e}")));
        header.extend(["min".to_string(), "avg".to_string()]);
        header.extend(self.envs.iter().map(|e| format!("stderr_{e}")));
        header.push("incomplete".into());
        let wrap = |e: csv::Error| Error::csv("<report>", e);
        w.write_record(&header).map_err(wrap)?;
        let pct = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{:.1}", 100.0 * v));
        for row in &self.rows {
            let mut rec = vec![row.label.clone()];
            rec.extend(row.cells.iter().map(|c| pct(c.map(|c| c.mean))));
            rec.push(pct(row.min()));
            rec.push(pct(row.avg()));
            rec.extend(row.cells.iter().map(|c| pct(c.map(|c| c.stderr))));
            rec.push(row.incomplete().to_string());
            w.write_record(&rec).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io("<report>", e))
    }
}

/// Test accuracy of the selected checkpoint for every
/// `(algorithm, mode, seed, test environment)` group.
pub fn selected_test_accuracies(
    records: &[TrialRecord],
    modes: &[SelectionMode],
) -> BTreeMap<(String, SelectionMode, u64, String), f64> {
    let mut groups: BTreeMap<(String, u64, String), Vec<TrialRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.algorithm.clone(), r.seed, r.test_env.clone()))
            .or_default()
            .push(r.clone());
    }
    let mut out = BTreeMap::new();
    for ((alg, seed, env), group) in groups {
        for &mode in modes {
            if let Some(i) = select_model(&group, mode) {
                out.insert((alg.clone(), mode, seed, env.clone()), group[i].test_acc);
            }
        }
    }
    out
}

/// Aggregates selected test accuracies over seeds into a table. Rows are
/// ordered by algorithm then mode; columns follow first appearance of each
/// held-out environment in `records`.
pub fn build_report(records: &[TrialRecord], modes: &[SelectionMode]) -> Result<ResultTable> {
    if records.is_empty() {
        return Err(Error::invalid("no records to report"));
    }
    let mut envs: Vec<String> = Vec::new();
    for r in records {
        if !envs.contains(&r.test_env) {
            envs.push(r.test_env.clone());
        }
    }
    let mut algorithms: Vec<String> = records.iter().map(|r| r.algorithm.clone()).collect();
    algorithms.sort_by_key(|a| {
        (
            a.parse::<Algorithm>().map_or(usize::MAX, |x| Algorithm::ALL.iter().position(|&y| y == x).unwrap()),
            a.clone(),
        )
    });
    algorithms.dedup();
    let selected = selected_test_accuracies(records, modes);
    let mut rows = Vec::new();
    for alg in &algorithms {
        for &mode in modes {
            let cells: Vec<Option<Cell>> = envs
                .iter()
                .map(|env| {
                    let values: Vec<f64> = selected
                        .iter()
                        .filter(|((a, m, _, e), _)| a == alg && *m == mode && e == env)
                        .map(|(_, &v)| v)
                        .collect();
                    Cell::from_values(&values)
                })
                .collect();
            if cells.iter().any(Option::is_some) {
                rows.push(ResultRow {
                    label: row_label(alg, mode),
                    cells,
                });
            }
        }
    }
    Ok(ResultTable { envs, rows })
}

/// Writes `records.csv` and `report.csv` into `dir`.
pub fn write_sweep_outputs(dir: &Path, records: &[TrialRecord], modes: &[SelectionMode]) -> Result<ResultTable> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_records(&dir.join("records.csv"), records)?;
    let table = build_report(records, modes)?;
    let path = dir.join("report.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    table.write_csv(file)?;
    Ok(table)
}

/// Representations as CSV `id,env,y,c,z0,...`.
pub fn write_representations<W: Write>(out: W, data: &EnvDataset, reps: &ndarray::Array2<f64>) -> Result<()> {
    if reps.nrows() != data.len() {
        return Err(Error::Shape {
            expected: data.len(),
            got: reps.nrows(),
        });
    }
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| Error::csv("<representations>", e);
    let mut header: Vec<String> = ["id", "env", "y", "c"].iter().map(|s| s.to_string()).collect();
    header.extend((0..reps.ncols()).map(|k| format!("z{k}")));
    w.write_record(&header).map_err(wrap)?;
    for i in 0..data.len() {
        let mut rec = vec![
            i.to_string(),
            data.envs[i].to_string(),
            data.labels[i].to_string(),
            data.colors[i].to_string(),
        ];
        rec.extend(reps.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io("<representations>", e))
}

/// Pearson correlation; zero when either side is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() || a.len() != b.len() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Balancing diagnostics for one held-out fold.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceStats {
    pub test_env: String,
    pub stage1_val_acc: f64,
    pub domain_bayes: f64,
    pub probe_acc: f64,
    pub label_marginal: Vec<f64>,
    pub matched_frequency: Vec<f64>,
    pub acceptance: Vec<f64>,
    pub n_batches: usize,
    pub batch_size: usize,
    pub mean_tv: f64,
    pub mean_abs_corr_raw: f64,
    pub mean_abs_corr_balanced: f64,
    pub mean_balanced_size: f64,
    /// Matched pairs with equal labels or different environments.
    pub invariant_violations: usize,
    pub balanced_val_agreement: f64,
}

impl BalanceStats {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let wrap = |e: csv::Error| Error::csv("<balance>", e);
        w.write_record(["statistic", "value"]).map_err(wrap)?;
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
        let rows = [
            ("test_env", self.test_env.clone()),
            ("stage1_val_acc", self.stage1_val_acc.to_string()),
            ("domain_bayes", self.domain_bayes.to_string()),
            ("probe_acc", self.probe_acc.to_string()),
            ("label_marginal", join(&self.label_marginal)),
            ("matched_frequency", join(&self.matched_frequency)),
            ("acceptance", join(&self.acceptance)),
            ("n_batches", self.n_batches.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("mean_tv", self.mean_tv.to_string()),
            ("mean_abs_corr_raw", self.mean_abs_corr_raw.to_string()),
            ("mean_abs_corr_balanced", self.mean_abs_corr_balanced.to_string()),
            ("mean_balanced_size", self.mean_balanced_size.to_string()),
            ("invariant_violations", self.invariant_violations.to_string()),
            ("balanced_val_agreement", self.balanced_val_agreement.to_string()),
        ];
        for (k, v) in rows {
            w.write_record([k, v.as_str()]).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io("<balance>", e))
    }
}

/// Accuracy of a logistic-regression probe from representations to
/// `target`, fitted on the training part and scored on the validation part.
pub fn linear_probe(
    train_reps: &ndarray::Array2<f64>,
    train_target: &[usize],
    val_reps: &ndarray::Array2<f64>,
    val_target: &[usize],
    seed: u64,
) -> Result<f64> {
    let wrap = |reps: &ndarray::Array2<f64>, target: &[usize]| EnvDataset {
        features: reps.clone(),
        labels: target.to_vec(),
        envs: vec![0; target.len()],
        digits: vec![0; target.len()],
        colors: vec![0; target.len()],
        n_classes: target.iter().max().map_or(2, |m| m + 1).max(2),
    };
    let tr = wrap(train_reps, train_target);
    let va = wrap(val_reps, val_target);
    let config = TrainerConfig {
        hidden: vec![],
        steps: 1000,
        learning_rate: 1e-2,
        batch_size: 128,
        eval_every: 1000,
        seed,
        ..TrainerConfig::default()
    };
    let out = train_erm(
        &config,
        &tr,
        EvalSets {
            val: &va,
            balanced_val: None,
            test: None,
        },
    )?;
    evaluate(&out.model, &va)
}

/// Trains stage 1 on the first held-out fold of the first seed and
/// measures balanced batches of `batch_size` drawn uniformly from the
/// training split.
pub fn balance_stats(config: &SweepConfig, n_batches: usize, batch_size: usize) -> Result<BalanceStats> {
    config.validate()?;
    if n_batches == 0 || batch_size == 0 {
        return Err(Error::invalid("n_batches and batch_size must be positive"));
    }
    let seed = config.seeds[0];
    let specs = config.environments_for_seed(seed);
    let envs = config.generate(seed)?;
    let t = *config
        .test_indices()
        .first()
        .ok_or_else(|| Error::invalid("no test environment"))?;
    let fold_seed = derive_seed(config.master_seed, &[seed, t as u64]);
    let fold = make_fold(&envs, t, config.val_fraction, fold_seed)?;
    let bundle = stage1_bundle(config, &fold, derive_seed(fold_seed, &[0]), true)?;
    let (index, table) = bundle.index.as_ref().expect("index requested");

    let train_ids: Vec<usize> = (0..specs.len()).filter(|&i| i != t).collect();
    let train_specs: Vec<EnvSpec> = train_ids.iter().map(|&i| specs[i].1.clone()).collect();
    let scm = latent_scm(&train_specs)?;
    let counts: Vec<f64> = train_ids
        .iter()
        .map(|&e| fold.val.envs.iter().filter(|&&v| v == e).count() as f64)
        .collect();
    let total: f64 = counts.iter().sum();
    let mut weights: Vec<f64> = counts.iter().map(|c| c / total).collect();
    // Absorb rounding so the weights sum to one exactly.
    weights[0] += 1.0 - weights.iter().sum::<f64>();
    let domain_bayes = domain_bayes_accuracy(&scm, &(0..train_specs.len()).collect::<Vec<_>>(), &weights)?;

    let train_reps = extract_representations(&bundle.model, &fold.train)?;
    let val_reps = extract_representations(&bundle.model, &fold.val)?;
    let probe_acc = linear_probe(&train_reps, &fold.train.colors, &val_reps, &fold.val.colors, fold_seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(fold_seed, &[3]));
    let p_d = index.label_marginal().to_vec();
    let (mut tv, mut corr_raw, mut corr_bal, mut size) = (0.0, 0.0, 0.0, 0.0);
    let mut violations = 0;
    let col = |ids: &[usize]| -> (Vec<f64>, Vec<f64>) {
        (
            ids.iter().map(|&i| fold.train.colors[i] as f64).collect(),
            ids.iter().map(|&i| fold.train.labels[i] as f64).collect(),
        )
    };
    for _ in 0..n_batches {
        let ids: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..fold.train.len())).collect();
        let out = balance_batch(&ids, index, table, &mut rng)?;
        for &i in &ids {
            let j = index.matched(i)?;
            if fold.train.labels[i] == fold.train.labels[j] || fold.train.envs[i] != fold.train.envs[j] {
                violations += 1;
            }
        }
        let mut hist = vec![0.0; p_d.len()];
        for &i in &out {
            hist[fold.train.labels[i]] += 1.0 / out.len() as f64;
        }
        tv += 0.5 * hist.iter().zip(&p_d).map(|(a, b)| (a - b).abs()).sum::<f64>();
        let (c, y) = col(&ids);
        corr_raw += correlation(&c, &y).abs();
        let (c, y) = col(&out);
        corr_bal += correlation(&c, &y).abs();
        size += out.len() as f64;
    }
    let n = n_batches as f64;
    let agree = bundle
        .balanced_val
        .iter()
        .filter(|&&i| fold.val.colors[i] == fold.val.labels[i])
        .count() as f64
        / bundle.balanced_val.len() as f64;
    Ok(BalanceStats {
        test_env: fold.test_name.clone(),
        stage1_val_acc: bundle.val_acc,
        domain_bayes,
        probe_acc,
        label_marginal: p_d,
        matched_frequency: index.matched_frequency().unwrap_or_default().to_vec(),
        acceptance: table.probs.clone(),
        n_batches,
        batch_size,
        mean_tv: tv / n,
        mean_abs_corr_raw: corr_raw / n,
        mean_abs_corr_balanced: corr_bal / n,
        mean_balanced_size: size / n,
        invariant_violations: violations,
        balanced_val_agreement: agree,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub n_instances: usize,
    pub ny: usize,
    pub nz: usize,
    pub nx: usize,
    pub n_train_envs: usize,
    pub delta: f64,
    pub m: usize,
    pub seed: u64,
    /// Give up after this many candidates per requested instance.
    pub attempts_per_instance: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            n_instances: 1000,
            ny: 2,
            nz: 2,
            nx: 4,
            n_train_envs: 1,
            delta: 0.1,
            m: 10000,
            seed: 0,
            attempts_per_instance: 50,
        }
    }
}

/// One random model: Lemma-1 quantities for the first training environment
/// and the tightest bound report over the hypothesis class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyRow {
    pub seed: u64,
    pub holds_assumption1: bool,
    pub balanced_divergence: f64,
    pub observed_divergence: f64,
    pub lemma1_ok: bool,
    pub hypothesis: Option<usize>,
    pub lhs: Option<f64>,
    pub rhs: Option<f64>,
    pub mean_empirical_balanced_risk: Option<f64>,
    pub vc_term: Option<f64>,
    pub epsilon: Option<f64>,
    pub lambda: Option<f64>,
    pub violated: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySummary {
    pub rows: Vec<VerifyRow>,
    pub instances: usize,
    pub assumption_failures: usize,
    pub lemma1_violations: usize,
    pub bound_violations: usize,
}

impl VerifySummary {
    pub fn violation_rate(&self) -> f64 {
        if self.instances == 0 {
            0.0
        } else {
            self.bound_violations as f64 / self.instances as f64
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::csv("<verify>", e))?;
        }
        w.flush().map_err(|e| Error::io("<verify>", e))
    }
}

/// Draws random models until `n_instances` satisfy the support condition
/// between every training environment and the test environment (the
/// last one). For those, checks that balancing never increases the
/// complete-class divergence to the test marginal and evaluates the bound
/// on a fresh sample for every hypothesis over the full binary class; an
/// instance counts as a bound violation if any hypothesis violates it.
pub fn verify_theory(config: &VerifyConfig) -> Result<VerifySummary> {
    if config.nx > 8 {
        return Err(Error::invalid("nx must be at most 8 for the full binary class"));
    }
    let class = HypothesisClass::all_binary(config.nx)?;
    let params = RandomScmParams {
        ny: config.ny,
        nz: config.nz,
        nx: config.nx,
        n_envs: config.n_train_envs + 1,
    };
    let train_envs: Vec<usize> = (0..config.n_train_envs).collect();
    let test = config.n_train_envs;
    let mut summary = VerifySummary {
        rows: Vec::new(),
        instances: 0,
        assumption_failures: 0,
        lemma1_violations: 0,
        bound_violations: 0,
    };
    let max_attempts = config.n_instances.saturating_mul(config.attempts_per_instance.max(1));
    let mut k = 0u64;
    while summary.instances < config.n_instances && (k as usize) < max_attempts {
        let seed = derive_seed(config.seed, &[k]);
        k += 1;
        let scm = random_scm(params, seed)?;
        let mut holds = true;
        for &s in &train_envs {
            holds &= check_assumption1(&scm, s, test)?.holds;
        }
        let pt = x_marginal(&joint(&scm, test)?);
        let pb = x_marginal(&balance(&scm, 0)?);
        let ps = x_marginal(&joint(&scm, 0)?);
        let bal = complete_divergence(&pb, &pt);
        let obs = complete_divergence(&ps, &pt);
        let lemma1_ok = bal <= obs + INEQ_TOL;
        let mut row = VerifyRow {
            seed,
            holds_assumption1: holds,
            balanced_divergence: bal,
            observed_divergence: obs,
            lemma1_ok,
            hypothesis: None,
            lhs: None,
            rhs: None,
            mean_empirical_balanced_risk: None,
            vc_term: None,
            epsilon: None,
            lambda: None,
            violated: None,
        };
        if !holds {
            summary.assumption_failures += 1;
            summary.rows.push(row);
            continue;
        }
        summary.instances += 1;
        if !lemma1_ok {
            summary.lemma1_violations += 1;
        }
        let reports = theorem1_reports(&class, &scm, &train_envs, test, config.m, config.delta, derive_seed(seed, &[1]))?;
        let worst = reports
            .iter()
            .min_by(|a, b| a.slack().total_cmp(&b.slack()))
            .expect("class is non-empty");
        let violated = reports.iter().any(|r| r.violated);
        if violated {
            summary.bound_violations += 1;
        }
        row.hypothesis = Some(worst.hypothesis);
        row.lhs = Some(worst.lhs);
        row.rhs = Some(worst.rhs);
        row.mean_empirical_balanced_risk = Some(worst.mean_empirical_balanced_risk);
        row.vc_term = Some(worst.vc_term);
        row.epsilon = Some(worst.epsilon);
        row.lambda = Some(worst.lambda);
        row.violated = Some(violated);
        summary.rows.push(row);
    }
    Ok(summary)
}
