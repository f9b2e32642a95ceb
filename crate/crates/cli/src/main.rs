use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use drm_core::data::EnvDataset;
use drm_core::harness::{
    balance_stats, build_report, read_records, run_sweep, verify_theory, write_sweep_outputs, SelectionMode,
    SweepConfig, VerifyConfig,
};
use drm_core::{Error, Result};

#[derive(Parser)]
#[command(name = "drm", version, about = "Direct-effect risk minimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured environments (first seed) as one CSV.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model (first seed, last held-out environment, first
    /// algorithm) and print its checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a leave-one-domain-out sweep; writes records.csv and report.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Rebuild the report from a sweep's records.csv.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the balancing inequality and the risk bound on random models.
    VerifyTheory {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value_t = 10000)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        nx: usize,
        #[arg(long, default_value_t = 1)]
        train_envs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report batch-marginal and decorrelation statistics of balanced batches.
    Balance {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        batches: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn generate(spec: &Path, out: &Path) -> Result<()> {
    let config = SweepConfig::from_file(spec)?;
    let envs = config.generate(config.seeds[0])?;
    let parts: Vec<&EnvDataset> = envs.iter().map(|(_, d)| d).collect();
    let all = EnvDataset::concat(&parts)?;
    let mut w = create(out)?;
    all.write_csv(&mut w).map_err(io_err(out))?;
    w.flush().map_err(io_err(out))?;
    for (name, data) in &envs {
        eprintln!("{name}: {} samples", data.len());
    }
    Ok(())
}

fn train_one(path: &Path) -> Result<()> {
    let config = SweepConfig::from_file(path)?;
    let seed = config.seeds[0];
    let envs = config.generate(seed)?;
    let test = *config.test_indices().last().expect("validated");
    let mut single = config.clone();
    single.seeds = vec![seed];
    single.test_envs = Some(vec![envs[test].0.clone()]);
    single.n_trials = 1;
    single.algorithms.truncate(1);
    // One trial through the sweep machinery keeps seeds identical to a sweep.
    let records = run_sweep(&single, &mut |line| eprintln!("{line}"))?;
    let mut out = io::stdout().lock();
    writeln!(out, "step,train_loss,val_acc,balanced_val_acc,test_acc").map_err(io_err(Path::new("<stdout>")))?;
    for r in &records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.step,
            r.train_loss,
            r.val_acc,
            r.balanced_val_acc.map_or_else(String::new, |v| v.to_string()),
            r.test_acc
        )
        .map_err(io_err(Path::new("<stdout>")))?;
    }
    Ok(())
}

fn sweep(path: &Path, out_dir: Option<PathBuf>) -> Result<()> {
    let config = SweepConfig::from_file(path)?;
    let dir = out_dir
        .or_else(|| config.out_dir.clone())
        .ok_or_else(|| Error::InvalidArgument("no output directory (use --out-dir or out_dir)".into()))?;
    let start = Instant::now();
    let records = run_sweep(&config, &mut |line| eprintln!("[{:>7.1}s] {line}", start.elapsed().as_secs_f64()))?;
    let table = write_sweep_outputs(&dir, &records, &config.selection)?;
    table.write_csv(io::stdout().lock())?;
    eprintln!("{} records in {:.1}s -> {}", records.len(), start.elapsed().as_secs_f64(), dir.display());
    Ok(())
}

fn report(input: &Path, out: &Path) -> Result<()> {
    let path = if input.is_dir() { input.join("records.csv") } else { input.to_path_buf() };
    let records = read_records(&path)?;
    let modes = [SelectionMode::PlainVal, SelectionMode::BalancedVal];
    let table = build_report(&records, &modes)?;
    let w = create(out)?;
    table.write_csv(w)?;
    table.write_csv(io::stdout().lock())
}

#[allow(clippy::too_many_arguments)]
fn verify(n: usize, delta: f64, m: usize, seed: u64, nx: usize, train_envs: usize, out: &Path) -> Result<bool> {
    let config = VerifyConfig {
        n_instances: n,
        delta,
        m,
        seed,
        nx,
        n_train_envs: train_envs,
        ..VerifyConfig::default()
    };
    let summary = verify_theory(&config)?;
    summary.write_csv(create(out)?)?;
    println!("instances,assumption_failures,lemma1_violations,bound_violations,violation_rate");
    println!(
        "{},{},{},{},{}",
        summary.instances,
        summary.assumption_failures,
        summary.lemma1_violations,
        summary.bound_violations,
        summary.violation_rate()
    );
    Ok(summary.instances == n && summary.lemma1_violations == 0 && summary.violation_rate() <= delta)
}

fn balance(path: &Path, batches: usize, batch_size: usize) -> Result<()> {
    let config = SweepConfig::from_file(path)?;
    let stats = balance_stats(&config, batches, batch_size)?;
    stats.write_csv(io::stdout().lock())?;
    if stats.invariant_violations > 0 {
        return Err(Error::InvalidArgument(format!(
            "{} matched pairs broke the opposite-label/same-environment rule",
            stats.invariant_violations
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { spec, out } => generate(&spec, &out),
        Command::Train { config } => train_one(&config),
        Command::Sweep { config, out_dir } => sweep(&config, out_dir),
        Command::Report { input, out } => report(&input, &out),
        Command::VerifyTheory {
            n,
            delta,
            m,
            seed,
            nx,
            train_envs,
            out,
        } => match verify(n, delta, m, seed, nx, train_envs, &out) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("theory check failed");
                return ExitCode::FAILURE;
            }
            Err(e) => Err(e),
        },
        Command::Balance {
            config,
            batches,
            batch_size,
        } => balance(&config, batches, batch_size),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
