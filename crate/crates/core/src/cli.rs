//! The `spacte` command line: train, certify, analyze, count, print-defaults.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::certify::{certify_dataset, load_tsv, save_tsv};
use crate::config::{self, DataKind, RunConfig};
use crate::data::{read_cifar10_split, subsample_every, synthetic_blobs, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{
    acr, certified_curve, easy_hard_report, histogram, log_prob_gap_samples, radius_grid, runtime_report,
    write_curve_csv, write_histogram_csv, Timings,
};
use crate::model::{ArchitectureSpec, CostReport, MultiHeadNetwork};
use crate::rng;
use crate::trainer::{train, Checkpoint, TrainState};

#[derive(Debug, Parser)]
#[command(
    name = "spacte",
    version,
    about = "Train and certify multi-head smoothed classifiers"
)]
#[command(after_help = config::keys_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config file; writes checkpoints, train.log and summary.txt to run.output_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Certify the configured test subsample; writes certify.tsv and curve.csv.
    Certify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Worker threads (0: one per core). Results do not depend on it.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// TSV path (default: <output_dir>/certify.tsv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Log-probability gap histogram or easy/hard split from certification records.
    Analyze {
        #[arg(long, value_enum)]
        mode: AnalyzeMode,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Noise draws (default: 10000 for gap-histogram, 10 for easy-hard).
        #[arg(long)]
        draws: Option<usize>,
        /// gap-histogram: example index (default: the first record's).
        #[arg(long)]
        index: Option<usize>,
        /// gap-histogram: number of bins.
        #[arg(long, default_value_t = 50)]
        bins: usize,
        /// easy-hard: radius threshold (default: the median radius of correct records).
        #[arg(long)]
        threshold: Option<f64>,
        /// CSV path (default: <output_dir>/<mode>.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Parameter and FLOP counts of the configured architecture.
    Count {
        #[arg(long, required_unless_present = "resnet110_reference")]
        config: Option<PathBuf>,
        /// Check the built-in ResNet-110 reference counts.
        #[arg(long)]
        resnet110_reference: bool,
    },
    /// Print a config file with every key at its default.
    PrintDefaults,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeMode {
    GapHistogram,
    EasyHard,
}

/// Exit codes: 0 success, 1 failed assertion, 2 configuration error, 3 runtime failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 3,
    }
}

pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Command::Certify {
            config,
            checkpoint,
            workers,
            output,
        } => cmd_certify(&config, &checkpoint, workers, output.as_deref()),
        Command::Analyze {
            mode,
            config,
            records,
            checkpoint,
            draws,
            index,
            bins,
            threshold,
            output,
        } => cmd_analyze(
            &config,
            &records,
            &checkpoint,
            mode,
            draws,
            index,
            bins,
            threshold,
            output.as_deref(),
        ),
        Command::Count {
            config,
            resnet110_reference,
        } => cmd_count(config.as_deref(), resnet110_reference),
        Command::PrintDefaults => {
            print!("{}", config::defaults_text());
            Ok(0)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    RunConfig::from_env(&text)
}

/// Training and test sets named by the config.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.data.kind {
        DataKind::Cifar10 => Ok((
            read_cifar10_split(&cfg.data.path, true)?,
            read_cifar10_split(&cfg.data.path, false)?,
        )),
        DataKind::Blobs => {
            let d = &cfg.data;
            let make = |tag: &str, count: usize| {
                let seed = rng::sub_seed(cfg.seed(), tag, &[]);
                synthetic_blobs(d.blobs_dim, d.blobs_separation, d.blobs_spread, count, seed).map(|b| b.dataset)
            };
            Ok((make("blobs-train", d.blobs_train)?, make("blobs-test", d.blobs_test)?))
        }
    }
}

/// SHA-256 of the network's parameters and statistics.
pub fn state_digest(net: &MultiHeadNetwork) -> String {
    let mut h = Sha256::new();
    for v in net.state_vector() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(config_path: &Path, resume: Option<&Path>) -> Result<i32> {
    let cfg = load_config(config_path)?;
    let (train_set, _) = load_datasets(&cfg)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let state = match resume {
        Some(path) => TrainState::from_checkpoint(&Checkpoint::load(path)?, &cfg.train)?,
        None => TrainState::new(
            MultiHeadNetwork::build(&cfg.spec, cfg.input_norm(), cfg.seed())?,
            &cfg.train,
        ),
    };
    write_file(&out.join("config.txt"), &cfg.render())?;
    let heads = cfg.spec.num_heads;
    let mut log = String::from("epoch\tlambda\tlr");
    for k in 1..=heads {
        write!(log, "\tloss_head{k}").unwrap();
    }
    log.push_str("\tcosine\n");
    let (state, report) = train(&cfg.train, &train_set, state, Some(out), |e| {
        log.push_str(&e.line());
        log.push('\n');
        eprintln!("{}", e.line());
    })?;
    write_file(&out.join("train.log"), &log)?;
    let mut summary = String::new();
    writeln!(summary, "epochs\t{}", state.epoch).unwrap();
    writeln!(summary, "iterations\t{}", report.iterations).unwrap();
    if let Some(l) = report.initial_loss {
        writeln!(summary, "initial_loss\t{l:.6}").unwrap();
    }
    if let Some(l) = report.final_loss() {
        writeln!(summary, "final_loss\t{l:.6}").unwrap();
    }
    writeln!(summary, "state_sha256\t{}", state_digest(&state.network)).unwrap();
    write_file(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(0)
}

fn load_checked(cfg: &RunConfig, checkpoint: &Path) -> Result<MultiHeadNetwork> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.spec != cfg.spec {
        return Err(Error::config(format!(
            "checkpoint architecture `{}` does not match config `{}`",
            ckpt.spec.canonical(),
            cfg.spec.canonical()
        )));
    }
    if ckpt.sigma != cfg.sigma() {
        log::warn!(
            "certifying at sigma {} but the checkpoint was trained at {}",
            cfg.sigma(),
            ckpt.sigma
        );
    }
    ckpt.network()
}

pub fn cmd_certify(config_path: &Path, checkpoint: &Path, workers: usize, output: Option<&Path>) -> Result<i32> {
    let cfg = load_config(config_path)?;
    let net = load_checked(&cfg, checkpoint)?;
    let (_, test) = load_datasets(&cfg)?;
    let subset = subsample_every(&test, cfg.stride)?;
    let workers = if workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        workers
    };
    let records = certify_dataset(&net, &subset, &cfg.certify, workers)?;
    create_dir(&cfg.output_dir)?;
    let tsv = output.map_or_else(|| cfg.output_dir.join("certify.tsv"), Path::to_path_buf);
    save_tsv(&records, &tsv)?;
    let max = records.iter().map(|r| r.radius).fold(0.0, f64::max);
    let curve = certified_curve(&records, &radius_grid(0.25, max.max(1.0)))?;
    write_curve_csv(&curve, cfg.output_dir.join("curve.csv"))?;
    println!("certified {} examples -> {}", records.len(), tsv.display());
    println!("ACR\t{:.4}", acr(&records)?);
    for (r, a) in curve.radii.iter().zip(&curve.accuracy) {
        println!("r={r:.2}\t{a:.4}");
    }
    let timings = Timings {
        certify_seconds: records.iter().map(|r| r.seconds).collect(),
        epoch_seconds: Vec::new(),
    };
    print!("{}", runtime_report(&timings, &CostReport::from_spec(&cfg.spec)?));
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_analyze(
    config_path: &Path,
    records_path: &Path,
    checkpoint: &Path,
    mode: AnalyzeMode,
    draws: Option<usize>,
    index: Option<usize>,
    bins: usize,
    threshold: Option<f64>,
    output: Option<&Path>,
) -> Result<i32> {
    let cfg = load_config(config_path)?;
    let records = load_tsv(records_path)?;
    if records.is_empty() {
        return Err(Error::config(format!("{} has no records", records_path.display())));
    }
    let net = load_checked(&cfg, checkpoint)?;
    let (_, test) = load_datasets(&cfg)?;
    create_dir(&cfg.output_dir)?;
    match mode {
        AnalyzeMode::GapHistogram => {
            let idx = index.unwrap_or(records[0].index);
            if idx >= test.len() {
                return Err(Error::config(format!(
                    "--index {idx} outside the test set of {}",
                    test.len()
                )));
            }
            let draws = draws.unwrap_or(10_000);
            let gaps = log_prob_gap_samples(&net, test.input(idx), test.labels[idx], cfg.sigma(), draws, cfg.seed())?;
            let path = output.map_or_else(|| cfg.output_dir.join("gap-histogram.csv"), Path::to_path_buf);
            write_histogram_csv(&histogram(&gaps, bins), &path)?;
            let wrong = gaps.iter().filter(|g| **g < 0.0).count();
            println!(
                "example {idx}: {draws} draws, {wrong} misclassified -> {}",
                path.display()
            );
        }
        AnalyzeMode::EasyHard => {
            let threshold = threshold.unwrap_or_else(|| median_correct_radius(&records));
            let report = easy_hard_report(
                &net,
                &test,
                &records,
                threshold,
                cfg.sigma(),
                draws.unwrap_or(10),
                cfg.seed(),
            )?;
            let path = output.map_or_else(|| cfg.output_dir.join("easy-hard.csv"), Path::to_path_buf);
            let csv = report.to_csv();
            write_file(&path, &csv)?;
            println!("threshold {threshold:.4}");
            print!("{csv}");
        }
    }
    Ok(0)
}

fn median_correct_radius(records: &[crate::certify::CertificationRecord]) -> f64 {
    let mut radii: Vec<f64> = records.iter().filter(|r| r.correct).map(|r| r.radius).collect();
    if radii.is_empty() {
        return 0.0;
    }
    radii.sort_by(f64::total_cmp);
    radii[radii.len() / 2]
}

/// Reference parameter counts of ResNet-110 with one head, five heads sharing
/// two residual groups, and five independent networks.
pub const RESNET110_REFERENCE: [(&str, u64); 3] = [
    ("single network", 1_730_714),
    ("5 heads, shared stem and two groups", 6_995_138),
    ("5 independent networks", 8_653_570),
];

pub fn resnet110_reference_counts() -> Result<[u64; 3]> {
    let five = CostReport::from_spec(&ArchitectureSpec::resnet110(5))?;
    Ok([
        five.params_total_single,
        five.params_total_multihead,
        five.params_total_k_dnns,
    ])
}

pub fn cmd_count(config_path: Option<&Path>, reference: bool) -> Result<i32> {
    if let Some(path) = config_path {
        let cfg = load_config(path)?;
        print!("{}", CostReport::from_spec(&cfg.spec)?);
    }
    if !reference {
        return Ok(0);
    }
    let got = resnet110_reference_counts()?;
    let mut ok = true;
    for ((name, want), got) in RESNET110_REFERENCE.iter().zip(got) {
        let status = if got == *want { "ok" } else { "MISMATCH" };
        ok &= got == *want;
        println!(
            "{name:<38} {:>12} expected {:>12} {status}",
            crate::model::cost::with_commas(got),
            crate::model::cost::with_commas(*want)
        );
    }
    let five = CostReport::from_spec(&ArchitectureSpec::resnet110(5))?;
    println!(
        "flops multihead / single: {:.3} ({})",
        five.flops_ratio(),
        five.convention
    );
    Ok(if ok { 0 } else { 1 })
}
