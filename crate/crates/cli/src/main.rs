//! `forecast`: run experiments, decompose series and compare reports.
//!
//! Exit codes: 0 on success, 2 on configuration or usage errors, 3 when the
//! run itself fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use forecast_core::ewt;
use forecast_core::harness::{self, ExperimentConfig, HarnessError};
use forecast_core::series::{self, ColumnSelector};

#[derive(Parser)]
#[command(name = "forecast", version, about = "Walk-forward EWT + RVFL forecasting")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a JSON config (or rerun a report.json).
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's global seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decompose one CSV column into K empirical wavelet bands.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        bands: usize,
        #[arg(long)]
        out: PathBuf,
        /// Column index or header name.
        #[arg(long, default_value = "0")]
        column: String,
        #[arg(long, default_value_t = ewt::DEFAULT_GAMMA)]
        gamma: f64,
        #[arg(long)]
        no_header: bool,
    },
    /// Wilcoxon and Friedman/Nemenyi comparison of every report.json under a directory.
    Compare {
        #[arg(long)]
        reports: PathBuf,
        /// Write the JSON summary here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

/// Strict config parse; a saved report is accepted and its embedded config
/// reused verbatim.
fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    if value.get("schema_version").is_some() && value.get("config").is_some() {
        let report = harness::read_report(path)?;
        return Ok(report.config);
    }
    let mut cfg =
        ExperimentConfig::from_json(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = Some(std::path::absolute(&o).unwrap_or(o));
    }
    let dir = cfg
        .output_dir
        .clone()
        .ok_or_else(|| Failure::Config("no output_dir in config and no --out given".into()))?;
    cfg.validate()?;
    eprintln!("grid size: {} candidates", cfg.grid_size());
    let report = harness::run_experiment(&cfg)?;
    if !report.failures.is_empty() {
        eprintln!("{} candidate(s) failed:", report.failures.len());
        for f in &report.failures {
            eprintln!("  {} -> {}", f.candidate, f.error);
        }
    }
    harness::write_report(&report, &dir)?;
    let p = report.primary_result();
    eprintln!(
        "{}: test rmse {:.6} (validation {:.6}); wrote {}",
        p.name,
        p.test.rmse,
        p.validation.rmse,
        dir.display()
    );
    Ok(())
}

fn decompose(input: &Path, bands: usize, out: &Path, column: &str, gamma: f64, no_header: bool) -> Result<(), Failure> {
    let selector = match column.parse::<usize>() {
        Ok(i) => ColumnSelector::Index(i),
        Err(_) => ColumnSelector::Name(column.into()),
    };
    let ts = series::load_csv(input, &selector, !no_header).map_err(|e| Failure::Config(e.to_string()))?;
    let dec = ewt::ewt(ts.values(), bands, gamma).map_err(|e| match e {
        ewt::EwtError::ZeroBands | ewt::EwtError::GammaOutOfRange(_) => Failure::Config(e.to_string()),
        _ => Failure::Runtime(e.to_string()),
    })?;
    let file = fs::File::create(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    harness::write_decomposition_csv(ts.values(), &dec.components, file)?;
    if dec.bank.boundaries().fallback {
        eprintln!("note: fewer than {bands} spectral peaks; used uniform bands");
    }
    Ok(())
}

fn compare(dir: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let paths = harness::find_reports(dir).map_err(|e| Failure::Config(e.to_string()))?;
    if paths.is_empty() {
        return Err(Failure::Config(format!("no report.json under {}", dir.display())));
    }
    let reports = paths
        .iter()
        .map(|p| harness::read_report(p))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = harness::compare_reports(&reports)?;
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Failure::Runtime(e.to_string()))?;
    match out {
        Some(p) => fs::write(&p, json + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    let result = match cli.command {
        Command::Run { config, seed, out } => run(&config, seed, out),
        Command::Decompose {
            input,
            bands,
            out,
            column,
            gamma,
            no_header,
        } => decompose(&input, bands, &out, &column, gamma, no_header),
        Command::Compare { reports, out } => compare(&reports, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
