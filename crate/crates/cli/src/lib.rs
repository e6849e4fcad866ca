//! `iwlab`: runs the experiments of the `iw-core` toolkit from config files
//! and checks the expected trends on stored results.
//!
//! Exit codes: 0 success, 1 failed report checks, 2 config or I/O error,
//! 3 numerical failure.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

pub mod config;
mod experiments;
mod output;
pub mod report;
pub mod stats;

pub use experiments::{parse_layer, relative_cov_error, run_experiment, toy_pipeline_config};
pub use output::{csv_string, Outputs};

use config::Config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Numerical(#[from] iw_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn kind(&self) -> String {
        match self {
            CliError::Config(_) => "config".into(),
            CliError::Io { .. } => "io".into(),
            // Variant name of the core error, e.g. `Divergence`.
            CliError::Numerical(e) => {
                let dbg = format!("{e:?}");
                dbg.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Numerical").to_string()
            }
        }
    }
}

#[derive(Parser)]
#[command(name = "iwlab", version, about = "Information-in-weights experiments")]
struct Cli {
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; default `results/<experiment>-seed<seed>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the experiment described by a TOML config or a `manifest.json`.
    Run { config: PathBuf },
    /// Checks the expected trends on a results directory.
    Report { dir: PathBuf },
}

/// Run record. Holds no timestamps or thread counts, so identical inputs
/// give an identical file.
#[derive(Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    pub experiment: &'static str,
    pub seed: u64,
    pub config: &'a Config,
    pub files: Vec<String>,
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    kind: String,
    exit_code: i32,
    message: String,
    detail: &'a str,
}

pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(j) = cli.jobs {
        // Fails only if a pool exists already, e.g. in-process tests.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global();
    }
    match cli.command {
        Command::Run { config } => run(&config, cli.seed, cli.out),
        Command::Report { dir } => report_cmd(&dir),
    }
}

fn run(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> i32 {
    let mut cfg = match Config::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("results").join(format!("{}-seed{}", cfg.experiment.name(), cfg.seed)));
    match run_to_dir(&cfg, &dir) {
        Ok(lines) => {
            for l in &lines {
                println!("{l}");
            }
            println!("results in {}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            let rec = ErrorRecord { kind: e.kind(), exit_code: code, message: e.to_string(), detail: &format!("{e:?}") };
            if std::fs::create_dir_all(&dir).is_ok() {
                if let Ok(text) = serde_json::to_string_pretty(&rec) {
                    let _ = std::fs::write(dir.join("error.json"), text + "\n");
                }
            }
            code
        }
    }
}

/// Runs one experiment into `dir` and writes `summary.txt` and `manifest.json`.
pub fn run_to_dir(cfg: &Config, dir: &Path) -> Result<Vec<String>, CliError> {
    let mut out = Outputs::create(dir)?;
    let lines = run_experiment(cfg, &mut out)?;
    out.write("summary.txt", lines.join("\n") + "\n")?;
    let mut files = out.files();
    files.push("manifest.json".into());
    files.sort();
    let manifest = Manifest {
        tool: "iwlab",
        version: env!("CARGO_PKG_VERSION"),
        core_version: iw_core::VERSION,
        experiment: cfg.experiment.name(),
        seed: cfg.seed,
        config: cfg,
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(iw_core::Error::from)?;
    out.write("manifest.json", text + "\n")?;
    Ok(lines)
}

fn report_cmd(dir: &Path) -> i32 {
    match report::evaluate(dir) {
        Ok((exp, checks)) => {
            println!("{} in {}", exp.name(), dir.display());
            for c in &checks {
                println!("{}", c.line());
            }
            let failed = checks.iter().filter(|c| !c.pass).count();
            println!("{} of {} checks passed", checks.len() - failed, checks.len());
            i32::from(failed > 0)
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
