use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wqtrust::dataio::{synthesize, write_csv};
use wqtrust::harness::{emit, run_partial, seed_stream, EvaluationReport, ExperimentConfig, Format, REPORT_FILE};
use wqtrust::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

/// Trustworthiness benchmarks for multi-task water-quality models.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replaces the master seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, env = "WQTRUST_OUT")]
    out: Option<PathBuf>,
    /// Comma-separated output formats: json, csv.
    #[arg(long, value_delimiter = ',')]
    formats: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured stage and write the report.
    Run(Overrides),
    /// Write the configured synthetic corpus as ingestible CSV files.
    Synth(Overrides),
    /// Parse and check a configuration, then print its hash.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-render the CSV tables of an existing JSON report.
    Report {
        /// A report.json file or the directory holding it.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, env = "WQTRUST_OUT")]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Stage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Stage(other.to_string()),
        }
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(src) = cfg.dataset.ingest.as_mut() {
        if src.path.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            src.path = base.join(&src.path);
        }
    }
    Ok(cfg)
}

fn configure(o: &Overrides) -> Result<ExperimentConfig, Failure> {
    let mut cfg = load(&o.config)?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(j) = o.jobs {
        cfg.jobs = j;
    }
    if let Some(out) = &o.out {
        cfg.out = Some(out.clone());
    }
    if let Some(f) = &o.formats {
        cfg.formats = f
            .iter()
            .map(|s| s.parse::<Format>())
            .collect::<Result<_, _>>()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run(o) => {
            let cfg = configure(&o)?;
            let report = run_partial(&cfg).map_err(|e| Failure::Config(e.to_string()))?;
            let files = emit(&report, cfg.out_dir(), &cfg.formats).map_err(|e| Failure::Stage(e.to_string()))?;
            for f in files {
                println!("{}", f.display());
            }
            if let Some(f) = report.failure {
                return Err(Failure::Stage(format!("stage `{}` failed for job `{}`: {}", f.stage, f.job, f.detail)));
            }
        }
        Command::Synth(o) => {
            let cfg = configure(&o)?;
            let synth = cfg
                .dataset
                .synth
                .as_ref()
                .ok_or_else(|| Failure::Config("the config has no [dataset.synth] section".into()))?;
            let out = synthesize(synth, seed_stream(cfg.seed, &["synth"]))?;
            let dir = cfg.out_dir();
            write_csv(&out.dataset, &dir)?;
            let truth = dir.join("simplicity_truth.json");
            let body = serde_json::to_string_pretty(&out.truth).map_err(Error::from)?;
            std::fs::write(&truth, body).map_err(|e| Failure::Stage(format!("{}: {e}", truth.display())))?;
            println!("{}", dir.display());
        }
        Command::ValidateConfig { config } => {
            let cfg = load(&config)?;
            println!("{}", cfg.hash());
        }
        Command::Report { input, out } => {
            let file = if input.is_dir() { input.join(REPORT_FILE) } else { input.clone() };
            let text =
                std::fs::read_to_string(&file).map_err(|e| Failure::Stage(format!("{}: {e}", file.display())))?;
            let report = EvaluationReport::from_json(&text).map_err(|e| Failure::Stage(e.to_string()))?;
            let dir = out.unwrap_or_else(|| file.parent().unwrap_or(Path::new(".")).to_path_buf());
            for f in emit(&report, dir, &[Format::Csv])? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Stage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}
