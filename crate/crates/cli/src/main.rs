use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use heatflow::data::{generate_concentric_circles, generate_spiral, write_csv_dataset};
use heatflow::experiment::{emit_report, run_experiment, summary_markdown, ExperimentConfig};
use heatflow::train::Method;
use heatflow::Error;

const THREADS_ENV: &str = "HEATFLOW_THREADS";
const DEFAULT_OUT: &str = "heatflow-out";

#[derive(Parser)]
#[command(name = "heatflow", version, about = "Heat-kernel Gaussian processes on point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config; flags override the file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads (falls back to the config, then HEATFLOW_THREADS).
        #[arg(long)]
        threads: Option<usize>,
        /// Base seed; repetition i uses seed + i.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        /// Comma-separated method names.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
    /// Write a synthetic dataset as CSV.
    Gen {
        kind: GenKind,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Response noise for the spiral.
        #[arg(long, default_value_t = 0.1)]
        noise_sd: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    Circles,
    Spiral,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, threads, seed, out, repetitions, n, m, methods } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return config_error(e),
            };
            if let Some(t) = threads {
                cfg.threads = Some(t);
            }
            if cfg.threads.is_none() {
                if let Ok(v) = std::env::var(THREADS_ENV) {
                    match v.trim().parse() {
                        Ok(t) => cfg.threads = Some(t),
                        Err(_) => return config_error(format!("{THREADS_ENV}={v:?} is not a thread count")),
                    }
                }
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out = Some(o);
            }
            if let Some(r) = repetitions {
                cfg.repetitions = r;
            }
            if let Some(n) = n {
                cfg.n = n;
            }
            if let Some(m) = m {
                cfg.m = m;
            }
            if let Some(names) = methods {
                match names.iter().map(|s| s.trim().parse::<Method>()).collect() {
                    Ok(list) => cfg.methods = list,
                    Err(e) => return config_error(e),
                }
            }
            if let Err(e) = cfg.validate() {
                return config_error(e);
            }
            run(cfg)
        }
        Command::Gen { kind, n, m, seed, noise_sd, out } => {
            let ds = match kind {
                GenKind::Circles => generate_concentric_circles(n, m, seed),
                GenKind::Spiral => generate_spiral(n, m, noise_sd, seed),
            };
            let written = ds.and_then(|ds| {
                let file = std::fs::File::create(&out)?;
                write_csv_dataset(&ds, std::io::BufWriter::new(file))
            });
            match written {
                Ok(()) => ExitCode::SUCCESS,
                Err(e @ Error::InvalidArgument(_)) => config_error(e),
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
    }
}

fn config_error(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("configuration error: {e}");
    ExitCode::from(1)
}

fn run(cfg: ExperimentConfig) -> ExitCode {
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let records = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let failed = records.iter().filter(|r| !r.succeeded()).count();
    match emit_report(&records, &out) {
        Ok(rows) => {
            print!("{}", summary_markdown(&rows, &records));
            if failed > 0 {
                eprintln!("{failed} of {} runs failed; see {}", records.len(), out.join("runs.csv").display());
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(Error::NoSuccessfulRuns) => {
            eprintln!("every run failed; see {}", out.join("runs.csv").display());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
