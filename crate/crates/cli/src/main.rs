use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use prewarm_sim::config::ExperimentConfig;
use prewarm_sim::experiment::{compare_reports, run_experiment};
use prewarm_sim::trace::{self, LengthDist, RateProfile, SynthParams};

/// Output directory override for `run`.
const OUT_DIR_ENV: &str = "PREWARM_SIM_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "prewarm-sim",
    version,
    about = "Multi-LLM GPU serving simulator with one-for-many prewarming"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its artifacts.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        /// A policy name (warmserve, sllm_gpu, no_prewarm) or `sweep`.
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides the config and the environment.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Synthesize a power-law multi-model trace as JSONL.
    Synth {
        /// Comma-separated model names in popularity order.
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<String>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long)]
        rps: f64,
        /// Trace length in seconds.
        #[arg(long)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative amplitude of a daily sinusoid.
        #[arg(long, default_value_t = 0.0)]
        diurnal_amplitude: f64,
        #[arg(long, default_value_t = 86_400_000)]
        day_ms: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Compare metrics reports; the first is the baseline.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Validate a config and its trace without running.
    Validate {
        #[arg(short, long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            policy,
            seed,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(p) = policy {
                cfg.policy = p;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out_dir = out
                .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
                .or_else(|| cfg.output_dir.clone())
                .context(
                    "no output directory: pass --out, set PREWARM_SIM_OUT_DIR or output_dir",
                )?;
            let runs = run_experiment(&cfg, &config_dir(&config), &out_dir)?;
            let mut violations = 0;
            for r in &runs {
                print!("{}", std::fs::read_to_string(r.dir.join("summary.txt"))?);
                println!("artifacts: {}", r.dir.display());
                violations += r.report.invariant_violations;
                for v in &r.report.violation_samples {
                    eprintln!("invariant violation ({}): {v}", r.policy);
                }
            }
            if violations > 0 {
                eprintln!("{violations} invariant violations logged");
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth {
            models,
            alpha,
            rps,
            duration,
            seed,
            diurnal_amplitude,
            day_ms,
            out,
        } => {
            let params = SynthParams {
                models,
                alpha,
                rps,
                duration_s: duration,
                seed,
                lengths: LengthDist::default(),
                profile: RateProfile {
                    diurnal_amplitude,
                    day_ms,
                    ..RateProfile::default()
                },
            };
            let reqs = trace::synthesize_workload(&params)?;
            trace::write_trace(&out, &reqs)?;
            println!("{} requests, hash {}", reqs.len(), trace::trace_hash(&reqs));
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { reports, json } => {
            let cmp = compare_reports(&reports)?;
            if json {
                println!("{}", cmp.to_json());
            } else {
                print!("{}", cmp.table());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let trace = cfg.validate(&config_dir(&config))?;
            let policies = cfg.policies()?;
            if policies.is_empty() {
                bail!("policy: nothing to run");
            }
            println!(
                "ok: {} models, {} requests, policies {}",
                cfg.models.len(),
                trace.len(),
                policies
                    .iter()
                    .map(|p| p.name())
                    .collect::<Vec<_>>()
                    .join(",")
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
