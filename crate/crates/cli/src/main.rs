//! `kvsched` — experiment runner for the KV-cache scheduling simulator.
//!
//! Verbs: `run` (experiment matrix from a TOML config), `gen` (emit one
//! instance as JSON), `validate` (check a schedule against an instance),
//! `solve` (hindsight-optimal solve of an instance file).
//!
//! Exit codes: 0 success (budget-exhausted solver rows and livelocked policy
//! rows are still success — partial results are results), 1 runtime failure,
//! 2 invalid input (config, flags, malformed files). Set `KVSCHED_LOG=info`
//! (or `debug`) for progress logging.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use kvsched_cli::config::{ConfigError, ExperimentConfig};
use kvsched_cli::runner;
use kvsched_core::hindsight::{self, SolveOptions};
use kvsched_core::model::{tel, validate_schedule, Instance, Schedule, Validation};
use kvsched_core::workload::{
    self, gen_trace_corpus, load_trace, GenModel, GenSpec, IntRange, NoiseMode, TraceSampling,
};

#[derive(Parser)]
#[command(name = "kvsched", version, about = "KV-cache scheduling experiments")]
struct Cli {
    /// Worker threads for trials (default: all logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment matrix from a TOML config.
    Run {
        /// Path to the experiment config (see docs/config.md).
        #[arg(long)]
        config: PathBuf,
        /// Output directory; wins over the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a single instance and emit it as JSON.
    Gen(GenArgs),
    /// Check a schedule file against an instance file.
    Validate {
        /// Instance JSON (as produced by `kvsched gen`).
        #[arg(long)]
        instance: PathBuf,
        /// Schedule JSON: `{"starts": {"<id>": <round>, ...}}`.
        #[arg(long)]
        schedule: PathBuf,
    },
    /// Solve an instance file to hindsight optimality.
    Solve {
        #[arg(long)]
        instance: PathBuf,
        /// Stop after this many search nodes (deterministic).
        #[arg(long)]
        node_budget: Option<u64>,
        /// Wall-clock budget in seconds (not reproducible across machines).
        #[arg(long)]
        time_budget_s: Option<f64>,
        /// Override the start-round domain cap.
        #[arg(long)]
        start_cap: Option<u64>,
        /// Write the solution JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GenArgs {
    /// Generator model: all_at_once | poisson | adversarial | trace.
    #[arg(long)]
    model: String,
    /// Base RNG seed (instance draw, or trace re-timing).
    #[arg(long)]
    seed: u64,
    /// Memory limit range "lo:hi" or single value (synthetic models), or the
    /// exact limit (adversarial).
    #[arg(long)]
    m: Option<String>,
    /// Prompt-size range "lo:hi" or single value.
    #[arg(long)]
    s: Option<String>,
    /// Output-length range "lo:hi"; default [1, M - s].
    #[arg(long)]
    o: Option<String>,
    /// Request-count range "lo:hi" or single value.
    #[arg(long)]
    n: Option<String>,
    /// Arrival-window range "lo:hi" (poisson only).
    #[arg(long)]
    t: Option<String>,
    /// Arrival-rate range "lo:hi" or single value (poisson only).
    #[arg(long)]
    lambda: Option<String>,
    /// Round the observed algorithm started the long request (adversarial).
    #[arg(long, default_value_t = 0)]
    b: u64,
    /// JSONL trace file (trace model); omit to use the synthetic corpus.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Synthetic-corpus size (trace model without --trace).
    #[arg(long)]
    corpus_n: Option<usize>,
    /// Seed for the synthetic corpus or trace subsampling.
    #[arg(long, default_value_t = 1234)]
    corpus_seed: u64,
    /// Keep only this many trace rows, sampled uniformly.
    #[arg(long)]
    sample_k: Option<usize>,
    /// Memory limit for trace instances.
    #[arg(long)]
    memory: Option<u64>,
    /// Trace arrival rate in requests per second.
    #[arg(long, default_value_t = 50.0)]
    lambda_per_second: f64,
    /// Trace re-timing resolution in rounds per second.
    #[arg(long, default_value_t = 10.0)]
    rounds_per_second: f64,
    /// Prediction-noise level; 0 leaves predictions exact.
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    /// Noise mode: two_sided | overestimate.
    #[arg(long, default_value = "two_sided")]
    noise_mode: String,
    /// Seed for the noise stream; defaults to --seed.
    #[arg(long)]
    noise_seed: Option<u64>,
    /// Write the instance JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KVSCHED_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.is::<ConfigError>() || err.downcast_ref::<workload::WorkloadError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(seed) = seed {
                cfg.seeds = seed;
            }
            let artifacts = runner::run_experiment(&cfg, out.as_deref(), cli.jobs)?;
            println!(
                "wrote {} and {}",
                artifacts.results_csv.display(),
                artifacts.summary_json.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Gen(args) => cmd_gen(args),
        Command::Validate { instance, schedule } => cmd_validate(&instance, &schedule),
        Command::Solve {
            instance,
            node_budget,
            time_budget_s,
            start_cap,
            out,
        } => cmd_solve(&instance, node_budget, time_budget_s, start_cap, out.as_deref()),
    }
}

/// Parse "lo:hi" or a single value into an inclusive integer range.
fn int_range(field: Option<&str>, name: &str, default: IntRange) -> anyhow::Result<IntRange> {
    let Some(text) = field else {
        return Ok(default);
    };
    let (lo, hi) = match text.split_once(':') {
        Some((lo, hi)) => (parse_num(lo, name)?, parse_num(hi, name)?),
        None => {
            let v = parse_num(text, name)?;
            (v, v)
        }
    };
    if lo > hi {
        return Err(ConfigError::new(format!("--{name}: empty range {lo}:{hi}")).into());
    }
    Ok(IntRange::new(lo, hi))
}

fn parse_num(text: &str, name: &str) -> anyhow::Result<u64> {
    text.trim()
        .parse()
        .map_err(|e| ConfigError::new(format!("--{name}: {e}")).into())
}

fn float_range(field: Option<&str>, name: &str, default: (f64, f64)) -> anyhow::Result<(f64, f64)> {
    let Some(text) = field else {
        return Ok(default);
    };
    let parse = |part: &str| -> anyhow::Result<f64> {
        part.trim()
            .parse()
            .map_err(|e| ConfigError::new(format!("--{name}: {e}")).into())
    };
    let (lo, hi) = match text.split_once(':') {
        Some((lo, hi)) => (parse(lo)?, parse(hi)?),
        None => {
            let v = parse(text)?;
            (v, v)
        }
    };
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(ConfigError::new(format!("--{name}: invalid range {text}")).into());
    }
    Ok((lo, hi))
}

fn cmd_gen(args: GenArgs) -> anyhow::Result<ExitCode> {
    let instance = match args.model.as_str() {
        "all_at_once" | "poisson" => {
            let defaults = GenSpec::poisson_paper(0);
            let spec = GenSpec {
                model: if args.model == "all_at_once" {
                    GenModel::AllAtOnce
                } else {
                    GenModel::Poisson
                },
                seed: args.seed,
                m_range: int_range(args.m.as_deref(), "m", defaults.m_range)?,
                s_range: int_range(args.s.as_deref(), "s", defaults.s_range)?,
                o_range: match args.o.as_deref() {
                    Some(text) => Some(int_range(Some(text), "o", defaults.s_range)?),
                    None => None,
                },
                n_range: int_range(args.n.as_deref(), "n", defaults.n_range)?,
                t_range: int_range(args.t.as_deref(), "t", defaults.t_range)?,
                lambda_range: float_range(args.lambda.as_deref(), "lambda", defaults.lambda_range)?,
                epsilon: args.epsilon,
            };
            workload::generate(&spec)?
        }
        "adversarial" => {
            let m = args
                .m
                .as_deref()
                .ok_or_else(|| ConfigError::new("--m: required for adversarial"))?;
            let m = parse_num(m, "m")?;
            workload::gen_adversarial(m, args.b)?
        }
        "trace" => {
            let memory = args
                .memory
                .ok_or_else(|| ConfigError::new("--memory: required for trace"))?;
            let records = match &args.trace {
                Some(path) => {
                    let sampling = match args.sample_k {
                        Some(k) => TraceSampling::RandomK {
                            k,
                            seed: args.corpus_seed,
                        },
                        None => TraceSampling::All,
                    };
                    load_trace(path, sampling)?.records
                }
                None => {
                    let n = args.corpus_n.ok_or_else(|| {
                        ConfigError::new("--corpus-n: required for trace without --trace")
                    })?;
                    gen_trace_corpus(n, args.corpus_seed)
                }
            };
            workload::trace_to_instance(
                &records,
                memory,
                args.lambda_per_second,
                args.rounds_per_second,
                args.seed,
            )?
        }
        other => {
            return Err(ConfigError::new(format!(
                "--model: expected all_at_once | poisson | adversarial | trace, got \"{other}\""
            ))
            .into())
        }
    };

    let instance = if args.epsilon > 0.0 {
        let mode = match args.noise_mode.as_str() {
            "two_sided" => NoiseMode::TwoSided,
            "overestimate" => NoiseMode::Overestimate,
            other => {
                return Err(ConfigError::new(format!(
                    "--noise-mode: expected two_sided | overestimate, got \"{other}\""
                ))
                .into())
            }
        };
        workload::apply_prediction_noise(
            &instance,
            args.epsilon,
            mode,
            args.noise_seed.unwrap_or(args.seed),
        )?
    } else {
        instance
    };

    let mut text = serde_json::to_string_pretty(&instance)?;
    text.push('\n');
    match &args.out {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| ConfigError::new(format!("{}: {e}", path.display())).into())
}

fn cmd_validate(instance: &std::path::Path, schedule: &std::path::Path) -> anyhow::Result<ExitCode> {
    let instance: Instance = read_json(instance)?;
    let schedule: Schedule = read_json(schedule)?;
    let validation = validate_schedule(&schedule, &instance);
    let report = match &validation {
        Validation::Ok => serde_json::json!({
            "valid": true,
            "tel": tel(&schedule, &instance)?,
            "makespan": schedule.makespan(&instance),
        }),
        Validation::Violation(v) => serde_json::json!({
            "valid": false,
            "violation": v,
        }),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if validation.is_ok() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_solve(
    instance: &std::path::Path,
    node_budget: Option<u64>,
    time_budget_s: Option<f64>,
    start_cap: Option<u64>,
    out: Option<&std::path::Path>,
) -> anyhow::Result<ExitCode> {
    if node_budget.is_some() && time_budget_s.is_some() {
        return Err(ConfigError::new(
            "--node-budget and --time-budget-s are mutually exclusive",
        )
        .into());
    }
    let instance: Instance = read_json(instance)?;
    let mut options = match node_budget {
        Some(nodes) => SolveOptions::with_node_budget(nodes),
        None => SolveOptions::default(),
    };
    if let Some(secs) = time_budget_s {
        if !secs.is_finite() || secs <= 0.0 {
            return Err(ConfigError::new("--time-budget-s: must be positive").into());
        }
        options.time_budget = std::time::Duration::from_secs_f64(secs);
    }
    options.start_cap = start_cap;
    let solution = hindsight::solve_ip(&instance, options)?;
    let mut text = serde_json::to_string_pretty(&solution)?;
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}
