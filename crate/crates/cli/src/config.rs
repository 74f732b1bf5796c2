//! The experiment-config TOML dialect.
//!
//! Silent typos in experiment configs are the main reproducibility hazard,
//! so parsing is strict: unknown keys are rejected everywhere, every field
//! that does not apply to the chosen generator model is an error, and all
//! numeric constraints are checked up front. Parse errors carry the
//! line/column from the TOML parser; semantic errors name the offending key.
//!
//! The full schema is documented in `docs/config.md`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use kvsched_core::engine::DurationModel;
use kvsched_core::policy::{PolicyConfig, PolicyKind};
use kvsched_core::workload::{GenModel, GenSpec, IntRange, NoiseMode};

/// Any user-input problem: malformed TOML, bad flag values, contradictory
/// ranges. The CLI maps this to exit code 2.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    pub fn new(message: impl fmt::Display) -> Self {
        ConfigError(message.to_string())
    }
}

/// XORed into the per-trial seed to decorrelate the prediction-noise stream
/// from the instance-generation stream.
pub const NOISE_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// The hindsight solver is exponential; refuse configs that would feed it
/// instances larger than this many requests.
pub const HINDSIGHT_MAX_REQUESTS: u64 = 80;

const DEFAULT_NODE_BUDGET: u64 = 2_000_000;

fn default_schema_version() -> u32 {
    1
}

fn default_beta() -> f64 {
    1.0
}

/// An integer field that accepts either a single value or a `[lo, hi]` pair.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(untagged)]
pub enum NumOrPair {
    One(u64),
    Pair([u64; 2]),
}

impl NumOrPair {
    fn range(self, name: &str) -> Result<IntRange, ConfigError> {
        let (lo, hi) = match self {
            NumOrPair::One(v) => (v, v),
            NumOrPair::Pair([lo, hi]) => (lo, hi),
        };
        if lo > hi {
            return Err(ConfigError::new(format!(
                "generator.{name}: empty range [{lo}, {hi}]"
            )));
        }
        Ok(IntRange::new(lo, hi))
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(untagged)]
pub enum FloatOrPair {
    One(f64),
    Pair([f64; 2]),
}

impl FloatOrPair {
    fn range(self, name: &str) -> Result<(f64, f64), ConfigError> {
        let (lo, hi) = match self {
            FloatOrPair::One(v) => (v, v),
            FloatOrPair::Pair([lo, hi]) => (lo, hi),
        };
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(ConfigError::new(format!(
                "generator.{name}: invalid range [{lo}, {hi}]"
            )));
        }
        Ok((lo, hi))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default = "default_schema_version")]
    schema_version: u32,
    name: String,
    trials: u64,
    #[serde(default)]
    seeds: u64,
    #[serde(default)]
    compute_hindsight: bool,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    emit_memory_timeline: bool,
    #[serde(default)]
    emit_throughput: bool,
    #[serde(default)]
    emit_run_reports: bool,
    generator: RawGenerator,
    #[serde(default)]
    duration: Option<RawDuration>,
    #[serde(default)]
    solver: Option<RawSolver>,
    #[serde(default, rename = "policy")]
    policies: Vec<RawPolicy>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGenerator {
    model: String,
    // all_at_once / poisson
    m: Option<NumOrPair>,
    s: Option<NumOrPair>,
    o: Option<NumOrPair>,
    n: Option<NumOrPair>,
    t: Option<NumOrPair>,
    lambda: Option<FloatOrPair>,
    // adversarial
    m_grid: Option<Vec<u64>>,
    b: Option<u64>,
    // trace_synthetic / trace_file
    corpus_n: Option<u64>,
    corpus_seed: Option<u64>,
    path: Option<PathBuf>,
    sample_k: Option<u64>,
    memory: Option<u64>,
    lambda_per_second: Option<f64>,
    rounds_per_second: Option<f64>,
    // prediction noise (any model)
    #[serde(default)]
    epsilon: f64,
    noise_mode: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDuration {
    kind: String,
    c0: Option<f64>,
    c1: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    node_budget: Option<u64>,
    time_budget_s: Option<f64>,
    start_cap: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    kind: String,
    #[serde(default)]
    alpha: f64,
    #[serde(default = "default_beta")]
    beta: f64,
    #[serde(default)]
    rng_seed: u64,
    label: Option<String>,
}

/// How each trial's instance is built. The per-trial seed is
/// `seeds + trial`, so any row is reproducible from the config and its
/// trial index alone.
#[derive(Debug, Clone)]
pub enum Generator {
    /// `all_at_once` / `poisson`; the spec's `seed` is replaced per trial.
    Synthetic(GenSpec),
    /// `adversarial`: trial `i` uses `m_grid[i]`; `trials` must equal
    /// `m_grid.len()`.
    Adversarial { m_grid: Vec<u64>, b: u64 },
    /// `trace_synthetic`: a fixed log-normal corpus re-timed with a Poisson
    /// process per trial.
    TraceSynthetic {
        corpus_n: usize,
        corpus_seed: u64,
        memory: u64,
        lambda_per_second: f64,
        rounds_per_second: f64,
    },
    /// `trace_file`: a JSONL trace re-timed per trial.
    TraceFile {
        path: PathBuf,
        sample_k: Option<usize>,
        sample_seed: u64,
        memory: u64,
        lambda_per_second: f64,
        rounds_per_second: f64,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct Noise {
    pub epsilon: f64,
    pub mode: NoiseMode,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverSettings {
    pub node_budget: Option<u64>,
    pub time_budget_s: Option<f64>,
    pub start_cap: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct PolicyEntry {
    /// The `policy` column value in results.csv; unique within a config.
    pub label: String,
    pub config: PolicyConfig,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub trials: u64,
    pub seeds: u64,
    pub compute_hindsight: bool,
    pub output_dir: Option<PathBuf>,
    pub emit_memory_timeline: bool,
    pub emit_throughput: bool,
    pub emit_run_reports: bool,
    pub generator: Generator,
    pub noise: Option<Noise>,
    pub duration: DurationModel,
    pub solver: SolverSettings,
    pub policies: Vec<PolicyEntry>,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::new(e.to_string()))?;
        validate(raw)
    }
}

fn validate(raw: RawConfig) -> Result<ExperimentConfig, ConfigError> {
    if raw.schema_version != 1 {
        return Err(ConfigError::new(format!(
            "schema_version: only version 1 is understood, got {}",
            raw.schema_version
        )));
    }
    if raw.trials == 0 {
        return Err(ConfigError::new("trials: must be at least 1"));
    }
    if raw.policies.is_empty() {
        return Err(ConfigError::new(
            "policy: at least one [[policy]] table is required",
        ));
    }

    let noise = validate_noise(&raw.generator)?;
    let generator = validate_generator(&raw.generator, raw.trials)?;
    let duration = validate_duration(raw.duration.as_ref())?;
    let solver = validate_solver(raw.solver.as_ref())?;
    let policies = validate_policies(&raw.policies)?;

    if raw.compute_hindsight {
        let n_max = max_requests(&generator)?;
        if n_max > HINDSIGHT_MAX_REQUESTS {
            return Err(ConfigError::new(format!(
                "compute_hindsight: the generator can emit up to {n_max} requests per \
                 instance; the exact solver is limited to {HINDSIGHT_MAX_REQUESTS}"
            )));
        }
    }

    Ok(ExperimentConfig {
        schema_version: raw.schema_version,
        name: raw.name,
        trials: raw.trials,
        seeds: raw.seeds,
        compute_hindsight: raw.compute_hindsight,
        output_dir: raw.output_dir,
        emit_memory_timeline: raw.emit_memory_timeline,
        emit_throughput: raw.emit_throughput,
        emit_run_reports: raw.emit_run_reports,
        generator,
        noise,
        duration,
        solver,
        policies,
    })
}

/// Largest request count the generator can produce, for the hindsight guard.
fn max_requests(generator: &Generator) -> Result<u64, ConfigError> {
    match generator {
        Generator::Synthetic(spec) => Ok(spec.n_range.hi),
        Generator::Adversarial { m_grid, .. } => {
            Ok(m_grid.iter().copied().max().unwrap_or(0) / 2 + 1)
        }
        Generator::TraceSynthetic { corpus_n, .. } => Ok(*corpus_n as u64),
        Generator::TraceFile { sample_k, .. } => sample_k.map(|k| k as u64).ok_or_else(|| {
            ConfigError::new(
                "compute_hindsight: trace_file needs generator.sample_k to bound the \
                 instance size",
            )
        }),
    }
}

fn validate_noise(raw: &RawGenerator) -> Result<Option<Noise>, ConfigError> {
    let mode = match raw.noise_mode.as_deref() {
        None | Some("two_sided") => NoiseMode::TwoSided,
        Some("overestimate") => NoiseMode::Overestimate,
        Some(other) => {
            return Err(ConfigError::new(format!(
                "generator.noise_mode: expected \"two_sided\" or \"overestimate\", got \"{other}\""
            )))
        }
    };
    if !raw.epsilon.is_finite() || raw.epsilon < 0.0 {
        return Err(ConfigError::new(format!(
            "generator.epsilon: must be a finite non-negative number, got {}",
            raw.epsilon
        )));
    }
    if raw.epsilon == 0.0 {
        if raw.noise_mode.is_some() {
            return Err(ConfigError::new(
                "generator.noise_mode: set generator.epsilon > 0 to enable noise",
            ));
        }
        return Ok(None);
    }
    if mode == NoiseMode::TwoSided && raw.epsilon >= 1.0 {
        return Err(ConfigError::new(format!(
            "generator.epsilon: two-sided noise needs epsilon < 1, got {}",
            raw.epsilon
        )));
    }
    Ok(Some(Noise {
        epsilon: raw.epsilon,
        mode,
    }))
}

/// Reject fields that the chosen model does not read; a silently ignored key
/// is indistinguishable from a typo.
fn reject_foreign_fields(
    raw: &RawGenerator,
    model: &str,
    allowed: &[&str],
) -> Result<(), ConfigError> {
    let allowed: BTreeSet<&str> = allowed.iter().copied().collect();
    let mut offending = Vec::new();
    let mut check = |name: &'static str, set: bool| {
        if set && !allowed.contains(name) {
            offending.push(name);
        }
    };
    check("m", raw.m.is_some());
    check("s", raw.s.is_some());
    check("o", raw.o.is_some());
    check("n", raw.n.is_some());
    check("t", raw.t.is_some());
    check("lambda", raw.lambda.is_some());
    check("m_grid", raw.m_grid.is_some());
    check("b", raw.b.is_some());
    check("corpus_n", raw.corpus_n.is_some());
    check("corpus_seed", raw.corpus_seed.is_some());
    check("path", raw.path.is_some());
    check("sample_k", raw.sample_k.is_some());
    check("memory", raw.memory.is_some());
    check("lambda_per_second", raw.lambda_per_second.is_some());
    check("rounds_per_second", raw.rounds_per_second.is_some());
    if offending.is_empty() {
        Ok(())
    } else {
        Err(ConfigError::new(format!(
            "generator: field(s) {} do not apply to model \"{model}\"",
            offending
                .iter()
                .map(|f| format!("\"{f}\""))
                .collect::<Vec<_>>()
                .join(", ")
        )))
    }
}

fn validate_generator(raw: &RawGenerator, trials: u64) -> Result<Generator, ConfigError> {
    match raw.model.as_str() {
        "all_at_once" | "poisson" => {
            let model = if raw.model == "all_at_once" {
                reject_foreign_fields(raw, &raw.model, &["m", "s", "o", "n"])?;
                GenModel::AllAtOnce
            } else {
                reject_foreign_fields(raw, &raw.model, &["m", "s", "o", "n", "t", "lambda"])?;
                GenModel::Poisson
            };
            // Omitted fields fall back to the published experiment scale.
            let defaults = GenSpec::poisson_paper(0);
            let spec = GenSpec {
                model,
                seed: 0,
                m_range: opt_range(raw.m, "m", defaults.m_range)?,
                s_range: opt_range(raw.s, "s", defaults.s_range)?,
                o_range: raw.o.map(|v| v.range("o")).transpose()?,
                n_range: opt_range(raw.n, "n", defaults.n_range)?,
                t_range: opt_range(raw.t, "t", defaults.t_range)?,
                lambda_range: match raw.lambda {
                    Some(v) => v.range("lambda")?,
                    None => defaults.lambda_range,
                },
                epsilon: raw.epsilon,
            };
            spec.validate()
                .map_err(|e| ConfigError::new(format!("generator: {e}")))?;
            Ok(Generator::Synthetic(spec))
        }
        "adversarial" => {
            reject_foreign_fields(raw, "adversarial", &["m_grid", "b"])?;
            let m_grid = raw
                .m_grid
                .clone()
                .ok_or_else(|| ConfigError::new("generator.m_grid: required for adversarial"))?;
            if m_grid.is_empty() {
                return Err(ConfigError::new("generator.m_grid: must not be empty"));
            }
            for &m in &m_grid {
                let root = (m as f64).sqrt() as u64;
                if m < 4 || root * root != m {
                    return Err(ConfigError::new(format!(
                        "generator.m_grid: every entry must be a perfect square ≥ 4, got {m}"
                    )));
                }
            }
            if trials != m_grid.len() as u64 {
                return Err(ConfigError::new(format!(
                    "trials: adversarial runs one trial per m_grid entry; expected {}, got {}",
                    m_grid.len(),
                    trials
                )));
            }
            Ok(Generator::Adversarial {
                m_grid,
                b: raw.b.unwrap_or(0),
            })
        }
        "trace_synthetic" => {
            reject_foreign_fields(
                raw,
                "trace_synthetic",
                &[
                    "corpus_n",
                    "corpus_seed",
                    "memory",
                    "lambda_per_second",
                    "rounds_per_second",
                ],
            )?;
            Ok(Generator::TraceSynthetic {
                corpus_n: require(raw.corpus_n, "corpus_n")? as usize,
                corpus_seed: raw.corpus_seed.unwrap_or(0),
                memory: require(raw.memory, "memory")?,
                lambda_per_second: require_rate(raw.lambda_per_second, "lambda_per_second")?,
                rounds_per_second: require_rate(raw.rounds_per_second, "rounds_per_second")?,
            })
        }
        "trace_file" => {
            reject_foreign_fields(
                raw,
                "trace_file",
                &[
                    "path",
                    "sample_k",
                    "corpus_seed",
                    "memory",
                    "lambda_per_second",
                    "rounds_per_second",
                ],
            )?;
            Ok(Generator::TraceFile {
                path: raw
                    .path
                    .clone()
                    .ok_or_else(|| ConfigError::new("generator.path: required for trace_file"))?,
                sample_k: raw.sample_k.map(|k| k as usize),
                sample_seed: raw.corpus_seed.unwrap_or(0),
                memory: require(raw.memory, "memory")?,
                lambda_per_second: require_rate(raw.lambda_per_second, "lambda_per_second")?,
                rounds_per_second: require_rate(raw.rounds_per_second, "rounds_per_second")?,
            })
        }
        other => Err(ConfigError::new(format!(
            "generator.model: expected one of \"all_at_once\", \"poisson\", \"adversarial\", \
             \"trace_synthetic\", \"trace_file\"; got \"{other}\""
        ))),
    }
}

fn opt_range(
    field: Option<NumOrPair>,
    name: &str,
    default: IntRange,
) -> Result<IntRange, ConfigError> {
    field.map_or(Ok(default), |v| v.range(name))
}

fn require(field: Option<u64>, name: &str) -> Result<u64, ConfigError> {
    field.ok_or_else(|| ConfigError::new(format!("generator.{name}: required for this model")))
}

fn require_rate(field: Option<f64>, name: &str) -> Result<f64, ConfigError> {
    let v =
        field.ok_or_else(|| ConfigError::new(format!("generator.{name}: required for this model")))?;
    if !v.is_finite() || v <= 0.0 {
        return Err(ConfigError::new(format!(
            "generator.{name}: must be a positive rate, got {v}"
        )));
    }
    Ok(v)
}

fn validate_duration(raw: Option<&RawDuration>) -> Result<DurationModel, ConfigError> {
    let Some(raw) = raw else {
        return Ok(DurationModel::Unit);
    };
    match raw.kind.as_str() {
        "unit" => {
            if raw.c0.is_some() || raw.c1.is_some() {
                return Err(ConfigError::new(
                    "duration: c0/c1 only apply to kind = \"affine\"",
                ));
            }
            Ok(DurationModel::Unit)
        }
        "affine" => {
            let c0 = raw
                .c0
                .ok_or_else(|| ConfigError::new("duration.c0: required for affine"))?;
            let c1 = raw
                .c1
                .ok_or_else(|| ConfigError::new("duration.c1: required for affine"))?;
            DurationModel::affine(c0, c1).map_err(|e| ConfigError::new(format!("duration: {e}")))
        }
        other => Err(ConfigError::new(format!(
            "duration.kind: expected \"unit\" or \"affine\", got \"{other}\""
        ))),
    }
}

fn validate_solver(raw: Option<&RawSolver>) -> Result<SolverSettings, ConfigError> {
    let Some(raw) = raw else {
        return Ok(SolverSettings {
            node_budget: Some(DEFAULT_NODE_BUDGET),
            time_budget_s: None,
            start_cap: None,
        });
    };
    match (raw.node_budget, raw.time_budget_s) {
        (Some(_), Some(_)) => Err(ConfigError::new(
            "solver: node_budget and time_budget_s are mutually exclusive (node budgets keep \
             runs reproducible; wall-clock budgets do not)",
        )),
        (None, Some(t)) if !t.is_finite() || t <= 0.0 => Err(ConfigError::new(format!(
            "solver.time_budget_s: must be positive, got {t}"
        ))),
        (node_budget, time_budget_s) => Ok(SolverSettings {
            node_budget: if time_budget_s.is_some() {
                node_budget
            } else {
                Some(node_budget.unwrap_or(DEFAULT_NODE_BUDGET))
            },
            time_budget_s,
            start_cap: raw.start_cap,
        }),
    }
}

fn validate_policies(raw: &[RawPolicy]) -> Result<Vec<PolicyEntry>, ConfigError> {
    let mut entries = Vec::with_capacity(raw.len());
    let mut seen = BTreeSet::new();
    for (idx, p) in raw.iter().enumerate() {
        let kind = match p.kind.as_str() {
            "mcsf" => PolicyKind::Mcsf,
            "mc_benchmark" => PolicyKind::McBenchmark,
            "alpha_protection" => PolicyKind::AlphaProtection,
            "alpha_beta_clearing" => PolicyKind::AlphaBetaClearing,
            "fcfs" => PolicyKind::Fcfs,
            other => {
                return Err(ConfigError::new(format!(
                    "policy[{idx}].kind: unknown policy \"{other}\""
                )))
            }
        };
        let config = PolicyConfig {
            kind,
            alpha: p.alpha,
            beta: p.beta,
            rng_seed: p.rng_seed,
        };
        config
            .validate()
            .map_err(|e| ConfigError::new(format!("policy[{idx}]: {e}")))?;
        let label = p.label.clone().unwrap_or_else(|| derive_label(&config));
        if !seen.insert(label.clone()) {
            return Err(ConfigError::new(format!(
                "policy[{idx}]: duplicate label \"{label}\"; set an explicit label"
            )));
        }
        entries.push(PolicyEntry { label, config });
    }
    Ok(entries)
}

/// Default `policy` column value: the kind plus any non-default knobs, e.g.
/// `mcsf`, `mcsf[a=0.10]`, `alpha_beta_clearing[a=0.20;b=0.50]`.
fn derive_label(config: &PolicyConfig) -> String {
    let mut label = config.kind.as_str().to_string();
    let alpha = config.alpha != 0.0;
    let beta = config.kind == PolicyKind::AlphaBetaClearing;
    match (alpha, beta) {
        (true, true) => label.push_str(&format!("[a={:.2};b={:.2}]", config.alpha, config.beta)),
        (true, false) => label.push_str(&format!("[a={:.2}]", config.alpha)),
        (false, true) => label.push_str(&format!("[b={:.2}]", config.beta)),
        (false, false) => {}
    }
    label
}

impl SolverSettings {
    pub fn to_options(self) -> kvsched_core::hindsight::SolveOptions {
        let mut options = match self.node_budget {
            Some(nodes) => kvsched_core::hindsight::SolveOptions::with_node_budget(nodes),
            None => kvsched_core::hindsight::SolveOptions::default(),
        };
        if let Some(secs) = self.time_budget_s {
            options.time_budget = std::time::Duration::from_secs_f64(secs);
        }
        options.start_cap = self.start_cap;
        options
    }
}
