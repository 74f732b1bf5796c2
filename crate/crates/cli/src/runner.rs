//! Experiment execution and artifact emission.
//!
//! A cell is one (trial, policy) run. Trials are dispatched to a worker
//! pool; everything inside a trial is a pure function of the config and the
//! trial index, so results.csv is byte-identical across reruns. Artifacts
//! are written by a single writer after the joins.
//!
//! Frozen artifact schemas (see `docs/config.md` for the full contract):
//!
//! * `results.csv` — one row per cell; host wall time is deliberately
//!   excluded (simulated seconds stand in for it) so reruns are
//!   byte-identical.
//! * `summary.json` — per-policy statistics recomputable from results.csv,
//!   plus the host wall time of the whole run.
//! * `memory_timeline.csv` / `throughput.csv` — opt-in per-round series.
//! * `reports/` — opt-in full run reports (JSON) and event logs (JSONL).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use log::{debug, info};
use rayon::prelude::*;
use serde::Serialize;

use kvsched_core::engine::{self, EngineError, RunOptions, RunReport};
use kvsched_core::hindsight::{self, IpSolution};
use kvsched_core::model::Instance;
use kvsched_core::policy::PolicyConfig;
use kvsched_core::workload::{
    self, gen_trace_corpus, load_trace, GenSpec, TraceRecord, TraceSampling,
};

use crate::config::{ExperimentConfig, Generator, NOISE_SEED_SALT};

pub const RESULTS_SCHEMA_VERSION: u32 = 1;

pub const RESULTS_HEADER: [&str; 14] = [
    "trial",
    "policy",
    "seed",
    "n",
    "m",
    "status",
    "tel",
    "avg_latency",
    "opt_tel",
    "opt_certified",
    "ratio",
    "evictions",
    "clearings",
    "sim_seconds",
];

/// One results.csv row. Optional fields serialize as empty cells; they are
/// absent when the run did not terminate or the solver was not enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub trial: u64,
    pub policy: String,
    pub seed: u64,
    pub n: usize,
    pub m: u64,
    pub status: RowStatus,
    pub tel: Option<u64>,
    pub avg_latency: Option<f64>,
    pub opt_tel: Option<u64>,
    pub opt_certified: Option<bool>,
    pub ratio: Option<f64>,
    pub evictions: Option<u64>,
    pub clearings: Option<u64>,
    pub sim_seconds: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowStatus {
    Ok,
    /// The policy thrashed past the livelock horizon; metric cells are empty.
    Livelock,
}

impl RowStatus {
    fn as_str(self) -> &'static str {
        match self {
            RowStatus::Ok => "ok",
            RowStatus::Livelock => "livelock",
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl ResultRow {
    pub fn to_record(&self) -> Vec<String> {
        vec![
            self.trial.to_string(),
            self.policy.clone(),
            self.seed.to_string(),
            self.n.to_string(),
            self.m.to_string(),
            self.status.as_str().to_string(),
            fmt_opt(self.tel),
            fmt_opt(self.avg_latency.map(fmt_f64)),
            fmt_opt(self.opt_tel),
            fmt_opt(self.opt_certified),
            fmt_opt(self.ratio.map(fmt_f64)),
            fmt_opt(self.evictions),
            fmt_opt(self.clearings),
            fmt_opt(self.sim_seconds.map(fmt_f64)),
        ]
    }

    pub fn from_record(record: &csv::StringRecord) -> anyhow::Result<Self> {
        fn opt<T: std::str::FromStr>(field: &str, name: &str) -> anyhow::Result<Option<T>>
        where
            T::Err: std::fmt::Display,
        {
            if field.is_empty() {
                Ok(None)
            } else {
                field
                    .parse::<T>()
                    .map(Some)
                    .map_err(|e| anyhow::anyhow!("column {name}: {e}"))
            }
        }
        if record.len() != RESULTS_HEADER.len() {
            anyhow::bail!(
                "expected {} columns, got {}",
                RESULTS_HEADER.len(),
                record.len()
            );
        }
        let status = match &record[5] {
            "ok" => RowStatus::Ok,
            "livelock" => RowStatus::Livelock,
            other => anyhow::bail!("column status: unknown value {other:?}"),
        };
        Ok(ResultRow {
            trial: record[0].parse()?,
            policy: record[1].to_string(),
            seed: record[2].parse()?,
            n: record[3].parse()?,
            m: record[4].parse()?,
            status,
            tel: opt(&record[6], "tel")?,
            avg_latency: opt(&record[7], "avg_latency")?,
            opt_tel: opt(&record[8], "opt_tel")?,
            opt_certified: opt(&record[9], "opt_certified")?,
            ratio: opt(&record[10], "ratio")?,
            evictions: opt(&record[11], "evictions")?,
            clearings: opt(&record[12], "clearings")?,
            sim_seconds: opt(&record[13], "sim_seconds")?,
        })
    }
}

pub fn write_results_csv(rows: &[ResultRow]) -> anyhow::Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(RESULTS_HEADER)?;
    for row in rows {
        writer.write_record(row.to_record())?;
    }
    Ok(writer.into_inner()?)
}

pub fn read_results_csv(path: &Path) -> anyhow::Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<&str> = reader.headers()?.iter().collect();
    if header != RESULTS_HEADER {
        anyhow::bail!("unexpected results.csv header: {header:?}");
    }
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        rows.push(
            ResultRow::from_record(&record).with_context(|| format!("results.csv row {idx}"))?,
        );
    }
    Ok(rows)
}

/// Mean/std/min/max over the values present; `std` is the population
/// standard deviation. Sums run in row order, so recomputing from the CSV
/// reproduces these numbers bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StatBlock {
    pub count: u64,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub fn stat_block(values: &[f64]) -> Option<StatBlock> {
    if values.is_empty() {
        return None;
    }
    let count = values.len() as u64;
    let mean = values.iter().sum::<f64>() / count as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        min = min.min(v);
        max = max.max(v);
    }
    Some(StatBlock {
        count,
        mean,
        std: var.sqrt(),
        min,
        max,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioSummary {
    #[serde(flatten)]
    pub stats: StatBlock,
    /// Rows whose hindsight bound was proven optimal.
    pub certified: u64,
    /// Certified rows where the policy hit the optimum exactly.
    pub exact: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicySummary {
    pub runs: u64,
    pub completed: u64,
    pub livelocks: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tel: Option<StatBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_latency: Option<StatBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<RatioSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub name: String,
    pub trials: u64,
    pub rows: usize,
    pub policies: BTreeMap<String, PolicySummary>,
    /// Host time for the whole experiment; the only field not recomputable
    /// from results.csv.
    pub wall_time_s: f64,
}

/// Aggregate rows into the per-policy summary. Pure function of the rows
/// (plus the host wall time passed through), used both by the runner and by
/// anyone re-deriving statistics from results.csv.
pub fn summarize(name: &str, trials: u64, rows: &[ResultRow], wall_time_s: f64) -> Summary {
    let mut policies: BTreeMap<String, PolicySummary> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for row in rows {
        if !order.contains(&row.policy.as_str()) {
            order.push(&row.policy);
        }
    }
    for policy in order {
        let of_policy: Vec<&ResultRow> = rows.iter().filter(|r| r.policy == policy).collect();
        let completed: Vec<&&ResultRow> = of_policy
            .iter()
            .filter(|r| r.status == RowStatus::Ok)
            .collect();
        let tels: Vec<f64> = completed.iter().filter_map(|r| r.tel).map(|v| v as f64).collect();
        let lats: Vec<f64> = completed.iter().filter_map(|r| r.avg_latency).collect();
        let ratios: Vec<f64> = completed.iter().filter_map(|r| r.ratio).collect();
        let ratio = stat_block(&ratios).map(|stats| RatioSummary {
            stats,
            certified: completed
                .iter()
                .filter(|r| r.opt_certified == Some(true))
                .count() as u64,
            exact: completed
                .iter()
                .filter(|r| r.opt_certified == Some(true) && r.tel == r.opt_tel)
                .count() as u64,
        });
        policies.insert(
            policy.to_string(),
            PolicySummary {
                runs: of_policy.len() as u64,
                completed: completed.len() as u64,
                livelocks: of_policy
                    .iter()
                    .filter(|r| r.status == RowStatus::Livelock)
                    .count() as u64,
                tel: stat_block(&tels),
                avg_latency: stat_block(&lats),
                ratio,
            },
        );
    }
    Summary {
        schema_version: RESULTS_SCHEMA_VERSION,
        name: name.to_string(),
        trials,
        rows: rows.len(),
        policies,
        wall_time_s,
    }
}

/// The instance a given trial runs, before prediction noise. Exposed so a
/// single results.csv row can be replayed in isolation.
pub fn instance_for_trial(
    config: &ExperimentConfig,
    corpus: Option<&[TraceRecord]>,
    trial: u64,
) -> anyhow::Result<(Instance, u64)> {
    let seed = config.seeds.wrapping_add(trial);
    let instance = match &config.generator {
        Generator::Synthetic(spec) => workload::generate(&GenSpec { seed, ..*spec })?,
        Generator::Adversarial { m_grid, b } => {
            let m = m_grid[trial as usize % m_grid.len()];
            workload::gen_adversarial(m, *b)?
        }
        Generator::TraceSynthetic {
            memory,
            lambda_per_second,
            rounds_per_second,
            ..
        }
        | Generator::TraceFile {
            memory,
            lambda_per_second,
            rounds_per_second,
            ..
        } => {
            let records = corpus.expect("trace corpus must be loaded before running trials");
            workload::trace_to_instance(
                records,
                *memory,
                *lambda_per_second,
                *rounds_per_second,
                seed,
            )?
        }
    };
    let instance = match config.noise {
        Some(noise) => workload::apply_prediction_noise(
            &instance,
            noise.epsilon,
            noise.mode,
            seed ^ NOISE_SEED_SALT,
        )?,
        None => instance,
    };
    Ok((instance, seed))
}

/// Load whatever shared input the generator needs exactly once.
pub fn load_corpus(config: &ExperimentConfig) -> anyhow::Result<Option<Vec<TraceRecord>>> {
    match &config.generator {
        Generator::TraceSynthetic {
            corpus_n,
            corpus_seed,
            ..
        } => Ok(Some(gen_trace_corpus(*corpus_n, *corpus_seed))),
        Generator::TraceFile {
            path,
            sample_k,
            sample_seed,
            ..
        } => {
            let sampling = match sample_k {
                Some(k) => TraceSampling::RandomK {
                    k: *k,
                    seed: *sample_seed,
                },
                None => TraceSampling::All,
            };
            let trace = load_trace(path, sampling)
                .with_context(|| format!("loading trace {}", path.display()))?;
            if trace.skipped_rows > 0 {
                info!(
                    "trace {}: skipped {} rows with zero token counts",
                    path.display(),
                    trace.skipped_rows
                );
            }
            Ok(Some(trace.records))
        }
        _ => Ok(None),
    }
}

struct TrialOutput {
    rows: Vec<ResultRow>,
    reports: Vec<(String, RunReport)>,
}

pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub results_csv: PathBuf,
    pub summary_json: PathBuf,
    pub summary: Summary,
}

/// Execute the experiment matrix and write all artifacts under the output
/// directory. `out_override` (the `--out` flag) wins over the config's
/// `output_dir`, which defaults to `out/<name>`.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_override: Option<&Path>,
    jobs: Option<usize>,
) -> anyhow::Result<RunArtifacts> {
    let started = Instant::now();
    let out_dir = out_override
        .map(Path::to_path_buf)
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&config.name));
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let corpus = Arc::new(load_corpus(config)?);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .context("building worker pool")?;

    info!(
        "experiment {}: {} trials x {} policies",
        config.name,
        config.trials,
        config.policies.len()
    );
    let outputs: Vec<TrialOutput> = pool.install(|| {
        (0..config.trials)
            .into_par_iter()
            .map(|trial| run_trial(config, corpus.as_deref(), trial))
            .collect::<anyhow::Result<Vec<_>>>()
    })?;

    let rows: Vec<ResultRow> = outputs.iter().flat_map(|t| t.rows.clone()).collect();
    let results_bytes = write_results_csv(&rows)?;

    // Recompute the summary from the rows as written, not the rows as
    // computed: statistics must be re-derivable from results.csv exactly.
    let mut reader = csv::Reader::from_reader(results_bytes.as_slice());
    let parsed: Vec<ResultRow> = reader
        .records()
        .map(|r| ResultRow::from_record(&r?))
        .collect::<anyhow::Result<_>>()?;
    let summary = summarize(
        &config.name,
        config.trials,
        &parsed,
        started.elapsed().as_secs_f64(),
    );

    let results_csv = out_dir.join("results.csv");
    std::fs::write(&results_csv, &results_bytes)?;
    let summary_json = out_dir.join("summary.json");
    std::fs::write(&summary_json, to_json_pretty(&summary)?)?;

    if config.emit_memory_timeline {
        write_series_csv(
            &out_dir.join("memory_timeline.csv"),
            &outputs,
            "occupancy",
            |report| report.metrics.memory_timeline.clone(),
        )?;
    }
    if config.emit_throughput {
        write_series_csv(
            &out_dir.join("throughput.csv"),
            &outputs,
            "tokens",
            |report| report.metrics.per_round_throughput.clone(),
        )?;
    }
    if config.emit_run_reports {
        write_run_reports(&out_dir.join("reports"), &outputs)?;
    }

    info!(
        "experiment {}: wrote {} rows to {}",
        config.name,
        rows.len(),
        results_csv.display()
    );
    Ok(RunArtifacts {
        out_dir,
        results_csv,
        summary_json,
        summary,
    })
}

fn run_trial(
    config: &ExperimentConfig,
    corpus: Option<&[TraceRecord]>,
    trial: u64,
) -> anyhow::Result<TrialOutput> {
    let (instance, seed) = instance_for_trial(config, corpus, trial)?;
    debug!(
        "trial {trial}: n={} m={} seed={seed}",
        instance.len(),
        instance.memory_limit()
    );

    // One hindsight solve per trial; predictions are scheduler-side only, so
    // solve the exact-prediction twin for a noise-independent baseline.
    let solution: Option<IpSolution> = if config.compute_hindsight {
        let options = config.solver.to_options();
        Some(hindsight::solve_ip(
            &instance.with_exact_predictions(),
            options,
        )?)
    } else {
        None
    };

    let mut rows = Vec::with_capacity(config.policies.len());
    let mut reports = Vec::new();
    for entry in &config.policies {
        let policy = PolicyConfig {
            // Per-trial clearing streams; reruns of a row stay reproducible.
            rng_seed: entry.config.rng_seed.wrapping_add(trial),
            ..entry.config
        };
        let options = RunOptions {
            horizon_cap: None,
            log_tokens: config.emit_run_reports,
        };
        let outcome = engine::run_with_options(&instance, policy, config.duration, options);
        let row = match outcome {
            Ok(report) => {
                let tel = report.metrics.tel;
                let row = ResultRow {
                    trial,
                    policy: entry.label.clone(),
                    seed,
                    n: instance.len(),
                    m: instance.memory_limit(),
                    status: RowStatus::Ok,
                    tel: Some(tel),
                    avg_latency: Some(report.metrics.avg_latency()),
                    opt_tel: solution.as_ref().map(|s| s.tel),
                    opt_certified: solution.as_ref().map(|s| s.bounds.optimal),
                    ratio: solution.as_ref().map(|s| tel as f64 / s.tel as f64),
                    evictions: Some(report.eviction_count),
                    clearings: Some(report.clearing_events.len() as u64),
                    sim_seconds: Some(report.sim_seconds),
                };
                if config.emit_run_reports || config.emit_memory_timeline || config.emit_throughput
                {
                    reports.push((entry.label.clone(), report));
                }
                row
            }
            Err(EngineError::Livelock { cap, .. }) => {
                info!(
                    "trial {trial} policy {}: livelock, round cap {cap} exhausted",
                    entry.label
                );
                ResultRow {
                    trial,
                    policy: entry.label.clone(),
                    seed,
                    n: instance.len(),
                    m: instance.memory_limit(),
                    status: RowStatus::Livelock,
                    tel: None,
                    avg_latency: None,
                    opt_tel: solution.as_ref().map(|s| s.tel),
                    opt_certified: solution.as_ref().map(|s| s.bounds.optimal),
                    ratio: None,
                    evictions: None,
                    clearings: None,
                    sim_seconds: None,
                }
            }
            Err(other) => {
                return Err(anyhow::Error::new(other)
                    .context(format!("trial {trial} policy {}", entry.label)))
            }
        };
        rows.push(row);
    }
    Ok(TrialOutput { rows, reports })
}

fn write_series_csv(
    path: &Path,
    outputs: &[TrialOutput],
    value_name: &str,
    series: impl Fn(&RunReport) -> Vec<(u64, u64)>,
) -> anyhow::Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["trial", "policy", "round", value_name])?;
    for (trial, output) in outputs.iter().enumerate() {
        for (label, report) in &output.reports {
            for (round, value) in series(report) {
                writer.write_record([
                    trial.to_string(),
                    label.clone(),
                    round.to_string(),
                    value.to_string(),
                ])?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

fn write_run_reports(dir: &Path, outputs: &[TrialOutput]) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (trial, output) in outputs.iter().enumerate() {
        for (label, report) in &output.reports {
            let stem = format!("trial{trial:04}_{}", sanitize(label));
            std::fs::write(
                dir.join(format!("{stem}.report.json")),
                to_json_pretty(report)?,
            )?;
            let mut events = Vec::new();
            writeln!(
                events,
                "{}",
                serde_json::json!({"schema_version": report.schema_version})
            )?;
            for event in &report.events {
                writeln!(events, "{}", serde_json::to_string(event)?)?;
            }
            std::fs::write(dir.join(format!("{stem}.events.jsonl")), events)?;
        }
    }
    Ok(())
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

fn to_json_pretty<T: Serialize>(value: &T) -> anyhow::Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

/// Re-run a single (trial, policy-label) cell from the config, returning the
/// row exactly as the full experiment would emit it (modulo CSV formatting).
pub fn replay_row(config: &ExperimentConfig, trial: u64, label: &str) -> anyhow::Result<ResultRow> {
    let corpus = load_corpus(config)?;
    let output = run_trial(config, corpus.as_deref(), trial)?;
    output
        .rows
        .into_iter()
        .find(|r| r.policy == label)
        .ok_or_else(|| anyhow::anyhow!("no policy labelled {label:?} in config"))
}

/// Round-trip every row through its CSV encoding so in-memory floats match
/// what a reader of results.csv will see.
pub fn rows_as_written(rows: &[ResultRow]) -> anyhow::Result<Vec<ResultRow>> {
    let bytes = write_results_csv(rows)?;
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    reader
        .records()
        .map(|r| ResultRow::from_record(&r?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(trial: u64, policy: &str, tel: Option<u64>, ratio: Option<f64>) -> ResultRow {
        ResultRow {
            trial,
            policy: policy.to_string(),
            seed: trial,
            n: 5,
            m: 20,
            status: if tel.is_some() {
                RowStatus::Ok
            } else {
                RowStatus::Livelock
            },
            tel,
            avg_latency: tel.map(|t| t as f64 / 5.0),
            opt_tel: ratio.map(|_| 100),
            opt_certified: ratio.map(|r| r == 1.0),
            ratio,
            evictions: tel.map(|_| 0),
            clearings: tel.map(|_| 0),
            sim_seconds: tel.map(|t| t as f64),
        }
    }

    #[test]
    fn csv_round_trip_preserves_rows() {
        let rows = vec![
            row(0, "mcsf", Some(100), Some(1.0)),
            row(1, "mcsf", Some(110), Some(1.1)),
            row(1, "fcfs", None, None),
        ];
        let bytes = write_results_csv(&rows).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("trial,policy,seed,n,m,status,tel,"));
        assert!(text.contains("1,fcfs,1,5,20,livelock,,,,,,,,"), "{text}");
        let mut reader = csv::Reader::from_reader(bytes.as_slice());
        let parsed: Vec<ResultRow> = reader
            .records()
            .map(|r| ResultRow::from_record(&r.unwrap()).unwrap())
            .collect();
        assert_eq!(parsed, rows);
    }

    #[test]
    fn summary_counts_livelocks_and_exact_hits() {
        let rows = vec![
            row(0, "mcsf", Some(100), Some(1.0)),
            row(1, "mcsf", Some(120), Some(1.2)),
            row(0, "fcfs", None, None),
            row(1, "fcfs", Some(130), Some(1.3)),
        ];
        let summary = summarize("demo", 2, &rows, 0.5);
        let mcsf = &summary.policies["mcsf"];
        assert_eq!((mcsf.runs, mcsf.completed, mcsf.livelocks), (2, 2, 0));
        let ratio = mcsf.ratio.as_ref().unwrap();
        assert_eq!(ratio.stats.count, 2);
        assert!((ratio.stats.mean - 1.1).abs() < 1e-12);
        assert_eq!((ratio.certified, ratio.exact), (1, 1));
        let fcfs = &summary.policies["fcfs"];
        assert_eq!((fcfs.runs, fcfs.completed, fcfs.livelocks), (2, 1, 1));
    }

    #[test]
    fn stat_block_is_empty_for_no_values() {
        assert!(stat_block(&[]).is_none());
        let b = stat_block(&[2.0]).unwrap();
        assert_eq!((b.mean, b.std, b.min, b.max), (2.0, 0.0, 2.0, 2.0));
    }
}
