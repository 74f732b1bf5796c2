//! Instance generation: synthetic arrival models, the adversarial
//! lower-bound construction, trace ingestion, and prediction noise.
//!
//! Every generator is a pure function of `(spec, seed)`. Randomness comes
//! from `ChaCha8Rng` with inverse-transform sampling (Knuth's product method
//! for Poisson counts, Box–Muller for normals) rather than a distributions
//! crate, so the draw streams are pinned by this file alone and survive
//! dependency upgrades; the exact draw order per operation is part of the
//! format.

use std::io::BufRead;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Instance, ModelError, Request, Round, Tokens};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("range {name} is invalid: [{lo}, {hi}]")]
    InvalidRange {
        name: &'static str,
        lo: u64,
        hi: u64,
    },
    #[error("prompt range must sit below the memory range (max s {max_s} >= min M {min_m})")]
    PromptRangeTooLarge { max_s: u64, min_m: u64 },
    #[error("explicit output range [{lo}, {hi}] can exceed M - s = {headroom}")]
    OutputRangeTooLarge { lo: u64, hi: u64, headroom: u64 },
    #[error("lambda range [{lo}, {hi}] is invalid")]
    InvalidLambda { lo: f64, hi: f64 },
    #[error("memory limit {0} must be at least 4 for the adversarial instance")]
    AdversarialTooSmall(Tokens),
    #[error("memory limit {0} must be a perfect square for the adversarial instance")]
    NotPerfectSquare(Tokens),
    #[error("{model:?} instances take explicit parameters, not a GenSpec")]
    UnsupportedModel { model: GenModel },
    #[error("rate must be positive and finite, got {0}")]
    InvalidRate(f64),
    #[error("two-sided noise requires epsilon in [0, 1), got {0}")]
    TwoSidedEpsilonTooLarge(f64),
    #[error("reading trace: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {source}")]
    MalformedRow {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Inclusive integer interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    pub lo: u64,
    pub hi: u64,
}

impl IntRange {
    pub const fn new(lo: u64, hi: u64) -> Self {
        Self { lo, hi }
    }

    pub const fn single(v: u64) -> Self {
        Self { lo: v, hi: v }
    }

    fn check(self, name: &'static str) -> Result<Self, WorkloadError> {
        if self.lo <= self.hi {
            Ok(self)
        } else {
            Err(WorkloadError::InvalidRange {
                name,
                lo: self.lo,
                hi: self.hi,
            })
        }
    }

    fn sample(self, rng: &mut ChaCha8Rng) -> u64 {
        rng.gen_range(self.lo..=self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenModel {
    AllAtOnce,
    Poisson,
    Adversarial,
    Trace,
}

/// Sampling rules for the synthetic generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub model: GenModel,
    pub seed: u64,
    pub m_range: IntRange,
    pub s_range: IntRange,
    /// Explicit output-length range; `None` uses the model default
    /// `[1, M − s]`, drawn after `M` and `s`.
    #[serde(default)]
    pub o_range: Option<IntRange>,
    pub n_range: IntRange,
    /// Number of arrival rounds (Poisson model only).
    pub t_range: IntRange,
    /// Expected arrivals per round (Poisson model only).
    pub lambda_range: (f64, f64),
    /// Prediction-noise level, recorded for experiment configs; generators
    /// emit exact predictions and noise is applied separately via
    /// [`apply_prediction_noise`].
    #[serde(default)]
    pub epsilon: f64,
}

impl GenSpec {
    /// All-at-once arrivals at the published experiment scale:
    /// `M ∈ [30,50]`, `s ∈ [1,5]`, `o ∈ [1, M−s]`, `n ∈ [40,60]`.
    pub fn all_at_once_paper(seed: u64) -> Self {
        Self {
            model: GenModel::AllAtOnce,
            seed,
            m_range: IntRange::new(30, 50),
            s_range: IntRange::new(1, 5),
            o_range: None,
            n_range: IntRange::new(40, 60),
            t_range: IntRange::single(1),
            lambda_range: (1.0, 1.0),
            epsilon: 0.0,
        }
    }

    /// Poisson arrivals at the published scale: `T ∈ [40,60]`,
    /// `λ ∈ [0.5, 1.5]`, sizes as in the all-at-once model.
    pub fn poisson_paper(seed: u64) -> Self {
        Self {
            model: GenModel::Poisson,
            t_range: IntRange::new(40, 60),
            lambda_range: (0.5, 1.5),
            ..Self::all_at_once_paper(seed)
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        self.m_range.check("m_range")?;
        self.s_range.check("s_range")?;
        self.n_range.check("n_range")?;
        self.t_range.check("t_range")?;
        if self.s_range.hi >= self.m_range.lo {
            return Err(WorkloadError::PromptRangeTooLarge {
                max_s: self.s_range.hi,
                min_m: self.m_range.lo,
            });
        }
        if let Some(o) = self.o_range {
            o.check("o_range")?;
            let headroom = self.m_range.lo - self.s_range.hi;
            if o.hi > headroom {
                return Err(WorkloadError::OutputRangeTooLarge {
                    lo: o.lo,
                    hi: o.hi,
                    headroom,
                });
            }
        }
        let (lo, hi) = self.lambda_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi) {
            return Err(WorkloadError::InvalidLambda { lo, hi });
        }
        Ok(())
    }
}

/// Dispatch on `spec.model` for the two GenSpec-driven generators.
pub fn generate(spec: &GenSpec) -> Result<Instance, WorkloadError> {
    match spec.model {
        GenModel::AllAtOnce => gen_all_at_once(spec),
        GenModel::Poisson => gen_poisson(spec),
        model => Err(WorkloadError::UnsupportedModel { model }),
    }
}

fn draw_size(spec: &GenSpec, m: Tokens, rng: &mut ChaCha8Rng) -> (Tokens, Tokens) {
    let s = spec.s_range.sample(rng);
    let o = match spec.o_range {
        Some(range) => range.sample(rng),
        None => rng.gen_range(1..=m - s),
    };
    (s, o)
}

/// Arrival Model 1: everything arrives at round 0.
/// Draw order: `M`, `n`, then `(s_i, o_i)` per request.
pub fn gen_all_at_once(spec: &GenSpec) -> Result<Instance, WorkloadError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.m_range.sample(&mut rng);
    let n = spec.n_range.sample(&mut rng);
    let requests = (0..n)
        .map(|id| {
            let (s, o) = draw_size(spec, m, &mut rng);
            Request::exact(id as usize, 0, s, o)
        })
        .collect();
    Ok(Instance::new(m, requests)?)
}

/// Arrival Model 2: per-round arrival counts are Poisson(λ) over rounds
/// `1..=T`. Draw order: `M`, `T`, `λ`, then per round the count followed by
/// `(s_i, o_i)` per arrival.
pub fn gen_poisson(spec: &GenSpec) -> Result<Instance, WorkloadError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.m_range.sample(&mut rng);
    let t = spec.t_range.sample(&mut rng);
    let (lo, hi) = spec.lambda_range;
    let lambda = rng.gen_range(lo..=hi);
    let mut requests = Vec::new();
    for round in 1..=t {
        let k = poisson_knuth(lambda, &mut rng);
        for _ in 0..k {
            let (s, o) = draw_size(spec, m, &mut rng);
            requests.push(Request::exact(requests.len(), round, s, o));
        }
    }
    Ok(Instance::new(m, requests)?)
}

/// The √M lower-bound construction: one long request (`s=1, o=M−1`) released
/// at round 0, plus `M/2` unit requests (`s=1, o=1`) released at
/// `b + M − ⌊√M/2⌋`, where `b` is the round the observed algorithm started
/// the long request.
pub fn gen_adversarial(m: Tokens, b: Round) -> Result<Instance, WorkloadError> {
    if m < 4 {
        return Err(WorkloadError::AdversarialTooSmall(m));
    }
    let root = (m as f64).sqrt() as Tokens;
    if root * root != m {
        return Err(WorkloadError::NotPerfectSquare(m));
    }
    let burst = b + m - root / 2;
    let mut requests = vec![Request::exact(0, 0, 1, m - 1)];
    for id in 1..=(m / 2) as usize {
        requests.push(Request::exact(id, burst, 1, 1));
    }
    Ok(Instance::new(m, requests)?)
}

/// One dataset row; `arrival` is optional because [`trace_to_instance`]
/// re-times records with a Poisson process anyway.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arrival: Option<f64>,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceSampling {
    All,
    /// Keep `k` uniformly chosen rows (in file order), deterministic per seed.
    RandomK { k: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTrace {
    pub records: Vec<TraceRecord>,
    /// Rows dropped because a token count was zero.
    pub skipped_rows: usize,
}

/// Read a JSONL trace (`{"id": …, "prompt_tokens": …, "output_tokens": …}`
/// per line, `arrival` optional). Blank lines are ignored; a row with a zero
/// token count is skipped and counted; anything else malformed is an error
/// naming the line.
pub fn load_trace(
    path: impl AsRef<Path>,
    sampling: TraceSampling,
) -> Result<LoadedTrace, WorkloadError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    let mut skipped_rows = 0;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(&line)
            .map_err(|source| WorkloadError::MalformedRow {
                line: idx + 1,
                source,
            })?;
        if record.prompt_tokens == 0 || record.output_tokens == 0 {
            skipped_rows += 1;
            continue;
        }
        records.push(record);
    }
    if let TraceSampling::RandomK { k, seed } = sampling {
        let k = k.min(records.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep: Vec<usize> = sample_indices(&mut rng, records.len(), k).into_vec();
        keep.sort_unstable();
        records = keep.into_iter().map(|i| records[i]).collect();
    }
    Ok(LoadedTrace {
        records,
        skipped_rows,
    })
}

/// Synthetic corpus whose prompt/output token counts follow log-normal fits
/// to the published summary statistics (prompt mean ≈ 40.62, median 11;
/// output mean ≈ 85.32, median 45), capped at 4096 tokens.
pub fn gen_trace_corpus(n: usize, seed: u64) -> Vec<TraceRecord> {
    // exp(μ) = median and exp(μ + σ²/2) = mean pin (μ, σ) per side.
    const PROMPT_MU: f64 = 2.397_895_272_798_371; // ln 11
    const PROMPT_SIGMA: f64 = 1.616_434_648_691_567;
    const OUTPUT_MU: f64 = 3.806_662_489_770_827; // ln 45
    const OUTPUT_SIGMA: f64 = 1.131_218_744_896_345;
    const CAP: u64 = 4096;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |mu: f64, sigma: f64| -> u64 {
        let z = standard_normal(&mut rng);
        ((mu + sigma * z).exp().round() as u64).clamp(1, CAP)
    };
    (0..n)
        .map(|id| TraceRecord {
            id: id as u64,
            arrival: None,
            prompt_tokens: draw(PROMPT_MU, PROMPT_SIGMA),
            output_tokens: draw(OUTPUT_MU, OUTPUT_SIGMA),
        })
        .collect()
}

/// Re-time `records` with a Poisson process of rate `lambda_per_second`,
/// convert arrival instants to rounds at `rounds_per_second`, and build an
/// instance with exact predictions. Ids are reassigned in arrival order.
pub fn trace_to_instance(
    records: &[TraceRecord],
    memory_limit: Tokens,
    lambda_per_second: f64,
    rounds_per_second: f64,
    seed: u64,
) -> Result<Instance, WorkloadError> {
    for rate in [lambda_per_second, rounds_per_second] {
        if !rate.is_finite() || rate <= 0.0 {
            return Err(WorkloadError::InvalidRate(rate));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clock = 0.0;
    let mut timed: Vec<(Round, &TraceRecord)> = records
        .iter()
        .map(|r| {
            clock += exponential(lambda_per_second, &mut rng);
            ((clock * rounds_per_second).floor() as Round, r)
        })
        .collect();
    timed.sort_by_key(|&(round, r)| (round, r.id));
    let requests = timed
        .into_iter()
        .enumerate()
        .map(|(id, (round, r))| Request::exact(id, round, r.prompt_tokens, r.output_tokens))
        .collect();
    Ok(Instance::new(memory_limit, requests)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// `õ ~ U[(1−ε)o, (1+ε)o]`, rounded to the nearest integer ≥ 1.
    TwoSided,
    /// `õ ~ U[o, (1+ε)o]` — the overestimate regime the MC-SF safety
    /// guarantee assumes.
    Overestimate,
}

/// Replace every predicted length with a noisy draw around the true length;
/// true lengths are untouched. One uniform draw per request in id order.
pub fn apply_prediction_noise(
    instance: &Instance,
    epsilon: f64,
    mode: NoiseMode,
    seed: u64,
) -> Result<Instance, WorkloadError> {
    if !epsilon.is_finite() || epsilon < 0.0 || (mode == NoiseMode::TwoSided && epsilon >= 1.0) {
        return Err(WorkloadError::TwoSidedEpsilonTooLarge(epsilon));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let requests = instance
        .requests()
        .iter()
        .map(|r| {
            let o = r.output_len as f64;
            let u: f64 = rng.gen();
            let predicted = match mode {
                NoiseMode::TwoSided => {
                    let lo = (1.0 - epsilon) * o;
                    (lo + u * 2.0 * epsilon * o).round().max(1.0) as Tokens
                }
                NoiseMode::Overestimate => (o + u * epsilon * o).round().max(o) as Tokens,
            };
            Request {
                predicted_len: predicted,
                ..*r
            }
        })
        .collect();
    Ok(Instance::new(instance.memory_limit(), requests)?)
}

/// Knuth's inverse-transform product method: multiply uniforms until the
/// product drops below `e^{−λ}`. Exact for the moderate rates used here.
fn poisson_knuth(lambda: f64, rng: &mut ChaCha8Rng) -> u64 {
    let limit = (-lambda).exp();
    let mut k = 0;
    let mut product: f64 = rng.gen();
    while product > limit {
        k += 1;
        product *= rng.gen::<f64>();
    }
    k
}

/// Inverse-transform exponential with rate `lambda`.
fn exponential(lambda: f64, rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen();
    -(1.0 - u).ln() / lambda
}

/// Box–Muller cosine branch; one standard normal per two uniforms.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1] so the log is finite
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
