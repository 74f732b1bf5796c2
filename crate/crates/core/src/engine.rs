//! Discrete-time simulation loop.
//!
//! One round: deliver arrivals, let the policy admit, process every in-flight
//! request by one token (the admission round also ingests the prompt), then
//! check the batch against the memory limit *including* requests finishing
//! this round — a request holds `s + o` tokens at its completion round, so an
//! overflow there is a real violation and the whole round's work is voidable.
//! Only after the overflow check do completions release memory. This ordering
//! is what guarantees that every schedule the engine emits passes
//! [`crate::model::validate_schedule`], whatever the policy did.
//!
//! Because batching is non-preemptive and continuous, a request's progress is
//! always `now − start`; the in-flight set needs no extra bookkeeping beyond
//! [`InFlight`].

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hindsight::{self, HindsightError, SolveOptions};
use crate::kv::InFlight;
use crate::model::{Instance, Metrics, Request, RequestId, Round, Schedule, Tokens};
use crate::policy::{Policy, PolicyConfig, PolicyError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("affine duration must have c0 > 0 and c1 >= 0, got c0={c0}, c1={c1}")]
    InvalidDuration { c0: f64, c1: f64 },
    #[error(
        "livelock suspected: horizon cap {cap} reached with {remaining} requests outstanding"
    )]
    Livelock {
        cap: Round,
        remaining: usize,
        snapshot: Box<SimState>,
    },
    #[error("throughput requires a wall-clock duration model")]
    ThroughputNeedsWallClock,
}

/// How long one round takes on the simulated clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DurationModel {
    /// Every round is one abstract time unit.
    Unit,
    /// Round duration `c0 + c1 · (tokens processed this round)` seconds.
    /// Placeholder coefficients — only relative comparisons across policies
    /// are meaningful.
    Affine { c0: f64, c1: f64 },
}

impl DurationModel {
    pub fn affine(c0: f64, c1: f64) -> Result<Self, EngineError> {
        let model = DurationModel::Affine { c0, c1 };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        match *self {
            DurationModel::Unit => Ok(()),
            DurationModel::Affine { c0, c1 } => {
                if c0.is_finite() && c1.is_finite() && c0 > 0.0 && c1 >= 0.0 {
                    Ok(())
                } else {
                    Err(EngineError::InvalidDuration { c0, c1 })
                }
            }
        }
    }

    pub fn seconds_for(&self, tokens: Tokens) -> f64 {
        match *self {
            DurationModel::Unit => 1.0,
            DurationModel::Affine { c0, c1 } => c0 + c1 * tokens as f64,
        }
    }
}

/// Tagged record in the append-only event log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Arrival { round: Round, id: RequestId },
    Admit { round: Round, id: RequestId },
    Token { round: Round, id: RequestId },
    /// `round` is the completion round `p + o`.
    Complete { round: Round, id: RequestId },
    /// Occupancy exceeded the limit at this model round.
    Overflow { round: Round, occupancy: Tokens },
    Evict { round: Round, id: RequestId },
}

/// Live simulation state; boxed into [`EngineError::Livelock`] on failure.
#[derive(Debug, Clone, Serialize)]
pub struct SimState {
    pub now: Round,
    pub in_flight: Vec<InFlight>,
    pub waiting: Vec<Request>,
    /// `Σ_{i∈in_flight} (s_i + now − p_i)`, recomputed defensively each round.
    pub occupancy: Tokens,
    pub evictions: u64,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: Round,
    /// Occupancy at model round `round + 1`, before any eviction or release —
    /// i.e. the batch's true peak, completions included.
    pub occupancy: Tokens,
    /// Tokens processed: `s + 1` for a request on its admission round
    /// (prompt ingest plus first output token), 1 afterwards.
    pub tokens: Tokens,
    pub seconds: f64,
    pub feasibility_evals: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClearingEvent {
    pub round: Round,
    pub evicted: Vec<RequestId>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub policy: PolicyConfig,
    pub seed: u64,
    pub duration: DurationModel,
    pub metrics: Metrics,
    /// Start round of each request's *completed* run; evicted attempts leave
    /// no trace here, so this schedule always validates.
    pub schedule: Schedule,
    pub clearing_events: Vec<ClearingEvent>,
    pub eviction_count: u64,
    /// Total simulated seconds (sum of round durations).
    pub sim_seconds: f64,
    /// Host-side time spent simulating.
    pub wall_time_s: f64,
    pub max_feasibility_evals_per_round: u64,
    pub total_feasibility_evals: u64,
    pub rounds: Vec<RoundRecord>,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    /// Maximum number of rounds to simulate; `None` uses
    /// [`default_horizon_cap`].
    pub horizon_cap: Option<Round>,
    /// Token events dominate log size on large runs; turn them off when only
    /// aggregate metrics are needed.
    pub log_tokens: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            horizon_cap: None,
            log_tokens: true,
        }
    }
}

/// A generous cap on rounds for livelock detection: ten times a horizon that
/// any work-conserving, non-thrashing run provably fits in.
pub fn default_horizon_cap(instance: &Instance) -> Round {
    let total_output: Round = instance.total_output();
    let n = instance.len() as Round;
    10 * (instance.max_arrival() + total_output + n + 2).max(8)
}

pub fn run(
    instance: &Instance,
    config: PolicyConfig,
    duration: DurationModel,
    horizon_cap: Option<Round>,
) -> Result<RunReport, EngineError> {
    run_with_options(
        instance,
        config,
        duration,
        RunOptions {
            horizon_cap,
            ..RunOptions::default()
        },
    )
}

pub fn run_with_options(
    instance: &Instance,
    config: PolicyConfig,
    duration: DurationModel,
    options: RunOptions,
) -> Result<RunReport, EngineError> {
    duration.validate()?;
    let mut policy = Policy::new(config, instance.memory_limit())?;
    let cap = options
        .horizon_cap
        .unwrap_or_else(|| default_horizon_cap(instance));
    let started = Instant::now();

    let memory_limit = instance.memory_limit();
    let mut state = SimState {
        now: 0,
        in_flight: Vec::new(),
        waiting: Vec::new(),
        occupancy: 0,
        evictions: 0,
        events: Vec::new(),
    };
    let mut next_arrival = 0usize;
    let arrivals = instance.requests();

    let mut schedule = Schedule::default();
    let mut tel = 0u64;
    let mut makespan = 0;
    let mut completed = 0usize;
    let mut clearing_events = Vec::new();
    let mut rounds = Vec::new();
    let mut sim_seconds = 0.0;
    let mut total_evals = 0u64;
    let mut max_evals = 0u64;

    while next_arrival < arrivals.len() || !state.waiting.is_empty() || !state.in_flight.is_empty()
    {
        if state.now >= cap {
            let remaining = instance.len() - completed;
            return Err(EngineError::Livelock {
                cap,
                remaining,
                snapshot: Box::new(state),
            });
        }
        let now = state.now;

        // (1) Arrivals.
        while next_arrival < arrivals.len() && arrivals[next_arrival].arrival <= now {
            let r = arrivals[next_arrival];
            state.events.push(Event::Arrival { round: now, id: r.id });
            state.waiting.push(r);
            next_arrival += 1;
        }

        // (2) Admission. Start-of-round occupancy excludes requests that
        // completed at `now`: their memory frees before the new prompts land.
        debug_assert_eq!(
            state.occupancy,
            state
                .in_flight
                .iter()
                .map(|f| f.request.prompt_size + now - f.start)
                .sum::<Tokens>(),
            "incremental occupancy diverged from recomputation at round {now}"
        );
        let decision = policy.select(&crate::policy::SimView {
            now,
            memory_limit,
            occupancy: state.occupancy,
            in_flight: &state.in_flight,
            waiting: &state.waiting,
        });
        total_evals += decision.feasibility_evals;
        max_evals = max_evals.max(decision.feasibility_evals);
        for &id in &decision.admit {
            let slot = state
                .waiting
                .iter()
                .position(|r| r.id == id)
                .expect("policy admitted a request that is not waiting");
            let request = state.waiting.remove(slot);
            state.events.push(Event::Admit { round: now, id });
            state.in_flight.push(InFlight {
                request,
                start: now,
            });
        }

        // (3) Process the batch: one token per request, prompts ingested on
        // the admission round.
        let mut tokens = 0;
        for f in &state.in_flight {
            tokens += if f.start == now {
                f.request.prompt_size + 1
            } else {
                1
            };
            if options.log_tokens {
                state.events.push(Event::Token {
                    round: now,
                    id: f.request.id,
                });
            }
        }

        // (4) The batch's occupancy at model round now+1, completions still
        // counted at their final size s + o.
        let occupancy_round = now + 1;
        let mut occ_next: Tokens = state
            .in_flight
            .iter()
            .map(|f| f.request.prompt_size + occupancy_round - f.start)
            .sum();
        let seconds = duration.seconds_for(tokens);
        sim_seconds += seconds;
        rounds.push(RoundRecord {
            round: now,
            occupancy: occ_next,
            tokens,
            seconds,
            feasibility_evals: decision.feasibility_evals,
        });

        // (5) Overflow: the victim set may include requests that would have
        // completed this round — their work is voided along with everyone
        // else's, which is what keeps emitted schedules valid.
        if occ_next > memory_limit {
            state.events.push(Event::Overflow {
                round: occupancy_round,
                occupancy: occ_next,
            });
            let evicted = policy.handle_overflow(&state.in_flight, occupancy_round);
            for &id in &evicted {
                let slot = state
                    .in_flight
                    .iter()
                    .position(|f| f.request.id == id)
                    .expect("overflow handler evicted an id that is not in flight");
                let f = state.in_flight.remove(slot);
                state.events.push(Event::Evict {
                    round: occupancy_round,
                    id,
                });
                // The request demonstrably ran this many rounds without
                // finishing, so its length is at least that — fold the
                // observation into the prediction before re-queueing. This
                // is what makes clear-all retry loops terminate: every
                // overflow has an overdue member (otherwise the projection
                // that admitted the batch would have caught it), and that
                // member's prediction strictly increases, bounded by o.
                let observed = occupancy_round - f.start;
                state.waiting.push(Request {
                    predicted_len: f.request.predicted_len.max(observed),
                    ..f.request
                });
            }
            state.evictions += evicted.len() as u64;
            clearing_events.push(ClearingEvent {
                round: occupancy_round,
                evicted,
            });
            occ_next = state
                .in_flight
                .iter()
                .map(|f| f.request.prompt_size + occupancy_round - f.start)
                .sum();
            debug_assert!(
                occ_next <= memory_limit,
                "overflow handling left occupancy {occ_next} above the limit"
            );
        }

        // (6) Completions release memory after the check above.
        let mut i = 0;
        while i < state.in_flight.len() {
            let f = state.in_flight[i];
            if f.start + f.request.output_len == occupancy_round {
                state.in_flight.remove(i);
                occ_next -= f.request.prompt_size + f.request.output_len;
                state.events.push(Event::Complete {
                    round: occupancy_round,
                    id: f.request.id,
                });
                schedule.set_start(f.request.id, f.start);
                tel += occupancy_round - f.request.arrival;
                makespan = makespan.max(occupancy_round);
                completed += 1;
            } else {
                i += 1;
            }
        }

        state.occupancy = occ_next;
        state.now += 1;
    }

    debug_assert_eq!(completed, instance.len());
    let metrics = Metrics {
        tel,
        request_count: instance.len(),
        makespan,
        per_round_throughput: rounds.iter().map(|r| (r.round, r.tokens)).collect(),
        memory_timeline: rounds.iter().map(|r| (r.round + 1, r.occupancy)).collect(),
    };
    Ok(RunReport {
        schema_version: 1,
        policy: config,
        seed: config.rng_seed,
        duration,
        metrics,
        schedule,
        clearing_events,
        eviction_count: state.evictions,
        sim_seconds,
        wall_time_s: started.elapsed().as_secs_f64(),
        max_feasibility_evals_per_round: max_evals,
        total_feasibility_evals: total_evals,
        rounds,
        events: state.events,
    })
}

#[derive(Debug, Error)]
pub enum RatioError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Solver(#[from] HindsightError),
    #[error("hindsight solve was not proven optimal (bounds {lower}..={upper})")]
    NotOptimal { lower: f64, upper: u64 },
}

/// `TEL(policy) / TEL(hindsight optimum)` under unit durations; at least 1
/// whenever the solver proves optimality.
pub fn latency_ratio(instance: &Instance, config: PolicyConfig) -> Result<f64, RatioError> {
    latency_ratio_with(instance, config, SolveOptions::default())
}

pub fn latency_ratio_with(
    instance: &Instance,
    config: PolicyConfig,
    solve: SolveOptions,
) -> Result<f64, RatioError> {
    let report = run_with_options(
        instance,
        config,
        DurationModel::Unit,
        RunOptions {
            horizon_cap: None,
            log_tokens: false,
        },
    )?;
    let solution = hindsight::solve_ip(instance, solve)?;
    if !solution.bounds.optimal {
        return Err(RatioError::NotOptimal {
            lower: solution.bounds.lower,
            upper: solution.bounds.upper,
        });
    }
    Ok(report.metrics.tel as f64 / solution.tel as f64)
}

/// Tokens-per-window series for plotting: what the engine processed, and the
/// offered load (each arrival's `s + o` attributed to its arrival instant).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputSeries {
    pub window: f64,
    pub processed: Vec<(f64, Tokens)>,
    pub offered: Vec<(f64, Tokens)>,
}

pub fn throughput_series(
    report: &RunReport,
    instance: &Instance,
    window: f64,
) -> Result<ThroughputSeries, EngineError> {
    if report.duration == DurationModel::Unit {
        return Err(EngineError::ThroughputNeedsWallClock);
    }
    assert!(window > 0.0, "window must be positive");

    // Start instant of each round on the simulated clock.
    let mut round_start = Vec::with_capacity(report.rounds.len() + 1);
    let mut clock = 0.0;
    for r in &report.rounds {
        round_start.push(clock);
        clock += r.seconds;
    }
    round_start.push(clock);

    let bucket = |t: f64| (t / window).floor() as usize;
    let buckets = if report.rounds.is_empty() {
        0
    } else {
        bucket(round_start[report.rounds.len() - 1]) + 1
    };
    let mut processed = vec![0; buckets];
    for (i, r) in report.rounds.iter().enumerate() {
        processed[bucket(round_start[i])] += r.tokens;
    }
    let mut offered = vec![0; buckets];
    for r in instance.requests() {
        // Arrival round a maps to that round's start instant; every request
        // is delivered before the run ends, so the index is in range.
        let t = round_start[(r.arrival as usize).min(report.rounds.len())];
        offered[bucket(t).min(buckets.saturating_sub(1))] += r.prompt_size + r.output_len;
    }

    let label = |series: Vec<Tokens>| {
        series
            .into_iter()
            .enumerate()
            .map(|(i, tokens)| (i as f64 * window, tokens))
            .collect()
    };
    Ok(ThroughputSeries {
        window,
        processed: label(processed),
        offered: label(offered),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_schedule;

    fn instance(m: Tokens, reqs: &[(Round, Tokens, Tokens)]) -> Instance {
        let requests = reqs
            .iter()
            .enumerate()
            .map(|(id, &(arrival, s, o))| Request::exact(id, arrival, s, o))
            .collect();
        Instance::new(m, requests).unwrap()
    }

    #[test]
    fn two_request_run_matches_hand_simulation() {
        let inst = instance(4, &[(0, 1, 1), (0, 1, 2)]);
        let report = run(&inst, PolicyConfig::mcsf(), DurationModel::Unit, None).unwrap();
        assert_eq!(report.metrics.tel, 3);
        assert_eq!(report.eviction_count, 0);
        assert_eq!(report.metrics.makespan, 2);
        assert_eq!(report.schedule.start(0), Some(0));
        assert_eq!(report.schedule.start(1), Some(0));
        assert!(validate_schedule(&report.schedule, &inst).is_ok());
        // Peak occupancy: both requests held at round 1 (2 + 2 tokens).
        assert_eq!(report.metrics.memory_timeline, vec![(1, 4), (2, 3)]);
    }

    #[test]
    fn concurrent_prompts_interleave_in_event_order() {
        // Two prompts arriving one round apart proceed concurrently from the
        // moment the second is admitted.
        let inst = instance(20, &[(0, 5, 3), (1, 4, 2)]);
        let report = run(&inst, PolicyConfig::mcsf(), DurationModel::Unit, None).unwrap();
        use Event::*;
        assert_eq!(
            report.events,
            vec![
                Arrival { round: 0, id: 0 },
                Admit { round: 0, id: 0 },
                Token { round: 0, id: 0 },
                Arrival { round: 1, id: 1 },
                Admit { round: 1, id: 1 },
                Token { round: 1, id: 0 },
                Token { round: 1, id: 1 },
                Token { round: 2, id: 0 },
                Token { round: 2, id: 1 },
                Complete { round: 3, id: 0 },
                Complete { round: 3, id: 1 },
            ]
        );
        assert_eq!(report.metrics.tel, 5);
    }

    #[test]
    fn empty_instance_is_a_zero_round_run() {
        let inst = Instance::new(8, vec![]).unwrap();
        let report = run(&inst, PolicyConfig::mcsf(), DurationModel::Unit, None).unwrap();
        assert_eq!(report.metrics.tel, 0);
        assert!(report.rounds.is_empty());
        assert!(report.events.is_empty());
        assert_eq!(report.metrics.makespan, 0);
    }

    #[test]
    fn overflow_voids_the_round_and_the_final_schedule_validates() {
        // FCFS admits the short next to the long; both peak together at
        // round 8 (9 + 2 = 11 > 10). The whole batch is cleared — including
        // the long request one token from the finish line — and both rerun.
        let inst = instance(10, &[(0, 1, 8), (7, 1, 1)]);
        let report = run(&inst, PolicyConfig::fcfs(), DurationModel::Unit, None).unwrap();
        assert_eq!(
            report.clearing_events,
            vec![ClearingEvent {
                round: 8,
                evicted: vec![0, 1],
            }]
        );
        assert_eq!(report.eviction_count, 2);
        assert_eq!(report.schedule.start(0), Some(8));
        assert_eq!(report.schedule.start(1), Some(8));
        assert_eq!(report.metrics.tel, (16 - 0) + (9 - 7));
        assert!(validate_schedule(&report.schedule, &inst).is_ok());
    }

    #[test]
    fn eviction_folds_observed_runtime_into_predictions() {
        // Three requests predicted at õ=1 but truly o=6: the projection sees
        // peaks of 3 and admits all three (9 ≤ 10 at the shared checkpoint),
        // then occupancy hits 12 > 10 once everyone outlives the prediction.
        // A stale re-queue would retry the identical batch forever; folding
        // the observed runtime into õ shrinks each retry until the batch is
        // genuinely safe, so the run terminates with every request served.
        let requests = (0..3)
            .map(|id| Request {
                id,
                arrival: 0,
                prompt_size: 2,
                output_len: 6,
                predicted_len: 1,
            })
            .collect();
        let inst = Instance::new(10, requests).unwrap();
        let report = run(&inst, PolicyConfig::mcsf(), DurationModel::Unit, None)
            .expect("observed-runtime learning must break the clearing cycle");
        assert!(report.eviction_count > 0, "the underestimate must actually trigger clearing");
        assert_eq!(report.schedule.len(), 3);
        assert!(validate_schedule(&report.schedule, &inst).is_ok());
    }

    #[test]
    fn unschedulable_request_surfaces_as_livelock() {
        // Peak demand s + o = 5 exceeds M = 4, so every attempt overflows and
        // is cleared; the horizon cap turns the thrash into an error.
        let inst = instance(4, &[(0, 2, 3), (0, 2, 3)]);
        let err = run(&inst, PolicyConfig::alpha_protection(0.0), DurationModel::Unit, None)
            .unwrap_err();
        match err {
            EngineError::Livelock { remaining, snapshot, .. } => {
                assert_eq!(remaining, 2);
                assert!(snapshot.evictions > 0);
            }
            other => panic!("expected livelock, got {other:?}"),
        }
    }

    #[test]
    fn token_accounting_sums_to_prompt_plus_output() {
        let inst = instance(32, &[(0, 3, 4), (1, 5, 2), (4, 2, 6)]);
        let report = run(&inst, PolicyConfig::mcsf(), DurationModel::Unit, None).unwrap();
        let processed: Tokens = report.rounds.iter().map(|r| r.tokens).sum();
        let offered: Tokens = inst
            .requests()
            .iter()
            .map(|r| r.prompt_size + r.output_len)
            .sum();
        assert_eq!(processed, offered);
    }

    #[test]
    fn throughput_series_counts_prompt_on_admission_round() {
        let inst = instance(8, &[(0, 1, 3)]);
        let duration = DurationModel::affine(1.0, 0.0).unwrap();
        let report = run(&inst, PolicyConfig::mcsf(), duration, None).unwrap();
        let series = throughput_series(&report, &inst, 1.0).unwrap();
        // Admission round carries the prompt and the first token; the series
        // total is s + o.
        assert_eq!(series.processed, vec![(0.0, 2), (1.0, 1), (2.0, 1)]);
        assert_eq!(series.offered, vec![(0.0, 4), (1.0, 0), (2.0, 0)]);
        let sum: Tokens = series.processed.iter().map(|&(_, t)| t).sum();
        assert_eq!(sum, 4);
    }

    #[test]
    fn throughput_series_is_empty_for_empty_instance() {
        let inst = Instance::new(8, vec![]).unwrap();
        let duration = DurationModel::affine(0.5, 0.1).unwrap();
        let report = run(&inst, PolicyConfig::mcsf(), duration, None).unwrap();
        let series = throughput_series(&report, &inst, 1.0).unwrap();
        assert!(series.processed.is_empty());
        assert!(series.offered.is_empty());
    }

    #[test]
    fn throughput_series_requires_wall_clock() {
        let inst = instance(8, &[(0, 1, 1)]);
        let report = run(&inst, PolicyConfig::mcsf(), DurationModel::Unit, None).unwrap();
        assert!(matches!(
            throughput_series(&report, &inst, 1.0),
            Err(EngineError::ThroughputNeedsWallClock)
        ));
    }

    #[test]
    fn affine_duration_validation() {
        assert!(DurationModel::affine(0.0, 0.1).is_err());
        assert!(DurationModel::affine(1.0, -0.1).is_err());
        assert!(DurationModel::affine(f64::NAN, 0.0).is_err());
        assert!(DurationModel::affine(0.25, 0.0).is_ok());
    }

    #[test]
    fn latency_ratio_is_one_when_policy_matches_optimum() {
        let inst = instance(4, &[(0, 1, 1), (0, 1, 2)]);
        let ratio = latency_ratio(&inst, PolicyConfig::mcsf()).unwrap();
        assert!((ratio - 1.0).abs() < 1e-12);
    }
}
