//! Online admission policies.
//!
//! Five policies sit behind one interface:
//!
//! * **MC-SF** — candidates ascending by predicted length, admitted as the
//!   largest feasible prefix under the forward projection in [`crate::kv`].
//! * **MC-Benchmark** — same projection, candidates in arrival order.
//! * **α-protection** — myopic: admits in arrival order while instantaneous
//!   occupancy stays within `(1−α)·M`; overflow clears every active request.
//! * **α,β-clearing** — α-protection admission, but overflow evicts each
//!   active request independently with probability β per pass.
//! * **FCFS** — myopic with the full budget `M`; the vLLM-style baseline.
//!
//! Policies are pure functions of the per-round view except the β-clearing
//! RNG stream, which is owned by the [`Policy`] value for one run.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kv::InFlight;
use crate::model::{Request, RequestId, Round, Tokens};

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("alpha must lie in [0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("beta must lie in (0, 1], got {0}")]
    InvalidBeta(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Mcsf,
    McBenchmark,
    AlphaProtection,
    AlphaBetaClearing,
    Fcfs,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Mcsf => "mcsf",
            PolicyKind::McBenchmark => "mc_benchmark",
            PolicyKind::AlphaProtection => "alpha_protection",
            PolicyKind::AlphaBetaClearing => "alpha_beta_clearing",
            PolicyKind::Fcfs => "fcfs",
        }
    }
}

fn default_beta() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Protection level in `[0, 1)`: admission works against the protected
    /// budget `⌊(1−α)·M⌋`. Zero (the default for the projection policies and
    /// FCFS) means the full budget.
    #[serde(default)]
    pub alpha: f64,
    /// Clearing probability in `(0, 1]`; only α,β-clearing reads it.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Seed for the β-clearing stream; other kinds ignore it.
    #[serde(default)]
    pub rng_seed: u64,
}

impl PolicyConfig {
    pub fn mcsf() -> Self {
        Self::bare(PolicyKind::Mcsf)
    }

    /// Shortest-first with a protection margin: the forward projection is
    /// checked against `(1−α)M` instead of `M`, leaving headroom that absorbs
    /// prediction error.
    pub fn mcsf_protected(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::bare(PolicyKind::Mcsf)
        }
    }

    pub fn mc_benchmark() -> Self {
        Self::bare(PolicyKind::McBenchmark)
    }

    pub fn fcfs() -> Self {
        Self::bare(PolicyKind::Fcfs)
    }

    pub fn alpha_protection(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::bare(PolicyKind::AlphaProtection)
        }
    }

    pub fn alpha_beta_clearing(alpha: f64, beta: f64, rng_seed: u64) -> Self {
        Self {
            alpha,
            beta,
            rng_seed,
            ..Self::bare(PolicyKind::AlphaBetaClearing)
        }
    }

    fn bare(kind: PolicyKind) -> Self {
        Self {
            kind,
            alpha: 0.0,
            beta: 1.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !self.alpha.is_finite() || !(0.0..1.0).contains(&self.alpha) {
            return Err(PolicyError::InvalidAlpha(self.alpha));
        }
        if self.kind == PolicyKind::AlphaBetaClearing
            && (!self.beta.is_finite() || !(self.beta > 0.0 && self.beta <= 1.0))
        {
            return Err(PolicyError::InvalidBeta(self.beta));
        }
        Ok(())
    }
}

/// Read-only view of one round handed to a policy by the engine.
#[derive(Debug, Clone, Copy)]
pub struct SimView<'a> {
    pub now: Round,
    pub memory_limit: Tokens,
    /// Actual occupancy `Σ_{i∈S} (s_i + now − p_i)` at the start of the round.
    pub occupancy: Tokens,
    pub in_flight: &'a [InFlight],
    pub waiting: &'a [Request],
}

/// The ordered admission set `U^(t)` plus instrumentation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PolicyDecision {
    pub admit: Vec<RequestId>,
    /// Budget comparisons performed while selecting (one per checkpoint or
    /// per myopic candidate); the per-round work-bound test reads this.
    pub feasibility_evals: u64,
}

#[derive(Debug, Clone)]
pub struct Policy {
    config: PolicyConfig,
    memory_limit: Tokens,
    protected_budget: Tokens,
    rng: ChaCha8Rng,
}

impl Policy {
    pub fn new(config: PolicyConfig, memory_limit: Tokens) -> Result<Self, PolicyError> {
        config.validate()?;
        // floor((1−α)·M) = M − ceil(α·M); ceiling the product sidesteps
        // float-floor artifacts such as (1.0 − 0.1) * 10.0 < 9.0.
        let protected = memory_limit - ((config.alpha * memory_limit as f64).ceil() as Tokens);
        Ok(Self {
            config,
            memory_limit,
            protected_budget: protected,
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.config.kind
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    /// The instantaneous admission budget `floor((1−α)·M)`.
    pub fn protected_budget(&self) -> Tokens {
        self.protected_budget
    }

    /// Choose this round's admission set from the waiting queue.
    pub fn select(&mut self, view: &SimView) -> PolicyDecision {
        match self.config.kind {
            PolicyKind::Mcsf => {
                projected_prefix(view, SortOrder::PredictedLen, self.protected_budget)
            }
            PolicyKind::McBenchmark => {
                projected_prefix(view, SortOrder::Arrival, self.protected_budget)
            }
            PolicyKind::AlphaProtection | PolicyKind::AlphaBetaClearing => {
                instantaneous_prefix(view, self.protected_budget)
            }
            PolicyKind::Fcfs => instantaneous_prefix(view, view.memory_limit),
        }
    }

    /// Pick the requests to evict after an overflow. `occupancy_round` is the
    /// model round at which the active set exceeded `M`, so request `i` holds
    /// `s_i + occupancy_round − p_i` tokens.
    pub fn handle_overflow(
        &mut self,
        active: &[InFlight],
        occupancy_round: Round,
    ) -> Vec<RequestId> {
        let held = |f: &InFlight| f.request.prompt_size + (occupancy_round - f.start);
        match self.config.kind {
            PolicyKind::AlphaBetaClearing => {
                let mut remaining: Vec<&InFlight> = active.iter().collect();
                let mut evicted = Vec::new();
                loop {
                    let occ: Tokens = remaining.iter().map(|f| held(f)).sum();
                    if occ <= self.memory_limit || remaining.is_empty() {
                        break;
                    }
                    // One independent Bernoulli(β) draw per surviving request;
                    // a pass that clears nobody simply re-draws.
                    remaining.retain(|f| {
                        if self.rng.gen_bool(self.config.beta) {
                            evicted.push(f.request.id);
                            false
                        } else {
                            true
                        }
                    });
                }
                evicted
            }
            // Every greedy variant clears the whole batch.
            _ => active.iter().map(|f| f.request.id).collect(),
        }
    }
}

enum SortOrder {
    PredictedLen,
    Arrival,
}

/// Largest feasible prefix under the forward projection against `budget`
/// tokens, stopping at the first infeasible candidate. Incrementally
/// maintains projected occupancy at every checkpoint of `S ∪ accepted` so
/// each candidate costs one comparison per checkpoint; the decisions match
/// re-running [`crate::kv::is_feasible`] from scratch (covered by a property
/// test).
fn projected_prefix(view: &SimView, order: SortOrder, budget: Tokens) -> PolicyDecision {
    let mut candidates: Vec<&Request> = view.waiting.iter().collect();
    match order {
        SortOrder::PredictedLen => {
            candidates.sort_by_key(|r| (r.predicted_len, r.arrival, r.id));
        }
        SortOrder::Arrival => candidates.sort_by_key(|r| (r.arrival, r.id)),
    }

    let mut ledger = ProjectionLedger::new(view.now, view.in_flight);
    let mut decision = PolicyDecision::default();
    for r in candidates {
        if ledger.try_admit(r, budget, &mut decision.feasibility_evals) {
            decision.admit.push(r.id);
        } else {
            break;
        }
    }
    decision
}

/// Myopic prefix: admit in arrival order while the occupancy after admitting
/// the prompt plus its first token stays within `budget`.
fn instantaneous_prefix(view: &SimView, budget: Tokens) -> PolicyDecision {
    let mut candidates: Vec<&Request> = view.waiting.iter().collect();
    candidates.sort_by_key(|r| (r.arrival, r.id));

    let mut decision = PolicyDecision::default();
    let mut planned = view.occupancy;
    for r in candidates {
        decision.feasibility_evals += 1;
        if planned + r.prompt_size + 1 <= budget {
            planned += r.prompt_size + 1;
            decision.admit.push(r.id);
        } else {
            break;
        }
    }
    decision
}

/// Projected occupancy of `S ∪ accepted` at each of the set's checkpoints.
struct ProjectionLedger {
    now: Round,
    checkpoints: BTreeMap<Round, Tokens>,
    /// `(start, prompt, predicted)` per member, to price new checkpoints.
    members: Vec<(Round, Tokens, Tokens)>,
}

impl ProjectionLedger {
    fn new(now: Round, in_flight: &[InFlight]) -> Self {
        let mut ledger = Self {
            now,
            checkpoints: BTreeMap::new(),
            members: in_flight
                .iter()
                .map(|f| (f.start, f.request.prompt_size, f.request.predicted_len))
                .collect(),
        };
        for f in in_flight {
            let c = f.predicted_completion();
            if c > now {
                ledger.checkpoints.entry(c).or_insert(0);
            }
        }
        let rounds: Vec<Round> = ledger.checkpoints.keys().copied().collect();
        for t in rounds {
            let occ = ledger.occupancy_from_members(t);
            ledger.checkpoints.insert(t, occ);
        }
        ledger
    }

    fn occupancy_from_members(&self, t_prime: Round) -> Tokens {
        self.members
            .iter()
            .map(|&(start, prompt, predicted)| {
                let elapsed = t_prime - start;
                if predicted >= elapsed {
                    prompt + elapsed
                } else {
                    0
                }
            })
            .sum()
    }

    /// Admit `r` starting at `now` if every checkpoint stays within `budget`,
    /// mutating the ledger only on success. Each comparison bumps `evals`.
    fn try_admit(&mut self, r: &Request, budget: Tokens, evals: &mut u64) -> bool {
        let own = self.now + r.predicted_len;
        let contribution = |t: Round| {
            let elapsed = t - self.now;
            if r.predicted_len >= elapsed {
                r.prompt_size + elapsed
            } else {
                0
            }
        };

        let mut own_base = None;
        for (&t, &occ) in &self.checkpoints {
            *evals += 1;
            if occ + contribution(t) > budget {
                return false;
            }
            if t == own {
                own_base = Some(occ);
            }
        }
        if own_base.is_none() {
            let base = self.occupancy_from_members(own);
            *evals += 1;
            if base + contribution(own) > budget {
                return false;
            }
            own_base = Some(base);
        }

        for (&t, occ) in self.checkpoints.iter_mut() {
            *occ += contribution(t);
        }
        self.checkpoints
            .entry(own)
            .or_insert_with(|| own_base.unwrap() + contribution(own));
        self.members.push((self.now, r.prompt_size, r.predicted_len));
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(id: usize, arrival: Round, s: Tokens, predicted: Tokens) -> Request {
        Request {
            id,
            arrival,
            prompt_size: s,
            output_len: predicted,
            predicted_len: predicted,
        }
    }

    fn view<'a>(
        now: Round,
        memory_limit: Tokens,
        occupancy: Tokens,
        in_flight: &'a [InFlight],
        waiting: &'a [Request],
    ) -> SimView<'a> {
        SimView {
            now,
            memory_limit,
            occupancy,
            in_flight,
            waiting,
        }
    }

    #[test]
    fn mcsf_takes_largest_feasible_prefix() {
        // A and B fit together; adding C overflows the shared checkpoint
        // (3 + 3 + 3 = 9 > 6 at t' = 2), so the scan breaks at C.
        let waiting = [req(0, 0, 1, 2), req(1, 0, 1, 2), req(2, 0, 1, 5)];
        let mut policy = Policy::new(PolicyConfig::mcsf(), 6).unwrap();
        let d = policy.select(&view(0, 6, 0, &[], &waiting));
        assert_eq!(d.admit, vec![0, 1]);
    }

    #[test]
    fn mcsf_empty_waiting_set() {
        let mut policy = Policy::new(PolicyConfig::mcsf(), 6).unwrap();
        let d = policy.select(&view(0, 6, 0, &[], &[]));
        assert!(d.admit.is_empty());
    }

    #[test]
    fn mcsf_protection_margin_shrinks_the_projection_budget() {
        // Unprotected, both fit exactly (3 + 3 = 6 at the shared checkpoint);
        // with α = 1/3 the projection works against ⌊(1−α)·6⌋ = 4 and only
        // the first survives.
        let waiting = [req(0, 0, 1, 2), req(1, 0, 1, 2)];
        let mut unprotected = Policy::new(PolicyConfig::mcsf(), 6).unwrap();
        assert_eq!(unprotected.select(&view(0, 6, 0, &[], &waiting)).admit, vec![0, 1]);
        let mut protected = Policy::new(PolicyConfig::mcsf_protected(1.0 / 3.0), 6).unwrap();
        assert_eq!(protected.select(&view(0, 6, 0, &[], &waiting)).admit, vec![0]);
    }

    #[test]
    fn mcsf_admits_single_request_within_budget() {
        let waiting = [req(0, 0, 40, 85)];
        let mut policy = Policy::new(PolicyConfig::mcsf(), 16492).unwrap();
        let d = policy.select(&view(0, 16492, 0, &[], &waiting));
        assert_eq!(d.admit, vec![0]);
    }

    #[test]
    fn mcsf_orders_by_predicted_length_not_queue_position() {
        // Same requests, waiting vector reversed: decision is unchanged.
        let waiting = [req(2, 0, 1, 5), req(1, 0, 1, 2), req(0, 0, 1, 2)];
        let mut policy = Policy::new(PolicyConfig::mcsf(), 6).unwrap();
        let d = policy.select(&view(0, 6, 0, &[], &waiting));
        assert_eq!(d.admit, vec![0, 1]);
    }

    #[test]
    fn mc_benchmark_scans_in_arrival_order() {
        // Arrival order C, A, B. {C} and {C, A} are feasible (occupancy 6 at
        // both checkpoints 2 and 5); adding B overflows checkpoint 2, so the
        // scan breaks there: the long request C crowds out one short.
        let waiting = [req(0, 0, 1, 5), req(1, 0, 1, 2), req(2, 0, 1, 2)];
        let mut policy = Policy::new(PolicyConfig::mc_benchmark(), 6).unwrap();
        let d = policy.select(&view(0, 6, 0, &[], &waiting));
        assert_eq!(d.admit, vec![0, 1]);
    }

    #[test]
    fn mc_benchmark_admits_single_feasible_request() {
        let waiting = [req(0, 0, 2, 3)];
        let mut policy = Policy::new(PolicyConfig::mc_benchmark(), 6).unwrap();
        let d = policy.select(&view(0, 6, 0, &[], &waiting));
        assert_eq!(d.admit, vec![0]);
    }

    #[test]
    fn orders_coincide_when_arrival_matches_predicted_order() {
        let waiting = [req(0, 0, 1, 2), req(1, 1, 1, 3), req(2, 2, 1, 4)];
        let mut mcsf = Policy::new(PolicyConfig::mcsf(), 12).unwrap();
        let mut mcb = Policy::new(PolicyConfig::mc_benchmark(), 12).unwrap();
        let v = view(2, 12, 0, &[], &waiting);
        assert_eq!(mcsf.select(&v).admit, mcb.select(&v).admit);
    }

    #[test]
    fn projection_counts_in_flight_requests() {
        // In-flight request (s=2, predicted 3, started 0) peaks at 5 tokens on
        // round 3; a candidate with s=1, predicted 2 at t=1 adds 3 there.
        let in_flight = [InFlight {
            request: req(0, 0, 2, 3),
            start: 0,
        }];
        let waiting = [req(1, 1, 1, 2)];
        let mut tight = Policy::new(PolicyConfig::mcsf(), 7).unwrap();
        let d = tight.select(&view(1, 7, 3, &in_flight, &waiting));
        assert!(d.admit.is_empty());
        let mut roomy = Policy::new(PolicyConfig::mcsf(), 8).unwrap();
        let d = roomy.select(&view(1, 8, 3, &in_flight, &waiting));
        assert_eq!(d.admit, vec![1]);
    }

    #[test]
    fn alpha_protection_admits_within_protected_budget() {
        let waiting = [req(0, 0, 9, 5), req(1, 0, 9, 5), req(2, 0, 9, 5)];
        let mut policy = Policy::new(PolicyConfig::alpha_protection(0.25), 100).unwrap();
        assert_eq!(policy.protected_budget(), 75);
        let d = policy.select(&view(0, 100, 40, &[], &waiting));
        // 40 + 10 + 10 + 10 = 70 ≤ 75: all three fit.
        assert_eq!(d.admit, vec![0, 1, 2]);
    }

    #[test]
    fn alpha_protection_stops_at_first_failure() {
        let waiting = [
            req(0, 0, 9, 5),
            req(1, 0, 9, 5),
            req(2, 0, 9, 5),
            req(3, 0, 9, 5),
        ];
        let mut policy = Policy::new(PolicyConfig::alpha_protection(0.25), 100).unwrap();
        let d = policy.select(&view(0, 100, 40, &[], &waiting));
        // The fourth would reach 80 > 75.
        assert_eq!(d.admit, vec![0, 1, 2]);
    }

    #[test]
    fn alpha_zero_admits_anything_that_fits() {
        let waiting = [req(0, 0, 3, 2)];
        let mut policy = Policy::new(PolicyConfig::alpha_protection(0.0), 10).unwrap();
        assert_eq!(policy.protected_budget(), 10);
        let d = policy.select(&view(0, 10, 0, &[], &waiting));
        assert_eq!(d.admit, vec![0]);
    }

    #[test]
    fn alpha_protection_admits_nothing_above_threshold() {
        let waiting = [req(0, 0, 1, 1)];
        let mut policy = Policy::new(PolicyConfig::alpha_protection(0.25), 100).unwrap();
        let d = policy.select(&view(0, 100, 76, &[], &waiting));
        assert!(d.admit.is_empty());
    }

    #[test]
    fn fcfs_uses_full_budget() {
        let waiting = [req(0, 0, 9, 5), req(1, 0, 9, 5), req(2, 0, 9, 5)];
        let mut policy = Policy::new(PolicyConfig::fcfs(), 100).unwrap();
        let d = policy.select(&view(0, 100, 75, &[], &waiting));
        // 75 + 10 + 10 = 95 ≤ 100; the third would hit 105.
        assert_eq!(d.admit, vec![0, 1]);
    }

    #[test]
    fn protected_budget_rounds_down_exactly() {
        for (alpha, m, expect) in [
            (0.25, 100, 75),
            (0.1, 10, 9),
            (0.3, 10, 7),
            (0.0, 17, 17),
            (0.5, 7, 3),
        ] {
            let policy = Policy::new(PolicyConfig::alpha_protection(alpha), m).unwrap();
            assert_eq!(policy.protected_budget(), expect, "alpha={alpha} m={m}");
        }
    }

    #[test]
    fn greedy_overflow_clears_everything() {
        let active = [
            InFlight {
                request: req(0, 0, 1, 2),
                start: 0,
            },
            InFlight {
                request: req(1, 0, 1, 2),
                start: 1,
            },
            InFlight {
                request: req(2, 0, 1, 2),
                start: 2,
            },
        ];
        for config in [
            PolicyConfig::alpha_protection(0.25),
            PolicyConfig::fcfs(),
            PolicyConfig::mcsf(),
        ] {
            let mut policy = Policy::new(config, 4).unwrap();
            assert_eq!(policy.handle_overflow(&active, 3), vec![0, 1, 2]);
        }
    }

    #[test]
    fn beta_one_clears_in_a_single_pass() {
        let active = [
            InFlight {
                request: req(0, 0, 3, 2),
                start: 0,
            },
            InFlight {
                request: req(1, 0, 3, 2),
                start: 0,
            },
        ];
        let mut policy = Policy::new(PolicyConfig::alpha_beta_clearing(0.25, 1.0, 7), 4).unwrap();
        let mut evicted = policy.handle_overflow(&active, 2);
        evicted.sort_unstable();
        assert_eq!(evicted, vec![0, 1]);
    }

    #[test]
    fn beta_clearing_is_deterministic_given_seed() {
        let active: Vec<InFlight> = (0..8)
            .map(|id| InFlight {
                request: req(id, 0, 4, 3),
                start: 0,
            })
            .collect();
        let run = |seed| {
            Policy::new(PolicyConfig::alpha_beta_clearing(0.25, 0.5, seed), 20)
                .unwrap()
                .handle_overflow(&active, 2)
        };
        assert_eq!(run(42), run(42));
    }

    #[test]
    fn beta_clearing_stops_once_under_limit() {
        // Each active request holds 5 tokens at round 2; limit 20 means
        // evictions continue until at most four survive.
        let active: Vec<InFlight> = (0..8)
            .map(|id| InFlight {
                request: req(id, 0, 3, 4),
                start: 0,
            })
            .collect();
        for seed in 0..20 {
            let mut policy =
                Policy::new(PolicyConfig::alpha_beta_clearing(0.25, 0.5, seed), 20).unwrap();
            let evicted = policy.handle_overflow(&active, 2);
            assert!(evicted.len() >= 4, "seed {seed} left an overfull batch");
        }
    }

    #[test]
    fn config_validation_rejects_bad_parameters() {
        assert_eq!(
            Policy::new(PolicyConfig::alpha_protection(1.0), 10).unwrap_err(),
            PolicyError::InvalidAlpha(1.0)
        );
        assert_eq!(
            Policy::new(PolicyConfig::alpha_protection(-0.1), 10).unwrap_err(),
            PolicyError::InvalidAlpha(-0.1)
        );
        assert_eq!(
            Policy::new(PolicyConfig::alpha_beta_clearing(0.2, 0.0, 0), 10).unwrap_err(),
            PolicyError::InvalidBeta(0.0)
        );
        assert!(Policy::new(PolicyConfig::alpha_beta_clearing(0.2, 1.0, 0), 10).is_ok());
    }

    #[test]
    fn eval_counter_tracks_checkpoint_comparisons() {
        let waiting = [req(0, 0, 1, 2), req(1, 0, 1, 2), req(2, 0, 1, 5)];
        let mut policy = Policy::new(PolicyConfig::mcsf(), 6).unwrap();
        let d = policy.select(&view(0, 6, 0, &[], &waiting));
        // A: own checkpoint only; B: shared checkpoint; C: fails at the
        // first shared checkpoint. One comparison each.
        assert_eq!(d.feasibility_evals, 3);
    }
}
