//! Property tests for the forward feasibility oracle: the checkpoint scan
//! must agree with an exhaustive per-round scan, and admission decisions
//! built on top of it must pick maximal prefixes.

use kvsched_core::kv::{checkpoint_rounds, is_feasible, FeasibilityQuery, InFlight};
use kvsched_core::policy::{Policy, PolicyConfig, SimView};
use kvsched_core::{Request, Round, Tokens};
use proptest::prelude::*;

/// Projected occupancy at `t_prime`, written directly from the definition:
/// a request started at `p` holds `s + (t − p)` tokens for `t ∈ (p, p + õ]`
/// and nothing outside that window. Candidates are hypothetically started at
/// `now`.
fn occupancy_by_definition(q: &FeasibilityQuery, t_prime: Round) -> Tokens {
    let running: Tokens = q
        .in_flight
        .iter()
        .map(|f| {
            let elapsed = t_prime - f.start;
            if elapsed > 0 && elapsed <= f.request.predicted_len {
                f.request.prompt_size + elapsed
            } else {
                0
            }
        })
        .sum();
    let admitted: Tokens = q
        .candidates
        .iter()
        .map(|r| {
            let elapsed = t_prime - q.now;
            if elapsed > 0 && elapsed <= r.predicted_len {
                r.prompt_size + elapsed
            } else {
                0
            }
        })
        .sum();
    running + admitted
}

/// Feasibility by brute force: check every single round in `(now, t_max]`.
fn feasible_by_exhaustive_scan(q: &FeasibilityQuery) -> bool {
    (q.now + 1..=q.t_max()).all(|t| occupancy_by_definition(q, t) <= q.budget)
}

fn in_flight_strategy(now: Round) -> impl Strategy<Value = Vec<InFlight>> {
    prop::collection::vec(
        (0..=now, 1u64..8, 1u64..12).prop_map(move |(start, s, pred)| InFlight {
            request: Request::exact(0, 0, s, pred),
            start,
        }),
        0..6,
    )
    .prop_map(|mut v| {
        for (i, f) in v.iter_mut().enumerate() {
            f.request.id = i;
        }
        v
    })
}

fn candidate_strategy() -> impl Strategy<Value = Vec<Request>> {
    prop::collection::vec(
        (1u64..8, 1u64..12).prop_map(|(s, pred)| Request::exact(0, 0, s, pred)),
        0..6,
    )
    .prop_map(|mut v| {
        for (i, r) in v.iter_mut().enumerate() {
            r.id = 100 + i;
        }
        v
    })
}

proptest! {
    /// Checking only the checkpoint rounds is exactly as strong as checking
    /// every round out to the last predicted completion.
    #[test]
    fn checkpoint_scan_matches_exhaustive_scan(
        now in 0u64..20,
        budget in 1u64..60,
        in_flight in in_flight_strategy(19),
        candidates in candidate_strategy(),
    ) {
        let in_flight: Vec<InFlight> =
            in_flight.into_iter().filter(|f| f.start <= now).collect();
        let q = FeasibilityQuery { now, budget, in_flight: &in_flight, candidates: &candidates };
        prop_assert_eq!(is_feasible(&q), feasible_by_exhaustive_scan(&q));
    }

    /// One checkpoint per live request suffices: the work per query is
    /// bounded by the number of requests involved, never by the horizon.
    #[test]
    fn checkpoint_count_is_bounded_by_request_count(
        now in 0u64..20,
        in_flight in in_flight_strategy(19),
        candidates in candidate_strategy(),
    ) {
        let in_flight: Vec<InFlight> =
            in_flight.into_iter().filter(|f| f.start <= now).collect();
        let q = FeasibilityQuery { now, budget: 1, in_flight: &in_flight, candidates: &candidates };
        let checkpoints = checkpoint_rounds(&q);
        prop_assert!(checkpoints.len() <= in_flight.len() + candidates.len());
        prop_assert!(checkpoints.windows(2).all(|w| w[0] < w[1]), "sorted and deduped");
        prop_assert!(checkpoints.iter().all(|&t| t > now));
    }

    /// Feasibility is monotone in the budget and antitone in the candidate
    /// set: more memory never hurts, and a subset of a feasible admission
    /// set stays feasible.
    #[test]
    fn feasibility_is_monotone(
        now in 0u64..20,
        budget in 1u64..60,
        extra in 0u64..40,
        in_flight in in_flight_strategy(19),
        candidates in candidate_strategy(),
    ) {
        let in_flight: Vec<InFlight> =
            in_flight.into_iter().filter(|f| f.start <= now).collect();
        let q = FeasibilityQuery { now, budget, in_flight: &in_flight, candidates: &candidates };
        if is_feasible(&q) {
            let richer = FeasibilityQuery { budget: budget + extra, ..q };
            prop_assert!(is_feasible(&richer));
            for drop in 0..candidates.len() {
                let mut fewer = candidates.clone();
                fewer.remove(drop);
                let sub = FeasibilityQuery { candidates: &fewer, ..q };
                prop_assert!(is_feasible(&sub), "dropping candidate {} broke feasibility", drop);
            }
        }
    }
}

/// The shortest-predicted-first admission order used by the policies below.
fn spt_order(waiting: &[Request]) -> Vec<Request> {
    let mut sorted = waiting.to_vec();
    sorted.sort_by_key(|r| (r.predicted_len, r.arrival, r.id));
    sorted
}

proptest! {
    /// The shortest-first policy admits a *maximal* prefix of its preference
    /// order: every admitted prefix is feasible, and extending by the next
    /// waiting request in order would not be.
    #[test]
    fn shortest_first_prefix_is_maximal(
        now in 0u64..10,
        memory_limit in 8u64..50,
        in_flight in in_flight_strategy(9),
        waiting in candidate_strategy(),
    ) {
        let in_flight: Vec<InFlight> =
            in_flight.into_iter().filter(|f| f.start <= now).collect();
        let occupancy: Tokens = in_flight
            .iter()
            .map(|f| f.request.prompt_size + (now - f.start))
            .sum();
        prop_assume!(occupancy <= memory_limit);

        let mut policy = Policy::new(PolicyConfig::mcsf(), memory_limit).unwrap();
        let view = SimView { now, memory_limit, occupancy, in_flight: &in_flight, waiting: &waiting };
        let decision = policy.select(&view);

        // An in-flight set may already be doomed to overflow in the future
        // (a myopic policy can manufacture such states); nothing more can be
        // admitted on top of it.
        let empty = FeasibilityQuery {
            now,
            budget: memory_limit,
            in_flight: &in_flight,
            candidates: &[],
        };
        if !is_feasible(&empty) {
            prop_assert!(decision.admit.is_empty(), "admitted on top of a doomed in-flight set");
            return Ok(());
        }

        let order = spt_order(&waiting);
        let admitted: Vec<Request> = order
            .iter()
            .filter(|r| decision.admit.contains(&r.id))
            .cloned()
            .collect();
        // The admitted set is a prefix of the preference order.
        prop_assert_eq!(
            admitted.iter().map(|r| r.id).collect::<Vec<_>>(),
            order.iter().take(admitted.len()).map(|r| r.id).collect::<Vec<_>>()
        );
        // The prefix itself is feasible.
        let q = FeasibilityQuery { candidates: &admitted, ..empty };
        prop_assert!(is_feasible(&q));
        // And it is maximal: one more request in order would break it.
        if admitted.len() < order.len() {
            let extended: Vec<Request> = order.iter().take(admitted.len() + 1).cloned().collect();
            let q = FeasibilityQuery { candidates: &extended, ..q };
            prop_assert!(!is_feasible(&q), "prefix of length {} was extensible", admitted.len());
        }
    }

    /// The arrival-order benchmark stops at the *first* infeasible request
    /// rather than skipping past it, and everything before that point is
    /// admitted.
    #[test]
    fn benchmark_policy_admits_a_strict_arrival_prefix(
        now in 0u64..10,
        memory_limit in 8u64..50,
        in_flight in in_flight_strategy(9),
        waiting in candidate_strategy(),
    ) {
        let in_flight: Vec<InFlight> =
            in_flight.into_iter().filter(|f| f.start <= now).collect();
        let occupancy: Tokens = in_flight
            .iter()
            .map(|f| f.request.prompt_size + (now - f.start))
            .sum();
        prop_assume!(occupancy <= memory_limit);

        let mut policy = Policy::new(PolicyConfig::mc_benchmark(), memory_limit).unwrap();
        let view = SimView { now, memory_limit, occupancy, in_flight: &in_flight, waiting: &waiting };
        let decision = policy.select(&view);

        let empty = FeasibilityQuery {
            now,
            budget: memory_limit,
            in_flight: &in_flight,
            candidates: &[],
        };
        if !is_feasible(&empty) {
            prop_assert!(decision.admit.is_empty());
            return Ok(());
        }

        let mut order = waiting.clone();
        order.sort_by_key(|r| (r.arrival, r.id));
        let k = decision.admit.len();
        prop_assert_eq!(
            &decision.admit,
            &order.iter().take(k).map(|r| r.id).collect::<Vec<_>>(),
            "admitted ids must be the arrival-order prefix in order"
        );
        if k < order.len() {
            let extended: Vec<Request> = order.iter().take(k + 1).cloned().collect();
            let q = FeasibilityQuery {
                now,
                budget: memory_limit,
                in_flight: &in_flight,
                candidates: &extended,
            };
            prop_assert!(!is_feasible(&q), "benchmark stopped early at length {}", k);
        }
    }
}
