//! Forward-looking KV-cache feasibility oracle.
//!
//! Given the in-flight set `S` and a tentative admission set `U` at round `t`,
//! projects future occupancy using *predicted* lengths and checks the budget
//! only at the predicted completion rounds (checkpoints). Between consecutive
//! checkpoints projected occupancy varies linearly, so peaks can only occur
//! there; the exhaustive-scan equivalence is covered by property tests.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Request, Round, Tokens};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KvError {
    #[error("projection must look forward (now={now}, queried t'={at})")]
    ProjectionNotForward { now: Round, at: Round },
}

/// A started request together with its start round; projections use its
/// predicted length, actual release in the engine uses the true length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InFlight {
    pub request: Request,
    pub start: Round,
}

impl InFlight {
    /// Predicted completion round `p + õ`.
    pub fn predicted_completion(&self) -> Round {
        self.start + self.request.predicted_len
    }

    /// Projected occupancy at `t′`: `s + t′ − p` while the request is
    /// predicted to still be running (`õ ≥ t′ − p`, inclusive of the final
    /// round), zero afterwards.
    pub fn projected_at(&self, t_prime: Round) -> Tokens {
        let elapsed = t_prime.saturating_sub(self.start);
        if elapsed > 0 && self.request.predicted_len >= elapsed {
            self.request.prompt_size + elapsed
        } else {
            0
        }
    }
}

/// One feasibility question: may `candidates` all start at round `now` given
/// the in-flight set, within `budget` tokens of KV memory?
#[derive(Debug, Clone, Copy)]
pub struct FeasibilityQuery<'a> {
    pub now: Round,
    pub budget: Tokens,
    pub in_flight: &'a [InFlight],
    pub candidates: &'a [Request],
}

impl<'a> FeasibilityQuery<'a> {
    /// Latest predicted completion over `S ∪ U`, or `now` when both are empty.
    pub fn t_max(&self) -> Round {
        let s = self
            .in_flight
            .iter()
            .map(InFlight::predicted_completion)
            .max()
            .unwrap_or(self.now);
        let u = self
            .candidates
            .iter()
            .map(|r| self.now + r.predicted_len)
            .max()
            .unwrap_or(self.now);
        s.max(u)
    }
}

/// Projected total occupancy at a future round `t′`:
/// `Σ_{i∈S} (s_i + t′ − p_i)·[õ_i ≥ t′ − p_i] + Σ_{i∈U} (s_i + t′ − t)·[õ_i ≥ t′ − t]`.
pub fn projected_occupancy(query: &FeasibilityQuery, t_prime: Round) -> Result<Tokens, KvError> {
    if t_prime <= query.now {
        return Err(KvError::ProjectionNotForward {
            now: query.now,
            at: t_prime,
        });
    }
    let mut total = 0;
    for f in query.in_flight {
        total += f.projected_at(t_prime);
    }
    let candidate_elapsed = t_prime - query.now;
    for r in query.candidates {
        if r.predicted_len >= candidate_elapsed {
            total += r.prompt_size + candidate_elapsed;
        }
    }
    Ok(total)
}

/// Sorted, deduplicated predicted completion rounds of `S ∪ U` (candidates
/// start at `now`), restricted to rounds strictly after `now`.
pub fn checkpoint_rounds(query: &FeasibilityQuery) -> Vec<Round> {
    let mut rounds: Vec<Round> = query
        .in_flight
        .iter()
        .map(InFlight::predicted_completion)
        .chain(query.candidates.iter().map(|r| query.now + r.predicted_len))
        .filter(|&t| t > query.now)
        .collect();
    rounds.sort_unstable();
    rounds.dedup();
    rounds
}

/// True iff projected occupancy stays within budget at every checkpoint.
/// With `U = ∅` this still verifies the in-flight set at its own checkpoints.
pub fn is_feasible(query: &FeasibilityQuery) -> bool {
    checkpoint_rounds(query)
        .into_iter()
        .all(|t| projected_occupancy(query, t).expect("checkpoints are forward") <= query.budget)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(id: usize, s: Tokens, predicted: Tokens) -> Request {
        Request {
            id,
            arrival: 0,
            prompt_size: s,
            output_len: predicted,
            predicted_len: predicted,
        }
    }

    #[test]
    fn projection_two_candidates() {
        let candidates = [req(0, 1, 2), req(1, 1, 2)];
        let q = FeasibilityQuery {
            now: 0,
            budget: 6,
            in_flight: &[],
            candidates: &candidates,
        };
        assert_eq!(projected_occupancy(&q, 2).unwrap(), 6);
    }

    #[test]
    fn projection_in_flight_only() {
        let in_flight = [InFlight {
            request: req(0, 2, 3),
            start: 0,
        }];
        let q = FeasibilityQuery {
            now: 1,
            budget: 10,
            in_flight: &in_flight,
            candidates: &[],
        };
        assert_eq!(projected_occupancy(&q, 3).unwrap(), 5);
        // Indicator fails at t′=4: õ=3 < t′−p=4, memory already released.
        assert_eq!(projected_occupancy(&q, 4).unwrap(), 0);
    }

    #[test]
    fn projection_rejects_non_forward_round() {
        let q = FeasibilityQuery {
            now: 3,
            budget: 4,
            in_flight: &[],
            candidates: &[],
        };
        assert_eq!(
            projected_occupancy(&q, 3),
            Err(KvError::ProjectionNotForward { now: 3, at: 3 })
        );
    }

    #[test]
    fn checkpoints_merge_in_flight_and_candidates() {
        let in_flight = [InFlight {
            request: req(0, 1, 3),
            start: 0,
        }];
        let candidates = [req(1, 1, 2)];
        let q = FeasibilityQuery {
            now: 1,
            budget: 10,
            in_flight: &in_flight,
            candidates: &candidates,
        };
        assert_eq!(checkpoint_rounds(&q), vec![3]);
    }

    #[test]
    fn checkpoints_empty_query() {
        let q = FeasibilityQuery {
            now: 0,
            budget: 1,
            in_flight: &[],
            candidates: &[],
        };
        assert!(checkpoint_rounds(&q).is_empty());
    }

    #[test]
    fn checkpoints_sorted_dedup() {
        let candidates = [req(0, 1, 1), req(1, 1, 4)];
        let q = FeasibilityQuery {
            now: 2,
            budget: 10,
            in_flight: &[],
            candidates: &candidates,
        };
        assert_eq!(checkpoint_rounds(&q), vec![3, 6]);
    }

    #[test]
    fn feasibility_peak_at_shared_checkpoint() {
        let candidates = [req(0, 1, 2), req(1, 1, 2)];
        let mut q = FeasibilityQuery {
            now: 0,
            budget: 6,
            in_flight: &[],
            candidates: &candidates,
        };
        assert!(is_feasible(&q));
        q.budget = 5;
        assert!(!is_feasible(&q));
    }

    #[test]
    fn feasibility_trivial_without_candidates() {
        let in_flight = [InFlight {
            request: req(0, 2, 4),
            start: 0,
        }];
        let q = FeasibilityQuery {
            now: 1,
            budget: 6,
            in_flight: &in_flight,
            candidates: &[],
        };
        // Peak of the in-flight request alone is 2+4 = 6 at its checkpoint.
        assert!(is_feasible(&q));
        let tight = FeasibilityQuery { budget: 5, ..q };
        assert!(!is_feasible(&tight));
    }
}
