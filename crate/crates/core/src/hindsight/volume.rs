//! Memory-volume lower bound for batch instances.
//!
//! Every request that holds `s + k` tokens in its k-th processing round
//! consumes `s·o + o(o+1)/2` token-rounds of memory over its lifetime, and no
//! schedule can process more than `M` token-rounds per round. Relaxing the
//! problem to "pour volumes into rounds of capacity M" yields a fractional
//! assignment problem whose optimum — volumes poured smallest first — is a
//! certified lower bound on total exact latency when every request is present
//! from round zero.

use num::{BigInt, BigRational, Zero};

use crate::model::{Instance, Round, Tokens};

use super::HindsightError;

/// Result of the volume relaxation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumeBound {
    /// Exact optimum of the fractional pouring problem; at most the exact
    /// total latency of any feasible schedule.
    pub value: BigRational,
    /// For each distinct output length `o` (ascending), the first round in
    /// which any volume of a request with that output length is poured.
    pub first_times: Vec<(Tokens, Round)>,
}

/// Exact lower bound on total latency for an instance whose requests all
/// arrive at round zero. Requests with later arrivals make the pouring
/// relaxation unsound, so they are rejected.
pub fn volume_lp_lower_bound(instance: &Instance) -> Result<VolumeBound, HindsightError> {
    for r in instance.requests() {
        if r.arrival != 0 {
            return Err(HindsightError::ArrivalNotZero {
                id: r.id,
                arrival: r.arrival,
            });
        }
    }
    let memory_limit = instance.memory_limit();

    // Pour in ascending volume order: moving any volume unit of a larger
    // request ahead of a smaller one can only increase the objective.
    let mut items: Vec<(Tokens, Tokens)> = instance
        .requests()
        .iter()
        .map(|r| (r.memory_volume(), r.output_len))
        .collect();
    items.sort_unstable();

    let mut value = BigRational::zero();
    let mut first_times: Vec<(Tokens, Round)> = Vec::new();
    let mut consumed: u64 = 0;
    for (volume, output_len) in items {
        let start_round = consumed / memory_limit + 1;
        match first_times.iter_mut().find(|(o, _)| *o == output_len) {
            Some((_, t)) => *t = (*t).min(start_round),
            None => first_times.push((output_len, start_round)),
        }
        let mut remaining = volume;
        while remaining > 0 {
            let round = consumed / memory_limit + 1;
            let room = round * memory_limit - consumed;
            let take = remaining.min(room);
            value += BigRational::new(BigInt::from(round * take), BigInt::from(volume));
            consumed += take;
            remaining -= take;
        }
    }
    first_times.sort_unstable();
    Ok(VolumeBound { value, first_times })
}
