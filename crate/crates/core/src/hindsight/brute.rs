//! Tiny exhaustive solver used to cross-check the branch-and-bound search.
//!
//! Enumerates every start assignment up to the safe horizon with nothing but
//! an incremental occupancy check, so its only sources of truth are the model
//! definitions themselves. Capped hard at desk scale — exceeding the caps is
//! an error rather than a silent slowdown.

use crate::model::{validate_schedule, Instance, Round, Schedule, Tokens};

use super::{default_start_cap, HindsightError};

const MAX_REQUESTS: usize = 6;
const MAX_START_CAP: Round = 12;

/// Exact optimum found by full enumeration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BruteForceResult {
    pub schedule: Schedule,
    pub tel: u64,
}

/// Enumerate every assignment of starts in `[arrival, start_cap]` and keep
/// the first minimum in lexicographic instance order — the same tie rule the
/// branch-and-bound solver uses, so the two can be compared schedule-for-
/// schedule. Instances with oversized requests (or a genuinely too-small
/// horizon) report `HorizonTooSmall`.
pub fn brute_force_opt(instance: &Instance) -> Result<BruteForceResult, HindsightError> {
    if instance.len() > MAX_REQUESTS {
        return Err(HindsightError::CapExceeded {
            what: "request count",
            got: instance.len() as u64,
            cap: MAX_REQUESTS as u64,
        });
    }
    let start_cap = default_start_cap(instance);
    if start_cap > MAX_START_CAP {
        return Err(HindsightError::CapExceeded {
            what: "start horizon",
            got: start_cap,
            cap: MAX_START_CAP,
        });
    }
    if instance.is_empty() {
        return Ok(BruteForceResult {
            schedule: Schedule::default(),
            tel: 0,
        });
    }

    let reqs = instance.requests();
    let memory_limit = instance.memory_limit();
    let max_output = reqs.iter().map(|r| r.output_len).max().unwrap();
    let mut occ = vec![0u64; (start_cap + max_output + 2) as usize];
    let mut starts = vec![0u64; reqs.len()];
    let mut best: Option<(u64, Vec<Round>)> = None;

    fn dfs(
        k: usize,
        reqs: &[crate::model::Request],
        start_cap: Round,
        memory_limit: Tokens,
        occ: &mut [u64],
        starts: &mut [Round],
        tel: u64,
        best: &mut Option<(u64, Vec<Round>)>,
    ) {
        if k == reqs.len() {
            if best.as_ref().map_or(true, |(t, _)| tel < *t) {
                *best = Some((tel, starts.to_vec()));
            }
            return;
        }
        let r = &reqs[k];
        for tau in r.arrival..=start_cap {
            let fits = (tau + 1..=tau + r.output_len)
                .all(|t| occ[t as usize] + r.prompt_size + (t - tau) <= memory_limit);
            if !fits {
                continue;
            }
            for t in tau + 1..=tau + r.output_len {
                occ[t as usize] += r.prompt_size + (t - tau);
            }
            starts[k] = tau;
            dfs(
                k + 1,
                reqs,
                start_cap,
                memory_limit,
                occ,
                starts,
                tel + (tau + r.output_len - r.arrival),
                best,
            );
            for t in tau + 1..=tau + r.output_len {
                occ[t as usize] -= r.prompt_size + (t - tau);
            }
        }
    }

    dfs(
        0,
        reqs,
        start_cap,
        memory_limit,
        &mut occ,
        &mut starts,
        0,
        &mut best,
    );

    let Some((tel, starts)) = best else {
        return Err(HindsightError::HorizonTooSmall { start_cap });
    };
    let mut schedule = Schedule::default();
    for (k, &tau) in starts.iter().enumerate() {
        schedule.set_start(reqs[k].id, tau);
    }
    let validation = validate_schedule(&schedule, instance);
    assert!(validation.is_ok(), "enumerated optimum failed validation");
    Ok(BruteForceResult { schedule, tel })
}
