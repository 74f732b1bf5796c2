//! Depth-first branch-and-bound over start times.
//!
//! The search runs in two phases. *Heavy* requests — peak memory above
//! `M/2`, hence pairwise conflicting — are placed first by enumerating their
//! completion order: whenever `j` completes after `i`, feasibility forces
//! `c_j ≥ c_i + min(o_j, peak_i + peak_j − M)` (at round `c_i` request `i`
//! holds its full peak, so `j` is either still ramping — pushed out by the
//! overlap excess — or has not started). Branching on "which heavy completes
//! next, and when" keeps that separation chain anchored at every node.
//! Remaining *light* requests are then fixed in (arrival, output length
//! descending, prompt size descending, id) order with candidate starts
//! scanned ascending.
//!
//! Pruning combines:
//!
//! * a *chain bound* — a Held–Karp table over subsets of the heavy clique
//!   gives, in O(1), the cheapest separation staircase any completion order
//!   of the remaining heavies can achieve above the current anchor;
//! * a *scan bound* — with request `k` at start `τ`, any completion costs at
//!   least `fixed + (τ + o_k − a_k)` plus the unfixed chain (heavy phase) or
//!   `Σ o` (light phase), monotone in `τ`, so scans break at the incumbent;
//! * a *price bound* — a Lagrangian relaxation of the per-round memory rows
//!   plus a ladder of concurrency rows: at any round at most `c` requests
//!   can each hold `⌊M/(c+1)⌋ + 1` or more tokens. Subgradient ascent at the
//!   root finds per-round prices for all rows; with the rows priced into the
//!   objective each request independently picks its cheapest start, so the
//!   per-request minima give an O(1) node bound. Prices are floored onto a
//!   fixed-point grid and all bound comparisons run in exact integer
//!   arithmetic — the float ascent only *chooses* the prices, it is never
//!   trusted for pruning;
//! * a *water-filling bound* — each unfixed request's memory volume must fit
//!   under the cumulative capacity `t·M` left over by fixed occupancy.
//!   Pouring volumes smallest-first yields times `t_(k)` such that the k-th
//!   smallest unfixed completion is at least `max(t_(k), (a+o)_(k))`.
//!
//! Only strict improvements are accepted, so on a tie the solver returns the
//! greedy seed schedule (itself deterministic); the reported objective value
//! is exact either way.

use std::time::Instant;

use crate::engine::{self, DurationModel, RunOptions};
use crate::model::{Instance, Request, Round, Schedule, Tokens};
use crate::policy::PolicyConfig;

use super::{default_start_cap, BoundReport, HindsightError, IpSolution, SolveOptions};

/// Fixed-point scale for quantized memory prices. Floor-quantizing keeps
/// every price valid (`λ ≥ 0`), so integer bounds stay true lower bounds.
const PRICE_SCALE: i64 = 1 << 20;
const SUBGRADIENT_ITERS: usize = 20_000;
/// Rough operation allowance for the whole subgradient ascent (reduced-cost
/// scans dominate); keeps root pricing under about a second at any scale.
const PRICE_OPS_BUDGET: u64 = 150_000_000;
/// Concurrency rows are generated for caps `1..=LADDER_RUNGS` (deduplicated
/// by threshold); higher caps have thresholds too small to matter.
const LADDER_RUNGS: u64 = 16;
/// Cap on the heavy clique tracked by the sequencing DP (it is `O(2^k·k²)`);
/// heavies past the cap are handled like lights, which stays valid.
const SEQ_MAX: usize = 16;

pub(super) fn solve(
    instance: &Instance,
    options: SolveOptions,
) -> Result<IpSolution, HindsightError> {
    let memory_limit = instance.memory_limit();
    for r in instance.requests() {
        if r.peak_memory() > memory_limit {
            return Err(HindsightError::RequestTooLarge {
                id: r.id,
                needed: r.peak_memory(),
                limit: memory_limit,
            });
        }
    }
    let start_cap = options.start_cap.unwrap_or_else(|| default_start_cap(instance));
    if instance.requests().iter().any(|r| r.arrival > start_cap) {
        return Err(HindsightError::HorizonTooSmall { start_cap });
    }
    if instance.is_empty() {
        return Ok(IpSolution {
            schedule: Schedule::default(),
            tel: 0,
            bounds: BoundReport {
                lower: 0.0,
                upper: 0,
                optimal: true,
                nodes_explored: 0,
                budget_exhausted: false,
            },
        });
    }

    // Node-budget mode never consults the wall clock, so budget-limited
    // solves stay reproducible; wall-clock mode is for interactive use.
    let deadline = match options.node_budget {
        Some(_) => None,
        None => Some(Instant::now() + options.time_budget),
    };
    let price_deadline = deadline.map(|_| Instant::now() + options.time_budget / 4);

    let mut ordered: Vec<Request> = instance.requests().to_vec();
    ordered.sort_unstable_by_key(|r| {
        (
            r.arrival,
            std::cmp::Reverse(r.output_len),
            std::cmp::Reverse(r.prompt_size),
            r.id,
        )
    });
    let reqs: &[Request] = &ordered;
    let n = reqs.len();
    let longest = reqs.iter().map(|r| r.output_len).max().unwrap_or(0);
    let horizon = start_cap + longest;

    let policy_seed = seed_incumbent(instance, start_cap)
        .map(|(_, schedule)| improve_incumbent(reqs, memory_limit, horizon, &schedule));
    let restart_seed = restart_heuristic(reqs, memory_limit, start_cap, horizon);
    let seed = match (policy_seed, restart_seed) {
        (Some(a), Some(b)) => Some(if b.0 < a.0 { b } else { a }),
        (a, b) => a.or(b),
    };

    let upper = seed.as_ref().map_or(u64::MAX, |(tel, _)| *tel);
    let prices = optimize_prices(reqs, memory_limit, start_cap, horizon, upper, price_deadline);
    let tables = PriceTables::build(reqs, &prices, memory_limit, start_cap, horizon);
    let seq = SeqTables::build(reqs, memory_limit);

    // Static tables over the lights (everything outside the heavy clique),
    // in branching order.
    let lights: Vec<usize> = (0..n).filter(|k| !seq.members.contains(k)).collect();
    let nl = lights.len();
    let mut l_suffix_o = vec![0u64; nl + 1];
    let mut l_suffix_arr = vec![0u64; nl + 1];
    for i in (0..nl).rev() {
        l_suffix_o[i] = l_suffix_o[i + 1] + reqs[lights[i]].output_len;
        l_suffix_arr[i] = l_suffix_arr[i + 1] + reqs[lights[i]].arrival;
    }
    let sorted_suffix = |key: fn(&Request) -> u64| -> Vec<Vec<u64>> {
        (0..=nl)
            .map(|i| {
                let mut v: Vec<u64> = lights[i..].iter().map(|&k| key(&reqs[k])).collect();
                v.sort_unstable();
                v
            })
            .collect()
    };
    let l_suffix_vols = sorted_suffix(|r| r.memory_volume());
    let l_suffix_ao = sorted_suffix(|r| r.arrival + r.output_len);
    let l_same_prev: Vec<bool> = (0..nl)
        .map(|i| {
            i > 0 && {
                let (a, b) = (reqs[lights[i - 1]], reqs[lights[i]]);
                (a.arrival, a.prompt_size, a.output_len)
                    == (b.arrival, b.prompt_size, b.output_len)
            }
        })
        .collect();

    let full_mask = (1usize << seq.members.len()) - 1;
    let heavy_arr: u64 = seq.members.iter().map(|&k| reqs[k].arrival).sum();
    let remaining_priced: i64 = tables.min0.iter().sum();

    let mut search = Search {
        reqs,
        memory_limit,
        start_cap,
        occ: vec![0; horizon as usize + 2],
        start_of: vec![Round::MAX; n],
        fixed_tel: 0,
        fixed_priced: 0,
        remaining_priced,
        rem_heavy_arr: heavy_arr,
        seq,
        lights,
        l_suffix_o,
        l_suffix_arr,
        l_suffix_vols,
        l_suffix_ao,
        l_same_prev,
        tables,
        best_tel: upper,
        best: None,
        nodes: 0,
        node_budget: options.node_budget.unwrap_or(u64::MAX),
        deadline,
        budget_exhausted: false,
        wf_vols: Vec::with_capacity(SEQ_MAX),
        wf_aos: Vec::with_capacity(SEQ_MAX),
    };
    let chain_root = search
        .seq
        .chain(full_mask, None, 0)
        .saturating_sub(heavy_arr)
        + search.l_suffix_o[0];
    let root_lower = water_filling_root(reqs, memory_limit)
        .max(search.price_bound_at_root())
        .max(chain_root)
        .min(upper);
    // A root bound meeting the incumbent already proves it optimal; strict
    // improvement is impossible, so skip the search.
    if root_lower < upper {
        search.dfs_heavy(full_mask, None, 0);
    }

    let optimal = !search.budget_exhausted;
    let lower = if optimal {
        search.best_tel as f64
    } else {
        root_lower as f64
    };
    let nodes_explored = search.nodes;
    let budget_exhausted = search.budget_exhausted;
    let make_bounds = move |upper: u64| BoundReport {
        lower,
        upper,
        optimal,
        nodes_explored,
        budget_exhausted,
    };
    match (search.best.take(), seed) {
        (Some(starts), _) => {
            let mut schedule = Schedule::default();
            for (k, &p) in starts.iter().enumerate() {
                schedule.set_start(reqs[k].id, p);
            }
            Ok(IpSolution {
                tel: search.best_tel,
                bounds: make_bounds(search.best_tel),
                schedule,
            })
        }
        // The search never strictly beat the greedy seed: on a completed
        // search the seed is optimal, on a timeout it is the incumbent.
        (None, Some((tel, schedule))) => Ok(IpSolution {
            tel,
            bounds: make_bounds(tel),
            schedule,
        }),
        (None, None) if budget_exhausted => Err(HindsightError::NoIncumbent),
        (None, None) => Err(HindsightError::HorizonTooSmall { start_cap }),
    }
}

/// Best of the two projection policies on an exact-prediction copy; both are
/// overflow-free there, so they terminate whenever every request fits alone.
fn seed_incumbent(instance: &Instance, start_cap: Round) -> Option<(u64, Schedule)> {
    let exact = instance.with_exact_predictions();
    let mut seed: Option<(u64, Schedule)> = None;
    for config in [PolicyConfig::mcsf(), PolicyConfig::mc_benchmark()] {
        let report = engine::run_with_options(
            &exact,
            config,
            DurationModel::Unit,
            RunOptions {
                horizon_cap: None,
                log_tokens: false,
            },
        )
        .expect("projection policies cannot livelock when every request fits alone");
        let within_cap = report.schedule.iter().all(|(_, p)| p <= start_cap);
        if within_cap && seed.as_ref().map_or(true, |(tel, _)| report.metrics.tel < *tel) {
            seed = Some((report.metrics.tel, report.schedule));
        }
    }
    seed
}

/// Number of randomized list-scheduling restarts used to seed the incumbent;
/// drawn from a fixed-seed generator so solves stay deterministic.
const RESTARTS: u64 = 4000;

/// Earliest feasible start for `r` against the given occupancy, if one
/// exists by `max_start` (always true under the default start cap, which
/// leaves room for a fully serial schedule).
fn earliest_fit(occ: &[u64], r: &Request, limit: Tokens, max_start: Round) -> Option<Round> {
    (r.arrival..=max_start).find(|&tau| {
        (tau + 1..=tau + r.output_len)
            .all(|t| occ[t as usize] + r.prompt_size + (t - tau) <= limit)
    })
}

/// List scheduling: place requests at their earliest feasible start in the
/// given priority order, plus the total latency of the result.
fn list_schedule(
    order: &[usize],
    reqs: &[Request],
    limit: Tokens,
    max_start: Round,
    occ: &mut [u64],
) -> Option<(u64, Vec<Round>)> {
    occ.fill(0);
    let mut starts = vec![0; reqs.len()];
    let mut tel = 0u64;
    for &k in order {
        let r = &reqs[k];
        let tau = earliest_fit(occ, r, limit, max_start)?;
        for t in tau + 1..=tau + r.output_len {
            occ[t as usize] += r.prompt_size + (t - tau);
        }
        starts[k] = tau;
        tel += tau + r.output_len - r.arrival;
    }
    Some((tel, starts))
}

/// Seed incumbents beyond the projection policies: list scheduling under a
/// few size-ordered priorities plus randomized restarts (alternating plain
/// shuffles with volume orders under multiplicative jitter). The generator
/// seed is fixed, so the result is a pure function of the instance.
fn restart_heuristic(
    reqs: &[Request],
    memory_limit: Tokens,
    start_cap: Round,
    horizon: Round,
) -> Option<(u64, Schedule)> {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    // Room for one request past the serial makespan, the worst case for
    // earliest-fit placement.
    let mut occ = vec![0u64; horizon as usize + 2];
    let mut best: Option<(u64, Vec<Round>)> = None;
    let mut consider = |cand: Option<(u64, Vec<Round>)>| {
        if let Some(cand) = cand {
            if best.as_ref().is_none_or(|(tel, _)| cand.0 < *tel) {
                best = Some(cand);
            }
        }
    };
    let mut order: Vec<usize> = (0..reqs.len()).collect();
    for key in 0..3 {
        match key {
            0 => order.sort_unstable_by_key(|&k| (reqs[k].memory_volume(), k)),
            1 => order.sort_unstable_by_key(|&k| (reqs[k].output_len, k)),
            _ => order.sort_unstable_by_key(|&k| (reqs[k].peak_memory(), k)),
        }
        consider(list_schedule(&order, reqs, memory_limit, start_cap, &mut occ));
    }
    let mut rng = rand::rngs::StdRng::seed_from_u64(0x5eed);
    for it in 0..RESTARTS {
        if it % 3 == 0 {
            order.shuffle(&mut rng);
        } else {
            let jitter: Vec<f64> = reqs
                .iter()
                .map(|r| r.memory_volume() as f64 * rng.gen_range(0.6..1.4))
                .collect();
            order.sort_unstable_by(|&a, &b| jitter[a].total_cmp(&jitter[b]));
        }
        consider(list_schedule(&order, reqs, memory_limit, start_cap, &mut occ));
    }
    let (_, starts) = best?;
    let mut schedule = Schedule::default();
    for (r, &tau) in reqs.iter().zip(&starts) {
        schedule.set_start(r.id, tau);
    }
    let improved = improve_incumbent(reqs, memory_limit, horizon, &schedule);
    Some(improved)
}

/// Compact a schedule to a local optimum: repeatedly lift each request out
/// and re-insert it at its earliest feasible start. Starts only decrease, so
/// the loop terminates; the visit order is fixed, so the result is
/// deterministic.
fn improve_incumbent(
    reqs: &[Request],
    memory_limit: Tokens,
    horizon: Round,
    schedule: &Schedule,
) -> (u64, Schedule) {
    let mut starts: Vec<Round> = reqs
        .iter()
        .map(|r| schedule.start(r.id).expect("seed schedules every request"))
        .collect();
    let mut occ = vec![0u64; horizon as usize + 2];
    for (k, r) in reqs.iter().enumerate() {
        for t in starts[k] + 1..=starts[k] + r.output_len {
            occ[t as usize] += r.prompt_size + (t - starts[k]);
        }
    }
    let mut order: Vec<usize> = (0..reqs.len()).collect();
    loop {
        // Latest-first gives earlier requests room to slide back first.
        order.sort_unstable_by_key(|&k| (std::cmp::Reverse(starts[k]), k));
        let mut moved = false;
        for &k in &order {
            let r = reqs[k];
            for t in starts[k] + 1..=starts[k] + r.output_len {
                occ[t as usize] -= r.prompt_size + (t - starts[k]);
            }
            let tau = (r.arrival..)
                .find(|&tau| {
                    (tau + 1..=tau + r.output_len)
                        .all(|t| occ[t as usize] + r.prompt_size + (t - tau) <= memory_limit)
                })
                .expect("the seed start itself is feasible");
            moved |= tau < starts[k];
            starts[k] = starts[k].min(tau);
            for t in starts[k] + 1..=starts[k] + r.output_len {
                occ[t as usize] += r.prompt_size + (t - starts[k]);
            }
        }
        if !moved {
            break;
        }
    }
    let tel = reqs
        .iter()
        .zip(&starts)
        .map(|(r, &tau)| tau + r.output_len - r.arrival)
        .sum();
    let mut out = Schedule::default();
    for (r, &tau) in reqs.iter().zip(&starts) {
        out.set_start(r.id, tau);
    }
    (tel, out)
}

/// Separation forced on `j`'s completion when it completes after `i`'s:
/// either `j` is still ramping at round `c_i` — where `i` holds its full peak,
/// so `j`'s tail is pushed `peak_i + peak_j − M` rounds past `c_i` — or `j`
/// has not even started, costing a full `o_j`.
fn pair_separation(i: &Request, j: &Request, memory_limit: Tokens) -> u64 {
    j.output_len
        .min((i.peak_memory() + j.peak_memory()).saturating_sub(memory_limit))
}

/// Pairwise-separation machinery over the heavy clique (peak above `M/2`,
/// hence pairwise conflicting; a light member would offer completion orders
/// a near-free link and dilute every bound).
struct SeqTables {
    /// Indices into the branching order, ascending; at most [`SEQ_MAX`].
    members: Vec<usize>,
    /// `sep[i][j]`: separation forced on `j` when it completes after `i`.
    sep: Vec<Vec<u64>>,
    /// `a + o` per member.
    ao: Vec<u64>,
    /// Previous member with identical (arrival, prompt, output), if any:
    /// completion orders are searched with identical members index-ascending.
    ident_prev: Vec<Option<usize>>,
    /// `g[mask][front]` = cheapest separation staircase over the order tail
    /// `mask` whose earliest completion is `front`, weights = tail sizes:
    /// ordering completions of `S` as `c_π(1) < … < c_π(m)` costs
    /// `Σ_S c ≥ m·c_π(1) + Σ_k (m−k+1)·sep_k`, and the sweep minimizes the
    /// separation part over all orders of every subset at once.
    g: Vec<Vec<u64>>,
}

impl SeqTables {
    fn build(reqs: &[Request], memory_limit: Tokens) -> Self {
        let mut by_peak: Vec<usize> = (0..reqs.len())
            .filter(|&i| 2 * reqs[i].peak_memory() > memory_limit)
            .collect();
        by_peak.sort_unstable_by_key(|&i| (std::cmp::Reverse(reqs[i].peak_memory()), i));
        let mut members: Vec<usize> = by_peak.into_iter().take(SEQ_MAX).collect();
        members.sort_unstable();
        let m = members.len();
        let sep: Vec<Vec<u64>> = members
            .iter()
            .map(|&i| {
                members
                    .iter()
                    .map(|&j| pair_separation(&reqs[i], &reqs[j], memory_limit))
                    .collect()
            })
            .collect();
        let ao: Vec<u64> = members
            .iter()
            .map(|&k| reqs[k].arrival + reqs[k].output_len)
            .collect();
        let ident_prev: Vec<Option<usize>> = (0..m)
            .map(|b| {
                let r = reqs[members[b]];
                (0..b).rev().find(|&p| {
                    let q = reqs[members[p]];
                    (q.arrival, q.prompt_size, q.output_len)
                        == (r.arrival, r.prompt_size, r.output_len)
                })
            })
            .collect();
        let mut g = vec![vec![u64::MAX; m.max(1)]; 1usize << m];
        for j in 0..m {
            g[1 << j][j] = 0;
        }
        for mask in 1usize..(1 << m) {
            let count = mask.count_ones() as u64;
            for front in 0..m {
                let cost = g[mask][front];
                if mask & (1 << front) == 0 || cost == u64::MAX {
                    continue;
                }
                for i in 0..m {
                    if mask & (1 << i) == 0 {
                        let cand = cost + count * sep[i][front];
                        let slot = &mut g[mask | (1 << i)][i];
                        if cand < *slot {
                            *slot = cand;
                        }
                    }
                }
            }
        }
        Self {
            members,
            sep,
            ao,
            ident_prev,
            g,
        }
    }

    /// Lower bound on `Σ c` over the members of `mask` when all of them
    /// complete after `anchor`, the completion round of placed member `last`.
    fn chain(&self, mask: usize, last: Option<usize>, anchor: u64) -> u64 {
        if mask == 0 {
            return 0;
        }
        let count = mask.count_ones() as u64;
        let mut best = u64::MAX;
        for front in 0..self.members.len() {
            if mask & (1 << front) == 0 {
                continue;
            }
            let first = match last {
                Some(l) => self.ao[front].max(anchor + self.sep[l][front]),
                None => self.ao[front],
            };
            best = best.min(self.g[mask][front] + count * first);
        }
        best
    }
}

/// One rung of the concurrency ladder: at any round at most `cap` requests
/// can each hold `threshold` or more tokens, because `cap + 1` such holdings
/// would sum past the memory limit.
struct Rung {
    threshold: Tokens,
    cap: u64,
    /// Quantized per-round prices for this rung's rows.
    nu: Vec<u64>,
}

/// Quantized dual prices: one memory price per round plus the ladder rungs.
struct DualPrices {
    mem: Vec<u64>,
    rungs: Vec<Rung>,
}

/// Thresholds/caps of the ladder rows worth pricing: caps `1..=LADDER_RUNGS`,
/// deduplicated (thresholds repeat once `M/(c+1)` stops moving) and dropped
/// when no request can ever reach them.
fn rung_shape(memory_limit: Tokens, reqs: &[Request]) -> Vec<(Tokens, u64)> {
    let tallest = reqs.iter().map(|r| r.peak_memory()).max().unwrap_or(0);
    let mut shape: Vec<(Tokens, u64)> = Vec::new();
    for cap in 1..=LADDER_RUNGS {
        let threshold = memory_limit / (cap + 1) + 1;
        if threshold < 2 || threshold > tallest {
            continue;
        }
        if shape.last().is_none_or(|&(h, _)| h != threshold) {
            shape.push((threshold, memory_limit / threshold));
        }
    }
    shape
}

/// Subgradient ascent on the Lagrangian dual of the memory and ladder rows.
/// Returns per-round prices floored onto the fixed-point grid. Pure float
/// heuristic: any nonnegative prices yield a valid bound, so accuracy only
/// affects pruning power.
fn optimize_prices(
    reqs: &[Request],
    memory_limit: Tokens,
    start_cap: Round,
    horizon: Round,
    upper: u64,
    deadline: Option<Instant>,
) -> DualPrices {
    let rounds = horizon as usize;
    let shape = rung_shape(memory_limit, reqs);
    let quantize = |v: &f64| (v * PRICE_SCALE as f64).floor().max(0.0) as u64;
    let mut lambda = vec![0f64; rounds + 1];
    let mut nus = vec![vec![0f64; rounds + 1]; shape.len()];
    // Deterministic iteration cap: scale the ascent to the instance so its
    // cost stays near-constant without consulting the wall clock.
    let per_iter_ops: u64 = reqs
        .iter()
        .map(|r| start_cap - r.arrival + 1)
        .sum::<u64>()
        + (rounds as u64) * (1 + shape.len() as u64);
    let iter_cap = (PRICE_OPS_BUDGET / per_iter_ops.max(1))
        .clamp(200, SUBGRADIENT_ITERS as u64) as usize;
    if upper != u64::MAX {
        // Window offsets: request `i` holds ≥ threshold `l` from elapsed
        // round `offs[i][l]` on (window empty when that exceeds `o_i`).
        let offs: Vec<Vec<u64>> = reqs
            .iter()
            .map(|r| {
                shape
                    .iter()
                    .map(|&(h, _)| 1.max(h.saturating_sub(r.prompt_size)))
                    .collect()
            })
            .collect();
        let mut best_value = f64::NEG_INFINITY;
        let mut best = (lambda.clone(), nus.clone());
        let mut mu = 2.0f64;
        let mut stall = 0u32;
        let mut p1 = vec![0f64; rounds + 2];
        let mut pu = vec![0f64; rounds + 2];
        let mut pv = vec![vec![0f64; rounds + 2]; shape.len()];
        let mut grad_l = vec![0f64; rounds + 1];
        let mut grad_n = vec![vec![0f64; rounds + 1]; shape.len()];
        let mut mins = vec![0u64; reqs.len()];
        for iter in 0..iter_cap {
            if iter & 63 == 0 {
                if let Some(deadline) = deadline {
                    if Instant::now() >= deadline {
                        break;
                    }
                }
            }
            for t in 1..=rounds {
                p1[t] = p1[t - 1] + lambda[t];
                pu[t] = pu[t - 1] + t as f64 * lambda[t];
            }
            for (l, nu) in nus.iter().enumerate() {
                for t in 1..=rounds {
                    pv[l][t] = pv[l][t - 1] + nu[t];
                }
            }
            let mut value = -(memory_limit as f64) * p1[rounds];
            for (l, &(_, cap)) in shape.iter().enumerate() {
                value -= cap as f64 * pv[l][rounds];
            }
            for (i, r) in reqs.iter().enumerate() {
                let mut best_rc = f64::INFINITY;
                let mut best_tau = r.arrival;
                for tau in r.arrival..=start_cap {
                    let end = (tau + r.output_len) as usize;
                    let s1 = p1[end] - p1[tau as usize];
                    let su = pu[end] - pu[tau as usize];
                    let mut rc = (tau + r.output_len - r.arrival) as f64
                        + (r.prompt_size as f64 - tau as f64) * s1
                        + su;
                    for (l, &d) in offs[i].iter().enumerate() {
                        if d <= r.output_len {
                            rc += pv[l][end] - pv[l][(tau + d - 1) as usize];
                        }
                    }
                    if rc < best_rc {
                        best_rc = rc;
                        best_tau = tau;
                    }
                }
                value += best_rc;
                mins[i] = best_tau;
            }
            if value > best_value {
                best_value = value;
                best.0.clone_from_slice(&lambda);
                best.1.clone_from(&nus);
                stall = 0;
            } else {
                stall += 1;
                if stall >= 50 {
                    mu *= 0.5;
                    stall = 0;
                }
            }
            // A dual within one unit of the incumbent already closes the root
            // (only strict improvements are searched for).
            if best_value >= upper as f64 - 1.0 + 1e-3 || mu < 1e-8 {
                break;
            }
            for g in grad_l.iter_mut() {
                *g = -(memory_limit as f64);
            }
            for (l, &(_, cap)) in shape.iter().enumerate() {
                for g in grad_n[l].iter_mut() {
                    *g = -(cap as f64);
                }
            }
            for (i, r) in reqs.iter().enumerate() {
                let tau = mins[i];
                for t in tau + 1..=tau + r.output_len {
                    grad_l[t as usize] += (r.prompt_size + t - tau) as f64;
                }
                for (l, &d) in offs[i].iter().enumerate() {
                    if d <= r.output_len {
                        for t in tau + d..=tau + r.output_len {
                            grad_n[l][t as usize] += 1.0;
                        }
                    }
                }
            }
            // Projection-aware norm: rows already at price zero with negative
            // slope cannot move, so they must not dilute the step size.
            let mut norm = 0.0f64;
            for t in 1..=rounds {
                if lambda[t] <= 0.0 && grad_l[t] < 0.0 {
                    grad_l[t] = 0.0;
                }
                norm += grad_l[t] * grad_l[t];
            }
            for (l, gn) in grad_n.iter_mut().enumerate() {
                for t in 1..=rounds {
                    if nus[l][t] <= 0.0 && gn[t] < 0.0 {
                        gn[t] = 0.0;
                    }
                    norm += gn[t] * gn[t];
                }
            }
            if norm == 0.0 {
                break;
            }
            let theta = mu * (upper as f64 - value).max(1.0) / norm;
            for t in 1..=rounds {
                lambda[t] = (lambda[t] + theta * grad_l[t]).max(0.0);
            }
            for (l, gn) in grad_n.iter().enumerate() {
                for t in 1..=rounds {
                    nus[l][t] = (nus[l][t] + theta * gn[t]).max(0.0);
                }
            }
        }
        (lambda, nus) = best;
    }
    DualPrices {
        mem: lambda.iter().map(quantize).collect(),
        rungs: shape
            .iter()
            .zip(&nus)
            .map(|(&(threshold, cap), nu)| Rung {
                threshold,
                cap,
                nu: nu.iter().map(quantize).collect(),
            })
            .collect(),
    }
}

/// Exact integer machinery derived from the quantized prices.
struct PriceTables {
    /// `priced[k][τ − a_k]` = scaled start cost of request `k` at `τ`:
    /// `SCALE·(τ + o − a)` plus the priced memory and ladder rows it hits.
    priced: Vec<Vec<i64>>,
    /// `min0[k]` = cheapest priced start of request `k`.
    min0: Vec<i64>,
    /// `SCALE`-weighted price mass bought back: `M·Σ_t λ̂_t + Σ_l c_l·Σ_t ν̂_t`.
    budget: i64,
}

impl PriceTables {
    fn build(
        reqs: &[Request],
        prices: &DualPrices,
        memory_limit: Tokens,
        start_cap: Round,
        horizon: Round,
    ) -> Self {
        let rounds = horizon as usize;
        let mut p1 = vec![0i64; rounds + 2];
        let mut pu = vec![0i64; rounds + 2];
        for t in 1..=rounds {
            p1[t] = p1[t - 1] + prices.mem[t] as i64;
            pu[t] = pu[t - 1] + t as i64 * prices.mem[t] as i64;
        }
        let pv: Vec<Vec<i64>> = prices
            .rungs
            .iter()
            .map(|rung| {
                let mut p = vec![0i64; rounds + 2];
                for t in 1..=rounds {
                    p[t] = p[t - 1] + rung.nu[t] as i64;
                }
                p
            })
            .collect();
        let mut priced = Vec::with_capacity(reqs.len());
        let mut min0 = Vec::with_capacity(reqs.len());
        for r in reqs {
            let costs: Vec<i64> = (r.arrival..=start_cap)
                .map(|tau| {
                    let end = (tau + r.output_len) as usize;
                    let s1 = p1[end] - p1[tau as usize];
                    let su = pu[end] - pu[tau as usize];
                    let mut cost = PRICE_SCALE * (tau + r.output_len - r.arrival) as i64
                        + (r.prompt_size as i64 - tau as i64) * s1
                        + su;
                    for (l, rung) in prices.rungs.iter().enumerate() {
                        let d = 1.max(rung.threshold.saturating_sub(r.prompt_size));
                        if d <= r.output_len {
                            cost += pv[l][end] - pv[l][(tau + d - 1) as usize];
                        }
                    }
                    cost
                })
                .collect();
            min0.push(costs.iter().copied().min().expect("non-empty start range"));
            priced.push(costs);
        }
        let mut budget = memory_limit as i64 * p1[rounds];
        for (l, rung) in prices.rungs.iter().enumerate() {
            budget += rung.cap as i64 * pv[l][rounds];
        }
        Self {
            priced,
            min0,
            budget,
        }
    }
}

/// Water-filling over the whole instance against an empty machine; used for
/// the root report only (per-node pours run against fixed occupancy).
fn water_filling_root(reqs: &[Request], memory_limit: Tokens) -> u64 {
    let mut vols: Vec<u64> = reqs.iter().map(|r| r.memory_volume()).collect();
    vols.sort_unstable();
    let mut aos: Vec<u64> = reqs.iter().map(|r| r.arrival + r.output_len).collect();
    aos.sort_unstable();
    let arrivals: u64 = reqs.iter().map(|r| r.arrival).sum();
    let mut bound = 0u64;
    let mut poured = 0u64;
    let mut t = 0u64;
    for (i, &vol) in vols.iter().enumerate() {
        poured += vol;
        t = t.max(poured.div_ceil(memory_limit));
        bound += t.max(aos[i]);
    }
    bound.saturating_sub(arrivals)
}

struct Search<'a> {
    reqs: &'a [Request],
    memory_limit: Tokens,
    start_cap: Round,
    /// Occupancy per round from fixed requests only.
    occ: Vec<Tokens>,
    /// Start per request in branching order; `Round::MAX` while unfixed.
    start_of: Vec<Round>,
    fixed_tel: u64,
    /// Σ priced start costs of the fixed requests (scaled).
    fixed_priced: i64,
    /// Σ cheapest priced start over the unfixed requests (scaled).
    remaining_priced: i64,
    /// Σ arrivals over the unplaced heavy members.
    rem_heavy_arr: u64,
    seq: SeqTables,
    lights: Vec<usize>,
    l_suffix_o: Vec<u64>,
    l_suffix_arr: Vec<u64>,
    l_suffix_vols: Vec<Vec<u64>>,
    l_suffix_ao: Vec<Vec<u64>>,
    l_same_prev: Vec<bool>,
    tables: PriceTables,
    best_tel: u64,
    best: Option<Vec<Round>>,
    nodes: u64,
    node_budget: u64,
    deadline: Option<Instant>,
    budget_exhausted: bool,
    /// Scratch for the heavy-phase pour (remaining members' volumes / a+o).
    wf_vols: Vec<u64>,
    wf_aos: Vec<u64>,
}

impl Search<'_> {
    fn over_budget(&mut self) -> bool {
        if self.nodes >= self.node_budget {
            self.budget_exhausted = true;
            return true;
        }
        if let Some(deadline) = self.deadline {
            if self.nodes & 1023 == 0 && Instant::now() >= deadline {
                self.budget_exhausted = true;
                return true;
            }
        }
        false
    }

    /// Phase one: pick which unplaced heavy (`rem` bitmask) completes next —
    /// strictly after `anchor`, the completion of member `last` — and when.
    fn dfs_heavy(&mut self, rem: usize, last: Option<usize>, anchor: u64) {
        if self.over_budget() {
            return;
        }
        if rem == 0 {
            self.dfs_light(0);
            return;
        }
        for b in 0..self.seq.members.len() {
            if rem & (1 << b) == 0 {
                continue;
            }
            if let Some(p) = self.seq.ident_prev[b] {
                if rem & (1 << p) != 0 {
                    continue;
                }
            }
            let k = self.seq.members[b];
            let r = self.reqs[k];
            let rem2 = rem & !(1 << b);
            let sep_in = last.map_or(0, |l| self.seq.sep[l][b]);
            let lo = r
                .arrival
                .max((anchor + sep_in).saturating_sub(r.output_len));
            for tau in lo..=self.start_cap {
                let completes = tau + r.output_len;
                let chain = self
                    .seq
                    .chain(rem2, Some(b), completes)
                    .saturating_sub(self.rem_heavy_arr - r.arrival);
                let bound =
                    self.fixed_tel + (completes - r.arrival) + chain + self.l_suffix_o[0];
                if bound >= self.best_tel {
                    break;
                }
                if !self.price_bound_allows(k, tau) || !self.fits(r, tau) {
                    continue;
                }
                self.apply(k, r, tau);
                self.rem_heavy_arr -= r.arrival;
                let wf = self.fixed_tel + self.water_filling_unfixed(rem2);
                if wf < self.best_tel {
                    self.dfs_heavy(rem2, Some(b), completes);
                }
                self.rem_heavy_arr += r.arrival;
                self.undo(k, r, tau);
                if self.budget_exhausted {
                    return;
                }
            }
        }
    }

    /// Phase two: all heavies are placed; fix the lights in static order.
    fn dfs_light(&mut self, li: usize) {
        if self.over_budget() {
            return;
        }
        if li == self.lights.len() {
            if self.fixed_tel < self.best_tel {
                self.best_tel = self.fixed_tel;
                self.best = Some(self.start_of.clone());
            }
            return;
        }
        let k = self.lights[li];
        let r = self.reqs[k];
        // Identical requests take non-decreasing starts (symmetry breaking).
        let lo = if self.l_same_prev[li] {
            r.arrival.max(self.start_of[self.lights[li - 1]])
        } else {
            r.arrival
        };
        for tau in lo..=self.start_cap {
            let scan_bound =
                self.fixed_tel + (tau + r.output_len - r.arrival) + self.l_suffix_o[li + 1];
            if scan_bound >= self.best_tel {
                break;
            }
            if !self.price_bound_allows(k, tau) || !self.fits(r, tau) {
                continue;
            }
            self.apply(k, r, tau);
            let wf = self.fixed_tel + self.water_filling_bound(li + 1);
            if wf < self.best_tel {
                self.dfs_light(li + 1);
            }
            self.undo(k, r, tau);
            if self.budget_exhausted {
                return;
            }
        }
    }

    fn fits(&self, r: Request, tau: Round) -> bool {
        (tau + 1..=tau + r.output_len)
            .all(|t| self.occ[t as usize] + r.prompt_size + (t - tau) <= self.memory_limit)
    }

    fn apply(&mut self, k: usize, r: Request, tau: Round) {
        for t in tau + 1..=tau + r.output_len {
            self.occ[t as usize] += r.prompt_size + (t - tau);
        }
        self.start_of[k] = tau;
        self.fixed_tel += tau + r.output_len - r.arrival;
        self.fixed_priced += self.tables.priced[k][(tau - r.arrival) as usize];
        self.remaining_priced -= self.tables.min0[k];
        self.nodes += 1;
    }

    fn undo(&mut self, k: usize, r: Request, tau: Round) {
        for t in tau + 1..=tau + r.output_len {
            self.occ[t as usize] -= r.prompt_size + (t - tau);
        }
        self.start_of[k] = Round::MAX;
        self.fixed_tel -= tau + r.output_len - r.arrival;
        self.fixed_priced -= self.tables.priced[k][(tau - r.arrival) as usize];
        self.remaining_priced += self.tables.min0[k];
    }

    /// Exact integer Lagrangian bound for the node that fixes `k` at `tau`:
    /// can it still strictly beat the incumbent?
    fn price_bound_allows(&self, k: usize, tau: Round) -> bool {
        if self.best_tel == u64::MAX {
            return true;
        }
        let r = self.reqs[k];
        let value = self.fixed_priced as i128
            + self.tables.priced[k][(tau - r.arrival) as usize] as i128
            + (self.remaining_priced - self.tables.min0[k]) as i128
            - self.tables.budget as i128;
        // Strict improvement needs ceil(value / SCALE) ≤ best − 1.
        value <= (self.best_tel as i128 - 1) * PRICE_SCALE as i128
    }

    fn price_bound_at_root(&self) -> u64 {
        let value = self.remaining_priced - self.tables.budget;
        if value <= 0 {
            0
        } else {
            (value as u64).div_ceil(PRICE_SCALE as u64)
        }
    }

    /// Water-filling over everything unfixed in the heavy phase: the `rem`
    /// members plus all lights. Volumes and `a+o` floors are merged from the
    /// member scratch and the precomputed light tables by two independent
    /// two-pointer walks (the bound pairs the k-th smallest pour time with
    /// the k-th smallest `a+o`, so the lists never need pairing up).
    fn water_filling_unfixed(&mut self, rem: usize) -> u64 {
        let mut rem_arr = 0u64;
        self.wf_vols.clear();
        self.wf_aos.clear();
        for b in 0..self.seq.members.len() {
            if rem & (1 << b) != 0 {
                let r = self.reqs[self.seq.members[b]];
                self.wf_vols.push(r.memory_volume());
                self.wf_aos.push(r.arrival + r.output_len);
                rem_arr += r.arrival;
            }
        }
        self.wf_vols.sort_unstable();
        self.wf_aos.sort_unstable();
        let (lv, la) = (&self.l_suffix_vols[0], &self.l_suffix_ao[0]);
        let total = self.wf_vols.len() + lv.len();
        if total == 0 {
            return 0;
        }
        let (mut hi, mut li) = (0, 0);
        let (mut ha, mut la_i) = (0, 0);
        let mut bound = 0u64;
        let mut poured = 0u64;
        let mut t = 0u64;
        let mut capacity = 0u64;
        for _ in 0..total {
            let vol = if hi < self.wf_vols.len()
                && (li >= lv.len() || self.wf_vols[hi] <= lv[li])
            {
                hi += 1;
                self.wf_vols[hi - 1]
            } else {
                li += 1;
                lv[li - 1]
            };
            let ao = if ha < self.wf_aos.len()
                && (la_i >= la.len() || self.wf_aos[ha] <= la[la_i])
            {
                ha += 1;
                self.wf_aos[ha - 1]
            } else {
                la_i += 1;
                la[la_i - 1]
            };
            poured += vol;
            while capacity < poured {
                t += 1;
                let used = self.occ.get(t as usize).copied().unwrap_or(0);
                capacity += self.memory_limit - used;
            }
            bound += t.max(ao);
        }
        bound - rem_arr - self.l_suffix_arr[0]
    }

    /// Lower bound on `Σ (c_j − a_j)` over unfixed lights `li..`, given the
    /// occupancy already committed by fixed requests.
    fn water_filling_bound(&self, li: usize) -> u64 {
        let vols = &self.l_suffix_vols[li];
        if vols.is_empty() {
            return 0;
        }
        let aos = &self.l_suffix_ao[li];
        let mut bound = 0u64;
        let mut poured = 0u64;
        let mut t = 0u64;
        let mut capacity = 0u64; // t·M − Σ_{u≤t} occ[u], non-decreasing in t
        for (i, &vol) in vols.iter().enumerate() {
            poured += vol;
            while capacity < poured {
                t += 1;
                let used = self.occ.get(t as usize).copied().unwrap_or(0);
                capacity += self.memory_limit - used;
            }
            bound += t.max(aos[i]);
        }
        bound - self.l_suffix_arr[li]
    }
}
