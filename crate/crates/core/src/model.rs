//! Domain types and the time/memory semantics shared by every other module.
//!
//! Round semantics: a request starting at round `p` occupies memory at rounds
//! `p+1..=p+o` (holding `s + (t - p)` tokens at round `t`) and completes at
//! round `p + o`. A request may start at the round it arrives. All core
//! quantities are exact integers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Discrete round index.
pub type Round = u64;
/// KV-cache memory is measured in tokens.
pub type Tokens = u64;
/// Request identifiers are dense `0..n`.
pub type RequestId = usize;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("memory limit must be positive")]
    EmptyMemory,
    #[error("request {id}: prompt, output, and predicted lengths must be ≥ 1")]
    ZeroLength { id: RequestId },
    #[error("request {id}: prompt of {prompt} tokens cannot fit its first round under M={limit}")]
    PromptExceedsMemory {
        id: RequestId,
        prompt: Tokens,
        limit: Tokens,
    },
    #[error("request ids must be unique and dense 0..n (got duplicate or out-of-range id {id})")]
    BadIds { id: RequestId },
    #[error("incomplete schedule: request {id} has no start round")]
    IncompleteSchedule { id: RequestId },
    #[error("unsupported snapshot schema version {found} (expected ≤ {supported})")]
    SchemaVersion { found: u32, supported: u32 },
}

/// One inference request: arrival round, prompt size, true output length, and
/// the scheduler-visible predicted output length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub arrival: Round,
    pub prompt_size: Tokens,
    pub output_len: Tokens,
    pub predicted_len: Tokens,
}

impl Request {
    /// Convenience constructor with an exact prediction (`õ = o`).
    pub fn exact(id: RequestId, arrival: Round, prompt_size: Tokens, output_len: Tokens) -> Self {
        Request {
            id,
            arrival,
            prompt_size,
            output_len,
            predicted_len: output_len,
        }
    }

    /// Whether the prediction is safe for schedulers that assume `õ ≥ o`.
    pub fn prediction_is_overestimate(&self) -> bool {
        self.predicted_len >= self.output_len
    }

    /// Peak memory the request holds (at its final round): `s + o`.
    pub fn peak_memory(&self) -> Tokens {
        self.prompt_size + self.output_len
    }

    /// Total memory-rounds consumed over the request's lifetime:
    /// `s·o + o(o+1)/2`.
    pub fn memory_volume(&self) -> u64 {
        self.prompt_size * self.output_len + self.output_len * (self.output_len + 1) / 2
    }

    /// Occupancy contribution at round `t` if started at `p`: `s + t - p` for
    /// `p < t ≤ p + o`, zero outside the window.
    pub fn occupancy_at(&self, start: Round, t: Round) -> Tokens {
        if t > start && t <= start + self.output_len {
            self.prompt_size + (t - start)
        } else {
            0
        }
    }
}

const SNAPSHOT_SCHEMA_VERSION: u32 = 1;

fn default_schema_version() -> u32 {
    SNAPSHOT_SCHEMA_VERSION
}

#[derive(Serialize, Deserialize)]
struct InstanceSnapshot {
    #[serde(default = "default_schema_version")]
    schema_version: u32,
    memory_limit: Tokens,
    requests: Vec<Request>,
}

/// A problem instance: the memory budget and the request list, kept sorted by
/// `(arrival, id)` with ids dense `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    memory_limit: Tokens,
    requests: Vec<Request>,
    /// id → position in the arrival-sorted `requests` vector.
    by_id: Vec<usize>,
}

impl Instance {
    pub fn new(memory_limit: Tokens, mut requests: Vec<Request>) -> Result<Self, ModelError> {
        if memory_limit == 0 {
            return Err(ModelError::EmptyMemory);
        }
        requests.sort_by_key(|r| (r.arrival, r.id));
        let n = requests.len();
        let mut by_id = vec![usize::MAX; n];
        for (pos, r) in requests.iter().enumerate() {
            if r.prompt_size == 0 || r.output_len == 0 || r.predicted_len == 0 {
                return Err(ModelError::ZeroLength { id: r.id });
            }
            if r.prompt_size + 1 > memory_limit {
                return Err(ModelError::PromptExceedsMemory {
                    id: r.id,
                    prompt: r.prompt_size,
                    limit: memory_limit,
                });
            }
            if r.id >= n || by_id[r.id] != usize::MAX {
                return Err(ModelError::BadIds { id: r.id });
            }
            by_id[r.id] = pos;
        }
        Ok(Instance {
            memory_limit,
            requests,
            by_id,
        })
    }

    pub fn memory_limit(&self) -> Tokens {
        self.memory_limit
    }

    /// Requests in `(arrival, id)` order.
    pub fn requests(&self) -> &[Request] {
        &self.requests
    }

    pub fn request(&self, id: RequestId) -> &Request {
        &self.requests[self.by_id[id]]
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn total_output(&self) -> u64 {
        self.requests.iter().map(|r| r.output_len).sum()
    }

    pub fn max_arrival(&self) -> Round {
        self.requests.last().map_or(0, |r| r.arrival)
    }

    /// Copy of the instance with every prediction replaced by the true length.
    pub fn with_exact_predictions(&self) -> Instance {
        let requests = self
            .requests
            .iter()
            .map(|r| Request {
                predicted_len: r.output_len,
                ..*r
            })
            .collect();
        Instance {
            memory_limit: self.memory_limit,
            requests,
            by_id: self.by_id.clone(),
        }
    }
}

impl Serialize for Instance {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        InstanceSnapshot {
            schema_version: SNAPSHOT_SCHEMA_VERSION,
            memory_limit: self.memory_limit,
            requests: self.requests.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Instance {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let snap = InstanceSnapshot::deserialize(deserializer)?;
        if snap.schema_version > SNAPSHOT_SCHEMA_VERSION {
            return Err(serde::de::Error::custom(ModelError::SchemaVersion {
                found: snap.schema_version,
                supported: SNAPSHOT_SCHEMA_VERSION,
            }));
        }
        Instance::new(snap.memory_limit, snap.requests).map_err(serde::de::Error::custom)
    }
}

/// Start rounds per request; completions are derived as `p + o`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    starts: BTreeMap<RequestId, Round>,
}

impl Schedule {
    pub fn new() -> Self {
        Schedule::default()
    }

    pub fn set_start(&mut self, id: RequestId, p: Round) {
        self.starts.insert(id, p);
    }

    pub fn start(&self, id: RequestId) -> Option<Round> {
        self.starts.get(&id).copied()
    }

    pub fn completion(&self, id: RequestId, instance: &Instance) -> Option<Round> {
        self.start(id).map(|p| p + instance.request(id).output_len)
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (RequestId, Round)> + '_ {
        self.starts.iter().map(|(&id, &p)| (id, p))
    }

    /// Start vector in id order; `None` marks a missing entry.
    pub fn start_vector(&self, n: usize) -> Vec<Option<Round>> {
        let mut v = vec![None; n];
        for (&id, &p) in &self.starts {
            if id < n {
                v[id] = Some(p);
            }
        }
        v
    }

    /// Latest completion round over all scheduled requests.
    pub fn makespan(&self, instance: &Instance) -> Round {
        self.starts
            .iter()
            .map(|(&id, &p)| p + instance.request(id).output_len)
            .max()
            .unwrap_or(0)
    }
}

/// Total end-to-end latency `Σ (p_i + o_i − a_i)`. Starts before arrival are
/// a validation concern; here each term saturates at zero.
pub fn tel(schedule: &Schedule, instance: &Instance) -> Result<u64, ModelError> {
    let mut total = 0u64;
    for r in instance.requests() {
        let p = schedule
            .start(r.id)
            .ok_or(ModelError::IncompleteSchedule { id: r.id })?;
        total += (p + r.output_len).saturating_sub(r.arrival);
    }
    Ok(total)
}

/// Why a schedule is invalid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleViolation {
    /// `p_i < a_i`: the earliest offending request by id.
    StartBeforeArrival { id: RequestId, start: Round },
    /// First round where total occupancy exceeds the memory limit.
    MemoryExceeded { round: Round, occupancy: Tokens },
    /// A request has no start round.
    Missing { id: RequestId },
}

/// Outcome of [`validate_schedule`]: violations are values, not errors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Validation {
    Ok,
    Violation(ScheduleViolation),
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        matches!(self, Validation::Ok)
    }
}

/// Checks `p_i ≥ a_i` for every request and the per-round memory constraint
/// `Σ_{i active at t} (s_i + t − p_i) ≤ M`, where `i` is active at `t` iff
/// `p_i < t ≤ p_i + o_i`. Reports the first violation found (arrival
/// violations by id, then memory violations by round).
pub fn validate_schedule(schedule: &Schedule, instance: &Instance) -> Validation {
    let n = instance.len();
    let mut starts = Vec::with_capacity(n);
    for id in 0..n {
        let r = instance.request(id);
        match schedule.start(id) {
            None => return Validation::Violation(ScheduleViolation::Missing { id }),
            Some(p) if p < r.arrival => {
                return Validation::Violation(ScheduleViolation::StartBeforeArrival {
                    id,
                    start: p,
                })
            }
            Some(p) => starts.push((r, p)),
        }
    }
    let horizon = starts
        .iter()
        .map(|(r, p)| p + r.output_len)
        .max()
        .unwrap_or(0);
    // Occupancy at round t decomposes as base(t) + t·count(t) with
    // base += s − p and count += 1 over each active window; two difference
    // arrays give every round in O(n + T).
    let len = horizon as usize + 2;
    let mut base = vec![0i64; len];
    let mut count = vec![0i64; len];
    for (r, p) in &starts {
        let lo = (p + 1) as usize;
        let hi = (p + r.output_len + 1) as usize;
        base[lo] += r.prompt_size as i64 - *p as i64;
        base[hi] -= r.prompt_size as i64 - *p as i64;
        count[lo] += 1;
        count[hi] -= 1;
    }
    let mut base_acc = 0i64;
    let mut count_acc = 0i64;
    for t in 0..=horizon {
        let idx = t as usize;
        base_acc += base[idx];
        count_acc += count[idx];
        let occupancy = base_acc + count_acc * t as i64;
        debug_assert!(occupancy >= 0);
        if occupancy as Tokens > instance.memory_limit() {
            return Validation::Violation(ScheduleViolation::MemoryExceeded {
                round: t,
                occupancy: occupancy as Tokens,
            });
        }
    }
    Validation::Ok
}

/// Aggregate run statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Total end-to-end latency `Σ (c_i − a_i)`.
    pub tel: u64,
    pub request_count: usize,
    /// Latest completion round (0 for empty runs).
    pub makespan: Round,
    /// `(round, tokens processed in that round's batch)`.
    pub per_round_throughput: Vec<(Round, Tokens)>,
    /// `(round, occupancy at that round)` in the window convention above.
    pub memory_timeline: Vec<(Round, Tokens)>,
}

impl Metrics {
    /// `tel / n`; 0 for empty instances.
    pub fn avg_latency(&self) -> f64 {
        if self.request_count == 0 {
            0.0
        } else {
            self.tel as f64 / self.request_count as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instance(m: Tokens, reqs: &[(Round, Tokens, Tokens)]) -> Instance {
        let requests = reqs
            .iter()
            .enumerate()
            .map(|(id, &(a, s, o))| Request::exact(id, a, s, o))
            .collect();
        Instance::new(m, requests).unwrap()
    }

    #[test]
    fn tel_single_request() {
        let inst = instance(4, &[(0, 1, 2)]);
        let mut sched = Schedule::new();
        sched.set_start(0, 0);
        assert_eq!(tel(&sched, &inst).unwrap(), 2);
    }

    #[test]
    fn tel_two_requests() {
        let inst = instance(6, &[(0, 1, 1), (0, 1, 2)]);
        let mut sched = Schedule::new();
        sched.set_start(0, 0);
        sched.set_start(1, 0);
        assert_eq!(tel(&sched, &inst).unwrap(), 3);
    }

    #[test]
    fn tel_counts_waiting_time() {
        let inst = instance(4, &[(3, 1, 1)]);
        let mut sched = Schedule::new();
        sched.set_start(0, 5);
        assert_eq!(tel(&sched, &inst).unwrap(), 3);
    }

    #[test]
    fn tel_rejects_incomplete_schedule() {
        let inst = instance(4, &[(0, 1, 1), (0, 1, 1)]);
        let mut sched = Schedule::new();
        sched.set_start(0, 0);
        assert_eq!(
            tel(&sched, &inst),
            Err(ModelError::IncompleteSchedule { id: 1 })
        );
    }

    #[test]
    fn validate_accepts_exact_fit() {
        let inst = instance(4, &[(0, 1, 1), (0, 1, 1)]);
        let mut sched = Schedule::new();
        sched.set_start(0, 0);
        sched.set_start(1, 0);
        // Occupancy at t=1 is (1+1)+(1+1) = 4 = M.
        assert_eq!(validate_schedule(&sched, &inst), Validation::Ok);
    }

    #[test]
    fn validate_reports_first_memory_violation() {
        let inst = instance(3, &[(0, 1, 1), (0, 1, 1)]);
        let mut sched = Schedule::new();
        sched.set_start(0, 0);
        sched.set_start(1, 0);
        assert_eq!(
            validate_schedule(&sched, &inst),
            Validation::Violation(ScheduleViolation::MemoryExceeded {
                round: 1,
                occupancy: 4
            })
        );
    }

    #[test]
    fn validate_empty_instance() {
        let inst = Instance::new(4, vec![]).unwrap();
        assert_eq!(validate_schedule(&Schedule::new(), &inst), Validation::Ok);
    }

    #[test]
    fn validate_reports_start_before_arrival() {
        let inst = instance(4, &[(3, 1, 1)]);
        let mut sched = Schedule::new();
        sched.set_start(0, 2);
        assert_eq!(
            validate_schedule(&sched, &inst),
            Validation::Violation(ScheduleViolation::StartBeforeArrival { id: 0, start: 2 })
        );
    }

    #[test]
    fn memory_volume_matches_per_round_sum() {
        for (s, o) in [(1u64, 1u64), (3, 5), (5, 12), (40, 85)] {
            let r = Request::exact(0, 0, s, o);
            let by_rounds: u64 = (1..=o).map(|k| s + k).sum();
            assert_eq!(r.memory_volume(), by_rounds);
            assert_eq!(r.memory_volume(), s * o + o * (o + 1) / 2);
        }
    }

    #[test]
    fn occupancy_window_is_half_open_on_the_left() {
        let r = Request::exact(0, 0, 2, 3);
        assert_eq!(r.occupancy_at(1, 1), 0);
        assert_eq!(r.occupancy_at(1, 2), 3);
        assert_eq!(r.occupancy_at(1, 4), 5);
        assert_eq!(r.occupancy_at(1, 5), 0);
    }

    #[test]
    fn instance_rejects_oversized_prompt() {
        let r = Request::exact(0, 0, 4, 1);
        assert_eq!(
            Instance::new(4, vec![r]),
            Err(ModelError::PromptExceedsMemory {
                id: 0,
                prompt: 4,
                limit: 4
            })
        );
    }

    #[test]
    fn instance_rejects_duplicate_ids() {
        let reqs = vec![Request::exact(0, 0, 1, 1), Request::exact(0, 1, 1, 1)];
        assert!(matches!(
            Instance::new(4, reqs),
            Err(ModelError::BadIds { id: 0 })
        ));
    }

    #[test]
    fn instance_sorts_by_arrival_then_id() {
        let reqs = vec![
            Request::exact(0, 5, 1, 1),
            Request::exact(1, 2, 1, 1),
            Request::exact(2, 2, 1, 1),
        ];
        let inst = Instance::new(4, reqs).unwrap();
        let order: Vec<RequestId> = inst.requests().iter().map(|r| r.id).collect();
        assert_eq!(order, vec![1, 2, 0]);
        assert_eq!(inst.request(0).arrival, 5);
    }

    #[test]
    fn instance_json_round_trip() {
        let inst = instance(7, &[(0, 2, 3), (4, 1, 2)]);
        let json = serde_json::to_string(&inst).unwrap();
        assert!(json.contains("\"schema_version\":1"));
        let back: Instance = serde_json::from_str(&json).unwrap();
        assert_eq!(back, inst);
    }

    #[test]
    fn instance_json_rejects_invalid_snapshot() {
        let json = r#"{"memory_limit":2,"requests":[{"id":0,"arrival":0,"prompt_size":5,"output_len":1,"predicted_len":1}]}"#;
        assert!(serde_json::from_str::<Instance>(json).is_err());
    }
}
