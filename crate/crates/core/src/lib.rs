//! Discrete-time simulation and exact benchmarking of online batch scheduling
//! for LLM inference under a shared KV-cache memory budget.
//!
//! Time advances in integer rounds. A request `i` arrives at round `a_i` with
//! a prompt of `s_i` tokens and generates `o_i` output tokens, one per round,
//! without preemption. While running it holds its prompt plus every output
//! token generated so far: started at round `p`, it occupies `s_i + (t - p)`
//! memory tokens at each round `t` in `(p, p + o_i]` and completes at round
//! `p + o_i`. The sum of occupancies across in-flight requests may never
//! exceed the memory budget `M`.
//!
//! Modules:
//! - [`model`]: requests, instances, schedules, validation, latency metrics;
//! - [`kv`]: the forward feasibility oracle over predicted lengths;
//! - [`policy`]: online admission policies (shortest-first and benchmarks);
//! - [`engine`]: the round-based simulator;
//! - [`hindsight`]: exact offline optimum (branch and bound), LP relaxation,
//!   and volume-based lower bounds;
//! - [`workload`]: synthetic generators, trace ingestion, prediction noise.

pub mod engine;
pub mod hindsight;
pub mod kv;
pub mod model;
pub mod policy;
pub mod workload;

pub use model::{Instance, Metrics, Request, RequestId, Round, Schedule, Tokens};
