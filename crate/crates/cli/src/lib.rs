//! Library half of the `kvsched` CLI: the experiment-config dialect and the
//! runner that turns a config into CSV/JSON artifacts. The binary in
//! `main.rs` is a thin argument shim over these modules, which keeps every
//! piece of experiment logic available to integration tests.

pub mod config;
pub mod runner;
