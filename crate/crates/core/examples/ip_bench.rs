//! Throwaway benchmark: how fast does the exact solver handle batch-arrival
//! instances at experiment scale?

use std::time::{Duration, Instant};

use kvsched_core::hindsight::{solve_ip, SolveOptions};
use kvsched_core::workload::{generate, GenSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let trials: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10);
    let budget: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(30);
    let mode = args.get(3).map(String::as_str).unwrap_or("am1_small");
    let first: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0);

    let mut total = Duration::ZERO;
    let mut worst = Duration::ZERO;
    let mut timeouts = 0u64;
    for seed in first..first + trials {
        let mut spec = match mode {
            "am1" | "am1_tiny" => GenSpec::all_at_once_paper(seed),
            "am1_small" => GenSpec::all_at_once_paper(seed),
            "am2" => GenSpec::poisson_paper(seed),
            other => panic!("unknown mode {other}"),
        };
        if mode == "am1_small" {
            spec.n_range = kvsched_core::workload::IntRange::new(15, 25);
        }
        if mode == "am1_tiny" {
            spec.n_range = kvsched_core::workload::IntRange::new(8, 10);
        }
        let inst = generate(&spec).unwrap();
        let start = Instant::now();
        let solution = solve_ip(
            &inst,
            SolveOptions::with_budget(Duration::from_secs(budget)),
        )
        .unwrap();
        let elapsed = start.elapsed();
        total += elapsed;
        worst = worst.max(elapsed);
        if !solution.bounds.optimal {
            timeouts += 1;
        }
        println!(
            "seed {seed:3}  n={:2}  M={:2}  tel={:6}  lower={:9.1}  nodes={:9}  optimal={}  {:.3}s",
            inst.len(),
            inst.memory_limit(),
            solution.tel,
            solution.bounds.lower,
            solution.bounds.nodes_explored,
            solution.bounds.optimal,
            elapsed.as_secs_f64()
        );
    }
    println!(
        "total {:.2}s  avg {:.3}s  worst {:.3}s  timeouts {timeouts}/{trials}",
        total.as_secs_f64(),
        total.as_secs_f64() / trials as f64,
        worst.as_secs_f64()
    );
}
