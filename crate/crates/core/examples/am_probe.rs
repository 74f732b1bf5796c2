// Throwaway calibration probe for the ratio experiments.
use kvsched_core::engine::{self, DurationModel};
use kvsched_core::hindsight::{solve_ip, SolveOptions};
use kvsched_core::policy::PolicyConfig;
use kvsched_core::workload::{generate, GenSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("am1");
    let trials: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8);
    let nodes: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(10_000_000);

    let mut ratios = Vec::new();
    let mut exact = 0u64;
    let mut certified = 0u64;
    let t_all = std::time::Instant::now();
    for seed in 0..trials {
        let spec = match mode {
            "am1" => GenSpec::all_at_once_paper(seed),
            "am1_small" => {
                let mut s = GenSpec::all_at_once_paper(seed);
                s.n_range = kvsched_core::workload::IntRange::new(15, 25);
                s
            }
            "am2" => GenSpec::poisson_paper(seed),
            other => panic!("unknown mode {other}"),
        };
        let inst = generate(&spec).unwrap();
        let t0 = std::time::Instant::now();
        let rep = engine::run(&inst, PolicyConfig::mcsf(), DurationModel::Unit, None).unwrap();
        let sol = solve_ip(&inst, SolveOptions::with_node_budget(nodes)).unwrap();
        let ratio = rep.metrics.tel as f64 / sol.tel as f64;
        let ceiling = rep.metrics.tel as f64 / sol.bounds.lower.max(1.0);
        ratios.push(ratio);
        if rep.metrics.tel == sol.tel {
            exact += 1;
        }
        if sol.bounds.optimal {
            certified += 1;
        }
        println!(
            "seed={seed:3} n={:3} M={:3} policy_tel={:6} opt_tel={:6} ratio={ratio:.4} ceil={ceiling:.4} optimal={} nodes={:>10} [{:.2}s]",
            inst.len(),
            inst.memory_limit(),
            rep.metrics.tel,
            sol.tel,
            sol.bounds.optimal,
            sol.bounds.nodes_explored,
            t0.elapsed().as_secs_f64()
        );
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let max = ratios.iter().cloned().fold(0.0f64, f64::max);
    println!(
        "mode={mode} trials={trials} mean={mean:.4} max={max:.4} exact={exact} certified={certified} total_time={:.1}s",
        t_all.elapsed().as_secs_f64()
    );
}
