// Throwaway calibration probe for the per-round work bound.
use kvsched_core::engine::{self, DurationModel};
use kvsched_core::policy::PolicyConfig;
use kvsched_core::workload::{generate, GenModel, GenSpec, IntRange};

fn main() {
    for m in [32u64, 64, 128, 256] {
        for n_factor in [2u64, 4, 8] {
            let n = n_factor * m;
            let spec = GenSpec {
                model: GenModel::AllAtOnce,
                seed: 17,
                m_range: IntRange::single(m),
                s_range: IntRange::new(1, 5),
                o_range: Some(IntRange::new(1, 24)),
                n_range: IntRange::single(n),
                t_range: IntRange::new(1, 1),
                lambda_range: (1.0, 1.0),
                epsilon: 0.0,
            };
            let inst = generate(&spec).unwrap();
            let t0 = std::time::Instant::now();
            let rep = engine::run(&inst, PolicyConfig::mcsf(), DurationModel::Unit, None).unwrap();
            println!(
                "M={m:4} n={n:5} max_evals/round={:7} ratio_to_M2={:.4} total={:9} [{:.2}s]",
                rep.max_feasibility_evals_per_round,
                rep.max_feasibility_evals_per_round as f64 / (m * m) as f64,
                rep.total_feasibility_evals,
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
