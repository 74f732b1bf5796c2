// Throwaway calibration probe for the trace-overload experiments.
use kvsched_core::engine::{self, DurationModel};
use kvsched_core::policy::PolicyConfig;
use kvsched_core::workload::{apply_prediction_noise, gen_trace_corpus, trace_to_instance, NoiseMode};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let m: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(20_000);
    let rps: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10.0);
    let lambda = 50.0;

    for n in [100usize, 200, 300] {
        let records = gen_trace_corpus(n, 1234);
        let mean_vol: f64 = records
            .iter()
            .map(|r| (r.prompt_tokens * r.output_tokens + r.output_tokens * (r.output_tokens + 1) / 2) as f64)
            .sum::<f64>()
            / n as f64;
        let mean_peak: f64 =
            records.iter().map(|r| (r.prompt_tokens + r.output_tokens) as f64).sum::<f64>() / n as f64;
        let max_peak = records.iter().map(|r| r.prompt_tokens + r.output_tokens).max().unwrap();
        let inst = trace_to_instance(&records, m, lambda, rps, 99).unwrap();
        let span = inst.max_arrival();
        let offered = mean_vol * (lambda / rps) / m as f64;
        println!(
            "n={n} mean_vol={mean_vol:.0} mean_peak={mean_peak:.0} max_peak={max_peak} arrival_span={span} lambda_round={:.2} offered_load={offered:.2}",
            lambda / rps
        );

        let configs = [
            ("mcsf", PolicyConfig::mcsf()),
            ("mcb", PolicyConfig::mc_benchmark()),
            ("fcfs", PolicyConfig::fcfs()),
            ("a0.1", PolicyConfig::alpha_protection(0.1)),
            ("a0.2", PolicyConfig::alpha_protection(0.2)),
            ("a0.3", PolicyConfig::alpha_protection(0.3)),
            ("ab0.1", PolicyConfig::alpha_beta_clearing(0.1, 0.5, 11)),
            ("ab0.2", PolicyConfig::alpha_beta_clearing(0.2, 0.5, 11)),
            ("ab0.3", PolicyConfig::alpha_beta_clearing(0.3, 0.5, 11)),
        ];
        for (name, config) in configs {
            let t0 = std::time::Instant::now();
            match engine::run(&inst, config, DurationModel::Unit, None) {
                Ok(rep) => println!(
                    "  {name:6} avg_latency={:9.2} makespan={:6} evictions={:5} clearings={:4} [{:.2}s]",
                    rep.metrics.avg_latency(),
                    rep.metrics.makespan,
                    rep.eviction_count,
                    rep.clearing_events.len(),
                    t0.elapsed().as_secs_f64()
                ),
                Err(e) => println!("  {name:6} LIVELOCK ({}) [{:.2}s]", short(&e), t0.elapsed().as_secs_f64()),
            }
        }

        // Robustness leg: two-sided noise + protected MC-SF vs plain FCFS.
        let noisy = apply_prediction_noise(&inst, 0.8, NoiseMode::TwoSided, 7).unwrap();
        for (name, config) in [
            ("mcsf+a0.1 (noisy)", PolicyConfig::mcsf_protected(0.1)),
            ("mcsf (noisy)", PolicyConfig::mcsf()),
            ("fcfs (noisy)", PolicyConfig::fcfs()),
        ] {
            match engine::run(&noisy, config, DurationModel::Unit, None) {
                Ok(rep) => println!(
                    "  {name:18} avg_latency={:9.2} evictions={:5}",
                    rep.metrics.avg_latency(),
                    rep.eviction_count
                ),
                Err(e) => println!("  {name:18} LIVELOCK ({})", short(&e)),
            }
        }
    }
}

fn short(e: &kvsched_core::engine::EngineError) -> String {
    let s = e.to_string();
    s.chars().take(60).collect()
}
