use kvsched_core::model::{Request, Round, Tokens};
use kvsched_core::workload::{gen_all_at_once, GenSpec};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

fn earliest_fit(occ: &[u64], r: &Request, limit: Tokens) -> Round {
    (r.arrival..)
        .find(|&tau| {
            (tau + 1..=tau + r.output_len)
                .all(|t| occ[t as usize] + r.prompt_size + (t - tau) <= limit)
        })
        .unwrap()
}

fn place(occ: &mut [u64], r: &Request, tau: Round, sign: i64) {
    for t in tau + 1..=tau + r.output_len {
        occ[t as usize] = (occ[t as usize] as i64 + sign * (r.prompt_size + (t - tau)) as i64) as u64;
    }
}

fn list_schedule(order: &[usize], reqs: &[Request], limit: Tokens, horizon: usize) -> u64 {
    let mut occ = vec![0u64; horizon];
    let mut tel = 0u64;
    for &k in order {
        let r = &reqs[k];
        let tau = earliest_fit(&occ, r, limit);
        place(&mut occ, r, tau, 1);
        tel += tau + r.output_len - r.arrival;
    }
    tel
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0);
    let restarts: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(20000);
    let mut spec = GenSpec::all_at_once_paper(seed);
    let lo: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(15);
    let hi: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(25);
    spec.n_range = kvsched_core::workload::IntRange::new(lo, hi);
    let inst = gen_all_at_once(&spec).unwrap();
    if args.get(3).map(String::as_str) == Some("dump") {
        println!("{}", serde_json::to_string(&inst).unwrap());
        return;
    }
    let reqs = inst.requests().to_vec();
    let limit = inst.memory_limit();
    let n = reqs.len();
    let horizon = 4000usize;
    let policy_tel = |config| {
        kvsched_core::engine::run(&inst, config, kvsched_core::engine::DurationModel::Unit, None)
            .unwrap()
            .metrics
            .tel
    };
    let mcsf = policy_tel(kvsched_core::policy::PolicyConfig::mcsf());
    let mcb = policy_tel(kvsched_core::policy::PolicyConfig::mc_benchmark());
    println!("seed {seed}: n={n} M={limit} mcsf={mcsf} mcb={mcb}");

    // Deterministic starting orders.
    let mut best = u64::MAX;
    let mut label = "";
    for (name, key) in [
        ("vol-asc", 0usize),
        ("o-asc", 1),
        ("peak-asc", 2),
        ("o-desc", 3),
    ] {
        let mut order: Vec<usize> = (0..n).collect();
        match key {
            0 => order.sort_by_key(|&k| (reqs[k].memory_volume(), k)),
            1 => order.sort_by_key(|&k| (reqs[k].output_len, k)),
            2 => order.sort_by_key(|&k| (reqs[k].peak_memory(), k)),
            _ => order.sort_by_key(|&k| (std::cmp::Reverse(reqs[k].output_len), k)),
        }
        let tel = list_schedule(&order, &reqs, limit, horizon);
        println!("  {name}: {tel}");
        if tel < best {
            best = tel;
            label = name;
        }
    }

    // Randomized restarts: shuffled orders plus noisy volume keys.
    let mut rng = StdRng::seed_from_u64(12345);
    let mut order: Vec<usize> = (0..n).collect();
    for it in 0..restarts {
        if it % 3 == 0 {
            order.shuffle(&mut rng);
        } else {
            let jitter: Vec<f64> = (0..n).map(|_| rng.gen_range(0.6..1.4)).collect();
            order.sort_by(|&a, &b| {
                (reqs[a].memory_volume() as f64 * jitter[a])
                    .total_cmp(&(reqs[b].memory_volume() as f64 * jitter[b]))
            });
        }
        let tel = list_schedule(&order, &reqs, limit, horizon);
        if tel < best {
            best = tel;
            label = "random";
        }
    }
    println!("  best after {restarts} restarts: {best} ({label})");
}
