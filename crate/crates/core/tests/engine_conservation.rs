//! End-to-end invariants of the round-based simulator, fuzzed across every
//! policy: conservation of requests and tokens, occupancy reconstruction,
//! non-preemptive token streaks, the queue-integral identity for total
//! expected latency, and bitwise determinism.

use kvsched_core::engine::{self, DurationModel, Event, RunReport};
use kvsched_core::policy::PolicyConfig;
use kvsched_core::workload::{apply_prediction_noise, NoiseMode};
use kvsched_core::{Instance, Request, Round};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn instance_strategy() -> impl Strategy<Value = Instance> {
    (
        13u64..=40,
        prop::collection::vec((0u64..12, 1u64..=5, 1u64..=8), 1..=8),
    )
        .prop_map(|(m, rows)| {
            let requests = rows
                .into_iter()
                .enumerate()
                .map(|(id, (a, s, o))| Request::exact(id, a, s, o))
                .collect();
            Instance::new(m, requests).expect("peaks fit within the budget by construction")
        })
}

fn all_policies() -> Vec<PolicyConfig> {
    vec![
        PolicyConfig::mcsf(),
        PolicyConfig::mc_benchmark(),
        PolicyConfig::fcfs(),
        PolicyConfig::alpha_protection(0.2),
        PolicyConfig::alpha_beta_clearing(0.2, 0.5, 7),
    ]
}

/// Invariants that hold for any run that terminated, eviction or not.
fn check_report(instance: &Instance, report: &RunReport) -> Result<(), TestCaseError> {
    let n = instance.len();

    // Conservation: every request completes exactly once and is scheduled.
    prop_assert_eq!(report.schedule.len(), n);
    let mut completions: BTreeMap<usize, u64> = BTreeMap::new();
    for e in &report.events {
        if let Event::Complete { id, .. } = e {
            *completions.entry(*id).or_default() += 1;
        }
    }
    for id in 0..n {
        prop_assert_eq!(completions.get(&id).copied(), Some(1), "request {} completions", id);
    }

    // The emitted schedule is memory-safe and respects arrivals even when
    // overflow clearing rewound some work along the way.
    let check = kvsched_core::model::validate_schedule(&report.schedule, instance);
    prop_assert!(check.is_ok(), "schedule failed validation: {:?}", check);
    prop_assert_eq!(
        kvsched_core::model::tel(&report.schedule, instance).unwrap(),
        report.metrics.tel
    );

    // Queue-integral identity: summing "arrived but not yet finished" over
    // all rounds re-derives the total latency from the other side.
    let max_completion = (0..n)
        .map(|id| report.schedule.completion(id, instance).unwrap())
        .max()
        .unwrap_or(0);
    let mut queue_integral = 0u64;
    for t in 0..max_completion {
        queue_integral += (0..n)
            .filter(|&id| {
                instance.request(id).arrival <= t
                    && t < report.schedule.completion(id, instance).unwrap()
            })
            .count() as u64;
    }
    prop_assert_eq!(queue_integral, report.metrics.tel, "queue integral vs summed latency");

    // Token conservation: exactly prompt + output per completion, plus the
    // work that overflow clearing threw away.
    let minimum: u64 = instance
        .requests()
        .iter()
        .map(|r| r.prompt_size + r.output_len)
        .sum();
    let processed: u64 = report.rounds.iter().map(|r| r.tokens).sum();
    if report.eviction_count == 0 {
        prop_assert_eq!(processed, minimum);
    } else {
        prop_assert!(processed > minimum, "voided work must show up in the token stream");
    }

    // A completed request holds memory for exactly `o` consecutive rounds:
    // its token events form one unbroken streak ending at completion.
    let mut token_rounds: BTreeMap<usize, Vec<Round>> = BTreeMap::new();
    for e in &report.events {
        if let Event::Token { round, id } = e {
            token_rounds.entry(*id).or_default().push(*round);
        }
    }
    if report.eviction_count == 0 {
        for id in 0..n {
            let p = report.schedule.start(id).unwrap();
            let o = instance.request(id).output_len;
            let expected: Vec<Round> = (p..p + o).collect();
            prop_assert_eq!(
                token_rounds.get(&id).cloned().unwrap_or_default(),
                expected,
                "request {} token streak",
                id
            );
        }

        // Occupancy in each round record matches a from-scratch recomputation
        // off the final schedule (records state the load at `round + 1`).
        for rec in &report.rounds {
            let t = rec.round + 1;
            let recomputed: u64 = (0..n)
                .map(|id| instance.request(id).occupancy_at(report.schedule.start(id).unwrap(), t))
                .sum();
            prop_assert_eq!(rec.occupancy, recomputed, "occupancy at model round {}", t);
        }
    }

    // Latency can never beat the bare service times.
    prop_assert!(report.metrics.tel >= instance.total_output());
    let avg = report.metrics.avg_latency();
    prop_assert!((avg - report.metrics.tel as f64 / n as f64).abs() < 1e-12);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The projection-based policies never overflow when predictions are
    /// exact, and every run invariant holds on their reports.
    #[test]
    fn projection_policies_run_clean_on_exact_predictions(instance in instance_strategy()) {
        for config in [PolicyConfig::mcsf(), PolicyConfig::mc_benchmark()] {
            let report = engine::run(&instance, config, DurationModel::Unit, None)
                .expect("projection policies cannot livelock on self-fitting instances");
            prop_assert_eq!(report.eviction_count, 0);
            let overflowed = report.events.iter().any(|e| matches!(e, Event::Overflow { .. }));
            prop_assert!(!overflowed);
            prop_assert!(report.clearing_events.is_empty());
            check_report(&instance, &report)?;
        }
    }

    /// Myopic policies may thrash (admit, overflow, clear, repeat) — when
    /// they do terminate, the same invariants must hold, evictions included.
    #[test]
    fn myopic_policies_keep_invariants_when_they_terminate(instance in instance_strategy()) {
        for config in [
            PolicyConfig::fcfs(),
            PolicyConfig::alpha_protection(0.2),
            PolicyConfig::alpha_beta_clearing(0.2, 0.5, 7),
        ] {
            if let Ok(report) = engine::run(&instance, config, DurationModel::Unit, None) {
                check_report(&instance, &report)?;
            }
        }
    }

    /// Overestimated predictions keep the shortest-first policy memory-safe:
    /// no overflow, no clearing, and everything completes. Predictions are
    /// clamped to the admissible band [o, M − s]: a predicted footprint above
    /// M can never pass the projection, so such a request would simply wait
    /// forever rather than threaten safety.
    #[test]
    fn shortest_first_is_safe_under_overestimates(
        instance in instance_strategy(),
        epsilon in 0.0f64..2.0,
        noise_seed in 0u64..1000,
    ) {
        let m = instance.memory_limit();
        let noisy = apply_prediction_noise(&instance, epsilon, NoiseMode::Overestimate, noise_seed)
            .unwrap();
        let noisy = Instance::new(
            m,
            noisy
                .requests()
                .iter()
                .map(|r| Request {
                    predicted_len: r.predicted_len.min(m - r.prompt_size),
                    ..*r
                })
                .collect(),
        )
        .unwrap();
        let report = engine::run(&noisy, PolicyConfig::mcsf(), DurationModel::Unit, None)
            .expect("overestimates must not break the safety argument");
        prop_assert_eq!(report.eviction_count, 0);
        let overflowed = report.events.iter().any(|e| matches!(e, Event::Overflow { .. }));
        prop_assert!(!overflowed);
        check_report(&noisy, &report)?;
    }

    /// Two runs of the same (instance, policy, seed) produce byte-identical
    /// reports apart from wall-clock timing.
    #[test]
    fn runs_are_deterministic(instance in instance_strategy(), seed in 0u64..500) {
        let mut configs = all_policies();
        configs.push(PolicyConfig::alpha_beta_clearing(0.3, 0.4, seed));
        for config in configs {
            let a = engine::run(&instance, config, DurationModel::Unit, None);
            let b = engine::run(&instance, config, DurationModel::Unit, None);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    let mut ja = serde_json::to_value(&a).unwrap();
                    let mut jb = serde_json::to_value(&b).unwrap();
                    ja.as_object_mut().unwrap().remove("wall_time_s");
                    jb.as_object_mut().unwrap().remove("wall_time_s");
                    prop_assert_eq!(ja, jb);
                }
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(
                    false,
                    "one run terminated and its twin did not: {:?} vs {:?}",
                    a.is_ok(),
                    b.is_ok()
                ),
            }
        }
    }
}
