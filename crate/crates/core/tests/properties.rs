use proptest::prelude::*;

use streamfed::bounds::Strategy as Allocation;
use streamfed::experiment::{federation, prepare, strategy_weights, ExperimentConfig};
use streamfed::memory::MemoryRule;
use streamfed::stream::CountingProcess;
use streamfed::weighting::{effective_sample_size, plan_trace, ClientPlan, WeightScheme};
use streamfed::Exec;

fn process() -> impl Strategy<Value = CountingProcess> {
    prop_oneof![
        (1usize..4).prop_map(|b| CountingProcess::ConstantRate { b }),
        (1usize..6).prop_map(|n0| CountingProcess::SinglePulse { n0 }),
        (0.5f64..3.0).prop_map(|rate| CountingProcess::Poisson { rate, min_batch: 1 }),
        (1usize..4, 1usize..4).prop_map(|(n0, period)| CountingProcess::Pulses { n0, period }),
    ]
}

fn rule() -> impl Strategy<Value = MemoryRule> {
    prop_oneof![Just(MemoryRule::Fifo), Just(MemoryRule::ReplaceAll), Just(MemoryRule::KeepAll)]
}

fn largest_batch(p: &CountingProcess) -> usize {
    match *p {
        CountingProcess::ConstantRate { b } => b,
        CountingProcess::SinglePulse { n0 } | CountingProcess::Pulses { n0, .. } => n0,
        _ => 1,
    }
}

fn plans() -> impl Strategy<Value = Vec<ClientPlan>> {
    prop::collection::vec((process(), rule(), 0usize..3, any::<u64>()), 1..5).prop_map(|v| {
        v.into_iter()
            .map(|(process, rule, extra, seed)| ClientPlan {
                capacity: largest_batch(&process) + extra,
                process,
                rule,
                seed,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn effective_sample_size_is_at_most_n(plans in plans(), rounds in 1usize..12, inverse in any::<bool>()) {
        let scheme = if inverse { WeightScheme::InverseResidence } else { WeightScheme::UnitWeights };
        let trace = plan_trace(&plans, &scheme, rounds).unwrap();
        let n_eff = effective_sample_size(&trace.sample_importance().unwrap()).unwrap();
        prop_assert!(n_eff <= trace.total_samples() as f64 * (1.0 + 1e-12));
        prop_assert!(n_eff >= 1.0 - 1e-12);
    }

    #[test]
    fn round_shares_form_a_distribution(plans in plans(), rounds in 1usize..12) {
        let weights = (0..plans.len()).map(|m| 1.0 + m as f64).collect();
        let trace = plan_trace(&plans, &WeightScheme::PerClientStationary(weights), rounds).unwrap();
        let q = trace.round_mass_share().unwrap();
        prop_assert_eq!(q.len(), rounds);
        prop_assert!(q.iter().all(|x| *x >= 0.0));
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let p = trace.client_importance().unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn scenario(rounds: usize, fresh: &[usize], share: f64) -> ExperimentConfig {
    let m = 3 + fresh.len();
    let text = format!(
        r#"{{
            "scenario": {{"historical_fresh": {{"m": {m}, "m_hist": 3, "n_hist_over_n": {share}, "fresh_rates": {fresh:?}}}}},
            "dataset": {{"synthetic": {{"dim": 4}}}},
            "strategies": ["uniform"],
            "train": {{"rounds": {rounds}, "local_steps": 1, "batch_size": 2, "eta": 0.1}},
            "eval": {{"validation_size": 50, "test_size": 50}},
            "output_dir": "unused",
            "seeds": [1]
        }}"#
    );
    ExperimentConfig::from_json(&text).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn historical_fresh_trace_is_stationary(
        rounds in 2usize..20,
        fresh in prop::collection::vec(1usize..4, 1..3),
        share in 0.2f64..0.8,
        strategy in prop_oneof![
            Just(Allocation::Uniform),
            Just(Allocation::Historical),
            Just(Allocation::Fresh),
            (0.0f64..=1.0).prop_map(Allocation::FixedPHist),
        ],
    ) {
        let cfg = scenario(rounds, &fresh, share);
        let p = prepare(&cfg, 1, Exec::Sequential).unwrap();
        let (target, lambda) = strategy_weights(&p, strategy).unwrap();
        let trace = federation(&p, lambda, None).unwrap().plan(rounds).unwrap();
        let q = trace.round_mass_share().unwrap();
        for x in &q {
            prop_assert!((x - 1.0 / rounds as f64).abs() < 1e-12);
        }
        let first = trace.round_weights(1).unwrap().0;
        for t in 2..=rounds {
            let pt = trace.round_weights(t).unwrap().0;
            for (a, b) in pt.iter().zip(first.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
        let realized = trace.client_importance().unwrap();
        for (a, b) in realized.iter().zip(target.iter()) {
            prop_assert!((a - b).abs() < 1e-9, "realized {:?} target {:?}", realized, target);
        }
    }
}

#[test]
fn sequential_and_parallel_experiments_agree() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = scenario(10, &[2, 1], 0.3);
    cfg.strategies = vec![Allocation::Uniform, Allocation::Ours, Allocation::Historical];
    cfg.seeds = vec![3, 4];
    cfg.output_dir = dir.path().join("par");
    let par = streamfed::run_experiment(&cfg, Exec::Parallel).unwrap();
    cfg.output_dir = dir.path().join("seq");
    let seq = streamfed::run_experiment(&cfg, Exec::Sequential).unwrap();
    assert_eq!(par.summary, seq.summary);
    for name in ["uniform/seed_3/metrics.csv", "ours/seed_4/trace.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("par").join(name)).unwrap(),
            std::fs::read(dir.path().join("seq").join(name)).unwrap(),
            "{name}"
        );
    }
}
