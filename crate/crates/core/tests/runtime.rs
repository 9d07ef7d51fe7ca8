use nmir_core::dataset::collect_dataset;
use nmir_core::env::EnvSpec;
use nmir_core::generator::{train_generator, GeneratorDims, GeneratorHyper};
use nmir_core::policy::{policy_train, PolicyHyper, PolicyParams};
use nmir_core::runtime::{eval_modes, rollout, EvalConfig, RolloutConfig, ScanMode};
use nmir_core::scan::ScanConfig;
use nmir_core::stats::binomial_se;
use nmir_core::Exec;

const CFG: ScanConfig = ScanConfig {
    height: 4,
    width: 4,
    channels: 3,
    levels: 8,
};

fn cloned_policy(spec: &EnvSpec, zero_scans: bool) -> PolicyParams {
    let ds = collect_dataset(spec, 200, &CFG, 1, Exec::Parallel).unwrap();
    let hyper = PolicyHyper {
        hidden: 32,
        learning_rate: 1e-2,
        epochs: 30,
        heldout_fraction: 0.0,
        zero_scans,
        ..Default::default()
    };
    policy_train(&ds, &hyper).unwrap().0
}

#[test]
fn cloned_policy_on_oracle_scans_matches_the_expert() {
    let spec = EnvSpec::t_maze(3);
    let pol = cloned_policy(&spec, false);
    for seed in 1000..1200 {
        let r = rollout(None, &pol, &spec, &RolloutConfig::new(ScanMode::Oracle, seed)).unwrap();
        assert_eq!(r.agreement(), 1.0, "seed {seed}");
        assert!(r.success, "seed {seed}");
        assert_eq!(r.mean_divergence(), 0.0);
    }
}

#[test]
fn zeroed_scans_leave_the_junction_to_chance() {
    let spec = EnvSpec::t_maze(3);
    let pol = cloned_policy(&spec, true);
    let cfg = EvalConfig {
        episodes: 1000,
        seed: 77,
        max_steps: 50,
        ..Default::default()
    };
    let rows = eval_modes(None, &pol, &spec, &cfg, &[ScanMode::Zeroed]).unwrap();
    let rate = rows[0].success_rate;
    let se = binomial_se(0.5, 1000);
    assert!((rate - 0.5).abs() <= 3.0 * se, "zeroed success {rate}");
}

#[test]
fn execution_mode_does_not_change_metrics() {
    let spec = EnvSpec::t_maze(2);
    let pol = cloned_policy(&spec, false);
    let run = |exec| {
        let cfg = EvalConfig {
            episodes: 64,
            seed: 3,
            max_steps: 20,
            exec,
            ..Default::default()
        };
        eval_modes(None, &pol, &spec, &cfg, &[ScanMode::Oracle, ScanMode::Zeroed]).unwrap()
    };
    assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
}

/// Success of the generated-scan loop as the corridor grows; each length
/// gets its own expert data, generator and policy. The curve is printed so
/// the degradation can be inspected even when the assertion holds.
#[test]
#[ignore = "trains eight generators; run with --ignored"]
fn generated_success_degrades_gracefully_with_corridor_length() {
    let episodes = 400;
    let mut curve = Vec::new();
    for l in 1..=8 {
        let spec = EnvSpec::t_maze(l);
        // Same number of transitions (and optimiser steps) at every length.
        let ds = collect_dataset(&spec, 384 / (l + 1), &CFG, 3, Exec::Parallel).unwrap();
        let hyper = GeneratorHyper {
            dims: GeneratorDims {
                hidden: 32,
                ..Default::default()
            },
            epochs: 30,
            heldout_fraction: 0.0,
            ..Default::default()
        };
        let (gen, _) = train_generator(&ds, &hyper).unwrap();
        let pol = cloned_policy(&spec, false);
        let cfg = EvalConfig {
            episodes,
            seed: 11,
            max_steps: 4 * l + 10,
            ..Default::default()
        };
        let rate = eval_modes(Some(&gen), &pol, &spec, &cfg, &[ScanMode::Generated]).unwrap()[0].success_rate;
        println!("L={l} generated success {rate:.3}");
        curve.push(rate);
    }
    for (i, w) in curve.windows(2).enumerate() {
        let slack = 2.0 * binomial_se(w[0].clamp(0.05, 0.95), episodes);
        assert!(w[1] <= w[0] + slack, "L={} -> L={}: {curve:?}", i + 1, i + 2);
    }
}
