use nmir_core::dataset::{collect_dataset, Record};
use nmir_core::env::{Action, EnvSpec, Observation};
use nmir_core::policy::{ActMode, PolicyHyper, PolicyParams, PolicyTrainer};
use nmir_core::scan::{BrainScan, ScanConfig};
use nmir_core::stats::binomial_se;
use nmir_core::Exec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_policy(seed: u64) -> PolicyParams {
    let cfg = ScanConfig::new(2, 2, 1, 4).unwrap();
    let mut pol = PolicyParams::new(cfg, 3, 3, 6, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = pol.params_mut();
    for id in store.ids().collect::<Vec<_>>() {
        for x in store.get_mut(id).data_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
    }
    pol
}

fn input(seed: u64) -> (BrainScan, Observation) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    let cfg = ScanConfig::new(2, 2, 1, 4).unwrap();
    let cells = (0..4).map(|_| rng.random_range(0..4)).collect();
    let obs = Observation {
        features: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    (BrainScan::from_cells(cfg, cells).unwrap(), obs)
}

#[test]
fn sampled_actions_follow_forward_probabilities() {
    let pol = random_policy(4);
    let (scan, obs) = input(4);
    let probs = pol.forward(&scan, &obs).unwrap();
    let n = 100_000;
    let mut counts = [0usize; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..n {
        counts[pol.act(&scan, &obs, ActMode::Sample, &mut rng).unwrap().0] += 1;
    }
    for (a, &p) in probs.iter().enumerate() {
        let freq = counts[a] as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() <= 3.0 * se, "action {a}: {freq} vs {p}");
    }
}

proptest! {
    #[test]
    fn shifting_all_logits_leaves_probabilities(seed in 0u64..500, shift in -30.0f64..30.0) {
        let mut pol = random_policy(seed);
        let (scan, obs) = input(seed);
        let before = pol.forward(&scan, &obs).unwrap();
        let store = pol.params_mut();
        let b = store.id("out.b").unwrap();
        for x in store.get_mut(b).data_mut() {
            *x += shift;
        }
        let after = pol.forward(&scan, &obs).unwrap();
        for (p, q) in before.iter().zip(&after) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_action_survives_positive_scaling(seed in 0u64..500, scale in 0.01f64..100.0) {
        let mut pol = random_policy(seed);
        let (scan, obs) = input(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let before = pol.act(&scan, &obs, ActMode::Greedy, &mut rng).unwrap();
        let store = pol.params_mut();
        for name in ["out.w", "out.b"] {
            let id = store.id(name).unwrap();
            for x in store.get_mut(id).data_mut() {
                *x *= scale;
            }
        }
        prop_assert_eq!(pol.act(&scan, &obs, ActMode::Greedy, &mut rng).unwrap(), before);
    }
}

#[test]
fn uniform_policy_greedy_picks_action_zero() {
    let cfg = ScanConfig::new(2, 2, 1, 4).unwrap();
    let pol = PolicyParams::new(cfg, 3, 3, 6, 0).unwrap();
    let (scan, obs) = input(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(pol.act(&scan, &obs, ActMode::Greedy, &mut rng).unwrap(), Action(0));
}

/// Without the scan the junction choice is blind to the cue, so held-out
/// junction accuracy is a fair coin over the held-out cues.
#[test]
fn scanless_policy_guesses_at_the_junction() {
    let cfg = ScanConfig::new(2, 2, 3, 4).unwrap();
    let ds = collect_dataset(&EnvSpec::t_maze(3), 400, &cfg, 17, Exec::Parallel).unwrap();
    let hyper = PolicyHyper {
        hidden: 16,
        learning_rate: 1e-2,
        heldout_fraction: 0.5,
        zero_scans: true,
        ..Default::default()
    };
    let mut trainer = PolicyTrainer::new(&ds, hyper).unwrap();
    trainer.run(15).unwrap();
    let junctions: Vec<usize> = trainer
        .heldout_indices()
        .iter()
        .copied()
        .filter(|&i| is_junction(&ds.records[i]))
        .collect();
    assert_eq!(junctions.len(), 200);
    let acc = trainer.accuracy(&junctions).unwrap();
    let se = binomial_se(0.5, junctions.len());
    assert!((acc - 0.5).abs() <= 3.0 * se, "junction accuracy {acc}");
    // Corridor steps carry no ambiguity and are learned perfectly.
    let corridor: Vec<usize> = trainer
        .heldout_indices()
        .iter()
        .copied()
        .filter(|&i| !is_junction(&ds.records[i]))
        .collect();
    assert_eq!(trainer.accuracy(&corridor).unwrap(), 1.0);
}

fn is_junction(r: &Record) -> bool {
    r.obs.features[1] >= 0.5
}
