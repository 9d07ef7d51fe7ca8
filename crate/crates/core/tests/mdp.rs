use nmir_core::env::{Action, EnvSpec};
use nmir_core::mdp::{evaluate_policy, tabular_build, value_iteration, value_iteration_from, MdpModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Value of a deterministic policy by plain iteration of the Bellman
/// operator, independent of the library's linear solver.
fn iterate_policy(mdp: &MdpModel, policy: &[usize]) -> Vec<f64> {
    let mut v = vec![0.0; mdp.n_states];
    for _ in 0..2000 {
        v = (0..mdp.n_states)
            .map(|s| mdp.reward[s] + mdp.discount * mdp.row(s, policy[s]).iter().zip(&v).map(|(p, x)| p * x).sum::<f64>())
            .collect();
    }
    v
}

#[test]
fn value_iteration_matches_policy_enumeration_on_3x3() {
    let mdp = tabular_build(&EnvSpec::gridworld(3, 3), 0.9).unwrap();
    let sol = value_iteration(&mdp, 1e-10).unwrap();
    let (n, m) = (mdp.n_states, mdp.n_actions);
    let mut best = vec![f64::NEG_INFINITY; n];
    let mut policy = vec![0usize; n];
    for code in 0..m.pow(n as u32) {
        let mut c = code;
        for a in policy.iter_mut() {
            *a = c % m;
            c /= m;
        }
        let acts: Vec<Action> = policy.iter().map(|&a| Action(a)).collect();
        let v = evaluate_policy(&mdp, &acts).unwrap();
        for (b, x) in best.iter_mut().zip(&v) {
            *b = b.max(*x);
        }
    }
    for (s, (v, b)) in sol.values.iter().zip(&best).enumerate() {
        assert!((v - b).abs() < 1e-8, "state {s}");
    }
    // The greedy policy attains the enumerated optimum everywhere.
    let greedy: Vec<usize> = sol.policy.iter().map(|a| a.0).collect();
    let v = iterate_policy(&mdp, &greedy);
    for (s, (v, b)) in v.iter().zip(&best).enumerate() {
        assert!((v - b).abs() < 1e-8, "state {s}");
    }
}

#[test]
fn tabular_model_agrees_with_simulation() {
    let spec = EnvSpec::gridworld(4, 5);
    let EnvSpec::Gridworld { cols, .. } = spec else { unreachable!() };
    let mdp = tabular_build(&spec, 0.95).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut env, _) = spec.reset(0).unwrap();
    let mut checked = 0;
    while checked < 1000 {
        if env.is_done() {
            env = spec.reset(checked as u64).unwrap().0;
        }
        let (r, c) = env.cell().unwrap();
        let s = r * cols + c;
        let a = rng.random_range(0..4);
        let out = env.step(Action(a)).unwrap();
        let (r2, c2) = env.cell().unwrap();
        assert_eq!(mdp.row(s, a)[r2 * cols + c2], 1.0);
        assert_eq!(out.reward, mdp.reward[r2 * cols + c2]);
        checked += 1;
    }
}

#[test]
fn sweeps_are_monotone_from_the_lower_bound() {
    let mdp = tabular_build(&EnvSpec::gridworld(4, 4), 0.95).unwrap();
    let lo = mdp.reward.iter().copied().fold(f64::INFINITY, f64::min) / (1.0 - mdp.discount);
    let mut prev = vec![lo; mdp.n_states];
    value_iteration_from(&mdp, 1e-9, prev.clone(), |v| {
        for (a, b) in v.iter().zip(&prev) {
            assert!(*a >= *b - 1e-15);
        }
        prev = v.to_vec();
    })
    .unwrap();
}

proptest! {
    #[test]
    fn transition_rows_sum_to_one(rows in 2usize..7, cols in 2usize..7, gamma in 0.0f64..0.99) {
        let mdp = tabular_build(&EnvSpec::gridworld(rows, cols), gamma).unwrap();
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let total: f64 = mdp.row(s, a).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(mdp.row(s, a).iter().all(|&p| p == 0.0 || p == 1.0));
            }
        }
    }

    #[test]
    fn env_steps_are_deterministic(seed in any::<u64>(), actions in prop::collection::vec(0usize..3, 1..12)) {
        let spec = EnvSpec::t_maze(4);
        let run = || {
            let (mut st, obs) = spec.reset(seed).unwrap();
            let mut trace = vec![obs.features];
            for &a in &actions {
                if st.is_done() { break; }
                let out = st.step(Action(a)).unwrap();
                trace.push(out.obs.features);
                trace.push(vec![out.reward, f64::from(u8::from(out.done))]);
            }
            trace.into_iter().flatten().map(f64::to_bits).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
