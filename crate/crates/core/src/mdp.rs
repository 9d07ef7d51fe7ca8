//! Explicit tabular MDPs and an exact value-iteration solver.

use crate::env::{grid_move, Action, EnvSpec};
use crate::error::{Error, Result};

pub const DEFAULT_DISCOUNT: f64 = 0.95;

const ROW_TOL: f64 = 1e-12;

/// Tabular `(X, U, P, D, R)` with a discount factor.
///
/// `transition` is stored flat, indexed `[(s * n_actions + a) * n_states + s']`.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpModel {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<f64>,
    pub initial_dist: Vec<f64>,
    pub reward: Vec<f64>,
    pub discount: f64,
}

impl MdpModel {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        initial_dist: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        let mdp = MdpModel {
            n_states,
            n_actions,
            transition,
            initial_dist,
            reward,
            discount,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n_states, self.n_actions);
        if n == 0 || m == 0 {
            return Err(Error::Config("MDP needs at least one state and one action".into()));
        }
        if self.transition.len() != n * m * n {
            return Err(Error::shape("mdp.transition", &[self.transition.len()], &[n, m, n]));
        }
        if self.initial_dist.len() != n || self.reward.len() != n {
            return Err(Error::shape(
                "mdp.initial_dist/reward",
                &[self.initial_dist.len(), self.reward.len()],
                &[n, n],
            ));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::Config(format!("discount must lie in [0, 1), got {}", self.discount)));
        }
        for s in 0..n {
            for a in 0..m {
                let row = self.row(s, a);
                if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                    return Err(Error::Config(format!("negative transition entry at ({s}, {a})")));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > ROW_TOL {
                    return Err(Error::Config(format!(
                        "transition row ({s}, {a}) sums to {total}"
                    )));
                }
            }
        }
        if self.initial_dist.iter().any(|&p| p < 0.0)
            || (self.initial_dist.iter().sum::<f64>() - 1.0).abs() > ROW_TOL
        {
            return Err(Error::Config("initial distribution is not a probability vector".into()));
        }
        Ok(())
    }

    /// `P(. | s, a)`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn with_reward(&self, reward: Vec<f64>) -> Result<Self> {
        if reward.len() != self.n_states {
            return Err(Error::shape("mdp.with_reward", &[reward.len()], &[self.n_states]));
        }
        Ok(MdpModel {
            reward,
            ..self.clone()
        })
    }

    pub fn with_initial_dist(&self, initial_dist: Vec<f64>) -> Result<Self> {
        let mdp = MdpModel {
            initial_dist,
            ..self.clone()
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// `Q(s, a) = R(s) + γ Σ P(s'|s,a) V(s')`, flat `[s * n_actions + a]`.
    pub fn q_values(&self, values: &[f64]) -> Vec<f64> {
        let mut q = Vec::with_capacity(self.n_states * self.n_actions);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let future: f64 = self.row(s, a).iter().zip(values).map(|(p, v)| p * v).sum();
                q.push(self.reward[s] + self.discount * future);
            }
        }
        q
    }

    /// Greedy policy with lowest-id tie-breaking.
    pub fn greedy(&self, values: &[f64]) -> Vec<Action> {
        let q = self.q_values(values);
        q.chunks(self.n_actions).map(argmax_lowest).collect()
    }
}

/// Index of the maximum, preferring the lowest index among near-ties.
pub(crate) fn argmax_lowest(xs: &[f64]) -> Action {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        let slack = 1e-12 * xs[best].abs().max(1.0);
        if x > xs[best] + slack {
            best = i;
        }
    }
    Action(best)
}

/// Gridworld cell `(r, c)` maps to state `r * cols + c`.
pub fn tabular_build(spec: &EnvSpec, discount: f64) -> Result<MdpModel> {
    spec.validate()?;
    let EnvSpec::Gridworld {
        rows,
        cols,
        start,
        goal,
    } = *spec
    else {
        return Err(Error::Unsupported(
            "the T-maze is partially observable and has no tabular model".into(),
        ));
    };
    let n = rows * cols;
    let m = spec.n_actions();
    let index = |(r, c): (usize, usize)| r * cols + c;
    let mut transition = vec![0.0; n * m * n];
    for r in 0..rows {
        for c in 0..cols {
            let s = index((r, c));
            for a in 0..m {
                // The goal ends the episode; model it as absorbing.
                let next = if (r, c) == goal {
                    s
                } else {
                    index(grid_move(rows, cols, (r, c), Action(a)))
                };
                transition[(s * m + a) * n + next] = 1.0;
            }
        }
    }
    let mut initial_dist = vec![0.0; n];
    initial_dist[index(start)] = 1.0;
    let mut reward = vec![0.0; n];
    reward[index(goal)] = 1.0;
    MdpModel::new(n, m, transition, initial_dist, reward, discount)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub values: Vec<f64>,
    pub policy: Vec<Action>,
    pub sweeps: usize,
}

/// Solves for the optimal values to within `tol` in sup-norm.
pub fn value_iteration(mdp: &MdpModel, tol: f64) -> Result<Solution> {
    value_iteration_from(mdp, tol, vec![0.0; mdp.n_states], |_| {})
}

/// Value iteration from an explicit starting point, calling `on_sweep`
/// with the values after every sweep.
pub fn value_iteration_from(
    mdp: &MdpModel,
    tol: f64,
    init: Vec<f64>,
    mut on_sweep: impl FnMut(&[f64]),
) -> Result<Solution> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Config(format!("value iteration tol must be > 0, got {tol}")));
    }
    if !(0.0..1.0).contains(&mdp.discount) {
        return Err(Error::Config(format!("discount must lie in [0, 1), got {}", mdp.discount)));
    }
    if init.len() != mdp.n_states {
        return Err(Error::shape("value_iteration.init", &[init.len()], &[mdp.n_states]));
    }
    let gamma = mdp.discount;
    let mut values = init;
    let mut sweeps = 0;
    loop {
        let q = mdp.q_values(&values);
        let next: Vec<f64> = q
            .chunks(mdp.n_actions)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let delta = next
            .iter()
            .zip(&values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        values = next;
        sweeps += 1;
        on_sweep(&values);
        // ||V_k - V*|| <= γ/(1-γ) ||V_k - V_{k-1}||
        if delta * gamma <= tol * (1.0 - gamma) {
            break;
        }
    }
    let policy = mdp.greedy(&values);
    Ok(Solution {
        values,
        policy,
        sweeps,
    })
}

/// Exact value of a deterministic policy: solves `(I - γ P_π) V = R`.
pub fn evaluate_policy(mdp: &MdpModel, policy: &[Action]) -> Result<Vec<f64>> {
    let n = mdp.n_states;
    if policy.len() != n {
        return Err(Error::shape("evaluate_policy", &[policy.len()], &[n]));
    }
    let mut a = nalgebra::DMatrix::<f64>::identity(n, n);
    for (s, act) in policy.iter().enumerate() {
        for (s2, p) in mdp.row(s, act.0).iter().enumerate() {
            a[(s, s2)] -= mdp.discount * p;
        }
    }
    let b = nalgebra::DVector::from_column_slice(&mdp.reward);
    a.lu()
        .solve(&b)
        .map(|v| v.as_slice().to_vec())
        .ok_or_else(|| Error::Config("policy evaluation system is singular".into()))
}
