//! Linear inverse RL on tabular MDPs: recover `w` in `R(x) = wᵀφ(x)` from
//! an expert policy, and check the result against an exact planner.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvSpec};
use crate::error::{Error, Result};
use crate::mdp::{evaluate_policy, value_iteration, MdpModel};

/// State features `φ`, stored row-major `n_states × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    n_states: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(n_states: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || n_states == 0 {
            return Err(Error::Config("feature map needs >= 1 state and >= 1 feature".into()));
        }
        if data.len() != n_states * dim {
            return Err(Error::shape("feature map", &[data.len()], &[n_states, dim]));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("feature map has non-finite entries".into()));
        }
        Ok(FeatureMap { n_states, dim, data })
    }

    pub fn one_hot(n_states: usize) -> Self {
        let mut data = vec![0.0; n_states * n_states];
        for s in 0..n_states {
            data[s * n_states + s] = 1.0;
        }
        FeatureMap {
            n_states,
            dim: n_states,
            data,
        }
    }

    /// Four features per cell: Manhattan distance to the goal, number of
    /// adjacent boundary walls, column and row — each scaled into [0, 1].
    pub fn compact_grid(spec: &EnvSpec) -> Result<Self> {
        spec.validate()?;
        let EnvSpec::Gridworld { rows, cols, goal, .. } = *spec else {
            return Err(Error::Unsupported("compact features are defined for gridworlds only".into()));
        };
        let max_dist = (rows - 1 + cols - 1) as f64;
        let mut data = Vec::with_capacity(rows * cols * 4);
        for r in 0..rows {
            for c in 0..cols {
                let dist = r.abs_diff(goal.0) + c.abs_diff(goal.1);
                let walls = [r == 0, r + 1 == rows, c == 0, c + 1 == cols]
                    .iter()
                    .filter(|&&w| w)
                    .count();
                data.extend([
                    dist as f64 / max_dist,
                    walls as f64 / 4.0,
                    c as f64 / (cols - 1) as f64,
                    r as f64 / (rows - 1) as f64,
                ]);
            }
        }
        Self::new(rows * cols, 4, data)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.dim..(s + 1) * self.dim]
    }

    /// `R = Φ w`.
    pub fn reward(&self, w: &RewardWeights) -> Result<Vec<f64>> {
        if w.w.len() != self.dim {
            return Err(Error::shape("reward weights", &[w.w.len()], &[self.dim]));
        }
        Ok((0..self.n_states)
            .map(|s| self.row(s).iter().zip(&w.w).map(|(f, x)| f * x).sum())
            .collect())
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &FeatureMap, b: f64) -> Result<Self> {
        if self.n_states != other.n_states || self.dim != other.dim {
            return Err(Error::shape("feature map combine", &[self.n_states, self.dim], &[other.n_states, other.dim]));
        }
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Self::new(self.n_states, self.dim, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w: Vec<f64>,
    /// Box bound `‖w‖∞ ≤ w_max`, when set.
    pub w_max: Option<f64>,
}

impl RewardWeights {
    pub fn new(w: Vec<f64>, w_max: Option<f64>) -> Result<Self> {
        let rw = RewardWeights { w, w_max };
        if let Some(b) = w_max {
            if b.is_nan() || b <= 0.0 {
                return Err(Error::Config(format!("w_max must be > 0, got {b}")));
            }
            if rw.sup_norm() > b {
                return Err(Error::Config(format!("‖w‖∞ = {} exceeds w_max = {b}", rw.sup_norm())));
            }
        }
        Ok(rw)
    }

    pub fn sup_norm(&self) -> f64 {
        self.w.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn scaled(&self, c: f64) -> Self {
        RewardWeights {
            w: self.w.iter().map(|x| c * x).collect(),
            w_max: self.w_max.map(|b| b * c.abs()),
        }
    }

    /// Radial projection onto `‖w‖∞ = w_max`. Optimal policies are
    /// invariant to positive scaling, so this never changes which
    /// behaviour `w` explains.
    fn project(&mut self) {
        let norm = self.sup_norm();
        if let (Some(b), true) = (self.w_max, norm > 0.0) {
            for x in &mut self.w {
                *x *= b / norm;
            }
        }
    }
}

/// Exact discounted feature expectations `μ(π) = Σ_t γ^t E[φ(s_t)]`.
///
/// Solves `(I − γ P_πᵀ) d = D` for the discounted occupancy `d`, then
/// returns `Φᵀ d`.
pub fn feature_expectations(mdp: &MdpModel, policy: &[Action], phi: &FeatureMap) -> Result<Vec<f64>> {
    let n = mdp.n_states;
    if !(0.0..1.0).contains(&mdp.discount) {
        return Err(Error::Config(format!(
            "discount {} makes the occupancy system singular",
            mdp.discount
        )));
    }
    if policy.len() != n {
        return Err(Error::shape("feature_expectations.policy", &[policy.len()], &[n]));
    }
    if phi.n_states != n {
        return Err(Error::shape("feature_expectations.phi", &[phi.n_states], &[n]));
    }
    if let Some((s, a)) = policy.iter().enumerate().find(|(_, a)| a.0 >= mdp.n_actions) {
        return Err(Error::Config(format!("policy action {} at state {s} is out of range", a.0)));
    }
    let mut m = DMatrix::<f64>::identity(n, n);
    for (s, a) in policy.iter().enumerate() {
        for (s2, p) in mdp.row(s, a.0).iter().enumerate() {
            m[(s2, s)] -= mdp.discount * p;
        }
    }
    let d = m
        .lu()
        .solve(&DVector::from_column_slice(&mdp.initial_dist))
        .ok_or_else(|| Error::Config("occupancy system is singular".into()))?;
    let mut mu = vec![0.0; phi.dim];
    for (s, ds) in d.iter().enumerate() {
        for (m, f) in mu.iter_mut().zip(phi.row(s)) {
            *m += ds * f;
        }
    }
    Ok(mu)
}

/// Optimal values and greedy policy, exact to roundoff: value iteration
/// gets close, then policy iteration with linear solves finishes the job.
pub fn solve_exact(mdp: &MdpModel) -> Result<(Vec<f64>, Vec<Action>)> {
    let scale = mdp.reward.iter().fold(0.0f64, |m, r| m.max(r.abs())).max(1e-300);
    let vi = value_iteration(mdp, 1e-10 * scale)?;
    let mut policy = vi.policy;
    // Each improvement strictly raises the values, so this terminates;
    // the cap only guards against roundoff ping-pong between tied actions.
    for _ in 0..mdp.n_states * mdp.n_actions + 1 {
        let values = evaluate_policy(mdp, &policy)?;
        let next = mdp.greedy(&values);
        if next == policy {
            return Ok((values, policy));
        }
        let q = mdp.q_values(&values);
        let improves = next.iter().zip(&policy).enumerate().any(|(s, (a, b))| {
            let row = &q[s * mdp.n_actions..(s + 1) * mdp.n_actions];
            row[a.0] > row[b.0] + 1e-12 * scale
        });
        if !improves {
            return Ok((values, policy));
        }
        policy = next;
    }
    let values = evaluate_policy(mdp, &policy)?;
    Ok((values, policy))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrlHyper {
    /// Over-relaxation of each projection step, in `(0, 2)`; values near 2
    /// cut through thin feasible cones much faster than plain projection.
    pub relaxation: f64,
    pub w_max: Option<f64>,
    /// Stop once the normalised margin drops below this.
    pub tol: f64,
    pub max_iters: usize,
    /// Replace the model's start distribution by a uniform one, so every
    /// state's behaviour enters the feature expectations.
    pub uniform_start: bool,
}

impl Default for IrlHyper {
    fn default() -> Self {
        IrlHyper {
            relaxation: 1.9,
            w_max: Some(1.0),
            tol: 1e-9,
            max_iters: 500,
            uniform_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub weights: RewardWeights,
    pub margin: f64,
    pub iterations: usize,
    /// Margin of every iterate that improved on all earlier ones.
    pub history: Vec<f64>,
}

/// Expert suboptimality under `w`, normalised by `‖w‖∞`:
/// `wᵀ(μ(π_w) − μ_E) / ‖w‖∞ ≥ 0`, together with `μ(π_w)`.
fn margin_of(mdp: &MdpModel, phi: &FeatureMap, w: &RewardWeights, mu_expert: &[f64]) -> Result<(f64, Vec<f64>)> {
    let norm = w.sup_norm();
    let model = mdp.with_reward(phi.reward(w)?)?;
    let (_, policy) = solve_exact(&model)?;
    let mu = feature_expectations(&model, &policy, phi)?;
    if norm == 0.0 {
        return Ok((f64::INFINITY, mu));
    }
    let gap: f64 = w.w.iter().zip(mu.iter().zip(mu_expert)).map(|(x, (a, b))| x * (a - b)).sum();
    Ok((gap.max(0.0) / norm, mu))
}

/// True when every action at every state has the same successor
/// distribution, so no reward can prefer one behaviour over another.
fn all_actions_tie(mdp: &MdpModel) -> bool {
    (0..mdp.n_states).all(|s| (1..mdp.n_actions).all(|a| mdp.row(s, a) == mdp.row(s, 0)))
}

/// A reward under which every action ties everywhere (e.g. a constant
/// one-hot reward) explains any behaviour and is never a final answer.
fn is_degenerate(mdp: &MdpModel, phi: &FeatureMap, w: &RewardWeights) -> Result<bool> {
    let report = irl_validate_inner(mdp, w, phi, None, 0.0)?;
    Ok(report.margin <= 1e-9 * w.sup_norm())
}

/// Projected max-margin iteration. Each round plans under the current `w`;
/// if the planner's feature expectations `μ` beat the expert's, `w` moves
/// toward `μ_E − μ` by a relaxed projection onto the half-space
/// `{w : wᵀ(μ − μ_E) ≤ 0}`, then back onto the box. The first step starts
/// from `μ_E` minus the mean of the constant-action policies.
pub fn irl_recover(mdp: &MdpModel, expert: &[Action], phi: &FeatureMap, hyper: &IrlHyper) -> Result<Recovery> {
    mdp.validate()?;
    if phi.n_states != mdp.n_states {
        return Err(Error::shape("irl_recover.phi", &[phi.n_states], &[mdp.n_states]));
    }
    if phi.dim > mdp.n_states {
        return Err(Error::Config(format!(
            "feature dimension {} exceeds the state count {}",
            phi.dim, mdp.n_states
        )));
    }
    let relaxation_ok = hyper.relaxation > 0.0 && hyper.relaxation < 2.0;
    if !relaxation_ok || hyper.tol.is_nan() || hyper.tol <= 0.0 {
        return Err(Error::Config("IRL needs 0 < relaxation < 2 and tol > 0".into()));
    }
    let mdp = if hyper.uniform_start {
        mdp.with_initial_dist(vec![1.0 / mdp.n_states as f64; mdp.n_states])?
    } else {
        mdp.clone()
    };
    let mu_expert = feature_expectations(&mdp, expert, phi)?;
    let mut weights = RewardWeights::new(vec![0.0; phi.dim], hyper.w_max)?;

    if all_actions_tie(&mdp) {
        return Ok(Recovery {
            weights,
            margin: 0.0,
            iterations: 0,
            history: vec![0.0],
        });
    }

    let mut mu = vec![0.0; phi.dim];
    for a in 0..mdp.n_actions {
        let m = feature_expectations(&mdp, &vec![Action(a); mdp.n_states], phi)?;
        for (x, y) in mu.iter_mut().zip(m) {
            *x += y / mdp.n_actions as f64;
        }
    }
    let mut margin = f64::INFINITY;
    let mut history = Vec::new();
    let mut iterations = 0;
    for iter in 1..=hyper.max_iters {
        iterations = iter;
        let g: Vec<f64> = mu.iter().zip(&mu_expert).map(|(c, e)| c - e).collect();
        if iter == 1 {
            weights.w = g.iter().map(|x| -x).collect();
        } else {
            let excess: f64 = weights.w.iter().zip(&g).map(|(w, g)| w * g).sum();
            let gg: f64 = g.iter().map(|x| x * x).sum();
            let step = hyper.relaxation * excess / gg;
            for (w, g) in weights.w.iter_mut().zip(&g) {
                *w -= step * g;
            }
        }
        weights.project();
        if weights.sup_norm() == 0.0 {
            break;
        }
        let (m, next_mu) = margin_of(&mdp, phi, &weights, &mu_expert)?;
        if history.last().is_none_or(|&best| m < best) {
            history.push(m);
        }
        margin = m;
        mu = next_mu;
        if margin < hyper.tol {
            if is_degenerate(&mdp, phi, &weights)? {
                break;
            }
            return Ok(Recovery {
                weights,
                margin,
                iterations: iter,
                history,
            });
        }
    }
    Err(Error::Convergence {
        iterations,
        margin: history.last().copied().unwrap_or(margin),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateCheck {
    pub state: usize,
    pub expert_action: Action,
    pub best_action: Action,
    /// `max_a Q(s, a) − Q(s, expert)`, never negative.
    pub q_gap: f64,
    pub optimal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub states: Vec<StateCheck>,
    /// Largest Q-gap over all states.
    pub margin: f64,
}

impl ValidationReport {
    pub fn optimal_fraction(&self) -> f64 {
        self.states.iter().filter(|s| s.optimal).count() as f64 / self.states.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("state,expert_action,best_action,q_gap\n");
        for s in &self.states {
            let _ = writeln!(out, "{},{},{},{}", s.state, s.expert_action.0, s.best_action.0, s.q_gap);
        }
        out
    }
}

/// Plans exactly under `R = Φw` and flags, per state, whether the expert's
/// action is within `tol` of the best Q-value.
pub fn irl_validate(
    mdp: &MdpModel,
    w: &RewardWeights,
    phi: &FeatureMap,
    expert: &[Action],
    tol: f64,
) -> Result<ValidationReport> {
    if expert.len() != mdp.n_states {
        return Err(Error::shape("irl_validate.expert", &[expert.len()], &[mdp.n_states]));
    }
    irl_validate_inner(mdp, w, phi, Some(expert), tol)
}

/// With `expert = None`, gaps are measured to the worst action instead, so
/// `margin` is the largest best-to-worst spread.
fn irl_validate_inner(
    mdp: &MdpModel,
    w: &RewardWeights,
    phi: &FeatureMap,
    expert: Option<&[Action]>,
    tol: f64,
) -> Result<ValidationReport> {
    let model = mdp.with_reward(phi.reward(w)?)?;
    let (values, policy) = solve_exact(&model)?;
    let q = model.q_values(&values);
    let m = model.n_actions;
    let mut states = Vec::with_capacity(model.n_states);
    let mut margin = 0.0f64;
    for (s, &best) in policy.iter().enumerate() {
        let row = &q[s * m..(s + 1) * m];
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ea = match expert {
            Some(e) => e[s],
            None => Action((0..m).fold(0, |lo, a| if row[a] < row[lo] { a } else { lo })),
        };
        let q_gap = (top - row[ea.0]).max(0.0);
        margin = margin.max(q_gap);
        states.push(StateCheck {
            state: s,
            expert_action: ea,
            best_action: best,
            q_gap,
            optimal: q_gap <= tol,
        });
    }
    Ok(ValidationReport { states, margin })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{tabular_build, DEFAULT_DISCOUNT};

    fn grid(n: usize) -> (MdpModel, Vec<Action>, FeatureMap) {
        let mdp = tabular_build(&EnvSpec::gridworld(n, n), DEFAULT_DISCOUNT).unwrap();
        let (_, expert) = solve_exact(&mdp).unwrap();
        (mdp, expert, FeatureMap::one_hot(n * n))
    }

    fn goal_weights(n: usize) -> RewardWeights {
        let mut w = vec![0.0; n * n];
        w[n * n - 1] = 1.0;
        RewardWeights::new(w, None).unwrap()
    }

    #[test]
    fn geometric_series() {
        let mdp = MdpModel::new(1, 1, vec![1.0], vec![1.0], vec![0.0], 0.9).unwrap();
        let mu = feature_expectations(&mdp, &[Action(0)], &FeatureMap::one_hot(1)).unwrap();
        assert!((mu[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn discount_one_is_rejected() {
        let mut mdp = MdpModel::new(1, 1, vec![1.0], vec![1.0], vec![0.0], 0.9).unwrap();
        mdp.discount = 1.0;
        let r = feature_expectations(&mdp, &[Action(0)], &FeatureMap::one_hot(1));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn identical_policies_identical_expectations() {
        let (mdp, expert, phi) = grid(3);
        let a = feature_expectations(&mdp, &expert, &phi).unwrap();
        let b = feature_expectations(&mdp, &expert.clone(), &phi).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn occupancy_mass_is_one_over_one_minus_gamma() {
        let (mdp, expert, phi) = grid(4);
        let total: f64 = feature_expectations(&mdp, &expert, &phi).unwrap().iter().sum();
        assert!((total - 1.0 / (1.0 - DEFAULT_DISCOUNT)).abs() < 1e-10);
    }

    #[test]
    fn recovers_a_reward_the_expert_is_optimal_for() {
        let (mdp, expert, phi) = grid(4);
        let rec = irl_recover(&mdp, &expert, &phi, &IrlHyper::default()).unwrap();
        assert!(rec.weights.sup_norm() > 0.0);
        assert!(!is_degenerate(&mdp, &phi, &rec.weights).unwrap());
        let report = irl_validate(&mdp, &rec.weights, &phi, &expert, 1e-9).unwrap();
        assert!(report.optimal_fraction() >= 0.95, "{}", report.to_csv());
        for pair in rec.history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9);
        }
        // Scaling a reward does not change which actions are optimal.
        let doubled = irl_validate(&mdp, &rec.weights.scaled(2.0), &phi, &expert, 2e-9).unwrap();
        assert_eq!(
            report.states.iter().map(|s| s.optimal).collect::<Vec<_>>(),
            doubled.states.iter().map(|s| s.optimal).collect::<Vec<_>>()
        );
    }

    #[test]
    fn compact_features_recover_too() {
        let spec = EnvSpec::gridworld(4, 4);
        let (mdp, expert, _) = grid(4);
        let phi = FeatureMap::compact_grid(&spec).unwrap();
        assert_eq!(phi.dim(), 4);
        let rec = irl_recover(&mdp, &expert, &phi, &IrlHyper::default()).unwrap();
        let report = irl_validate(&mdp, &rec.weights, &phi, &expert, 1e-9).unwrap();
        assert!(report.optimal_fraction() >= 0.95, "{}", report.to_csv());
    }

    #[test]
    fn single_action_terminates_at_zero_margin() {
        let mdp = MdpModel::new(2, 1, vec![0.0, 1.0, 1.0, 0.0], vec![0.5, 0.5], vec![0.0; 2], 0.9).unwrap();
        let rec = irl_recover(&mdp, &[Action(0); 2], &FeatureMap::one_hot(2), &IrlHyper::default()).unwrap();
        assert_eq!(rec.margin, 0.0);
        assert_eq!(rec.iterations, 0);
    }

    #[test]
    fn generating_weights_validate() {
        let (mdp, expert, phi) = grid(4);
        let report = irl_validate(&mdp, &goal_weights(4), &phi, &expert, 1e-9).unwrap();
        assert!(report.states.iter().all(|s| s.optimal));
        assert!(report.to_csv().starts_with("state,expert_action,best_action,q_gap\n"));
    }

    #[test]
    fn negated_weights_flag_a_state() {
        let (mdp, expert, phi) = grid(4);
        let report = irl_validate(&mdp, &goal_weights(4).scaled(-1.0), &phi, &expert, 1e-9).unwrap();
        assert!(report.states.iter().any(|s| !s.optimal));
    }

    #[test]
    fn zero_weights_make_everything_optimal() {
        let (mdp, expert, phi) = grid(4);
        let zero = RewardWeights::new(vec![0.0; 16], None).unwrap();
        let report = irl_validate(&mdp, &zero, &phi, &expert, 1e-12).unwrap();
        assert!(report.states.iter().all(|s| s.optimal));
        assert_eq!(report.margin, 0.0);
    }

    #[test]
    fn unreachable_convergence_is_reported() {
        let (mdp, expert, phi) = grid(4);
        let hyper = IrlHyper {
            max_iters: 0,
            ..Default::default()
        };
        assert!(matches!(
            irl_recover(&mdp, &expert, &phi, &hyper),
            Err(Error::Convergence { iterations: 0, .. })
        ));
    }
}
