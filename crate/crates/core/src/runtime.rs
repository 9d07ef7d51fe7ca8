//! Closed-loop operation: the policy acts on a scan that is either the
//! expert's true rendering, the generator's own running prediction, or
//! blank — with the scripted expert shadowing every episode for scoring.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::episode_seed;
use crate::env::{Action, EnvSpec, Observation};
use crate::error::{Error, Result};
use crate::expert::{render_scan, ExpertState, ScriptedExpert};
use crate::generator::{GeneratorModel, SampleMode};
use crate::par::{try_map_indexed, Exec};
use crate::policy::{ActMode, PolicyParams};
use crate::scan::BrainScan;
use crate::stats::{binomial_interval, mean, Interval};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    /// The shadow expert's rendered scan.
    Oracle,
    /// The generator's prediction from its own previous output.
    Generated,
    /// All-zero scans (ablation).
    Zeroed,
}

impl ScanMode {
    pub const ALL: [ScanMode; 3] = [ScanMode::Oracle, ScanMode::Generated, ScanMode::Zeroed];

    pub fn name(self) -> &'static str {
        match self {
            ScanMode::Oracle => "oracle",
            ScanMode::Generated => "generated",
            ScanMode::Zeroed => "zeroed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    pub scan_mode: ScanMode,
    pub max_steps: usize,
    pub seed: u64,
    #[serde(default = "greedy_policy")]
    pub policy_mode: ActMode,
    #[serde(default = "greedy_generator")]
    pub generator_mode: SampleMode,
}

fn greedy_policy() -> ActMode {
    ActMode::Greedy
}

fn greedy_generator() -> SampleMode {
    SampleMode::Greedy
}

impl RolloutConfig {
    pub fn new(scan_mode: ScanMode, seed: u64) -> Self {
        RolloutConfig {
            scan_mode,
            max_steps: 200,
            seed,
            policy_mode: ActMode::Greedy,
            generator_mode: SampleMode::Greedy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub obs: Observation,
    /// Scan the policy actually saw.
    pub scan: BrainScan,
    pub action: Action,
    /// What the shadow expert would have done here.
    pub expert_action: Action,
    /// Fraction of cells differing from the shadow expert's scan.
    pub divergence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub steps: Vec<RolloutStep>,
    pub success: bool,
    pub total_reward: f64,
}

impl RolloutResult {
    /// Fraction of steps where the robot matched the shadow expert.
    pub fn agreement(&self) -> f64 {
        if self.steps.is_empty() {
            return 1.0;
        }
        self.steps.iter().filter(|s| s.action == s.expert_action).count() as f64 / self.steps.len() as f64
    }

    pub fn mean_divergence(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        mean(&self.steps.iter().map(|s| s.divergence).collect::<Vec<_>>())
    }
}

fn check_models(gen: Option<&GeneratorModel>, pol: &PolicyParams, spec: &EnvSpec, mode: ScanMode) -> Result<()> {
    spec.validate()?;
    if pol.obs_dim() != spec.obs_dim() || pol.n_actions() != spec.n_actions() {
        return Err(Error::Config("policy was trained for a different environment".into()));
    }
    match (mode, gen) {
        (ScanMode::Generated, None) => Err(Error::Config("generated scan mode needs a generator".into())),
        (_, Some(g)) if g.scan_config() != pol.scan_config() || g.obs_dim() != spec.obs_dim() => Err(
            Error::Config("generator and policy disagree on scan or observation shape".into()),
        ),
        _ => Ok(()),
    }
}

/// One closed-loop episode.
pub fn rollout(gen: Option<&GeneratorModel>, pol: &PolicyParams, spec: &EnvSpec, cfg: &RolloutConfig) -> Result<RolloutResult> {
    rollout_with_shadow(gen, pol, spec, cfg, |_| {})
}

/// [`rollout`] with a hook applied to the shadow expert's state after every
/// update. Tampering with the shadow must not change the robot's actions
/// outside oracle mode.
pub fn rollout_with_shadow(
    gen: Option<&GeneratorModel>,
    pol: &PolicyParams,
    spec: &EnvSpec,
    cfg: &RolloutConfig,
    mut shadow_hook: impl FnMut(&mut ExpertState),
) -> Result<RolloutResult> {
    if cfg.max_steps == 0 {
        return Err(Error::Config("max_steps must be >= 1".into()));
    }
    check_models(gen, pol, spec, cfg.scan_mode)?;
    let scan_cfg = *pol.scan_config();
    let expert = ScriptedExpert::new(*spec)?;
    // Separate streams for generator and policy sampling.
    let mut gen_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    gen_rng.set_stream(1);
    let mut pol_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    pol_rng.set_stream(2);

    let (mut env, mut obs) = spec.reset(cfg.seed)?;
    let mut shadow = ExpertState::default();
    shadow_hook(&mut shadow);
    // The robot's own scan state; in generated mode it starts from the
    // rendered initial scan and thereafter evolves on its own.
    let mut robot_scan = render_scan(&ExpertState::default(), &scan_cfg)?;
    let mut prev_obs: Option<Observation> = None;

    let mut steps = Vec::new();
    let mut total_reward = 0.0;
    let mut success = false;
    for _ in 0..cfg.max_steps {
        let oracle = render_scan(&shadow, &scan_cfg)?;
        let scan = match cfg.scan_mode {
            ScanMode::Oracle => oracle.clone(),
            ScanMode::Zeroed => BrainScan::zeros(scan_cfg),
            ScanMode::Generated => {
                if let Some(prev) = &prev_obs {
                    let g = gen.expect("checked above");
                    robot_scan = g.next_scan(&robot_scan, prev, cfg.generator_mode, &mut gen_rng)?;
                }
                robot_scan.clone()
            }
        };
        let action = pol.act(&scan, &obs, cfg.policy_mode, &mut pol_rng)?;
        let expert_action = expert.act(&shadow, &obs);
        let divergence = scan.divergence(&oracle);

        shadow = expert.tick(shadow, &obs);
        shadow_hook(&mut shadow);
        let out = env.step(action)?;
        total_reward += out.reward;
        steps.push(RolloutStep {
            obs: obs.clone(),
            scan,
            action,
            expert_action,
            divergence,
        });
        prev_obs = Some(obs);
        obs = out.obs;
        if out.done {
            success = out.reward > 0.0;
            break;
        }
    }
    Ok(RolloutResult {
        steps,
        success,
        total_reward,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeMetrics {
    pub mode: ScanMode,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub success_ci: Interval,
    pub mean_agreement: f64,
    pub mean_divergence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    pub max_steps: usize,
    pub policy_mode: ActMode,
    pub generator_mode: SampleMode,
    pub exec: Exec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 1000,
            seed: 0,
            max_steps: 200,
            policy_mode: ActMode::Greedy,
            generator_mode: SampleMode::Greedy,
            exec: Exec::Parallel,
        }
    }
}

/// Runs `modes` on one shared set of episode seeds.
pub fn eval_modes(
    gen: Option<&GeneratorModel>,
    pol: &PolicyParams,
    spec: &EnvSpec,
    cfg: &EvalConfig,
    modes: &[ScanMode],
) -> Result<Vec<ModeMetrics>> {
    if cfg.episodes == 0 {
        return Err(Error::Config("episodes must be >= 1".into()));
    }
    modes
        .iter()
        .map(|&mode| {
            let results = try_map_indexed(cfg.exec, cfg.episodes, |i| {
                let rc = RolloutConfig {
                    scan_mode: mode,
                    max_steps: cfg.max_steps,
                    seed: episode_seed(cfg.seed, i),
                    policy_mode: cfg.policy_mode,
                    generator_mode: cfg.generator_mode,
                };
                rollout(gen, pol, spec, &rc)
            })?;
            let successes = results.iter().filter(|r| r.success).count();
            let agreement: Vec<f64> = results.iter().map(RolloutResult::agreement).collect();
            let divergence: Vec<f64> = results.iter().map(RolloutResult::mean_divergence).collect();
            Ok(ModeMetrics {
                mode,
                episodes: cfg.episodes,
                successes,
                success_rate: successes as f64 / cfg.episodes as f64,
                success_ci: binomial_interval(successes, cfg.episodes),
                mean_agreement: mean(&agreement),
                mean_divergence: mean(&divergence),
            })
        })
        .collect()
}

/// All three scan modes, one row each.
pub fn eval_suite(gen: &GeneratorModel, pol: &PolicyParams, spec: &EnvSpec, cfg: &EvalConfig) -> Result<Vec<ModeMetrics>> {
    eval_modes(Some(gen), pol, spec, cfg, &ScanMode::ALL)
}

pub fn metrics_csv(rows: &[ModeMetrics]) -> String {
    let mut out = String::from("mode,episodes,successes,success_rate,ci_lo,ci_hi,mean_agreement,mean_divergence\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.mode.name(),
            r.episodes,
            r.successes,
            r.success_rate,
            r.success_ci.lo,
            r.success_ci.hi,
            r.mean_agreement,
            r.mean_divergence
        );
    }
    out
}
