//! Demonstration collection: the expert acts while its scans are recorded.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{Action, EnvSpec, Observation};
use crate::error::{Error, Result};
use crate::expert::{render_scan, ExpertState, ScriptedExpert};
use crate::par::{try_map_indexed, Exec};
use crate::scan::{BrainScan, ScanConfig};

/// Hard cap on episode length during collection.
pub const MAX_EPISODE_STEPS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub obs: Observation,
    pub scan: BrainScan,
    pub action: Action,
    pub obs_next: Observation,
    pub scan_next: BrainScan,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env_spec: EnvSpec,
    pub scan_config: ScanConfig,
    pub seed: u64,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record index ranges, one per episode.
    pub fn episodes(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, r) in self.records.iter().enumerate() {
            if r.done {
                out.push(start..i + 1);
                start = i + 1;
            }
        }
        if start < self.records.len() {
            out.push(start..self.records.len());
        }
        out
    }

    /// Checks the within-episode adjacency invariant and scan shapes.
    pub fn check(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if *r.scan.config() != self.scan_config || *r.scan_next.config() != self.scan_config {
                return Err(Error::Data(format!("record {i} has a mismatched scan config")));
            }
        }
        for (i, pair) in self.records.windows(2).enumerate() {
            if !pair[0].done && pair[0].scan_next != pair[1].scan {
                return Err(Error::Data(format!(
                    "records {i} and {} break scan adjacency",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Seed of episode `index` in a collection run.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Runs one expert episode and returns its records.
pub fn collect_episode(spec: &EnvSpec, cfg: &ScanConfig, seed: u64) -> Result<Vec<Record>> {
    let expert = ScriptedExpert::new(*spec)?;
    let (mut state, mut obs) = spec.reset(seed)?;
    let mut h = ExpertState::default();
    let mut scan = render_scan(&h, cfg)?;
    let mut records = Vec::new();
    for _ in 0..MAX_EPISODE_STEPS {
        let action = expert.act(&h, &obs);
        let h_next = expert.tick(h, &obs);
        let scan_next = render_scan(&h_next, cfg)?;
        let out = state.step(action)?;
        records.push(Record {
            obs,
            scan,
            action,
            obs_next: out.obs.clone(),
            scan_next: scan_next.clone(),
            done: out.done,
        });
        if out.done {
            return Ok(records);
        }
        obs = out.obs;
        scan = scan_next;
        h = h_next;
    }
    Err(Error::Data(format!(
        "expert episode exceeded {MAX_EPISODE_STEPS} steps"
    )))
}

/// Collects `episodes` expert episodes. Output order follows episode index
/// regardless of `exec`.
pub fn collect_dataset(
    spec: &EnvSpec,
    episodes: usize,
    cfg: &ScanConfig,
    seed: u64,
    exec: Exec,
) -> Result<Dataset> {
    if episodes == 0 {
        return Err(Error::Config("episodes must be >= 1".into()));
    }
    spec.validate()?;
    cfg.validate()?;
    let per_episode = try_map_indexed(exec, episodes, |i| {
        collect_episode(spec, cfg, episode_seed(seed, i))
    })?;
    Ok(Dataset {
        env_spec: *spec,
        scan_config: *cfg,
        seed,
        records: per_episode.into_iter().flatten().collect(),
    })
}

/// Splits record indices by episode: the last `fraction` of episodes are
/// held out, provided at least one episode remains for training.
pub fn split_episodes(ds: &Dataset, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let episodes = ds.episodes();
    let n_held = ((episodes.len() as f64) * fraction).round() as usize;
    let n_held = n_held.min(episodes.len().saturating_sub(1));
    let cut = episodes.len() - n_held;
    let train = episodes[..cut].iter().flat_map(|r| r.clone()).collect();
    let held = episodes[cut..].iter().flat_map(|r| r.clone()).collect();
    (train, held)
}

/// Minibatch indices for optimiser step `step`: each epoch is a fresh
/// permutation drawn from `(seed, epoch)`, so any step can be reproduced
/// without replaying earlier ones.
pub fn batch_for_step(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size) as u64;
    let epoch = step / per_epoch;
    let slot = (step % per_epoch) as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0xA076_1D64_78BD_642F));
    perm.shuffle(&mut rng);
    let end = ((slot + 1) * batch_size).min(n);
    perm[slot * batch_size..end].to_vec()
}
