//! The scripted demonstrator: a deterministic agent with hidden memory,
//! and the renderer that turns that memory into a [`BrainScan`].

use crate::env::{Action, EnvSpec, Observation, DOWN, FORWARD, LEFT, RIGHT, TURN_LEFT, TURN_RIGHT, UP};
use crate::error::{Error, Result};
use crate::scan::{BrainScan, ScanConfig};

/// Number of memory slots: the latched cue and the step counter.
pub const MEMORY_SLOTS: usize = 2;

/// Hidden state `h_t` of the expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ExpertState {
    /// Latched cue: -1 left, +1 right, 0 not yet seen.
    pub cue: i8,
    /// Steps observed so far.
    pub counter: u32,
}

impl ExpertState {
    pub fn memory(&self) -> [f64; MEMORY_SLOTS] {
        [f64::from(self.cue), f64::from(self.counter)]
    }
}

/// Scripted expert for one environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptedExpert {
    spec: EnvSpec,
}

impl ScriptedExpert {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        Ok(ScriptedExpert { spec })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// `h_{t+1} = g(h_t, x_t)`: latch the first nonzero cue, count the step.
    pub fn tick(&self, h: ExpertState, obs: &Observation) -> ExpertState {
        let mut next = h;
        if let EnvSpec::TMaze { .. } = self.spec {
            let signal = obs.features[2];
            if next.cue == 0 && signal != 0.0 {
                next.cue = if signal > 0.0 { 1 } else { -1 };
            }
        }
        next.counter = next.counter.wrapping_add(1);
        next
    }

    pub fn act(&self, h: &ExpertState, obs: &Observation) -> Action {
        match self.spec {
            EnvSpec::TMaze { .. } => {
                if obs.features[1] < 0.5 {
                    return FORWARD;
                }
                let cue = if h.cue != 0 {
                    f64::from(h.cue)
                } else {
                    obs.features[2]
                };
                if cue > 0.0 {
                    TURN_RIGHT
                } else {
                    TURN_LEFT
                }
            }
            EnvSpec::Gridworld { rows, cols, goal, .. } => {
                let row = (obs.features[0] * (rows - 1) as f64).round() as usize;
                let col = (obs.features[1] * (cols - 1) as f64).round() as usize;
                // Candidates in action-id order; the first that closes distance wins.
                if goal.0 < row {
                    UP
                } else if goal.0 > row {
                    DOWN
                } else if goal.1 < col {
                    LEFT
                } else if goal.1 > col {
                    RIGHT
                } else {
                    UP
                }
            }
        }
    }
}

/// Disjoint rectangular blocks on channel 0, at most a 2x2 tiling.
/// Each block is `(row_start, row_end, col_start, col_end)`.
pub fn memory_blocks(cfg: &ScanConfig) -> Vec<(usize, usize, usize, usize)> {
    let br = cfg.height.min(2);
    let bc = cfg.width.min(2);
    let mut blocks = Vec::with_capacity(br * bc);
    for i in 0..br {
        for j in 0..bc {
            blocks.push((
                i * cfg.height / br,
                (i + 1) * cfg.height / br,
                j * cfg.width / bc,
                (j + 1) * cfg.width / bc,
            ));
        }
    }
    blocks
}

/// Level of the cue block: -1 → 0, unset → ⌊K/2⌋, +1 → K-1.
pub fn cue_level(cue: i8, levels: usize) -> u8 {
    match cue.signum() {
        -1 => 0,
        0 => (levels / 2) as u8,
        _ => (levels - 1) as u8,
    }
}

/// Deterministic block-coded rendering of the expert memory.
///
/// Slot 0 (cue) and slot 1 (step counter mod K) each fill one block of
/// channel 0. Channel 1 carries `(col + counter) mod K`, channel 2
/// carries `(row + counter) mod K`, and any further channel
/// `(row + col + counter) mod K`.
pub fn render_scan(h: &ExpertState, cfg: &ScanConfig) -> Result<BrainScan> {
    cfg.validate()?;
    let blocks = memory_blocks(cfg);
    if blocks.len() < MEMORY_SLOTS {
        return Err(Error::Config(format!(
            "{}x{} scan has {} memory blocks, need {MEMORY_SLOTS}",
            cfg.height,
            cfg.width,
            blocks.len()
        )));
    }
    let k = cfg.levels;
    let counter = h.counter as usize % k;
    let slot_levels = [cue_level(h.cue, k), counter as u8];
    let mut scan = BrainScan::zeros(*cfg);
    for (&(r0, r1, c0, c1), &level) in blocks.iter().zip(&slot_levels) {
        for r in r0..r1 {
            for c in c0..c1 {
                scan.set(r, c, 0, level);
            }
        }
    }
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            for ch in 1..cfg.channels {
                let v = match ch {
                    1 => c + counter,
                    2 => r + counter,
                    _ => r + c + counter,
                };
                scan.set(r, c, ch, (v % k) as u8);
            }
        }
    }
    Ok(scan)
}
