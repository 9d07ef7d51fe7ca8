//! Episodic environments: a memory T-maze and a tabular gridworld.
//!
//! Dynamics are deterministic; randomness enters only through `reset`
//! (the T-maze cue).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// T-maze actions.
pub const FORWARD: Action = Action(0);
pub const TURN_LEFT: Action = Action(1);
pub const TURN_RIGHT: Action = Action(2);

/// Gridworld actions.
pub const UP: Action = Action(0);
pub const DOWN: Action = Action(1);
pub const LEFT: Action = Action(2);
pub const RIGHT: Action = Action(3);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action(pub usize);

/// The policy-visible features of an environment state.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: Vec<f64>,
}

impl Observation {
    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    TMaze {
        corridor_length: usize,
        /// Probability that the cue points right.
        #[serde(default = "half")]
        cue_prob_right: f64,
    },
    Gridworld {
        rows: usize,
        cols: usize,
        #[serde(default)]
        start: (usize, usize),
        goal: (usize, usize),
    },
}

fn half() -> f64 {
    0.5
}

impl EnvSpec {
    pub fn t_maze(corridor_length: usize) -> Self {
        EnvSpec::TMaze {
            corridor_length,
            cue_prob_right: 0.5,
        }
    }

    /// Gridworld starting at the top-left corner with the goal at the
    /// bottom-right corner.
    pub fn gridworld(rows: usize, cols: usize) -> Self {
        EnvSpec::Gridworld {
            rows,
            cols,
            start: (0, 0),
            goal: (rows.saturating_sub(1), cols.saturating_sub(1)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EnvSpec::TMaze {
                corridor_length,
                cue_prob_right,
            } => {
                if corridor_length < 1 {
                    return Err(Error::Config("t_maze corridor_length must be >= 1".into()));
                }
                if !(0.0..=1.0).contains(&cue_prob_right) {
                    return Err(Error::Config(format!(
                        "t_maze cue_prob_right must lie in [0, 1], got {cue_prob_right}"
                    )));
                }
            }
            EnvSpec::Gridworld {
                rows,
                cols,
                start,
                goal,
            } => {
                if rows < 2 || cols < 2 {
                    return Err(Error::Config(format!(
                        "gridworld dimensions must be >= 2, got {rows}x{cols}"
                    )));
                }
                for (name, (r, c)) in [("start", start), ("goal", goal)] {
                    if r >= rows || c >= cols {
                        return Err(Error::Config(format!(
                            "gridworld {name} ({r}, {c}) outside {rows}x{cols} grid"
                        )));
                    }
                }
                if start == goal {
                    return Err(Error::Config("gridworld start equals goal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn n_actions(&self) -> usize {
        match self {
            EnvSpec::TMaze { .. } => 3,
            EnvSpec::Gridworld { .. } => 4,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            EnvSpec::TMaze { .. } => 3,
            EnvSpec::Gridworld { .. } => 2,
        }
    }

    /// Samples the initial state. Deterministic in `(self, seed)`.
    pub fn reset(&self, seed: u64) -> Result<(EnvState, Observation)> {
        self.validate()?;
        let inner = match *self {
            EnvSpec::TMaze { cue_prob_right, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let cue = if rng.random::<f64>() < cue_prob_right { 1 } else { -1 };
                Inner::TMaze { pos: 0, cue }
            }
            EnvSpec::Gridworld { start, .. } => Inner::Grid {
                row: start.0,
                col: start.1,
            },
        };
        let state = EnvState {
            spec: *self,
            inner,
            t: 0,
            done: false,
        };
        let obs = state.observe();
        Ok((state, obs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Inner {
    TMaze { pos: usize, cue: i8 },
    Grid { row: usize, col: usize },
}

/// Live state of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    spec: EnvSpec,
    inner: Inner,
    t: usize,
    done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub obs: Observation,
    pub done: bool,
    pub reward: f64,
}

impl EnvState {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Steps taken so far.
    pub fn t(&self) -> usize {
        self.t
    }

    /// The T-maze cue (+1 right, -1 left); `None` for the gridworld.
    pub fn cue(&self) -> Option<i8> {
        match self.inner {
            Inner::TMaze { cue, .. } => Some(cue),
            Inner::Grid { .. } => None,
        }
    }

    /// Gridworld cell as `(row, col)`; `None` for the T-maze.
    pub fn cell(&self) -> Option<(usize, usize)> {
        match self.inner {
            Inner::Grid { row, col } => Some((row, col)),
            Inner::TMaze { .. } => None,
        }
    }

    pub fn observe(&self) -> Observation {
        let features = match (self.spec, self.inner) {
            (EnvSpec::TMaze { corridor_length, .. }, Inner::TMaze { pos, cue }) => {
                let at_junction = pos == corridor_length;
                let cue_signal = if self.t == 0 { f64::from(cue) } else { 0.0 };
                vec![
                    pos as f64 / corridor_length as f64,
                    if at_junction { 1.0 } else { 0.0 },
                    cue_signal,
                ]
            }
            (EnvSpec::Gridworld { rows, cols, .. }, Inner::Grid { row, col }) => vec![
                row as f64 / (rows - 1) as f64,
                col as f64 / (cols - 1) as f64,
            ],
            _ => unreachable!("environment state does not match its spec"),
        };
        Observation { features }
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Usage("step called on a finished episode".into()));
        }
        let n_actions = self.spec.n_actions();
        if action.0 >= n_actions {
            return Err(Error::Usage(format!(
                "action {} out of range for {n_actions} actions",
                action.0
            )));
        }
        let mut reward = 0.0;
        match (self.spec, &mut self.inner) {
            (EnvSpec::TMaze { corridor_length, .. }, Inner::TMaze { pos, cue }) => {
                let at_junction = *pos == corridor_length;
                match (action, at_junction) {
                    (FORWARD, false) => *pos += 1,
                    (FORWARD, true) => {}
                    (_, false) => {}
                    (turn, true) => {
                        let choice = if turn == TURN_RIGHT { 1 } else { -1 };
                        reward = if choice == *cue { 1.0 } else { 0.0 };
                        self.done = true;
                    }
                }
            }
            (EnvSpec::Gridworld { rows, cols, goal, .. }, Inner::Grid { row, col }) => {
                let (r, c) = grid_move(rows, cols, (*row, *col), action);
                *row = r;
                *col = c;
                if (r, c) == goal {
                    reward = 1.0;
                    self.done = true;
                }
            }
            _ => unreachable!("environment state does not match its spec"),
        }
        self.t += 1;
        Ok(StepOutcome {
            obs: self.observe(),
            done: self.done,
            reward,
        })
    }
}

/// Deterministic gridworld move; moves into the boundary leave the cell unchanged.
pub fn grid_move(rows: usize, cols: usize, (r, c): (usize, usize), action: Action) -> (usize, usize) {
    match action {
        UP if r > 0 => (r - 1, c),
        DOWN if r + 1 < rows => (r + 1, c),
        LEFT if c > 0 => (r, c - 1),
        RIGHT if c + 1 < cols => (r, c + 1),
        _ => (r, c),
    }
}
