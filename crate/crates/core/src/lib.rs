//! Scan-conditioned imitation learning on synthetic experts.
//!
//! A scripted expert with hidden memory acts in small environments while
//! its memory is rendered into discrete multi-channel "scans". From those
//! demonstrations the crate learns
//!
//! * a conditional autoregressive LSTM model of the next scan given the
//!   current scan and observation ([`generator`]),
//! * a feed-forward policy from (scan, observation) to actions
//!   ([`policy`]),
//! * a linear reward `R(x) = wᵀφ(x)` by max-margin inverse RL on tabular
//!   gridworlds ([`irl`]),
//!
//! and evaluates closed-loop control where generated scans carry memory
//! for a memoryless policy ([`runtime`]).

pub mod archive;
pub mod dataset;
pub mod env;
pub mod error;
pub mod expert;
pub mod generator;
pub mod irl;
pub mod mdp;
pub mod numerics;
pub mod par;
pub mod policy;
pub mod runtime;
pub mod scan;
pub mod selftest;
pub mod stats;

pub use error::{Error, Result};
pub use par::Exec;
