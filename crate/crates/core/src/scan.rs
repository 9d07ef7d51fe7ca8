//! Discrete multi-channel scan images and their token ordering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Number of intensity levels `K`.
    pub levels: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            height: 8,
            width: 8,
            channels: 3,
            levels: 8,
        }
    }
}

impl ScanConfig {
    pub fn new(height: usize, width: usize, channels: usize, levels: usize) -> Result<Self> {
        let cfg = ScanConfig {
            height,
            width,
            channels,
            levels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config(format!(
                "scan dimensions must be positive, got {}x{}x{}",
                self.height, self.width, self.channels
            )));
        }
        if !(2..=256).contains(&self.levels) {
            return Err(Error::Config(format!(
                "scan levels must lie in [2, 256], got {}",
                self.levels
            )));
        }
        Ok(())
    }

    /// Cells per scan, which is also the token count.
    pub fn n_cells(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }
}

/// An `H x W x C` grid of intensity levels in `[0, K)`.
///
/// Cells are stored in token order: pixels row-major from the top-left,
/// channels innermost.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BrainScan {
    cfg: ScanConfig,
    data: Vec<u8>,
}

impl BrainScan {
    pub fn zeros(cfg: ScanConfig) -> Self {
        BrainScan {
            cfg,
            data: vec![0; cfg.n_cells()],
        }
    }

    pub fn from_cells(cfg: ScanConfig, data: Vec<u8>) -> Result<Self> {
        if data.len() != cfg.n_cells() {
            return Err(Error::shape("BrainScan::from_cells", &[data.len()], &cfg.dims()));
        }
        if let Some(&bad) = data.iter().find(|&&v| usize::from(v) >= cfg.levels) {
            return Err(Error::Data(format!(
                "scan level {bad} outside [0, {})",
                cfg.levels
            )));
        }
        Ok(BrainScan { cfg, data })
    }

    pub fn config(&self) -> &ScanConfig {
        &self.cfg
    }

    pub fn cells(&self) -> &[u8] {
        &self.data
    }

    fn offset(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.cfg.width + col) * self.cfg.channels + ch
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.data[self.offset(row, col, ch)]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, level: u8) {
        debug_assert!(usize::from(level) < self.cfg.levels);
        let i = self.offset(row, col, ch);
        self.data[i] = level;
    }

    /// Levels scaled to `[0, 1]` by `K - 1`, in token order.
    pub fn normalized(&self) -> Vec<f64> {
        let denom = (self.cfg.levels - 1) as f64;
        self.data.iter().map(|&v| f64::from(v) / denom).collect()
    }

    /// Fraction of cells that differ from `other`.
    pub fn divergence(&self, other: &BrainScan) -> f64 {
        debug_assert_eq!(self.cfg, other.cfg);
        let differing = self.data.iter().zip(&other.data).filter(|(a, b)| a != b).count();
        differing as f64 / self.data.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub row: usize,
    pub col: usize,
    pub channel: usize,
    pub level: u8,
}

/// Flattens a scan into its generation order: pixels row-major from the
/// top-left, channels in order within each pixel.
pub fn tokenize(scan: &BrainScan, cfg: &ScanConfig) -> Result<Vec<Token>> {
    if scan.cfg != *cfg {
        return Err(Error::shape("tokenize", &scan.cfg.dims(), &cfg.dims()));
    }
    let c = cfg.channels;
    Ok(scan
        .data
        .iter()
        .enumerate()
        .map(|(i, &level)| Token {
            row: i / c / cfg.width,
            col: (i / c) % cfg.width,
            channel: i % c,
            level,
        })
        .collect())
}

pub fn detokenize(tokens: &[Token], cfg: &ScanConfig) -> Result<BrainScan> {
    if tokens.len() != cfg.n_cells() {
        return Err(Error::shape("detokenize", &[tokens.len()], &cfg.dims()));
    }
    let mut scan = BrainScan::zeros(*cfg);
    for t in tokens {
        if t.row >= cfg.height || t.col >= cfg.width || t.channel >= cfg.channels {
            return Err(Error::Data(format!("token position {t:?} outside scan")));
        }
        if usize::from(t.level) >= cfg.levels {
            return Err(Error::Data(format!("token level {} outside [0, {})", t.level, cfg.levels)));
        }
        scan.set(t.row, t.col, t.channel, t.level);
    }
    Ok(scan)
}
