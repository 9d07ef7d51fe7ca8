//! Versioned little-endian binary files for datasets, checkpoints and
//! rollout traces.
//!
//! Every file starts with the same header:
//!
//! ```text
//! "NMIR"  u32 version  u8 kind  u32×4 scan (h, w, c, K)  u64 seed
//! ```
//!
//! Reals are raw `f64` bits, so a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use crate::dataset::{Dataset, Record};
use crate::env::{Action, EnvSpec, Observation};
use crate::error::{Error, Result};
use crate::generator::GeneratorModel;
use crate::numerics::{OptState, ParamStore, Tensor};
use crate::policy::PolicyParams;
use crate::runtime::{RolloutResult, RolloutStep};
use crate::scan::{BrainScan, ScanConfig};

pub const MAGIC: [u8; 4] = *b"NMIR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum PayloadKind {
    Dataset = 1,
    GeneratorCkpt = 2,
    PolicyCkpt = 3,
    Trajectory = 4,
}

impl PayloadKind {
    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => PayloadKind::Dataset,
            2 => PayloadKind::GeneratorCkpt,
            3 => PayloadKind::PolicyCkpt,
            4 => PayloadKind::Trajectory,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchiveHeader {
    pub version: u32,
    pub kind: PayloadKind,
    pub scan: ScanConfig,
    pub seed: u64,
}

// ---------------------------------------------------------------- writing

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u16(&mut self, x: u16) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u32(&mut self, x: usize) -> Result<()> {
        let v = u32::try_from(x).map_err(|_| Error::Format(format!("{x} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        for &x in xs {
            self.f64(x);
        }
    }

    fn header(&mut self, kind: PayloadKind, scan: &ScanConfig, seed: u64) -> Result<()> {
        self.0.extend_from_slice(&MAGIC);
        self.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        self.u8(kind as u8);
        for d in scan.dims() {
            self.u32(d)?;
        }
        self.u32(scan.levels)?;
        self.u64(seed);
        Ok(())
    }

    fn action(&mut self, a: Action) -> Result<()> {
        let v = u16::try_from(a.0).map_err(|_| Error::Format(format!("action {} does not fit in u16", a.0)))?;
        self.u16(v);
        Ok(())
    }

    fn env(&mut self, spec: &EnvSpec) -> Result<()> {
        match *spec {
            EnvSpec::TMaze {
                corridor_length,
                cue_prob_right,
            } => {
                self.u8(0);
                self.u32(corridor_length)?;
                self.f64(cue_prob_right);
            }
            EnvSpec::Gridworld { rows, cols, start, goal } => {
                self.u8(1);
                for x in [rows, cols, start.0, start.1, goal.0, goal.1] {
                    self.u32(x)?;
                }
            }
        }
        Ok(())
    }

    fn tensors(&mut self, params: &ParamStore) -> Result<()> {
        self.u32(params.len())?;
        for (name, t) in params.names().iter().zip(params.values()) {
            let bytes = name.as_bytes();
            self.u16(u16::try_from(bytes.len()).map_err(|_| Error::Format(format!("parameter name `{name}` too long")))?);
            self.0.extend_from_slice(bytes);
            self.u8(u8::try_from(t.shape().len()).map_err(|_| Error::Format("tensor rank > 255".into()))?);
            for &d in t.shape() {
                self.u32(d)?;
            }
            self.f64s(t.data());
        }
        Ok(())
    }

    fn opt(&mut self, opt: Option<&OptState>) -> Result<()> {
        let Some(o) = opt else {
            self.u8(0);
            return Ok(());
        };
        self.u8(1);
        self.f64s(&[o.lr, o.beta1, o.beta2, o.eps]);
        self.u64(o.step);
        self.u32(o.m.len())?;
        for t in o.m.iter().chain(&o.v) {
            self.u32(t.len())?;
            self.f64s(t.data());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- reading

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::Corruption {
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// Reads `n` reals after checking they fit in the remaining bytes, so a
    /// corrupted length can never trigger a huge allocation.
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .filter(|&b| b <= self.buf.len() - self.pos)
            .ok_or_else(|| self.corrupt(format!("{what}: length {n} exceeds the remaining file")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn header(&mut self) -> Result<ArchiveHeader> {
        if self.buf.len() < 4 || self.buf[..4] != MAGIC {
            return Err(Error::Format("not an NMIR file: bad magic".into()));
        }
        self.pos = 4;
        let version = u32::from_le_bytes(self.take(4, "version")?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let kind_byte = self.u8("payload kind")?;
        let kind = PayloadKind::from_byte(kind_byte)
            .ok_or_else(|| Error::Format(format!("unknown payload kind {kind_byte}")))?;
        let h = self.u32("scan height")?;
        let w = self.u32("scan width")?;
        let c = self.u32("scan channels")?;
        let k = self.u32("scan levels")?;
        let scan = ScanConfig::new(h, w, c, k).map_err(|e| Error::Format(format!("header scan config: {e}")))?;
        let seed = self.u64("seed")?;
        Ok(ArchiveHeader {
            version,
            kind,
            scan,
            seed,
        })
    }

    fn expect_kind(&mut self, want: PayloadKind) -> Result<ArchiveHeader> {
        let h = self.header()?;
        if h.kind != want {
            return Err(Error::Format(format!("expected a {want:?} file, found {:?}", h.kind)));
        }
        Ok(h)
    }

    fn action(&mut self) -> Result<Action> {
        Ok(Action(usize::from(self.u16("action")?)))
    }

    fn scan(&mut self, cfg: &ScanConfig) -> Result<BrainScan> {
        let at = self.pos;
        let raw = self.take(cfg.n_cells(), "scan cells")?.to_vec();
        BrainScan::from_cells(*cfg, raw).map_err(|e| Error::Corruption {
            offset: at as u64,
            reason: format!("invalid scan: {e}"),
        })
    }

    fn obs(&mut self, dim: usize) -> Result<Observation> {
        Ok(Observation {
            features: self.f64s(dim, "observation")?,
        })
    }

    fn env(&mut self) -> Result<EnvSpec> {
        let at = self.pos;
        let spec = match self.u8("environment kind")? {
            0 => EnvSpec::TMaze {
                corridor_length: self.u32("corridor length")?,
                cue_prob_right: self.f64("cue probability")?,
            },
            1 => {
                let mut v = [0usize; 6];
                for x in &mut v {
                    *x = self.u32("grid field")?;
                }
                EnvSpec::Gridworld {
                    rows: v[0],
                    cols: v[1],
                    start: (v[2], v[3]),
                    goal: (v[4], v[5]),
                }
            }
            k => return Err(Error::Format(format!("unknown environment kind {k} at byte {at}"))),
        };
        spec.validate()
            .map_err(|e| Error::Format(format!("invalid environment block: {e}")))?;
        Ok(spec)
    }

    fn tensors(&mut self) -> Result<ParamStore> {
        let n = self.u32("tensor count")?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let len = usize::from(self.u16("name length")?);
            let at = self.pos;
            let name = std::str::from_utf8(self.take(len, "parameter name")?)
                .map_err(|_| Error::Corruption {
                    offset: at as u64,
                    reason: "parameter name is not UTF-8".into(),
                })?
                .to_owned();
            let rank = usize::from(self.u8("tensor rank")?);
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32("tensor dim")?);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| self.corrupt(format!("tensor `{name}` shape overflows")))?;
            let data = self.f64s(count, &format!("tensor `{name}`"))?;
            store.insert(&name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    fn opt(&mut self, params: &ParamStore) -> Result<Option<OptState>> {
        if self.u8("optimiser flag")? == 0 {
            return Ok(None);
        }
        let lr = self.f64("lr")?;
        let beta1 = self.f64("beta1")?;
        let beta2 = self.f64("beta2")?;
        let eps = self.f64("eps")?;
        let step = self.u64("step")?;
        let n = self.u32("moment count")?;
        if n != params.len() {
            return Err(Error::Format(format!(
                "optimiser has {n} moment tensors for {} parameters",
                params.len()
            )));
        }
        let mut moments = Vec::with_capacity(2 * n);
        for i in 0..2 * n {
            let p = params.get(crate::numerics::ParamId(i % n));
            let len = self.u32("moment length")?;
            if len != p.len() {
                return Err(self.corrupt(format!("moment {i} has length {len}, expected {}", p.len())));
            }
            moments.push(Tensor::new(p.shape().to_vec(), self.f64s(len, "moment")?)?);
        }
        let v = moments.split_off(n);
        Ok(Some(OptState {
            lr,
            beta1,
            beta2,
            eps,
            step,
            m: moments,
            v,
        }))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.corrupt(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

// ---------------------------------------------------------------- dataset

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.header(PayloadKind::Dataset, &ds.scan_config, ds.seed)?;
    w.env(&ds.env_spec)?;
    let obs_dim = ds.env_spec.obs_dim();
    w.u32(obs_dim)?;
    w.u64(ds.records.len() as u64);
    for r in &ds.records {
        if r.obs.dim() != obs_dim || r.obs_next.dim() != obs_dim {
            return Err(Error::Data("record observation dimension differs from the environment's".into()));
        }
        w.f64s(&r.obs.features);
        w.0.extend_from_slice(r.scan.cells());
        w.action(r.action)?;
        w.f64s(&r.obs_next.features);
        w.0.extend_from_slice(r.scan_next.cells());
        w.u8(u8::from(r.done));
    }
    Ok(w.0)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let h = r.expect_kind(PayloadKind::Dataset)?;
    let env_spec = r.env()?;
    let obs_dim = r.u32("observation dim")?;
    if obs_dim != env_spec.obs_dim() {
        return Err(Error::Format(format!(
            "observation dim {obs_dim} does not match the environment ({})",
            env_spec.obs_dim()
        )));
    }
    let count = r.u64("record count")?;
    let record_bytes = (16 * obs_dim + 2 * h.scan.n_cells() + 3) as u64;
    if count.saturating_mul(record_bytes) > (bytes.len() - r.pos) as u64 {
        return Err(r.corrupt(format!("record count {count} exceeds the remaining file")));
    }
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let obs = r.obs(obs_dim)?;
        let scan = r.scan(&h.scan)?;
        let action = r.action()?;
        let obs_next = r.obs(obs_dim)?;
        let scan_next = r.scan(&h.scan)?;
        let done = match r.u8("done flag")? {
            0 => false,
            1 => true,
            b => return Err(r.corrupt(format!("done flag {b} is not 0/1"))),
        };
        records.push(Record {
            obs,
            scan,
            action,
            obs_next,
            scan_next,
            done,
        });
    }
    r.finish()?;
    Ok(Dataset {
        env_spec,
        scan_config: h.scan,
        seed: h.seed,
        records,
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_dataset(ds)?)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&read_file(path)?)
}

// ---------------------------------------------------------------- checkpoints

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: ArchiveHeader,
    pub obs_dim: usize,
    pub params: ParamStore,
    pub opt: Option<OptState>,
}

pub fn encode_checkpoint(
    kind: PayloadKind,
    scan: &ScanConfig,
    seed: u64,
    obs_dim: usize,
    params: &ParamStore,
    opt: Option<&OptState>,
) -> Result<Vec<u8>> {
    if let Some(o) = opt {
        if o.m.len() != params.len() || o.v.len() != params.len() {
            return Err(Error::shape("checkpoint optimiser", &[o.m.len(), o.v.len()], &[params.len()]));
        }
    }
    let mut w = Writer::default();
    w.header(kind, scan, seed)?;
    w.u32(obs_dim)?;
    w.tensors(params)?;
    w.opt(opt)?;
    Ok(w.0)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let header = r.header()?;
    if !matches!(header.kind, PayloadKind::GeneratorCkpt | PayloadKind::PolicyCkpt) {
        return Err(Error::Format(format!("{:?} file is not a checkpoint", header.kind)));
    }
    let obs_dim = r.u32("observation dim")?;
    let params = r.tensors()?;
    let opt = r.opt(&params)?;
    r.finish()?;
    Ok(Checkpoint {
        header,
        obs_dim,
        params,
        opt,
    })
}

pub fn save_checkpoint(
    path: &Path,
    kind: PayloadKind,
    scan: &ScanConfig,
    seed: u64,
    obs_dim: usize,
    params: &ParamStore,
    opt: Option<&OptState>,
) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(kind, scan, seed, obs_dim, params, opt)?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}

pub fn save_generator(path: &Path, model: &GeneratorModel, opt: Option<&OptState>, seed: u64) -> Result<()> {
    save_checkpoint(
        path,
        PayloadKind::GeneratorCkpt,
        model.scan_config(),
        seed,
        model.obs_dim(),
        model.params(),
        opt,
    )
}

pub fn load_generator(path: &Path) -> Result<(GeneratorModel, Option<OptState>)> {
    let ck = load_checkpoint(path)?;
    if ck.header.kind != PayloadKind::GeneratorCkpt {
        return Err(Error::Format(format!("expected a generator checkpoint, found {:?}", ck.header.kind)));
    }
    Ok((GeneratorModel::from_params(ck.header.scan, ck.obs_dim, ck.params)?, ck.opt))
}

pub fn save_policy(path: &Path, policy: &PolicyParams, opt: Option<&OptState>, seed: u64) -> Result<()> {
    save_checkpoint(
        path,
        PayloadKind::PolicyCkpt,
        policy.scan_config(),
        seed,
        policy.obs_dim(),
        policy.params(),
        opt,
    )
}

pub fn load_policy(path: &Path) -> Result<(PolicyParams, Option<OptState>)> {
    let ck = load_checkpoint(path)?;
    if ck.header.kind != PayloadKind::PolicyCkpt {
        return Err(Error::Format(format!("expected a policy checkpoint, found {:?}", ck.header.kind)));
    }
    Ok((PolicyParams::from_params(ck.header.scan, ck.obs_dim, ck.params)?, ck.opt))
}

// ---------------------------------------------------------------- rollout traces

pub fn encode_rollout(result: &RolloutResult, scan: &ScanConfig, seed: u64) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.header(PayloadKind::Trajectory, scan, seed)?;
    let obs_dim = result.steps.first().map_or(0, |s| s.obs.dim());
    w.u32(obs_dim)?;
    w.u8(u8::from(result.success));
    w.f64(result.total_reward);
    w.u64(result.steps.len() as u64);
    for s in &result.steps {
        if s.obs.dim() != obs_dim || *s.scan.config() != *scan {
            return Err(Error::Data("rollout steps have inconsistent shapes".into()));
        }
        w.f64s(&s.obs.features);
        w.0.extend_from_slice(s.scan.cells());
        w.action(s.action)?;
        w.action(s.expert_action)?;
        w.f64(s.divergence);
    }
    Ok(w.0)
}

pub fn decode_rollout(bytes: &[u8]) -> Result<(ArchiveHeader, RolloutResult)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let h = r.expect_kind(PayloadKind::Trajectory)?;
    let obs_dim = r.u32("observation dim")?;
    let success = r.u8("success flag")? != 0;
    let total_reward = r.f64("total reward")?;
    let n = r.u64("step count")?;
    let step_bytes = (8 * obs_dim + h.scan.n_cells() + 12) as u64;
    if n.saturating_mul(step_bytes) > (bytes.len() - r.pos) as u64 {
        return Err(r.corrupt(format!("step count {n} exceeds the remaining file")));
    }
    let mut steps = Vec::with_capacity(n as usize);
    for _ in 0..n {
        steps.push(RolloutStep {
            obs: r.obs(obs_dim)?,
            scan: r.scan(&h.scan)?,
            action: r.action()?,
            expert_action: r.action()?,
            divergence: r.f64("divergence")?,
        });
    }
    r.finish()?;
    Ok((
        h,
        RolloutResult {
            steps,
            success,
            total_reward,
        },
    ))
}
