//! Feed-forward control network `(F_t, x_t) -> p(u)`, trained by
//! behavioural cloning on demonstration records.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{batch_for_step, split_episodes, Dataset, Record};
use crate::env::{Action, Observation};
use crate::error::{Error, Result};
use crate::generator::draw;
use crate::mdp::argmax_lowest;
use crate::numerics::{opt_step, softmax, OptState, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scan::{BrainScan, ScanConfig};

pub const PARAM_NAMES: [&str; 6] = ["l1.w", "l1.b", "l2.w", "l2.b", "out.w", "out.b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    /// Argmax, lowest action id on ties.
    Greedy,
    Sample,
}

/// Two ReLU hidden layers over `[normalised scan ‖ observation]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    scan: ScanConfig,
    obs_dim: usize,
    n_actions: usize,
    params: ParamStore,
    ids: [ParamId; 6],
}

impl PolicyParams {
    pub fn new(scan: ScanConfig, obs_dim: usize, n_actions: usize, hidden: usize, seed: u64) -> Result<Self> {
        scan.validate()?;
        if n_actions == 0 || hidden == 0 {
            return Err(Error::Config("policy needs >= 1 action and hidden unit".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = scan.n_cells() + obs_dim;
        let mut p = ParamStore::new();
        p.insert_uniform("l1.w", &[input, hidden], input, &mut rng)?;
        p.insert_uniform("l1.b", &[1, hidden], input, &mut rng)?;
        p.insert_uniform("l2.w", &[hidden, hidden], hidden, &mut rng)?;
        p.insert_uniform("l2.b", &[1, hidden], hidden, &mut rng)?;
        p.insert_uniform("out.w", &[hidden, n_actions], hidden, &mut rng)?;
        p.insert_uniform("out.b", &[1, n_actions], hidden, &mut rng)?;
        Self::from_params(scan, obs_dim, p)
    }

    pub fn from_params(scan: ScanConfig, obs_dim: usize, params: ParamStore) -> Result<Self> {
        let mut ids = [ParamId(0); 6];
        for (slot, name) in ids.iter_mut().zip(PARAM_NAMES) {
            *slot = params
                .id(name)
                .ok_or_else(|| Error::Format(format!("policy parameter `{name}` missing")))?;
        }
        let hidden = params.get(ids[0]).cols();
        let n_actions = params.get(ids[4]).cols();
        let expected = [
            [scan.n_cells() + obs_dim, hidden],
            [1, hidden],
            [hidden, hidden],
            [1, hidden],
            [hidden, n_actions],
            [1, n_actions],
        ];
        for (id, want) in ids.iter().zip(expected) {
            if params.get(*id).shape() != want {
                return Err(Error::Format(format!(
                    "policy parameter `{}` has shape {:?}, expected {:?}",
                    params.name(*id),
                    params.get(*id).shape(),
                    want
                )));
            }
        }
        Ok(PolicyParams {
            scan,
            obs_dim,
            n_actions,
            params,
            ids,
        })
    }

    pub fn scan_config(&self) -> &ScanConfig {
        &self.scan
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn input_row(&self, scan: &BrainScan, obs: &Observation, zero_scan: bool) -> Result<Vec<f64>> {
        if *scan.config() != self.scan {
            return Err(Error::shape("policy scan", &scan.config().dims(), &self.scan.dims()));
        }
        if obs.dim() != self.obs_dim {
            return Err(Error::shape("policy observation", &[obs.dim()], &[self.obs_dim]));
        }
        let mut x = if zero_scan {
            vec![0.0; self.scan.n_cells()]
        } else {
            scan.normalized()
        };
        x.extend_from_slice(&obs.features);
        Ok(x)
    }

    /// Records the logits for a batch of inputs stacked as rows.
    pub fn record_logits(&self, tape: &mut Tape, store: &ParamStore, inputs: Tensor) -> Result<Var> {
        let mut h = tape.input(inputs);
        for layer in 0..3 {
            let w = tape.param(store, self.ids[2 * layer]);
            let b = tape.param(store, self.ids[2 * layer + 1]);
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = if layer < 2 { tape.relu(z) } else { z };
        }
        Ok(h)
    }

    fn batch_input(&self, records: &[&Record], zero_scan: bool) -> Result<Tensor> {
        let width = self.scan.n_cells() + self.obs_dim;
        let mut data = Vec::with_capacity(records.len() * width);
        for r in records {
            data.extend(self.input_row(&r.scan, &r.obs, zero_scan)?);
        }
        Tensor::matrix(records.len(), width, data)
    }

    /// Summed cross-entropy of the recorded actions.
    pub fn record_loss(&self, tape: &mut Tape, store: &ParamStore, records: &[&Record], zero_scan: bool) -> Result<Var> {
        let logits = self.record_logits(tape, store, self.batch_input(records, zero_scan)?)?;
        let targets: Vec<usize> = records.iter().map(|r| r.action.0).collect();
        tape.softmax_cross_entropy(logits, &targets)
    }

    pub fn logits(&self, scan: &BrainScan, obs: &Observation) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = Tensor::row(self.input_row(scan, obs, false)?);
        let l = self.record_logits(&mut tape, &self.params, x)?;
        Ok(tape.value(l).data().to_vec())
    }

    /// Action probabilities (softmax of the logits).
    pub fn forward(&self, scan: &BrainScan, obs: &Observation) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(scan, obs)?))
    }

    pub fn act<R: Rng>(&self, scan: &BrainScan, obs: &Observation, mode: ActMode, rng: &mut R) -> Result<Action> {
        let logits = self.logits(scan, obs)?;
        Ok(match mode {
            ActMode::Greedy => argmax_lowest(&logits),
            ActMode::Sample => Action(draw(&softmax(&logits), rng.random::<f64>())),
        })
    }

    /// Greedy actions for a batch of records in one pass.
    fn predict(&self, records: &[&Record], zero_scan: bool) -> Result<Vec<Action>> {
        if records.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let l = self.record_logits(&mut tape, &self.params, self.batch_input(records, zero_scan)?)?;
        let lv = tape.value(l);
        Ok((0..records.len()).map(|i| argmax_lowest(lv.row_slice(i))).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyHyper {
    pub hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub heldout_fraction: f64,
    pub seed: u64,
    /// Ablation: train and evaluate with every scan replaced by zeros.
    pub zero_scans: bool,
}

impl Default for PolicyHyper {
    fn default() -> Self {
        PolicyHyper {
            hidden: 64,
            batch_size: 32,
            learning_rate: 1e-3,
            epochs: 200,
            heldout_fraction: 0.1,
            seed: 0,
            zero_scans: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyPoint {
    pub epoch: usize,
    pub train_accuracy: f64,
    /// `NaN` when nothing is held out.
    pub heldout_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct PolicyTrainer<'a> {
    pub policy: PolicyParams,
    pub opt: OptState,
    hyper: PolicyHyper,
    data: &'a Dataset,
    train_idx: Vec<usize>,
    heldout_idx: Vec<usize>,
}

impl<'a> PolicyTrainer<'a> {
    pub fn new(data: &'a Dataset, hyper: PolicyHyper) -> Result<Self> {
        let policy = PolicyParams::new(
            data.scan_config,
            data.env_spec.obs_dim(),
            data.env_spec.n_actions(),
            hyper.hidden,
            hyper.seed,
        )?;
        let opt = OptState::adam(policy.params(), hyper.learning_rate);
        Self::resume(data, hyper, policy, opt)
    }

    pub fn resume(data: &'a Dataset, hyper: PolicyHyper, policy: PolicyParams, opt: OptState) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("policy training needs a non-empty dataset".into()));
        }
        if hyper.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if policy.scan != data.scan_config
            || policy.obs_dim != data.env_spec.obs_dim()
            || policy.n_actions != data.env_spec.n_actions()
        {
            return Err(Error::Config("policy does not match the dataset's shapes".into()));
        }
        let (train_idx, heldout_idx) = split_episodes(data, hyper.heldout_fraction);
        Ok(PolicyTrainer {
            policy,
            opt,
            hyper,
            data,
            train_idx,
            heldout_idx,
        })
    }

    pub fn heldout_indices(&self) -> &[usize] {
        &self.heldout_idx
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train_idx.len().div_ceil(self.hyper.batch_size) as u64
    }

    /// One optimiser step; returns the batch's mean cross-entropy.
    pub fn step(&mut self) -> Result<f64> {
        let batch = batch_for_step(self.train_idx.len(), self.hyper.batch_size, self.hyper.seed, self.opt.step);
        let records: Vec<&Record> = batch.iter().map(|&i| &self.data.records[self.train_idx[i]]).collect();
        let mut tape = Tape::new();
        let loss = self.policy.record_loss(&mut tape, &self.policy.params, &records, self.hyper.zero_scans)?;
        let grads = tape.param_grads(loss, &self.policy.params)?;
        let scale = 1.0 / records.len() as f64;
        let params = &mut self.policy.params;
        params.zero_grads();
        params.accumulate(&grads, scale)?;
        opt_step(params, &mut self.opt)?;
        Ok(tape.value(loss).item() * scale)
    }

    /// Greedy action accuracy over the given record indices.
    pub fn accuracy(&self, idx: &[usize]) -> Result<f64> {
        if idx.is_empty() {
            return Ok(f64::NAN);
        }
        let records: Vec<&Record> = idx.iter().map(|&i| &self.data.records[i]).collect();
        let pred = self.policy.predict(&records, self.hyper.zero_scans)?;
        let hits = pred.iter().zip(&records).filter(|(p, r)| **p == r.action).count();
        Ok(hits as f64 / idx.len() as f64)
    }

    pub fn evaluate(&self, epoch: usize) -> Result<AccuracyPoint> {
        Ok(AccuracyPoint {
            epoch,
            train_accuracy: self.accuracy(&self.train_idx)?,
            heldout_accuracy: self.accuracy(&self.heldout_idx)?,
        })
    }

    pub fn run(&mut self, epochs: usize) -> Result<Vec<AccuracyPoint>> {
        let mut curve = vec![self.evaluate(0)?];
        for epoch in 1..=epochs {
            for _ in 0..self.steps_per_epoch() {
                self.step()?;
            }
            curve.push(self.evaluate(epoch)?);
        }
        Ok(curve)
    }
}

pub fn policy_train(data: &Dataset, hyper: &PolicyHyper) -> Result<(PolicyParams, Vec<AccuracyPoint>)> {
    let mut trainer = PolicyTrainer::new(data, *hyper)?;
    let curve = trainer.run(hyper.epochs)?;
    Ok((trainer.policy, curve))
}
