//! Conditional autoregressive scan model.
//!
//! A scan is flattened into tokens (pixels row-major, channels in order
//! within each pixel) and modelled as a product of per-token conditionals
//! `p(F_{t+1} | F_t, x_t) = Π_i p(token_i | token_<i, ctx)`. A single LSTM
//! runs over the token stream; at step `i` its input is the embedding of
//! token `i-1` (a dedicated start token at `i = 0`) concatenated with the
//! context vector, which a two-layer encoder computes from `(F_t, x_t)`.
//!
//! The LSTM input projection is split by input block: `[e ‖ ctx] · W =
//! e · W_e + ctx · W_c`. The context part is computed once per scan and the
//! embedding part is folded into the embedding table, so each step only
//! pays for the recurrent product.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{batch_for_step, split_episodes, Dataset};
use crate::env::Observation;
use crate::error::{Error, Result};
use crate::mdp::argmax_lowest;
use crate::numerics::{opt_step, softmax, OptState, ParamId, ParamStore, Tape, Tensor, Var};
use crate::par::{try_map_indexed, Exec};
use crate::scan::{BrainScan, ScanConfig};

pub use crate::scan::{detokenize, tokenize, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorDims {
    pub embed: usize,
    pub hidden: usize,
    pub context: usize,
    pub encoder_hidden: usize,
}

impl Default for GeneratorDims {
    fn default() -> Self {
        GeneratorDims {
            embed: 16,
            hidden: 64,
            context: 32,
            encoder_hidden: 64,
        }
    }
}

/// The conditioning vector computed from `(F_t, x_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Context(pub Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Argmax per token, lowest level on ties.
    Greedy,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ids {
    embed: ParamId,
    enc_w1: ParamId,
    enc_b1: ParamId,
    enc_w2: ParamId,
    enc_b2: ParamId,
    w_in: ParamId,
    w_ctx: ParamId,
    w_h: ParamId,
    b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

pub const PARAM_NAMES: [&str; 11] = [
    "embed", "enc.w1", "enc.b1", "enc.w2", "enc.b2", "lstm.w_in", "lstm.w_ctx", "lstm.w_h",
    "lstm.b", "out.w", "out.b",
];

impl Ids {
    fn resolve(store: &ParamStore) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(n)
                .ok_or_else(|| Error::Format(format!("generator parameter `{n}` missing")))
        };
        Ok(Ids {
            embed: get("embed")?,
            enc_w1: get("enc.w1")?,
            enc_b1: get("enc.b1")?,
            enc_w2: get("enc.w2")?,
            enc_b2: get("enc.b2")?,
            w_in: get("lstm.w_in")?,
            w_ctx: get("lstm.w_ctx")?,
            w_h: get("lstm.w_h")?,
            b: get("lstm.b")?,
            out_w: get("out.w")?,
            out_b: get("out.b")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    scan: ScanConfig,
    obs_dim: usize,
    dims: GeneratorDims,
    params: ParamStore,
    ids: Ids,
}

/// Per-scan values shared by every LSTM step.
struct Unroll {
    embed_proj: Var,
    ctx_proj: Var,
    w_h: Var,
    out_w: Var,
    out_b: Var,
    hidden: usize,
}

impl GeneratorModel {
    /// Fresh model with a zero output projection, so every token starts
    /// uniform over the `K` levels.
    pub fn new(scan: ScanConfig, obs_dim: usize, dims: GeneratorDims, seed: u64) -> Result<Self> {
        scan.validate()?;
        if dims.embed == 0 || dims.hidden == 0 || dims.context == 0 || dims.encoder_hidden == 0 {
            return Err(Error::Config(format!("generator dimensions must be positive: {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let vocab = scan.levels * scan.channels + 1;
        let enc_in = scan.n_cells() + obs_dim;
        let (e, h, c, eh) = (dims.embed, dims.hidden, dims.context, dims.encoder_hidden);
        p.insert_uniform("embed", &[vocab, e], e, &mut rng)?;
        p.insert_uniform("enc.w1", &[enc_in, eh], enc_in, &mut rng)?;
        p.insert_uniform("enc.b1", &[1, eh], enc_in, &mut rng)?;
        p.insert_uniform("enc.w2", &[eh, c], eh, &mut rng)?;
        p.insert_uniform("enc.b2", &[1, c], eh, &mut rng)?;
        let lstm_in = e + c + h;
        p.insert_uniform("lstm.w_in", &[e, 4 * h], lstm_in, &mut rng)?;
        p.insert_uniform("lstm.w_ctx", &[c, 4 * h], lstm_in, &mut rng)?;
        p.insert_uniform("lstm.w_h", &[h, 4 * h], lstm_in, &mut rng)?;
        let b = p.insert_zeros("lstm.b", &[1, 4 * h])?;
        // Forget-gate bias starts at 1.
        p.get_mut(b).data_mut()[h..2 * h].fill(1.0);
        p.insert_zeros("out.w", &[h, scan.levels])?;
        p.insert_zeros("out.b", &[1, scan.levels])?;
        Self::from_params(scan, obs_dim, p)
    }

    /// Rebuilds a model from a parameter store, inferring the layer sizes.
    pub fn from_params(scan: ScanConfig, obs_dim: usize, params: ParamStore) -> Result<Self> {
        let ids = Ids::resolve(&params)?;
        let shape = |id: ParamId| params.get(id).shape().to_vec();
        let dims = GeneratorDims {
            embed: shape(ids.embed)[1],
            hidden: shape(ids.w_h)[0],
            context: shape(ids.enc_w2)[1],
            encoder_hidden: shape(ids.enc_w1)[1],
        };
        let (e, h, c, eh) = (dims.embed, dims.hidden, dims.context, dims.encoder_hidden);
        let expected: [(ParamId, [usize; 2]); 11] = [
            (ids.embed, [scan.levels * scan.channels + 1, e]),
            (ids.enc_w1, [scan.n_cells() + obs_dim, eh]),
            (ids.enc_b1, [1, eh]),
            (ids.enc_w2, [eh, c]),
            (ids.enc_b2, [1, c]),
            (ids.w_in, [e, 4 * h]),
            (ids.w_ctx, [c, 4 * h]),
            (ids.w_h, [h, 4 * h]),
            (ids.b, [1, 4 * h]),
            (ids.out_w, [h, scan.levels]),
            (ids.out_b, [1, scan.levels]),
        ];
        for (id, want) in expected {
            if params.get(id).shape() != want {
                return Err(Error::Format(format!(
                    "generator parameter `{}` has shape {:?}, expected {:?}",
                    params.name(id),
                    params.get(id).shape(),
                    want
                )));
            }
        }
        Ok(GeneratorModel {
            scan,
            obs_dim,
            dims,
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

    pub fn dims(&self) -> &GeneratorDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Zeroes the output projection (weights and bias).
    pub fn zero_output_projection(&mut self) {
        self.params.get_mut(self.ids.out_w).fill(0.0);
        self.params.get_mut(self.ids.out_b).fill(0.0);
    }

    /// Sets the output bias; with zero output weights this fixes every
    /// token's distribution.
    pub fn set_output_bias(&mut self, bias: &[f64]) -> Result<()> {
        let b = self.params.get_mut(self.ids.out_b);
        if b.len() != bias.len() {
            return Err(Error::shape("set_output_bias", b.shape(), &[bias.len()]));
        }
        b.data_mut().copy_from_slice(bias);
        Ok(())
    }

    pub fn start_token(&self) -> usize {
        self.scan.levels * self.scan.channels
    }

    fn token_id(&self, channel: usize, level: u8) -> usize {
        channel * self.scan.levels + usize::from(level)
    }

    fn check_scan(&self, scan: &BrainScan) -> Result<()> {
        if *scan.config() != self.scan {
            return Err(Error::shape("generator scan", &scan.config().dims(), &self.scan.dims()));
        }
        Ok(())
    }

    fn encoder_input(&self, prev: &BrainScan, obs: &Observation) -> Result<Tensor> {
        self.check_scan(prev)?;
        if obs.dim() != self.obs_dim {
            return Err(Error::shape("generator observation", &[obs.dim()], &[self.obs_dim]));
        }
        let mut x = prev.normalized();
        x.extend_from_slice(&obs.features);
        Ok(Tensor::row(x))
    }

    /// Records the context encoder: `W2 · tanh(W1 · [F_t ‖ x_t] + b1) + b2`.
    pub fn record_context(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prev: &BrainScan,
        obs: &Observation,
    ) -> Result<Var> {
        let x = tape.input(self.encoder_input(prev, obs)?);
        let w1 = tape.param(store, self.ids.enc_w1);
        let b1 = tape.param(store, self.ids.enc_b1);
        let w2 = tape.param(store, self.ids.enc_w2);
        let b2 = tape.param(store, self.ids.enc_b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.tanh(h);
        let c = tape.matmul(h, w2)?;
        tape.add_row(c, b2)
    }

    pub fn context_encode(&self, prev: &BrainScan, obs: &Observation) -> Result<Context> {
        let mut tape = Tape::new();
        let c = self.record_context(&mut tape, &self.params, prev, obs)?;
        Ok(Context(tape.value(c).data().to_vec()))
    }

    fn begin(&self, tape: &mut Tape, store: &ParamStore, ctx: Var) -> Result<Unroll> {
        let embed = tape.param(store, self.ids.embed);
        let w_in = tape.param(store, self.ids.w_in);
        let w_ctx = tape.param(store, self.ids.w_ctx);
        let b = tape.param(store, self.ids.b);
        let embed_proj = tape.matmul(embed, w_in)?;
        let ctx_proj = tape.matmul(ctx, w_ctx)?;
        let ctx_proj = tape.add_row(ctx_proj, b)?;
        Ok(Unroll {
            embed_proj,
            ctx_proj,
            w_h: tape.param(store, self.ids.w_h),
            out_w: tape.param(store, self.ids.out_w),
            out_b: tape.param(store, self.ids.out_b),
            hidden: self.dims.hidden,
        })
    }

    /// One LSTM step with gate order (input, forget, output, candidate).
    fn step(
        &self,
        tape: &mut Tape,
        u: &Unroll,
        prev_token: usize,
        state: Option<(Var, Var)>,
    ) -> Result<(Var, Var)> {
        let h = u.hidden;
        let x = tape.gather(u.embed_proj, &[prev_token])?;
        let mut z = tape.add(x, u.ctx_proj)?;
        if let Some((h_prev, _)) = state {
            let r = tape.matmul(h_prev, u.w_h)?;
            z = tape.add(z, r)?;
        }
        let i = tape.slice_cols(z, 0, h)?;
        let i = tape.sigmoid(i);
        let o = tape.slice_cols(z, 2 * h, h)?;
        let o = tape.sigmoid(o);
        let g = tape.slice_cols(z, 3 * h, h)?;
        let g = tape.tanh(g);
        let mut c = tape.mul(i, g)?;
        if let Some((_, c_prev)) = state {
            let f = tape.slice_cols(z, h, h)?;
            let f = tape.sigmoid(f);
            let fc = tape.mul(f, c_prev)?;
            c = tape.add(c, fc)?;
        }
        let tc = tape.tanh(c);
        let h_new = tape.mul(o, tc)?;
        Ok((h_new, c))
    }

    fn logits(&self, tape: &mut Tape, u: &Unroll, hs: Var) -> Result<Var> {
        let l = tape.matmul(hs, u.out_w)?;
        tape.add_row(l, u.out_b)
    }

    /// Teacher-forced negative log-likelihood of `scan` given the context
    /// node, in nats.
    pub fn record_nll(&self, tape: &mut Tape, store: &ParamStore, scan: &BrainScan, ctx: Var) -> Result<Var> {
        let tokens = tokenize(scan, &self.scan)?;
        let u = self.begin(tape, store, ctx)?;
        let mut state = None;
        let mut prev = self.start_token();
        let mut hs = Vec::with_capacity(tokens.len());
        for t in &tokens {
            let s = self.step(tape, &u, prev, state)?;
            hs.push(s.0);
            state = Some(s);
            prev = self.token_id(t.channel, t.level);
        }
        let stacked = tape.concat_rows(&hs)?;
        let logits = self.logits(tape, &u, stacked)?;
        let targets: Vec<usize> = tokens.iter().map(|t| usize::from(t.level)).collect();
        tape.softmax_cross_entropy(logits, &targets)
    }

    /// Training loss for one transition: `-log p(next | prev, obs)`.
    pub fn record_transition_nll(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prev: &BrainScan,
        obs: &Observation,
        next: &BrainScan,
    ) -> Result<Var> {
        let ctx = self.record_context(tape, store, prev, obs)?;
        self.record_nll(tape, store, next, ctx)
    }

    fn ctx_input(&self, tape: &mut Tape, ctx: &Context) -> Result<Var> {
        if ctx.0.len() != self.dims.context {
            return Err(Error::shape("generator context", &[ctx.0.len()], &[self.dims.context]));
        }
        Ok(tape.input(Tensor::row(ctx.0.clone())))
    }

    /// `log p(token_i | token_<i, ctx)` for every token, teacher-forced.
    pub fn token_log_probs(&self, scan: &BrainScan, ctx: &Context) -> Result<Vec<f64>> {
        let tokens = tokenize(scan, &self.scan)?;
        let mut tape = Tape::new();
        let c = self.ctx_input(&mut tape, ctx)?;
        let u = self.begin(&mut tape, &self.params, c)?;
        let mut state = None;
        let mut prev = self.start_token();
        let mut hs = Vec::with_capacity(tokens.len());
        for t in &tokens {
            let s = self.step(&mut tape, &u, prev, state)?;
            hs.push(s.0);
            state = Some(s);
            prev = self.token_id(t.channel, t.level);
        }
        let stacked = tape.concat_rows(&hs)?;
        let logits = self.logits(&mut tape, &u, stacked)?;
        let lv = tape.value(logits);
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let row = lv.row_slice(i);
                row[usize::from(t.level)] - crate::numerics::log_sum_exp(row)
            })
            .collect())
    }

    /// Natural-log probability of `scan` under the model given `ctx`.
    pub fn log_likelihood(&self, scan: &BrainScan, ctx: &Context) -> Result<f64> {
        let mut tape = Tape::new();
        let c = self.ctx_input(&mut tape, ctx)?;
        let nll = self.record_nll(&mut tape, &self.params, scan, c)?;
        Ok(-tape.value(nll).item())
    }

    /// Ancestral sampling in token order.
    pub fn sample<R: Rng>(&self, ctx: &Context, mode: SampleMode, rng: &mut R) -> Result<BrainScan> {
        let mut tape = Tape::new();
        let c = self.ctx_input(&mut tape, ctx)?;
        let u = self.begin(&mut tape, &self.params, c)?;
        let n = self.scan.n_cells();
        let mut state = None;
        let mut prev = self.start_token();
        let mut cells = Vec::with_capacity(n);
        for i in 0..n {
            let s = self.step(&mut tape, &u, prev, state)?;
            state = Some(s);
            let logits = self.logits(&mut tape, &u, s.0)?;
            let level = match mode {
                SampleMode::Greedy => argmax_lowest(tape.value(logits).data()).0,
                SampleMode::Stochastic => {
                    let probs = softmax(tape.value(logits).data());
                    draw(&probs, rng.random::<f64>())
                }
            };
            let level = level as u8;
            cells.push(level);
            prev = self.token_id(i % self.scan.channels, level);
        }
        BrainScan::from_cells(self.scan, cells)
    }

    /// `sample(context_encode(prev, obs))`.
    pub fn next_scan<R: Rng>(
        &self,
        prev: &BrainScan,
        obs: &Observation,
        mode: SampleMode,
        rng: &mut R,
    ) -> Result<BrainScan> {
        let ctx = self.context_encode(prev, obs)?;
        self.sample(&ctx, mode, rng)
    }
}

/// Inverse-CDF draw from a categorical distribution.
pub(crate) fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorHyper {
    pub dims: GeneratorDims,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Fraction of episodes held out for evaluation.
    pub heldout_fraction: f64,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for GeneratorHyper {
    fn default() -> Self {
        GeneratorHyper {
            dims: GeneratorDims::default(),
            batch_size: 32,
            learning_rate: 1e-2,
            epochs: 40,
            heldout_fraction: 0.1,
            seed: 0,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllPoint {
    pub epoch: usize,
    /// Mean nats per scan.
    pub train_nll: f64,
    /// `NaN` when nothing is held out.
    pub heldout_nll: f64,
}

/// Incremental trainer; resumable from `(model, opt)` alone.
#[derive(Debug, Clone)]
pub struct GeneratorTrainer<'a> {
    pub model: GeneratorModel,
    pub opt: OptState,
    hyper: GeneratorHyper,
    data: &'a Dataset,
    train_idx: Vec<usize>,
    heldout_idx: Vec<usize>,
}

impl<'a> GeneratorTrainer<'a> {
    pub fn new(data: &'a Dataset, hyper: GeneratorHyper) -> Result<Self> {
        Self::check_data(data)?;
        let model = GeneratorModel::new(data.scan_config, data.env_spec.obs_dim(), hyper.dims, hyper.seed)?;
        let opt = OptState::adam(model.params(), hyper.learning_rate);
        Self::resume(data, hyper, model, opt)
    }

    pub fn resume(data: &'a Dataset, hyper: GeneratorHyper, model: GeneratorModel, opt: OptState) -> Result<Self> {
        Self::check_data(data)?;
        if hyper.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if model.scan != data.scan_config || model.obs_dim != data.env_spec.obs_dim() {
            return Err(Error::Config("generator does not match the dataset's scan/observation shape".into()));
        }
        let (train_idx, heldout_idx) = split_episodes(data, hyper.heldout_fraction);
        Ok(GeneratorTrainer {
            model,
            opt,
            hyper,
            data,
            train_idx,
            heldout_idx,
        })
    }

    fn check_data(data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Data("generator training needs a non-empty dataset".into()));
        }
        data.check()
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train_idx.len().div_ceil(self.hyper.batch_size) as u64
    }

    /// One optimiser step; returns the batch's mean NLL before the update.
    pub fn step(&mut self) -> Result<f64> {
        let batch = batch_for_step(
            self.train_idx.len(),
            self.hyper.batch_size,
            self.hyper.seed,
            self.opt.step,
        );
        let model = &self.model;
        let data = self.data;
        let train_idx = &self.train_idx;
        let results = try_map_indexed(self.hyper.exec, batch.len(), |j| {
            let r = &data.records[train_idx[batch[j]]];
            let mut tape = Tape::new();
            let loss = model.record_transition_nll(&mut tape, &model.params, &r.scan, &r.obs, &r.scan_next)?;
            let grads = tape.param_grads(loss, &model.params)?;
            Ok::<_, Error>((tape.value(loss).item(), grads))
        })?;
        let scale = 1.0 / batch.len() as f64;
        let params = &mut self.model.params;
        params.zero_grads();
        let mut total = 0.0;
        for (loss, grads) in &results {
            total += loss;
            params.accumulate(grads, scale)?;
        }
        opt_step(params, &mut self.opt)?;
        Ok(total * scale)
    }

    /// Mean NLL per scan over the given record indices.
    pub fn mean_nll(&self, idx: &[usize]) -> Result<f64> {
        if idx.is_empty() {
            return Ok(f64::NAN);
        }
        let model = &self.model;
        let data = self.data;
        let losses = try_map_indexed(self.hyper.exec, idx.len(), |j| {
            let r = &data.records[idx[j]];
            let mut tape = Tape::new();
            let loss = model.record_transition_nll(&mut tape, &model.params, &r.scan, &r.obs, &r.scan_next)?;
            Ok::<_, Error>(tape.value(loss).item())
        })?;
        Ok(losses.iter().sum::<f64>() / idx.len() as f64)
    }

    pub fn evaluate(&self, epoch: usize) -> Result<NllPoint> {
        Ok(NllPoint {
            epoch,
            train_nll: self.mean_nll(&self.train_idx)?,
            heldout_nll: self.mean_nll(&self.heldout_idx)?,
        })
    }

    /// Runs full epochs, returning the curve including the epoch-0 point.
    pub fn run(&mut self, epochs: usize) -> Result<Vec<NllPoint>> {
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

/// Trains a generator on `scan_next | (scan, obs)` for every record.
pub fn train_generator(data: &Dataset, hyper: &GeneratorHyper) -> Result<(GeneratorModel, Vec<NllPoint>)> {
    let mut trainer = GeneratorTrainer::new(data, *hyper)?;
    let curve = trainer.run(hyper.epochs)?;
    Ok((trainer.model, curve))
}
