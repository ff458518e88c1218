//! AdamW with EMA, interval-restricted denoiser training, and execution of
//! branch schedules that grow the expert tree.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conditioning::{ConditionEncoder, ContextBatch};
use crate::denoiser::Preconditioning;
use crate::engine::{Tape, Tensor, Var};
use crate::ensemble::{BranchSchedule, ExpertId, InitFrom};
use crate::error::{invalid, Error, Result};
use crate::nets::{build_denoiser, save_checkpoint, Bound, DenoiserModel, DenoiserNetSpec};
use crate::noise::{IntervalSet, NodeId, SigmaLaw};

/// Name that resolves to the latest root-node EMA weights unless an
/// external checkpoint of that name is supplied.
pub const BASE_FINAL: &str = "base_final";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.batch_size > 0;
        if !ok {
            return Err(invalid(format!("invalid optimizer config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
pub fn adamw_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        match grads.get(name) {
            Some(g) if g.shape() == p.shape() => {}
            Some(g) => {
                return Err(invalid(format!(
                    "gradient for {name:?} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )))
            }
            None => return Err(invalid(format!("missing gradient for {name:?}"))),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *pv -= cfg.lr * cfg.weight_decay * *pv;
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: BTreeMap<String, Tensor>,
}

impl EmaState {
    pub const DEFAULT_DECAY: f64 = 0.9999;

    /// Shadow starts as a copy of `params`.
    pub fn new(params: &BTreeMap<String, Tensor>, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(invalid(format!("EMA decay {decay} outside [0, 1]")));
        }
        Ok(Self {
            decay,
            shadow: params.clone(),
        })
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, params: &BTreeMap<String, Tensor>) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(invalid("EMA shadow and parameters differ in count"));
        }
        let d = self.decay;
        for (name, p) in params {
            let s = self
                .shadow
                .get_mut(name)
                .ok_or_else(|| invalid(format!("EMA has no shadow for {name:?}")))?;
            if s.shape() != p.shape() {
                return Err(invalid(format!("EMA shape mismatch for {name:?}")));
            }
            for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
        }
        Ok(())
    }
}

/// Row source for training: clean samples with their condition ids.
pub trait DataSource: Send + Sync {
    fn dim(&self) -> usize;
    fn n_conditions(&self) -> usize;
    fn sample_batch(&self, n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>);
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub node: String,
    pub step: u64,
    pub loss: f64,
    pub mean_sigma: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("run_id,node,step,loss,mean_sigma\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},\"{}\",{},{},{}", r.run_id, r.node, r.step, r.loss, r.mean_sigma);
        }
        s
    }
}

/// Everything a training step needs besides the model.
pub struct TrainSetup<'a> {
    pub data: &'a dyn DataSource,
    pub encoder: &'a ConditionEncoder,
    pub law: SigmaLaw,
    pub pc: Preconditioning,
    pub opt: OptimizerConfig,
    pub ema_decay: f64,
}

/// Weighted denoising loss for one batch, built on the tape.
#[allow(clippy::too_many_arguments)]
pub fn loss_on_tape(
    model: &DenoiserModel,
    tape: &mut Tape,
    p: &Bound,
    x_clean: &Tensor,
    eps: &Tensor,
    sigmas: &[f64],
    ctx: &ContextBatch,
    pc: &Preconditioning,
) -> Result<Var> {
    let b = sigmas.len();
    if x_clean.shape() != eps.shape() || x_clean.shape().first() != Some(&b) {
        return Err(invalid("x_clean, eps and sigmas disagree on batch shape"));
    }
    let row = x_clean.numel() / b.max(1);
    let coefs = sigmas.iter().map(|&s| pc.coefficients(s)).collect::<Result<Vec<_>>>()?;
    let mut scaled = Vec::with_capacity(x_clean.numel());
    let mut target = Vec::with_capacity(x_clean.numel());
    let mut c_out = Vec::with_capacity(x_clean.numel());
    let mut weight = Vec::with_capacity(x_clean.numel());
    for (i, c) in coefs.iter().enumerate() {
        let lam = pc.loss_weight(sigmas[i])?;
        for j in 0..row {
            let xc = x_clean.data()[i * row + j];
            let noisy = xc + sigmas[i] * eps.data()[i * row + j];
            scaled.push(noisy * c.input);
            // D - x_clean = c_out * F + (c_skip * noisy - x_clean)
            target.push(c.skip * noisy - xc);
            c_out.push(c.out);
            weight.push(lam);
        }
    }
    let shape = x_clean.shape().to_vec();
    let xin = tape.constant(Tensor::new(shape.clone(), scaled)?)?;
    let noise: Vec<f64> = coefs.iter().map(|c| c.noise).collect();
    let f = model.forward(tape, p, xin, &noise, ctx, None, None)?;
    let c_out = tape.constant(Tensor::new(shape.clone(), c_out)?)?;
    let offset = tape.constant(Tensor::new(shape.clone(), target)?)?;
    let weight = tape.constant(Tensor::new(shape, weight)?)?;
    let scaled_f = tape.mul(f, c_out)?;
    let diff = tape.add(scaled_f, offset)?;
    let sq = tape.square(diff)?;
    let weighted = tape.mul(sq, weight)?;
    let total = tape.sum_all(weighted)?;
    Ok(tape.mul_scalar(total, 1.0 / b as f64)?)
}

/// Mutable training state of one node.
#[derive(Clone, Debug)]
pub struct NodeTraining {
    pub model: DenoiserModel,
    pub ema: EmaState,
    pub adam: AdamState,
}

impl NodeTraining {
    /// Fresh optimizer state and an EMA shadow equal to the initial weights.
    pub fn start(model: DenoiserModel, ema_decay: f64) -> Result<Self> {
        let ema = EmaState::new(model.params(), ema_decay)?;
        Ok(Self {
            model,
            ema,
            adam: AdamState::default(),
        })
    }

    pub fn ema_model(&self) -> Result<DenoiserModel> {
        let mut m = self.model.clone();
        m.set_params(self.ema.shadow.clone())?;
        Ok(m)
    }
}

/// `iters` optimizer steps with noise levels drawn from `interval`.
#[allow(clippy::too_many_arguments)]
pub fn train_interval(
    state: &mut NodeTraining,
    setup: &TrainSetup<'_>,
    interval: &IntervalSet,
    iters: u64,
    rng: &mut ChaCha8Rng,
    log: &mut MetricLog,
    run_id: &str,
    node: &str,
) -> Result<()> {
    setup.opt.validate()?;
    let dim = setup.data.dim();
    if dim != state.model.spec().data_dim {
        return Err(invalid(format!(
            "dataset dimension {dim} does not match model data_dim {}",
            state.model.spec().data_dim
        )));
    }
    let b = setup.opt.batch_size;
    for step in 0..iters {
        let (x, conds) = setup.data.sample_batch(b, rng);
        let ctx = setup.encoder.training_batch(&conds, rng)?;
        let sigmas = (0..b)
            .map(|_| setup.law.sample_sigma(Some(interval), rng))
            .collect::<Result<Vec<_>>>()?;
        let eps = Tensor::from_fn(x.shape(), |_| rng.sample(StandardNormal));
        let mean_sigma = sigmas.iter().sum::<f64>() / b as f64;
        let mut tape = Tape::new();
        let p = state.model.bind(&mut tape, true)?;
        let loss = match loss_on_tape(&state.model, &mut tape, &p, &x, &eps, &sigmas, &ctx, &setup.pc) {
            Ok(l) => l,
            Err(Error::Tensor(crate::engine::TensorError::NonFinite { .. })) => {
                return Err(Error::NonFiniteLoss {
                    step: step as usize,
                    mean_sigma,
                })
            }
            Err(e) => return Err(e),
        };
        let loss_value = tape.value(loss).item()?;
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step as usize,
                mean_sigma,
            });
        }
        let grads = tape.backward(loss)?.named(&tape);
        let mut params = state.model.params().clone();
        adamw_step(&mut params, &grads, &mut state.adam, &setup.opt)?;
        state.model.set_params(params)?;
        state.ema.update(state.model.params())?;
        log.rows.push(MetricRow {
            run_id: run_id.to_string(),
            node: node.to_string(),
            step: state.adam.step,
            loss: loss_value,
            mean_sigma,
        });
    }
    Ok(())
}

/// Raw and EMA weights of every trained node.
#[derive(Clone, Debug, Default)]
pub struct CheckpointRegistry {
    pub raw: BTreeMap<String, DenoiserModel>,
    pub ema: BTreeMap<String, DenoiserModel>,
    /// Parameters of each node right after initialization, before training.
    pub initial: BTreeMap<String, DenoiserModel>,
    pub log: MetricLog,
}

impl CheckpointRegistry {
    pub fn ema_of(&self, id: &ExpertId) -> Option<&DenoiserModel> {
        self.ema.get(&id.to_string())
    }

    /// Writes `<node>.raw.ckpt`, `<node>.ema.ckpt` and `metrics.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, m) in &self.raw {
            save_checkpoint(m, &dir.join(format!("{name}.raw.ckpt")))?;
        }
        for (name, m) in &self.ema {
            save_checkpoint(m, &dir.join(format!("{name}.ema.ckpt")))?;
        }
        std::fs::write(dir.join("metrics.csv"), self.log.to_csv())?;
        Ok(())
    }
}

fn entry_seed(seed: u64, idx: usize) -> u64 {
    seed ^ (idx as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Runs schedule entries in order. Node inits copy that node's latest EMA
/// weights; `ckpt:base_final` falls back to the root node's EMA.
pub fn run_branch_schedule(
    schedule: &BranchSchedule,
    setup: &TrainSetup<'_>,
    spec: &DenoiserNetSpec,
    external: &BTreeMap<String, DenoiserModel>,
    seed: u64,
    run_id: &str,
) -> Result<CheckpointRegistry> {
    let mut reg = CheckpointRegistry::default();
    for (idx, entry) in schedule.entries.iter().enumerate() {
        let init = match &entry.init {
            InitFrom::Fresh => build_denoiser(spec)?,
            InitFrom::Node(n) => reg
                .ema_of(&ExpertId::Node(*n))
                .cloned()
                .ok_or_else(|| Error::MissingCheckpoint(n.to_string()))?,
            InitFrom::Checkpoint(name) => match external.get(name) {
                Some(m) => m.clone(),
                None if name == BASE_FINAL => reg
                    .ema_of(&ExpertId::Node(NodeId::ROOT))
                    .cloned()
                    .ok_or_else(|| Error::MissingCheckpoint(name.clone()))?,
                None => return Err(Error::MissingCheckpoint(name.clone())),
            },
        };
        let name = entry.target.to_string();
        reg.initial.insert(name.clone(), init.clone());
        let interval = entry.target.interval_set(&setup.law)?;
        let mut state = NodeTraining::start(init, setup.ema_decay)?;
        let mut rng = ChaCha8Rng::seed_from_u64(entry_seed(seed, idx));
        train_interval(
            &mut state,
            setup,
            &interval,
            entry.iterations,
            &mut rng,
            &mut reg.log,
            run_id,
            &name,
        )?;
        reg.ema.insert(name.clone(), state.ema_model()?);
        reg.raw.insert(name, state.model);
    }
    Ok(reg)
}
