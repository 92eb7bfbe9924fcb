//! Full-batch training loop, optimizers and checkpoints.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::convergence::FusionMode;
use crate::data::{Dataset, Pair, SplitPlan, TestNegatives};
use crate::divergence::AdversarialMode;
use crate::error::{Error, Result};
use crate::hetero_encoder::{AttentionMode, HeteroConfig, MessageMode};
use crate::model::{Model, PairBatch};
use crate::numerics::{grad_check, GradCheckConfig, GradCheckReport, Gradients, Graph, IndexTable, Matrix, ParamStore, Reduction};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Every knob of a training run. Ablation switches remove or replace the
/// named component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub knn: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub sample_size: usize,
    pub gcn_layers: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub sum_reduction: bool,
    pub residual: bool,
    pub soft_bias: bool,
    pub test_fraction: f64,
    pub test_negatives: TestNegatives,
    /// Overrides the train negative/positive ratio as the positive weight.
    pub pos_weight: Option<f64>,
    pub no_trans: bool,
    pub no_gnn: bool,
    pub attention_swap: bool,
    pub gcn_swap: bool,
    pub no_adv_drug: bool,
    pub no_adv_microbe: bool,
    pub adv_close: bool,
    pub fusion: FusionMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4000,
            lr: 0.005,
            dropout: 0.5,
            beta1: 0.03,
            beta2: 0.03,
            gamma: 1.0,
            knn: 8,
            dim: 64,
            heads: 4,
            blocks: 2,
            sample_size: 15,
            gcn_layers: 2,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            sum_reduction: false,
            residual: true,
            soft_bias: true,
            test_fraction: 0.1,
            test_negatives: TestNegatives::Balanced,
            pos_weight: None,
            no_trans: false,
            no_gnn: false,
            attention_swap: false,
            gcn_swap: false,
            no_adv_drug: false,
            no_adv_microbe: false,
            adv_close: false,
            fusion: FusionMode::Bsam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if self.gcn_layers == 0 || self.sample_size == 0 {
            return fail("gcn_layers and sample_size must be positive".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail(format!("test fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if self.pos_weight.is_some_and(|w| !(w > 0.0)) {
            return fail("positive weight must be > 0".into());
        }
        if self.no_trans && self.attention_swap {
            return fail("no_trans and attention_swap are mutually exclusive".into());
        }
        if self.no_gnn && self.gcn_swap {
            return fail("no_gnn and gcn_swap are mutually exclusive".into());
        }
        self.hetero_config().validate()
    }

    pub fn hetero_config(&self) -> HeteroConfig {
        HeteroConfig {
            dim: self.dim,
            heads: self.heads,
            blocks: self.blocks,
            residual: self.residual,
            soft_bias: self.soft_bias,
            attention: if self.no_trans {
                AttentionMode::Off
            } else if self.attention_swap {
                AttentionMode::SingleHead
            } else {
                AttentionMode::MultiHead
            },
            message: if self.no_gnn {
                MessageMode::Off
            } else if self.gcn_swap {
                MessageMode::Gcn
            } else {
                MessageMode::MeanConcat
            },
        }
    }

    /// Loss weights after the adversarial ablation switches.
    pub fn effective_betas(&self) -> (f64, f64) {
        (
            if self.no_adv_drug { 0.0 } else { self.beta1 },
            if self.no_adv_microbe { 0.0 } else { self.beta2 },
        )
    }

    pub fn adversarial_mode(&self) -> AdversarialMode {
        if self.adv_close {
            AdversarialMode::Close
        } else {
            AdversarialMode::Diverge
        }
    }

    pub fn reduction(&self) -> Reduction {
        if self.sum_reduction {
            Reduction::Sum
        } else {
            Reduction::Mean
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect();
        let (m, v) = match kind {
            OptimizerKind::Adam => (zeros.clone(), zeros),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self { kind, step: 0, m, v }
    }

    pub fn apply(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (idx, g) in grads.iter().enumerate() {
                    for (p, g) in params.by_index_mut(idx).as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *p -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (idx, g) in grads.iter().enumerate() {
                    let p = params.by_index_mut(idx).as_mut_slice();
                    let m = self.m[idx].as_mut_slice();
                    let v = self.v[idx].as_mut_slice();
                    for k in 0..p.len() {
                        let gk = g.as_slice()[k];
                        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
                        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
                        p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub rel: f64,
    pub adv_drug: f64,
    pub adv_microbe: f64,
    pub total: f64,
}

impl EpochLosses {
    pub const HEADER: &'static str = "epoch\tL_rel\tL_adv_drug\tL_adv_microbe\tL_total";
}

impl fmt::Display for EpochLosses {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}\t{}", self.epoch, self.rel, self.adv_drug, self.adv_microbe, self.total)
    }
}

/// Everything needed to resume a run exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub plan: SplitPlan,
    pub epoch: usize,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    pub samples: IndexTable,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {}", ckpt.format_version)));
        }
        Ok(ckpt)
    }
}

pub struct Trainer {
    model: Model,
    plan: SplitPlan,
    batch: PairBatch,
    pos_weight: f64,
    params: ParamStore,
    optimizer: OptimizerState,
    samples: Arc<IndexTable>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    /// Builds graphs and draws initial parameters from `config.seed`; the
    /// same RNG stream then drives dropout.
    pub fn new(ds: &Dataset, plan: &SplitPlan, config: &TrainConfig) -> Result<Self> {
        let model = Model::build(ds, plan, config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = model.init_params(&mut rng)?;
        let optimizer = OptimizerState::new(config.optimizer, &params);
        let samples = Arc::new(model.hetero_graph().initial_samples().clone());
        Self::assemble(model, plan, params, optimizer, samples, rng, 0)
    }

    pub fn from_checkpoint(ds: &Dataset, ckpt: Checkpoint) -> Result<Self> {
        let model = Model::build(ds, &ckpt.plan, &ckpt.config)?;
        let fresh = model.init_params(&mut ChaCha8Rng::seed_from_u64(0))?;
        if fresh.census() != ckpt.params.census() {
            return Err(Error::Config("checkpoint parameters do not match the configured architecture".into()));
        }
        let plan = ckpt.plan.clone();
        Self::assemble(model, &plan, ckpt.params, ckpt.optimizer, Arc::new(ckpt.samples), ckpt.rng, ckpt.epoch)
    }

    fn assemble(model: Model, plan: &SplitPlan, params: ParamStore, optimizer: OptimizerState, samples: Arc<IndexTable>, rng: ChaCha8Rng, epoch: usize) -> Result<Self> {
        let (pairs, labels) = plan.train_pairs();
        if pairs.is_empty() {
            return Err(Error::Data("split has no training pairs".into()));
        }
        let pos_weight = model.config().pos_weight.unwrap_or_else(|| plan.class_ratio());
        if !(pos_weight > 0.0) {
            return Err(Error::Data("split has no training negatives to balance against".into()));
        }
        Ok(Self {
            batch: PairBatch::new(&pairs, &labels),
            plan: plan.clone(),
            model,
            pos_weight,
            params,
            optimizer,
            samples,
            rng,
            epoch,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        self.model.config()
    }

    pub fn plan(&self) -> &SplitPlan {
        &self.plan
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn samples(&self) -> &Arc<IndexTable> {
        &self.samples
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn pos_weight(&self) -> f64 {
        self.pos_weight
    }

    /// One full-batch step on the total loss.
    pub fn train_epoch(&mut self) -> Result<EpochLosses> {
        let mut g = Graph::new();
        let out = self.model.forward(&mut g, &self.params, &self.samples, Some(&mut self.rng), true)?;
        let loss = self.model.loss(&mut g, &self.params, &out, &self.batch, self.pos_weight)?;
        let value = |v| g.value(v).get(0, 0);
        let losses = EpochLosses {
            epoch: self.epoch + 1,
            rel: value(loss.rel),
            adv_drug: value(loss.adv_drug),
            adv_microbe: value(loss.adv_microbe),
            total: value(loss.total),
        };
        for (name, v) in [("L_rel", losses.rel), ("L_adv_drug", losses.adv_drug), ("L_adv_microbe", losses.adv_microbe), ("L_total", losses.total)] {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("epoch {}: {name} is {v}", losses.epoch)));
            }
        }
        let grads = g.backward(loss.total, &self.params)?;
        if let Some(idx) = grads.first_non_finite() {
            return Err(Error::Numerical(format!("epoch {}: gradient of {} is not finite", losses.epoch, self.params.by_index(idx).0)));
        }
        let lr = self.config().lr;
        self.optimizer.apply(&mut self.params, &grads, lr);
        if let Some((name, _)) = self.params.iter().find(|(_, m)| !m.is_finite()) {
            return Err(Error::Numerical(format!("epoch {}: parameter {name} became non-finite", losses.epoch)));
        }
        self.samples = out.samples;
        self.epoch += 1;
        Ok(losses)
    }

    /// Trains up to `config.epochs`, reporting each epoch.
    pub fn fit(&mut self, mut on_epoch: impl FnMut(&EpochLosses)) -> Result<Vec<EpochLosses>> {
        let mut curve = Vec::with_capacity(self.config().epochs.saturating_sub(self.epoch));
        while self.epoch < self.config().epochs {
            let l = self.train_epoch()?;
            on_epoch(&l);
            curve.push(l);
        }
        Ok(curve)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config().clone(),
            plan: self.plan.clone(),
            epoch: self.epoch,
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            samples: (*self.samples).clone(),
            rng: self.rng.clone(),
        }
    }

    pub fn predict(&self, pairs: &[Pair]) -> Result<Vec<f64>> {
        self.model.predict(&self.params, &self.samples, pairs)
    }

    pub fn score_matrix(&self) -> Result<Matrix> {
        self.model.score_matrix(&self.params, &self.samples)
    }
}

/// Convenience wrapper: train from scratch and return the trainer with its
/// loss curve.
pub fn fit_model(ds: &Dataset, plan: &SplitPlan, config: &TrainConfig) -> Result<(Trainer, Vec<EpochLosses>)> {
    let mut trainer = Trainer::new(ds, plan, config)?;
    let curve = trainer.fit(|_| {})?;
    Ok((trainer, curve))
}

/// Finite-difference check of the total-loss gradient at freshly drawn
/// parameters, without dropout and with sample sets held fixed.
pub fn gradient_check(ds: &Dataset, plan: &SplitPlan, config: &TrainConfig, check: &GradCheckConfig) -> Result<GradCheckReport> {
    let trainer = Trainer::new(ds, plan, config)?;
    let (model, batch, w) = (&trainer.model, &trainer.batch, trainer.pos_weight);
    let samples = Arc::clone(&trainer.samples);
    let eval = |p: &ParamStore, grads: bool| -> Result<(f64, Option<Gradients>)> {
        let mut g = Graph::new();
        let out = model.forward(&mut g, p, &samples, None, false)?;
        let l = model.loss(&mut g, p, &out, batch, w)?;
        let gr = if grads { Some(g.backward(l.total, p)?) } else { None };
        Ok((g.value(l.total).get(0, 0), gr))
    };
    let (_, analytic) = eval(&trainer.params, true)?;
    grad_check(&trainer.params, &analytic.expect("requested"), check, |p| Ok(eval(p, false)?.0))
}

/// Gradient check of `config`'s architecture on the 10-node synthetic
/// instance, with width capped at 8 so it finishes in seconds.
pub fn preflight_gradcheck(config: &TrainConfig, check: &GradCheckConfig) -> Result<GradCheckReport> {
    let ds = crate::synth::generate(&crate::synth::SynthSpec::tiny().with_seed(config.seed))?;
    let plan = crate::data::warm_split(&ds, 0.2, config.seed, TestNegatives::Balanced)?;
    let dim = config.dim.min(8);
    let heads = (1..=config.heads.min(dim)).rev().find(|h| dim % h == 0).unwrap_or(1);
    let small = TrainConfig {
        epochs: 1,
        dim,
        heads,
        sample_size: config.sample_size.min(4),
        ..config.clone()
    };
    small.validate()?;
    gradient_check(&ds, &plan, &small, check)
}
