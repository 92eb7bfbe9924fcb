//! The full predictor: similarity-view GCNs, the association-view encoder,
//! per-side fusion and the MLP scorer, wired into one forward pass and loss.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::convergence::{self, fuse};
use crate::data::{Dataset, Pair, Side, SplitPlan};
use crate::divergence::adversarial_loss;
use crate::error::{Error, Result};
use crate::graphs::{build_hetero_graph, build_knn_graph, HeteroGraph, KnnGraph};
use crate::hetero_encoder::{self, hetero_forward};
use crate::numerics::{sigmoid, Graph, IndexTable, Matrix, ParamStore, Var};
use crate::predictor::{self, score_pairs, total_loss, weighted_bce};
use crate::sim_encoder::GcnStack;
use crate::trainer::TrainConfig;

/// Graphs and fixed inputs for one dataset/split under one configuration.
#[derive(Clone, Debug)]
pub struct Model {
    config: TrainConfig,
    drug_knn: KnnGraph,
    microbe_knn: KnnGraph,
    hetero: HeteroGraph,
    drug_features: Matrix,
    microbe_features: Matrix,
    gcn_drug: GcnStack,
    gcn_microbe: GcnStack,
}

/// Tape handles for every intermediate the loss needs.
pub struct ForwardOut {
    pub z1_drug: Var,
    pub z1_microbe: Var,
    pub z2_drug: Var,
    pub z2_microbe: Var,
    pub f_drug: Var,
    pub f_microbe: Var,
    pub samples: Arc<IndexTable>,
}

pub struct LossVars {
    pub rel: Var,
    pub adv_drug: Var,
    pub adv_microbe: Var,
    pub total: Var,
}

/// A labelled pair list in gather-friendly form.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub drugs: Arc<[usize]>,
    pub microbes: Arc<[usize]>,
    pub labels: Arc<[f64]>,
}

impl PairBatch {
    pub fn new(pairs: &[Pair], labels: &[f64]) -> Self {
        Self {
            drugs: pairs.iter().map(|p| p.drug).collect(),
            microbes: pairs.iter().map(|p| p.microbe).collect(),
            labels: Arc::from(labels),
        }
    }

    pub fn unlabelled(pairs: &[Pair]) -> Self {
        Self::new(pairs, &vec![0.0; pairs.len()])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Largest usable neighbor count for a side with `n` nodes.
pub fn effective_knn(requested: usize, n: usize) -> usize {
    requested.min(n.saturating_sub(1))
}

impl Model {
    pub fn build(ds: &Dataset, plan: &SplitPlan, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        plan.validate(ds)?;
        let ds = ds.for_plan(plan)?;
        let ds = ds.as_ref();
        let (nd, nm) = (ds.n_drugs(), ds.n_microbes());
        let drug_knn = build_knn_graph(ds.drug_sim(), effective_knn(config.knn, nd))?;
        let microbe_knn = build_knn_graph(ds.microbe_sim(), effective_knn(config.knn, nm))?;
        let hetero = build_hetero_graph(ds, plan, config.sample_size, config.seed)?;
        Ok(Self {
            config: config.clone(),
            drug_knn,
            microbe_knn,
            hetero,
            drug_features: ds.drug_sim().clone(),
            microbe_features: ds.microbe_sim().clone(),
            gcn_drug: GcnStack::existing("gcn.drug", config.gcn_layers, config.dropout),
            gcn_microbe: GcnStack::existing("gcn.microbe", config.gcn_layers, config.dropout),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn hetero_graph(&self) -> &HeteroGraph {
        &self.hetero
    }

    pub fn knn_graph(&self, side: Side) -> &KnnGraph {
        match side {
            Side::Drug => &self.drug_knn,
            Side::Microbe => &self.microbe_knn,
        }
    }

    pub fn n_drugs(&self) -> usize {
        self.hetero.n_drugs()
    }

    pub fn n_microbes(&self) -> usize {
        self.hetero.n_microbes()
    }

    /// Fresh parameters in a fixed registration order.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Result<ParamStore> {
        let c = &self.config;
        let (nd, nm) = (self.n_drugs(), self.n_microbes());
        let mut store = ParamStore::new();
        GcnStack::init(&mut store, "gcn.drug", nd, c.dim, c.gcn_layers, c.dropout, rng)?;
        GcnStack::init(&mut store, "gcn.microbe", nm, c.dim, c.gcn_layers, c.dropout, rng)?;
        hetero_encoder::init_params(&mut store, &c.hetero_config(), nd, nm, rng)?;
        convergence::init_params(&mut store, c.fusion, Side::Drug, c.dim, rng)?;
        convergence::init_params(&mut store, c.fusion, Side::Microbe, c.dim, rng)?;
        predictor::init_params(&mut store, c.dim, rng)?;
        Ok(store)
    }

    /// Embeds and fuses every node. Dropout is active only when `rng` is
    /// given; sample sets are rescored between blocks only when `update`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, samples: &Arc<IndexTable>, mut rng: Option<&mut ChaCha8Rng>, update: bool) -> Result<ForwardOut> {
        let xd = g.constant(self.drug_features.clone());
        let xm = g.constant(self.microbe_features.clone());
        let z2_drug = self.gcn_drug.forward(g, store, &self.drug_knn, xd, rng.as_deref_mut())?;
        let z2_microbe = self.gcn_microbe.forward(g, store, &self.microbe_knn, xm, rng.as_deref_mut())?;
        let hetero = hetero_forward(g, store, &self.config.hetero_config(), &self.hetero, xd, xm, samples, update)?;
        let fusion = self.config.fusion;
        let f_drug = fuse(g, store, fusion, Side::Drug, hetero.drug, z2_drug)?.fused;
        let f_microbe = fuse(g, store, fusion, Side::Microbe, hetero.microbe, z2_microbe)?.fused;
        Ok(ForwardOut {
            z1_drug: hetero.drug,
            z1_microbe: hetero.microbe,
            z2_drug,
            z2_microbe,
            f_drug,
            f_microbe,
            samples: hetero.samples,
        })
    }

    pub fn loss(&self, g: &mut Graph, store: &ParamStore, out: &ForwardOut, batch: &PairBatch, pos_weight: f64) -> Result<LossVars> {
        let c = &self.config;
        let logits = score_pairs(g, store, out.f_drug, out.f_microbe, &batch.drugs, &batch.microbes)?;
        let rel = weighted_bce(g, logits, &batch.labels, pos_weight, c.reduction())?;
        let mode = c.adversarial_mode();
        let adv_drug = adversarial_loss(g, out.z1_drug, out.z2_drug, c.gamma, mode)?;
        let adv_microbe = adversarial_loss(g, out.z1_microbe, out.z2_microbe, c.gamma, mode)?;
        let (b1, b2) = c.effective_betas();
        let total = total_loss(g, rel, adv_drug, adv_microbe, b1, b2)?;
        Ok(LossVars {
            rel,
            adv_drug,
            adv_microbe,
            total,
        })
    }

    /// Association probabilities for the given pairs, without dropout or
    /// persistent sample updates.
    pub fn predict(&self, store: &ParamStore, samples: &Arc<IndexTable>, pairs: &[Pair]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, samples, None, true)?;
        let batch = PairBatch::unlabelled(pairs);
        let z = score_pairs(&mut g, store, out.f_drug, out.f_microbe, &batch.drugs, &batch.microbes)?;
        let probs: Vec<f64> = g.value(z).as_slice().iter().map(|&v| sigmoid(v)).collect();
        if let Some(i) = probs.iter().position(|p| !p.is_finite()) {
            return Err(Error::Numerical(format!("non-finite score for pair {:?}", pairs[i])));
        }
        Ok(probs)
    }

    /// `n_drugs x n_microbes` matrix of association probabilities.
    pub fn score_matrix(&self, store: &ParamStore, samples: &Arc<IndexTable>) -> Result<Matrix> {
        let (nd, nm) = (self.n_drugs(), self.n_microbes());
        let pairs: Vec<Pair> = (0..nd).flat_map(|d| (0..nm).map(move |m| Pair::new(d, m))).collect();
        Matrix::from_vec(nd, nm, self.predict(store, samples, &pairs)?)
    }
}
