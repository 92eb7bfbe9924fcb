//! Three-layer MLP pair scorer, weighted cross-entropy and the total loss.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softplus, Graph, Matrix, ParamStore, Reduction, Var};

pub fn hidden_width(d: usize) -> usize {
    d.div_ceil(2)
}

/// Layers `2d -> d -> ceil(d/2) -> 1` named `mlp.w1..w3`, `mlp.b1..b3`.
pub fn init_params<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Result<()> {
    let h = hidden_width(d);
    store.insert_glorot("mlp.w1", 2 * d, d, rng)?;
    store.insert_zeros("mlp.b1", 1, d)?;
    store.insert_glorot("mlp.w2", d, h, rng)?;
    store.insert_zeros("mlp.b2", 1, h)?;
    store.insert_glorot("mlp.w3", h, 1, rng)?;
    store.insert_zeros("mlp.b3", 1, 1)?;
    Ok(())
}

/// Logits (`P x 1`) for pairs `(drugs[t], microbes[t])`.
///
/// The first layer acts on `[f_d || f_m]`, so it is split into the halves
/// applied to each side once per node rather than once per pair.
pub fn score_pairs(g: &mut Graph, store: &ParamStore, f_drug: Var, f_microbe: Var, drugs: &Arc<[usize]>, microbes: &Arc<[usize]>) -> Result<Var> {
    let d = g.shape(f_drug).1;
    if g.shape(f_microbe).1 != d {
        return Err(Error::dimension("score pairs", g.shape(f_drug), g.shape(f_microbe)));
    }
    if drugs.len() != microbes.len() {
        return Err(Error::Shape(format!("{} drug indices for {} microbe indices", drugs.len(), microbes.len())));
    }
    let w1 = g.param(store, "mlp.w1")?;
    if g.shape(w1).0 != 2 * d {
        return Err(Error::dimension("mlp first layer", g.shape(w1), (2 * d, d)));
    }
    let top = g.slice_rows(w1, 0, d)?;
    let bottom = g.slice_rows(w1, d, 2 * d)?;
    let p = g.matmul(f_drug, top)?;
    let q = g.matmul(f_microbe, bottom)?;
    let pg = g.gather_rows(p, drugs)?;
    let qg = g.gather_rows(q, microbes)?;
    let pre = g.add(pg, qg)?;
    let b1 = g.param(store, "mlp.b1")?;
    let pre = g.add_row(pre, b1)?;
    let h1 = g.relu(pre);

    let (w2, b2) = (g.param(store, "mlp.w2")?, g.param(store, "mlp.b2")?);
    let pre = g.matmul(h1, w2)?;
    let pre = g.add_row(pre, b2)?;
    let h2 = g.relu(pre);

    let (w3, b3) = (g.param(store, "mlp.w3")?, g.param(store, "mlp.b3")?);
    let z = g.matmul(h2, w3)?;
    g.add_row(z, b3)
}

/// Logit and probability for one fused drug row and microbe row.
pub fn score_pair(store: &ParamStore, f_drug: &[f64], f_microbe: &[f64]) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let fd = g.constant(Matrix::row_vector(f_drug));
    let fm = g.constant(Matrix::row_vector(f_microbe));
    let z = score_pairs(&mut g, store, fd, fm, &Arc::from([0usize]), &Arc::from([0usize]))?;
    let z = g.value(z).get(0, 0);
    Ok((z, sigmoid(z)))
}

/// `-[w y log s(z) + (1 - y) log(1 - s(z))]` from logits, reduced over pairs.
pub fn weighted_bce(g: &mut Graph, logits: Var, labels: &Arc<[f64]>, pos_weight: f64, reduction: Reduction) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Data("cross-entropy over an empty pair list".into()));
    }
    if let Some(y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Data(format!("label {y} is not 0 or 1")));
    }
    if !(pos_weight > 0.0) {
        return Err(Error::Config(format!("positive weight must be > 0, got {pos_weight}")));
    }
    g.weighted_bce(logits, labels, pos_weight, reduction)
}

/// Plain-value version of [`weighted_bce`].
pub fn weighted_bce_value(logits: &[f64], labels: &[f64], pos_weight: f64, reduction: Reduction) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z))
        .sum();
    match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / logits.len() as f64,
    }
}

pub fn total_loss(g: &mut Graph, l_rel: Var, adv_drug: Var, adv_microbe: Var, beta1: f64, beta2: f64) -> Result<Var> {
    let a = g.scale(adv_drug, beta1);
    let b = g.scale(adv_microbe, beta2);
    let s = g.add(l_rel, a)?;
    g.add(s, b)
}

pub fn total_loss_value(l_rel: f64, adv_drug: f64, adv_microbe: f64, beta1: f64, beta2: f64) -> f64 {
    l_rel + beta1 * adv_drug + beta2 * adv_microbe
}
