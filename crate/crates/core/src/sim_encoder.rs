//! Similarity-view encoder: a bias-free GCN over a KNN similarity graph.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graphs::KnnGraph;
use crate::numerics::{dropout, Graph, ParamStore, Var};

/// Names and dropout rate of one side's GCN. Layer 1 maps the similarity
/// rows (`n` wide) to `d`; later layers are `d x d`.
#[derive(Clone, Debug)]
pub struct GcnStack {
    pub weights: Vec<String>,
    pub dropout: f64,
}

impl GcnStack {
    pub fn param_names(prefix: &str, layers: usize) -> Vec<String> {
        (1..=layers).map(|l| format!("{prefix}.w{l}")).collect()
    }

    /// Registers Glorot-initialized weights under `{prefix}.w1..wL`.
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, n_in: usize, dim: usize, layers: usize, dropout: f64, rng: &mut R) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("GCN needs at least one layer".into()));
        }
        let weights = Self::param_names(prefix, layers);
        for (l, name) in weights.iter().enumerate() {
            let rows = if l == 0 { n_in } else { dim };
            store.insert_glorot(name.clone(), rows, dim, rng)?;
        }
        Ok(Self { weights, dropout })
    }

    /// Refers to weights already present in a store.
    pub fn existing(prefix: &str, layers: usize, dropout: f64) -> Self {
        Self {
            weights: Self::param_names(prefix, layers),
            dropout,
        }
    }

    /// `H <- ReLU(A_norm H W)` per layer. Dropout hits each layer input when
    /// an RNG is supplied.
    pub fn forward<R: Rng>(&self, g: &mut Graph, store: &ParamStore, graph: &KnnGraph, features: Var, mut rng: Option<&mut R>) -> Result<Var> {
        let n = graph.node_count();
        if g.shape(features).0 != n {
            return Err(Error::dimension("gcn features", g.shape(features), (n, n)));
        }
        let mut h = features;
        for name in &self.weights {
            if let Some(r) = rng.as_deref_mut() {
                h = dropout(g, h, self.dropout, r)?;
            }
            let w = g.param(store, name)?;
            let hw = g.matmul(h, w)?;
            let propagated = g.sparse_matmul(graph.propagation(), hw)?;
            h = g.relu(propagated);
        }
        Ok(h)
    }
}
