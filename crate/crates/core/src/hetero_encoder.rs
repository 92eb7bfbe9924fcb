//! Association-view encoder over the heterogeneous graph: sampled multi-head
//! attention alternated with neighbor message passing, plus the discrete
//! attention-sample update between blocks.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::HeteroGraph;
use crate::numerics::{Graph, IndexTable, Matrix, ParamStore, Var};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    MultiHead,
    /// Single head attending with raw features, no projections.
    SingleHead,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageMode {
    MeanConcat,
    /// Symmetric-normalized GCN propagation in place of message/combine.
    Gcn,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeteroConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub residual: bool,
    /// Adds `<h_i U, h_c> / sqrt(d)` to the attention logits so `U` trains.
    pub soft_bias: bool,
    pub attention: AttentionMode,
    pub message: MessageMode,
}

impl Default for HeteroConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            blocks: 2,
            residual: true,
            soft_bias: true,
            attention: AttentionMode::MultiHead,
            message: MessageMode::MeanConcat,
        }
    }
}

impl HeteroConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.blocks == 0 {
            return Err(Error::Config("dim, heads and blocks must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }
}

pub fn block_prefix(b: usize) -> String {
    format!("hetero.block{b}")
}

/// Registers every trainable tensor the configuration uses.
pub fn init_params<R: Rng>(store: &mut ParamStore, cfg: &HeteroConfig, n_drugs: usize, n_microbes: usize, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let d = cfg.dim;
    store.insert_glorot("hetero.proj_drug", n_drugs, d, rng)?;
    store.insert_glorot("hetero.proj_microbe", n_microbes, d, rng)?;
    for b in 0..cfg.blocks {
        let p = block_prefix(b);
        if cfg.attention == AttentionMode::MultiHead {
            for name in ["w_query", "w_key", "w_value", "w_out"] {
                store.insert_glorot(format!("{p}.attn.{name}"), d, d, rng)?;
            }
        }
        match cfg.message {
            MessageMode::MeanConcat => {
                store.insert_glorot(format!("{p}.gnn.w_message"), d, d, rng)?;
                store.insert_glorot(format!("{p}.gnn.w_combine"), 2 * d, d, rng)?;
            }
            MessageMode::Gcn => {
                store.insert_glorot(format!("{p}.gcn.w"), d, d, rng)?;
            }
            MessageMode::Off => {}
        }
        if cfg.attention != AttentionMode::Off {
            store.insert_glorot(format!("{p}.sample.u"), d, d, rng)?;
        }
    }
    Ok(())
}

/// Drug rows are `X_d P_d`, microbe rows `X_m P_m`, stacked drugs first.
pub fn init_node_features(g: &mut Graph, store: &ParamStore, drug_sim: Var, microbe_sim: Var) -> Result<Var> {
    let pd = g.param(store, "hetero.proj_drug")?;
    let pm = g.param(store, "hetero.proj_microbe")?;
    let hd = g.matmul(drug_sim, pd)?;
    let hm = g.matmul(microbe_sim, pm)?;
    g.concat_rows(&[hd, hm])
}

pub struct TransformerOut {
    pub output: Var,
    /// Attention weights per head, `nodes x s`.
    pub attention: Vec<Var>,
}

fn soft_bias(g: &mut Graph, store: &ParamStore, prefix: &str, h: Var, samples: &Arc<IndexTable>, dim: usize) -> Result<Var> {
    let u = g.param(store, &format!("{prefix}.sample.u"))?;
    let hu = g.matmul(h, u)?;
    let raw = g.gather_dot(hu, h, samples)?;
    Ok(g.scale(raw, 1.0 / (dim as f64).sqrt()))
}

/// Every node attends over its sample set; queries come from the node,
/// keys and values from the samples.
pub fn transformer_layer(g: &mut Graph, store: &ParamStore, prefix: &str, cfg: &HeteroConfig, h: Var, samples: &Arc<IndexTable>) -> Result<TransformerOut> {
    if samples.width() == 0 {
        return Err(Error::Shape("empty attention sample set".into()));
    }
    if samples.rows() != g.shape(h).0 {
        return Err(Error::dimension("transformer samples", (samples.rows(), samples.width()), g.shape(h)));
    }
    if cfg.attention == AttentionMode::Off {
        return Ok(TransformerOut { output: h, attention: vec![] });
    }
    let d = cfg.dim;
    let bias = if cfg.soft_bias {
        Some(soft_bias(g, store, prefix, h, samples, d)?)
    } else {
        None
    };
    let with_bias = |g: &mut Graph, logits: Var| -> Result<Var> {
        match bias {
            Some(b) => g.add(logits, b),
            None => Ok(logits),
        }
    };

    let (mixed, attention) = match cfg.attention {
        AttentionMode::MultiHead => {
            let q = g.param(store, &format!("{prefix}.attn.w_query"))?;
            let k = g.param(store, &format!("{prefix}.attn.w_key"))?;
            let v = g.param(store, &format!("{prefix}.attn.w_value"))?;
            let wo = g.param(store, &format!("{prefix}.attn.w_out"))?;
            let (q, k, v) = (g.matmul(h, q)?, g.matmul(h, k)?, g.matmul(h, v)?);
            let dk = d / cfg.heads;
            let mut heads = Vec::with_capacity(cfg.heads);
            let mut attention = Vec::with_capacity(cfg.heads);
            for head in 0..cfg.heads {
                let (lo, hi) = (head * dk, (head + 1) * dk);
                let qh = g.slice_cols(q, lo, hi)?;
                let kh = g.slice_cols(k, lo, hi)?;
                let vh = g.slice_cols(v, lo, hi)?;
                let raw = g.gather_dot(qh, kh, samples)?;
                let scaled = g.scale(raw, 1.0 / (dk as f64).sqrt());
                let logits = with_bias(g, scaled)?;
                let att = g.row_softmax(logits);
                heads.push(g.gather_combine(att, vh, samples)?);
                attention.push(att);
            }
            let cat = g.concat_cols(&heads)?;
            (g.matmul(cat, wo)?, attention)
        }
        AttentionMode::SingleHead => {
            let raw = g.gather_dot(h, h, samples)?;
            let scaled = g.scale(raw, 1.0 / (d as f64).sqrt());
            let logits = with_bias(g, scaled)?;
            let att = g.row_softmax(logits);
            (g.gather_combine(att, h, samples)?, vec![att])
        }
        AttentionMode::Off => unreachable!("handled above"),
    };
    let output = if cfg.residual {
        let sum = g.add(h, mixed)?;
        g.layer_norm(sum, LAYER_NORM_EPS)
    } else {
        mixed
    };
    Ok(TransformerOut { output, attention })
}

/// `ReLU([h_i || ReLU(mean_{k in N(i)} h_k W_msg)] W_comb)`, or the GCN
/// swap `ReLU(A_hat H W)`.
pub fn gnn_layer(g: &mut Graph, store: &ParamStore, prefix: &str, cfg: &HeteroConfig, graph: &HeteroGraph, h: Var) -> Result<Var> {
    match cfg.message {
        MessageMode::MeanConcat => {
            let wm = g.param(store, &format!("{prefix}.gnn.w_message"))?;
            let wc = g.param(store, &format!("{prefix}.gnn.w_combine"))?;
            let msg = g.matmul(h, wm)?;
            let agg = g.sparse_matmul(graph.mean_aggregation(), msg)?;
            let hm = g.relu(agg);
            let cat = g.concat_cols(&[h, hm])?;
            let combined = g.matmul(cat, wc)?;
            Ok(g.relu(combined))
        }
        MessageMode::Gcn => {
            let w = g.param(store, &format!("{prefix}.gcn.w"))?;
            let hw = g.matmul(h, w)?;
            let prop = g.sparse_matmul(graph.gcn_propagation(), hw)?;
            Ok(g.relu(prop))
        }
        MessageMode::Off => Ok(h),
    }
}

/// Rescores each node's own samples plus its neighbors' samples by
/// `<h_i U, h_c>` and keeps the best `width`, ties to the smaller index.
pub fn update_samples(h: &Matrix, u: &Matrix, graph: &HeteroGraph, samples: &IndexTable) -> Result<IndexTable> {
    let hu = h.matmul(u)?;
    let width = samples.width();
    let mut out = Vec::with_capacity(samples.rows() * width);
    let mut candidates = Vec::new();
    for i in 0..samples.rows() {
        candidates.clear();
        candidates.extend_from_slice(samples.row(i));
        for &j in graph.neighbors(i) {
            candidates.extend_from_slice(samples.row(j));
        }
        candidates.sort_unstable();
        candidates.dedup();
        candidates.retain(|&c| c != i);
        let query = hu.row(i);
        let mut scored: Vec<(f64, usize)> = candidates
            .iter()
            .map(|&c| (query.iter().zip(h.row(c)).map(|(a, b)| a * b).sum(), c))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        out.extend(scored.iter().take(width).map(|&(_, c)| c));
    }
    IndexTable::new(width, out)
}

pub struct HeteroOutput {
    pub drug: Var,
    pub microbe: Var,
    /// Sample sets after the last block's update.
    pub samples: Arc<IndexTable>,
}

/// Runs all blocks from the given sample sets. With `update` off the sets
/// stay fixed, which keeps the output smooth in the parameters.
#[allow(clippy::too_many_arguments)]
pub fn hetero_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &HeteroConfig,
    graph: &HeteroGraph,
    drug_sim: Var,
    microbe_sim: Var,
    samples: &Arc<IndexTable>,
    update: bool,
) -> Result<HeteroOutput> {
    cfg.validate()?;
    let mut h = init_node_features(g, store, drug_sim, microbe_sim)?;
    let mut current = Arc::clone(samples);
    for b in 0..cfg.blocks {
        let prefix = block_prefix(b);
        h = transformer_layer(g, store, &prefix, cfg, h, &current)?.output;
        h = gnn_layer(g, store, &prefix, cfg, graph, h)?;
        if !g.value(h).is_finite() {
            return Err(Error::Numerical(format!("non-finite node features after block {b}")));
        }
        if update && cfg.attention != AttentionMode::Off {
            let u = store
                .get(&format!("{prefix}.sample.u"))
                .ok_or_else(|| Error::Config(format!("missing {prefix}.sample.u")))?;
            current = Arc::new(update_samples(g.value(h), u, graph, &current)?);
        }
    }
    let nd = graph.n_drugs();
    let drug = g.slice_rows(h, 0, nd)?;
    let microbe = g.slice_rows(h, nd, graph.node_count())?;
    Ok(HeteroOutput { drug, microbe, samples: current })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Pair, SplitMode, SplitPlan};
    use crate::graphs::build_hetero_graph;
    use crate::numerics::{grad_check, GradCheckConfig};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plan(train: Vec<Pair>) -> SplitPlan {
        SplitPlan {
            mode: SplitMode::Warm,
            seed: 0,
            train_positives: train,
            train_negatives: vec![],
            test_positives: vec![],
            test_negatives: vec![],
            held_out: vec![],
            degenerate: true,
        }
    }

    fn dataset(nd: usize, nm: usize, edges: &[(usize, usize)], seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sim = |n: usize, rng: &mut ChaCha8Rng| {
            let mut s = Matrix::identity(n);
            for i in 0..n {
                for j in 0..i {
                    let v: f64 = rng.gen();
                    s.set(i, j, v);
                    s.set(j, i, v);
                }
            }
            s
        };
        let mut a = Matrix::zeros(nd, nm);
        for &(d, m) in edges {
            a.set(d, m, 1.0);
        }
        let ds_sim = sim(nd, &mut rng);
        let ms_sim = sim(nm, &mut rng);
        let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect();
        Dataset::new(names("d", nd), names("m", nm), a, ds_sim, ms_sim).unwrap()
    }

    fn cfg(dim: usize, heads: usize, blocks: usize) -> HeteroConfig {
        HeteroConfig {
            dim,
            heads,
            blocks,
            ..HeteroConfig::default()
        }
    }

    #[test]
    fn node_features_cases() {
        let mut store = ParamStore::new();
        store.insert("hetero.proj_drug", Matrix::identity(2)).unwrap();
        store.insert("hetero.proj_microbe", Matrix::identity(2)).unwrap();
        let xd = Matrix::from_rows(&[[1.0, 0.4], [0.4, 1.0]]).unwrap();
        let xm = Matrix::from_rows(&[[1.0, 0.1], [0.1, 1.0]]).unwrap();
        let mut g = Graph::new();
        let (d, m) = (g.constant(xd.clone()), g.constant(xm.clone()));
        let h = init_node_features(&mut g, &store, d, m).unwrap();
        assert_eq!(g.value(h).as_slice(), &[1.0, 0.4, 0.4, 1.0, 1.0, 0.1, 0.1, 1.0]);

        let (dz, mz) = (g.constant(Matrix::zeros(2, 2)), g.constant(Matrix::zeros(2, 2)));
        let h = init_node_features(&mut g, &store, dz, mz).unwrap();
        assert_eq!(g.value(h), &Matrix::zeros(4, 2));

        let x3 = Matrix::from_rows(&[[1.0, 0.5, 0.2], [0.5, 1.0, 0.3], [0.2, 0.3, 1.0]]).unwrap();
        let p3 = Matrix::from_rows(&[[0.1, -0.2], [0.7, 0.3], [-0.5, 0.9]]).unwrap();
        let mut s3 = ParamStore::new();
        s3.insert("hetero.proj_drug", p3.clone()).unwrap();
        s3.insert("hetero.proj_microbe", p3.clone()).unwrap();
        let mut g = Graph::new();
        let (d, m) = (g.constant(x3.clone()), g.constant(x3.clone()));
        let h = init_node_features(&mut g, &s3, d, m).unwrap();
        for i in 0..3 {
            for c in 0..2 {
                let oracle: f64 = (0..3).map(|k| x3.get(i, k) * p3.get(k, c)).sum();
                assert!((g.value(h).get(i, c) - oracle).abs() < 1e-12);
                assert!((g.value(h).get(i + 3, c) - oracle).abs() < 1e-12);
            }
        }
        let bad = g.constant(Matrix::zeros(3, 2));
        assert!(init_node_features(&mut g, &s3, bad, m).is_err());
    }

    fn single_block_store(c: &HeteroConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init_params(&mut store, c, 2, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        store
    }

    #[test]
    fn singleton_attention_returns_projected_value() {
        let c = HeteroConfig {
            soft_bias: false,
            ..cfg(4, 2, 1)
        };
        let store = single_block_store(&c, 3);
        let h0 = Matrix::from_rows(&[[0.2, -0.1, 0.5, 0.3], [1.0, 0.0, -0.4, 0.8], [0.1, 0.1, 0.1, 0.1]]).unwrap();
        let samples = Arc::new(IndexTable::new(1, vec![1, 2, 0]).unwrap());
        let mut g = Graph::new();
        let h = g.constant(h0.clone());
        let out = transformer_layer(&mut g, &store, "hetero.block0", &c, h, &samples).unwrap();
        for a in &out.attention {
            assert!(g.value(*a).as_slice().iter().all(|&w| w == 1.0));
        }
        let wv = store.get("hetero.block0.attn.w_value").unwrap();
        let wo = store.get("hetero.block0.attn.w_out").unwrap();
        let projected = h0.select_rows(&[1, 2, 0]).matmul(wv).unwrap().matmul(wo).unwrap();
        let mut expected = Graph::new();
        let pre = expected.constant(Matrix::from_vec(3, 4, h0.as_slice().iter().zip(projected.as_slice()).map(|(a, b)| a + b).collect()).unwrap());
        let ln = expected.layer_norm(pre, LAYER_NORM_EPS);
        assert!(g.value(out.output).max_abs_diff(expected.value(ln)) < 1e-14);
    }

    #[test]
    fn identical_samples_get_uniform_weights() {
        let c = cfg(4, 2, 1);
        let store = single_block_store(&c, 5);
        let mut rows = vec![vec![0.3, -0.2, 0.7, 0.1]; 4];
        rows[0] = vec![1.0, 2.0, -1.0, 0.5];
        let samples = Arc::new(IndexTable::new(3, vec![1, 2, 3, 1, 2, 3, 1, 2, 3, 1, 2, 3]).unwrap());
        let mut g = Graph::new();
        let h = g.constant(Matrix::from_rows(&rows).unwrap());
        let out = transformer_layer(&mut g, &store, "hetero.block0", &c, h, &samples).unwrap();
        for a in &out.attention {
            assert!(g.value(*a).as_slice().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn one_head_two_samples_matches_scripted_oracle() {
        let c = HeteroConfig {
            soft_bias: false,
            residual: false,
            ..cfg(2, 1, 1)
        };
        let mut store = ParamStore::new();
        let wq = Matrix::from_rows(&[[0.5, -0.2], [0.3, 0.8]]).unwrap();
        let wk = Matrix::from_rows(&[[1.0, 0.4], [-0.6, 0.2]]).unwrap();
        let wv = Matrix::from_rows(&[[0.7, 0.1], [0.0, -0.9]]).unwrap();
        let wo = Matrix::from_rows(&[[1.1, 0.2], [-0.3, 0.6]]).unwrap();
        for (n, m) in [("w_query", &wq), ("w_key", &wk), ("w_value", &wv), ("w_out", &wo)] {
            store.insert(format!("hetero.block0.attn.{n}"), m.clone()).unwrap();
        }
        let h0 = [[0.4, -1.2], [0.9, 0.3], [-0.5, 0.6]];
        let samples = Arc::new(IndexTable::new(2, vec![1, 2, 0, 2, 0, 1]).unwrap());
        let mut g = Graph::new();
        let h = g.constant(Matrix::from_rows(&h0).unwrap());
        let out = transformer_layer(&mut g, &store, "hetero.block0", &c, h, &samples).unwrap();

        let vecmat = |x: [f64; 2], w: &Matrix| [x[0] * w.get(0, 0) + x[1] * w.get(1, 0), x[0] * w.get(0, 1) + x[1] * w.get(1, 1)];
        for i in 0..3 {
            let q = vecmat(h0[i], &wq);
            let s = samples.row(i);
            let logits: Vec<f64> = s
                .iter()
                .map(|&j| {
                    let k = vecmat(h0[j], &wk);
                    (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt()
                })
                .collect();
            let z = logits[0].exp() + logits[1].exp();
            let (a0, a1) = (logits[0].exp() / z, logits[1].exp() / z);
            let (v0, v1) = (vecmat(h0[s[0]], &wv), vecmat(h0[s[1]], &wv));
            let mixed = [a0 * v0[0] + a1 * v1[0], a0 * v0[1] + a1 * v1[1]];
            let expected = vecmat(mixed, &wo);
            for col in 0..2 {
                assert!((g.value(out.output).get(i, col) - expected[col]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transformer_rejects_missing_sample_sets() {
        assert!(IndexTable::new(0, vec![]).is_err());
        let c = cfg(2, 1, 1);
        let store = single_block_store(&c, 0);
        let mut g = Graph::new();
        let h = g.constant(Matrix::zeros(4, 2));
        let short = Arc::new(IndexTable::new(1, vec![1, 0, 3]).unwrap());
        assert!(transformer_layer(&mut g, &store, "hetero.block0", &c, h, &short).is_err());
    }

    fn gnn_setup() -> (HeteroGraph, ParamStore, HeteroConfig) {
        let ds = dataset(2, 2, &[(0, 0), (0, 1)], 1);
        let graph = build_hetero_graph(&ds, &plan(vec![Pair::new(0, 0), Pair::new(0, 1)]), 2, 0).unwrap();
        let c = cfg(2, 1, 1);
        let mut store = ParamStore::new();
        store.insert("b.gnn.w_message", Matrix::from_rows(&[[0.6, -0.4], [0.2, 0.9]]).unwrap()).unwrap();
        store
            .insert("b.gnn.w_combine", Matrix::from_rows(&[[0.5, 0.1], [-0.3, 0.7], [0.8, -0.2], [0.4, 0.6]]).unwrap())
            .unwrap();
        (graph, store, c)
    }

    #[test]
    fn gnn_layer_cases() {
        let (graph, store, c) = gnn_setup();
        let h0 = [[0.5, -0.2], [1.0, 0.3], [0.7, 0.9], [-0.4, 1.1]];
        let mut g = Graph::new();
        let h = g.constant(Matrix::from_rows(&h0).unwrap());
        let out = gnn_layer(&mut g, &store, "b", &c, &graph, h).unwrap();
        let out = g.value(out).clone();
        let wm = store.get("b.gnn.w_message").unwrap();
        let wc = store.get("b.gnn.w_combine").unwrap();

        let combine = |hi: [f64; 2], hm: [f64; 2]| -> Vec<f64> {
            let cat = [hi[0], hi[1], hm[0], hm[1]];
            (0..2).map(|col| (0..4).map(|k| cat[k] * wc.get(k, col)).sum::<f64>().max(0.0)).collect()
        };
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        // drug 1 is isolated
        assert!(close(out.row(1), &combine(h0[1], [0.0, 0.0])));
        // drug 0 has two microbe neighbors (nodes 2 and 3)
        let msg = |x: [f64; 2]| [x[0] * wm.get(0, 0) + x[1] * wm.get(1, 0), x[0] * wm.get(0, 1) + x[1] * wm.get(1, 1)];
        let (m2, m3) = (msg(h0[2]), msg(h0[3]));
        let hm = [((m2[0] + m3[0]) / 2.0).max(0.0), ((m2[1] + m3[1]) / 2.0).max(0.0)];
        let expected = combine(h0[0], hm);
        for col in 0..2 {
            assert!((out.get(0, col) - expected[col]).abs() < 1e-12);
        }
        // node 2 has one neighbor (drug 0); with zero features it matches isolation
        let mut zeroed = h0;
        zeroed[0] = [0.0, 0.0];
        let mut g = Graph::new();
        let h = g.constant(Matrix::from_rows(&zeroed).unwrap());
        let out = gnn_layer(&mut g, &store, "b", &c, &graph, h).unwrap();
        assert!(close(g.value(out).row(2), &combine(h0[2], [0.0, 0.0])));
    }

    #[test]
    fn update_samples_cases() {
        let ds = dataset(3, 2, &[(0, 0), (1, 0), (2, 1)], 2);
        let graph = build_hetero_graph(&ds, &plan(vec![Pair::new(0, 0), Pair::new(1, 0), Pair::new(2, 1)]), 2, 0).unwrap();
        let h = Matrix::from_rows(&[[1.0, 0.0], [0.5, 0.5], [0.0, 1.0], [-1.0, 0.3], [0.2, -0.8]]).unwrap();
        let samples = IndexTable::new(2, vec![1, 2, 0, 2, 1, 0, 4, 0, 3, 1]).unwrap();

        // U = 0: every score ties, so the smallest candidate indices win
        let zero = update_samples(&h, &Matrix::zeros(2, 2), &graph, &samples).unwrap();
        assert_eq!(zero.row(0), &[1, 2]);
        // node 3 (microbe 0) sees its own {4,0} and the samples of drugs 0,1
        assert_eq!(zero.row(3), &[0, 1]);

        let u = Matrix::from_rows(&[[0.3, -0.7], [1.2, 0.4]]).unwrap();
        let updated = update_samples(&h, &u, &graph, &samples).unwrap();
        let hu = h.matmul(&u).unwrap();
        for i in 0..5 {
            let mut cands: Vec<usize> = samples.row(i).to_vec();
            for &j in graph.neighbors(i) {
                cands.extend_from_slice(samples.row(j));
            }
            cands.sort_unstable();
            cands.dedup();
            cands.retain(|&c| c != i);
            // brute force: rank each candidate by how many others beat it
            let score = |c: usize| (0..2).map(|k| hu.get(i, k) * h.get(c, k)).sum::<f64>();
            let mut expected: Vec<usize> = cands
                .iter()
                .copied()
                .filter(|&c| {
                    cands
                        .iter()
                        .filter(|&&o| score(o) > score(c) || (score(o) == score(c) && o < c))
                        .count()
                        < 2
                })
                .collect();
            expected.sort_by(|&a, &b| score(b).total_cmp(&score(a)));
            assert_eq!(updated.row(i), expected.as_slice());
            assert!(!updated.row(i).contains(&i));
        }
        // drug 1's only neighbor is microbe 0, whose samples {0, 3} add new candidates;
        // the isolated case keeps the original members
        let isolated = build_hetero_graph(&ds, &plan(vec![]), 2, 0).unwrap();
        let kept = update_samples(&h, &u, &isolated, &samples).unwrap();
        for i in 0..5 {
            let mut a = kept.row(i).to_vec();
            let mut b = samples.row(i).to_vec();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
        }
    }

    fn six_node_setup(c: &HeteroConfig, seed: u64) -> (Dataset, HeteroGraph, ParamStore) {
        let edges = [(0, 0), (1, 1), (2, 0), (2, 2)];
        let ds = dataset(3, 3, &edges, seed);
        let train = edges.iter().map(|&(d, m)| Pair::new(d, m)).collect();
        let graph = build_hetero_graph(&ds, &plan(train), 2, seed).unwrap();
        let mut store = ParamStore::new();
        init_params(&mut store, c, 3, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (ds, graph, store)
    }

    fn run_forward(ds: &Dataset, graph: &HeteroGraph, store: &ParamStore, c: &HeteroConfig) -> (Matrix, Matrix, Arc<IndexTable>) {
        let mut g = Graph::new();
        let xd = g.constant(ds.drug_sim().clone());
        let xm = g.constant(ds.microbe_sim().clone());
        let s = Arc::new(graph.initial_samples().clone());
        let out = hetero_forward(&mut g, store, c, graph, xd, xm, &s, true).unwrap();
        (g.value(out.drug).clone(), g.value(out.microbe).clone(), out.samples)
    }

    #[test]
    fn edgeless_singleton_block_composes_trivial_cases() {
        let c = HeteroConfig {
            soft_bias: false,
            ..cfg(2, 1, 1)
        };
        let ds = dataset(2, 2, &[], 4);
        let graph = build_hetero_graph(&ds, &plan(vec![]), 1, 0).unwrap();
        let mut store = ParamStore::new();
        init_params(&mut store, &c, 2, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (d, m, _) = run_forward(&ds, &graph, &store, &c);

        let mut g = Graph::new();
        let (xd, xm) = (g.constant(ds.drug_sim().clone()), g.constant(ds.microbe_sim().clone()));
        let h = init_node_features(&mut g, &store, xd, xm).unwrap();
        let samples = Arc::new(graph.initial_samples().clone());
        let t = transformer_layer(&mut g, &store, "hetero.block0", &c, h, &samples).unwrap().output;
        let wc = g.param(&store, "hetero.block0.gnn.w_combine").unwrap();
        let zeros = g.constant(Matrix::zeros(4, 2));
        let cat = g.concat_cols(&[t, zeros]).unwrap();
        let lin = g.matmul(cat, wc).unwrap();
        let expected = g.relu(lin);
        let expected = g.value(expected);
        assert_eq!(&d, &expected.select_rows(&[0, 1]));
        assert_eq!(&m, &expected.select_rows(&[2, 3]));
    }

    #[test]
    fn forward_is_deterministic() {
        let c = cfg(4, 2, 2);
        let (ds, graph, store) = six_node_setup(&c, 8);
        let a = run_forward(&ds, &graph, &store, &c);
        let b = run_forward(&ds, &graph, &store, &c);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    /// Plain-loop re-implementation of the whole encoder.
    mod oracle {
        pub type M = Vec<Vec<f64>>;

        pub fn mm(a: &M, b: &M) -> M {
            a.iter()
                .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, row)| x * row[j]).sum()).collect())
                .collect()
        }

        pub fn dot(a: &[f64], b: &[f64]) -> f64 {
            a.iter().zip(b).map(|(x, y)| x * y).sum()
        }

        pub fn layer_norm(r: &[f64]) -> Vec<f64> {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter().map(|v| (v - mean) / (var + super::LAYER_NORM_EPS).sqrt()).collect()
        }

        #[allow(clippy::too_many_arguments)]
        pub fn transformer(h: &M, s: &[Vec<usize>], wq: &M, wk: &M, wv: &M, wo: &M, u: &M, heads: usize) -> M {
            let d = h[0].len();
            let dk = d / heads;
            let (q, k, v, hu) = (mm(h, wq), mm(h, wk), mm(h, wv), mm(h, u));
            let mut out = Vec::new();
            for i in 0..h.len() {
                let mut cat = vec![0.0; d];
                for hd in 0..heads {
                    let r = hd * dk..(hd + 1) * dk;
                    let logits: Vec<f64> = s[i]
                        .iter()
                        .map(|&j| dot(&q[i][r.clone()], &k[j][r.clone()]) / (dk as f64).sqrt() + dot(&hu[i], &h[j]) / (d as f64).sqrt())
                        .collect();
                    let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (t, &j) in s[i].iter().enumerate() {
                        for c in r.clone() {
                            cat[c] += e[t] / z * v[j][c];
                        }
                    }
                }
                let proj = mm(&vec![cat], wo).remove(0);
                let res: Vec<f64> = h[i].iter().zip(&proj).map(|(a, b)| a + b).collect();
                out.push(layer_norm(&res));
            }
            out
        }

        pub fn gnn(h: &M, nbrs: &[Vec<usize>], wm: &M, wc: &M) -> M {
            let msg = mm(h, wm);
            let d = h[0].len();
            (0..h.len())
                .map(|i| {
                    let mut hm = vec![0.0; d];
                    for &j in &nbrs[i] {
                        for c in 0..d {
                            hm[c] += msg[j][c] / nbrs[i].len() as f64;
                        }
                    }
                    let mut cat = h[i].clone();
                    cat.extend(hm.iter().map(|v| v.max(0.0)));
                    mm(&vec![cat], wc).remove(0).into_iter().map(|v| v.max(0.0)).collect()
                })
                .collect()
        }

        pub fn update(h: &M, u: &M, nbrs: &[Vec<usize>], s: &[Vec<usize>]) -> Vec<Vec<usize>> {
            let hu = mm(h, u);
            (0..h.len())
                .map(|i| {
                    let mut c: Vec<usize> = s[i].iter().chain(nbrs[i].iter().flat_map(|&j| s[j].iter())).copied().filter(|&x| x != i).collect();
                    c.sort();
                    c.dedup();
                    c.sort_by(|&a, &b| dot(&hu[i], &h[b]).total_cmp(&dot(&hu[i], &h[a])).then(a.cmp(&b)));
                    c.truncate(s[i].len());
                    c
                })
                .collect()
        }
    }

    #[test]
    fn six_node_two_blocks_match_scripted_oracle() {
        let c = cfg(4, 2, 2);
        let (ds, graph, store) = six_node_setup(&c, 21);
        let (d, m, final_samples) = run_forward(&ds, &graph, &store, &c);

        let to_m = |x: &Matrix| -> oracle::M { (0..x.rows()).map(|i| x.row(i).to_vec()).collect() };
        let p = |n: &str| to_m(store.get(n).unwrap());
        let mut h = oracle::mm(&to_m(ds.drug_sim()), &p("hetero.proj_drug"));
        h.extend(oracle::mm(&to_m(ds.microbe_sim()), &p("hetero.proj_microbe")));
        let nbrs: Vec<Vec<usize>> = graph.neighbor_lists().to_vec();
        let init = graph.initial_samples();
        let mut s: Vec<Vec<usize>> = (0..6).map(|i| init.row(i).to_vec()).collect();
        for b in 0..2 {
            let q = |n: &str| p(&format!("hetero.block{b}.{n}"));
            h = oracle::transformer(&h, &s, &q("attn.w_query"), &q("attn.w_key"), &q("attn.w_value"), &q("attn.w_out"), &q("sample.u"), 2);
            h = oracle::gnn(&h, &nbrs, &q("gnn.w_message"), &q("gnn.w_combine"));
            s = oracle::update(&h, &q("sample.u"), &nbrs, &s);
        }
        for i in 0..3 {
            for col in 0..4 {
                assert!((d.get(i, col) - h[i][col]).abs() < 1e-10);
                assert!((m.get(i, col) - h[i + 3][col]).abs() < 1e-10);
            }
        }
        for (i, row) in s.iter().enumerate() {
            assert_eq!(final_samples.row(i), row.as_slice());
        }
    }

    fn encoder_loss(ds: &Dataset, graph: &HeteroGraph, store: &ParamStore, c: &HeteroConfig, samples: &Arc<IndexTable>) -> Result<(f64, crate::numerics::Gradients)> {
        let mut g = Graph::new();
        let xd = g.constant(ds.drug_sim().clone());
        let xm = g.constant(ds.microbe_sim().clone());
        let out = hetero_forward(&mut g, store, c, graph, xd, xm, samples, true)?;
        // a fixed nonlinear readout keeps every tensor in play
        let both = g.concat_rows(&[out.drug, out.microbe])?;
        let sq = g.mul(both, both)?;
        let t = g.tanh(both);
        let sum = g.add(sq, t)?;
        let l = g.sum(sum);
        Ok((g.value(l).get(0, 0), g.backward(l, store)?))
    }

    #[test]
    fn gradients_pass_through_every_variant() {
        let variants = [
            cfg(4, 2, 2),
            HeteroConfig { residual: false, ..cfg(4, 2, 2) },
            HeteroConfig { soft_bias: false, ..cfg(4, 2, 1) },
            HeteroConfig { attention: AttentionMode::SingleHead, ..cfg(4, 2, 2) },
            HeteroConfig { message: MessageMode::Gcn, ..cfg(4, 2, 2) },
            HeteroConfig { attention: AttentionMode::Off, ..cfg(4, 2, 1) },
            HeteroConfig { message: MessageMode::Off, ..cfg(4, 2, 1) },
        ];
        for c in &variants {
            let (ds, graph, store) = six_node_setup(c, 13);
            // selection is discrete, so check gradients at the post-update sample sets
            let (_, _, samples) = run_forward(&ds, &graph, &store, c);
            let (_, grads) = encoder_loss(&ds, &graph, &store, c, &samples).unwrap();
            let report = grad_check(&store, &grads, &GradCheckConfig::default(), |p| Ok(encoder_loss(&ds, &graph, p, c, &samples)?.0)).unwrap();
            assert!(report.passed(), "{c:?}: {:?}", report.worst());
        }
    }

    #[test]
    fn parameter_names_follow_configuration() {
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg(4, 2, 1), 3, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let names: Vec<&str> = store.names().collect();
        assert_eq!(
            names,
            [
                "hetero.proj_drug",
                "hetero.proj_microbe",
                "hetero.block0.attn.w_query",
                "hetero.block0.attn.w_key",
                "hetero.block0.attn.w_value",
                "hetero.block0.attn.w_out",
                "hetero.block0.gnn.w_message",
                "hetero.block0.gnn.w_combine",
                "hetero.block0.sample.u",
            ]
        );
        assert!(cfg(6, 4, 1).validate().is_err());
    }
}
