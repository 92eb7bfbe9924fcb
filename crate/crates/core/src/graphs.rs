//! Similarity KNN graphs and the drug-microbe heterogeneous graph.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::numerics::{IndexTable, Matrix, SparseRows};

/// Directed k-nearest-neighbor graph over one node type. Every node links to
/// itself and to its `k` most similar other nodes.
#[derive(Clone, Debug)]
pub struct KnnGraph {
    k: usize,
    adjacency: Matrix,
    normalized: Matrix,
    propagation: Arc<SparseRows>,
}

impl KnnGraph {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.rows()
    }

    /// Binary adjacency with self loops.
    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    /// `D^-1/2 A D^-1/2` with row degrees.
    pub fn normalized(&self) -> &Matrix {
        &self.normalized
    }

    pub(crate) fn propagation(&self) -> &Arc<SparseRows> {
        &self.propagation
    }

    pub fn from_adjacency(adjacency: Matrix, k: usize) -> Result<Self> {
        let normalized = normalize_adjacency(&adjacency)?;
        let propagation = Arc::new(SparseRows::from_dense(&normalized));
        Ok(Self {
            k,
            adjacency,
            normalized,
            propagation,
        })
    }
}

/// Indices of the `k` most similar entries of row `i`, excluding `i`;
/// ties go to the smaller index.
fn top_k_excluding(row: &[f64], i: usize, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).filter(|&j| j != i).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn build_knn_graph(sim: &Matrix, k: usize) -> Result<KnnGraph> {
    let n = sim.rows();
    if sim.cols() != n {
        return Err(Error::dimension("knn graph", sim.shape(), (n, n)));
    }
    if k >= n.max(1) {
        return Err(Error::Config(format!("neighbor count {k} must be below the node count {n}")));
    }
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        a.set(i, i, 1.0);
        for j in top_k_excluding(sim.row(i), i, k) {
            a.set(i, j, 1.0);
        }
    }
    KnnGraph::from_adjacency(a, k)
}

/// `D^-1/2 A D^-1/2` where `D` holds the row sums of `A`.
pub fn normalize_adjacency(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dimension("normalize adjacency", a.shape(), (n, n)));
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    if let Some(i) = deg.iter().position(|&d| d <= 0.0) {
        return Err(Error::Data(format!("node {i} has zero degree")));
    }
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j);
            if v != 0.0 {
                out.set(i, j, v / (deg[i] * deg[j]).sqrt());
            }
        }
    }
    Ok(out)
}

/// Bipartite graph over `n_drugs + n_microbes` nodes (drugs first) whose
/// edges are the training associations.
#[derive(Clone, Debug)]
pub struct HeteroGraph {
    n_drugs: usize,
    n_microbes: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    initial_samples: IndexTable,
    mean_aggregation: Arc<SparseRows>,
    gcn_propagation: Arc<SparseRows>,
}

impl HeteroGraph {
    pub fn n_drugs(&self) -> usize {
        self.n_drugs
    }

    pub fn n_microbes(&self) -> usize {
        self.n_microbes
    }

    pub fn node_count(&self) -> usize {
        self.n_drugs + self.n_microbes
    }

    pub fn microbe_node(&self, microbe: usize) -> usize {
        self.n_drugs + microbe
    }

    pub fn is_drug(&self, node: usize) -> bool {
        node < self.n_drugs
    }

    /// Undirected `(drug node, microbe node)` edges.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn neighbor_lists(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    /// Attention sample sets before any update.
    pub fn initial_samples(&self) -> &IndexTable {
        &self.initial_samples
    }

    /// Row-stochastic neighbor averaging; isolated nodes have an empty row.
    pub(crate) fn mean_aggregation(&self) -> &Arc<SparseRows> {
        &self.mean_aggregation
    }

    /// Symmetric-normalized adjacency with self loops, for the GCN swap.
    pub(crate) fn gcn_propagation(&self) -> &Arc<SparseRows> {
        &self.gcn_propagation
    }

    /// Plain-text edge list, one `drug<TAB>microbe` pair per line.
    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for &(d, m) in &self.edges {
            writeln!(out, "{d}\t{}", m - self.n_drugs).unwrap();
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Builds the training heterogeneous graph. Initial sample sets are the
/// `s` most similar same-type nodes, padded with seeded random nodes of the
/// other type when a side has too few nodes.
pub fn build_hetero_graph(ds: &Dataset, plan: &SplitPlan, sample_size: usize, seed: u64) -> Result<HeteroGraph> {
    if sample_size == 0 {
        return Err(Error::Config("attention sample size must be at least 1".into()));
    }
    let (nd, nm) = (ds.n_drugs(), ds.n_microbes());
    let n = nd + nm;
    if n < 2 {
        return Err(Error::Data("heterogeneous graph needs at least two nodes".into()));
    }
    let mut neighbors = vec![Vec::new(); n];
    let mut edges = Vec::with_capacity(plan.train_positives.len());
    for p in &plan.train_positives {
        if p.drug >= nd || p.microbe >= nm {
            return Err(Error::Data(format!("edge ({}, {}) out of range", p.drug, p.microbe)));
        }
        let (u, v) = (p.drug, nd + p.microbe);
        edges.push((u, v));
        neighbors[u].push(v);
        neighbors[v].push(u);
    }
    for list in &mut neighbors {
        list.sort_unstable();
        list.dedup();
    }

    let width = sample_size.min(n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n * width);
    for node in 0..n {
        let (sim, local, offset, other_offset, other_count) = if node < nd {
            (ds.drug_sim(), node, 0, nd, nm)
        } else {
            (ds.microbe_sim(), node - nd, nd, 0, nd)
        };
        let same: Vec<usize> = top_k_excluding(sim.row(local), local, width)
            .into_iter()
            .map(|j| j + offset)
            .collect();
        let missing = width - same.len();
        samples.extend_from_slice(&same);
        if missing > 0 {
            let mut other: Vec<usize> = (other_offset..other_offset + other_count).collect();
            other.shuffle(&mut rng);
            samples.extend_from_slice(&other[..missing]);
        }
    }
    let initial_samples = IndexTable::new(width, samples)?;

    let mut mean = Matrix::zeros(n, n);
    for (i, list) in neighbors.iter().enumerate() {
        for &j in list {
            mean.set(i, j, 1.0 / list.len() as f64);
        }
    }
    let mut with_loops = Matrix::identity(n);
    for &(u, v) in &edges {
        with_loops.set(u, v, 1.0);
        with_loops.set(v, u, 1.0);
    }

    Ok(HeteroGraph {
        n_drugs: nd,
        n_microbes: nm,
        edges,
        neighbors,
        initial_samples,
        mean_aggregation: Arc::new(SparseRows::from_dense(&mean)),
        gcn_propagation: Arc::new(SparseRows::from_dense(&normalize_adjacency(&with_loops)?)),
    })
}
