//! Association and similarity matrices, train/test splits and negative sampling.

use std::borrow::Cow;
use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Similarity asymmetry up to this size is averaged away on load.
pub const SYMMETRY_REPAIR_TOLERANCE: f64 = 1e-6;
/// Similarity entries may exceed `[0, 1]` by at most this much.
pub const RANGE_TOLERANCE: f64 = 1e-6;

/// A (drug, microbe) index pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub drug: usize,
    pub microbe: usize,
}

impl Pair {
    pub fn new(drug: usize, microbe: usize) -> Self {
        Self { drug, microbe }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Drug,
    Microbe,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Drug => Side::Microbe,
            Side::Microbe => Side::Drug,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Drug => "drug",
            Side::Microbe => "microbe",
        })
    }
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drug" => Ok(Side::Drug),
            "microbe" => Ok(Side::Microbe),
            other => Err(Error::Config(format!("unknown side {other:?}"))),
        }
    }
}

/// Drug-microbe associations together with both similarity views.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    drug_names: Vec<String>,
    microbe_names: Vec<String>,
    associations: Matrix,
    drug_sim: Matrix,
    microbe_sim: Matrix,
    /// Sides whose similarity is rebuilt from training associations per split.
    profile_sides: Vec<Side>,
}

impl Dataset {
    /// Validates and assembles a dataset. Similarity matrices with small
    /// asymmetries or range excursions are repaired; larger ones are rejected.
    pub fn new(
        drug_names: Vec<String>,
        microbe_names: Vec<String>,
        associations: Matrix,
        drug_sim: Matrix,
        microbe_sim: Matrix,
    ) -> Result<Self> {
        let (nd, nm) = associations.shape();
        if drug_names.len() != nd || microbe_names.len() != nm {
            return Err(Error::Data(format!(
                "association matrix is {nd}x{nm} but {} drug and {} microbe names were given",
                drug_names.len(),
                microbe_names.len()
            )));
        }
        if let Some(v) = associations.as_slice().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("association entries must be 0 or 1, found {v}")));
        }
        let drug_sim = validate_similarity("drug", drug_sim, nd)?;
        let microbe_sim = validate_similarity("microbe", microbe_sim, nm)?;
        Ok(Self {
            drug_names,
            microbe_names,
            associations,
            drug_sim,
            microbe_sim,
            profile_sides: Vec::new(),
        })
    }

    /// Loads the three matrix files described in the README.
    pub fn load(assoc_path: &Path, drug_sim_path: &Path, microbe_sim_path: &Path) -> Result<Self> {
        let (drugs, microbes, assoc) = load_associations(assoc_path)?;
        let drug_sim = load_similarity(drug_sim_path, &drugs)?;
        let microbe_sim = load_similarity(microbe_sim_path, &microbes)?;
        Self::new(drugs, microbes, assoc, drug_sim, microbe_sim)
    }

    /// Like [`load`](Self::load), but a side without a similarity file gets
    /// Gaussian interaction-profile similarity computed from each split's
    /// training associations (see [`for_plan`](Self::for_plan)). Until a
    /// split is applied that side holds the kernel of all associations.
    pub fn load_with_fallback(assoc_path: &Path, drug_sim_path: Option<&Path>, microbe_sim_path: Option<&Path>) -> Result<Self> {
        let (drugs, microbes, assoc) = load_associations(assoc_path)?;
        let (kd, km) = profile_similarity(&assoc);
        let drug_sim = drug_sim_path.map(|p| load_similarity(p, &drugs)).transpose()?;
        let microbe_sim = microbe_sim_path.map(|p| load_similarity(p, &microbes)).transpose()?;
        let mut profile_sides = Vec::new();
        if drug_sim.is_none() {
            profile_sides.push(Side::Drug);
        }
        if microbe_sim.is_none() {
            profile_sides.push(Side::Microbe);
        }
        let mut ds = Self::new(drugs, microbes, assoc, drug_sim.unwrap_or(kd), microbe_sim.unwrap_or(km))?;
        ds.profile_sides = profile_sides;
        Ok(ds)
    }

    /// Whether `side` uses similarity derived from training associations.
    pub fn uses_profile_similarity(&self, side: Side) -> bool {
        self.profile_sides.contains(&side)
    }

    /// The dataset a model trained on `plan` sees: profile-derived sides are
    /// recomputed from the plan's training positives only, so held-out
    /// associations never shape the similarity views.
    pub fn for_plan(&self, plan: &SplitPlan) -> Result<Cow<'_, Dataset>> {
        if self.profile_sides.is_empty() {
            return Ok(Cow::Borrowed(self));
        }
        let train = plan.train_association_matrix(self.n_drugs(), self.n_microbes());
        let (kd, km) = profile_similarity(&train);
        let mut out = self.clone();
        if self.uses_profile_similarity(Side::Drug) {
            out.drug_sim = validate_similarity("drug", kd, self.n_drugs())?;
        }
        if self.uses_profile_similarity(Side::Microbe) {
            out.microbe_sim = validate_similarity("microbe", km, self.n_microbes())?;
        }
        Ok(Cow::Owned(out))
    }

    pub fn n_drugs(&self) -> usize {
        self.associations.rows()
    }

    pub fn n_microbes(&self) -> usize {
        self.associations.cols()
    }

    pub fn count(&self, side: Side) -> usize {
        match side {
            Side::Drug => self.n_drugs(),
            Side::Microbe => self.n_microbes(),
        }
    }

    pub fn drug_names(&self) -> &[String] {
        &self.drug_names
    }

    pub fn microbe_names(&self) -> &[String] {
        &self.microbe_names
    }

    pub fn names(&self, side: Side) -> &[String] {
        match side {
            Side::Drug => &self.drug_names,
            Side::Microbe => &self.microbe_names,
        }
    }

    pub fn associations(&self) -> &Matrix {
        &self.associations
    }

    pub fn drug_sim(&self) -> &Matrix {
        &self.drug_sim
    }

    pub fn microbe_sim(&self) -> &Matrix {
        &self.microbe_sim
    }

    pub fn similarity(&self, side: Side) -> &Matrix {
        match side {
            Side::Drug => &self.drug_sim,
            Side::Microbe => &self.microbe_sim,
        }
    }

    pub fn is_associated(&self, p: Pair) -> bool {
        self.associations.get(p.drug, p.microbe) == 1.0
    }

    /// Known associations in row-major order.
    pub fn positives(&self) -> Vec<Pair> {
        self.pairs_where(|v| v == 1.0)
    }

    /// Unobserved pairs in row-major order.
    pub fn non_associated(&self) -> Vec<Pair> {
        self.pairs_where(|v| v == 0.0)
    }

    fn pairs_where(&self, keep: impl Fn(f64) -> bool) -> Vec<Pair> {
        let mut out = Vec::new();
        for d in 0..self.n_drugs() {
            for (m, &v) in self.associations.row(d).iter().enumerate() {
                if keep(v) {
                    out.push(Pair::new(d, m));
                }
            }
        }
        out
    }

    /// Same associations, similarity views replaced.
    pub fn with_similarities(&self, drug_sim: Matrix, microbe_sim: Matrix) -> Result<Self> {
        Self::new(
            self.drug_names.clone(),
            self.microbe_names.clone(),
            self.associations.clone(),
            drug_sim,
            microbe_sim,
        )
    }

    /// Writes the association and similarity files into `dir`
    /// (`associations.tsv`, `drug_similarity.tsv`, `microbe_similarity.tsv`).
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_matrix(&dir.join("associations.tsv"), &self.drug_names, &self.microbe_names, &self.associations)?;
        write_matrix(&dir.join("drug_similarity.tsv"), &self.drug_names, &self.drug_names, &self.drug_sim)?;
        write_matrix(
            &dir.join("microbe_similarity.tsv"),
            &self.microbe_names,
            &self.microbe_names,
            &self.microbe_sim,
        )
    }
}

fn validate_similarity(side: &str, mut sim: Matrix, n: usize) -> Result<Matrix> {
    if sim.shape() != (n, n) {
        return Err(Error::Data(format!(
            "{side} similarity is {}x{} but {n} {side}s are present",
            sim.rows(),
            sim.cols()
        )));
    }
    for i in 0..n {
        for j in 0..n {
            let v = sim.get(i, j);
            if !v.is_finite() || v < -RANGE_TOLERANCE || v > 1.0 + RANGE_TOLERANCE {
                return Err(Error::Data(format!("{side} similarity ({i},{j}) = {v} outside [0,1]")));
            }
        }
        if (sim.get(i, i) - 1.0).abs() > RANGE_TOLERANCE {
            return Err(Error::Data(format!(
                "{side} similarity diagonal ({i},{i}) = {} is not 1",
                sim.get(i, i)
            )));
        }
    }
    for i in 0..n {
        sim.set(i, i, 1.0);
        for j in (i + 1)..n {
            let (a, b) = (sim.get(i, j), sim.get(j, i));
            if (a - b).abs() > SYMMETRY_REPAIR_TOLERANCE {
                return Err(Error::Data(format!(
                    "{side} similarity is not symmetric at ({i},{j}): {a} vs {b}"
                )));
            }
            let v = (0.5 * (a + b)).clamp(0.0, 1.0);
            sim.set(i, j, v);
            sim.set(j, i, v);
        }
    }
    Ok(sim)
}

/// Parsed labelled matrix: row names, column names, values.
type LabelledMatrix = (Vec<String>, Vec<String>, Matrix);

fn read_labelled(path: &Path) -> Result<LabelledMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().next().ok_or_else(|| Error::format(path, "empty file"))?;
    let delimiter = if first.contains('\t') { b'\t' } else { b',' };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::format(path, e.to_string()))?;
    let cols: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    let mut data = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        if record.len() != cols.len() + 1 {
            return Err(Error::format(
                path,
                format!("row {} has {} cells, expected {}", line + 1, record.len(), cols.len() + 1),
            ));
        }
        rows.push(record[0].trim().to_string());
        for cell in record.iter().skip(1) {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("row {}: {cell:?} is not a number", line + 1)))?;
            data.push(v);
        }
    }
    let m = Matrix::from_vec(rows.len(), cols.len(), data)?;
    Ok((rows, cols, m))
}

/// Reads an association file: header of microbe names, first column of drug
/// names, 0/1 cells.
pub fn load_associations(path: &Path) -> Result<LabelledMatrix> {
    let (drugs, microbes, m) = read_labelled(path)?;
    if let Some(v) = m.as_slice().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data(format!(
            "{}: association entries must be 0 or 1, found {v}",
            path.display()
        )));
    }
    Ok((drugs, microbes, m))
}

/// Reads a square similarity file whose header and first column must list
/// `names` in order.
pub fn load_similarity(path: &Path, names: &[String]) -> Result<Matrix> {
    let (rows, cols, m) = read_labelled(path)?;
    if rows.len() != names.len() || cols.len() != names.len() {
        return Err(Error::Data(format!(
            "{} is {}x{} but the association file lists {} names",
            path.display(),
            rows.len(),
            cols.len(),
            names.len()
        )));
    }
    if rows != names || cols != names {
        return Err(Error::Data(format!(
            "{}: node names do not match the association file",
            path.display()
        )));
    }
    Ok(m)
}

/// Writes a labelled TSV matrix. Integral values are written without a
/// fractional part; others use the shortest round-tripping form.
pub fn write_matrix(path: &Path, row_names: &[String], col_names: &[String], m: &Matrix) -> Result<()> {
    let mut out = String::new();
    out.push_str("id");
    for c in col_names {
        out.push('\t');
        out.push_str(c);
    }
    out.push('\n');
    for (i, r) in row_names.iter().enumerate() {
        out.push_str(r);
        for &v in m.row(i) {
            out.push('\t');
            if v.fract() == 0.0 && v.abs() < 1e15 {
                out.push_str(&format!("{}", v as i64));
            } else {
                out.push_str(&format!("{v}"));
            }
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Gaussian interaction-profile kernels from an association matrix:
/// `exp(-g * |p_i - p_j|^2)` with `g = 1 / mean(|p_i|^2)`.
/// Returns `(drug_similarity, microbe_similarity)`.
pub fn profile_similarity(assoc: &Matrix) -> (Matrix, Matrix) {
    (gaussian_profile_kernel(assoc), gaussian_profile_kernel(&assoc.transpose()))
}

fn gaussian_profile_kernel(profiles: &Matrix) -> Matrix {
    let n = profiles.rows();
    let sq_norm = |i: usize| profiles.row(i).iter().map(|v| v * v).sum::<f64>();
    let mean_sq = (0..n).map(sq_norm).sum::<f64>() / n.max(1) as f64;
    let bandwidth = if mean_sq > 0.0 { 1.0 / mean_sq } else { 1.0 };
    let mut k = Matrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = profiles
                .row(i)
                .iter()
                .zip(profiles.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let v = (-bandwidth * d2).exp();
            k.set(i, j, v);
            k.set(j, i, v);
        }
    }
    k
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    Warm,
    ColdStartDrug,
    ColdStartMicrobe,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::Warm => "warm",
            SplitMode::ColdStartDrug => "cold-start-drug",
            SplitMode::ColdStartMicrobe => "cold-start-microbe",
        })
    }
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warm" => Ok(SplitMode::Warm),
            "cold-start-drug" => Ok(SplitMode::ColdStartDrug),
            "cold-start-microbe" => Ok(SplitMode::ColdStartMicrobe),
            other => Err(Error::Config(format!("unknown split mode {other:?}"))),
        }
    }
}

/// How test negatives are drawn in a warm split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestNegatives {
    /// One sampled negative per test positive.
    #[default]
    Balanced,
    /// The same held-out fraction of all unobserved pairs (natural prevalence).
    All,
}

impl FromStr for TestNegatives {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(TestNegatives::Balanced),
            "all" => Ok(TestNegatives::All),
            other => Err(Error::Config(format!("unknown test-negative protocol {other:?}"))),
        }
    }
}

impl fmt::Display for TestNegatives {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestNegatives::Balanced => "balanced",
            TestNegatives::All => "all",
        })
    }
}

/// Disjoint train/test positive and negative pair sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub seed: u64,
    pub train_positives: Vec<Pair>,
    pub train_negatives: Vec<Pair>,
    pub test_positives: Vec<Pair>,
    pub test_negatives: Vec<Pair>,
    /// Nodes withheld entirely from training (cold start only).
    pub held_out: Vec<usize>,
    /// Set when the plan has no test positives.
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairLabel {
    TrainPos,
    TrainNeg,
    TestPos,
    TestNeg,
}

impl PairLabel {
    fn as_str(self) -> &'static str {
        match self {
            PairLabel::TrainPos => "trainPos",
            PairLabel::TrainNeg => "trainNeg",
            PairLabel::TestPos => "testPos",
            PairLabel::TestNeg => "testNeg",
        }
    }
}

impl SplitPlan {
    /// Positive-class weight: train negatives per train positive.
    pub fn class_ratio(&self) -> f64 {
        if self.train_positives.is_empty() {
            1.0
        } else {
            self.train_negatives.len() as f64 / self.train_positives.len() as f64
        }
    }

    /// Training pairs (positives first) with their 0/1 labels.
    pub fn train_pairs(&self) -> (Vec<Pair>, Vec<f64>) {
        labelled(&self.train_positives, &self.train_negatives)
    }

    /// Test pairs (positives first) with their 0/1 labels.
    pub fn test_pairs(&self) -> (Vec<Pair>, Vec<f64>) {
        labelled(&self.test_positives, &self.test_negatives)
    }

    /// Binary matrix of training positives only.
    pub fn train_association_matrix(&self, n_drugs: usize, n_microbes: usize) -> Matrix {
        let mut m = Matrix::zeros(n_drugs, n_microbes);
        for p in &self.train_positives {
            m.set(p.drug, p.microbe, 1.0);
        }
        m
    }

    fn sets(&self) -> [(&[Pair], PairLabel); 4] {
        [
            (&self.train_positives, PairLabel::TrainPos),
            (&self.train_negatives, PairLabel::TrainNeg),
            (&self.test_positives, PairLabel::TestPos),
            (&self.test_negatives, PairLabel::TestNeg),
        ]
    }

    /// True when no pair appears in more than one of the four sets.
    pub fn is_disjoint(&self) -> bool {
        let mut seen = HashSet::new();
        self.sets()
            .iter()
            .flat_map(|(s, _)| s.iter())
            .all(|p| seen.insert(*p))
    }

    /// Line-oriented export: `drug<TAB>microbe<TAB>label`, preceded by
    /// `#`-comment metadata lines.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let held: Vec<String> = self.held_out.iter().map(ToString::to_string).collect();
        writeln!(out, "# mode={}", self.mode).unwrap();
        writeln!(out, "# seed={}", self.seed).unwrap();
        writeln!(out, "# held_out={}", held.join(",")).unwrap();
        for (set, label) in self.sets() {
            for p in set {
                writeln!(out, "{}\t{}\t{}", p.drug, p.microbe, label.as_str()).unwrap();
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut plan = SplitPlan {
            mode: SplitMode::Warm,
            seed: 0,
            train_positives: Vec::new(),
            train_negatives: Vec::new(),
            test_positives: Vec::new(),
            test_negatives: Vec::new(),
            held_out: Vec::new(),
            degenerate: false,
        };
        for (n, line) in text.lines().enumerate() {
            let bad = |why: &str| Error::format(path, format!("line {}: {why}", n + 1));
            if let Some(meta) = line.strip_prefix('#') {
                let (key, value) = meta.trim().split_once('=').ok_or_else(|| bad("expected key=value"))?;
                match key {
                    "mode" => plan.mode = value.parse().map_err(|_| bad("unknown mode"))?,
                    "seed" => plan.seed = value.parse().map_err(|_| bad("bad seed"))?,
                    "held_out" if !value.is_empty() => {
                        plan.held_out = value
                            .split(',')
                            .map(str::parse)
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| bad("bad held_out list"))?;
                    }
                    _ => {}
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad("expected three tab-separated fields"));
            }
            let drug = fields[0].parse().map_err(|_| bad("bad drug index"))?;
            let microbe = fields[1].parse().map_err(|_| bad("bad microbe index"))?;
            let pair = Pair::new(drug, microbe);
            match fields[2] {
                "trainPos" => plan.train_positives.push(pair),
                "trainNeg" => plan.train_negatives.push(pair),
                "testPos" => plan.test_positives.push(pair),
                "testNeg" => plan.test_negatives.push(pair),
                _ => return Err(bad("unknown label")),
            }
        }
        plan.degenerate = plan.test_positives.is_empty();
        Ok(plan)
    }

    /// Checks the plan against a dataset: indices in range, labels agree
    /// with the association matrix, sets disjoint.
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        for (set, label) in self.sets() {
            for p in set {
                if p.drug >= ds.n_drugs() || p.microbe >= ds.n_microbes() {
                    return Err(Error::Data(format!("split pair ({}, {}) out of range", p.drug, p.microbe)));
                }
                let positive = matches!(label, PairLabel::TrainPos | PairLabel::TestPos);
                if ds.is_associated(*p) != positive {
                    return Err(Error::Data(format!(
                        "split labels ({}, {}) as {} but the association matrix disagrees",
                        p.drug,
                        p.microbe,
                        label.as_str()
                    )));
                }
            }
        }
        if !self.is_disjoint() {
            return Err(Error::Data("split pair sets overlap".into()));
        }
        Ok(())
    }
}

fn labelled(pos: &[Pair], neg: &[Pair]) -> (Vec<Pair>, Vec<f64>) {
    let pairs: Vec<Pair> = pos.iter().chain(neg).copied().collect();
    let labels = pos.iter().map(|_| 1.0).chain(neg.iter().map(|_| 0.0)).collect();
    (pairs, labels)
}

/// Holds out `test_fraction` of the known associations (floor, clamped so
/// both sides keep at least one) plus test negatives per `negatives`.
/// Every remaining unobserved pair becomes a training negative.
pub fn warm_split(ds: &Dataset, test_fraction: f64, seed: u64, negatives: TestNegatives) -> Result<SplitPlan> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} must lie in (0, 1)")));
    }
    let mut positives = ds.positives();
    if positives.len() < 2 {
        return Err(Error::Data(format!(
            "a warm split needs at least 2 known associations, found {}",
            positives.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    positives.shuffle(&mut rng);
    let n_test = floor_count(test_fraction, positives.len()).clamp(1, positives.len() - 1);
    let mut test_positives = positives[..n_test].to_vec();
    let mut train_positives = positives[n_test..].to_vec();

    let mut unobserved = ds.non_associated();
    unobserved.shuffle(&mut rng);
    let n_neg = match negatives {
        TestNegatives::Balanced => n_test,
        TestNegatives::All => floor_count(test_fraction, unobserved.len()).max(1),
    }
    .min(unobserved.len());
    let mut test_negatives = unobserved[..n_neg].to_vec();
    let mut train_negatives = unobserved[n_neg..].to_vec();

    for v in [&mut test_positives, &mut train_positives, &mut test_negatives, &mut train_negatives] {
        v.sort_unstable();
    }
    Ok(SplitPlan {
        mode: SplitMode::Warm,
        seed,
        degenerate: test_positives.is_empty(),
        train_positives,
        train_negatives,
        test_positives,
        test_negatives,
        held_out: Vec::new(),
    })
}

/// Number of nodes a cold-start split withholds: `ceil(fraction * n)`, at least 1.
pub fn cold_start_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

fn floor_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Seeded choice of `count` distinct nodes out of `n` (partial Fisher-Yates),
/// returned sorted.
pub fn choose_nodes(n: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut chosen = idx[..count].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Withholds `ceil(node_fraction * count)` nodes of one side: all their
/// associations become test positives and none of their pairs are trained on.
/// Test negatives are drawn from the withheld nodes' unobserved pairs, one per
/// test positive.
pub fn cold_start_split(ds: &Dataset, side: Side, node_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if !(node_fraction > 0.0 && node_fraction < 1.0) {
        return Err(Error::Config(format!("node fraction {node_fraction} must lie in (0, 1)")));
    }
    let n = ds.count(side);
    if n == 0 {
        return Err(Error::Data(format!("dataset has no {side}s")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let held = choose_nodes(n, cold_start_count(node_fraction, n), &mut rng);
    let mut is_held = vec![false; n];
    for &h in &held {
        is_held[h] = true;
    }
    let touches = |p: &Pair| match side {
        Side::Drug => is_held[p.drug],
        Side::Microbe => is_held[p.microbe],
    };

    let positives = ds.positives();
    let (test_positives, train_positives): (Vec<Pair>, Vec<Pair>) = positives.iter().partition(|p| touches(p));
    if !positives.is_empty() && train_positives.is_empty() {
        return Err(Error::Data(format!(
            "withheld {side}s cover every known association; nothing is left to train on"
        )));
    }
    let (mut held_unobserved, train_negatives): (Vec<Pair>, Vec<Pair>) =
        ds.non_associated().into_iter().partition(|p| touches(p));
    held_unobserved.shuffle(&mut rng);
    let n_neg = test_positives.len().min(held_unobserved.len());
    let mut test_negatives = held_unobserved[..n_neg].to_vec();
    test_negatives.sort_unstable();

    Ok(SplitPlan {
        mode: match side {
            Side::Drug => SplitMode::ColdStartDrug,
            Side::Microbe => SplitMode::ColdStartMicrobe,
        },
        seed,
        degenerate: test_positives.is_empty(),
        train_positives,
        train_negatives,
        test_positives,
        test_negatives,
        held_out: held,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    /// `n_d x n_m` dataset whose first `positives` row-major cells are associated.
    fn dataset(n_d: usize, n_m: usize, positives: usize) -> Dataset {
        let mut a = Matrix::zeros(n_d, n_m);
        for k in 0..positives {
            a.as_mut_slice()[k] = 1.0;
        }
        Dataset::new(names("d", n_d), names("m", n_m), a, Matrix::identity(n_d), Matrix::identity(n_m)).unwrap()
    }

    #[test]
    fn empty_graph_dataset_is_valid() {
        let ds = Dataset::new(
            names("d", 2),
            names("m", 2),
            Matrix::zeros(2, 2),
            Matrix::identity(2),
            Matrix::identity(2),
        )
        .unwrap();
        assert!(ds.positives().is_empty());
    }

    #[test]
    fn non_binary_association_rejected() {
        let mut a = Matrix::zeros(2, 2);
        a.set(0, 1, 0.5);
        let err = Dataset::new(names("d", 2), names("m", 2), a, Matrix::identity(2), Matrix::identity(2)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn small_asymmetry_is_averaged_large_rejected() {
        let mut s = Matrix::identity(2);
        s.set(0, 1, 0.5);
        s.set(1, 0, 0.5 + 5e-7);
        let ds = Dataset::new(names("d", 2), names("m", 1), Matrix::zeros(2, 1), s.clone(), Matrix::identity(1)).unwrap();
        assert_eq!(ds.drug_sim().get(0, 1), ds.drug_sim().get(1, 0));
        s.set(1, 0, 0.6);
        assert!(Dataset::new(names("d", 2), names("m", 1), Matrix::zeros(2, 1), s, Matrix::identity(1)).is_err());
    }

    #[test]
    fn similarity_out_of_range_rejected() {
        let mut s = Matrix::identity(2);
        s.set(0, 1, 1.1);
        s.set(1, 0, 1.1);
        assert!(Dataset::new(names("d", 2), names("m", 1), Matrix::zeros(2, 1), s, Matrix::identity(1)).is_err());
    }

    #[test]
    fn warm_split_counts() {
        let ds = dataset(20, 10, 100);
        let plan = warm_split(&ds, 0.1, 3, TestNegatives::Balanced).unwrap();
        assert_eq!(plan.test_positives.len(), 10);
        assert_eq!(plan.test_negatives.len(), 10);
        assert_eq!(plan.train_positives.len(), 90);
        assert_eq!(plan.train_negatives.len(), 200 - 100 - 10);
        assert!(plan.is_disjoint());
        plan.validate(&ds).unwrap();
    }

    #[test]
    fn warm_split_floor_semantics() {
        // floor(0.999 * 100) = 99 by enumeration of the arithmetic
        let expected = (1..=100).filter(|k| (*k as f64) <= 0.999 * 100.0).count();
        assert_eq!(expected, 99);
        let ds = dataset(20, 10, 100);
        let plan = warm_split(&ds, 0.999, 3, TestNegatives::Balanced).unwrap();
        assert_eq!(plan.test_positives.len(), expected);
        assert_eq!(plan.train_positives.len(), 1);
    }

    #[test]
    fn warm_split_is_deterministic() {
        let ds = dataset(20, 10, 100);
        let a = warm_split(&ds, 0.1, 42, TestNegatives::Balanced).unwrap();
        let b = warm_split(&ds, 0.1, 42, TestNegatives::Balanced).unwrap();
        assert_eq!(a, b);
        let c = warm_split(&ds, 0.1, 43, TestNegatives::Balanced).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn warm_split_needs_two_positives() {
        let ds = dataset(3, 3, 1);
        assert!(warm_split(&ds, 0.1, 0, TestNegatives::Balanced).is_err());
        assert!(warm_split(&dataset(3, 3, 4), 1.0, 0, TestNegatives::Balanced).is_err());
    }

    #[test]
    fn all_negative_protocol_keeps_natural_prevalence() {
        let ds = dataset(20, 10, 100);
        let plan = warm_split(&ds, 0.1, 3, TestNegatives::All).unwrap();
        assert_eq!(plan.test_negatives.len(), 10);
        let ds = dataset(20, 10, 20);
        let plan = warm_split(&ds, 0.1, 3, TestNegatives::All).unwrap();
        assert_eq!(plan.test_positives.len(), 2);
        assert_eq!(plan.test_negatives.len(), 18);
        assert!(plan.is_disjoint());
    }

    #[test]
    fn cold_start_count_matches_ceiling() {
        assert_eq!(cold_start_count(0.02, 1373), 28);
        assert_eq!(cold_start_count(0.04, 1373), 55);
        assert_eq!(cold_start_count(0.02, 173), 4);
        assert_eq!(cold_start_count(0.5, 4), 2);
    }

    #[test]
    fn cold_start_selection_matches_seeded_enumeration() {
        // Brute force: replay the seeded stream over all C(4,2) subsets and
        // confirm the chosen one is the one the draws select.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let first = rng.gen_range(0..4usize);
        let second = rng.gen_range(1..4usize);
        let mut order = [0usize, 1, 2, 3];
        order.swap(0, first);
        order.swap(1, second);
        let mut expected = vec![order[0], order[1]];
        expected.sort_unstable();
        let candidates: Vec<Vec<usize>> = (0..4).flat_map(|a| ((a + 1)..4).map(move |b| vec![a, b])).collect();
        assert!(candidates.contains(&expected));

        let mut a = Matrix::filled(4, 3, 0.0);
        for d in 0..4 {
            a.set(d, d % 3, 1.0);
        }
        let ds = Dataset::new(names("d", 4), names("m", 3), a, Matrix::identity(4), Matrix::identity(3)).unwrap();
        let plan = cold_start_split(&ds, Side::Drug, 0.5, 11).unwrap();
        assert_eq!(plan.held_out, expected);
        assert_eq!(plan.held_out, vec![0, 1]);
    }

    #[test]
    fn cold_start_isolates_held_out_nodes() {
        let ds = dataset(10, 6, 30);
        let plan = cold_start_split(&ds, Side::Drug, 0.2, 5).unwrap();
        assert_eq!(plan.held_out.len(), 2);
        for p in plan.train_positives.iter().chain(&plan.train_negatives) {
            assert!(!plan.held_out.contains(&p.drug));
        }
        for p in plan.test_positives.iter().chain(&plan.test_negatives) {
            assert!(plan.held_out.contains(&p.drug));
        }
        assert!(plan.is_disjoint());
        plan.validate(&ds).unwrap();
    }

    #[test]
    fn cold_start_degenerate_when_node_has_no_associations() {
        // microbe 1 has no associations; pick a seed that selects it
        let mut a = Matrix::zeros(4, 2);
        for d in 0..4 {
            a.set(d, 0, 1.0);
        }
        let ds = Dataset::new(names("d", 4), names("m", 2), a, Matrix::identity(4), Matrix::identity(2)).unwrap();
        let seed = (0..100)
            .find(|&s| cold_start_split(&ds, Side::Microbe, 0.3, s).map(|p| p.held_out == vec![1]).unwrap_or(false))
            .unwrap();
        let plan = cold_start_split(&ds, Side::Microbe, 0.3, seed).unwrap();
        assert!(plan.test_positives.is_empty());
        assert!(plan.degenerate);
    }

    #[test]
    fn cold_start_covering_all_positives_is_an_error() {
        let mut a = Matrix::zeros(4, 2);
        for d in 0..4 {
            a.set(d, 0, 1.0);
        }
        let ds = Dataset::new(names("d", 4), names("m", 2), a, Matrix::identity(4), Matrix::identity(2)).unwrap();
        let seed = (0..100)
            .find(|&s| cold_start_split(&ds, Side::Microbe, 0.3, s).map(|p| p.held_out == vec![1]).unwrap_or(false))
            .unwrap();
        // any seed selecting microbe 0 withholds every association
        let covering = (0..100).find(|&s| s != seed && cold_start_split(&ds, Side::Microbe, 0.3, s).is_err());
        assert!(covering.is_some());
    }

    #[test]
    fn split_file_round_trip() {
        let ds = dataset(10, 6, 30);
        let plan = cold_start_split(&ds, Side::Microbe, 0.2, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.tsv");
        plan.write(&path).unwrap();
        assert_eq!(SplitPlan::read(&path).unwrap(), plan);
    }

    #[test]
    fn dataset_file_round_trip() {
        let mut s = Matrix::identity(3);
        s.set(0, 2, 0.125);
        s.set(2, 0, 0.125);
        let ds = Dataset::new(names("d", 3), names("m", 2), Matrix::filled(3, 2, 1.0), s, Matrix::identity(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_dir(dir.path()).unwrap();
        let back = Dataset::load(
            &dir.path().join("associations.tsv"),
            &dir.path().join("drug_similarity.tsv"),
            &dir.path().join("microbe_similarity.tsv"),
        )
        .unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn csv_files_and_name_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let assoc = dir.path().join("a.csv");
        fs::write(&assoc, "x,m0,m1\nd0,1,0\nd1,0,1\n").unwrap();
        let sim = dir.path().join("s.csv");
        fs::write(&sim, "x,d0,d1\nd0,1,0.2\nd1,0.2,1\n").unwrap();
        let msim = dir.path().join("ms.csv");
        fs::write(&msim, "x,m0,mX\nm0,1,0\nmX,0,1\n").unwrap();
        assert!(matches!(Dataset::load(&assoc, &sim, &msim), Err(Error::Data(_))));
        fs::write(&msim, "x,m0,m1\nm0,1,0\nm1,0,1\n").unwrap();
        let ds = Dataset::load(&assoc, &sim, &msim).unwrap();
        assert_eq!(ds.positives(), vec![Pair::new(0, 0), Pair::new(1, 1)]);
        fs::write(&assoc, "x,m0,m1\nd0,0.5,0\nd1,0,1\n").unwrap();
        assert!(matches!(Dataset::load(&assoc, &sim, &msim), Err(Error::Data(_))));
    }

    #[test]
    fn profile_kernel_properties() {
        let a = Matrix::from_rows(&[[1.0, 0.0, 1.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]).unwrap();
        let (kd, km) = profile_similarity(&a);
        assert_eq!(kd.get(0, 1), 1.0);
        // mean squared norm = (2 + 2 + 1) / 3, distance^2(0,2) = 3
        let expected = (-(3.0 / 5.0) * 3.0f64).exp();
        assert!((kd.get(0, 2) - expected).abs() < 1e-15);
        assert_eq!(km.shape(), (3, 3));
        for i in 0..3 {
            assert_eq!(kd.get(i, i), 1.0);
        }
        let (kz, _) = profile_similarity(&Matrix::zeros(2, 2));
        assert_eq!(kz, Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn missing_similarity_falls_back_to_training_profiles() {
        let dir = tempfile::tempdir().unwrap();
        let toy = crate::synth::toy_dataset();
        toy.write_dir(dir.path()).unwrap();
        let assoc = dir.path().join("associations.tsv");
        let microbe = dir.path().join("microbe_similarity.tsv");
        let ds = Dataset::load_with_fallback(&assoc, None, Some(&microbe)).unwrap();
        assert!(ds.uses_profile_similarity(Side::Drug) && !ds.uses_profile_similarity(Side::Microbe));
        assert_eq!(ds.microbe_sim(), toy.microbe_sim());
        assert_eq!(*ds.drug_sim(), profile_similarity(toy.associations()).0);

        let plan = warm_split(&ds, 0.3, 1, TestNegatives::Balanced).unwrap();
        let seen = ds.for_plan(&plan).unwrap();
        let train = plan.train_association_matrix(ds.n_drugs(), ds.n_microbes());
        assert_eq!(*seen.drug_sim(), profile_similarity(&train).0);
        assert_eq!(seen.microbe_sim(), toy.microbe_sim());
        // the test positives change nothing once removed from the matrix
        let mut leaked = ds.associations().clone();
        for p in &plan.test_positives {
            leaked.set(p.drug, p.microbe, 0.0);
        }
        assert_eq!(profile_similarity(&leaked).0, *seen.drug_sim());

        let both = Dataset::load(&assoc, &dir.path().join("drug_similarity.tsv"), &microbe).unwrap();
        assert!(matches!(both.for_plan(&plan).unwrap(), Cow::Borrowed(_)));
    }
}
