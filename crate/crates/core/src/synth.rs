//! Synthetic datasets: a planted bipartite block model and a tiny
//! handcrafted toy set.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Drugs and microbes are split into `communities` contiguous blocks.
/// Same-community pairs associate with probability `p_in`, others with
/// `p_out`. Similarity is the community indicator plus `N(0, sigma_s)`
/// noise, clamped to [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_drugs: usize,
    pub n_microbes: usize,
    pub communities: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub sigma_s: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// 60 x 30 with three communities.
    pub fn planted() -> Self {
        Self {
            n_drugs: 60,
            n_microbes: 30,
            communities: 3,
            p_in: 0.6,
            p_out: 0.02,
            sigma_s: 0.1,
            seed: 0,
        }
    }

    /// Same shape as [`planted`](Self::planted) with no community signal in
    /// the associations.
    pub fn null() -> Self {
        Self {
            p_in: 0.2,
            p_out: 0.2,
            ..Self::planted()
        }
    }

    /// Six drugs by four microbes in two communities, small enough for
    /// finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            n_drugs: 6,
            n_microbes: 4,
            communities: 2,
            p_in: 0.8,
            p_out: 0.1,
            sigma_s: 0.1,
            seed: 0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_in", self.p_in), ("p_out", self.p_out)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be a probability, got {p}")));
            }
        }
        if !(self.sigma_s >= 0.0 && self.sigma_s.is_finite()) {
            return Err(Error::Config(format!("sigma_s must be nonnegative, got {}", self.sigma_s)));
        }
        if self.communities == 0 || self.n_drugs < self.communities || self.n_microbes < self.communities {
            return Err(Error::Config("each side needs at least one node per community".into()));
        }
        Ok(())
    }

    pub fn community(&self, index: usize, n: usize) -> usize {
        index * self.communities / n
    }
}

fn similarity(n: usize, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let noise = Normal::new(0.0, spec.sigma_s).map_err(|e| Error::Config(e.to_string()))?;
    let mut s = Matrix::identity(n);
    for i in 0..n {
        for j in 0..i {
            let same = if spec.community(i, n) == spec.community(j, n) { 1.0 } else { 0.0 };
            let v: f64 = (same + noise.sample(rng)).clamp(0.0, 1.0);
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    Ok(s)
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let (nd, nm) = (spec.n_drugs, spec.n_microbes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut assoc = Matrix::zeros(nd, nm);
    for d in 0..nd {
        for m in 0..nm {
            let p = if spec.community(d, nd) == spec.community(m, nm) { spec.p_in } else { spec.p_out };
            if rng.gen::<f64>() < p {
                assoc.set(d, m, 1.0);
            }
        }
    }
    let drug_sim = similarity(nd, spec, &mut rng)?;
    let microbe_sim = similarity(nm, spec, &mut rng)?;
    let drugs = (0..nd).map(|i| format!("drug{i:03}")).collect();
    let microbes = (0..nm).map(|i| format!("microbe{i:03}")).collect();
    Dataset::new(drugs, microbes, assoc, drug_sim, microbe_sim)
}

/// Handcrafted 8 drug x 5 microbe set: drugs 0-3 mostly hit microbes 0-2,
/// drugs 4-7 mostly hit microbes 3-4.
pub fn toy_dataset() -> Dataset {
    let assoc = Matrix::from_rows(&[
        [1.0, 1.0, 0.0, 0.0, 0.0],
        [1.0, 0.0, 1.0, 0.0, 0.0],
        [0.0, 1.0, 1.0, 0.0, 0.0],
        [1.0, 1.0, 1.0, 0.0, 1.0],
        [0.0, 0.0, 0.0, 1.0, 1.0],
        [0.0, 0.0, 0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0, 1.0, 1.0],
        [0.0, 0.0, 0.0, 0.0, 1.0],
    ])
    .expect("rectangular");
    let drug_sim = Matrix::from_rows(&[
        [1.0, 0.8, 0.7, 0.75, 0.1, 0.2, 0.15, 0.05],
        [0.8, 1.0, 0.65, 0.7, 0.2, 0.1, 0.1, 0.1],
        [0.7, 0.65, 1.0, 0.6, 0.15, 0.05, 0.3, 0.2],
        [0.75, 0.7, 0.6, 1.0, 0.25, 0.2, 0.35, 0.3],
        [0.1, 0.2, 0.15, 0.25, 1.0, 0.85, 0.7, 0.6],
        [0.2, 0.1, 0.05, 0.2, 0.85, 1.0, 0.65, 0.55],
        [0.15, 0.1, 0.3, 0.35, 0.7, 0.65, 1.0, 0.5],
        [0.05, 0.1, 0.2, 0.3, 0.6, 0.55, 0.5, 1.0],
    ])
    .expect("rectangular");
    let microbe_sim = Matrix::from_rows(&[
        [1.0, 0.7, 0.6, 0.1, 0.2],
        [0.7, 1.0, 0.65, 0.25, 0.15],
        [0.6, 0.65, 1.0, 0.05, 0.1],
        [0.1, 0.25, 0.05, 1.0, 0.75],
        [0.2, 0.15, 0.1, 0.75, 1.0],
    ])
    .expect("rectangular");
    let drugs = ["ciprofloxacin", "levofloxacin", "moxifloxacin", "norfloxacin", "vancomycin", "teicoplanin", "daptomycin", "linezolid"];
    let microbes = ["E_coli", "K_pneumoniae", "P_aeruginosa", "S_aureus", "E_faecalis"];
    Dataset::new(
        drugs.iter().map(|s| s.to_string()).collect(),
        microbes.iter().map(|s| s.to_string()).collect(),
        assoc,
        drug_sim,
        microbe_sim,
    )
    .expect("toy dataset is valid")
}
