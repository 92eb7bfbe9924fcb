//! Margin losses between association-view and similarity-view embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialMode {
    /// `mean max(0, gamma - D)`: push the views at least `gamma` apart.
    #[default]
    Diverge,
    /// `mean max(0, D - gamma)`: pull the views together instead.
    Close,
}

pub fn pair_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dimension("pair distance", (1, a.len()), (1, b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Mean hinge over row-aligned distances `D_i = ||z1_i - z2_i||`.
pub fn adversarial_loss(g: &mut Graph, z1: Var, z2: Var, gamma: f64, mode: AdversarialMode) -> Result<Var> {
    if gamma < 0.0 {
        return Err(Error::Config(format!("margin must be nonnegative, got {gamma}")));
    }
    let diff = g.sub(z1, z2)?;
    let dist = g.row_norm(diff);
    let gap = match mode {
        AdversarialMode::Diverge => {
            let neg = g.scale(dist, -1.0);
            g.shift(neg, gamma)
        }
        AdversarialMode::Close => g.shift(dist, -gamma),
    };
    let hinge = g.relu(gap);
    g.mean(hinge)
}
