//! View fusion: the bidirectional attention gate and four simpler baselines.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Side;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMode {
    #[default]
    #[serde(rename = "bsam")]
    Bsam,
    #[serde(rename = "add")]
    Add,
    #[serde(rename = "multiply")]
    Multiply,
    #[serde(rename = "concatDim")]
    ConcatReduce,
    #[serde(rename = "cross")]
    CrossAttention,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [Self::Bsam, Self::Add, Self::Multiply, Self::ConcatReduce, Self::CrossAttention];

    pub fn label(self) -> &'static str {
        match self {
            Self::Bsam => "bsam",
            Self::Add => "add",
            Self::Multiply => "multiply",
            Self::ConcatReduce => "concatDim",
            Self::CrossAttention => "cross",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode {s:?} (expected bsam, add, multiply, concatDim or cross)")))
    }
}

fn prefix(side: Side) -> String {
    format!("fusion.{side}")
}

pub fn init_params<R: Rng>(store: &mut ParamStore, mode: FusionMode, side: Side, d: usize, rng: &mut R) -> Result<()> {
    let p = prefix(side);
    match mode {
        FusionMode::Bsam => {
            store.insert_glorot(format!("{p}.w_phi"), d, d, rng)?;
            store.insert_zeros(format!("{p}.b_phi"), 1, d)?;
            store.insert_glorot(format!("{p}.w_psi"), d, d, rng)?;
            store.insert_zeros(format!("{p}.b_psi"), 1, d)?;
            store.insert_glorot(format!("{p}.w_omega1"), 2 * d, d, rng)?;
            store.insert_glorot(format!("{p}.w_omega2"), 2 * d, d, rng)?;
            store.insert_glorot(format!("{p}.v"), d, 1, rng)?;
        }
        FusionMode::ConcatReduce => {
            store.insert_glorot(format!("{p}.w_reduce"), 2 * d, d, rng)?;
        }
        FusionMode::CrossAttention => {
            store.insert_glorot(format!("{p}.w_q"), d, d, rng)?;
            store.insert_glorot(format!("{p}.w_k"), d, d, rng)?;
        }
        FusionMode::Add | FusionMode::Multiply => {}
    }
    Ok(())
}

pub struct Fused {
    pub fused: Var,
    /// `N x 2` view weights, for the attention-based modes.
    pub weights: Option<Var>,
}

/// Row-wise convex combination with `alpha` columns `[a1, a2]`.
fn mix(g: &mut Graph, z1: Var, z2: Var, alpha: Var) -> Result<Var> {
    let a1 = g.slice_cols(alpha, 0, 1)?;
    let a2 = g.slice_cols(alpha, 1, 2)?;
    let p1 = g.mul_col(z1, a1)?;
    let p2 = g.mul_col(z2, a2)?;
    g.add(p1, p2)
}

/// Fuses row `i` of `z1` with row `i` of `z2` for every row.
pub fn fuse(g: &mut Graph, store: &ParamStore, mode: FusionMode, side: Side, z1: Var, z2: Var) -> Result<Fused> {
    if g.shape(z1) != g.shape(z2) {
        return Err(Error::dimension("fuse", g.shape(z1), g.shape(z2)));
    }
    let p = prefix(side);
    let param = |g: &mut Graph, name: &str| g.param(store, &format!("{p}.{name}"));
    match mode {
        FusionMode::Bsam => {
            let (wphi, bphi) = (param(g, "w_phi")?, param(g, "b_phi")?);
            let (wpsi, bpsi) = (param(g, "w_psi")?, param(g, "b_psi")?);
            let (w1, w2, v) = (param(g, "w_omega1")?, param(g, "w_omega2")?, param(g, "v")?);
            let a = g.matmul(z1, wphi)?;
            let a = g.add_row(a, bphi)?;
            let h1 = g.tanh(a);
            let b = g.matmul(z2, wpsi)?;
            let b = g.add_row(b, bpsi)?;
            let h2 = g.tanh(b);
            let cat = g.concat_cols(&[h1, h2])?;
            let score = |g: &mut Graph, w: Var| -> Result<Var> {
                let s = g.matmul(cat, w)?;
                let s = g.relu(s);
                g.matmul(s, v)
            };
            let e1 = score(g, w1)?;
            let e2 = score(g, w2)?;
            let e = g.concat_cols(&[e1, e2])?;
            let alpha = g.row_softmax(e);
            Ok(Fused {
                fused: mix(g, z1, z2, alpha)?,
                weights: Some(alpha),
            })
        }
        FusionMode::Add => Ok(Fused {
            fused: g.add(z1, z2)?,
            weights: None,
        }),
        FusionMode::Multiply => Ok(Fused {
            fused: g.mul(z1, z2)?,
            weights: None,
        }),
        FusionMode::ConcatReduce => {
            let w = param(g, "w_reduce")?;
            let cat = g.concat_cols(&[z1, z2])?;
            Ok(Fused {
                fused: g.matmul(cat, w)?,
                weights: None,
            })
        }
        FusionMode::CrossAttention => {
            // Each view queries both views; the two attended rows are averaged.
            let (wq, wk) = (param(g, "w_q")?, param(g, "w_k")?);
            let scale = 1.0 / (g.shape(z1).1 as f64).sqrt();
            let (q1, q2) = (g.matmul(z1, wq)?, g.matmul(z2, wq)?);
            let (k1, k2) = (g.matmul(z1, wk)?, g.matmul(z2, wk)?);
            let attend = |g: &mut Graph, q: Var| -> Result<(Var, Var)> {
                let s1 = g.mul(q, k1)?;
                let s1 = g.row_sum(s1);
                let s2 = g.mul(q, k2)?;
                let s2 = g.row_sum(s2);
                let logits = g.concat_cols(&[s1, s2])?;
                let logits = g.scale(logits, scale);
                let alpha = g.row_softmax(logits);
                Ok((mix(g, z1, z2, alpha)?, alpha))
            };
            let (o1, _) = attend(g, q1)?;
            let (o2, _) = attend(g, q2)?;
            let sum = g.add(o1, o2)?;
            Ok(Fused {
                fused: g.scale(sum, 0.5),
                weights: None,
            })
        }
    }
}
