//! Multi-view divergence-convergence link prediction on bipartite
//! drug-microbe association graphs.

pub mod error;
pub mod numerics;
pub mod data;
pub mod graphs;
pub mod sim_encoder;
pub mod hetero_encoder;
pub mod divergence;
pub mod convergence;
pub mod predictor;
pub mod model;
pub mod trainer;
pub mod synth;
pub mod evaluation;

pub use error::{Error, Result};
