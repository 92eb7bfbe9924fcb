//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, ParamStore};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Perturbation step for `(f(x+eps) - f(x-eps)) / 2eps`.
    pub eps: f64,
    /// Entries checked per tensor; smaller tensors are checked exhaustively.
    pub entries_per_tensor: usize,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub denominator_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            entries_per_tensor: 50,
            tolerance: 1e-4,
            denominator_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EntryCheck {
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<EntryCheck>,
    /// Entries where the loss was not finite at a perturbed point.
    pub non_finite: Vec<(String, usize, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&EntryCheck> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passed(&self) -> bool {
        self.non_finite.is_empty() && self.max_rel_error() < self.tolerance
    }

    /// Maximum relative error per parameter tensor.
    pub fn per_param(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|(n, _)| *n == e.param) {
                Some((_, m)) => *m = m.max(e.rel_error),
                None => out.push((e.param.clone(), e.rel_error)),
            }
        }
        out
    }
}

/// Compares `analytic` against central differences of `loss` evaluated on
/// perturbed copies of `params`.
pub fn grad_check<F>(params: &ParamStore, analytic: &Gradients, cfg: &GradCheckConfig, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        tolerance: cfg.tolerance,
        ..Default::default()
    };
    let mut work = params.clone();
    for idx in 0..params.len() {
        let (name, tensor) = params.by_index(idx);
        let n = tensor.len();
        let chosen: Vec<usize> = if n <= cfg.entries_per_tensor {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, cfg.entries_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let cols = tensor.cols();
        for flat in chosen {
            let original = tensor.as_slice()[flat];
            work.by_index_mut(idx).as_mut_slice()[flat] = original + cfg.eps;
            let plus = loss(&work)?;
            work.by_index_mut(idx).as_mut_slice()[flat] = original - cfg.eps;
            let minus = loss(&work)?;
            work.by_index_mut(idx).as_mut_slice()[flat] = original;

            let (row, col) = (flat / cols, flat % cols);
            if !plus.is_finite() || !minus.is_finite() {
                report.non_finite.push((name.to_string(), row, col));
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic.get(idx).as_slice()[flat];
            let denom = a.abs().max(numeric.abs()).max(cfg.denominator_floor);
            report.entries.push(EntryCheck {
                param: name.to_string(),
                row,
                col,
                analytic: a,
                numeric,
                rel_error: (a - numeric).abs() / denom,
            });
        }
    }
    Ok(report)
}
