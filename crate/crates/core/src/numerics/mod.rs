//! Dense matrix algebra, a reverse-mode tape and gradient verification.

mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use gradcheck::{grad_check, EntryCheck, GradCheckConfig, GradCheckReport};
pub use matrix::{Matrix, SparseRows};
pub use params::{Gradients, ParamStore};
pub use tape::{Graph, IndexTable, Reduction, Var};

pub(crate) use tape::{sigmoid, softmax_rows, softplus};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

/// Pointwise activation recorded on the tape.
pub fn elementwise(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Tanh => g.tanh(x),
        Activation::Sigmoid => g.sigmoid(x),
    }
}

/// Inverted dropout: zeroes each entry with probability `rate` and rescales
/// survivors by `1 / (1 - rate)`. A zero rate records nothing.
pub fn dropout<R: rand::Rng>(g: &mut Graph, x: Var, rate: f64, rng: &mut R) -> crate::Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let (r, c) = g.shape(x);
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..r * c)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mask = g.constant(Matrix::from_vec(r, c, mask)?);
    g.mul(x, mask)
}

/// Row-wise softmax of a plain matrix.
pub fn row_softmax(m: &Matrix) -> Matrix {
    softmax_rows(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-10.0f64..10.0, rows * cols)
            .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn matmul_is_associative(
            (a, b, c) in (1usize..6, 1usize..6, 1usize..6, 1usize..6)
                .prop_flat_map(|(m, k, l, n)| (matrix(m, k), matrix(k, l), matrix(l, n)))
        ) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) < 1e-10);
        }

        #[test]
        fn softmax_rows_sum_to_one(m in (1usize..8, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c))) {
            let s = row_softmax(&m.map(|v| v * 50.0));
            for i in 0..s.rows() {
                let total: f64 = s.row(i).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(s.row(i).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn elementwise_dispatch() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::row_vector(&[-1.0, 0.0, 2.0]));
        let r = elementwise(&mut g, x, Activation::Relu);
        assert_eq!(g.value(r).as_slice(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_keeps_expectation_and_zero_rate_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(Matrix::filled(100, 100, 1.0));
        assert_eq!(dropout(&mut g, x, 0.0, &mut rng).unwrap(), x);
        let y = dropout(&mut g, x, 0.5, &mut rng).unwrap();
        let vals = g.value(y).as_slice();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
    }
}
