//! Dense matrices, reverse-mode differentiation, Adam and seeded randomness.

mod activation;
mod adam;
mod gradcheck;
mod matrix;
mod params;
mod rng;
mod tape;

pub use activation::{activation, log_sum_exp, sigmoid, softmax, softplus, Activation};
pub use adam::AdamState;
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use matrix::{dot, Matrix};
pub use params::{Gradients, ParamId, ParamRole, ParamSet};
pub use rng::{derive_seed, seeded_rng, sub_rng, Rng};
pub use tape::{Tape, Var};

use rand::Rng as _;

/// Glorot-uniform `rows × cols` matrix with `fan_in = cols`, `fan_out = rows`.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rows, cols, limit, rng)
}

/// Entries drawn from `Uniform(-limit, limit)`.
pub fn uniform(rows: usize, cols: usize, limit: f64, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches")
}
