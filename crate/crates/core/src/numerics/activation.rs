use serde::{Deserialize, Serialize};

use super::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output `y = apply(x)`.
    #[inline]
    pub(crate) fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

pub fn activation(kind: Activation, x: &Matrix) -> Matrix {
    x.map(|v| kind.apply(v))
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn relu_clamps_negative_and_zero() {
        let x = Matrix::row_vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(activation(Activation::Relu, &x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_symmetry_point() {
        let x = Matrix::scalar(0.0);
        assert_eq!(activation(Activation::Sigmoid, &x).item(), 0.5);
    }

    #[test]
    fn tanh_of_one() {
        let y = activation(Activation::Tanh, &Matrix::scalar(1.0)).item();
        assert_abs_diff_eq!(y, 0.761_594_155_955_764_9, epsilon = 1e-15);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);

        let big = softmax(&[1000.0, 0.0]);
        assert!(big.iter().all(|p| p.is_finite()));
        assert_abs_diff_eq!(big[0], 1.0, epsilon = 1e-15);
        assert!(big[1] < 1e-300);

        // e^(k-3) / (e^-2 + e^-1 + 1)
        let denom = (-2.0f64).exp() + (-1.0f64).exp() + 1.0;
        let oracle = [
            (-2.0f64).exp() / denom,
            (-1.0f64).exp() / denom,
            1.0 / denom,
        ];
        let p = softmax(&[1.0, 2.0, 3.0]);
        for (a, b) in p.iter().zip(oracle) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(p[0], 0.09003, epsilon = 5e-6);
        assert_abs_diff_eq!(p[1], 0.24473, epsilon = 5e-6);
        assert_abs_diff_eq!(p[2], 0.66524, epsilon = 5e-6);
    }

    #[test]
    fn stable_helpers_do_not_overflow() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_abs_diff_eq!(softplus(1000.0), 1000.0);
        assert_abs_diff_eq!(softplus(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(
            log_sum_exp(&[1000.0, 1000.0]),
            1000.0 + std::f64::consts::LN_2
        );
    }
}
