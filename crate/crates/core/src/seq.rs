//! GRU over visit embeddings plus the two task heads.
//!
//! ```text
//! z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)
//! r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
//! h̃_t = tanh(W_h x_t + U_h (r_t ⊙ h_{t-1}) + b_h)
//! h_t = (1 - z_t) ⊙ h_{t-1} + z_t ⊙ h̃_t,   h_0 = 0
//! ```

use crate::error::{Error, Result};
use crate::mime::{affine, role_of};
use crate::numerics::{dot, glorot_uniform, sigmoid, softmax, Matrix, ParamSet, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_z: Matrix,
    pub u_z: Matrix,
    pub b_z: Matrix,
    pub w_r: Matrix,
    pub u_r: Matrix,
    pub b_r: Matrix,
    pub w_h: Matrix,
    pub u_h: Matrix,
    pub b_h: Matrix,
}

pub const GRU_NAMES: [&str; 9] = [
    "W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h",
];

impl GruParams {
    pub fn init(d_in: usize, d_h: usize, rng: &mut Rng) -> Self {
        GruParams {
            w_z: glorot_uniform(d_h, d_in, rng),
            u_z: glorot_uniform(d_h, d_h, rng),
            b_z: Matrix::zeros(1, d_h),
            w_r: glorot_uniform(d_h, d_in, rng),
            u_r: glorot_uniform(d_h, d_h, rng),
            b_r: Matrix::zeros(1, d_h),
            w_h: glorot_uniform(d_h, d_in, rng),
            u_h: glorot_uniform(d_h, d_h, rng),
            b_h: Matrix::zeros(1, d_h),
        }
    }

    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        let w = Matrix::zeros(d_h, d_in);
        let u = Matrix::zeros(d_h, d_h);
        let b = Matrix::zeros(1, d_h);
        GruParams {
            w_z: w.clone(),
            u_z: u.clone(),
            b_z: b.clone(),
            w_r: w.clone(),
            u_r: u.clone(),
            b_r: b.clone(),
            w_h: w,
            u_h: u,
            b_h: b,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_z.cols()
    }

    pub fn d_h(&self) -> usize {
        self.w_z.rows()
    }

    fn fields(&self) -> [&Matrix; 9] {
        [
            &self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_h, &self.u_h,
            &self.b_h,
        ]
    }

    pub fn insert_into(&self, set: &mut ParamSet) {
        for (name, m) in GRU_NAMES.iter().zip(self.fields()) {
            set.insert(*name, role_of(name), m.clone());
        }
    }

    pub fn from_set(set: &ParamSet) -> Result<Self> {
        let get = |name: &str| {
            set.by_name(name)
                .cloned()
                .ok_or_else(|| Error::Invalid(format!("parameter {name} missing")))
        };
        Ok(GruParams {
            w_z: get("W_z")?,
            u_z: get("U_z")?,
            b_z: get("b_z")?,
            w_r: get("W_r")?,
            u_r: get("U_r")?,
            b_r: get("b_r")?,
            w_h: get("W_h")?,
            u_h: get("U_h")?,
            b_h: get("b_h")?,
        })
    }

    /// One recurrence step.
    pub fn step(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let gate = |w: &Matrix, u: &Matrix, b: &Matrix, hin: &[f64]| -> Vec<f64> {
            affine(w, x, Some(b))
                .into_iter()
                .zip(affine(u, hin, None))
                .map(|(a, c)| a + c)
                .collect()
        };
        let z: Vec<f64> = gate(&self.w_z, &self.u_z, &self.b_z, h)
            .into_iter()
            .map(sigmoid)
            .collect();
        let r: Vec<f64> = gate(&self.w_r, &self.u_r, &self.b_r, h)
            .into_iter()
            .map(sigmoid)
            .collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let cand: Vec<f64> = gate(&self.w_h, &self.u_h, &self.b_h, &rh)
            .into_iter()
            .map(f64::tanh)
            .collect();
        h.iter()
            .zip(&z)
            .zip(&cand)
            .map(|((&hp, &zt), &c)| hp + zt * (c - hp))
            .collect()
    }
}

/// Hidden states `h_1..h_T` for an input sequence.
pub fn gru_forward(seq: &[Vec<f64>], params: &GruParams) -> Result<Vec<Vec<f64>>> {
    if seq.is_empty() {
        return Err(Error::Config("GRU input sequence is empty".into()));
    }
    let mut h = vec![0.0; params.d_h()];
    let mut out = Vec::with_capacity(seq.len());
    for (t, x) in seq.iter().enumerate() {
        if x.len() != params.d_in() {
            return Err(Error::Shape {
                context: format!("GRU input at step {t}"),
                expected: (1, params.d_in()),
                actual: (1, x.len()),
            });
        }
        h = params.step(x, &h);
        out.push(h.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HfHead {
    /// `1 × d_h`
    pub w: Matrix,
    /// `1 × 1`
    pub b: Matrix,
}

impl HfHead {
    pub fn init(d_h: usize, rng: &mut Rng) -> Self {
        HfHead {
            w: glorot_uniform(1, d_h, rng),
            b: Matrix::zeros(1, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpHead {
    /// `|A| × d_h`
    pub u_s: Matrix,
    /// `1 × |A|`
    pub b_s: Matrix,
}

impl SdpHead {
    pub fn init(n_dx: usize, d_h: usize, rng: &mut Rng) -> Self {
        SdpHead {
            u_s: glorot_uniform(n_dx, d_h, rng),
            b_s: Matrix::zeros(1, n_dx),
        }
    }
}

/// `sigmoid(w · h + b)`.
pub fn predict_hf(h: &[f64], head: &HfHead) -> f64 {
    sigmoid(dot(head.w.data(), h) + head.b.item())
}

/// Next-visit diagnosis distributions from `h_1..h_{T-1}`; the last hidden
/// state has no following visit and is skipped.
pub fn predict_sdp(hidden: &[Vec<f64>], head: &SdpHead) -> Vec<Vec<f64>> {
    let steps = hidden.len().saturating_sub(1);
    hidden[..steps]
        .iter()
        .map(|h| softmax(&affine(&head.u_s, h, Some(&head.b_s))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_weights_keep_state_at_zero() {
        let p = GruParams::zeros(3, 2);
        let seq = vec![vec![1.0, -2.0, 0.5]; 4];
        for h in gru_forward(&seq, &p).unwrap() {
            assert_eq!(h, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn single_step_hand_evaluation() {
        let mut p = GruParams::zeros(2, 2);
        p.w_z = Matrix::identity(2);
        p.w_h = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap();
        p.b_h = Matrix::row_vector(vec![0.0, -1.0]);
        let x = [0.5, -0.25];
        let h = gru_forward(&[x.to_vec()], &p).unwrap().remove(0);
        // h_0 = 0, so h_1 = z ⊙ h̃
        let z = [sigmoid(0.5), sigmoid(-0.25)];
        let cand = [(0.25f64).tanh(), (-1.5f64).tanh()];
        assert_abs_diff_eq!(h[0], z[0] * cand[0], epsilon = 1e-15);
        assert_abs_diff_eq!(h[1], z[1] * cand[1], epsilon = 1e-15);
    }

    #[test]
    fn hidden_state_is_bounded() {
        let mut rng = seeded_rng(4);
        let mut p = GruParams::init(3, 5, &mut rng);
        p.w_h = p.w_h.map(|x| 40.0 * x);
        let seq: Vec<Vec<f64>> = (0..30).map(|t| vec![t as f64, -1.0, 3.0]).collect();
        for h in gru_forward(&seq, &p).unwrap() {
            assert!(h.iter().all(|x| x.abs() <= 1.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = GruParams::zeros(3, 2);
        assert!(gru_forward(&[vec![1.0, 2.0]], &p).is_err());
        assert!(gru_forward(&[], &p).is_err());
    }

    #[test]
    fn hf_head() {
        let head = HfHead {
            w: Matrix::zeros(1, 3),
            b: Matrix::scalar(0.0),
        };
        assert_eq!(predict_hf(&[1.0, 2.0, 3.0], &head), 0.5);
        let head = HfHead {
            w: Matrix::row_vector(vec![0.5, -1.0]),
            b: Matrix::scalar(50.0),
        };
        assert!(predict_hf(&[0.1, 0.2], &head) > 1.0 - 1e-15);
        let head = HfHead {
            w: Matrix::row_vector(vec![0.5, -1.0]),
            b: Matrix::scalar(0.3),
        };
        let oracle = 1.0 / (1.0 + (-(0.05 - 0.2 + 0.3f64)).exp());
        assert_abs_diff_eq!(predict_hf(&[0.1, 0.2], &head), oracle, epsilon = 1e-15);
    }

    #[test]
    fn sdp_head() {
        let head = SdpHead {
            u_s: Matrix::zeros(4, 2),
            b_s: Matrix::zeros(1, 4),
        };
        let hidden = vec![vec![0.3, 0.1]; 3];
        let out = predict_sdp(&hidden, &head);
        assert_eq!(out.len(), 2);
        assert!(out.iter().flatten().all(|&p| p == 0.25));
        assert!(predict_sdp(&hidden[..1], &head).is_empty());

        let head = SdpHead::init(6, 2, &mut seeded_rng(2));
        for dist in predict_sdp(&hidden, &head) {
            assert_abs_diff_eq!(dist.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }
}
