//! The hierarchical visit encoder and its auxiliary code-prediction heads.
//!
//! For a diagnosis object with code `d` and treatments `m_1..m_k`:
//!
//! ```text
//! g(d, m) = relu(W_m r(d)) ⊙ r(m)
//! G       = r(d) + Σ_j g(d, m_j)
//! o       = relu(W_o G + b_o) + G
//! ```
//!
//! and for a visit with objects `o_1..o_n`:
//!
//! ```text
//! F = Σ_i o_i
//! v = sigmoid(W_v F + b_v) + F
//! ```
//!
//! Sums run in a canonical order (treatments ascending, objects by content)
//! so permuting a visit's contents leaves `v` bitwise unchanged.
//!
//! The functions here evaluate the encoder directly on plain vectors. The
//! trainable path in [`crate::model`] records the same computation on a tape
//! and is tested against these.

use serde::{Deserialize, Serialize};

use crate::ehr::{DxObject, Visit};
use crate::error::{Error, Result};
use crate::numerics::{
    dot, glorot_uniform, sigmoid, softmax, uniform, Matrix, ParamRole, ParamSet, Rng,
};

/// Embedding rows are drawn from `Uniform(-EMBED_INIT, EMBED_INIT)`.
pub const EMBED_INIT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimeParams {
    /// `|A| × z`, row `d` is `r(d)`.
    pub emb_dx: Matrix,
    /// `|B| × z`, row `m` is `r(m)`.
    pub emb_tx: Matrix,
    pub w_m: Matrix,
    pub w_o: Matrix,
    pub b_o: Matrix,
    pub w_v: Matrix,
    pub b_v: Matrix,
    pub u_d: Matrix,
    pub b_d: Matrix,
    pub u_m: Matrix,
    pub b_m: Matrix,
}

/// Names under which [`MimeParams`] live in a [`ParamSet`], in field order.
pub const PARAM_NAMES: [&str; 11] = [
    "emb_dx", "emb_tx", "W_m", "W_o", "b_o", "W_v", "b_v", "U_d", "b_d", "U_m", "b_m",
];

impl MimeParams {
    pub fn init(z: usize, n_dx: usize, n_tx: usize, rng: &mut Rng) -> Self {
        MimeParams {
            emb_dx: uniform(n_dx, z, EMBED_INIT, rng),
            emb_tx: uniform(n_tx, z, EMBED_INIT, rng),
            w_m: glorot_uniform(z, z, rng),
            w_o: glorot_uniform(z, z, rng),
            b_o: Matrix::zeros(1, z),
            w_v: glorot_uniform(z, z, rng),
            b_v: Matrix::zeros(1, z),
            u_d: glorot_uniform(n_dx, z, rng),
            b_d: Matrix::zeros(1, n_dx),
            u_m: glorot_uniform(n_tx, z, rng),
            b_m: Matrix::zeros(1, n_tx),
        }
    }

    pub fn zeros(z: usize, n_dx: usize, n_tx: usize) -> Self {
        MimeParams {
            emb_dx: Matrix::zeros(n_dx, z),
            emb_tx: Matrix::zeros(n_tx, z),
            w_m: Matrix::zeros(z, z),
            w_o: Matrix::zeros(z, z),
            b_o: Matrix::zeros(1, z),
            w_v: Matrix::zeros(z, z),
            b_v: Matrix::zeros(1, z),
            u_d: Matrix::zeros(n_dx, z),
            b_d: Matrix::zeros(1, n_dx),
            u_m: Matrix::zeros(n_tx, z),
            b_m: Matrix::zeros(1, n_tx),
        }
    }

    pub fn z(&self) -> usize {
        self.emb_dx.cols()
    }

    pub fn n_dx(&self) -> usize {
        self.emb_dx.rows()
    }

    pub fn n_tx(&self) -> usize {
        self.emb_tx.rows()
    }

    fn fields(&self) -> [&Matrix; 11] {
        [
            &self.emb_dx,
            &self.emb_tx,
            &self.w_m,
            &self.w_o,
            &self.b_o,
            &self.w_v,
            &self.b_v,
            &self.u_d,
            &self.b_d,
            &self.u_m,
            &self.b_m,
        ]
    }

    pub fn scalar_count(&self) -> usize {
        self.fields().iter().map(|m| m.len()).sum()
    }

    pub fn insert_into(&self, set: &mut ParamSet) {
        for (name, value) in PARAM_NAMES.iter().zip(self.fields()) {
            set.insert(*name, role_of(name), value.clone());
        }
    }

    pub fn from_set(set: &ParamSet) -> Result<Self> {
        let get = |name: &str| {
            set.by_name(name)
                .cloned()
                .ok_or_else(|| Error::Invalid(format!("parameter {name} missing")))
        };
        let p = MimeParams {
            emb_dx: get("emb_dx")?,
            emb_tx: get("emb_tx")?,
            w_m: get("W_m")?,
            w_o: get("W_o")?,
            b_o: get("b_o")?,
            w_v: get("W_v")?,
            b_v: get("b_v")?,
            u_d: get("U_d")?,
            b_d: get("b_d")?,
            u_m: get("U_m")?,
            b_m: get("b_m")?,
        };
        p.check_shapes()?;
        Ok(p)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (z, a, b) = (self.z(), self.n_dx(), self.n_tx());
        let expect = [
            (a, z),
            (b, z),
            (z, z),
            (z, z),
            (1, z),
            (z, z),
            (1, z),
            (a, z),
            (1, a),
            (b, z),
            (1, b),
        ];
        for ((name, m), shape) in PARAM_NAMES.iter().zip(self.fields()).zip(expect) {
            if m.shape() != shape {
                return Err(Error::Shape {
                    context: (*name).to_string(),
                    expected: shape,
                    actual: m.shape(),
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn role_of(name: &str) -> ParamRole {
    if name.starts_with("emb_") {
        ParamRole::Embedding
    } else if name.starts_with("b_") || name.ends_with("_b") {
        ParamRole::Bias
    } else {
        ParamRole::Weight
    }
}

/// Everything the encoder produces for one visit.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitEncoding {
    pub v: Vec<f64>,
    /// `F = Σ o_i`.
    pub f: Vec<f64>,
    /// `G_i` per object, in visit order.
    pub g_list: Vec<Vec<f64>>,
    /// `o_i` per object, in visit order.
    pub o_list: Vec<Vec<f64>>,
    pub aux_dx_logits: Vec<Vec<f64>>,
    pub aux_tx_logits: Vec<Vec<f64>>,
}

/// `W · x (+ b)` for a weight of shape `out × in`.
pub(crate) fn affine(w: &Matrix, x: &[f64], b: Option<&Matrix>) -> Vec<f64> {
    (0..w.rows())
        .map(|i| dot(w.row(i), x) + b.map_or(0.0, |b| b.data()[i]))
        .collect()
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// `g = relu(W_m r(d)) ⊙ r(m)`.
pub fn interact(d: usize, m: usize, params: &MimeParams) -> Vec<f64> {
    let gate = affine(&params.w_m, params.emb_dx.row(d), None);
    gate.iter()
        .zip(params.emb_tx.row(m))
        .map(|(&g, &r)| g.max(0.0) * r)
        .collect()
}

/// `G = r(d) + Σ_j g(d, m_j)`, with treatments summed in ascending order.
pub fn object_sum(obj: &DxObject, params: &MimeParams) -> Vec<f64> {
    let mut g_total = params.emb_dx.row(obj.dx).to_vec();
    let mut tx = obj.tx.clone();
    tx.sort_unstable();
    for m in tx {
        add_into(&mut g_total, &interact(obj.dx, m, params));
    }
    g_total
}

/// `o = relu(W_o G + b_o) + G`.
pub fn encode_object(obj: &DxObject, params: &MimeParams) -> Vec<f64> {
    let g = object_sum(obj, params);
    skip_relu(&params.w_o, &params.b_o, &g)
}

fn skip_relu(w: &Matrix, b: &Matrix, g: &[f64]) -> Vec<f64> {
    affine(w, g, Some(b))
        .into_iter()
        .zip(g)
        .map(|(h, &gi)| h.max(0.0) + gi)
        .collect()
}

/// Order in which object embeddings are summed: by diagnosis, then by the
/// sorted treatment list.
pub(crate) fn canonical_object_order(visit: &Visit) -> Vec<usize> {
    let keys: Vec<(usize, Vec<usize>)> = visit
        .objects
        .iter()
        .map(|o| {
            let mut tx = o.tx.clone();
            tx.sort_unstable();
            (o.dx, tx)
        })
        .collect();
    let mut order: Vec<usize> = (0..visit.len()).collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    order
}

pub fn encode_visit(visit: &Visit, params: &MimeParams) -> VisitEncoding {
    let z = params.z();
    let g_list: Vec<Vec<f64>> = visit
        .objects
        .iter()
        .map(|o| object_sum(o, params))
        .collect();
    let o_list: Vec<Vec<f64>> = g_list
        .iter()
        .map(|g| skip_relu(&params.w_o, &params.b_o, g))
        .collect();
    let mut f = vec![0.0; z];
    for i in canonical_object_order(visit) {
        add_into(&mut f, &o_list[i]);
    }
    let v = affine(&params.w_v, &f, Some(&params.b_v))
        .into_iter()
        .zip(&f)
        .map(|(h, &fi)| sigmoid(h) + fi)
        .collect();
    let aux_dx_logits = o_list
        .iter()
        .map(|o| affine(&params.u_d, o, Some(&params.b_d)))
        .collect();
    let aux_tx_logits = o_list
        .iter()
        .map(|o| affine(&params.u_m, o, Some(&params.b_m)))
        .collect();
    VisitEncoding {
        v,
        f,
        g_list,
        o_list,
        aux_dx_logits,
        aux_tx_logits,
    }
}

/// Per-object diagnosis probabilities (softmax over `A`) and treatment
/// probabilities (independent sigmoids over `B`).
pub fn aux_predictions(enc: &VisitEncoding) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let dx = enc.aux_dx_logits.iter().map(|l| softmax(l)).collect();
    let tx = enc
        .aux_tx_logits
        .iter()
        .map(|l| l.iter().map(|&x| sigmoid(x)).collect())
        .collect();
    (dx, tx)
}

/// Trainable scalars in [`MimeParams`] for embedding size `z`.
pub fn count_params(z: usize, n_dx: usize, n_tx: usize) -> usize {
    let embeddings = (n_dx + n_tx) * z;
    let w_m = z * z;
    let w_o = z * z + z;
    let w_v = z * z + z;
    let u_d = n_dx * z + n_dx;
    let u_m = n_tx * z + n_tx;
    embeddings + w_m + w_o + w_v + u_d + u_m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    fn tiny() -> MimeParams {
        let mut p = MimeParams::zeros(2, 2, 2);
        p.w_m = Matrix::identity(2);
        p.emb_dx = Matrix::from_rows(&[vec![1.0, -1.0], vec![0.0, 0.0]]).unwrap();
        p.emb_tx = Matrix::from_rows(&[vec![2.0, 3.0], vec![1.0, 1.0]]).unwrap();
        p
    }

    #[test]
    fn interact_identity_gate_hand_value() {
        assert_eq!(interact(0, 0, &tiny()), vec![2.0, 0.0]);
    }

    #[test]
    fn zero_diagnosis_embedding_absorbs_treatment() {
        let p = tiny();
        assert_eq!(interact(1, 0, &p), vec![0.0, 0.0]);
        assert_eq!(interact(1, 1, &p), vec![0.0, 0.0]);
    }

    #[test]
    fn gate_depends_on_paired_diagnosis() {
        let mut rng = seeded_rng(3);
        let p = MimeParams::init(4, 3, 2, &mut rng);
        assert_ne!(interact(0, 1, &p), interact(2, 1, &p));
    }

    #[test]
    fn encode_object_hand_value() {
        // W_o = 0, b_o = 0, one treatment with g = [2, 0]
        let o = encode_object(&DxObject::new(0, vec![0]), &tiny());
        assert_eq!(o, vec![3.0, -1.0]);
    }

    #[test]
    fn empty_treatments_reduce_to_diagnosis_embedding() {
        let mut rng = seeded_rng(5);
        let p = MimeParams::init(3, 4, 4, &mut rng);
        let r = p.emb_dx.row(2).to_vec();
        let expect: Vec<f64> = affine(&p.w_o, &r, Some(&p.b_o))
            .iter()
            .zip(&r)
            .map(|(h, x)| h.max(0.0) + x)
            .collect();
        assert_eq!(encode_object(&DxObject::new(2, vec![]), &p), expect);
    }

    #[test]
    fn single_object_visit() {
        let mut rng = seeded_rng(6);
        let p = MimeParams::init(3, 4, 4, &mut rng);
        let obj = DxObject::new(1, vec![0, 3]);
        let enc = encode_visit(&Visit::new(vec![obj.clone()]), &p);
        let o = encode_object(&obj, &p);
        assert_eq!(enc.f, o);
        let expect: Vec<f64> = affine(&p.w_v, &o, Some(&p.b_v))
            .iter()
            .zip(&o)
            .map(|(h, x)| sigmoid(*h) + x)
            .collect();
        assert_eq!(enc.v, expect);
    }

    #[test]
    fn zero_outer_weights_give_half_plus_f() {
        let mut rng = seeded_rng(7);
        let mut p = MimeParams::init(3, 4, 4, &mut rng);
        p.w_v = Matrix::zeros(3, 3);
        let visit = Visit::new(vec![DxObject::new(0, vec![1]), DxObject::new(3, vec![])]);
        let enc = encode_visit(&visit, &p);
        for (v, f) in enc.v.iter().zip(&enc.f) {
            assert_eq!(v - f, 0.5);
        }
    }

    #[test]
    fn uniform_aux_predictions_under_zero_heads() {
        let mut rng = seeded_rng(8);
        let mut p = MimeParams::init(3, 4, 5, &mut rng);
        p.u_d = Matrix::zeros(4, 3);
        p.u_m = Matrix::zeros(5, 3);
        let visit = Visit::new(vec![DxObject::new(0, vec![1, 2])]);
        let (dx, tx) = aux_predictions(&encode_visit(&visit, &p));
        assert!(dx[0].iter().all(|&q| q == 0.25));
        assert!(tx[0].iter().all(|&q| q == 0.5));
    }

    #[test]
    fn count_matches_field_sizes() {
        let mut rng = seeded_rng(9);
        for (z, a, b) in [(1, 1, 1), (4, 7, 3), (12, 50, 30)] {
            let p = MimeParams::init(z, a, b, &mut rng);
            assert_eq!(count_params(z, a, b), p.scalar_count());
        }
        // emb 2, W_m 1, W_o 2, W_v 2, U_d 2, U_m 2
        assert_eq!(count_params(1, 1, 1), 11);
    }

    #[test]
    fn set_round_trip() {
        let mut rng = seeded_rng(10);
        let p = MimeParams::init(3, 4, 5, &mut rng);
        let mut set = ParamSet::new();
        p.insert_into(&mut set);
        assert_eq!(MimeParams::from_set(&set).unwrap(), p);
        assert_eq!(set.role(set.id("emb_tx").unwrap()), ParamRole::Embedding);
        assert_eq!(set.role(set.id("b_o").unwrap()), ParamRole::Bias);
        assert_eq!(set.role(set.id("W_m").unwrap()), ParamRole::Weight);
    }
}
