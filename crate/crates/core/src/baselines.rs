//! Flattened-visit embedders: each visit becomes the multi-hot vector `x`
//! over `A ∪ B` and is mapped to an embedding without regard to which
//! treatment belongs to which diagnosis.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ehr::{active_codes, CodeVocab, Visit};
use crate::error::{Error, Result};
use crate::mime::role_of;
use crate::numerics::{glorot_uniform, Activation, Matrix, ParamSet, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Raw,
    Linear,
    Sigmoid,
    Tanh,
    Relu,
    SigmoidMlp,
    TanhMlp,
    ReluMlp,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 8] = [
        BaselineKind::Raw,
        BaselineKind::Linear,
        BaselineKind::Sigmoid,
        BaselineKind::Tanh,
        BaselineKind::Relu,
        BaselineKind::SigmoidMlp,
        BaselineKind::TanhMlp,
        BaselineKind::ReluMlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Raw => "raw",
            BaselineKind::Linear => "linear",
            BaselineKind::Sigmoid => "sigmoid",
            BaselineKind::Tanh => "tanh",
            BaselineKind::Relu => "relu",
            BaselineKind::SigmoidMlp => "sigmoid_mlp",
            BaselineKind::TanhMlp => "tanh_mlp",
            BaselineKind::ReluMlp => "relu_mlp",
        }
    }

    /// Activation applied after each affine layer.
    pub fn activation(self) -> Activation {
        match self {
            BaselineKind::Raw | BaselineKind::Linear => Activation::Identity,
            BaselineKind::Sigmoid | BaselineKind::SigmoidMlp => Activation::Sigmoid,
            BaselineKind::Tanh | BaselineKind::TanhMlp => Activation::Tanh,
            BaselineKind::Relu | BaselineKind::ReluMlp => Activation::Relu,
        }
    }

    pub fn layers(self) -> usize {
        match self {
            BaselineKind::Raw => 0,
            BaselineKind::SigmoidMlp | BaselineKind::TanhMlp | BaselineKind::ReluMlp => 2,
            _ => 1,
        }
    }

    /// Width of the visit vector handed to the sequence model.
    pub fn output_dim(self, b: usize, vocab: &CodeVocab) -> usize {
        if self == BaselineKind::Raw {
            vocab.n_codes()
        } else {
            b
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineParams {
    pub kind: BaselineKind,
    /// `b × (|A| + |B|)`, absent for `raw`.
    pub w_x1: Option<Matrix>,
    pub b_x1: Option<Matrix>,
    /// `b × b`, mlp variants only.
    pub w_x2: Option<Matrix>,
    pub b_x2: Option<Matrix>,
}

impl BaselineParams {
    pub fn init(kind: BaselineKind, b: usize, vocab: &CodeVocab, rng: &mut Rng) -> Self {
        let n = vocab.n_codes();
        let layers = kind.layers();
        BaselineParams {
            kind,
            w_x1: (layers >= 1).then(|| glorot_uniform(b, n, rng)),
            b_x1: (layers >= 1).then(|| Matrix::zeros(1, b)),
            w_x2: (layers >= 2).then(|| glorot_uniform(b, b, rng)),
            b_x2: (layers >= 2).then(|| Matrix::zeros(1, b)),
        }
    }

    fn named(&self) -> Vec<(&'static str, &Matrix)> {
        [
            ("W_x1", &self.w_x1),
            ("b_x1", &self.b_x1),
            ("W_x2", &self.w_x2),
            ("b_x2", &self.b_x2),
        ]
        .into_iter()
        .filter_map(|(n, m)| m.as_ref().map(|m| (n, m)))
        .collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn insert_into(&self, set: &mut ParamSet) {
        for (name, m) in self.named() {
            set.insert(name, role_of(name), m.clone());
        }
    }

    pub fn from_set(kind: BaselineKind, set: &ParamSet) -> Result<Self> {
        let layers = kind.layers();
        let get = |name: &str, needed: bool| -> Result<Option<Matrix>> {
            match (set.by_name(name), needed) {
                (Some(m), true) => Ok(Some(m.clone())),
                (None, false) => Ok(None),
                (None, true) => Err(Error::Invalid(format!(
                    "{kind} baseline needs parameter {name}"
                ))),
                (Some(_), false) => Err(Error::Invalid(format!(
                    "{kind} baseline has no parameter {name}"
                ))),
            }
        };
        Ok(BaselineParams {
            kind,
            w_x1: get("W_x1", layers >= 1)?,
            b_x1: get("b_x1", layers >= 1)?,
            w_x2: get("W_x2", layers >= 2)?,
            b_x2: get("b_x2", layers >= 2)?,
        })
    }
}

/// Embeds one visit from its flattened code set.
pub fn encode_visit_baseline(
    visit: &Visit,
    vocab: &CodeVocab,
    params: &BaselineParams,
) -> Vec<f64> {
    let codes = active_codes(visit, vocab.n_dx());
    let act = params.kind.activation();
    let Some(w1) = params.w_x1.as_ref() else {
        let mut x = vec![0.0; vocab.n_codes()];
        for c in codes {
            x[c] = 1.0;
        }
        return x;
    };
    // W_x · x is the sum of the columns of the active codes
    let b1 = params.b_x1.as_ref().expect("bias with layer");
    let mut h: Vec<f64> = (0..w1.rows())
        .map(|i| {
            let row = w1.row(i);
            codes.iter().map(|&c| row[c]).sum::<f64>() + b1.data()[i]
        })
        .collect();
    h.iter_mut().for_each(|x| *x = act.apply(*x));
    if let (Some(w2), Some(b2)) = (params.w_x2.as_ref(), params.b_x2.as_ref()) {
        h = crate::mime::affine(w2, &h, Some(b2))
            .into_iter()
            .map(|x| act.apply(x))
            .collect();
    }
    h
}

/// Trainable scalars of a baseline embedder with width `b`.
pub fn count_params_baseline(kind: BaselineKind, b: usize, n_dx: usize, n_tx: usize) -> usize {
    let first = b * (n_dx + n_tx) + b;
    match kind.layers() {
        0 => 0,
        1 => first,
        _ => first + b * b + b,
    }
}
