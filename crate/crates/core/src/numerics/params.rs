use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a tensor is used for; decides L2 membership and initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamRole {
    Embedding,
    Weight,
    Bias,
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    roles: Vec<ParamRole>,
    values: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, role: ParamRole, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            self.id(&name).is_none(),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name);
        self.roles.push(role);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn role(&self, id: ParamId) -> ParamRole {
        self.roles[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.id(name).map(|id| &mut self.values[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(Matrix::sum_squares)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            grads: self
                .values
                .iter()
                .map(|v| Matrix::zeros(v.rows(), v.cols()))
                .collect(),
        }
    }
}

/// One gradient tensor per parameter, aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn check_matches(&self, params: &ParamSet) -> Result<()> {
        if self.grads.len() != params.len() {
            return Err(Error::Config(format!(
                "gradient holds {} tensors, parameter set holds {}",
                self.grads.len(),
                params.len()
            )));
        }
        for (id, g) in self.iter() {
            let p = params.get(id);
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    context: format!("gradient for {}", params.name(id)),
                    expected: p.shape(),
                    actual: g.shape(),
                });
            }
        }
        Ok(())
    }
}
