use std::collections::HashMap;

use crate::error::{Error, Result};

/// Bidirectional map between code strings and dense indices, for the
/// diagnosis set and the treatment set separately.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeVocab {
    dx_codes: Vec<String>,
    tx_codes: Vec<String>,
    dx_index: HashMap<String, usize>,
    tx_index: HashMap<String, usize>,
}

impl CodeVocab {
    pub fn new(dx_codes: Vec<String>, tx_codes: Vec<String>) -> Result<Self> {
        if dx_codes.is_empty() || tx_codes.is_empty() {
            return Err(Error::Invalid(
                "vocabulary needs at least one diagnosis and one treatment code".into(),
            ));
        }
        let dx_index = index_of(&dx_codes, "diagnosis")?;
        let tx_index = index_of(&tx_codes, "treatment")?;
        Ok(CodeVocab {
            dx_codes,
            tx_codes,
            dx_index,
            tx_index,
        })
    }

    /// Vocabulary with generated names `D0..` and `T0..`.
    pub fn synthetic(n_dx: usize, n_tx: usize) -> Result<Self> {
        Self::new(
            (0..n_dx).map(|i| format!("D{i}")).collect(),
            (0..n_tx).map(|i| format!("T{i}")).collect(),
        )
    }

    pub fn n_dx(&self) -> usize {
        self.dx_codes.len()
    }

    pub fn n_tx(&self) -> usize {
        self.tx_codes.len()
    }

    /// Width of a flattened visit vector, `|A| + |B|`.
    pub fn n_codes(&self) -> usize {
        self.n_dx() + self.n_tx()
    }

    pub fn dx_codes(&self) -> &[String] {
        &self.dx_codes
    }

    pub fn tx_codes(&self) -> &[String] {
        &self.tx_codes
    }

    pub fn dx_code(&self, i: usize) -> &str {
        &self.dx_codes[i]
    }

    pub fn tx_code(&self, i: usize) -> &str {
        &self.tx_codes[i]
    }

    pub fn dx_index(&self, code: &str) -> Option<usize> {
        self.dx_index.get(code).copied()
    }

    pub fn tx_index(&self, code: &str) -> Option<usize> {
        self.tx_index.get(code).copied()
    }
}

fn index_of(codes: &[String], kind: &str) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(codes.len());
    for (i, c) in codes.iter().enumerate() {
        if map.insert(c.clone(), i).is_some() {
            return Err(Error::Invalid(format!("duplicate {kind} code {c:?}")));
        }
    }
    Ok(map)
}

/// One diagnosis code and its own copy of the treatments ordered for it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DxObject {
    pub dx: usize,
    pub tx: Vec<usize>,
}

impl DxObject {
    pub fn new(dx: usize, tx: Vec<usize>) -> Self {
        DxObject { dx, tx }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Visit {
    pub objects: Vec<DxObject>,
}

impl Visit {
    pub fn new(objects: Vec<DxObject>) -> Self {
        Visit { objects }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    /// Sorted, de-duplicated diagnosis codes of the visit.
    pub fn dx_set(&self) -> Vec<usize> {
        let mut dx: Vec<usize> = self.objects.iter().map(|o| o.dx).collect();
        dx.sort_unstable();
        dx.dedup();
        dx
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patient {
    pub id: String,
    pub visits: Vec<Visit>,
    pub hf_label: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cohort {
    pub vocab: CodeVocab,
    pub patients: Vec<Patient>,
    pub provenance: String,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    /// Same vocabulary, the listed patients in the listed order.
    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            vocab: self.vocab.clone(),
            patients: indices.iter().map(|&i| self.patients[i].clone()).collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn filtered(&self, keep: impl Fn(&Patient) -> bool, note: &str) -> Cohort {
        Cohort {
            vocab: self.vocab.clone(),
            patients: self.patients.iter().filter(|p| keep(p)).cloned().collect(),
            provenance: if self.provenance.is_empty() {
                note.to_string()
            } else {
                format!("{}; {note}", self.provenance)
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.patients {
            validate_patient(p, &self.vocab)?;
        }
        Ok(())
    }

    /// Fraction of patients with a positive label among labelled ones.
    pub fn prevalence(&self) -> Option<f64> {
        let labels: Vec<bool> = self.patients.iter().filter_map(|p| p.hf_label).collect();
        if labels.is_empty() {
            return None;
        }
        Some(labels.iter().filter(|&&y| y).count() as f64 / labels.len() as f64)
    }
}

pub fn validate_patient(p: &Patient, vocab: &CodeVocab) -> Result<()> {
    if p.visits.is_empty() {
        return Err(Error::Invalid(format!("patient {:?} has no visits", p.id)));
    }
    for (t, v) in p.visits.iter().enumerate() {
        if v.objects.is_empty() {
            return Err(Error::Invalid(format!(
                "patient {:?} visit {t} has no diagnosis objects",
                p.id
            )));
        }
        for o in &v.objects {
            if o.dx >= vocab.n_dx() {
                return Err(Error::Invalid(format!(
                    "patient {:?} visit {t}: diagnosis index {} out of range {}",
                    p.id,
                    o.dx,
                    vocab.n_dx()
                )));
            }
            if let Some(&m) = o.tx.iter().find(|&&m| m >= vocab.n_tx()) {
                return Err(Error::Invalid(format!(
                    "patient {:?} visit {t}: treatment index {m} out of range {}",
                    p.id,
                    vocab.n_tx()
                )));
            }
        }
    }
    Ok(())
}
