use std::collections::BTreeSet;

use super::{Cohort, Patient, Visit};
use crate::error::{Error, Result};

/// A visit is complex when its diagnosis objects carry at least two
/// distinct treatment sets.
pub fn is_complex_visit(visit: &Visit) -> bool {
    let sets: BTreeSet<BTreeSet<usize>> = visit
        .objects
        .iter()
        .map(|o| o.tx.iter().copied().collect())
        .collect();
    sets.len() >= 2
}

/// Fraction of the patient's visits that are complex.
pub fn visit_complexity(patient: &Patient) -> f64 {
    let complex = patient
        .visits
        .iter()
        .filter(|v| is_complex_visit(v))
        .count();
    complex as f64 / patient.visits.len() as f64
}

/// Patients with `lo <= complexity < hi` (inclusive at `hi == 1.0`) and
/// strictly fewer than `max_visits` visits when a cap is given.
pub fn slice_by_complexity(
    cohort: &Cohort,
    lo: f64,
    hi: f64,
    max_visits: Option<usize>,
) -> Result<Cohort> {
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::Config(format!(
            "complexity slice needs 0 <= lo < hi <= 1, got [{lo}, {hi})"
        )));
    }
    let note = match max_visits {
        Some(m) => format!("complexity in [{lo}, {hi}), visits < {m}"),
        None => format!("complexity in [{lo}, {hi})"),
    };
    let out = cohort.filtered(
        |p| {
            let c = visit_complexity(p);
            let in_range = c >= lo && (c < hi || (hi >= 1.0 && c <= 1.0));
            in_range && max_visits.is_none_or(|m| p.visits.len() < m)
        },
        &note,
    );
    if out.is_empty() {
        log::warn!("complexity slice [{lo}, {hi}) selected no patients");
    }
    Ok(out)
}

/// Patients with at most `t_max` visits.
pub fn slice_by_max_visits(cohort: &Cohort, t_max: usize) -> Result<Cohort> {
    if t_max == 0 {
        return Err(Error::Config("t_max must be at least 1".into()));
    }
    Ok(cohort.filtered(|p| p.visits.len() <= t_max, &format!("visits <= {t_max}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{CodeVocab, DxObject};

    fn patient(visits: Vec<Visit>) -> Patient {
        Patient {
            id: "p".into(),
            visits,
            hf_label: None,
        }
    }

    #[test]
    fn single_object_visits_are_simple() {
        let p = patient(vec![
            Visit::new(vec![DxObject::new(0, vec![1, 2])]),
            Visit::new(vec![DxObject::new(3, vec![])]),
        ]);
        assert_eq!(visit_complexity(&p), 0.0);
    }

    #[test]
    fn fever_without_and_cough_with_treatments_is_complex() {
        let v = Visit::new(vec![DxObject::new(2, vec![]), DxObject::new(1, vec![0, 1])]);
        assert!(is_complex_visit(&v));
    }

    #[test]
    fn identical_treatment_sets_are_not_complex() {
        let v = Visit::new(vec![
            DxObject::new(0, vec![1, 2]),
            DxObject::new(3, vec![2, 1, 1]),
        ]);
        assert!(!is_complex_visit(&v));
    }

    #[test]
    fn one_complex_visit_of_four() {
        let simple = Visit::new(vec![DxObject::new(0, vec![]), DxObject::new(1, vec![])]);
        let complex = Visit::new(vec![DxObject::new(0, vec![4]), DxObject::new(1, vec![])]);
        let p = patient(vec![simple.clone(), complex, simple.clone(), simple]);
        assert_eq!(visit_complexity(&p), 0.25);
    }

    #[test]
    fn slice_bounds_validated() {
        let cohort = Cohort {
            vocab: CodeVocab::synthetic(1, 1).unwrap(),
            patients: vec![],
            provenance: String::new(),
        };
        assert!(slice_by_complexity(&cohort, 0.3, 0.3, None).is_err());
        assert!(slice_by_complexity(&cohort, 0.0, 1.1, None).is_err());
        assert!(slice_by_max_visits(&cohort, 0).is_err());
    }
}
