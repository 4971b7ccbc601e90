//! Synthetic cohorts whose labels depend on which treatments are attached to
//! which diagnosis inside a visit.
//!
//! Diagnosis codes follow a Zipf(1) frequency profile over `A`; each
//! diagnosis draws its treatments from a private preference table over five
//! treatments. Labels come from [`InteractionRule`]s: a rule fires on a
//! diagnosis object when the diagnosis matches, every `tx_present` code is
//! attached to that object and no `tx_absent` code is. A flattened visit can
//! only see that the codes co-occur somewhere in the visit.

use std::collections::BTreeSet;

use rand::Rng as _;
use rand_distr::{Distribution, Geometric, Poisson, Zipf};
use serde::{Deserialize, Serialize};

use crate::ehr::{visit_complexity, CodeVocab, Cohort, DxObject, Patient, Visit};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, sub_rng, Rng};

/// Treatments each diagnosis may draw from.
pub const TREATMENTS_PER_DX: usize = 5;

const TABLE_STREAM: u64 = 0xC0DE_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub n_patients: usize,
    pub n_dx: usize,
    pub n_tx: usize,
    /// Expected number of visits per patient (`1 + Geometric`).
    pub mean_visits: f64,
    pub mean_dx_per_visit: f64,
    pub mean_tx_per_dx: f64,
    pub n_interaction_rules: usize,
    pub interaction_weight: f64,
    /// Label probability when no rule fires.
    pub base_rate: f64,
    /// Probability that a diagnosis after the first visit is the successor
    /// of a diagnosis in the previous visit instead of a fresh Zipf draw.
    pub markov_strength: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 1,
            n_patients: 2000,
            n_dx: 50,
            n_tx: 30,
            mean_visits: 8.0,
            mean_dx_per_visit: 1.93,
            mean_tx_per_dx: 0.33,
            n_interaction_rules: 3,
            interaction_weight: 2.0,
            base_rate: 0.1,
            markov_strength: 0.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_patients == 0 || self.n_dx == 0 || self.n_tx == 0 {
            return bad("n_patients, n_dx and n_tx must be at least 1");
        }
        if self.mean_visits.is_nan() || self.mean_visits < 1.0 {
            return bad("mean_visits must be at least 1");
        }
        if self.mean_dx_per_visit.is_nan() || self.mean_dx_per_visit < 1.0 {
            return bad("mean_dx_per_visit must be at least 1");
        }
        if self.mean_tx_per_dx.is_nan() || self.mean_tx_per_dx < 0.0 {
            return bad("mean_tx_per_dx must be non-negative");
        }
        if !(self.base_rate > 0.0 && self.base_rate < 1.0) {
            return bad("base_rate must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.markov_strength) {
            return bad("markov_strength must lie in [0, 1]");
        }
        if !self.interaction_weight.is_finite() {
            return bad("interaction_weight must be finite");
        }
        if self.n_interaction_rules > 0 && self.n_tx < 2 {
            return bad("interaction rules need at least two treatment codes");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRule {
    pub dx: usize,
    pub tx_present: BTreeSet<usize>,
    pub tx_absent: BTreeSet<usize>,
    pub weight: f64,
}

impl InteractionRule {
    pub fn new(
        dx: usize,
        tx_present: impl IntoIterator<Item = usize>,
        tx_absent: impl IntoIterator<Item = usize>,
        weight: f64,
    ) -> Result<Self> {
        let tx_present: BTreeSet<usize> = tx_present.into_iter().collect();
        let tx_absent: BTreeSet<usize> = tx_absent.into_iter().collect();
        if !tx_present.is_disjoint(&tx_absent) {
            return Err(Error::Config(
                "rule tx_present and tx_absent must be disjoint".into(),
            ));
        }
        Ok(InteractionRule {
            dx,
            tx_present,
            tx_absent,
            weight,
        })
    }

    pub fn fires(&self, obj: &DxObject) -> bool {
        obj.dx == self.dx
            && self.tx_present.iter().all(|m| obj.tx.contains(m))
            && !self.tx_absent.iter().any(|m| obj.tx.contains(m))
    }
}

/// Ground truth behind a generated cohort's labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelModel {
    pub base_logit: f64,
    pub rules: Vec<InteractionRule>,
}

impl LabelModel {
    /// `base_logit + Σ_visits Σ_objects Σ_rules weight · fires`.
    pub fn logit(&self, patient: &Patient) -> f64 {
        let mut logit = self.base_logit;
        for v in &patient.visits {
            for o in &v.objects {
                for r in &self.rules {
                    if r.fires(o) {
                        logit += r.weight;
                    }
                }
            }
        }
        logit
    }
}

/// Summary statistics in the layout of a cohort description table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortStats {
    pub patients: usize,
    pub visits: usize,
    pub avg_visits_per_patient: f64,
    pub avg_dx_per_visit: f64,
    pub max_dx_per_visit: usize,
    pub avg_tx_per_dx: f64,
    pub max_tx_per_dx: usize,
    pub prevalence: Option<f64>,
}

pub fn cohort_stats(cohort: &Cohort) -> CohortStats {
    let visits: usize = cohort.patients.iter().map(|p| p.visits.len()).sum();
    let objects: Vec<&DxObject> = cohort
        .patients
        .iter()
        .flat_map(|p| p.visits.iter().flat_map(|v| v.objects.iter()))
        .collect();
    let total_tx: usize = objects.iter().map(|o| o.tx.len()).sum();
    let max_dx = cohort
        .patients
        .iter()
        .flat_map(|p| p.visits.iter().map(Visit::len))
        .max()
        .unwrap_or(0);
    CohortStats {
        patients: cohort.len(),
        visits,
        avg_visits_per_patient: visits as f64 / cohort.len().max(1) as f64,
        avg_dx_per_visit: objects.len() as f64 / visits.max(1) as f64,
        max_dx_per_visit: max_dx,
        avg_tx_per_dx: total_tx as f64 / objects.len().max(1) as f64,
        max_tx_per_dx: objects.iter().map(|o| o.tx.len()).max().unwrap_or(0),
        prevalence: cohort.prevalence(),
    }
}

struct Tables {
    /// Per diagnosis: candidate treatments and cumulative weights.
    tx_pref: Vec<(Vec<usize>, Vec<f64>)>,
    successor: Vec<usize>,
    rules: Vec<InteractionRule>,
}

fn build_tables(cfg: &GenConfig) -> Result<Tables> {
    let mut rng = sub_rng(cfg.seed, TABLE_STREAM);
    let k = TREATMENTS_PER_DX.min(cfg.n_tx);
    // Popular treatments are shared by many diagnoses.
    let tx_zipf = Zipf::new(cfg.n_tx as f64, 1.0).expect("valid zipf");
    let tx_pref: Vec<(Vec<usize>, Vec<f64>)> = (0..cfg.n_dx)
        .map(|_| {
            let mut chosen: Vec<usize> = Vec::with_capacity(k);
            while chosen.len() < k {
                let m = tx_zipf.sample(&mut rng) as usize - 1;
                if !chosen.contains(&m) {
                    chosen.push(m);
                }
            }
            let mut acc = 0.0;
            let cumulative = (0..k)
                .map(|_| {
                    acc += rng.random_range(0.1..1.0);
                    acc
                })
                .collect();
            (chosen, cumulative)
        })
        .collect();

    let mut successor: Vec<usize> = (0..cfg.n_dx).collect();
    use rand::seq::SliceRandom;
    successor.shuffle(&mut rng);

    // Rules sit on the most frequent diagnoses. The required treatment is the
    // one in the diagnosis' table that other diagnoses share the most, so
    // co-occurrence without attachment is common.
    let share = |m: usize| tx_pref.iter().filter(|(c, _)| c.contains(&m)).count();
    let n_rules = cfg.n_interaction_rules.min(cfg.n_dx);
    let mut rules = Vec::with_capacity(n_rules);
    for (dx, (cands, _)) in tx_pref.iter().enumerate().take(n_rules) {
        let mut ranked = cands.clone();
        ranked.sort_by_key(|&m| (std::cmp::Reverse(share(m)), m));
        let present = ranked[0];
        let absent = ranked.get(1).copied();
        let weight = cfg.interaction_weight;
        rules.push(InteractionRule::new(dx, [present], absent, weight)?);
    }
    Ok(Tables {
        tx_pref,
        successor,
        rules,
    })
}

fn draw_tx(rng: &mut Rng, pref: &(Vec<usize>, Vec<f64>), count: usize) -> Vec<usize> {
    let (cands, cum) = pref;
    let total = *cum.last().expect("non-empty table");
    let mut tx: Vec<usize> = Vec::with_capacity(count);
    for _ in 0..count.min(cands.len()) {
        // draw without replacement within one diagnosis object
        loop {
            let u = rng.random_range(0.0..total);
            let pick = cands[cum.iter().position(|&c| u < c).unwrap_or(cands.len() - 1)];
            if !tx.contains(&pick) {
                tx.push(pick);
                break;
            }
        }
    }
    tx
}

fn generate_patient(cfg: &GenConfig, tables: &Tables, index: usize) -> PatientDraw {
    let mut rng = sub_rng(cfg.seed, index as u64);
    let visit_gap = Geometric::new(1.0 / cfg.mean_visits).expect("p in (0, 1]");
    let extra_dx = Poisson::new(cfg.mean_dx_per_visit - 1.0).ok();
    let tx_count = Poisson::new(cfg.mean_tx_per_dx).ok();
    let dx_zipf = Zipf::new(cfg.n_dx as f64, 1.0).expect("valid zipf");

    let n_visits = 1 + visit_gap.sample(&mut rng) as usize;
    let mut visits: Vec<Visit> = Vec::with_capacity(n_visits);
    for t in 0..n_visits {
        let extra = extra_dx.map_or(0, |d| d.sample(&mut rng) as usize);
        let n_obj = (1 + extra).min(cfg.n_dx);
        let mut dx_codes: Vec<usize> = Vec::with_capacity(n_obj);
        let mut collisions = 0;
        while dx_codes.len() < n_obj {
            // successor chains can run out of distinct codes; fall back to Zipf
            let markov = t > 0 && collisions < 8 && rng.random_bool(cfg.markov_strength);
            let d = match visits.last() {
                Some(prev) if markov => {
                    let src = prev.objects[rng.random_range(0..prev.objects.len())].dx;
                    tables.successor[src]
                }
                _ => dx_zipf.sample(&mut rng) as usize - 1,
            };
            if dx_codes.contains(&d) {
                collisions += 1;
            } else {
                dx_codes.push(d);
            }
        }
        let objects = dx_codes
            .into_iter()
            .map(|d| {
                let n_tx = tx_count.map_or(0, |p| p.sample(&mut rng) as usize);
                DxObject::new(d, draw_tx(&mut rng, &tables.tx_pref[d], n_tx))
            })
            .collect();
        visits.push(Visit::new(objects));
    }
    let label_draw: f64 = rng.random();
    PatientDraw { visits, label_draw }
}

struct PatientDraw {
    visits: Vec<Visit>,
    label_draw: f64,
}

/// Generates a cohort and the label model that produced its labels.
pub fn generate(cfg: &GenConfig) -> Result<(Cohort, LabelModel)> {
    cfg.validate()?;
    let tables = build_tables(cfg)?;
    let model = LabelModel {
        base_logit: (cfg.base_rate / (1.0 - cfg.base_rate)).ln(),
        rules: tables.rules.clone(),
    };
    use rayon::prelude::*;
    let patients: Vec<Patient> = (0..cfg.n_patients)
        .into_par_iter()
        .map(|i| {
            let draw = generate_patient(cfg, &tables, i);
            let mut p = Patient {
                id: format!("P{i:06}"),
                visits: draw.visits,
                hf_label: None,
            };
            p.hf_label = Some(draw.label_draw < sigmoid(model.logit(&p)));
            p
        })
        .collect();
    let cohort = Cohort {
        vocab: CodeVocab::synthetic(cfg.n_dx, cfg.n_tx)?,
        patients,
        provenance: format!(
            "synthetic seed={} n={} |A|={} |B|={} rules={} weight={} base_rate={} markov={}",
            cfg.seed,
            cfg.n_patients,
            cfg.n_dx,
            cfg.n_tx,
            model.rules.len(),
            cfg.interaction_weight,
            cfg.base_rate,
            cfg.markov_strength
        ),
    };
    Ok((cohort, model))
}

/// Ten equal-width bins of visit complexity over `[0, 1]`; 1.0 lands in the
/// last bin.
pub fn complexity_profile(cohort: &Cohort) -> [usize; 10] {
    let mut bins = [0usize; 10];
    for p in &cohort.patients {
        let c = visit_complexity(p);
        bins[((c * 10.0) as usize).min(9)] += 1;
    }
    bins
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{flatten_visit, slice_by_complexity};

    #[test]
    fn defaults_hit_dx_per_visit_target() {
        let (cohort, _) = generate(&GenConfig::default()).unwrap();
        let s = cohort_stats(&cohort);
        assert!((s.avg_dx_per_visit - 1.93).abs() <= 0.15, "{s:?}");
        assert!((s.avg_tx_per_dx - 0.33).abs() <= 0.05, "{s:?}");
        assert!((s.avg_visits_per_patient - 8.0).abs() <= 0.5, "{s:?}");
        cohort.validate().unwrap();
    }

    #[test]
    fn null_model_prevalence_matches_base_rate() {
        let cfg = GenConfig {
            n_interaction_rules: 0,
            base_rate: 0.1,
            n_patients: 4000,
            ..GenConfig::default()
        };
        let (cohort, model) = generate(&cfg).unwrap();
        assert!(model.rules.is_empty());
        let p = cohort.prevalence().unwrap();
        assert!((p - 0.10).abs() <= 0.02, "prevalence {p}");
    }

    #[test]
    fn attachment_changes_logit_but_not_flattening() {
        let vocab = CodeVocab::synthetic(10, 10).unwrap();
        let model = LabelModel {
            base_logit: -2.0,
            rules: vec![InteractionRule::new(5, [2], [7], 4.0).unwrap()],
        };
        let attached = Patient {
            id: "a".into(),
            visits: vec![Visit::new(vec![
                DxObject::new(5, vec![2]),
                DxObject::new(3, vec![]),
            ])],
            hf_label: None,
        };
        let detached = Patient {
            id: "b".into(),
            visits: vec![Visit::new(vec![
                DxObject::new(5, vec![]),
                DxObject::new(3, vec![2]),
            ])],
            hf_label: None,
        };
        assert_eq!(model.logit(&attached), -2.0 + 4.0);
        assert_eq!(model.logit(&detached), -2.0);
        assert_eq!(
            flatten_visit(&attached.visits[0], &vocab),
            flatten_visit(&detached.visits[0], &vocab)
        );
        let blocked = Patient {
            id: "c".into(),
            visits: vec![Visit::new(vec![DxObject::new(5, vec![2, 7])])],
            hf_label: None,
        };
        assert_eq!(model.logit(&blocked), -2.0);
    }

    #[test]
    fn rules_reject_overlap() {
        assert!(InteractionRule::new(0, [1, 2], [2], 1.0).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = GenConfig {
            n_patients: 200,
            ..GenConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = GenConfig {
            seed: 2,
            ..cfg.clone()
        };
        assert_ne!(generate(&cfg).unwrap().0, generate(&other).unwrap().0);
    }

    #[test]
    fn single_object_visits_profile_in_first_bin() {
        let cfg = GenConfig {
            n_patients: 300,
            mean_dx_per_visit: 1.0,
            ..GenConfig::default()
        };
        let (cohort, _) = generate(&cfg).unwrap();
        let bins = complexity_profile(&cohort);
        assert_eq!(bins[0], 300);
        assert_eq!(bins.iter().sum::<usize>(), 300);
    }

    #[test]
    fn default_cohort_populates_every_complexity_slice() {
        let (cohort, _) = generate(&GenConfig::default()).unwrap();
        assert_eq!(
            complexity_profile(&cohort).iter().sum::<usize>(),
            cohort.len()
        );
        for (lo, hi) in [(0.0, 0.15), (0.15, 0.30), (0.30, 1.0)] {
            let slice = slice_by_complexity(&cohort, lo, hi, Some(20)).unwrap();
            assert!(!slice.is_empty(), "slice [{lo}, {hi}) empty");
        }
    }

    #[test]
    fn markov_structure_links_consecutive_visits() {
        let cfg = GenConfig {
            n_patients: 300,
            markov_strength: 1.0,
            ..GenConfig::default()
        };
        let (cohort, _) = generate(&cfg).unwrap();
        let tables = build_tables(&cfg).unwrap();
        let (mut linked, mut total) = (0usize, 0usize);
        for p in &cohort.patients {
            for w in p.visits.windows(2) {
                let next: Vec<usize> = w[0]
                    .objects
                    .iter()
                    .map(|o| tables.successor[o.dx])
                    .collect();
                total += w[1].len();
                linked += w[1].objects.iter().filter(|o| next.contains(&o.dx)).count();
            }
        }
        // visits longer than the previous one need fresh draws
        assert!(linked as f64 / total as f64 > 0.7, "{linked}/{total}");
    }
}
