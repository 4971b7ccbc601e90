//! Evaluation of trained models and the model × dataset × fold grids.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::BaselineKind;
use crate::ehr::{slice_by_complexity, slice_by_max_visits, split_folds, Cohort, Patient};
use crate::error::{Error, Result};
use crate::metrics::{
    pr_auc, precision_at_k_by_group, recall_at_k, roc_auc, EvalReport, FoldMetrics, FreqGroups,
};
use crate::model::{Model, ModelKind, Objective, Task};
use crate::numerics::{derive_seed, grad_check, GradCheckReport};
use crate::synth::{generate, GenConfig};
use crate::trainer::{train, TrainConfig};

pub const RECALL_KS: [usize; 3] = [5, 10, 20];
const SPLIT_STREAM: u64 = 0x5911;

/// Seed of the fold splits for a run seed.
pub fn split_seed(seed: u64) -> u64 {
    derive_seed(seed, SPLIT_STREAM)
}

/// Training seed of one fold, so every fold starts from its own init.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    derive_seed(seed, fold as u64)
}

/// `(model prediction steps, true next-visit codes)` for every SDP target.
fn sdp_targets(patients: &[&Patient]) -> Vec<Vec<usize>> {
    patients
        .iter()
        .flat_map(|p| p.visits[1..].iter().map(|v| v.dx_set()))
        .collect()
}

fn sdp_metrics(
    predictions: &[Vec<f64>],
    truths: &[Vec<usize>],
    groups: &FreqGroups,
    test_loss: Option<f64>,
) -> Result<FoldMetrics> {
    if truths.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "recall@k",
            reason: "no evaluation patient has a following visit",
        });
    }
    let mut recall_at = BTreeMap::new();
    for k in RECALL_KS {
        let mut total = 0.0;
        for (p, t) in predictions.iter().zip(truths) {
            total += recall_at_k(p, t, k)?;
        }
        recall_at.insert(k, total / truths.len() as f64);
    }
    Ok(FoldMetrics {
        test_loss,
        roc_auc: None,
        pr_auc: None,
        recall_at,
        precision_at_5: precision_at_k_by_group(predictions, truths, groups, 5)?,
    })
}

/// Test-split metrics of a trained model. `train` supplies the frequency
/// groups for the sequential task.
pub fn evaluate(model: &Model, train: &Cohort, test: &Cohort, task: Task) -> Result<FoldMetrics> {
    model.dims().check_vocab(&test.vocab)?;
    let refs: Vec<&Patient> = test.patients.iter().collect();
    let test_loss = model.task_loss(&refs, task)?;
    match task {
        Task::Hf => {
            let scores = model.predict_hf(&refs);
            let labels: Vec<bool> = refs
                .iter()
                .map(|p| p.hf_label.expect("checked by task_loss"))
                .collect();
            let defined = |r: Result<f64>| match r {
                Ok(v) => Some(v),
                Err(e) => {
                    log::warn!("{e}");
                    None
                }
            };
            Ok(FoldMetrics {
                test_loss: Some(test_loss),
                roc_auc: defined(roc_auc(&scores, &labels)),
                pr_auc: defined(pr_auc(&scores, &labels)),
                recall_at: BTreeMap::new(),
                precision_at_5: Vec::new(),
            })
        }
        Task::Sdp => {
            let predictions: Vec<Vec<f64>> =
                model.predict_sdp(&refs).into_iter().flatten().collect();
            let truths = sdp_targets(&refs);
            sdp_metrics(
                &predictions,
                &truths,
                &FreqGroups::from_training(train),
                Some(test_loss),
            )
        }
    }
}

/// Scores every diagnosis by its training-set visit frequency, at every step.
pub fn frequency_baseline(train: &Cohort, test: &Cohort) -> Result<FoldMetrics> {
    let mut counts = vec![0.0; train.vocab.n_dx()];
    for v in train.patients.iter().flat_map(|p| &p.visits) {
        for d in v.dx_set() {
            counts[d] += 1.0;
        }
    }
    let refs: Vec<&Patient> = test.patients.iter().collect();
    let truths = sdp_targets(&refs);
    let predictions = vec![counts; truths.len()];
    sdp_metrics(
        &predictions,
        &truths,
        &FreqGroups::from_training(train),
        None,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Complexity,
    Datasize,
    Sdp,
}

/// One row of the model grid; a bare string names the kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelEntry {
    Kind(ModelKind),
    Spec {
        kind: ModelKind,
        #[serde(default)]
        lambda_aux: Option<f64>,
        #[serde(default)]
        label: Option<String>,
    },
}

impl ModelEntry {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelEntry::Kind(k) | ModelEntry::Spec { kind: k, .. } => *k,
        }
    }

    pub fn label(&self) -> String {
        match self {
            ModelEntry::Spec { label: Some(l), .. } => l.clone(),
            other => other.kind().to_string(),
        }
    }

    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.model_kind = self.kind();
        if let ModelEntry::Spec {
            lambda_aux: Some(l),
            ..
        } = self
        {
            cfg.lambda_aux = *l;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub models: Vec<ModelEntry>,
    pub n_folds: usize,
    /// Visit-complexity ranges `[lo, hi)` of the complexity datasets.
    pub complexity_ranges: Vec<[f64; 2]>,
    /// Complexity datasets keep patients with fewer visits than this.
    pub max_visits: usize,
    /// Nested maximum sequence lengths of the data-size datasets.
    pub t_max: Vec<usize>,
    /// Keep at most this many training patients per fold.
    pub max_train_patients: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let b = |k| ModelEntry::Kind(ModelKind::Baseline(k));
        ExperimentConfig {
            gen: GenConfig::default(),
            train: TrainConfig {
                max_iterations: 2000,
                embed_dim: 32,
                ..TrainConfig::default()
            },
            models: vec![
                ModelEntry::Kind(ModelKind::Mime),
                b(BaselineKind::Raw),
                b(BaselineKind::Linear),
                b(BaselineKind::Tanh),
                b(BaselineKind::TanhMlp),
            ],
            n_folds: 5,
            complexity_ranges: vec![[0.0, 0.15], [0.15, 0.30], [0.30, 1.0]],
            max_visits: 20,
            t_max: vec![10, 20, 30, 150],
            max_train_patients: None,
        }
    }
}

impl ExperimentConfig {
    /// Applies a command-line seed to both generation and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.gen.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.train.validate()?;
        if self.models.is_empty() || self.n_folds == 0 {
            return Err(Error::Config("need at least one model and one fold".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub model: String,
    pub dataset: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellFailure {
    pub model: String,
    pub dataset: String,
    pub fold: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetInfo {
    pub name: String,
    pub patients: usize,
    pub prevalence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub datasets: Vec<DatasetInfo>,
    /// `(dataset, model label, report)` in grid order.
    pub reports: Vec<(String, String, EvalReport)>,
    pub failures: Vec<CellFailure>,
}

impl ExperimentResult {
    pub fn report(&self, dataset: &str, model: &str) -> Option<&EvalReport> {
        self.reports
            .iter()
            .find(|(d, m, _)| d == dataset && m == model)
            .map(|(_, _, r)| r)
    }

    pub fn rows(&self) -> Vec<ResultRow> {
        let mut rows = Vec::new();
        for (dataset, model, report) in &self.reports {
            for (metric, s) in &report.summary {
                rows.push(ResultRow {
                    model: model.clone(),
                    dataset: dataset.clone(),
                    metric: metric.clone(),
                    mean: s.mean,
                    std: s.std,
                    folds: s.n,
                });
            }
        }
        rows
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "model,dataset,metric,mean,std,folds")?;
        for r in self.rows() {
            writeln!(
                w,
                "{},{},{},{:.6},{:.6},{}",
                r.model, r.dataset, r.metric, r.mean, r.std, r.folds
            )?;
        }
        Ok(())
    }
}

/// The datasets an experiment runs on, built from one generated cohort.
pub fn build_datasets(
    kind: ExperimentKind,
    cfg: &ExperimentConfig,
) -> Result<Vec<(String, Cohort)>> {
    let (cohort, _) = generate(&cfg.gen)?;
    Ok(match kind {
        ExperimentKind::Complexity => cfg
            .complexity_ranges
            .iter()
            .enumerate()
            .map(|(i, [lo, hi])| {
                slice_by_complexity(&cohort, *lo, *hi, Some(cfg.max_visits))
                    .map(|c| (format!("D{}", i + 1), c))
            })
            .collect::<Result<_>>()?,
        ExperimentKind::Datasize => cfg
            .t_max
            .iter()
            .enumerate()
            .map(|(i, &t)| slice_by_max_visits(&cohort, t).map(|c| (format!("E{}", i + 1), c)))
            .collect::<Result<_>>()?,
        ExperimentKind::Sdp => vec![("all".to_string(), cohort)],
    })
}

enum CellModel<'a> {
    Trained(&'a ModelEntry),
    Frequency,
}

struct Cell<'a> {
    dataset: usize,
    model: CellModel<'a>,
    label: String,
    fold: usize,
}

/// Runs every (dataset, model, fold) cell. Cells are independent and seeded
/// from the configuration, so the result does not depend on scheduling.
pub fn run_experiment(kind: ExperimentKind, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let task = match kind {
        ExperimentKind::Sdp => Task::Sdp,
        _ => Task::Hf,
    };
    let datasets = build_datasets(kind, cfg)?;
    let splits: Vec<Result<Vec<(Cohort, Cohort, Cohort)>>> = datasets
        .iter()
        .map(|(_, c)| {
            let seed = split_seed(cfg.train.seed);
            let folds = split_folds(c, seed, cfg.n_folds, crate::ehr::DEFAULT_RATIOS)?;
            Ok(folds
                .iter()
                .map(|f| {
                    let (mut tr, va, te) = f.cohorts(c);
                    if let Some(n) = cfg.max_train_patients {
                        tr.patients.truncate(n);
                    }
                    (tr, va, te)
                })
                .collect())
        })
        .collect();

    let mut cells = Vec::new();
    for d in 0..datasets.len() {
        for entry in &cfg.models {
            for fold in 0..cfg.n_folds {
                cells.push(Cell {
                    dataset: d,
                    model: CellModel::Trained(entry),
                    label: entry.label(),
                    fold,
                });
            }
        }
        if task == Task::Sdp {
            for fold in 0..cfg.n_folds {
                cells.push(Cell {
                    dataset: d,
                    model: CellModel::Frequency,
                    label: "frequency".into(),
                    fold,
                });
            }
        }
    }

    let outcomes: Vec<Result<FoldMetrics>> = cells
        .par_iter()
        .map(|cell| {
            let folds = splits[cell.dataset]
                .as_ref()
                .map_err(|e| Error::Invalid(e.to_string()))?;
            let (tr, va, te) = &folds[cell.fold];
            match cell.model {
                CellModel::Frequency => frequency_baseline(tr, te),
                CellModel::Trained(entry) => {
                    let mut tc = entry.train_config(&cfg.train);
                    tc.task = task;
                    tc.seed = fold_seed(cfg.train.seed, cell.fold);
                    let (model, log) = train(tr, va, &tc)?;
                    log::info!(
                        "{} {} fold {}: best iteration {} ({:.1}s)",
                        datasets[cell.dataset].0,
                        cell.label,
                        cell.fold,
                        log.best_iteration,
                        log.wall_seconds
                    );
                    evaluate(&model, tr, te, task)
                }
            }
        })
        .collect();

    let mut grouped: BTreeMap<(usize, usize), Vec<FoldMetrics>> = BTreeMap::new();
    let mut labels: Vec<(usize, String)> = Vec::new();
    let mut failures = Vec::new();
    let mut key_of: BTreeMap<(usize, String), usize> = BTreeMap::new();
    for (cell, outcome) in cells.iter().zip(outcomes) {
        let next = key_of.len();
        let key = *key_of
            .entry((cell.dataset, cell.label.clone()))
            .or_insert_with(|| {
                labels.push((cell.dataset, cell.label.clone()));
                next
            });
        match outcome {
            Ok(m) => grouped.entry((cell.dataset, key)).or_default().push(m),
            Err(e) => failures.push(CellFailure {
                model: cell.label.clone(),
                dataset: datasets[cell.dataset].0.clone(),
                fold: cell.fold,
                message: e.to_string(),
            }),
        }
    }
    let mut reports = Vec::new();
    for (key, (d, label)) in labels.into_iter().enumerate() {
        if let Some(folds) = grouped.remove(&(d, key)) {
            reports.push((datasets[d].0.clone(), label, EvalReport::from_folds(folds)));
        }
    }
    Ok(ExperimentResult {
        datasets: datasets
            .iter()
            .map(|(n, c)| DatasetInfo {
                name: n.clone(),
                patients: c.len(),
                prevalence: c.prevalence(),
            })
            .collect(),
        reports,
        failures,
    })
}

/// Finite-difference check of one model on a tiny generated batch, with the
/// HF and sequential heads, auxiliary loss and L2 all active.
pub fn end_to_end_gradcheck(
    kind: ModelKind,
    dim: usize,
    n_patients: usize,
    lambda_aux: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let gen = GenConfig {
        seed,
        n_patients,
        n_dx: 6,
        n_tx: 5,
        mean_visits: 3.0,
        mean_tx_per_dx: 1.0,
        ..GenConfig::default()
    };
    let (cohort, _) = generate(&gen)?;
    let batch: Vec<&Patient> = cohort.patients.iter().collect();
    let model = Model::new(kind, dim, &cohort.vocab, seed)?;
    let hf = Objective {
        task: Task::Hf,
        lambda_aux,
        l2: 1e-4,
        l2_embeddings: false,
    };
    let sdp = Objective::task_only(Task::Sdp);
    // validate once so the closure can unwrap
    {
        let mut tape = crate::numerics::Tape::new(model.params());
        model.record_loss(&mut tape, &batch, &hf)?;
    }
    grad_check(model.params(), 1e-5, |tape| {
        let a = model.record_loss(tape, &batch, &hf).expect("validated");
        let b = model.record_loss(tape, &batch, &sdp).expect("validated");
        tape.add(a.total, b.task)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            gen: GenConfig {
                n_patients: 150,
                n_dx: 10,
                n_tx: 6,
                mean_visits: 4.0,
                ..GenConfig::default()
            },
            train: TrainConfig {
                max_iterations: 20,
                eval_every: 10,
                embed_dim: 4,
                ..TrainConfig::default()
            },
            models: vec![
                ModelEntry::Kind(ModelKind::Mime),
                ModelEntry::Kind(ModelKind::Baseline(BaselineKind::Linear)),
            ],
            n_folds: 2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn model_entries_parse_both_forms() {
        let m: Vec<ModelEntry> = serde_json::from_str(
            r#"["tanh", {"kind": "mime", "lambda_aux": 0.0, "label": "mime_noaux"}]"#,
        )
        .unwrap();
        assert_eq!(m[0].label(), "tanh");
        assert_eq!(m[1].label(), "mime_noaux");
        assert_eq!(m[1].train_config(&TrainConfig::default()).lambda_aux, 0.0);
    }

    #[test]
    fn datasize_datasets_are_nested() {
        let cfg = tiny_config();
        let sets = build_datasets(ExperimentKind::Datasize, &cfg).unwrap();
        let sizes: Vec<usize> = sets.iter().map(|(_, c)| c.len()).collect();
        assert_eq!(sizes.len(), 4);
        assert!(sizes.windows(2).all(|w| w[0] <= w[1]), "{sizes:?}");
    }

    #[test]
    fn experiment_csv_is_reproducible() {
        let cfg = tiny_config();
        let run = || {
            let r = run_experiment(ExperimentKind::Datasize, &cfg).unwrap();
            let mut buf = Vec::new();
            r.write_csv(&mut buf).unwrap();
            (r, buf)
        };
        let (r1, a) = run();
        let (_, b) = run();
        assert_eq!(a, b);
        assert!(r1.failures.is_empty(), "{:?}", r1.failures);
        assert_eq!(r1.reports.len(), 8);
    }

    #[test]
    fn sdp_grid_includes_frequency_rows() {
        let mut cfg = tiny_config();
        cfg.models.truncate(1);
        let r = run_experiment(ExperimentKind::Sdp, &cfg).unwrap();
        let freq = r.report("all", "frequency").unwrap();
        assert!(freq.summary.contains_key("recall@5"));
        assert!(r.report("all", "mime").is_some());
    }

    #[test]
    fn small_gradcheck_passes() {
        let r = end_to_end_gradcheck(ModelKind::Mime, 3, 2, 0.015, 4).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
