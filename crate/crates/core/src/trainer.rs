//! Minibatch Adam training with validation-loss checkpoint retention.

use std::collections::HashSet;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::{count_params_baseline, BaselineKind};
use crate::ehr::{CodeVocab, Cohort, Patient};
use crate::error::{Error, Result};
use crate::mime::count_params;
use crate::model::{Model, ModelKind, Objective, Task};
use crate::numerics::{derive_seed, sub_rng, AdamState, Tape};

const SHUFFLE_STREAM: u64 = 0xE90C_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub eval_every: usize,
    pub l2: f64,
    /// Weight of the auxiliary code-prediction loss; 0 disables it.
    pub lambda_aux: f64,
    /// Baseline embedding size `b`; MiME's `z` is matched to it unless
    /// `mime_dim` is given.
    pub embed_dim: usize,
    pub mime_dim: Option<usize>,
    /// Apply L2 to the code embedding tables as well.
    pub l2_embeddings: bool,
    pub seed: u64,
    pub task: Task,
    pub model_kind: ModelKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 20,
            max_iterations: 20_000,
            eval_every: 100,
            l2: 1e-4,
            lambda_aux: 0.015,
            embed_dim: 128,
            mime_dim: None,
            l2_embeddings: false,
            seed: 1,
            task: Task::Hf,
            model_kind: ModelKind::Mime,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.eval_every == 0 || self.embed_dim == 0 {
            return bad("batch_size, eval_every and embed_dim must be positive");
        }
        if self.mime_dim == Some(0) {
            return bad("mime_dim must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a non-negative number");
        }
        if !(self.l2 >= 0.0 && self.lambda_aux >= 0.0) {
            return bad("l2 and lambda_aux must be non-negative");
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            task: self.task,
            lambda_aux: self.lambda_aux,
            l2: self.l2,
            l2_embeddings: self.l2_embeddings,
        }
    }

    /// Embedding size the model is built with for this vocabulary.
    pub fn resolved_embed_dim(&self, vocab: &CodeVocab) -> Result<usize> {
        match (self.model_kind, self.mime_dim) {
            (ModelKind::Mime, Some(z)) => Ok(z),
            (ModelKind::Mime, None) => {
                let (a, b) = (vocab.n_dx(), vocab.n_tx());
                let target = count_params_baseline(BaselineKind::Linear, self.embed_dim, a, b);
                match_param_count(target, a, b)
            }
            (ModelKind::Baseline(_), _) => Ok(self.embed_dim),
        }
    }

    pub fn build_model(&self, vocab: &CodeVocab) -> Result<Model> {
        let dim = self.resolved_embed_dim(vocab)?;
        Model::new(self.model_kind, dim, vocab, derive_seed(self.seed, 0x0dd))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    /// Mean minibatch objective since the previous evaluation.
    pub train_loss: f64,
    /// Task loss on the full validation set.
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub best_iteration: usize,
    pub best_val_loss: f64,
    pub wall_seconds: f64,
}

impl TrainLog {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "iteration,train_loss,val_loss")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.iteration, r.train_loss, r.val_loss)?;
        }
        Ok(())
    }
}

/// Mean objective over `patients` (task + auxiliary + L2).
pub fn total_loss(model: &Model, patients: &[&Patient], cfg: &TrainConfig) -> Result<f64> {
    let mut tape = Tape::new(model.params());
    let loss = model.record_loss(&mut tape, patients, &cfg.objective())?;
    Ok(tape.value(loss.total).item())
}

/// Trains on `train`, keeping the parameters with the lowest validation loss.
pub fn train(train: &Cohort, val: &Cohort, cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid(
            "training and validation sets must be non-empty".into(),
        ));
    }
    if train.vocab != val.vocab {
        return Err(Error::Invalid(
            "training and validation vocabularies differ".into(),
        ));
    }
    let ids: HashSet<&str> = train.patients.iter().map(|p| p.id.as_str()).collect();
    if let Some(p) = val.patients.iter().find(|p| ids.contains(p.id.as_str())) {
        return Err(Error::Invalid(format!(
            "patient {} is in both training and validation sets",
            p.id
        )));
    }

    let start = Instant::now();
    let mut model = cfg.build_model(&train.vocab)?;
    let objective = cfg.objective();
    let val_refs: Vec<&Patient> = val.patients.iter().collect();
    let mut adam = AdamState::new(model.params(), cfg.lr);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch = 0u64;
    let mut cursor = train.len();
    let mut next_batch = |order: &mut Vec<usize>| -> Vec<usize> {
        if cursor >= order.len() {
            order.sort_unstable();
            order.shuffle(&mut sub_rng(cfg.seed, SHUFFLE_STREAM + epoch));
            epoch += 1;
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch = order[cursor..end].to_vec();
        cursor = end;
        batch
    };

    let first = next_batch(&mut order);
    let first_refs: Vec<&Patient> = first.iter().map(|&i| &train.patients[i]).collect();
    let initial_train = total_loss(&model, &first_refs, cfg)?;
    let initial_val = model.task_loss(&val_refs, cfg.task)?;
    let mut rows = vec![LogRow {
        iteration: 0,
        train_loss: initial_train,
        val_loss: initial_val,
    }];
    let mut best = (0usize, initial_val, model.params().clone());
    let mut pending = Some(first);
    let mut window = (0.0f64, 0usize);

    for it in 1..=cfg.max_iterations {
        let batch = pending.take().unwrap_or_else(|| next_batch(&mut order));
        let refs: Vec<&Patient> = batch.iter().map(|&i| &train.patients[i]).collect();
        let grads = {
            let mut tape = Tape::new(model.params());
            let loss = model.record_loss(&mut tape, &refs, &objective)?;
            let value = tape.value(loss.total).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: it,
                    param_norm: model.params().norm(),
                });
            }
            window.0 += value;
            window.1 += 1;
            tape.backward(loss.total)
        };
        adam.step(model.params_mut(), &grads)?;

        if it % cfg.eval_every == 0 || it == cfg.max_iterations {
            let val_loss = model.task_loss(&val_refs, cfg.task)?;
            if !val_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: it,
                    param_norm: model.params().norm(),
                });
            }
            rows.push(LogRow {
                iteration: it,
                train_loss: window.0 / window.1 as f64,
                val_loss,
            });
            window = (0.0, 0);
            if val_loss < best.1 {
                best = (it, val_loss, model.params().clone());
            }
            log::debug!("iteration {it}: val_loss {val_loss:.6}");
        }
    }
    let (best_iteration, best_val_loss, params) = best;
    model.set_params(params)?;
    Ok((
        model,
        TrainLog {
            rows,
            best_iteration,
            best_val_loss,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Largest `z` whose MiME encoder has at most `baseline_count` parameters.
pub fn match_param_count(baseline_count: usize, n_dx: usize, n_tx: usize) -> Result<usize> {
    if count_params(1, n_dx, n_tx) > baseline_count {
        return Err(Error::Config(format!(
            "no embedding size fits {baseline_count} parameters (z=1 needs {})",
            count_params(1, n_dx, n_tx)
        )));
    }
    let mut hi = 2;
    while count_params(hi, n_dx, n_tx) <= baseline_count {
        hi *= 2;
    }
    // count(lo) <= target < count(hi)
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if count_params(mid, n_dx, n_tx) <= baseline_count {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::split_folds;
    use crate::synth::{generate, GenConfig};

    fn small_split(n: usize) -> (Cohort, Cohort) {
        let cfg = GenConfig {
            n_patients: n,
            n_dx: 8,
            n_tx: 5,
            mean_visits: 3.0,
            ..GenConfig::default()
        };
        let (cohort, _) = generate(&cfg).unwrap();
        let split = split_folds(&cohort, 3, 1, (0.7, 0.1, 0.2))
            .unwrap()
            .remove(0);
        let (train, val, _) = split.cohorts(&cohort);
        (train, val)
    }

    fn quick(kind: ModelKind) -> TrainConfig {
        TrainConfig {
            max_iterations: 30,
            eval_every: 10,
            embed_dim: 4,
            mime_dim: Some(3),
            model_kind: kind,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 0.01, "dropout": 0.5}"#).is_err());
        let cfg: TrainConfig =
            serde_json::from_str(r#"{"task": "sdp", "model_kind": "tanh_mlp"}"#).unwrap();
        assert_eq!(cfg.task, Task::Sdp);
        assert_eq!(cfg.model_kind, ModelKind::Baseline(BaselineKind::TanhMlp));
        assert_eq!(cfg.batch_size, 20);
    }

    #[test]
    fn zero_iterations_returns_initial_parameters() {
        let (train_set, val) = small_split(60);
        let cfg = TrainConfig {
            max_iterations: 0,
            ..quick(ModelKind::Mime)
        };
        let (model, log) = train(&train_set, &val, &cfg).unwrap();
        assert_eq!(model, cfg.build_model(&train_set.vocab).unwrap());
        assert_eq!(log.rows.len(), 1);
        assert_eq!(log.best_iteration, 0);
    }

    #[test]
    fn training_is_deterministic_and_keeps_best() {
        let (train_set, val) = small_split(80);
        let cfg = quick(ModelKind::Mime);
        let (m1, l1) = train(&train_set, &val, &cfg).unwrap();
        let (m2, l2) = train(&train_set, &val, &cfg).unwrap();
        assert_eq!(l1.rows, l2.rows);
        assert_eq!(m1, m2);
        let its: Vec<usize> = l1.rows.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![0, 10, 20, 30]);
        let val_refs: Vec<&Patient> = val.patients.iter().collect();
        let final_val = m1.task_loss(&val_refs, Task::Hf).unwrap();
        assert!((final_val - l1.best_val_loss).abs() < 1e-12);
        assert!(l1.rows.iter().all(|r| l1.best_val_loss <= r.val_loss));
    }

    #[test]
    fn l2_term_is_linear_in_coefficient() {
        let (train_set, _) = small_split(40);
        let refs: Vec<&Patient> = train_set.patients.iter().take(10).collect();
        let cfg = quick(ModelKind::Baseline(BaselineKind::Tanh));
        let model = cfg.build_model(&train_set.vocab).unwrap();
        let at = |l2: f64| total_loss(&model, &refs, &TrainConfig { l2, ..cfg.clone() }).unwrap();
        let (base, one, two) = (at(0.0), at(1e-3), at(2e-3));
        assert!(((two - base) - 2.0 * (one - base)).abs() < 1e-12);
    }

    #[test]
    fn overlapping_splits_rejected() {
        let (train_set, _) = small_split(40);
        let cfg = quick(ModelKind::Mime);
        assert!(train(&train_set, &train_set, &cfg).is_err());
    }

    #[test]
    fn matching_fixed_point_and_bracket() {
        for (a, b) in [(1, 1), (50, 30), (388, 1923)] {
            assert_eq!(match_param_count(count_params(8, a, b), a, b).unwrap(), 8);
            let target = count_params_baseline(BaselineKind::Linear, 128, a, b);
            let z = match_param_count(target, a, b).unwrap();
            assert!(count_params(z, a, b) <= target && target < count_params(z + 1, a, b));
            let scan = (1..)
                .take_while(|&z| count_params(z, a, b) <= target)
                .last();
            assert_eq!(Some(z), scan);
        }
        assert!(match_param_count(3, 5, 5).is_err());
    }
}
