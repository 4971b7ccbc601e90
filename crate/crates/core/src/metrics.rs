//! Ranking and classification metrics and per-fold aggregation.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::ehr::Cohort;
use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid("scores must be finite".into()));
    }
    Ok(())
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive outranks a random negative, ties ½.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric {
            metric: "roc_auc",
            reason: "needs at least one positive and one negative",
        });
    }
    // walk from the lowest scores up, counting negatives already passed
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    for group in tie_groups(scores).iter().rev() {
        let pos = group.iter().filter(|&&i| labels[i]).count();
        let neg = group.len() - pos;
        wins += pos as f64 * (neg_below as f64 + 0.5 * neg as f64);
        neg_below += neg;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// Average precision `Σ (R_i − R_{i−1}) P_i` over descending score
/// thresholds; tied scores form one threshold.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric {
            metric: "pr_auc",
            reason: "needs at least one positive",
        });
    }
    let mut ap = 0.0;
    let (mut tp, mut seen) = (0usize, 0usize);
    for group in tie_groups(scores) {
        let pos = group.iter().filter(|&&i| labels[i]).count();
        tp += pos;
        seen += group.len();
        if pos > 0 {
            ap += (pos as f64 / n_pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

/// The `k` highest-scoring indices; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `|top-k ∩ truth| / |truth|`.
pub fn recall_at_k(scores: &[f64], truth: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let mut truth = truth.to_vec();
    truth.sort_unstable();
    truth.dedup();
    if truth.is_empty() {
        return Err(Error::Invalid("true code set is empty".into()));
    }
    let hits = top_k(scores, k)
        .iter()
        .filter(|i| truth.binary_search(i).is_ok())
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Diagnosis codes split into prevalence percentile buckets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreqGroups {
    /// `(label, codes)` from rarest to most common bucket.
    pub groups: Vec<(String, Vec<usize>)>,
}

impl FreqGroups {
    /// Buckets 20–40, 40–60, 60–80 and 80–100th percentile of per-visit
    /// prevalence in `train`.
    pub fn from_training(train: &Cohort) -> Self {
        let n = train.vocab.n_dx();
        let mut counts = vec![0usize; n];
        for v in train.patients.iter().flat_map(|p| &p.visits) {
            for d in v.dx_set() {
                counts[d] += 1;
            }
        }
        Self::from_counts(&counts)
    }

    pub fn from_counts(counts: &[usize]) -> Self {
        let n = counts.len();
        let mut ranked: Vec<usize> = (0..n).collect();
        ranked.sort_by_key(|&d| (counts[d], d));
        let groups = [(20, 40), (40, 60), (60, 80), (80, 100)]
            .into_iter()
            .map(|(lo, hi)| {
                let (a, b) = (n * lo / 100, n * hi / 100);
                let mut codes = ranked[a..b].to_vec();
                codes.sort_unstable();
                (format!("{lo}-{hi}"), codes)
            })
            .collect();
        FreqGroups { groups }
    }
}

/// Per group: mean precision@k of the top-k predictions restricted to the
/// group's codes, over timesteps whose true set touches the group. Groups
/// with no such timestep are left out.
pub fn precision_at_k_by_group(
    predictions: &[Vec<f64>],
    truths: &[Vec<usize>],
    groups: &FreqGroups,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    if predictions.len() != truths.len() {
        return Err(Error::Invalid(
            "one truth set per prediction required".into(),
        ));
    }
    let mut out = Vec::new();
    for (label, codes) in &groups.groups {
        let kk = k.min(codes.len());
        if kk == 0 {
            log::warn!("frequency group {label} has no codes");
            continue;
        }
        let (mut total, mut steps) = (0.0, 0usize);
        for (pred, truth) in predictions.iter().zip(truths) {
            if !truth.iter().any(|c| codes.binary_search(c).is_ok()) {
                continue;
            }
            let restricted: Vec<f64> = codes.iter().map(|&c| pred[c]).collect();
            let hits = top_k(&restricted, kk)
                .into_iter()
                .filter(|&j| truth.contains(&codes[j]))
                .count();
            total += hits as f64 / kk as f64;
            steps += 1;
        }
        if steps == 0 {
            log::warn!("frequency group {label} never occurs in the evaluation set");
            continue;
        }
        out.push((label.clone(), total / steps as f64));
    }
    Ok(out)
}

/// Metrics of one model on one test split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldMetrics {
    /// Absent for predictors without a likelihood.
    pub test_loss: Option<f64>,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub recall_at: BTreeMap<usize, f64>,
    pub precision_at_5: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std, n }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub folds: Vec<FoldMetrics>,
    pub summary: BTreeMap<String, MeanStd>,
}

impl EvalReport {
    pub fn from_folds(folds: Vec<FoldMetrics>) -> Self {
        let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for f in &folds {
            let mut put = |k: String, v: f64| values.entry(k).or_default().push(v);
            if let Some(v) = f.test_loss {
                put("test_loss".into(), v);
            }
            if let Some(v) = f.roc_auc {
                put("roc_auc".into(), v);
            }
            if let Some(v) = f.pr_auc {
                put("pr_auc".into(), v);
            }
            for (k, v) in &f.recall_at {
                put(format!("recall@{k}"), *v);
            }
            for (g, v) in &f.precision_at_5 {
                put(format!("precision@5[{g}]"), *v);
            }
        }
        let summary = values.into_iter().map(|(k, v)| (k, mean_std(&v))).collect();
        EvalReport { folds, summary }
    }

    pub fn write_json(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// `metric,mean,std,folds` with four decimals.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "metric,mean,std,folds")?;
        for (k, s) in &self.summary {
            writeln!(w, "{k},{:.4},{:.4},{}", s.mean, s.std, s.n)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn four_point_example() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [false, false, true, true];
        assert_abs_diff_eq!(roc_auc(&s, &l).unwrap(), 0.75, epsilon = 1e-15);
        // ranks: 0.8(+) 0.4(-) 0.35(+) 0.1(-) → (1/2)(1) + (1/2)(2/3)
        assert_abs_diff_eq!(pr_auc(&s, &l).unwrap(), 5.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn perfect_ranking_and_undefined_cases() {
        let s = [0.9, 0.8, 0.1];
        let l = [true, true, false];
        assert_eq!(roc_auc(&s, &l).unwrap(), 1.0);
        assert_eq!(pr_auc(&s, &l).unwrap(), 1.0);
        assert!(roc_auc(&s, &[true; 3]).is_err());
        assert!(pr_auc(&s, &[false; 3]).is_err());
    }

    #[test]
    fn ties_count_half() {
        let s = [0.5, 0.5];
        assert_eq!(roc_auc(&s, &[true, false]).unwrap(), 0.5);
        assert_eq!(pr_auc(&s, &[true, false]).unwrap(), 0.5);
    }

    #[test]
    fn recall_examples() {
        let scores = [0.9, 0.1, 0.8, 0.7, 0.6, 0.5, 0.05];
        assert_eq!(recall_at_k(&scores, &[0, 2], 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&scores, &[1, 6], 5).unwrap(), 0.0);
        assert_abs_diff_eq!(recall_at_k(&scores, &[0, 3, 6], 5).unwrap(), 2.0 / 3.0);
        // equal scores: lower index wins the last slot
        assert_eq!(top_k(&[0.2, 0.5, 0.5, 0.5], 2), vec![1, 2]);
    }

    #[test]
    fn frequency_groups() {
        let counts: Vec<usize> = (0..10).map(|i| 10 - i).collect();
        let g = FreqGroups::from_counts(&counts);
        let labels: Vec<&str> = g.groups.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(labels, ["20-40", "40-60", "60-80", "80-100"]);
        // code 9 is rarest, code 0 most common
        assert_eq!(g.groups[0].1, vec![6, 7]);
        assert_eq!(g.groups[3].1, vec![0, 1]);
    }

    #[test]
    fn perfect_group_precision_and_omission() {
        let groups = FreqGroups {
            groups: vec![("a".into(), vec![0, 1]), ("b".into(), vec![2, 3])],
        };
        let preds = vec![vec![0.9, 0.8, 0.0, 0.0]];
        let truths = vec![vec![0, 1]];
        let out = precision_at_k_by_group(&preds, &truths, &groups, 5).unwrap();
        assert_eq!(out, vec![("a".to_string(), 1.0)]);
    }

    #[test]
    fn report_summary_and_csv() {
        let fold = |x: f64| FoldMetrics {
            test_loss: Some(x),
            roc_auc: Some(x),
            pr_auc: None,
            recall_at: BTreeMap::new(),
            precision_at_5: Vec::new(),
        };
        let r = EvalReport::from_folds(vec![fold(0.2), fold(0.4)]);
        let s = r.summary["roc_auc"];
        assert_abs_diff_eq!(s.mean, 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(s.std, 0.02f64.sqrt(), epsilon = 1e-15);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("roc_auc,0.3000,0.1414,2"), "{text}");
    }
}
