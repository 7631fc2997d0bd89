//! Perplexity and the AUROC family.
//!
//! Binary AUROC is the Mann–Whitney statistic computed from midranks. The
//! rank sum of the positives is accumulated in half-units as an integer, so
//! the result is the same double as the pair-counting definition
//! `(wins + ties/2) / (n_pos * n_neg)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TaskName;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("perplexity over zero tokens")]
    NoTokens,
    #[error("AUROC needs both classes; got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("score matrix width {width} does not match {classes} classes")]
    Width { width: usize, classes: usize },
    #[error("non-finite score")]
    NonFinite,
    #[error("no class or label has both outcomes present")]
    NothingScorable,
    #[error("macro average of an empty list")]
    Empty,
}

pub type MetricResult<T> = std::result::Result<T, MetricError>;

pub fn perplexity(total_nll: f64, token_count: usize) -> MetricResult<f64> {
    if token_count == 0 {
        return Err(MetricError::NoTokens);
    }
    Ok((total_nll / token_count as f64).exp())
}

/// Area under the ROC curve in `[0, 1]` for binary labels.
pub fn auroc_binary(scores: &[f64], labels: &[bool]) -> MetricResult<f64> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass {
            positives: n_pos,
            negatives: n_neg,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the positives' rank sum, with 1-based midranks for tie groups.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_midrank = (i + 1 + j + 1) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += twice_midrank * pos_in_group;
        i = j + 1;
    }
    // 2U = 2R - n+(n+ + 1) counts each win twice and each tie once.
    let np = n_pos as u128;
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok((twice_u as f64 / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest macro AUROC over classes present in `labels`. `probs` is
/// row-major `[n, k]`.
pub fn auroc_multiclass(probs: &[f64], k: usize, labels: &[usize]) -> MetricResult<f64> {
    if k < 2 || probs.len() != labels.len() * k {
        return Err(MetricError::Width {
            width: probs.len() / labels.len().max(1),
            classes: k,
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(MetricError::LabelOutOfRange { label, classes: k });
    }
    let mut scores = Vec::new();
    for c in 0..k {
        let col: Vec<f64> = probs.iter().skip(c).step_by(k).copied().collect();
        let is_c: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        match auroc_binary(&col, &is_c) {
            Ok(a) => scores.push(a),
            Err(MetricError::SingleClass { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if scores.is_empty() {
        return Err(MetricError::NothingScorable);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Macro AUROC over labels together with how many labels were skipped for
/// lacking one of the two outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultilabelAuroc {
    pub value: f64,
    pub scored: usize,
    pub skipped: usize,
}

/// Mean per-label AUROC; `probs` and `targets` are row-major `[n, k]`.
pub fn auroc_multilabel(
    probs: &[f64],
    targets: &[bool],
    k: usize,
) -> MetricResult<MultilabelAuroc> {
    if k == 0 || probs.len() != targets.len() || probs.len() % k != 0 {
        return Err(MetricError::Width {
            width: k,
            classes: k,
        });
    }
    let mut scores = Vec::new();
    let mut skipped = 0;
    for c in 0..k {
        let col: Vec<f64> = probs.iter().skip(c).step_by(k).copied().collect();
        let lab: Vec<bool> = targets.iter().skip(c).step_by(k).copied().collect();
        match auroc_binary(&col, &lab) {
            Ok(a) => scores.push(a),
            Err(MetricError::SingleClass { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if scores.is_empty() {
        return Err(MetricError::NothingScorable);
    }
    let value = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(MultilabelAuroc {
        value,
        scored: scores.len(),
        skipped,
    })
}

/// Mean of percentage scores, truncated (not rounded) to two decimals.
pub fn macro_average(scores: &[f64]) -> MetricResult<f64> {
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    // The small offset absorbs representation error such as 72.7 = 72.6999…
    Ok(((mean * 100.0) + 1e-6).floor() / 100.0)
}

/// Per-task AUROC (percent) with their macro average, or a perplexity for
/// the language-modelling stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pmv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub los: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diag: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_avg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
}

impl EvalReport {
    pub fn from_tasks(scores: &BTreeMap<TaskName, f64>) -> MetricResult<Self> {
        let mut r = EvalReport::default();
        for (&t, &s) in scores {
            r.set(t, s);
        }
        r.macro_avg = Some(macro_average(
            &scores.values().copied().collect::<Vec<_>>(),
        )?);
        Ok(r)
    }

    pub fn perplexity(ppl: f64) -> Self {
        EvalReport {
            perplexity: Some(ppl),
            ..Default::default()
        }
    }

    pub fn set(&mut self, task: TaskName, auroc_percent: f64) {
        let slot = match task {
            TaskName::Pmv => &mut self.pmv,
            TaskName::Mor => &mut self.mor,
            TaskName::Los => &mut self.los,
            TaskName::Diag => &mut self.diag,
            TaskName::Proc => &mut self.proc,
        };
        *slot = Some(auroc_percent);
    }

    pub fn get(&self, task: TaskName) -> Option<f64> {
        match task {
            TaskName::Pmv => self.pmv,
            TaskName::Mor => self.mor,
            TaskName::Los => self.los,
            TaskName::Diag => self.diag,
            TaskName::Proc => self.proc,
        }
    }
}
