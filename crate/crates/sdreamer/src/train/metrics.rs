//! Accuracy, per-class precision/recall/F1, and confusion matrices.
//!
//! The confusion matrix is indexed `[truth][prediction]`. Unlabeled epochs
//! are excluded from every count and reported separately. Macro F1 is the
//! unweighted mean of per-class F1; a class absent from both truth and
//! prediction contributes an F1 of zero.

use serde::Serialize;

use crate::model::infer::{infer_epochs, infer_sequences, PathwayChoice};
use crate::model::{EpochModel, SequenceModel};
use crate::params::ParamStore;
use crate::signal::{PatchedEpoch, SequenceSample, Stage, StageLabel};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[truth][prediction]` over labeled epochs.
    pub confusion: Vec<Vec<usize>>,
    pub n_labeled: usize,
    pub n_masked: usize,
}

/// Tally `(truth, prediction)` pairs; unlabeled truths count as masked.
pub fn confusion_from_pairs(
    truth: &[StageLabel],
    pred: &[Stage],
    n_classes: usize,
) -> (Vec<Vec<usize>>, usize) {
    assert_eq!(truth.len(), pred.len(), "one prediction per truth label");
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    let mut masked = 0;
    for (t, p) in truth.iter().zip(pred) {
        match t {
            Some(stage) => confusion[stage.index()][p.index()] += 1,
            None => masked += 1,
        }
    }
    (confusion, masked)
}

/// Derive all metrics from a confusion matrix.
pub fn report_from_confusion(
    confusion: Vec<Vec<usize>>,
    n_masked: usize,
) -> Result<EvalReport, TrainError> {
    let n_classes = confusion.len();
    let total: usize = confusion.iter().map(|row| row.iter().sum::<usize>()).sum();
    if total == 0 {
        return Err(TrainError::NoLabeledSamples);
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();

    let mut per_class = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let tp = confusion[c][c];
        let truth_count: usize = confusion[c].iter().sum();
        let pred_count: usize = confusion.iter().map(|row| row[c]).sum();
        let precision = if pred_count == 0 { 0.0 } else { tp as f64 / pred_count as f64 };
        let recall = if truth_count == 0 { 0.0 } else { tp as f64 / truth_count as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics { precision, recall, f1 });
    }
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / n_classes as f64;
    Ok(EvalReport {
        accuracy: correct as f64 / total as f64,
        macro_f1,
        per_class,
        confusion,
        n_labeled: total,
        n_masked,
    })
}

/// Evaluate the epoch model on labeled epochs through one pathway.
pub fn evaluate_epochs(
    store: &ParamStore,
    model: &EpochModel,
    epochs: &[PatchedEpoch],
    choice: PathwayChoice,
) -> Result<EvalReport, TrainError> {
    let out = infer_epochs(store, model, epochs, choice, false)?;
    let truth: Vec<StageLabel> = epochs.iter().map(|e| e.label).collect();
    let pred: Vec<Stage> = out.predictions.iter().map(|p| p.label).collect();
    let (confusion, masked) = confusion_from_pairs(&truth, &pred, model.config.n_classes);
    report_from_confusion(confusion, masked)
}

/// Evaluate the sequence model over the epochs covered by `windows`.
pub fn evaluate_sequences(
    store: &ParamStore,
    model: &SequenceModel,
    epochs: &[PatchedEpoch],
    windows: &[SequenceSample],
    choice: PathwayChoice,
) -> Result<EvalReport, TrainError> {
    let out = infer_sequences(store, model, epochs, windows, choice, false)?;
    let truth: Vec<StageLabel> =
        out.predictions.iter().map(|p| epochs[p.index].label).collect();
    let pred: Vec<Stage> = out.predictions.iter().map(|p| p.label).collect();
    let (confusion, masked) = confusion_from_pairs(&truth, &pred, model.config.n_classes);
    report_from_confusion(confusion, masked)
}

/// Human-readable report (the structured-text form printed by the CLI).
pub fn format_report(report: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("accuracy   = {:.6}\n", report.accuracy));
    s.push_str(&format!("macro_f1   = {:.6}\n", report.macro_f1));
    s.push_str(&format!("n_labeled  = {}\n", report.n_labeled));
    s.push_str(&format!("n_masked   = {}\n", report.n_masked));
    for (c, m) in report.per_class.iter().enumerate() {
        let name = Stage::from_index(c).map_or("?", |s| s.name());
        s.push_str(&format!(
            "class {name:<4} precision = {:.6}  recall = {:.6}  f1 = {:.6}\n",
            m.precision, m.recall, m.f1
        ));
    }
    s.push_str("confusion (rows = truth, cols = prediction):\n");
    for row in &report.confusion {
        s.push_str("  ");
        for v in row {
            s.push_str(&format!("{v:>7}"));
        }
        s.push('\n');
    }
    s
}
