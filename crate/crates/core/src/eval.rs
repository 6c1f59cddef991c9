//! Binary classification metrics: confusion matrix, per-class and overall F1,
//! accuracy, chance agreement and Cohen's kappa.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::fusion::{Prediction, PredictionSource};
use crate::ingest::Label;
use crate::windowing::{WindowRef, WindowRow};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{preds} predictions but {truths} truths")]
    Length { preds: usize, truths: usize },
    #[error("no labeled windows to evaluate")]
    Empty,
    #[error("prediction/window keys differ: {}", describe_diff(.missing_predictions, .unknown_windows))]
    KeyMismatch {
        missing_predictions: Vec<WindowRef>,
        unknown_windows: Vec<WindowRef>,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn describe_diff(missing: &[WindowRef], unknown: &[WindowRef]) -> String {
    let show = |v: &[WindowRef]| {
        let mut s: Vec<String> = v.iter().take(5).map(ToString::to_string).collect();
        if v.len() > 5 {
            s.push(format!("... ({} total)", v.len()));
        }
        s.join(", ")
    };
    let mut parts = Vec::new();
    if !missing.is_empty() {
        parts.push(format!("windows without prediction: {}", show(missing)));
    }
    if !unknown.is_empty() {
        parts.push(format!("predictions for unknown windows: {}", show(unknown)));
    }
    parts.join("; ")
}

/// Rows are truth (OnTask, OffTask), columns are prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; 2]; 2]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn truth_total(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted_total(&self, class: usize) -> u64 {
        self.counts[0][class] + self.counts[1][class]
    }

    pub fn is_diagonal(&self) -> bool {
        self.counts[0][1] == 0 && self.counts[1][0] == 0
    }
}

pub fn confusion(preds: &[Label], truths: &[Label]) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::Length {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (p, t) in preds.iter().zip(truths) {
        cm.counts[t.class_id()][p.class_id()] += 1;
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(f1_on_task, f1_off_task)`; an empty precision or recall denominator counts as 0.
pub fn f1_per_class(cm: &ConfusionMatrix) -> [f64; 2] {
    [0, 1].map(|k| {
        let tp = cm.counts[k][k];
        let precision = ratio(tp, cm.predicted_total(k));
        let recall = ratio(tp, cm.truth_total(k));
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverallF1 {
    /// Support-weighted mean of per-class F1.
    pub weighted: f64,
    pub macro_avg: f64,
}

pub fn overall_f1(cm: &ConfusionMatrix) -> OverallF1 {
    let f1 = f1_per_class(cm);
    OverallF1 {
        weighted: support_weighted(f1, [cm.truth_total(0), cm.truth_total(1)]),
        macro_avg: (f1[0] + f1[1]) / 2.0,
    }
}

pub fn support_weighted(f1: [f64; 2], supports: [u64; 2]) -> f64 {
    let n = supports[0] + supports[1];
    if n == 0 {
        return 0.0;
    }
    (supports[0] as f64 * f1[0] + supports[1] as f64 * f1[1]) / n as f64
}

pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.counts[0][0] + cm.counts[1][1], cm.total())
}

/// Expected agreement from the marginals, `Σ_k (row_k / N)(col_k / N)`.
pub fn chance_accuracy(cm: &ConfusionMatrix) -> f64 {
    let n = cm.total();
    (0..2)
        .map(|k| ratio(cm.truth_total(k), n) * ratio(cm.predicted_total(k), n))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Kappa {
    pub value: f64,
    /// Chance agreement was 1, so kappa is undefined and reported as 0.
    pub degenerate: bool,
}

pub fn cohens_kappa(cm: &ConfusionMatrix) -> Kappa {
    kappa_from(accuracy(cm), chance_accuracy(cm))
}

/// `κ = (p_o - p_e) / (1 - p_e)`, or 0 (degenerate) when `p_e = 1`.
pub fn kappa_from(p_o: f64, p_e: f64) -> Kappa {
    if p_e >= 1.0 {
        return Kappa {
            value: 0.0,
            degenerate: true,
        };
    }
    Kappa {
        value: (p_o - p_e) / (1.0 - p_e),
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub f1_on_task: f64,
    pub f1_off_task: f64,
    pub overall_f1_weighted: f64,
    pub overall_f1_macro: f64,
    pub accuracy: f64,
    pub chance_accuracy: f64,
    pub kappa: f64,
    pub kappa_degenerate: bool,
    pub n_windows: u64,
    pub n_gate_predictions: u64,
}

impl EvalReport {
    pub fn from_confusion(cm: ConfusionMatrix, n_gate_predictions: u64) -> Result<Self, EvalError> {
        if cm.total() == 0 {
            return Err(EvalError::Empty);
        }
        let [f1_on_task, f1_off_task] = f1_per_class(&cm);
        let overall = overall_f1(&cm);
        let kappa = cohens_kappa(&cm);
        Ok(EvalReport {
            confusion: cm,
            f1_on_task,
            f1_off_task,
            overall_f1_weighted: overall.weighted,
            overall_f1_macro: overall.macro_avg,
            accuracy: accuracy(&cm),
            chance_accuracy: chance_accuracy(&cm),
            kappa: kappa.value,
            kappa_degenerate: kappa.degenerate,
            n_windows: cm.total(),
            n_gate_predictions,
        })
    }

    pub fn f1(&self, label: Label) -> f64 {
        match label {
            Label::OnTask => self.f1_on_task,
            Label::OffTask => self.f1_off_task,
        }
    }

    pub fn render(&self) -> String {
        let c = &self.confusion.counts;
        format!(
            "windows evaluated   {}\n\
             gate predictions    {}\n\
             confusion (rows = truth, cols = prediction)\n\
             \x20            On-Task  Off-Task\n\
             \x20 On-Task   {:>8}  {:>8}\n\
             \x20 Off-Task  {:>8}  {:>8}\n\
             F1 On-Task          {:.4}\n\
             F1 Off-Task         {:.4}\n\
             F1 overall (wtd)    {:.4}\n\
             F1 overall (macro)  {:.4}\n\
             accuracy            {:.4}\n\
             chance accuracy     {:.4}\n\
             Cohen's kappa       {:.4}{}\n",
            self.n_windows,
            self.n_gate_predictions,
            c[0][0],
            c[0][1],
            c[1][0],
            c[1][1],
            self.f1_on_task,
            self.f1_off_task,
            self.overall_f1_weighted,
            self.overall_f1_macro,
            self.accuracy,
            self.chance_accuracy,
            self.kappa,
            if self.kappa_degenerate { " (degenerate)" } else { "" },
        )
    }
}

pub const REPORT_HEADER: [&str; 14] = [
    "n_windows",
    "n_gate_predictions",
    "tp_on_on",
    "on_pred_off",
    "off_pred_on",
    "tp_off_off",
    "f1_on_task",
    "f1_off_task",
    "overall_f1_weighted",
    "overall_f1_macro",
    "accuracy",
    "chance_accuracy",
    "kappa",
    "kappa_degenerate",
];

impl EvalReport {
    pub fn csv_fields(&self) -> Vec<String> {
        let c = &self.confusion.counts;
        vec![
            self.n_windows.to_string(),
            self.n_gate_predictions.to_string(),
            c[0][0].to_string(),
            c[0][1].to_string(),
            c[1][0].to_string(),
            c[1][1].to_string(),
            self.f1_on_task.to_string(),
            self.f1_off_task.to_string(),
            self.overall_f1_weighted.to_string(),
            self.overall_f1_macro.to_string(),
            self.accuracy.to_string(),
            self.chance_accuracy.to_string(),
            self.kappa.to_string(),
            self.kappa_degenerate.to_string(),
        ]
    }
}

pub fn write_report_csv<W: Write>(sink: W, report: &EvalReport) -> Result<(), EvalError> {
    let mut wtr = csv::Writer::from_writer(sink);
    wtr.write_record(REPORT_HEADER)?;
    wtr.write_record(report.csv_fields())?;
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Joins predictions with the window table by `(session_id, index)` and
/// scores labeled windows. Every window needs exactly one prediction.
pub fn evaluate_predictions(preds: &[Prediction], windows: &[WindowRow]) -> Result<EvalReport, EvalError> {
    let by_ref: HashMap<&WindowRef, &Prediction> = preds.iter().map(|p| (&p.window_ref, p)).collect();
    let window_refs: BTreeSet<&WindowRef> = windows.iter().map(|w| &w.window_ref).collect();
    let missing: Vec<WindowRef> = window_refs
        .iter()
        .filter(|r| !by_ref.contains_key(*r))
        .map(|r| (*r).clone())
        .collect();
    let mut unknown: Vec<WindowRef> = preds
        .iter()
        .filter(|p| !window_refs.contains(&p.window_ref))
        .map(|p| p.window_ref.clone())
        .collect();
    unknown.sort();
    if !missing.is_empty() || !unknown.is_empty() {
        return Err(EvalError::KeyMismatch {
            missing_predictions: missing,
            unknown_windows: unknown,
        });
    }
    let mut cm = ConfusionMatrix::default();
    let mut gated = 0;
    for w in windows {
        let Some(truth) = w.truth_label.label() else {
            continue;
        };
        let p = by_ref[&w.window_ref];
        cm.counts[truth.class_id()][p.label.class_id()] += 1;
        if p.source == PredictionSource::ContextGate {
            gated += 1;
        }
    }
    EvalReport::from_confusion(cm, gated)
}
