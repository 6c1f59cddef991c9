//! Two-phase decision rule: a context gate on platform coverage, then the
//! appearance forest for windows where the platform is active.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forest::{predict_proba, ForestError, RandomForestModel};
use crate::ingest::{Label, PlatformPatternSet};
use crate::windowing::WindowRef;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("gate threshold must lie in [0, 1], got {0}")]
    Threshold(f64),
    #[error("window {window}: {source}")]
    Forest {
        window: WindowRef,
        #[source]
        source: ForestError,
    },
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    ContextAndAppearance,
    AppearanceOnly,
}

impl FusionMode {
    pub fn token(self) -> &'static str {
        match self {
            FusionMode::ContextAndAppearance => "context_and_appearance",
            FusionMode::AppearanceOnly => "appearance_only",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "context_and_appearance" | "two-phase" | "two_phase" => Ok(FusionMode::ContextAndAppearance),
            "appearance_only" | "appearance" => Ok(FusionMode::AppearanceOnly),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSource {
    ContextGate,
    AppearanceModel,
}

impl PredictionSource {
    pub fn token(self) -> &'static str {
        match self {
            PredictionSource::ContextGate => "context_gate",
            PredictionSource::AppearanceModel => "appearance_model",
        }
    }
}

impl FromStr for PredictionSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "context_gate" => Ok(PredictionSource::ContextGate),
            "appearance_model" => Ok(PredictionSource::AppearanceModel),
            other => Err(format!("unknown source `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TwoPhaseModel {
    pub patterns: PlatformPatternSet,
    gate_threshold: f64,
    pub appearance: RandomForestModel,
    pub mode: FusionMode,
}

impl TwoPhaseModel {
    pub fn new(
        patterns: PlatformPatternSet,
        gate_threshold: f64,
        appearance: RandomForestModel,
        mode: FusionMode,
    ) -> Result<Self, FusionError> {
        if !(0.0..=1.0).contains(&gate_threshold) {
            return Err(FusionError::Threshold(gate_threshold));
        }
        Ok(TwoPhaseModel {
            patterns,
            gate_threshold,
            appearance,
            mode,
        })
    }

    pub fn gate_threshold(&self) -> f64 {
        self.gate_threshold
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub window_ref: WindowRef,
    pub label: Label,
    pub source: PredictionSource,
    pub proba_offtask: f64,
}

/// Phase 1: coverage below the threshold means the platform is not in use
/// and the window is OffTask. Phase 2: the appearance forest decides.
pub fn predict_two_phase(
    model: &TwoPhaseModel,
    window_ref: &WindowRef,
    features: &[f64],
    platform_coverage: f64,
) -> Result<Prediction, FusionError> {
    if model.mode == FusionMode::ContextAndAppearance && platform_coverage < model.gate_threshold {
        return Ok(Prediction {
            window_ref: window_ref.clone(),
            label: Label::OffTask,
            source: PredictionSource::ContextGate,
            proba_offtask: 1.0,
        });
    }
    let proba = predict_proba(&model.appearance, features).map_err(|source| FusionError::Forest {
        window: window_ref.clone(),
        source,
    })?;
    let label = if proba[0] > proba[1] {
        Label::OnTask
    } else {
        Label::OffTask
    };
    Ok(Prediction {
        window_ref: window_ref.clone(),
        label,
        source: PredictionSource::AppearanceModel,
        proba_offtask: proba[1],
    })
}

/// One window to classify.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub window_ref: &'a WindowRef,
    pub features: &'a [f64],
    pub platform_coverage: f64,
}

/// Element-wise [`predict_two_phase`]; output order matches input order.
pub fn predict_batch(model: &TwoPhaseModel, items: &[BatchItem<'_>]) -> Result<Vec<Prediction>, FusionError> {
    items
        .par_iter()
        .map(|it| predict_two_phase(model, it.window_ref, it.features, it.platform_coverage))
        .collect()
}

const PREDICTION_HEADER: [&str; 5] = ["session_id", "index", "label", "source", "proba_offtask"];

pub fn write_predictions<W: Write>(sink: W, preds: &[Prediction]) -> Result<(), FusionError> {
    let mut wtr = csv::Writer::from_writer(sink);
    wtr.write_record(PREDICTION_HEADER)?;
    for p in preds {
        wtr.write_record([
            p.window_ref.session_id.as_str(),
            &p.window_ref.index.to_string(),
            p.label.token(),
            p.source.token(),
            &p.proba_offtask.to_string(),
        ])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_predictions<R: Read>(source: R) -> Result<Vec<Prediction>, FusionError> {
    let mut rdr = csv::Reader::from_reader(source);
    if rdr.headers()?.iter().ne(PREDICTION_HEADER) {
        return Err(FusionError::Malformed {
            line: 1,
            message: format!("expected header `{}`", PREDICTION_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| FusionError::Malformed { line, message };
        let window_ref = WindowRef {
            session_id: record[0].to_string(),
            index: record[1]
                .parse()
                .map_err(|_| bad(format!("invalid index `{}`", &record[1])))?,
        };
        if !seen.insert(window_ref.clone()) {
            return Err(bad(format!("duplicate prediction for {window_ref}")));
        }
        let label: Label = record[2].parse().map_err(|t| bad(format!("invalid label `{t}`")))?;
        let source: PredictionSource = record[3].parse().map_err(bad)?;
        let proba_offtask: f64 = record[4]
            .parse()
            .ok()
            .filter(|p| (0.0..=1.0).contains(p))
            .ok_or_else(|| bad(format!("invalid probability `{}`", &record[4])))?;
        out.push(Prediction {
            window_ref,
            label,
            source,
            proba_offtask,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{schema_hash, TrainConfig, TreeNode, CLASS_NAMES, FORMAT_VERSION};

    /// One split on feature 0 at 0.0: left OnTask, right OffTask.
    fn stump() -> RandomForestModel {
        let feature_names = vec!["f0".to_string(), "f1".to_string()];
        RandomForestModel {
            format_version: FORMAT_VERSION,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            schema_hash: schema_hash(&feature_names),
            feature_names,
            config: TrainConfig {
                n_trees: 1,
                ..Default::default()
            },
            single_class: None,
            trees: vec![TreeNode::Split {
                feature: 0,
                threshold: 0.0,
                left: Box::new(TreeNode::Leaf {
                    class_counts: [9.0, 1.0],
                }),
                right: Box::new(TreeNode::Leaf {
                    class_counts: [1.0, 3.0],
                }),
            }],
        }
    }

    fn model(mode: FusionMode) -> TwoPhaseModel {
        TwoPhaseModel::new(PlatformPatternSet::default(), 0.5, stump(), mode).unwrap()
    }

    fn wref(i: usize) -> WindowRef {
        WindowRef {
            session_id: "s".into(),
            index: i,
        }
    }

    #[test]
    fn gate_examples() {
        let m = model(FusionMode::ContextAndAppearance);
        let p = predict_two_phase(&m, &wref(0), &[-1.0, 0.0], 0.0).unwrap();
        assert_eq!(
            (p.label, p.source, p.proba_offtask),
            (Label::OffTask, PredictionSource::ContextGate, 1.0)
        );

        let p = predict_two_phase(&m, &wref(0), &[-1.0, 0.0], 1.0).unwrap();
        assert_eq!((p.label, p.source), (Label::OnTask, PredictionSource::AppearanceModel));
        assert_eq!(p.proba_offtask, 0.1);

        let p = predict_two_phase(&m, &wref(0), &[-1.0, 0.0], 0.5).unwrap();
        assert_eq!(
            p.source,
            PredictionSource::AppearanceModel,
            "coverage == threshold is active"
        );
    }

    #[test]
    fn appearance_only_ignores_coverage() {
        let m = model(FusionMode::AppearanceOnly);
        let p = predict_two_phase(&m, &wref(0), &[-1.0, 0.0], 0.0).unwrap();
        assert_eq!((p.label, p.source), (Label::OnTask, PredictionSource::AppearanceModel));
        assert_eq!(p.proba_offtask, predict_proba(&stump(), &[-1.0, 0.0]).unwrap()[1]);
    }

    #[test]
    fn schema_mismatch_propagates() {
        let m = model(FusionMode::ContextAndAppearance);
        assert!(matches!(
            predict_two_phase(&m, &wref(3), &[1.0], 1.0),
            Err(FusionError::Forest { .. })
        ));
    }

    #[test]
    fn threshold_validated() {
        assert!(TwoPhaseModel::new(PlatformPatternSet::default(), 1.1, stump(), FusionMode::AppearanceOnly).is_err());
    }

    #[test]
    fn batch_examples() {
        let m = model(FusionMode::ContextAndAppearance);
        assert!(predict_batch(&m, &[]).unwrap().is_empty());

        let refs: Vec<WindowRef> = (0..4).map(wref).collect();
        let feats = [[-1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]];
        let cov = [1.0, 1.0, 0.2, 0.0];
        let items: Vec<BatchItem> = (0..4)
            .map(|i| BatchItem {
                window_ref: &refs[i],
                features: &feats[i],
                platform_coverage: cov[i],
            })
            .collect();
        let preds = predict_batch(&m, &items).unwrap();
        let got: Vec<_> = preds.iter().map(|p| (p.window_ref.index, p.label, p.source)).collect();
        assert_eq!(
            got,
            vec![
                (0, Label::OnTask, PredictionSource::AppearanceModel),
                (1, Label::OffTask, PredictionSource::AppearanceModel),
                (2, Label::OffTask, PredictionSource::ContextGate),
                (3, Label::OffTask, PredictionSource::ContextGate),
            ]
        );

        let reversed: Vec<BatchItem> = items.iter().rev().copied().collect();
        let mut back = predict_batch(&m, &reversed).unwrap();
        back.reverse();
        assert_eq!(back, preds);
    }

    #[test]
    fn predictions_round_trip() {
        let preds = vec![
            Prediction {
                window_ref: wref(0),
                label: Label::OffTask,
                source: PredictionSource::ContextGate,
                proba_offtask: 1.0,
            },
            Prediction {
                window_ref: wref(1),
                label: Label::OnTask,
                source: PredictionSource::AppearanceModel,
                proba_offtask: 0.123_456_789,
            },
        ];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &preds).unwrap();
        assert_eq!(read_predictions(buf.as_slice()).unwrap(), preds);

        let dup = "session_id,index,label,source,proba_offtask\ns,0,on_task,appearance_model,0.1\ns,0,on_task,appearance_model,0.1\n";
        assert!(read_predictions(dup.as_bytes()).is_err());
    }
}
