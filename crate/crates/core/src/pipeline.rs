//! In-process glue between windowing, featurization, training and prediction.

use rayon::prelude::*;

use crate::corpus::Corpus;
use crate::features::{feature_names, FeatureMatrix, FeatureSpec, FeatureVector, Featurizer};
use crate::forest::{train_forest, Dataset, RandomForestModel, TrainConfig};
use crate::fusion::{predict_batch, BatchItem, FusionMode, Prediction, TwoPhaseModel};
use crate::ingest::{PlatformPatternSet, SessionMeta};
use crate::windowing::{slice_windows, Window, WindowConfig, WindowRow};
use crate::Result;

#[derive(Debug, Clone)]
pub struct FeaturizedSession {
    pub meta: SessionMeta,
    pub windows: Vec<Window>,
    /// Feature rows parallel to `windows`.
    pub features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct FeaturizedCorpus {
    pub feature_names: Vec<String>,
    pub patterns: PlatformPatternSet,
    pub sessions: Vec<FeaturizedSession>,
}

impl FeaturizedCorpus {
    pub fn matrix(&self) -> FeatureMatrix {
        FeatureMatrix {
            names: self.feature_names.clone(),
            rows: self
                .sessions
                .iter()
                .flat_map(|s| {
                    s.windows.iter().zip(&s.features).map(|(w, f)| FeatureVector {
                        window_ref: w.window_ref(),
                        values: f.clone(),
                    })
                })
                .collect(),
        }
    }

    pub fn window_rows(&self) -> Vec<WindowRow> {
        self.sessions
            .iter()
            .flat_map(|s| s.windows.iter().map(WindowRow::from))
            .collect()
    }
}

/// Windows and feature vectors of every session; sessions run in parallel.
pub fn featurize_corpus(corpus: &Corpus, window: &WindowConfig, spec: &FeatureSpec) -> Result<FeaturizedCorpus> {
    window.validate()?;
    Featurizer::new(&corpus.schema, spec)?;
    let sessions = corpus
        .sessions
        .par_iter()
        .map(|timeline| -> Result<FeaturizedSession> {
            let mut featurizer = Featurizer::new(&corpus.schema, spec)?;
            let windows = slice_windows(timeline, &corpus.patterns, window);
            let features = windows
                .iter()
                .map(|w| featurizer.featurize(w, timeline).map(|fv| fv.values))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(FeaturizedSession {
                meta: timeline.meta().clone(),
                windows,
                features,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeaturizedCorpus {
        feature_names: feature_names(&corpus.schema, spec),
        patterns: corpus.patterns.clone(),
        sessions,
    })
}

/// True when a window of this coverage would reach the forest under `mode`.
pub fn reaches_forest(mode: FusionMode, coverage: f64, gate_threshold: f64) -> bool {
    mode == FusionMode::AppearanceOnly || coverage >= gate_threshold
}

/// Labeled windows used to train the forest for `mode`. In two-phase mode
/// windows the gate would catch are left out.
pub fn training_set<'a>(
    sessions: impl IntoIterator<Item = &'a FeaturizedSession>,
    feature_names: &[String],
    mode: FusionMode,
    gate_threshold: f64,
) -> Result<Dataset> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for s in sessions {
        for (w, f) in s.windows.iter().zip(&s.features) {
            let Some(label) = w.truth_label.label() else {
                continue;
            };
            if !reaches_forest(mode, w.platform_coverage, gate_threshold) {
                continue;
            }
            rows.push(f.clone());
            labels.push(label.class_id());
            groups.push(s.meta.session_id.clone());
        }
    }
    Ok(Dataset::new(rows, labels, feature_names.to_vec(), groups)?)
}

pub fn train_for_mode<'a>(
    sessions: impl IntoIterator<Item = &'a FeaturizedSession>,
    feature_names: &[String],
    mode: FusionMode,
    gate_threshold: f64,
    cfg: &TrainConfig,
) -> Result<RandomForestModel> {
    let data = training_set(sessions, feature_names, mode, gate_threshold)?;
    Ok(train_forest(&data, cfg)?)
}

/// Predictions for every window of `sessions`, in session then window order.
pub fn predict_sessions<'a>(
    model: &TwoPhaseModel,
    sessions: impl IntoIterator<Item = &'a FeaturizedSession>,
) -> Result<Vec<Prediction>> {
    let sessions: Vec<&FeaturizedSession> = sessions.into_iter().collect();
    let refs: Vec<_> = sessions
        .iter()
        .flat_map(|s| s.windows.iter().map(Window::window_ref))
        .collect();
    let items: Vec<BatchItem<'_>> = sessions
        .iter()
        .flat_map(|s| s.windows.iter().zip(&s.features))
        .zip(&refs)
        .map(|((w, f), r)| BatchItem {
            window_ref: r,
            features: f,
            platform_coverage: w.platform_coverage,
        })
        .collect();
    Ok(predict_batch(model, &items)?)
}
