//! Two-phase behavioral engagement detection.
//!
//! Windows of a student session are classified On-Task or Off-Task: a
//! context gate first checks whether the content platform was the active URL
//! (Off-Platform windows are Off-Task), and a Random Forest over appearance
//! features decides the rest.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod corpus;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod forest;
pub mod fusion;
pub mod ingest;
pub mod pipeline;
pub mod synth;
pub mod windowing;

pub use corpus::{read_corpus, write_corpus, Corpus};
pub use eval::{ConfusionMatrix, EvalReport};
pub use features::{FeatureSpec, FeatureVector};
pub use forest::{RandomForestModel, TrainConfig};
pub use fusion::{FusionMode, Prediction, PredictionSource, TwoPhaseModel};
pub use ingest::{ChannelSchema, Label, PlatformPatternSet, SessionTimeline};
pub use windowing::{Window, WindowConfig, WindowRef};

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    At {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Ingest(#[from] ingest::IngestError),
    #[error(transparent)]
    Window(#[from] windowing::WindowError),
    #[error(transparent)]
    Feature(#[from] features::FeatureError),
    #[error(transparent)]
    Forest(#[from] forest::ForestError),
    #[error(transparent)]
    Fusion(#[from] fusion::FusionError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    Experiment(#[from] experiment::ExperimentError),
    #[error(transparent)]
    Csv(csv::Error),
    #[error(transparent)]
    Json(serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// Attaches the file the error came from, unless it already names one.
    pub fn at(self, path: impl AsRef<Path>) -> Self {
        match self {
            Error::Io { .. } | Error::At { .. } => self,
            other => Error::At {
                path: path.as_ref().to_path_buf(),
                source: Box::new(other),
            },
        }
    }

    /// True when the failure came from the filesystem rather than from
    /// invalid content.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::At { source, .. } => source.is_io(),
            Error::Ingest(ingest::IngestError::Io(_)) => true,
            Error::Ingest(ingest::IngestError::Csv(e)) | Error::Csv(e) => e.is_io_error(),
            Error::Forest(forest::ForestError::Io(_)) => true,
            Error::Json(e) => e.is_io(),
            _ => false,
        }
    }
}
