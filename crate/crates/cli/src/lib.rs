//! Commands behind the `engage` binary. Each stage reads and writes plain
//! files, and every output directory gets a `run_manifest.json`.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use engage_core::eval::{evaluate_predictions, write_report_csv, EvalReport};
use engage_core::experiment::{read_experiment_config, run_experiment, ExperimentReport};
use engage_core::features::{read_feature_matrix, write_feature_matrix, FeatureMatrix, FeatureSpec};
use engage_core::forest::{load_model, save_model, train_forest, Dataset, TrainConfig};
use engage_core::fusion::{
    predict_batch, read_predictions, write_predictions, BatchItem, FusionMode, Prediction, TwoPhaseModel,
};
use engage_core::ingest::PlatformPatternSet;
use engage_core::pipeline::{featurize_corpus, reaches_forest};
use engage_core::synth::{generate_corpus, read_synth_config, write_generated_corpus, SynthConfig};
use engage_core::windowing::{read_window_table, write_window_table, WindowConfig, WindowRef, WindowRow};
use engage_core::{read_corpus, Error};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const FEATURES_FILE: &str = "features.csv";
pub const WINDOWS_FILE: &str = "windows.csv";
pub const MODEL_FILE: &str = "model.json";
pub const FUSION_FILE: &str = "fusion.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const EXPERIMENT_TEXT_FILE: &str = "experiment.txt";
pub const EXPERIMENT_CSV_FILE: &str = "experiment.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Input content or configuration is invalid.
    #[error("{0}")]
    Validation(String),
    /// A file could not be read or written.
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn invalid(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{}: {e}", path.display()))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| io_err(path, e))
}

/// Outputs are write-once: an existing file is never replaced.
fn create_fresh(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    File::options()
        .write(true)
        .create_new(true)
        .open(path)
        .map(BufWriter::new)
        .map_err(|e| io_err(path, e))
}

fn ensure_fresh(path: &Path) -> CliResult<()> {
    if path.exists() {
        return Err(CliError::Io(format!(
            "{}: already exists; outputs are never overwritten",
            path.display()
        )));
    }
    Ok(())
}

fn finish(mut w: BufWriter<File>, path: &Path) -> CliResult<()> {
    w.flush().map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create_fresh(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    finish(w, path)
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    toml::from_str(&text).map_err(|e| invalid(path, e))
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_paths: Vec<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub wall_time_s: f64,
    /// Effective settings after config files and flags are merged.
    pub settings: serde_json::Value,
}

struct ManifestBuilder {
    command: &'static str,
    config_paths: Vec<PathBuf>,
    inputs: Vec<PathBuf>,
    seed: Option<u64>,
    settings: serde_json::Value,
    started: Instant,
}

impl ManifestBuilder {
    fn new(command: &'static str) -> Self {
        ManifestBuilder {
            command,
            config_paths: Vec::new(),
            inputs: Vec::new(),
            seed: None,
            settings: serde_json::Value::Null,
            started: Instant::now(),
        }
    }

    fn write(self, out_dir: &Path, outputs: &[&str]) -> CliResult<RunManifest> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config_paths: self.config_paths,
            inputs: self.inputs,
            outputs: outputs.iter().map(|o| out_dir.join(o)).collect(),
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
            settings: self.settings,
        };
        write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

/// Window, feature and training settings shared by the stage commands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub window: WindowConfig,
    pub features: FeatureSpec,
    pub train: TrainConfig,
}

/// Flag values that override config file settings.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub window_ms: Option<u64>,
    pub hop_ms: Option<u64>,
    pub gate_threshold: Option<f64>,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>, o: Overrides) -> CliResult<Self> {
        let mut cfg: PipelineConfig = match path {
            Some(p) => read_toml(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = o.seed {
            cfg.train.seed = s;
        }
        if let Some(w) = o.window_ms {
            cfg.window.window_ms = w;
        }
        if let Some(h) = o.hop_ms {
            cfg.window.hop_ms = h;
        }
        if let Some(t) = o.gate_threshold {
            cfg.window.coverage_threshold = t;
        }
        cfg.window.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(cfg)
    }
}

/// Mode and gate threshold stored next to a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSettings {
    pub mode: FusionMode,
    pub gate_threshold: f64,
}

pub fn cmd_synth(config: Option<&Path>, seed: Option<u64>, out: &Path) -> CliResult<RunManifest> {
    let mut m = ManifestBuilder::new("synth");
    let mut cfg = match config {
        Some(p) => {
            m.config_paths.push(p.to_path_buf());
            read_synth_config(p)?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    ensure_fresh(&out.join(engage_core::corpus::MANIFEST_FILE))?;
    ensure_fresh(&out.join(MANIFEST_FILE))?;
    let generated = generate_corpus(&cfg)?;
    write_generated_corpus(out, &generated)?;
    log::info!(
        "wrote {} sessions to {}",
        generated.corpus.sessions.len(),
        out.display()
    );
    m.seed = Some(cfg.seed);
    m.settings = to_value(&cfg);
    m.write(
        out,
        &[
            engage_core::corpus::MANIFEST_FILE,
            engage_core::corpus::SCHEMA_FILE,
            engage_core::corpus::PATTERNS_FILE,
            engage_core::synth::TRUTH_STATES_FILE,
            engage_core::corpus::SESSIONS_DIR,
        ],
    )
}

/// Writes `features.csv` and `windows.csv` for every window of the corpus.
pub fn cmd_featurize(corpus_dir: &Path, config: Option<&Path>, o: Overrides, out: &Path) -> CliResult<RunManifest> {
    let mut m = ManifestBuilder::new("featurize");
    m.config_paths.extend(config.map(Path::to_path_buf));
    m.inputs.push(corpus_dir.to_path_buf());
    let cfg = PipelineConfig::load(config, o)?;
    for f in [FEATURES_FILE, WINDOWS_FILE, MANIFEST_FILE] {
        ensure_fresh(&out.join(f))?;
    }
    let corpus = read_corpus(corpus_dir)?;
    let fc = featurize_corpus(&corpus, &cfg.window, &cfg.features)?;

    let path = out.join(FEATURES_FILE);
    let mut w = create_fresh(&path)?;
    write_feature_matrix(&mut w, &fc.matrix()).map_err(|e| CliError::from(Error::from(e).at(&path)))?;
    finish(w, &path)?;
    let path = out.join(WINDOWS_FILE);
    let mut w = create_fresh(&path)?;
    write_window_table(&mut w, &fc.window_rows()).map_err(|e| CliError::from(Error::from(e).at(&path)))?;
    finish(w, &path)?;

    m.settings = serde_json::json!({ "window": to_value(&cfg.window), "features": to_value(&cfg.features) });
    m.write(out, &[FEATURES_FILE, WINDOWS_FILE])
}

pub fn read_features(path: &Path) -> CliResult<FeatureMatrix> {
    read_feature_matrix(open(path)?).map_err(|e| CliError::from(Error::from(e).at(path)))
}

pub fn read_windows(path: &Path) -> CliResult<Vec<WindowRow>> {
    read_window_table(open(path)?).map_err(|e| CliError::from(Error::from(e).at(path)))
}

fn index_windows<'a>(windows: &'a [WindowRow], path: &Path) -> CliResult<HashMap<&'a WindowRef, &'a WindowRow>> {
    let mut by_ref = HashMap::with_capacity(windows.len());
    for w in windows {
        if by_ref.insert(&w.window_ref, w).is_some() {
            return Err(invalid(path, format!("duplicate window {}", w.window_ref)));
        }
    }
    Ok(by_ref)
}

fn window_for<'a>(by_ref: &HashMap<&WindowRef, &'a WindowRow>, r: &WindowRef, path: &Path) -> CliResult<&'a WindowRow> {
    by_ref
        .get(r)
        .copied()
        .ok_or_else(|| invalid(path, format!("feature row {r} has no window entry")))
}

/// Trains the appearance forest for `mode` from labeled windows and writes
/// `model.json` plus `fusion.json` (mode and gate threshold).
pub fn cmd_train(
    features: &Path,
    windows: &Path,
    config: Option<&Path>,
    mode: FusionMode,
    o: Overrides,
    out: &Path,
) -> CliResult<RunManifest> {
    let mut m = ManifestBuilder::new("train");
    m.config_paths.extend(config.map(Path::to_path_buf));
    m.inputs.extend([features.to_path_buf(), windows.to_path_buf()]);
    let cfg = PipelineConfig::load(config, o)?;
    for f in [MODEL_FILE, FUSION_FILE, MANIFEST_FILE] {
        ensure_fresh(&out.join(f))?;
    }
    let matrix = read_features(features)?;
    let rows = read_windows(windows)?;
    let by_ref = index_windows(&rows, windows)?;
    let theta = cfg.window.coverage_threshold;

    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut groups = Vec::new();
    for fv in &matrix.rows {
        let w = window_for(&by_ref, &fv.window_ref, windows)?;
        let Some(label) = w.truth_label.label() else {
            continue;
        };
        if !reaches_forest(mode, w.platform_coverage, theta) {
            continue;
        }
        x.push(fv.values.clone());
        y.push(label.class_id());
        groups.push(fv.window_ref.session_id.clone());
    }
    let data = Dataset::new(x, y, matrix.names.clone(), groups).map_err(|e| invalid(features, e))?;
    let model = train_forest(&data, &cfg.train).map_err(|e| CliError::Validation(e.to_string()))?;
    log::info!("trained {} trees on {} windows", model.trees.len(), data.n_rows());

    let path = out.join(MODEL_FILE);
    let mut w = create_fresh(&path)?;
    save_model(&model, &mut w).map_err(|e| CliError::from(Error::from(e).at(&path)))?;
    finish(w, &path)?;
    let fusion = FusionSettings {
        mode,
        gate_threshold: theta,
    };
    write_json(&out.join(FUSION_FILE), &fusion)?;

    m.seed = Some(cfg.train.seed);
    m.settings = serde_json::json!({ "train": to_value(&cfg.train), "fusion": to_value(&fusion) });
    m.write(out, &[MODEL_FILE, FUSION_FILE])
}

/// Fusion settings for a model: `fusion.json` beside it, then flags on top.
pub fn fusion_settings(
    model: &Path,
    mode: Option<FusionMode>,
    gate_threshold: Option<f64>,
) -> CliResult<FusionSettings> {
    let sidecar = model.with_file_name(FUSION_FILE);
    let mut s = if sidecar.exists() {
        serde_json::from_reader(open(&sidecar)?).map_err(|e| invalid(&sidecar, e))?
    } else {
        FusionSettings {
            mode: FusionMode::ContextAndAppearance,
            gate_threshold: WindowConfig::default().coverage_threshold,
        }
    };
    if let Some(m) = mode {
        s.mode = m;
    }
    if let Some(t) = gate_threshold {
        s.gate_threshold = t;
    }
    Ok(s)
}

pub fn cmd_predict(
    model_path: &Path,
    features: &Path,
    windows: &Path,
    mode: Option<FusionMode>,
    gate_threshold: Option<f64>,
    out: &Path,
) -> CliResult<RunManifest> {
    let mut m = ManifestBuilder::new("predict");
    m.inputs
        .extend([model_path.to_path_buf(), features.to_path_buf(), windows.to_path_buf()]);
    for f in [PREDICTIONS_FILE, MANIFEST_FILE] {
        ensure_fresh(&out.join(f))?;
    }
    let fusion = fusion_settings(model_path, mode, gate_threshold)?;
    let forest = load_model(open(model_path)?).map_err(|e| CliError::from(Error::from(e).at(model_path)))?;
    let matrix = read_features(features)?;
    forest.check_schema(&matrix.names).map_err(|e| invalid(features, e))?;
    let rows = read_windows(windows)?;
    let by_ref = index_windows(&rows, windows)?;
    let items = matrix
        .rows
        .iter()
        .map(|fv| {
            Ok(BatchItem {
                window_ref: &fv.window_ref,
                features: &fv.values,
                platform_coverage: window_for(&by_ref, &fv.window_ref, windows)?.platform_coverage,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let model = TwoPhaseModel::new(
        PlatformPatternSet::default(),
        fusion.gate_threshold,
        forest,
        fusion.mode,
    )
    .map_err(|e| CliError::Validation(e.to_string()))?;
    let preds = predict_batch(&model, &items).map_err(|e| CliError::Validation(e.to_string()))?;

    let path = out.join(PREDICTIONS_FILE);
    let mut w = create_fresh(&path)?;
    write_predictions(&mut w, &preds).map_err(|e| CliError::from(Error::from(e).at(&path)))?;
    finish(w, &path)?;
    m.settings = to_value(&fusion);
    m.write(out, &[PREDICTIONS_FILE])
}

pub fn read_prediction_file(path: &Path) -> CliResult<Vec<Prediction>> {
    read_predictions(open(path)?).map_err(|e| CliError::from(Error::from(e).at(path)))
}

/// Scores predictions against the window table. With `out`, also writes
/// `report.csv` and a manifest there.
pub fn cmd_evaluate(predictions: &Path, windows: &Path, out: Option<&Path>) -> CliResult<EvalReport> {
    let mut m = ManifestBuilder::new("evaluate");
    m.inputs.extend([predictions.to_path_buf(), windows.to_path_buf()]);
    if let Some(dir) = out {
        for f in [REPORT_FILE, MANIFEST_FILE] {
            ensure_fresh(&dir.join(f))?;
        }
    }
    let preds = read_prediction_file(predictions)?;
    let rows = read_windows(windows)?;
    let report = evaluate_predictions(&preds, &rows).map_err(|e| CliError::Validation(e.to_string()))?;
    if let Some(dir) = out {
        let path = dir.join(REPORT_FILE);
        let mut w = create_fresh(&path)?;
        write_report_csv(&mut w, &report).map_err(|e| CliError::from(Error::from(e).at(&path)))?;
        finish(w, &path)?;
        m.write(dir, &[REPORT_FILE])?;
    }
    Ok(report)
}

/// Runs an experiment config over a corpus; writes the aligned tables and a
/// CSV with every metric.
pub fn cmd_experiment(config: &Path, corpus_dir: &Path, seed: Option<u64>, out: &Path) -> CliResult<ExperimentReport> {
    let mut m = ManifestBuilder::new("experiment");
    m.config_paths.push(config.to_path_buf());
    m.inputs.push(corpus_dir.to_path_buf());
    let mut cfg = read_experiment_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    for f in [EXPERIMENT_TEXT_FILE, EXPERIMENT_CSV_FILE, MANIFEST_FILE] {
        ensure_fresh(&out.join(f))?;
    }
    let corpus = read_corpus(corpus_dir)?;
    let report = run_experiment(&corpus, &cfg)?;

    let path = out.join(EXPERIMENT_TEXT_FILE);
    let mut w = create_fresh(&path)?;
    w.write_all(report.render().as_bytes()).map_err(|e| io_err(&path, e))?;
    finish(w, &path)?;
    let path = out.join(EXPERIMENT_CSV_FILE);
    let mut w = create_fresh(&path)?;
    report.write_csv(&mut w).map_err(|e| CliError::from(e.at(&path)))?;
    finish(w, &path)?;

    m.seed = Some(cfg.seed);
    m.settings = to_value(&cfg);
    m.write(out, &[EXPERIMENT_TEXT_FILE, EXPERIMENT_CSV_FILE])?;
    Ok(report)
}
