//! Train/test experiments over corpus cells, reported per class and mode.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_text, Corpus};
use crate::eval::{evaluate_predictions, EvalReport, REPORT_HEADER};
use crate::features::FeatureSpec;
use crate::forest::TrainConfig;
use crate::fusion::{FusionMode, TwoPhaseModel};
use crate::ingest::{Label, SessionMeta};
use crate::pipeline::{featurize_corpus, predict_sessions, train_for_mode, FeaturizedCorpus, FeaturizedSession};
use crate::windowing::{WindowConfig, WindowRow};
use crate::{Error, Result};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid selector `{text}`: {message}")]
    Selector { text: String, message: String },
    #[error("run `{run}`: {which} selector `{selector}` matches no sessions")]
    EmptySelection {
        run: String,
        which: &'static str,
        selector: String,
    },
    #[error("run `{run}`: train and test share {n} session(s); set allow_self_test to evaluate in-set")]
    Overlap { run: String, n: usize },
    #[error("invalid experiment config: {0}")]
    Config(String),
}

/// Predicate over `(classroom_id, platform_id)`, written
/// `classroom=C1|C2,platform=Math`. An omitted key or `*` matches anything.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Selector {
    pub classroom: Option<Vec<String>>,
    pub platform: Option<Vec<String>>,
}

impl Selector {
    pub fn matches(&self, meta: &SessionMeta) -> bool {
        let ok = |allowed: &Option<Vec<String>>, v: &str| allowed.as_ref().is_none_or(|a| a.iter().any(|x| x == v));
        ok(&self.classroom, &meta.classroom_id) && ok(&self.platform, &meta.platform_id)
    }
}

impl FromStr for Selector {
    type Err = ExperimentError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let err = |message: String| ExperimentError::Selector {
            text: text.to_string(),
            message,
        };
        let mut sel = Selector::default();
        let trimmed = text.trim();
        if trimmed.is_empty() || trimmed == "*" {
            return Ok(sel);
        }
        for clause in trimmed.split(',') {
            let (key, value) = clause
                .split_once('=')
                .ok_or_else(|| err(format!("clause `{clause}` is not key=value")))?;
            let value = value.trim();
            let values: Option<Vec<String>> = if value == "*" {
                None
            } else {
                let vs: Vec<String> = value.split('|').map(|v| v.trim().to_string()).collect();
                if vs.iter().any(String::is_empty) {
                    return Err(err(format!("empty value in `{clause}`")));
                }
                Some(vs)
            };
            let slot = match key.trim() {
                "classroom" => &mut sel.classroom,
                "platform" => &mut sel.platform,
                other => return Err(err(format!("unknown key `{other}`"))),
            };
            if slot.is_some() {
                return Err(err(format!("key `{}` given twice", key.trim())));
            }
            *slot = values;
        }
        Ok(sel)
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let part = |v: &Option<Vec<String>>| v.as_ref().map_or("*".to_string(), |v| v.join("|"));
        write!(
            f,
            "classroom={},platform={}",
            part(&self.classroom),
            part(&self.platform)
        )
    }
}

impl<'de> Deserialize<'de> for Selector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl Serialize for Selector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

fn both_modes() -> Vec<FusionMode> {
    vec![FusionMode::AppearanceOnly, FusionMode::ContextAndAppearance]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    /// Report table this run belongs to, e.g. `cross-classroom`.
    pub table: String,
    pub train_name: String,
    pub test_name: String,
    pub train: Selector,
    pub test: Selector,
    #[serde(default)]
    pub allow_self_test: bool,
    #[serde(default = "both_modes")]
    pub modes: Vec<FusionMode>,
    /// Overrides the experiment seed for this run.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl RunSpec {
    pub fn name(&self) -> String {
        format!("{}:{}->{}", self.table, self.train_name, self.test_name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Forest seed for every run without its own.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub window: WindowConfig,
    #[serde(default)]
    pub features: FeatureSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(rename = "run")]
    pub runs: Vec<RunSpec>,
}

fn default_seed() -> u64 {
    42
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if self.runs.is_empty() {
            return Err(ExperimentError::Config("no [[run]] entries".into()).into());
        }
        for r in &self.runs {
            if r.modes.is_empty() {
                return Err(ExperimentError::Config(format!("run `{}` lists no modes", r.name())).into());
            }
        }
        Ok(())
    }
}

pub fn read_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(&read_text(path)?).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeReport {
    pub mode: FusionMode,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub spec: RunSpec,
    pub n_train_sessions: usize,
    pub n_test_sessions: usize,
    pub reports: Vec<ModeReport>,
}

impl RunResult {
    pub fn report(&self, mode: FusionMode) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.mode == mode).map(|r| &r.report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub runs: Vec<RunResult>,
}

fn select<'a>(fc: &'a FeaturizedCorpus, sel: &Selector) -> Vec<&'a FeaturizedSession> {
    fc.sessions.iter().filter(|s| sel.matches(&s.meta)).collect()
}

fn run_one(fc: &FeaturizedCorpus, cfg: &ExperimentConfig, spec: &RunSpec) -> Result<RunResult> {
    let train = select(fc, &spec.train);
    let test = select(fc, &spec.test);
    for (which, sessions, sel) in [("train", &train, &spec.train), ("test", &test, &spec.test)] {
        if sessions.is_empty() {
            return Err(ExperimentError::EmptySelection {
                run: spec.name(),
                which,
                selector: sel.to_string(),
            }
            .into());
        }
    }
    let train_ids: HashSet<&str> = train.iter().map(|s| s.meta.session_id.as_str()).collect();
    let shared = test
        .iter()
        .filter(|s| train_ids.contains(s.meta.session_id.as_str()))
        .count();
    if shared > 0 && !spec.allow_self_test {
        return Err(ExperimentError::Overlap {
            run: spec.name(),
            n: shared,
        }
        .into());
    }
    let train_cfg = TrainConfig {
        seed: spec.seed.unwrap_or(cfg.seed),
        ..cfg.train.clone()
    };
    let theta = cfg.window.coverage_threshold;
    let windows: Vec<WindowRow> = test
        .iter()
        .flat_map(|s| s.windows.iter().map(WindowRow::from))
        .collect();
    let mut reports = Vec::new();
    for &mode in &spec.modes {
        let forest = train_for_mode(train.iter().copied(), &fc.feature_names, mode, theta, &train_cfg)
            .map_err(|e| Error::Invalid(format!("run `{}` ({mode}): {e}", spec.name())))?;
        let model = TwoPhaseModel::new(fc.patterns.clone(), theta, forest, mode)?;
        let preds = predict_sessions(&model, test.iter().copied())?;
        let report = evaluate_predictions(&preds, &windows)?;
        reports.push(ModeReport { mode, report });
    }
    Ok(RunResult {
        spec: spec.clone(),
        n_train_sessions: train.len(),
        n_test_sessions: test.len(),
        reports,
    })
}

/// Runs every configured train/test split on an already featurized corpus.
pub fn run_experiment_featurized(fc: &FeaturizedCorpus, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let runs = cfg
        .runs
        .par_iter()
        .map(|spec| run_one(fc, cfg, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport { runs })
}

pub fn run_experiment(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let fc = featurize_corpus(corpus, &cfg.window, &cfg.features)?;
    run_experiment_featurized(&fc, cfg)
}

const CLASS_ROWS: [&str; 3] = ["On-Task", "Off-Task", "Overall"];

fn class_value(r: &EvalReport, row: usize) -> f64 {
    match row {
        0 => r.f1(Label::OnTask),
        1 => r.f1(Label::OffTask),
        _ => r.overall_f1_weighted,
    }
}

impl ExperimentReport {
    /// Table names in first-appearance order.
    pub fn tables(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.runs {
            if !out.contains(&r.spec.table.as_str()) {
                out.push(&r.spec.table);
            }
        }
        out
    }

    pub fn runs_in<'a>(&'a self, table: &'a str) -> impl Iterator<Item = &'a RunResult> {
        self.runs.iter().filter(move |r| r.spec.table == table)
    }

    /// Aligned F1 tables, one per table name: Train, Test, Class, Appr,
    /// Context+Appr. Overall is the support-weighted F1.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for table in self.tables() {
            let runs: Vec<&RunResult> = self.runs_in(table).collect();
            let wt = runs
                .iter()
                .map(|r| r.spec.train_name.len())
                .chain(["Train".len()])
                .max()
                .unwrap_or(5);
            let we = runs
                .iter()
                .map(|r| r.spec.test_name.len())
                .chain(["Test".len()])
                .max()
                .unwrap_or(4);
            out.push_str(&format!("{table}\n"));
            out.push_str(&format!(
                "{:<wt$}  {:<we$}  {:<8}  {:>6}  {:>12}\n",
                "Train", "Test", "Class", "Appr", "Context+Appr"
            ));
            for r in runs {
                for (i, class) in CLASS_ROWS.iter().enumerate() {
                    let cell = |mode| {
                        r.report(mode)
                            .map_or("-".to_string(), |rep| format!("{:.2}", class_value(rep, i)))
                    };
                    let (train, test) = if i == 0 {
                        (r.spec.train_name.as_str(), r.spec.test_name.as_str())
                    } else {
                        ("", "")
                    };
                    out.push_str(&format!(
                        "{train:<wt$}  {test:<we$}  {class:<8}  {:>6}  {:>12}\n",
                        cell(FusionMode::AppearanceOnly),
                        cell(FusionMode::ContextAndAppearance),
                    ));
                }
            }
            out.push('\n');
        }
        out
    }

    /// One row per (run, mode) with the full metric set.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(sink);
        let header: Vec<&str> = ["table", "train", "test", "train_selector", "test_selector", "mode"]
            .into_iter()
            .chain(REPORT_HEADER)
            .collect();
        wtr.write_record(&header).map_err(Error::Csv)?;
        for r in &self.runs {
            for m in &r.reports {
                let mut row = vec![
                    r.spec.table.clone(),
                    r.spec.train_name.clone(),
                    r.spec.test_name.clone(),
                    r.spec.train.to_string(),
                    r.spec.test.to_string(),
                    m.mode.token().to_string(),
                ];
                row.extend(m.report.csv_fields());
                wtr.write_record(&row).map_err(Error::Csv)?;
            }
        }
        wtr.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}
