//! Fixed-length sliding windows over a session, with platform coverage and
//! ground-truth labels per window.

use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{match_platform, Label, LabelInterval, PlatformPatternSet, SessionTimeline, UrlEvent};

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("invalid window config: {0}")]
    Config(String),
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelPolicy {
    /// Label covering the larger share wins; ties go to OffTask; windows less
    /// than half labeled are Unlabeled.
    Majority,
    /// A single label must cover the whole window.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub window_ms: u64,
    pub hop_ms: u64,
    pub label_policy: LabelPolicy,
    /// A window is on-platform iff its coverage is at least this value.
    pub coverage_threshold: f64,
    pub min_valid_frame_ratio: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_ms: 8000,
            hop_ms: 4000,
            label_policy: LabelPolicy::Majority,
            coverage_threshold: 0.5,
            min_valid_frame_ratio: 0.5,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), WindowError> {
        if self.hop_ms == 0 || self.hop_ms > self.window_ms {
            return Err(WindowError::Config(format!(
                "need 0 < hop_ms <= window_ms, got hop {} window {}",
                self.hop_ms, self.window_ms
            )));
        }
        for (name, v) in [
            ("coverage_threshold", self.coverage_threshold),
            ("min_valid_frame_ratio", self.min_valid_frame_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(WindowError::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthLabel {
    OnTask,
    OffTask,
    Unlabeled,
}

impl TruthLabel {
    pub fn label(self) -> Option<Label> {
        match self {
            TruthLabel::OnTask => Some(Label::OnTask),
            TruthLabel::OffTask => Some(Label::OffTask),
            TruthLabel::Unlabeled => None,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            TruthLabel::OnTask => "on_task",
            TruthLabel::OffTask => "off_task",
            TruthLabel::Unlabeled => "unlabeled",
        }
    }
}

impl From<Label> for TruthLabel {
    fn from(l: Label) -> Self {
        match l {
            Label::OnTask => TruthLabel::OnTask,
            Label::OffTask => TruthLabel::OffTask,
        }
    }
}

impl fmt::Display for TruthLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for TruthLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unlabeled" => Ok(TruthLabel::Unlabeled),
            other => other.parse::<Label>().map(TruthLabel::from),
        }
    }
}

/// Identifies a window across files: `(session_id, index)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowRef {
    pub session_id: String,
    pub index: usize,
}

impl fmt::Display for WindowRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.session_id, self.index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub session_id: String,
    pub index: usize,
    pub start_ms: u64,
    pub end_ms: u64,
    /// Indices into the timeline's frames with `start_ms <= t_ms < end_ms`.
    pub frame_range: Range<usize>,
    pub platform_coverage: f64,
    pub valid_frame_ratio: f64,
    pub truth_label: TruthLabel,
}

impl Window {
    pub fn window_ref(&self) -> WindowRef {
        WindowRef {
            session_id: self.session_id.clone(),
            index: self.index,
        }
    }

    pub fn len_ms(&self) -> u64 {
        self.end_ms - self.start_ms
    }
}

/// Start/end of every full-length window: `start = k * hop` for
/// `k = 0..K`, `K = (duration - window) / hop + 1` when the session is long
/// enough, else no windows.
pub fn window_bounds(duration_ms: u64, window_ms: u64, hop_ms: u64) -> Vec<(u64, u64)> {
    if hop_ms == 0 || duration_ms < window_ms {
        return Vec::new();
    }
    let count = (duration_ms - window_ms) / hop_ms + 1;
    (0..count).map(|k| (k * hop_ms, k * hop_ms + window_ms)).collect()
}

/// Slices a session into windows and annotates each with coverage, frame
/// validity and truth label.
pub fn slice_windows(timeline: &SessionTimeline, patterns: &PlatformPatternSet, cfg: &WindowConfig) -> Vec<Window> {
    let frames = timeline.frames();
    let on_platform = platform_intervals(timeline.url_events(), patterns, timeline.duration_ms());
    window_bounds(timeline.duration_ms(), cfg.window_ms, cfg.hop_ms)
        .into_iter()
        .enumerate()
        .map(|(index, (start_ms, end_ms))| {
            let lo = frames.partition_point(|f| f.t_ms < start_ms);
            let hi = frames.partition_point(|f| f.t_ms < end_ms);
            let n = hi - lo;
            let valid = frames[lo..hi].iter().filter(|f| f.face_detected).count();
            Window {
                session_id: timeline.session_id().to_string(),
                index,
                start_ms,
                end_ms,
                frame_range: lo..hi,
                platform_coverage: coverage_of(&on_platform, start_ms, end_ms),
                valid_frame_ratio: if n == 0 { 0.0 } else { valid as f64 / n as f64 },
                truth_label: assign_label(start_ms, end_ms, timeline.labels(), cfg.label_policy),
            }
        })
        .collect()
}

/// Maximal on-platform intervals `[start, end)` of the active-URL function,
/// clipped to `[0, horizon_ms)`. Time before the first event is off-platform.
pub fn platform_intervals(events: &[UrlEvent], patterns: &PlatformPatternSet, horizon_ms: u64) -> Vec<(u64, u64)> {
    let mut out: Vec<(u64, u64)> = Vec::new();
    for (i, e) in events.iter().enumerate() {
        let start = e.t_ms.min(horizon_ms);
        let end = events.get(i + 1).map_or(horizon_ms, |n| n.t_ms.min(horizon_ms));
        if start >= end || !match_platform(&e.url, patterns) {
            continue;
        }
        match out.last_mut() {
            Some(last) if last.1 == start => last.1 = end,
            _ => out.push((start, end)),
        }
    }
    out
}

fn coverage_of(intervals: &[(u64, u64)], start_ms: u64, end_ms: u64) -> f64 {
    if end_ms <= start_ms {
        return 0.0;
    }
    let covered: u64 = intervals
        .iter()
        .map(|&(a, b)| b.min(end_ms).saturating_sub(a.max(start_ms)))
        .sum();
    covered as f64 / (end_ms - start_ms) as f64
}

/// Fraction of `[start_ms, end_ms)` during which the active URL is on-platform.
pub fn platform_coverage(start_ms: u64, end_ms: u64, url_events: &[UrlEvent], patterns: &PlatformPatternSet) -> f64 {
    coverage_of(&platform_intervals(url_events, patterns, end_ms), start_ms, end_ms)
}

pub fn assign_label(start_ms: u64, end_ms: u64, labels: &[LabelInterval], policy: LabelPolicy) -> TruthLabel {
    let len = end_ms.saturating_sub(start_ms);
    if len == 0 {
        return TruthLabel::Unlabeled;
    }
    let (mut on, mut off) = (0u64, 0u64);
    for l in labels {
        let overlap = l.end_ms.min(end_ms).saturating_sub(l.start_ms.max(start_ms));
        match l.label {
            Label::OnTask => on += overlap,
            Label::OffTask => off += overlap,
        }
    }
    match policy {
        LabelPolicy::Strict if on == len => TruthLabel::OnTask,
        LabelPolicy::Strict if off == len => TruthLabel::OffTask,
        LabelPolicy::Strict => TruthLabel::Unlabeled,
        LabelPolicy::Majority if 2 * (on + off) < len => TruthLabel::Unlabeled,
        LabelPolicy::Majority if on > off => TruthLabel::OnTask,
        LabelPolicy::Majority => TruthLabel::OffTask,
    }
}

const WINDOW_HEADER: [&str; 6] = [
    "session_id",
    "index",
    "start_ms",
    "platform_coverage",
    "valid_frame_ratio",
    "truth_label",
];

/// One row of the exported window table.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRow {
    pub window_ref: WindowRef,
    pub start_ms: u64,
    pub platform_coverage: f64,
    pub valid_frame_ratio: f64,
    pub truth_label: TruthLabel,
}

impl From<&Window> for WindowRow {
    fn from(w: &Window) -> Self {
        WindowRow {
            window_ref: w.window_ref(),
            start_ms: w.start_ms,
            platform_coverage: w.platform_coverage,
            valid_frame_ratio: w.valid_frame_ratio,
            truth_label: w.truth_label,
        }
    }
}

pub fn write_window_table<W: Write>(sink: W, rows: &[WindowRow]) -> Result<(), WindowError> {
    let mut wtr = csv::Writer::from_writer(sink);
    wtr.write_record(WINDOW_HEADER)?;
    for r in rows {
        wtr.write_record([
            r.window_ref.session_id.as_str(),
            &r.window_ref.index.to_string(),
            &r.start_ms.to_string(),
            &r.platform_coverage.to_string(),
            &r.valid_frame_ratio.to_string(),
            r.truth_label.token(),
        ])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_window_table<R: Read>(source: R) -> Result<Vec<WindowRow>, WindowError> {
    let mut rdr = csv::Reader::from_reader(source);
    if rdr.headers()?.iter().ne(WINDOW_HEADER) {
        return Err(WindowError::Malformed {
            line: 1,
            message: format!("expected header `{}`", WINDOW_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |what: &str| WindowError::Malformed {
            line,
            message: format!("invalid {what}"),
        };
        let ratio = |i: usize, what: &str| -> Result<f64, WindowError> {
            record[i]
                .parse::<f64>()
                .ok()
                .filter(|v| (0.0..=1.0).contains(v))
                .ok_or_else(|| bad(what))
        };
        rows.push(WindowRow {
            window_ref: WindowRef {
                session_id: record[0].to_string(),
                index: record[1].parse().map_err(|_| bad("index"))?,
            },
            start_ms: record[2].parse().map_err(|_| bad("start_ms"))?,
            platform_coverage: ratio(3, "platform_coverage")?,
            valid_frame_ratio: ratio(4, "valid_frame_ratio")?,
            truth_label: record[5].parse().map_err(|_| bad("truth_label"))?,
        });
    }
    Ok(rows)
}
