//! Parsing and validation of the three per-session input streams.
//!
//! Frames, URL events and label intervals arrive as CSV. Every parser is
//! atomic: either the whole stream validates and is returned, or the first
//! offending line is reported and nothing is returned.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("line {line}: expected {expected} channel values, found {found}")]
    ArityMismatch { line: u64, expected: usize, found: usize },
    #[error("line {line}: timestamp {t_ms} for session `{session_id}` does not increase past {prev_ms}")]
    NonMonotonic {
        line: u64,
        session_id: String,
        prev_ms: u64,
        t_ms: u64,
    },
    #[error("line {line}: unknown label `{token}` (expected on_task or off_task)")]
    UnknownLabel { line: u64, token: String },
    #[error("line {line}: empty interval [{start_ms}, {end_ms})")]
    EmptyInterval { line: u64, start_ms: u64, end_ms: u64 },
    #[error("session `{session_id}`: label intervals [{a_start}, {a_end}) and [{b_start}, {b_end}) overlap")]
    Overlap {
        session_id: String,
        a_start: u64,
        a_end: u64,
        b_start: u64,
        b_end: u64,
    },
    #[error("header mismatch: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("invalid channel schema: {0}")]
    Schema(String),
    #[error("line {line}: invalid platform pattern: {message}")]
    Pattern { line: usize, message: String },
    #[error("cannot normalize url `{url}`: {reason}")]
    Url { url: String, reason: String },
    #[error("{kind} record belongs to session `{found}`, expected `{expected}`")]
    Contamination {
        kind: &'static str,
        expected: String,
        found: String,
    },
    #[error("{kind} timestamp {t_ms} exceeds session duration {duration_ms}")]
    OutOfRange {
        kind: &'static str,
        t_ms: u64,
        duration_ms: u64,
    },
    #[error("invalid session metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

/// Behavioral engagement class. Class ids follow the model convention
/// (0 = OnTask, 1 = OffTask).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    OnTask,
    OffTask,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::OnTask, Label::OffTask];

    pub fn class_id(self) -> usize {
        match self {
            Label::OnTask => 0,
            Label::OffTask => 1,
        }
    }

    pub fn from_class_id(id: usize) -> Option<Label> {
        match id {
            0 => Some(Label::OnTask),
            1 => Some(Label::OffTask),
            _ => None,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Label::OnTask => "on_task",
            Label::OffTask => "off_task",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Label::OnTask => "On-Task",
            Label::OffTask => "Off-Task",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "on_task" => Ok(Label::OnTask),
            "off_task" => Ok(Label::OffTask),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelGroup {
    FaceLocation,
    HeadPose,
    Landmark,
    Expression,
    Emotion,
    Other,
}

impl ChannelGroup {
    pub const ALL: [ChannelGroup; 6] = [
        ChannelGroup::FaceLocation,
        ChannelGroup::HeadPose,
        ChannelGroup::Landmark,
        ChannelGroup::Expression,
        ChannelGroup::Emotion,
        ChannelGroup::Other,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub group: ChannelGroup,
}

/// Ordered list of appearance channels carried by every frame of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema")]
pub struct ChannelSchema {
    sample_rate_hz: f64,
    channels: Vec<Channel>,
}

#[derive(Deserialize)]
struct RawSchema {
    sample_rate_hz: f64,
    channels: Vec<Channel>,
}

impl TryFrom<RawSchema> for ChannelSchema {
    type Error = IngestError;

    fn try_from(raw: RawSchema) -> Result<Self> {
        ChannelSchema::new(raw.channels, raw.sample_rate_hz)
    }
}

pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 15.0;

const EMOTIONS: [&str; 7] = ["joy", "sadness", "anger", "fear", "surprise", "disgust", "contempt"];

impl ChannelSchema {
    pub fn new(channels: Vec<Channel>, sample_rate_hz: f64) -> Result<Self> {
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(IngestError::Schema(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        let mut seen = HashSet::new();
        for ch in &channels {
            if ch.name.is_empty() || ch.name.contains(',') {
                return Err(IngestError::Schema(format!("invalid channel name `{}`", ch.name)));
            }
            if !seen.insert(ch.name.as_str()) {
                return Err(IngestError::Schema(format!("duplicate channel name `{}`", ch.name)));
            }
        }
        Ok(ChannelSchema {
            sample_rate_hz,
            channels,
        })
    }

    /// Builds a schema from per-group channel counts, naming channels
    /// `<prefix>_<i>` except for emotions, which use the basic-emotion names.
    pub fn from_group_counts(counts: &[(ChannelGroup, usize)], sample_rate_hz: f64) -> Result<Self> {
        let mut channels = Vec::new();
        for &(group, n) in counts {
            for i in 0..n {
                let name = match group {
                    ChannelGroup::FaceLocation => ["face_x", "face_y"]
                        .get(i)
                        .map(|s| s.to_string())
                        .unwrap_or_else(|| format!("face_loc_{i}")),
                    ChannelGroup::HeadPose => ["head_pitch", "head_yaw", "head_roll"]
                        .get(i)
                        .map(|s| s.to_string())
                        .unwrap_or_else(|| format!("head_pose_{i}")),
                    ChannelGroup::Landmark => format!("landmark_{i:02}"),
                    ChannelGroup::Expression => format!("expression_{i:02}"),
                    ChannelGroup::Emotion => EMOTIONS
                        .get(i)
                        .map(|s| format!("emotion_{s}"))
                        .unwrap_or_else(|| format!("emotion_{i}")),
                    ChannelGroup::Other => format!("other_{i:02}"),
                };
                channels.push(Channel { name, group });
            }
        }
        ChannelSchema::new(channels, sample_rate_hz)
    }

    /// Full appearance schema: 2 face-location, 3 head-pose, 78 landmark,
    /// 22 expression and 7 emotion channels (112 total) at 15 Hz.
    pub fn default_appearance() -> Self {
        ChannelSchema::from_group_counts(
            &[
                (ChannelGroup::FaceLocation, 2),
                (ChannelGroup::HeadPose, 3),
                (ChannelGroup::Landmark, 78),
                (ChannelGroup::Expression, 22),
                (ChannelGroup::Emotion, 7),
            ],
            DEFAULT_SAMPLE_RATE_HZ,
        )
        .expect("default schema is valid")
    }

    pub fn arity(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.channels.iter().map(|c| c.name.as_str())
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn frame_period_s(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub session_id: String,
    pub t_ms: u64,
    pub face_detected: bool,
    /// Present even when `face_detected` is false, but then not an observation.
    pub channels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UrlEvent {
    pub session_id: String,
    pub t_ms: u64,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelInterval {
    pub session_id: String,
    pub start_ms: u64,
    pub end_ms: u64,
    pub label: Label,
}

impl LabelInterval {
    pub fn duration_ms(&self) -> u64 {
        self.end_ms - self.start_ms
    }
}

const FRAME_PREFIX: [&str; 3] = ["session_id", "t_ms", "face_detected"];
const URL_HEADER: [&str; 3] = ["session_id", "t_ms", "url"];
const LABEL_HEADER: [&str; 4] = ["session_id", "start_ms", "end_ms", "label"];

fn csv_reader<R: Read>(stream: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(stream)
}

fn line_of(record: &csv::StringRecord, fallback: u64) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(fallback)
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    if found.iter().ne(expected.iter().copied()) {
        return Err(IngestError::Header {
            expected: expected.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        });
    }
    Ok(())
}

fn field<'r>(record: &'r csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<&'r str> {
    record.get(idx).ok_or_else(|| IngestError::Malformed {
        line,
        message: format!("missing `{name}` field"),
    })
}

fn parse_num<T: FromStr>(text: &str, name: &str, line: u64) -> Result<T> {
    text.trim().parse().map_err(|_| IngestError::Malformed {
        line,
        message: format!("invalid {name} `{text}`"),
    })
}

fn parse_session_id(text: &str, line: u64) -> Result<String> {
    if text.is_empty() {
        return Err(IngestError::Malformed {
            line,
            message: "empty session_id".into(),
        });
    }
    Ok(text.to_string())
}

/// Parses a frames CSV whose header must list the schema's channels in order.
pub fn parse_frames<R: Read>(stream: R, schema: &ChannelSchema) -> Result<Vec<FrameRecord>> {
    let mut rdr = csv_reader(stream);
    let expected: Vec<&str> = FRAME_PREFIX.iter().copied().chain(schema.names()).collect();
    check_header(rdr.headers()?, &expected)?;

    let mut last_t: HashMap<String, u64> = HashMap::new();
    let mut frames = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = line_of(&record, i as u64 + 2);
        if record.len() < FRAME_PREFIX.len() {
            return Err(IngestError::Malformed {
                line,
                message: format!("expected at least {} fields", FRAME_PREFIX.len()),
            });
        }
        let found = record.len() - FRAME_PREFIX.len();
        if found != schema.arity() {
            return Err(IngestError::ArityMismatch {
                line,
                expected: schema.arity(),
                found,
            });
        }
        let session_id = parse_session_id(field(&record, 0, "session_id", line)?, line)?;
        let t_ms: u64 = parse_num(field(&record, 1, "t_ms", line)?, "t_ms", line)?;
        let face_detected = match field(&record, 2, "face_detected", line)? {
            "1" => true,
            "0" => false,
            other => {
                return Err(IngestError::Malformed {
                    line,
                    message: format!("face_detected must be 0 or 1, found `{other}`"),
                })
            }
        };
        let channels = record
            .iter()
            .skip(FRAME_PREFIX.len())
            .map(|v| {
                let x: f64 = parse_num(v, "channel value", line)?;
                if x.is_finite() {
                    Ok(x)
                } else {
                    Err(IngestError::Malformed {
                        line,
                        message: format!("non-finite channel value `{v}`"),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        check_increasing(&mut last_t, &session_id, t_ms, line)?;
        frames.push(FrameRecord {
            session_id,
            t_ms,
            face_detected,
            channels,
        });
    }
    Ok(frames)
}

fn check_increasing(last: &mut HashMap<String, u64>, session_id: &str, t_ms: u64, line: u64) -> Result<()> {
    if let Some(&prev_ms) = last.get(session_id) {
        if t_ms <= prev_ms {
            return Err(IngestError::NonMonotonic {
                line,
                session_id: session_id.to_string(),
                prev_ms,
                t_ms,
            });
        }
    }
    last.insert(session_id.to_string(), t_ms);
    Ok(())
}

/// Parses a URL activity log. URLs are kept verbatim.
pub fn parse_url_log<R: Read>(stream: R) -> Result<Vec<UrlEvent>> {
    let mut rdr = csv_reader(stream);
    if rdr.headers()?.is_empty() {
        return Ok(Vec::new());
    }
    check_header(rdr.headers()?, &URL_HEADER)?;
    let mut last_t = HashMap::new();
    let mut events = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = line_of(&record, i as u64 + 2);
        if record.len() != URL_HEADER.len() {
            return Err(IngestError::Malformed {
                line,
                message: format!("expected {} fields, found {}", URL_HEADER.len(), record.len()),
            });
        }
        let session_id = parse_session_id(&record[0], line)?;
        let t_ms: u64 = parse_num(&record[1], "t_ms", line)?;
        check_increasing(&mut last_t, &session_id, t_ms, line)?;
        events.push(UrlEvent {
            session_id,
            t_ms,
            url: record[2].to_string(),
        });
    }
    Ok(events)
}

/// Parses ground-truth label intervals; intervals of one session must not overlap.
pub fn parse_labels<R: Read>(stream: R) -> Result<Vec<LabelInterval>> {
    let mut rdr = csv_reader(stream);
    if rdr.headers()?.is_empty() {
        return Ok(Vec::new());
    }
    check_header(rdr.headers()?, &LABEL_HEADER)?;
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = line_of(&record, i as u64 + 2);
        if record.len() != LABEL_HEADER.len() {
            return Err(IngestError::Malformed {
                line,
                message: format!("expected {} fields, found {}", LABEL_HEADER.len(), record.len()),
            });
        }
        let session_id = parse_session_id(&record[0], line)?;
        let start_ms: u64 = parse_num(&record[1], "start_ms", line)?;
        let end_ms: u64 = parse_num(&record[2], "end_ms", line)?;
        let label: Label = record[3]
            .parse()
            .map_err(|token| IngestError::UnknownLabel { line, token })?;
        if start_ms >= end_ms {
            return Err(IngestError::EmptyInterval { line, start_ms, end_ms });
        }
        labels.push(LabelInterval {
            session_id,
            start_ms,
            end_ms,
            label,
        });
    }
    check_no_overlap(&labels)?;
    Ok(labels)
}

fn check_no_overlap(labels: &[LabelInterval]) -> Result<()> {
    let mut by_session: HashMap<&str, Vec<&LabelInterval>> = HashMap::new();
    for l in labels {
        by_session.entry(&l.session_id).or_default().push(l);
    }
    let mut sessions: Vec<_> = by_session.into_iter().collect();
    sessions.sort_by(|a, b| a.0.cmp(b.0));
    for (session_id, mut ivs) in sessions {
        ivs.sort_by_key(|l| (l.start_ms, l.end_ms));
        for pair in ivs.windows(2) {
            if pair[1].start_ms < pair[0].end_ms {
                return Err(IngestError::Overlap {
                    session_id: session_id.to_string(),
                    a_start: pair[0].start_ms,
                    a_end: pair[0].end_ms,
                    b_start: pair[1].start_ms,
                    b_end: pair[1].end_ms,
                });
            }
        }
    }
    Ok(())
}

pub fn write_frames<W: Write>(sink: W, schema: &ChannelSchema, frames: &[FrameRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(sink);
    let header: Vec<&str> = FRAME_PREFIX.iter().copied().chain(schema.names()).collect();
    wtr.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for f in frames {
        row.clear();
        row.push(f.session_id.clone());
        row.push(f.t_ms.to_string());
        row.push(if f.face_detected { "1" } else { "0" }.to_string());
        row.extend(f.channels.iter().map(|v| v.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_url_log<W: Write>(sink: W, events: &[UrlEvent]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(sink);
    wtr.write_record(URL_HEADER)?;
    for e in events {
        wtr.write_record([e.session_id.as_str(), &e.t_ms.to_string(), &e.url])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_labels<W: Write>(sink: W, labels: &[LabelInterval]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(sink);
    wtr.write_record(LABEL_HEADER)?;
    for l in labels {
        wtr.write_record([
            l.session_id.as_str(),
            &l.start_ms.to_string(),
            &l.end_ms.to_string(),
            l.label.token(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedUrl {
    pub host: String,
    pub path: String,
}

/// Strips scheme and port, lowercases the host, and defaults an empty path to `/`.
pub fn normalize_url(raw: &str) -> Result<NormalizedUrl> {
    let err = |reason: &str| IngestError::Url {
        url: raw.to_string(),
        reason: reason.to_string(),
    };
    let parsed = url::Url::parse(raw.trim()).map_err(|e| err(&e.to_string()))?;
    let host = parsed
        .host_str()
        .filter(|h| !h.is_empty())
        .ok_or_else(|| err("no host"))?
        .to_ascii_lowercase();
    let path = match parsed.path() {
        "" => "/".to_string(),
        p => p.to_string(),
    };
    Ok(NormalizedUrl { host, path })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    HostSuffix,
    Prefix,
}

impl PatternKind {
    fn keyword(self) -> &'static str {
        match self {
            PatternKind::HostSuffix => "host_suffix",
            PatternKind::Prefix => "prefix",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlatformPattern {
    pub kind: PatternKind,
    pub value: String,
}

/// URL patterns identifying the content platform.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PlatformPatternSet {
    patterns: Vec<PlatformPattern>,
}

impl PlatformPatternSet {
    pub fn new<I>(patterns: I) -> Result<Self>
    where
        I: IntoIterator<Item = (PatternKind, String)>,
    {
        let patterns = patterns
            .into_iter()
            .enumerate()
            .map(|(i, (kind, value))| {
                let value = value.trim().to_ascii_lowercase();
                if value.is_empty() {
                    return Err(IngestError::Pattern {
                        line: i + 1,
                        message: "empty pattern value".into(),
                    });
                }
                Ok(PlatformPattern { kind, value })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PlatformPatternSet { patterns })
    }

    /// Parses the line-oriented `host_suffix <value>` / `prefix <value>` format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut patterns = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let kind = match parts.next() {
                Some("host_suffix") => PatternKind::HostSuffix,
                Some("prefix") => PatternKind::Prefix,
                Some(other) => {
                    return Err(IngestError::Pattern {
                        line: i + 1,
                        message: format!("unknown pattern kind `{other}`"),
                    })
                }
                None => unreachable!("line is non-empty"),
            };
            let value = match (parts.next(), parts.next()) {
                (Some(v), None) => v.to_ascii_lowercase(),
                _ => {
                    return Err(IngestError::Pattern {
                        line: i + 1,
                        message: "expected exactly one value".into(),
                    })
                }
            };
            patterns.push(PlatformPattern { kind, value });
        }
        Ok(PlatformPatternSet { patterns })
    }

    pub fn to_text(&self) -> String {
        self.patterns
            .iter()
            .map(|p| format!("{} {}\n", p.kind.keyword(), p.value))
            .collect()
    }

    pub fn patterns(&self) -> &[PlatformPattern] {
        &self.patterns
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }
}

/// True iff the URL belongs to the content platform. Unparseable URLs never match.
pub fn match_platform(url: &str, patterns: &PlatformPatternSet) -> bool {
    let Ok(norm) = normalize_url(url) else {
        return false;
    };
    let mut joined: Option<String> = None;
    patterns.patterns.iter().any(|p| match p.kind {
        PatternKind::HostSuffix => {
            norm.host == p.value
                || (norm.host.ends_with(&p.value) && norm.host.as_bytes()[norm.host.len() - p.value.len() - 1] == b'.')
        }
        PatternKind::Prefix => joined
            .get_or_insert_with(|| format!("{}{}", norm.host, norm.path).to_ascii_lowercase())
            .starts_with(&p.value),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub classroom_id: String,
    pub platform_id: String,
}

/// All aligned streams of one student session. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionTimeline {
    meta: SessionMeta,
    duration_ms: u64,
    frames: Vec<FrameRecord>,
    url_events: Vec<UrlEvent>,
    labels: Vec<LabelInterval>,
}

/// Validates that all streams belong to `meta.session_id` and fit within the
/// session; `duration_ms` defaults to the largest timestamp seen.
pub fn build_timeline(
    frames: Vec<FrameRecord>,
    url_events: Vec<UrlEvent>,
    mut labels: Vec<LabelInterval>,
    meta: SessionMeta,
    duration_ms: Option<u64>,
) -> Result<SessionTimeline> {
    for (name, value) in [
        ("session_id", &meta.session_id),
        ("classroom_id", &meta.classroom_id),
        ("platform_id", &meta.platform_id),
    ] {
        if value.is_empty() {
            return Err(IngestError::Metadata(format!("{name} is empty")));
        }
    }
    let sid = meta.session_id.as_str();
    let contamination = |kind, found: &str| IngestError::Contamination {
        kind,
        expected: sid.to_string(),
        found: found.to_string(),
    };
    if let Some(f) = frames.iter().find(|f| f.session_id != sid) {
        return Err(contamination("frame", &f.session_id));
    }
    if let Some(e) = url_events.iter().find(|e| e.session_id != sid) {
        return Err(contamination("url", &e.session_id));
    }
    if let Some(l) = labels.iter().find(|l| l.session_id != sid) {
        return Err(contamination("label", &l.session_id));
    }
    for pair in frames.windows(2) {
        if pair[1].t_ms <= pair[0].t_ms {
            return Err(IngestError::NonMonotonic {
                line: 0,
                session_id: sid.to_string(),
                prev_ms: pair[0].t_ms,
                t_ms: pair[1].t_ms,
            });
        }
    }
    for pair in url_events.windows(2) {
        if pair[1].t_ms <= pair[0].t_ms {
            return Err(IngestError::NonMonotonic {
                line: 0,
                session_id: sid.to_string(),
                prev_ms: pair[0].t_ms,
                t_ms: pair[1].t_ms,
            });
        }
    }
    labels.sort_by_key(|l| l.start_ms);
    check_no_overlap(&labels)?;

    let max_t = frames
        .last()
        .map(|f| f.t_ms)
        .into_iter()
        .chain(url_events.last().map(|e| e.t_ms))
        .chain(labels.iter().map(|l| l.end_ms))
        .max()
        .unwrap_or(0);
    let duration_ms = duration_ms.unwrap_or(max_t);
    let out_of_range = |kind, t_ms| IngestError::OutOfRange {
        kind,
        t_ms,
        duration_ms,
    };
    if let Some(f) = frames.last().filter(|f| f.t_ms > duration_ms) {
        return Err(out_of_range("frame", f.t_ms));
    }
    if let Some(e) = url_events.last().filter(|e| e.t_ms > duration_ms) {
        return Err(out_of_range("url", e.t_ms));
    }
    if let Some(l) = labels.iter().find(|l| l.end_ms > duration_ms) {
        return Err(out_of_range("label", l.end_ms));
    }
    Ok(SessionTimeline {
        meta,
        duration_ms,
        frames,
        url_events,
        labels,
    })
}

impl SessionTimeline {
    pub fn meta(&self) -> &SessionMeta {
        &self.meta
    }

    pub fn session_id(&self) -> &str {
        &self.meta.session_id
    }

    pub fn duration_ms(&self) -> u64 {
        self.duration_ms
    }

    pub fn frames(&self) -> &[FrameRecord] {
        &self.frames
    }

    pub fn url_events(&self) -> &[UrlEvent] {
        &self.url_events
    }

    pub fn labels(&self) -> &[LabelInterval] {
        &self.labels
    }

    /// URL active at `t_ms`, or `None` before the first event.
    pub fn active_url_at(&self, t_ms: u64) -> Option<&str> {
        active_url_at(&self.url_events, t_ms)
    }
}

/// Piecewise-constant active-URL function: each event holds until the next.
pub fn active_url_at(events: &[UrlEvent], t_ms: u64) -> Option<&str> {
    let idx = events.partition_point(|e| e.t_ms <= t_ms);
    idx.checked_sub(1).map(|i| events[i].url.as_str())
}
