//! On-disk corpus layout.
//!
//! ```text
//! <dir>/manifest.csv      session_id,classroom_id,platform_id,duration_ms,frames,url_log,labels
//! <dir>/schema.json       channel schema shared by every frames file
//! <dir>/patterns.txt      platform patterns
//! <dir>/sessions/...      per-session frames / url / label CSVs (paths relative to <dir>)
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::ingest::{
    build_timeline, parse_frames, parse_labels, parse_url_log, write_frames, write_labels, write_url_log,
    ChannelSchema, PlatformPatternSet, SessionMeta, SessionTimeline,
};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SCHEMA_FILE: &str = "schema.json";
pub const PATTERNS_FILE: &str = "patterns.txt";
pub const SESSIONS_DIR: &str = "sessions";

const MANIFEST_HEADER: [&str; 7] = [
    "session_id",
    "classroom_id",
    "platform_id",
    "duration_ms",
    "frames",
    "url_log",
    "labels",
];

#[derive(Debug, Clone)]
pub struct Corpus {
    pub schema: ChannelSchema,
    pub patterns: PlatformPatternSet,
    pub sessions: Vec<SessionTimeline>,
}

impl Corpus {
    /// Distinct `(classroom_id, platform_id)` cells in session order.
    pub fn cells(&self) -> Vec<(String, String)> {
        let mut cells: Vec<(String, String)> = Vec::new();
        for s in &self.sessions {
            let cell = (s.meta().classroom_id.clone(), s.meta().platform_id.clone());
            if !cells.contains(&cell) {
                cells.push(cell);
            }
        }
        cells
    }
}

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn at(path: &Path, e: impl Into<Error>) -> Error {
    e.into().at(path)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let schema_path = dir.join(SCHEMA_FILE);
    let schema: ChannelSchema =
        serde_json::from_reader(open(&schema_path)?).map_err(|e| at(&schema_path, Error::Json(e)))?;
    let patterns_path = dir.join(PATTERNS_FILE);
    let patterns = PlatformPatternSet::parse(&read_text(&patterns_path)?).map_err(|e| at(&patterns_path, e))?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let mut rdr = csv::Reader::from_reader(open(&manifest_path)?);
    let header = rdr.headers().map_err(|e| at(&manifest_path, Error::Csv(e)))?;
    if header.iter().ne(MANIFEST_HEADER) {
        return Err(Error::Invalid(format!(
            "{}: expected header `{}`",
            manifest_path.display(),
            MANIFEST_HEADER.join(",")
        )));
    }
    let mut sessions = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| at(&manifest_path, Error::Csv(e)))?;
        let meta = SessionMeta {
            session_id: record[0].to_string(),
            classroom_id: record[1].to_string(),
            platform_id: record[2].to_string(),
        };
        let duration_ms = match &record[3] {
            "" => None,
            d => Some(
                d.parse::<u64>()
                    .map_err(|_| Error::Invalid(format!("{}: invalid duration_ms `{d}`", manifest_path.display())))?,
            ),
        };
        let frames_path = dir.join(&record[4]);
        let urls_path = dir.join(&record[5]);
        let labels_path = dir.join(&record[6]);
        let frames = parse_frames(open(&frames_path)?, &schema).map_err(|e| at(&frames_path, e))?;
        let urls = parse_url_log(open(&urls_path)?).map_err(|e| at(&urls_path, e))?;
        let labels = parse_labels(open(&labels_path)?).map_err(|e| at(&labels_path, e))?;
        let timeline = build_timeline(frames, urls, labels, meta, duration_ms).map_err(|e| at(&manifest_path, e))?;
        sessions.push(timeline);
    }
    Ok(Corpus {
        schema,
        patterns,
        sessions,
    })
}

fn session_paths(session_id: &str) -> [PathBuf; 3] {
    let base = Path::new(SESSIONS_DIR);
    [
        base.join(format!("{session_id}.frames.csv")),
        base.join(format!("{session_id}.urls.csv")),
        base.join(format!("{session_id}.labels.csv")),
    ]
}

pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut schema_out = create(&dir.join(SCHEMA_FILE))?;
    serde_json::to_writer_pretty(&mut schema_out, &corpus.schema).map_err(Error::Json)?;
    schema_out
        .write_all(b"\n")
        .map_err(|e| Error::io(dir.join(SCHEMA_FILE), e))?;
    schema_out.flush().map_err(|e| Error::io(dir.join(SCHEMA_FILE), e))?;
    let mut pat_out = create(&dir.join(PATTERNS_FILE))?;
    pat_out
        .write_all(corpus.patterns.to_text().as_bytes())
        .and_then(|_| pat_out.flush())
        .map_err(|e| Error::io(dir.join(PATTERNS_FILE), e))?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest = csv::Writer::from_writer(create(&manifest_path)?);
    manifest.write_record(MANIFEST_HEADER).map_err(Error::Csv)?;
    for s in &corpus.sessions {
        let [frames, urls, labels] = session_paths(s.session_id());
        write_frames(create(&dir.join(&frames))?, &corpus.schema, s.frames())?;
        write_url_log(create(&dir.join(&urls))?, s.url_events())?;
        write_labels(create(&dir.join(&labels))?, s.labels())?;
        let m = s.meta();
        manifest
            .write_record([
                m.session_id.as_str(),
                &m.classroom_id,
                &m.platform_id,
                &s.duration_ms().to_string(),
                &frames.to_string_lossy(),
                &urls.to_string_lossy(),
                &labels.to_string_lossy(),
            ])
            .map_err(Error::Csv)?;
    }
    manifest.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}
