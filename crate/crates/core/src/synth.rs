//! Seeded synthetic corpora from a semi-Markov hidden-state session model.
//!
//! Each session walks through three hidden states (on task, off task while
//! on the platform, off platform) with exponential dwell times. Appearance
//! channels are emitted as state mean + state sinusoid + Gaussian noise, the
//! URL log switches between the platform and distractor sites exactly when
//! the off-platform state starts or ends, and labels are the state intervals.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{create, write_corpus, Corpus};
use crate::ingest::{
    build_timeline, ChannelGroup, ChannelSchema, FrameRecord, Label, LabelInterval, PatternKind, PlatformPatternSet,
    SessionMeta, SessionTimeline, UrlEvent,
};
use crate::{Error, Result};

pub const TRUTH_STATES_FILE: &str = "truth_states.csv";

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenState {
    OnTask,
    OffTaskOnPlatform,
    OffPlatform,
}

impl HiddenState {
    pub const ALL: [HiddenState; 3] = [
        HiddenState::OnTask,
        HiddenState::OffTaskOnPlatform,
        HiddenState::OffPlatform,
    ];

    pub fn index(self) -> usize {
        match self {
            HiddenState::OnTask => 0,
            HiddenState::OffTaskOnPlatform => 1,
            HiddenState::OffPlatform => 2,
        }
    }

    pub fn label(self) -> Label {
        match self {
            HiddenState::OnTask => Label::OnTask,
            _ => Label::OffTask,
        }
    }

    pub fn on_platform(self) -> bool {
        self != HiddenState::OffPlatform
    }

    pub fn token(self) -> &'static str {
        match self {
            HiddenState::OnTask => "on_task",
            HiddenState::OffTaskOnPlatform => "off_task_on_platform",
            HiddenState::OffPlatform => "off_platform",
        }
    }
}

/// One value per hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerState<T> {
    pub on_task: T,
    pub off_task_on_platform: T,
    pub off_platform: T,
}

impl<T: Copy> PerState<T> {
    pub fn get(&self, s: HiddenState) -> T {
        match s {
            HiddenState::OnTask => self.on_task,
            HiddenState::OffTaskOnPlatform => self.off_task_on_platform,
            HiddenState::OffPlatform => self.off_platform,
        }
    }

    pub fn to_array(&self) -> [T; 3] {
        [self.on_task, self.off_task_on_platform, self.off_platform]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateEmission {
    /// Offset from the baseline, scaled by separability and group gain.
    pub mean: f64,
    pub noise_std: f64,
    pub osc_freq_hz: f64,
    /// Sinusoid amplitude, scaled by separability.
    pub osc_amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerGroup<T> {
    pub face_location: T,
    pub head_pose: T,
    pub landmark: T,
    pub expression: T,
    pub emotion: T,
}

impl<T: Copy + Default> Default for PerGroup<T> {
    fn default() -> Self {
        PerGroup {
            face_location: T::default(),
            head_pose: T::default(),
            landmark: T::default(),
            expression: T::default(),
            emotion: T::default(),
        }
    }
}

impl<T: Copy> PerGroup<T> {
    pub fn get(&self, g: ChannelGroup) -> Option<T> {
        match g {
            ChannelGroup::FaceLocation => Some(self.face_location),
            ChannelGroup::HeadPose => Some(self.head_pose),
            ChannelGroup::Landmark => Some(self.landmark),
            ChannelGroup::Expression => Some(self.expression),
            ChannelGroup::Emotion => Some(self.emotion),
            ChannelGroup::Other => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub classroom_id: String,
    pub platform_id: String,
    pub n_sessions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub cells: Vec<CellSpec>,
    pub session_duration_ms: u64,
    pub sample_rate_hz: f64,
    pub channels: PerGroup<usize>,
    pub dwell_mean_s: PerState<f64>,
    pub min_dwell_s: f64,
    pub initial_state: HiddenState,
    /// Row = current state, entries = probability of the next state.
    pub transitions: PerState<PerState<f64>>,
    pub emission: PerState<StateEmission>,
    pub group_gain: PerGroup<f64>,
    pub face_drop_prob: PerState<f64>,
    pub appearance_separability: f64,
    /// Std of the per-channel baseline shift shared by a classroom.
    pub classroom_shift_std: f64,
    /// Std of the per-channel baseline shift shared by a platform.
    pub platform_shift_std: f64,
    /// Std of the per-channel baseline shift of one student session.
    pub session_shift_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let cell = |classroom: &str, platform: &str| CellSpec {
            classroom_id: classroom.into(),
            platform_id: platform.into(),
            n_sessions: 2,
        };
        SynthConfig {
            seed: 42,
            cells: vec![cell("C1", "Math"), cell("C2", "Math"), cell("C1", "ESL")],
            session_duration_ms: 2_400_000,
            sample_rate_hz: 15.0,
            channels: PerGroup {
                face_location: 2,
                head_pose: 3,
                landmark: 4,
                expression: 4,
                emotion: 3,
            },
            dwell_mean_s: PerState {
                on_task: 60.0,
                off_task_on_platform: 20.0,
                off_platform: 25.0,
            },
            min_dwell_s: 2.0,
            initial_state: HiddenState::OnTask,
            transitions: PerState {
                on_task: PerState {
                    on_task: 0.0,
                    off_task_on_platform: 0.6,
                    off_platform: 0.4,
                },
                off_task_on_platform: PerState {
                    on_task: 0.85,
                    off_task_on_platform: 0.0,
                    off_platform: 0.15,
                },
                off_platform: PerState {
                    on_task: 0.9,
                    off_task_on_platform: 0.1,
                    off_platform: 0.0,
                },
            },
            emission: PerState {
                on_task: StateEmission {
                    mean: 0.0,
                    noise_std: 1.0,
                    osc_freq_hz: 0.2,
                    osc_amplitude: 0.3,
                },
                off_task_on_platform: StateEmission {
                    mean: 1.0,
                    noise_std: 1.0,
                    osc_freq_hz: 0.7,
                    osc_amplitude: 0.6,
                },
                off_platform: StateEmission {
                    mean: 0.3,
                    noise_std: 1.0,
                    osc_freq_hz: 0.3,
                    osc_amplitude: 0.3,
                },
            },
            group_gain: PerGroup {
                face_location: 1.0,
                head_pose: 1.0,
                landmark: 0.5,
                expression: 0.5,
                emotion: 0.5,
            },
            face_drop_prob: PerState {
                on_task: 0.02,
                off_task_on_platform: 0.1,
                off_platform: 0.05,
            },
            appearance_separability: 1.0,
            classroom_shift_std: 0.15,
            platform_shift_std: 0.15,
            session_shift_std: 0.4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.session_duration_ms == 0 {
            return bad("session_duration_ms must be positive".into());
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz <= 1000.0) {
            return bad(format!(
                "sample_rate_hz must lie in (0, 1000], got {}",
                self.sample_rate_hz
            ));
        }
        if self.min_dwell_s < 0.0 || !self.min_dwell_s.is_finite() {
            return bad("min_dwell_s must be non-negative".into());
        }
        for s in HiddenState::ALL {
            let dwell = self.dwell_mean_s.get(s);
            if !(dwell > 0.0 && dwell.is_finite()) {
                return bad(format!("dwell mean for {} must be positive, got {dwell}", s.token()));
            }
            let row = self.transitions.get(s).to_array();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!(
                    "transition row for {} must be probabilities summing to 1",
                    s.token()
                ));
            }
            if !(0.0..=1.0).contains(&self.face_drop_prob.get(s)) {
                return bad(format!("face_drop_prob for {} must lie in [0, 1]", s.token()));
            }
            let e = self.emission.get(s);
            if !(e.noise_std >= 0.0 && e.osc_freq_hz >= 0.0) {
                return bad(format!("emission for {} needs noise_std, osc_freq_hz >= 0", s.token()));
            }
        }
        if self.appearance_separability.is_nan() || self.appearance_separability < 0.0 {
            return bad("appearance_separability must be >= 0".into());
        }
        for (name, v) in [
            ("classroom_shift_std", self.classroom_shift_std),
            ("platform_shift_std", self.platform_shift_std),
            ("session_shift_std", self.session_shift_std),
        ] {
            if v.is_nan() || v < 0.0 {
                return bad(format!("{name} must be >= 0"));
            }
        }
        let mut seen = Vec::new();
        for c in &self.cells {
            for id in [&c.classroom_id, &c.platform_id] {
                if id.is_empty()
                    || !id
                        .chars()
                        .all(|ch| ch.is_ascii_alphanumeric() || ch == '-' || ch == '_')
                {
                    return bad(format!("cell ids must be non-empty [A-Za-z0-9_-], got `{id}`"));
                }
            }
            let key = (&c.classroom_id, &c.platform_id);
            if seen.contains(&key) {
                return bad(format!("duplicate cell {}/{}", c.classroom_id, c.platform_id));
            }
            seen.push(key);
        }
        self.schema().map_err(|e| SynthError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn schema(&self) -> Result<ChannelSchema, crate::ingest::IngestError> {
        let c = &self.channels;
        ChannelSchema::from_group_counts(
            &[
                (ChannelGroup::FaceLocation, c.face_location),
                (ChannelGroup::HeadPose, c.head_pose),
                (ChannelGroup::Landmark, c.landmark),
                (ChannelGroup::Expression, c.expression),
                (ChannelGroup::Emotion, c.emotion),
            ],
            self.sample_rate_hz,
        )
    }
}

/// Piece of the hidden state track, `[start_ms, end_ms)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateSegment {
    pub start_ms: u64,
    pub end_ms: u64,
    pub state: HiddenState,
}

#[derive(Debug, Clone)]
pub struct GeneratedSession {
    pub timeline: SessionTimeline,
    pub states: Vec<StateSegment>,
}

#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub corpus: Corpus,
    /// Hidden state track of each session, parallel to `corpus.sessions`.
    pub states: Vec<Vec<StateSegment>>,
}

pub fn platform_host(platform_id: &str) -> String {
    format!("{}.example.com", platform_id.to_ascii_lowercase().replace('_', "-"))
}

const DISTRACTORS: [&str; 4] = [
    "https://social.example.net/feed",
    "https://videos.example.org/watch",
    "https://games.example.io/play",
    "https://chat.example.net/inbox",
];

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Random stream of session `session_index` in cell `cell_index`.
pub fn session_rng(seed: u64, cell_index: usize, session_index: usize) -> ChaCha8Rng {
    stream_rng(seed, ((cell_index as u64 + 1) << 32) | session_index as u64)
}

fn shift_vector(seed: u64, kind: &str, id: &str, std: f64, n: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, (1 << 63) | (fnv1a(&format!("{kind}:{id}")) >> 1));
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn sample_next(row: [f64; 3], rng: &mut ChaCha8Rng) -> HiddenState {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return HiddenState::ALL[i];
        }
    }
    // Rounding slack: fall back to the last state with positive probability.
    let last = row.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    HiddenState::ALL[last]
}

fn state_track(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<StateSegment> {
    let duration = cfg.session_duration_ms;
    let mut out: Vec<StateSegment> = Vec::new();
    let mut t = 0u64;
    let mut state = cfg.initial_state;
    while t < duration {
        let mean = cfg.dwell_mean_s.get(state);
        let dwell_s = Exp::new(1.0 / mean)
            .expect("validated dwell")
            .sample(rng)
            .max(cfg.min_dwell_s);
        let dwell_ms = ((dwell_s * 1000.0).round() as u64).max(1);
        let end = (t + dwell_ms).min(duration);
        match out.last_mut() {
            Some(prev) if prev.state == state => prev.end_ms = end,
            _ => out.push(StateSegment {
                start_ms: t,
                end_ms: end,
                state,
            }),
        }
        t = end;
        state = sample_next(cfg.transitions.get(state).to_array(), rng);
    }
    out
}

/// One session of `cell`. All randomness except the classroom/platform
/// shifts (derived from their ids) comes from `rng`.
pub fn generate_session(
    cfg: &SynthConfig,
    cell: &CellSpec,
    session_index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratedSession> {
    cfg.validate()?;
    let schema = cfg.schema()?;
    let n_ch = schema.arity();
    let session_id = format!("{}-{}-s{:02}", cell.classroom_id, cell.platform_id, session_index);

    let states = state_track(cfg, rng);

    let host = platform_host(&cell.platform_id);
    let mut url_events: Vec<UrlEvent> = Vec::new();
    let mut prev_on: Option<bool> = None;
    for seg in &states {
        let on = seg.state.on_platform();
        if prev_on == Some(on) {
            continue;
        }
        prev_on = Some(on);
        let url = if on {
            format!("https://{host}/content/{}", rng.random_range(1..=500))
        } else {
            DISTRACTORS[rng.random_range(0..DISTRACTORS.len())].to_string()
        };
        url_events.push(UrlEvent {
            session_id: session_id.clone(),
            t_ms: seg.start_ms,
            url,
        });
    }

    let labels: Vec<LabelInterval> = states
        .iter()
        .map(|seg| LabelInterval {
            session_id: session_id.clone(),
            start_ms: seg.start_ms,
            end_ms: seg.end_ms,
            label: seg.state.label(),
        })
        .collect();

    let offsets: Vec<f64> = {
        let classroom = shift_vector(cfg.seed, "classroom", &cell.classroom_id, cfg.classroom_shift_std, n_ch);
        let platform = shift_vector(cfg.seed, "platform", &cell.platform_id, cfg.platform_shift_std, n_ch);
        (0..n_ch)
            .map(|j| classroom[j] + platform[j] + cfg.session_shift_std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let phases: Vec<f64> = (0..n_ch).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let gains: Vec<f64> = schema
        .channels()
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            sign * cfg.group_gain.get(c.group).unwrap_or(1.0)
        })
        .collect();

    let sep = cfg.appearance_separability;
    let mut frames = Vec::new();
    let mut seg_idx = 0;
    for i in 0u64.. {
        let t_ms = (i as f64 * 1000.0 / cfg.sample_rate_hz).round() as u64;
        if t_ms >= cfg.session_duration_ms {
            break;
        }
        while states[seg_idx].end_ms <= t_ms {
            seg_idx += 1;
        }
        let state = states[seg_idx].state;
        let e = cfg.emission.get(state);
        let face_detected = !rng.random_bool(cfg.face_drop_prob.get(state));
        let t_s = t_ms as f64 / 1000.0;
        let channels = (0..n_ch)
            .map(|j| {
                let noise: f64 = rng.sample(StandardNormal);
                if !face_detected {
                    return 0.0;
                }
                offsets[j]
                    + sep * gains[j] * e.mean
                    + sep * e.osc_amplitude * (2.0 * PI * e.osc_freq_hz * t_s + phases[j]).sin()
                    + e.noise_std * noise
            })
            .collect();
        frames.push(FrameRecord {
            session_id: session_id.clone(),
            t_ms,
            face_detected,
            channels,
        });
    }

    let timeline = build_timeline(
        frames,
        url_events,
        labels,
        SessionMeta {
            session_id,
            classroom_id: cell.classroom_id.clone(),
            platform_id: cell.platform_id.clone(),
        },
        Some(cfg.session_duration_ms),
    )?;
    Ok(GeneratedSession { timeline, states })
}

pub fn platform_patterns(cfg: &SynthConfig) -> PlatformPatternSet {
    let mut hosts: Vec<String> = cfg.cells.iter().map(|c| platform_host(&c.platform_id)).collect();
    hosts.sort();
    hosts.dedup();
    PlatformPatternSet::new(hosts.into_iter().map(|h| (PatternKind::HostSuffix, h)))
        .expect("generated hosts are non-empty")
}

/// Every session of every cell, each from its own random stream.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<GeneratedCorpus> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = cfg
        .cells
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| (0..c.n_sessions).map(move |s| (ci, s)))
        .collect();
    let sessions = jobs
        .par_iter()
        .map(|&(ci, s)| generate_session(cfg, &cfg.cells[ci], s, &mut session_rng(cfg.seed, ci, s)))
        .collect::<Result<Vec<_>>>()?;
    let (timelines, states) = sessions.into_iter().map(|g| (g.timeline, g.states)).unzip();
    Ok(GeneratedCorpus {
        corpus: Corpus {
            schema: cfg.schema()?,
            patterns: platform_patterns(cfg),
            sessions: timelines,
        },
        states,
    })
}

/// Writes the corpus plus `truth_states.csv` with the hidden tracks.
pub fn write_generated_corpus(dir: &Path, generated: &GeneratedCorpus) -> Result<()> {
    write_corpus(dir, &generated.corpus)?;
    let path = dir.join(TRUTH_STATES_FILE);
    let mut wtr = csv::Writer::from_writer(create(&path)?);
    wtr.write_record(["session_id", "start_ms", "end_ms", "state"])
        .map_err(Error::Csv)?;
    for (session, track) in generated.corpus.sessions.iter().zip(&generated.states) {
        for seg in track {
            wtr.write_record([
                session.session_id(),
                &seg.start_ms.to_string(),
                &seg.end_ms.to_string(),
                seg.state.token(),
            ])
            .map_err(Error::Csv)?;
        }
    }
    wtr.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn read_synth_config(path: &Path) -> Result<SynthConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: SynthConfig = toml::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            session_duration_ms: 120_000,
            cells: vec![CellSpec {
                classroom_id: "C1".into(),
                platform_id: "Math".into(),
                n_sessions: 1,
            }],
            ..Default::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        SynthConfig::default().validate().unwrap();
        assert_eq!(SynthConfig::default().schema().unwrap().arity(), 16);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = small();
        c.dwell_mean_s.off_platform = 0.0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.transitions.on_task.off_platform = 0.9;
        assert!(c.validate().is_err());
        let mut c = small();
        c.appearance_separability = -1.0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.cells.push(c.cells[0].clone());
        assert!(c.validate().is_err());
    }

    #[test]
    fn no_face_drop_means_all_detected() {
        let mut c = small();
        c.face_drop_prob = PerState {
            on_task: 0.0,
            off_task_on_platform: 0.0,
            off_platform: 0.0,
        };
        let g = generate_session(&c, &c.cells[0], 0, &mut session_rng(1, 0, 0)).unwrap();
        assert!(g.timeline.frames().iter().all(|f| f.face_detected));
        assert_eq!(g.timeline.frames().len(), 1800);
    }

    #[test]
    fn no_off_platform_gives_single_platform_event() {
        let mut c = small();
        c.transitions.on_task = PerState {
            on_task: 0.0,
            off_task_on_platform: 1.0,
            off_platform: 0.0,
        };
        c.transitions.off_task_on_platform = PerState {
            on_task: 1.0,
            off_task_on_platform: 0.0,
            off_platform: 0.0,
        };
        let g = generate_session(&c, &c.cells[0], 0, &mut session_rng(3, 0, 0)).unwrap();
        let events = g.timeline.url_events();
        assert_eq!(events.len(), 1);
        assert!(events[0].url.starts_with("https://math.example.com/"));
        assert!(g.states.iter().all(|s| s.state != HiddenState::OffPlatform));
    }

    #[test]
    fn labels_follow_states() {
        let c = small();
        let g = generate_session(&c, &c.cells[0], 0, &mut session_rng(7, 0, 0)).unwrap();
        assert_eq!(g.timeline.labels().len(), g.states.len());
        for (l, s) in g.timeline.labels().iter().zip(&g.states) {
            assert_eq!((l.start_ms, l.end_ms, l.label), (s.start_ms, s.end_ms, s.state.label()));
        }
        assert_eq!(g.states.first().unwrap().start_ms, 0);
        assert_eq!(g.states.last().unwrap().end_ms, c.session_duration_ms);
        for pair in g.states.windows(2) {
            assert_eq!(pair[0].end_ms, pair[1].start_ms);
            assert_ne!(pair[0].state, pair[1].state);
        }
    }

    #[test]
    fn empty_cell_yields_no_sessions() {
        let mut c = small();
        c.cells.push(CellSpec {
            classroom_id: "C2".into(),
            platform_id: "Math".into(),
            n_sessions: 0,
        });
        let g = generate_corpus(&c).unwrap();
        assert_eq!(g.corpus.sessions.len(), 1);
        assert!(g.corpus.sessions.iter().all(|s| s.meta().classroom_id == "C1"));
    }

    #[test]
    fn toml_round_trip() {
        let c = SynthConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<SynthConfig>(&text).unwrap(), c);
        let partial: SynthConfig = toml::from_str("seed = 7\nappearance_separability = 2.0\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.cells, c.cells);
    }
}
