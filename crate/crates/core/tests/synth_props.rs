use std::fs;
use std::path::Path;

use engage_core::eval::evaluate_predictions;
use engage_core::experiment::{run_experiment_featurized, ExperimentConfig, ExperimentError};
use engage_core::fusion::FusionMode;
use engage_core::ingest::match_platform;
use engage_core::pipeline::{featurize_corpus, predict_sessions, train_for_mode};
use engage_core::synth::{
    generate_corpus, generate_session, session_rng, write_generated_corpus, CellSpec, GeneratedCorpus, HiddenState,
    StateSegment, SynthConfig,
};
use engage_core::windowing::{slice_windows, WindowRow};
use engage_core::{write_corpus, Corpus, Error, FeatureSpec, TrainConfig, TwoPhaseModel, WindowConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cell(classroom: &str, platform: &str, n: usize) -> CellSpec {
    CellSpec {
        classroom_id: classroom.into(),
        platform_id: platform.into(),
        n_sessions: n,
    }
}

fn small(seed: u64, duration_ms: u64, cells: Vec<CellSpec>) -> SynthConfig {
    SynthConfig {
        seed,
        cells,
        session_duration_ms: duration_ms,
        ..SynthConfig::default()
    }
}

/// Every file under `dir` with its path relative to `root`, sorted.
fn tree_bytes(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            tree_bytes(root, &path, out);
        } else {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.push((rel, fs::read(&path).unwrap()));
        }
    }
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    tree_bytes(dir, dir, &mut out);
    out.sort();
    out
}

fn off_platform_ms(track: &[StateSegment], a: u64, b: u64) -> u64 {
    track
        .iter()
        .filter(|s| s.state == HiddenState::OffPlatform)
        .map(|s| s.end_ms.min(b).saturating_sub(s.start_ms.max(a)))
        .sum()
}

/// Stationary time share of OffPlatform for the semi-Markov model: embedded
/// chain stationary distribution weighted by the floored mean dwell.
fn analytic_off_platform(cfg: &SynthConfig) -> f64 {
    let p: Vec<[f64; 3]> = HiddenState::ALL
        .iter()
        .map(|&s| cfg.transitions.get(s).to_array())
        .collect();
    let mut pi = [1.0 / 3.0; 3];
    for _ in 0..10_000 {
        let mut next = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                next[j] += pi[i] * p[i][j];
            }
        }
        pi = next;
    }
    let c = cfg.min_dwell_s;
    let dwell: Vec<f64> = HiddenState::ALL
        .iter()
        .map(|&s| {
            let m = cfg.dwell_mean_s.get(s);
            c + m * (-c / m).exp()
        })
        .collect();
    let total: f64 = (0..3).map(|i| pi[i] * dwell[i]).sum();
    pi[2] * dwell[2] / total
}

#[test]
fn off_platform_fraction_matches_dwell_model() {
    let cfg = small(42, 2_400_000, vec![cell("C1", "Math", 20)]);
    let generated = generate_corpus(&cfg).unwrap();
    let off: u64 = generated
        .states
        .iter()
        .map(|t| off_platform_ms(t, 0, cfg.session_duration_ms))
        .sum();
    let observed = off as f64 / (20 * cfg.session_duration_ms) as f64;
    let expected = analytic_off_platform(&cfg);
    assert!((0.13..0.17).contains(&expected), "analytic {expected}");
    assert!(
        (observed - expected).abs() <= 0.2 * expected,
        "observed {observed}, analytic {expected}"
    );
}

#[test]
fn labels_and_urls_follow_hidden_states() {
    let cfg = small(7, 600_000, vec![cell("C1", "Math", 3), cell("C2", "ESL", 2)]);
    let generated = generate_corpus(&cfg).unwrap();
    for (tl, track) in generated.corpus.sessions.iter().zip(&generated.states) {
        assert_eq!(track.first().unwrap().start_ms, 0);
        assert_eq!(track.last().unwrap().end_ms, cfg.session_duration_ms);
        assert!(track
            .windows(2)
            .all(|w| w[0].end_ms == w[1].start_ms && w[0].state != w[1].state));
        let labels = tl.labels();
        assert_eq!(labels.len(), track.len());
        for (l, s) in labels.iter().zip(track) {
            assert_eq!((l.start_ms, l.end_ms, l.label), (s.start_ms, s.end_ms, s.state.label()));
        }
        // Off-platform URLs appear exactly at OffPlatform boundaries.
        for e in tl.url_events() {
            let seg = track
                .iter()
                .find(|s| s.start_ms == e.t_ms)
                .expect("event at a state boundary");
            let on = match_platform(&e.url, &generated.corpus.patterns);
            assert_eq!(on, seg.state.on_platform(), "{} at {}", e.url, e.t_ms);
        }
    }
}

#[test]
fn coverage_matches_hidden_track() {
    let cfg = small(11, 1_200_000, vec![cell("C1", "Math", 2)]);
    let generated = generate_corpus(&cfg).unwrap();
    let wcfg = WindowConfig::default();
    let frame_period = 1.0 / cfg.sample_rate_hz;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let i = rng.random_range(0..generated.corpus.sessions.len());
        let tl = &generated.corpus.sessions[i];
        let windows = slice_windows(tl, &generated.corpus.patterns, &wcfg);
        let w = &windows[rng.random_range(0..windows.len())];
        let off = off_platform_ms(&generated.states[i], w.start_ms, w.end_ms) as f64 / wcfg.window_ms as f64;
        let tol = frame_period * 1000.0 / wcfg.window_ms as f64;
        assert!(
            (w.platform_coverage - (1.0 - off)).abs() <= tol,
            "window {} coverage {}",
            w.start_ms,
            w.platform_coverage
        );
    }
}

#[test]
fn no_off_platform_transitions_gives_full_coverage() {
    let mut cfg = small(5, 300_000, vec![cell("C1", "Math", 1)]);
    cfg.transitions.on_task.on_task = 0.0;
    cfg.transitions.on_task.off_task_on_platform = 1.0;
    cfg.transitions.on_task.off_platform = 0.0;
    cfg.transitions.off_task_on_platform.on_task = 1.0;
    cfg.transitions.off_task_on_platform.off_platform = 0.0;
    cfg.face_drop_prob.on_task = 0.0;
    cfg.face_drop_prob.off_task_on_platform = 0.0;
    let g = generate_corpus(&cfg).unwrap();
    let tl = &g.corpus.sessions[0];
    assert_eq!(tl.url_events().len(), 1);
    assert!(tl.frames().iter().all(|f| f.face_detected));
    let windows = slice_windows(tl, &g.corpus.patterns, &WindowConfig::default());
    assert!(windows.iter().all(|w| w.platform_coverage == 1.0));
}

fn sequential(cfg: &SynthConfig) -> GeneratedCorpus {
    let mut sessions = Vec::new();
    let mut states = Vec::new();
    for (ci, c) in cfg.cells.iter().enumerate() {
        for s in 0..c.n_sessions {
            let g = generate_session(cfg, c, s, &mut session_rng(cfg.seed, ci, s)).unwrap();
            sessions.push(g.timeline);
            states.push(g.states);
        }
    }
    GeneratedCorpus {
        corpus: Corpus {
            schema: cfg.schema().unwrap(),
            patterns: engage_core::synth::platform_patterns(cfg),
            sessions,
        },
        states,
    }
}

#[test]
fn parallel_generation_is_byte_identical() {
    let cfg = small(
        9,
        200_000,
        vec![cell("C1", "Math", 3), cell("C2", "Math", 2), cell("C1", "ESL", 1)],
    );
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    write_generated_corpus(dirs[0].path(), &generate_corpus(&cfg).unwrap()).unwrap();
    write_generated_corpus(dirs[1].path(), &generate_corpus(&cfg).unwrap()).unwrap();
    write_generated_corpus(dirs[2].path(), &sequential(&cfg)).unwrap();
    let a = read_dir_bytes(dirs[0].path());
    assert!(!a.is_empty());
    assert_eq!(a, read_dir_bytes(dirs[1].path()));
    assert_eq!(a, read_dir_bytes(dirs[2].path()));

    let other = small(10, 200_000, cfg.cells.clone());
    let d = tempfile::tempdir().unwrap();
    write_corpus(d.path(), &generate_corpus(&other).unwrap().corpus).unwrap();
    assert_ne!(a, read_dir_bytes(d.path()));
}

fn small_forest(seed: u64) -> TrainConfig {
    TrainConfig {
        n_trees: 30,
        seed,
        ..TrainConfig::default()
    }
}

/// Appearance-only F1 on one held-out session after training on three.
fn held_out_f1(separability: f64, seed: u64) -> f64 {
    let mut cfg = small(seed, 600_000, vec![cell("C1", "Math", 4)]);
    cfg.appearance_separability = separability;
    let g = generate_corpus(&cfg).unwrap();
    let fc = featurize_corpus(&g.corpus, &WindowConfig::default(), &FeatureSpec::default()).unwrap();
    let (train, test) = fc.sessions.split_at(3);
    let mode = FusionMode::AppearanceOnly;
    let forest = train_for_mode(train, &fc.feature_names, mode, 0.5, &small_forest(seed)).unwrap();
    let model = TwoPhaseModel::new(fc.patterns.clone(), 0.5, forest, mode).unwrap();
    let preds = predict_sessions(&model, test).unwrap();
    let rows: Vec<WindowRow> = test[0].windows.iter().map(WindowRow::from).collect();
    evaluate_predictions(&preds, &rows).unwrap().overall_f1_weighted
}

#[test]
fn separability_is_monotone() {
    let mean = |sep: f64| (0..5u64).map(|s| held_out_f1(sep, 100 + s)).sum::<f64>() / 5.0;
    let f: Vec<f64> = [0.5, 1.0, 2.0].into_iter().map(mean).collect();
    assert!(f[0] <= f[1] && f[1] <= f[2], "mean F1 by separability: {f:?}");
}

fn experiment(runs: &str) -> ExperimentConfig {
    let text = format!("seed = 3\n[train]\nn_trees = 15\n{runs}");
    toml::from_str(&text).unwrap()
}

fn run(train: &str, test: &str, self_test: bool) -> String {
    format!(
        "[[run]]\ntable = \"t\"\ntrain_name = \"a\"\ntest_name = \"b\"\ntrain = \"{train}\"\ntest = \"{test}\"\nallow_self_test = {self_test}\n"
    )
}

#[test]
fn experiment_runner_is_reproducible_and_validates() {
    let cfg = small(
        21,
        300_000,
        vec![cell("C1", "Math", 2), cell("C2", "Math", 2), cell("C1", "ESL", 1)],
    );
    let g = generate_corpus(&cfg).unwrap();
    let fc = featurize_corpus(&g.corpus, &WindowConfig::default(), &FeatureSpec::default()).unwrap();

    let ok = experiment(&format!(
        "{}{}",
        run("classroom=C1,platform=Math", "classroom=C2,platform=Math", false),
        run("platform=Math", "platform=ESL", false)
    ));
    let a = run_experiment_featurized(&fc, &ok).unwrap();
    let b = run_experiment_featurized(&fc, &ok).unwrap();
    assert_eq!(a.render(), b.render());
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    a.write_csv(&mut ca).unwrap();
    b.write_csv(&mut cb).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(a.runs.len(), 2);
    for r in &a.runs {
        assert_eq!(r.reports.len(), 2);
        assert!(r.report(FusionMode::AppearanceOnly).is_some());
        assert!(r.report(FusionMode::ContextAndAppearance).is_some());
    }

    let empty = experiment(&run("classroom=C9", "classroom=C2", false));
    assert!(matches!(
        run_experiment_featurized(&fc, &empty),
        Err(Error::Experiment(ExperimentError::EmptySelection {
            which: "train",
            ..
        }))
    ));
    let overlap = experiment(&run("platform=Math", "classroom=C1", false));
    assert!(matches!(
        run_experiment_featurized(&fc, &overlap),
        Err(Error::Experiment(ExperimentError::Overlap { n: 2, .. }))
    ));
    let self_test = experiment(&run("classroom=C1,platform=Math", "classroom=C1,platform=Math", true));
    assert!(run_experiment_featurized(&fc, &self_test).is_ok());
}

#[test]
fn empty_cell_yields_no_sessions() {
    let cfg = small(1, 100_000, vec![cell("C1", "Math", 1), cell("C2", "Math", 0)]);
    let g = generate_corpus(&cfg).unwrap();
    assert_eq!(g.corpus.sessions.len(), 1);
    assert!(g.corpus.sessions.iter().all(|s| s.meta().classroom_id == "C1"));
}
