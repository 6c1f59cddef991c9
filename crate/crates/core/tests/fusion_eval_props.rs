use engage_core::eval::{
    accuracy, chance_accuracy, cohens_kappa, confusion, evaluate_predictions, f1_per_class, kappa_from, overall_f1,
    ConfusionMatrix, EvalError, EvalReport,
};
use engage_core::forest::{predict_proba, train_forest, Dataset, TrainConfig};
use engage_core::fusion::{predict_batch, predict_two_phase, BatchItem, FusionMode, PredictionSource, TwoPhaseModel};
use engage_core::windowing::{TruthLabel, WindowRow};
use engage_core::{Label, PlatformPatternSet, RandomForestModel, WindowRef};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const D: usize = 6;

fn forest(seed: u64) -> RandomForestModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..D).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let labels = rows.iter().map(|r| usize::from(r[0] - r[2] > 0.0)).collect();
    let names = (0..D).map(|i| format!("f{i}")).collect();
    let data = Dataset::new(rows, labels, names, vec!["g".into(); 200]).unwrap();
    let cfg = TrainConfig {
        n_trees: 9,
        seed,
        ..TrainConfig::default()
    };
    train_forest(&data, &cfg).unwrap()
}

fn model(seed: u64, theta: f64, mode: FusionMode) -> TwoPhaseModel {
    TwoPhaseModel::new(PlatformPatternSet::default(), theta, forest(seed), mode).unwrap()
}

fn wref(i: usize) -> WindowRef {
    WindowRef {
        session_id: "s".into(),
        index: i,
    }
}

fn labels(v: &[bool]) -> Vec<Label> {
    v.iter()
        .map(|&off| if off { Label::OffTask } else { Label::OnTask })
        .collect()
}

/// Metrics straight from the label vectors, independent of the confusion matrix.
struct Oracle {
    f1: [f64; 2],
    weighted: f64,
    macro_avg: f64,
    p_o: f64,
    p_e: f64,
}

fn oracle(pred: &[Label], truth: &[Label]) -> Oracle {
    let n = pred.len() as f64;
    let count = |f: &dyn Fn(Label, Label) -> bool| pred.iter().zip(truth).filter(|(p, t)| f(**p, **t)).count() as f64;
    let mut f1 = [0.0; 2];
    let mut support = [0.0; 2];
    let mut p_e = 0.0;
    for (k, class) in [Label::OnTask, Label::OffTask].into_iter().enumerate() {
        let tp = count(&|p, t| p == class && t == class);
        let fp = count(&|p, t| p == class && t != class);
        let fn_ = count(&|p, t| p != class && t == class);
        let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let recall = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
        f1[k] = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        support[k] = tp + fn_;
        p_e += (tp + fn_) / n * ((tp + fp) / n);
    }
    Oracle {
        f1,
        weighted: (support[0] * f1[0] + support[1] * f1[1]) / n,
        macro_avg: (f1[0] + f1[1]) / 2.0,
        p_o: count(&|p, t| p == t) / n,
        p_e,
    }
}

fn exact(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn metrics_match_oracle(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..40)) {
        let pred = labels(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        let truth = labels(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        let cm = confusion(&pred, &truth).unwrap();
        let o = oracle(&pred, &truth);
        let f1 = f1_per_class(&cm);
        let overall = overall_f1(&cm);
        prop_assert!(exact(f1[0], o.f1[0]) && exact(f1[1], o.f1[1]));
        prop_assert!(exact(overall.weighted, o.weighted));
        prop_assert!(exact(overall.macro_avg, o.macro_avg));
        prop_assert!(exact(accuracy(&cm), o.p_o));
        prop_assert!(exact(chance_accuracy(&cm), o.p_e));
        let k = cohens_kappa(&cm);
        if o.p_e < 1.0 {
            prop_assert!(exact(k.value, (o.p_o - o.p_e) / (1.0 - o.p_e)));
            prop_assert!(!k.degenerate);
        } else {
            prop_assert!(k.degenerate && k.value == 0.0);
        }
    }

    #[test]
    fn kappa_properties(counts in prop::array::uniform4(0u64..30)) {
        let cm = ConfusionMatrix::from_counts([[counts[0], counts[1]], [counts[2], counts[3]]]);
        prop_assume!(cm.total() > 0);
        let report = EvalReport::from_confusion(cm, 0).unwrap();
        let (p_o, p_e) = (report.accuracy, report.chance_accuracy);
        for r in [report.f1_on_task, report.f1_off_task, report.overall_f1_weighted, report.overall_f1_macro, p_o, p_e] {
            prop_assert!((0.0..=1.0).contains(&r));
        }
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&report.kappa));
        if !report.kappa_degenerate {
            prop_assert_eq!(report.kappa == 1.0, cm.is_diagonal());
        }
        if p_e > 0.0 && p_o < 1.0 && p_e < 1.0 {
            prop_assert!(report.kappa < p_o);
        }
        let lo = report.f1_on_task.min(report.f1_off_task);
        let hi = report.f1_on_task.max(report.f1_off_task);
        prop_assert!(lo - 1e-12 <= report.overall_f1_weighted && report.overall_f1_weighted <= hi + 1e-12);
    }

    #[test]
    fn gate_dominates_below_threshold(
        theta in 0.01f64..=1.0,
        frac in 0.0f64..1.0,
        x in prop::collection::vec(-1e6f64..1e6, D),
    ) {
        let m = model(1, theta, FusionMode::ContextAndAppearance);
        let p = predict_two_phase(&m, &wref(0), &x, theta * frac).unwrap();
        prop_assert_eq!(p.label, Label::OffTask);
        prop_assert_eq!(p.source, PredictionSource::ContextGate);
        prop_assert_eq!(p.proba_offtask, 1.0);
    }

    #[test]
    fn appearance_only_is_the_forest(
        coverage in 0.0f64..=1.0,
        x in prop::collection::vec(-3.0f64..3.0, D),
    ) {
        let m = model(2, 0.5, FusionMode::AppearanceOnly);
        let p = predict_two_phase(&m, &wref(0), &x, coverage).unwrap();
        let proba = predict_proba(&m.appearance, &x).unwrap();
        prop_assert_eq!(p.source, PredictionSource::AppearanceModel);
        prop_assert_eq!(p.proba_offtask.to_bits(), proba[1].to_bits());
        prop_assert_eq!(p.label, if proba[0] > proba[1] { Label::OnTask } else { Label::OffTask });
    }

    /// When every gated window is truly OffTask, the gate can only turn
    /// OffTask misses into hits and never adds OffTask false positives.
    #[test]
    fn context_never_lowers_off_task_agreement(seed in 0u64..500, theta in 0.1f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let both = model(3, theta, FusionMode::ContextAndAppearance);
        let mut appr = both.clone();
        appr.mode = FusionMode::AppearanceOnly;
        let n = 120;
        let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..D).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let refs: Vec<WindowRef> = (0..n).map(wref).collect();
        let cov: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let rows: Vec<WindowRow> = (0..n)
            .map(|i| WindowRow {
                window_ref: refs[i].clone(),
                start_ms: 4000 * i as u64,
                platform_coverage: cov[i],
                valid_frame_ratio: 1.0,
                truth_label: if cov[i] < theta || rng.random_bool(0.3) { TruthLabel::OffTask } else { TruthLabel::OnTask },
            })
            .collect();
        let items: Vec<BatchItem> = (0..n)
            .map(|i| BatchItem { window_ref: &refs[i], features: &feats[i], platform_coverage: cov[i] })
            .collect();
        let a = evaluate_predictions(&predict_batch(&appr, &items).unwrap(), &rows).unwrap();
        let c = evaluate_predictions(&predict_batch(&both, &items).unwrap(), &rows).unwrap();
        prop_assert!(c.confusion.counts[1][1] >= a.confusion.counts[1][1]);
        prop_assert!(c.confusion.counts[0][1] <= a.confusion.counts[0][1]);
        prop_assert!(c.f1_off_task >= a.f1_off_task);
    }
}

#[test]
fn coverage_at_threshold_reaches_forest() {
    let m = model(4, 0.5, FusionMode::ContextAndAppearance);
    let x = vec![0.0; D];
    assert_eq!(
        predict_two_phase(&m, &wref(0), &x, 0.5).unwrap().source,
        PredictionSource::AppearanceModel
    );
    assert_eq!(
        predict_two_phase(&m, &wref(0), &x, 0.0).unwrap().source,
        PredictionSource::ContextGate
    );
    assert!(TwoPhaseModel::new(
        PlatformPatternSet::default(),
        1.5,
        forest(4),
        FusionMode::AppearanceOnly
    )
    .is_err());
}

#[test]
fn batch_preserves_order_and_sources() {
    let m = model(5, 0.5, FusionMode::ContextAndAppearance);
    assert!(predict_batch(&m, &[]).unwrap().is_empty());
    let refs: Vec<WindowRef> = (0..6).map(wref).collect();
    let x = vec![0.3; D];
    let cov = [0.0, 0.9, 0.49, 0.5, 1.0, 0.1];
    let items: Vec<BatchItem> = (0..6)
        .map(|i| BatchItem {
            window_ref: &refs[i],
            features: &x,
            platform_coverage: cov[i],
        })
        .collect();
    let preds = predict_batch(&m, &items).unwrap();
    for (i, p) in preds.iter().enumerate() {
        assert_eq!(p.window_ref, refs[i]);
        let gated = cov[i] < 0.5;
        assert_eq!(p.source == PredictionSource::ContextGate, gated);
    }
    let reversed: Vec<BatchItem> = items.iter().rev().copied().collect();
    let back: Vec<_> = predict_batch(&m, &reversed).unwrap().into_iter().rev().collect();
    assert_eq!(back, preds);
}

#[test]
fn metric_examples() {
    let cm = ConfusionMatrix::from_counts([[60, 10], [10, 20]]);
    assert!((chance_accuracy(&cm) - 0.58).abs() < 1e-12);
    assert_eq!(
        chance_accuracy(&ConfusionMatrix::from_counts([[25, 25], [25, 25]])),
        0.5
    );
    // TP=8, FP=2, FN=2 for OffTask.
    let f1 = f1_per_class(&ConfusionMatrix::from_counts([[5, 2], [2, 8]]));
    assert!((f1[1] - 0.8).abs() < 1e-12);
    let all_off = confusion(
        &[Label::OffTask; 10],
        &labels(&[false, true, false, true, false, true, false, true, false, true]),
    )
    .unwrap();
    assert_eq!(all_off.counts, [[0, 5], [0, 5]]);
    let k = kappa_from(0.77, 0.48);
    assert!((0.55..=0.56).contains(&k.value), "{}", k.value);
    let single = ConfusionMatrix::from_counts([[7, 3], [0, 0]]);
    assert_eq!(overall_f1(&single).weighted, f1_per_class(&single)[0]);
    assert!(cohens_kappa(&ConfusionMatrix::from_counts([[9, 0], [0, 0]])).degenerate);
    assert!(matches!(
        EvalReport::from_confusion(ConfusionMatrix::default(), 0),
        Err(EvalError::Empty)
    ));
}

#[test]
fn evaluate_reports_key_mismatch() {
    let m = model(6, 0.5, FusionMode::AppearanceOnly);
    let x = vec![0.0; D];
    let preds = vec![
        predict_two_phase(&m, &wref(0), &x, 1.0).unwrap(),
        predict_two_phase(&m, &wref(5), &x, 1.0).unwrap(),
    ];
    let rows: Vec<WindowRow> = [0, 1]
        .map(|i| WindowRow {
            window_ref: wref(i),
            start_ms: 0,
            platform_coverage: 1.0,
            valid_frame_ratio: 1.0,
            truth_label: TruthLabel::OnTask,
        })
        .to_vec();
    match evaluate_predictions(&preds, &rows) {
        Err(EvalError::KeyMismatch {
            missing_predictions,
            unknown_windows,
        }) => {
            assert_eq!(missing_predictions, vec![wref(1)]);
            assert_eq!(unknown_windows, vec![wref(5)]);
        }
        other => panic!("expected key mismatch, got {other:?}"),
    }
}
