use engage_core::forest::{
    best_split, grow_tree, load_model, predict, predict_proba, save_model, train_forest, tree_rng, ClassWeighting,
    Dataset, Mtry, TrainConfig, TreeNode,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn names(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("f{i}")).collect()
}

/// Noisy two-feature linear concept in `d` Gaussian dimensions.
fn noisy(seed: u64, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let labels = rows
        .iter()
        .map(|r| {
            let noise: f64 = rng.sample(StandardNormal);
            usize::from(r[0] + 0.5 * r[1] + 0.5 * noise > 0.3)
        })
        .collect();
    (rows, labels)
}

fn dataset(rows: &[Vec<f64>], labels: &[usize]) -> Dataset {
    let d = rows[0].len();
    Dataset::new(rows.to_vec(), labels.to_vec(), names(d), vec!["g".into(); rows.len()]).unwrap()
}

fn small_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        n_trees: 15,
        max_depth: 6,
        min_samples_leaf: 3,
        seed,
        ..TrainConfig::default()
    }
}

fn leaves_with_rows<'a>(tree: &'a TreeNode, rows: &[Vec<f64>]) -> Vec<(&'a [f64; 2], usize)> {
    let mut out: Vec<(&[f64; 2], usize)> = tree.leaves().into_iter().map(|l| (l, 0)).collect();
    for r in rows {
        let leaf = tree.leaf_for(r);
        let slot = out.iter_mut().find(|(l, _)| std::ptr::eq(*l, leaf)).unwrap();
        slot.1 += 1;
    }
    out
}

/// True when some split of `node` was not the unique strict best: either
/// several features reach the same best decrease, or no feature decreases
/// impurity and the first admissible split was taken. Both depend on the
/// lower-index tie-break and so on feature order.
fn order_dependent(node: &TreeNode, data: &Dataset, rows: Vec<usize>, min_leaf: usize) -> bool {
    let TreeNode::Split {
        feature,
        threshold,
        left,
        right,
    } = node
    else {
        return false;
    };
    let per: Vec<f64> = (0..data.n_features())
        .filter_map(|f| best_split(data, &rows, &[f], min_leaf, ClassWeighting::Balanced).map(|s| s.impurity_decrease))
        .collect();
    let best = per.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if per.is_empty() || per.iter().filter(|&&v| v == best).count() > 1 {
        return true;
    }
    let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| data.value(i, *feature) <= *threshold);
    order_dependent(left, data, l, min_leaf) || order_dependent(right, data, r, min_leaf)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn training_is_deterministic(seed in 0u64..1000) {
        let (rows, labels) = noisy(seed, 150, 6);
        let data = dataset(&rows, &labels);
        let a = train_forest(&data, &small_cfg(seed)).unwrap();
        let b = train_forest(&data, &small_cfg(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        save_model(&a, &mut ba).unwrap();
        save_model(&b, &mut bb).unwrap();
        prop_assert_eq!(ba, bb);
    }

    #[test]
    fn parallel_training_equals_sequential(seed in 0u64..1000) {
        let (rows, labels) = noisy(seed, 120, 5);
        let data = dataset(&rows, &labels);
        let cfg = small_cfg(seed);
        let model = train_forest(&data, &cfg).unwrap();
        let n = data.n_rows();
        for (i, tree) in model.trees.iter().enumerate() {
            let mut rng = tree_rng(cfg.seed, i);
            let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            prop_assert_eq!(tree, &grow_tree(&data, &sample, &cfg, &mut rng));
        }
    }

    #[test]
    fn swapping_labels_swaps_predictions(seed in 0u64..1000) {
        let (rows, labels) = noisy(seed, 150, 5);
        let swapped: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
        let a = train_forest(&dataset(&rows, &labels), &small_cfg(seed)).unwrap();
        let b = train_forest(&dataset(&rows, &swapped), &small_cfg(seed)).unwrap();
        let (probe, _) = noisy(seed + 10_000, 100, 5);
        for x in probe.iter().chain(&rows) {
            let (p, q) = (predict_proba(&a, x).unwrap(), predict_proba(&b, x).unwrap());
            prop_assert_eq!(p[0], q[1]);
            prop_assert_eq!(p[1], q[0]);
            if p[0] != p[1] {
                prop_assert_eq!(predict(&a, x).unwrap(), 1 - predict(&b, x).unwrap());
            }
        }
    }

    #[test]
    fn depth_and_leaf_size_bounds(
        seed in 0u64..1000,
        max_depth in 1usize..8,
        min_leaf in 1usize..10,
        balanced in any::<bool>(),
    ) {
        let (rows, labels) = noisy(seed, 120, 4);
        let data = dataset(&rows, &labels);
        let cfg = TrainConfig {
            n_trees: 5,
            max_depth,
            min_samples_leaf: min_leaf,
            bootstrap: false,
            class_weighting: if balanced { ClassWeighting::Balanced } else { ClassWeighting::None },
            seed,
            ..TrainConfig::default()
        };
        let model = train_forest(&data, &cfg).unwrap();
        for tree in &model.trees {
            prop_assert!(tree.depth() <= max_depth);
            for (counts, n_rows) in leaves_with_rows(tree, &rows) {
                prop_assert!(n_rows >= min_leaf, "leaf with {n_rows} rows");
                prop_assert!(counts[0] + counts[1] >= min_leaf as f64 - 1e-9);
            }
        }
    }

    #[test]
    fn model_file_round_trip(seed in 0u64..1000) {
        let (rows, labels) = noisy(seed, 100, 5);
        let model = train_forest(&dataset(&rows, &labels), &small_cfg(seed)).unwrap();
        let mut buf = Vec::new();
        save_model(&model, &mut buf).unwrap();
        let loaded = load_model(buf.as_slice()).unwrap();
        let (probe, _) = noisy(seed + 1, 100, 5);
        for x in &probe {
            prop_assert_eq!(predict_proba(&model, x).unwrap(), predict_proba(&loaded, x).unwrap());
        }
    }

    /// With every feature considered and no bootstrap, permuting feature
    /// columns consistently leaves predictions unchanged, provided no split
    /// was decided by the index tie-break.
    #[test]
    fn feature_order_permutation(seed in 0u64..1000) {
        let d = 5;
        let (rows, labels) = noisy(seed, 150, d);
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |r: &Vec<f64>| perm.iter().map(|&j| r[j]).collect::<Vec<f64>>();
        let cfg = TrainConfig {
            n_trees: 1,
            max_depth: 4,
            min_samples_leaf: 8,
            mtry: Mtry::Count(d),
            bootstrap: false,
            seed,
            ..TrainConfig::default()
        };
        let data = dataset(&rows, &labels);
        let a = train_forest(&data, &cfg).unwrap();
        prop_assume!(!order_dependent(&a.trees[0], &data, (0..rows.len()).collect(), cfg.min_samples_leaf));
        let prow: Vec<Vec<f64>> = rows.iter().map(permute).collect();
        let b = train_forest(&dataset(&prow, &labels), &cfg).unwrap();
        let (probe, _) = noisy(seed + 7, 200, d);
        for x in probe.iter().chain(&rows) {
            prop_assert_eq!(predict_proba(&a, x).unwrap(), predict_proba(&b, &permute(x)).unwrap());
        }
    }
}
