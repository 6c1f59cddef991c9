//! Random Forest of CART trees: Gini impurity, bootstrap bagging, per-split
//! feature subsampling and majority-vote prediction.
//!
//! Training is deterministic. Tree `i` draws every random choice from its own
//! ChaCha stream `i` under the configured seed, so trees can be grown in any
//! order (or in parallel) and adding trees never changes earlier ones.

use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const NUM_CLASSES: usize = 2;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["on_task", "off_task"];

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("unsupported model format version {found:?} (expected {FORMAT_VERSION})")]
    Version { found: Option<serde_json::Value> },
    #[error("feature schema mismatch: {0}")]
    Schema(String),
    #[error("corrupt model: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Training matrix with binary labels (0 = OnTask, 1 = OffTask).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
    feature_names: Vec<String>,
    group_ids: Vec<String>,
}

impl Dataset {
    pub fn new(
        rows: Vec<Vec<f64>>,
        labels: Vec<usize>,
        feature_names: Vec<String>,
        group_ids: Vec<String>,
    ) -> Result<Self, ForestError> {
        let d = feature_names.len();
        if rows.is_empty() {
            return Err(ForestError::Dataset("no rows".into()));
        }
        if d == 0 {
            return Err(ForestError::Dataset("no features".into()));
        }
        if labels.len() != rows.len() || group_ids.len() != rows.len() {
            return Err(ForestError::Dataset(format!(
                "{} rows, {} labels, {} group ids",
                rows.len(),
                labels.len(),
                group_ids.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(ForestError::Dataset(format!("label {l} is not 0 or 1")));
        }
        let mut values = Vec::with_capacity(rows.len() * d);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != d {
                return Err(ForestError::Dataset(format!(
                    "row {i} has {} values, expected {d}",
                    row.len()
                )));
            }
            if row.iter().any(|v| v.is_nan()) {
                return Err(ForestError::Dataset(format!("row {i} contains NaN")));
            }
            values.extend(row);
        }
        Ok(Dataset {
            values,
            n_features: d,
            labels,
            feature_names,
            group_ids,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn value(&self, i: usize, feature: usize) -> f64 {
        self.values[i * self.n_features + feature]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn group_ids(&self) -> &[String] {
        &self.group_ids
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MtryRule {
    Sqrt,
}

/// Features considered per split: a fixed count or `sqrt(d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Mtry {
    Count(usize),
    Rule(MtryRule),
}

impl Mtry {
    pub fn resolve(self, d: usize) -> usize {
        match self {
            Mtry::Count(m) => m,
            Mtry::Rule(MtryRule::Sqrt) => ((d as f64).sqrt().round() as usize).clamp(1, d.max(1)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    None,
    /// Class `k` weighted by `n / (2 n_k)`.
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub mtry: Mtry,
    pub bootstrap: bool,
    pub seed: u64,
    pub class_weighting: ClassWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_trees: 100,
            max_depth: 12,
            min_samples_leaf: 5,
            mtry: Mtry::Rule(MtryRule::Sqrt),
            bootstrap: true,
            seed: 42,
            class_weighting: ClassWeighting::Balanced,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_features: usize) -> Result<(), ForestError> {
        if self.n_trees == 0 {
            return Err(ForestError::Config("n_trees must be >= 1".into()));
        }
        if self.max_depth == 0 {
            return Err(ForestError::Config("max_depth must be >= 1".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(ForestError::Config("min_samples_leaf must be >= 1".into()));
        }
        let m = self.mtry.resolve(n_features);
        if m == 0 || m > n_features {
            return Err(ForestError::Config(format!("mtry {m} outside 1..={n_features}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        class_counts: [f64; NUM_CLASSES],
    },
}

impl TreeNode {
    pub fn leaf_for(&self, x: &[f64]) -> &[f64; NUM_CLASSES] {
        let mut node = self;
        loop {
            match node {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[*feature] <= *threshold { left } else { right },
                TreeNode::Leaf { class_counts } => return class_counts,
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
            TreeNode::Leaf { .. } => 0,
        }
    }

    pub fn leaves(&self) -> Vec<&[f64; NUM_CLASSES]> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(node) = stack.pop() {
            match node {
                TreeNode::Split { left, right, .. } => {
                    stack.push(right);
                    stack.push(left);
                }
                TreeNode::Leaf { class_counts } => out.push(class_counts),
            }
        }
        out
    }

    fn max_feature(&self) -> Option<usize> {
        match self {
            TreeNode::Split {
                feature, left, right, ..
            } => Some(
                (*feature)
                    .max(left.max_feature().unwrap_or(0))
                    .max(right.max_feature().unwrap_or(0)),
            ),
            TreeNode::Leaf { .. } => None,
        }
    }
}

/// `1 - Σ p_k²`; zero for an empty node.
pub fn gini(class_counts: &[f64]) -> f64 {
    let total: f64 = class_counts.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    1.0 - class_counts
        .iter()
        .map(|c| {
            let p = c / total;
            p * p
        })
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub impurity_decrease: f64,
}

/// Row multiset plus per-class sample weights that a tree is grown from.
struct Node<'a> {
    data: &'a Dataset,
    class_weights: [f64; NUM_CLASSES],
    min_samples_leaf: usize,
}

impl Node<'_> {
    fn weighted_counts(&self, rows: &[usize]) -> [f64; NUM_CLASSES] {
        let mut counts = [0.0; NUM_CLASSES];
        for &r in rows {
            let l = self.data.labels[r];
            counts[l] += self.class_weights[l];
        }
        counts
    }

    /// Returns the best impurity-decreasing split and, separately, the first
    /// admissible split in scan order regardless of its gain.
    fn scan(&self, rows: &[usize], features: &[usize]) -> (Option<SplitCandidate>, Option<SplitCandidate>) {
        let m = self.min_samples_leaf;
        if rows.len() < 2 * m {
            return (None, None);
        }
        let parent = self.weighted_counts(rows);
        let total: f64 = parent.iter().sum();
        let parent_gini = gini(&parent);
        if parent_gini <= 0.0 {
            return (None, None);
        }
        let mut best: Option<SplitCandidate> = None;
        let mut first: Option<SplitCandidate> = None;
        let mut column: Vec<(f64, usize)> = Vec::with_capacity(rows.len());
        for &f in features {
            column.clear();
            column.extend(rows.iter().map(|&r| (self.data.value(r, f), self.data.labels[r])));
            column.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = [0.0; NUM_CLASSES];
            for i in 0..column.len() - 1 {
                let (v, l) = column[i];
                left[l] += self.class_weights[l];
                let next = column[i + 1].0;
                let n_left = i + 1;
                if v == next || n_left < m || column.len() - n_left < m {
                    continue;
                }
                let right = [parent[0] - left[0], parent[1] - left[1]];
                let (wl, wr) = (left[0] + left[1], right[0] + right[1]);
                if wl < m as f64 || wr < m as f64 {
                    continue;
                }
                let decrease = parent_gini - (wl / total) * gini(&left) - (wr / total) * gini(&right);
                let improves = decrease > 1e-12 && best.is_none_or(|b| decrease > b.impurity_decrease);
                if improves || first.is_none() {
                    let mut threshold = v + (next - v) / 2.0;
                    if threshold >= next {
                        threshold = v;
                    }
                    let candidate = SplitCandidate {
                        feature: f,
                        threshold,
                        impurity_decrease: decrease,
                    };
                    first.get_or_insert(candidate);
                    if improves {
                        best = Some(candidate);
                    }
                }
            }
        }
        (best, first)
    }

    fn grow(&self, rows: &mut [usize], depth: usize, cfg: &GrowParams, rng: &mut ChaCha8Rng) -> TreeNode {
        let leaf = |rows: &[usize]| TreeNode::Leaf {
            class_counts: self.weighted_counts(rows),
        };
        if depth >= cfg.max_depth {
            return leaf(rows);
        }
        let d = self.data.n_features;
        let features: Vec<usize> = if cfg.mtry >= d {
            (0..d).collect()
        } else {
            let mut f = sample(rng, d, cfg.mtry).into_vec();
            f.sort_unstable();
            f
        };
        // An impure node whose admissible splits all have zero gain (XOR-like
        // interactions) still splits, on the first admissible candidate.
        let (best, first) = self.scan(rows, &features);
        let Some(split) = best.or(first) else {
            return leaf(rows);
        };
        let mut boundary = 0;
        for i in 0..rows.len() {
            if self.data.value(rows[i], split.feature) <= split.threshold {
                rows.swap(i, boundary);
                boundary += 1;
            }
        }
        let (left_rows, right_rows) = rows.split_at_mut(boundary);
        let left = self.grow(left_rows, depth + 1, cfg, rng);
        let right = self.grow(right_rows, depth + 1, cfg, rng);
        TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }
}

struct GrowParams {
    max_depth: usize,
    mtry: usize,
}

fn class_weights(data: &Dataset, weighting: ClassWeighting) -> [f64; NUM_CLASSES] {
    match weighting {
        ClassWeighting::None => [1.0; NUM_CLASSES],
        ClassWeighting::Balanced => {
            let n = data.n_rows() as f64;
            let counts = data.class_counts();
            let mut w = [0.0; NUM_CLASSES];
            for k in 0..NUM_CLASSES {
                if counts[k] > 0 {
                    w[k] = n / (NUM_CLASSES as f64 * counts[k] as f64);
                }
            }
            w
        }
    }
}

/// Exhaustive threshold search over `features` (midpoints between distinct
/// sorted values). Ties keep the lower feature index, then lower threshold.
/// Class weights follow `weighting`; each side must keep at least
/// `min_samples_leaf` rows and weighted count.
pub fn best_split(
    data: &Dataset,
    rows: &[usize],
    features: &[usize],
    min_samples_leaf: usize,
    weighting: ClassWeighting,
) -> Option<SplitCandidate> {
    Node {
        data,
        class_weights: class_weights(data, weighting),
        min_samples_leaf: min_samples_leaf.max(1),
    }
    .scan(rows, features)
    .0
}

/// Grows one CART tree on `rows` (a multiset of dataset indices).
pub fn grow_tree(data: &Dataset, rows: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> TreeNode {
    let node = Node {
        data,
        class_weights: class_weights(data, cfg.class_weighting),
        min_samples_leaf: cfg.min_samples_leaf,
    };
    let params = GrowParams {
        max_depth: cfg.max_depth,
        mtry: cfg.mtry.resolve(data.n_features),
    };
    let mut rows = rows.to_vec();
    node.grow(&mut rows, 0, &params, rng)
}

/// The random stream tree `tree_index` draws from.
pub fn tree_rng(seed: u64, tree_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tree_index as u64);
    rng
}

/// SHA-256 over the newline-joined feature names, hex encoded.
pub fn schema_hash(feature_names: &[String]) -> String {
    let mut hasher = Sha256::new();
    for (i, name) in feature_names.iter().enumerate() {
        if i > 0 {
            hasher.update(b"\n");
        }
        hasher.update(name.as_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomForestModel {
    pub format_version: u32,
    pub class_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub schema_hash: String,
    pub config: TrainConfig,
    /// Set when training data held a single class; the model always predicts it.
    pub single_class: Option<usize>,
    pub trees: Vec<TreeNode>,
}

pub fn train_forest(data: &Dataset, cfg: &TrainConfig) -> Result<RandomForestModel, ForestError> {
    cfg.validate(data.n_features)?;
    let n = data.n_rows();
    let counts = data.class_counts();
    let single_class = match counts {
        [0, _] => Some(1),
        [_, 0] => Some(0),
        _ => None,
    };
    if let Some(c) = single_class {
        log::warn!(
            "training data holds only class `{}`; model will always predict it",
            CLASS_NAMES[c]
        );
    }
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|i| {
            let mut rng = tree_rng(cfg.seed, i);
            let rows: Vec<usize> = if cfg.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            grow_tree(data, &rows, cfg, &mut rng)
        })
        .collect();
    Ok(RandomForestModel {
        format_version: FORMAT_VERSION,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        feature_names: data.feature_names.clone(),
        schema_hash: schema_hash(&data.feature_names),
        config: cfg.clone(),
        single_class,
        trees,
    })
}

impl RandomForestModel {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Fails unless `feature_names` hash to the schema the model was trained on.
    pub fn check_schema(&self, feature_names: &[String]) -> Result<(), ForestError> {
        let found = schema_hash(feature_names);
        if found != self.schema_hash {
            return Err(ForestError::Schema(format!(
                "model expects {} features (hash {}), input has {} (hash {found})",
                self.feature_names.len(),
                &self.schema_hash[..12.min(self.schema_hash.len())],
                feature_names.len(),
            )));
        }
        Ok(())
    }

    fn check_width(&self, x: &[f64]) -> Result<(), ForestError> {
        if x.len() != self.feature_names.len() {
            return Err(ForestError::Schema(format!(
                "model trained on {} features, got a vector of {}",
                self.feature_names.len(),
                x.len()
            )));
        }
        Ok(())
    }
}

/// Mean of the per-tree leaf class distributions.
pub fn predict_proba(model: &RandomForestModel, x: &[f64]) -> Result<[f64; NUM_CLASSES], ForestError> {
    model.check_width(x)?;
    let mut acc = [0.0; NUM_CLASSES];
    for tree in &model.trees {
        let counts = tree.leaf_for(x);
        let total: f64 = counts.iter().sum();
        for k in 0..NUM_CLASSES {
            acc[k] += counts[k] / total;
        }
    }
    let sum: f64 = acc.iter().sum();
    Ok(acc.map(|a| a / sum))
}

/// Class with the larger probability; an exact tie goes to OffTask (1).
pub fn predict(model: &RandomForestModel, x: &[f64]) -> Result<usize, ForestError> {
    let p = predict_proba(model, x)?;
    Ok(if p[0] > p[1] { 0 } else { 1 })
}

pub fn save_model<W: Write>(model: &RandomForestModel, mut sink: W) -> Result<(), ForestError> {
    serde_json::to_writer(&mut sink, model)?;
    sink.write_all(b"\n")?;
    sink.flush()?;
    Ok(())
}

pub fn load_model<R: Read>(source: R) -> Result<RandomForestModel, ForestError> {
    let raw: serde_json::Value = serde_json::from_reader(source)?;
    let version = raw.get("format_version");
    if version.and_then(|v| v.as_u64()) != Some(FORMAT_VERSION as u64) {
        return Err(ForestError::Version {
            found: version.cloned(),
        });
    }
    let model: RandomForestModel = serde_json::from_value(raw)?;
    if model.schema_hash != schema_hash(&model.feature_names) {
        return Err(ForestError::Corrupt("schema_hash does not match feature_names".into()));
    }
    if model.trees.len() != model.config.n_trees {
        return Err(ForestError::Corrupt(format!(
            "{} trees stored, config says {}",
            model.trees.len(),
            model.config.n_trees
        )));
    }
    if model.class_names.len() != NUM_CLASSES {
        return Err(ForestError::Corrupt("expected two class names".into()));
    }
    let d = model.feature_names.len();
    for tree in &model.trees {
        if tree.max_feature().is_some_and(|f| f >= d) {
            return Err(ForestError::Corrupt("split on out-of-range feature".into()));
        }
        if tree
            .leaves()
            .iter()
            .any(|c| c.iter().sum::<f64>().partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater))
        {
            return Err(ForestError::Corrupt("empty leaf".into()));
        }
    }
    Ok(model)
}
