//! CART classification trees and bagged random forests.
//!
//! Trees split on Gini impurity with candidate thresholds at midpoints
//! between consecutive distinct feature values; at each node a fresh subset
//! of `features_per_split` features is drawn without replacement. A forest
//! trains each tree on a bootstrap resample using an RNG derived from
//! `(seed, tree index)`, so the trained model is a pure function of data,
//! hyperparameters, and seed regardless of how many threads train it.

mod model;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::HorizonDataset;
use crate::patterns::ClassLabel;

pub use model::{load_model, model_path, save_model, ModelBundle, MODEL_FORMAT_VERSION, MODEL_MAGIC};

#[derive(Debug, thiserror::Error)]
pub enum ForestError {
    #[error("no training rows")]
    EmptyInput,
    #[error("expected {expected} features, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("feature {0} is not finite")]
    NonFiniteFeature(usize),
    #[error("invalid hyperparameters: {0}")]
    InvalidParams(String),
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error("model format version {found}, this build reads {expected}")]
    VersionMismatch { found: u16, expected: u16 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ForestError> = std::result::Result<T, E>;

/// Dense row-major feature matrix with class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    values: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
    classes: Vec<ClassLabel>,
}

impl TrainingData {
    /// Class list is the sorted set of observed labels.
    pub fn new(rows: &[Vec<f64>], labels: &[ClassLabel]) -> Result<TrainingData> {
        let mut classes: Vec<ClassLabel> = labels.to_vec();
        classes.sort();
        classes.dedup();
        TrainingData::with_classes(rows, labels, classes)
    }

    pub fn with_classes(rows: &[Vec<f64>], labels: &[ClassLabel], classes: Vec<ClassLabel>) -> Result<TrainingData> {
        if rows.is_empty() {
            return Err(ForestError::EmptyInput);
        }
        if rows.len() != labels.len() {
            return Err(ForestError::InvalidParams(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let n_features = rows[0].len();
        if n_features == 0 {
            return Err(ForestError::InvalidParams("zero features".into()));
        }
        let mut values = Vec::with_capacity(rows.len() * n_features);
        for r in rows {
            if r.len() != n_features {
                return Err(ForestError::DimensionMismatch {
                    expected: n_features,
                    found: r.len(),
                });
            }
            if let Some(i) = r.iter().position(|v| !v.is_finite()) {
                return Err(ForestError::NonFiniteFeature(i));
            }
            values.extend_from_slice(r);
        }
        let labels = labels
            .iter()
            .map(|l| {
                classes
                    .iter()
                    .position(|c| c == l)
                    .ok_or_else(|| ForestError::InvalidParams(format!("label {l} not in class list")))
            })
            .collect::<Result<_>>()?;
        Ok(TrainingData {
            values,
            n_features,
            labels,
            classes,
        })
    }

    pub fn from_dataset(d: &HorizonDataset) -> Result<TrainingData> {
        TrainingData::new(&d.features(), &d.labels())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn classes(&self) -> &[ClassLabel] {
        &self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label_index(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn value(&self, row: usize, feature: usize) -> f64 {
        self.values[row * self.n_features + feature]
    }
}

/// Gini impurity `1 - Σ p_c²` of a class-count vector.
pub fn gini(counts: &[u32]) -> f64 {
    let n: u32 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

/// Size-weighted Gini impurity of a two-way partition.
pub fn weighted_gini(left: &[u32], right: &[u32]) -> f64 {
    let nl: u32 = left.iter().sum();
    let nr: u32 = right.iter().sum();
    let n = (nl + nr) as f64;
    (nl as f64 * gini(left) + nr as f64 * gini(right)) / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf { counts: Vec<u32> },
}

/// Flat, preorder node array; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<Node>,
    n_features: usize,
    n_classes: usize,
}

/// Index of the largest count, lowest index on ties.
pub fn majority(counts: &[u32]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

impl DecisionTree {
    pub(crate) fn from_parts(nodes: Vec<Node>, n_features: usize, n_classes: usize) -> DecisionTree {
        DecisionTree {
            nodes,
            n_features,
            n_classes,
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Class counts of the leaf reached by `x`.
    pub fn leaf_counts(&self, x: &[f64]) -> &[u32] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { counts } => return counts,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    /// Majority class index of the leaf reached by `x`.
    pub fn predict_index(&self, x: &[f64]) -> usize {
        majority(self.leaf_counts(x))
    }

    /// Longest root-to-leaf path measured in splits.
    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left as usize).max(go(nodes, *right as usize)),
            }
        }
        go(&self.nodes, 0)
    }

    pub fn root_split(&self) -> Option<(usize, f64)> {
        match &self.nodes[0] {
            Node::Split { feature, threshold, .. } => Some((*feature as usize, *threshold)),
            Node::Leaf { .. } => None,
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SplitChoice {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

impl SplitChoice {
    /// Lower impurity wins; exact ties go to the lower feature index, then
    /// the lower threshold.
    fn better_than(&self, other: &SplitChoice) -> bool {
        (self.impurity, self.feature)
            .partial_cmp(&(other.impurity, other.feature))
            .map(|o| o.then(self.threshold.total_cmp(&other.threshold)).is_lt())
            .unwrap_or(false)
    }
}

/// Best split of `rows` on `feature`, if the feature takes two or more
/// distinct values there.
fn best_split_on(data: &TrainingData, rows: &[usize], feature: usize) -> Option<SplitChoice> {
    let k = data.classes.len();
    let mut pairs: Vec<(f64, usize)> = rows.iter().map(|&r| (data.value(r, feature), data.labels[r])).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut right = vec![0u32; k];
    for &(_, c) in &pairs {
        right[c] += 1;
    }
    let mut left = vec![0u32; k];
    let mut best: Option<SplitChoice> = None;
    for i in 0..pairs.len() - 1 {
        let (v, c) = pairs[i];
        left[c] += 1;
        right[c] -= 1;
        let next = pairs[i + 1].0;
        if next <= v {
            continue;
        }
        let mut threshold = v + (next - v) / 2.0;
        if threshold >= next {
            threshold = v;
        }
        let cand = SplitChoice {
            feature,
            threshold,
            impurity: weighted_gini(&left, &right),
        };
        if best.map_or(true, |b| cand.better_than(&b)) {
            best = Some(cand);
        }
    }
    best
}

struct Grower<'a, R> {
    data: &'a TrainingData,
    max_depth: usize,
    features_per_split: usize,
    rng: &'a mut R,
    nodes: Vec<Node>,
}

impl<R: Rng> Grower<'_, R> {
    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> u32 {
        let mut counts = vec![0u32; self.data.classes.len()];
        for &r in &rows {
            counts[self.data.labels[r]] += 1;
        }
        let id = self.nodes.len() as u32;
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.max_depth || rows.len() < 2 {
            self.nodes.push(Node::Leaf { counts });
            return id;
        }
        let parent = gini(&counts);
        let p = self.data.n_features;
        let m = self.features_per_split.min(p);
        let mut best: Option<SplitChoice> = None;
        for f in sample(self.rng, p, m).into_iter() {
            if let Some(c) = best_split_on(self.data, &rows, f) {
                if best.map_or(true, |b| c.better_than(&b)) {
                    best = Some(c);
                }
            }
        }
        let Some(split) = best.filter(|b| b.impurity < parent - 1e-12) else {
            self.nodes.push(Node::Leaf { counts });
            return id;
        };
        self.nodes.push(Node::Leaf { counts: Vec::new() });
        let (l, r): (Vec<usize>, Vec<usize>) = rows
            .into_iter()
            .partition(|&row| self.data.value(row, split.feature) <= split.threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id as usize] = Node::Split {
            feature: split.feature as u32,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }
}

/// Grows one CART tree on every row of `data`.
pub fn train_tree<R: Rng>(
    data: &TrainingData,
    max_depth: usize,
    features_per_split: usize,
    rng: &mut R,
) -> Result<DecisionTree> {
    train_tree_on(data, (0..data.len()).collect(), max_depth, features_per_split, rng)
}

fn train_tree_on<R: Rng>(
    data: &TrainingData,
    rows: Vec<usize>,
    max_depth: usize,
    features_per_split: usize,
    rng: &mut R,
) -> Result<DecisionTree> {
    if rows.is_empty() {
        return Err(ForestError::EmptyInput);
    }
    if features_per_split == 0 {
        return Err(ForestError::InvalidParams("features_per_split must be >= 1".into()));
    }
    let mut g = Grower {
        data,
        max_depth,
        features_per_split,
        rng,
        nodes: Vec::new(),
    };
    g.grow(rows, 0);
    Ok(DecisionTree {
        nodes: g.nodes,
        n_features: data.n_features,
        n_classes: data.classes.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Defaults to `floor(sqrt(n_features))` when unset.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 40,
            max_depth: 25,
            features_per_split: None,
            bootstrap: true,
        }
    }
}

impl ForestParams {
    pub fn resolved_features_per_split(&self, n_features: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (n_features as f64).sqrt().floor() as usize)
            .clamp(1, n_features.max(1))
    }
}

/// Mixes a seed with a stream index (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for tree `index` of a forest trained with `seed`.
pub fn tree_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub(crate) trees: Vec<DecisionTree>,
    pub(crate) classes: Vec<ClassLabel>,
    pub(crate) n_features: usize,
    pub(crate) n_trees: usize,
    pub(crate) max_depth: usize,
    pub(crate) features_per_split: usize,
    pub(crate) bootstrap: bool,
    pub(crate) seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: ClassLabel,
    /// Tree votes per class, aligned with [`RandomForest::classes`].
    pub votes: Vec<u32>,
}

impl Prediction {
    /// Share of trees that voted for the winning class.
    pub fn vote_fraction(&self) -> f64 {
        let total: u32 = self.votes.iter().sum();
        if total == 0 {
            return 0.0;
        }
        *self.votes.iter().max().unwrap() as f64 / total as f64
    }
}

pub fn train_forest(data: &TrainingData, params: ForestParams, seed: u64) -> Result<RandomForest> {
    if data.is_empty() {
        return Err(ForestError::EmptyInput);
    }
    if params.n_trees == 0 {
        return Err(ForestError::InvalidParams("n_trees must be >= 1".into()));
    }
    let fps = params.resolved_features_per_split(data.n_features);
    let n = data.len();
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|i| {
            let mut rng = tree_rng(seed, i);
            let rows = if params.bootstrap {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            train_tree_on(data, rows, params.max_depth, fps, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RandomForest {
        trees,
        classes: data.classes.clone(),
        n_features: data.n_features,
        n_trees: params.n_trees,
        max_depth: params.max_depth,
        features_per_split: fps,
        bootstrap: params.bootstrap,
        seed,
    })
}

impl RandomForest {
    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn classes(&self) -> &[ClassLabel] {
        &self.classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_trees(&self) -> usize {
        self.n_trees
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn features_per_split(&self) -> usize {
        self.features_per_split
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bootstrap(&self) -> bool {
        self.bootstrap
    }

    /// Majority vote over trees; ties go to the lowest class.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        if x.len() != self.n_features {
            return Err(ForestError::DimensionMismatch {
                expected: self.n_features,
                found: x.len(),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(ForestError::NonFiniteFeature(i));
        }
        let mut votes = vec![0u32; self.classes.len()];
        for t in &self.trees {
            votes[t.predict_index(x)] += 1;
        }
        Ok(Prediction {
            label: self.classes[majority(&votes)],
            votes,
        })
    }

    /// Predicted labels for many rows.
    pub fn predict_many(&self, rows: &[Vec<f64>]) -> Result<Vec<ClassLabel>> {
        rows.iter().map(|r| self.predict(r).map(|p| p.label)).collect()
    }

    /// Fraction of rows predicted correctly.
    pub fn accuracy(&self, data: &TrainingData) -> f64 {
        let mut hit = 0;
        for i in 0..data.len() {
            let p = self.predict(data.row(i)).expect("training rows match the forest");
            if p.label == data.classes[data.labels[i]] {
                hit += 1;
            }
        }
        hit as f64 / data.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(rows: &[(&[f64], u32)]) -> TrainingData {
        let x: Vec<Vec<f64>> = rows.iter().map(|r| r.0.to_vec()).collect();
        let y: Vec<ClassLabel> = rows.iter().map(|r| ClassLabel::from_id(r.1)).collect();
        TrainingData::new(&x, &y).unwrap()
    }

    #[test]
    fn gini_values() {
        assert_eq!(gini(&[5, 0]), 0.0);
        assert!((gini(&[5, 5]) - 0.5).abs() < 1e-15);
        assert!((gini(&[1, 1, 1]) - 2.0 / 3.0).abs() < 1e-15);
        assert!((weighted_gini(&[2, 0], &[0, 2])).abs() < 1e-15);
    }

    #[test]
    fn pure_rows_make_a_leaf() {
        let d = data(&[(&[1.0], 1), (&[2.0], 1), (&[3.0], 1)]);
        let t = train_tree(&d, 10, 1, &mut tree_rng(1, 0)).unwrap();
        assert_eq!(t.nodes().len(), 1);
        assert_eq!(t.depth(), 0);
    }

    #[test]
    fn separable_one_dimension() {
        let d = data(&[(&[-3.0], 1), (&[-1.0], 1), (&[-0.5], 1), (&[0.0], 2), (&[2.0], 2)]);
        let t = train_tree(&d, 10, 1, &mut tree_rng(1, 0)).unwrap();
        assert_eq!(t.depth(), 1);
        let (f, thr) = t.root_split().unwrap();
        assert_eq!(f, 0);
        assert_eq!(thr, -0.25);
        for i in 0..d.len() {
            assert_eq!(t.predict_index(d.row(i)), d.label_index(i));
        }
    }

    #[test]
    fn max_depth_zero_is_single_leaf() {
        let d = data(&[(&[0.0], 0), (&[1.0], 1)]);
        let t = train_tree(&d, 0, 1, &mut tree_rng(1, 0)).unwrap();
        assert_eq!(t.nodes().len(), 1);
    }

    #[test]
    fn constant_features_stop_growth() {
        let d = data(&[(&[1.0, 1.0], 0), (&[1.0, 1.0], 1)]);
        let t = train_tree(&d, 5, 2, &mut tree_rng(1, 0)).unwrap();
        assert_eq!(t.nodes().len(), 1);
        assert_eq!(t.predict_index(&[1.0, 1.0]), 0);
    }

    #[test]
    fn empty_and_invalid() {
        let x: Vec<Vec<f64>> = Vec::new();
        assert!(matches!(TrainingData::new(&x, &[]), Err(ForestError::EmptyInput)));
        let d = data(&[(&[0.0], 0)]);
        assert!(matches!(
            train_tree(&d, 3, 0, &mut tree_rng(0, 0)),
            Err(ForestError::InvalidParams(_))
        ));
        let nan = TrainingData::new(&[vec![f64::NAN]], &[ClassLabel::Normal]);
        assert!(matches!(nan, Err(ForestError::NonFiniteFeature(0))));
    }

    #[test]
    fn single_leaf_forest_votes() {
        let d = data(&[(&[1.0], 3), (&[2.0], 3)]);
        let f = train_forest(&d, ForestParams { n_trees: 7, ..Default::default() }, 3).unwrap();
        let p = f.predict(&[100.0]).unwrap();
        assert_eq!(p.label, ClassLabel::Pattern(3));
        assert_eq!(p.votes, vec![7]);
        assert_eq!(p.vote_fraction(), 1.0);
    }

    #[test]
    fn predict_validates_input() {
        let d = data(&[(&[1.0, 2.0], 0), (&[2.0, 1.0], 1)]);
        let f = train_forest(&d, ForestParams { n_trees: 3, ..Default::default() }, 3).unwrap();
        assert!(matches!(f.predict(&[1.0]), Err(ForestError::DimensionMismatch { .. })));
        assert!(matches!(f.predict(&[1.0, f64::INFINITY]), Err(ForestError::NonFiniteFeature(1))));
    }

    #[test]
    fn vote_ties_go_to_lowest_class() {
        assert_eq!(majority(&[2, 2, 1]), 0);
        assert_eq!(majority(&[0, 3, 3]), 1);
    }

    #[test]
    fn default_features_per_split() {
        let p = ForestParams::default();
        assert_eq!(p.resolved_features_per_split(14), 3);
        assert_eq!(p.resolved_features_per_split(1), 1);
        assert_eq!(p.resolved_features_per_split(16), 4);
        assert_eq!((p.n_trees, p.max_depth), (40, 25));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(9, 4), derive_seed(9, 4));
    }
}
