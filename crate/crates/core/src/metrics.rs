//! Confusion matrices, per-model accuracy reports and the hyperparameter grid.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::dataset::{stratified_split, DatasetError, HorizonDataset};
use crate::forest::{train_forest, ForestError, ForestParams, RandomForest, TrainingData};
use crate::patterns::ClassLabel;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("{pred} predictions but {actual} actual labels")]
    LengthMismatch { pred: usize, actual: usize },
    #[error("label {0} is not in the class list")]
    UnknownLabel(ClassLabel),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("grid value sets must be non-empty")]
    EmptyGrid,
    #[error("grid cell (trees={n_trees}, depth={max_depth}): {source}")]
    Cell {
        n_trees: usize,
        max_depth: usize,
        #[source]
        source: ForestError,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Forest(#[from] ForestError),
}

/// Rows are actual classes, columns predicted. Normal, when present, is
/// always index 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: Vec<ClassLabel>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: &[ClassLabel]) -> ConfusionMatrix {
        let mut classes = classes.to_vec();
        classes.sort();
        classes.dedup();
        let k = classes.len();
        ConfusionMatrix {
            classes,
            counts: vec![0; k * k],
        }
    }

    pub fn classes(&self) -> &[ClassLabel] {
        &self.classes
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual * self.k() + predicted]
    }

    pub fn index_of(&self, c: ClassLabel) -> Option<usize> {
        self.classes.binary_search(&c).ok()
    }

    pub fn add(&mut self, actual: ClassLabel, predicted: ClassLabel) -> Result<(), MetricsError> {
        let a = self.index_of(actual).ok_or(MetricsError::UnknownLabel(actual))?;
        let p = self.index_of(predicted).ok_or(MetricsError::UnknownLabel(predicted))?;
        let k = self.k();
        self.counts[a * k + p] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, actual: usize) -> u64 {
        (0..self.k()).map(|j| self.get(actual, j)).sum()
    }

    /// Collapses every non-Normal class into a single Error class.
    pub fn binary(&self) -> BinaryCounts {
        let mut b = BinaryCounts::default();
        for i in 0..self.k() {
            for j in 0..self.k() {
                let n = self.get(i, j);
                match (self.classes[i].is_normal(), self.classes[j].is_normal()) {
                    (false, false) => b.tp += n,
                    (false, true) => b.fn_ += n,
                    (true, true) => b.tn += n,
                    (true, false) => b.fp += n,
                }
            }
        }
        b
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("actual\\predicted");
        for c in &self.classes {
            let _ = write!(s, "\t{c}");
        }
        s.push('\n');
        for i in 0..self.k() {
            let _ = write!(s, "{}", self.classes[i]);
            for j in 0..self.k() {
                let _ = write!(s, "\t{}", self.get(i, j));
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion(
    pred: &[ClassLabel],
    actual: &[ClassLabel],
    classes: &[ClassLabel],
) -> Result<ConfusionMatrix, MetricsError> {
    if pred.len() != actual.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            actual: actual.len(),
        });
    }
    let mut m = ConfusionMatrix::zeros(classes);
    for (p, a) in pred.iter().zip(actual) {
        m.add(*a, *p)?;
    }
    Ok(m)
}

/// Error (any pattern class) vs Normal counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
}

impl BinaryCounts {
    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub classes: Vec<ClassLabel>,
    /// Recall per class; `None` when the class has no actual rows.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Share of actual rows per class.
    pub prevalence: Vec<f64>,
    pub error_prevalence: f64,
    /// Exact-class hits over all rows whose actual class is a pattern.
    pub error_accuracy: Option<f64>,
    /// Recall of Normal.
    pub no_error_accuracy: Option<f64>,
    pub global_accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub total: u64,
    pub correct: u64,
    pub binary: BinaryCounts,
}

pub fn evaluate(m: &ConfusionMatrix) -> Result<EvaluationReport, MetricsError> {
    let total = m.total();
    if m.k() == 0 || total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let k = m.k();
    let per_class_accuracy = (0..k).map(|i| ratio(m.get(i, i), m.row_sum(i))).collect();
    let prevalence: Vec<f64> = (0..k).map(|i| m.row_sum(i) as f64 / total as f64).collect();
    let (mut err_hit, mut err_rows) = (0, 0);
    for i in 0..k {
        if !m.classes[i].is_normal() {
            err_hit += m.get(i, i);
            err_rows += m.row_sum(i);
        }
    }
    let normal = m.index_of(ClassLabel::Normal);
    let binary = m.binary();
    Ok(EvaluationReport {
        classes: m.classes.clone(),
        per_class_accuracy,
        prevalence,
        error_prevalence: err_rows as f64 / total as f64,
        error_accuracy: ratio(err_hit, err_rows),
        no_error_accuracy: normal.and_then(|n| ratio(m.get(n, n), m.row_sum(n))),
        global_accuracy: m.trace() as f64 / total as f64,
        sensitivity: binary.sensitivity(),
        specificity: binary.specificity(),
        total,
        correct: m.trace(),
        binary,
    })
}

/// Predicts every row of `test` and tallies a matrix over the forest's
/// classes plus any class seen only in `test`.
pub fn confusion_for(forest: &RandomForest, test: &HorizonDataset) -> Result<ConfusionMatrix, MetricsError> {
    let mut classes = forest.classes().to_vec();
    classes.extend(test.classes());
    let mut m = ConfusionMatrix::zeros(&classes);
    for row in &test.rows {
        let p = forest.predict(&row.features)?;
        m.add(row.label, p.label)?;
    }
    Ok(m)
}

/// Aggregate of many reports, both pooled over all rows and as an
/// unweighted mean of per-model rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub models: usize,
    pub pooled_global: f64,
    pub pooled_sensitivity: Option<f64>,
    pub pooled_specificity: Option<f64>,
    pub macro_global: f64,
    pub macro_sensitivity: Option<f64>,
    pub macro_specificity: Option<f64>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn aggregate(reports: &[EvaluationReport]) -> Option<Aggregate> {
    if reports.is_empty() {
        return None;
    }
    let mut b = BinaryCounts::default();
    let (mut correct, mut total) = (0, 0);
    for r in reports {
        b.tp += r.binary.tp;
        b.fn_ += r.binary.fn_;
        b.tn += r.binary.tn;
        b.fp += r.binary.fp;
        correct += r.correct;
        total += r.total;
    }
    Some(Aggregate {
        models: reports.len(),
        pooled_global: correct as f64 / total as f64,
        pooled_sensitivity: b.sensitivity(),
        pooled_specificity: b.specificity(),
        macro_global: reports.iter().map(|r| r.global_accuracy).sum::<f64>() / reports.len() as f64,
        macro_sensitivity: mean_defined(reports.iter().map(|r| r.sensitivity)),
        macro_specificity: mean_defined(reports.iter().map(|r| r.specificity)),
    })
}

pub fn fmt_rate(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "NA".to_string(),
    }
}

/// One row of an evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationRow {
    pub turbine_id: String,
    pub horizon_minutes: u32,
    pub report: EvaluationReport,
}

/// One row per model, a prevalence and accuracy column
/// per class, then error/no-error, global, sensitivity and specificity.
pub fn evaluation_csv(rows: &[EvaluationRow]) -> String {
    let mut classes: Vec<ClassLabel> = rows.iter().flat_map(|r| r.report.classes.iter().copied()).collect();
    classes.sort();
    classes.dedup();
    let mut s = String::from("turbine,model,horizon,rows");
    for c in &classes {
        let _ = write!(s, ",class_{c}_pct,class_{c}_acc");
    }
    s.push_str(",error_pct,no_error_pct,error_acc,no_error_acc,global_acc,sensitivity,specificity\n");
    for row in rows {
        let r = &row.report;
        let _ = write!(
            s,
            "{},{},t+{},{}",
            row.turbine_id,
            row.horizon_minutes / 10,
            row.horizon_minutes,
            r.total
        );
        for c in &classes {
            match r.classes.iter().position(|x| x == c) {
                Some(i) => {
                    let _ = write!(s, ",{:.6},{}", r.prevalence[i], fmt_rate(r.per_class_accuracy[i]));
                }
                None => s.push_str(",NA,NA"),
            }
        }
        let _ = writeln!(
            s,
            ",{:.6},{:.6},{},{},{:.6},{},{}",
            r.error_prevalence,
            1.0 - r.error_prevalence,
            fmt_rate(r.error_accuracy),
            fmt_rate(r.no_error_accuracy),
            r.global_accuracy,
            fmt_rate(r.sensitivity),
            fmt_rate(r.specificity)
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridCell {
    pub n_trees: usize,
    pub max_depth: usize,
    pub accuracy: f64,
    /// Median wall-clock training time.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridResult {
    pub trees_values: Vec<usize>,
    pub depth_values: Vec<usize>,
    /// Row-major by tree value, then depth value.
    pub cells: Vec<GridCell>,
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
}

impl GridResult {
    pub fn cell(&self, n_trees: usize, max_depth: usize) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.n_trees == n_trees && c.max_depth == max_depth)
    }

    fn marginal(&self, by_trees: bool, f: impl Fn(&GridCell) -> f64) -> Vec<f64> {
        let keys = if by_trees { &self.trees_values } else { &self.depth_values };
        keys.iter()
            .map(|&k| {
                let v: Vec<f64> = self
                    .cells
                    .iter()
                    .filter(|c| if by_trees { c.n_trees == k } else { c.max_depth == k })
                    .map(&f)
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect()
    }

    /// Mean accuracy per depth value, averaged over tree counts.
    pub fn accuracy_by_depth(&self) -> Vec<f64> {
        self.marginal(false, |c| c.accuracy)
    }

    /// Mean accuracy per tree count, averaged over depths.
    pub fn accuracy_by_trees(&self) -> Vec<f64> {
        self.marginal(true, |c| c.accuracy)
    }

    /// Mean training seconds per tree count.
    pub fn cost_by_trees(&self) -> Vec<f64> {
        self.marginal(true, |c| c.seconds)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n_trees,max_depth,accuracy,seconds\n");
        for c in &self.cells {
            let _ = writeln!(s, "{},{},{:.6},{:.6}", c.n_trees, c.max_depth, c.accuracy, c.seconds);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSettings {
    pub seed: u64,
    pub train_fraction: f64,
    pub timing_repeats: usize,
    /// `n_trees` and `max_depth` are overridden per cell.
    pub forest: ForestParams,
}

impl Default for GridSettings {
    fn default() -> Self {
        GridSettings {
            seed: 0,
            train_fraction: 2.0 / 3.0,
            timing_repeats: 3,
            forest: ForestParams::default(),
        }
    }
}

/// Inclusive `start..=end` stepping by `step`.
pub fn value_range(start: usize, end: usize, step: usize) -> Vec<usize> {
    (start..=end).step_by(step.max(1)).collect()
}

/// Trains one forest per (n_trees, max_depth) cell on a single stratified
/// split. Cells run one after another so timings do not contend.
pub fn grid_search(
    dataset: &HorizonDataset,
    trees_values: &[usize],
    depth_values: &[usize],
    settings: GridSettings,
) -> Result<GridResult, MetricsError> {
    if trees_values.is_empty() || depth_values.is_empty() {
        return Err(MetricsError::EmptyGrid);
    }
    let split = stratified_split(dataset, settings.train_fraction, settings.seed)?;
    let train = TrainingData::from_dataset(&split.train)?;
    let mut cells = Vec::with_capacity(trees_values.len() * depth_values.len());
    for &n_trees in trees_values {
        for &max_depth in depth_values {
            let cell_err = |source| MetricsError::Cell {
                n_trees,
                max_depth,
                source,
            };
            let params = ForestParams {
                n_trees,
                max_depth,
                ..settings.forest
            };
            let mut times = Vec::new();
            let mut forest = None;
            for _ in 0..settings.timing_repeats.max(1) {
                let t0 = Instant::now();
                let f = train_forest(&train, params, settings.seed).map_err(cell_err)?;
                times.push(t0.elapsed().as_secs_f64());
                forest = Some(f);
            }
            times.sort_by(f64::total_cmp);
            let forest = forest.unwrap();
            let m = match confusion_for(&forest, &split.test) {
                Ok(m) => m,
                Err(MetricsError::Forest(e)) => return Err(cell_err(e)),
                Err(e) => return Err(e),
            };
            cells.push(GridCell {
                n_trees,
                max_depth,
                accuracy: evaluate(&m)?.global_accuracy,
                seconds: times[times.len() / 2],
            });
        }
    }
    Ok(GridResult {
        trees_values: trees_values.to_vec(),
        depth_values: depth_values.to_vec(),
        cells,
    })
}
