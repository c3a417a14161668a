//! Operational parameter reduction.
//!
//! Two stages: PCA on the standardized parameter matrix keeps the leading
//! components that reach a cumulative explained-variance threshold and maps
//! each back to the parameter with the largest absolute loading; Pearson
//! correlation then groups near-duplicate survivors (connected components of
//! `|r| >= threshold`) and keeps one representative per group.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FeatureError {
    #[error("degenerate matrix: {0}")]
    DegenerateMatrix(String),
    #[error("column {0:?} is constant")]
    ConstantColumn(String),
    #[error("non-finite entry at row {row}, column {column:?}")]
    NonFinite { row: usize, column: String },
    #[error("threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

/// `n` observations by `p` named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    names: Vec<String>,
    data: DMatrix<f64>,
}

impl FeatureMatrix {
    pub fn new(names: Vec<String>, data: DMatrix<f64>) -> Result<FeatureMatrix> {
        if names.len() != data.ncols() {
            return Err(FeatureError::Shape(format!(
                "{} names for {} columns",
                names.len(),
                data.ncols()
            )));
        }
        if data.ncols() == 0 {
            return Err(FeatureError::DegenerateMatrix("no columns".into()));
        }
        if data.nrows() < 2 {
            return Err(FeatureError::DegenerateMatrix(format!(
                "{} observations, need at least 2",
                data.nrows()
            )));
        }
        for c in 0..data.ncols() {
            for r in 0..data.nrows() {
                if !data[(r, c)].is_finite() {
                    return Err(FeatureError::NonFinite {
                        row: r,
                        column: names[c].clone(),
                    });
                }
            }
        }
        Ok(FeatureMatrix { names, data })
    }

    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Result<FeatureMatrix> {
        let p = names.len();
        if let Some(bad) = rows.iter().position(|r| r.len() != p) {
            return Err(FeatureError::Shape(format!("row {bad} length differs from {p}")));
        }
        let data = DMatrix::from_fn(rows.len(), p, |r, c| rows[r][c]);
        FeatureMatrix::new(names, data)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    /// Sub-matrix of the named columns, in the given order.
    pub fn select(&self, names: &[String]) -> Result<FeatureMatrix> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.names
                    .iter()
                    .position(|m| m == n)
                    .ok_or_else(|| FeatureError::Shape(format!("unknown column {n:?}")))
            })
            .collect::<Result<_>>()?;
        let data = self.data.select_columns(&idx);
        FeatureMatrix::new(names.to_vec(), data)
    }
}

fn column_mean_var(col: nalgebra::DVectorView<'_, f64>) -> (f64, f64) {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, ss / (n - 1.0))
}

fn is_constant(mean: f64, var: f64) -> bool {
    var.sqrt() <= 1e-12 * (1.0 + mean.abs())
}

/// Output of [`standardize`]: z-scored non-constant columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub matrix: FeatureMatrix,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub dropped_constant: Vec<String>,
}

/// Z-scores every column using the `n - 1` sample variance. Constant columns
/// are dropped and listed.
pub fn standardize(m: &FeatureMatrix) -> Result<Standardized> {
    let mut keep = Vec::new();
    let mut mean = Vec::new();
    let mut scale = Vec::new();
    let mut dropped = Vec::new();
    for c in 0..m.ncols() {
        let (mu, var) = column_mean_var(m.data.column(c));
        if is_constant(mu, var) {
            dropped.push(m.names[c].clone());
        } else {
            keep.push(c);
            mean.push(mu);
            scale.push(var.sqrt());
        }
    }
    if keep.is_empty() {
        return Err(FeatureError::DegenerateMatrix("every column is constant".into()));
    }
    let data = DMatrix::from_fn(m.nrows(), keep.len(), |r, j| {
        (m.data[(r, keep[j])] - mean[j]) / scale[j]
    });
    let names = keep.iter().map(|&c| m.names[c].clone()).collect();
    Ok(Standardized {
        matrix: FeatureMatrix::new(names, data)?,
        mean,
        scale,
        dropped_constant: dropped,
    })
}

/// Sample covariance (`n - 1` denominator) of the columns.
pub fn covariance(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let means: Vec<f64> = (0..m.ncols()).map(|c| m.column(c).mean()).collect();
    let centered = DMatrix::from_fn(n, m.ncols(), |r, c| m[(r, c)] - means[c]);
    (centered.transpose() * &centered) / (n as f64 - 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    pub names: Vec<String>,
    /// Unit-norm principal axes, one per entry, in descending variance order.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Eigendecomposition of the sample covariance of a standardized matrix.
///
/// Each axis is sign-normalized so its largest-magnitude loading is
/// positive. Tiny negative eigenvalues from round-off are clamped to zero.
pub fn pca(s: &Standardized) -> Result<PcaResult> {
    let x = s.matrix.data();
    let cov = covariance(x);
    let eig = SymmetricEigen::new(cov);
    let p = x.ncols();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let trace: f64 = eigenvalues.iter().sum();
    if trace <= 0.0 {
        return Err(FeatureError::DegenerateMatrix("zero total variance".into()));
    }
    let components = order
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= norm);
            let pivot = argmax_abs(&v);
            if v[pivot] < 0.0 {
                v.iter_mut().for_each(|a| *a = -*a);
            }
            v
        })
        .collect();
    Ok(PcaResult {
        names: s.matrix.names().to_vec(),
        components,
        explained_variance_ratio: eigenvalues.iter().map(|e| e / trace).collect(),
        eigenvalues,
        mean: s.mean.clone(),
        scale: s.scale.clone(),
    })
}

fn argmax_abs(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, a) in v.iter().enumerate() {
        if a.abs() > v[best].abs() {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeSelection {
    /// Leading components needed to reach the threshold.
    pub components_retained: usize,
    /// Distinct max-|loading| parameters of those components, in order of
    /// first appearance.
    pub parameters: Vec<String>,
}

pub fn select_by_cumulative_variance(r: &PcaResult, threshold: f64) -> Result<CumulativeSelection> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(FeatureError::InvalidThreshold(threshold));
    }
    let mut acc = 0.0;
    let mut k = r.explained_variance_ratio.len();
    for (i, ratio) in r.explained_variance_ratio.iter().enumerate() {
        acc += ratio;
        if acc >= threshold - 1e-12 {
            k = i + 1;
            break;
        }
    }
    let mut parameters: Vec<String> = Vec::new();
    for comp in &r.components[..k] {
        let name = &r.names[argmax_abs(comp)];
        if !parameters.contains(name) {
            parameters.push(name.clone());
        }
    }
    Ok(CumulativeSelection {
        components_retained: k,
        parameters,
    })
}

/// Pearson correlation matrix. Diagonal is exactly 1 and entries are clamped
/// to `[-1, 1]`.
pub fn pearson_matrix(m: &FeatureMatrix) -> Result<DMatrix<f64>> {
    let p = m.ncols();
    let n = m.nrows();
    let mut centered = DMatrix::zeros(n, p);
    let mut norms = vec![0.0; p];
    for c in 0..p {
        let (mu, var) = column_mean_var(m.data.column(c));
        if is_constant(mu, var) {
            return Err(FeatureError::ConstantColumn(m.names[c].clone()));
        }
        for r in 0..n {
            centered[(r, c)] = m.data[(r, c)] - mu;
        }
        norms[c] = centered.column(c).norm();
    }
    let mut out = DMatrix::identity(p, p);
    for i in 0..p {
        for j in (i + 1)..p {
            let r = (centered.column(i).dot(&centered.column(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out[(i, j)] = r;
            out[(j, i)] = r;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrelationGroup {
    pub members: Vec<String>,
    pub representative: String,
}

/// Connected components of the `|r| >= threshold` graph. Members keep input
/// order; the representative is the lexicographically first member; groups
/// are ordered by their first member's input position.
pub fn correlation_groups(c: &DMatrix<f64>, names: &[String], threshold: f64) -> Vec<CorrelationGroup> {
    let p = names.len();
    let mut parent: Vec<usize> = (0..p).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..p {
        for j in (i + 1)..p {
            if c[(i, j)].abs() >= threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<(usize, Vec<String>)> = Vec::new();
    for i in 0..p {
        let root = find(&mut parent, i);
        match groups.iter_mut().find(|(r, _)| *r == root) {
            Some((_, members)) => members.push(names[i].clone()),
            None => groups.push((root, vec![names[i].clone()])),
        }
    }
    groups
        .into_iter()
        .map(|(_, members)| CorrelationGroup {
            representative: members.iter().min().unwrap().clone(),
            members,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionSettings {
    pub variance_threshold: f64,
    pub correlation_threshold: f64,
}

impl Default for SelectionSettings {
    fn default() -> Self {
        SelectionSettings {
            variance_threshold: 0.99,
            correlation_threshold: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub original_parameters: Vec<String>,
    pub dropped_constant: Vec<String>,
    pub explained_variance_ratio: Vec<f64>,
    pub components_retained: usize,
    pub pca_parameters: Vec<String>,
    pub groups: Vec<CorrelationGroup>,
    pub final_parameters: Vec<String>,
    pub settings: SelectionSettings,
}

/// Runs the full PCA -> Pearson funnel on a raw parameter matrix.
pub fn select_features(m: &FeatureMatrix, settings: SelectionSettings) -> Result<SelectionReport> {
    let s = standardize(m)?;
    let r = pca(&s)?;
    let cum = select_by_cumulative_variance(&r, settings.variance_threshold)?;
    let stage = m.select(&cum.parameters)?;
    let corr = pearson_matrix(&stage)?;
    let groups = correlation_groups(&corr, stage.names(), settings.correlation_threshold);
    let final_parameters = groups.iter().map(|g| g.representative.clone()).collect();
    Ok(SelectionReport {
        original_parameters: m.names().to_vec(),
        dropped_constant: s.dropped_constant,
        explained_variance_ratio: r.explained_variance_ratio,
        components_retained: cum.components_retained,
        pca_parameters: cum.parameters,
        groups,
        final_parameters,
        settings,
    })
}

impl SelectionReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "parameters in:         {}", self.original_parameters.len());
        let _ = writeln!(s, "constant (dropped):    {}", self.dropped_constant.len());
        for d in &self.dropped_constant {
            let _ = writeln!(s, "  - {d}");
        }
        let _ = writeln!(
            s,
            "components retained:   {} (cumulative variance >= {})",
            self.components_retained, self.settings.variance_threshold
        );
        let mut acc = 0.0;
        for (i, r) in self.explained_variance_ratio.iter().take(self.components_retained).enumerate() {
            acc += r;
            let _ = writeln!(s, "  PC{:<3} {:>8.4}%  cum {:>8.4}%", i + 1, r * 100.0, acc * 100.0);
        }
        let _ = writeln!(s, "parameters after PCA:  {}", self.pca_parameters.len());
        let _ = writeln!(
            s,
            "correlation groups:    {} (|r| >= {})",
            self.groups.len(),
            self.settings.correlation_threshold
        );
        for g in &self.groups {
            let _ = writeln!(s, "  [{}] <- {}", g.representative, g.members.join(", "));
        }
        let _ = writeln!(s, "parameters out:        {}", self.final_parameters.len());
        s
    }

    /// One final parameter name per line.
    pub fn to_list(&self) -> String {
        let mut s = self.final_parameters.join("\n");
        s.push('\n');
        s
    }

    pub fn parse_list(text: &str) -> Vec<String> {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect()
    }
}
