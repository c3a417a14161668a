//! Independent reference implementations and fixtures shared by the
//! integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use turbine_pm::dataset::{HorizonDataset, LabeledRow};
use turbine_pm::forest::{Node, RandomForest};
use turbine_pm::patterns::{ClassLabel, Transaction};
use turbine_pm::time::Timestamp;

// ---------------------------------------------------------------- eigen

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues in descending order and the matching unit eigenvectors.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[y][y].total_cmp(&m[x][x]));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|r| v[r][i]).collect()).collect();
    (values, vectors)
}

/// Correlation matrix of the columns of `rows` (n - 1 denominators).
pub fn correlation(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len() as f64;
    let p = rows[0].len();
    let mean: Vec<f64> = (0..p).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..p)
        .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
        .collect();
    let z: Vec<Vec<f64>> = rows.iter().map(|r| (0..p).map(|j| (r[j] - mean[j]) / sd[j]).collect()).collect();
    (0..p)
        .map(|i| (0..p).map(|j| z.iter().map(|r| r[i] * r[j]).sum::<f64>() / (n - 1.0)).collect())
        .collect()
}

/// Sum of `v vᵀ` over the given vectors.
pub fn projector(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = vectors[0].len();
    let mut out = vec![vec![0.0; p]; p];
    for v in vectors {
        for i in 0..p {
            for j in 0..p {
                out[i][j] += v[i] * v[j];
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(u, w)| (u - w).abs())).fold(0.0, f64::max)
}

/// Groups consecutive (descending) eigenvalues closer than `tol`.
pub fn clusters(values: &[f64], tol: f64) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=values.len() {
        if i == values.len() || values[i - 1] - values[i] > tol {
            out.push(start..i);
            start = i;
        }
    }
    out
}

// ---------------------------------------------------------------- metrics

#[derive(Debug, Clone, PartialEq)]
pub struct DefinitionalRates {
    pub per_class: Vec<Option<f64>>,
    pub prevalence: Vec<f64>,
    pub global: f64,
    pub error_accuracy: Option<f64>,
    pub no_error_accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

fn share(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Rates straight from `(predicted, actual)` pairs, with no matrix.
pub fn definitional_rates(pairs: &[(ClassLabel, ClassLabel)], classes: &[ClassLabel]) -> DefinitionalRates {
    let count = |f: &dyn Fn(ClassLabel, ClassLabel) -> bool| pairs.iter().filter(|(p, a)| f(*p, *a)).count();
    let normal = ClassLabel::Normal;
    let errors = count(&|_, a| a != normal);
    let normals = count(&|_, a| a == normal);
    DefinitionalRates {
        per_class: classes.iter().map(|&c| share(count(&|p, a| a == c && p == c), count(&|_, a| a == c))).collect(),
        prevalence: classes.iter().map(|&c| count(&|_, a| a == c) as f64 / pairs.len() as f64).collect(),
        global: count(&|p, a| p == a) as f64 / pairs.len() as f64,
        error_accuracy: share(count(&|p, a| a != normal && p == a), errors),
        no_error_accuracy: share(count(&|p, a| a == normal && p == normal), normals),
        sensitivity: share(count(&|p, a| a != normal && p != normal), errors),
        specificity: share(count(&|p, a| a == normal && p == normal), normals),
    }
}

pub fn close_opt(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        _ => false,
    }
}

/// Random labels over `Normal` and patterns `1..=k-1`.
pub fn random_pairs<R: Rng>(rng: &mut R, n: usize, k: u32) -> Vec<(ClassLabel, ClassLabel)> {
    let label = |x: u32| if x == 0 { ClassLabel::Normal } else { ClassLabel::Pattern(x) };
    (0..n).map(|_| (label(rng.gen_range(0..k)), label(rng.gen_range(0..k)))).collect()
}

// ---------------------------------------------------------------- mining

pub fn alarm_name(i: usize) -> String {
    format!("C{i:02}")
}

/// Random transactions over `critical` alarms `C00..` plus a few
/// non-critical `N*` codes.
pub fn random_transactions<R: Rng>(rng: &mut R, n: usize, critical: usize) -> Vec<Transaction> {
    let weights: Vec<f64> = (0..critical).map(|_| rng.gen_range(0.05..0.6)).collect();
    (0..n)
        .map(|i| {
            let mut set = BTreeSet::new();
            for (a, w) in weights.iter().enumerate() {
                if rng.gen_bool(*w) {
                    set.insert(alarm_name(a));
                }
            }
            if rng.gen_bool(0.3) {
                set.insert(format!("N{}", rng.gen_range(0..3)));
            }
            Transaction {
                turbine_id: "WT01".into(),
                slot: Timestamp::from_secs(i as i64 * 600),
                active_alarms: set,
            }
        })
        .collect()
}

/// Maximal frequent itemsets by enumerating every subset of the critical
/// alarms. Returns `(sorted alarm names, count)` ranked by count then names.
pub fn power_set_maximal(transactions: &[Transaction], critical: usize, min_support: f64) -> Vec<(Vec<String>, usize)> {
    let masks: Vec<u32> = transactions
        .iter()
        .map(|t| {
            (0..critical)
                .filter(|&a| t.active_alarms.contains(&alarm_name(a)))
                .fold(0u32, |m, a| m | (1 << a))
        })
        .collect();
    let n = transactions.len() as f64;
    let full = 1u32 << critical;
    let counts: Vec<usize> = (0..full).map(|s| masks.iter().filter(|&&m| m & s == s).count()).collect();
    let frequent = |s: u32| s != 0 && counts[s as usize] as f64 >= min_support * n - 1e-9;
    let mut out: Vec<(Vec<String>, usize)> = (1..full)
        .filter(|&s| frequent(s))
        .filter(|&s| (0..critical).all(|a| s & (1 << a) != 0 || !frequent(s | (1 << a))))
        .map(|s| ((0..critical).filter(|&a| s & (1 << a) != 0).map(alarm_name).collect(), counts[s as usize]))
        .collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

// ---------------------------------------------------------------- trees

fn gini_of(labels: &[usize], k: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut c = vec![0usize; k];
    for &l in labels {
        c[l] += 1;
    }
    let n = labels.len() as f64;
    1.0 - c.iter().map(|&x| (x as f64 / n) * (x as f64 / n)).sum::<f64>()
}

/// Every admissible root split as `(impurity, feature, threshold)`, found by
/// trying each midpoint between distinct sorted values on every feature.
pub fn all_root_splits(rows: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<(f64, usize, f64)> {
    let n = rows.len() as f64;
    let mut out = Vec::new();
    for f in 0..rows[0].len() {
        let mut vals: Vec<f64> = rows.iter().map(|r| r[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let mid = w[0] + (w[1] - w[0]) / 2.0;
            let thr = if mid >= w[1] { w[0] } else { mid };
            let (l, r): (Vec<usize>, Vec<usize>) = {
                let mut l = Vec::new();
                let mut r = Vec::new();
                for (row, &y) in rows.iter().zip(labels) {
                    if row[f] <= thr {
                        l.push(y)
                    } else {
                        r.push(y)
                    }
                }
                (l, r)
            };
            let imp = (l.len() as f64 * gini_of(&l, k) + r.len() as f64 * gini_of(&r, k)) / n;
            out.push((imp, f, thr));
        }
    }
    out
}

/// Splits whose impurity is within `tol` of the best and that improve on
/// the parent node. Empty when no split helps.
pub fn best_root_splits(rows: &[Vec<f64>], labels: &[usize], k: usize, tol: f64) -> Vec<(f64, usize, f64)> {
    let parent = gini_of(labels, k);
    let all = all_root_splits(rows, labels, k);
    let best = all.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    if !(best < parent - 1e-12) {
        return Vec::new();
    }
    all.into_iter().filter(|s| s.0 <= best + tol).collect()
}

/// Per-class vote counts by walking every tree's node array directly.
pub fn recount_votes(forest: &RandomForest, x: &[f64]) -> Vec<u32> {
    let mut votes = vec![0u32; forest.classes().len()];
    for t in forest.trees() {
        let nodes = t.nodes();
        let mut i = 0usize;
        let counts = loop {
            match &nodes[i] {
                Node::Leaf { counts } => break counts,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[*feature as usize] <= *threshold { *left as usize } else { *right as usize };
                }
            }
        };
        let mut best = 0;
        for (c, &v) in counts.iter().enumerate() {
            if v > counts[best] {
                best = c;
            }
        }
        votes[best] += 1;
    }
    votes
}

// ---------------------------------------------------------------- fixtures

/// Checkerboard over `[0, 1)²` with `cells × cells` squares and a third
/// uninformative column. Needs depth to fit; extra trees add little.
pub fn staircase<R: Rng>(rng: &mut R, n: usize, cells: usize) -> HorizonDataset {
    let rows = (0..n)
        .map(|i| {
            let x: f64 = rng.gen();
            let y: f64 = rng.gen();
            let cx = (x * cells as f64) as usize;
            let cy = (y * cells as f64) as usize;
            LabeledRow {
                origin: Timestamp::from_secs(i as i64 * 600),
                features: vec![x, y, rng.gen()],
                label: if (cx + cy) % 2 == 0 { ClassLabel::Normal } else { ClassLabel::Pattern(1) },
            }
        })
        .collect();
    HorizonDataset {
        turbine_id: "WT01".into(),
        lead_minutes: 10,
        feature_names: vec!["x".into(), "y".into(), "noise".into()],
        rows,
        dropped_outside_timeline: 0,
    }
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0 + 1.0;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Appends `bytes` to the newest segment of `topic`, as a crash part-way
/// through an unacknowledged write would leave it.
pub fn tear_topic_tail(broker_root: &Path, topic: &str, bytes: &[u8]) {
    let dir = broker_root.join("topics").join(topic);
    let mut segs: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "log"))
        .collect();
    segs.sort();
    if let Some(last) = segs.last() {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().append(true).open(last).unwrap();
        f.write_all(bytes).unwrap();
    }
}

pub mod harness;
