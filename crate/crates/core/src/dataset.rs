//! Horizon datasets: operational features at `t` paired with the class label
//! of the slot at `t + Δ`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::OperationalRecord;
use crate::patterns::{ClassLabel, ClassTimeline};
use crate::time::Timestamp;

/// Prediction look-ahead in minutes, one of 10, 20, ..., 60.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Horizon(u32);

impl Horizon {
    pub const ALL: [Horizon; 6] = [
        Horizon(10),
        Horizon(20),
        Horizon(30),
        Horizon(40),
        Horizon(50),
        Horizon(60),
    ];

    pub fn new(minutes: u32) -> Result<Horizon, DatasetError> {
        if minutes % 10 == 0 && (10..=60).contains(&minutes) {
            Ok(Horizon(minutes))
        } else {
            Err(DatasetError::InvalidHorizon(minutes))
        }
    }

    pub fn minutes(self) -> u32 {
        self.0
    }

    /// 1-based model number (t+10 is model 1, t+60 is model 6).
    pub fn model_number(self) -> u32 {
        self.0 / 10
    }
}

impl TryFrom<u32> for Horizon {
    type Error = DatasetError;
    fn try_from(v: u32) -> Result<Self, Self::Error> {
        Horizon::new(v)
    }
}

impl From<Horizon> for u32 {
    fn from(h: Horizon) -> u32 {
        h.0
    }
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t+{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatasetError {
    #[error("horizon {0} is not one of 10, 20, ..., 60 minutes")]
    InvalidHorizon(u32),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("feature {0:?} is not an operational parameter")]
    UnknownFeature(String),
    #[error("train fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
}

/// Maps manifest-ordered operational values onto a selected feature list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureProjection {
    names: Vec<String>,
    indices: Vec<usize>,
}

impl FeatureProjection {
    pub fn new(parameters: &[String], selected: &[String]) -> Result<FeatureProjection, DatasetError> {
        let indices = selected
            .iter()
            .map(|s| {
                parameters
                    .iter()
                    .position(|p| p == s)
                    .ok_or_else(|| DatasetError::UnknownFeature(s.clone()))
            })
            .collect::<Result<_, _>>()?;
        Ok(FeatureProjection {
            names: selected.to_vec(),
            indices,
        })
    }

    pub fn identity(parameters: &[String]) -> FeatureProjection {
        FeatureProjection {
            names: parameters.to_vec(),
            indices: (0..parameters.len()).collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `None` if `values` is too short for the projection.
    pub fn project(&self, values: &[f64]) -> Option<Vec<f64>> {
        self.indices.iter().map(|&i| values.get(i).copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRow {
    pub origin: Timestamp,
    pub features: Vec<f64>,
    pub label: ClassLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCount {
    pub label: ClassLabel,
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonDataset {
    pub turbine_id: String,
    /// Look-ahead in minutes; 0 only for debug relabeling.
    pub lead_minutes: u32,
    pub feature_names: Vec<String>,
    pub rows: Vec<LabeledRow>,
    /// Records whose target slot lies outside the timeline.
    pub dropped_outside_timeline: usize,
}

impl HorizonDataset {
    pub fn horizon(&self) -> Option<Horizon> {
        Horizon::new(self.lead_minutes).ok()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Observed classes, ascending (Normal first).
    pub fn classes(&self) -> Vec<ClassLabel> {
        self.class_counts().into_iter().map(|c| c.label).collect()
    }

    pub fn class_counts(&self) -> Vec<ClassCount> {
        let mut counts: BTreeMap<ClassLabel, usize> = BTreeMap::new();
        for r in &self.rows {
            *counts.entry(r.label).or_default() += 1;
        }
        let n = self.rows.len().max(1) as f64;
        counts
            .into_iter()
            .map(|(label, count)| ClassCount {
                label,
                count,
                percent: 100.0 * count as f64 / n,
            })
            .collect()
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.features.clone()).collect()
    }

    pub fn labels(&self) -> Vec<ClassLabel> {
        self.rows.iter().map(|r| r.label).collect()
    }

    fn with_rows(&self, rows: Vec<LabeledRow>) -> HorizonDataset {
        HorizonDataset {
            turbine_id: self.turbine_id.clone(),
            lead_minutes: self.lead_minutes,
            feature_names: self.feature_names.clone(),
            rows,
            dropped_outside_timeline: self.dropped_outside_timeline,
        }
    }

    /// Writes `<stem>.csv` (`timestamp,<features>...,label`) and
    /// `<stem>.meta.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str, split_seed: Option<u64>) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        let mut csv = Vec::new();
        write!(csv, "timestamp")?;
        for n in &self.feature_names {
            write!(csv, ",{n}")?;
        }
        writeln!(csv, ",label")?;
        for r in &self.rows {
            write!(csv, "{}", r.origin)?;
            for v in &r.features {
                write!(csv, ",{v:?}")?;
            }
            writeln!(csv, ",{}", r.label)?;
        }
        fs::write(dir.join(format!("{stem}.csv")), csv)?;
        let meta = DatasetMeta {
            turbine_id: self.turbine_id.clone(),
            lead_minutes: self.lead_minutes,
            rows: self.rows.len(),
            features: self.feature_names.clone(),
            classes: self.class_counts(),
            dropped_outside_timeline: self.dropped_outside_timeline,
            split_seed,
        };
        let json = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
        fs::write(dir.join(format!("{stem}.meta.json")), json)
    }
}

impl HorizonDataset {
    /// Reads back a dataset written by [`HorizonDataset::save`].
    pub fn load(dir: &Path, stem: &str) -> Result<(HorizonDataset, DatasetMeta), DatasetError> {
        let meta_path = dir.join(format!("{stem}.meta.json"));
        let bad = |path: &Path, reason: String| DatasetError::Malformed {
            path: path.display().to_string(),
            reason,
        };
        let meta: DatasetMeta =
            serde_json::from_slice(&fs::read(&meta_path).map_err(|e| bad(&meta_path, e.to_string()))?).map_err(|e| bad(&meta_path, e.to_string()))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let mut rdr = csv::Reader::from_path(&csv_path).map_err(|e| bad(&csv_path, e.to_string()))?;
        let headers = rdr.headers().map_err(|e| bad(&csv_path, e.to_string()))?.clone();
        let p = meta.features.len();
        if headers.len() != p + 2 {
            return Err(bad(&csv_path, format!("expected {} columns, found {}", p + 2, headers.len())));
        }
        let mut rows = Vec::with_capacity(meta.rows);
        for rec in rdr.records() {
            let rec = rec.map_err(|e| bad(&csv_path, e.to_string()))?;
            let origin = Timestamp::parse_rfc3339(&rec[0]).map_err(|e| bad(&csv_path, e.to_string()))?;
            let features = (1..=p)
                .map(|i| rec[i].parse::<f64>().map_err(|e| bad(&csv_path, format!("column {i}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            let label = ClassLabel::parse(&rec[p + 1]).ok_or_else(|| bad(&csv_path, format!("bad label {:?}", &rec[p + 1])))?;
            rows.push(LabeledRow { origin, features, label });
        }
        let d = HorizonDataset {
            turbine_id: meta.turbine_id.clone(),
            lead_minutes: meta.lead_minutes,
            feature_names: meta.features.clone(),
            rows,
            dropped_outside_timeline: meta.dropped_outside_timeline,
        };
        Ok((d, meta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub turbine_id: String,
    pub lead_minutes: u32,
    pub rows: usize,
    pub features: Vec<String>,
    pub classes: Vec<ClassCount>,
    pub dropped_outside_timeline: usize,
    pub split_seed: Option<u64>,
}

/// Builds the dataset for one horizon. A record at `t` yields a row iff the
/// timeline has a label for `t + Δ`; records without one are dropped and
/// counted. Missing operational slots simply yield no row.
pub fn label_records(
    ops: &[OperationalRecord],
    projection: &FeatureProjection,
    timeline: &ClassTimeline,
    horizon: Horizon,
) -> Result<HorizonDataset, DatasetError> {
    label_with_lead(ops, projection, timeline, horizon.minutes())
}

/// [`label_records`] with an arbitrary look-ahead; a lead of 0 reproduces the
/// timeline and is meant for debugging.
pub fn label_with_lead(
    ops: &[OperationalRecord],
    projection: &FeatureProjection,
    timeline: &ClassTimeline,
    lead_minutes: u32,
) -> Result<HorizonDataset, DatasetError> {
    let mut rows = Vec::new();
    let mut dropped = 0;
    for rec in ops {
        let target = rec.timestamp.add_minutes(lead_minutes as i64);
        match timeline.label_at(target) {
            Some(label) => {
                let features = projection
                    .project(&rec.values)
                    .ok_or_else(|| DatasetError::UnknownFeature(format!("record at {}", rec.timestamp)))?;
                rows.push(LabeledRow {
                    origin: rec.timestamp,
                    features,
                    label,
                });
            }
            None => dropped += 1,
        }
    }
    if rows.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    Ok(HorizonDataset {
        turbine_id: timeline.turbine_id.clone(),
        lead_minutes,
        feature_names: projection.names().to_vec(),
        rows,
        dropped_outside_timeline: dropped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: HorizonDataset,
    pub test: HorizonDataset,
    /// Classes with fewer than two rows; all their rows went to `train`.
    pub small_classes: Vec<ClassLabel>,
    pub seed: u64,
}

/// Per-class shuffled split with `round(n_c * fraction)` rows of each class
/// in train (clamped so both sides get at least one row). Rows keep their
/// original order within each side.
pub fn stratified_split(d: &HorizonDataset, train_fraction: f64, seed: u64) -> Result<Split, DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(train_fraction));
    }
    if d.rows.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let mut by_class: BTreeMap<ClassLabel, Vec<usize>> = BTreeMap::new();
    for (i, r) in d.rows.iter().enumerate() {
        by_class.entry(r.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; d.rows.len()];
    let mut small = Vec::new();
    for (label, mut idx) in by_class {
        if idx.len() < 2 {
            small.push(label);
            idx.iter().for_each(|&i| in_train[i] = true);
            continue;
        }
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len() - 1);
        idx[..k].iter().for_each(|&i| in_train[i] = true);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, r) in d.rows.iter().enumerate() {
        if in_train[i] {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    if !small.is_empty() {
        log::warn!(
            "turbine {} lead {}: classes {:?} have fewer than 2 rows; kept in train only",
            d.turbine_id,
            d.lead_minutes,
            small
        );
    }
    Ok(Split {
        train: d.with_rows(train),
        test: d.with_rows(test),
        small_classes: small,
        seed,
    })
}
