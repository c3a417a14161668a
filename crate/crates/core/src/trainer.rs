//! Offline model generation for a fleet.
//!
//! For each turbine: select features, mine critical patterns, build the
//! class timeline, then for each horizon build the dataset, split it, train a
//! forest, evaluate it and persist the bundle. Turbines run in parallel and
//! in isolation; a failing turbine becomes a skip reason in the report.
//!
//! Seeds derive from the plan seed only:
//!
//! ```text
//! turbine_seed = derive_seed(plan.seed, fnv1a(turbine_id))
//! horizon_seed = derive_seed(turbine_seed, Δ minutes)
//! split seed   = derive_seed(horizon_seed, 0)
//! forest seed  = derive_seed(horizon_seed, 1)   tree i: tree_rng(forest seed, i)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{label_records, HorizonDataset, stratified_split, FeatureProjection, Horizon};
use crate::features::{select_features, FeatureMatrix, SelectionReport, SelectionSettings};
use crate::forest::{derive_seed, model_path, save_model, train_forest, ForestParams, ModelBundle, TrainingData};
use crate::fsutil::write_atomic;
use crate::ingest::{IngestError, TurbineStore};
use crate::metrics::{aggregate, confusion_for, evaluate, evaluation_csv, fmt_rate, Aggregate, EvaluationReport, EvaluationRow};
use crate::patterns::{build_class_timeline, build_transactions, mine_patterns, patterns_report, MiningSettings, StatusPattern};
use crate::time::{TimeRange, Timestamp, SLOT_SECONDS};

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error("invalid plan: {0}")]
    PlanInvalid(String),
    #[error("{turbine}: {reason}")]
    Turbine { turbine: String, reason: String },
    #[error(transparent)]
    Store(#[from] IngestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn default_fraction() -> f64 {
    2.0 / 3.0
}

fn default_parallelism() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn default_true() -> bool {
    true
}

/// Plan file (TOML). Paths are relative to the plan file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingPlan {
    pub store: PathBuf,
    pub out_dir: PathBuf,
    /// Empty means every turbine in the store.
    #[serde(default)]
    pub turbines: Vec<String>,
    pub start: Option<Timestamp>,
    pub end: Option<Timestamp>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Stamped into every bundle; defaults to the end of the training range.
    pub created_at: Option<Timestamp>,
    #[serde(default = "default_true")]
    pub write_datasets: bool,
    #[serde(default)]
    pub features: SelectionSettings,
    #[serde(default)]
    pub mining: MiningSettings,
    #[serde(default)]
    pub forest: ForestParams,
}

impl TrainingPlan {
    pub fn new(store: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> TrainingPlan {
        TrainingPlan {
            store: store.into(),
            out_dir: out_dir.into(),
            turbines: Vec::new(),
            start: None,
            end: None,
            seed: 0,
            train_fraction: default_fraction(),
            parallelism: default_parallelism(),
            created_at: None,
            write_datasets: true,
            features: SelectionSettings::default(),
            mining: MiningSettings::default(),
            forest: ForestParams::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<TrainingPlan, TrainerError> {
        toml::from_str(s).map_err(|e| TrainerError::PlanInvalid(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("plan serializes")
    }

    /// Loads a plan and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<TrainingPlan, TrainerError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut plan = TrainingPlan::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if plan.store.is_relative() {
            plan.store = base.join(&plan.store);
        }
        if plan.out_dir.is_relative() {
            plan.out_dir = base.join(&plan.out_dir);
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |m: String| Err(TrainerError::PlanInvalid(m));
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} outside (0, 1)", self.train_fraction));
        }
        if let (Some(s), Some(e)) = (self.start, self.end) {
            if s >= e {
                return bad(format!("empty range {s} .. {e}"));
            }
        }
        if self.forest.n_trees == 0 {
            return bad("forest.n_trees must be >= 1".into());
        }
        if self.forest.features_per_split == Some(0) {
            return bad("forest.features_per_split must be >= 1".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be >= 1".into());
        }
        Ok(())
    }
}

/// FNV-1a, used to turn turbine ids into seed streams.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn horizon_seed(plan_seed: u64, turbine_id: &str, horizon: Horizon) -> u64 {
    derive_seed(derive_seed(plan_seed, fnv1a(turbine_id)), horizon.minutes() as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonOutcome {
    pub horizon: u32,
    pub bundle_path: Option<PathBuf>,
    pub evaluation: Option<EvaluationReport>,
    pub train_rows: usize,
    pub test_rows: usize,
    pub train_seconds: f64,
    pub skip_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurbineReport {
    pub turbine_id: String,
    pub range: Option<(Timestamp, Timestamp)>,
    pub selection: Option<SelectionReport>,
    pub patterns: Vec<StatusPattern>,
    pub horizons: Vec<HorizonOutcome>,
    /// Set when the turbine failed before any horizon could be built.
    pub skip_reason: Option<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingRunReport {
    pub turbines: Vec<TurbineReport>,
    pub aggregate: Option<Aggregate>,
    pub seconds: f64,
}

impl TrainingRunReport {
    pub fn completed(&self) -> usize {
        self.turbines
            .iter()
            .flat_map(|t| &t.horizons)
            .filter(|h| h.skip_reason.is_none())
            .count()
    }

    pub fn skipped(&self) -> usize {
        self.turbines.len() * Horizon::ALL.len() - self.completed()
    }

    pub fn evaluation_rows(&self) -> Vec<EvaluationRow> {
        self.turbines
            .iter()
            .flat_map(|t| {
                t.horizons.iter().filter_map(move |h| {
                    h.evaluation.clone().map(|report| EvaluationRow {
                        turbine_id: t.turbine_id.clone(),
                        horizon_minutes: h.horizon,
                        report,
                    })
                })
            })
            .collect()
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "turbines: {}  models: {} completed, {} skipped  ({:.1}s)",
            self.turbines.len(),
            self.completed(),
            self.skipped(),
            self.seconds
        );
        for t in &self.turbines {
            let _ = writeln!(s, "\n[{}] {:.1}s", t.turbine_id, t.seconds);
            if let Some(r) = &t.skip_reason {
                let _ = writeln!(s, "  skipped: {r}");
                continue;
            }
            if let Some(sel) = &t.selection {
                let _ = writeln!(
                    s,
                    "  features: {} of {} ({})",
                    sel.final_parameters.len(),
                    sel.original_parameters.len(),
                    sel.final_parameters.join(", ")
                );
            }
            let _ = writeln!(s, "  classes: {} patterns + Normal", t.patterns.len());
            for h in &t.horizons {
                match (&h.evaluation, &h.skip_reason) {
                    (Some(e), _) => {
                        let _ = writeln!(
                            s,
                            "  t+{:<2}  rows {}/{}  global {:.4}  sensitivity {}  specificity {}  train {:.2}s",
                            h.horizon,
                            h.train_rows,
                            h.test_rows,
                            e.global_accuracy,
                            fmt_rate(e.sensitivity),
                            fmt_rate(e.specificity),
                            h.train_seconds
                        );
                    }
                    (None, Some(r)) => {
                        let _ = writeln!(s, "  t+{:<2}  skipped: {r}", h.horizon);
                    }
                    (None, None) => {}
                }
            }
        }
        if let Some(a) = &self.aggregate {
            let _ = writeln!(
                s,
                "\npooled: global {:.4}  sensitivity {}  specificity {}",
                a.pooled_global,
                fmt_rate(a.pooled_sensitivity),
                fmt_rate(a.pooled_specificity)
            );
            let _ = writeln!(
                s,
                "macro:  global {:.4}  sensitivity {}  specificity {}",
                a.macro_global,
                fmt_rate(a.macro_sensitivity),
                fmt_rate(a.macro_specificity)
            );
        }
        s
    }
}

fn skipped_horizons(reason: &str) -> Vec<HorizonOutcome> {
    Horizon::ALL
        .iter()
        .map(|h| HorizonOutcome {
            horizon: h.minutes(),
            bundle_path: None,
            evaluation: None,
            train_rows: 0,
            test_rows: 0,
            train_seconds: 0.0,
            skip_reason: Some(reason.to_string()),
        })
        .collect()
}

/// Everything a turbine's horizons share: the range, its records, the
/// selected features, the mined patterns and the class timeline.
pub struct Prepared {
    pub range: TimeRange,
    pub ops: Vec<crate::ingest::OperationalRecord>,
    pub selection: SelectionReport,
    pub patterns: Vec<StatusPattern>,
    pub timeline: crate::patterns::ClassTimeline,
}

/// Runs selection and mining for one turbine as [`run`] would.
pub fn prepare_turbine(store: &TurbineStore, plan: &TrainingPlan, turbine: &str) -> Result<Prepared, TrainerError> {
    if !store.manifest().has_turbine(turbine) {
        return Err(TrainerError::PlanInvalid(format!("turbine {turbine} is not in the store")));
    }
    prepare(store, plan, turbine).map_err(|reason| TrainerError::Turbine {
        turbine: turbine.to_string(),
        reason,
    })
}

/// The labeled dataset [`run`] would train and split for `(turbine, h)`.
pub fn build_dataset(store: &TurbineStore, plan: &TrainingPlan, turbine: &str, h: Horizon) -> Result<HorizonDataset, TrainerError> {
    let p = prepare_turbine(store, plan, turbine)?;
    let fail = |reason: String| TrainerError::Turbine {
        turbine: turbine.to_string(),
        reason,
    };
    let proj = FeatureProjection::new(&store.manifest().parameters, &p.selection.final_parameters).map_err(|e| fail(e.to_string()))?;
    label_records(&p.ops, &proj, &p.timeline, h).map_err(|e| fail(e.to_string()))
}

fn prepare(store: &TurbineStore, plan: &TrainingPlan, turbine: &str) -> Result<Prepared, String> {
    let span = TimeRange::new(plan.start.unwrap_or(Timestamp::from_secs(i64::MIN / 2)), plan.end.unwrap_or(Timestamp::from_secs(i64::MAX / 2)));
    let ops = store.scan_operational(turbine, span).map_err(|e| e.to_string())?;
    let (Some(first), Some(last)) = (ops.first(), ops.last()) else {
        return Err("no operational records in range".into());
    };
    let range = TimeRange::new(
        plan.start.unwrap_or(first.timestamp),
        plan.end.unwrap_or(last.timestamp.add_secs(SLOT_SECONDS)),
    );
    let rows: Vec<Vec<f64>> = ops.iter().map(|r| r.values.clone()).collect();
    let m = FeatureMatrix::from_rows(store.manifest().parameters.clone(), &rows).map_err(|e| e.to_string())?;
    let selection = select_features(&m, plan.features).map_err(|e| format!("feature selection: {e}"))?;
    let events = store
        .scan_status(turbine, TimeRange::new(Timestamp::from_secs(i64::MIN / 2), range.end))
        .map_err(|e| e.to_string())?;
    let transactions = build_transactions(turbine, &events, range);
    let patterns = mine_patterns(&transactions, &store.manifest().critical_set(), plan.mining).map_err(|e| e.to_string())?;
    let timeline = build_class_timeline(&transactions, &patterns);
    Ok(Prepared {
        range,
        ops,
        selection,
        patterns,
        timeline,
    })
}

fn bundle_metadata(plan: &TrainingPlan, p: &Prepared, h: Horizon, split_seed: u64, forest_seed: u64) -> Vec<(String, String)> {
    let f = plan.forest;
    vec![
        ("range".into(), format!("{} .. {}", p.range.start, p.range.end)),
        ("plan_seed".into(), plan.seed.to_string()),
        ("split_seed".into(), split_seed.to_string()),
        ("forest_seed".into(), forest_seed.to_string()),
        ("train_fraction".into(), format!("{:?}", plan.train_fraction)),
        ("lead_minutes".into(), h.minutes().to_string()),
        ("labeling".into(), "class active exactly at t+lead".into()),
        ("impurity".into(), "gini (assumed)".into()),
        (
            "features_per_split".into(),
            match f.features_per_split {
                Some(n) => n.to_string(),
                None => "floor(sqrt(p)) (assumed)".into(),
            },
        ),
        ("bootstrap".into(), f.bootstrap.to_string()),
        ("variance_threshold".into(), format!("{:?}", plan.features.variance_threshold)),
        ("correlation_threshold".into(), format!("{:?}", plan.features.correlation_threshold)),
        ("min_support".into(), format!("{:?}", plan.mining.min_support)),
        ("max_patterns".into(), plan.mining.max_patterns.to_string()),
    ]
}

fn train_horizon(
    plan: &TrainingPlan,
    turbine: &str,
    p: &Prepared,
    projection: &FeatureProjection,
    h: Horizon,
) -> Result<HorizonOutcome, String> {
    let hs = horizon_seed(plan.seed, turbine, h);
    let split_seed = derive_seed(hs, 0);
    let forest_seed = derive_seed(hs, 1);
    let dataset = label_records(&p.ops, projection, &p.timeline, h).map_err(|e| e.to_string())?;
    if plan.write_datasets {
        let dir = plan.out_dir.join("datasets").join(turbine);
        dataset
            .save(&dir, &format!("h{}", h.minutes()), Some(split_seed))
            .map_err(|e| format!("writing dataset: {e}"))?;
    }
    let split = stratified_split(&dataset, plan.train_fraction, split_seed).map_err(|e| e.to_string())?;
    let train = TrainingData::from_dataset(&split.train).map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let forest = train_forest(&train, plan.forest, forest_seed).map_err(|e| e.to_string())?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let evaluation = evaluate(&confusion_for(&forest, &split.test).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let created_at = plan.created_at.unwrap_or(p.range.end);
    let mut bundle = ModelBundle::new(turbine, h, forest, projection.names().to_vec(), p.patterns.clone(), created_at);
    bundle.metadata = bundle_metadata(plan, p, h, split_seed, forest_seed);
    if !split.small_classes.is_empty() {
        let c: Vec<String> = split.small_classes.iter().map(|c| c.to_string()).collect();
        bundle.metadata.push(("train_only_classes".into(), c.join(",")));
    }
    let path = model_path(&plan.out_dir.join("models"), turbine, h);
    save_model(&bundle, &path).map_err(|e| format!("writing bundle: {e}"))?;
    Ok(HorizonOutcome {
        horizon: h.minutes(),
        bundle_path: Some(path),
        evaluation: Some(evaluation),
        train_rows: split.train.len(),
        test_rows: split.test.len(),
        train_seconds,
        skip_reason: None,
    })
}

fn run_turbine(store: &TurbineStore, plan: &TrainingPlan, turbine: &str) -> TurbineReport {
    let t0 = Instant::now();
    let mut report = TurbineReport {
        turbine_id: turbine.to_string(),
        range: None,
        selection: None,
        patterns: Vec::new(),
        horizons: Vec::new(),
        skip_reason: None,
        seconds: 0.0,
    };
    let prepared = prepare(store, plan, turbine).and_then(|p| {
        let proj = FeatureProjection::new(&store.manifest().parameters, &p.selection.final_parameters).map_err(|e| e.to_string())?;
        Ok((p, proj))
    });
    match prepared {
        Err(reason) => {
            log::warn!("{turbine}: skipped: {reason}");
            report.horizons = skipped_horizons(&reason);
            report.skip_reason = Some(reason);
        }
        Ok((p, proj)) => {
            let reports_dir = plan.out_dir.join("reports").join(turbine);
            let written = write_atomic(&reports_dir.join("selection.txt"), p.selection.to_text().as_bytes())
                .and_then(|_| write_atomic(&reports_dir.join("features.txt"), p.selection.to_list().as_bytes()))
                .and_then(|_| write_atomic(&reports_dir.join("patterns.txt"), patterns_report(turbine, &p.patterns).as_bytes()));
            if let Err(e) = written {
                log::warn!("{turbine}: writing reports: {e}");
            }
            report.horizons = Horizon::ALL
                .par_iter()
                .map(|&h| {
                    train_horizon(plan, turbine, &p, &proj, h).unwrap_or_else(|reason| {
                        log::warn!("{turbine} {h}: skipped: {reason}");
                        HorizonOutcome {
                            horizon: h.minutes(),
                            bundle_path: None,
                            evaluation: None,
                            train_rows: 0,
                            test_rows: 0,
                            train_seconds: 0.0,
                            skip_reason: Some(reason),
                        }
                    })
                })
                .collect();
            report.range = Some((p.range.start, p.range.end));
            report.selection = Some(p.selection);
            report.patterns = p.patterns;
        }
    }
    report.seconds = t0.elapsed().as_secs_f64();
    report
}

/// Runs the plan and writes `evaluation.csv`, `summary.txt` and
/// `report.json` into the output directory.
pub fn run(plan: &TrainingPlan) -> Result<TrainingRunReport, TrainerError> {
    plan.validate()?;
    let t0 = Instant::now();
    let store = TurbineStore::open(&plan.store)?;
    let turbines: Vec<String> = if plan.turbines.is_empty() {
        store.turbine_ids().map(str::to_string).collect()
    } else {
        plan.turbines.clone()
    };
    for t in &turbines {
        if !store.manifest().has_turbine(t) {
            return Err(TrainerError::PlanInvalid(format!("turbine {t} is not in the store")));
        }
    }
    if turbines.is_empty() {
        return Err(TrainerError::PlanInvalid("no turbines".into()));
    }
    fs::create_dir_all(&plan.out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.parallelism)
        .build()
        .map_err(|e| TrainerError::PlanInvalid(e.to_string()))?;
    let turbine_reports: Vec<TurbineReport> =
        pool.install(|| turbines.par_iter().map(|t| run_turbine(&store, plan, t)).collect());
    let mut report = TrainingRunReport {
        turbines: turbine_reports,
        aggregate: None,
        seconds: 0.0,
    };
    let rows = report.evaluation_rows();
    let evals: Vec<EvaluationReport> = rows.iter().map(|r| r.report.clone()).collect();
    report.aggregate = aggregate(&evals);
    report.seconds = t0.elapsed().as_secs_f64();
    write_atomic(&plan.out_dir.join("evaluation.csv"), evaluation_csv(&rows).as_bytes())?;
    write_atomic(&plan.out_dir.join("summary.txt"), report.summary_text().as_bytes())?;
    let json = serde_json::to_vec_pretty(&report).map_err(std::io::Error::other)?;
    write_atomic(&plan.out_dir.join("report.json"), &json)?;
    Ok(report)
}
