//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::harness::{agent_schedule, broker_schedule, write_agent_models};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use turbine_pm::agent::{Agent, AgentConfig};
use turbine_pm::broker::Broker;
use turbine_pm::cli::{build_feed, run_in_process, FeedSource, SimulatorConfig};
use turbine_pm::dataset::{stratified_split, Horizon};
use turbine_pm::features::{pca, standardize, FeatureMatrix};
use turbine_pm::forest::{train_forest, train_tree, ForestParams, ModelBundle, TrainingData};
use turbine_pm::metrics::{confusion, evaluate, grid_search, value_range, variance, GridSettings};
use turbine_pm::patterns::{mine_patterns, AlarmSet, ClassLabel, MiningSettings, PatternError};
use turbine_pm::synth::{generate, SynthConfig};
use turbine_pm::time::Timestamp;
use turbine_pm::trainer::{self, TrainingPlan};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn classes(k: u32) -> Vec<ClassLabel> {
    (0..k).map(ClassLabel::from_id).collect()
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let fixtures: Vec<(Vec<(ClassLabel, ClassLabel)>, u32)> = (0..1000)
        .map(|_| {
            let k = rng.gen_range(2..7);
            let n = rng.gen_range(1..200);
            (random_pairs(&mut rng, n, k), k)
        })
        .collect();
    let t0 = Instant::now();
    let mut reports = Vec::with_capacity(fixtures.len());
    for (pairs, k) in &fixtures {
        let pred: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let actual: Vec<_> = pairs.iter().map(|p| p.1).collect();
        reports.push(evaluate(&confusion(&pred, &actual, &classes(*k)).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?);
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let mut worst = 0.0f64;
    for ((pairs, k), r) in fixtures.iter().zip(&reports) {
        let d = definitional_rates(pairs, &classes(*k));
        let opts = [
            (r.error_accuracy, d.error_accuracy),
            (r.no_error_accuracy, d.no_error_accuracy),
            (r.sensitivity, d.sensitivity),
            (r.specificity, d.specificity),
        ];
        for (a, b) in opts.iter().copied().chain(r.per_class_accuracy.iter().copied().zip(d.per_class.iter().copied())) {
            ensure(a.is_some() == b.is_some(), || "defined/undefined mismatch".into())?;
            if let (Some(a), Some(b)) = (a, b) {
                worst = worst.max((a - b).abs());
            }
        }
        worst = worst.max((r.global_accuracy - d.global).abs());
        for (a, b) in r.prevalence.iter().zip(&d.prevalence) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    ensure(elapsed < 1.0, || format!("{elapsed:.3}s"))?;
    Ok(format!("1000 fixtures, max deviation {worst:e}, {elapsed:.3}s"))
}

fn binary_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for i in 0..100 {
        let n = rng.gen_range(1..300);
        let pairs = random_pairs(&mut rng, n, 2);
        let pred: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let actual: Vec<_> = pairs.iter().map(|p| p.1).collect();
        let r = evaluate(&confusion(&pred, &actual, &classes(2)).unwrap()).unwrap();
        ensure(r.error_accuracy == r.sensitivity && r.no_error_accuracy == r.specificity, || {
            format!("fixture {i}: {:?} vs {:?}", (r.error_accuracy, r.no_error_accuracy), (r.sensitivity, r.specificity))
        })?;
    }
    Ok("100 binary fixtures, error/no-error accuracy identical to sensitivity/specificity".into())
}

fn pca_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut ratio_dev, mut proj_dev, mut ortho_dev) = (0.0f64, 0.0f64, 0.0f64);
    let mut done = 0;
    while done < 50 {
        let n = rng.gen_range(3..=20);
        let p = rng.gen_range(2..=8);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
        let names: Vec<String> = (0..p).map(|i| format!("p{i}")).collect();
        let s = standardize(&FeatureMatrix::from_rows(names, &rows).unwrap()).map_err(|e| e.to_string())?;
        if !s.dropped_constant.is_empty() {
            continue;
        }
        done += 1;
        let r = pca(&s).map_err(|e| e.to_string())?;
        let (vals, vecs) = jacobi_eigen(&correlation(&rows));
        let total: f64 = vals.iter().map(|v| v.max(0.0)).sum();
        for (a, b) in r.explained_variance_ratio.iter().zip(&vals) {
            ratio_dev = ratio_dev.max((a - b.max(0.0) / total).abs());
        }
        for range in clusters(&vals, 1e-6) {
            proj_dev = proj_dev.max(max_abs_diff(&projector(&r.components[range.clone()]), &projector(&vecs[range])));
        }
        for (i, a) in r.components.iter().enumerate() {
            for (j, b) in r.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                ortho_dev = ortho_dev.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
    }
    ensure(ratio_dev <= 1e-6 && proj_dev <= 1e-6 && ortho_dev <= 1e-9, || {
        format!("ratio {ratio_dev:e}, subspace {proj_dev:e}, orthonormality {ortho_dev:e}")
    })?;
    Ok(format!("50 matrices, ratio {ratio_dev:.1e}, subspace {proj_dev:.1e}, orthonormality {ortho_dev:.1e}"))
}

fn mining_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let t0 = Instant::now();
    let mut patterns = 0;
    for db in 0..25 {
        let critical = rng.gen_range(8..=15);
        let n = rng.gen_range(20..120);
        let support = rng.gen_range(0.03..0.4);
        let tx = random_transactions(&mut rng, n, critical);
        let crit: AlarmSet = (0..critical).map(alarm_name).collect();
        let want = power_set_maximal(&tx, critical, support);
        let got = match mine_patterns(&tx, &crit, MiningSettings { min_support: support, max_patterns: usize::MAX }) {
            Ok(ps) => ps.iter().map(|p| (p.alarm_set.iter().cloned().collect::<Vec<_>>(), p.count)).collect(),
            Err(PatternError::NoPatternsFound { .. }) => Vec::new(),
            Err(e) => return Err(format!("db {db}: {e}")),
        };
        ensure(got == want, || format!("db {db}: {} patterns vs {} expected", got.len(), want.len()))?;
        patterns += want.len();
    }
    let elapsed = t0.elapsed().as_secs_f64();
    ensure(elapsed < 10.0, || format!("{elapsed:.2}s"))?;
    Ok(format!("25 databases, {patterns} maximal patterns, identical sets and ranks, {elapsed:.2}s"))
}

fn planted_fleet(root: &Path, turbines: usize, days: u32, lead: usize) -> TrainingPlan {
    let cfg = SynthConfig {
        seed: 7,
        turbines,
        days,
        signature_lead_slots: lead,
        ..Default::default()
    };
    generate(&cfg).unwrap().write_store(root.join("store")).unwrap();
    TrainingPlan::new(root.join("store"), root.join("out"))
}

fn forest_checks() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for i in 0..100 {
        let p = rng.gen_range(1..5);
        let k = rng.gen_range(2..4);
        let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..p).map(|_| rng.gen_range(0..10) as f64 * 0.25).collect()).collect();
        let labels: Vec<usize> = (0..20).map(|_| rng.gen_range(0..k)).collect();
        let cl = classes(k as u32);
        let y: Vec<ClassLabel> = labels.iter().map(|&l| cl[l]).collect();
        let data = TrainingData::with_classes(&rows, &y, cl).unwrap();
        let tree = train_tree(&data, 3, p, &mut ChaCha8Rng::seed_from_u64(i)).unwrap();
        let best = best_root_splits(&rows, &labels, k, 1e-12);
        match tree.root_split() {
            None => ensure(best.is_empty(), || format!("fixture {i}: no root split but {best:?}"))?,
            Some((f, t)) => ensure(best.iter().any(|s| s.1 == f && s.2 == t), || format!("fixture {i}: ({f}, {t}) not in {best:?}"))?,
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let mut plan = planted_fleet(dir.path(), 1, 30, 1);
    plan.write_datasets = false;
    let store = turbine_pm::ingest::TurbineStore::open(&plan.store).unwrap();
    let h = Horizon::new(10).unwrap();
    let ds = trainer::build_dataset(&store, &plan, "WT01", h).map_err(|e| e.to_string())?;
    let split = stratified_split(&ds, plan.train_fraction, 11).map_err(|e| e.to_string())?;
    let train = TrainingData::from_dataset(&split.train).unwrap();
    let params = ForestParams { n_trees: 40, max_depth: 25, ..Default::default() };
    let bytes = |seed| {
        let f = train_forest(&train, params, seed).unwrap();
        (ModelBundle::new("WT01", h, f.clone(), ds.feature_names.clone(), vec![], Timestamp::from_secs(0)).to_bytes(), f)
    };
    let (b1, forest) = bytes(9);
    let (b2, _) = bytes(9);
    ensure(b1 == b2, || "same seed produced different bundle bytes".into())?;

    for row in split.test.rows.iter().take(100) {
        let p = forest.predict(&row.features).unwrap();
        ensure(p.votes == recount_votes(&forest, &row.features), || "vote counts differ from per-tree recount".into())?;
    }

    let report = trainer::run(&plan).map_err(|e| e.to_string())?;
    let acc = report.turbines[0].horizons[0]
        .evaluation
        .as_ref()
        .map(|e| e.global_accuracy)
        .ok_or("t+10 model was skipped")?;
    ensure(acc >= 0.90, || format!("planted t+10 accuracy {acc:.4}"))?;
    let elapsed = t0.elapsed().as_secs_f64();
    ensure(elapsed < 120.0, || format!("{elapsed:.1}s"))?;
    Ok(format!(
        "100 root splits match brute force, bundle bytes reproducible, votes recounted, planted t+10 accuracy {acc:.4}, {elapsed:.1}s"
    ))
}

fn grid() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let ds = staircase(&mut rng, 1200, 6);
    let g = grid_search(&ds, &value_range(5, 100, 5), &value_range(5, 30, 5), GridSettings { seed: 3, ..Default::default() })
        .map_err(|e| e.to_string())?;
    ensure(g.cells.len() == 120, || format!("{} cells", g.cells.len()))?;
    let vd = variance(&g.accuracy_by_depth());
    let vt = variance(&g.accuracy_by_trees());
    let trees: Vec<f64> = g.trees_values.iter().map(|&t| t as f64).collect();
    let rho = spearman(&g.cost_by_trees(), &trees);
    ensure(vd > vt, || format!("variance across depths {vd:e} <= across trees {vt:e}"))?;
    ensure(rho > 0.0, || format!("Spearman(cost, trees) {rho:.3}"))?;
    let elapsed = t0.elapsed().as_secs_f64();
    ensure(elapsed < 900.0, || format!("{elapsed:.1}s"))?;
    Ok(format!("120 cells, variance by depth {vd:.2e} > by trees {vt:.2e}, Spearman(cost, trees) {rho:.3}, {elapsed:.1}s"))
}

fn broker_crashes() -> Outcome {
    let (mut published, mut crashes, mut redelivered) = (0, 0, 0);
    for seed in 0..200 {
        let dir = tempfile::tempdir().unwrap();
        let s = broker_schedule(seed, dir.path()).map_err(|e| format!("schedule {seed}: {e}"))?;
        published += s.published;
        crashes += s.crashes;
        redelivered += s.redelivered;
    }
    Ok(format!(
        "200 schedules, {published} messages, {crashes} crashes, no loss, {redelivered} redeliveries all inside poll/commit windows"
    ))
}

fn agent_crashes() -> Outcome {
    let models = tempfile::tempdir().unwrap();
    for t in ["WT01", "WT02"] {
        write_agent_models(models.path(), t);
    }
    let (mut published, mut distinct, mut crashes) = (0, 0, 0);
    for seed in 0..200 {
        let dir = tempfile::tempdir().unwrap();
        let s = agent_schedule(seed, dir.path(), models.path()).map_err(|e| format!("schedule {seed}: {e}"))?;
        published += s.published;
        distinct += s.distinct;
        crashes += s.crashes;
    }
    Ok(format!(
        "200 schedules, {crashes} crashes, {published} messages, exactly {distinct} notifications with 6 horizons each"
    ))
}

fn throughput() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = planted_fleet(dir.path(), 17, 7, 6);
    plan.write_datasets = false;
    trainer::run(&plan).map_err(|e| e.to_string())?;
    let models = dir.path().join("out").join("models");
    let day = SynthConfig {
        seed: 99,
        turbines: 17,
        days: 1,
        start: SynthConfig::default().start.add_slots(7 * 144),
        ..Default::default()
    };
    let feed = build_feed(&FeedSource::Synthetic(day)).map_err(|e| e.to_string())?;
    let broker = Arc::new(Broker::open(dir.path().join("broker")).unwrap());
    let cfg = AgentConfig::new(&models, dir.path().join("agent"), feed.turbines.clone(), feed.parameters.clone());
    let r = run_in_process(&feed, broker, cfg, &SimulatorConfig::default()).map_err(|e| e.to_string())?;
    ensure(r.messages == 2448 && r.notifications_total == 2448, || {
        format!("{} messages, {} notifications", r.messages, r.notifications_total)
    })?;
    ensure(r.total_seconds <= 10.0, || format!("{:.2}s for 2448 messages", r.total_seconds))?;

    let broker = Arc::new(Broker::open(dir.path().join("broker2")).unwrap());
    let cfg = AgentConfig::new(&models, dir.path().join("agent2"), feed.turbines.clone(), feed.parameters.clone());
    let agent = Agent::start(cfg, broker.clone()).map_err(|e| e.to_string())?;
    let handle = agent.supervise();
    let mut worst = Duration::ZERO;
    for (i, (ti, payload)) in feed.steps.iter().take(20).map(|s| &s[0]).enumerate() {
        let t0 = Instant::now();
        broker.publish(&feed.turbines[*ti], payload).unwrap();
        while agent.health().notifications_total < i as u64 + 1 {
            if t0.elapsed() > Duration::from_secs(5) {
                handle.stop();
                return Err(format!("message {i} not notified within 5s"));
            }
            std::thread::sleep(Duration::from_micros(200));
        }
        worst = worst.max(t0.elapsed());
    }
    handle.stop();
    ensure(worst < Duration::from_secs(1), || format!("latency {worst:?}"))?;
    Ok(format!(
        "2448 messages from 17 turbines in {:.2}s ({:.0} msg/s), worst single-message latency {:.1} ms",
        r.total_seconds,
        r.messages_per_second,
        worst.as_secs_f64() * 1e3
    ))
}

fn trainer_rerun() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = planted_fleet(dir.path(), 2, 10, 6);
    plan.forest.n_trees = 15;
    plan.parallelism = 2;
    trainer::run(&plan).map_err(|e| e.to_string())?;
    let mut again = plan.clone();
    again.out_dir = dir.path().join("out2");
    again.parallelism = 1;
    trainer::run(&again).map_err(|e| e.to_string())?;
    let mut bundles = 0;
    for t in ["WT01", "WT02"] {
        for h in Horizon::ALL {
            let a = std::fs::read(turbine_pm::forest::model_path(&plan.out_dir.join("models"), t, h)).map_err(|e| e.to_string())?;
            let b = std::fs::read(turbine_pm::forest::model_path(&again.out_dir.join("models"), t, h)).map_err(|e| e.to_string())?;
            ensure(a == b, || format!("{t} {h} bundles differ"))?;
            bundles += 1;
        }
    }
    let a = std::fs::read(plan.out_dir.join("evaluation.csv")).unwrap();
    let b = std::fs::read(again.out_dir.join("evaluation.csv")).unwrap();
    ensure(a == b, || "evaluation.csv differs".into())?;
    Ok(format!("{bundles} bundles and evaluation.csv byte-identical across reruns"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("metrics match definitional oracle", metric_oracle),
        ("binary error/no-error identity", binary_identity),
        ("PCA matches Jacobi oracle", pca_oracle),
        ("mining matches power-set oracle", mining_oracle),
        ("forest splits, determinism, votes, planted accuracy", forest_checks),
        ("grid search shape and sensitivity", grid),
        ("broker crash harness", broker_crashes),
        ("agent exactly-once under crashes", agent_crashes),
        ("streaming throughput and latency", throughput),
        ("trainer reruns are byte-identical", trainer_rerun),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match r {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
