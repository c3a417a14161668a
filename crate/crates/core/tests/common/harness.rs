//! Randomized crash schedules for the broker and the streaming agent.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use turbine_pm::agent::{read_notifications, Agent, AgentConfig, AgentError, FaultAction, FaultHook, FaultPoint, DEFAULT_GROUP};
use turbine_pm::broker::Broker;
use turbine_pm::dataset::Horizon;
use turbine_pm::forest::{model_path, save_model, train_forest, ForestParams, ModelBundle, TrainingData};
use turbine_pm::patterns::ClassLabel;
use turbine_pm::time::Timestamp;

use super::tear_topic_tail;

const TOPIC: &str = "WT01";
const GROUP: &str = "g";

#[derive(Debug, Default, Clone, Copy)]
pub struct BrokerScheduleStats {
    pub published: u64,
    pub crashes: u64,
    pub redelivered: u64,
}

/// One random interleaving of publishes, polls, commits and crashes
/// against a small-segment broker. Checks that every acknowledged message
/// survives and that a message is seen again only when a crash fell between
/// its poll and the commit covering it.
pub fn broker_schedule(seed: u64, root: &Path) -> Result<BrokerScheduleStats, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segment = rng.gen_range(64..512);
    let open = || Broker::open_with_segment_bytes(root, segment).map_err(|e| format!("reopen: {e}"));
    let mut broker = open()?;
    broker.create_topic(TOPIC).map_err(|e| e.to_string())?;
    let mut acked: Vec<Vec<u8>> = Vec::new();
    let mut deliveries: BTreeMap<u64, u64> = BTreeMap::new();
    let mut allowance: BTreeMap<u64, u64> = BTreeMap::new();
    let mut committed = 0u64;
    let mut stats = BrokerScheduleStats::default();
    let steps = rng.gen_range(10..40);
    let mut step = 0;
    loop {
        let draining = step >= steps;
        step += 1;
        if !draining && rng.gen_bool(0.45) {
            let k = rng.gen_range(1..5);
            let payloads: Vec<Vec<u8>> = (0..k).map(|i| format!("m{}-{}-{}", acked.len() + i, seed, "x".repeat(rng.gen_range(0..40))).into_bytes()).collect();
            let refs: Vec<&[u8]> = payloads.iter().map(Vec::as_slice).collect();
            let offsets = broker.publish_batch(TOPIC, &refs).map_err(|e| e.to_string())?;
            if offsets != (acked.len() as u64..acked.len() as u64 + k as u64).collect::<Vec<_>>() {
                return Err(format!("publish offsets {offsets:?} after {} acked", acked.len()));
            }
            acked.extend(payloads);
            stats.published += k as u64;
            if rng.gen_bool(0.15) {
                drop(broker);
                if rng.gen_bool(0.5) {
                    let junk: Vec<u8> = (0..rng.gen_range(1..30)).map(|_| rng.gen()).collect();
                    tear_topic_tail(root, TOPIC, &junk);
                }
                broker = open()?;
                stats.crashes += 1;
            }
            continue;
        }
        let batch = broker.poll(GROUP, TOPIC, rng.gen_range(1..8)).map_err(|e| e.to_string())?;
        if batch.is_empty() {
            if draining {
                break;
            }
            continue;
        }
        for m in &batch {
            if m.offset < committed {
                return Err(format!("offset {} polled below committed {committed}", m.offset));
            }
            if acked.get(m.offset as usize) != Some(&m.payload) {
                return Err(format!("offset {} payload mismatch", m.offset));
            }
            let seen = deliveries.entry(m.offset).or_default();
            *seen += 1;
            if *seen > 1 + allowance.get(&m.offset).copied().unwrap_or(0) {
                return Err(format!("offset {} redelivered outside a crash window", m.offset));
            }
        }
        let last = batch.last().unwrap().offset;
        if !draining && rng.gen_bool(0.25) {
            for m in &batch {
                *allowance.entry(m.offset).or_default() += 1;
            }
            drop(broker);
            if rng.gen_bool(0.3) {
                tear_topic_tail(root, TOPIC, &[0xFF; 5]);
            }
            broker = open()?;
            stats.crashes += 1;
            let c = broker.committed(GROUP, TOPIC).map_err(|e| e.to_string())?;
            if c != committed {
                return Err(format!("committed moved from {committed} to {c} across a crash"));
            }
        } else {
            broker.commit(GROUP, TOPIC, last + 1).map_err(|e| e.to_string())?;
            committed = last + 1;
        }
        let next = broker.next_offset(TOPIC).map_err(|e| e.to_string())?;
        if next != acked.len() as u64 {
            return Err(format!("next offset {next} but {} acknowledged", acked.len()));
        }
    }
    for o in 0..acked.len() as u64 {
        match deliveries.get(&o) {
            None => return Err(format!("acknowledged offset {o} never delivered")),
            Some(&d) if d > 1 => stats.redelivered += d - 1,
            _ => {}
        }
    }
    Ok(stats)
}

/// Parameters of the payload rows used by [`agent_schedule`].
pub fn agent_parameters() -> Vec<String> {
    vec!["a".into(), "b".into()]
}

/// Small bundles for every horizon of `turbine` over parameters `a, b`.
pub fn write_agent_models(dir: &Path, turbine: &str) {
    let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, (i % 7) as f64]).collect();
    for h in Horizon::ALL {
        let labels: Vec<ClassLabel> = rows
            .iter()
            .map(|r| if r[0] >= h.minutes() as f64 / 2.0 { ClassLabel::Pattern(1) } else { ClassLabel::Normal })
            .collect();
        let d = TrainingData::new(&rows, &labels).unwrap();
        let f = train_forest(&d, ForestParams { n_trees: 5, max_depth: 4, ..Default::default() }, 7).unwrap();
        let b = ModelBundle::new(turbine, h, f, agent_parameters(), vec![], Timestamp::from_secs(0));
        save_model(&b, model_path(dir, turbine, h)).unwrap();
    }
}

pub fn agent_row(slot: i64, a: f64, b: f64) -> Vec<u8> {
    format!("{},{a:?},{b:?}", Timestamp::from_secs(slot * 600).to_rfc3339()).into_bytes()
}

struct CrashAt {
    point: FaultPoint,
    after: u64,
    hits: AtomicU64,
}

impl FaultHook for CrashAt {
    fn at(&self, point: FaultPoint, _: &str, _: u64) -> FaultAction {
        if point == self.point && self.hits.fetch_add(1, Ordering::SeqCst) == self.after {
            FaultAction::Crash
        } else {
            FaultAction::Continue
        }
    }
}

const POINTS: [FaultPoint; 4] = [
    FaultPoint::AfterPoll,
    FaultPoint::BeforeSinkAppend,
    FaultPoint::AfterSinkAppend,
    FaultPoint::AfterCommit,
];

#[derive(Debug, Default, Clone, Copy)]
pub struct AgentScheduleStats {
    pub published: u64,
    pub distinct: u64,
    pub crashes: u64,
}

/// Publishes rows (with upstream duplicates and one corrupt row) for two
/// turbines in random chunks, crashing the agent at random fault points and
/// restarting it on a reopened broker each time. At the end the sink must
/// hold exactly one notification per distinct `(turbine, t)`, each with all
/// six horizons, and every topic must be fully committed.
pub fn agent_schedule(seed: u64, root: &Path, models: &Path) -> Result<AgentScheduleStats, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let turbines = ["WT01", "WT02"];
    let mut rows: Vec<(usize, Vec<u8>)> = Vec::new();
    let mut keys = BTreeSet::new();
    for (ti, _) in turbines.iter().enumerate() {
        for slot in 1..rng.gen_range(4..20) {
            rows.push((ti, agent_row(slot, rng.gen_range(0.0..40.0), rng.gen_range(0.0..7.0))));
            keys.insert((ti, slot));
        }
    }
    for _ in 0..rng.gen_range(0..6) {
        let dup = rows[rng.gen_range(0..rows.len())].clone();
        rows.push(dup);
    }
    rows.push((rng.gen_range(0..2), b"not,a,row".to_vec()));
    let n = rows.len();
    for i in (1..n).rev() {
        rows.swap(i, rng.gen_range(0..=i));
    }
    let broker_dir = root.join("broker");
    let out = root.join("out");
    let config = || {
        let mut c = AgentConfig::new(models, &out, turbines.iter().map(|s| s.to_string()).collect(), agent_parameters());
        c.batch_size = rng_batch(seed);
        c.idle_wait = Duration::from_millis(1);
        c
    };
    let mut stats = AgentScheduleStats {
        published: n as u64,
        distinct: keys.len() as u64,
        ..Default::default()
    };
    let mut cursor = 0;
    let mut done = false;
    while !done {
        let broker = Arc::new(Broker::open(&broker_dir).map_err(|e| e.to_string())?);
        for t in turbines {
            broker.ensure_topic(t).map_err(|e| e.to_string())?;
        }
        let take = if cursor < n { rng.gen_range(1..=(n - cursor)) } else { 0 };
        for (ti, payload) in &rows[cursor..cursor + take] {
            broker.publish(turbines[*ti], payload).map_err(|e| e.to_string())?;
        }
        cursor += take;
        let crash = cursor < n || rng.gen_bool(0.5);
        let hook: Option<Arc<dyn FaultHook>> = if crash && stats.crashes < 12 {
            Some(Arc::new(CrashAt {
                point: POINTS[rng.gen_range(0..POINTS.len())],
                after: rng.gen_range(0..4),
                hits: AtomicU64::new(0),
            }))
        } else {
            None
        };
        let agent = Agent::start_with_hook(config(), broker.clone(), hook).map_err(|e| e.to_string())?;
        match agent.run_until_idle() {
            Ok(_) => {
                done = cursor == n;
            }
            Err(AgentError::InjectedCrash(_)) => {
                stats.crashes += 1;
                if rng.gen_bool(0.3) {
                    use std::io::Write;
                    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(out.join("notifications.jsonl")).unwrap();
                    f.write_all(b"{\"turbine\":\"WT0").unwrap();
                }
            }
            Err(e) => return Err(format!("agent error: {e}")),
        }
    }
    let notes = read_notifications(out.join("notifications.jsonl")).map_err(|e| e.to_string())?;
    let mut seen = BTreeSet::new();
    for note in &notes {
        let ti = turbines.iter().position(|t| *t == note.turbine).ok_or("unknown turbine")?;
        let slot = note.t.secs() / 600;
        if !seen.insert((ti, slot)) {
            return Err(format!("duplicate notification for {} at {}", note.turbine, note.t));
        }
        let hs: Vec<u32> = note.predictions.iter().map(|p| p.horizon).collect();
        if hs != [10, 20, 30, 40, 50, 60] {
            return Err(format!("horizons {hs:?}"));
        }
    }
    if seen != keys {
        return Err(format!("{} notifications for {} distinct rows", seen.len(), keys.len()));
    }
    let broker = Broker::open(&broker_dir).map_err(|e| e.to_string())?;
    for t in turbines {
        if broker.has_topic(t) && broker.committed(DEFAULT_GROUP, t).unwrap() != broker.next_offset(t).unwrap() {
            return Err(format!("{t} not fully committed"));
        }
    }
    Ok(stats)
}

fn rng_batch(seed: u64) -> usize {
    1 + (seed % 5) as usize
}
