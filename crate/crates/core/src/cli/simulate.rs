//! Telemetry simulator plus the `serve` and `status` commands.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{parse_time, required, CliError, CliResult, ServeArgs, SimulateArgs, StatusArgs};
use crate::agent::endpoint::{Endpoint, EndpointClient};
use crate::agent::{read_dead_letters, read_notifications, Agent, AgentConfig, FaultAction, FaultHook, FaultPoint, HealthState, DEAD_LETTERS_FILE, DEFAULT_GROUP, NOTIFICATIONS_FILE};
use crate::broker::{Broker, BrokerError};
use crate::ingest::{format_operational_row, Manifest, TurbineStore};
use crate::synth::{generate, SynthConfig};
use crate::time::{TimeRange, Timestamp};

/// Where simulated rows come from.
#[derive(Debug, Clone)]
pub enum FeedSource {
    Synthetic(SynthConfig),
    Replay {
        store: PathBuf,
        turbines: Vec<String>,
        range: TimeRange,
    },
}

/// Payload rows grouped by 10-minute step.
#[derive(Debug, Clone)]
pub struct Feed {
    pub parameters: Vec<String>,
    pub turbines: Vec<String>,
    /// `steps[k]` holds `(turbine index, payload)` for slot `k`.
    pub steps: Vec<Vec<(usize, Vec<u8>)>>,
}

impl Feed {
    pub fn messages(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }
}

pub fn build_feed(source: &FeedSource) -> CliResult<Feed> {
    let mut by_slot: BTreeMap<Timestamp, Vec<(usize, Vec<u8>)>> = BTreeMap::new();
    let (parameters, turbines) = match source {
        FeedSource::Synthetic(cfg) => {
            let fleet = generate(cfg)?;
            let ids: Vec<String> = fleet.turbines.iter().map(|t| t.id.clone()).collect();
            for (i, t) in fleet.turbines.iter().enumerate() {
                for r in &t.operational {
                    by_slot.entry(r.timestamp).or_default().push((i, format_operational_row(r).into_bytes()));
                }
            }
            (fleet.manifest.parameters, ids)
        }
        FeedSource::Replay { store, turbines, range } => {
            let s = TurbineStore::open(store)?;
            let ids: Vec<String> = if turbines.is_empty() {
                s.turbine_ids().map(str::to_string).collect()
            } else {
                turbines.clone()
            };
            for (i, t) in ids.iter().enumerate() {
                for r in s.scan_operational(t, *range)? {
                    by_slot.entry(r.timestamp).or_default().push((i, format_operational_row(&r).into_bytes()));
                }
            }
            (s.manifest().parameters.clone(), ids)
        }
    };
    Ok(Feed {
        parameters,
        turbines,
        steps: by_slot.into_values().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pace {
    Max,
    /// Real milliseconds per simulated step.
    StepMillis(u64),
}

impl Pace {
    pub fn parse(s: &str) -> Result<Pace, String> {
        if s.eq_ignore_ascii_case("max") {
            return Ok(Pace::Max);
        }
        match s.parse::<u64>() {
            Ok(ms) if ms > 0 => Ok(Pace::StepMillis(ms)),
            _ => Err(format!("speedup {s:?} is neither `max` nor a positive millisecond count")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulatorConfig {
    pub pace: Pace,
    /// Crash the consumer once, after the sink append of the batch holding
    /// the k-th processed message.
    pub kill_agent_at: Option<u64>,
    /// `(after n published, for)`.
    pub pause_broker: Option<(u64, Duration)>,
    pub drain_timeout: Duration,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            pace: Pace::Max,
            kill_agent_at: None,
            pause_broker: None,
            drain_timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub messages: u64,
    pub turbines: usize,
    pub steps: usize,
    pub notified: u64,
    pub skipped: u64,
    pub dead_lettered: u64,
    pub restarts: u64,
    pub notifications_total: u64,
    pub publish_seconds: f64,
    pub total_seconds: f64,
    pub messages_per_second: f64,
    pub drained: bool,
}

struct KillAt {
    k: u64,
    seen: AtomicU64,
    fired: AtomicBool,
}

impl FaultHook for KillAt {
    fn at(&self, point: FaultPoint, _: &str, _: u64) -> FaultAction {
        match point {
            FaultPoint::Handler => {
                self.seen.fetch_add(1, Ordering::SeqCst);
                FaultAction::Continue
            }
            FaultPoint::AfterSinkAppend
                if self.seen.load(Ordering::SeqCst) >= self.k && !self.fired.swap(true, Ordering::SeqCst) =>
            {
                log::warn!("simulator: killing consumer after {} messages", self.k);
                FaultAction::Crash
            }
            _ => FaultAction::Continue,
        }
    }
}

fn pace_wait(pace: Pace, t0: Instant, step: usize) {
    if let Pace::StepMillis(ms) = pace {
        let due = t0 + Duration::from_millis(ms * step as u64);
        let now = Instant::now();
        if due > now {
            std::thread::sleep(due - now);
        }
    }
}

fn publish_retrying(broker: &Broker, topic: &str, payload: &[u8], deadline: Instant) -> CliResult<u64> {
    loop {
        match broker.publish(topic, payload) {
            Ok(o) => return Ok(o),
            Err(BrokerError::Unavailable) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(10)),
            Err(e) => return Err(e.into()),
        }
    }
}

fn drained(broker: &Broker, group: &str, turbines: &[String]) -> bool {
    turbines.iter().all(|t| match (broker.committed(group, t), broker.next_offset(t)) {
        (Ok(c), Ok(n)) => c >= n,
        _ => false,
    })
}

/// Publishes the feed into `broker` while an in-process agent consumes it,
/// then waits for every topic to be fully committed.
pub fn run_in_process(feed: &Feed, broker: Arc<Broker>, config: AgentConfig, sim: &SimulatorConfig) -> CliResult<SimulationReport> {
    for t in &feed.turbines {
        broker.ensure_topic(t)?;
    }
    let hook: Option<Arc<dyn FaultHook>> = sim.kill_agent_at.map(|k| {
        Arc::new(KillAt {
            k,
            seen: AtomicU64::new(0),
            fired: AtomicBool::new(false),
        }) as Arc<dyn FaultHook>
    });
    let group = config.group.clone();
    let agent = Agent::start_with_hook(config, broker.clone(), hook)?;
    let before = agent.health();
    let handle = agent.supervise();
    let t0 = Instant::now();
    let mut published = 0u64;
    let result = (|| {
        for (k, step) in feed.steps.iter().enumerate() {
            pace_wait(sim.pace, t0, k);
            for (ti, payload) in step {
                publish_retrying(&broker, &feed.turbines[*ti], payload, Instant::now() + sim.drain_timeout)?;
                published += 1;
                if let Some((at, d)) = sim.pause_broker {
                    if published == at {
                        log::warn!("simulator: pausing broker for {d:?}");
                        broker.pause();
                        std::thread::sleep(d);
                        broker.resume();
                    }
                }
            }
            if agent.health().state == HealthState::Stopped {
                return Err(CliError::runtime(format!(
                    "agent stopped: {}",
                    agent.health().last_error.unwrap_or_default()
                )));
            }
        }
        Ok(())
    })();
    let publish_seconds = t0.elapsed().as_secs_f64();
    let deadline = Instant::now() + sim.drain_timeout;
    let mut ok = result.is_ok();
    while ok && !drained(&broker, &group, &feed.turbines) {
        if Instant::now() > deadline || agent.health().state == HealthState::Stopped {
            ok = false;
            break;
        }
        std::thread::sleep(Duration::from_millis(2));
    }
    let total_seconds = t0.elapsed().as_secs_f64();
    handle.stop();
    result?;
    let h = agent.health();
    if h.state == HealthState::Stopped {
        return Err(CliError::runtime(format!("agent stopped: {}", h.last_error.unwrap_or_default())));
    }
    Ok(SimulationReport {
        messages: published,
        turbines: feed.turbines.len(),
        steps: feed.steps.len(),
        notified: h.notified - before.notified,
        skipped: h.skipped - before.skipped,
        dead_lettered: h.dead_lettered - before.dead_lettered,
        restarts: h.restarts,
        notifications_total: h.notifications_total,
        publish_seconds,
        total_seconds,
        messages_per_second: published as f64 / total_seconds.max(1e-9),
        drained: ok,
    })
}

/// Publishes the feed to a running `serve` over HTTP and waits until its
/// agent has processed everything.
pub fn run_remote(feed: &Feed, client: &EndpointClient, sim: &SimulatorConfig) -> CliResult<SimulationReport> {
    if sim.kill_agent_at.is_some() || sim.pause_broker.is_some() {
        return Err(CliError::usage("fault injection needs an in-process agent (drop --endpoint)"));
    }
    let before = client.health().map_err(|e| CliError::runtime(e.to_string()))?;
    let t0 = Instant::now();
    let mut published = 0u64;
    for (k, step) in feed.steps.iter().enumerate() {
        pace_wait(sim.pace, t0, k);
        for (ti, payload) in step {
            let row = String::from_utf8_lossy(payload).into_owned();
            client
                .publish(&feed.turbines[*ti], &[row])
                .map_err(|e| CliError::runtime(e.to_string()))?;
            published += 1;
        }
    }
    let publish_seconds = t0.elapsed().as_secs_f64();
    let deadline = Instant::now() + sim.drain_timeout;
    let (h, drained) = loop {
        let h = client.health().map_err(|e| CliError::runtime(e.to_string()))?;
        if h.processed >= before.processed + published {
            break (h, true);
        }
        if Instant::now() > deadline || h.state == HealthState::Stopped {
            break (h, false);
        }
        std::thread::sleep(Duration::from_millis(10));
    };
    let total_seconds = t0.elapsed().as_secs_f64();
    Ok(SimulationReport {
        messages: published,
        turbines: feed.turbines.len(),
        steps: feed.steps.len(),
        notified: h.notified - before.notified,
        skipped: h.skipped - before.skipped,
        dead_lettered: h.dead_lettered - before.dead_lettered,
        restarts: h.restarts,
        notifications_total: h.notifications_total,
        publish_seconds,
        total_seconds,
        messages_per_second: published as f64 / total_seconds.max(1e-9),
        drained,
    })
}

fn print_json<T: Serialize>(v: &T) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

pub(super) fn cmd_simulate(a: SimulateArgs) -> CliResult {
    let pace = Pace::parse(a.speedup.as_deref().unwrap_or("max")).map_err(CliError::usage)?;
    let start = parse_time(a.start.as_deref(), "start")?;
    let days = a.days.unwrap_or(1);
    if days == 0 {
        return Err(CliError::usage("--days must be positive"));
    }
    let source = match &a.replay {
        Some(store) => {
            let range = match start {
                Some(s) => TimeRange::new(s, s.add_slots(days as i64 * 144)),
                None => TimeRange::all(),
            };
            FeedSource::Replay {
                store: store.clone(),
                turbines: Vec::new(),
                range,
            }
        }
        None => {
            let d = SynthConfig::default();
            FeedSource::Synthetic(SynthConfig {
                seed: a.seed.unwrap_or(d.seed),
                turbines: a.turbines.unwrap_or(17),
                days,
                start: start.unwrap_or(d.start),
                ..d
            })
        }
    };
    let feed = build_feed(&source)?;
    let total = feed.messages() as u64;
    if let Some(k) = a.kill_agent_at {
        if k == 0 || k > total {
            return Err(CliError::usage(format!("--kill-agent-at must be within 1..={total}")));
        }
    }
    let pause_broker = match (a.pause_broker_ms, a.pause_at) {
        (Some(ms), at) => {
            let at = at.unwrap_or(total / 2).max(1);
            if at > total {
                return Err(CliError::usage(format!("--pause-at must be within 1..={total}")));
            }
            Some((at, Duration::from_millis(ms)))
        }
        (None, Some(_)) => return Err(CliError::usage("--pause-at needs --pause-broker-ms")),
        (None, None) => None,
    };
    let sim = SimulatorConfig {
        pace,
        kill_agent_at: a.kill_agent_at,
        pause_broker,
        ..Default::default()
    };
    let report = match &a.endpoint {
        Some(url) => run_remote(&feed, &EndpointClient::new(url.clone()), &sim)?,
        None => {
            let broker = Arc::new(Broker::open(required(a.broker, "broker")?)?);
            let models = required(a.models, "models")?;
            let out = required(a.out, "out")?;
            let config = AgentConfig::new(models, out, feed.turbines.clone(), feed.parameters.clone());
            run_in_process(&feed, broker, config, &sim)?
        }
    };
    print_json(&report);
    if !report.drained {
        return Err(CliError::runtime("timed out before the agent processed every message"));
    }
    Ok(())
}

pub(super) fn cmd_serve(a: ServeArgs) -> CliResult {
    let manifest = match (&a.manifest, &a.store) {
        (Some(m), _) => Manifest::load(m)?,
        (None, Some(s)) => TurbineStore::open(s)?.manifest().clone(),
        (None, None) => return Err(CliError::usage("--store or --manifest is required")),
    };
    let turbines = a.turbines.unwrap_or_else(|| manifest.turbines.clone());
    let broker = Arc::new(Broker::open(required(a.broker, "broker")?)?);
    let out = required(a.out, "out")?;
    let config = AgentConfig::new(required(a.models, "models")?, &out, turbines, manifest.parameters.clone());
    let sink = config.sink_path.clone();
    let agent = Agent::start(config, broker.clone())?;
    let handle = agent.supervise();
    let listen = a.listen.unwrap_or_else(|| "127.0.0.1:7878".into());
    let endpoint = Endpoint::start(&listen, broker, Some(agent.clone()), sink)?;
    println!("listening on {}", endpoint.url());
    let t0 = Instant::now();
    let limit = a.duration.map(Duration::from_secs_f64);
    let result = loop {
        std::thread::sleep(Duration::from_millis(100));
        let h = agent.health();
        if h.state == HealthState::Stopped {
            break Err(CliError::runtime(format!("agent stopped: {}", h.last_error.unwrap_or_default())));
        }
        if limit.is_some_and(|l| t0.elapsed() >= l) {
            break Ok(());
        }
    };
    endpoint.shutdown();
    handle.stop();
    print_json(&agent.health());
    result
}

#[derive(Debug, Serialize)]
struct TopicStatus {
    name: String,
    next_offset: u64,
    committed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct OfflineStatus {
    notifications_total: usize,
    distinct_turbines: usize,
    dead_lettered: usize,
    topics: Vec<TopicStatus>,
}

pub(super) fn cmd_status(a: StatusArgs) -> CliResult {
    if let Some(url) = a.endpoint {
        let c = EndpointClient::new(url);
        let h = c.health().map_err(|e| CliError::runtime(e.to_string()))?;
        let topics = c.topics().map_err(|e| CliError::runtime(e.to_string()))?;
        print_json(&serde_json::json!({ "health": h, "topics": topics }));
        return Ok(());
    }
    let out = required(a.out, "out or --endpoint")?;
    let sink = out.join(NOTIFICATIONS_FILE);
    let notes = if sink.exists() { read_notifications(&sink)? } else { Vec::new() };
    let dl = out.join(DEAD_LETTERS_FILE);
    let dead = if dl.exists() { read_dead_letters(&dl)?.len() } else { 0 };
    let mut topics = Vec::new();
    if let Some(dir) = a.broker {
        if !dir.exists() {
            return Err(CliError::data(format!("no broker at {}", dir.display())));
        }
        let b = Broker::open(dir)?;
        for name in b.topics() {
            topics.push(TopicStatus {
                next_offset: b.next_offset(&name)?,
                committed: b.committed(DEFAULT_GROUP, &name).ok(),
                name,
            });
        }
    }
    let distinct: std::collections::BTreeSet<&str> = notes.iter().map(|n| n.turbine.as_str()).collect();
    print_json(&OfflineStatus {
        notifications_total: notes.len(),
        distinct_turbines: distinct.len(),
        dead_lettered: dead,
        topics,
    });
    Ok(())
}
