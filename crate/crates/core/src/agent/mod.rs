//! Streaming monitoring agent.
//!
//! One logical consumer per turbine topic reads operational rows from the
//! broker, runs the six horizon forests, appends a notification to the sink
//! and only then commits the offset. A crash between append and commit
//! causes redelivery, which the sink's `(turbine, t)` index turns into a
//! skip, so each record yields exactly one notification.

pub mod endpoint;
mod sink;

use std::collections::{BTreeMap, HashSet};
use std::io;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::broker::{Broker, BrokerError, Message};
use crate::dataset::{FeatureProjection, Horizon};
use crate::forest::{load_model, model_path, ModelBundle};
use crate::framing::{Decoder, Encoder, FrameLog};
use crate::ingest::{parse_operational_row, Manifest};

pub use sink::{read_notifications, HorizonPrediction, Notification, NotificationSink};

pub const NOTIFICATIONS_FILE: &str = "notifications.jsonl";
pub const DEAD_LETTERS_FILE: &str = "dead_letters.log";
pub const DEFAULT_GROUP: &str = "agent";

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("missing model bundles: {}", fmt_missing(.0))]
    MissingModel(Vec<(String, u32)>),
    #[error("model {path}: {reason}")]
    BadModel { path: PathBuf, reason: String },
    #[error("no turbines to monitor")]
    NoTurbines,
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("notification sink failure: {0}")]
    FatalStorageFailure(io::Error),
    #[error("injected crash at {0:?}")]
    InjectedCrash(FaultPoint),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn fmt_missing(v: &[(String, u32)]) -> String {
    v.iter().map(|(t, h)| format!("{t}/t+{h}")).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub models_dir: PathBuf,
    pub turbines: Vec<String>,
    /// Column order of incoming payload rows.
    pub parameters: Vec<String>,
    pub sink_path: PathBuf,
    pub dead_letter_path: PathBuf,
    pub group: String,
    pub batch_size: usize,
    pub backoff_min: Duration,
    pub backoff_max: Duration,
    /// Longest a consumer blocks waiting for new messages.
    pub idle_wait: Duration,
}

impl AgentConfig {
    pub fn new(models_dir: impl Into<PathBuf>, out_dir: impl AsRef<Path>, turbines: Vec<String>, parameters: Vec<String>) -> AgentConfig {
        let out = out_dir.as_ref();
        AgentConfig {
            models_dir: models_dir.into(),
            turbines,
            parameters,
            sink_path: out.join(NOTIFICATIONS_FILE),
            dead_letter_path: out.join(DEAD_LETTERS_FILE),
            group: DEFAULT_GROUP.to_string(),
            batch_size: 256,
            backoff_min: Duration::from_millis(100),
            backoff_max: Duration::from_secs(10),
            idle_wait: Duration::from_millis(50),
        }
    }
}

/// Where an injected fault fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPoint {
    AfterPoll,
    /// Inside the per-message handler.
    Handler,
    BeforeSinkAppend,
    AfterSinkAppend,
    AfterCommit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultAction {
    Continue,
    /// Abandon the batch as if the process died here.
    Crash,
    Panic,
    /// Make the sink write fail.
    FailSink,
}

/// Test and simulator hook consulted at every [`FaultPoint`].
pub trait FaultHook: Send + Sync {
    fn at(&self, point: FaultPoint, turbine: &str, offset: u64) -> FaultAction;
}

struct TurbineModels {
    bundles: Vec<(ModelBundle, FeatureProjection)>,
    version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HealthState {
    Ready,
    Degraded,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthReport {
    pub state: HealthState,
    pub turbines: usize,
    pub processed: u64,
    pub notified: u64,
    pub skipped: u64,
    pub dead_lettered: u64,
    pub restarts: u64,
    pub notifications_total: u64,
    pub last_error: Option<String>,
}

#[derive(Debug, Default)]
struct Health {
    stopped: AtomicBool,
    degraded: AtomicUsize,
    processed: AtomicU64,
    notified: AtomicU64,
    skipped: AtomicU64,
    dead_lettered: AtomicU64,
    restarts: AtomicU64,
    last_error: Mutex<Option<String>>,
}

/// What one message produced.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Notify(Notification),
    Skip,
    DeadLetter(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchOutcome {
    pub polled: usize,
    pub notified: usize,
    pub skipped: usize,
    pub dead_lettered: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeadLetter {
    pub topic: String,
    pub offset: u64,
    pub reason: String,
    pub payload: Vec<u8>,
}

pub fn read_dead_letters(path: impl AsRef<Path>) -> io::Result<Vec<DeadLetter>> {
    if !path.as_ref().exists() {
        return Ok(Vec::new());
    }
    let (_, frames) = FrameLog::open(path)?;
    Ok(frames
        .iter()
        .filter_map(|f| {
            let mut d = Decoder::new(f);
            Some(DeadLetter {
                topic: d.str().ok()?,
                offset: d.u64().ok()?,
                reason: d.str().ok()?,
                payload: d.bytes().ok()?,
            })
        })
        .collect())
}

pub struct Agent {
    config: AgentConfig,
    broker: Arc<Broker>,
    manifest: Manifest,
    models: BTreeMap<String, TurbineModels>,
    sink: Mutex<NotificationSink>,
    dead: Mutex<FrameLog>,
    health: Health,
    hook: Option<Arc<dyn FaultHook>>,
    stop: AtomicBool,
}

fn load_turbine_models(config: &AgentConfig) -> Result<BTreeMap<String, TurbineModels>, AgentError> {
    let mut missing = Vec::new();
    for t in &config.turbines {
        for h in Horizon::ALL {
            if !model_path(&config.models_dir, t, h).exists() {
                missing.push((t.clone(), h.minutes()));
            }
        }
    }
    if !missing.is_empty() {
        return Err(AgentError::MissingModel(missing));
    }
    let mut out = BTreeMap::new();
    for t in &config.turbines {
        let mut bundles = Vec::new();
        let mut ids = String::new();
        for h in Horizon::ALL {
            let path = model_path(&config.models_dir, t, h);
            let bad = |reason: String| AgentError::BadModel {
                path: path.clone(),
                reason,
            };
            let b = load_model(&path).map_err(|e| bad(e.to_string()))?;
            if &b.turbine_id != t || b.horizon != h {
                return Err(bad(format!("holds {} {}", b.turbine_id, b.horizon)));
            }
            let proj = FeatureProjection::new(&config.parameters, &b.feature_names).map_err(|e| bad(e.to_string()))?;
            ids.push_str(&b.content_id());
            bundles.push((b, proj));
        }
        out.insert(
            t.clone(),
            TurbineModels {
                bundles,
                version: format!("{:08x}", crc32fast::hash(ids.as_bytes())),
            },
        );
    }
    Ok(out)
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".to_string()
    }
}

impl Agent {
    /// Loads all 6 bundles per turbine, creates missing topics and opens the
    /// sink. Refuses to start if any bundle is absent.
    pub fn start(config: AgentConfig, broker: Arc<Broker>) -> Result<Arc<Agent>, AgentError> {
        Agent::start_with_hook(config, broker, None)
    }

    pub fn start_with_hook(
        config: AgentConfig,
        broker: Arc<Broker>,
        hook: Option<Arc<dyn FaultHook>>,
    ) -> Result<Arc<Agent>, AgentError> {
        if config.turbines.is_empty() {
            return Err(AgentError::NoTurbines);
        }
        let models = load_turbine_models(&config)?;
        for t in &config.turbines {
            broker.ensure_topic(t)?;
        }
        let sink = NotificationSink::open(&config.sink_path).map_err(AgentError::FatalStorageFailure)?;
        let (dead, _) = FrameLog::open(&config.dead_letter_path)?;
        let manifest = Manifest {
            parameters: config.parameters.clone(),
            alarms: Vec::new(),
            critical_alarms: Vec::new(),
            turbines: config.turbines.clone(),
        };
        Ok(Arc::new(Agent {
            config,
            broker,
            manifest,
            models,
            sink: Mutex::new(sink),
            dead: Mutex::new(dead),
            health: Health::default(),
            hook,
            stop: AtomicBool::new(false),
        }))
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn turbines(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    pub fn broker(&self) -> &Arc<Broker> {
        &self.broker
    }

    fn fault(&self, point: FaultPoint, turbine: &str, offset: u64) -> FaultAction {
        match &self.hook {
            Some(h) => h.at(point, turbine, offset),
            None => FaultAction::Continue,
        }
    }

    fn crash_point(&self, point: FaultPoint, turbine: &str, offset: u64) -> Result<(), AgentError> {
        match self.fault(point, turbine, offset) {
            FaultAction::Crash => Err(AgentError::InjectedCrash(point)),
            FaultAction::Panic => panic!("injected panic at {point:?}"),
            _ => Ok(()),
        }
    }

    /// Predictions of the six horizon models for one manifest-ordered row.
    pub fn predict_values(&self, turbine: &str, values: &[f64]) -> Result<Vec<HorizonPrediction>, String> {
        let m = self.models.get(turbine).ok_or_else(|| format!("no models for {turbine}"))?;
        m.bundles
            .iter()
            .map(|(b, proj)| {
                let x = proj
                    .project(values)
                    .ok_or_else(|| format!("row has {} values", values.len()))?;
                let p = b.forest.predict(&x).map_err(|e| e.to_string())?;
                Ok(HorizonPrediction {
                    horizon: b.horizon.minutes(),
                    class: p.label.to_string(),
                    vote_fraction: p.vote_fraction(),
                })
            })
            .collect()
    }

    /// Decides what one message yields without touching sink or offsets.
    pub fn process_message(&self, msg: &Message) -> Outcome {
        let turbine = msg.topic.as_str();
        let text = match std::str::from_utf8(&msg.payload) {
            Ok(s) => s,
            Err(_) => return Outcome::DeadLetter("payload is not UTF-8".into()),
        };
        let record = match parse_operational_row(text, turbine, &self.manifest) {
            Ok(r) => r,
            Err(e) => return Outcome::DeadLetter(format!("malformed payload: {e}")),
        };
        if self.sink.lock().unwrap().contains(turbine, record.timestamp) {
            return Outcome::Skip;
        }
        let predictions = match self.predict_values(turbine, &record.values) {
            Ok(p) => p,
            Err(e) => return Outcome::DeadLetter(format!("prediction failed: {e}")),
        };
        Outcome::Notify(Notification {
            turbine: turbine.to_string(),
            t: record.timestamp,
            predictions,
            model_version: self.models[turbine].version.clone(),
            emitted_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            offset: msg.offset,
        })
    }

    /// Polls one batch for `turbine`, appends its notifications, then
    /// commits past it.
    pub fn process_batch(&self, turbine: &str) -> Result<BatchOutcome, AgentError> {
        let msgs = self.broker.poll(&self.config.group, turbine, self.config.batch_size)?;
        let Some(last) = msgs.last().map(|m| m.offset) else {
            return Ok(BatchOutcome::default());
        };
        let first = msgs[0].offset;
        self.crash_point(FaultPoint::AfterPoll, turbine, first)?;
        let mut out = BatchOutcome {
            polled: msgs.len(),
            ..Default::default()
        };
        let mut notes = Vec::new();
        let mut dead = Vec::new();
        let mut pending = HashSet::new();
        for m in &msgs {
            let r = catch_unwind(AssertUnwindSafe(|| {
                if self.fault(FaultPoint::Handler, turbine, m.offset) == FaultAction::Panic {
                    panic!("injected handler panic at offset {}", m.offset);
                }
                self.process_message(m)
            }));
            match r.unwrap_or_else(|p| Outcome::DeadLetter(format!("handler panicked: {}", panic_text(p)))) {
                Outcome::Notify(n) => {
                    if pending.insert(n.t) {
                        notes.push(n);
                    } else {
                        out.skipped += 1;
                    }
                }
                Outcome::Skip => out.skipped += 1,
                Outcome::DeadLetter(reason) => dead.push((m, reason)),
            }
        }
        if !dead.is_empty() {
            let frames: Vec<Vec<u8>> = dead
                .iter()
                .map(|(m, reason)| {
                    let mut e = Encoder::new();
                    e.str(turbine).u64(m.offset).str(reason).bytes(&m.payload);
                    e.finish()
                })
                .collect();
            self.dead
                .lock()
                .unwrap()
                .append_many(frames.iter().map(Vec::as_slice))
                .map_err(AgentError::FatalStorageFailure)?;
            for (m, reason) in &dead {
                log::warn!("dead-lettered {turbine}@{}: {reason}", m.offset);
            }
            out.dead_lettered = dead.len();
        }
        match self.fault(FaultPoint::BeforeSinkAppend, turbine, first) {
            FaultAction::Crash => return Err(AgentError::InjectedCrash(FaultPoint::BeforeSinkAppend)),
            FaultAction::FailSink => {
                return Err(AgentError::FatalStorageFailure(io::Error::other("injected sink failure")))
            }
            _ => {}
        }
        self.sink
            .lock()
            .unwrap()
            .append(&notes)
            .map_err(AgentError::FatalStorageFailure)?;
        out.notified = notes.len();
        self.crash_point(FaultPoint::AfterSinkAppend, turbine, first)?;
        self.broker.commit(&self.config.group, turbine, last + 1)?;
        self.crash_point(FaultPoint::AfterCommit, turbine, first)?;
        let h = &self.health;
        h.processed.fetch_add(out.polled as u64, Ordering::Relaxed);
        h.notified.fetch_add(out.notified as u64, Ordering::Relaxed);
        h.skipped.fetch_add(out.skipped as u64, Ordering::Relaxed);
        h.dead_lettered.fetch_add(out.dead_lettered as u64, Ordering::Relaxed);
        Ok(out)
    }

    /// Processes every turbine round-robin until no messages remain.
    pub fn run_until_idle(&self) -> Result<BatchOutcome, AgentError> {
        let mut total = BatchOutcome::default();
        loop {
            let mut any = false;
            for t in self.config.turbines.iter() {
                let o = self.process_batch(t)?;
                any |= o.polled > 0;
                total.polled += o.polled;
                total.notified += o.notified;
                total.skipped += o.skipped;
                total.dead_lettered += o.dead_lettered;
            }
            if !any {
                return Ok(total);
            }
        }
    }

    pub fn health(&self) -> HealthReport {
        let h = &self.health;
        let state = if h.stopped.load(Ordering::SeqCst) {
            HealthState::Stopped
        } else if h.degraded.load(Ordering::SeqCst) > 0 {
            HealthState::Degraded
        } else {
            HealthState::Ready
        };
        HealthReport {
            state,
            turbines: self.models.len(),
            processed: h.processed.load(Ordering::Relaxed),
            notified: h.notified.load(Ordering::Relaxed),
            skipped: h.skipped.load(Ordering::Relaxed),
            dead_lettered: h.dead_lettered.load(Ordering::Relaxed),
            restarts: h.restarts.load(Ordering::Relaxed),
            notifications_total: self.sink.lock().unwrap().count(),
            last_error: h.last_error.lock().unwrap().clone(),
        }
    }

    pub fn request_stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn is_stopping(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    /// Sleeps up to `d`, returning early when a stop is requested.
    fn nap(&self, d: Duration) {
        let end = Instant::now() + d;
        while !self.is_stopping() {
            let now = Instant::now();
            if now >= end {
                return;
            }
            std::thread::sleep((end - now).min(Duration::from_millis(10)));
        }
    }

    fn consumer_loop(&self, turbine: &str) {
        let mut backoff = self.config.backoff_min;
        let mut degraded = false;
        while !self.is_stopping() {
            let r = catch_unwind(AssertUnwindSafe(|| self.process_batch(turbine)));
            let err = match r {
                Ok(Ok(o)) => {
                    if degraded {
                        degraded = false;
                        self.health.degraded.fetch_sub(1, Ordering::SeqCst);
                    }
                    backoff = self.config.backoff_min;
                    if o.polled == 0 {
                        if let Ok(next) = self.broker.committed(&self.config.group, turbine) {
                            let _ = self.broker.wait_for(turbine, next, self.config.idle_wait);
                        }
                    }
                    continue;
                }
                Ok(Err(AgentError::FatalStorageFailure(e))) => {
                    log::error!("{turbine}: fatal sink failure, stopping agent: {e}");
                    *self.health.last_error.lock().unwrap() = Some(format!("fatal: {e}"));
                    self.health.stopped.store(true, Ordering::SeqCst);
                    self.request_stop();
                    return;
                }
                Ok(Err(e)) => e.to_string(),
                Err(p) => format!("consumer panicked: {}", panic_text(p)),
            };
            log::warn!("{turbine}: {err}; retrying in {backoff:?}");
            *self.health.last_error.lock().unwrap() = Some(format!("{turbine}: {err}"));
            self.health.restarts.fetch_add(1, Ordering::Relaxed);
            if !degraded {
                degraded = true;
                self.health.degraded.fetch_add(1, Ordering::SeqCst);
            }
            self.nap(backoff);
            backoff = (backoff * 2).min(self.config.backoff_max);
        }
        if degraded {
            self.health.degraded.fetch_sub(1, Ordering::SeqCst);
        }
    }

    /// Runs one consumer thread per turbine until [`AgentHandle::stop`] or
    /// a fatal sink failure.
    pub fn supervise(self: &Arc<Self>) -> AgentHandle {
        let threads = self
            .config
            .turbines
            .iter()
            .map(|t| {
                let agent = Arc::clone(self);
                let t = t.clone();
                std::thread::Builder::new()
                    .name(format!("consumer-{t}"))
                    .spawn(move || agent.consumer_loop(&t))
                    .expect("spawn consumer thread")
            })
            .collect();
        AgentHandle {
            agent: Arc::clone(self),
            threads,
        }
    }
}

pub struct AgentHandle {
    agent: Arc<Agent>,
    threads: Vec<JoinHandle<()>>,
}

impl AgentHandle {
    pub fn agent(&self) -> &Arc<Agent> {
        &self.agent
    }

    pub fn stop(self) {
        self.agent.request_stop();
        self.join();
    }

    /// Waits for every consumer to exit.
    pub fn join(self) {
        for t in self.threads {
            let _ = t.join();
        }
    }

    pub fn is_finished(&self) -> bool {
        self.threads.iter().all(|t| t.is_finished())
    }
}


#[cfg(test)]
mod tests;
