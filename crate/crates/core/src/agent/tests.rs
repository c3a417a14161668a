use std::sync::atomic::AtomicU64;

use super::*;
use crate::forest::{save_model, train_forest, ForestParams, TrainingData};
use crate::patterns::ClassLabel;
use crate::time::Timestamp;

fn params() -> Vec<String> {
    vec!["a".into(), "b".into()]
}

fn write_models(dir: &Path, turbine: &str, skip: Option<u32>) {
    let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, (i % 7) as f64]).collect();
    for h in Horizon::ALL {
        if Some(h.minutes()) == skip {
            continue;
        }
        let labels: Vec<ClassLabel> = rows
            .iter()
            .map(|r| if r[0] >= h.minutes() as f64 / 2.0 { ClassLabel::Pattern(1) } else { ClassLabel::Normal })
            .collect();
        let d = TrainingData::new(&rows, &labels).unwrap();
        let f = train_forest(&d, ForestParams { n_trees: 5, max_depth: 4, ..Default::default() }, 7).unwrap();
        let b = ModelBundle::new(turbine, h, f, vec!["b".into(), "a".into()], vec![], Timestamp::from_secs(0));
        save_model(&b, model_path(dir, turbine, h)).unwrap();
    }
}

struct Fixture {
    dir: tempfile::TempDir,
    broker: Arc<Broker>,
}

impl Fixture {
    fn new(turbines: &[&str]) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        for t in turbines {
            write_models(&dir.path().join("models"), t, None);
        }
        let broker = Arc::new(Broker::open(dir.path().join("broker")).unwrap());
        Fixture { dir, broker }
    }

    fn config(&self, turbines: &[&str]) -> AgentConfig {
        let mut c = AgentConfig::new(
            self.dir.path().join("models"),
            self.dir.path().join("out"),
            turbines.iter().map(|s| s.to_string()).collect(),
            params(),
        );
        c.backoff_min = Duration::from_millis(5);
        c.backoff_max = Duration::from_millis(40);
        c.idle_wait = Duration::from_millis(5);
        c
    }

    fn sink(&self) -> Vec<Notification> {
        read_notifications(self.dir.path().join("out").join(NOTIFICATIONS_FILE)).unwrap()
    }
}

fn row(slot: i64, a: f64, b: f64) -> Vec<u8> {
    format!("{},{a:?},{b:?}", Timestamp::from_secs(slot * 600).to_rfc3339()).into_bytes()
}

#[test]
fn start_two_turbines() {
    let fx = Fixture::new(&["WT01", "WT02"]);
    let a = Agent::start(fx.config(&["WT01", "WT02"]), fx.broker.clone()).unwrap();
    assert_eq!(a.health().state, HealthState::Ready);
    assert_eq!(a.turbines().count(), 2);
    assert_eq!(fx.broker.topics(), vec!["WT01".to_string(), "WT02".to_string()]);
}

#[test]
fn missing_bundle_is_named() {
    let fx = Fixture::new(&["WT01"]);
    write_models(&fx.dir.path().join("models"), "WT02", Some(30));
    match Agent::start(fx.config(&["WT01", "WT02"]), fx.broker.clone()) {
        Err(AgentError::MissingModel(m)) => assert_eq!(m, vec![("WT02".to_string(), 30)]),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("agent started with a missing bundle"),
    }
}

#[test]
fn notification_matches_direct_predictions() {
    let fx = Fixture::new(&["WT01"]);
    let a = Agent::start(fx.config(&["WT01"]), fx.broker.clone()).unwrap();
    fx.broker.publish("WT01", &row(1, 12.0, 3.0)).unwrap();
    let o = a.run_until_idle().unwrap();
    assert_eq!(o.notified, 1);
    let notes = fx.sink();
    assert_eq!(notes.len(), 1);
    let n = &notes[0];
    assert_eq!(n.t, Timestamp::from_secs(600));
    let horizons: Vec<u32> = n.predictions.iter().map(|p| p.horizon).collect();
    assert_eq!(horizons, vec![10, 20, 30, 40, 50, 60]);
    for (p, h) in n.predictions.iter().zip(Horizon::ALL) {
        let b = load_model(model_path(&fx.dir.path().join("models"), "WT01", h)).unwrap();
        let direct = b.forest.predict(&[3.0, 12.0]).unwrap();
        assert_eq!(p.label(), Some(direct.label));
        assert_eq!(p.vote_fraction, direct.vote_fraction());
    }
    assert_eq!(fx.broker.committed(DEFAULT_GROUP, "WT01").unwrap(), 1);
}

#[test]
fn redelivery_is_skipped() {
    let fx = Fixture::new(&["WT01"]);
    let a = Agent::start(fx.config(&["WT01"]), fx.broker.clone()).unwrap();
    fx.broker.publish("WT01", &row(1, 1.0, 1.0)).unwrap();
    a.run_until_idle().unwrap();
    fx.broker.publish("WT01", &row(1, 1.0, 1.0)).unwrap();
    let o = a.run_until_idle().unwrap();
    assert_eq!((o.notified, o.skipped), (0, 1));
    assert_eq!(fx.sink().len(), 1);
}

#[test]
fn corrupt_payload_is_dead_lettered() {
    let fx = Fixture::new(&["WT01"]);
    let cfg = fx.config(&["WT01"]);
    let dl = cfg.dead_letter_path.clone();
    let a = Agent::start(cfg, fx.broker.clone()).unwrap();
    fx.broker.publish("WT01", b"garbage,1").unwrap();
    fx.broker.publish("WT01", &row(2, 1.0, 1.0)).unwrap();
    let o = a.run_until_idle().unwrap();
    assert_eq!((o.notified, o.dead_lettered), (1, 1));
    let dead = read_dead_letters(dl).unwrap();
    assert_eq!(dead.len(), 1);
    assert_eq!(dead[0].offset, 0);
    assert_eq!(dead[0].payload, b"garbage,1");
    assert_eq!(a.health().dead_lettered, 1);
}

struct PanicAt(u64);

impl FaultHook for PanicAt {
    fn at(&self, point: FaultPoint, _turbine: &str, offset: u64) -> FaultAction {
        if point == FaultPoint::Handler && offset == self.0 {
            FaultAction::Panic
        } else {
            FaultAction::Continue
        }
    }
}

#[test]
fn handler_panic_is_contained() {
    let fx = Fixture::new(&["WT01"]);
    let a = Agent::start_with_hook(fx.config(&["WT01"]), fx.broker.clone(), Some(Arc::new(PanicAt(0)))).unwrap();
    fx.broker.publish("WT01", &row(1, 1.0, 1.0)).unwrap();
    fx.broker.publish("WT01", &row(2, 1.0, 1.0)).unwrap();
    let o = a.run_until_idle().unwrap();
    assert_eq!((o.notified, o.dead_lettered), (1, 1));
    assert_eq!(fx.sink()[0].t, Timestamp::from_secs(1200));
}

struct FailSink;

impl FaultHook for FailSink {
    fn at(&self, point: FaultPoint, _: &str, _: u64) -> FaultAction {
        if point == FaultPoint::BeforeSinkAppend {
            FaultAction::FailSink
        } else {
            FaultAction::Continue
        }
    }
}

#[test]
fn sink_failure_stops_agent() {
    let fx = Fixture::new(&["WT01"]);
    let a = Agent::start_with_hook(fx.config(&["WT01"]), fx.broker.clone(), Some(Arc::new(FailSink))).unwrap();
    let h = a.supervise();
    fx.broker.publish("WT01", &row(1, 1.0, 1.0)).unwrap();
    let t0 = Instant::now();
    while !h.is_finished() && t0.elapsed() < Duration::from_secs(5) {
        std::thread::sleep(Duration::from_millis(5));
    }
    assert!(h.is_finished());
    assert_eq!(a.health().state, HealthState::Stopped);
    assert!(a.health().last_error.unwrap().contains("fatal"));
    assert_eq!(fx.broker.committed(DEFAULT_GROUP, "WT01").unwrap(), 0);
    h.join();
}

#[test]
fn broker_pause_degrades_then_recovers() {
    let fx = Fixture::new(&["WT01"]);
    let a = Agent::start(fx.config(&["WT01"]), fx.broker.clone()).unwrap();
    fx.broker.publish("WT01", &row(1, 1.0, 1.0)).unwrap();
    fx.broker.pause();
    let h = a.supervise();
    let t0 = Instant::now();
    while a.health().state != HealthState::Degraded && t0.elapsed() < Duration::from_secs(5) {
        std::thread::sleep(Duration::from_millis(2));
    }
    assert_eq!(a.health().state, HealthState::Degraded);
    fx.broker.resume();
    fx.broker.publish("WT01", &row(2, 1.0, 1.0)).unwrap();
    while a.health().notifications_total < 2 && t0.elapsed() < Duration::from_secs(5) {
        std::thread::sleep(Duration::from_millis(2));
    }
    assert_eq!(a.health().state, HealthState::Ready);
    assert!(a.health().restarts >= 1);
    h.stop();
    assert_eq!(fx.sink().len(), 2);
}

struct CrashOnce {
    point: FaultPoint,
    fired: AtomicU64,
}

impl FaultHook for CrashOnce {
    fn at(&self, point: FaultPoint, _: &str, _: u64) -> FaultAction {
        if point == self.point && self.fired.fetch_add(1, Ordering::SeqCst) == 0 {
            FaultAction::Crash
        } else {
            FaultAction::Continue
        }
    }
}

#[test]
fn crash_between_append_and_commit_is_deduplicated() {
    let fx = Fixture::new(&["WT01"]);
    fx.broker.create_topic("WT01").unwrap();
    for i in 0..5 {
        fx.broker.publish("WT01", &row(i + 1, i as f64, 0.0)).unwrap();
    }
    {
        let hook = Arc::new(CrashOnce {
            point: FaultPoint::AfterSinkAppend,
            fired: AtomicU64::new(0),
        });
        let a = Agent::start_with_hook(fx.config(&["WT01"]), fx.broker.clone(), Some(hook)).unwrap();
        assert!(matches!(a.run_until_idle(), Err(AgentError::InjectedCrash(_))));
    }
    let broker = Arc::new(Broker::open(fx.dir.path().join("broker")).unwrap());
    let a = Agent::start(fx.config(&["WT01"]), broker).unwrap();
    let o = a.run_until_idle().unwrap();
    assert_eq!((o.polled, o.skipped, o.notified), (5, 5, 0));
    assert_eq!(fx.sink().len(), 5);
}

#[test]
fn endpoint_routes() {
    let fx = Fixture::new(&["WT01"]);
    let cfg = fx.config(&["WT01"]);
    let sink = cfg.sink_path.clone();
    let a = Agent::start(cfg, fx.broker.clone()).unwrap();
    let h = a.supervise();
    let ep = endpoint::Endpoint::start("127.0.0.1:0", fx.broker.clone(), Some(a.clone()), sink).unwrap();
    let c = endpoint::EndpointClient::new(ep.url());
    let rows = vec![
        String::from_utf8(row(1, 1.0, 2.0)).unwrap(),
        String::from_utf8(row(2, 3.0, 4.0)).unwrap(),
    ];
    assert_eq!(c.publish("WT01", &rows).unwrap(), vec![0, 1]);
    assert!(c.publish("nope", &rows).unwrap_err().to_string().contains("404"));
    let t0 = Instant::now();
    while a.health().notifications_total < 2 && t0.elapsed() < Duration::from_secs(5) {
        std::thread::sleep(Duration::from_millis(2));
    }
    assert_eq!(c.health().unwrap().notifications_total, 2);
    let lines = c.notifications(1).unwrap();
    assert_eq!(lines.len(), 1);
    assert!(lines[0].contains("\"offset\":1"));
    assert_eq!(c.topics().unwrap()[0].next_offset, 2);
    ep.shutdown();
    h.stop();
}
