//! Trains models, starts the agent with its HTTP endpoint, publishes a few
//! rows over HTTP and reads the notifications back.

use std::sync::Arc;
use std::time::{Duration, Instant};

use turbine_pm::agent::endpoint::{Endpoint, EndpointClient};
use turbine_pm::agent::{Agent, AgentConfig};
use turbine_pm::broker::Broker;
use turbine_pm::ingest::{format_operational_row, TurbineStore};
use turbine_pm::synth::{generate, SynthConfig};
use turbine_pm::time::TimeRange;
use turbine_pm::trainer::{run, TrainingPlan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let cfg = SynthConfig { days: 10, ..Default::default() };
    generate(&cfg)?.write_store(dir.path().join("store"))?;
    let mut plan = TrainingPlan::new(dir.path().join("store"), dir.path().join("out"));
    plan.forest.n_trees = 20;
    run(&plan)?;

    let store = TurbineStore::open(dir.path().join("store"))?;
    let params = store.manifest().parameters.clone();
    let broker = Arc::new(Broker::open(dir.path().join("broker"))?);
    let config = AgentConfig::new(dir.path().join("out/models"), dir.path().join("agent"), vec!["WT01".into()], params);
    let sink = config.sink_path.clone();
    let agent = Agent::start(config, broker.clone())?;
    let handle = agent.supervise();
    let endpoint = Endpoint::start("127.0.0.1:0", broker, Some(agent.clone()), sink)?;
    println!("endpoint at {}", endpoint.url());

    let client = EndpointClient::new(endpoint.url());
    let rows: Vec<String> = store
        .scan_operational("WT01", TimeRange::all())?
        .iter()
        .rev()
        .take(5)
        .rev()
        .map(format_operational_row)
        .collect();
    println!("published offsets {:?}", client.publish("WT01", &rows)?);
    let t0 = Instant::now();
    while client.health()?.notifications_total < 5 && t0.elapsed() < Duration::from_secs(5) {
        std::thread::sleep(Duration::from_millis(10));
    }
    for line in client.notifications(0)? {
        println!("{line}");
    }
    println!("{:?}", client.health()?);
    endpoint.shutdown();
    handle.stop();
    Ok(())
}
