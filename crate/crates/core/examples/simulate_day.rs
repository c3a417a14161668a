//! One simulated day for 17 turbines through an in-process agent, with the
//! consumer killed once and the broker paused once along the way.

use std::sync::Arc;
use std::time::Duration;

use turbine_pm::agent::{read_notifications, AgentConfig};
use turbine_pm::broker::Broker;
use turbine_pm::cli::{build_feed, run_in_process, FeedSource, SimulatorConfig};
use turbine_pm::synth::{generate, SynthConfig};
use turbine_pm::trainer::{run, TrainingPlan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let history = SynthConfig {
        turbines: 17,
        days: 7,
        ..Default::default()
    };
    generate(&history)?.write_store(dir.path().join("store"))?;
    let mut plan = TrainingPlan::new(dir.path().join("store"), dir.path().join("out"));
    plan.forest.n_trees = 10;
    plan.write_datasets = false;
    run(&plan)?;

    let day = SynthConfig {
        seed: 99,
        days: 1,
        start: history.start.add_slots(history.days as i64 * 144),
        ..history
    };
    let feed = build_feed(&FeedSource::Synthetic(day))?;
    let broker = Arc::new(Broker::open(dir.path().join("broker"))?);
    let config = AgentConfig::new(dir.path().join("out/models"), dir.path().join("agent"), feed.turbines.clone(), feed.parameters.clone());
    let sink = config.sink_path.clone();
    let sim = SimulatorConfig {
        kill_agent_at: Some(1000),
        pause_broker: Some((1500, Duration::from_millis(300))),
        ..Default::default()
    };
    let report = run_in_process(&feed, broker, config, &sim)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    let notes = read_notifications(sink)?;
    let mut keys: Vec<(&str, i64)> = notes.iter().map(|n| (n.turbine.as_str(), n.t.secs())).collect();
    keys.sort_unstable();
    keys.dedup();
    println!("{} notifications, {} distinct (turbine, t)", notes.len(), keys.len());
    Ok(())
}
