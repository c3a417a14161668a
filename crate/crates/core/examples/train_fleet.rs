//! Runs the trainer over a synthetic fleet: six models per turbine.

use turbine_pm::synth::{generate, SynthConfig};
use turbine_pm::trainer::{run, TrainingPlan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let cfg = SynthConfig {
        turbines: 3,
        days: 14,
        ..Default::default()
    };
    generate(&cfg)?.write_store(dir.path().join("store"))?;
    let mut plan = TrainingPlan::new(dir.path().join("store"), dir.path().join("out"));
    plan.seed = 11;
    println!("plan:\n{}", plan.to_toml_string());
    let report = run(&plan)?;
    print!("{}", report.summary_text());
    println!("completed {} of {}", report.completed(), 6 * cfg.turbines);
    print!("{}", std::fs::read_to_string(dir.path().join("out/evaluation.csv"))?);
    Ok(())
}
