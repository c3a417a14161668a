//! Generates a small synthetic fleet and prints what was planted.
//!
//! cargo run --example synth_fleet -- [days] [turbines]

use turbine_pm::synth::{generate, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let days = args.next().map(|s| s.parse()).transpose()?.unwrap_or(30);
    let turbines = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let cfg = SynthConfig {
        days,
        turbines,
        ..Default::default()
    };
    let fleet = generate(&cfg)?;
    println!("parameters: {}", fleet.manifest.parameters.join(", "));
    println!("critical alarms: {}", fleet.manifest.critical_alarms.join(", "));
    for (p, name, kind) in &fleet.truth.signatures {
        println!("pattern {p} signature: {name} ({kind})");
    }
    for (t, truth) in fleet.turbines.iter().zip(&fleet.truth.turbines) {
        let cover: Vec<String> = (0..cfg.patterns.len()).map(|p| format!("{:.3}", truth.coverage(p))).collect();
        println!(
            "{}: {} rows, {} status events, {} episodes, coverage [{}]",
            t.id,
            t.operational.len(),
            t.status.len(),
            truth.episodes.len(),
            cover.join(", ")
        );
    }
    let dir = tempfile::tempdir()?;
    fleet.write_store(dir.path().join("store"))?;
    println!("store written under {}", dir.path().display());
    Ok(())
}
