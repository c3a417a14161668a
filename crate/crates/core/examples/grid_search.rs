//! Accuracy and training cost over a small trees x depth grid.
//!
//! The full grid is `--trees 5..100:5 --depth 5..30:5` on the CLI.

use turbine_pm::dataset::Horizon;
use turbine_pm::ingest::TurbineStore;
use turbine_pm::metrics::{grid_search, value_range, variance, GridSettings};
use turbine_pm::synth::{generate, SynthConfig};
use turbine_pm::trainer::{build_dataset, TrainingPlan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    generate(&SynthConfig { days: 10, ..Default::default() })?.write_store(dir.path().join("store"))?;
    let store = TurbineStore::open(dir.path().join("store"))?;
    let plan = TrainingPlan::new(dir.path().join("store"), dir.path().join("out"));
    let ds = build_dataset(&store, &plan, "WT01", Horizon::new(10)?)?;
    let settings = GridSettings {
        timing_repeats: 1,
        ..Default::default()
    };
    let grid = grid_search(&ds, &value_range(5, 40, 5), &value_range(1, 9, 2), settings)?;
    print!("{}", grid.to_csv());
    println!("variance across depths {:.2e}", variance(&grid.accuracy_by_depth()));
    println!("variance across tree counts {:.2e}", variance(&grid.accuracy_by_trees()));
    Ok(())
}
