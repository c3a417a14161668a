//! Builds the six look-ahead datasets for one turbine and prints their
//! class balance.

use turbine_pm::dataset::{label_records, stratified_split, FeatureProjection, Horizon};
use turbine_pm::patterns::{build_class_timeline, build_transactions, mine_patterns, MiningSettings};
use turbine_pm::synth::{generate, SynthConfig};
use turbine_pm::time::TimeRange;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig { days: 14, ..Default::default() };
    let fleet = generate(&cfg)?;
    let t = &fleet.turbines[0];
    let range = TimeRange::new(cfg.start, cfg.start.add_slots(cfg.days as i64 * 144));
    let tx = build_transactions(&t.id, &t.status, range);
    let patterns = mine_patterns(&tx, &fleet.manifest.critical_set(), MiningSettings::default())?;
    let timeline = build_class_timeline(&tx, &patterns);
    let proj = FeatureProjection::identity(&fleet.manifest.parameters);
    for h in Horizon::ALL {
        let d = label_records(&t.operational, &proj, &timeline, h)?;
        let split = stratified_split(&d, 2.0 / 3.0, 42)?;
        let counts: Vec<String> = d
            .class_counts()
            .iter()
            .map(|c| format!("{}={} ({:.1}%)", c.label, c.count, c.percent))
            .collect();
        println!(
            "{h}: {} rows, train {} / test {}, {}",
            d.len(),
            split.train.len(),
            split.test.len(),
            counts.join(" ")
        );
    }
    Ok(())
}
