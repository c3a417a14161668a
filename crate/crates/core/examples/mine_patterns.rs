//! Mines critical alarm patterns and compares them with the planted ones.

use turbine_pm::patterns::{build_class_timeline, build_transactions, mine_patterns, patterns_report, MiningSettings};
use turbine_pm::synth::{generate, SynthConfig};
use turbine_pm::time::TimeRange;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig::default();
    let fleet = generate(&cfg)?;
    let t = &fleet.turbines[0];
    let range = TimeRange::new(cfg.start, cfg.start.add_slots(cfg.days as i64 * 144));
    let tx = build_transactions(&t.id, &t.status, range);
    let patterns = mine_patterns(&tx, &fleet.manifest.critical_set(), MiningSettings::default())?;
    print!("{}", patterns_report(&t.id, &patterns));
    for (i, p) in cfg.patterns.iter().enumerate() {
        println!("planted {:?}: target {:.3}, placed {:.3}", p.alarms, p.prevalence, fleet.truth.turbines[0].coverage(i));
    }
    let timeline = build_class_timeline(&tx, &patterns);
    let abnormal = timeline.slots().filter(|(_, c)| !c.is_normal()).count();
    println!("timeline: {abnormal} of {} slots carry a pattern class", tx.len());
    Ok(())
}
