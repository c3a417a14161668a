//! Ingests operational and status CSV into a store, with and without
//! skipping invalid rows.

use turbine_pm::ingest::{parse_operational_csv, parse_status_csv, Manifest, TurbineStore};
use turbine_pm::time::TimeRange;

const OPERATIONAL: &str = "\
timestamp,wind_speed,active_power
2024-01-01T00:00:00Z,7.5,1210.0
2024-01-01T00:10:00Z,7.9,1302.5
2024-01-01T00:20:00Z,8.1,1350.0
";

const STATUS: &str = "\
timestamp,alarm_code,kind
2024-01-01T00:03:10Z,C01,A
2024-01-01T00:17:45Z,C01,D
2024-01-01T00:18:00Z,C01,D
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let manifest = Manifest {
        parameters: vec!["wind_speed".into(), "active_power".into()],
        alarms: vec!["C01".into(), "N01".into()],
        critical_alarms: vec!["C01".into()],
        turbines: vec!["WT01".into()],
    };
    let dir = tempfile::tempdir()?;
    let store = TurbineStore::create(dir.path().join("store"), manifest.clone())?;

    let ops = parse_operational_csv(OPERATIONAL.as_bytes(), "WT01", &manifest)?;
    println!("operational appended: {}", store.append("WT01", &ops)?);

    let events = parse_status_csv(STATUS.as_bytes(), "WT01", &manifest)?;
    match store.append("WT01", &events) {
        Ok(_) => println!("status appended"),
        Err(e) => println!("status rejected as a batch: {e}"),
    }
    let o = store.append_skip_invalid("WT01", &events)?;
    println!("with skip-invalid: appended {}, skipped {}", o.appended, o.rejected.len());

    let reopened = TurbineStore::open(dir.path().join("store"))?;
    let back = reopened.scan_operational("WT01", TimeRange::all())?;
    println!("reopened store has {} operational rows, last at {}", back.len(), back[back.len() - 1].timestamp);
    Ok(())
}
