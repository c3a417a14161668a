//! Publish, poll, commit and redelivery after a restart.

use turbine_pm::broker::Broker;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let broker = Broker::open(dir.path())?;
    broker.create_topic("WT01")?;
    for i in 0..5 {
        broker.publish("WT01", format!("row {i}").as_bytes())?;
    }
    let batch = broker.poll("agent", "WT01", 3)?;
    println!("polled offsets {:?}", batch.iter().map(|m| m.offset).collect::<Vec<_>>());
    broker.commit("agent", "WT01", batch[batch.len() - 1].offset + 1)?;
    let more = broker.poll("agent", "WT01", 10)?;
    println!("polled again, uncommitted: {:?}", more.iter().map(|m| m.offset).collect::<Vec<_>>());
    drop(broker);

    // nothing after the commit was acknowledged, so it comes back
    let broker = Broker::open(dir.path())?;
    let again = broker.poll("agent", "WT01", 10)?;
    println!("after reopen: committed {}, redelivered {:?}", broker.committed("agent", "WT01")?, again.iter().map(|m| m.offset).collect::<Vec<_>>());
    println!("lag {}", broker.lag("agent", "WT01")?);
    Ok(())
}
