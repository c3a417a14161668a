pub mod framing;
pub mod fsutil;
pub mod ingest;
pub mod time;
pub mod features;
pub mod patterns;
pub mod dataset;
pub mod forest;
pub mod metrics;
pub mod broker;
pub mod agent;
pub mod trainer;
pub mod synth;
pub mod cli;
