//! The `turbine-pm` command suite.
//!
//! Every option can come from a flag, an environment variable, or a table in
//! the file named by `--config` (`[train]`, `[serve]`, ...; keys are the long
//! flag names with `_` for `-`). Flags and environment variables win over the
//! file, and the file wins over built-in defaults.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 runtime failure. A failure
//! prints one JSON line on stderr:
//!
//! ```text
//! {"error":"data","command":"train","message":"..."}
//! ```

mod simulate;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::agent::AgentError;
use crate::broker::BrokerError;
use crate::dataset::{stratified_split, DatasetError, Horizon, HorizonDataset};
use crate::features::{select_features, FeatureError, FeatureMatrix, SelectionSettings};
use crate::forest::{load_model, ForestError};
use crate::fsutil::write_atomic;
use crate::ingest::{parse_operational_csv, parse_status_csv, IngestError, Manifest, TurbineStore};
use crate::metrics::{confusion_for, evaluate, evaluation_csv, fmt_rate, grid_search, value_range, variance, EvaluationRow, GridSettings, MetricsError};
use crate::patterns::{build_transactions, mine_patterns, patterns_report, MiningSettings, PatternError};
use crate::synth::{generate, SynthConfig, SynthError};
use crate::time::{TimeRange, Timestamp};
use crate::trainer::{self, TrainerError, TrainingPlan};

pub use simulate::{build_feed, run_in_process, run_remote, Feed, FeedSource, Pace, SimulationReport, SimulatorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Runtime,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Runtime => 3,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Data => "data",
            ErrorKind::Runtime => "runtime",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> CliError {
        CliError {
            kind: ErrorKind::Usage,
            message: m.into(),
        }
    }

    pub fn data(m: impl Into<String>) -> CliError {
        CliError {
            kind: ErrorKind::Data,
            message: m.into(),
        }
    }

    pub fn runtime(m: impl Into<String>) -> CliError {
        CliError {
            kind: ErrorKind::Runtime,
            message: m.into(),
        }
    }

    /// The single structured line printed on failure.
    pub fn line(&self, command: &str) -> String {
        serde_json::json!({ "error": self.kind.name(), "command": command, "message": self.message }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.kind.name(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io(e) if e.kind() == std::io::ErrorKind::NotFound => CliError::data(e.to_string()),
            IngestError::Io(e) => e.into(),
            e => CliError::data(e.to_string()),
        }
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::PlanInvalid(m) => CliError::usage(format!("invalid plan: {m}")),
            TrainerError::Store(e) => e.into(),
            TrainerError::Io(e) => e.into(),
            e @ TrainerError::Turbine { .. } => CliError::data(e.to_string()),
        }
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::MissingModel(_) | AgentError::BadModel { .. } | AgentError::NoTurbines => CliError::data(e.to_string()),
            e => CliError::runtime(e.to_string()),
        }
    }
}

impl From<BrokerError> for CliError {
    fn from(e: BrokerError) -> Self {
        match e {
            BrokerError::InvalidName(_) | BrokerError::UnknownTopic(_) => CliError::usage(e.to_string()),
            e => CliError::runtime(e.to_string()),
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::data(e.to_string())
            }
        }
    )*};
}

data_errors!(DatasetError, FeatureError, MetricsError, PatternError, ForestError);

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(m) => CliError::usage(m),
            SynthError::Store(e) => e.into(),
            SynthError::Io(e) => e.into(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "turbine-pm", version, about = "Wind turbine predictive maintenance")]
pub struct Cli {
    /// TOML file with one table per subcommand
    #[arg(long, global = true, env = "TPM_CONFIG")]
    pub config: Option<PathBuf>,
    /// -v info, -vv debug
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic fleet store with planted alarm patterns
    Synth(SynthArgs),
    /// Append operational and status CSV files to a store
    Ingest(IngestArgs),
    /// PCA and correlation feature selection for one turbine
    SelectFeatures(SelectArgs),
    /// Mine critical alarm patterns for one turbine
    MinePatterns(MineArgs),
    /// Train six horizon models per turbine from a plan file
    Train(TrainArgs),
    /// Re-evaluate trained bundles against their saved datasets
    Evaluate(EvaluateArgs),
    /// Accuracy and cost over a trees x depth grid
    GridSearch(GridArgs),
    /// Run broker, agent and HTTP endpoint
    Serve(ServeArgs),
    /// Publish synthetic or replayed telemetry
    Simulate(SimulateArgs),
    /// Agent health and counters
    Status(StatusArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Ingest(_) => "ingest",
            Command::SelectFeatures(_) => "select-features",
            Command::MinePatterns(_) => "mine-patterns",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::GridSearch(_) => "grid-search",
            Command::Serve(_) => "serve",
            Command::Simulate(_) => "simulate",
            Command::Status(_) => "status",
        }
    }

    fn config_key(&self) -> String {
        self.name().replace('-', "_")
    }
}

/// Fills unset options from the config file table. `bool` flags are OR-ed.
macro_rules! merge_fields {
    ($dst:ident, $src:ident; opt: $($o:ident),*; flag: $($b:ident),*) => {{
        $( if $dst.$o.is_none() { $dst.$o = $src.$o.take(); } )*
        $( $dst.$b |= $src.$b; )*
    }};
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthArgs {
    /// Store directory to create
    #[arg(long, env = "TPM_STORE")]
    pub store: Option<PathBuf>,
    #[arg(long, env = "TPM_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "TPM_TURBINES_COUNT")]
    pub turbines: Option<usize>,
    #[arg(long, env = "TPM_DAYS")]
    pub days: Option<u32>,
    /// First slot, RFC 3339
    #[arg(long, env = "TPM_START")]
    pub start: Option<String>,
    /// Signature amplitude over unit noise
    #[arg(long, env = "TPM_SNR")]
    pub snr: Option<f64>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestArgs {
    #[arg(long, env = "TPM_STORE")]
    pub store: Option<PathBuf>,
    /// Manifest TOML; required when the store does not exist yet
    #[arg(long, env = "TPM_MANIFEST")]
    pub manifest: Option<PathBuf>,
    #[arg(long, env = "TPM_TURBINE")]
    pub turbine: Option<String>,
    /// Operational CSV: timestamp column plus one column per parameter
    #[arg(long, env = "TPM_OPERATIONAL")]
    pub operational: Option<PathBuf>,
    /// Status CSV: timestamp, alarm code, A/D
    #[arg(long, env = "TPM_STATUS")]
    pub status: Option<PathBuf>,
    /// Count and skip invalid records instead of rejecting the file
    #[arg(long, env = "TPM_SKIP_INVALID")]
    pub skip_invalid: bool,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectArgs {
    #[arg(long, env = "TPM_STORE")]
    pub store: Option<PathBuf>,
    #[arg(long, env = "TPM_TURBINE")]
    pub turbine: Option<String>,
    #[arg(long, env = "TPM_START")]
    pub start: Option<String>,
    #[arg(long, env = "TPM_END")]
    pub end: Option<String>,
    #[arg(long, env = "TPM_VARIANCE_THRESHOLD")]
    pub variance_threshold: Option<f64>,
    #[arg(long, env = "TPM_CORRELATION_THRESHOLD")]
    pub correlation_threshold: Option<f64>,
    /// Directory for selection.txt and features.txt
    #[arg(long, env = "TPM_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MineArgs {
    #[arg(long, env = "TPM_STORE")]
    pub store: Option<PathBuf>,
    #[arg(long, env = "TPM_TURBINE")]
    pub turbine: Option<String>,
    #[arg(long, env = "TPM_START")]
    pub start: Option<String>,
    #[arg(long, env = "TPM_END")]
    pub end: Option<String>,
    #[arg(long, env = "TPM_MIN_SUPPORT")]
    pub min_support: Option<f64>,
    #[arg(long, env = "TPM_MAX_PATTERNS")]
    pub max_patterns: Option<usize>,
    /// Write the report here instead of stdout
    #[arg(long, env = "TPM_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Plan TOML
    #[arg(long, env = "TPM_PLAN")]
    pub plan: Option<PathBuf>,
    #[arg(long, env = "TPM_STORE")]
    pub store: Option<PathBuf>,
    #[arg(long, env = "TPM_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "TPM_SEED")]
    pub seed: Option<u64>,
    /// Comma-separated turbine ids
    #[arg(long, env = "TPM_TURBINES", value_delimiter = ',')]
    pub turbines: Option<Vec<String>>,
    #[arg(long, env = "TPM_TREES")]
    pub trees: Option<usize>,
    #[arg(long, env = "TPM_DEPTH")]
    pub depth: Option<usize>,
    #[arg(long, env = "TPM_PARALLELISM")]
    pub parallelism: Option<usize>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateArgs {
    /// Output directory of a training run
    #[arg(long, env = "TPM_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "TPM_TURBINES", value_delimiter = ',')]
    pub turbines: Option<Vec<String>>,
    /// Evaluate on every dataset row, not only the held-out part
    #[arg(long)]
    pub all_rows: bool,
    /// CSV destination; stdout when absent
    #[arg(long, env = "TPM_CSV")]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridArgs {
    /// Plan TOML supplying store and feature/mining settings
    #[arg(long, env = "TPM_PLAN")]
    pub plan: Option<PathBuf>,
    #[arg(long, env = "TPM_STORE")]
    pub store: Option<PathBuf>,
    #[arg(long, env = "TPM_TURBINE")]
    pub turbine: Option<String>,
    /// Lead in minutes
    #[arg(long, env = "TPM_HORIZON")]
    pub horizon: Option<u32>,
    /// `start..end:step` (inclusive) or a comma list
    #[arg(long, env = "TPM_GRID_TREES")]
    pub trees: Option<String>,
    #[arg(long, env = "TPM_GRID_DEPTH")]
    pub depth: Option<String>,
    #[arg(long, env = "TPM_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "TPM_TIMING_REPEATS")]
    pub repeats: Option<usize>,
    /// CSV destination; stdout when absent
    #[arg(long, env = "TPM_CSV")]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeArgs {
    /// Store or manifest giving the payload column order
    #[arg(long, env = "TPM_STORE")]
    pub store: Option<PathBuf>,
    #[arg(long, env = "TPM_MANIFEST")]
    pub manifest: Option<PathBuf>,
    #[arg(long, env = "TPM_MODELS")]
    pub models: Option<PathBuf>,
    #[arg(long, env = "TPM_BROKER")]
    pub broker: Option<PathBuf>,
    /// Directory for notifications.jsonl and dead_letters.log
    #[arg(long, env = "TPM_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "TPM_LISTEN")]
    pub listen: Option<String>,
    #[arg(long, env = "TPM_TURBINES", value_delimiter = ',')]
    pub turbines: Option<Vec<String>>,
    /// Stop after this many seconds; runs until killed otherwise
    #[arg(long, env = "TPM_DURATION")]
    pub duration: Option<f64>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateArgs {
    /// Replay this store; synthesize when absent
    #[arg(long, env = "TPM_REPLAY_STORE")]
    pub replay: Option<PathBuf>,
    #[arg(long, env = "TPM_START")]
    pub start: Option<String>,
    #[arg(long, env = "TPM_DAYS")]
    pub days: Option<u32>,
    #[arg(long, env = "TPM_TURBINES_COUNT")]
    pub turbines: Option<usize>,
    #[arg(long, env = "TPM_SEED")]
    pub seed: Option<u64>,
    /// `max`, or real milliseconds per simulated 10-minute step
    #[arg(long, env = "TPM_SPEEDUP")]
    pub speedup: Option<String>,
    /// Publish to a running `serve` instead of an in-process agent
    #[arg(long, env = "TPM_ENDPOINT")]
    pub endpoint: Option<String>,
    #[arg(long, env = "TPM_BROKER")]
    pub broker: Option<PathBuf>,
    #[arg(long, env = "TPM_MODELS")]
    pub models: Option<PathBuf>,
    #[arg(long, env = "TPM_OUT")]
    pub out: Option<PathBuf>,
    /// Crash the consumer once right after it writes notifications for message k
    #[arg(long, env = "TPM_KILL_AGENT_AT")]
    pub kill_agent_at: Option<u64>,
    /// Make the broker unavailable for this many ms ...
    #[arg(long, env = "TPM_PAUSE_BROKER_MS")]
    pub pause_broker_ms: Option<u64>,
    /// ... after this many messages were published
    #[arg(long, env = "TPM_PAUSE_AT")]
    pub pause_at: Option<u64>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatusArgs {
    /// Query a running `serve`
    #[arg(long, env = "TPM_ENDPOINT")]
    pub endpoint: Option<String>,
    /// Offline: agent output directory
    #[arg(long, env = "TPM_OUT")]
    pub out: Option<PathBuf>,
    /// Offline: broker directory, for lag
    #[arg(long, env = "TPM_BROKER")]
    pub broker: Option<PathBuf>,
}

impl Command {
    fn merge(&mut self, table: toml::Value) -> CliResult {
        let name = self.name();
        let bad = |e: toml::de::Error| CliError::usage(format!("config [{name}]: {e}"));
        match self {
            Command::Synth(a) => {
                let mut f: SynthArgs = table.try_into().map_err(bad)?;
                merge_fields!(a, f; opt: store, seed, turbines, days, start, snr; flag:);
            }
            Command::Ingest(a) => {
                let mut f: IngestArgs = table.try_into().map_err(bad)?;
                merge_fields!(a, f; opt: store, manifest, turbine, operational, status; flag: skip_invalid);
            }
            Command::SelectFeatures(a) => {
                let mut f: SelectArgs = table.try_into().map_err(bad)?;
                merge_fields!(a, f; opt: store, turbine, start, end, variance_threshold, correlation_threshold, out; flag:);
            }
            Command::MinePatterns(a) => {
                let mut f: MineArgs = table.try_into().map_err(bad)?;
                merge_fields!(a, f; opt: store, turbine, start, end, min_support, max_patterns, out; flag:);
            }
            Command::Train(a) => {
                let mut f: TrainArgs = table.try_into().map_err(bad)?;
                merge_fields!(a, f; opt: plan, store, out, seed, turbines, trees, depth, parallelism; flag:);
            }
            Command::Evaluate(a) => {
                let mut f: EvaluateArgs = table.try_into().map_err(bad)?;
                merge_fields!(a, f; opt: out, turbines, csv; flag: all_rows);
            }
            Command::GridSearch(a) => {
                let mut f: GridArgs = table.try_into().map_err(bad)?;
                merge_fields!(a, f; opt: plan, store, turbine, horizon, trees, depth, seed, repeats, csv; flag:);
            }
            Command::Serve(a) => {
                let mut f: ServeArgs = table.try_into().map_err(bad)?;
                merge_fields!(a, f; opt: store, manifest, models, broker, out, listen, turbines, duration; flag:);
            }
            Command::Simulate(a) => {
                let mut f: SimulateArgs = table.try_into().map_err(bad)?;
                merge_fields!(a, f; opt: replay, start, days, turbines, seed, speedup, endpoint, broker, models, out,
                    kill_agent_at, pause_broker_ms, pause_at; flag:);
            }
            Command::Status(a) => {
                let mut f: StatusArgs = table.try_into().map_err(bad)?;
                merge_fields!(a, f; opt: endpoint, out, broker; flag:);
            }
        }
        Ok(())
    }
}

fn load_config(cli: &mut Cli) -> CliResult {
    let Some(path) = &cli.config else {
        return Ok(());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
    let mut doc: toml::Table = toml::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
    if let Some(t) = doc.remove(&cli.command.config_key()) {
        cli.command.merge(t)?;
    }
    Ok(())
}

fn required<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::usage(format!("--{flag} is required")))
}

fn parse_time(s: Option<&str>, flag: &str) -> CliResult<Option<Timestamp>> {
    s.map(|s| Timestamp::parse_rfc3339(s).map_err(|e| CliError::usage(format!("--{flag}: {e}"))))
        .transpose()
}

fn range_of(start: Option<&str>, end: Option<&str>) -> CliResult<TimeRange> {
    let s = parse_time(start, "start")?.unwrap_or(TimeRange::all().start);
    let e = parse_time(end, "end")?.unwrap_or(TimeRange::all().end);
    if e <= s {
        return Err(CliError::usage("--end must be after --start"));
    }
    Ok(TimeRange::new(s, e))
}

/// Parses `a..b:s` (inclusive, step `s`, default 1), `a..b`, or `x,y,z`.
pub fn parse_values(spec: &str) -> Result<Vec<usize>, String> {
    let spec = spec.trim();
    let num = |s: &str| s.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
    let values = if let Some((a, rest)) = spec.split_once("..") {
        let (b, step) = match rest.split_once(':') {
            Some((b, s)) => (b, num(s)?),
            None => (rest, 1),
        };
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if step == 0 || b < a {
            return Err(format!("bad range {spec:?}"));
        }
        value_range(a, b, step)
    } else {
        spec.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    if values.is_empty() || values.contains(&0) {
        return Err(format!("{spec:?} must list positive values"));
    }
    Ok(values)
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_millis()
        .try_init();
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == K::DisplayHelpOnMissingArgumentOrSubcommand { 1 } else { 0 };
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first).line("turbine-pm"));
            return 1;
        }
    };
    init_logging(cli.verbose);
    let name = cli.command.name();
    let r = load_config(&mut cli).and_then(|_| execute(cli.command));
    match r {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line(name));
            e.kind.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> CliResult {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::SelectFeatures(a) => cmd_select(a),
        Command::MinePatterns(a) => cmd_mine(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::GridSearch(a) => cmd_grid(a),
        Command::Serve(a) => simulate::cmd_serve(a),
        Command::Simulate(a) => simulate::cmd_simulate(a),
        Command::Status(a) => simulate::cmd_status(a),
    }
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let store = required(a.store, "store")?;
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        seed: a.seed.unwrap_or(d.seed),
        turbines: a.turbines.unwrap_or(d.turbines),
        days: a.days.unwrap_or(d.days),
        start: parse_time(a.start.as_deref(), "start")?.unwrap_or(d.start),
        snr: a.snr.unwrap_or(d.snr),
        ..d
    };
    let fleet = generate(&cfg)?;
    fleet.write_store(&store)?;
    let rows: usize = fleet.turbines.iter().map(|t| t.operational.len()).sum();
    let events: usize = fleet.turbines.iter().map(|t| t.status.len()).sum();
    println!(
        "wrote {} turbines, {rows} operational rows, {events} status events to {}",
        fleet.turbines.len(),
        store.display()
    );
    Ok(())
}

fn cmd_ingest(a: IngestArgs) -> CliResult {
    let root = required(a.store, "store")?;
    let turbine = required(a.turbine, "turbine")?;
    if a.operational.is_none() && a.status.is_none() {
        return Err(CliError::usage("nothing to ingest: pass --operational and/or --status"));
    }
    let store = match &a.manifest {
        Some(m) => TurbineStore::open_or_create(&root, Manifest::load(m)?)?,
        None => TurbineStore::open(&root)?,
    };
    let manifest = store.manifest().clone();
    if let Some(p) = &a.operational {
        let recs = parse_operational_csv(fs::File::open(p)?, &turbine, &manifest)?;
        report_append("operational", &store, &turbine, &recs, a.skip_invalid)?;
    }
    if let Some(p) = &a.status {
        let recs = parse_status_csv(fs::File::open(p)?, &turbine, &manifest)?;
        report_append("status", &store, &turbine, &recs, a.skip_invalid)?;
    }
    Ok(())
}

fn report_append<R: crate::ingest::StoreRecord>(
    what: &str,
    store: &TurbineStore,
    turbine: &str,
    recs: &[R],
    skip_invalid: bool,
) -> CliResult {
    if skip_invalid {
        let o = store.append_skip_invalid(turbine, recs)?;
        for (t, e) in &o.rejected {
            log::warn!("{turbine} {what} {t}: skipped: {e}");
        }
        println!("{turbine} {what}: appended {}, skipped {}", o.appended, o.rejected.len());
    } else {
        let n = store.append(turbine, recs)?;
        println!("{turbine} {what}: appended {n}");
    }
    Ok(())
}

fn cmd_select(a: SelectArgs) -> CliResult {
    let store = TurbineStore::open(required(a.store, "store")?)?;
    let turbine = required(a.turbine, "turbine")?;
    let range = range_of(a.start.as_deref(), a.end.as_deref())?;
    let ops = store.scan_operational(&turbine, range)?;
    let rows: Vec<Vec<f64>> = ops.into_iter().map(|r| r.values).collect();
    let m = FeatureMatrix::from_rows(store.manifest().parameters.clone(), &rows)?;
    let d = SelectionSettings::default();
    let settings = SelectionSettings {
        variance_threshold: a.variance_threshold.unwrap_or(d.variance_threshold),
        correlation_threshold: a.correlation_threshold.unwrap_or(d.correlation_threshold),
    };
    let report = select_features(&m, settings)?;
    print!("{}", report.to_text());
    if let Some(dir) = a.out {
        write_atomic(&dir.join("selection.txt"), report.to_text().as_bytes())?;
        write_atomic(&dir.join("features.txt"), report.to_list().as_bytes())?;
    }
    Ok(())
}

fn cmd_mine(a: MineArgs) -> CliResult {
    let store = TurbineStore::open(required(a.store, "store")?)?;
    let turbine = required(a.turbine, "turbine")?;
    let mut range = range_of(a.start.as_deref(), a.end.as_deref())?;
    if a.start.is_none() || a.end.is_none() {
        let ops = store.scan_operational(&turbine, range)?;
        let (Some(first), Some(last)) = (ops.first(), ops.last()) else {
            return Err(CliError::data(format!("{turbine}: no operational records in range")));
        };
        if a.start.is_none() {
            range.start = first.timestamp;
        }
        if a.end.is_none() {
            range.end = last.timestamp.add_slots(1);
        }
    }
    let events = store.scan_status(&turbine, TimeRange::new(TimeRange::all().start, range.end))?;
    let d = MiningSettings::default();
    let settings = MiningSettings {
        min_support: a.min_support.unwrap_or(d.min_support),
        max_patterns: a.max_patterns.unwrap_or(d.max_patterns),
    };
    let tx = build_transactions(&turbine, &events, range);
    let patterns = mine_patterns(&tx, &store.manifest().critical_set(), settings)?;
    let text = patterns_report(&turbine, &patterns);
    match a.out {
        Some(p) => write_atomic(&p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn load_plan(plan: Option<&Path>, store: Option<PathBuf>, out: Option<PathBuf>) -> CliResult<TrainingPlan> {
    let mut p = match plan {
        Some(path) => TrainingPlan::load(path)?,
        None => {
            let store = store.clone().ok_or_else(|| CliError::usage("--plan or --store is required"))?;
            TrainingPlan::new(store, out.clone().unwrap_or_else(|| PathBuf::from("out")))
        }
    };
    if let Some(s) = store {
        p.store = s;
    }
    if let Some(o) = out {
        p.out_dir = o;
    }
    Ok(p)
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut plan = load_plan(a.plan.as_deref(), a.store, a.out)?;
    if let Some(s) = a.seed {
        plan.seed = s;
    }
    if let Some(t) = a.turbines {
        plan.turbines = t;
    }
    if let Some(n) = a.trees {
        plan.forest.n_trees = n;
    }
    if let Some(d) = a.depth {
        plan.forest.max_depth = d;
    }
    if let Some(p) = a.parallelism {
        plan.parallelism = p;
    }
    let report = trainer::run(&plan)?;
    print!("{}", report.summary_text());
    if report.completed() == 0 {
        return Err(CliError::data("no model was trained; see skip reasons above"));
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult {
    let out = required(a.out, "out")?;
    let models = out.join("models");
    let mut turbines: Vec<String> = match a.turbines {
        Some(t) => t,
        None => fs::read_dir(&models)
            .map_err(|e| CliError::data(format!("{}: {e}", models.display())))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect(),
    };
    turbines.sort();
    let mut rows = Vec::new();
    for t in &turbines {
        for h in Horizon::ALL {
            let path = crate::forest::model_path(&models, t, h);
            if !path.exists() {
                log::info!("{t} {h}: no bundle");
                continue;
            }
            let bundle = load_model(&path)?;
            let (ds, meta) = HorizonDataset::load(&out.join("datasets").join(t), &format!("h{}", h.minutes()))?;
            let test = if a.all_rows {
                ds
            } else {
                let seed = meta
                    .split_seed
                    .ok_or_else(|| CliError::data(format!("{t} {h}: dataset has no split seed")))?;
                let fraction = bundle
                    .metadata
                    .iter()
                    .find(|(k, _)| k == "train_fraction")
                    .and_then(|(_, v)| v.parse().ok())
                    .unwrap_or(2.0 / 3.0);
                stratified_split(&ds, fraction, seed)?.test
            };
            let report = evaluate(&confusion_for(&bundle.forest, &test)?)?;
            println!(
                "{t} t+{:<2} rows {:>6}  global {:.4}  sensitivity {}  specificity {}",
                h.minutes(),
                report.total,
                report.global_accuracy,
                fmt_rate(report.sensitivity),
                fmt_rate(report.specificity)
            );
            rows.push(EvaluationRow {
                turbine_id: t.clone(),
                horizon_minutes: h.minutes(),
                report,
            });
        }
    }
    if rows.is_empty() {
        return Err(CliError::data(format!("no bundles under {}", models.display())));
    }
    let csv = evaluation_csv(&rows);
    match a.csv {
        Some(p) => write_atomic(&p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_grid(a: GridArgs) -> CliResult {
    let plan = load_plan(a.plan.as_deref(), a.store, None)?;
    let store = TurbineStore::open(&plan.store)?;
    let turbine = match a.turbine {
        Some(t) => t,
        None => store
            .turbine_ids()
            .next()
            .map(str::to_string)
            .ok_or_else(|| CliError::data("store has no turbines"))?,
    };
    let h = Horizon::new(a.horizon.unwrap_or(10)).map_err(|e| CliError::usage(e.to_string()))?;
    let trees = parse_values(a.trees.as_deref().unwrap_or("5..100:5")).map_err(|e| CliError::usage(format!("--trees {e}")))?;
    let depths = parse_values(a.depth.as_deref().unwrap_or("5..30:5")).map_err(|e| CliError::usage(format!("--depth {e}")))?;
    let ds = trainer::build_dataset(&store, &plan, &turbine, h)?;
    let settings = GridSettings {
        seed: a.seed.unwrap_or(plan.seed),
        train_fraction: plan.train_fraction,
        timing_repeats: a.repeats.unwrap_or(GridSettings::default().timing_repeats),
        forest: plan.forest,
    };
    let grid = grid_search(&ds, &trees, &depths, settings)?;
    let csv = grid.to_csv();
    match a.csv {
        Some(p) => write_atomic(&p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    eprintln!(
        "{turbine} {h}: {} cells; accuracy variance across depths {:.3e}, across tree counts {:.3e}",
        grid.cells.len(),
        variance(&grid.accuracy_by_depth()),
        variance(&grid.accuracy_by_trees())
    );
    Ok(())
}
