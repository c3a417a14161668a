//! SCADA ingestion: CSV parsing, validation, and the per-turbine store.
//!
//! Every turbine owns two append-only logs, one for 10-minute operational
//! means and one for alarm activations/deactivations. The store root carries
//! a manifest declaring the parameter list, the alarm dictionary, the
//! critical-alarm subset, and the turbine roster.

mod csv_format;
mod manifest;
mod store;

use std::io;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::time::Timestamp;

pub use csv_format::{
    format_operational_row, parse_operational_csv, parse_operational_row, parse_status_csv,
    write_operational_csv, write_status_csv,
};
pub use manifest::Manifest;
pub use store::{AppendOutcome, LogKind, Scan, StoreRecord, TurbineStore};

/// One 10-minute mean-value row for one turbine, values in manifest order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationalRecord {
    pub turbine_id: String,
    pub timestamp: Timestamp,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlarmKind {
    Activation,
    Deactivation,
}

impl AlarmKind {
    pub fn code(self) -> &'static str {
        match self {
            AlarmKind::Activation => "A",
            AlarmKind::Deactivation => "D",
        }
    }

    pub fn from_code(s: &str) -> Option<AlarmKind> {
        match s {
            "A" => Some(AlarmKind::Activation),
            "D" => Some(AlarmKind::Deactivation),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusEvent {
    pub turbine_id: String,
    pub timestamp: Timestamp,
    pub alarm_code: String,
    pub kind: AlarmKind,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("line {line}: timestamp {timestamp} is not on a 10-minute boundary")]
    MisalignedTimestamp { line: usize, timestamp: Timestamp },
    #[error("line {line}: non-finite value in column {column}")]
    NonFiniteValue { line: usize, column: String },
    #[error("line {line}: alarm code {code:?} is not in the alarm dictionary")]
    UnknownAlarmCode { line: usize, code: String },
    #[error("turbine {turbine}: record at {timestamp} is not after last stored {last}")]
    OutOfOrderAppend {
        turbine: String,
        timestamp: Timestamp,
        last: Timestamp,
    },
    #[error("unknown turbine {0:?}")]
    UnknownTurbine(String),
    #[error("record for turbine {found:?} appended to turbine {expected:?}")]
    TurbineMismatch { expected: String, found: String },
    #[error("turbine {turbine}: {kind:?} of {alarm} at {timestamp} breaks activation/deactivation alternation")]
    AlarmAlternationViolation {
        turbine: String,
        alarm: String,
        kind: AlarmKind,
        timestamp: Timestamp,
    },
    #[error("turbine {turbine}: operational record has {found} values, manifest declares {expected}")]
    ValueCount {
        turbine: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("store already exists at {0}")]
    StoreExists(PathBuf),
    #[error("corrupt store record in {0}")]
    CorruptRecord(PathBuf),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl IngestError {
    /// Rejections that `--skip-invalid` may downgrade to warnings.
    pub fn is_record_level(&self) -> bool {
        matches!(
            self,
            IngestError::MalformedRow { .. }
                | IngestError::MisalignedTimestamp { .. }
                | IngestError::NonFiniteValue { .. }
                | IngestError::UnknownAlarmCode { .. }
                | IngestError::OutOfOrderAppend { .. }
                | IngestError::TurbineMismatch { .. }
                | IngestError::AlarmAlternationViolation { .. }
                | IngestError::ValueCount { .. }
        )
    }
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;
