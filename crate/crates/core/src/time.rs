//! UTC instants at second resolution and the 10-minute slot grid.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Length of one SCADA reporting slot in seconds.
pub const SLOT_SECONDS: i64 = 600;

/// Seconds since the Unix epoch, UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn from_secs(secs: i64) -> Self {
        Timestamp(secs)
    }

    pub fn secs(self) -> i64 {
        self.0
    }

    pub fn is_slot_aligned(self) -> bool {
        self.0.rem_euclid(SLOT_SECONDS) == 0
    }

    /// Start of the slot containing this instant.
    pub fn slot_floor(self) -> Timestamp {
        Timestamp(self.0 - self.0.rem_euclid(SLOT_SECONDS))
    }

    pub fn add_secs(self, secs: i64) -> Timestamp {
        Timestamp(self.0 + secs)
    }

    pub fn add_minutes(self, minutes: i64) -> Timestamp {
        Timestamp(self.0 + minutes * 60)
    }

    pub fn add_slots(self, slots: i64) -> Timestamp {
        Timestamp(self.0 + slots * SLOT_SECONDS)
    }

    pub fn now() -> Timestamp {
        Timestamp(Utc::now().timestamp())
    }

    pub fn to_rfc3339(self) -> String {
        match DateTime::<Utc>::from_timestamp(self.0, 0) {
            Some(dt) => dt.to_rfc3339_opts(SecondsFormat::Secs, true),
            None => format!("@{}", self.0),
        }
    }

    pub fn parse_rfc3339(s: &str) -> Result<Timestamp, TimestampParseError> {
        let dt = DateTime::parse_from_rfc3339(s.trim())
            .map_err(|e| TimestampParseError(format!("{s:?}: {e}")))?;
        Ok(Timestamp(dt.with_timezone(&Utc).timestamp()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid RFC-3339 timestamp {0}")]
pub struct TimestampParseError(pub String);

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rfc3339())
    }
}

impl FromStr for Timestamp {
    type Err = TimestampParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Timestamp::parse_rfc3339(s)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_rfc3339())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Timestamp::parse_rfc3339(&s).map_err(serde::de::Error::custom)
    }
}

/// Half-open interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl TimeRange {
    pub fn new(start: Timestamp, end: Timestamp) -> Self {
        TimeRange { start, end }
    }

    /// Everything representable.
    pub fn all() -> Self {
        TimeRange {
            start: Timestamp(i64::MIN),
            end: Timestamp(i64::MAX),
        }
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        self.start <= t && t < self.end
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// Slot starts covering the range: every aligned `s` with `[s, s+600)`
    /// intersecting `[start, end)`.
    pub fn slots(&self) -> impl Iterator<Item = Timestamp> {
        let first = self.start.slot_floor().0;
        let end = self.end.0;
        (0..)
            .map(move |k| Timestamp(first + k * SLOT_SECONDS))
            .take_while(move |s| s.0 < end)
    }

    pub fn slot_count(&self) -> usize {
        if self.is_empty() {
            return 0;
        }
        let first = self.start.slot_floor().0;
        ((self.end.0 - first + SLOT_SECONDS - 1) / SLOT_SECONDS) as usize
    }
}
