use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::framing::{Decoder, Encoder, FrameLog, FrameReader};
use crate::time::{TimeRange, Timestamp};

use super::{AlarmKind, IngestError, Manifest, OperationalRecord, Result, StatusEvent};

const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LogKind {
    Operational,
    Status,
}

impl LogKind {
    pub fn file_name(self) -> &'static str {
        match self {
            LogKind::Operational => "operational.log",
            LogKind::Status => "status.log",
        }
    }
}

/// Per-log validation state, rebuilt from disk on open.
#[derive(Debug, Default, Clone)]
pub struct LogState {
    last: Option<Timestamp>,
    active: BTreeSet<String>,
}

/// A record kind that can live in a turbine log.
pub trait StoreRecord: Sized + Clone + Send + 'static {
    const KIND: LogKind;

    fn turbine_id(&self) -> &str;
    fn timestamp(&self) -> Timestamp;
    fn encode(&self) -> Vec<u8>;
    fn decode(turbine_id: &str, payload: &[u8]) -> Option<Self>;
    /// Checks the record against the log state and advances it on success.
    fn validate(&self, state: &mut LogState, manifest: &Manifest) -> Result<()>;
}

impl StoreRecord for OperationalRecord {
    const KIND: LogKind = LogKind::Operational;

    fn turbine_id(&self) -> &str {
        &self.turbine_id
    }

    fn timestamp(&self) -> Timestamp {
        self.timestamp
    }

    fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.i64(self.timestamp.0).u32(self.values.len() as u32);
        for v in &self.values {
            e.f64(*v);
        }
        e.finish()
    }

    fn decode(turbine_id: &str, payload: &[u8]) -> Option<Self> {
        let mut d = Decoder::new(payload);
        let timestamp = Timestamp(d.i64().ok()?);
        let n = d.len_prefix(8).ok()?;
        let values = (0..n).map(|_| d.f64()).collect::<Result<Vec<_>, _>>().ok()?;
        Some(OperationalRecord {
            turbine_id: turbine_id.to_string(),
            timestamp,
            values,
        })
    }

    fn validate(&self, state: &mut LogState, manifest: &Manifest) -> Result<()> {
        if self.values.len() != manifest.parameters.len() {
            return Err(IngestError::ValueCount {
                turbine: self.turbine_id.clone(),
                expected: manifest.parameters.len(),
                found: self.values.len(),
            });
        }
        if !self.timestamp.is_slot_aligned() {
            return Err(IngestError::MisalignedTimestamp {
                line: 0,
                timestamp: self.timestamp,
            });
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(IngestError::NonFiniteValue {
                line: 0,
                column: manifest.parameters[i].clone(),
            });
        }
        if let Some(last) = state.last {
            if self.timestamp <= last {
                return Err(IngestError::OutOfOrderAppend {
                    turbine: self.turbine_id.clone(),
                    timestamp: self.timestamp,
                    last,
                });
            }
        }
        state.last = Some(self.timestamp);
        Ok(())
    }
}

impl StoreRecord for StatusEvent {
    const KIND: LogKind = LogKind::Status;

    fn turbine_id(&self) -> &str {
        &self.turbine_id
    }

    fn timestamp(&self) -> Timestamp {
        self.timestamp
    }

    fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.i64(self.timestamp.0)
            .u8(match self.kind {
                AlarmKind::Activation => 0,
                AlarmKind::Deactivation => 1,
            })
            .str(&self.alarm_code);
        e.finish()
    }

    fn decode(turbine_id: &str, payload: &[u8]) -> Option<Self> {
        let mut d = Decoder::new(payload);
        let timestamp = Timestamp(d.i64().ok()?);
        let kind = match d.u8().ok()? {
            0 => AlarmKind::Activation,
            1 => AlarmKind::Deactivation,
            _ => return None,
        };
        let alarm_code = d.str().ok()?;
        Some(StatusEvent {
            turbine_id: turbine_id.to_string(),
            timestamp,
            alarm_code,
            kind,
        })
    }

    fn validate(&self, state: &mut LogState, manifest: &Manifest) -> Result<()> {
        if !manifest.alarms.iter().any(|a| *a == self.alarm_code) {
            return Err(IngestError::UnknownAlarmCode {
                line: 0,
                code: self.alarm_code.clone(),
            });
        }
        // Co-activated alarms share a second, so status events only need to
        // be non-decreasing.
        if let Some(last) = state.last {
            if self.timestamp < last {
                return Err(IngestError::OutOfOrderAppend {
                    turbine: self.turbine_id.clone(),
                    timestamp: self.timestamp,
                    last,
                });
            }
        }
        let was_active = state.active.contains(&self.alarm_code);
        let ok = match self.kind {
            AlarmKind::Activation => !was_active,
            AlarmKind::Deactivation => was_active,
        };
        if !ok {
            return Err(IngestError::AlarmAlternationViolation {
                turbine: self.turbine_id.clone(),
                alarm: self.alarm_code.clone(),
                kind: self.kind,
                timestamp: self.timestamp,
            });
        }
        match self.kind {
            AlarmKind::Activation => state.active.insert(self.alarm_code.clone()),
            AlarmKind::Deactivation => state.active.remove(&self.alarm_code),
        };
        state.last = Some(self.timestamp);
        Ok(())
    }
}

#[derive(Debug)]
struct TurbineLogs {
    operational: FrameLog,
    operational_state: LogState,
    status: FrameLog,
    status_state: LogState,
}

impl TurbineLogs {
    fn log_mut(&mut self, kind: LogKind) -> (&mut FrameLog, &mut LogState) {
        match kind {
            LogKind::Operational => (&mut self.operational, &mut self.operational_state),
            LogKind::Status => (&mut self.status, &mut self.status_state),
        }
    }
}

/// Result of a lenient append.
#[derive(Debug, Default)]
pub struct AppendOutcome {
    pub appended: usize,
    pub rejected: Vec<(Timestamp, IngestError)>,
}

/// Root directory holding `manifest.toml` and one directory per turbine with
/// `operational.log` and `status.log`.
///
/// Appends to one turbine are serialized behind that turbine's lock; other
/// turbines proceed independently. Scans read a snapshot bounded by the log
/// length at scan time and can be moved to other threads.
#[derive(Debug)]
pub struct TurbineStore {
    root: PathBuf,
    manifest: Manifest,
    turbines: BTreeMap<String, Mutex<TurbineLogs>>,
}

impl TurbineStore {
    /// Initializes a new store. Fails if a manifest already exists at `root`.
    pub fn create(root: impl AsRef<Path>, manifest: Manifest) -> Result<TurbineStore> {
        let root = root.as_ref();
        manifest.validate()?;
        let manifest_path = root.join(MANIFEST_FILE);
        if manifest_path.exists() {
            return Err(IngestError::StoreExists(root.to_path_buf()));
        }
        fs::create_dir_all(root)?;
        manifest.save(&manifest_path)?;
        TurbineStore::open(root)
    }

    /// Opens an existing store and recovers every log, truncating torn tails.
    pub fn open(root: impl AsRef<Path>) -> Result<TurbineStore> {
        let root = root.as_ref().to_path_buf();
        let manifest = Manifest::load(root.join(MANIFEST_FILE))?;
        let mut turbines = BTreeMap::new();
        for id in &manifest.turbines {
            let dir = root.join(id);
            fs::create_dir_all(&dir)?;
            let (operational, op_records) = FrameLog::open(dir.join(LogKind::Operational.file_name()))?;
            let (status, st_records) = FrameLog::open(dir.join(LogKind::Status.file_name()))?;
            let operational_state = replay::<OperationalRecord>(id, &op_records, &manifest, operational.path())?;
            let status_state = replay::<StatusEvent>(id, &st_records, &manifest, status.path())?;
            turbines.insert(
                id.clone(),
                Mutex::new(TurbineLogs {
                    operational,
                    operational_state,
                    status,
                    status_state,
                }),
            );
        }
        Ok(TurbineStore {
            root,
            manifest,
            turbines,
        })
    }

    /// Opens the store at `root`, creating it with `manifest` when absent.
    pub fn open_or_create(root: impl AsRef<Path>, manifest: Manifest) -> Result<TurbineStore> {
        if root.as_ref().join(MANIFEST_FILE).exists() {
            TurbineStore::open(root)
        } else {
            TurbineStore::create(root, manifest)
        }
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn turbine_ids(&self) -> impl Iterator<Item = &str> {
        self.turbines.keys().map(String::as_str)
    }

    fn logs(&self, turbine_id: &str) -> Result<&Mutex<TurbineLogs>> {
        self.turbines
            .get(turbine_id)
            .ok_or_else(|| IngestError::UnknownTurbine(turbine_id.to_string()))
    }

    /// Appends a batch atomically: every record is validated first and
    /// nothing is written if any record is rejected. Returns the count
    /// appended, which is durable once this returns.
    pub fn append<R: StoreRecord>(&self, turbine_id: &str, records: &[R]) -> Result<usize> {
        let mut guard = self.logs(turbine_id)?.lock().unwrap();
        let (log, state) = guard.log_mut(R::KIND);
        let mut next = state.clone();
        for r in records {
            check_turbine(turbine_id, r)?;
            r.validate(&mut next, &self.manifest)?;
        }
        let payloads: Vec<Vec<u8>> = records.iter().map(StoreRecord::encode).collect();
        log.append_many(payloads.iter().map(Vec::as_slice))?;
        *state = next;
        Ok(records.len())
    }

    /// Appends every valid record and reports the rejected ones instead of
    /// failing the batch.
    pub fn append_skip_invalid<R: StoreRecord>(
        &self,
        turbine_id: &str,
        records: &[R],
    ) -> Result<AppendOutcome> {
        let mut guard = self.logs(turbine_id)?.lock().unwrap();
        let (log, state) = guard.log_mut(R::KIND);
        let mut next = state.clone();
        let mut outcome = AppendOutcome::default();
        let mut payloads = Vec::new();
        for r in records {
            let mut trial = next.clone();
            match check_turbine(turbine_id, r).and_then(|_| r.validate(&mut trial, &self.manifest)) {
                Ok(()) => {
                    next = trial;
                    payloads.push(r.encode());
                }
                Err(e) if e.is_record_level() => outcome.rejected.push((r.timestamp(), e)),
                Err(e) => return Err(e),
            }
        }
        log.append_many(payloads.iter().map(Vec::as_slice))?;
        *state = next;
        outcome.appended = payloads.len();
        Ok(outcome)
    }

    /// Records with timestamp in `[range.start, range.end)`, ascending.
    pub fn scan<R: StoreRecord>(&self, turbine_id: &str, range: TimeRange) -> Result<Scan<R>> {
        let guard = self.logs(turbine_id)?.lock().unwrap();
        let log = match R::KIND {
            LogKind::Operational => &guard.operational,
            LogKind::Status => &guard.status,
        };
        let reader = FrameReader::open(log.path(), 0, log.len())?;
        Ok(Scan {
            reader,
            path: log.path().to_path_buf(),
            turbine_id: turbine_id.to_string(),
            range,
            done: false,
            _kind: PhantomData,
        })
    }

    pub fn scan_operational(&self, turbine_id: &str, range: TimeRange) -> Result<Vec<OperationalRecord>> {
        self.scan::<OperationalRecord>(turbine_id, range)?.collect()
    }

    pub fn scan_status(&self, turbine_id: &str, range: TimeRange) -> Result<Vec<StatusEvent>> {
        self.scan::<StatusEvent>(turbine_id, range)?.collect()
    }

    /// Timestamp of the last stored record of a log, if any.
    pub fn last_timestamp(&self, turbine_id: &str, kind: LogKind) -> Result<Option<Timestamp>> {
        let guard = self.logs(turbine_id)?.lock().unwrap();
        Ok(match kind {
            LogKind::Operational => guard.operational_state.last,
            LogKind::Status => guard.status_state.last,
        })
    }

    /// Alarms currently active (activated and not yet deactivated).
    pub fn active_alarms(&self, turbine_id: &str) -> Result<BTreeSet<String>> {
        Ok(self.logs(turbine_id)?.lock().unwrap().status_state.active.clone())
    }
}

fn check_turbine<R: StoreRecord>(turbine_id: &str, r: &R) -> Result<()> {
    if r.turbine_id() != turbine_id {
        return Err(IngestError::TurbineMismatch {
            expected: turbine_id.to_string(),
            found: r.turbine_id().to_string(),
        });
    }
    Ok(())
}

fn replay<R: StoreRecord>(
    turbine_id: &str,
    payloads: &[Vec<u8>],
    manifest: &Manifest,
    path: &Path,
) -> Result<LogState> {
    let mut state = LogState::default();
    for p in payloads {
        let r = R::decode(turbine_id, p).ok_or_else(|| IngestError::CorruptRecord(path.to_path_buf()))?;
        r.validate(&mut state, manifest)?;
    }
    Ok(state)
}

/// Ascending iterator over a snapshot of one turbine log.
#[derive(Debug)]
pub struct Scan<R> {
    reader: FrameReader,
    path: PathBuf,
    turbine_id: String,
    range: TimeRange,
    done: bool,
    _kind: PhantomData<fn() -> R>,
}

impl<R: StoreRecord> Iterator for Scan<R> {
    type Item = Result<R>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            let payload = match self.reader.next()? {
                Ok(p) => p,
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
            };
            let Some(record) = R::decode(&self.turbine_id, &payload) else {
                self.done = true;
                return Some(Err(IngestError::CorruptRecord(self.path.clone())));
            };
            let t = record.timestamp();
            if t >= self.range.end {
                self.done = true;
                return None;
            }
            if t >= self.range.start {
                return Some(Ok(record));
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> Manifest {
        Manifest {
            parameters: vec!["a".into(), "b".into()],
            alarms: vec!["X".into(), "Y".into()],
            critical_alarms: vec!["X".into()],
            turbines: vec!["T1".into(), "T2".into()],
        }
    }

    fn op(t: i64, a: f64) -> OperationalRecord {
        OperationalRecord {
            turbine_id: "T1".into(),
            timestamp: Timestamp(1_420_070_400 + t * 600),
            values: vec![a, -a],
        }
    }

    fn ev(t: i64, code: &str, kind: AlarmKind) -> StatusEvent {
        StatusEvent {
            turbine_id: "T1".into(),
            timestamp: Timestamp(1_420_070_400 + t),
            alarm_code: code.into(),
            kind,
        }
    }

    #[test]
    fn one_day_of_operational_rows() {
        let dir = tempfile::tempdir().unwrap();
        let store = TurbineStore::create(dir.path(), manifest()).unwrap();
        let day: Vec<_> = (0..144).map(|i| op(i, i as f64)).collect();
        assert_eq!(store.append("T1", &day).unwrap(), 144);
        let back = store.scan_operational("T1", TimeRange::all()).unwrap();
        assert_eq!(back, day);
    }

    #[test]
    fn out_of_order_append_rejected_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let store = TurbineStore::create(dir.path(), manifest()).unwrap();
        store.append("T1", &[op(5, 1.0)]).unwrap();
        let err = store.append("T1", &[op(6, 0.0), op(4, 0.0)]).unwrap_err();
        assert!(matches!(err, IngestError::OutOfOrderAppend { .. }));
        // Equal timestamps are also out of order for operational logs.
        assert!(matches!(
            store.append("T1", &[op(5, 2.0)]),
            Err(IngestError::OutOfOrderAppend { .. })
        ));
        assert_eq!(store.scan_operational("T1", TimeRange::all()).unwrap().len(), 1);
    }

    #[test]
    fn alternation_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let store = TurbineStore::create(dir.path(), manifest()).unwrap();
        store.append("T1", &[ev(1, "X", AlarmKind::Activation)]).unwrap();
        assert!(matches!(
            store.append("T1", &[ev(2, "X", AlarmKind::Activation)]),
            Err(IngestError::AlarmAlternationViolation { .. })
        ));
        assert!(matches!(
            store.append("T1", &[ev(3, "Y", AlarmKind::Deactivation)]),
            Err(IngestError::AlarmAlternationViolation { .. })
        ));
        // Same-second co-activation is fine.
        store
            .append("T1", &[ev(4, "Y", AlarmKind::Activation), ev(4, "X", AlarmKind::Deactivation)])
            .unwrap();
        assert_eq!(store.active_alarms("T1").unwrap(), BTreeSet::from(["Y".to_string()]));
    }

    #[test]
    fn skip_invalid_counts_rejects() {
        let dir = tempfile::tempdir().unwrap();
        let store = TurbineStore::create(dir.path(), manifest()).unwrap();
        let batch = [
            ev(1, "X", AlarmKind::Activation),
            ev(2, "X", AlarmKind::Activation),
            ev(3, "X", AlarmKind::Deactivation),
        ];
        let out = store.append_skip_invalid("T1", &batch).unwrap();
        assert_eq!(out.appended, 2);
        assert_eq!(out.rejected.len(), 1);
    }

    #[test]
    fn unknown_turbine() {
        let dir = tempfile::tempdir().unwrap();
        let store = TurbineStore::create(dir.path(), manifest()).unwrap();
        assert!(matches!(store.append("T9", &[op(0, 0.0)]), Err(IngestError::UnknownTurbine(_))));
        assert!(matches!(
            store.scan::<OperationalRecord>("T9", TimeRange::all()),
            Err(IngestError::UnknownTurbine(_))
        ));
        let mut wrong = op(0, 0.0);
        wrong.turbine_id = "T2".into();
        assert!(matches!(store.append("T1", &[wrong]), Err(IngestError::TurbineMismatch { .. })));
    }

    #[test]
    fn scan_ranges() {
        let dir = tempfile::tempdir().unwrap();
        let store = TurbineStore::create(dir.path(), manifest()).unwrap();
        let recs: Vec<_> = (0..10).map(|i| op(i, i as f64)).collect();
        store.append("T1", &recs).unwrap();
        let r = TimeRange::new(recs[2].timestamp, recs[5].timestamp);
        assert_eq!(store.scan_operational("T1", r).unwrap(), recs[2..5].to_vec());
        let empty = TimeRange::new(recs[3].timestamp, recs[3].timestamp);
        assert!(store.scan_operational("T1", empty).unwrap().is_empty());
        assert!(store.scan_operational("T2", TimeRange::all()).unwrap().is_empty());
    }

    #[test]
    fn scan_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<_> = (0..20).map(|i| op(i, i as f64 * 0.5)).collect();
        let before = {
            let store = TurbineStore::create(dir.path(), manifest()).unwrap();
            store.append("T1", &recs[..12]).unwrap();
            store.append("T1", &recs[12..]).unwrap();
            store.scan_operational("T1", TimeRange::all()).unwrap()
        };
        let store = TurbineStore::open(dir.path()).unwrap();
        assert_eq!(store.scan_operational("T1", TimeRange::all()).unwrap(), before);
        // Ordering state is recovered too.
        assert!(store.append("T1", &[op(3, 0.0)]).is_err());
        store.append("T1", &[op(20, 0.0)]).unwrap();
    }

    #[test]
    fn scan_iterator_is_send() {
        fn assert_send<T: Send>(_: &T) {}
        let dir = tempfile::tempdir().unwrap();
        let store = TurbineStore::create(dir.path(), manifest()).unwrap();
        store.append("T1", &[op(0, 1.0)]).unwrap();
        let scan = store.scan::<OperationalRecord>("T1", TimeRange::all()).unwrap();
        assert_send(&scan);
        let n = std::thread::spawn(move || scan.count()).join().unwrap();
        assert_eq!(n, 1);
    }

    #[test]
    fn create_refuses_existing_store() {
        let dir = tempfile::tempdir().unwrap();
        TurbineStore::create(dir.path(), manifest()).unwrap();
        assert!(matches!(
            TurbineStore::create(dir.path(), manifest()),
            Err(IngestError::StoreExists(_))
        ));
    }
}
