//! CSV dialects.
//!
//! Operational: header `timestamp,<param>,...`, RFC-3339 UTC timestamps,
//! `.` decimal separator, LF line endings. Header columns may be any
//! permutation of the manifest parameters; values are reordered to manifest
//! order. Status: header `timestamp,alarm_code,kind` with `kind` in `{A, D}`.

use std::io::{Read, Write};

use crate::time::Timestamp;

use super::{AlarmKind, IngestError, Manifest, OperationalRecord, Result, StatusEvent};

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::None)
        .from_reader(input)
}

fn csv_err(e: csv::Error) -> IngestError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => IngestError::Io(io),
        other => IngestError::MalformedRow {
            line,
            reason: format!("{other:?}"),
        },
    }
}

fn parse_ts(line: usize, raw: &str) -> Result<Timestamp> {
    Timestamp::parse_rfc3339(raw).map_err(|e| IngestError::MalformedRow {
        line,
        reason: e.to_string(),
    })
}

/// Maps header position -> manifest index for the parameter columns.
fn operational_column_map(headers: &csv::StringRecord, manifest: &Manifest) -> Result<Vec<usize>> {
    let malformed = |reason: String| IngestError::MalformedRow { line: 1, reason };
    if headers.get(0) != Some("timestamp") {
        return Err(malformed("first header column must be `timestamp`".into()));
    }
    let mut map = Vec::with_capacity(headers.len() - 1);
    let mut seen = vec![false; manifest.parameters.len()];
    for name in headers.iter().skip(1) {
        let idx = manifest
            .parameter_index(name)
            .ok_or_else(|| malformed(format!("unknown parameter column {name:?}")))?;
        if std::mem::replace(&mut seen[idx], true) {
            return Err(malformed(format!("duplicate parameter column {name:?}")));
        }
        map.push(idx);
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(malformed(format!(
            "missing parameter column {:?}",
            manifest.parameters[missing]
        )));
    }
    Ok(map)
}

fn record_from_fields<'a>(
    line: usize,
    turbine_id: &str,
    fields: &[&'a str],
    column_map: &[usize],
    names: &[String],
) -> Result<OperationalRecord> {
    let expected = column_map.len() + 1;
    if fields.len() != expected {
        return Err(IngestError::MalformedRow {
            line,
            reason: format!("expected {expected} columns, found {}", fields.len()),
        });
    }
    let timestamp = parse_ts(line, fields[0])?;
    if !timestamp.is_slot_aligned() {
        return Err(IngestError::MisalignedTimestamp { line, timestamp });
    }
    let mut values = vec![0.0; column_map.len()];
    for (raw, &idx) in fields[1..].iter().zip(column_map) {
        let v: f64 = raw.trim().parse().map_err(|_| IngestError::MalformedRow {
            line,
            reason: format!("unparseable number {raw:?} in column {}", names[idx]),
        })?;
        if !v.is_finite() {
            return Err(IngestError::NonFiniteValue {
                line,
                column: names[idx].clone(),
            });
        }
        values[idx] = v;
    }
    Ok(OperationalRecord {
        turbine_id: turbine_id.to_string(),
        timestamp,
        values,
    })
}

pub fn parse_operational_csv<R: Read>(
    input: R,
    turbine_id: &str,
    manifest: &Manifest,
) -> Result<Vec<OperationalRecord>> {
    let mut rdr = reader(input);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let column_map = operational_column_map(&headers, manifest)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        out.push(record_from_fields(
            line,
            turbine_id,
            &row.iter().collect::<Vec<_>>(),
            &column_map,
            &manifest.parameters,
        )?);
    }
    Ok(out)
}

/// Parses one headerless operational row in manifest order, the broker
/// payload encoding.
pub fn parse_operational_row(
    row: &str,
    turbine_id: &str,
    manifest: &Manifest,
) -> Result<OperationalRecord> {
    let row = row.strip_suffix('\n').unwrap_or(row);
    let identity: Vec<usize> = (0..manifest.parameters.len()).collect();
    let fields: Vec<&str> = row.split(',').collect();
    record_from_fields(
        1,
        turbine_id,
        &fields,
        &identity,
        &manifest.parameters,
    )
}

/// Formats one record as a headerless CSV row (no trailing newline).
/// Floats use Rust's shortest round-trip representation.
pub fn format_operational_row(record: &OperationalRecord) -> String {
    let mut s = record.timestamp.to_rfc3339();
    for v in &record.values {
        s.push(',');
        s.push_str(&format!("{v:?}"));
    }
    s
}

pub fn write_operational_csv<W: Write>(
    mut out: W,
    manifest: &Manifest,
    records: &[OperationalRecord],
) -> std::io::Result<()> {
    write!(out, "timestamp")?;
    for p in &manifest.parameters {
        write!(out, ",{p}")?;
    }
    writeln!(out)?;
    for r in records {
        writeln!(out, "{}", format_operational_row(r))?;
    }
    Ok(())
}

pub fn parse_status_csv<R: Read>(
    input: R,
    turbine_id: &str,
    manifest: &Manifest,
) -> Result<Vec<StatusEvent>> {
    let mut rdr = reader(input);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["timestamp", "alarm_code", "kind"] {
        return Err(IngestError::MalformedRow {
            line: 1,
            reason: "status header must be `timestamp,alarm_code,kind`".into(),
        });
    }
    let dict = manifest.alarm_set();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != 3 {
            return Err(IngestError::MalformedRow {
                line,
                reason: format!("expected 3 columns, found {}", row.len()),
            });
        }
        let timestamp = parse_ts(line, &row[0])?;
        let code = row[1].trim();
        if !dict.contains(code) {
            return Err(IngestError::UnknownAlarmCode {
                line,
                code: code.to_string(),
            });
        }
        let kind = AlarmKind::from_code(row[2].trim()).ok_or_else(|| IngestError::MalformedRow {
            line,
            reason: format!("kind must be A or D, found {:?}", &row[2]),
        })?;
        out.push(StatusEvent {
            turbine_id: turbine_id.to_string(),
            timestamp,
            alarm_code: code.to_string(),
            kind,
        });
    }
    Ok(out)
}

pub fn write_status_csv<W: Write>(mut out: W, events: &[StatusEvent]) -> std::io::Result<()> {
    writeln!(out, "timestamp,alarm_code,kind")?;
    for e in events {
        writeln!(out, "{},{},{}", e.timestamp, e.alarm_code, e.kind.code())?;
    }
    Ok(())
}
