//! Line-delimited JSON notification sink.
//!
//! Each line is one [`Notification`]:
//!
//! ```json
//! {"turbine":"WT01","t":"2024-01-01T00:10:00Z",
//!  "predictions":[{"horizon":10,"class":"Normal","vote_fraction":0.95}, ...],
//!  "model_version":"1a2b3c4d","emitted_at":"2024-06-01T12:00:00.123Z","offset":1}
//! ```
//!
//! `class` is `"Normal"` or the pattern id as a string. The sink doubles as
//! the durable dedupe index: reopening it rebuilds the set of processed
//! `(turbine, t)` keys and drops a torn final line.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::patterns::ClassLabel;
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonPrediction {
    pub horizon: u32,
    pub class: String,
    pub vote_fraction: f64,
}

impl HorizonPrediction {
    pub fn label(&self) -> Option<ClassLabel> {
        ClassLabel::parse(&self.class)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub turbine: String,
    pub t: Timestamp,
    pub predictions: Vec<HorizonPrediction>,
    pub model_version: String,
    pub emitted_at: String,
    /// Broker offset of the message that produced this notification.
    pub offset: u64,
}

#[derive(Debug)]
pub struct NotificationSink {
    path: PathBuf,
    file: File,
    len: u64,
    keys: HashSet<(String, i64)>,
    count: u64,
}

impl NotificationSink {
    pub fn open(path: impl AsRef<Path>) -> io::Result<NotificationSink> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let file = OpenOptions::new().create(true).read(true).append(true).open(&path)?;
        let mut keys = HashSet::new();
        let mut count = 0;
        let mut valid = 0u64;
        let mut reader = BufReader::new(File::open(&path)?);
        let mut line = String::new();
        loop {
            line.clear();
            let n = reader.read_line(&mut line)?;
            if n == 0 {
                break;
            }
            if !line.ends_with('\n') {
                break;
            }
            match serde_json::from_str::<Notification>(line.trim_end()) {
                Ok(note) => {
                    keys.insert((note.turbine, note.t.secs()));
                    count += 1;
                    valid += n as u64;
                }
                Err(e) => {
                    let mut rest = String::new();
                    reader.read_line(&mut rest)?;
                    if !rest.is_empty() {
                        return Err(io::Error::new(
                            io::ErrorKind::InvalidData,
                            format!("{}: bad line {}: {e}", path.display(), count + 1),
                        ));
                    }
                    break;
                }
            }
        }
        let on_disk = file.metadata()?.len();
        if on_disk != valid {
            log::warn!("{}: dropping torn tail ({on_disk} -> {valid} bytes)", path.display());
            file.set_len(valid)?;
            file.sync_all()?;
        }
        Ok(NotificationSink {
            path,
            file,
            len: valid,
            keys,
            count,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, turbine: &str, t: Timestamp) -> bool {
        self.keys.contains(&(turbine.to_string(), t.secs()))
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Appends and syncs; on failure the file is rolled back to its
    /// previous length.
    pub fn append(&mut self, notes: &[Notification]) -> io::Result<()> {
        if notes.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for n in notes {
            serde_json::to_writer(&mut buf, n).map_err(io::Error::other)?;
            buf.push(b'\n');
        }
        if let Err(e) = self.file.write_all(&buf).and_then(|_| self.file.sync_data()) {
            let _ = self.file.set_len(self.len);
            return Err(e);
        }
        self.len += buf.len() as u64;
        self.count += notes.len() as u64;
        for n in notes {
            self.keys.insert((n.turbine.clone(), n.t.secs()));
        }
        Ok(())
    }
}

/// Every complete notification line in `path`.
pub fn read_notifications(path: impl AsRef<Path>) -> io::Result<Vec<Notification>> {
    let reader = match File::open(path) {
        Ok(f) => BufReader::new(f),
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if let Ok(n) = serde_json::from_str(&line) {
            out.push(n);
        }
    }
    Ok(out)
}
