//! Embedded durable commit-log broker.
//!
//! Every topic is a single partition stored as a sequence of segment files
//! under `root/topics/<topic>/<base-offset>.log`. Each record is a checksummed
//! frame holding `offset u64 | publish_millis i64 | payload`. Consumer group
//! positions live in `root/groups/<group>/<topic>.offset` as decimal text,
//! replaced atomically on commit.
//!
//! `publish` and `commit` return only after their bytes are synced, so an
//! acknowledged message or offset survives any crash. `poll` never moves the
//! committed position; a consumer that crashes between poll and commit sees
//! the same messages again.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crate::framing::{Decoder, Encoder, FrameLog, FrameReader, FRAME_HEADER_LEN};
use crate::fsutil::write_atomic;

pub const DEFAULT_SEGMENT_BYTES: u64 = 64 << 20;

#[derive(Debug, thiserror::Error)]
pub enum BrokerError {
    #[error("topic {0} already exists")]
    TopicExists(String),
    #[error("unknown topic {0}")]
    UnknownTopic(String),
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("empty payload")]
    EmptyPayload,
    #[error("commit offset {offset} is past the end of {topic} ({next})")]
    OffsetAhead { topic: String, offset: u64, next: u64 },
    #[error("broker unavailable")]
    Unavailable,
    #[error("storage failure: {0}")]
    StorageFailure(#[from] io::Error),
    #[error("corrupt log {path}: {reason}")]
    CorruptLog { path: PathBuf, reason: String },
}

pub type Result<T, E = BrokerError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub topic: String,
    pub offset: u64,
    pub publish_millis: i64,
    pub payload: Vec<u8>,
}

#[derive(Debug)]
struct TopicState {
    segments: Vec<PathBuf>,
    active: FrameLog,
    /// `(segment index, byte position)` of every offset.
    index: Vec<(u32, u64)>,
    /// Synced byte length of each segment.
    lengths: Vec<u64>,
}

#[derive(Debug)]
struct Topic {
    dir: PathBuf,
    state: Mutex<TopicState>,
    grew: Condvar,
}

fn now_millis() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

/// Topic and group names double as directory names.
pub fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 128
        && name != "."
        && name != ".."
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn segment_path(dir: &Path, base: u64) -> PathBuf {
    dir.join(format!("{base:020}.log"))
}

fn encode_record(offset: u64, millis: i64, payload: &[u8]) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u64(offset).i64(millis);
    let mut buf = e.finish();
    buf.extend_from_slice(payload);
    buf
}

fn decode_record(frame: &[u8]) -> Option<(u64, i64, &[u8])> {
    let mut d = Decoder::new(frame);
    let offset = d.u64().ok()?;
    let millis = d.i64().ok()?;
    Some((offset, millis, &frame[d.position()..]))
}

impl Topic {
    fn create(dir: PathBuf) -> Result<Topic> {
        fs::create_dir_all(&dir)?;
        let path = segment_path(&dir, 0);
        let (active, _) = FrameLog::open(&path)?;
        sync_dir(&dir);
        Ok(Topic {
            dir,
            state: Mutex::new(TopicState {
                segments: vec![path],
                active,
                index: Vec::new(),
                lengths: vec![0],
            }),
            grew: Condvar::new(),
        })
    }

    /// Replays all segments, truncating a torn tail of the last one.
    fn open(dir: PathBuf) -> Result<Topic> {
        let mut bases: Vec<u64> = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(stem) = name.strip_suffix(".log") {
                if let Ok(b) = stem.parse() {
                    bases.push(b);
                }
            }
        }
        bases.sort_unstable();
        if bases.is_empty() {
            return Topic::create(dir);
        }
        let mut segments = Vec::new();
        let mut index = Vec::new();
        let mut lengths = Vec::new();
        let mut active = None;
        for (si, &base) in bases.iter().enumerate() {
            let path = segment_path(&dir, base);
            let (log, frames) = FrameLog::open(&path)?;
            if base != index.len() as u64 {
                return Err(BrokerError::CorruptLog {
                    path,
                    reason: format!("segment base {base} but {} records precede it", index.len()),
                });
            }
            let mut pos = 0u64;
            for f in &frames {
                match decode_record(f) {
                    Some((off, _, _)) if off == index.len() as u64 => {}
                    _ => {
                        return Err(BrokerError::CorruptLog {
                            path,
                            reason: format!("record at byte {pos} breaks offset sequence"),
                        })
                    }
                }
                index.push((si as u32, pos));
                pos += FRAME_HEADER_LEN + f.len() as u64;
            }
            lengths.push(log.len());
            segments.push(path);
            active = Some(log);
        }
        Ok(Topic {
            dir,
            state: Mutex::new(TopicState {
                segments,
                active: active.unwrap(),
                index,
                lengths,
            }),
            grew: Condvar::new(),
        })
    }
}

fn sync_dir(dir: &Path) {
    if let Ok(d) = fs::File::open(dir) {
        let _ = d.sync_all();
    }
}

/// Shared handle; clone the surrounding `Arc` to use it from many threads.
#[derive(Debug)]
pub struct Broker {
    root: PathBuf,
    segment_bytes: u64,
    topics: RwLock<HashMap<String, Arc<Topic>>>,
    offsets: Mutex<HashMap<(String, String), u64>>,
    available: AtomicBool,
}

impl Broker {
    /// Opens or initializes a broker directory, recovering every topic.
    pub fn open(root: impl AsRef<Path>) -> Result<Broker> {
        Broker::open_with_segment_bytes(root, DEFAULT_SEGMENT_BYTES)
    }

    pub fn open_with_segment_bytes(root: impl AsRef<Path>, segment_bytes: u64) -> Result<Broker> {
        let root = root.as_ref().to_path_buf();
        let topics_dir = root.join("topics");
        fs::create_dir_all(&topics_dir)?;
        fs::create_dir_all(root.join("groups"))?;
        let mut topics = HashMap::new();
        for entry in fs::read_dir(&topics_dir)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            if valid_name(&name) {
                topics.insert(name, Arc::new(Topic::open(entry.path())?));
            }
        }
        Ok(Broker {
            root,
            segment_bytes: segment_bytes.max(1),
            topics: RwLock::new(topics),
            offsets: Mutex::new(HashMap::new()),
            available: AtomicBool::new(true),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Makes every operation fail with `Unavailable` until [`Broker::resume`].
    pub fn pause(&self) {
        self.available.store(false, Ordering::SeqCst);
    }

    pub fn resume(&self) {
        self.available.store(true, Ordering::SeqCst);
        for t in self.topics.read().unwrap().values() {
            t.grew.notify_all();
        }
    }

    pub fn is_available(&self) -> bool {
        self.available.load(Ordering::SeqCst)
    }

    fn check_available(&self) -> Result<()> {
        if self.is_available() {
            Ok(())
        } else {
            Err(BrokerError::Unavailable)
        }
    }

    fn topic(&self, name: &str) -> Result<Arc<Topic>> {
        self.topics
            .read()
            .unwrap()
            .get(name)
            .cloned()
            .ok_or_else(|| BrokerError::UnknownTopic(name.to_string()))
    }

    pub fn create_topic(&self, name: &str) -> Result<()> {
        self.check_available()?;
        if !valid_name(name) {
            return Err(BrokerError::InvalidName(name.to_string()));
        }
        let mut topics = self.topics.write().unwrap();
        if topics.contains_key(name) {
            return Err(BrokerError::TopicExists(name.to_string()));
        }
        let topic = Topic::create(self.root.join("topics").join(name))?;
        sync_dir(&self.root.join("topics"));
        topics.insert(name.to_string(), Arc::new(topic));
        Ok(())
    }

    /// Creates the topic unless it already exists.
    pub fn ensure_topic(&self, name: &str) -> Result<()> {
        match self.create_topic(name) {
            Ok(()) | Err(BrokerError::TopicExists(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }

    pub fn has_topic(&self, name: &str) -> bool {
        self.topics.read().unwrap().contains_key(name)
    }

    pub fn topics(&self) -> Vec<String> {
        let mut v: Vec<String> = self.topics.read().unwrap().keys().cloned().collect();
        v.sort();
        v
    }

    /// Offset the next publish will receive.
    pub fn next_offset(&self, topic: &str) -> Result<u64> {
        Ok(self.topic(topic)?.state.lock().unwrap().index.len() as u64)
    }

    pub fn publish(&self, topic: &str, payload: &[u8]) -> Result<u64> {
        self.publish_batch(topic, &[payload]).map(|v| v[0])
    }

    /// Appends several messages with a single sync.
    pub fn publish_batch(&self, topic: &str, payloads: &[&[u8]]) -> Result<Vec<u64>> {
        self.check_available()?;
        if payloads.iter().any(|p| p.is_empty()) {
            return Err(BrokerError::EmptyPayload);
        }
        let t = self.topic(topic)?;
        let mut st = t.state.lock().unwrap();
        if st.active.len() >= self.segment_bytes {
            let base = st.index.len() as u64;
            let path = segment_path(&t.dir, base);
            let (log, _) = FrameLog::open(&path)?;
            sync_dir(&t.dir);
            st.segments.push(path);
            st.lengths.push(0);
            st.active = log;
        }
        let first = st.index.len() as u64;
        let millis = now_millis();
        let records: Vec<Vec<u8>> = payloads
            .iter()
            .enumerate()
            .map(|(i, p)| encode_record(first + i as u64, millis, p))
            .collect();
        let positions = st.active.append_many(records.iter().map(Vec::as_slice))?;
        let seg = (st.segments.len() - 1) as u32;
        st.index.extend(positions.iter().map(|&p| (seg, p)));
        let len = st.active.len();
        *st.lengths.last_mut().unwrap() = len;
        drop(st);
        t.grew.notify_all();
        Ok((first..first + payloads.len() as u64).collect())
    }

    fn offset_path(&self, group: &str, topic: &str) -> PathBuf {
        self.root.join("groups").join(group).join(format!("{topic}.offset"))
    }

    /// Committed position of `group` on `topic`, 0 if it never committed.
    pub fn committed(&self, group: &str, topic: &str) -> Result<u64> {
        if !valid_name(group) {
            return Err(BrokerError::InvalidName(group.to_string()));
        }
        self.topic(topic)?;
        let key = (group.to_string(), topic.to_string());
        let mut offsets = self.offsets.lock().unwrap();
        if let Some(&o) = offsets.get(&key) {
            return Ok(o);
        }
        let path = self.offset_path(group, topic);
        let o = match fs::read_to_string(&path) {
            Ok(s) => s.trim().parse().map_err(|_| BrokerError::CorruptLog {
                path: path.clone(),
                reason: format!("bad offset {s:?}"),
            })?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e.into()),
        };
        offsets.insert(key, o);
        Ok(o)
    }

    /// Up to `max_batch` messages from the committed position, in order.
    pub fn poll(&self, group: &str, topic: &str, max_batch: usize) -> Result<Vec<Message>> {
        self.check_available()?;
        let from = self.committed(group, topic)?;
        self.read_from(topic, from, max_batch)
    }

    /// Reads messages starting at `from` regardless of any group.
    pub fn read_from(&self, topic: &str, from: u64, max_batch: usize) -> Result<Vec<Message>> {
        let t = self.topic(topic)?;
        let (plan, end) = {
            let st = t.state.lock().unwrap();
            let end = (from as usize).saturating_add(max_batch).min(st.index.len());
            if from as usize >= end {
                return Ok(Vec::new());
            }
            let (seg, pos) = st.index[from as usize];
            let mut plan = Vec::new();
            let mut s = seg as usize;
            let mut p = pos;
            while s < st.segments.len() {
                plan.push((st.segments[s].clone(), p, st.lengths[s]));
                s += 1;
                p = 0;
            }
            (plan, end as u64)
        };
        let mut out = Vec::with_capacity((end - from) as usize);
        'outer: for (path, start, limit) in plan {
            for frame in FrameReader::open(&path, start, limit)? {
                let frame = frame?;
                let (offset, publish_millis, payload) = decode_record(&frame).ok_or_else(|| BrokerError::CorruptLog {
                    path: path.clone(),
                    reason: "short record".into(),
                })?;
                if offset != from + out.len() as u64 {
                    return Err(BrokerError::CorruptLog {
                        path,
                        reason: format!("expected offset {}, found {offset}", from + out.len() as u64),
                    });
                }
                out.push(Message {
                    topic: topic.to_string(),
                    offset,
                    publish_millis,
                    payload: payload.to_vec(),
                });
                if offset + 1 >= end {
                    break 'outer;
                }
            }
        }
        Ok(out)
    }

    /// Blocks until `topic` holds a message at `offset` or `timeout`
    /// elapses. Returns whether the message exists.
    pub fn wait_for(&self, topic: &str, offset: u64, timeout: Duration) -> Result<bool> {
        let t = self.topic(topic)?;
        let st = t.state.lock().unwrap();
        let (st, _) = t
            .grew
            .wait_timeout_while(st, timeout, |s| s.index.len() as u64 <= offset)
            .unwrap();
        Ok(st.index.len() as u64 > offset)
    }

    /// Durably sets the next offset `group` will read from `topic`.
    pub fn commit(&self, group: &str, topic: &str, offset: u64) -> Result<()> {
        self.check_available()?;
        if !valid_name(group) {
            return Err(BrokerError::InvalidName(group.to_string()));
        }
        let next = self.next_offset(topic)?;
        if offset > next {
            return Err(BrokerError::OffsetAhead {
                topic: topic.to_string(),
                offset,
                next,
            });
        }
        let mut offsets = self.offsets.lock().unwrap();
        write_atomic(&self.offset_path(group, topic), format!("{offset}\n").as_bytes())?;
        offsets.insert((group.to_string(), topic.to_string()), offset);
        Ok(())
    }

    /// Messages published but not yet committed by `group`.
    pub fn lag(&self, group: &str, topic: &str) -> Result<u64> {
        Ok(self.next_offset(topic)? - self.committed(group, topic)?)
    }
}
