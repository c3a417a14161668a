//! Length-prefixed, checksummed record framing shared by the turbine store
//! and the broker segment files.
//!
//! Each frame is laid out as
//!
//! ```text
//! +-----------+-----------+------------------+
//! | len: u32  | crc: u32  | payload: [u8]    |
//! +-----------+-----------+------------------+
//! ```
//!
//! with little-endian integers and `crc` = CRC-32 of the payload. A frame is
//! only acknowledged after `sync_data` returns. On open, a file is scanned
//! front to back and truncated at the first frame that is incomplete or fails
//! its checksum, which discards a torn tail left by a crash mid-write.

use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

pub const FRAME_HEADER_LEN: u64 = 8;
/// Upper bound on a single payload; larger length prefixes are treated as corruption.
pub const MAX_FRAME_PAYLOAD: u32 = 64 << 20;

pub fn encode_frame(payload: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(payload.len() + FRAME_HEADER_LEN as usize);
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    buf.extend_from_slice(payload);
    buf
}

/// Reads the next frame. `Ok(None)` means a clean end of file *or* a torn /
/// corrupt frame; both end the valid prefix.
pub fn read_frame<R: Read>(reader: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut header = [0u8; FRAME_HEADER_LEN as usize];
    if !read_full(reader, &mut header)? {
        return Ok(None);
    }
    let len = u32::from_le_bytes(header[0..4].try_into().unwrap());
    let crc = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if len > MAX_FRAME_PAYLOAD {
        return Ok(None);
    }
    let mut payload = vec![0u8; len as usize];
    if !read_full(reader, &mut payload)? {
        return Ok(None);
    }
    if crc32fast::hash(&payload) != crc {
        return Ok(None);
    }
    Ok(Some(payload))
}

fn read_full<R: Read>(reader: &mut R, buf: &mut [u8]) -> io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => return Ok(false),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

/// An append-only file of frames.
#[derive(Debug)]
pub struct FrameLog {
    path: PathBuf,
    file: File,
    len: u64,
}

impl FrameLog {
    /// Opens (creating if needed) and recovers the log, returning it together
    /// with every intact payload in file order.
    pub fn open(path: impl AsRef<Path>) -> io::Result<(FrameLog, Vec<Vec<u8>>)> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)?;
        let mut records = Vec::new();
        let mut valid = 0u64;
        {
            let mut reader = BufReader::new(File::open(&path)?);
            while let Some(payload) = read_frame(&mut reader)? {
                valid += FRAME_HEADER_LEN + payload.len() as u64;
                records.push(payload);
            }
        }
        let on_disk = file.metadata()?.len();
        if on_disk != valid {
            log::warn!(
                "{}: truncating torn tail ({} -> {} bytes)",
                path.display(),
                on_disk,
                valid
            );
            file.set_len(valid)?;
            file.sync_all()?;
        }
        Ok((FrameLog { path, file, len: valid }, records))
    }

    /// Appends one frame durably, returning its starting byte position.
    pub fn append(&mut self, payload: &[u8]) -> io::Result<u64> {
        self.append_many(std::iter::once(payload)).map(|v| v[0])
    }

    /// Appends several frames with a single `sync_data`.
    pub fn append_many<'a, I>(&mut self, payloads: I) -> io::Result<Vec<u64>>
    where
        I: IntoIterator<Item = &'a [u8]>,
    {
        let mut buf = Vec::new();
        let mut positions = Vec::new();
        let mut pos = self.len;
        for p in payloads {
            if p.len() as u64 > MAX_FRAME_PAYLOAD as u64 {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidInput,
                    "frame payload too large",
                ));
            }
            positions.push(pos);
            let frame = encode_frame(p);
            pos += frame.len() as u64;
            buf.extend_from_slice(&frame);
        }
        if buf.is_empty() {
            return Ok(positions);
        }
        if let Err(e) = self.file.write_all(&buf).and_then(|_| self.file.sync_data()) {
            // Roll back any partial write so the in-memory length stays truthful.
            let _ = self.file.set_len(self.len);
            return Err(e);
        }
        self.len = pos;
        Ok(positions)
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Sequential reader over the first `limit` bytes of a frame file.
#[derive(Debug)]
pub struct FrameReader {
    reader: BufReader<File>,
    remaining: u64,
}

impl FrameReader {
    pub fn open(path: impl AsRef<Path>, start: u64, limit: u64) -> io::Result<FrameReader> {
        let mut file = File::open(path)?;
        file.seek(SeekFrom::Start(start))?;
        Ok(FrameReader {
            reader: BufReader::new(file),
            remaining: limit.saturating_sub(start),
        })
    }
}

impl Iterator for FrameReader {
    type Item = io::Result<Vec<u8>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining < FRAME_HEADER_LEN {
            return None;
        }
        match read_frame(&mut self.reader) {
            Ok(Some(p)) => {
                self.remaining = self
                    .remaining
                    .saturating_sub(FRAME_HEADER_LEN + p.len() as u64);
                Some(Ok(p))
            }
            Ok(None) => {
                self.remaining = 0;
                None
            }
            Err(e) => {
                self.remaining = 0;
                Some(Err(e))
            }
        }
    }
}

/// Little-endian binary writer used by the record codecs.
#[derive(Debug, Default)]
pub struct Encoder {
    pub buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Encoder::default()
    }
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }
    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
        self
    }
    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }
    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
        self
    }
    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("truncated or malformed binary record at byte {0}")]
pub struct DecodeError(pub usize);

/// Counterpart of [`Encoder`].
#[derive(Debug)]
pub struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Decoder { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.data.len() - self.pos < n {
            return Err(DecodeError(self.pos));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn i64(&mut self) -> Result<i64, DecodeError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_bits(self.u64()?))
    }
    pub fn str(&mut self) -> Result<String, DecodeError> {
        let at = self.pos;
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| DecodeError(at))
    }
    pub fn bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }
    /// Length prefix for a following sequence, sanity-checked against the
    /// bytes left so a corrupt count cannot trigger a huge allocation.
    pub fn len_prefix(&mut self, min_item_bytes: usize) -> Result<usize, DecodeError> {
        let at = self.pos;
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item_bytes.max(1)) > self.remaining() {
            return Err(DecodeError(at));
        }
        Ok(n)
    }
    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }
    pub fn position(&self) -> usize {
        self.pos
    }
}
