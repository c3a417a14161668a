//! Model bundle file format.
//!
//! ```text
//! magic  "TPMB"        4 bytes
//! version u16 LE       2 bytes
//! length  u64 LE       8 bytes   payload length
//! crc32   u32 LE       4 bytes   over payload
//! payload              length bytes
//! ```
//!
//! The payload is a little-endian field sequence: metadata, feature names,
//! patterns, forest hyperparameters, class ids, then trees as preorder node
//! arrays (tag 0 = split, tag 1 = leaf).

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::Horizon;
use crate::framing::{DecodeError, Decoder, Encoder};
use crate::fsutil::write_atomic;
use crate::patterns::{ClassLabel, StatusPattern};
use crate::time::Timestamp;

use super::{DecisionTree, ForestError, Node, RandomForest, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"TPMB";
pub const MODEL_FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 8 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub format_version: u16,
    pub turbine_id: String,
    pub horizon: Horizon,
    pub forest: RandomForest,
    /// Feature names in the column order the forest expects.
    pub feature_names: Vec<String>,
    pub patterns: Vec<StatusPattern>,
    pub created_at: Timestamp,
    /// Free-form provenance (training range, seeds, settings).
    pub metadata: Vec<(String, String)>,
}

impl ModelBundle {
    pub fn new(
        turbine_id: impl Into<String>,
        horizon: Horizon,
        forest: RandomForest,
        feature_names: Vec<String>,
        patterns: Vec<StatusPattern>,
        created_at: Timestamp,
    ) -> ModelBundle {
        ModelBundle {
            format_version: MODEL_FORMAT_VERSION,
            turbine_id: turbine_id.into(),
            horizon,
            forest,
            feature_names,
            patterns,
            created_at,
            metadata: Vec::new(),
        }
    }

    pub fn classes(&self) -> &[ClassLabel] {
        self.forest.classes()
    }

    /// Complete file image.
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = encode_payload(self);
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelBundle> {
        if bytes.len() < HEADER_LEN {
            return Err(corrupt("file shorter than header"));
        }
        if &bytes[0..4] != MODEL_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != MODEL_FORMAT_VERSION {
            return Err(ForestError::VersionMismatch {
                found: version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
        let crc = u32::from_le_bytes(bytes[14..18].try_into().unwrap());
        let payload = &bytes[HEADER_LEN..];
        if payload.len() as u64 != len {
            return Err(corrupt(format!("payload is {} bytes, header says {len}", payload.len())));
        }
        if crc32fast::hash(payload) != crc {
            return Err(corrupt("checksum mismatch"));
        }
        decode_payload(payload).map_err(|e| corrupt(e.to_string()))?
    }

    /// Payload checksum, used as the bundle version in notifications.
    pub fn content_id(&self) -> String {
        format!("{:08x}", crc32fast::hash(&encode_payload(self)))
    }

    /// Human-readable dump of every field and node.
    pub fn dump_text(&self) -> String {
        let mut s = String::new();
        let f = &self.forest;
        let _ = writeln!(s, "format_version: {}", self.format_version);
        let _ = writeln!(s, "turbine: {}", self.turbine_id);
        let _ = writeln!(s, "horizon: {}", self.horizon);
        let _ = writeln!(s, "created_at: {}", self.created_at);
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "meta {k}: {v}");
        }
        let _ = writeln!(s, "features: {}", self.feature_names.join(", "));
        for p in &self.patterns {
            let alarms: Vec<&str> = p.alarm_set.iter().map(String::as_str).collect();
            let _ = writeln!(
                s,
                "pattern {}: {} (support {:.6}, {} slots)",
                p.pattern_id,
                alarms.join(", "),
                p.support,
                p.count
            );
        }
        let classes: Vec<String> = f.classes.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "classes: {}", classes.join(", "));
        let _ = writeln!(
            s,
            "forest: trees={} max_depth={} features_per_split={} bootstrap={} seed={}",
            f.n_trees, f.max_depth, f.features_per_split, f.bootstrap, f.seed
        );
        for (ti, t) in f.trees.iter().enumerate() {
            let _ = writeln!(s, "tree {ti}: {} nodes, depth {}", t.nodes.len(), t.depth());
            for (ni, n) in t.nodes.iter().enumerate() {
                match n {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        let name = self
                            .feature_names
                            .get(*feature as usize)
                            .map(String::as_str)
                            .unwrap_or("?");
                        let _ = writeln!(s, "  {ni}: {name} <= {threshold:?} ? {left} : {right}");
                    }
                    Node::Leaf { counts } => {
                        let _ = writeln!(s, "  {ni}: leaf {counts:?}");
                    }
                }
            }
        }
        s
    }
}

fn corrupt(msg: impl Into<String>) -> ForestError {
    ForestError::CorruptModel(msg.into())
}

fn encode_payload(b: &ModelBundle) -> Vec<u8> {
    let mut e = Encoder::new();
    e.str(&b.turbine_id).u32(b.horizon.minutes()).i64(b.created_at.secs());
    e.u32(b.metadata.len() as u32);
    for (k, v) in &b.metadata {
        e.str(k).str(v);
    }
    e.u32(b.feature_names.len() as u32);
    for n in &b.feature_names {
        e.str(n);
    }
    e.u32(b.patterns.len() as u32);
    for p in &b.patterns {
        e.u32(p.pattern_id).f64(p.support).u64(p.count as u64);
        e.u32(p.alarm_set.len() as u32);
        for a in &p.alarm_set {
            e.str(a);
        }
    }
    let f = &b.forest;
    e.u32(f.n_trees as u32)
        .u32(f.max_depth as u32)
        .u32(f.features_per_split as u32)
        .u8(f.bootstrap as u8)
        .u64(f.seed)
        .u32(f.n_features as u32);
    e.u32(f.classes.len() as u32);
    for c in &f.classes {
        e.u32(c.id());
    }
    e.u32(f.trees.len() as u32);
    for t in &f.trees {
        e.u32(t.nodes.len() as u32);
        for n in &t.nodes {
            match n {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    e.u8(0).u32(*feature).f64(*threshold).u32(*left).u32(*right);
                }
                Node::Leaf { counts } => {
                    e.u8(1);
                    for c in counts {
                        e.u32(*c);
                    }
                }
            }
        }
    }
    e.finish()
}

fn decode_payload(bytes: &[u8]) -> std::result::Result<Result<ModelBundle>, DecodeError> {
    let mut d = Decoder::new(bytes);
    let turbine_id = d.str()?;
    let horizon = match Horizon::new(d.u32()?) {
        Ok(h) => h,
        Err(e) => return Ok(Err(corrupt(e.to_string()))),
    };
    let created_at = Timestamp::from_secs(d.i64()?);
    let n = d.len_prefix(8)?;
    let mut metadata = Vec::with_capacity(n);
    for _ in 0..n {
        metadata.push((d.str()?, d.str()?));
    }
    let n = d.len_prefix(4)?;
    let mut feature_names = Vec::with_capacity(n);
    for _ in 0..n {
        feature_names.push(d.str()?);
    }
    let n = d.len_prefix(24)?;
    let mut patterns = Vec::with_capacity(n);
    for _ in 0..n {
        let pattern_id = d.u32()?;
        let support = d.f64()?;
        let count = d.u64()? as usize;
        let m = d.len_prefix(4)?;
        let mut alarm_set = std::collections::BTreeSet::new();
        for _ in 0..m {
            alarm_set.insert(d.str()?);
        }
        patterns.push(StatusPattern {
            pattern_id,
            alarm_set,
            support,
            count,
        });
    }
    let n_trees = d.u32()? as usize;
    let max_depth = d.u32()? as usize;
    let features_per_split = d.u32()? as usize;
    let bootstrap = d.u8()? != 0;
    let seed = d.u64()?;
    let n_features = d.u32()? as usize;
    let n = d.len_prefix(4)?;
    let mut classes = Vec::with_capacity(n);
    for _ in 0..n {
        classes.push(ClassLabel::from_id(d.u32()?));
    }
    let k = classes.len();
    let nt = d.len_prefix(4)?;
    let mut trees = Vec::with_capacity(nt);
    for _ in 0..nt {
        let nn = d.len_prefix(1)?;
        let mut nodes = Vec::with_capacity(nn);
        for _ in 0..nn {
            match d.u8()? {
                0 => nodes.push(Node::Split {
                    feature: d.u32()?,
                    threshold: d.f64()?,
                    left: d.u32()?,
                    right: d.u32()?,
                }),
                1 => {
                    let mut counts = Vec::with_capacity(k);
                    for _ in 0..k {
                        counts.push(d.u32()?);
                    }
                    nodes.push(Node::Leaf { counts });
                }
                _ => return Err(DecodeError(d.position() - 1)),
            }
        }
        trees.push(DecisionTree::from_parts(nodes, n_features, k));
    }
    if d.remaining() != 0 {
        return Err(DecodeError(d.position()));
    }
    let forest = RandomForest {
        trees,
        classes,
        n_features,
        n_trees,
        max_depth,
        features_per_split,
        bootstrap,
        seed,
    };
    if let Err(msg) = check_structure(&forest, feature_names.len()) {
        return Ok(Err(corrupt(msg)));
    }
    Ok(Ok(ModelBundle {
        format_version: MODEL_FORMAT_VERSION,
        turbine_id,
        horizon,
        forest,
        feature_names,
        patterns,
        created_at,
        metadata,
    }))
}

/// Rejects node graphs that would loop or index out of bounds.
fn check_structure(f: &RandomForest, n_names: usize) -> std::result::Result<(), String> {
    if f.n_features != n_names {
        return Err(format!("{} features but {n_names} names", f.n_features));
    }
    if f.trees.len() != f.n_trees || f.classes.is_empty() {
        return Err("tree or class count mismatch".into());
    }
    for t in &f.trees {
        if t.nodes.is_empty() {
            return Err("empty tree".into());
        }
        for (i, n) in t.nodes.iter().enumerate() {
            if let Node::Split { feature, left, right, .. } = n {
                let len = t.nodes.len() as u32;
                // preorder layout: children always follow their parent
                if *feature as usize >= f.n_features
                    || *left <= i as u32
                    || *right <= i as u32
                    || *left >= len
                    || *right >= len
                {
                    return Err(format!("bad split node {i}"));
                }
            }
        }
    }
    Ok(())
}

/// `<models_dir>/<turbine>/h<minutes>.model`
pub fn model_path(models_dir: &Path, turbine_id: &str, horizon: Horizon) -> std::path::PathBuf {
    models_dir.join(turbine_id).join(format!("h{}.model", horizon.minutes()))
}

pub fn save_model(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &bundle.to_bytes())?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let bytes = std::fs::read(path)?;
    ModelBundle::from_bytes(&bytes)
}
