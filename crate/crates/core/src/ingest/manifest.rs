use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{IngestError, Result};

/// Store-level declarations. Serialized as a small TOML document:
///
/// ```toml
/// parameters = ["WindSpeed", "GenRpm"]
/// alarms = ["GOverSpMax", "WLFRTActive"]
/// critical_alarms = ["GOverSpMax"]
/// turbines = ["T01", "T02"]
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub parameters: Vec<String>,
    pub alarms: Vec<String>,
    /// Fault-relevant subset of `alarms` that pattern mining is restricted to.
    #[serde(default)]
    pub critical_alarms: Vec<String>,
    pub turbines: Vec<String>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(IngestError::Manifest(m));
        if self.parameters.is_empty() {
            return bad("parameters must not be empty".into());
        }
        for (what, list) in [
            ("parameters", &self.parameters),
            ("alarms", &self.alarms),
            ("turbines", &self.turbines),
            ("critical_alarms", &self.critical_alarms),
        ] {
            let unique: BTreeSet<_> = list.iter().collect();
            if unique.len() != list.len() {
                return bad(format!("duplicate entry in {what}"));
            }
            if list.iter().any(|s| s.is_empty() || s.contains(',')) {
                return bad(format!("empty or comma-bearing name in {what}"));
            }
        }
        if let Some(p) = self.parameters.iter().find(|p| *p == "timestamp") {
            return bad(format!("parameter name {p:?} is reserved"));
        }
        let dict = self.alarm_set();
        if let Some(c) = self.critical_alarms.iter().find(|c| !dict.contains(c.as_str())) {
            return bad(format!("critical alarm {c:?} missing from alarm dictionary"));
        }
        for t in &self.turbines {
            let ok = t
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
                && !t.starts_with('.');
            if !ok {
                return bad(format!("turbine id {t:?} is not a safe directory name"));
            }
        }
        Ok(())
    }

    pub fn alarm_set(&self) -> BTreeSet<&str> {
        self.alarms.iter().map(String::as_str).collect()
    }

    pub fn critical_set(&self) -> BTreeSet<String> {
        self.critical_alarms.iter().cloned().collect()
    }

    pub fn has_turbine(&self, id: &str) -> bool {
        self.turbines.iter().any(|t| t == id)
    }

    pub fn parameter_index(&self, name: &str) -> Option<usize> {
        self.parameters.iter().position(|p| p == name)
    }

    pub fn from_toml_str(s: &str) -> Result<Manifest> {
        let m: Manifest = toml::from_str(s).map_err(|e| IngestError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        Manifest::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::fsutil::write_atomic(path.as_ref(), self.to_toml_string().as_bytes())?;
        Ok(())
    }
}
