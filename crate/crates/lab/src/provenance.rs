//! Stage records: every stage directory holds a `stage.json` naming the
//! hashes of what it read and what it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use apl_core::seed::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

pub const RECORD: &str = "stage.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub stage: String,
    /// Hash of the config sections the stage depends on.
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    /// File name (relative to the stage directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl StageRecord {
    pub fn new(stage: &str, config_hash: String) -> Self {
        Self { stage: stage.into(), config_hash, ..Default::default() }
    }

    /// Writes `bytes` under `dir` and records the hash.
    pub fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<String> {
        let hash = apl_core::checkpoint::write_hashed(&dir.join(name), bytes)?;
        self.outputs.insert(name.into(), hash.clone());
        Ok(hash)
    }

    /// Records a file some other writer produced.
    pub fn track(&mut self, dir: &Path, name: &str) -> Result<String> {
        let hash = file_hash(&dir.join(name))?;
        self.outputs.insert(name.into(), hash.clone());
        Ok(hash)
    }

    pub fn output(&self, name: &str) -> Result<&str> {
        self.outputs
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| LabError::Artifact { path: PathBuf::from(&self.stage).join(name), reason: "not recorded by its stage".into() })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        apl_core::image::write_atomic(&dir.join(RECORD), serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(())
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    match std::fs::read(path) {
        Ok(b) => Ok(sha256_hex(&b)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(LabError::Missing(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

/// Loads a stage record and checks every recorded output against its hash.
pub fn load_verified(dir: &Path) -> Result<StageRecord> {
    let path = dir.join(RECORD);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(LabError::Missing(path)),
        Err(e) => return Err(e.into()),
    };
    let record: StageRecord =
        serde_json::from_str(&text).map_err(|e| LabError::Artifact { path: path.clone(), reason: e.to_string() })?;
    for (name, want) in &record.outputs {
        let p = dir.join(name);
        let got = file_hash(&p)?;
        if &got != want {
            return Err(LabError::Artifact { path: p, reason: format!("hash {got} differs from the recorded {want}") });
        }
    }
    Ok(record)
}

/// Hash of any serializable config fragment.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("config serializes").as_bytes())
}
