use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::archive::sha256_hex;
use crate::{Error, Result};

/// Configuration as seen by one run: built-in defaults, the config file's
/// keys, the flags given, and the merged result.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigLayers {
    pub defaults: Value,
    pub file: Value,
    pub flags: Value,
    pub effective: Value,
}

impl ConfigLayers {
    /// Merges the layers key by key: flags over file over defaults.
    pub fn merge(defaults: Value, file: Value, flags: Value) -> Self {
        let mut effective = defaults.clone();
        for layer in [&file, &flags] {
            if let (Value::Object(out), Value::Object(src)) = (&mut effective, layer) {
                for (k, v) in src {
                    out.insert(k.clone(), v.clone());
                }
            }
        }
        Self {
            defaults,
            file,
            flags,
            effective,
        }
    }
}

/// JSON record written by every command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub crate_version: String,
    /// SHA-256 of the effective configuration's canonical JSON.
    pub config_hash: String,
    pub config: ConfigLayers,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of every checkpoint read or written, keyed by path.
    pub checkpoint_hashes: BTreeMap<String, String>,
    pub wallclock_seconds: f64,
    /// `0` on success; otherwise the exit status and the error message.
    pub status: i32,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String]) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            ..Self::default()
        }
    }

    pub fn set_config(&mut self, layers: ConfigLayers) {
        // serde_json maps are sorted, so this serialization is canonical.
        self.config_hash = sha256_hex(layers.effective.to_string().as_bytes());
        self.config = layers;
    }

    pub fn input(&mut self, key: &str, path: impl AsRef<Path>) {
        self.inputs.insert(key.into(), path.as_ref().display().to_string());
    }

    pub fn output(&mut self, key: &str, path: impl AsRef<Path>) {
        self.outputs.insert(key.into(), path.as_ref().display().to_string());
    }

    pub fn checkpoint(&mut self, path: impl AsRef<Path>, hash: String) {
        self.checkpoint_hashes.insert(path.as_ref().display().to_string(), hash);
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flags_over_file_over_defaults() {
        let l = ConfigLayers::merge(
            json!({"a": 1, "b": 2, "c": 3}),
            json!({"b": 20, "c": 30}),
            json!({"c": 300}),
        );
        assert_eq!(l.effective, json!({"a": 1, "b": 20, "c": 300}));
    }

    #[test]
    fn config_hash_tracks_the_effective_config() {
        let mut a = RunManifest::new("x", &[]);
        a.set_config(ConfigLayers::merge(json!({"a": 1}), json!({}), json!({})));
        let mut b = RunManifest::new("x", &[]);
        b.set_config(ConfigLayers::merge(json!({"a": 0}), json!({"a": 1}), json!({})));
        assert_eq!(a.config_hash, b.config_hash);
        b.set_config(ConfigLayers::merge(json!({"a": 0}), json!({}), json!({})));
        assert_ne!(a.config_hash, b.config_hash);
    }
}
