//! Versioned named-tensor archives.
//!
//! Every checkpoint in the crate (backbone weights, adapter sets, motion
//! checkpoints) is a safetensors file whose header metadata holds a single
//! `archive` entry: a JSON object with the archive `kind`, its format
//! `version` and free-form string fields. Tensor order and metadata order are
//! both canonical, so equal contents serialize to equal bytes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

const HEADER_KEY: &str = "archive";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Header {
    kind: String,
    version: u32,
    fields: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct TensorArchive {
    pub kind: String,
    pub version: u32,
    pub fields: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl TensorArchive {
    pub fn new(kind: &str, version: u32) -> Self {
        Self {
            kind: kind.to_string(),
            version,
            fields: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn set_field(&mut self, key: &str, value: impl Into<String>) {
        self.fields.insert(key.to_string(), value.into());
    }

    pub fn set_json<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.set_field(key, serde_json::to_string(value)?);
        Ok(())
    }

    pub fn field(&self, key: &str) -> Result<&str> {
        self.fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Archive(format!("{} archive has no field {key:?}", self.kind)))
    }

    pub fn json<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        Ok(serde_json::from_str(self.field(key)?)?)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Archive(format!("{} archive has no tensor {name:?}", self.kind)))
    }

    /// Fail unless this archive has the given kind and version.
    pub fn expect(&self, kind: &str, version: u32) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Archive(format!(
                "expected a {kind:?} archive, found {:?}",
                self.kind
            )));
        }
        if self.version != version {
            return Err(Error::VersionMismatch {
                kind: kind.to_string(),
                found: self.version,
                expected: version,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            version: self.version,
            fields: self.fields.clone(),
        };
        let meta = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(&header)?)]);
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize(tensors, Some(meta)).map_err(|e| Error::Archive(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let (_, meta) = safetensors::SafeTensors::read_metadata(bytes).map_err(|e| Error::Archive(e.to_string()))?;
        let raw = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .ok_or_else(|| Error::Archive("missing archive header".into()))?;
        let header: Header = serde_json::from_str(raw)?;
        let tensors = candle_core::safetensors::load_buffer(bytes, device)?
            .into_iter()
            .collect();
        Ok(Self {
            kind: header.kind,
            version: header.version,
            fields: header.fields,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, device)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Order-independent digest of a set of named tensors (names and raw values).
pub fn tensors_sha256<'a>(tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> Result<String> {
    let mut sorted: Vec<_> = tensors.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut h = Sha256::new();
    for (name, t) in sorted {
        h.update(name.as_bytes());
        h.update(format!("{:?}", t.dims()).as_bytes());
        for v in t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_and_are_canonical() {
        let dev = Device::Cpu;
        let mut a = TensorArchive::new("test", 3);
        a.set_field("zeta", "1");
        a.set_field("alpha", "2");
        a.insert("b", Tensor::new(&[1f32, 2.0], &dev).unwrap());
        a.insert("a", Tensor::new(&[[3f32]], &dev).unwrap());
        let bytes = a.to_bytes().unwrap();
        assert_eq!(bytes, a.clone().to_bytes().unwrap());
        let back = TensorArchive::from_bytes(&bytes, &dev).unwrap();
        back.expect("test", 3).unwrap();
        assert_eq!(back.field("alpha").unwrap(), "2");
        assert_eq!(back.tensor("a").unwrap().dims(), &[1, 1]);
        assert!(matches!(
            back.expect("test", 4),
            Err(Error::VersionMismatch { found: 3, .. })
        ));
        assert!(back.expect("other", 3).is_err());
    }
}
