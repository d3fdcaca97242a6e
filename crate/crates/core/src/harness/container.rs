//! Flat named-tensor file: `MAGIC`, a little-endian `u32` version, a `u64`
//! header length, a JSON header, then every tensor as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"STGCCT\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    fingerprint: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub fingerprint: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            fingerprint: self.fingerprint.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| Entry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let head = serde_json::to_vec(&header).expect("header serializes");
        let numel: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum();
        let mut buf = Vec::with_capacity(20 + head.len() + 8 * numel);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(head.len() as u64).to_le_bytes());
        buf.extend_from_slice(&head);
        for (_, t) in &self.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| HarnessError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Container> {
        let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        let bad = |why: &str| HarnessError::Container {
            path: path.to_path_buf(),
            reason: why.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a tensor container"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let head_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = 20usize.checked_add(head_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body]).map_err(|e| bad(&e.to_string()))?;
        let mut data = bytes[body..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if bytes.len() - body != 8 * total {
            return Err(bad(&format!("expected {total} values, found {} bytes", bytes.len() - body)));
        }
        let tensors = header
            .tensors
            .into_iter()
            .map(|e| {
                let n = e.shape.iter().product();
                let t = Tensor::new(e.shape, data.by_ref().take(n).collect()).map_err(|err| bad(&err.to_string()))?;
                Ok((e.name, t))
            })
            .collect::<Result<_>>()?;
        Ok(Container {
            kind: header.kind,
            fingerprint: header.fingerprint,
            meta: header.meta,
            tensors,
        })
    }

    /// Reads `path` and checks its kind and fingerprint.
    pub fn read_expecting(path: &Path, kind: &str, fingerprint: &str) -> Result<Container> {
        let c = Container::read(path)?;
        if c.kind != kind {
            return Err(HarnessError::Container {
                path: path.to_path_buf(),
                reason: format!("holds a {}, expected a {kind}", c.kind),
            });
        }
        if c.fingerprint != fingerprint {
            return Err(HarnessError::Fingerprint {
                path: path.to_path_buf(),
                expected: fingerprint.to_string(),
                found: c.fingerprint,
            });
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            kind: "checkpoint".into(),
            fingerprint: "ab".repeat(32),
            meta: serde_json::json!({"fold": 3}),
            tensors: vec![
                ("w".into(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.1, 1e-300, f64::MAX, 0.0]).unwrap()),
                ("b".into(), Tensor::scalar(7.0)),
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let c = sample();
        c.write(&p).unwrap();
        assert_eq!(Container::read(&p).unwrap(), c);
    }

    #[test]
    fn rejects_mismatch_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        sample().write(&p).unwrap();
        assert!(matches!(
            Container::read_expecting(&p, "checkpoint", &"cd".repeat(32)),
            Err(HarnessError::Fingerprint { .. })
        ));
        assert!(Container::read_expecting(&p, "cohort", &"ab".repeat(32)).is_err());
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(Container::read(&p), Err(HarnessError::Container { .. })));
        fs::write(&p, b"hello").unwrap();
        assert!(matches!(Container::read(&p), Err(HarnessError::Container { .. })));
    }
}
