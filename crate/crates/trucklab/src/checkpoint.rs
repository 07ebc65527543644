//! Self-describing binary checkpoint container shared by the deep model and
//! the policy: a versioned header, a JSON metadata block (kind, named tensor
//! shapes, arbitrary extra metadata), then all tensor data as little-endian
//! f64 in header order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TLCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub tensors: Vec<TensorMeta>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub tensors: Vec<(TensorMeta, Vec<f64>)>,
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            tensors: Vec::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((
            TensorMeta {
                name: name.to_string(),
                shape,
            },
            data,
        ));
    }

    pub fn get(&self, name: &str) -> Result<&(TensorMeta, Vec<f64>)> {
        self.tensors
            .iter()
            .find(|(m, _)| m.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn extra_json<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .extra
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))?;
        serde_json::from_value(v.clone())
            .map_err(|e| Error::Checkpoint(format!("metadata `{key}`: {e}")))
    }

    pub fn set_extra<T: Serialize>(&mut self, key: &str, value: &T) {
        self.extra
            .insert(key.to_string(), serde_json::to_value(value).expect("serializable"));
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            tensors: self.tensors.iter().map(|(m, _)| m.clone()).collect(),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = std::fs::File::create(path)?;
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for (_, data) in &self.tensors {
            let mut buf = Vec::with_capacity(data.len() * 8);
            for x in data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic in {}", path.display())));
        }
        let mut word = [0u8; 4];
        file.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        file.read_exact(&mut len)?;
        let json_len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; json_len];
        file.read_exact(&mut json)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for meta in header.tensors {
            let n: usize = meta.shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            file.read_exact(&mut buf)?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((meta, data));
        }
        Ok(Checkpoint {
            kind: header.kind,
            tensors,
            extra: header.extra,
        })
    }
}
