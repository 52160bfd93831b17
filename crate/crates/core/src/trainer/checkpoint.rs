//! "BRQ1" checkpoint container.
//!
//! Layout: magic `BRQ1`, u32 LE length + JSON metadata, u32 LE length + JSON
//! tensor index, then raw little-endian f32 tensor data. Index offsets are
//! relative to the start of the data section.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::clustering::ClusterModel;
use crate::encoder::Mat;
use crate::error::{Error, Result};
use crate::features::NormStats;
use crate::quantizer::BankSpec;

pub const MAGIC: &[u8; 4] = b"BRQ1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: RunConfig,
    pub step: u64,
    pub bank: BankSpec,
    /// Hex SHA-256 of the quantizer matrices this run was trained against.
    pub bank_checksum: String,
    pub norm_stats: NormStats,
    pub cluster_model: Option<ClusterModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Mat<f32>)>,
    pub adam_m: Vec<Mat<f32>>,
    pub adam_v: Vec<Mat<f32>>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

const M_PREFIX: &str = "adam_m/";
const V_PREFIX: &str = "adam_v/";
const P_PREFIX: &str = "param/";

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut index = Vec::new();
        let mut offset = 0u64;
        let mut tensors: Vec<(String, &Mat<f32>)> = Vec::new();
        for (name, m) in &self.params {
            tensors.push((format!("{P_PREFIX}{name}"), m));
        }
        for ((name, _), m) in self.params.iter().zip(&self.adam_m) {
            tensors.push((format!("{M_PREFIX}{name}"), m));
        }
        for ((name, _), m) in self.params.iter().zip(&self.adam_v) {
            tensors.push((format!("{V_PREFIX}{name}"), m));
        }
        for (name, m) in &tensors {
            index.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: [m.rows, m.cols],
                offset,
            });
            offset += 4 * m.len() as u64;
        }
        let index = serde_json::to_vec(&index)?;
        let mut out = Vec::with_capacity(12 + meta.len() + index.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        for block in [&meta, &index] {
            let len = u32::try_from(block.len()).map_err(|_| Error::Checkpoint("header block too large".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(block);
        }
        for (_, m) in &tensors {
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(err("missing BRQ1 magic"));
        }
        let mut pos = 4;
        let mut block = || -> Result<&[u8]> {
            let len_bytes = bytes.get(pos..pos + 4).ok_or_else(|| err("truncated header"))?;
            let len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
            let b = bytes.get(pos + 4..pos + 4 + len).ok_or_else(|| err("truncated header"))?;
            pos += 4 + len;
            Ok(b)
        };
        let meta: CheckpointMeta =
            serde_json::from_slice(block()?).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let index: Vec<TensorEntry> =
            serde_json::from_slice(block()?).map_err(|e| Error::Checkpoint(format!("bad tensor index: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", meta.format_version)));
        }
        let data = &bytes[pos..];
        let mut params = Vec::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        for e in index {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let n = e.shape[0] * e.shape[1];
            let start = e.offset as usize;
            let raw = data
                .get(start..start + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` extends past end of file", e.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let m = Mat::from_vec(e.shape[0], e.shape[1], values);
            if let Some(name) = e.name.strip_prefix(P_PREFIX) {
                params.push((name.to_string(), m));
            } else if e.name.starts_with(M_PREFIX) {
                adam_m.push(m);
            } else if e.name.starts_with(V_PREFIX) {
                adam_v.push(m);
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor `{}`", e.name)));
            }
        }
        if adam_m.len() != params.len() || adam_v.len() != params.len() {
            return Err(err("optimizer state does not match parameter table"));
        }
        Ok(Self {
            meta,
            params,
            adam_m,
            adam_v,
        })
    }

    /// Writes via a temporary file and rename so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}
