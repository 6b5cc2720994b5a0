//! Bit-exact checkpoint serialization plus canonical report/CSV emission.
//!
//! Checkpoint layout (all integers little-endian):
//!   magic "SNKP" | u32 version = 1 | u32 config-JSON length | config JSON
//!   | u32 manifest count | entries (u32 name length, UTF-8 name,
//!   u64 rows, u64 cols, u64 payload offset) | payload (f32 LE row-major).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sinkprune_core::model::{tensor_names, ModelConfig, NamedTensorCheckpoint};
use sinkprune_core::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"SNKP";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: need {needed} bytes, have {have}")]
    TruncatedFile { needed: usize, have: usize },
    #[error("manifest entries overlap or run out of bounds")]
    ManifestOverlap,
    #[error("invalid config JSON: {0}")]
    BadConfig(String),
    #[error("non-finite value in {0}; refusing to serialize")]
    NonFinite(String),
    #[error("checkpoint invalid: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn checkpoint_to_bytes(ckpt: &NamedTensorCheckpoint) -> Result<Vec<u8>, IoError> {
    ckpt.validate()
        .map_err(|e| IoError::BadCheckpoint(e.to_string()))?;
    let config_json = serde_json::to_vec(&ckpt.config).expect("config serializes");
    let names = tensor_names(&ckpt.config);

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_json);
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());

    let mut offset: u64 = 0;
    for name in &names {
        let t = &ckpt.tensors[name.as_str()];
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (t.rows() * t.cols() * 4) as u64;
    }
    for name in &names {
        let t = &ckpt.tensors[name.as_str()];
        for &v in t.data() {
            // 64-bit internal values are truncated to f32 on disk.
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_checkpoint(ckpt: &NamedTensorCheckpoint, path: &Path) -> Result<(), IoError> {
    let bytes = checkpoint_to_bytes(ckpt)?;
    fs::write(path, bytes)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        if self.pos + n > self.buf.len() {
            return Err(IoError::TruncatedFile {
                needed: self.pos + n,
                have: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<NamedTensorCheckpoint, IoError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(IoError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| IoError::BadConfig(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| IoError::BadConfig(e.to_string()))?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let offset = r.u64()? as usize;
        manifest.push((name, rows, cols, offset));
    }
    let payload = &buf[r.pos..];

    // Offsets must be non-overlapping and in-bounds.
    let mut spans: Vec<(usize, usize)> = manifest
        .iter()
        .map(|(_, rows, cols, off)| (*off, *off + rows * cols * 4))
        .collect();
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[0].1 > w[1].0 {
            return Err(IoError::ManifestOverlap);
        }
    }
    if let Some(&(_, end)) = spans.last() {
        if end > payload.len() {
            return Err(IoError::TruncatedFile {
                needed: r.pos + end,
                have: buf.len(),
            });
        }
    }

    let mut tensors = BTreeMap::new();
    for (name, rows, cols, off) in manifest {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows * cols {
            let b = &payload[off + i * 4..off + i * 4 + 4];
            data.push(f32::from_le_bytes(b.try_into().unwrap()) as f64);
        }
        let m = DenseMatrix::new(rows, cols, data)
            .map_err(|e| IoError::BadCheckpoint(e.to_string()))?;
        tensors.insert(name, m);
    }
    let ckpt = NamedTensorCheckpoint { config, tensors };
    ckpt.validate()
        .map_err(|e| IoError::BadCheckpoint(e.to_string()))?;
    Ok(ckpt)
}

pub fn read_checkpoint(path: &Path) -> Result<NamedTensorCheckpoint, IoError> {
    checkpoint_from_bytes(&fs::read(path)?)
}

/// Serializes a report value as canonical JSON after verifying every
/// number in it is finite (serde_json would silently emit null for NaN).
pub fn report_to_string<T: serde::Serialize>(report: &T) -> Result<String, IoError> {
    let value = serde_json::to_value(report).expect("report serializes");
    check_finite(&value, "$")?;
    Ok(format!("{:#}\n", value))
}

fn check_finite(v: &serde_json::Value, path: &str) -> Result<(), IoError> {
    match v {
        serde_json::Value::Null => Err(IoError::NonFinite(path.to_string())),
        serde_json::Value::Number(n) => {
            if n.as_f64().map(f64::is_finite).unwrap_or(true) {
                Ok(())
            } else {
                Err(IoError::NonFinite(path.to_string()))
            }
        }
        serde_json::Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                check_finite(item, &format!("{path}[{i}]"))?;
            }
            Ok(())
        }
        serde_json::Value::Object(map) => {
            for (k, item) in map {
                check_finite(item, &format!("{path}.{k}"))?;
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

pub fn write_report<T: serde::Serialize>(report: &T, path: &Path) -> Result<(), IoError> {
    fs::write(path, report_to_string(report)?)?;
    Ok(())
}

/// RFC-4180 CSV with a mandatory header row.
pub fn write_csv(header: &[&str], rows: &[Vec<String>], path: &Path) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push_str("\r\n");
    for row in rows {
        out.push_str(&row.join(","));
        out.push_str("\r\n");
    }
    fs::write(path, out)?;
    Ok(())
}
