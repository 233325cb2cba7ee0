//! File plumbing shared by every stage: content digests, line-per-record
//! JSON files with a schema header, and temp-and-rename writes.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub fn digest_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Short fingerprint of any serializable config.
pub fn fingerprint<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).unwrap_or_default();
    digest_hex(&[&bytes])[..16].to_string()
}

/// First line of every emitted file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHeader {
    pub schema: String,
    pub version: u32,
    #[serde(default)]
    pub fingerprint: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

impl FileHeader {
    pub fn new(schema: &str, fingerprint: impl Into<String>) -> Self {
        Self {
            schema: schema.to_string(),
            version: SCHEMA_VERSION,
            fingerprint: fingerprint.into(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn with_meta(mut self, meta: serde_json::Value) -> Self {
        self.meta = meta;
        self
    }
}

/// Write `contents` next to `path` and rename into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: &FileHeader, records: &[T]) -> Result<()> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Reads a header (if the first line carries `schema`) and the records.
/// Blank lines are skipped. Errors name the 1-based line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Option<FileHeader>, Vec<T>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = None;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if idx == 0 {
            if let Ok(h) = serde_json::from_str::<FileHeader>(&line) {
                header = Some(h);
                continue;
            }
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        records.push(rec);
    }
    Ok((header, records))
}

/// Like [`read_jsonl`] but insists on a header of the given schema.
pub fn read_jsonl_expect<T: DeserializeOwned>(
    path: &Path,
    schema: &str,
) -> Result<(FileHeader, Vec<T>)> {
    let (header, records) = read_jsonl(path)?;
    let header = header.ok_or_else(|| Error::Schema {
        expected: schema.to_string(),
        found: format!("{}: no header line", path.display()),
    })?;
    if header.schema != schema {
        return Err(Error::Schema {
            expected: schema.to_string(),
            found: header.schema,
        });
    }
    Ok((header, records))
}
