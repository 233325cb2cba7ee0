//! Append-only prediction cache keyed by content hash.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{self, FileHeader};

pub const CACHE_SCHEMA: &str = "mmdebias/prediction-cache";

pub fn cache_key(predictor: &str, sample_id: &str, view: &str, prompt_version: &str) -> String {
    util::digest_hex(&[
        predictor.as_bytes(),
        b"\x00",
        sample_id.as_bytes(),
        b"\x00",
        view.as_bytes(),
        b"\x00",
        prompt_version.as_bytes(),
    ])
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    key: String,
    scores: Vec<f64>,
}

/// Concurrent readers, one writer at a time. Entries are appended to the
/// backing file as they arrive, so an interrupted run keeps its work.
#[derive(Debug)]
pub struct PredictionCache {
    map: RwLock<HashMap<String, Vec<f64>>>,
    file: Mutex<Option<File>>,
    path: Option<PathBuf>,
}

impl PredictionCache {
    pub fn in_memory() -> Self {
        Self {
            map: RwLock::new(HashMap::new()),
            file: Mutex::new(None),
            path: None,
        }
    }

    /// Opens (or creates) a cache file. A torn final line from an
    /// interrupted write is ignored.
    pub fn open(path: &Path) -> Result<Self> {
        let mut map = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            let lines: Vec<String> = BufReader::new(f)
                .lines()
                .collect::<std::io::Result<_>>()
                .map_err(|e| Error::io(path, e))?;
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                if i == 0 {
                    if let Ok(h) = serde_json::from_str::<FileHeader>(line) {
                        if h.schema != CACHE_SCHEMA {
                            return Err(Error::Schema {
                                expected: CACHE_SCHEMA.into(),
                                found: h.schema,
                            });
                        }
                        continue;
                    }
                }
                match serde_json::from_str::<Entry>(line) {
                    Ok(e) => {
                        map.insert(e.key, e.scores);
                    }
                    Err(e) if i + 1 == lines.len() => {
                        log::warn!("{}: ignoring torn last line: {e}", path.display());
                    }
                    Err(e) => {
                        return Err(Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
                    }
                }
            }
        } else {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut header = serde_json::to_vec(&FileHeader::new(CACHE_SCHEMA, ""))?;
            header.push(b'\n');
            std::fs::write(path, header).map_err(|e| Error::io(path, e))?;
        }
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            map: RwLock::new(map),
            file: Mutex::new(Some(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<Vec<f64>> {
        self.map.read().ok()?.get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.map.read().map(|m| m.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, key: String, scores: Vec<f64>) -> Result<()> {
        let mut file = self
            .file
            .lock()
            .map_err(|_| Error::Backend("cache writer poisoned".into()))?;
        if let Some(f) = file.as_mut() {
            let mut line = serde_json::to_vec(&Entry {
                key: key.clone(),
                scores: scores.clone(),
            })?;
            line.push(b'\n');
            let path = self.path.clone().unwrap_or_default();
            f.write_all(&line).map_err(|e| Error::io(&path, e))?;
        }
        self.map
            .write()
            .map_err(|_| Error::Backend("cache map poisoned".into()))?
            .insert(key, scores);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_depends_on_every_part() {
        let base = cache_key("m", "s", "v", "p1");
        assert_ne!(base, cache_key("m2", "s", "v", "p1"));
        assert_ne!(base, cache_key("m", "s2", "v", "p1"));
        assert_ne!(base, cache_key("m", "s", "v2", "p1"));
        assert_ne!(base, cache_key("m", "s", "v", "p2"));
        // separators keep field boundaries apart
        assert_ne!(cache_key("ab", "c", "", ""), cache_key("a", "bc", "", ""));
    }

    #[test]
    fn persists_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        {
            let c = PredictionCache::open(&path).unwrap();
            c.insert("k1".into(), vec![0.25, 0.75]).unwrap();
            assert_eq!(c.get("k1"), Some(vec![0.25, 0.75]));
        }
        let c = PredictionCache::open(&path).unwrap();
        assert_eq!(c.get("k1"), Some(vec![0.25, 0.75]));
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn torn_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        PredictionCache::open(&path)
            .unwrap()
            .insert("k".into(), vec![1.0, 0.0])
            .unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"key\":\"x\",\"sco").unwrap();
        let c = PredictionCache::open(&path).unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn concurrent_writers() {
        let c = std::sync::Arc::new(PredictionCache::in_memory());
        std::thread::scope(|s| {
            for t in 0..4 {
                let c = c.clone();
                s.spawn(move || {
                    for i in 0..50 {
                        c.insert(format!("{t}-{i}"), vec![1.0]).unwrap();
                    }
                });
            }
        });
        assert_eq!(c.len(), 200);
    }
}
