use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendReply, LlmRequest};
use crate::error::{Error, Result};

const SUMMARY_CHARS: usize = 120;

/// One line of the replay cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub digest: String,
    pub slot: String,
    /// First characters of the prompt, for people editing fixtures by hand.
    pub request_summary: String,
    pub response: String,
    #[serde(default)]
    pub input_tokens: u64,
    #[serde(default)]
    pub output_tokens: u64,
}

impl CacheRecord {
    pub fn new(request: &LlmRequest, reply: &BackendReply) -> Self {
        CacheRecord {
            digest: request.digest(),
            slot: request.slot.as_str().to_string(),
            request_summary: request.prompt.chars().take(SUMMARY_CHARS).collect(),
            response: reply.text.clone(),
            input_tokens: reply.usage.input,
            output_tokens: reply.usage.output,
        }
    }
}

struct Inner {
    entries: HashMap<String, CacheRecord>,
    file: Option<File>,
}

/// Content-addressed response store, persisted as an append-only JSON Lines
/// file. Later lines win when a digest appears twice.
pub struct ReplayCache {
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
}

impl ReplayCache {
    pub fn in_memory() -> Self {
        ReplayCache {
            path: None,
            inner: Mutex::new(Inner {
                entries: HashMap::new(),
                file: None,
            }),
        }
    }

    /// Opens (creating if needed) a cache file. Unparseable lines are skipped
    /// with a warning.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(rec) => {
                        entries.insert(rec.digest.clone(), rec);
                    }
                    Err(e) => log::warn!("{}:{}: skipping bad cache line: {e}", path.display(), i + 1),
                }
            }
        } else if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(ReplayCache {
            path: Some(path.to_path_buf()),
            inner: Mutex::new(Inner {
                entries,
                file: Some(file),
            }),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn lookup(&self, digest: &str) -> Option<CacheRecord> {
        self.inner.lock().unwrap().entries.get(digest).cloned()
    }

    pub fn store(&self, record: CacheRecord) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(file) = inner.file.as_mut() {
            let mut line = serde_json::to_string(&record)?;
            line.push('\n');
            let path = self.path.clone().unwrap_or_default();
            file.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))?;
            file.flush().map_err(|e| Error::io(&path, e))?;
        }
        inner.entries.insert(record.digest.clone(), record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::TokenUsage;

    #[test]
    fn store_then_lookup() {
        let c = ReplayCache::in_memory();
        let req = LlmRequest::agent("p");
        let reply = BackendReply {
            text: "r\u{1F600}\n".into(),
            usage: TokenUsage { input: 1, output: 2 },
        };
        c.store(CacheRecord::new(&req, &reply)).unwrap();
        assert_eq!(c.lookup(&req.digest()).unwrap().response, reply.text);
    }

    #[test]
    fn corrupt_lines_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        {
            let c = ReplayCache::open(&path).unwrap();
            let req = LlmRequest::agent("a");
            c.store(CacheRecord::new(
                &req,
                &BackendReply { text: "A".into(), usage: TokenUsage::default() },
            ))
            .unwrap();
        }
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        std::fs::write(&path, text).unwrap();
        let c = ReplayCache::open(&path).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.lookup(&LlmRequest::agent("a").digest()).unwrap().response, "A");
    }
}
