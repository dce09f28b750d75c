use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, Usage};
use crate::forge::Conversation;

const CACHE_FILE: &str = "responses.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub key: String,
    pub model_name: String,
    pub text: String,
    pub usage: Usage,
}

/// Hash of (model name, version, temperature, canonical conversation).
pub fn cache_key(config: &ModelConfig, conversation: &Conversation) -> String {
    let mut h = Sha256::new();
    for part in [config.model_name.as_bytes(), config.version.as_bytes()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    h.update(config.temperature.to_bits().to_le_bytes());
    h.update(conversation.canonical_json().as_bytes());
    hex::encode(h.finalize())
}

/// Append-only key -> response store backed by one JSON-lines file.
///
/// Lookups take a shared lock; appends are serialized through the file lock.
#[derive(Debug)]
pub struct ResponseCache {
    path: PathBuf,
    entries: RwLock<HashMap<String, CachedResponse>>,
    file: Mutex<File>,
}

impl ResponseCache {
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(CACHE_FILE);
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                // a torn final line from an interrupted write is skipped
                if let Ok(rec) = serde_json::from_str::<CachedResponse>(&line) {
                    entries.insert(rec.key.clone(), rec);
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        let contents_len = file.metadata()?.len();
        if contents_len > 0 {
            let bytes = fs::read(&path)?;
            if bytes.last() != Some(&b'\n') {
                file.write_all(b"\n")?;
            }
        }
        Ok(Self {
            path,
            entries: RwLock::new(entries),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<CachedResponse> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn put(&self, rec: CachedResponse) -> std::io::Result<()> {
        let mut line = serde_json::to_string(&rec).expect("cache record serializes");
        line.push('\n');
        let mut file = self.file.lock().unwrap();
        file.write_all(line.as_bytes())?;
        file.flush()?;
        self.entries.write().unwrap().insert(rec.key.clone(), rec);
        Ok(())
    }
}
