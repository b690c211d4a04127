//! Append-only JSON-lines vote log.
//!
//! Each accepted vote is one line, written and fsynced before the request
//! is acknowledged. Votes are idempotent per `(query_id, chunk_id, label)`;
//! the set of logged keys is rebuilt from the file at startup.

use std::collections::{HashSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Up,
    Down,
}

/// `POST /v1/vote` body; the timestamp is assigned by the server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoteRequest {
    pub query_id: String,
    pub chunk_id: u64,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client: Option<String>,
    /// Accepted for symmetry with [`VoteRecord`] and ignored.
    #[serde(default, skip_serializing)]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub query_id: String,
    pub chunk_id: u64,
    pub label: Label,
    /// UTC milliseconds.
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client: Option<String>,
    /// False when the query id was not in the recent-query registry.
    pub known_query: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteAck {
    /// False for a duplicate that was acknowledged without a new record.
    pub recorded: bool,
    pub known_query: bool,
}

type Key = (String, u64, Label);

struct Inner {
    file: File,
    seen: HashSet<Key>,
}

pub struct VoteLog {
    path: PathBuf,
    inner: Mutex<Inner>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl VoteLog {
    /// Opens or creates the log. A torn final line (a write that never
    /// reached its fsync) is cut off so later appends start cleanly.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut seen = HashSet::new();
        let mut good_len = 0u64;
        if let Ok(f) = File::open(path) {
            let mut reader = BufReader::new(f);
            let mut line = String::new();
            loop {
                line.clear();
                let n = reader.read_line(&mut line)?;
                if n == 0 {
                    break;
                }
                if !line.ends_with('\n') {
                    tracing::warn!(path = %path.display(), "dropping torn final vote record");
                    break;
                }
                good_len += n as u64;
                match serde_json::from_str::<VoteRecord>(&line) {
                    Ok(r) => {
                        seen.insert((r.query_id, r.chunk_id, r.label));
                    }
                    Err(e) => tracing::warn!(path = %path.display(), error = %e, "unparseable vote record"),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() != good_len {
            file.set_len(good_len)?;
            file.sync_all()?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            inner: Mutex::new(Inner { file, seen }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Distinct votes on record.
    pub fn len(&self) -> usize {
        self.inner.lock().seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends and fsyncs `vote` unless the same key is already logged.
    pub fn append(&self, vote: VoteRequest, known_query: bool) -> std::io::Result<VoteAck> {
        let key = (vote.query_id.clone(), vote.chunk_id, vote.label);
        let mut inner = self.inner.lock();
        if inner.seen.contains(&key) {
            return Ok(VoteAck {
                recorded: false,
                known_query,
            });
        }
        let record = VoteRecord {
            query_id: vote.query_id,
            chunk_id: vote.chunk_id,
            label: vote.label,
            timestamp: now_ms(),
            client: vote.client,
            known_query,
        };
        let mut line = serde_json::to_vec(&record).map_err(std::io::Error::other)?;
        line.push(b'\n');
        inner.file.write_all(&line)?;
        inner.file.sync_data()?;
        inner.seen.insert(key);
        Ok(VoteAck {
            recorded: true,
            known_query,
        })
    }

    pub fn sync(&self) -> std::io::Result<()> {
        self.inner.lock().file.sync_all()
    }
}

/// Every parseable record in a vote log file.
pub fn read_records(path: &Path) -> std::io::Result<Vec<VoteRecord>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect())
}

/// The most recent `capacity` query ids, oldest evicted first.
pub struct QueryRegistry {
    capacity: usize,
    inner: Mutex<(HashSet<String>, VecDeque<String>)>,
}

impl QueryRegistry {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            inner: Mutex::new((HashSet::new(), VecDeque::new())),
        }
    }

    pub fn insert(&self, id: String) {
        let mut g = self.inner.lock();
        let (set, order) = &mut *g;
        if !set.insert(id.clone()) {
            return;
        }
        order.push_back(id);
        while order.len() > self.capacity {
            if let Some(old) = order.pop_front() {
                set.remove(&old);
            }
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.inner.lock().0.contains(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vote(q: &str, c: u64, label: Label) -> VoteRequest {
        VoteRequest {
            query_id: q.into(),
            chunk_id: c,
            label,
            client: None,
            timestamp: None,
        }
    }

    #[test]
    fn duplicates_ack_without_new_records_across_restarts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("votes.jsonl");
        let log = VoteLog::open(&path).unwrap();
        assert!(log.append(vote("a", 1, Label::Up), true).unwrap().recorded);
        assert!(!log.append(vote("a", 1, Label::Up), true).unwrap().recorded);
        assert!(log.append(vote("a", 1, Label::Down), false).unwrap().recorded);
        drop(log);
        let log = VoteLog::open(&path).unwrap();
        assert_eq!(log.len(), 2);
        assert!(!log.append(vote("a", 1, Label::Up), true).unwrap().recorded);
        let records = read_records(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert!(records[0].known_query && !records[1].known_query);
    }

    #[test]
    fn torn_tail_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("votes.jsonl");
        VoteLog::open(&path).unwrap().append(vote("a", 1, Label::Up), true).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"query_id\":\"b\",\"chu").unwrap();
        drop(f);
        let log = VoteLog::open(&path).unwrap();
        log.append(vote("c", 2, Label::Down), true).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(read_records(&path).unwrap().len(), 2);
    }

    #[test]
    fn registry_is_bounded_fifo() {
        let r = QueryRegistry::new(2);
        for id in ["a", "b", "c"] {
            r.insert(id.into());
        }
        assert!(!r.contains("a"));
        assert!(r.contains("b") && r.contains("c"));
    }
}
