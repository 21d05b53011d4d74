use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Records on this channel carry ground-truth labels rather than features.
pub const LABEL_CHANNEL: &str = "labels";

const DEFAULT_SESSION: &str = "unassigned";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub node_id: String,
    pub channel: String,
}

/// One stored line. Mirrors the gateway's record shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudRecord {
    pub t_us: i64,
    pub source: Source,
    pub values: BTreeMap<String, f64>,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

impl CloudRecord {
    pub fn session(&self) -> &str {
        self.tags
            .get("session")
            .map(String::as_str)
            .unwrap_or(DEFAULT_SESSION)
    }

    pub fn is_label(&self) -> bool {
        self.source.channel == LABEL_CHANNEL
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("malformed batch: {0}")]
    MalformedBatch(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub records: usize,
}

pub fn batch_id(body: &[u8]) -> String {
    hex::encode(Sha256::digest(body))
}

fn valid_session(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 64
        && s
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || b == b'.')
        && !s.starts_with('.')
}

/// Flat-file store: `sessions/<id>.ndjson` plus an index of accepted batch ids.
pub struct Store {
    root: PathBuf,
    seen: HashSet<String>,
    index: File,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> std::io::Result<Store> {
        let root = root.into();
        fs::create_dir_all(root.join("sessions"))?;
        let idx_path = root.join("batches.idx");
        let mut seen = HashSet::new();
        if idx_path.exists() {
            for line in BufReader::new(File::open(&idx_path)?).lines() {
                let line = line?;
                if !line.is_empty() {
                    seen.insert(line);
                }
            }
        }
        let index = OpenOptions::new().create(true).append(true).open(&idx_path)?;
        Ok(Store { root, seen, index })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_path(root: &Path, session: &str) -> PathBuf {
        root.join("sessions").join(format!("{session}.ndjson"))
    }

    /// Stores every record of the batch, or none of them if any line is
    /// malformed. Returns the number of records appended (0 for a duplicate).
    pub fn ingest(&mut self, claimed_id: Option<&str>, body: &[u8]) -> Result<(String, usize, bool), IngestError> {
        let id = batch_id(body);
        if let Some(c) = claimed_id {
            if c != id {
                return Err(IngestError::MalformedBatch(format!(
                    "batch id {c} does not match content hash {id}"
                )));
            }
        }
        if self.seen.contains(&id) {
            return Ok((id, 0, true));
        }
        let text = std::str::from_utf8(body)
            .map_err(|_| IngestError::MalformedBatch("body is not UTF-8".into()))?;
        let mut by_session: BTreeMap<String, Vec<&str>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: CloudRecord = serde_json::from_str(line)
                .map_err(|e| IngestError::MalformedBatch(format!("line {}: {e}", i + 1)))?;
            if r.values.is_empty() {
                return Err(IngestError::MalformedBatch(format!("line {}: no values", i + 1)));
            }
            if !valid_session(r.session()) {
                return Err(IngestError::MalformedBatch(format!(
                    "line {}: bad session id {:?}",
                    i + 1,
                    r.session()
                )));
            }
            by_session.entry(r.session().to_owned()).or_default().push(line);
        }
        let mut n = 0;
        for (session, lines) in &by_session {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(Self::session_path(&self.root, session))?;
            let mut buf = String::new();
            for l in lines {
                buf.push_str(l);
                buf.push('\n');
            }
            f.write_all(buf.as_bytes())?;
            n += lines.len();
        }
        writeln!(self.index, "{id}")?;
        self.index.flush()?;
        self.seen.insert(id.clone());
        Ok((id, n, false))
    }

    pub fn sessions(&self) -> std::io::Result<Vec<SessionInfo>> {
        list_sessions(&self.root)
    }
}

pub fn list_sessions(root: &Path) -> std::io::Result<Vec<SessionInfo>> {
    let dir = root.join("sessions");
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.extension().and_then(|x| x.to_str()) != Some("ndjson") {
            continue;
        }
        let Some(id) = p.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let records = BufReader::new(File::open(&p)?)
            .lines()
            .filter(|l| l.as_ref().map(|l| !l.is_empty()).unwrap_or(true))
            .count();
        out.push(SessionInfo {
            id: id.to_owned(),
            records,
        });
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}
