use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use dsm_quality::SessionRecord;

use crate::store::{list_sessions, CloudRecord, Store};

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("no sessions match the filter")]
    NoSessions,
    #[error("session {session} line {line}: {reason}")]
    Corrupt {
        session: String,
        line: usize,
        reason: String,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Exact session id, or a prefix when written with a trailing `*`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SessionFilter(pub Option<String>);

impl SessionFilter {
    pub fn all() -> Self {
        SessionFilter(None)
    }

    pub fn matches(&self, id: &str) -> bool {
        match &self.0 {
            None => true,
            Some(f) => match f.strip_suffix('*') {
                Some(prefix) => id.starts_with(prefix),
                None => id == f,
            },
        }
    }
}

/// Index of the label nearest to `t`; ties go to the earlier label.
fn nearest(labels: &[(i64, u8)], t: i64) -> Option<u8> {
    if labels.is_empty() {
        return None;
    }
    let i = labels.partition_point(|(lt, _)| *lt < t);
    let best = match (i.checked_sub(1), labels.get(i)) {
        (Some(a), Some(b)) => {
            if t - labels[a].0 <= b.0 - t {
                a
            } else {
                i
            }
        }
        (Some(a), None) => a,
        (None, _) => i,
    };
    Some(labels[best].1)
}

/// Feature records of the matching sessions, each labeled with the
/// nearest ground-truth label of its session, ordered by (session, t_us).
pub fn export_dataset(root: &Path, filter: &SessionFilter) -> Result<Vec<SessionRecord>, ExportError> {
    let sessions: Vec<_> = list_sessions(root)?
        .into_iter()
        .filter(|s| filter.matches(&s.id))
        .collect();
    if sessions.is_empty() {
        return Err(ExportError::NoSessions);
    }
    let mut out = Vec::new();
    for s in sessions {
        let mut labels = Vec::new();
        let mut feats = Vec::new();
        let f = File::open(Store::session_path(root, &s.id))?;
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let r: CloudRecord = serde_json::from_str(&line).map_err(|e| ExportError::Corrupt {
                session: s.id.clone(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            if r.is_label() {
                let l = r.values.get("label").copied().unwrap_or(f64::NAN);
                if l != 0.0 && l != 1.0 {
                    return Err(ExportError::Corrupt {
                        session: s.id.clone(),
                        line: i + 1,
                        reason: "label must be 0 or 1".into(),
                    });
                }
                labels.push((r.t_us, l as u8));
            } else {
                feats.push(r);
            }
        }
        labels.sort();
        feats.sort_by_key(|r| r.t_us);
        out.extend(feats.into_iter().map(|r| SessionRecord {
            session_id: s.id.clone(),
            t_us: r.t_us,
            label: nearest(&labels, r.t_us),
            features: r.values,
        }));
    }
    Ok(out)
}

pub fn write_export(records: &[SessionRecord], mut w: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_label_ties_go_earlier() {
        let l = [(500_000, 0), (1_500_000, 1)];
        assert_eq!(nearest(&l, 0), Some(0));
        assert_eq!(nearest(&l, 1_000_000), Some(0));
        assert_eq!(nearest(&l, 1_000_001), Some(1));
        assert_eq!(nearest(&l, 9_000_000), Some(1));
        assert_eq!(nearest(&[], 1), None);
    }

    #[test]
    fn filter_prefix() {
        let f = SessionFilter(Some("camp-*".into()));
        assert!(f.matches("camp-01"));
        assert!(!f.matches("run"));
        assert!(SessionFilter(Some("run".into())).matches("run"));
        assert!(!SessionFilter(Some("run".into())).matches("run2"));
    }
}
