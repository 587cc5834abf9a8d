//! Three-way merge of store subtrees.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use super::codec::{Atom, ValueList};
use super::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Versioned {
    pub value: String,
    /// Commit id that last wrote the value in its source store.
    pub commit: u64,
}

/// Copy of every key under `root` at a given commit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub root: Path,
    pub commit: u64,
    pub entries: BTreeMap<Path, Versioned>,
}

impl Snapshot {
    pub fn empty(root: Path) -> Self {
        Snapshot {
            root,
            commit: 0,
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, path: &Path) -> Option<&str> {
        self.entries.get(path).map(|v| v.value.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MergeConflict {
    #[error("snapshots rooted at {0} and {1}")]
    RootMismatch(Path, Path),
    #[error("conflict at {path}: {message}")]
    Conflict { path: Path, message: String },
}

/// Resolves a key changed on both sides. Arguments are `(path, ancestor,
/// mine, theirs)`; returning `None` deletes the key.
pub type CustomMerge = Arc<
    dyn Fn(&Path, Option<&Versioned>, Option<&Versioned>, Option<&Versioned>)
            -> Result<Option<Versioned>, MergeConflict>
        + Send
        + Sync,
>;

#[derive(Clone)]
pub enum MergeKind {
    /// Order-preserving union of log entries, deduplicated by entry id.
    Log,
    /// Larger `(commit, value)` wins; a modification beats a deletion.
    LastWriter,
    Custom(CustomMerge),
}

impl fmt::Debug for MergeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MergeKind::Log => f.write_str("Log"),
            MergeKind::LastWriter => f.write_str("LastWriter"),
            MergeKind::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Chooses a merge function per key. The longest matching prefix rule wins;
/// otherwise keys whose last segment is `log` merge as logs and everything
/// else as last-writer.
#[derive(Debug, Clone, Default)]
pub struct MergePolicy {
    rules: Vec<(Path, MergeKind)>,
}

impl MergePolicy {
    pub fn with_rule(mut self, prefix: Path, kind: MergeKind) -> Self {
        self.rules.push((prefix, kind));
        self
    }

    pub fn kind_for(&self, path: &Path) -> MergeKind {
        self.rules
            .iter()
            .filter(|(p, _)| path.starts_with(p))
            .max_by_key(|(p, _)| p.depth())
            .map(|(_, k)| k.clone())
            .unwrap_or(if path.last() == "log" {
                MergeKind::Log
            } else {
                MergeKind::LastWriter
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LogEntry {
    /// Unique per writing instance, e.g. `<instance>:<seq>`.
    pub id: String,
    pub ts_us: u64,
    pub desc: String,
}

/// Logs are stored as a list of `S(id|ts_us|desc)` atoms.
pub fn encode_log(entries: &[LogEntry]) -> String {
    ValueList::new(
        entries
            .iter()
            .map(|e| Atom::str(format!("{}|{}|{}", e.id, e.ts_us, e.desc)))
            .collect(),
    )
    .to_string()
}

pub fn decode_log(value: &str) -> Option<Vec<LogEntry>> {
    let list: ValueList = value.parse().ok()?;
    list.atoms()
        .iter()
        .map(|a| {
            let mut parts = a.as_str()?.splitn(3, '|');
            let id = parts.next()?.to_string();
            let ts_us = parts.next()?.parse().ok()?;
            let desc = parts.next()?.to_string();
            Some(LogEntry { id, ts_us, desc })
        })
        .collect()
}

fn merge_logs(
    path: &Path,
    mine: Option<&Versioned>,
    theirs: Option<&Versioned>,
) -> Result<Option<Versioned>, MergeConflict> {
    let decode = |v: Option<&Versioned>| match v {
        None => Ok(Vec::new()),
        Some(v) => decode_log(&v.value).ok_or_else(|| MergeConflict::Conflict {
            path: path.clone(),
            message: "value is not a log".into(),
        }),
    };
    let mut merged = decode(mine)?;
    let mut seen: HashSet<String> = merged.iter().map(|e| e.id.clone()).collect();
    for e in decode(theirs)? {
        if seen.insert(e.id.clone()) {
            merged.push(e);
        }
    }
    let commit = mine
        .map(|v| v.commit)
        .max(theirs.map(|v| v.commit))
        .unwrap_or(0);
    Ok(Some(Versioned {
        value: encode_log(&merged),
        commit,
    }))
}

fn last_writer(mine: Option<&Versioned>, theirs: Option<&Versioned>) -> Option<Versioned> {
    match (mine, theirs) {
        (Some(a), Some(b)) => {
            let a_key = (a.commit, &a.value);
            let b_key = (b.commit, &b.value);
            Some(if a_key >= b_key { a.clone() } else { b.clone() })
        }
        (Some(v), None) | (None, Some(v)) => Some(v.clone()),
        (None, None) => None,
    }
}

/// Three-way merge. Keys changed on one side take that side; keys changed on
/// both sides go through the policy's merge function.
pub fn merge(
    mine: &Snapshot,
    theirs: &Snapshot,
    ancestor: &Snapshot,
    policy: &MergePolicy,
) -> Result<Snapshot, MergeConflict> {
    for other in [theirs, ancestor] {
        if other.root != mine.root {
            return Err(MergeConflict::RootMismatch(
                mine.root.clone(),
                other.root.clone(),
            ));
        }
    }
    let same = |a: Option<&Versioned>, b: Option<&Versioned>| {
        a.map(|v| &v.value) == b.map(|v| &v.value)
    };
    let keys: BTreeSet<&Path> = mine
        .entries
        .keys()
        .chain(theirs.entries.keys())
        .chain(ancestor.entries.keys())
        .collect();
    let mut entries = BTreeMap::new();
    for path in keys {
        let anc = ancestor.entries.get(path);
        let m = mine.entries.get(path);
        let t = theirs.entries.get(path);
        let resolved = if same(m, t) {
            last_writer(m, t)
        } else if same(m, anc) {
            t.cloned()
        } else if same(t, anc) {
            m.cloned()
        } else {
            match policy.kind_for(path) {
                MergeKind::Log => merge_logs(path, m, t)?,
                MergeKind::LastWriter => last_writer(m, t),
                MergeKind::Custom(f) => f(path, anc, m, t)?,
            }
        };
        if let Some(v) = resolved {
            entries.insert(path.clone(), v);
        }
    }
    Ok(Snapshot {
        root: mine.root.clone(),
        commit: mine.commit.max(theirs.commit),
        entries,
    })
}
