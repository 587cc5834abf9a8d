//! Versioned hierarchical key-value store with watches and three-way merge.
//!
//! Each simulated host owns one [`Store`]. Every mutation produces a
//! [`Commit`] with a strictly increasing id, and watch callbacks run
//! synchronously before the mutating call returns, so all observers see
//! commits in the same total order.

mod codec;
mod merge;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use codec::{Atom, CodecError, ValueList};
pub use merge::{
    decode_log, encode_log, merge, CustomMerge, LogEntry, MergeConflict, MergeKind, MergePolicy,
    Snapshot, Versioned,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PathError {
    #[error("path must have at least one segment")]
    Empty,
    #[error("invalid path segment {0:?}")]
    BadSegment(String),
}

/// A `/`-separated key such as `jitsu/vms/www/state`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Path(Vec<String>);

fn valid_segment(s: &str) -> bool {
    !s.is_empty() && !s.contains(['/', '=', '\n', '\r'])
}

impl Path {
    pub fn new<I, S>(segments: I) -> Result<Self, PathError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let segs: Vec<String> = segments.into_iter().map(Into::into).collect();
        if segs.is_empty() {
            return Err(PathError::Empty);
        }
        if let Some(bad) = segs.iter().find(|s| !valid_segment(s)) {
            return Err(PathError::BadSegment(bad.clone()));
        }
        Ok(Path(segs))
    }

    pub fn segments(&self) -> &[String] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn last(&self) -> &str {
        self.0.last().map(String::as_str).unwrap_or_default()
    }

    /// Appends one or more segments given as a relative `a/b` string.
    pub fn join(&self, rel: &str) -> Result<Path, PathError> {
        let mut segs = self.0.clone();
        for s in rel.split('/') {
            if !valid_segment(s) {
                return Err(PathError::BadSegment(s.to_string()));
            }
            segs.push(s.to_string());
        }
        Ok(Path(segs))
    }

    pub fn parent(&self) -> Option<Path> {
        (self.0.len() > 1).then(|| Path(self.0[..self.0.len() - 1].to_vec()))
    }

    /// True when `self` equals `prefix` or lies underneath it.
    pub fn starts_with(&self, prefix: &Path) -> bool {
        self.0.len() >= prefix.0.len() && self.0[..prefix.0.len()] == prefix.0[..]
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("/"))
    }
}

impl FromStr for Path {
    type Err = PathError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Path::new(s.trim_matches('/').split('/'))
    }
}

/// Principal performing a read or write.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Identity(String);

impl Identity {
    pub fn new(name: impl Into<String>) -> Self {
        Identity(name.into())
    }

    /// The control-plane agent running in a host's management domain.
    pub fn orchestrator(host: impl fmt::Display) -> Self {
        Identity(format!("jitsu@{host}"))
    }

    pub fn instance(name: &str) -> Self {
        Identity(format!("vm:{name}"))
    }

    pub fn service(name: &str) -> Self {
        Identity(format!("svc:{name}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Unix-like permissions attached to a subtree. The longest registered
/// prefix covering a path decides; paths with no scope are admin-only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessScope {
    pub owner: Identity,
    pub readers: BTreeSet<Identity>,
    pub writers: BTreeSet<Identity>,
}

impl AccessScope {
    pub fn owned_by(owner: Identity) -> Self {
        AccessScope {
            owner,
            readers: BTreeSet::new(),
            writers: BTreeSet::new(),
        }
    }

    pub fn with_writer(mut self, id: Identity) -> Self {
        self.readers.insert(id.clone());
        self.writers.insert(id);
        self
    }

    pub fn with_reader(mut self, id: Identity) -> Self {
        self.readers.insert(id);
        self
    }

    pub fn can_write(&self, id: &Identity) -> bool {
        *id == self.owner || self.writers.contains(id)
    }

    pub fn can_read(&self, id: &Identity) -> bool {
        self.can_write(id) || self.readers.contains(id)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("{writer} may not write {path}")]
    PermissionDenied { writer: Identity, path: Path },
    #[error("{reader} may not read {path}")]
    ReadDenied { reader: Identity, path: Path },
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("malformed dump line {line}: {text:?}")]
    BadDumpLine { line: usize, text: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Commit {
    pub id: u64,
    /// One parent for ordinary commits, two for merges. Empty for the first.
    pub parents: Vec<u64>,
    pub changed: BTreeSet<Path>,
    pub writer: Identity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Change {
    Set(String),
    Removed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WatchEvent {
    pub commit: u64,
    pub path: Path,
    pub change: Change,
    pub writer: Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WatchMode {
    Key,
    Subtree,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WatchHandle {
    id: u64,
    pub target: Path,
    pub mode: WatchMode,
}

pub type WatchCallback = Box<dyn FnMut(&WatchEvent) + Send>;

struct Watch {
    handle: WatchHandle,
    callback: WatchCallback,
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    commit: u64,
}

enum Op {
    Put(Path, String),
    Remove(Path),
}

/// Batch of operations applied atomically as one commit.
#[derive(Default)]
pub struct Transaction {
    ops: Vec<Op>,
}

impl Transaction {
    pub fn put(&mut self, path: Path, value: impl Into<String>) -> &mut Self {
        self.ops.push(Op::Put(path, value.into()));
        self
    }

    pub fn remove_subtree(&mut self, path: Path) -> &mut Self {
        self.ops.push(Op::Remove(path));
        self
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}

pub struct Store {
    admin: Identity,
    data: BTreeMap<Path, Entry>,
    scopes: BTreeMap<Path, AccessScope>,
    history: Vec<Commit>,
    next_commit: u64,
    watches: Vec<Watch>,
    next_watch: u64,
}

impl fmt::Debug for Store {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Store")
            .field("admin", &self.admin)
            .field("keys", &self.data.len())
            .field("head", &self.head())
            .field("watches", &self.watches.len())
            .finish()
    }
}

impl Store {
    /// `admin` may read and write every path (the local orchestrator).
    pub fn new(admin: Identity) -> Self {
        Store {
            admin,
            data: BTreeMap::new(),
            scopes: BTreeMap::new(),
            history: Vec::new(),
            next_commit: 1,
            watches: Vec::new(),
            next_watch: 1,
        }
    }

    pub fn admin(&self) -> &Identity {
        &self.admin
    }

    /// Id of the latest commit, 0 before the first write.
    pub fn head(&self) -> u64 {
        self.next_commit - 1
    }

    pub fn history(&self) -> &[Commit] {
        &self.history
    }

    pub fn set_scope(&mut self, prefix: Path, scope: AccessScope) {
        self.scopes.insert(prefix, scope);
    }

    pub fn clear_scope(&mut self, prefix: &Path) -> Option<AccessScope> {
        self.scopes.remove(prefix)
    }

    pub fn scope_for(&self, path: &Path) -> Option<&AccessScope> {
        self.scopes
            .iter()
            .filter(|(p, _)| path.starts_with(p))
            .max_by_key(|(p, _)| p.depth())
            .map(|(_, s)| s)
    }

    pub fn can_write(&self, writer: &Identity, path: &Path) -> bool {
        *writer == self.admin || self.scope_for(path).is_some_and(|s| s.can_write(writer))
    }

    pub fn can_read(&self, reader: &Identity, path: &Path) -> bool {
        *reader == self.admin || self.scope_for(path).is_some_and(|s| s.can_read(reader))
    }

    pub fn get(&self, path: &Path) -> Option<&str> {
        self.data.get(path).map(|e| e.value.as_str())
    }

    /// Permission-checked read.
    pub fn read_as(&self, path: &Path, reader: &Identity) -> Result<Option<&str>, StoreError> {
        if !self.can_read(reader, path) {
            return Err(StoreError::ReadDenied {
                reader: reader.clone(),
                path: path.clone(),
            });
        }
        Ok(self.get(path))
    }

    /// Commit id that last wrote `path`.
    pub fn version(&self, path: &Path) -> Option<u64> {
        self.data.get(path).map(|e| e.commit)
    }

    /// All keys at or below `prefix`, in key order.
    pub fn list<'a>(&'a self, prefix: &'a Path) -> impl Iterator<Item = (&'a Path, &'a str)> + 'a {
        self.data
            .range(prefix.clone()..)
            .take_while(move |(p, _)| p.starts_with(prefix))
            .map(|(p, e)| (p, e.value.as_str()))
    }

    /// Names of the immediate children of `prefix`.
    pub fn children(&self, prefix: &Path) -> BTreeSet<String> {
        self.list(prefix)
            .filter_map(|(p, _)| p.segments().get(prefix.depth()).cloned())
            .collect()
    }

    pub fn put(
        &mut self,
        path: Path,
        value: impl Into<String>,
        writer: &Identity,
    ) -> Result<Commit, StoreError> {
        let mut tx = Transaction::default();
        tx.put(path, value);
        self.commit(tx, writer)
    }

    pub fn remove_subtree(&mut self, path: Path, writer: &Identity) -> Result<Commit, StoreError> {
        let mut tx = Transaction::default();
        tx.remove_subtree(path);
        self.commit(tx, writer)
    }

    pub fn transaction(
        &mut self,
        writer: &Identity,
        build: impl FnOnce(&mut Transaction),
    ) -> Result<Commit, StoreError> {
        let mut tx = Transaction::default();
        build(&mut tx);
        self.commit(tx, writer)
    }

    /// Applies `tx` atomically. Permission is checked for every affected path
    /// before anything changes; a rejected transaction leaves the store as it
    /// was.
    pub fn commit(&mut self, tx: Transaction, writer: &Identity) -> Result<Commit, StoreError> {
        let parents = if self.head() == 0 { vec![] } else { vec![self.head()] };
        self.apply(tx, writer, parents)
    }

    fn check_write(&self, tx: &Transaction, writer: &Identity) -> Result<(), StoreError> {
        let deny = |path: &Path| StoreError::PermissionDenied {
            writer: writer.clone(),
            path: path.clone(),
        };
        for op in &tx.ops {
            match op {
                Op::Put(p, _) => {
                    if !self.can_write(writer, p) {
                        return Err(deny(p));
                    }
                }
                Op::Remove(root) => {
                    if !self.can_write(writer, root) {
                        return Err(deny(root));
                    }
                    if let Some((p, _)) = self.list(root).find(|(p, _)| !self.can_write(writer, p)) {
                        return Err(deny(p));
                    }
                }
            }
        }
        Ok(())
    }

    fn apply(
        &mut self,
        tx: Transaction,
        writer: &Identity,
        parents: Vec<u64>,
    ) -> Result<Commit, StoreError> {
        self.check_write(&tx, writer)?;
        let id = self.next_commit;
        self.next_commit += 1;

        // Final change per key, plus the roots of removals for subtree watches.
        let mut changes: BTreeMap<Path, Change> = BTreeMap::new();
        let mut removed_roots: Vec<Path> = Vec::new();
        for op in tx.ops {
            match op {
                Op::Put(p, v) => {
                    self.data.insert(
                        p.clone(),
                        Entry {
                            value: v.clone(),
                            commit: id,
                        },
                    );
                    changes.insert(p, Change::Set(v));
                }
                Op::Remove(root) => {
                    let doomed: Vec<Path> = self.list(&root).map(|(p, _)| p.clone()).collect();
                    if doomed.is_empty() {
                        continue;
                    }
                    for p in doomed {
                        self.data.remove(&p);
                        changes.insert(p, Change::Removed);
                    }
                    removed_roots.push(root);
                }
            }
        }

        let commit = Commit {
            id,
            parents,
            changed: changes.keys().cloned().collect(),
            writer: writer.clone(),
        };
        self.history.push(commit.clone());
        self.notify(id, writer, &changes, &removed_roots);
        Ok(commit)
    }

    fn notify(
        &mut self,
        commit: u64,
        writer: &Identity,
        changes: &BTreeMap<Path, Change>,
        removed_roots: &[Path],
    ) {
        if self.watches.is_empty() || changes.is_empty() {
            return;
        }
        let mut watches = std::mem::take(&mut self.watches);
        for w in watches.iter_mut() {
            let target = &w.handle.target;
            let mut fire = |path: &Path, change: &Change| {
                (w.callback)(&WatchEvent {
                    commit,
                    path: path.clone(),
                    change: change.clone(),
                    writer: writer.clone(),
                })
            };
            match w.handle.mode {
                WatchMode::Key => {
                    if let Some(change) = changes.get(target) {
                        fire(target, change);
                    }
                }
                WatchMode::Subtree => {
                    // A removal reports its root once (or the watched root when
                    // the removal covers it); puts report each changed key.
                    let mut reported_removal: Vec<&Path> = Vec::new();
                    for root in removed_roots {
                        let covered = changes.iter().any(|(p, c)| {
                            *c == Change::Removed && p.starts_with(root) && p.starts_with(target)
                        });
                        if !covered {
                            continue;
                        }
                        let at = if root.starts_with(target) { root } else { target };
                        if !reported_removal.contains(&at) {
                            fire(at, &Change::Removed);
                            reported_removal.push(at);
                        }
                    }
                    for (p, c) in changes.range(target.clone()..) {
                        if !p.starts_with(target) {
                            break;
                        }
                        if let Change::Set(_) = c {
                            fire(p, c);
                        }
                    }
                }
            }
        }
        // Callbacks cannot reach the store, so no watch was added meanwhile.
        self.watches = watches;
    }

    pub fn watch_key(&mut self, path: Path, callback: WatchCallback) -> WatchHandle {
        self.add_watch(path, WatchMode::Key, callback)
    }

    pub fn watch_subtree(&mut self, path: Path, callback: WatchCallback) -> WatchHandle {
        self.add_watch(path, WatchMode::Subtree, callback)
    }

    fn add_watch(&mut self, target: Path, mode: WatchMode, callback: WatchCallback) -> WatchHandle {
        let handle = WatchHandle {
            id: self.next_watch,
            target,
            mode,
        };
        self.next_watch += 1;
        self.watches.push(Watch {
            handle: handle.clone(),
            callback,
        });
        handle
    }

    /// Returns false if the handle was not registered.
    pub fn unwatch(&mut self, handle: &WatchHandle) -> bool {
        let before = self.watches.len();
        self.watches.retain(|w| w.handle.id != handle.id);
        before != self.watches.len()
    }

    pub fn watch_count(&self) -> usize {
        self.watches.len()
    }

    /// Copy of the subtree at `root`, with per-key versions.
    pub fn snapshot(&self, root: &Path) -> Snapshot {
        let entries = self
            .data
            .range(root.clone()..)
            .take_while(|(p, _)| p.starts_with(root))
            .map(|(p, e)| {
                (
                    p.clone(),
                    Versioned {
                        value: e.value.clone(),
                        commit: e.commit,
                    },
                )
            })
            .collect();
        Snapshot {
            root: root.clone(),
            commit: self.head(),
            entries,
        }
    }

    /// Replaces the subtree at `merged.root` with `merged`, recording a merge
    /// commit whose parents are the local head and `other_parent`.
    pub fn commit_merge(
        &mut self,
        merged: &Snapshot,
        other_parent: u64,
        writer: &Identity,
    ) -> Result<Commit, StoreError> {
        let current = self.snapshot(&merged.root);
        let mut tx = Transaction::default();
        for p in current.entries.keys() {
            if !merged.entries.contains_key(p) {
                tx.remove_subtree(p.clone());
            }
        }
        for (p, v) in &merged.entries {
            if current.entries.get(p).map(|c| &c.value) != Some(&v.value) {
                tx.put(p.clone(), v.value.clone());
            }
        }
        let parents = vec![self.head(), other_parent];
        self.apply(tx, writer, parents)
    }

    /// `<path>=<value>` lines in lexicographic order of the path string.
    /// Newlines and backslashes inside values are escaped.
    pub fn dump(&self) -> String {
        let mut lines: Vec<String> = self
            .data
            .iter()
            .map(|(p, e)| format!("{p}={}", escape_value(&e.value)))
            .collect();
        lines.sort();
        let mut out = lines.join("\n");
        if !out.is_empty() {
            out.push('\n');
        }
        out
    }

    /// Loads a dump as a single admin commit.
    pub fn load_dump(&mut self, text: &str) -> Result<Commit, StoreError> {
        let mut tx = Transaction::default();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (p, v) = line.split_once('=').ok_or_else(|| StoreError::BadDumpLine {
                line: i + 1,
                text: line.to_string(),
            })?;
            tx.put(p.parse()?, unescape_value(v));
        }
        let admin = self.admin.clone();
        self.commit(tx, &admin)
    }
}

fn escape_value(v: &str) -> String {
    v.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape_value(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    let mut chars = v.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some(o) => out.push(o),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::{Arc, Mutex};

    fn p(s: &str) -> Path {
        s.parse().unwrap()
    }

    fn admin() -> Identity {
        Identity::orchestrator("h0")
    }

    fn recorder(store: &mut Store, target: &str, mode: WatchMode) -> Arc<Mutex<Vec<WatchEvent>>> {
        let seen = Arc::new(Mutex::new(Vec::new()));
        let sink = seen.clone();
        let cb: WatchCallback = Box::new(move |ev| sink.lock().unwrap().push(ev.clone()));
        match mode {
            WatchMode::Key => store.watch_key(p(target), cb),
            WatchMode::Subtree => store.watch_subtree(p(target), cb),
        };
        seen
    }

    #[test]
    fn path_rules() {
        assert_eq!(Path::new(Vec::<String>::new()), Err(PathError::Empty));
        assert!("a//b".parse::<Path>().is_err());
        assert!(Path::new(["a", "b=c"]).is_err());
        let path = p("jitsu/vms/h1/state");
        assert_eq!(path.depth(), 4);
        assert_eq!(path.to_string(), "jitsu/vms/h1/state");
        assert!(path.starts_with(&p("jitsu/vms")));
        assert!(!p("jitsu/vmsx").starts_with(&p("jitsu/vms")));
    }

    #[test]
    fn read_your_write_and_last_write_wins() {
        let mut s = Store::new(admin());
        assert_eq!(s.get(&p("jitsu/vms/h1/state")), None);
        s.put(p("jitsu/vms/h1/state"), "running", &admin()).unwrap();
        assert_eq!(s.get(&p("jitsu/vms/h1/state")), Some("running"));
        s.put(p("x"), "a", &admin()).unwrap();
        s.put(p("x"), "b", &admin()).unwrap();
        assert_eq!(s.get(&p("x")), Some("b"));
    }

    #[test]
    fn commit_ids_increase_and_record_changes() {
        let mut s = Store::new(admin());
        let c1 = s.put(p("a/b"), "1", &admin()).unwrap();
        let c2 = s.put(p("a/c"), "2", &admin()).unwrap();
        assert!(c2.id > c1.id);
        assert_eq!(c2.parents, vec![c1.id]);
        assert!(c2.changed.contains(&p("a/c")));
    }

    #[test]
    fn out_of_scope_write_is_rejected_without_effect() {
        let mut s = Store::new(admin());
        let svc = Identity::service("www");
        let vm = Identity::instance("www");
        s.set_scope(
            p("jitsu/requests/www"),
            AccessScope::owned_by(svc).with_writer(vm.clone()),
        );
        let intruder = Identity::instance("other");
        let seen = recorder(&mut s, "jitsu/requests", WatchMode::Subtree);
        let head = s.head();
        let err = s
            .put(p("jitsu/requests/www/request"), "x", &intruder)
            .unwrap_err();
        assert!(matches!(err, StoreError::PermissionDenied { .. }));
        assert_eq!(s.head(), head);
        assert_eq!(s.get(&p("jitsu/requests/www/request")), None);
        assert!(seen.lock().unwrap().is_empty());
        s.put(p("jitsu/requests/www/request"), "x", &vm).unwrap();
        assert!(s.put(p("jitsu/vms/www/state"), "x", &vm).is_err());
        assert!(s.read_as(&p("jitsu/requests/www/request"), &vm).is_ok());
        assert!(s.read_as(&p("jitsu/requests/www/request"), &intruder).is_err());
    }

    #[test]
    fn key_watch_fires_in_commit_order() {
        let mut s = Store::new(admin());
        let seen = recorder(&mut s, "jitsu/requests/X/response", WatchMode::Key);
        s.put(p("jitsu/requests/X/response"), "one", &admin()).unwrap();
        s.put(p("jitsu/requests/X/response"), "two", &admin()).unwrap();
        let got: Vec<_> = seen.lock().unwrap().iter().map(|e| e.change.clone()).collect();
        assert_eq!(got, vec![Change::Set("one".into()), Change::Set("two".into())]);
    }

    #[test]
    fn key_watch_ignores_siblings_exhaustively() {
        // Every single-key write in a 3-key tree fires only the watch on that key.
        let keys = ["t/a", "t/b", "t/c/d"];
        for target in keys {
            for written in keys {
                let mut s = Store::new(admin());
                let seen = recorder(&mut s, target, WatchMode::Key);
                s.put(p(written), "v", &admin()).unwrap();
                let n = seen.lock().unwrap().len();
                assert_eq!(n, usize::from(target == written), "{target} vs {written}");
            }
        }
    }

    #[test]
    fn commit_touching_k_watched_keys_fires_k_times() {
        let mut s = Store::new(admin());
        let seen: Vec<_> = ["m/1", "m/2", "m/3"]
            .iter()
            .map(|k| recorder(&mut s, k, WatchMode::Key))
            .collect();
        s.transaction(&admin(), |tx| {
            tx.put(p("m/1"), "a").put(p("m/3"), "b").put(p("m/9"), "c");
        })
        .unwrap();
        let counts: Vec<_> = seen.iter().map(|r| r.lock().unwrap().len()).collect();
        assert_eq!(counts, vec![1, 0, 1]);
    }

    #[test]
    fn subtree_watch_reports_changed_path() {
        let mut s = Store::new(admin());
        let seen = recorder(&mut s, "jitsu/requests", WatchMode::Subtree);
        s.put(p("jitsu/requests/X/request"), "[S(replicate); S(www)]", &admin())
            .unwrap();
        s.put(p("jitsu/vms/X/state"), "running", &admin()).unwrap();
        let got = seen.lock().unwrap().clone();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].path, p("jitsu/requests/X/request"));
    }

    #[test]
    fn remove_subtree_semantics() {
        let mut s = Store::new(admin());
        s.transaction(&admin(), |tx| {
            tx.put(p("jitsu/vms/M/state"), "running")
                .put(p("jitsu/vms/M/ip"), "10.0.1.200")
                .put(p("jitsu/vms/N/state"), "running");
        })
        .unwrap();
        let sub = recorder(&mut s, "jitsu/vms", WatchMode::Subtree);
        let key = recorder(&mut s, "jitsu/vms/M/state", WatchMode::Key);
        s.remove_subtree(p("jitsu/vms/M"), &admin()).unwrap();
        assert_eq!(s.get(&p("jitsu/vms/M/state")), None);
        assert_eq!(s.get(&p("jitsu/vms/M/ip")), None);
        assert_eq!(s.get(&p("jitsu/vms/N/state")), Some("running"));
        {
            let ev = sub.lock().unwrap();
            assert_eq!(ev.len(), 1);
            assert_eq!(ev[0].path, p("jitsu/vms/M"));
            assert_eq!(ev[0].change, Change::Removed);
        }
        assert_eq!(key.lock().unwrap().len(), 1);

        // Absent subtree: succeeds, no notifications.
        s.remove_subtree(p("jitsu/vms/Q"), &admin()).unwrap();
        assert_eq!(sub.lock().unwrap().len(), 1);

        s.put(p("jitsu/vms/M/state"), "again", &admin()).unwrap();
        assert_eq!(s.get(&p("jitsu/vms/M/state")), Some("again"));
    }

    #[test]
    fn remove_requires_permission_on_every_descendant() {
        let mut s = Store::new(admin());
        let vm = Identity::instance("a");
        s.set_scope(p("apps/a"), AccessScope::owned_by(Identity::service("a")).with_writer(vm.clone()));
        s.put(p("apps/a/log"), "[]", &vm).unwrap();
        s.put(p("apps/a/private/x"), "1", &admin()).unwrap();
        s.set_scope(p("apps/a/private"), AccessScope::owned_by(admin()));
        assert!(s.remove_subtree(p("apps/a"), &vm).is_err());
        assert_eq!(s.get(&p("apps/a/log")), Some("[]"));
    }

    #[test]
    fn cancelled_watch_stops_firing() {
        let mut s = Store::new(admin());
        let seen = Arc::new(Mutex::new(0));
        let sink = seen.clone();
        let h = s.watch_key(p("k"), Box::new(move |_| *sink.lock().unwrap() += 1));
        s.put(p("k"), "1", &admin()).unwrap();
        assert!(s.unwatch(&h));
        s.put(p("k"), "2", &admin()).unwrap();
        assert_eq!(*seen.lock().unwrap(), 1);
        assert!(!s.unwatch(&h));
    }

    #[test]
    fn dump_is_sorted_and_loads_back() {
        let mut s = Store::new(admin());
        s.put(p("jitsu/vms/www/state"), "running", &admin()).unwrap();
        s.put(p("jitsu/vms-x"), "line\nbreak", &admin()).unwrap();
        s.put(p("jitsu/vms/www/app-id"), "0a000012", &admin()).unwrap();
        let dump = s.dump();
        assert_eq!(
            dump,
            "jitsu/vms-x=line\\nbreak\njitsu/vms/www/app-id=0a000012\njitsu/vms/www/state=running\n"
        );
        let mut t = Store::new(admin());
        t.load_dump(&dump).unwrap();
        assert_eq!(t.dump(), dump);
        assert_eq!(t.get(&p("jitsu/vms-x")), Some("line\nbreak"));
    }
}
