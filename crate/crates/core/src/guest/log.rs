use crate::kvstore::{
    decode_log, encode_log, merge, Identity, LogEntry, MergeConflict, MergeKind, MergePolicy,
    Snapshot, Store, Versioned,
};
use crate::orchestrator::records::{app_log, app_root};

/// Merge policy for a service's app subtree: the log merges as a union.
pub fn log_merge_policy(service: &str) -> MergePolicy {
    MergePolicy::default().with_rule(app_log(service), MergeKind::Log)
}

/// Append-only request log kept by one instance.
#[derive(Debug, Clone)]
pub struct ServiceLog {
    owner: String,
    next: u64,
    entries: Vec<LogEntry>,
}

impl ServiceLog {
    pub fn new(owner: &str) -> Self {
        ServiceLog {
            owner: owner.to_string(),
            next: 0,
            entries: Vec::new(),
        }
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    /// Appends an entry and returns its id, `<owner>:<seq>`.
    pub fn append(&mut self, ts_us: u64, desc: impl Into<String>) -> String {
        let id = format!("{}:{}", self.owner, self.next);
        self.next += 1;
        self.entries.push(LogEntry {
            id: id.clone(),
            ts_us,
            desc: desc.into(),
        });
        id
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Hands over the entries not yet written anywhere.
    pub fn take(&mut self) -> Vec<LogEntry> {
        std::mem::take(&mut self.entries)
    }

    /// Appends the in-memory entries to the service log in `store` and
    /// empties the buffer. Used by the first instance, which owns the log.
    pub fn flush(&mut self, store: &mut Store, service: &str, writer: &Identity) -> Result<usize, MergeConflict> {
        if self.entries.is_empty() {
            return Ok(0);
        }
        let key = app_log(service);
        let mut log = match store.get(&key) {
            Some(v) => decode_log(v).ok_or_else(|| MergeConflict::Conflict {
                path: key.clone(),
                message: "value is not a log".into(),
            })?,
            None => Vec::new(),
        };
        let n = self.entries.len();
        log.append(&mut self.entries);
        store
            .put(key.clone(), encode_log(&log), writer)
            .map_err(|e| MergeConflict::Conflict {
                path: key,
                message: e.to_string(),
            })?;
        Ok(n)
    }

    /// Three-way merges this log into the service subtree of `hub`, taking
    /// `ancestor` (the subtree as it was when this instance started) as the
    /// common base. Returns the number of entries merged.
    pub fn merge_into(
        &mut self,
        hub: &mut Store,
        service: &str,
        ancestor: &Snapshot,
        writer: &Identity,
    ) -> Result<usize, MergeConflict> {
        let root = app_root(service);
        let key = app_log(service);
        let mut mine = ancestor.clone();
        let mut log = match ancestor.get(&key) {
            Some(v) => decode_log(v).unwrap_or_default(),
            None => Vec::new(),
        };
        let n = self.entries.len();
        log.extend(self.entries.iter().cloned());
        mine.entries.insert(
            key.clone(),
            Versioned {
                value: encode_log(&log),
                commit: hub.head() + 1,
            },
        );
        let theirs = hub.snapshot(&root);
        let merged = merge(&mine, &theirs, ancestor, &log_merge_policy(service))?;
        hub.commit_merge(&merged, theirs.commit, writer)
            .map_err(|e| MergeConflict::Conflict {
                path: root,
                message: e.to_string(),
            })?;
        self.entries.clear();
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvstore::AccessScope;
    use std::collections::BTreeSet;

    fn hub() -> Store {
        let mut s = Store::new(Identity::orchestrator("h0"));
        s.set_scope(
            app_root("www"),
            AccessScope::owned_by(Identity::service("www"))
                .with_writer(Identity::instance("www"))
                .with_writer(Identity::instance("r1"))
                .with_writer(Identity::instance("r2")),
        );
        s
    }

    fn ids(store: &Store) -> BTreeSet<String> {
        store
            .get(&app_log("www"))
            .map(|v| decode_log(v).unwrap().into_iter().map(|e| e.id).collect())
            .unwrap_or_default()
    }

    #[test]
    fn replica_entries_join_first_instance_log() {
        let mut store = hub();
        let mut first = ServiceLog::new("www");
        first.append(1, "GET /0");
        first.flush(&mut store, "www", &Identity::instance("www")).unwrap();
        let ancestor = store.snapshot(&app_root("www"));
        let mut r = ServiceLog::new("r1");
        r.append(2, "GET /1");
        r.append(3, "GET /2");
        first.append(4, "GET /3");
        first.flush(&mut store, "www", &Identity::instance("www")).unwrap();
        assert_eq!(r.merge_into(&mut store, "www", &ancestor, &Identity::instance("r1")), Ok(2));
        let got = ids(&store);
        let want: BTreeSet<String> = ["www:0", "www:1", "r1:0", "r1:1"].map(String::from).into();
        assert_eq!(got, want);
        assert_eq!(store.history().last().unwrap().parents.len(), 2);
    }

    #[test]
    fn empty_replica_log_changes_nothing() {
        let mut store = hub();
        let mut first = ServiceLog::new("www");
        first.append(1, "GET /0");
        first.flush(&mut store, "www", &Identity::instance("www")).unwrap();
        let before = store.get(&app_log("www")).map(str::to_string);
        let ancestor = store.snapshot(&app_root("www"));
        let mut r = ServiceLog::new("r1");
        r.merge_into(&mut store, "www", &ancestor, &Identity::instance("r1")).unwrap();
        assert_eq!(store.get(&app_log("www")).map(str::to_string), before);
    }

    #[test]
    fn sequential_merges_from_stale_ancestors() {
        let mut store = hub();
        let ancestor = store.snapshot(&app_root("www"));
        let mut a = ServiceLog::new("r1");
        let mut b = ServiceLog::new("r2");
        for i in 0..5 {
            a.append(i, "a");
            b.append(i, "b");
        }
        a.merge_into(&mut store, "www", &ancestor, &Identity::instance("r1")).unwrap();
        b.merge_into(&mut store, "www", &ancestor, &Identity::instance("r2")).unwrap();
        assert_eq!(ids(&store).len(), 10);
    }
}
