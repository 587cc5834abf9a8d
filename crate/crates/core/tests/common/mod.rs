#![allow(dead_code)]

use selfscale::kvstore::Identity;
use selfscale::orchestrator::records::{request_key, response_key};
use selfscale::orchestrator::{Cluster, Deferred, Effect, RequestRecord, Verb};

/// Runs a cluster's deferred actions in time order without a workload.
pub struct Driver {
    pub c: Cluster,
    pub now: f64,
    pending: Vec<(f64, u64, Deferred)>,
    seq: u64,
    pub seen: Vec<Effect>,
}

impl Driver {
    pub fn new(c: Cluster) -> Self {
        let mut d = Driver {
            c,
            now: 0.0,
            pending: Vec::new(),
            seq: 0,
            seen: Vec::new(),
        };
        d.collect();
        d
    }

    pub fn collect(&mut self) {
        for e in self.c.take_effects() {
            match e {
                Effect::After { delay, action } => {
                    self.seq += 1;
                    self.pending.push((self.now + delay, self.seq, action));
                }
                other => self.seen.push(other),
            }
        }
    }

    /// Runs deferred work up to `until`.
    pub fn advance(&mut self, until: f64) {
        loop {
            self.collect();
            self.pending
                .sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if self.pending.first().is_none_or(|p| p.0 > until) {
                break;
            }
            let (t, _, action) = self.pending.remove(0);
            self.now = t;
            self.c.run_deferred(action, t);
        }
        self.now = self.now.max(until);
    }

    /// Runs only the next deferred action.
    pub fn step(&mut self) -> Option<Deferred> {
        self.collect();
        self.pending
            .sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if self.pending.is_empty() {
            return None;
        }
        let (t, _, action) = self.pending.remove(0);
        self.now = t;
        self.c.run_deferred(action.clone(), t);
        self.collect();
        Some(action)
    }

    pub fn request(&mut self, instance: &str, verb: Verb, target: &str) {
        let host = self.c.instance(instance).unwrap().host;
        let value = RequestRecord::local(verb, target).encode();
        self.c
            .store_mut(host)
            .put(request_key(instance), value, &Identity::instance(instance))
            .unwrap();
        self.c.pump(self.now);
        self.collect();
    }

    pub fn response(&self, instance: &str) -> Option<String> {
        let host = self.c.instance(instance)?.host;
        self.c
            .store(host)
            .get(&response_key(instance))
            .map(str::to_string)
    }

    /// Asks `from` to replicate and returns the new instance's name.
    pub fn replicate(&mut self, from: &str) -> Option<String> {
        let before: Vec<String> = self.c.instances().iter().map(|i| i.name.clone()).collect();
        let service = self.c.service(self.c.instance(from)?.service).spec.name.clone();
        self.request(from, Verb::Replicate, &service);
        self.advance(self.now + 1.0);
        self.c
            .instances()
            .iter()
            .map(|i| i.name.clone())
            .find(|n| !before.contains(n))
    }
}

/// Lines of a store dump under `prefix`.
pub fn dump_under(dump: &str, prefix: &str) -> String {
    dump.lines()
        .filter(|l| l.starts_with(prefix))
        .map(|l| format!("{l}\n"))
        .collect()
}

/// Compares against `tests/golden/<name>`; set UPDATE_GOLDEN=1 to rewrite.
pub fn assert_golden(name: &str, actual: &str) {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e} (run with UPDATE_GOLDEN=1)", path.display()));
    assert_eq!(actual, expected, "golden mismatch: {}", path.display());
}
