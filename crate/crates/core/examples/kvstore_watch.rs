//! Scoped writes, subtree watches and a three-way log merge.

use std::sync::{Arc, Mutex};

use selfscale::kvstore::{
    decode_log, encode_log, merge, AccessScope, Change, Identity, LogEntry, MergePolicy, Path,
    Store,
};

fn p(s: &str) -> Path {
    s.parse().unwrap()
}

fn entry(id: &str, desc: &str) -> LogEntry {
    LogEntry {
        id: id.into(),
        ts_us: 0,
        desc: desc.into(),
    }
}

fn main() {
    let admin = Identity::orchestrator("h0");
    let guest = Identity::instance("www");
    let mut store = Store::new(admin.clone());
    store.set_scope(
        p("jitsu/requests/www"),
        AccessScope::owned_by(admin.clone()).with_writer(guest.clone()),
    );

    let seen = Arc::new(Mutex::new(Vec::new()));
    let sink = Arc::clone(&seen);
    store.watch_subtree(
        p("jitsu/requests"),
        Box::new(move |ev| sink.lock().unwrap().push(ev.clone())),
    );

    store
        .put(p("jitsu/requests/www/request"), "[S(replicate); S(www)]", &guest)
        .unwrap();
    let denied = store.put(p("jitsu/requests/other/request"), "x", &guest);
    println!("write outside own scope: {denied:?}");
    for ev in seen.lock().unwrap().iter() {
        if let Change::Set(v) = &ev.change {
            println!("commit {} {} = {v} by {}", ev.commit, ev.path, ev.writer.as_str());
        }
    }

    // Two writers extend a common log; the merge keeps every entry once.
    let log = p("jitsu/apps/www/log");
    store.put(log.clone(), encode_log(&[entry("www:0", "GET /")]), &admin).unwrap();
    let root = p("jitsu/apps/www");
    let ancestor = store.snapshot(&root);
    let mut replica = Store::new(admin.clone());
    replica
        .put(log.clone(), encode_log(&[entry("www:0", "GET /"), entry("r1:0", "GET /a")]), &admin)
        .unwrap();
    store
        .put(log.clone(), encode_log(&[entry("www:0", "GET /"), entry("www:1", "GET /b")]), &admin)
        .unwrap();
    let merged = merge(
        &store.snapshot(&root),
        &replica.snapshot(&root),
        &ancestor,
        &MergePolicy::default(),
    )
    .unwrap();
    let ids: Vec<String> = decode_log(merged.get(&log).unwrap())
        .unwrap()
        .into_iter()
        .map(|e| e.id)
        .collect();
    println!("merged log ids: {ids:?}");
}
