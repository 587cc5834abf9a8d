//! Request and response strings as written to the store, and the VM records
//! of a first instance and its remote replica.

use std::net::Ipv4Addr;

use selfscale::kvstore::Identity;
use selfscale::orchestrator::records::request_key;
use selfscale::orchestrator::{
    Cluster, ClusterConfig, Effect, RemoteBoot, RequestRecord, ResponseRecord, ServiceSpec, Verb,
};

fn main() {
    let local = RequestRecord::local(Verb::Replicate, "www");
    let remote = RequestRecord {
        verb: Verb::Replicate,
        target: "h1".into(),
        remote: Some(RemoteBoot {
            app_id: "0a000012".into(),
            ttl: 300,
            stop_mode: "shutdown".into(),
            image: "www.xen".into(),
        }),
    };
    println!("local request   {}", local.encode());
    println!("remote request  {}", remote.encode());
    println!("success         {}", ResponseRecord::Success.encode());
    println!("error           {}", ResponseRecord::Error("no capacity".into()).encode());
    println!("decoded         {:?}", RequestRecord::decode(&remote.encode()).unwrap());

    // One slot per host, so the replica lands on h1.
    let mut c = Cluster::new(ClusterConfig {
        hosts: 2,
        cores: 3,
        reserved_cores: 2,
        ..ClusterConfig::default()
    });
    c.add_service(ServiceSpec::new("www", Ipv4Addr::new(10, 0, 0, 18), 0))
        .unwrap();
    c.store_mut(0)
        .put(request_key("www"), local.encode(), &Identity::instance("www"))
        .unwrap();
    c.pump(0.0);
    let mut pending = Vec::new();
    let mut now = 0.0;
    loop {
        for e in c.take_effects() {
            if let Effect::After { delay, action } = e {
                pending.push((now + delay, action));
            }
        }
        pending.sort_by(|a: &(f64, _), b| a.0.total_cmp(&b.0));
        if pending.is_empty() {
            break;
        }
        let (t, action) = pending.remove(0);
        now = t;
        c.run_deferred(action, t);
    }
    print!("\n{}", c.dump());
}
