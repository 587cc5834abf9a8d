//! Follows replicas from boot through halt, drain, log merge and destroy.

use selfscale::netsim::Simulation;
use selfscale::scenario::{bundled, Overrides, Scenario};

fn main() {
    let cfg = Scenario::parse(bundled("scale-down").unwrap(), Overrides::default())
        .unwrap()
        .config;
    let mut sim = Simulation::new(cfg).unwrap();
    let summary = sim.run().unwrap();
    let trace = sim.trace();

    let mut events: Vec<(f64, String)> = Vec::new();
    events.extend(trace.ups.iter().map(|(t, n)| (*t, format!("up       {n}"))));
    events.extend(trace.invocations.iter().map(|(t, n, v)| (*t, format!("{:<8} {n}", v.as_str()))));
    events.extend(
        trace
            .halt_inflight
            .iter()
            .map(|(t, n, jobs)| (*t, format!("drain    {n} ({} in flight)", jobs.len()))),
    );
    events.extend(trace.downs.iter().map(|(t, n, why)| (*t, format!("down     {n} {why:?}"))));
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (t, what) in events {
        println!("{t:>9.3}  {what}");
    }
    println!();
    for (name, count) in &trace.log_counts {
        println!("{name} appended {count} log entries");
    }
    println!("final replicas {}, failures {}", summary.final_replica_count, summary.failures);
}
