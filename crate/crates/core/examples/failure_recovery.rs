//! Replica crash, replica host failure and master failover, each with the
//! recovery actions the monitor took.

use selfscale::netsim::Simulation;
use selfscale::scenario::{bundled, Overrides, Scenario};

fn main() {
    for name in ["replica-crash", "host-failure", "failover"] {
        let cfg = Scenario::parse(bundled(name).unwrap(), Overrides::default())
            .unwrap()
            .config;
        let mut sim = Simulation::new(cfg).unwrap();
        let summary = sim.run().unwrap();
        println!("== {name}");
        for (t, injection, victim) in &sim.trace().injections {
            println!("{t:>8.3}  inject {injection:?} {}", victim.as_deref().unwrap_or(""));
        }
        for (t, action) in &sim.trace().recovery {
            println!("{t:>8.3}  {action:?}");
        }
        println!(
            "failures {}, replicas at end {}\n",
            summary.failures, summary.final_replica_count
        );
    }
}
