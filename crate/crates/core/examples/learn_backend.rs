//! The same ramp with the two-table learn backend; prints the hub switch
//! tables once the service has scaled out.

use selfscale::netsim::Simulation;
use selfscale::scenario::{bundled, Overrides, Scenario};
use selfscale::switchfab::Backend;

fn main() {
    let overrides = Overrides {
        backend: Some(Backend::TwoTableLearn),
        ..Overrides::default()
    };
    let cfg = Scenario::parse(bundled("scaleup-ramp").unwrap(), overrides)
        .unwrap()
        .config;
    let mut sim = Simulation::new(cfg).unwrap();
    sim.run_until(150.0).unwrap();
    let c = sim.cluster();
    let hub = c.hub(sim.service_index());
    println!("replicas: {}", c.replica_count(sim.service_index()));
    print!("{}", c.switch(hub).dump());
}
