mod common;

use common::{assert_golden, dump_under};
use selfscale::cli::dump_state;
use selfscale::netsim::Simulation;
use selfscale::orchestrator::Verb;
use selfscale::scenario::{bundled, Overrides, Scenario};

fn scenario(name: &str) -> Scenario {
    Scenario::parse(bundled(name).unwrap(), Overrides::default()).unwrap()
}

/// VM names with a record under `jitsu/vms/`.
fn vm_names(dump: &str) -> Vec<String> {
    let mut v: Vec<String> = dump
        .lines()
        .filter_map(|l| l.strip_prefix("jitsu/vms/"))
        .filter_map(|l| l.split('/').next())
        .map(str::to_string)
        .collect();
    v.dedup();
    v
}

#[test]
fn at_time_zero_only_the_first_instance_exists() {
    let dump = dump_state(scenario("steady-500"), 0.0).unwrap();
    assert_eq!(vm_names(&dump), vec!["www".to_string()]);
    assert_golden("steady-500-t0.dump", &dump);
}

#[test]
fn first_replicate_adds_one_bucket() {
    let mut sim = Simulation::new(scenario("scaleup-ramp").config).unwrap();
    let mut t = 0.0;
    let first_replicate = loop {
        t += 1.0;
        sim.run_until(t).unwrap();
        if let Some(inv) = sim.trace().invocations.iter().find(|i| i.2 == Verb::Replicate) {
            break inv.0;
        }
        assert!(t < 200.0, "never replicated");
    };
    let before = sim.cluster().dump();
    sim.run_until(first_replicate + 0.5).unwrap();
    let after = sim.cluster().dump();
    let buckets = |d: &str| d.matches(" bucket=").count();
    assert_eq!(buckets(&after), buckets(&before) + 1);
    assert_golden("scaleup-ramp-first-replicate.dump", &after);
}

#[test]
fn after_scale_down_no_replica_state_remains() {
    let s = scenario("scale-down");
    let end = s.config.duration;
    let dump = dump_state(s, end).unwrap();
    assert_eq!(vm_names(&dump), vec!["www".to_string()]);
    assert_eq!(dump_under(&dump, "jitsu/vm/").lines().count(), 2);
    assert!(!dump.contains("jitsu/requests/02:"));
    assert_eq!(dump.matches(" bucket=").count(), 1);
}
