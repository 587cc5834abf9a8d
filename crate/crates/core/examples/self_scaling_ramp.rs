//! Runs the bundled ramp scenario with and without self-scaling and prints
//! replica count and latency every 20 s.

use selfscale::netsim::{MetricsRow, Simulation};
use selfscale::scenario::{bundled, Overrides, Scenario};

fn at(rows: &[MetricsRow], t: f64) -> (usize, f64, f64) {
    let window: Vec<&MetricsRow> = rows.iter().filter(|r| (r.time - t).abs() < 1e-9).collect();
    let rps: f64 = window.iter().map(|r| r.rps).sum();
    let lat = window.iter().map(|r| r.rps * r.mean_latency_ms).sum::<f64>() / rps.max(1e-9);
    (window.first().map_or(0, |r| r.replica_count), rps, lat)
}

fn main() {
    let cfg = Scenario::parse(bundled("scaleup-ramp").unwrap(), Overrides::default())
        .unwrap()
        .config;
    let mut fixed = cfg.clone();
    fixed.scaling = false;
    let mut scaled = Simulation::new(cfg).unwrap();
    let mut single = Simulation::new(fixed).unwrap();
    let a = scaled.run().unwrap();
    single.run().unwrap();

    println!("{:>6} {:>9} {:>9} {:>12} {:>12}", "t", "offered", "replicas", "scaled ms", "single ms");
    for t in (20..=200).step_by(20) {
        let t = f64::from(t);
        let (n, rps, lat) = at(scaled.rows(), t);
        let (_, _, base) = at(single.rows(), t);
        println!("{t:>6} {rps:>9.0} {n:>9} {lat:>12.2} {base:>12.2}");
    }
    println!();
    print!("{}", a.to_text());
}
