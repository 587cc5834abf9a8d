//! Flat `section.key = value` scenario files.

use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::path::Path;
use std::str::FromStr;

use crate::netsim::{Injection, PageDistribution, RateSchedule, SimConfig, WorkloadSpec};
use crate::orchestrator::ServiceSpec;
use crate::switchfab::{Backend, HostId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub level: Level,
    /// 1-based line, 0 when not tied to a line.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let level = match self.level {
            Level::Warning => "warning",
            Level::Error => "error",
        };
        if self.line > 0 {
            write!(f, "{level}: line {}: {}", self.line, self.message)
        } else {
            write!(f, "{level}: {}", self.message)
        }
    }
}

/// Bundled scenarios, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("scaleup-ramp", include_str!("../scenarios/scaleup-ramp.scn")),
    ("steady-500", include_str!("../scenarios/steady-500.scn")),
    ("scale-down", include_str!("../scenarios/scale-down.scn")),
    ("replica-crash", include_str!("../scenarios/replica-crash.scn")),
    ("host-failure", include_str!("../scenarios/host-failure.scn")),
    ("failover", include_str!("../scenarios/failover.scn")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

const KEYS: &[&str] = &[
    "sim.seed",
    "sim.duration",
    "sim.metrics_interval",
    "cluster.hosts",
    "cluster.cores",
    "cluster.reserved_cores",
    "cluster.max_vms",
    "cluster.master",
    "cluster.replica_mbps",
    "cluster.base_latency_ms",
    "cluster.hop_delay_ms",
    "cluster.store_delay_ms",
    "cluster.boot_delay_ms",
    "switch.backend",
    "monitor.period",
    "heartbeat.interval",
    "heartbeat.multiplier",
    "policy.scaling",
    "policy.lo_rps",
    "policy.hi_rps",
    "policy.poll_halt",
    "policy.poll_period",
    "service.name",
    "service.dns_name",
    "service.ip",
    "service.port",
    "service.host",
    "service.image",
    "service.stop_mode",
    "service.ttl",
    "service.dns_ttl",
    "service.replicas",
    "workload.schedule",
    "workload.ramp_at",
    "workload.ramp_start",
    "workload.ramp_step",
    "workload.ramp_interval",
    "workload.ramp_max",
    "workload.page_sizes",
    "workload.page_freqs",
    "workload.urls",
    "workload.jitter",
    "events.crash_replica",
    "events.reboot_replica",
    "events.fail_host",
    "events.fail_master",
];

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub backend: Option<Backend>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: SimConfig,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone)]
pub struct ScenarioError {
    pub diagnostics: Vec<Diagnostic>,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lines: Vec<String> = self.diagnostics.iter().map(|d| d.to_string()).collect();
        f.write_str(&lines.join("\n"))
    }
}

impl std::error::Error for ScenarioError {}

struct Parser {
    values: BTreeMap<String, (usize, String)>,
    diags: Vec<Diagnostic>,
}

impl Parser {
    fn error(&mut self, line: usize, message: impl Into<String>) {
        self.diags.push(Diagnostic {
            level: Level::Error,
            line,
            message: message.into(),
        });
    }

    fn warn(&mut self, line: usize, message: impl Into<String>) {
        self.diags.push(Diagnostic {
            level: Level::Warning,
            line,
            message: message.into(),
        });
    }

    fn raw(&self, key: &str) -> Option<(usize, &str)> {
        self.values.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> T {
        match self.raw(key).map(|(l, v)| (l, v.to_string())) {
            None => default,
            Some((line, v)) => match v.parse() {
                Ok(x) => x,
                Err(_) => {
                    self.error(line, format!("{key}: cannot parse {v:?}"));
                    default
                }
            },
        }
    }

    fn opt<T: FromStr>(&mut self, key: &str) -> Option<T> {
        let (line, v) = self.raw(key).map(|(l, v)| (l, v.to_string()))?;
        match v.parse() {
            Ok(x) => Some(x),
            Err(_) => {
                self.error(line, format!("{key}: cannot parse {v:?}"));
                None
            }
        }
    }

    fn line_of(&self, key: &str) -> usize {
        self.raw(key).map_or(0, |(l, _)| l)
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Option<Vec<T>> {
        let (line, v) = self.raw(key).map(|(l, v)| (l, v.to_string()))?;
        let mut out = Vec::new();
        for item in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item.parse() {
                Ok(x) => out.push(x),
                Err(_) => {
                    self.error(line, format!("{key}: cannot parse {item:?}"));
                    return None;
                }
            }
        }
        Some(out)
    }

    /// `a:b` pairs separated by commas, with `sep` between the halves.
    fn pairs<A: FromStr, B: FromStr>(&mut self, key: &str, sep: char) -> Vec<(A, B)> {
        let Some((line, v)) = self.raw(key).map(|(l, v)| (l, v.to_string())) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for item in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let parsed = item
                .split_once(sep)
                .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
            match parsed {
                Some(p) => out.push(p),
                None => self.error(line, format!("{key}: expected x{sep}y, got {item:?}")),
            }
        }
        out
    }
}

fn parse_backend(s: &str) -> Option<Backend> {
    match s {
        "group" => Some(Backend::GroupTable),
        "learn" => Some(Backend::TwoTableLearn),
        _ => None,
    }
}

impl Scenario {
    pub fn load(path: &Path, overrides: Overrides) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError {
            diagnostics: vec![Diagnostic {
                level: Level::Error,
                line: 0,
                message: format!("cannot read {}: {e}", path.display()),
            }],
        })?;
        Scenario::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: Overrides) -> Result<Scenario, ScenarioError> {
        let mut p = Parser {
            values: BTreeMap::new(),
            diags: Vec::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                p.error(line, format!("expected key = value, got {content:?}"));
                continue;
            };
            let (k, v) = (k.trim().to_string(), v.trim().trim_matches('"').to_string());
            if !KEYS.contains(&k.as_str()) {
                p.warn(line, format!("unknown key {k}"));
                continue;
            }
            if p.values.insert(k.clone(), (line, v)).is_some() {
                p.warn(line, format!("{k} set more than once; last value wins"));
            }
        }
        let config = build(&mut p, overrides);
        if p.diags.iter().any(|d| d.level == Level::Error) {
            Err(ScenarioError { diagnostics: p.diags })
        } else {
            Ok(Scenario {
                config,
                diagnostics: p.diags,
            })
        }
    }
}

fn build(p: &mut Parser, overrides: Overrides) -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.cluster.seed = overrides.seed.unwrap_or_else(|| p.get("sim.seed", 1));
    cfg.duration = p.get("sim.duration", cfg.duration);
    cfg.metrics_interval = p.get("sim.metrics_interval", cfg.metrics_interval);

    let c = &mut cfg.cluster;
    c.hosts = p.get("cluster.hosts", c.hosts);
    c.cores = p.get("cluster.cores", c.cores);
    c.reserved_cores = p.get("cluster.reserved_cores", c.reserved_cores);
    c.max_vms = p.opt("cluster.max_vms");
    c.master = p.get("cluster.master", c.master);
    cfg.replica_bytes_per_sec = p.get("cluster.replica_mbps", 104.0) * 1e6;
    cfg.base_latency = p.get("cluster.base_latency_ms", 2.5) / 1e3;
    cfg.hop_delay = p.get("cluster.hop_delay_ms", 0.2) / 1e3;
    let c = &mut cfg.cluster;
    c.store_delay = p.get("cluster.store_delay_ms", c.store_delay * 1e3) / 1e3;
    c.boot_delay = p.get("cluster.boot_delay_ms", c.boot_delay * 1e3) / 1e3;
    c.monitor_period = p.get("monitor.period", c.monitor_period);
    c.heartbeat_interval = p.get("heartbeat.interval", c.heartbeat_interval);
    c.heartbeat_multiplier = p.get("heartbeat.multiplier", c.heartbeat_multiplier);
    if let Some((line, v)) = p.raw("switch.backend").map(|(l, v)| (l, v.to_string())) {
        match parse_backend(&v) {
            Some(b) => cfg.cluster.backend = b,
            None => p.error(line, format!("switch.backend: expected group or learn, got {v:?}")),
        }
    }
    if let Some(b) = overrides.backend {
        cfg.cluster.backend = b;
    }

    let pol = &mut cfg.policy;
    cfg.scaling = p.get("policy.scaling", true);
    pol.lo_rps = p.get("policy.lo_rps", pol.lo_rps);
    pol.hi_rps = p.get("policy.hi_rps", pol.hi_rps);
    pol.poll_halt = p.get("policy.poll_halt", pol.poll_halt);
    pol.poll_period = p.get("policy.poll_period", pol.poll_period);

    let name: String = p.get("service.name", "www".to_string());
    let ip: Ipv4Addr = p.get("service.ip", Ipv4Addr::new(10, 0, 0, 18));
    let host: HostId = p.get("service.host", 0);
    let mut spec = ServiceSpec::new(&name, ip, host);
    spec.dns_name = p.get("service.dns_name", spec.dns_name);
    spec.port = p.get("service.port", spec.port);
    spec.image = p.get("service.image", spec.image);
    spec.stop_mode = p.get("service.stop_mode", spec.stop_mode);
    spec.ttl = p.get("service.ttl", spec.ttl);
    spec.dns_ttl = p.get("service.dns_ttl", spec.dns_ttl);
    cfg.service = spec;
    cfg.initial_replicas = p.get("service.replicas", 0);

    cfg.workload = workload(p, cfg.duration);
    cfg.events = events(p);
    validate(p, &cfg);
    cfg
}

fn workload(p: &mut Parser, duration: f64) -> WorkloadSpec {
    let mut w = WorkloadSpec::default();
    let sizes: Option<Vec<f64>> = p.list("workload.page_sizes");
    let freqs: Option<Vec<f64>> = p.list("workload.page_freqs");
    let urls: usize = p.get("workload.urls", 100);
    if sizes.is_some() || freqs.is_some() || urls != 100 {
        let sizes = sizes.unwrap_or_else(|| crate::netsim::DEFAULT_PAGE_SIZES_KB.to_vec());
        let freqs = freqs.unwrap_or_else(|| crate::netsim::DEFAULT_PAGE_FREQS.to_vec());
        match PageDistribution::new(&sizes, &freqs, urls) {
            Ok(d) => w.pages = d,
            Err(e) => {
                let line = p.line_of("workload.page_sizes");
                p.error(line, format!("workload pages: {e}"));
            }
        }
    }
    w.jitter = p.get("workload.jitter", w.jitter);
    if !(0.0..1.0).contains(&w.jitter) {
        let line = p.line_of("workload.jitter");
        p.error(line, "workload.jitter must be in [0, 1)");
    }
    let has_ramp = p.raw("workload.ramp_start").is_some();
    let has_schedule = p.raw("workload.schedule").is_some();
    if has_ramp && has_schedule {
        let line = p.line_of("workload.ramp_start");
        p.error(line, "workload.schedule and workload.ramp_* are exclusive");
    }
    if has_ramp {
        let at = p.get("workload.ramp_at", 0.0);
        let start = p.get("workload.ramp_start", 400.0);
        let step = p.get("workload.ramp_step", 400.0);
        let interval: f64 = p.get("workload.ramp_interval", 20.0);
        let max = p.get("workload.ramp_max", f64::INFINITY);
        if interval <= 0.0 {
            let line = p.line_of("workload.ramp_interval");
            p.error(line, "workload.ramp_interval must be positive");
        } else {
            w.schedule = RateSchedule::ramp(at, start, step, interval, max, duration);
        }
    } else {
        let steps: Vec<(f64, f64)> = p.pairs("workload.schedule", ':');
        match RateSchedule::new(steps) {
            Ok(s) => w.schedule = s,
            Err(e) => {
                let line = p.line_of("workload.schedule");
                p.error(line, format!("workload.schedule: {e}"));
            }
        }
    }
    w
}

fn events(p: &mut Parser) -> Vec<(f64, Injection)> {
    let mut ev = Vec::new();
    for (key, inj) in [
        ("events.crash_replica", Injection::CrashReplica),
        ("events.reboot_replica", Injection::RebootReplica),
        ("events.fail_master", Injection::FailMaster),
    ] {
        for t in p.list::<f64>(key).unwrap_or_default() {
            ev.push((t, inj));
        }
    }
    for (t, h) in p.pairs::<f64, HostId>("events.fail_host", '@') {
        ev.push((t, Injection::FailHost(h)));
    }
    ev.sort_by(|a, b| a.0.total_cmp(&b.0));
    ev
}

fn validate(p: &mut Parser, cfg: &SimConfig) {
    let c = &cfg.cluster;
    let mut check = |ok: bool, key: &str, msg: &str| {
        if !ok {
            let line = p.line_of(key);
            p.error(line, msg.to_string());
        }
    };
    check(cfg.duration > 0.0, "sim.duration", "sim.duration must be positive");
    check(cfg.metrics_interval > 0.0, "sim.metrics_interval", "sim.metrics_interval must be positive");
    check(c.hosts >= 1, "cluster.hosts", "cluster.hosts must be at least 1");
    check(c.cores > c.reserved_cores, "cluster.cores", "cluster.cores must exceed cluster.reserved_cores");
    check(c.max_vms != Some(0), "cluster.max_vms", "cluster.max_vms must be positive");
    check((c.master as usize) < c.hosts, "cluster.master", "cluster.master is not a host");
    check(cfg.replica_bytes_per_sec > 0.0, "cluster.replica_mbps", "cluster.replica_mbps must be positive");
    check(cfg.base_latency >= 0.0, "cluster.base_latency_ms", "cluster.base_latency_ms must not be negative");
    check(cfg.hop_delay >= 0.0, "cluster.hop_delay_ms", "cluster.hop_delay_ms must not be negative");
    check(c.store_delay >= 0.0, "cluster.store_delay_ms", "cluster.store_delay_ms must not be negative");
    check(c.boot_delay >= 0.0, "cluster.boot_delay_ms", "cluster.boot_delay_ms must not be negative");
    check(c.monitor_period > 0.0, "monitor.period", "monitor.period must be positive");
    check(c.heartbeat_interval > 0.0, "heartbeat.interval", "heartbeat.interval must be positive");
    check(c.heartbeat_multiplier >= 1, "heartbeat.multiplier", "heartbeat.multiplier must be at least 1");
    check((cfg.service.host as usize) < c.hosts, "service.host", "service.host is not a host");
    if let Err(e) = cfg.policy.validate() {
        let key = match e {
            crate::guest::PolicyError::PollHalt => "policy.poll_halt",
            crate::guest::PolicyError::PollPeriod => "policy.poll_period",
            _ => "policy.lo_rps",
        };
        let line = p.line_of(key);
        p.error(line, e.to_string());
    }
    for (t, inj) in &cfg.events {
        let key = match inj {
            Injection::CrashReplica => "events.crash_replica",
            Injection::RebootReplica => "events.reboot_replica",
            Injection::FailHost(_) => "events.fail_host",
            Injection::FailMaster => "events.fail_master",
        };
        if !(0.0..=cfg.duration).contains(t) {
            let line = p.line_of(key);
            p.error(line, format!("{key}: time {t} outside the run"));
        }
        if let Injection::FailHost(h) = inj {
            if *h as usize >= c.hosts {
                let line = p.line_of(key);
                p.error(line, format!("{key}: h{h} is not a host"));
            } else if *h == cfg.service.host {
                let line = p.line_of(key);
                p.error(line, format!("{key}: h{h} runs the first instance; use events.fail_master"));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        Scenario::parse(text, Overrides::default())
    }

    #[test]
    fn bundled_scenarios_validate_cleanly() {
        for (name, text) in BUNDLED {
            let s = parse(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(s.diagnostics.is_empty(), "{name}: {:?}", s.diagnostics);
        }
    }

    #[test]
    fn inverted_thresholds() {
        let e = parse("policy.lo_rps = 1000\npolicy.hi_rps = 100\n").unwrap_err();
        assert_eq!(e.diagnostics.len(), 1);
        assert_eq!(e.diagnostics[0].message, "thresholds inverted");
        assert_eq!(e.diagnostics[0].line, 1);
    }

    #[test]
    fn unknown_key_warns() {
        let s = parse("sim.seed = 3 # comment\nsim.colour = blue\n").unwrap();
        assert_eq!(s.diagnostics.len(), 1);
        assert_eq!(s.diagnostics[0].level, Level::Warning);
        assert_eq!(s.config.cluster.seed, 3);
    }

    #[test]
    fn overrides_apply() {
        let s = Scenario::parse(
            "sim.seed = 3\nswitch.backend = group\n",
            Overrides {
                seed: Some(9),
                backend: Some(Backend::TwoTableLearn),
            },
        )
        .unwrap();
        assert_eq!(s.config.cluster.seed, 9);
        assert_eq!(s.config.cluster.backend, Backend::TwoTableLearn);
    }

    #[test]
    fn schedule_ramp_and_events() {
        let s = parse(
            "workload.schedule = 0:100, 10:500\nevents.fail_host = 5@1, 3@2\nevents.crash_replica = 7\nsim.duration = 20\n",
        )
        .unwrap();
        assert_eq!(s.config.workload.schedule.steps(), &[(0.0, 100.0), (10.0, 500.0)]);
        assert_eq!(
            s.config.events,
            vec![
                (3.0, Injection::FailHost(2)),
                (5.0, Injection::FailHost(1)),
                (7.0, Injection::CrashReplica)
            ]
        );
        let r = parse("workload.ramp_start = 400\nworkload.ramp_max = 1200\nsim.duration = 100\n").unwrap();
        assert_eq!(
            r.config.workload.schedule.steps(),
            &[(0.0, 400.0), (20.0, 800.0), (40.0, 1200.0)]
        );
    }

    #[test]
    fn range_errors() {
        for bad in [
            "cluster.cores = 2\ncluster.reserved_cores = 2\n",
            "cluster.replica_mbps = 0\n",
            "events.fail_host = 5@0\n",
            "switch.backend = fast\n",
            "workload.schedule = 5:1, 2:3\n",
            "sim.duration = ten\n",
            "just text\n",
        ] {
            assert!(parse(bad).is_err(), "{bad}");
        }
    }
}
