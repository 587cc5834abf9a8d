use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use log::{debug, info, warn};
use thiserror::Error;

use super::clock::{EventQueue, SchedulePast};
use super::metrics::{mean, percentile, MetricsRow, Window, CSV_HEADER};
use super::queue::{JobId, PsQueue};
use super::workload::{ArrivalGen, WorkloadSpec};
use crate::guest::{AppEvent, AppState, AppStats, GuestApp, ScalePolicy};
use crate::orchestrator::records::app_root;
use crate::orchestrator::{
    Cluster, ClusterConfig, Deferred, DownReason, Effect, OrchestratorError, RecoveryAction,
    ServiceSpec, Verb,
};
use crate::switchfab::{FlowKey, HostId, PortKind, UPLINK};

/// Fault injected at a fixed time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Injection {
    /// The most recently booted running replica vanishes.
    CrashReplica,
    /// The most recently booted running replica restarts under a new domain.
    RebootReplica,
    FailHost(HostId),
    FailMaster,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub duration: f64,
    pub metrics_interval: f64,
    pub cluster: ClusterConfig,
    /// Service rate of one replica with a core to itself, bytes per second.
    pub replica_bytes_per_sec: f64,
    pub base_latency: f64,
    /// Extra latency for flows that cross a tunnel.
    pub hop_delay: f64,
    pub policy: ScalePolicy,
    /// When false guests never invoke the orchestrator.
    pub scaling: bool,
    pub service: ServiceSpec,
    /// Replicas booted at time zero.
    pub initial_replicas: usize,
    pub workload: WorkloadSpec,
    pub events: Vec<(f64, Injection)>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            duration: 60.0,
            metrics_interval: 1.0,
            cluster: ClusterConfig::default(),
            replica_bytes_per_sec: 104e6,
            base_latency: 0.0025,
            hop_delay: 0.0002,
            policy: ScalePolicy::default(),
            scaling: true,
            service: ServiceSpec::new("www", std::net::Ipv4Addr::new(10, 0, 0, 18), 0),
            initial_replicas: 0,
            workload: WorkloadSpec::default(),
            events: Vec::new(),
        }
    }
}

impl SimConfig {
    /// Requests per second one replica serves at the workload's mean size.
    pub fn replica_rps(&self) -> f64 {
        self.replica_bytes_per_sec / self.workload.pages.mean_bytes()
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Schedule(#[from] SchedulePast),
    #[error("setup failed: {0}")]
    Setup(#[from] OrchestratorError),
    #[error("metrics output: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
enum Event {
    Arrival,
    Completion { name: String, generation: u64 },
    Deferred(Deferred),
    Poll { name: String, epoch: u64 },
    Monitor,
    Heartbeat(HostId),
    Metrics,
    Inject(Injection),
}

#[derive(Debug, Clone)]
struct Job {
    key: FlowKey,
    /// Key as delivered to the instance, after address rewrites.
    delivered: FlowKey,
    url: usize,
    arrival: f64,
    tunneled: bool,
}

#[derive(Debug)]
struct Slot {
    app: GuestApp,
    host: HostId,
    queue: PsQueue,
    jobs: BTreeMap<JobId, Job>,
    epoch: u64,
    window: Window,
    seq: u64,
}

/// Things that happened during a run, kept for inspection by callers.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub invocations: Vec<(f64, String, Verb)>,
    pub responses: Vec<(f64, String, AppEvent)>,
    pub recovery: Vec<(f64, RecoveryAction)>,
    pub downs: Vec<(f64, String, DownReason)>,
    pub ups: Vec<(f64, String)>,
    /// Jobs in flight at each granted halt, by instance.
    pub halt_inflight: Vec<(f64, String, Vec<JobId>)>,
    pub failed_jobs: BTreeSet<JobId>,
    /// Log entries each instance ever appended.
    pub log_counts: BTreeMap<String, u64>,
    pub injections: Vec<(f64, Injection, Option<String>)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub duration: f64,
    pub started: u64,
    pub completed: u64,
    pub failures: u64,
    pub in_flight: u64,
    pub mean_latency_ms: f64,
    pub p50_latency_ms: f64,
    pub p99_latency_ms: f64,
    pub final_replica_count: usize,
    pub max_replica_count: usize,
    pub invocations: AppStats,
}

impl Summary {
    pub fn to_text(&self) -> String {
        let s = &self.invocations;
        format!(
            "duration_s = {:.3}\nrequests_started = {}\nrequests_completed = {}\ndelivery_failures = {}\nin_flight_at_end = {}\nmean_latency_ms = {:.3}\np50_latency_ms = {:.3}\np99_latency_ms = {:.3}\nfinal_replica_count = {}\nmax_replica_count = {}\nreplicate_calls = {}\nhalt_calls = {}\ndie_calls = {}\ninvocation_errors = {}\n",
            self.duration,
            self.started,
            self.completed,
            self.failures,
            self.in_flight,
            self.mean_latency_ms,
            self.p50_latency_ms,
            self.p99_latency_ms,
            self.final_replica_count,
            self.max_replica_count,
            s.replicate_calls,
            s.halt_calls,
            s.die_calls,
            s.errors,
        )
    }
}

/// Single-threaded discrete-event run of one service on a cluster.
pub struct Simulation {
    cfg: SimConfig,
    cluster: Cluster,
    clock: EventQueue<Event>,
    arrivals: ArrivalGen,
    svc: usize,
    apps: BTreeMap<String, Slot>,
    in_flight: HashMap<FlowKey, (String, JobId)>,
    next_job: JobId,
    next_epoch: u64,
    rows: Vec<MetricsRow>,
    sink: Option<Box<dyn Write>>,
    started: u64,
    completed: u64,
    failures: u64,
    latencies_ms: Vec<f64>,
    max_replicas: usize,
    retired: AppStats,
    violations: Vec<String>,
    trace: Trace,
}

impl std::fmt::Debug for Simulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulation")
            .field("now", &self.clock.now())
            .field("apps", &self.apps.len())
            .field("started", &self.started)
            .finish()
    }
}

fn add_stats(a: &mut AppStats, b: &AppStats) {
    a.replicate_calls += b.replicate_calls;
    a.halt_calls += b.halt_calls;
    a.die_calls += b.die_calls;
    a.errors += b.errors;
    a.polls += b.polls;
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.policy
            .validate()
            .map_err(|e| SimError::Invariant(e.to_string()))?;
        let mut cluster = Cluster::new(cfg.cluster.clone());
        let svc = cluster.add_service(cfg.service.clone())?;
        let arrivals = ArrivalGen::new(
            cfg.workload.clone(),
            cfg.service.ip,
            cfg.service.port,
            cfg.cluster.seed,
        );
        let mut sim = Simulation {
            cluster,
            clock: EventQueue::new(),
            arrivals,
            svc,
            apps: BTreeMap::new(),
            in_flight: HashMap::new(),
            next_job: 0,
            next_epoch: 0,
            rows: Vec::new(),
            sink: None,
            started: 0,
            completed: 0,
            failures: 0,
            latencies_ms: Vec::new(),
            max_replicas: 0,
            retired: AppStats::default(),
            violations: Vec::new(),
            trace: Trace::default(),
            cfg,
        };
        for _ in 0..sim.cfg.initial_replicas {
            let target = sim
                .cluster
                .place_replica(svc)
                .ok_or(OrchestratorError::NoCapacity)?;
            sim.cluster.spawn_replica(svc, target, 0.0)?;
        }
        sim.absorb(0.0);
        if let Some(t) = sim.arrivals.peek() {
            sim.clock.schedule(t, Event::Arrival)?;
        }
        let c = &sim.cfg.cluster;
        sim.clock.schedule(c.monitor_period, Event::Monitor)?;
        for h in 0..c.hosts as HostId {
            sim.clock.schedule(c.heartbeat_interval, Event::Heartbeat(h))?;
        }
        sim.clock.schedule(sim.cfg.metrics_interval, Event::Metrics)?;
        for (t, inj) in sim.cfg.events.clone() {
            sim.clock.schedule(t, Event::Inject(inj))?;
        }
        sim.max_replicas = sim.cluster.serving_count(svc);
        Ok(sim)
    }

    /// Streams metrics rows to `sink` as they are produced, after a header.
    pub fn set_sink(&mut self, mut sink: Box<dyn Write>) -> Result<(), SimError> {
        writeln!(sink, "{CSV_HEADER}")?;
        self.sink = Some(sink);
        Ok(())
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn cluster_mut(&mut self) -> &mut Cluster {
        &mut self.cluster
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn app(&self, name: &str) -> Option<&GuestApp> {
        self.apps.get(name).map(|s| &s.app)
    }

    pub fn service_index(&self) -> usize {
        self.svc
    }

    /// Aggregate completions so far.
    pub fn completed(&self) -> u64 {
        self.completed
    }

    pub fn failures(&self) -> u64 {
        self.failures
    }

    /// Runs every event up to and including `until`.
    pub fn run_until(&mut self, until: f64) -> Result<(), SimError> {
        while let Some((now, ev)) = self.clock.pop_until(until) {
            self.handle(now, ev)?;
            if let Some(v) = self.violations.first() {
                return Err(SimError::Invariant(v.clone()));
            }
        }
        self.clock.advance_to(until);
        Ok(())
    }

    /// Runs to the configured duration and checks conservation.
    pub fn run(&mut self) -> Result<Summary, SimError> {
        self.run_until(self.cfg.duration)?;
        self.finish()
    }

    /// Flushes the first instance's log and checks end-of-run invariants.
    pub fn finish(&mut self) -> Result<Summary, SimError> {
        let first = self.cluster.service(self.svc).first.clone();
        self.flush_first(&first);
        let in_flight = self.in_flight.len() as u64;
        let queued: u64 = self.apps.values().map(|s| s.jobs.len() as u64).sum();
        if queued != in_flight || self.started != self.completed + self.failures + in_flight {
            return Err(SimError::Invariant(format!(
                "conservation: started {} != completed {} + failed {} + in flight {}",
                self.started, self.completed, self.failures, in_flight
            )));
        }
        if let Some(sink) = &mut self.sink {
            sink.flush()?;
        }
        let mut invocations = self.retired;
        for s in self.apps.values() {
            add_stats(&mut invocations, &s.app.stats);
        }
        Ok(Summary {
            duration: self.now(),
            started: self.started,
            completed: self.completed,
            failures: self.failures,
            in_flight,
            mean_latency_ms: mean(&self.latencies_ms),
            p50_latency_ms: percentile(&self.latencies_ms, 50.0),
            p99_latency_ms: percentile(&self.latencies_ms, 99.0),
            final_replica_count: self.cluster.serving_count(self.svc),
            max_replica_count: self.max_replicas,
            invocations,
        })
    }

    fn handle(&mut self, now: f64, ev: Event) -> Result<(), SimError> {
        match ev {
            Event::Arrival => {
                while let Some(req) = self.arrivals.next_before(now) {
                    self.started += 1;
                    self.admit(now, req.key, req.url, req.bytes);
                }
                if let Some(t) = self.arrivals.peek() {
                    self.clock.schedule(t, Event::Arrival)?;
                }
            }
            Event::Completion { name, generation } => {
                let current = self.apps.get(&name).map(|s| s.queue.generation());
                if current == Some(generation) {
                    self.complete(now, &name);
                }
            }
            Event::Deferred(action) => self.cluster.run_deferred(action, now),
            Event::Poll { name, epoch } => {
                let Some(slot) = self.apps.get_mut(&name) else {
                    return Ok(());
                };
                if slot.epoch != epoch {
                    return Ok(());
                }
                let store = self.cluster.store_mut(slot.host);
                if let Some(d) = slot.app.poll(now, store) {
                    let verb = match d {
                        crate::guest::PollDecision::Replicate => Some(Verb::Replicate),
                        crate::guest::PollDecision::Halt => Some(Verb::Halt),
                        crate::guest::PollDecision::Wait => None,
                    };
                    if let Some(v) = verb {
                        debug!("{now:.3} {name} invokes {v}");
                        self.trace.invocations.push((now, name.clone(), v));
                    }
                }
                self.cluster.pump(now);
                self.clock
                    .schedule(now + self.cfg.policy.poll_period, Event::Poll { name, epoch })?;
            }
            Event::Monitor => {
                for a in self.cluster.monitor_tick(now) {
                    self.trace.recovery.push((now, a));
                }
                self.clock
                    .schedule(now + self.cfg.cluster.monitor_period, Event::Monitor)?;
            }
            Event::Heartbeat(h) => {
                self.cluster.heartbeat_tick(h, now);
                self.clock
                    .schedule(now + self.cfg.cluster.heartbeat_interval, Event::Heartbeat(h))?;
            }
            Event::Metrics => {
                self.emit_metrics(now)?;
                self.clock
                    .schedule(now + self.cfg.metrics_interval, Event::Metrics)?;
            }
            Event::Inject(inj) => self.inject(now, inj)?,
        }
        self.absorb(now);
        Ok(())
    }

    fn inject(&mut self, now: f64, inj: Injection) -> Result<(), SimError> {
        let newest = || {
            self.cluster
                .instances()
                .into_iter()
                .rev()
                .find(|i| !i.first && i.state == crate::orchestrator::VmState::Running)
                .map(|i| i.name.clone())
        };
        let target = match inj {
            Injection::CrashReplica => {
                let n = newest();
                if let Some(n) = &n {
                    self.cluster.crash_instance(n)?;
                }
                n
            }
            Injection::RebootReplica => {
                let n = newest();
                if let Some(n) = &n {
                    self.cluster.reboot_instance(n)?;
                }
                n
            }
            Injection::FailHost(h) => {
                self.cluster.fail_host(h)?;
                None
            }
            Injection::FailMaster => {
                let m = self.cluster.master();
                self.cluster.fail_host(m)?;
                None
            }
        };
        info!("{now:.3} inject {inj:?} {target:?}");
        self.trace.injections.push((now, inj, target));
        Ok(())
    }

    fn fail_request(&mut self, key: &FlowKey) {
        self.failures += 1;
        let hub = self.cluster.hub(self.svc);
        if self.cluster.host(hub).alive {
            self.cluster.switch_mut(hub).close_flow(key);
        }
    }

    /// Steers a new request through the hub switch to an instance.
    fn route(&mut self, key: &FlowKey, now: f64) -> Option<(String, FlowKey, bool)> {
        let hub = self.cluster.hub(self.svc);
        if !self.cluster.host(hub).alive {
            return None;
        }
        let dec = self.cluster.switch_mut(hub).classify(key, UPLINK, now).ok()?;
        if let Some(owner) = self.cluster.port_owner(hub, dec.egress) {
            return Some((owner.to_string(), dec.key, false));
        }
        let Some(PortKind::Tunnel { remote, key: gre }) = self.cluster.switch(hub).port(dec.egress).cloned() else {
            return None;
        };
        if !self.cluster.host(remote).alive {
            return None;
        }
        let spoke = self.cluster.switch(remote).tunnel_port(hub, gre)?;
        let at = self
            .cluster
            .switch_mut(remote)
            .classify(&dec.key, spoke, now)
            .ok()?;
        let owner = self.cluster.port_owner(remote, at.egress)?;
        Some((owner.to_string(), at.key, true))
    }

    fn admit(&mut self, now: f64, key: FlowKey, url: usize, bytes: f64) {
        let routed = self
            .route(&key, now)
            .filter(|(name, _, _)| self.apps.get(name).is_some_and(|s| s.app.accepting()));
        let Some((name, delivered, tunneled)) = routed else {
            self.fail_request(&key);
            return;
        };
        let id = self.next_job;
        self.next_job += 1;
        let slot = self.apps.get_mut(&name).expect("checked");
        slot.app.begin_request();
        slot.queue.arrive(now, id, bytes);
        slot.jobs.insert(
            id,
            Job {
                key,
                delivered,
                url,
                arrival: now,
                tunneled,
            },
        );
        self.in_flight.insert(key, (name.clone(), id));
        self.reschedule(&name);
    }

    fn reschedule(&mut self, name: &str) {
        let Some(slot) = self.apps.get_mut(name) else {
            return;
        };
        if let Some(t) = slot.queue.next_completion() {
            let generation = slot.queue.generation();
            let at = t.max(self.clock.now());
            self.clock
                .schedule(
                    at,
                    Event::Completion {
                        name: name.to_string(),
                        generation,
                    },
                )
                .expect("not in the past");
        }
    }

    fn complete(&mut self, now: f64, name: &str) {
        let slot = self.apps.get_mut(name).expect("checked by caller");
        let done = slot.queue.complete(now);
        let mut finished = Vec::with_capacity(done.len());
        for id in done {
            let job = slot.jobs.remove(&id).expect("queued job");
            let latency = now - job.arrival
                + self.cfg.base_latency
                + if job.tunneled { self.cfg.hop_delay } else { 0.0 };
            let ms = latency * 1e3;
            slot.app.complete_request(now, format!("GET /{}", job.url));
            slot.window.record(ms);
            *self.trace.log_counts.entry(name.to_string()).or_default() += 1;
            self.latencies_ms.push(ms);
            self.completed += 1;
            self.in_flight.remove(&job.key);
            finished.push(job);
        }
        let host = slot.host;
        let drained = slot.app.drained();
        for job in finished {
            self.check_response(now, name, host, &job);
            let hub = self.cluster.hub(self.svc);
            self.cluster.switch_mut(hub).close_flow(&job.key);
        }
        if drained {
            self.merge_and_die(now, name);
        }
        self.reschedule(name);
    }

    /// The reply must leave the serving host on the uplink carrying the
    /// service address.
    fn check_response(&mut self, now: f64, name: &str, host: HostId, job: &Job) {
        let Some(inst) = self.cluster.instance(name) else {
            return;
        };
        let vif = inst.vif;
        let spec = self.cluster.service(self.svc).spec.clone();
        let reply = job.delivered.reversed();
        match self.cluster.switch_mut(host).classify(&reply, vif, now) {
            Ok(d) if d.egress == UPLINK && d.key.src_ip == spec.ip && d.key.src_port == spec.port => {}
            other => self.violations.push(format!(
                "reply from {name} for {:?} left as {other:?}",
                job.key
            )),
        }
    }

    fn merge_and_die(&mut self, now: f64, name: &str) {
        let first = self.cluster.service(self.svc).first.clone();
        self.flush_first(&first);
        let hub = self.cluster.hub(self.svc);
        let slot = self.apps.get_mut(name).expect("live app");
        if let Err(e) = slot.app.merge_state(self.cluster.store_mut(hub)) {
            self.violations.push(format!("{name}: merge failed: {e}"));
        }
        let host = slot.host;
        slot.app.die(self.cluster.store_mut(host));
        self.trace.invocations.push((now, name.to_string(), Verb::Die));
        self.cluster.pump(now);
    }

    fn flush_first(&mut self, first: &str) {
        let Some(slot) = self.apps.get_mut(first) else {
            return;
        };
        if !self.cluster.host(slot.host).alive {
            return;
        }
        if let Err(e) = slot.app.flush_log(self.cluster.store_mut(slot.host)) {
            self.violations.push(format!("{first}: log flush failed: {e}"));
        }
    }

    /// Applies cluster effects until none remain.
    fn absorb(&mut self, now: f64) {
        loop {
            let effects = self.cluster.take_effects();
            if effects.is_empty() {
                break;
            }
            for e in effects {
                self.apply(now, e);
            }
        }
    }

    fn apply(&mut self, now: f64, e: Effect) {
        match e {
            Effect::After { delay, action } => {
                self.clock
                    .schedule(now + delay, Event::Deferred(action))
                    .expect("delay is non-negative");
            }
            Effect::InstanceUp { name } => self.start_app(now, &name),
            Effect::InstanceDown { name, reason } => {
                self.trace.downs.push((now, name.clone(), reason));
                self.stop_app(now, &name);
            }
            Effect::HostDown { host } => {
                let names: Vec<String> = self
                    .apps
                    .iter()
                    .filter(|(_, s)| s.host == host)
                    .map(|(n, _)| n.clone())
                    .collect();
                for n in names {
                    self.stop_app(now, &n);
                }
            }
            Effect::FlowsExpired { flows } => {
                for key in flows {
                    let Some((name, id)) = self.in_flight.remove(&key) else {
                        continue;
                    };
                    let slot = self.apps.get_mut(&name).expect("in-flight owner");
                    slot.queue.remove(now, id);
                    slot.jobs.remove(&id);
                    slot.app.abort_request();
                    self.failures += 1;
                    self.trace.failed_jobs.insert(id);
                    let drained = slot.app.drained();
                    if drained {
                        self.merge_and_die(now, &name);
                    }
                    self.reschedule(&name);
                }
            }
            Effect::Response { instance, value } => {
                let Some(slot) = self.apps.get_mut(&instance) else {
                    return;
                };
                let Some(ev) = slot.app.on_response(&value) else {
                    return;
                };
                if ev == AppEvent::Halted(Ok(())) {
                    let ids = slot.jobs.keys().copied().collect();
                    self.trace.halt_inflight.push((now, instance.clone(), ids));
                }
                let drained = slot.app.drained();
                self.trace.responses.push((now, instance.clone(), ev));
                if drained {
                    self.merge_and_die(now, &instance);
                }
            }
        }
    }

    fn start_app(&mut self, now: f64, name: &str) {
        let Some(inst) = self.cluster.instance(name) else {
            return;
        };
        let (host, first, seq) = (inst.host, inst.first, inst.seq);
        self.stop_app(now, name);
        let spec = &self.cluster.service(self.svc).spec;
        let mut app = GuestApp::new(name, &spec.name, first, self.cfg.policy);
        app.scaling = self.cfg.scaling;
        if !first {
            let hub = self.cluster.hub(self.svc);
            app.set_ancestor(self.cluster.store(hub).snapshot(&app_root(&spec.name)));
        }
        self.next_epoch += 1;
        let epoch = self.next_epoch;
        self.apps.insert(
            name.to_string(),
            Slot {
                app,
                host,
                queue: PsQueue::new(self.cfg.replica_bytes_per_sec, now),
                jobs: BTreeMap::new(),
                epoch,
                window: Window::default(),
                seq,
            },
        );
        self.trace.ups.push((now, name.to_string()));
        self.update_rates(now, host);
        self.clock
            .schedule(
                now + self.cfg.policy.poll_period,
                Event::Poll {
                    name: name.to_string(),
                    epoch,
                },
            )
            .expect("future");
        self.max_replicas = self.max_replicas.max(self.cluster.serving_count(self.svc));
    }

    fn stop_app(&mut self, now: f64, name: &str) {
        let Some(mut slot) = self.apps.remove(name) else {
            return;
        };
        if slot.app.first && self.cluster.host(slot.host).alive {
            if let Err(e) = slot.app.flush_log(self.cluster.store_mut(slot.host)) {
                warn!("{name}: log lost on stop: {e}");
            }
        }
        for (id, job) in std::mem::take(&mut slot.jobs) {
            self.in_flight.remove(&job.key);
            self.trace.failed_jobs.insert(id);
            self.fail_request(&job.key);
        }
        slot.app.stop();
        add_stats(&mut self.retired, &slot.app.stats);
        self.update_rates(now, slot.host);
    }

    /// Cores are shared evenly once a host runs more VMs than it has slots.
    fn update_rates(&mut self, now: f64, host: HostId) {
        let n = self.apps.values().filter(|s| s.host == host).count();
        if n == 0 {
            return;
        }
        let slots = self.cfg.cluster.slots() as f64;
        let rate = self.cfg.replica_bytes_per_sec * (slots / n as f64).min(1.0);
        let names: Vec<String> = self
            .apps
            .iter_mut()
            .filter(|(_, s)| s.host == host)
            .map(|(name, s)| {
                s.queue.set_rate(now, rate);
                name.clone()
            })
            .collect();
        for name in names {
            self.reschedule(&name);
        }
    }

    fn emit_metrics(&mut self, now: f64) -> Result<(), SimError> {
        let interval = self.cfg.metrics_interval;
        let count = self.cluster.serving_count(self.svc);
        self.max_replicas = self.max_replicas.max(count);
        let service = self.cluster.service(self.svc).spec.name.clone();
        let mut slots: Vec<(&String, &mut Slot)> = self.apps.iter_mut().collect();
        slots.sort_by_key(|(_, s)| s.seq);
        let mut rows = Vec::with_capacity(slots.len());
        for (name, s) in slots {
            let busy = s.queue.busy_time(now);
            let w = &s.window;
            rows.push(MetricsRow {
                time: now,
                service: service.clone(),
                replica_id: name.clone(),
                host: s.host,
                rps: w.completions as f64 / interval,
                utilization: ((busy - w.busy_at_start) / interval).clamp(0.0, 1.0),
                mean_latency_ms: mean(&w.latencies_ms),
                p99_latency_ms: percentile(&w.latencies_ms, 99.0),
                replica_count: count,
                delivery_failures: self.failures,
            });
            s.window.reset(busy);
        }
        if let Some(sink) = &mut self.sink {
            for r in &rows {
                writeln!(sink, "{}", r.csv())?;
            }
        }
        self.rows.extend(rows);
        Ok(())
    }

    /// Names of instances currently serving, in boot order.
    pub fn serving(&self) -> Vec<String> {
        let mut v: Vec<(&String, &Slot)> = self
            .apps
            .iter()
            .filter(|(_, s)| s.app.state != AppState::Stopped)
            .collect();
        v.sort_by_key(|(_, s)| s.seq);
        v.into_iter().map(|(n, _)| n.clone()).collect()
    }

    /// In-flight request count of one instance.
    pub fn in_flight_of(&self, name: &str) -> usize {
        self.apps.get(name).map_or(0, |s| s.jobs.len())
    }
}
