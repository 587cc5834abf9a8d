use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::Ipv4Addr;
use std::sync::mpsc::{channel, Receiver, Sender};

use log::{debug, info, warn};

use super::heartbeat::HeartbeatTable;
use super::placement::{HostLoad, LocalFirst, PlacementPolicy};
use super::records::{
    app_id_hex, app_root, lifecycle_root, path, request_key, request_root, response_key, vm_root,
    RemoteBoot, RequestRecord, ResponseRecord, Verb, VmRecord, VmRole, VmState, HEARTBEATS,
    REQUESTS,
};
use super::registry::HypervisorRegistry;
use super::OrchestratorError;
use crate::kvstore::{AccessScope, Change, Identity, Path, Store, WatchEvent, WatchHandle};
use crate::switchfab::{
    Action, Backend, Bucket, BucketId, FlowKey, FlowRule, GroupId, HostId, Mac, Match, PortId,
    RuleAction, RuleId, Switch, TCP, UPLINK,
};

pub const SERVICE_PRIORITY: u16 = 100;
pub const TUNNEL_INGRESS_PRIORITY: u16 = 150;
pub const OUTBOUND_PRIORITY: u16 = 50;

/// First address handed to replicas on the internal network.
const FIRST_REPLICA_IP: Ipv4Addr = Ipv4Addr::new(10, 0, 1, 200);

#[derive(Debug, Clone)]
pub struct ClusterConfig {
    pub hosts: usize,
    pub cores: usize,
    pub reserved_cores: usize,
    pub master: HostId,
    /// Seconds from boot request to a running guest.
    pub boot_delay: f64,
    /// Delivery delay of a write into another host's store.
    pub store_delay: f64,
    pub monitor_period: f64,
    pub heartbeat_interval: f64,
    pub heartbeat_multiplier: u32,
    pub seed: u64,
    pub backend: Backend,
    /// VMs a host may run; defaults to one per usable core.
    pub max_vms: Option<usize>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            hosts: 3,
            cores: 6,
            reserved_cores: 2,
            master: 0,
            boot_delay: 0.03,
            store_delay: 0.001,
            monitor_period: 1.0,
            heartbeat_interval: 2.0,
            heartbeat_multiplier: 2,
            seed: 1,
            backend: Backend::GroupTable,
            max_vms: None,
        }
    }
}

impl ClusterConfig {
    /// Cores left for guests, one per VM at full speed.
    pub fn slots(&self) -> usize {
        self.cores.saturating_sub(self.reserved_cores)
    }

    pub fn vm_limit(&self) -> usize {
        self.max_vms.unwrap_or_else(|| self.slots())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceSpec {
    /// Hostname of the first instance.
    pub name: String,
    pub dns_name: String,
    pub ip: Ipv4Addr,
    pub port: u16,
    pub host: HostId,
    pub image: String,
    pub stop_mode: String,
    pub ttl: u32,
    pub dns_ttl: u32,
}

impl ServiceSpec {
    pub fn new(name: &str, ip: Ipv4Addr, host: HostId) -> Self {
        ServiceSpec {
            name: name.to_string(),
            dns_name: name.to_string(),
            ip,
            port: 80,
            host,
            image: format!("{name}.xen"),
            stop_mode: "shutdown".into(),
            ttl: 300,
            dns_ttl: 500,
        }
    }

    pub fn app_id(&self) -> GroupId {
        u32::from(self.ip)
    }

    /// Address of the first instance on the internal network.
    pub fn internal_ip(&self) -> Ipv4Addr {
        let [_, _, _, last] = self.ip.octets();
        Ipv4Addr::new(10, 0, 1, last)
    }
}

#[derive(Debug, Clone)]
pub struct Service {
    pub spec: ServiceSpec,
    pub first: String,
    /// The replica currently allowed to drain, if any.
    pub halting: Option<String>,
    next_bucket: BucketId,
}

impl Service {
    pub fn group(&self) -> GroupId {
        self.spec.app_id()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TunnelLink {
    pub key: u32,
    /// Tunnel port on the first-instance host.
    pub hub_port: PortId,
    /// Tunnel port on the replica host.
    pub spoke_port: PortId,
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub name: String,
    pub service: usize,
    pub host: HostId,
    pub first: bool,
    pub dom_id: u32,
    pub state: VmState,
    /// Service address for a first instance, internal address for replicas.
    pub ip: Ipv4Addr,
    pub mac: Mac,
    pub vif: PortId,
    pub bucket: BucketId,
    /// True once the bucket steering to this instance is installed.
    pub attached: bool,
    pub tunnel: Option<TunnelLink>,
    pub initial_xs: Option<String>,
    pub ttl_zero: bool,
    /// Boot order, used to order instances in reports.
    pub seq: u64,
    rules: Vec<(HostId, RuleId)>,
    guest_watch: Option<WatchHandle>,
}

#[derive(Debug)]
pub struct Host {
    pub id: HostId,
    pub name: String,
    pub store: Store,
    pub switch: Switch,
    pub registry: HypervisorRegistry,
    pub heartbeats: HeartbeatTable,
    pub alive: bool,
    pub vm_limit: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Listener {
    Orchestrator,
    /// A first-instance host waiting for the answer to a remote boot.
    RemoteResponse { hub: HostId },
    Guest(String),
}

#[derive(Debug, Clone)]
pub struct Notice {
    pub host: HostId,
    pub listener: Listener,
    pub event: WatchEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownReason {
    Destroyed,
    Crashed,
    Rebooted,
    HostFailed,
    Failover,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Deferred {
    BootComplete {
        name: String,
    },
    RemotePut {
        host: HostId,
        path: Path,
        value: String,
        writer: Identity,
    },
}

/// Work the cluster hands back to whoever drives time.
#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    After { delay: f64, action: Deferred },
    InstanceUp { name: String },
    InstanceDown { name: String, reason: DownReason },
    HostDown { host: HostId },
    /// Pinned flows cut off before completion.
    FlowsExpired { flows: Vec<FlowKey> },
    /// A response landed on a guest's response key.
    Response { instance: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecoveryAction {
    Destroyed { name: String },
    DrainPending { name: String, live: usize },
    CrashCollected { name: String, expired: usize },
    Reconciled { name: String, old_dom: u32, new_dom: u32 },
    HostFailed { host: HostId, removed: Vec<String> },
    MasterFailover { new_master: HostId },
}

#[derive(Debug, Clone)]
struct RemotePending {
    requester: (HostId, String),
    service: usize,
    vm: Option<String>,
}

pub struct Cluster {
    pub config: ClusterConfig,
    hosts: Vec<Host>,
    services: Vec<Service>,
    instances: BTreeMap<String, Instance>,
    port_owner: BTreeMap<(HostId, PortId), String>,
    master: HostId,
    placement: Box<dyn PlacementPolicy>,
    next_mac: u32,
    next_ip: u32,
    next_tunnel_key: u32,
    next_seq: u64,
    /// Requesters with a request being processed, by (host, requester).
    outstanding: BTreeSet<(HostId, String)>,
    /// Local boots awaiting completion: vm name to requester.
    pending_local: BTreeMap<String, (HostId, String)>,
    /// Remote boots in flight, per (first-instance host, target host).
    remote_queues: BTreeMap<(HostId, HostId), VecDeque<RemotePending>>,
    notices_tx: Sender<Notice>,
    notices_rx: Receiver<Notice>,
    effects: Vec<Effect>,
}

impl std::fmt::Debug for Cluster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cluster")
            .field("hosts", &self.hosts.len())
            .field("services", &self.services.len())
            .field("instances", &self.instances.len())
            .field("master", &self.master)
            .finish()
    }
}

pub fn host_name(id: HostId) -> String {
    format!("h{id}")
}

fn watch_into(tx: &Sender<Notice>, host: HostId, listener: Listener) -> Box<dyn FnMut(&WatchEvent) + Send> {
    let tx = tx.clone();
    Box::new(move |ev| {
        let _ = tx.send(Notice {
            host,
            listener: listener.clone(),
            event: ev.clone(),
        });
    })
}

impl Cluster {
    pub fn new(config: ClusterConfig) -> Self {
        let (notices_tx, notices_rx) = channel();
        let mut hosts: Vec<Host> = (0..config.hosts as HostId)
            .map(|id| {
                let name = host_name(id);
                let mut switch = Switch::new(id, config.seed);
                switch
                    .select_backend_mode(config.backend)
                    .expect("fresh switch");
                Host {
                    id,
                    store: Store::new(Identity::orchestrator(&name)),
                    name,
                    switch,
                    registry: HypervisorRegistry::new(),
                    heartbeats: HeartbeatTable::new(
                        config.heartbeat_interval,
                        config.heartbeat_multiplier,
                    ),
                    alive: true,
                    vm_limit: config.vm_limit(),
                }
            })
            .collect();
        let names: Vec<String> = hosts.iter().map(|h| h.name.clone()).collect();
        for h in hosts.iter_mut() {
            // Every other host's orchestrator owns a request/response pair
            // here and may beat into the heartbeat table.
            for (other, other_name) in names.iter().enumerate() {
                if other as HostId == h.id {
                    continue;
                }
                let id = Identity::orchestrator(other_name);
                h.store
                    .set_scope(request_root(other_name), AccessScope::owned_by(id.clone()));
                h.store.set_scope(
                    path(HEARTBEATS).join(other_name).expect("host name"),
                    AccessScope::owned_by(id.clone()),
                );
                h.store.watch_key(
                    response_key(other_name),
                    watch_into(&notices_tx, h.id, Listener::RemoteResponse { hub: other as HostId }),
                );
            }
            h.store.watch_subtree(
                path(REQUESTS),
                watch_into(&notices_tx, h.id, Listener::Orchestrator),
            );
            h.store.watch_subtree(
                path(HEARTBEATS),
                watch_into(&notices_tx, h.id, Listener::Orchestrator),
            );
        }
        Cluster {
            master: config.master,
            config,
            hosts,
            services: Vec::new(),
            instances: BTreeMap::new(),
            port_owner: BTreeMap::new(),
            placement: Box::new(LocalFirst),
            next_mac: 1,
            next_ip: u32::from(FIRST_REPLICA_IP),
            next_tunnel_key: 1,
            next_seq: 0,
            outstanding: BTreeSet::new(),
            pending_local: BTreeMap::new(),
            remote_queues: BTreeMap::new(),
            notices_tx,
            notices_rx,
            effects: Vec::new(),
        }
    }

    pub fn set_placement(&mut self, policy: Box<dyn PlacementPolicy>) {
        self.placement = policy;
    }

    // ---- accessors ----

    pub fn master(&self) -> HostId {
        self.master
    }

    pub fn hosts(&self) -> &[Host] {
        &self.hosts
    }

    pub fn host(&self, id: HostId) -> &Host {
        &self.hosts[id as usize]
    }

    pub fn store(&self, host: HostId) -> &Store {
        &self.hosts[host as usize].store
    }

    pub fn store_mut(&mut self, host: HostId) -> &mut Store {
        &mut self.hosts[host as usize].store
    }

    pub fn switch(&self, host: HostId) -> &Switch {
        &self.hosts[host as usize].switch
    }

    pub fn switch_mut(&mut self, host: HostId) -> &mut Switch {
        &mut self.hosts[host as usize].switch
    }

    pub fn services(&self) -> &[Service] {
        &self.services
    }

    pub fn service(&self, idx: usize) -> &Service {
        &self.services[idx]
    }

    pub fn service_index(&self, name: &str) -> Option<usize> {
        self.services.iter().position(|s| s.spec.name == name)
    }

    pub fn instance(&self, name: &str) -> Option<&Instance> {
        self.instances.get(name)
    }

    /// Instances in boot order.
    pub fn instances(&self) -> Vec<&Instance> {
        let mut v: Vec<&Instance> = self.instances.values().collect();
        v.sort_by_key(|i| i.seq);
        v
    }

    /// The host running the service's first instance, where its group lives.
    pub fn hub(&self, service: usize) -> HostId {
        self.instances[&self.services[service].first].host
    }

    /// Instances of the service that are running or draining.
    pub fn serving_count(&self, service: usize) -> usize {
        self.instances
            .values()
            .filter(|i| {
                i.service == service && matches!(i.state, VmState::Running | VmState::Halting)
            })
            .count()
    }

    pub fn replica_count(&self, service: usize) -> usize {
        self.instances
            .values()
            .filter(|i| i.service == service && !i.first)
            .count()
    }

    /// Which instance a vif port on `host` belongs to.
    pub fn port_owner(&self, host: HostId, port: PortId) -> Option<&str> {
        self.port_owner.get(&(host, port)).map(String::as_str)
    }

    pub fn take_effects(&mut self) -> Vec<Effect> {
        std::mem::take(&mut self.effects)
    }

    pub fn host_loads(&self) -> Vec<HostLoad> {
        self.hosts
            .iter()
            .map(|h| {
                let booted = self.instances.values().filter(|i| i.host == h.id).count();
                let queued: usize = self
                    .remote_queues
                    .iter()
                    .filter(|((_, t), _)| *t == h.id)
                    .map(|(_, q)| q.iter().filter(|p| p.vm.is_none()).count())
                    .sum();
                HostLoad {
                    host: h.id,
                    used: booted + queued,
                    slots: h.vm_limit,
                    alive: h.alive,
                }
            })
            .collect()
    }

    /// Where the placement policy would put a new replica of `service`.
    pub fn place_replica(&self, service: usize) -> Option<HostId> {
        self.placement.place(self.hub(service), &self.host_loads())
    }

    /// Concatenated store and switch dumps for every host.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for h in &self.hosts {
            out.push_str(&format!("# host {} ({})\n", h.id, if h.alive { "up" } else { "down" }));
            out.push_str("## store\n");
            out.push_str(&h.store.dump());
            out.push_str("## switch\n");
            out.push_str(&h.switch.dump());
        }
        out
    }

    // ---- allocation helpers ----

    fn alloc_mac(&mut self) -> Mac {
        let m = Mac::from_index(self.next_mac);
        self.next_mac += 1;
        m
    }

    fn alloc_ip(&mut self) -> Ipv4Addr {
        let ip = Ipv4Addr::from(self.next_ip);
        self.next_ip += 1;
        ip
    }

    fn alloc_seq(&mut self) -> u64 {
        self.next_seq += 1;
        self.next_seq
    }

    fn admin(&self, host: HostId) -> Identity {
        self.hosts[host as usize].store.admin().clone()
    }

    fn admin_put(&mut self, host: HostId, p: Path, value: impl Into<String>) {
        let h = &mut self.hosts[host as usize];
        if !h.alive {
            return;
        }
        let admin = h.store.admin().clone();
        h.store.put(p, value, &admin).expect("admin may write");
    }

    fn write_record(&mut self, host: HostId, rec: &VmRecord) {
        let h = &mut self.hosts[host as usize];
        let admin = h.store.admin().clone();
        h.store
            .transaction(&admin, |tx| {
                for (p, v) in rec.entries() {
                    tx.put(p, v);
                }
            })
            .expect("admin may write");
    }

    fn record_of(&self, inst: &Instance) -> VmRecord {
        let svc = &self.services[inst.service].spec;
        let role = if inst.first {
            let mut ips = BTreeMap::new();
            ips.insert(format!("vif{}.1", inst.dom_id), svc.ip);
            ips.insert(format!("vif{}.2", inst.dom_id), svc.internal_ip());
            let mut dns = BTreeMap::new();
            dns.insert(svc.dns_name.clone(), svc.dns_ttl);
            VmRole::First {
                ips,
                mac: inst.mac,
                dns,
            }
        } else {
            VmRole::Replica {
                ip: inst.ip,
                first_instance_host: svc.name.clone(),
            }
        };
        VmRecord {
            name: inst.name.clone(),
            dom_id: inst.dom_id,
            app_id: app_id_hex(svc.ip),
            state: inst.state,
            stop_mode: svc.stop_mode.clone(),
            role,
        }
    }

    fn set_state(&mut self, name: &str, state: VmState) {
        let inst = self.instances.get_mut(name).expect("known instance");
        debug_assert!(
            inst.state == state || inst.state.can_become(state),
            "{} -> {}",
            inst.state,
            state
        );
        inst.state = state;
        let host = inst.host;
        let p = vm_root(name).join("state").expect("static");
        self.admin_put(host, p, state.as_str());
    }

    // ---- services and boots ----

    /// Registers a service and boots its first instance immediately.
    pub fn add_service(&mut self, spec: ServiceSpec) -> Result<usize, OrchestratorError> {
        if self.service_index(&spec.name).is_some() {
            return Err(OrchestratorError::DuplicateService(spec.name));
        }
        if spec.host as usize >= self.hosts.len() || !self.hosts[spec.host as usize].alive {
            return Err(OrchestratorError::NoSuchHost(spec.host));
        }
        let idx = self.services.len();
        self.services.push(Service {
            first: spec.name.clone(),
            halting: None,
            next_bucket: 1,
            spec: spec.clone(),
        });
        let mac = self.alloc_mac();
        let seq = self.alloc_seq();
        let dom = self.hosts[spec.host as usize].registry.create(&spec.name);
        let inst = Instance {
            name: spec.name.clone(),
            service: idx,
            host: spec.host,
            first: true,
            dom_id: dom,
            state: VmState::Running,
            ip: spec.ip,
            mac,
            vif: 0,
            bucket: 0,
            attached: false,
            tunnel: None,
            initial_xs: None,
            ttl_zero: false,
            seq,
            rules: Vec::new(),
            guest_watch: None,
        };
        self.instances.insert(spec.name.clone(), inst);
        self.install_first_instance(idx)?;
        self.effects.push(Effect::InstanceUp { name: spec.name });
        Ok(idx)
    }

    /// Programs the hub switch and store for a service's first instance:
    /// vif, single-bucket group, service rule and outbound rule.
    fn install_first_instance(&mut self, svc: usize) -> Result<(), OrchestratorError> {
        let spec = self.services[svc].spec.clone();
        let name = spec.name.clone();
        let (host, dom, mac) = {
            let i = &self.instances[&name];
            (i.host, i.dom_id, i.mac)
        };
        let bucket = self.next_bucket(svc);
        let sw = &mut self.hosts[host as usize].switch;
        let vif = sw.add_vif(format!("vif{dom}.1"));
        sw.create_group(
            spec.app_id(),
            vec![Bucket::new(bucket, 1, vec![Action::SetDstMac(mac), Action::Output(vif)])],
        )?;
        let service_rule = sw.install_flow(FlowRule::new(
            SERVICE_PRIORITY,
            Match::any()
                .in_port(UPLINK)
                .dst_ip(spec.ip)
                .proto(TCP)
                .dst_port(spec.port),
            RuleAction::Group(spec.app_id()),
        ))?;
        let outbound = sw.install_flow(FlowRule::new(
            OUTBOUND_PRIORITY,
            Match::any().in_port(vif),
            RuleAction::Apply(vec![Action::Output(UPLINK)]),
        ))?;
        self.port_owner.insert((host, vif), name.clone());
        {
            let inst = self.instances.get_mut(&name).expect("just inserted");
            inst.vif = vif;
            inst.bucket = bucket;
            inst.attached = true;
            inst.rules = vec![(host, service_rule), (host, outbound)];
        }
        let rec = self.record_of(&self.instances[&name]);
        self.write_record(host, &rec);
        self.write_lifecycle(host, &name, None, spec.ttl);
        self.grant_guest(svc, &name);
        let store = &mut self.hosts[host as usize].store;
        store.set_scope(
            app_root(&spec.name),
            AccessScope::owned_by(Identity::service(&spec.name))
                .with_writer(Identity::instance(&name)),
        );
        Ok(())
    }

    fn next_bucket(&mut self, svc: usize) -> BucketId {
        let s = &mut self.services[svc];
        let b = s.next_bucket;
        s.next_bucket += 1;
        b
    }

    fn write_lifecycle(&mut self, host: HostId, name: &str, initial_xs: Option<&str>, ttl: u32) {
        let root = lifecycle_root(name);
        let h = &mut self.hosts[host as usize];
        let admin = h.store.admin().clone();
        h.store
            .transaction(&admin, |tx| {
                tx.put(root.join("initial_xs").expect("static"), initial_xs.unwrap_or(""))
                    .put(root.join("ttl").expect("static"), ttl.to_string());
            })
            .expect("admin may write");
    }

    /// Gives a guest its request key pair and a watch on its response key.
    fn grant_guest(&mut self, svc: usize, name: &str) {
        let service = self.services[svc].spec.name.clone();
        let host = self.instances[name].host;
        let tx = self.notices_tx.clone();
        let store = &mut self.hosts[host as usize].store;
        store.set_scope(
            request_root(name),
            AccessScope::owned_by(Identity::service(&service)).with_writer(Identity::instance(name)),
        );
        let handle = store.watch_key(
            response_key(name),
            watch_into(&tx, host, Listener::Guest(name.to_string())),
        );
        self.instances.get_mut(name).expect("known").guest_watch = Some(handle);
        let hub = self.hub(svc);
        let store = &mut self.hosts[hub as usize].store;
        if let Some(scope) = store.scope_for(&app_root(&service)).cloned() {
            store.set_scope(app_root(&service), scope.with_writer(Identity::instance(name)));
        }
    }

    /// Creates a replica VM on `target` in the provisioning state and
    /// schedules its boot completion.
    fn start_boot(&mut self, svc: usize, target: HostId, initial_xs: Option<String>) -> String {
        let mac = self.alloc_mac();
        let ip = self.alloc_ip();
        let seq = self.alloc_seq();
        let name = mac.to_string();
        let h = &mut self.hosts[target as usize];
        let dom = h.registry.create(&name);
        let vif = h.switch.add_vif(format!("vif{dom}.0"));
        let bucket = self.next_bucket(svc);
        self.port_owner.insert((target, vif), name.clone());
        self.instances.insert(
            name.clone(),
            Instance {
                name: name.clone(),
                service: svc,
                host: target,
                first: false,
                dom_id: dom,
                state: VmState::Provisioning,
                ip,
                mac,
                vif,
                bucket,
                attached: false,
                tunnel: None,
                initial_xs: initial_xs.clone(),
                ttl_zero: false,
                seq,
                rules: Vec::new(),
                guest_watch: None,
            },
        );
        let rec = self.record_of(&self.instances[&name]);
        self.write_record(target, &rec);
        let ttl = self.services[svc].spec.ttl;
        self.write_lifecycle(target, &name, initial_xs.as_deref(), ttl);
        self.grant_guest(svc, &name);
        self.effects.push(Effect::After {
            delay: self.config.boot_delay,
            action: Deferred::BootComplete { name: name.clone() },
        });
        info!("boot {name} for {} on h{target}", self.services[svc].spec.name);
        name
    }

    /// Installs the bucket steering to a running replica, plus the tunnel,
    /// tunnel ingress and SNAT rules when it runs away from the hub.
    fn attach(&mut self, name: &str, now: f64) -> Result<(), OrchestratorError> {
        let inst = self.instances[name].clone();
        let svc = &self.services[inst.service];
        let spec = svc.spec.clone();
        let gid = svc.group();
        let hub = self.hub(inst.service);
        let mut rules = Vec::new();
        let out_port = if inst.host == hub {
            inst.vif
        } else {
            let key = self.next_tunnel_key;
            self.next_tunnel_key += 1;
            let hub_port = self.hosts[hub as usize].switch.create_tunnel(inst.host, key)?.port;
            let spoke = &mut self.hosts[inst.host as usize].switch;
            let spoke_port = spoke.create_tunnel(hub, key)?.port;
            let ingress = spoke.install_flow(FlowRule::new(
                TUNNEL_INGRESS_PRIORITY,
                Match::any().in_port(spoke_port),
                RuleAction::Apply(vec![Action::Output(inst.vif)]),
            ))?;
            rules.push((inst.host, ingress));
            self.instances.get_mut(name).expect("known").tunnel = Some(TunnelLink {
                key,
                hub_port,
                spoke_port,
            });
            self.hosts[hub as usize].heartbeats.track(inst.host, now);
            hub_port
        };
        let snat = self.hosts[inst.host as usize]
            .switch
            .install_snat(spec.port, inst.ip, spec.ip)?;
        rules.push((inst.host, snat));
        self.hosts[hub as usize].switch.add_bucket(
            gid,
            Bucket::new(
                inst.bucket,
                1,
                vec![
                    Action::SetDstIp(inst.ip),
                    Action::SetDstMac(inst.mac),
                    Action::Output(out_port),
                ],
            ),
        )?;
        let i = self.instances.get_mut(name).expect("known");
        i.rules.extend(rules);
        i.attached = true;
        Ok(())
    }

    /// Boots and attaches a replica without going through the request path.
    pub fn spawn_replica(
        &mut self,
        svc: usize,
        target: HostId,
        now: f64,
    ) -> Result<String, OrchestratorError> {
        let load = self.host_loads()[target as usize];
        if !load.has_room() {
            return Err(OrchestratorError::NoCapacity);
        }
        let hub = self.hub(svc);
        let xs = (target != hub).then(|| host_name(hub));
        let name = self.start_boot(svc, target, xs);
        // Drop the scheduled completion and finish the boot now.
        self.effects.retain(|e| {
            !matches!(e, Effect::After { action: Deferred::BootComplete { name: n }, .. } if *n == name)
        });
        self.set_state(&name, VmState::Running);
        self.attach(&name, now)?;
        self.effects.push(Effect::InstanceUp { name: name.clone() });
        Ok(name)
    }

    // ---- request handling ----

    /// Processes queued store notifications until none remain.
    pub fn pump(&mut self, now: f64) {
        while let Ok(n) = self.notices_rx.try_recv() {
            self.dispatch(n, now);
        }
    }

    fn dispatch(&mut self, n: Notice, now: f64) {
        let Change::Set(value) = &n.event.change else {
            return;
        };
        let segs = n.event.path.segments();
        match &n.listener {
            Listener::Guest(instance) => self.effects.push(Effect::Response {
                instance: instance.clone(),
                value: value.clone(),
            }),
            Listener::RemoteResponse { hub } => self.on_remote_response(*hub, n.host, value, now),
            Listener::Orchestrator => {
                if n.event.writer == self.admin(n.host) {
                    return;
                }
                match segs {
                    [a, b, requester, leaf] if a == "jitsu" && b == "requests" && leaf == "request" => {
                        self.handle_request(n.host, requester, value, &n.event.writer);
                    }
                    [a, b, beater] if a == "jitsu" && b == "heartbeat" => {
                        self.heartbeat_update(n.host, beater, value);
                    }
                    _ => {}
                }
            }
        }
    }

    fn respond(&mut self, host: HostId, requester: &str, resp: ResponseRecord) {
        self.outstanding.remove(&(host, requester.to_string()));
        let is_guest = self.instances.contains_key(requester);
        let is_host = self.hosts.iter().any(|h| h.name == requester);
        if !is_guest && !is_host {
            return;
        }
        self.admin_put(host, response_key(requester), resp.encode());
    }

    fn error(&mut self, host: HostId, requester: &str, err: OrchestratorError) {
        debug!("h{host}: {requester} -> error {err}");
        self.respond(host, requester, ResponseRecord::Error(err.wire_message()));
    }

    /// Entry point for a value written under `jitsu/requests/<requester>/request`
    /// in the store of `host`.
    pub fn handle_request(
        &mut self,
        host: HostId,
        requester: &str,
        value: &str,
        writer: &Identity,
    ) {
        let req = match RequestRecord::decode(value) {
            Ok(r) => r,
            Err(e) => {
                self.error(host, requester, OrchestratorError::Malformed(e.0));
                return;
            }
        };
        let key = (host, requester.to_string());
        if self.outstanding.contains(&key) {
            // Answered without touching the request in progress.
            let msg = OrchestratorError::InvocationPending.wire_message();
            self.admin_put(host, response_key(requester), ResponseRecord::Error(msg).encode());
            return;
        }
        let local_guest = self
            .instances
            .get(requester)
            .is_some_and(|i| i.host == host && *writer == Identity::instance(requester));
        let remote_host = self
            .hosts
            .iter()
            .find(|h| h.name == requester && *writer == Identity::orchestrator(&h.name))
            .map(|h| h.id);
        if local_guest {
            self.outstanding.insert(key);
            let result = match req.verb {
                Verb::Replicate => self.guest_replicate(host, requester, &req.target),
                Verb::Halt => self.guest_halt(requester),
                Verb::Die => self.guest_die(requester),
            };
            match result {
                Ok(true) => self.respond(host, requester, ResponseRecord::Success),
                Ok(false) => {}
                Err(e) => self.error(host, requester, e),
            }
        } else if let Some(hub) = remote_host {
            match req.remote {
                Some(params) if req.verb == Verb::Replicate => {
                    self.outstanding.insert(key);
                    self.remote_boot(hub, host, &params);
                }
                _ => self.error(
                    host,
                    requester,
                    OrchestratorError::Malformed("expected remote boot".into()),
                ),
            }
        } else {
            self.error(host, requester, OrchestratorError::PermissionDenied);
        }
    }

    /// Returns Ok(true) when the response can be written immediately.
    fn guest_replicate(
        &mut self,
        host: HostId,
        requester: &str,
        target: &str,
    ) -> Result<bool, OrchestratorError> {
        let svc = self.instances[requester].service;
        let hub = self.hub(svc);
        let loads = self.host_loads();
        let chosen = if target == self.services[svc].spec.name {
            self.placement.place(hub, &loads)
        } else {
            let h = self
                .hosts
                .iter()
                .find(|h| h.name == target)
                .ok_or_else(|| OrchestratorError::Malformed(format!("unknown target {target}")))?;
            loads[h.id as usize].has_room().then_some(h.id)
        }
        .ok_or(OrchestratorError::NoCapacity)?;
        let requester = (host, requester.to_string());
        if chosen == hub {
            let name = self.start_boot(svc, chosen, None);
            self.pending_local.insert(name, requester);
        } else {
            let q = self.remote_queues.entry((hub, chosen)).or_default();
            q.push_back(RemotePending {
                requester,
                service: svc,
                vm: None,
            });
            if q.len() == 1 {
                self.send_remote_boot(hub, chosen, svc);
            }
        }
        Ok(false)
    }

    fn send_remote_boot(&mut self, hub: HostId, target: HostId, svc: usize) {
        let spec = &self.services[svc].spec;
        let req = RequestRecord {
            verb: Verb::Replicate,
            target: host_name(target),
            remote: Some(RemoteBoot {
                app_id: app_id_hex(spec.ip),
                ttl: spec.ttl,
                stop_mode: spec.stop_mode.clone(),
                image: spec.image.clone(),
            }),
        };
        let hub_name = host_name(hub);
        self.effects.push(Effect::After {
            delay: self.config.store_delay,
            action: Deferred::RemotePut {
                host: target,
                path: request_key(&hub_name),
                value: req.encode(),
                writer: Identity::orchestrator(&hub_name),
            },
        });
    }

    /// Runs on the target host when a hub asks it to boot a replica.
    fn remote_boot(&mut self, hub: HostId, target: HostId, params: &RemoteBoot) {
        let hub_name = host_name(hub);
        let svc = self
            .services
            .iter()
            .position(|s| app_id_hex(s.spec.ip) == params.app_id);
        let Some(svc) = svc else {
            self.error(target, &hub_name, OrchestratorError::Malformed("unknown app-id".into()));
            return;
        };
        let room = {
            let h = &self.hosts[target as usize];
            let booted = self.instances.values().filter(|i| i.host == target).count();
            h.alive && booted < h.vm_limit
        };
        if !room {
            self.error(target, &hub_name, OrchestratorError::NoCapacity);
            return;
        }
        let name = self.start_boot(svc, target, Some(hub_name));
        if let Some(p) = self
            .remote_queues
            .get_mut(&(hub, target))
            .and_then(|q| q.front_mut())
        {
            p.vm = Some(name);
        }
    }

    /// Runs on the hub when the target host answers a remote boot.
    fn on_remote_response(&mut self, hub: HostId, target: HostId, value: &str, now: f64) {
        let Some(pending) = self
            .remote_queues
            .get_mut(&(hub, target))
            .and_then(VecDeque::pop_front)
        else {
            warn!("h{hub}: unexpected response from h{target}");
            return;
        };
        let (rhost, rname) = pending.requester.clone();
        let outcome = match (ResponseRecord::decode(value), &pending.vm) {
            (Some(ResponseRecord::Success), Some(vm)) if self.instances.contains_key(vm) => {
                self.attach(vm, now).map(|_| ResponseRecord::Success)
            }
            (Some(ResponseRecord::Error(msg)), _) => Ok(ResponseRecord::Error(msg)),
            _ => Err(OrchestratorError::Other("remote boot failed".into())),
        };
        match outcome {
            Ok(resp) => self.respond(rhost, &rname, resp),
            Err(e) => self.error(rhost, &rname, e),
        }
        let next = self
            .remote_queues
            .get(&(hub, target))
            .and_then(|q| q.front())
            .map(|p| p.service);
        if let Some(svc) = next {
            self.send_remote_boot(hub, target, svc);
        }
    }

    fn guest_halt(&mut self, name: &str) -> Result<bool, OrchestratorError> {
        let inst = &self.instances[name];
        if inst.first {
            return Err(OrchestratorError::PermissionDenied);
        }
        if inst.state != VmState::Running || !inst.attached {
            return Err(OrchestratorError::NotRunning);
        }
        let svc = inst.service;
        let bucket = inst.bucket;
        if self.services[svc].halting.is_some() {
            return Err(OrchestratorError::Retry);
        }
        let hub = self.hub(svc);
        let gid = self.services[svc].group();
        self.hosts[hub as usize]
            .switch
            .set_bucket_weight(gid, bucket, 0)?;
        self.services[svc].halting = Some(name.to_string());
        self.set_state(name, VmState::Halting);
        Ok(true)
    }

    fn guest_die(&mut self, name: &str) -> Result<bool, OrchestratorError> {
        let inst = &self.instances[name];
        if inst.first {
            return Err(OrchestratorError::PermissionDenied);
        }
        if inst.state != VmState::Halting {
            return Err(OrchestratorError::NotHalting);
        }
        let host = inst.host;
        self.instances.get_mut(name).expect("known").ttl_zero = true;
        self.admin_put(host, lifecycle_root(name).join("ttl").expect("static"), "0");
        Ok(true)
    }

    /// Runs a deferred action whose delay has elapsed.
    pub fn run_deferred(&mut self, action: Deferred, now: f64) {
        match action {
            Deferred::BootComplete { name } => self.boot_complete(&name, now),
            Deferred::RemotePut {
                host,
                path,
                value,
                writer,
            } => {
                if !self.hosts[host as usize].alive {
                    return;
                }
                if let Err(e) = self.hosts[host as usize].store.put(path, value, &writer) {
                    warn!("remote put rejected: {e}");
                }
            }
        }
        self.pump(now);
    }

    fn boot_complete(&mut self, name: &str, now: f64) {
        let Some(inst) = self.instances.get(name) else {
            return;
        };
        if inst.state != VmState::Provisioning {
            return;
        }
        let host = inst.host;
        let hub = self.hub(inst.service);
        self.set_state(name, VmState::Running);
        self.effects.push(Effect::InstanceUp {
            name: name.to_string(),
        });
        if host == hub {
            let result = self.attach(name, now);
            if let Some((rhost, rname)) = self.pending_local.remove(name) {
                match result {
                    Ok(()) => self.respond(rhost, &rname, ResponseRecord::Success),
                    Err(e) => self.error(rhost, &rname, e),
                }
            }
        } else {
            let hub_name = host_name(hub);
            self.respond(host, &hub_name, ResponseRecord::Success);
        }
    }

    // ---- teardown ----

    /// Removes every trace of an instance: bucket, tunnel, rules, vif,
    /// domain, store subtrees and watches. Returns the flows cut off.
    fn teardown(&mut self, name: &str, reason: DownReason) -> Vec<FlowKey> {
        let Some(inst) = self.instances.remove(name) else {
            return Vec::new();
        };
        let svc = inst.service;
        let gid = self.services[svc].group();
        let hub = if inst.first { inst.host } else { self.hub(svc) };
        let mut expired = Vec::new();
        if inst.attached && self.hosts[hub as usize].alive {
            if let Ok((_, flows)) = self.hosts[hub as usize]
                .switch
                .force_remove_bucket(gid, inst.bucket)
            {
                expired.extend(flows.into_iter().map(|c| c.key));
            }
        }
        if let Some(t) = inst.tunnel {
            let _ = self.hosts[hub as usize].switch.remove_port(t.hub_port);
            let _ = self.hosts[inst.host as usize].switch.remove_port(t.spoke_port);
        }
        for (h, rule) in &inst.rules {
            let _ = self.hosts[*h as usize].switch.remove_flow(*rule);
        }
        let host = &mut self.hosts[inst.host as usize];
        let _ = host.switch.remove_port(inst.vif);
        self.port_owner.remove(&(inst.host, inst.vif));
        host.registry.destroy(inst.dom_id);
        if host.alive {
            let admin = host.store.admin().clone();
            if inst.state.can_become(VmState::Dead) {
                let _ = host.store.put(vm_root(name).join("state").expect("static"), "dead", &admin);
            }
            for root in [vm_root(name), lifecycle_root(name), request_root(name)] {
                let _ = host.store.remove_subtree(root, &admin);
            }
            host.store.clear_scope(&request_root(name));
        }
        if let Some(w) = &inst.guest_watch {
            host.store.unwatch(w);
        }
        let svc_name = self.services[svc].spec.name.clone();
        let hub_store = &mut self.hosts[hub as usize].store;
        if let Some(mut scope) = hub_store.scope_for(&app_root(&svc_name)).cloned() {
            scope.writers.remove(&Identity::instance(name));
            scope.readers.remove(&Identity::instance(name));
            hub_store.set_scope(app_root(&svc_name), scope);
        }
        if self.services[svc].halting.as_deref() == Some(name) {
            self.services[svc].halting = None;
        }
        self.outstanding.remove(&(inst.host, name.to_string()));
        self.pending_local.remove(name);
        if inst.host != hub
            && !self
                .instances
                .values()
                .any(|i| i.host == inst.host && self.hub(i.service) == hub && !i.first)
        {
            self.hosts[hub as usize].heartbeats.forget(inst.host);
        }
        info!("teardown {name} ({reason:?})");
        self.effects.push(Effect::InstanceDown {
            name: name.to_string(),
            reason,
        });
        if !expired.is_empty() {
            self.effects.push(Effect::FlowsExpired {
                flows: expired.clone(),
            });
        }
        expired
    }

    // ---- monitor ----

    /// Periodic reconciliation: master liveness, registry vs. records, TTL
    /// destruction and heartbeat timeouts.
    pub fn monitor_tick(&mut self, now: f64) -> Vec<RecoveryAction> {
        let mut actions = Vec::new();
        if !self.hosts[self.master as usize].alive {
            if let Some(new_master) = self.failover(now) {
                actions.push(RecoveryAction::MasterFailover { new_master });
            }
            self.pump(now);
            return actions;
        }
        let names: Vec<String> = self.instances().iter().map(|i| i.name.clone()).collect();
        for name in names {
            let Some(inst) = self.instances.get(&name) else {
                continue;
            };
            let host = &self.hosts[inst.host as usize];
            if !host.alive {
                continue;
            }
            if inst.state == VmState::Provisioning {
                continue;
            }
            if host.registry.name_of(inst.dom_id) != Some(name.as_str()) {
                match host.registry.dom_of(&name) {
                    Some(new_dom) => {
                        let old_dom = inst.dom_id;
                        self.reconcile(&name, new_dom);
                        actions.push(RecoveryAction::Reconciled {
                            name,
                            old_dom,
                            new_dom,
                        });
                    }
                    None if !inst.first => {
                        let expired = self.teardown(&name, DownReason::Crashed).len();
                        actions.push(RecoveryAction::CrashCollected { name, expired });
                    }
                    None => warn!("first instance {name} missing from registry"),
                }
                continue;
            }
            if inst.ttl_zero {
                let gid = self.services[inst.service].group();
                let hub = self.hub(inst.service);
                let live = self.hosts[hub as usize].switch.pinned_count(gid, inst.bucket);
                if live == 0 {
                    self.teardown(&name, DownReason::Destroyed);
                    actions.push(RecoveryAction::Destroyed { name });
                } else {
                    actions.push(RecoveryAction::DrainPending { name, live });
                }
            }
        }
        for hub in 0..self.hosts.len() {
            if !self.hosts[hub].alive {
                continue;
            }
            for failed in self.hosts[hub].heartbeats.check(now) {
                let removed = self.on_host_failure(hub as HostId, failed);
                actions.push(RecoveryAction::HostFailed {
                    host: failed,
                    removed,
                });
            }
        }
        self.pump(now);
        actions
    }

    /// Points the instance's bucket and rules at its new domain's vif.
    fn reconcile(&mut self, name: &str, new_dom: u32) {
        let inst = self.instances[name].clone();
        let svc = inst.service;
        let gid = self.services[svc].group();
        let hub = if inst.first { inst.host } else { self.hub(svc) };
        let h = &mut self.hosts[inst.host as usize];
        let _ = h.switch.remove_port(inst.vif);
        let vif = h.switch.add_vif(if inst.first {
            format!("vif{new_dom}.1")
        } else {
            format!("vif{new_dom}.0")
        });
        self.port_owner.remove(&(inst.host, inst.vif));
        self.port_owner.insert((inst.host, vif), name.to_string());
        let expired: Vec<FlowKey> = self.hosts[hub as usize]
            .switch
            .expire_bucket_flows(gid, inst.bucket)
            .into_iter()
            .map(|c| c.key)
            .collect();
        let mut rules = Vec::new();
        for (rh, rule) in &inst.rules {
            let sw = &mut self.hosts[*rh as usize].switch;
            let Ok(mut r) = sw.remove_flow(*rule) else {
                continue;
            };
            if r.matcher.in_port == Some(inst.vif) {
                r.matcher.in_port = Some(vif);
            }
            if let RuleAction::Apply(actions) = &mut r.action {
                for a in actions.iter_mut() {
                    if *a == Action::Output(inst.vif) {
                        *a = Action::Output(vif);
                    }
                }
            }
            if let Ok(id) = sw.install_flow(r) {
                rules.push((*rh, id));
            }
        }
        let bucket_actions = self.hosts[hub as usize]
            .switch
            .group(gid)
            .and_then(|g| g.bucket(inst.bucket))
            .map(|b| b.actions.clone());
        if let Some(mut actions) = bucket_actions {
            for a in actions.iter_mut() {
                match a {
                    Action::Output(p) if *p == inst.vif => *p = vif,
                    Action::SetDstIp(_) => *a = Action::SetDstIp(inst.ip),
                    Action::SetDstMac(_) => *a = Action::SetDstMac(inst.mac),
                    _ => {}
                }
            }
            let _ = self.hosts[hub as usize]
                .switch
                .update_bucket_actions(gid, inst.bucket, actions);
        }
        {
            let i = self.instances.get_mut(name).expect("known");
            i.dom_id = new_dom;
            i.vif = vif;
            i.rules = rules;
        }
        let rec = self.record_of(&self.instances[name]);
        if inst.first {
            // Interface names embed the domain id.
            let h = &mut self.hosts[inst.host as usize];
            let admin = h.store.admin().clone();
            let _ = h.store.remove_subtree(vm_root(name).join("ips").expect("static"), &admin);
        }
        self.write_record(inst.host, &rec);
        info!("reconciled {name}: dom {} -> {new_dom}", inst.dom_id);
        if !expired.is_empty() {
            self.effects.push(Effect::FlowsExpired { flows: expired });
        }
    }

    /// Removes every replica on `failed` that the hub steers traffic to.
    pub fn on_host_failure(&mut self, hub: HostId, failed: HostId) -> Vec<String> {
        let victims: Vec<String> = self
            .instances()
            .iter()
            .filter(|i| i.host == failed && !i.first && self.hub(i.service) == hub)
            .map(|i| i.name.clone())
            .collect();
        for v in &victims {
            self.teardown(v, DownReason::HostFailed);
        }
        self.hosts[hub as usize].heartbeats.forget(failed);
        // Remote boots queued toward the failed host will never answer.
        if let Some(q) = self.remote_queues.remove(&(hub, failed)) {
            for p in q {
                self.error(p.requester.0, &p.requester.1, OrchestratorError::Other("host failed".into()));
            }
        }
        info!("h{hub}: host h{failed} failed, removed {victims:?}");
        victims
    }

    /// Elects the lowest live host, resets every switch, destroys all
    /// replicas and reboots each first instance with a fresh group.
    pub fn failover(&mut self, now: f64) -> Option<HostId> {
        let new_master = self.hosts.iter().find(|h| h.alive)?.id;
        info!("master failover at {now:.3}: h{} -> h{new_master}", self.master);
        self.master = new_master;
        let replicas: Vec<String> = self
            .instances()
            .iter()
            .filter(|i| !i.first)
            .map(|i| i.name.clone())
            .collect();
        for r in replicas {
            self.teardown(&r, DownReason::Failover);
        }
        let mut flushed = Vec::new();
        for h in self.hosts.iter_mut().filter(|h| h.alive) {
            flushed.extend(h.switch.reset().into_iter().map(|c| c.key));
            h.heartbeats.clear();
        }
        if !flushed.is_empty() {
            self.effects.push(Effect::FlowsExpired { flows: flushed });
        }
        self.outstanding.clear();
        self.pending_local.clear();
        self.remote_queues.clear();
        for svc in 0..self.services.len() {
            let name = self.services[svc].first.clone();
            let inst = self.instances[&name].clone();
            let old = &mut self.hosts[inst.host as usize];
            let (host, dom) = if old.alive {
                let _ = old.switch.remove_port(inst.vif);
                if let Some(w) = &inst.guest_watch {
                    old.store.unwatch(w);
                }
                let dom = old
                    .registry
                    .reboot(inst.dom_id)
                    .unwrap_or_else(|| old.registry.create(&name));
                (inst.host, dom)
            } else {
                let dom = self.hosts[new_master as usize].registry.create(&name);
                (new_master, dom)
            };
            self.port_owner.remove(&(inst.host, inst.vif));
            {
                let i = self.instances.get_mut(&name).expect("known");
                i.host = host;
                i.dom_id = dom;
                i.state = VmState::Running;
                i.attached = false;
                i.rules.clear();
                i.guest_watch = None;
            }
            self.services[svc].halting = None;
            let h = &mut self.hosts[host as usize];
            let admin = h.store.admin().clone();
            let _ = h.store.remove_subtree(vm_root(&name), &admin);
            self.effects.push(Effect::InstanceDown {
                name: name.clone(),
                reason: DownReason::Failover,
            });
            if let Err(e) = self.install_first_instance(svc) {
                warn!("failover: cannot reinstall {name}: {e}");
                continue;
            }
            self.effects.push(Effect::InstanceUp { name });
        }
        Some(new_master)
    }

    // ---- heartbeats ----

    /// Called every heartbeat interval on each host: beats into the store of
    /// every hub it hosts replicas for.
    pub fn heartbeat_tick(&mut self, host: HostId, now: f64) {
        if !self.hosts[host as usize].alive {
            return;
        }
        let hubs: BTreeSet<HostId> = self
            .instances
            .values()
            .filter(|i| i.host == host && !i.first)
            .map(|i| self.hub(i.service))
            .filter(|h| *h != host)
            .collect();
        let name = host_name(host);
        for hub in hubs {
            self.effects.push(Effect::After {
                delay: self.config.store_delay,
                action: Deferred::RemotePut {
                    host: hub,
                    path: path(HEARTBEATS).join(&name).expect("host name"),
                    value: format!("{now:.6}"),
                    writer: Identity::orchestrator(&name),
                },
            });
        }
    }

    fn heartbeat_update(&mut self, hub: HostId, beater: &str, value: &str) {
        let Some(id) = self.hosts.iter().find(|h| h.name == beater).map(|h| h.id) else {
            warn!("h{hub}: heartbeat from unknown host {beater}");
            return;
        };
        let Ok(at) = value.parse::<f64>() else {
            warn!("h{hub}: bad heartbeat value {value:?}");
            return;
        };
        if !self.hosts[hub as usize].heartbeats.update(id, at) {
            debug!("h{hub}: heartbeat from untracked {beater} ignored");
        }
    }

    // ---- fault injection ----

    /// The VM disappears from its hypervisor without any orchestration.
    pub fn crash_instance(&mut self, name: &str) -> Result<(), OrchestratorError> {
        let inst = self
            .instances
            .get(name)
            .ok_or_else(|| OrchestratorError::NoSuchInstance(name.into()))?;
        self.hosts[inst.host as usize].registry.destroy(inst.dom_id);
        self.effects.push(Effect::InstanceDown {
            name: name.to_string(),
            reason: DownReason::Crashed,
        });
        Ok(())
    }

    /// The VM restarts under a new domain id.
    pub fn reboot_instance(&mut self, name: &str) -> Result<u32, OrchestratorError> {
        let inst = self
            .instances
            .get(name)
            .ok_or_else(|| OrchestratorError::NoSuchInstance(name.into()))?;
        let dom = self.hosts[inst.host as usize]
            .registry
            .reboot(inst.dom_id)
            .ok_or_else(|| OrchestratorError::NoSuchInstance(name.into()))?;
        self.effects.push(Effect::InstanceDown {
            name: name.to_string(),
            reason: DownReason::Rebooted,
        });
        self.effects.push(Effect::InstanceUp {
            name: name.to_string(),
        });
        Ok(dom)
    }

    /// The host stops: its domains vanish and it stops beating.
    pub fn fail_host(&mut self, host: HostId) -> Result<(), OrchestratorError> {
        let h = self
            .hosts
            .get_mut(host as usize)
            .ok_or(OrchestratorError::NoSuchHost(host))?;
        if !h.alive {
            return Ok(());
        }
        h.alive = false;
        h.registry.clear();
        self.effects.push(Effect::HostDown { host });
        info!("host h{host} failed");
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvstore::ValueList;

    /// Runs deferred actions in time order and collects every other effect.
    struct Driver {
        c: Cluster,
        now: f64,
        pending: Vec<(f64, u64, Deferred)>,
        seq: u64,
        seen: Vec<Effect>,
    }

    impl Driver {
        fn new(config: ClusterConfig) -> Self {
            let mut c = Cluster::new(config);
            c.add_service(ServiceSpec::new("www", Ipv4Addr::new(10, 0, 0, 18), 0))
                .unwrap();
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

        fn collect(&mut self) {
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
        fn advance(&mut self, until: f64) {
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

        fn request(&mut self, instance: &str, verb: Verb, target: &str) {
            let host = self.c.instance(instance).unwrap().host;
            let value = RequestRecord::local(verb, target).encode();
            self.c
                .store_mut(host)
                .put(request_key(instance), value, &Identity::instance(instance))
                .unwrap();
            self.c.pump(self.now);
            self.collect();
        }

        fn response(&self, instance: &str) -> Option<String> {
            let host = self.c.instance(instance)?.host;
            self.c.store(host).get(&response_key(instance)).map(str::to_string)
        }

        fn replicate(&mut self, from: &str) -> Option<String> {
            let before: BTreeSet<String> =
                self.c.instances().iter().map(|i| i.name.clone()).collect();
            self.request(from, Verb::Replicate, "www");
            self.advance(self.now + 1.0);
            self.c
                .instances()
                .iter()
                .map(|i| i.name.clone())
                .find(|n| !before.contains(n))
        }

        fn tick(&mut self, at: f64) -> Vec<RecoveryAction> {
            self.advance(at);
            let r = self.c.monitor_tick(at);
            self.collect();
            r
        }
    }

    fn small(cores: usize) -> ClusterConfig {
        ClusterConfig {
            hosts: 3,
            cores,
            reserved_cores: 2,
            ..ClusterConfig::default()
        }
    }

    fn flow(i: u32) -> FlowKey {
        FlowKey::tcp(
            Ipv4Addr::from(u32::from(Ipv4Addr::new(10, 128, 0, 0)) + i),
            10000 + i as u16,
            Ipv4Addr::new(10, 0, 0, 18),
            80,
        )
    }

    #[test]
    fn first_instance_programs_hub() {
        let d = Driver::new(small(6));
        let sw = d.c.switch(0);
        let g = sw.group(u32::from(Ipv4Addr::new(10, 0, 0, 18))).unwrap();
        assert_eq!(g.buckets.len(), 1);
        assert!(sw.rules().any(|(_, r)| r.priority == SERVICE_PRIORITY));
        let rec = VmRecord::load(d.c.store(0), "www").unwrap();
        assert!(rec.is_first());
        assert_eq!(rec.app_id, "0a000012");
        assert_eq!(rec.state, VmState::Running);
        assert_eq!(d.c.serving_count(0), 1);
        assert!(d.seen.contains(&Effect::InstanceUp { name: "www".into() }));
    }

    #[test]
    fn local_replicate_adds_bucket_and_snat() {
        let mut d = Driver::new(small(6));
        d.request("www", Verb::Replicate, "www");
        assert_eq!(d.response("www"), None, "answered only after boot");
        d.advance(1.0);
        assert_eq!(d.response("www").as_deref(), Some("[S(success);]"));
        let r = d.c.instances().into_iter().find(|i| !i.first).unwrap().clone();
        assert_eq!(r.host, 0);
        assert_eq!(r.state, VmState::Running);
        assert_eq!(r.ip, FIRST_REPLICA_IP);
        let sw = d.c.switch(0);
        let b = sw.group(0x0a00_0012).unwrap().bucket(r.bucket).unwrap();
        assert_eq!(b.weight, 1);
        assert_eq!(
            b.actions,
            vec![Action::SetDstIp(r.ip), Action::SetDstMac(r.mac), Action::Output(r.vif)]
        );
        assert!(sw.rules().any(|(_, x)| x.priority == crate::switchfab::SNAT_PRIORITY
            && x.matcher.src_ip == Some(r.ip)));
        assert!(d.seen.iter().any(|e| matches!(e, Effect::Response { instance, value }
            if instance == "www" && value == "[S(success);]")));
        let rec = VmRecord::load(d.c.store(0), &r.name).unwrap();
        assert_eq!(
            rec.role,
            VmRole::Replica {
                ip: r.ip,
                first_instance_host: "www".into()
            }
        );
    }

    #[test]
    fn remote_replicate_goes_through_target_store() {
        // Two slots per host: the first instance and one local replica.
        let mut d = Driver::new(small(4));
        let local = d.replicate("www").unwrap();
        assert_eq!(d.c.instance(&local).unwrap().host, 0);
        d.request("www", Verb::Replicate, "www");
        d.advance(d.now + 0.0015);
        let req = d.c.store(1).get(&request_key("h0")).unwrap().to_string();
        let parsed: ValueList = req.parse().unwrap();
        assert_eq!(parsed.0.len(), 6);
        assert_eq!(req, "[S(replicate); S(h1); I(0a000012); I(300); S(shutdown); S(www.xen)]");
        d.advance(d.now + 1.0);
        assert_eq!(d.c.store(1).get(&response_key("h0")), Some("[S(success);]"));
        assert_eq!(d.response("www").as_deref(), Some("[S(success);]"));
        let remote = d.c.instances().into_iter().find(|i| i.host == 1).unwrap().clone();
        let link = remote.tunnel.unwrap();
        assert!(d.c.switch(0).tunnel_port(1, link.key).is_some());
        assert!(d.c.switch(1).tunnel_port(0, link.key).is_some());
        assert_eq!(remote.initial_xs.as_deref(), Some("h0"));
        assert!(d.c.host(0).heartbeats.is_tracked(1));
        let b = d.c.switch(0).group(0x0a00_0012).unwrap().bucket(remote.bucket).unwrap().clone();
        assert_eq!(b.actions.last(), Some(&Action::Output(link.hub_port)));
        // A new flow steered over the tunnel reaches the replica's vif.
        let mut hits = 0;
        for i in 0..64 {
            let dec = d.c.switch_mut(0).classify(&flow(i), UPLINK, d.now).unwrap();
            if dec.egress == link.hub_port {
                let at = d.c.switch_mut(1).classify(&dec.key, link.spoke_port, d.now).unwrap();
                assert_eq!(at.egress, remote.vif);
                hits += 1;
            }
        }
        assert!(hits > 0);
    }

    #[test]
    fn full_cluster_reports_no_capacity() {
        let mut d = Driver::new(ClusterConfig {
            hosts: 1,
            cores: 3,
            reserved_cores: 2,
            ..ClusterConfig::default()
        });
        d.request("www", Verb::Replicate, "www");
        assert_eq!(d.response("www").as_deref(), Some("[S(error); S(no capacity)]"));
        assert_eq!(d.c.replica_count(0), 0);
    }

    #[test]
    fn second_request_while_outstanding_is_refused() {
        let mut d = Driver::new(small(6));
        d.request("www", Verb::Replicate, "www");
        d.request("www", Verb::Replicate, "www");
        assert_eq!(
            d.response("www").as_deref(),
            Some("[S(error); S(request outstanding)]")
        );
        d.advance(1.0);
        assert_eq!(d.response("www").as_deref(), Some("[S(success);]"));
        assert_eq!(d.c.replica_count(0), 1);
    }

    #[test]
    fn guests_cannot_forge_requests() {
        let mut d = Driver::new(small(6));
        let r = d.replicate("www").unwrap();
        let err = d
            .c
            .store_mut(0)
            .put(request_key("www"), "[S(halt); S(www)]", &Identity::instance(&r));
        assert!(err.is_err());
    }

    #[test]
    fn halt_and_die_rules() {
        let mut d = Driver::new(small(6));
        let a = d.replicate("www").unwrap();
        let b = d.replicate("www").unwrap();
        d.request("www", Verb::Halt, "www");
        assert_eq!(d.response("www").as_deref(), Some("[S(error); S(permission denied)]"));
        d.request(&a, Verb::Die, &a);
        assert_eq!(d.response(&a).as_deref(), Some("[S(error); S(not halting)]"));
        d.request(&a, Verb::Halt, &a);
        assert_eq!(d.response(&a).as_deref(), Some("[S(success);]"));
        d.request(&b, Verb::Halt, &b);
        assert_eq!(d.response(&b).as_deref(), Some("[S(error); S(retry)]"));
        d.request(&a, Verb::Halt, &a);
        assert_eq!(d.response(&a).as_deref(), Some("[S(error); S(not running)]"));
        let inst = d.c.instance(&a).unwrap().clone();
        assert_eq!(inst.state, VmState::Halting);
        let w = d.c.switch(0).group(0x0a00_0012).unwrap().bucket(inst.bucket).unwrap().weight;
        assert_eq!(w, 0);
        d.request(&a, Verb::Die, &a);
        assert_eq!(d.response(&a).as_deref(), Some("[S(success);]"));
        assert_eq!(
            d.c.store(0).get(&lifecycle_root(&a).join("ttl").unwrap()),
            Some("0")
        );
    }

    #[test]
    fn destroy_waits_for_pinned_flows_then_leaves_no_trace() {
        let mut d = Driver::new(small(6));
        let a = d.replicate("www").unwrap();
        let inst = d.c.instance(&a).unwrap().clone();
        // Pin one flow to the replica.
        let pinned = (0..256)
            .map(flow)
            .find(|k| {
                let dec = d.c.switch_mut(0).classify(k, UPLINK, 0.5).unwrap();
                let hit = dec.egress == inst.vif;
                if !hit {
                    d.c.switch_mut(0).close_flow(k);
                }
                hit
            })
            .unwrap();
        d.request(&a, Verb::Halt, &a);
        d.request(&a, Verb::Die, &a);
        let acts = d.tick(2.0);
        assert_eq!(acts, vec![RecoveryAction::DrainPending { name: a.clone(), live: 1 }]);
        d.c.switch_mut(0).close_flow(&pinned);
        let acts = d.tick(3.0);
        assert_eq!(acts, vec![RecoveryAction::Destroyed { name: a.clone() }]);
        assert!(d.c.instance(&a).is_none());
        let store = d.c.store(0);
        for root in [vm_root(&a), lifecycle_root(&a), request_root(&a)] {
            assert_eq!(store.list(&root).count(), 0, "{root}");
        }
        let sw = d.c.switch(0);
        assert!(sw.group(0x0a00_0012).unwrap().bucket(inst.bucket).is_none());
        assert!(sw.port(inst.vif).is_none());
        assert!(!sw.rules().any(|(_, r)| r.matcher.src_ip == Some(inst.ip)));
        assert!(d.c.host(0).registry.name_of(inst.dom_id).is_none());
        assert!(d.seen.contains(&Effect::InstanceDown {
            name: a,
            reason: DownReason::Destroyed
        }));
        assert!(d.c.service(0).halting.is_none());
    }

    #[test]
    fn crashed_replica_is_collected() {
        let mut d = Driver::new(small(6));
        let a = d.replicate("www").unwrap();
        d.c.crash_instance(&a).unwrap();
        let acts = d.tick(2.0);
        assert_eq!(acts, vec![RecoveryAction::CrashCollected { name: a.clone(), expired: 0 }]);
        assert_eq!(d.c.switch(0).group(0x0a00_0012).unwrap().buckets.len(), 1);
        assert_eq!(d.c.store(0).list(&vm_root(&a)).count(), 0);
    }

    #[test]
    fn rebooted_replica_is_reconciled() {
        let mut d = Driver::new(small(6));
        let a = d.replicate("www").unwrap();
        let old = d.c.instance(&a).unwrap().clone();
        let new_dom = d.c.reboot_instance(&a).unwrap();
        let acts = d.tick(2.0);
        assert_eq!(
            acts,
            vec![RecoveryAction::Reconciled { name: a.clone(), old_dom: old.dom_id, new_dom }]
        );
        let now = d.c.instance(&a).unwrap().clone();
        assert_ne!(now.vif, old.vif);
        assert_eq!(d.c.port_owner(0, now.vif), Some(a.as_str()));
        let b = d.c.switch(0).group(0x0a00_0012).unwrap().bucket(now.bucket).unwrap().clone();
        assert_eq!(b.actions.last(), Some(&Action::Output(now.vif)));
        let rec = VmRecord::load(d.c.store(0), &a).unwrap();
        assert_eq!(rec.dom_id, new_dom);
        assert!(d.tick(3.0).is_empty());
    }

    #[test]
    fn silent_host_declared_failed_after_timeout() {
        let mut d = Driver::new(small(3));
        // One slot per host: the replica lands on h1.
        let r = d.replicate("www").unwrap();
        assert_eq!(d.c.instance(&r).unwrap().host, 1);
        let mut failed_at = None;
        for k in 2..=20 {
            let t = f64::from(k);
            if k % 2 == 0 {
                d.c.heartbeat_tick(1, t);
                d.collect();
            }
            if k == 8 {
                d.c.fail_host(1).unwrap();
            }
            for a in d.tick(t) {
                if let RecoveryAction::HostFailed { host, removed } = a {
                    assert_eq!(host, 1);
                    assert_eq!(removed, vec![r.clone()]);
                    failed_at = Some(t);
                }
            }
        }
        // Last beat written at t=8; 4 s of silence is exceeded at t=13.
        assert_eq!(failed_at, Some(13.0));
        assert_eq!(d.c.switch(0).group(0x0a00_0012).unwrap().buckets.len(), 1);
        assert!(d.c.switch(0).ports().all(|(_, k)| !matches!(k, crate::switchfab::PortKind::Tunnel { .. })));
    }

    #[test]
    fn master_failover_restarts_first_instances() {
        let mut d = Driver::new(small(3));
        d.replicate("www").unwrap();
        d.c.fail_host(0).unwrap();
        let acts = d.tick(2.0);
        assert_eq!(acts, vec![RecoveryAction::MasterFailover { new_master: 1 }]);
        assert_eq!(d.c.master(), 1);
        assert_eq!(d.c.replica_count(0), 0);
        let first = d.c.instance("www").unwrap().clone();
        assert_eq!(first.host, 1);
        let g = d.c.switch(1).group(0x0a00_0012).unwrap();
        assert_eq!(g.buckets.len(), 1);
        assert_eq!(g.buckets[0].actions.last(), Some(&Action::Output(first.vif)));
        assert!(VmRecord::load(d.c.store(1), "www").unwrap().is_first());
        // The restarted first instance can replicate again.
        assert!(d.replicate("www").is_some());
    }
}
