//! Per-host software switch: priority flow table, SELECT groups with weighted
//! buckets, an exact-match flow cache that pins connections, GRE tunnel
//! ports and SNAT rules.

mod hash;
mod switch;

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use thiserror::Error;

pub use hash::{flow_hash, select_weighted};
pub use switch::{Backend, CachedFlow, Decision, Switch, SNAT_PRIORITY};

pub type HostId = u32;
pub type PortId = u32;
pub type GroupId = u32;
pub type BucketId = u32;

/// The port every switch starts with, facing the physical network.
pub const UPLINK: PortId = 1;

pub const TCP: u8 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowKey {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub proto: u8,
    pub src_port: u16,
    pub dst_port: u16,
}

impl FlowKey {
    pub fn tcp(src_ip: Ipv4Addr, src_port: u16, dst_ip: Ipv4Addr, dst_port: u16) -> Self {
        FlowKey {
            src_ip,
            dst_ip,
            proto: TCP,
            src_port,
            dst_port,
        }
    }

    /// The key of the response direction.
    pub fn reversed(&self) -> Self {
        FlowKey {
            src_ip: self.dst_ip,
            dst_ip: self.src_ip,
            proto: self.proto,
            src_port: self.dst_port,
            dst_port: self.src_port,
        }
    }

    /// 13-byte canonical encoding: addresses, protocol, then ports, big-endian.
    pub fn canonical_bytes(&self) -> [u8; 13] {
        let mut b = [0u8; 13];
        b[0..4].copy_from_slice(&self.src_ip.octets());
        b[4..8].copy_from_slice(&self.dst_ip.octets());
        b[8] = self.proto;
        b[9..11].copy_from_slice(&self.src_port.to_be_bytes());
        b[11..13].copy_from_slice(&self.dst_port.to_be_bytes());
        b
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}->{}:{}/{}",
            self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.proto
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Mac(pub [u8; 6]);

impl Mac {
    /// Locally administered unicast address derived from a counter.
    pub fn from_index(i: u32) -> Self {
        let b = i.to_be_bytes();
        Mac([0x02, 0x00, b[0], b[1], b[2], b[3]])
    }
}

impl fmt::Display for Mac {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d, e, g] = self.0;
        write!(f, "{a:02x}:{b:02x}:{c:02x}:{d:02x}:{e:02x}:{g:02x}")
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid MAC address {0:?}")]
pub struct BadMac(String);

impl FromStr for Mac {
    type Err = BadMac;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 6 {
            return Err(BadMac(s.to_string()));
        }
        let mut out = [0u8; 6];
        for (o, p) in out.iter_mut().zip(parts) {
            *o = u8::from_str_radix(p, 16).map_err(|_| BadMac(s.to_string()))?;
        }
        Ok(Mac(out))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    SetDstIp(Ipv4Addr),
    SetDstMac(Mac),
    SetSrcIp(Ipv4Addr),
    Output(PortId),
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::SetDstIp(ip) => write!(f, "mod_nw_dst:{ip}"),
            Action::SetDstMac(mac) => write!(f, "mod_dl_dst:{mac}"),
            Action::SetSrcIp(ip) => write!(f, "mod_nw_src:{ip}"),
            Action::Output(p) => write!(f, "output:{p}"),
        }
    }
}

fn output_port(actions: &[Action]) -> Option<PortId> {
    match actions {
        [init @ .., Action::Output(p)] if !init.iter().any(|a| matches!(a, Action::Output(_))) => {
            Some(*p)
        }
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bucket {
    pub id: BucketId,
    pub weight: u32,
    pub actions: Vec<Action>,
}

impl Bucket {
    pub fn new(id: BucketId, weight: u32, actions: Vec<Action>) -> Self {
        Bucket {
            id,
            weight,
            actions,
        }
    }

    pub fn output(&self) -> Option<PortId> {
        output_port(&self.actions)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupEntry {
    pub id: GroupId,
    pub buckets: Vec<Bucket>,
}

impl GroupEntry {
    pub fn bucket(&self, id: BucketId) -> Option<&Bucket> {
        self.buckets.iter().find(|b| b.id == id)
    }

    pub fn live_weight(&self) -> u64 {
        self.buckets.iter().map(|b| u64::from(b.weight)).sum()
    }
}

/// Partial predicate over a flow key and its ingress port. `None` matches
/// anything.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Match {
    pub in_port: Option<PortId>,
    pub src_ip: Option<Ipv4Addr>,
    pub dst_ip: Option<Ipv4Addr>,
    pub proto: Option<u8>,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
}

impl Match {
    pub fn any() -> Self {
        Match::default()
    }

    pub fn exact(key: &FlowKey) -> Self {
        Match {
            in_port: None,
            src_ip: Some(key.src_ip),
            dst_ip: Some(key.dst_ip),
            proto: Some(key.proto),
            src_port: Some(key.src_port),
            dst_port: Some(key.dst_port),
        }
    }

    pub fn in_port(mut self, p: PortId) -> Self {
        self.in_port = Some(p);
        self
    }

    pub fn src_ip(mut self, ip: Ipv4Addr) -> Self {
        self.src_ip = Some(ip);
        self
    }

    pub fn dst_ip(mut self, ip: Ipv4Addr) -> Self {
        self.dst_ip = Some(ip);
        self
    }

    pub fn proto(mut self, p: u8) -> Self {
        self.proto = Some(p);
        self
    }

    pub fn src_port(mut self, p: u16) -> Self {
        self.src_port = Some(p);
        self
    }

    pub fn dst_port(mut self, p: u16) -> Self {
        self.dst_port = Some(p);
        self
    }

    pub fn matches(&self, key: &FlowKey, in_port: PortId) -> bool {
        fn ok<T: PartialEq>(want: Option<T>, got: T) -> bool {
            want.is_none_or(|w| w == got)
        }
        ok(self.in_port, in_port)
            && ok(self.src_ip, key.src_ip)
            && ok(self.dst_ip, key.dst_ip)
            && ok(self.proto, key.proto)
            && ok(self.src_port, key.src_port)
            && ok(self.dst_port, key.dst_port)
    }
}

impl fmt::Display for Match {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(p) = self.in_port {
            parts.push(format!("in_port={p}"));
        }
        if let Some(ip) = self.src_ip {
            parts.push(format!("nw_src={ip}"));
        }
        if let Some(ip) = self.dst_ip {
            parts.push(format!("nw_dst={ip}"));
        }
        if let Some(p) = self.proto {
            parts.push(format!("nw_proto={p}"));
        }
        if let Some(p) = self.src_port {
            parts.push(format!("tp_src={p}"));
        }
        if let Some(p) = self.dst_port {
            parts.push(format!("tp_dst={p}"));
        }
        if parts.is_empty() {
            f.write_str("any")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleAction {
    Apply(Vec<Action>),
    Group(GroupId),
    Drop,
}

impl fmt::Display for RuleAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleAction::Apply(actions) => f.write_str(&join_actions(actions)),
            RuleAction::Group(g) => write!(f, "group:{g:08x}"),
            RuleAction::Drop => f.write_str("drop"),
        }
    }
}

pub(crate) fn join_actions(actions: &[Action]) -> String {
    actions
        .iter()
        .map(Action::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowRule {
    pub priority: u16,
    pub matcher: Match,
    pub action: RuleAction,
}

impl FlowRule {
    pub fn new(priority: u16, matcher: Match, action: RuleAction) -> Self {
        FlowRule {
            priority,
            matcher,
            action,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RuleId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PortKind {
    Uplink,
    Vif(String),
    Tunnel { remote: HostId, key: u32 },
}

impl fmt::Display for PortKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PortKind::Uplink => f.write_str("type=uplink"),
            PortKind::Vif(name) => write!(f, "type=vif name={name}"),
            PortKind::Tunnel { remote, key } => write!(f, "type=gre remote={remote} key={key}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TunnelPort {
    pub port: PortId,
    pub remote: HostId,
    pub key: u32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SwitchError {
    #[error("rule with identical match and priority already installed")]
    DuplicateExactRule,
    #[error("no such rule")]
    NoSuchRule,
    #[error("group {0:08x} already exists")]
    DuplicateGroup(GroupId),
    #[error("no group {0:08x}")]
    NoSuchGroup(GroupId),
    #[error("no bucket {1} in group {0:08x}")]
    NoSuchBucket(GroupId, BucketId),
    #[error("bucket {1} already in group {0:08x}")]
    DuplicateBucket(GroupId, BucketId),
    #[error("bucket {bucket} still has {live} pinned flows")]
    BucketStillDraining { bucket: BucketId, live: usize },
    #[error("group {0:08x} has no bucket with nonzero weight")]
    NoLiveBucket(GroupId),
    #[error("no matching flow")]
    Dropped,
    #[error("tunnel key {key} to host {remote} already in use")]
    DuplicateKey { remote: HostId, key: u32 },
    #[error("backend cannot change after traffic has been classified")]
    ModeChangeAfterTraffic,
    #[error("no port {0}")]
    NoSuchPort(PortId),
    #[error("action list must end with exactly one output")]
    BadActions,
}
