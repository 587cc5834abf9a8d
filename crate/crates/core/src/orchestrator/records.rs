//! Store-resident records: per-VM metadata and request/response values.

use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use thiserror::Error;

use crate::kvstore::{Atom, Path, Store, ValueList};
use crate::switchfab::Mac;

pub const VMS: &str = "jitsu/vms";
pub const VM_LIFECYCLE: &str = "jitsu/vm";
pub const REQUESTS: &str = "jitsu/requests";
pub const HEARTBEATS: &str = "jitsu/heartbeat";
pub const APPS: &str = "apps";

pub fn path(s: &str) -> Path {
    s.parse().expect("static path")
}

pub fn vm_root(name: &str) -> Path {
    path(VMS).join(name).expect("vm names are valid segments")
}

pub fn lifecycle_root(name: &str) -> Path {
    path(VM_LIFECYCLE).join(name).expect("vm names are valid segments")
}

pub fn request_root(requester: &str) -> Path {
    path(REQUESTS)
        .join(requester)
        .expect("requester names are valid segments")
}

pub fn request_key(requester: &str) -> Path {
    request_root(requester).join("request").expect("static")
}

pub fn response_key(requester: &str) -> Path {
    request_root(requester).join("response").expect("static")
}

pub fn app_root(service: &str) -> Path {
    path(APPS).join(service).expect("service names are valid segments")
}

pub fn app_log(service: &str) -> Path {
    app_root(service).join("log").expect("static")
}

/// Service IP as eight lowercase hex digits, the group id on the switch.
pub fn app_id_hex(ip: Ipv4Addr) -> String {
    format!("{:08x}", u32::from(ip))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VmState {
    Provisioning,
    Running,
    Halting,
    Dead,
}

impl VmState {
    pub fn as_str(&self) -> &'static str {
        match self {
            VmState::Provisioning => "provisioning",
            VmState::Running => "running",
            VmState::Halting => "halting",
            VmState::Dead => "dead",
        }
    }

    /// Allowed transitions; a crash may also move a running VM to dead.
    pub fn can_become(&self, next: VmState) -> bool {
        use VmState::*;
        matches!(
            (self, next),
            (Provisioning, Running)
                | (Running, Halting)
                | (Halting, Dead)
                | (Provisioning, Dead)
                | (Running, Dead)
        )
    }
}

impl fmt::Display for VmState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VmState {
    type Err = RecordError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "provisioning" => VmState::Provisioning,
            "running" => VmState::Running,
            "halting" => VmState::Halting,
            "dead" => VmState::Dead,
            _ => return Err(RecordError::Field("state", s.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VmRole {
    First {
        /// Interface name (e.g. `vif16.1`) to address.
        ips: BTreeMap<String, Ipv4Addr>,
        mac: Mac,
        /// DNS name to record TTL.
        dns: BTreeMap<String, u32>,
    },
    Replica {
        ip: Ipv4Addr,
        first_instance_host: String,
    },
}

/// Metadata kept under `jitsu/vms/<name>/`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VmRecord {
    pub name: String,
    pub dom_id: u32,
    pub app_id: String,
    pub state: VmState,
    pub stop_mode: String,
    pub role: VmRole,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecordError {
    #[error("missing field {0}")]
    Missing(&'static str),
    #[error("bad value for {0}: {1:?}")]
    Field(&'static str, String),
}

impl VmRecord {
    pub fn is_first(&self) -> bool {
        matches!(self.role, VmRole::First { .. })
    }

    /// Field paths relative to the record root and their values.
    pub fn fields(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("dom-id".to_string(), self.dom_id.to_string()),
            ("app-id".to_string(), self.app_id.clone()),
            ("state".to_string(), self.state.to_string()),
            ("stop-mode".to_string(), self.stop_mode.clone()),
        ];
        match &self.role {
            VmRole::First { ips, mac, dns } => {
                for (vif, ip) in ips {
                    out.push((format!("ips/{vif}"), ip.to_string()));
                }
                out.push(("first-instance".into(), "true".into()));
                out.push(("mac".into(), mac.to_string()));
                for (name, ttl) in dns {
                    out.push((format!("dns/{name}/ttl"), ttl.to_string()));
                }
            }
            VmRole::Replica {
                ip,
                first_instance_host,
            } => {
                out.push(("ip".into(), ip.to_string()));
                out.push(("first-instance".into(), "false".into()));
                out.push(("first-instance-host".into(), first_instance_host.clone()));
            }
        }
        out
    }

    pub fn entries(&self) -> Vec<(Path, String)> {
        let root = vm_root(&self.name);
        self.fields()
            .into_iter()
            .map(|(k, v)| (root.join(&k).expect("field names are valid"), v))
            .collect()
    }

    pub fn load(store: &Store, name: &str) -> Result<VmRecord, RecordError> {
        let root = vm_root(name);
        let get = |field: &'static str| -> Result<&str, RecordError> {
            store
                .get(&root.join(field).expect("static"))
                .ok_or(RecordError::Missing(field))
        };
        let dom_id = get("dom-id")?
            .parse()
            .map_err(|_| RecordError::Field("dom-id", get("dom-id").unwrap_or("").into()))?;
        let state = get("state")?.parse()?;
        let first = match get("first-instance")? {
            "true" => true,
            "false" => false,
            other => return Err(RecordError::Field("first-instance", other.into())),
        };
        let role = if first {
            let mut ips = BTreeMap::new();
            for (p, v) in store.list(&root.join("ips").expect("static")) {
                let ip = v.parse().map_err(|_| RecordError::Field("ips", v.into()))?;
                ips.insert(p.last().to_string(), ip);
            }
            let mut dns = BTreeMap::new();
            let dns_root = root.join("dns").expect("static");
            for (p, v) in store.list(&dns_root) {
                let ttl = v.parse().map_err(|_| RecordError::Field("dns", v.into()))?;
                dns.insert(p.segments()[dns_root.depth()].clone(), ttl);
            }
            let mac = get("mac")?;
            VmRole::First {
                ips,
                mac: mac.parse().map_err(|_| RecordError::Field("mac", mac.into()))?,
                dns,
            }
        } else {
            let ip = get("ip")?;
            VmRole::Replica {
                ip: ip.parse().map_err(|_| RecordError::Field("ip", ip.into()))?,
                first_instance_host: get("first-instance-host")?.to_string(),
            }
        };
        Ok(VmRecord {
            name: name.to_string(),
            dom_id,
            app_id: get("app-id")?.to_string(),
            state,
            stop_mode: get("stop-mode")?.to_string(),
            role,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verb {
    Replicate,
    Halt,
    Die,
}

impl Verb {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verb::Replicate => "replicate",
            Verb::Halt => "halt",
            Verb::Die => "die",
        }
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parameters carried by a replicate request sent to another host.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteBoot {
    pub app_id: String,
    pub ttl: u32,
    pub stop_mode: String,
    pub image: String,
}

/// The value written under a `request` key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestRecord {
    pub verb: Verb,
    pub target: String,
    pub remote: Option<RemoteBoot>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed request: {0}")]
pub struct MalformedRequest(pub String);

impl RequestRecord {
    pub fn local(verb: Verb, target: impl Into<String>) -> Self {
        RequestRecord {
            verb,
            target: target.into(),
            remote: None,
        }
    }

    pub fn encode(&self) -> String {
        let mut atoms = vec![Atom::str(self.verb.as_str()), Atom::str(&self.target)];
        if let Some(r) = &self.remote {
            atoms.push(Atom::Int(r.app_id.clone()));
            atoms.push(Atom::Int(r.ttl.to_string()));
            atoms.push(Atom::str(&r.stop_mode));
            atoms.push(Atom::str(&r.image));
        }
        ValueList::new(atoms).to_string()
    }

    pub fn decode(value: &str) -> Result<Self, MalformedRequest> {
        let bad = |why: &str| MalformedRequest(why.to_string());
        let list: ValueList = value.parse().map_err(|e: crate::kvstore::CodecError| bad(&e.to_string()))?;
        let atoms = list.atoms();
        let verb = match atoms.first().and_then(Atom::as_str) {
            Some("replicate") => Verb::Replicate,
            Some("halt") => Verb::Halt,
            Some("die") => Verb::Die,
            Some(other) => return Err(bad(&format!("unknown verb {other}"))),
            None => return Err(bad("missing verb")),
        };
        let target = atoms
            .get(1)
            .and_then(Atom::as_str)
            .ok_or_else(|| bad("missing target"))?
            .to_string();
        let remote = match atoms.len() {
            2 => None,
            6 if verb == Verb::Replicate => {
                let app_id = atoms[2].as_int().ok_or_else(|| bad("app-id"))?.to_string();
                let ttl = atoms[3]
                    .as_int()
                    .and_then(|d| d.parse().ok())
                    .ok_or_else(|| bad("ttl"))?;
                let stop_mode = atoms[4].as_str().ok_or_else(|| bad("stop-mode"))?.to_string();
                let image = atoms[5].as_str().ok_or_else(|| bad("image"))?.to_string();
                Some(RemoteBoot {
                    app_id,
                    ttl,
                    stop_mode,
                    image,
                })
            }
            n => return Err(bad(&format!("{n} fields"))),
        };
        Ok(RequestRecord {
            verb,
            target,
            remote,
        })
    }
}

/// The value written under a `response` key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResponseRecord {
    Success,
    Error(String),
}

impl ResponseRecord {
    pub fn encode(&self) -> String {
        let atoms = match self {
            ResponseRecord::Success => vec![Atom::str("success")],
            ResponseRecord::Error(msg) => vec![Atom::str("error"), Atom::str(msg)],
        };
        ValueList::new(atoms).to_string()
    }

    pub fn decode(value: &str) -> Option<Self> {
        let list: ValueList = value.parse().ok()?;
        match list.atoms() {
            [Atom::Str(s)] if s == "success" => Some(ResponseRecord::Success),
            [Atom::Str(s), Atom::Str(msg)] if s == "error" && !msg.is_empty() => {
                Some(ResponseRecord::Error(msg.clone()))
            }
            _ => None,
        }
    }
}
