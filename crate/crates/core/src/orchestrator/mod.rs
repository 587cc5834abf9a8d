//! Per-host control plane: turns requests written into the store into VM
//! boots and switch programming, and runs the recovery monitor.

mod cluster;
mod heartbeat;
mod placement;
pub mod records;
mod registry;

use thiserror::Error;

use crate::kvstore::StoreError;
use crate::switchfab::{HostId, SwitchError};

pub use cluster::{
    host_name, Cluster, ClusterConfig, Deferred, DownReason, Effect, Host, Instance, Listener,
    Notice, RecoveryAction, Service, ServiceSpec, TunnelLink, OUTBOUND_PRIORITY, SERVICE_PRIORITY,
    TUNNEL_INGRESS_PRIORITY,
};
pub use heartbeat::HeartbeatTable;
pub use placement::{HostLoad, LocalFirst, PlacementPolicy};
pub use records::{RemoteBoot, RequestRecord, ResponseRecord, Verb, VmRecord, VmRole, VmState};
pub use registry::HypervisorRegistry;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OrchestratorError {
    #[error("no capacity")]
    NoCapacity,
    #[error("permission denied")]
    PermissionDenied,
    #[error("not running")]
    NotRunning,
    #[error("not halting")]
    NotHalting,
    #[error("retry")]
    Retry,
    #[error("request outstanding")]
    InvocationPending,
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("no such host h{0}")]
    NoSuchHost(HostId),
    #[error("no such instance {0}")]
    NoSuchInstance(String),
    #[error("service {0} already exists")]
    DuplicateService(String),
    #[error(transparent)]
    Switch(#[from] SwitchError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0}")]
    Other(String),
}

impl OrchestratorError {
    /// Text carried in an error response.
    pub fn wire_message(&self) -> String {
        self.to_string()
    }
}
