//! Self-scaling unikernel services on a simulated cluster: a versioned
//! store, a flow-steering switch, per-host orchestration, the in-guest
//! scaling API and a discrete-event simulator that ties them together.

pub mod cli;
pub mod guest;
pub mod kvstore;
pub mod netsim;
pub mod orchestrator;
pub mod scenario;
pub mod switchfab;
