//! In-guest client for the scaling API and the model self-scaling web
//! service built on it.

mod app;
mod client;
mod log;
mod meter;
mod policy;

pub use app::{AppEvent, AppState, AppStats, GuestApp};
pub use client::{ScaleClient, InvokeError, InvokeResponse, Handler};
pub use log::{log_merge_policy, ServiceLog};
pub use meter::RpsMeter;
pub use policy::{PollDecision, Poller, PolicyError, ScalePolicy};
