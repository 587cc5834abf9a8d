//! Deterministic flow-level simulation: event clock, processor-sharing
//! replica queues, workload generation and metrics.

mod clock;
mod metrics;
mod queue;
mod sim;
mod workload;

pub use clock::{EventQueue, SchedulePast};
pub use metrics::{mean, percentile, to_csv, MetricsRow, Window, CSV_HEADER};
pub use queue::{JobId, PsQueue};
pub use sim::{Injection, SimConfig, SimError, Simulation, Summary, Trace};
pub use workload::{
    client_key, ArrivalGen, PageDistribution, RateSchedule, Request, WorkloadError, WorkloadSpec,
    CLIENT_BASE, DEFAULT_PAGE_FREQS, DEFAULT_PAGE_SIZES_KB,
};
