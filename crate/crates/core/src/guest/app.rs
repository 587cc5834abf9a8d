use crate::kvstore::{Identity, MergeConflict, Snapshot, Store};

use super::client::{ScaleClient, InvokeResponse};
use super::log::ServiceLog;
use super::meter::RpsMeter;
use super::policy::{PollDecision, Poller, ScalePolicy};

/// Outcome of an invocation, produced by the handler the app registered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppEvent {
    Replicated(InvokeResponse),
    Halted(InvokeResponse),
    Died(InvokeResponse),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppState {
    Serving,
    /// Halt granted; finishing in-flight requests.
    Draining,
    /// Log merged and die requested; waiting to be destroyed.
    Dying,
    Stopped,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AppStats {
    pub replicate_calls: u64,
    pub halt_calls: u64,
    pub die_calls: u64,
    pub errors: u64,
    pub polls: u64,
}

/// The model self-scaling web service running in one instance: serves
/// requests, logs them, polls its request rate and scales itself.
#[derive(Debug)]
pub struct GuestApp {
    pub name: String,
    pub service: String,
    pub first: bool,
    pub state: AppState,
    pub in_flight: usize,
    pub meter: RpsMeter,
    pub log: ServiceLog,
    pub stats: AppStats,
    /// When false the poll loop never invokes the orchestrator.
    pub scaling: bool,
    client: ScaleClient<AppEvent>,
    poller: Poller,
    ancestor: Option<Snapshot>,
}

impl GuestApp {
    pub fn new(name: &str, service: &str, first: bool, policy: ScalePolicy) -> Self {
        GuestApp {
            name: name.to_string(),
            service: service.to_string(),
            first,
            state: AppState::Serving,
            in_flight: 0,
            meter: RpsMeter::default(),
            log: ServiceLog::new(name),
            stats: AppStats::default(),
            scaling: true,
            client: ScaleClient::new(name),
            poller: Poller::new(policy),
            ancestor: None,
        }
    }

    /// Records the service subtree as it was at boot, the base for the
    /// eventual merge.
    pub fn set_ancestor(&mut self, snapshot: Snapshot) {
        self.ancestor = Some(snapshot);
    }

    pub fn identity(&self) -> Identity {
        Identity::instance(&self.name)
    }

    pub fn accepting(&self) -> bool {
        matches!(self.state, AppState::Serving | AppState::Draining)
    }

    pub fn poll_counter(&self) -> u32 {
        self.poller.counter()
    }

    pub fn pending(&self) -> bool {
        self.client.pending().is_some()
    }

    pub fn begin_request(&mut self) {
        self.in_flight += 1;
    }

    /// Completion of one request at `now` (seconds).
    pub fn complete_request(&mut self, now: f64, desc: impl Into<String>) {
        debug_assert!(self.in_flight > 0);
        self.in_flight -= 1;
        self.meter.record(now);
        self.log.append((now * 1e6).round() as u64, desc);
    }

    /// Drops an in-flight request that will never complete.
    pub fn abort_request(&mut self) {
        self.in_flight = self.in_flight.saturating_sub(1);
    }

    /// One iteration of the poll loop. Skipped while an invocation is
    /// outstanding or once the instance has started to halt.
    pub fn poll(&mut self, now: f64, store: &mut Store) -> Option<PollDecision> {
        if self.state != AppState::Serving || self.pending() || !self.scaling {
            return None;
        }
        self.stats.polls += 1;
        let rps = self.meter.rate(now);
        let decision = self.poller.poll(rps);
        let sent = match decision {
            PollDecision::Replicate => {
                self.stats.replicate_calls += 1;
                let service = self.service.clone();
                self.client
                    .replicate(store, &service, Box::new(AppEvent::Replicated))
            }
            PollDecision::Halt => {
                self.stats.halt_calls += 1;
                self.client.halt(store, Box::new(AppEvent::Halted))
            }
            PollDecision::Wait => Ok(()),
        };
        if sent.is_err() {
            self.stats.errors += 1;
            self.poller.reset();
        }
        Some(decision)
    }

    /// Feeds a value seen on the response key through the client.
    pub fn on_response(&mut self, value: &str) -> Option<AppEvent> {
        let ev = self.client.deliver(value)?;
        match &ev {
            AppEvent::Replicated(r) => {
                if r.is_err() {
                    self.stats.errors += 1;
                    self.poller.reset();
                }
            }
            AppEvent::Halted(Ok(())) => self.state = AppState::Draining,
            AppEvent::Halted(Err(_)) => {
                self.stats.errors += 1;
                self.poller.reset();
            }
            AppEvent::Died(r) => {
                if r.is_err() {
                    self.stats.errors += 1;
                }
            }
        }
        Some(ev)
    }

    /// True once a draining instance has no requests left.
    pub fn drained(&self) -> bool {
        self.state == AppState::Draining && self.in_flight == 0
    }

    /// Merges this instance's log into the first instance's store.
    pub fn merge_state(&mut self, hub: &mut Store) -> Result<usize, MergeConflict> {
        let ancestor = self
            .ancestor
            .clone()
            .unwrap_or_else(|| Snapshot::empty(crate::orchestrator::records::app_root(&self.service)));
        let writer = self.identity();
        let service = self.service.clone();
        self.log.merge_into(hub, &service, &ancestor, &writer)
    }

    /// Requests destruction. The response may never arrive.
    pub fn die(&mut self, local: &mut Store) {
        self.stats.die_calls += 1;
        self.state = AppState::Dying;
        if let Err(e) = self.client.die(local, Box::new(AppEvent::Died)) {
            self.stats.errors += 1;
            log::warn!("{}: die not sent: {e}", self.name);
        }
    }

    /// Writes buffered log entries of the first instance to the store.
    pub fn flush_log(&mut self, store: &mut Store) -> Result<usize, MergeConflict> {
        let writer = self.identity();
        let service = self.service.clone();
        self.log.flush(store, &service, &writer)
    }

    pub fn stop(&mut self) {
        self.state = AppState::Stopped;
    }
}
