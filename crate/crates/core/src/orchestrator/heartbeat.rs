use std::collections::{BTreeMap, BTreeSet};

use crate::switchfab::HostId;

/// Last heartbeat per replica host, kept by a first-instance host.
#[derive(Debug, Clone)]
pub struct HeartbeatTable {
    pub interval: f64,
    pub multiplier: u32,
    last: BTreeMap<HostId, f64>,
    failed: BTreeSet<HostId>,
}

impl HeartbeatTable {
    pub fn new(interval: f64, multiplier: u32) -> Self {
        HeartbeatTable {
            interval,
            multiplier,
            last: BTreeMap::new(),
            failed: BTreeSet::new(),
        }
    }

    pub fn timeout(&self) -> f64 {
        self.interval * f64::from(self.multiplier)
    }

    /// Starts tracking `host` as if it had beaten at `now`, unless already
    /// tracked.
    pub fn track(&mut self, host: HostId, now: f64) {
        self.last.entry(host).or_insert(now);
    }

    pub fn forget(&mut self, host: HostId) {
        self.last.remove(&host);
        self.failed.remove(&host);
    }

    pub fn is_tracked(&self, host: HostId) -> bool {
        self.last.contains_key(&host)
    }

    /// Records a beat. Returns false for hosts that are not tracked.
    pub fn update(&mut self, host: HostId, at: f64) -> bool {
        match self.last.get_mut(&host) {
            Some(t) if !self.failed.contains(&host) => {
                *t = t.max(at);
                true
            }
            _ => false,
        }
    }

    pub fn last(&self, host: HostId) -> Option<f64> {
        self.last.get(&host).copied()
    }

    /// Hosts whose silence now exceeds the timeout. Each host is reported
    /// once.
    pub fn check(&mut self, now: f64) -> Vec<HostId> {
        let timeout = self.timeout();
        let newly: Vec<HostId> = self
            .last
            .iter()
            .filter(|(h, t)| now - **t > timeout && !self.failed.contains(h))
            .map(|(h, _)| *h)
            .collect();
        self.failed.extend(newly.iter().copied());
        newly
    }

    pub fn clear(&mut self) {
        self.last.clear();
        self.failed.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn declared_at_first_tick_past_timeout() {
        let mut t = HeartbeatTable::new(2.0, 2);
        t.track(1, 0.0);
        for beat in [2.0, 4.0, 6.0, 8.0, 10.0] {
            assert!(t.update(1, beat));
        }
        // Monitor ticks every second after the last beat at t=10.
        let declared: Vec<f64> = (11..=20)
            .map(f64::from)
            .filter(|&now| !t.check(now).is_empty())
            .collect();
        assert_eq!(declared, vec![15.0]);
    }

    #[test]
    fn periodic_beats_never_suspected() {
        let mut t = HeartbeatTable::new(2.0, 2);
        t.track(3, 0.0);
        for k in 1..100 {
            let now = f64::from(k);
            if k % 2 == 0 {
                t.update(3, now);
            }
            assert!(t.check(now).is_empty());
        }
    }

    #[test]
    fn unknown_host_ignored() {
        let mut t = HeartbeatTable::new(2.0, 2);
        assert!(!t.update(9, 1.0));
        assert!(t.check(100.0).is_empty());
    }
}
