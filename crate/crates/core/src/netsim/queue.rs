use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

pub type JobId = u64;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Tag(f64);

impl Eq for Tag {}

impl Ord for Tag {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl PartialOrd for Tag {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Processor-sharing server: `n` jobs in service each progress at `rate/n`
/// bytes per second. Tracked in virtual time, where a job of size `s`
/// arriving at virtual time `v` finishes when virtual time reaches `v + s`.
#[derive(Debug, Clone)]
pub struct PsQueue {
    rate: f64,
    vtime: f64,
    updated: f64,
    tags: BTreeMap<JobId, f64>,
    heap: BinaryHeap<Reverse<(Tag, JobId)>>,
    busy: f64,
    generation: u64,
}

impl PsQueue {
    pub fn new(rate: f64, now: f64) -> Self {
        PsQueue {
            rate,
            vtime: 0.0,
            updated: now,
            tags: BTreeMap::new(),
            heap: BinaryHeap::new(),
            busy: 0.0,
            generation: 0,
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Bumped whenever the next completion time may have changed; completion
    /// events carrying an older generation are stale.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Seconds spent with at least one job up to the last update.
    pub fn busy_time(&mut self, now: f64) -> f64 {
        self.advance(now);
        self.busy
    }

    fn advance(&mut self, now: f64) {
        let dt = now - self.updated;
        if dt <= 0.0 {
            return;
        }
        let n = self.tags.len();
        if n > 0 {
            self.vtime += dt * self.rate / n as f64;
            self.busy += dt;
        }
        self.updated = now;
    }

    pub fn set_rate(&mut self, now: f64, rate: f64) {
        self.advance(now);
        if rate != self.rate {
            self.rate = rate;
            self.generation += 1;
        }
    }

    pub fn arrive(&mut self, now: f64, job: JobId, size: f64) {
        self.advance(now);
        let tag = self.vtime + size;
        self.tags.insert(job, tag);
        self.heap.push(Reverse((Tag(tag), job)));
        self.generation += 1;
    }

    /// Removes a job before it finishes.
    pub fn remove(&mut self, now: f64, job: JobId) -> bool {
        self.advance(now);
        let found = self.tags.remove(&job).is_some();
        if found {
            self.generation += 1;
        }
        found
    }

    fn min_live(&mut self) -> Option<(f64, JobId)> {
        while let Some(Reverse((Tag(t), j))) = self.heap.peek().copied() {
            if self.tags.get(&j) == Some(&t) {
                return Some((t, j));
            }
            self.heap.pop();
        }
        None
    }

    /// Absolute time of the next completion if nothing else changes.
    pub fn next_completion(&mut self) -> Option<f64> {
        let (tag, _) = self.min_live()?;
        let n = self.tags.len() as f64;
        Some(self.updated + ((tag - self.vtime).max(0.0) * n / self.rate))
    }

    /// Finishes every job whose work is done at `now`, in finish order.
    pub fn complete(&mut self, now: f64) -> Vec<JobId> {
        self.advance(now);
        let mut done = Vec::new();
        while let Some((tag, job)) = self.min_live() {
            // Absorb float error from converting the completion time.
            if tag > self.vtime + 1e-9 * tag.abs().max(1.0) {
                break;
            }
            self.vtime = self.vtime.max(tag);
            self.heap.pop();
            self.tags.remove(&job);
            done.push(job);
        }
        if !done.is_empty() {
            self.generation += 1;
        }
        done
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Runs the queue to empty, returning (job, finish time).
    fn drain(q: &mut PsQueue) -> Vec<(JobId, f64)> {
        let mut out = Vec::new();
        while let Some(t) = q.next_completion() {
            for j in q.complete(t) {
                out.push((j, t));
            }
        }
        out
    }

    #[test]
    fn single_job_takes_size_over_rate() {
        let mut q = PsQueue::new(100.0, 0.0);
        q.arrive(1.0, 7, 50.0);
        assert_eq!(drain(&mut q), vec![(7, 1.5)]);
    }

    #[test]
    fn two_equal_jobs_share() {
        let mut q = PsQueue::new(100.0, 0.0);
        q.arrive(0.0, 1, 100.0);
        q.arrive(0.0, 2, 100.0);
        let done = drain(&mut q);
        assert_eq!(done.len(), 2);
        for (_, t) in done {
            assert!((t - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn late_arrival_slows_first() {
        // Job 1 alone for 0.5 s (50 B done), then shares: 50 B left at 50 B/s.
        let mut q = PsQueue::new(100.0, 0.0);
        q.arrive(0.0, 1, 100.0);
        q.arrive(0.5, 2, 100.0);
        let done = drain(&mut q);
        assert_eq!(done[0].0, 1);
        assert!((done[0].1 - 1.5).abs() < 1e-9);
        assert!((done[1].1 - 2.0).abs() < 1e-9);
    }

    #[test]
    fn busy_time_counts_occupied_seconds() {
        let mut q = PsQueue::new(10.0, 0.0);
        q.arrive(1.0, 1, 10.0);
        drain(&mut q);
        assert!((q.busy_time(5.0) - 1.0).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Against a brute-force fluid simulation with small time steps.
        #[test]
        fn matches_fluid_oracle(jobs in proptest::collection::vec((0u32..20, 1u32..50), 1..8)) {
            let rate = 10.0;
            let mut q = PsQueue::new(rate, 0.0);
            let mut arrivals: Vec<(f64, f64)> = jobs.iter().map(|&(a, s)| (f64::from(a) / 4.0, f64::from(s))).collect();
            arrivals.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut finish = vec![0.0; arrivals.len()];
            // Event-driven run.
            let mut next_arrival = 0;
            loop {
                let tc = q.next_completion();
                let ta = arrivals.get(next_arrival).map(|a| a.0);
                match (ta, tc) {
                    (Some(a), Some(c)) if a <= c => { q.arrive(a, next_arrival as u64, arrivals[next_arrival].1); next_arrival += 1; }
                    (Some(a), None) => { q.arrive(a, next_arrival as u64, arrivals[next_arrival].1); next_arrival += 1; }
                    (_, Some(c)) => { for j in q.complete(c) { finish[j as usize] = c; } }
                    (None, None) => break,
                }
            }
            // Fluid oracle.
            let dt = 1e-4;
            let mut left: Vec<f64> = arrivals.iter().map(|a| a.1).collect();
            let mut oracle = vec![f64::NAN; arrivals.len()];
            let mut t = 0.0;
            while oracle.iter().any(|x| x.is_nan()) {
                let active: Vec<usize> = (0..left.len()).filter(|&i| arrivals[i].0 <= t + 1e-12 && oracle[i].is_nan()).collect();
                if !active.is_empty() {
                    let share = rate * dt / active.len() as f64;
                    for &i in &active {
                        left[i] -= share;
                        if left[i] <= 1e-12 { oracle[i] = t + dt; }
                    }
                }
                t += dt;
            }
            for i in 0..finish.len() {
                prop_assert!((finish[i] - oracle[i]).abs() < 0.01, "job {i}: {} vs {}", finish[i], oracle[i]);
            }
        }
    }
}
