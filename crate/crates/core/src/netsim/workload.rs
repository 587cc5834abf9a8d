use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::switchfab::FlowKey;

pub const DEFAULT_PAGE_SIZES_KB: [f64; 10] =
    [8.0, 24.0, 48.0, 72.0, 96.0, 128.0, 192.0, 320.0, 512.0, 768.0];
pub const DEFAULT_PAGE_FREQS: [f64; 10] = [0.17, 0.19, 0.17, 0.15, 0.11, 0.08, 0.06, 0.04, 0.02, 0.01];

/// First client address; request `i` comes from this plus `i`.
pub const CLIENT_BASE: Ipv4Addr = Ipv4Addr::new(10, 128, 0, 0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("page sizes and frequencies differ in length")]
    Lengths,
    #[error("page frequencies sum to {0}, not 1")]
    FrequencySum(f64),
    #[error("page sizes must be positive")]
    Size,
    #[error("schedule times must be strictly increasing")]
    ScheduleOrder,
    #[error("negative rate in schedule")]
    NegativeRate,
    #[error("at least one url required")]
    Urls,
    #[error("jitter must be in [0, 1)")]
    Jitter,
}

/// Bucketed page-size distribution over a fixed set of URLs.
#[derive(Debug, Clone, PartialEq)]
pub struct PageDistribution {
    /// Size in bytes of each URL.
    url_sizes: Vec<f64>,
}

impl Default for PageDistribution {
    fn default() -> Self {
        PageDistribution::new(&DEFAULT_PAGE_SIZES_KB, &DEFAULT_PAGE_FREQS, 100).expect("valid default")
    }
}

impl PageDistribution {
    /// Assigns `urls` URLs to size buckets in proportion to `freqs`, using
    /// the largest-remainder method so the counts sum to `urls`.
    pub fn new(sizes_kb: &[f64], freqs: &[f64], urls: usize) -> Result<Self, WorkloadError> {
        if sizes_kb.len() != freqs.len() || sizes_kb.is_empty() {
            return Err(WorkloadError::Lengths);
        }
        let sum: f64 = freqs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(WorkloadError::FrequencySum(sum));
        }
        if sizes_kb.iter().any(|&s| s <= 0.0) || freqs.iter().any(|&f| f < 0.0) {
            return Err(WorkloadError::Size);
        }
        if urls == 0 {
            return Err(WorkloadError::Urls);
        }
        let quotas: Vec<f64> = freqs.iter().map(|f| f * urls as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut left = urls - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        let url_sizes = counts
            .iter()
            .zip(sizes_kb)
            .flat_map(|(&c, &kb)| std::iter::repeat_n(kb * 1000.0, c))
            .collect();
        Ok(PageDistribution { url_sizes })
    }

    pub fn urls(&self) -> usize {
        self.url_sizes.len()
    }

    pub fn size_of(&self, url: usize) -> f64 {
        self.url_sizes[url]
    }

    pub fn mean_bytes(&self) -> f64 {
        self.url_sizes.iter().sum::<f64>() / self.url_sizes.len() as f64
    }
}

/// Piecewise-constant offered load: each `(start, rps)` holds until the next.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RateSchedule {
    steps: Vec<(f64, f64)>,
}

impl RateSchedule {
    pub fn new(steps: Vec<(f64, f64)>) -> Result<Self, WorkloadError> {
        if steps.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(WorkloadError::ScheduleOrder);
        }
        if steps.iter().any(|s| s.1 < 0.0) {
            return Err(WorkloadError::NegativeRate);
        }
        Ok(RateSchedule { steps })
    }

    pub fn constant(rps: f64) -> Self {
        RateSchedule {
            steps: vec![(0.0, rps)],
        }
    }

    /// `start` rps at `t0`, plus `step` every `interval` seconds, capped at `max`.
    pub fn ramp(t0: f64, start: f64, step: f64, interval: f64, max: f64, until: f64) -> Self {
        let mut steps = Vec::new();
        let mut t = t0;
        let mut r = start;
        while t < until {
            steps.push((t, r.min(max)));
            if r >= max {
                break;
            }
            r += step;
            t += interval;
        }
        RateSchedule { steps }
    }

    pub fn steps(&self) -> &[(f64, f64)] {
        &self.steps
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        self.steps
            .iter()
            .rev()
            .find(|s| s.0 <= t)
            .map_or(0.0, |s| s.1)
    }

    /// Start of the first step after `t`.
    pub fn next_change(&self, t: f64) -> Option<f64> {
        self.steps.iter().map(|s| s.0).find(|&s| s > t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub pages: PageDistribution,
    pub schedule: RateSchedule,
    /// Relative inter-arrival jitter, uniform in +/- this fraction.
    pub jitter: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            pages: PageDistribution::default(),
            schedule: RateSchedule::default(),
            jitter: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: u64,
    pub at: f64,
    pub url: usize,
    pub bytes: f64,
    pub key: FlowKey,
}

/// Lazily produces requests in arrival order.
#[derive(Debug, Clone)]
pub struct ArrivalGen {
    spec: WorkloadSpec,
    service: (Ipv4Addr, u16),
    rng: ChaCha8Rng,
    next_at: Option<f64>,
    next_id: u64,
}

impl ArrivalGen {
    pub fn new(spec: WorkloadSpec, service_ip: Ipv4Addr, port: u16, seed: u64) -> Self {
        let mut g = ArrivalGen {
            spec,
            service: (service_ip, port),
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_at: None,
            next_id: 0,
        };
        g.next_at = g.after(0.0, true);
        g
    }

    pub fn peek(&self) -> Option<f64> {
        self.next_at
    }

    pub fn issued(&self) -> u64 {
        self.next_id
    }

    /// Arrival time following one at `t`, skipping idle stretches. A
    /// fresh start (run start or rate change) places the first arrival half
    /// a gap in.
    fn after(&mut self, mut t: f64, mut fresh: bool) -> Option<f64> {
        loop {
            let r = self.spec.schedule.rate_at(t);
            let change = self.spec.schedule.next_change(t);
            if r <= 0.0 {
                t = change?;
                fresh = true;
                continue;
            }
            let j = self.spec.jitter;
            let u: f64 = if j > 0.0 { self.rng.random_range(-j..j) } else { 0.0 };
            let gap = (1.0 + u) / r;
            let next = t + if fresh { gap / 2.0 } else { gap };
            match change {
                Some(c) if c < next => {
                    t = c;
                    fresh = true;
                }
                _ => return Some(next),
            }
        }
    }

    /// The next request, if it arrives at or before `until`.
    pub fn next_before(&mut self, until: f64) -> Option<Request> {
        let at = self.next_at.filter(|&a| a <= until)?;
        let id = self.next_id;
        self.next_id += 1;
        let url = self.rng.random_range(0..self.spec.pages.urls());
        let bytes = self.spec.pages.size_of(url);
        let key = client_key(id, self.service.0, self.service.1);
        self.next_at = self.after(at, false);
        Some(Request {
            id,
            at,
            url,
            bytes,
            key,
        })
    }
}

/// Unique 5-tuple of request `id`.
pub fn client_key(id: u64, service_ip: Ipv4Addr, port: u16) -> FlowKey {
    let src = Ipv4Addr::from(u32::from(CLIENT_BASE).wrapping_add(id as u32));
    FlowKey::tcp(src, 10000 + (id % 50000) as u16, service_ip, port)
}
