use std::fmt::Write as _;

pub const CSV_HEADER: &str = "time_s,service,replica_id,host_id,rps,utilization,mean_latency_ms,p99_latency_ms,replica_count,delivery_failures";

/// One instance's figures over one metrics window.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub time: f64,
    pub service: String,
    pub replica_id: String,
    pub host: u32,
    pub rps: f64,
    pub utilization: f64,
    pub mean_latency_ms: f64,
    pub p99_latency_ms: f64,
    pub replica_count: usize,
    pub delivery_failures: u64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{:.3},{},{},{},{:.1},{:.4},{:.3},{:.3},{},{}",
            self.time,
            self.service,
            self.replica_id,
            self.host,
            self.rps,
            self.utilization,
            self.mean_latency_ms,
            self.p99_latency_ms,
            self.replica_count,
            self.delivery_failures
        )
    }
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv());
    }
    out
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Nearest-rank percentile, `p` in (0, 100]. Zero for an empty sample.
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Accumulates completions of one instance between metrics ticks.
#[derive(Debug, Clone, Default)]
pub struct Window {
    pub completions: u64,
    pub latencies_ms: Vec<f64>,
    pub busy_at_start: f64,
}

impl Window {
    pub fn record(&mut self, latency_ms: f64) {
        self.completions += 1;
        self.latencies_ms.push(latency_ms);
    }

    pub fn reset(&mut self, busy: f64) {
        self.completions = 0;
        self.latencies_ms.clear();
        self.busy_at_start = busy;
    }
}
