use std::collections::VecDeque;

/// Completed requests per second over a trailing window.
#[derive(Debug, Clone)]
pub struct RpsMeter {
    window: f64,
    stamps: VecDeque<f64>,
}

impl Default for RpsMeter {
    fn default() -> Self {
        RpsMeter::new(1.0)
    }
}

impl RpsMeter {
    pub fn new(window: f64) -> Self {
        RpsMeter {
            window,
            stamps: VecDeque::new(),
        }
    }

    pub fn window(&self) -> f64 {
        self.window
    }

    /// Records a completion. Times must be non-decreasing.
    pub fn record(&mut self, at: f64) {
        debug_assert!(self.stamps.back().is_none_or(|&b| b <= at));
        self.stamps.push_back(at);
    }

    /// Completions in (now - window, now] divided by the window length.
    pub fn rate(&mut self, now: f64) -> f64 {
        let start = now - self.window;
        while self.stamps.front().is_some_and(|&t| t <= start) {
            self.stamps.pop_front();
        }
        let n = self.stamps.iter().take_while(|&&t| t <= now).count();
        n as f64 / self.window
    }

    pub fn clear(&mut self) {
        self.stamps.clear();
    }
}
