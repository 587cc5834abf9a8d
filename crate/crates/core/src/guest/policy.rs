use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalePolicy {
    pub lo_rps: f64,
    pub hi_rps: f64,
    /// Quiet polls required before a halt is considered.
    pub poll_halt: u32,
    /// Seconds between polls.
    pub poll_period: f64,
}

impl Default for ScalePolicy {
    fn default() -> Self {
        ScalePolicy {
            lo_rps: 100.0,
            hi_rps: 1000.0,
            poll_halt: 10,
            poll_period: 1.0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("thresholds inverted")]
    ThresholdsInverted,
    #[error("negative low threshold")]
    NegativeLow,
    #[error("poll_halt must be at least 1")]
    PollHalt,
    #[error("poll period must be positive")]
    PollPeriod,
}

impl ScalePolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.lo_rps < 0.0 {
            return Err(PolicyError::NegativeLow);
        }
        if self.lo_rps >= self.hi_rps {
            return Err(PolicyError::ThresholdsInverted);
        }
        if self.poll_halt < 1 {
            return Err(PolicyError::PollHalt);
        }
        if self.poll_period.is_nan() || self.poll_period <= 0.0 {
            return Err(PolicyError::PollPeriod);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PollDecision {
    Replicate,
    Halt,
    Wait,
}

/// The threshold poll loop's branch logic. The quiet-poll counter must
/// reach `poll_halt` before the low threshold is consulted.
#[derive(Debug, Clone)]
pub struct Poller {
    pub policy: ScalePolicy,
    n: u32,
}

impl Poller {
    pub fn new(policy: ScalePolicy) -> Self {
        Poller { policy, n: 0 }
    }

    pub fn counter(&self) -> u32 {
        self.n
    }

    pub fn reset(&mut self) {
        self.n = 0;
    }

    pub fn poll(&mut self, rps: f64) -> PollDecision {
        let p = &self.policy;
        if rps >= p.hi_rps {
            self.n = 0;
            PollDecision::Replicate
        } else if self.n < p.poll_halt {
            self.n += 1;
            PollDecision::Wait
        } else if rps <= p.lo_rps {
            PollDecision::Halt
        } else {
            self.n = 0;
            PollDecision::Wait
        }
    }
}
