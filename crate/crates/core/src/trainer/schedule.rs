//! Learning-rate schedule: cosine decay from an initial rate.

use serde::{Deserialize, Serialize};

use super::TrainError;

/// Cosine decay over `decay_horizon` steps. A horizon of zero means a
/// constant rate; when the field is omitted the run length is used.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_horizon: Option<u64>,
}

impl LrSchedule {
    pub fn resolve(&self, steps: u64) -> Result<ResolvedSchedule, TrainError> {
        if !(self.initial.is_finite() && self.initial > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "lr.initial must be positive, got {}",
                self.initial
            )));
        }
        let horizon = self.decay_horizon.unwrap_or(steps);
        if horizon > 0 && steps > horizon {
            return Err(TrainError::InvalidConfig(format!(
                "steps ({steps}) exceed lr.decay_horizon ({horizon}); the rate would hit zero"
            )));
        }
        Ok(ResolvedSchedule {
            initial: self.initial,
            horizon,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolvedSchedule {
    initial: f64,
    horizon: u64,
}

impl ResolvedSchedule {
    pub fn eta(&self, step: u64) -> f64 {
        if self.horizon == 0 {
            return self.initial;
        }
        let progress = step as f64 / self.horizon as f64;
        self.initial * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_decay_endpoints() {
        let s = LrSchedule {
            initial: 0.1,
            decay_horizon: Some(100),
        }
        .resolve(100)
        .unwrap();
        assert_eq!(s.eta(0), 0.1);
        assert!((s.eta(50) - 0.05).abs() < 1e-15);
        assert!(s.eta(99) > 0.0);
        assert!(s.eta(99) < 0.001);
    }

    #[test]
    fn constant_when_horizon_zero() {
        let s = LrSchedule {
            initial: 0.2,
            decay_horizon: Some(0),
        }
        .resolve(1000)
        .unwrap();
        assert_eq!(s.eta(0), 0.2);
        assert_eq!(s.eta(999), 0.2);
    }

    #[test]
    fn horizon_defaults_to_run_length() {
        let s = LrSchedule {
            initial: 1.0,
            decay_horizon: None,
        }
        .resolve(10)
        .unwrap();
        assert!(s.eta(9) > 0.0);
    }

    #[test]
    fn rejects_overlong_runs_and_bad_rates() {
        assert!(LrSchedule {
            initial: 0.1,
            decay_horizon: Some(10)
        }
        .resolve(11)
        .is_err());
        assert!(LrSchedule {
            initial: 0.0,
            decay_horizon: None
        }
        .resolve(10)
        .is_err());
        assert!(LrSchedule {
            initial: f64::NAN,
            decay_horizon: None
        }
        .resolve(10)
        .is_err());
    }
}
