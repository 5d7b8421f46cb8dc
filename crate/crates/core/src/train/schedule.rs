//! Balance-coefficient and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Mode;

/// Progress of the side-branch weight `lambda(i) = lambda0 * (1 - i / I)`.
///
/// `i` counts completed schedule updates. The trainer advances it before
/// combining outputs, so the first step trains with `lambda(1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub lambda0: f64,
    pub i: u64,
    /// Total iterations `I = epochs * batches_per_epoch`.
    pub total: u64,
}

impl ScheduleState {
    pub fn new(lambda0: f64, total: u64) -> Self {
        ScheduleState {
            lambda0,
            i: 0,
            total,
        }
    }

    /// Advances `i` by one and returns the coefficient for the new `i`.
    pub fn advance(&mut self, mode: Mode) -> Result<f64> {
        if self.i >= self.total {
            return Err(Error::State(format!(
                "schedule already at its final iteration {}",
                self.total
            )));
        }
        self.i += 1;
        lambda_at(self, mode)
    }
}

/// Side-branch weight for the current state and mode.
pub fn lambda_at(s: &ScheduleState, mode: Mode) -> Result<f64> {
    if s.total == 0 {
        return Err(Error::Config("total iteration count I must be positive".into()));
    }
    if s.i > s.total {
        return Err(Error::State(format!("iteration {} beyond I = {}", s.i, s.total)));
    }
    Ok(match mode {
        Mode::Vanilla => 0.0,
        Mode::Shortcut => s.lambda0,
        Mode::UniformSum => 1.0,
        Mode::Evolutionary => s.lambda0 * ((s.total - s.i) as f64 / s.total as f64),
    })
}

/// Cosine decay from `lr0` at `i = 0` to zero at `i = total`.
pub fn cosine_lr(i: u64, total: u64, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = i.min(total) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_endpoints_and_midpoint() {
        let mut s = ScheduleState::new(0.25, 10);
        assert_eq!(lambda_at(&s, Mode::Evolutionary).unwrap(), 0.25);
        s.i = 5;
        assert_eq!(lambda_at(&s, Mode::Evolutionary).unwrap(), 0.125);
        s.i = 10;
        assert_eq!(lambda_at(&s, Mode::Evolutionary).unwrap(), 0.0);
        assert_eq!(lambda_at(&s, Mode::Shortcut).unwrap(), 0.25);
        assert_eq!(lambda_at(&s, Mode::Vanilla).unwrap(), 0.0);
        assert!(lambda_at(&ScheduleState::new(0.25, 0), Mode::Evolutionary).is_err());
    }

    #[test]
    fn advance_stops_at_total() {
        let mut s = ScheduleState::new(0.25, 2);
        assert_eq!(s.advance(Mode::Evolutionary).unwrap(), 0.125);
        assert_eq!(s.advance(Mode::Evolutionary).unwrap(), 0.0);
        assert!(s.advance(Mode::Evolutionary).is_err());
    }

    #[test]
    fn cosine_reference_points() {
        assert_eq!(cosine_lr(0, 8, 0.01), 0.01);
        assert_eq!(cosine_lr(8, 8, 0.01), 0.0);
        assert!((cosine_lr(4, 8, 0.01) - 0.005).abs() < 1e-17);
        assert!((cosine_lr(2, 8, 0.01) - 0.008_535_533_905_932_737).abs() < 1e-15);
    }
}
