//! Three-regime emptying reward used by the training curriculum.
//!
//! - Phase one: a single Gaussian bump at the higher peak, floor at the penalty.
//! - Phase two: Gaussian bumps at both peaks, the higher one taller.
//! - Phase three: 1.0 inside a window around either peak, 0 elsewhere.
//!
//! A no-op always earns 0 and an invalid empty always earns the penalty.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    One,
    Two,
    Three,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::One, Phase::Two, Phase::Three];

    pub fn number(self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
            Phase::Three => 3,
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Shape parameters of the three regimes, as stored in a facility config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardShape {
    pub h: f64,
    pub w: f64,
    pub h1: f64,
    pub h2: f64,
    pub w1: f64,
    pub w2: f64,
    pub window: f64,
}

impl Default for RewardShape {
    fn default() -> Self {
        Self {
            h: 1.0,
            w: 2.0,
            h1: 0.5,
            h2: 1.0,
            w1: 2.0,
            w2: 2.0,
            window: 1.0,
        }
    }
}

/// Fully resolved reward parameters: shape, active phase and penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub phase: Phase,
    pub h: f64,
    pub w: f64,
    pub h1: f64,
    pub h2: f64,
    pub w1: f64,
    pub w2: f64,
    pub window: f64,
    pub penalty: f64,
}

impl RewardParams {
    pub fn new(phase: Phase, shape: RewardShape, penalty: f64) -> Self {
        Self {
            phase,
            h: shape.h,
            w: shape.w,
            h1: shape.h1,
            h2: shape.h2,
            w1: shape.w1,
            w2: shape.w2,
            window: shape.window,
            penalty,
        }
    }

    pub fn with_phase(self, phase: Phase) -> Self {
        Self { phase, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("reward: {m}")));
        if !(self.h > 0.0) {
            return bad("h must be positive");
        }
        if !(self.h1 > 0.0 && self.h2 > self.h1) {
            return bad("need h2 > h1 > 0");
        }
        if !(self.w > 0.0 && self.w1 > 0.0 && self.w2 > 0.0) {
            return bad("widths must be positive");
        }
        if !(self.window > 0.0) {
            return bad("window must be positive");
        }
        if !(self.penalty < 0.0) {
            return bad("penalty must be negative");
        }
        Ok(())
    }
}

fn bump(v: f64, centre: f64, width: f64) -> f64 {
    let d = v - centre;
    (-(d * d) / (2.0 * width * width)).exp()
}

/// Reward for taking `action` when the targeted container holds volume `v`.
///
/// `peaks` is `(peak_low, peak_high)` of the targeted container. `valid` is
/// false when the empty was rejected (PU busy or container too empty).
pub fn compute_reward(
    params: &RewardParams,
    v: f64,
    action: usize,
    valid: bool,
    peaks: (f64, f64),
) -> f64 {
    if action == 0 {
        return 0.0;
    }
    if !valid {
        return params.penalty;
    }
    let (low, high) = peaks;
    let pen = params.penalty;
    match params.phase {
        Phase::One => (params.h - pen) * bump(v, high, params.w) + pen,
        Phase::Two => {
            pen + (params.h1 - pen) * bump(v, low, params.w1)
                + (params.h2 - pen) * bump(v, high, params.w2)
        }
        Phase::Three => {
            if (v - low).abs() <= params.window || (v - high).abs() <= params.window {
                1.0
            } else {
                0.0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(phase: Phase) -> RewardParams {
        RewardParams::new(phase, RewardShape::default(), -1.0)
    }

    const PEAKS: (f64, f64) = (14.0, 27.0);

    #[test]
    fn phase_one_peak_returns_height() {
        for w in [0.3, 1.0, 2.0, 7.5] {
            let p = RewardParams { w, ..params(Phase::One) };
            assert_eq!(compute_reward(&p, 27.0, 1, true, PEAKS), 1.0);
        }
    }

    #[test]
    fn phase_three_window() {
        let p = params(Phase::Three);
        assert_eq!(compute_reward(&p, 14.5, 2, true, PEAKS), 1.0);
        assert_eq!(compute_reward(&p, 15.0, 2, true, PEAKS), 1.0);
        assert_eq!(compute_reward(&p, 26.0, 2, true, PEAKS), 1.0);
        assert_eq!(compute_reward(&p, 15.01, 2, true, PEAKS), 0.0);
        assert_eq!(compute_reward(&p, 20.0, 2, true, PEAKS), 0.0);
        assert_eq!(compute_reward(&p, 28.5, 2, true, PEAKS), 0.0);
    }

    #[test]
    fn noop_and_invalid() {
        for ph in Phase::ALL {
            let p = params(ph);
            assert_eq!(compute_reward(&p, 27.0, 0, true, PEAKS), 0.0);
            assert_eq!(compute_reward(&p, 27.0, 0, false, PEAKS), 0.0);
            assert_eq!(compute_reward(&p, 27.0, 3, false, PEAKS), -1.0);
        }
    }

    #[test]
    fn phase_two_high_peak() {
        let p = RewardParams {
            h1: 0.5,
            h2: 1.0,
            w1: 1.0,
            w2: 1.0,
            ..params(Phase::Two)
        };
        // Oracle: evaluate the two-bump formula directly.
        let expected = 1.0 + (0.5 - (-1.0)) * (-(27.0f64 - 14.0).powi(2) / 2.0).exp();
        let got = compute_reward(&p, 27.0, 1, true, PEAKS);
        assert_eq!(got, expected);
        assert_eq!(got, 1.0);
    }

    #[test]
    fn phase_two_grid_max_near_high_peak() {
        let p = params(Phase::Two);
        let (mut best_v, mut best_r) = (0.0, f64::NEG_INFINITY);
        for k in 0..=40_000 {
            let v = k as f64 * 0.001;
            let r = compute_reward(&p, v, 1, true, PEAKS);
            if r > best_r {
                best_r = r;
                best_v = v;
            }
        }
        assert!((best_v - PEAKS.1).abs() <= p.w2, "argmax at {best_v}");
    }

    #[test]
    fn far_limits() {
        assert!((compute_reward(&params(Phase::One), 1e4, 1, true, PEAKS) + 1.0).abs() < 1e-12);
        assert!((compute_reward(&params(Phase::Two), 1e4, 1, true, PEAKS) + 1.0).abs() < 1e-12);
        assert_eq!(compute_reward(&params(Phase::Three), 1e4, 1, true, PEAKS), 0.0);
    }

    #[test]
    fn validation() {
        assert!(params(Phase::One).validate().is_ok());
        assert!(RewardParams { h1: 1.0, h2: 0.5, ..params(Phase::Two) }.validate().is_err());
        assert!(RewardParams { penalty: 0.0, ..params(Phase::Two) }.validate().is_err());
        assert!(RewardParams { window: 0.0, ..params(Phase::Three) }.validate().is_err());
    }

    proptest! {
        #[test]
        fn phase_one_decreases_with_distance(d1 in 0.0f64..20.0, d2 in 0.0f64..20.0, sign in prop::bool::ANY) {
            prop_assume!((d1 - d2).abs() > 1e-6);
            let p = params(Phase::One);
            let s = if sign { 1.0 } else { -1.0 };
            let r1 = compute_reward(&p, 27.0 + s * d1, 1, true, PEAKS);
            let r2 = compute_reward(&p, 27.0 - s * d2, 1, true, PEAKS);
            if d1 < d2 { prop_assert!(r1 >= r2) } else { prop_assert!(r2 >= r1) }
            prop_assert!(r1 <= 1.0 && r1 >= -1.0);
        }

        #[test]
        fn phase_three_symmetric(d in 0.0f64..=1.0, pick_high in prop::bool::ANY) {
            let p = params(Phase::Three);
            let c = if pick_high { PEAKS.1 } else { PEAKS.0 };
            let a = compute_reward(&p, c + d, 1, true, PEAKS);
            let b = compute_reward(&p, c - d, 1, true, PEAKS);
            prop_assert_eq!(a, b);
            prop_assert_eq!(a, 1.0);
        }

        #[test]
        fn phase_three_values(v in 0.0f64..45.0, valid in prop::bool::ANY) {
            let r = compute_reward(&params(Phase::Three), v, 1, valid, PEAKS);
            prop_assert!(r == 0.0 || r == 1.0 || r == -1.0);
        }
    }
}
