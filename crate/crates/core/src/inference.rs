//! Inference-time override of policy no-ops using pairwise collision risk.
//!
//! When the policy proposes the no-op, every container pair is scored by the
//! collision classifier. Containers within `delta` of their higher peak are
//! candidates; the candidate with the largest row-maximum risk is emptied if
//! that risk reaches `theta` (and, by default, the PU is free). Non-zero
//! proposals pass through untouched.

use serde::{Deserialize, Serialize};

use crate::collision_data::pair_features;
use crate::collision_model::BoostedEnsemble;
use crate::env::{FacilityConfig, FacilityState};
use crate::eval::{Controller, Decision, DecisionContext};
use crate::ppo::{act, PolicyParams};
use crate::rng::SimRng;
use crate::{Error, Result};

/// Anything that maps a pair feature vector to a collision probability.
pub trait CollisionClassifier {
    fn predict_proba(&self, features: &[f64]) -> Result<f64>;
}

impl CollisionClassifier for BoostedEnsemble {
    fn predict_proba(&self, features: &[f64]) -> Result<f64> {
        BoostedEnsemble::predict_proba(self, features)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverrideConfig {
    pub theta: f64,
    /// Candidate margin below the higher peak, in volume units.
    pub delta: f64,
    pub require_pu_free: bool,
}

impl Default for OverrideConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            delta: 3.0,
            require_pu_free: true,
        }
    }
}

impl OverrideConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("theta {} outside [0, 1]", self.theta)));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::Config(format!("delta {} must be nonnegative", self.delta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskAssessment {
    /// Symmetric; the diagonal is zero and unused.
    pub pairwise: Vec<Vec<f64>>,
    pub candidates: Vec<usize>,
    /// Risk score of each candidate, same order as `candidates`.
    pub scores: Vec<f64>,
    pub chosen: Option<usize>,
}

/// Classifier probabilities for every unordered pair, mirrored. Uses the
/// configured fill mean and noise, the higher peak and the previous volumes.
pub fn pairwise_risk<C: CollisionClassifier + ?Sized>(
    state: &FacilityState,
    prev_volumes: &[f64],
    config: &FacilityConfig,
    model: &C,
) -> Result<Vec<Vec<f64>>> {
    let n = config.n();
    if state.volumes.len() != n || prev_volumes.len() != n {
        return Err(Error::Dimension {
            what: "volumes",
            expected: n,
            got: if state.volumes.len() != n { state.volumes.len() } else { prev_volumes.len() },
        });
    }
    let c = &config.containers;
    let v = &state.volumes;
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let f = pair_features(
                v[i],
                v[j],
                c[i].peak_high,
                c[j].peak_high,
                c[i].alpha,
                c[i].sigma,
                c[j].alpha,
                c[j].sigma,
                prev_volumes[i],
                prev_volumes[j],
            );
            let p = model.predict_proba(&f)?;
            m[i][j] = p;
            m[j][i] = p;
        }
    }
    Ok(m)
}

/// Largest risk container `i` shares with any other container.
pub fn risk_score(i: usize, matrix: &[Vec<f64>]) -> f64 {
    matrix[i]
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &p)| p)
        .fold(0.0, f64::max)
}

/// Full assessment of the current state; `chosen` is set only when the
/// override would fire.
pub fn assess<C: CollisionClassifier + ?Sized>(
    state: &FacilityState,
    prev_volumes: &[f64],
    config: &FacilityConfig,
    model: &C,
    oc: &OverrideConfig,
) -> Result<RiskAssessment> {
    let pairwise = pairwise_risk(state, prev_volumes, config, model)?;
    let candidates: Vec<usize> = (0..config.n())
        .filter(|&i| state.volumes[i] >= config.containers[i].peak_high - oc.delta)
        .collect();
    let scores: Vec<f64> = candidates.iter().map(|&i| risk_score(i, &pairwise)).collect();
    let mut best: Option<(usize, f64)> = None;
    for (&i, &s) in candidates.iter().zip(&scores) {
        // strict comparison keeps the lowest index on ties
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    let pu_ok = !oc.require_pu_free || state.pu_counter == 0;
    let chosen = best.filter(|&(_, s)| s >= oc.theta && pu_ok).map(|(i, _)| i);
    Ok(RiskAssessment {
        pairwise,
        candidates,
        scores,
        chosen,
    })
}

/// Applies the override rule to a proposed action. Actions are 0 for the
/// no-op and `i + 1` for emptying container `i`.
pub fn decide<C: CollisionClassifier + ?Sized>(
    ctx: &DecisionContext<'_>,
    proposed: usize,
    model: &C,
    oc: &OverrideConfig,
) -> Result<Decision> {
    if proposed != 0 {
        return Ok(proposed.into());
    }
    let a = assess(ctx.state, ctx.prev_volumes, ctx.config, model, oc)?;
    Ok(match a.chosen {
        Some(i) => Decision {
            action: i + 1,
            overridden: true,
        },
        None => 0.into(),
    })
}

/// Policy sample followed by the override rule.
pub struct OverridePolicy<'a> {
    pub policy: &'a PolicyParams,
    pub ensemble: &'a BoostedEnsemble,
    pub config: OverrideConfig,
}

impl Controller for OverridePolicy<'_> {
    fn decide(&self, ctx: &DecisionContext<'_>, rng: &mut SimRng) -> Result<Decision> {
        let obs = crate::env::observation(ctx.state, ctx.config);
        let (a, _) = act(self.policy, &obs, rng)?;
        decide(ctx, a, self.ensemble, &self.config)
    }
}
