//! Discrete-time simulator of `n` containers sharing one processing unit.
//!
//! Each timestep every container fills by a random walk with drift,
//! `v' = max(0, v + alpha + eps)` with `eps ~ N(0, sigma^2)`. Action `0` is a
//! no-op, action `i` requests emptying container `i` (1-based). An empty is
//! accepted only when the PU is free and the container holds at least
//! [`FacilityConfig::min_empty_volume`]; the PU is then busy for
//! `ceil(busy_slope * v + busy_offset)` timesteps. Any volume above
//! `overflow_limit` ends the episode with the overflow penalty.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::reward::{compute_reward, Phase, RewardParams, RewardShape};
use crate::rng::{seeded, SimRng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerSpec {
    /// 1-based container index, equal to the action that empties it.
    pub id: usize,
    pub alpha: f64,
    pub sigma: f64,
    pub peak_low: f64,
    pub peak_high: f64,
    pub busy_slope: f64,
    pub busy_offset: f64,
}

impl ContainerSpec {
    pub fn peaks(&self) -> (f64, f64) {
        (self.peak_low, self.peak_high)
    }

    fn validate(&self, overflow_limit: f64) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("container {}: {m}", self.id)));
        if !(0.0 < self.peak_low && self.peak_low < self.peak_high && self.peak_high < overflow_limit)
        {
            return bad(format!(
                "need 0 < peak_low ({}) < peak_high ({}) < overflow_limit ({overflow_limit})",
                self.peak_low, self.peak_high
            ));
        }
        if !(self.alpha > 0.0) || !(self.sigma >= 0.0) {
            return bad("need alpha > 0 and sigma >= 0".into());
        }
        if !(self.busy_slope > 0.0) || !(self.busy_offset >= 0.0) {
            return bad("need busy_slope > 0 and busy_offset >= 0".into());
        }
        Ok(())
    }
}

fn default_overflow_limit() -> f64 {
    40.0
}
fn default_episode_length() -> usize {
    600
}
fn default_step_seconds() -> u32 {
    60
}
fn default_penalty() -> f64 {
    -1.0
}
fn default_overflow_penalty() -> f64 {
    -10.0
}
fn default_min_empty_volume() -> f64 {
    1.0
}
fn default_proximity_margin() -> f64 {
    3.0
}

/// Immutable description of a facility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacilityConfig {
    #[serde(default = "default_overflow_limit")]
    pub overflow_limit: f64,
    #[serde(default = "default_episode_length")]
    pub episode_length: usize,
    #[serde(default = "default_step_seconds")]
    pub step_seconds: u32,
    /// Reward for an invalid empty.
    #[serde(default = "default_penalty")]
    pub penalty: f64,
    /// Reward replacing the step reward when a container overflows.
    #[serde(default = "default_overflow_penalty")]
    pub overflow_penalty: f64,
    /// Empties below this volume count as invalid.
    #[serde(default = "default_min_empty_volume")]
    pub min_empty_volume: f64,
    /// How close to `peak_high` a container must be to count towards a
    /// collision state.
    #[serde(default = "default_proximity_margin")]
    pub proximity_margin: f64,
    #[serde(default)]
    pub reward: RewardShape,
    pub containers: Vec<ContainerSpec>,
}

/// Fill-rate span of the default facilities. With the default busy time a
/// high-peak empty moves about 1.6 volume units per PU step; this range puts
/// the total inflow of 12 containers at roughly that capacity and 7 containers
/// near half of it.
pub const DEFAULT_ALPHA_RANGE: (f64, f64) = (0.03, 0.3);

impl FacilityConfig {
    /// Default `n`-container facility ("7b1p" for `n = 7`).
    ///
    /// Fill rates are geometrically spaced over [`DEFAULT_ALPHA_RANGE`],
    /// `sigma` is a tenth of the rate, peaks are drawn from `[12, 16]` and
    /// `[24, 30]` with a layout seed equal to `n`.
    pub fn default_for(n: usize) -> Self {
        Self::generate(n, n as u64)
    }

    pub fn generate(n: usize, layout_seed: u64) -> Self {
        assert!(n >= 1, "facility needs at least one container");
        let mut rng = seeded(layout_seed);
        let (lo, hi) = DEFAULT_ALPHA_RANGE;
        let containers = (0..n)
            .map(|k| {
                let frac = if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 };
                let alpha = lo * (hi / lo).powf(frac);
                let peak_high = rng.random_range(24.0..30.0);
                let peak_low = rng.random_range(12.0..16.0);
                ContainerSpec {
                    id: k + 1,
                    alpha,
                    sigma: 0.1 * alpha,
                    peak_low,
                    peak_high,
                    busy_slope: 0.5,
                    busy_offset: 3.0,
                }
            })
            .collect();
        Self {
            overflow_limit: default_overflow_limit(),
            episode_length: default_episode_length(),
            step_seconds: default_step_seconds(),
            penalty: default_penalty(),
            overflow_penalty: default_overflow_penalty(),
            min_empty_volume: default_min_empty_volume(),
            proximity_margin: default_proximity_margin(),
            reward: RewardShape::default(),
            containers,
        }
    }

    pub fn n(&self) -> usize {
        self.containers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.containers.is_empty() {
            return Err(Error::Config("facility has no containers".into()));
        }
        if self.episode_length == 0 {
            return Err(Error::Config("episode_length must be positive".into()));
        }
        if !(self.penalty < 0.0) || !(self.overflow_penalty < 0.0) {
            return Err(Error::Config("penalties must be negative".into()));
        }
        if !(self.min_empty_volume >= 0.0) || !(self.proximity_margin >= 0.0) {
            return Err(Error::Config(
                "min_empty_volume and proximity_margin must be nonnegative".into(),
            ));
        }
        for (k, c) in self.containers.iter().enumerate() {
            if c.id != k + 1 {
                return Err(Error::Config(format!(
                    "container ids must be 1..n in order, found {} at position {}",
                    c.id,
                    k + 1
                )));
            }
            c.validate(self.overflow_limit)?;
        }
        self.reward_params(Phase::One).validate()
    }

    pub fn reward_params(&self, phase: Phase) -> RewardParams {
        RewardParams::new(phase, self.reward, self.penalty)
    }

    /// Longest possible PU job, used to normalise the busy counter.
    pub fn max_busy_time(&self) -> u32 {
        self.containers
            .iter()
            .map(|c| busy_time_unchecked(c, self.overflow_limit))
            .max()
            .unwrap_or(1)
    }

    pub fn observation_len(&self) -> usize {
        3 * self.n() + 1
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacilityState {
    pub volumes: Vec<f64>,
    /// Timesteps until the PU is free.
    pub pu_counter: u32,
    /// 1-based id of the container being processed, if any.
    pub pu_job: Option<usize>,
    pub t: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub invalid_action: bool,
    pub emptied_container: Option<usize>,
    pub emptied_volume: Option<f64>,
    pub overflowed_container: Option<usize>,
    /// Collision indicator of the next state.
    pub collision_now: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: FacilityState,
    pub reward: f64,
    pub terminated: bool,
    pub info: StepInfo,
}

/// Initial state. Without `init_volumes`, each container starts uniformly in
/// `[0, peak_low)`.
pub fn reset(config: &FacilityConfig, seed: u64, init_volumes: Option<&[f64]>) -> Result<FacilityState> {
    let volumes = match init_volumes {
        Some(v) => {
            if v.len() != config.n() {
                return Err(Error::Dimension {
                    what: "init_volumes",
                    expected: config.n(),
                    got: v.len(),
                });
            }
            if let Some(x) = v.iter().find(|&&x| !(0.0..config.overflow_limit).contains(&x)) {
                return Err(Error::Config(format!(
                    "initial volume {x} outside [0, {})",
                    config.overflow_limit
                )));
            }
            v.to_vec()
        }
        None => {
            let mut rng = seeded(seed);
            config
                .containers
                .iter()
                .map(|c| rng.random_range(0.0..c.peak_low))
                .collect()
        }
    };
    Ok(FacilityState {
        volumes,
        pu_counter: 0,
        pu_job: None,
        t: 0,
    })
}

/// One step of the fill random walk, clipped at zero.
pub fn fill_step(v: f64, alpha: f64, sigma: f64, rng: &mut SimRng) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (v + alpha + sigma * z).max(0.0)
}

fn busy_time_unchecked(spec: &ContainerSpec, v: f64) -> u32 {
    ((spec.busy_slope * v + spec.busy_offset).ceil() as u32).max(1)
}

/// PU busy time for emptying `v` units from the container.
pub fn busy_time(spec: &ContainerSpec, v: f64) -> Result<u32> {
    if !(v > 0.0) {
        return Err(Error::NonPositiveVolume(v));
    }
    Ok(busy_time_unchecked(spec, v))
}

/// True when the PU is busy and at least two containers are within
/// `proximity_margin` of (or above) their higher peak.
pub fn is_collision_state(state: &FacilityState, config: &FacilityConfig, proximity_margin: f64) -> bool {
    state.pu_counter > 0
        && state
            .volumes
            .iter()
            .zip(&config.containers)
            .filter(|(v, c)| **v >= c.peak_high - proximity_margin)
            .count()
            >= 2
}

/// Policy input: normalised volumes, normalised PU counter, then
/// `(peak_low, peak_high)` per container. Length `3n + 1`.
pub fn observation(state: &FacilityState, config: &FacilityConfig) -> Vec<f64> {
    let mut obs = Vec::with_capacity(config.observation_len());
    observation_into(state, config, &mut obs);
    obs
}

pub fn observation_into(state: &FacilityState, config: &FacilityConfig, obs: &mut Vec<f64>) {
    let lim = config.overflow_limit;
    obs.clear();
    obs.extend(state.volumes.iter().map(|v| v / lim));
    obs.push(state.pu_counter as f64 / config.max_busy_time() as f64);
    for c in &config.containers {
        obs.push(c.peak_low / lim);
        obs.push(c.peak_high / lim);
    }
}

/// Advances the facility by one timestep.
///
/// Order: resolve the action (invalid empties cost `reward.penalty`, valid
/// ones are scored by [`compute_reward`] and start a PU job of
/// [`busy_time`]), fill every container, count the PU down by one, then
/// check overflow. The returned `pu_counter` after a fresh empty is thus
/// `busy_time - 1`: the PU is occupied for exactly `busy_time` steps
/// including the one in which the job started.
pub fn step(
    state: &FacilityState,
    action: usize,
    config: &FacilityConfig,
    reward: &RewardParams,
    rng: &mut SimRng,
) -> Result<StepOutcome> {
    let n = config.n();
    if action > n {
        return Err(Error::ActionOutOfRange { action, max: n });
    }
    if state.t >= config.episode_length {
        return Err(Error::EpisodeOver(state.t));
    }
    if state.volumes.len() != n {
        return Err(Error::Dimension {
            what: "state volumes",
            expected: n,
            got: state.volumes.len(),
        });
    }

    let mut next = state.clone();
    let mut info = StepInfo::default();
    let mut r = 0.0;

    if action != 0 {
        let idx = action - 1;
        let spec = &config.containers[idx];
        let v = state.volumes[idx];
        let valid = state.pu_counter == 0 && v >= config.min_empty_volume && v > 0.0;
        r = compute_reward(reward, v, action, valid, spec.peaks());
        if valid {
            info.emptied_container = Some(action);
            info.emptied_volume = Some(v);
            next.volumes[idx] = 0.0;
            next.pu_counter = busy_time_unchecked(spec, v);
            next.pu_job = Some(action);
        } else {
            info.invalid_action = true;
        }
    }

    for (v, c) in next.volumes.iter_mut().zip(&config.containers) {
        *v = fill_step(*v, c.alpha, c.sigma, rng);
    }
    if next.pu_counter > 0 {
        next.pu_counter -= 1;
    }
    if next.pu_counter == 0 {
        next.pu_job = None;
    }
    next.t += 1;

    let overflow = next
        .volumes
        .iter()
        .position(|&v| v > config.overflow_limit)
        .map(|k| k + 1);
    if overflow.is_some() {
        r = config.overflow_penalty;
    }
    info.overflowed_container = overflow;
    info.collision_now = is_collision_state(&next, config, config.proximity_margin);
    let terminated = overflow.is_some() || next.t >= config.episode_length;

    Ok(StepOutcome {
        next_state: next,
        reward: r,
        terminated,
        info,
    })
}

/// Per-timestep record of a trajectory dump (one JSON line each).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub t: usize,
    /// Volumes observed at `t`, before the action.
    pub volumes: Vec<f64>,
    pub pu_counter: u32,
    pub action: usize,
    pub reward: f64,
    pub flags: RecordFlags,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordFlags {
    pub invalid: bool,
    pub emptied: Option<usize>,
    pub emptied_volume: Option<f64>,
    pub overflow: Option<usize>,
    /// Collision indicator of the state at `t`.
    pub collision: bool,
    /// The action replaced a policy no-op.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub overridden: bool,
}

pub fn write_trajectory_jsonl<W: std::io::Write>(records: &[TrajectoryRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads records back, skipping blank lines and `{"format": ...}` header
/// lines.
pub fn read_trajectory_jsonl<R: std::io::BufRead>(r: R) -> Result<Vec<TrajectoryRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with("{\"format\"") {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Owned simulator: config, current state, previous volumes (lag context)
/// and the episode's generator.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub config: FacilityConfig,
    pub reward: RewardParams,
    pub state: FacilityState,
    pub prev_volumes: Vec<f64>,
    rng: SimRng,
}

impl Simulator {
    pub fn new(config: FacilityConfig, reward: RewardParams, seed: u64) -> Result<Self> {
        config.validate()?;
        let state = reset(&config, seed, None)?;
        // Separate stream for dynamics so the initial draw does not shift it.
        let rng = seeded(crate::rng::derive_seed(seed, 1));
        Ok(Self {
            prev_volumes: state.volumes.clone(),
            config,
            reward,
            state,
            rng,
        })
    }

    pub fn with_state(config: FacilityConfig, reward: RewardParams, state: FacilityState, seed: u64) -> Result<Self> {
        config.validate()?;
        if state.volumes.len() != config.n() {
            return Err(Error::Dimension {
                what: "state volumes",
                expected: config.n(),
                got: state.volumes.len(),
            });
        }
        Ok(Self {
            prev_volumes: state.volumes.clone(),
            config,
            reward,
            state,
            rng: seeded(crate::rng::derive_seed(seed, 1)),
        })
    }

    /// Starts a new episode with a fresh seeded initial state and generator.
    pub fn restart(&mut self, seed: u64) -> Result<()> {
        self.state = reset(&self.config, seed, None)?;
        self.prev_volumes = self.state.volumes.clone();
        self.rng = seeded(crate::rng::derive_seed(seed, 1));
        Ok(())
    }

    pub fn observation(&self) -> Vec<f64> {
        observation(&self.state, &self.config)
    }

    pub fn is_collision(&self) -> bool {
        is_collision_state(&self.state, &self.config, self.config.proximity_margin)
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome> {
        let out = step(&self.state, action, &self.config, &self.reward, &mut self.rng)?;
        self.prev_volumes = std::mem::replace(&mut self.state, out.next_state.clone()).volumes;
        Ok(out)
    }
}
