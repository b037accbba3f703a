//! Seeded evaluation episodes, per-episode metrics and aggregate reports.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision_model::BoostedEnsemble;
use crate::env::{FacilityConfig, FacilityState, RecordFlags, Simulator, TrajectoryRecord};
use crate::inference::{OverrideConfig, OverridePolicy};
use crate::ppo::PolicyParams;
use crate::reward::{Phase, RewardParams};
use crate::rng::{derive_seed, seeded, SimRng};
use crate::{Error, Result};

/// Empties above `peak_high + SAFETY_MARGIN` count as safety violations.
pub const SAFETY_MARGIN: f64 = 5.0;

/// What a controller sees when choosing an action.
#[derive(Debug, Clone, Copy)]
pub struct DecisionContext<'a> {
    pub state: &'a FacilityState,
    /// Volumes one step earlier (equal to the current ones at `t = 0`).
    pub prev_volumes: &'a [f64],
    pub config: &'a FacilityConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub action: usize,
    /// The action replaced a policy no-op.
    pub overridden: bool,
}

impl From<usize> for Decision {
    fn from(action: usize) -> Self {
        Self { action, overridden: false }
    }
}

pub trait Controller: Sync {
    fn decide(&self, ctx: &DecisionContext<'_>, rng: &mut SimRng) -> Result<Decision>;
}

pub struct NoopController;

impl Controller for NoopController {
    fn decide(&self, _: &DecisionContext<'_>, _: &mut SimRng) -> Result<Decision> {
        Ok(0.into())
    }
}

/// Uniform over `0..=n`.
pub struct RandomController;

impl Controller for RandomController {
    fn decide(&self, ctx: &DecisionContext<'_>, rng: &mut SimRng) -> Result<Decision> {
        Ok(rng.random_range(0..=ctx.config.n()).into())
    }
}

/// Empties the fullest container that has reached its higher peak, when the
/// PU is free.
pub struct ScriptedController;

impl Controller for ScriptedController {
    fn decide(&self, ctx: &DecisionContext<'_>, _: &mut SimRng) -> Result<Decision> {
        if ctx.state.pu_counter > 0 {
            return Ok(0.into());
        }
        let mut best: Option<(usize, f64)> = None;
        for (k, (v, c)) in ctx.state.volumes.iter().zip(&ctx.config.containers).enumerate() {
            let excess = v - c.peak_high;
            if excess >= 0.0 && best.is_none_or(|(_, e)| excess > e) {
                best = Some((k + 1, excess));
            }
        }
        Ok(best.map_or(0, |(a, _)| a).into())
    }
}

impl Controller for PolicyParams {
    fn decide(&self, ctx: &DecisionContext<'_>, rng: &mut SimRng) -> Result<Decision> {
        let obs = crate::env::observation(ctx.state, ctx.config);
        Ok(crate::ppo::act(self, &obs, rng)?.0.into())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Steps in which the PU was free and no job started.
    pub press_idle_time: usize,
    pub total_volume_processed: f64,
    pub collision_timesteps: usize,
    /// Mean over containers and timesteps of |v - nearest peak|, as % of the
    /// overflow limit.
    pub total_volume_deviation: f64,
    pub actions_per_container_mean: f64,
    pub actions_per_container_std: f64,
    pub reward_per_action: f64,
    /// Empties nearer the higher peak over empties nearer the lower one
    /// (ratio of percentages); with no lower-peak empties the denominator is
    /// taken as one empty.
    pub higher_lower_peak_ratio: f64,
    pub safety_violations_pct: f64,
    pub terminated_early: bool,
    pub steps: usize,
    pub empties: usize,
    pub high_empties: usize,
    pub low_empties: usize,
    pub overrides: usize,
    pub total_reward: f64,
}

impl EpisodeMetrics {
    pub const CSV_HEADER: &'static str = "press_idle_time,total_volume_processed,collision_timesteps,total_volume_deviation,actions_per_container_mean,actions_per_container_std,reward_per_action,higher_lower_peak_ratio,safety_violations_pct,terminated_early,steps,empties,high_empties,low_empties,overrides,total_reward";

    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.press_idle_time,
            self.total_volume_processed,
            self.collision_timesteps,
            self.total_volume_deviation,
            self.actions_per_container_mean,
            self.actions_per_container_std,
            self.reward_per_action,
            self.higher_lower_peak_ratio,
            self.safety_violations_pct,
            self.terminated_early,
            self.steps,
            self.empties,
            self.high_empties,
            self.low_empties,
            self.overrides,
            self.total_reward
        )
    }

    /// Numeric metrics in report order, for aggregation.
    pub fn numeric(&self) -> [(&'static str, f64); 9] {
        [
            ("press_idle_time", self.press_idle_time as f64),
            ("total_volume_processed", self.total_volume_processed),
            ("collision_timesteps", self.collision_timesteps as f64),
            ("total_volume_deviation", self.total_volume_deviation),
            ("actions_per_container", self.actions_per_container_mean),
            ("reward_per_action", self.reward_per_action),
            ("higher_lower_peak_ratio", self.higher_lower_peak_ratio),
            ("safety_violations_pct", self.safety_violations_pct),
            ("terminated_early", if self.terminated_early { 1.0 } else { 0.0 }),
        ]
    }
}

/// Population mean and standard deviation (divisor `n`).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Coefficient of variation `100 * std / mean` with the population standard
/// deviation. A constant series gives 0; a non-constant series with zero
/// mean (or an empty one) is undefined.
pub fn cv_pct(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let (mean, std) = mean_std(xs);
    if std == 0.0 {
        return Some(0.0);
    }
    if mean == 0.0 {
        return None;
    }
    Some(100.0 * std / mean.abs())
}

#[derive(Debug, Clone)]
pub struct EpisodeRun {
    pub metrics: EpisodeMetrics,
    pub trajectory: Vec<TrajectoryRecord>,
}

/// One evaluation episode with the final (step) reward.
pub fn run_episode(facility: &FacilityConfig, controller: &dyn Controller, seed: u64) -> Result<EpisodeMetrics> {
    Ok(run_episode_with(facility, &facility.reward_params(Phase::Three), controller, seed, false)?.metrics)
}

pub fn run_episode_with(
    facility: &FacilityConfig,
    reward: &RewardParams,
    controller: &dyn Controller,
    seed: u64,
    record: bool,
) -> Result<EpisodeRun> {
    let mut sim = Simulator::new(facility.clone(), *reward, seed)?;
    let mut rng = seeded(derive_seed(seed, 2));
    let n = facility.n();
    let lim = facility.overflow_limit;
    let mut m = EpisodeMetrics::default();
    let mut per_container = vec![0usize; n];
    let mut dev_sum = 0.0;
    let mut non_noop = 0usize;
    let mut violations = 0usize;
    let mut traj = Vec::new();

    loop {
        let state = sim.state.clone();
        let collision = sim.is_collision();
        if collision {
            m.collision_timesteps += 1;
        }
        dev_sum += state
            .volumes
            .iter()
            .zip(&facility.containers)
            .map(|(v, c)| (v - c.peak_low).abs().min((v - c.peak_high).abs()))
            .sum::<f64>();

        let ctx = DecisionContext {
            state: &state,
            prev_volumes: &sim.prev_volumes,
            config: facility,
        };
        let decision = controller.decide(&ctx, &mut rng)?;
        let out = sim.step(decision.action)?;
        m.steps += 1;
        m.total_reward += out.reward;
        if decision.action != 0 {
            non_noop += 1;
        }
        if decision.overridden {
            m.overrides += 1;
        }
        match (out.info.emptied_container, out.info.emptied_volume) {
            (Some(id), Some(v)) => {
                let c = &facility.containers[id - 1];
                m.total_volume_processed += v;
                m.empties += 1;
                per_container[id - 1] += 1;
                if (v - c.peak_high).abs() <= (v - c.peak_low).abs() {
                    m.high_empties += 1;
                } else {
                    m.low_empties += 1;
                }
                if v > c.peak_high + SAFETY_MARGIN {
                    violations += 1;
                }
            }
            _ => {
                if state.pu_counter == 0 {
                    m.press_idle_time += 1;
                }
            }
        }
        if record {
            traj.push(TrajectoryRecord {
                t: state.t,
                volumes: state.volumes.clone(),
                pu_counter: state.pu_counter,
                action: decision.action,
                reward: out.reward,
                flags: RecordFlags {
                    invalid: out.info.invalid_action,
                    emptied: out.info.emptied_container,
                    emptied_volume: out.info.emptied_volume,
                    overflow: out.info.overflowed_container,
                    collision,
                    overridden: decision.overridden,
                },
            });
        }
        if out.terminated {
            m.terminated_early = out.info.overflowed_container.is_some();
            break;
        }
    }

    m.total_volume_deviation = 100.0 * dev_sum / (m.steps * n) as f64 / lim;
    let counts: Vec<f64> = per_container.iter().map(|&c| c as f64).collect();
    (m.actions_per_container_mean, m.actions_per_container_std) = mean_std(&counts);
    m.reward_per_action = if non_noop > 0 { m.total_reward / non_noop as f64 } else { 0.0 };
    m.higher_lower_peak_ratio = m.high_empties as f64 / m.low_empties.max(1) as f64;
    m.safety_violations_pct = if m.empties > 0 {
        100.0 * violations as f64 / m.empties as f64
    } else {
        0.0
    };
    Ok(EpisodeRun { metrics: m, trajectory: traj })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    Cl,
    ClCm,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Cl => "cl",
            Method::ClCm => "cl_cm",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Method::Naive),
            "cl" => Ok(Method::Cl),
            "cl_cm" | "cl-cm" => Ok(Method::ClCm),
            _ => Err(Error::Config(format!("unknown method {s:?} (naive | cl | cl_cm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRow {
    pub seed: u64,
    pub rollout: usize,
    pub metrics: EpisodeMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub cv_pct: Option<f64>,
}

fn summarize(rows: &[&EpisodeMetrics]) -> Vec<MetricSummary> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    first
        .numeric()
        .iter()
        .enumerate()
        .map(|(k, (name, _))| {
            let xs: Vec<f64> = rows.iter().map(|m| m.numeric()[k].1).collect();
            let (mean, std) = mean_std(&xs);
            MetricSummary {
                name: (*name).to_string(),
                mean,
                std,
                cv_pct: cv_pct(&xs),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub metrics: Vec<MetricSummary>,
}

impl SeedSummary {
    pub fn get(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub method: Method,
    pub containers: usize,
    pub rows: Vec<RolloutRow>,
    pub overall: Vec<MetricSummary>,
    pub per_seed: Vec<SeedSummary>,
    /// Seed with the fewest mean collision timesteps.
    pub best_seed: u64,
    /// Median of the remaining seeds by the same measure.
    pub median_seed: u64,
}

impl AggregateReport {
    /// Builds the report from rows keyed by `(seed, rollout)`; the result does
    /// not depend on the order of `rows`.
    pub fn from_rows(method: Method, containers: usize, mut rows: Vec<RolloutRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Undefined("no rollouts to aggregate".into()));
        }
        rows.sort_by_key(|r| (r.seed, r.rollout));
        let mut by_seed: BTreeMap<u64, Vec<&EpisodeMetrics>> = BTreeMap::new();
        for r in &rows {
            by_seed.entry(r.seed).or_default().push(&r.metrics);
        }
        let per_seed: Vec<SeedSummary> = by_seed
            .iter()
            .map(|(&seed, ms)| SeedSummary {
                seed,
                metrics: summarize(ms),
            })
            .collect();
        let collisions = |s: &SeedSummary| s.get("collision_timesteps").map_or(f64::INFINITY, |m| m.mean);
        let mut ranked: Vec<(f64, u64)> = per_seed.iter().map(|s| (collisions(s), s.seed)).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let best_seed = ranked[0].1;
        let rest = &ranked[1..];
        let median_seed = if rest.is_empty() { best_seed } else { rest[(rest.len() - 1) / 2].1 };
        let all: Vec<&EpisodeMetrics> = rows.iter().map(|r| &r.metrics).collect();
        Ok(Self {
            method,
            containers,
            overall: summarize(&all),
            per_seed,
            best_seed,
            median_seed,
            rows,
        })
    }

    pub fn seed_summary(&self, seed: u64) -> Option<&SeedSummary> {
        self.per_seed.iter().find(|s| s.seed == seed)
    }

    pub fn best(&self) -> &SeedSummary {
        self.seed_summary(self.best_seed).expect("best seed present")
    }

    pub fn median(&self) -> &SeedSummary {
        self.seed_summary(self.median_seed).expect("median seed present")
    }

    pub fn overall_mean(&self, name: &str) -> Option<f64> {
        self.overall.iter().find(|m| m.name == name).map(|m| m.mean)
    }

    pub fn write_csv<W: Write>(&self, mut w: W, header_comment: Option<&str>) -> Result<()> {
        if let Some(c) = header_comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "method,containers,seed,rollout,{}", EpisodeMetrics::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                self.method.label(),
                self.containers,
                r.seed,
                r.rollout,
                r.metrics.csv_fields()
            )?;
        }
        Ok(())
    }
}

/// Everything needed to act with one of the three methods.
pub struct MethodArtifacts<'a> {
    pub policies: &'a BTreeMap<u64, PolicyParams>,
    pub ensemble: Option<&'a BoostedEnsemble>,
    pub override_config: OverrideConfig,
}

/// Rollout seed shared by all methods so comparisons are paired.
pub fn rollout_seed(eval_seed: u64, seed: u64, rollout: usize) -> u64 {
    derive_seed(derive_seed(eval_seed, seed), rollout as u64)
}

/// Evaluates `method` for every seed in `seeds` over `n_rollouts` episodes.
pub fn evaluate_method(
    method: Method,
    facility: &FacilityConfig,
    seeds: &[u64],
    artifacts: &MethodArtifacts<'_>,
    n_rollouts: usize,
    eval_seed: u64,
) -> Result<AggregateReport> {
    if seeds.is_empty() || n_rollouts == 0 {
        return Err(Error::Config("need at least one seed and one rollout".into()));
    }
    for &s in seeds {
        if !artifacts.policies.contains_key(&s) {
            return Err(Error::MissingArtifact {
                seed: s,
                what: format!("{} policy weights", method.label()),
            });
        }
    }
    if method == Method::ClCm && artifacts.ensemble.is_none() {
        return Err(Error::MissingArtifact {
            seed: seeds[0],
            what: "collision model".into(),
        });
    }
    let jobs: Vec<(u64, usize)> = seeds
        .iter()
        .flat_map(|&s| (0..n_rollouts).map(move |r| (s, r)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(seed, rollout)| {
            let policy = &artifacts.policies[&seed];
            let ep_seed = rollout_seed(eval_seed, seed, rollout);
            let metrics = match method {
                Method::Naive | Method::Cl => run_episode(facility, policy, ep_seed)?,
                Method::ClCm => {
                    let ctl = OverridePolicy {
                        policy,
                        ensemble: artifacts.ensemble.expect("checked above"),
                        config: artifacts.override_config,
                    };
                    run_episode(facility, &ctl, ep_seed)?
                }
            };
            Ok(RolloutRow { seed, rollout, metrics })
        })
        .collect::<Result<Vec<_>>>()?;
    AggregateReport::from_rows(method, facility.n(), rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta: f64,
    pub mean_collisions: f64,
    pub std_collisions: f64,
    pub cv_pct: Option<f64>,
    pub mean_volume: f64,
    pub mean_overrides: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Threshold with the lowest collision CV% (ties go to the smaller one).
    pub best_theta: f64,
    /// Collision statistics of the policies without overrides.
    pub baseline: SweepRow,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, mut w: W, header_comment: Option<&str>) -> Result<()> {
        if let Some(c) = header_comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "theta,mean_collisions,std_collisions,cv_pct,mean_volume,mean_overrides")?;
        for r in &self.rows {
            let cv = r.cv_pct.map(|c| c.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.theta, r.mean_collisions, r.std_collisions, cv, r.mean_volume, r.mean_overrides
            )?;
        }
        Ok(())
    }
}

fn sweep_row(theta: f64, ms: &[EpisodeMetrics]) -> SweepRow {
    let col: Vec<f64> = ms.iter().map(|m| m.collision_timesteps as f64).collect();
    let (mean, std) = mean_std(&col);
    SweepRow {
        theta,
        mean_collisions: mean,
        std_collisions: std,
        cv_pct: cv_pct(&col),
        mean_volume: mean_std(&ms.iter().map(|m| m.total_volume_processed).collect::<Vec<_>>()).0,
        mean_overrides: mean_std(&ms.iter().map(|m| m.overrides as f64).collect::<Vec<_>>()).0,
    }
}

/// Evaluates the override rule for every threshold in `theta_grid` over all
/// `(policy, rollout)` episodes and picks the threshold with the lowest CV%
/// of collision timesteps.
pub fn threshold_sweep(
    facility: &FacilityConfig,
    policies: &[(u64, &PolicyParams)],
    ensemble: &BoostedEnsemble,
    base: OverrideConfig,
    theta_grid: &[f64],
    n_rollouts: usize,
    eval_seed: u64,
) -> Result<SweepResult> {
    if theta_grid.is_empty() {
        return Err(Error::Config("threshold grid is empty".into()));
    }
    if policies.is_empty() || n_rollouts == 0 {
        return Err(Error::Config("need at least one policy and one rollout".into()));
    }
    let jobs: Vec<(usize, u64, &PolicyParams, usize)> = (0..=theta_grid.len())
        .flat_map(|g| {
            policies
                .iter()
                .flat_map(move |&(s, p)| (0..n_rollouts).map(move |r| (g, s, p, r)))
        })
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(g, seed, policy, r)| {
            let ep_seed = rollout_seed(eval_seed, seed, r);
            if g == theta_grid.len() {
                return run_episode(facility, policy, ep_seed);
            }
            let ctl = OverridePolicy {
                policy,
                ensemble,
                config: OverrideConfig {
                    theta: theta_grid[g],
                    ..base
                },
            };
            run_episode(facility, &ctl, ep_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let per = policies.len() * n_rollouts;
    let rows: Vec<SweepRow> = theta_grid
        .iter()
        .enumerate()
        .map(|(g, &theta)| sweep_row(theta, &results[g * per..(g + 1) * per]))
        .collect();
    let baseline = sweep_row(f64::NAN, &results[theta_grid.len() * per..]);
    let key = |r: &SweepRow| r.cv_pct.unwrap_or(f64::INFINITY);
    let best = rows
        .iter()
        .min_by(|a, b| key(a).total_cmp(&key(b)).then(a.theta.total_cmp(&b.theta)))
        .expect("non-empty grid");
    Ok(SweepResult {
        best_theta: best.theta,
        rows,
        baseline,
    })
}
