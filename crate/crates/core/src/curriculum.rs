//! Phase schedule for curriculum training and the single-stage baseline.
//!
//! Curriculum: phase one (single bump at the higher peak), phase two (both
//! peaks; the actor is frozen for the first part so only the critic adapts to
//! the new reward), phase three (step reward, tighter KL limit). The critic
//! and optimiser state carry over between phases.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::env::FacilityConfig;
use crate::ppo::{collect_rollouts, PolicyParams, Ppo, PpoConfig, RolloutWorker, UpdateStats};
use crate::reward::Phase;
use crate::rng::derive_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    /// Environment steps per phase.
    pub phase_budgets: [usize; 3],
    /// Leading fraction of phase two trained with a frozen actor.
    pub phase2_freeze_fraction: f64,
    pub phase3_kl_limit: f64,
}

impl CurriculumSchedule {
    /// 60 / 25 / 15 % split of `total_steps`, frozen for the first half of
    /// phase two, KL limit 0.01 in phase three.
    pub fn from_total(total_steps: usize) -> Self {
        let p1 = total_steps * 60 / 100;
        let p2 = total_steps * 25 / 100;
        Self {
            phase_budgets: [p1, p2, total_steps - p1 - p2],
            phase2_freeze_fraction: 0.5,
            phase3_kl_limit: 0.01,
        }
    }

    pub fn total(&self) -> usize {
        self.phase_budgets.iter().sum()
    }

    /// Steps actually trained: each phase runs whole rollouts only.
    pub fn effective_total(&self, rollout_steps: usize) -> usize {
        self.phase_budgets.iter().map(|b| b / rollout_steps * rollout_steps).sum()
    }

    pub fn validate(&self, ppo: &PpoConfig) -> Result<()> {
        if self.phase_budgets.iter().any(|&b| b < ppo.rollout_steps) {
            return Err(Error::Config(format!(
                "each phase budget {:?} must cover at least one rollout of {} steps",
                self.phase_budgets, ppo.rollout_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.phase2_freeze_fraction) {
            return Err(Error::Config("phase2_freeze_fraction must be in [0, 1]".into()));
        }
        if !(self.phase3_kl_limit > 0.0 && self.phase3_kl_limit < ppo.kl_limit) {
            return Err(Error::Config(format!(
                "phase3_kl_limit {} must be positive and below kl_limit {}",
                self.phase3_kl_limit, ppo.kl_limit
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LogEvent {
    PhaseStart,
    Update,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// Cumulative environment steps at the end of the row's rollout.
    pub step: usize,
    pub phase: Phase,
    pub event: LogEvent,
    /// Mean per-step reward of the rollout under the active phase reward.
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub frozen: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn phase_markers(&self) -> usize {
        self.rows.iter().filter(|r| r.event == LogEvent::PhaseStart).count()
    }

    pub fn updates(&self) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(|r| r.event == LogEvent::Update)
    }

    pub fn write_csv<W: Write>(&self, mut w: W, header_comment: Option<&str>) -> Result<()> {
        if let Some(c) = header_comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "step,phase,event,mean_reward,mean_kl,clip_fraction,frozen")?;
        for r in &self.rows {
            let ev = match r.event {
                LogEvent::PhaseStart => "phase_start",
                LogEvent::Update => "update",
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.step, r.phase, ev, r.mean_reward, r.mean_kl, r.clip_fraction, r.frozen
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub log: TrainingLog,
    /// Actor snapshot at the end of each phase run.
    pub phase_end_actors: Vec<Vec<f64>>,
}

struct Trainer {
    ppo: Ppo,
    workers: Vec<RolloutWorker>,
    facility: FacilityConfig,
    log: TrainingLog,
    steps: usize,
}

impl Trainer {
    fn new(config: &PpoConfig, facility: &FacilityConfig, phase: Phase) -> Result<Self> {
        config.validate()?;
        facility.validate()?;
        let params = PolicyParams::for_facility(facility, &config.hidden, derive_seed(config.seed, 0xA11CE));
        let reward = facility.reward_params(phase);
        let workers = (0..config.n_envs)
            .map(|k| RolloutWorker::new(facility.clone(), reward, derive_seed(config.seed, 1000 + k as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ppo: Ppo::new(params, config.clone())?,
            workers,
            facility: facility.clone(),
            log: TrainingLog::default(),
            steps: 0,
        })
    }

    fn run_phase(&mut self, phase: Phase, budget: usize, freeze_updates: usize, kl_limit: f64) -> Result<()> {
        let reward = self.facility.reward_params(phase);
        for w in &mut self.workers {
            w.set_reward(reward);
        }
        self.log.rows.push(LogRow {
            step: self.steps,
            phase,
            event: LogEvent::PhaseStart,
            mean_reward: 0.0,
            mean_kl: 0.0,
            clip_fraction: 0.0,
            frozen: freeze_updates > 0,
        });
        let cfg = self.ppo.config.clone();
        let updates = budget / cfg.rollout_steps;
        for u in 0..updates {
            let (traj, rs) = collect_rollouts(
                &self.ppo.params,
                &mut self.workers,
                cfg.rollout_steps,
                cfg.gamma,
                cfg.gae_lambda,
            )?;
            self.steps += rs.steps;
            let frozen = u < freeze_updates;
            self.ppo.config.freeze_actor = frozen;
            self.ppo.config.kl_limit = kl_limit;
            let st: UpdateStats = self.ppo.update(&traj)?;
            self.log.rows.push(LogRow {
                step: self.steps,
                phase,
                event: LogEvent::Update,
                mean_reward: rs.mean_step_reward,
                mean_kl: st.mean_kl,
                clip_fraction: st.clip_fraction,
                frozen,
            });
        }
        self.ppo.config.freeze_actor = cfg.freeze_actor;
        self.ppo.config.kl_limit = cfg.kl_limit;
        Ok(())
    }
}

/// Three-phase curriculum training.
pub fn train_curriculum(
    config: &PpoConfig,
    facility: &FacilityConfig,
    schedule: &CurriculumSchedule,
) -> Result<TrainOutcome> {
    schedule.validate(config)?;
    let mut t = Trainer::new(config, facility, Phase::One)?;
    let mut snaps = Vec::with_capacity(3);

    t.run_phase(Phase::One, schedule.phase_budgets[0], 0, config.kl_limit)?;
    snaps.push(t.ppo.params.actor.params.clone());

    let p2_updates = schedule.phase_budgets[1] / config.rollout_steps;
    let freeze = (schedule.phase2_freeze_fraction * p2_updates as f64).round() as usize;
    t.run_phase(Phase::Two, schedule.phase_budgets[1], freeze, config.kl_limit)?;
    snaps.push(t.ppo.params.actor.params.clone());

    t.run_phase(Phase::Three, schedule.phase_budgets[2], 0, schedule.phase3_kl_limit)?;
    snaps.push(t.ppo.params.actor.params.clone());

    Ok(TrainOutcome {
        params: t.ppo.params,
        log: t.log,
        phase_end_actors: snaps,
    })
}

/// Single-stage baseline on the two-peak (phase two) reward for
/// `total_steps` environment steps.
pub fn train_naive(config: &PpoConfig, facility: &FacilityConfig, total_steps: usize) -> Result<TrainOutcome> {
    if total_steps < config.rollout_steps {
        return Err(Error::Config(format!(
            "budget {total_steps} smaller than one rollout ({})",
            config.rollout_steps
        )));
    }
    let mut t = Trainer::new(config, facility, Phase::Two)?;
    t.run_phase(Phase::Two, total_steps, 0, config.kl_limit)?;
    Ok(TrainOutcome {
        phase_end_actors: vec![t.ppo.params.actor.params.clone()],
        params: t.ppo.params,
        log: t.log,
    })
}
