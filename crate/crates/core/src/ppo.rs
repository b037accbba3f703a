//! Actor-critic PPO: categorical action sampling, generalized advantage
//! estimation and clipped-surrogate updates with a KL early stop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{FacilityConfig, Simulator};
use crate::nn::{log_softmax, Adam, Mlp};
use crate::reward::RewardParams;
use crate::rng::{derive_seed, seeded, SimRng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub learning_rate: f64,
    pub epochs_per_update: usize,
    pub minibatch_size: usize,
    /// Environment steps collected per update, summed over workers.
    pub rollout_steps: usize,
    /// Parallel environment instances used for collection.
    pub n_envs: usize,
    /// Remaining epochs are skipped once the batch mean KL exceeds this.
    pub kl_limit: f64,
    pub freeze_actor: bool,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Global-norm gradient clip, per network. Non-positive disables it.
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            learning_rate: 3e-4,
            epochs_per_update: 4,
            minibatch_size: 256,
            rollout_steps: 4096,
            n_envs: 8,
            kl_limit: 0.05,
            freeze_actor: false,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            hidden: vec![64, 64],
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ppo: {m}")));
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must be in [0, 1]");
        }
        if !(self.kl_limit > 0.0) {
            return bad("kl_limit must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.epochs_per_update == 0 || self.minibatch_size == 0 || self.n_envs == 0 {
            return bad("epochs, minibatch size and n_envs must be positive");
        }
        if self.rollout_steps < self.n_envs {
            return bad("rollout_steps must be at least n_envs");
        }
        Ok(())
    }
}

pub const POLICY_FILE_VERSION: u32 = 1;
const POLICY_FORMAT: &str = "bunker-policy";

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub actor: Mlp,
    pub critic: Mlp,
}

#[derive(Serialize, Deserialize)]
struct NetRecord {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// On-disk weight file: a header of layer widths followed by the flat
/// parameter vector (row-major weights then biases, layer by layer).
#[derive(Serialize, Deserialize)]
struct PolicyFile {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    manifest: Option<String>,
    actor: NetRecord,
    critic: NetRecord,
}

/// Output of one forward pass of the policy on an observation.
#[derive(Debug, Clone)]
pub struct ActionSample {
    pub action: usize,
    pub log_prob: f64,
    pub log_probs: Vec<f64>,
    pub value: f64,
}

impl PolicyParams {
    pub fn new(obs_len: usize, n_actions: usize, hidden: &[usize], rng: &mut SimRng) -> Self {
        let mut sizes = vec![obs_len];
        sizes.extend_from_slice(hidden);
        let mut actor_sizes = sizes.clone();
        actor_sizes.push(n_actions);
        sizes.push(1);
        Self {
            actor: Mlp::new(&actor_sizes, 0.01, rng),
            critic: Mlp::new(&sizes, 1.0, rng),
        }
    }

    pub fn for_facility(cfg: &FacilityConfig, hidden: &[usize], seed: u64) -> Self {
        Self::new(cfg.observation_len(), cfg.n() + 1, hidden, &mut seeded(seed))
    }

    pub fn n_actions(&self) -> usize {
        self.actor.output_len()
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.actor.input_len() {
            return Err(Error::Dimension {
                what: "observation",
                expected: self.actor.input_len(),
                got: obs.len(),
            });
        }
        Ok(())
    }

    pub fn log_probs(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.check_obs(obs)?;
        Ok(log_softmax(&self.actor.forward(obs)))
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        self.check_obs(obs)?;
        Ok(self.critic.forward(obs)[0])
    }

    pub fn sample(&self, obs: &[f64], rng: &mut SimRng) -> Result<ActionSample> {
        let log_probs = self.log_probs(obs)?;
        let action = sample_categorical(&log_probs, rng);
        Ok(ActionSample {
            action,
            log_prob: log_probs[action],
            value: self.critic.forward(obs)[0],
            log_probs,
        })
    }

    pub fn to_json(&self, manifest: Option<&str>) -> Result<String> {
        let file = PolicyFile {
            format: POLICY_FORMAT.into(),
            version: POLICY_FILE_VERSION,
            manifest: manifest.map(str::to_owned),
            actor: NetRecord {
                sizes: self.actor.sizes.clone(),
                params: self.actor.params.clone(),
            },
            critic: NetRecord {
                sizes: self.critic.sizes.clone(),
                params: self.critic.params.clone(),
            },
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: PolicyFile = serde_json::from_str(s).map_err(|e| Error::Format(format!("policy file: {e}")))?;
        if file.format != POLICY_FORMAT {
            return Err(Error::Format(format!("not a policy file (format {:?})", file.format)));
        }
        if file.version != POLICY_FILE_VERSION {
            return Err(Error::Version {
                kind: "policy file",
                expected: POLICY_FILE_VERSION,
                found: file.version,
            });
        }
        let actor = Mlp::from_params(file.actor.sizes, file.actor.params)?;
        let critic = Mlp::from_params(file.critic.sizes, file.critic.params)?;
        if actor.input_len() != critic.input_len() || critic.output_len() != 1 {
            return Err(Error::Format("actor/critic shapes disagree".into()));
        }
        Ok(Self { actor, critic })
    }

    pub fn save(&self, path: impl AsRef<Path>, manifest: Option<&str>) -> Result<()> {
        std::fs::write(path, self.to_json(manifest)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Inverse-CDF draw from a categorical given log-probabilities.
pub fn sample_categorical(log_probs: &[f64], rng: &mut SimRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return k;
        }
    }
    // rounding left u beyond the accumulated mass: last action with mass
    log_probs.iter().rposition(|lp| lp.exp() > 0.0).unwrap_or(0)
}

/// Samples an action from the policy; returns it with its log-probability.
pub fn act(params: &PolicyParams, obs: &[f64], rng: &mut SimRng) -> Result<(usize, f64)> {
    let lp = params.log_probs(obs)?;
    let a = sample_categorical(&lp, rng);
    Ok((a, lp[a]))
}

/// Generalized advantage estimation.
///
/// `dones[t]` marks that the episode ended after step `t`; `last_value` is the
/// bootstrap value of the state following the final step (ignored if that
/// step is done). Returns `(advantages, returns)` with
/// `returns = advantages + values`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert!(rewards.len() == values.len() && values.len() == dones.len());
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_value = last_value;
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        acc = delta + gamma * lambda * live * acc;
        adv[t] = acc;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Collected experience plus GAE outputs.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    /// Full behaviour-policy log-probabilities, for the KL measurement.
    pub old_log_probs: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn push(&mut self, obs: Vec<f64>, s: ActionSample, reward: f64, done: bool) {
        self.obs.push(obs);
        self.actions.push(s.action);
        self.log_probs.push(s.log_prob);
        self.old_log_probs.push(s.log_probs);
        self.values.push(s.value);
        self.rewards.push(reward);
        self.dones.push(done);
    }

    pub fn compute_gae(&mut self, last_value: f64, gamma: f64, lambda: f64) {
        let (a, r) = gae(&self.rewards, &self.values, &self.dones, last_value, gamma, lambda);
        self.advantages = a;
        self.returns = r;
    }

    pub fn extend(&mut self, other: Trajectory) {
        self.obs.extend(other.obs);
        self.actions.extend(other.actions);
        self.log_probs.extend(other.log_probs);
        self.old_log_probs.extend(other.old_log_probs);
        self.rewards.extend(other.rewards);
        self.values.extend(other.values);
        self.dones.extend(other.dones);
        self.advantages.extend(other.advantages);
        self.returns.extend(other.returns);
    }

    fn check(&self) -> Result<()> {
        let n = self.obs.len();
        let lens = [
            self.actions.len(),
            self.log_probs.len(),
            self.old_log_probs.len(),
            self.rewards.len(),
            self.values.len(),
            self.dones.len(),
            self.advantages.len(),
            self.returns.len(),
        ];
        if let Some(&bad) = lens.iter().find(|&&l| l != n) {
            return Err(Error::Dimension {
                what: "trajectory sequences (advantages computed?)",
                expected: n,
                got: bad,
            });
        }
        if !self.advantages.iter().all(|a| a.is_finite()) {
            return Err(Error::NonFinite("advantages".into()));
        }
        Ok(())
    }
}

/// Zero-mean, unit-variance advantages.
pub fn normalize(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return Vec::new();
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    adv.iter().map(|a| (a - mean) / sd).collect()
}

/// Loss coefficients of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LossCoefs {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl From<&PpoConfig> for LossCoefs {
    fn from(c: &PpoConfig) -> Self {
        Self {
            clip_eps: c.clip_eps,
            value_coef: c.value_coef,
            entropy_coef: c.entropy_coef,
        }
    }
}

/// One training example seen by the loss.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub obs: &'a [f64],
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    /// Negated clipped surrogate (to be minimised).
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    /// `policy + value_coef * value - entropy_coef * entropy`.
    pub total: f64,
    pub clip_fraction: f64,
}

/// Mean PPO loss over `batch` and, unless `want_grad` is false, gradients of
/// `total` with respect to actor and critic parameters.
pub fn ppo_loss(
    params: &PolicyParams,
    batch: &[Sample<'_>],
    coefs: LossCoefs,
    want_actor_grad: bool,
) -> (LossBreakdown, Vec<f64>, Vec<f64>) {
    const CHUNK: usize = 32;
    let m = batch.len().max(1) as f64;
    let partials: Vec<(LossBreakdown, Vec<f64>, Vec<f64>)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut lb = LossBreakdown::default();
            let mut ga = if want_actor_grad { vec![0.0; params.actor.params.len()] } else { Vec::new() };
            let mut gc = vec![0.0; params.critic.params.len()];
            for s in chunk {
                let tape = params.actor.forward_cached(s.obs);
                let lp = log_softmax(tape.output());
                let p: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
                let ratio = (lp[s.action] - s.old_log_prob).exp();
                let a = s.advantage;
                let clipped = ratio.clamp(1.0 - coefs.clip_eps, 1.0 + coefs.clip_eps);
                let surr = (ratio * a).min(clipped * a);
                let ent: f64 = -p.iter().zip(&lp).map(|(p, l)| p * l).sum::<f64>();
                lb.policy -= surr;
                lb.entropy += ent;
                if (ratio - 1.0).abs() > coefs.clip_eps {
                    lb.clip_fraction += 1.0;
                }
                if want_actor_grad {
                    // d(-surr)/d ratio is -A on the unclipped branch, 0 on the clipped one.
                    let active = ratio * a <= clipped * a;
                    let d_ratio = if active { -a } else { 0.0 };
                    let d_logits: Vec<f64> = (0..p.len())
                        .map(|k| {
                            let onehot = if k == s.action { 1.0 } else { 0.0 };
                            let d_surr = d_ratio * ratio * (onehot - p[k]);
                            // dH/dz_k = -p_k (log p_k + H)
                            let d_ent = -p[k] * (lp[k] + ent);
                            (d_surr - coefs.entropy_coef * d_ent) / m
                        })
                        .collect();
                    params.actor.backward(&tape, &d_logits, &mut ga);
                }
                let ctape = params.critic.forward_cached(s.obs);
                let v = ctape.output()[0];
                let err = v - s.ret;
                lb.value += err * err;
                params
                    .critic
                    .backward(&ctape, &[coefs.value_coef * 2.0 * err / m], &mut gc);
            }
            (lb, ga, gc)
        })
        .collect();

    let mut lb = LossBreakdown::default();
    let mut ga = vec![0.0; if want_actor_grad { params.actor.params.len() } else { 0 }];
    let mut gc = vec![0.0; params.critic.params.len()];
    for (l, a, c) in partials {
        lb.policy += l.policy;
        lb.value += l.value;
        lb.entropy += l.entropy;
        lb.clip_fraction += l.clip_fraction;
        ga.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
        gc.iter_mut().zip(&c).for_each(|(x, y)| *x += y);
    }
    lb.policy /= m;
    lb.value /= m;
    lb.entropy /= m;
    lb.clip_fraction /= m;
    lb.total = lb.policy + coefs.value_coef * lb.value - coefs.entropy_coef * lb.entropy;
    (lb, ga, gc)
}

/// Mean KL(old || new) over the batch.
pub fn mean_kl(params: &PolicyParams, traj: &Trajectory) -> f64 {
    let n = traj.len();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = traj
        .obs
        .par_iter()
        .zip(&traj.old_log_probs)
        .map(|(o, old)| {
            let new = log_softmax(&params.actor.forward(o));
            old.iter().zip(&new).map(|(lo, ln)| lo.exp() * (lo - ln)).sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    total / n as f64
}

fn clip_grad(g: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub epochs_run: usize,
    pub kl_stopped: bool,
}

/// Parameters together with their optimiser state.
#[derive(Debug, Clone)]
pub struct Ppo {
    pub params: PolicyParams,
    pub config: PpoConfig,
    actor_opt: Adam,
    critic_opt: Adam,
    rng: SimRng,
}

impl Ppo {
    pub fn new(params: PolicyParams, config: PpoConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            actor_opt: Adam::new(params.actor.params.len(), config.learning_rate),
            critic_opt: Adam::new(params.critic.params.len(), config.learning_rate),
            rng: seeded(derive_seed(config.seed, 0x5EED)),
            params,
            config,
        })
    }

    /// Epochs of shuffled minibatch steps on the clipped objective.
    ///
    /// With `freeze_actor` only the critic moves. Remaining epochs are skipped
    /// once the batch mean KL(old || new) exceeds `kl_limit`.
    pub fn update(&mut self, traj: &Trajectory) -> Result<UpdateStats> {
        traj.check()?;
        let cfg = self.config.clone();
        let coefs = LossCoefs::from(&cfg);
        let adv = normalize(&traj.advantages);
        let mut idx: Vec<usize> = (0..traj.len()).collect();
        let mut stats = UpdateStats::default();
        for epoch in 0..cfg.epochs_per_update {
            idx.shuffle(&mut self.rng);
            let (mut pl, mut vl, mut en, mut cf, mut nb) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for mb in idx.chunks(cfg.minibatch_size) {
                let batch: Vec<Sample> = mb
                    .iter()
                    .map(|&k| Sample {
                        obs: &traj.obs[k],
                        action: traj.actions[k],
                        old_log_prob: traj.log_probs[k],
                        advantage: adv[k],
                        ret: traj.returns[k],
                    })
                    .collect();
                let (lb, mut ga, mut gc) = ppo_loss(&self.params, &batch, coefs, !cfg.freeze_actor);
                if !ga.iter().chain(&gc).all(|g| g.is_finite()) || !lb.total.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "epoch {epoch}: loss {:?} (policy {}, value {}, entropy {})",
                        lb.total, lb.policy, lb.value, lb.entropy
                    )));
                }
                if !cfg.freeze_actor {
                    clip_grad(&mut ga, cfg.max_grad_norm);
                    self.actor_opt.step(&mut self.params.actor.params, &ga);
                }
                clip_grad(&mut gc, cfg.max_grad_norm);
                self.critic_opt.step(&mut self.params.critic.params, &gc);
                pl += lb.policy;
                vl += lb.value;
                en += lb.entropy;
                cf += lb.clip_fraction;
                nb += 1.0;
            }
            stats.policy_loss = pl / nb;
            stats.value_loss = vl / nb;
            stats.entropy = en / nb;
            stats.clip_fraction = cf / nb;
            stats.epochs_run = epoch + 1;
            stats.mean_kl = if cfg.freeze_actor { 0.0 } else { mean_kl(&self.params, traj) };
            if stats.mean_kl > cfg.kl_limit {
                stats.kl_stopped = true;
                break;
            }
        }
        Ok(stats)
    }
}

/// One environment instance owned by a collection worker.
#[derive(Debug, Clone)]
pub struct RolloutWorker {
    sim: Simulator,
    seed: u64,
    episodes: u64,
    policy_rng: SimRng,
    episode_return: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutStats {
    pub steps: usize,
    pub mean_step_reward: f64,
    pub episode_returns: Vec<f64>,
}

impl RolloutWorker {
    pub fn new(config: FacilityConfig, reward: RewardParams, seed: u64) -> Result<Self> {
        Ok(Self {
            sim: Simulator::new(config, reward, derive_seed(seed, 0))?,
            seed,
            episodes: 0,
            policy_rng: seeded(derive_seed(seed, u64::MAX)),
            episode_return: 0.0,
        })
    }

    pub fn set_reward(&mut self, reward: RewardParams) {
        self.sim.reward = reward;
    }

    /// Runs `steps` transitions; returns the segment (GAE not yet applied),
    /// returns of episodes finished inside it and the bootstrap value.
    fn collect(&mut self, params: &PolicyParams, steps: usize) -> Result<(Trajectory, Vec<f64>, f64)> {
        let mut traj = Trajectory::default();
        let mut returns = Vec::new();
        for _ in 0..steps {
            let obs = self.sim.observation();
            let s = params.sample(&obs, &mut self.policy_rng)?;
            let out = self.sim.step(s.action)?;
            self.episode_return += out.reward;
            traj.push(obs, s, out.reward, out.terminated);
            if out.terminated {
                returns.push(self.episode_return);
                self.episode_return = 0.0;
                self.episodes += 1;
                self.sim.restart(derive_seed(self.seed, self.episodes))?;
            }
        }
        let last_value = if traj.dones.last().copied().unwrap_or(true) {
            0.0
        } else {
            params.value(&self.sim.observation())?
        };
        Ok((traj, returns, last_value))
    }
}

/// Collects `total_steps` transitions split across `workers` in parallel and
/// computes GAE per worker segment.
pub fn collect_rollouts(
    params: &PolicyParams,
    workers: &mut [RolloutWorker],
    total_steps: usize,
    gamma: f64,
    lambda: f64,
) -> Result<(Trajectory, RolloutStats)> {
    let per = total_steps / workers.len();
    let segments: Vec<Result<(Trajectory, Vec<f64>, f64)>> =
        workers.par_iter_mut().map(|w| w.collect(params, per)).collect();
    let mut traj = Trajectory::default();
    let mut stats = RolloutStats::default();
    let mut reward_sum = 0.0;
    for seg in segments {
        let (mut t, r, last_value) = seg?;
        t.compute_gae(last_value, gamma, lambda);
        reward_sum += t.rewards.iter().sum::<f64>();
        stats.episode_returns.extend(r);
        traj.extend(t);
    }
    stats.steps = traj.len();
    stats.mean_step_reward = if stats.steps > 0 { reward_sum / stats.steps as f64 } else { 0.0 };
    Ok((traj, stats))
}
