//! End-to-end comparison of naive PPO, curriculum PPO and curriculum PPO
//! with collision-model overrides on one facility.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision_data::{generate_samples, DatasetSummary, PairRolloutConfig};
use crate::collision_model::{train_cm, BoostedEnsemble, CmTrainConfig, TrainReport};
use crate::curriculum::{train_curriculum, train_naive, CurriculumSchedule, TrainOutcome};
use crate::env::FacilityConfig;
use crate::eval::{evaluate_method, threshold_sweep, AggregateReport, MethodArtifacts, Method, SweepResult};
use crate::inference::OverrideConfig;
use crate::ppo::{PolicyParams, PpoConfig};
use crate::rng::derive_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Size of the default facility; ignored when `facility` is given.
    pub containers: usize,
    pub facility: Option<FacilityConfig>,
    pub seeds: Vec<u64>,
    /// Curriculum budget in environment steps; the naive run gets the same
    /// number of steps actually trained.
    pub total_steps: usize,
    pub ppo: PpoConfig,
    pub pair_data: PairRolloutConfig,
    pub cm: CmTrainConfig,
    pub theta_grid: Vec<f64>,
    /// Fixed override threshold; `None` takes the sweep's choice.
    pub theta: Option<f64>,
    pub delta: f64,
    pub require_pu_free: bool,
    pub n_rollouts: usize,
    pub sweep_rollouts: usize,
    pub eval_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            containers: 7,
            facility: None,
            seeds: (0..5).collect(),
            total_steps: 1_000_000,
            ppo: PpoConfig {
                hidden: vec![32, 32],
                learning_rate: 1e-3,
                entropy_coef: 0.05,
                ..Default::default()
            },
            pair_data: PairRolloutConfig {
                repetitions: 20_000,
                ..Default::default()
            },
            cm: CmTrainConfig::default(),
            theta_grid: vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            theta: None,
            delta: 3.0,
            require_pu_free: true,
            n_rollouts: 3,
            sweep_rollouts: 3,
            eval_seed: 2024,
        }
    }
}

impl ExperimentConfig {
    pub fn facility(&self) -> FacilityConfig {
        self.facility.clone().unwrap_or_else(|| FacilityConfig::default_for(self.containers))
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.facility().validate()?;
        self.ppo.validate()?;
        self.schedule().validate(&self.ppo)?;
        self.pair_data.validate()?;
        self.cm.validate()?;
        self.override_config(self.theta.unwrap_or(0.5)).validate()?;
        if self.seeds.is_empty() || self.n_rollouts == 0 || self.sweep_rollouts == 0 {
            return Err(Error::Config("need at least one seed and one rollout".into()));
        }
        if self.theta_grid.is_empty() {
            return Err(Error::Config("theta_grid is empty".into()));
        }
        for &t in &self.theta_grid {
            self.override_config(t).validate()?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> CurriculumSchedule {
        CurriculumSchedule::from_total(self.total_steps)
    }

    pub fn override_config(&self, theta: f64) -> OverrideConfig {
        OverrideConfig {
            theta,
            delta: self.delta,
            require_pu_free: self.require_pu_free,
        }
    }

    /// PPO config for one training seed.
    pub fn ppo_for(&self, seed: u64) -> PpoConfig {
        PpoConfig {
            seed,
            ..self.ppo.clone()
        }
    }
}

pub struct SeedRuns {
    pub naive: TrainOutcome,
    pub cl: TrainOutcome,
}

/// Trains the naive and curriculum agents for every seed, in parallel.
pub fn train_all(config: &ExperimentConfig, facility: &FacilityConfig) -> Result<BTreeMap<u64, SeedRuns>> {
    let schedule = config.schedule();
    let naive_steps = schedule.effective_total(config.ppo.rollout_steps);
    let jobs: Vec<(u64, bool)> = config.seeds.iter().flat_map(|&s| [(s, false), (s, true)]).collect();
    let outs = jobs
        .par_iter()
        .map(|&(s, cl)| {
            let ppo = config.ppo_for(s);
            if cl {
                train_curriculum(&ppo, facility, &schedule)
            } else {
                train_naive(&ppo, facility, naive_steps)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = outs.into_iter();
    let mut map = BTreeMap::new();
    for &s in &config.seeds {
        let naive = it.next().expect("one outcome per job");
        let cl = it.next().expect("one outcome per job");
        map.insert(s, SeedRuns { naive, cl });
    }
    Ok(map)
}

pub struct ExperimentResult {
    pub facility: FacilityConfig,
    pub runs: BTreeMap<u64, SeedRuns>,
    pub dataset: DatasetSummary,
    pub ensemble: BoostedEnsemble,
    pub cm_report: TrainReport,
    pub sweep: SweepResult,
    pub naive: AggregateReport,
    pub cl: AggregateReport,
    pub cl_cm: AggregateReport,
}

impl ExperimentResult {
    pub fn reports(&self) -> [&AggregateReport; 3] {
        [&self.naive, &self.cl, &self.cl_cm]
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let facility = config.facility();
    let runs = train_all(config, &facility)?;

    let samples = generate_samples(&config.pair_data)?;
    let dataset = DatasetSummary::of(&samples, &config.pair_data);
    let (ensemble, cm_report) = train_cm(&samples, &config.cm)?;
    drop(samples);

    let cl: BTreeMap<u64, PolicyParams> = runs.iter().map(|(&s, r)| (s, r.cl.params.clone())).collect();
    let naive: BTreeMap<u64, PolicyParams> = runs.iter().map(|(&s, r)| (s, r.naive.params.clone())).collect();
    let pairs: Vec<(u64, &PolicyParams)> = cl.iter().map(|(&s, p)| (s, p)).collect();
    // sweep on episodes disjoint from the final evaluation
    let sweep = threshold_sweep(
        &facility,
        &pairs,
        &ensemble,
        config.override_config(0.5),
        &config.theta_grid,
        config.sweep_rollouts,
        derive_seed(config.eval_seed, 0x5EE9),
    )?;

    let eval = |m: Method, policies: &BTreeMap<u64, PolicyParams>, ens: Option<&BoostedEnsemble>| {
        let arts = MethodArtifacts {
            policies,
            ensemble: ens,
            override_config: config.override_config(config.theta.unwrap_or(sweep.best_theta)),
        };
        evaluate_method(m, &facility, &config.seeds, &arts, config.n_rollouts, config.eval_seed)
    };
    let naive_report = eval(Method::Naive, &naive, None)?;
    let cl_report = eval(Method::Cl, &cl, None)?;
    let cl_cm_report = eval(Method::ClCm, &cl, Some(&ensemble))?;

    Ok(ExperimentResult {
        facility,
        runs,
        dataset,
        ensemble,
        cm_report,
        sweep,
        naive: naive_report,
        cl: cl_report,
        cl_cm: cl_cm_report,
    })
}

/// Best- and median-seed rows with the headline columns of the efficiency
/// and per-action tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub containers: usize,
    pub which: String,
    pub seed: u64,
    pub press_idle_time: f64,
    pub total_volume_processed: f64,
    pub collision_timesteps: f64,
    pub total_volume_deviation: f64,
    pub actions_per_container: f64,
    pub reward_per_action: f64,
    pub higher_lower_peak_ratio: f64,
    pub safety_violations_pct: f64,
    pub terminated_early_fraction: f64,
}

pub fn summary_rows(report: &AggregateReport) -> Vec<SummaryRow> {
    [("best", report.best()), ("median", report.median())]
        .into_iter()
        .map(|(which, s)| {
            let g = |name: &str| s.get(name).map_or(f64::NAN, |m| m.mean);
            SummaryRow {
                method: report.method.label().into(),
                containers: report.containers,
                which: which.into(),
                seed: s.seed,
                press_idle_time: g("press_idle_time"),
                total_volume_processed: g("total_volume_processed"),
                collision_timesteps: g("collision_timesteps"),
                total_volume_deviation: g("total_volume_deviation"),
                actions_per_container: g("actions_per_container"),
                reward_per_action: g("reward_per_action"),
                higher_lower_peak_ratio: g("higher_lower_peak_ratio"),
                safety_violations_pct: g("safety_violations_pct"),
                terminated_early_fraction: g("terminated_early"),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub manifest: Option<String>,
    pub rows: Vec<SummaryRow>,
    pub reports: Vec<AggregateReport>,
}

pub fn summary(reports: &[&AggregateReport], manifest: Option<&str>) -> Summary {
    Summary {
        manifest: manifest.map(str::to_owned),
        rows: reports.iter().flat_map(|r| summary_rows(r)).collect(),
        reports: reports.iter().map(|&r| r.clone()).collect(),
    }
}

/// Per-rollout series for idle time, throughput and safety plots.
pub fn write_plot_csv<W: Write>(reports: &[&AggregateReport], mut w: W, header_comment: Option<&str>) -> Result<()> {
    if let Some(c) = header_comment {
        writeln!(w, "# {c}")?;
    }
    writeln!(
        w,
        "method,containers,seed,rollout,press_idle_time,total_volume_processed,collision_timesteps,safety_violations_pct"
    )?;
    for r in reports {
        for row in &r.rows {
            let m = &row.metrics;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.method.label(),
                r.containers,
                row.seed,
                row.rollout,
                m.press_idle_time,
                m.total_volume_processed,
                m.collision_timesteps,
                m.safety_violations_pct
            )?;
        }
    }
    Ok(())
}

/// Writes every report of an experiment into `dir`.
pub fn write_experiment(result: &ExperimentResult, dir: &Path, manifest: Option<&str>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let reports = result.reports();
    for r in reports {
        let f = std::fs::File::create(dir.join(format!("eval_{}.csv", r.method.label())))?;
        r.write_csv(std::io::BufWriter::new(f), manifest)?;
    }
    let f = std::fs::File::create(dir.join("sweep.csv"))?;
    result.sweep.write_csv(std::io::BufWriter::new(f), manifest)?;
    let f = std::fs::File::create(dir.join("plot_metrics.csv"))?;
    write_plot_csv(&reports, std::io::BufWriter::new(f), manifest)?;
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary(&reports, manifest))?,
    )?;
    std::fs::write(dir.join("cm_report.json"), serde_json::to_string_pretty(&result.cm_report)?)?;
    result.ensemble.save(dir.join("collision_model.json"), manifest)?;
    for (seed, runs) in &result.runs {
        runs.naive.params.save(dir.join(format!("policy_naive_{seed}.json")), manifest)?;
        runs.cl.params.save(dir.join(format!("policy_cl_{seed}.json")), manifest)?;
        let f = std::fs::File::create(dir.join(format!("train_log_cl_{seed}.csv")))?;
        runs.cl.log.write_csv(std::io::BufWriter::new(f), manifest)?;
        let f = std::fs::File::create(dir.join(format!("train_log_naive_{seed}.csv")))?;
        runs.naive.log.write_csv(std::io::BufWriter::new(f), manifest)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_pipeline_runs() {
        let cfg = ExperimentConfig {
            containers: 3,
            seeds: vec![0, 1],
            total_steps: 256 * 10,
            ppo: PpoConfig {
                rollout_steps: 256,
                n_envs: 2,
                minibatch_size: 64,
                epochs_per_update: 1,
                hidden: vec![8],
                ..Default::default()
            },
            pair_data: PairRolloutConfig {
                repetitions: 400,
                ..Default::default()
            },
            cm: CmTrainConfig {
                n_trees: 5,
                ..Default::default()
            },
            theta_grid: vec![0.5, 1.0],
            n_rollouts: 2,
            sweep_rollouts: 1,
            ..Default::default()
        };
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        let res = run_experiment(&cfg).unwrap();
        for r in res.reports() {
            assert_eq!(r.rows.len(), 4);
        }
        assert_eq!(res.sweep.rows.len(), 2);
        let s = summary(&res.reports(), Some("abc"));
        assert_eq!(s.rows.len(), 6);
        let dir = tempfile::tempdir().unwrap();
        write_experiment(&res, dir.path(), Some("abc")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("eval_cl_cm.csv")).unwrap();
        assert!(csv.starts_with("# abc\n"));
        assert_eq!(csv.lines().count(), 2 + 4);
    }
}
