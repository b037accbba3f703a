//! Offline Monte Carlo data for the pairwise collision classifier.
//!
//! Each repetition samples fill parameters and higher peaks for a pair of
//! containers, starts both at a random fraction of their peak and evolves
//! them with the facility's random walk. The PU follows a scripted rule: when
//! free it empties whichever container of the pair has reached its peak
//! (largest excess first); otherwise, with probability `background_rate` per
//! free step, it takes a job from the rest of the facility. A timestep is
//! labelled 1 when the PU is busy and both containers are within
//! `proximity_margin` of (or above) their peaks.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::fill_step;
use crate::rng::{derive_seed, seeded, SimRng};
use crate::{Error, Result};

pub const N_FEATURES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairPuModel {
    pub busy_slope: f64,
    pub busy_offset: f64,
    /// Probability that a free PU starts an unrelated job in a timestep.
    pub background_rate: f64,
    /// Volume range of unrelated jobs (busy time follows the same formula).
    pub background_volume: (f64, f64),
}

impl Default for PairPuModel {
    fn default() -> Self {
        Self {
            busy_slope: 0.5,
            busy_offset: 3.0,
            background_rate: 0.08,
            background_volume: (12.0, 30.0),
        }
    }
}

impl PairPuModel {
    fn busy(&self, v: f64) -> u32 {
        ((self.busy_slope * v + self.busy_offset).ceil() as u32).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairRolloutConfig {
    pub mu_range: (f64, f64),
    pub sigma_range: (f64, f64),
    pub peak_range: (f64, f64),
    pub horizon: usize,
    pub repetitions: usize,
    /// Keep every `record_stride`-th timestep (from `tau = 1`).
    pub record_stride: usize,
    pub proximity_margin: f64,
    pub pu_model: PairPuModel,
    pub seed: u64,
}

impl Default for PairRolloutConfig {
    fn default() -> Self {
        Self {
            mu_range: (0.05, 0.5),
            sigma_range: (0.005, 0.05),
            peak_range: (24.0, 30.0),
            horizon: 100,
            repetitions: 100_000,
            record_stride: 10,
            proximity_margin: 3.0,
            pu_model: PairPuModel::default(),
            seed: 0,
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::Config(format!("{name}: need finite lo <= hi, got ({lo}, {hi})")));
    }
    Ok(())
}

impl PairRolloutConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("mu_range", self.mu_range)?;
        check_range("sigma_range", self.sigma_range)?;
        check_range("peak_range", self.peak_range)?;
        check_range("background_volume", self.pu_model.background_volume)?;
        if self.sigma_range.0 < 0.0 || self.peak_range.0 <= 0.0 {
            return Err(Error::Config("sigma must be >= 0 and peaks > 0".into()));
        }
        if self.horizon == 0 || self.record_stride == 0 {
            return Err(Error::Config("horizon and record_stride must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pu_model.background_rate) {
            return Err(Error::Config("background_rate must be a probability".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairParams {
    pub mu_i: f64,
    pub sigma_i: f64,
    pub mu_j: f64,
    pub sigma_j: f64,
    pub peak_i: f64,
    pub peak_j: f64,
}

fn uniform(rng: &mut SimRng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        // consume a draw so the stream layout does not depend on the ranges
        let _: f64 = rng.random();
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

pub fn sample_pair_params(config: &PairRolloutConfig, rng: &mut SimRng) -> PairParams {
    PairParams {
        mu_i: uniform(rng, config.mu_range),
        sigma_i: uniform(rng, config.sigma_range),
        mu_j: uniform(rng, config.mu_range),
        sigma_j: uniform(rng, config.sigma_range),
        peak_i: uniform(rng, config.peak_range),
        peak_j: uniform(rng, config.peak_range),
    }
}

/// Stored pair trajectory: state at each `tau` in `0..horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTrace {
    pub params: PairParams,
    pub v_i: Vec<f64>,
    pub v_j: Vec<f64>,
    pub pu_counter: Vec<u32>,
    pub labels: Vec<u8>,
}

impl PairTrace {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Collision label of one pair snapshot.
pub fn pair_label(v_i: f64, v_j: f64, peak_i: f64, peak_j: f64, pu_busy: bool, margin: f64) -> u8 {
    (pu_busy && v_i >= peak_i - margin && v_j >= peak_j - margin) as u8
}

/// Simulates one pair from initial volumes `init` for `config.horizon` steps.
pub fn simulate_pair_from(
    params: &PairParams,
    init: (f64, f64),
    config: &PairRolloutConfig,
    rng: &mut SimRng,
) -> PairTrace {
    let h = config.horizon;
    let pu = &config.pu_model;
    let mut tr = PairTrace {
        params: *params,
        v_i: Vec::with_capacity(h),
        v_j: Vec::with_capacity(h),
        pu_counter: Vec::with_capacity(h),
        labels: Vec::with_capacity(h),
    };
    let (mut vi, mut vj) = init;
    let mut counter: u32 = 0;
    for _ in 0..h {
        tr.v_i.push(vi);
        tr.v_j.push(vj);
        tr.pu_counter.push(counter);
        tr.labels.push(pair_label(vi, vj, params.peak_i, params.peak_j, counter > 0, config.proximity_margin));

        let u: f64 = rng.random();
        if counter == 0 {
            let ei = vi - params.peak_i;
            let ej = vj - params.peak_j;
            if ei >= 0.0 || ej >= 0.0 {
                if ei >= ej {
                    counter = pu.busy(vi);
                    vi = 0.0;
                } else {
                    counter = pu.busy(vj);
                    vj = 0.0;
                }
            } else if u < pu.background_rate {
                let v = uniform(rng, pu.background_volume);
                counter = pu.busy(v);
            }
        }
        vi = fill_step(vi, params.mu_i, params.sigma_i, rng);
        vj = fill_step(vj, params.mu_j, params.sigma_j, rng);
        counter = counter.saturating_sub(1);
    }
    tr
}

/// Simulates one pair with initial volumes uniform in `[0, peak)`.
pub fn simulate_pair(params: &PairParams, config: &PairRolloutConfig, rng: &mut SimRng) -> PairTrace {
    let init = (rng.random_range(0.0..params.peak_i), rng.random_range(0.0..params.peak_j));
    simulate_pair_from(params, init, config, rng)
}

/// Classifier input for one pair:
/// `[v_i, v_j, p_i - v_i, p_j - v_j, mu_i, sigma_i, mu_j, sigma_j, v_i_prev, v_j_prev]`.
#[allow(clippy::too_many_arguments)]
pub fn pair_features(
    v_i: f64,
    v_j: f64,
    peak_i: f64,
    peak_j: f64,
    mu_i: f64,
    sigma_i: f64,
    mu_j: f64,
    sigma_j: f64,
    v_i_prev: f64,
    v_j_prev: f64,
) -> [f64; N_FEATURES] {
    [
        v_i,
        v_j,
        peak_i - v_i,
        peak_j - v_j,
        mu_i,
        sigma_i,
        mu_j,
        sigma_j,
        v_i_prev,
        v_j_prev,
    ]
}

/// Features at `tau`; `None` at `tau = 0` (no lag) or past the trace end.
pub fn extract_features(trace: &PairTrace, tau: usize) -> Option<[f64; N_FEATURES]> {
    if tau == 0 || tau >= trace.len() {
        return None;
    }
    let p = &trace.params;
    Some(pair_features(
        trace.v_i[tau],
        trace.v_j[tau],
        p.peak_i,
        p.peak_j,
        p.mu_i,
        p.sigma_i,
        p.mu_j,
        p.sigma_j,
        trace.v_i[tau - 1],
        trace.v_j[tau - 1],
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionSample {
    #[serde(rename = "f")]
    pub features: [f64; N_FEATURES],
    #[serde(rename = "y")]
    pub label: u8,
    pub rep: usize,
    pub tau: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_samples: usize,
    pub n_positive: usize,
    /// 0 for an empty dataset.
    pub positive_rate: f64,
    pub repetitions: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
}

impl DatasetSummary {
    pub fn of(samples: &[CollisionSample], config: &PairRolloutConfig) -> Self {
        let n_positive = samples.iter().filter(|s| s.label == 1).count();
        Self {
            n_samples: samples.len(),
            n_positive,
            positive_rate: if samples.is_empty() { 0.0 } else { n_positive as f64 / samples.len() as f64 },
            repetitions: config.repetitions,
            seed: config.seed,
            manifest: None,
        }
    }
}

/// Trace of repetition `rep`, from its own derived generator.
pub fn repetition_trace(config: &PairRolloutConfig, rep: usize) -> PairTrace {
    let mut rng = seeded(derive_seed(config.seed, rep as u64));
    let params = sample_pair_params(config, &mut rng);
    simulate_pair(&params, config, &mut rng)
}

fn repetition_samples(config: &PairRolloutConfig, rep: usize) -> Vec<CollisionSample> {
    let tr = repetition_trace(config, rep);
    (1..tr.len())
        .step_by(config.record_stride)
        .filter_map(|tau| {
            extract_features(&tr, tau).map(|features| CollisionSample {
                features,
                label: tr.labels[tau],
                rep,
                tau,
            })
        })
        .collect()
}

/// All samples in repetition order. Repetitions are simulated in parallel;
/// the output does not depend on the worker count.
pub fn generate_samples(config: &PairRolloutConfig) -> Result<Vec<CollisionSample>> {
    config.validate()?;
    let chunks: Vec<Vec<CollisionSample>> = (0..config.repetitions)
        .into_par_iter()
        .map(|rep| repetition_samples(config, rep))
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

/// Streams the dataset to a JSON-lines file and writes a `.summary.json`
/// sidecar (carrying `manifest`, if given) next to it.
pub fn generate_dataset(
    config: &PairRolloutConfig,
    path: impl AsRef<Path>,
    manifest: Option<&str>,
) -> Result<DatasetSummary> {
    config.validate()?;
    let path = path.as_ref();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let (mut n, mut pos) = (0usize, 0usize);
    const BATCH: usize = 4096;
    for start in (0..config.repetitions).step_by(BATCH) {
        let end = (start + BATCH).min(config.repetitions);
        let batch: Vec<Vec<CollisionSample>> =
            (start..end).into_par_iter().map(|rep| repetition_samples(config, rep)).collect();
        for s in batch.iter().flatten() {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
            n += 1;
            pos += s.label as usize;
        }
    }
    w.flush()?;
    let summary = DatasetSummary {
        n_samples: n,
        n_positive: pos,
        positive_rate: if n == 0 { 0.0 } else { pos as f64 / n as f64 },
        repetitions: config.repetitions,
        seed: config.seed,
        manifest: manifest.map(str::to_owned),
    };
    std::fs::write(summary_path(path), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

pub fn summary_path(dataset: &Path) -> std::path::PathBuf {
    let mut name = dataset.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".summary.json");
    dataset.with_file_name(name)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<CollisionSample>> {
    use std::io::BufRead;
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: CollisionSample = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("dataset line {}: {e}", k + 1)))?;
        if s.label > 1 || !s.features.iter().all(|x| x.is_finite()) {
            return Err(Error::Format(format!("dataset line {}: bad label or feature", k + 1)));
        }
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relabel(tr: &PairTrace, margin: f64) -> Vec<u8> {
        let p = &tr.params;
        (0..tr.len())
            .map(|t| {
                let busy = tr.pu_counter[t] != 0;
                let near_i = tr.v_i[t] + margin >= p.peak_i;
                let near_j = tr.v_j[t] + margin >= p.peak_j;
                if busy && near_i && near_j { 1 } else { 0 }
            })
            .collect()
    }

    #[test]
    fn degenerate_ranges() {
        let cfg = PairRolloutConfig {
            mu_range: (0.2, 0.2),
            ..Default::default()
        };
        let mut rng = seeded(1);
        for _ in 0..100 {
            let p = sample_pair_params(&cfg, &mut rng);
            assert_eq!(p.mu_i, 0.2);
            assert_eq!(p.mu_j, 0.2);
        }
    }

    #[test]
    fn draws_within_range_and_seeded() {
        let cfg = PairRolloutConfig {
            mu_range: (0.1, 0.5),
            ..Default::default()
        };
        let mut rng = seeded(2);
        let draws: Vec<PairParams> = (0..10_000).map(|_| sample_pair_params(&cfg, &mut rng)).collect();
        assert!(draws.iter().all(|p| (0.1..0.5).contains(&p.mu_i) && (0.1..0.5).contains(&p.mu_j)));
        assert!(draws.iter().all(|p| (24.0..30.0).contains(&p.peak_i)));
        let mut rng2 = seeded(2);
        let again: Vec<PairParams> = (0..10_000).map(|_| sample_pair_params(&cfg, &mut rng2)).collect();
        assert_eq!(draws, again);
    }

    #[test]
    fn idle_pair_never_collides() {
        let cfg = PairRolloutConfig::default();
        let p = PairParams {
            mu_i: 0.0,
            sigma_i: 0.0,
            mu_j: 0.0,
            sigma_j: 0.0,
            peak_i: 27.0,
            peak_j: 25.0,
        };
        let tr = simulate_pair_from(&p, (0.0, 0.0), &cfg, &mut seeded(3));
        assert!(tr.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn engineered_collision() {
        // Both containers start just below their peaks while an unrelated job
        // occupies the PU: the first steps must be labelled.
        let cfg = PairRolloutConfig {
            horizon: 30,
            pu_model: PairPuModel {
                background_rate: 1.0,
                background_volume: (20.0, 20.0),
                ..Default::default()
            },
            ..Default::default()
        };
        let p = PairParams {
            mu_i: 0.1,
            sigma_i: 0.0,
            mu_j: 0.1,
            sigma_j: 0.0,
            peak_i: 27.0,
            peak_j: 25.0,
        };
        let tr = simulate_pair_from(&p, (25.0, 23.0), &cfg, &mut seeded(4));
        // tau 0: PU free; tau 1..: busy with a 13-step job, both within 3 of peak.
        assert_eq!(tr.labels[0], 0);
        assert_eq!(tr.pu_counter[1], 12);
        assert!(tr.labels[1..10].iter().all(|&l| l == 1));
        assert_eq!(tr.labels, relabel(&tr, cfg.proximity_margin));
    }

    #[test]
    fn labels_match_rescan() {
        let cfg = PairRolloutConfig {
            repetitions: 1000,
            ..Default::default()
        };
        let mut positives = 0;
        for rep in 0..cfg.repetitions {
            let tr = repetition_trace(&cfg, rep);
            assert_eq!(tr.labels, relabel(&tr, cfg.proximity_margin));
            positives += tr.labels.iter().filter(|&&l| l == 1).count();
        }
        assert!(positives > 0);
    }

    #[test]
    fn features_layout() {
        let cfg = PairRolloutConfig::default();
        let tr = repetition_trace(&cfg, 7);
        assert!(extract_features(&tr, 0).is_none());
        for tau in 1..tr.len() {
            let f = extract_features(&tr, tau).unwrap();
            assert_eq!(f.len(), N_FEATURES);
            assert_eq!(f[2], tr.params.peak_i - tr.v_i[tau]);
            assert_eq!(f[3], tr.params.peak_j - tr.v_j[tau]);
            assert_eq!(f[8], tr.v_i[tau - 1]);
            assert_eq!(f[9], tr.v_j[tau - 1]);
        }
        let at_peak = pair_features(27.0, 1.0, 27.0, 25.0, 0.1, 0.01, 0.2, 0.02, 26.9, 0.9);
        assert_eq!(at_peak[2], 0.0);
    }

    #[test]
    fn empty_and_deterministic_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let empty = PairRolloutConfig {
            repetitions: 0,
            ..Default::default()
        };
        let s = generate_dataset(&empty, dir.path().join("e.jsonl"), None).unwrap();
        assert_eq!(s.n_samples, 0);
        assert_eq!(s.positive_rate, 0.0);

        let cfg = PairRolloutConfig {
            repetitions: 300,
            seed: 9,
            ..Default::default()
        };
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        generate_dataset(&cfg, &a, None).unwrap();
        generate_dataset(&cfg, &b, Some("m")).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert!(summary_path(&a).exists());
        let back = read_dataset(&a).unwrap();
        assert_eq!(back, generate_samples(&cfg).unwrap());
    }

    #[test]
    fn worker_count_does_not_matter() {
        let cfg = PairRolloutConfig {
            repetitions: 200,
            ..Default::default()
        };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| generate_samples(&cfg)).unwrap();
        let b = four.install(|| generate_samples(&cfg)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn positive_rate_in_open_interval() {
        let cfg = PairRolloutConfig {
            repetitions: 10_000,
            ..Default::default()
        };
        let samples = generate_samples(&cfg).unwrap();
        let s = DatasetSummary::of(&samples, &cfg);
        assert!(s.positive_rate > 0.0 && s.positive_rate < 1.0, "rate {}", s.positive_rate);
    }
}
