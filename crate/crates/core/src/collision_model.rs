//! Gradient-boosted decision trees for pairwise collision probability.
//!
//! Trees are grown level by level on the logistic-loss gradient and hessian
//! (Newton leaves `-G / (H + l2)`, split gain
//! `GL²/(HL+l2) + GR²/(HR+l2) - G²/(H+l2)`), using exact greedy split search
//! over presorted feature columns. Positives can be up-weighted.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision_data::{CollisionSample, N_FEATURES};
use crate::rng::seeded;
use crate::{Error, Result};

pub const MODEL_FILE_VERSION: u32 = 1;
const MODEL_FORMAT: &str = "bunker-collision-model";
const MARGIN_CLAMP: f64 = 30.0;

pub fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-MARGIN_CLAMP, MARGIN_CLAMP);
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        #[serde(rename = "f")]
        feature: usize,
        #[serde(rename = "t")]
        threshold: f64,
        #[serde(rename = "l")]
        left: usize,
        #[serde(rename = "r")]
        right: usize,
    },
    Leaf {
        #[serde(rename = "leaf")]
        value: f64,
    },
}

/// Binary tree stored as a node array, root at index 0. Samples with
/// `x[feature] < threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            match self.nodes[k] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    k = if x[feature] < threshold { left } else { right };
                }
            }
        }
    }

    /// Number of internal nodes visited for `x`.
    pub fn path_len(&self, x: &[f64]) -> usize {
        let (mut k, mut n) = (0, 0);
        while let Node::Split { feature, threshold, left, right } = self.nodes[k] {
            n += 1;
            k = if x[feature] < threshold { left } else { right };
        }
        n
    }

    pub fn depth(&self) -> usize {
        fn go(t: &DecisionTree, k: usize) -> usize {
            match t.nodes[k] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }

    fn validate(&self, n_features: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Format("empty tree".into()));
        }
        let n = self.nodes.len();
        let mut parents = vec![0usize; n];
        for (k, node) in self.nodes.iter().enumerate() {
            match *node {
                Node::Leaf { value } if !value.is_finite() => {
                    return Err(Error::Format(format!("non-finite leaf at node {k}")));
                }
                Node::Split { feature, threshold, left, right } => {
                    if feature >= n_features || !threshold.is_finite() {
                        return Err(Error::Format(format!("bad split at node {k}")));
                    }
                    // children after parent rules out cycles
                    if left <= k || right <= k || left >= n || right >= n || left == right {
                        return Err(Error::Format(format!("bad child index at node {k}")));
                    }
                    parents[left] += 1;
                    parents[right] += 1;
                }
                _ => {}
            }
        }
        if parents[0] != 0 || parents[1..].iter().any(|&p| p != 1) {
            return Err(Error::Format("nodes do not form a tree".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedEnsemble {
    pub trees: Vec<DecisionTree>,
    pub learning_rate: f64,
    /// Initial log-odds.
    pub base_score: f64,
    pub n_features: usize,
}

impl BoostedEnsemble {
    pub fn constant(base_score: f64, learning_rate: f64) -> Self {
        Self {
            trees: Vec::new(),
            learning_rate,
            base_score,
            n_features: N_FEATURES,
        }
    }

    pub fn margin(&self, x: &[f64]) -> f64 {
        self.base_score + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    /// Collision probability for one feature vector.
    pub fn predict_proba(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.n_features {
            return Err(Error::Dimension {
                what: "collision features",
                expected: self.n_features,
                got: features.len(),
            });
        }
        Ok(sigmoid(self.margin(features)))
    }

    pub fn to_json(&self, manifest: Option<&str>) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_FILE_VERSION,
            manifest: manifest.map(str::to_owned),
            n_features: self.n_features,
            base_score: self.base_score,
            learning_rate: self.learning_rate,
            trees: self.trees.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value =
            serde_json::from_str(s).map_err(|e| Error::Format(format!("collision model: {e}")))?;
        match v.get("version").and_then(|x| x.as_u64()) {
            Some(ver) if ver == MODEL_FILE_VERSION as u64 => {}
            Some(ver) => {
                return Err(Error::Version {
                    kind: "collision model",
                    expected: MODEL_FILE_VERSION,
                    found: ver as u32,
                })
            }
            None => return Err(Error::Format("collision model: missing version".into())),
        }
        let file: ModelFile =
            serde_json::from_value(v).map_err(|e| Error::Format(format!("collision model: {e}")))?;
        if file.format != MODEL_FORMAT {
            return Err(Error::Format(format!("not a collision model (format {:?})", file.format)));
        }
        if !file.base_score.is_finite() || !(file.learning_rate > 0.0 && file.learning_rate <= 1.0) {
            return Err(Error::Format("collision model: bad base_score or learning_rate".into()));
        }
        for t in &file.trees {
            t.validate(file.n_features)?;
        }
        Ok(Self {
            trees: file.trees,
            learning_rate: file.learning_rate,
            base_score: file.base_score,
            n_features: file.n_features,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, manifest: Option<&str>) -> Result<()> {
        std::fs::write(path, self.to_json(manifest)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    manifest: Option<String>,
    n_features: usize,
    base_score: f64,
    learning_rate: f64,
    trees: Vec<DecisionTree>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmTrainConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    /// `None` weights positives by negatives / positives.
    pub positive_class_weight: Option<f64>,
    pub validation_fraction: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for CmTrainConfig {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_depth: 4,
            learning_rate: 0.1,
            min_samples_leaf: 20,
            positive_class_weight: None,
            validation_fraction: 0.2,
            l2: 1.0,
            seed: 0,
        }
    }
}

impl CmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.max_depth == 0 {
            return Err(Error::Config("n_trees and max_depth must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config("learning_rate must be in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        if self.positive_class_weight.is_some_and(|w| !(w > 0.0)) || !(self.l2 >= 0.0) {
            return Err(Error::Config("class weight must be positive, l2 nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmMetrics {
    pub auc: f64,
    pub logloss: f64,
    pub recall_target: f64,
    /// Best precision among thresholds reaching `recall_target`.
    pub precision_at_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub auc: f64,
    pub logloss: f64,
    pub positive_rate: f64,
    pub n_train: usize,
    pub n_holdout: usize,
    /// False when the holdout lacked a class and the training rows were used.
    pub on_holdout: bool,
    pub positive_class_weight: f64,
    /// Weighted training log-loss before the first tree and after each one.
    pub train_logloss: Vec<f64>,
}

/// Area under the ROC curve via the rank-sum statistic (ties get mid-ranks).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("AUC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && scores[idx[e + 1]] == scores[idx[k]] {
            e += 1;
        }
        let mid = (k + e) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=e] {
            if labels[i] == 1 {
                rank_sum += mid;
            }
        }
        k = e + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn logloss(probs: &[f64], labels: &[u8]) -> f64 {
    let n = probs.len().max(1) as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(1e-15, 1.0 - 1e-15);
            if y == 1 { -p.ln() } else { -(1.0 - p).ln() }
        })
        .sum::<f64>()
        / n
}

fn precision_at_recall(scores: &[f64], labels: &[u8], target: f64) -> f64 {
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut best) = (0.0, 0.0, 0.0f64);
    let mut k = 0;
    while k < idx.len() {
        // consume a whole tie group before measuring
        let s = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == s {
            if labels[idx[k]] == 1 { tp += 1.0 } else { fp += 1.0 }
            k += 1;
        }
        if tp / pos >= target {
            best = best.max(tp / (tp + fp));
        }
    }
    best
}

pub fn evaluate_cm(ensemble: &BoostedEnsemble, holdout: &[CollisionSample]) -> Result<CmMetrics> {
    let probs = holdout
        .iter()
        .map(|s| ensemble.predict_proba(&s.features))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = holdout.iter().map(|s| s.label).collect();
    Ok(CmMetrics {
        auc: auc(&probs, &labels)?,
        logloss: logloss(&probs, &labels),
        recall_target: 0.9,
        precision_at_recall: precision_at_recall(&probs, &labels, 0.9),
    })
}

#[derive(Clone, Copy, Default)]
struct Stats {
    g: f64,
    h: f64,
    n: usize,
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

const NO_NODE: u32 = u32::MAX;

/// Fits one tree on the given gradients/hessians.
fn grow_tree(
    cols: &[Vec<f64>],
    sorted: &[Vec<u32>],
    grad: &[f64],
    hess: &[f64],
    cfg: &CmTrainConfig,
) -> (DecisionTree, Vec<f64>) {
    let n = grad.len();
    let leaf_value = |s: &Stats| -s.g / (s.h + cfg.l2);
    let score = |g: f64, h: f64| g * g / (h + cfg.l2);

    let mut nodes: Vec<Node> = vec![Node::Leaf { value: 0.0 }];
    // frontier slot per row; NO_NODE once the row has settled in a leaf
    let mut slot_of: Vec<u32> = vec![0; n];
    let mut frontier: Vec<usize> = vec![0];
    let mut stats: Vec<Stats> = vec![Stats {
        g: grad.iter().sum(),
        h: hess.iter().sum(),
        n,
    }];

    for depth in 0..=cfg.max_depth {
        if frontier.is_empty() {
            break;
        }
        let m = frontier.len();
        let best: Vec<Option<Candidate>> = if depth == cfg.max_depth {
            vec![None; m]
        } else {
            let per_feature: Vec<Vec<Option<Candidate>>> = (0..cols.len())
                .into_par_iter()
                .map(|f| {
                    let col = &cols[f];
                    let mut left = vec![Stats::default(); m];
                    let mut last = vec![f64::NAN; m];
                    let mut best: Vec<Option<Candidate>> = vec![None; m];
                    for &r in &sorted[f] {
                        let r = r as usize;
                        let s = slot_of[r];
                        if s == NO_NODE {
                            continue;
                        }
                        let s = s as usize;
                        let x = col[r];
                        let l = &mut left[s];
                        let tot = &stats[s];
                        if l.n > 0 && x > last[s] && l.n >= cfg.min_samples_leaf && tot.n - l.n >= cfg.min_samples_leaf {
                            let gain = score(l.g, l.h) + score(tot.g - l.g, tot.h - l.h) - score(tot.g, tot.h);
                            if best[s].is_none_or(|b| gain > b.gain) {
                                best[s] = Some(Candidate {
                                    gain,
                                    feature: f,
                                    threshold: last[s] + (x - last[s]) / 2.0,
                                });
                            }
                        }
                        l.g += grad[r];
                        l.h += hess[r];
                        l.n += 1;
                        last[s] = x;
                    }
                    best
                })
                .collect();
            (0..m)
                .map(|s| {
                    per_feature
                        .iter()
                        .filter_map(|b| b[s])
                        .fold(None, |acc: Option<Candidate>, c| match acc {
                            Some(a) if a.gain >= c.gain => Some(a),
                            _ => Some(c),
                        })
                        .filter(|c| c.gain > 1e-12)
                })
                .collect()
        };

        let mut next_frontier = Vec::new();
        let mut next_stats = Vec::new();
        // new slot ids for (left, right) children of each splitting node
        let mut child_slots: Vec<Option<(u32, u32)>> = vec![None; m];
        for s in 0..m {
            let node = frontier[s];
            match best[s] {
                Some(c) => {
                    let (l, r) = (nodes.len(), nodes.len() + 1);
                    nodes.push(Node::Leaf { value: 0.0 });
                    nodes.push(Node::Leaf { value: 0.0 });
                    nodes[node] = Node::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left: l,
                        right: r,
                    };
                    child_slots[s] = Some((next_frontier.len() as u32, next_frontier.len() as u32 + 1));
                    next_frontier.push(l);
                    next_frontier.push(r);
                    next_stats.push(Stats::default());
                    next_stats.push(Stats::default());
                }
                None => {
                    nodes[node] = Node::Leaf {
                        value: leaf_value(&stats[s]),
                    };
                }
            }
        }
        for r in 0..n {
            let s = slot_of[r];
            if s == NO_NODE {
                continue;
            }
            match (child_slots[s as usize], nodes[frontier[s as usize]]) {
                (Some((l, rr)), Node::Split { feature, threshold, .. }) => {
                    let c = if cols[feature][r] < threshold { l } else { rr };
                    slot_of[r] = c;
                    let st = &mut next_stats[c as usize];
                    st.g += grad[r];
                    st.h += hess[r];
                    st.n += 1;
                }
                _ => slot_of[r] = NO_NODE,
            }
        }
        frontier = next_frontier;
        stats = next_stats;
    }
    let tree = DecisionTree { nodes };
    let outputs = (0..n)
        .map(|r| {
            let x: Vec<f64> = cols.iter().map(|c| c[r]).collect();
            tree.predict(&x)
        })
        .collect();
    (tree, outputs)
}

fn weighted_logloss(margins: &[f64], labels: &[u8], weights: &[f64]) -> f64 {
    let wsum: f64 = weights.iter().sum();
    margins
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((&z, &y), &w)| {
            // log(1 + e^z) - y z, computed stably
            let sp = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            w * (sp - y as f64 * z)
        })
        .sum::<f64>()
        / wsum
}

/// Trains the classifier and reports metrics on a held-out split.
pub fn train_cm(dataset: &[CollisionSample], config: &CmTrainConfig) -> Result<(BoostedEnsemble, TrainReport)> {
    config.validate()?;
    let pos = dataset.iter().filter(|s| s.label == 1).count();
    if pos == 0 || pos == dataset.len() {
        return Err(Error::DegenerateLabels(format!(
            "{pos} positives among {} samples",
            dataset.len()
        )));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut seeded(config.seed));
    let n_hold = (dataset.len() as f64 * config.validation_fraction).floor() as usize;
    let (hold_idx, train_idx) = idx.split_at(n_hold);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    let train: Vec<&CollisionSample> = train_idx.iter().map(|&k| &dataset[k]).collect();
    let labels: Vec<u8> = train.iter().map(|s| s.label).collect();
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels("training split has a single class".into()));
    }
    let pw = config.positive_class_weight.unwrap_or(n_neg as f64 / n_pos as f64);
    let weights: Vec<f64> = labels.iter().map(|&y| if y == 1 { pw } else { 1.0 }).collect();
    let rate = n_pos as f64 / labels.len() as f64;
    let base_score = (rate / (1.0 - rate)).ln();

    let cols: Vec<Vec<f64>> = (0..N_FEATURES)
        .map(|f| train.iter().map(|s| s.features[f]).collect())
        .collect();
    let sorted: Vec<Vec<u32>> = cols
        .par_iter()
        .map(|c| {
            let mut o: Vec<u32> = (0..c.len() as u32).collect();
            o.sort_by(|&a, &b| c[a as usize].total_cmp(&c[b as usize]));
            o
        })
        .collect();

    let mut ens = BoostedEnsemble::constant(base_score, config.learning_rate);
    let mut margins = vec![base_score; train.len()];
    let mut history = vec![weighted_logloss(&margins, &labels, &weights)];
    let mut grad = vec![0.0; train.len()];
    let mut hess = vec![0.0; train.len()];
    for _ in 0..config.n_trees {
        for r in 0..train.len() {
            let p = sigmoid(margins[r]);
            grad[r] = weights[r] * (p - labels[r] as f64);
            hess[r] = (weights[r] * p * (1.0 - p)).max(1e-16);
        }
        let (tree, out) = grow_tree(&cols, &sorted, &grad, &hess, config);
        for (m, o) in margins.iter_mut().zip(&out) {
            *m += config.learning_rate * o;
        }
        ens.trees.push(tree);
        history.push(weighted_logloss(&margins, &labels, &weights));
    }

    let holdout: Vec<CollisionSample> = hold_idx.iter().map(|&k| dataset[k].clone()).collect();
    let hold_pos = holdout.iter().filter(|s| s.label == 1).count();
    let on_holdout = hold_pos > 0 && hold_pos < holdout.len();
    let metrics = if on_holdout {
        evaluate_cm(&ens, &holdout)?
    } else {
        let tr: Vec<CollisionSample> = train.iter().map(|&s| s.clone()).collect();
        evaluate_cm(&ens, &tr)?
    };
    let report = TrainReport {
        auc: metrics.auc,
        logloss: metrics.logloss,
        positive_rate: pos as f64 / dataset.len() as f64,
        n_train: train.len(),
        n_holdout: holdout.len(),
        on_holdout,
        positive_class_weight: pw,
        train_logloss: history,
    };
    Ok((ens, report))
}
