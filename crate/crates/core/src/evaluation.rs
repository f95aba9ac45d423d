//! Single-step link-prediction evaluation: held-out split construction,
//! Hadamard pair features, an L2-regularized logistic classifier, and
//! micro/macro ROC-AUC aggregation over seeds.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::graph::{DynamicGraph, NodeId};
use crate::model::EmbeddingTable;
use crate::seeds::{self, stream};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("snapshot {snapshot} has {links} links ({usable} usable after validation); need at least 4")]
    TooFewLinks {
        snapshot: usize,
        links: usize,
        usable: usize,
    },
    #[error("snapshot {snapshot}: need {needed} distinct non-links among active nodes, only {available} exist")]
    NegativePool {
        snapshot: usize,
        needed: usize,
        available: usize,
    },
    #[error("feature dimensions differ: {lhs} vs {rhs}")]
    DimMismatch { lhs: usize, rhs: usize },
    #[error("labels are all {label}; need both classes")]
    SingleClass { label: bool },
    #[error("non-finite feature at example {index}")]
    NonFinite { index: usize },
    #[error("evaluation step {step} out of range (graph has {steps} snapshots)")]
    StepRange { step: usize, steps: usize },
    #[error("no evaluation seeds provided")]
    NoSeeds,
    #[error("no embedding table provided for step {step}")]
    MissingTable { step: usize },
    #[error("empty example set")]
    Empty,
}

/// One scored node pair with its link label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkExample {
    pub u: NodeId,
    pub v: NodeId,
    pub label: bool,
}

/// Held-out link-prediction instance for snapshot t+1.
#[derive(Debug, Clone)]
pub struct EvalSplit {
    /// The predicted snapshot's 1-based time index (t+1).
    pub snapshot: usize,
    /// 25% of examples, class-balanced.
    pub train: Vec<LinkExample>,
    /// The remaining 75%, class-balanced.
    pub test: Vec<LinkExample>,
    /// Links reserved for hyperparameter tuning, with equal sampled
    /// negatives; disjoint from train and test.
    pub validation: Vec<LinkExample>,
}

#[derive(Debug, Clone)]
pub struct SplitOptions {
    /// Fraction of links reserved for validation before the 25/75 split.
    pub validation_fraction: f64,
    /// Fraction of examples (per class) used for downstream training.
    pub train_fraction: f64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            validation_fraction: 0.2,
            train_fraction: 0.25,
        }
    }
}

/// Builds the evaluation split for embeddings at step t predicting snapshot
/// t+1. Negatives are uniform distinct non-links among nodes active at t+1.
pub fn build_eval_split(
    g: &DynamicGraph,
    t: usize,
    seed: u64,
    opts: &SplitOptions,
) -> Result<EvalSplit, EvalError> {
    if t == 0 || t + 1 > g.steps() {
        return Err(EvalError::StepRange {
            step: t,
            steps: g.steps(),
        });
    }
    let snapshot = g.snapshot(t + 1).expect("range checked");
    let mut rng = seeds::rng(seed, &[stream::EVAL_SPLIT, (t + 1) as u64]);

    let mut links: Vec<(NodeId, NodeId)> =
        snapshot.edges().iter().map(|&(u, v, _)| (u, v)).collect();
    let total_links = links.len();
    links.shuffle(&mut rng);
    let val_count = (opts.validation_fraction * total_links as f64).floor() as usize;
    let val_links: Vec<(NodeId, NodeId)> = links.drain(..val_count).collect();
    let mut positives = links;
    if positives.len() < 4 {
        return Err(EvalError::TooFewLinks {
            snapshot: t + 1,
            links: total_links,
            usable: positives.len(),
        });
    }

    // Enumerate the non-link pool among active nodes, then draw without
    // replacement via a seeded partial shuffle. This keeps negative sampling
    // uniform while guaranteeing termination on dense snapshots.
    let active = snapshot.active_nodes();
    let mut pool: Vec<(NodeId, NodeId)> = Vec::new();
    for (i, &u) in active.iter().enumerate() {
        for &v in &active[i + 1..] {
            if !snapshot.has_link(u, v) {
                pool.push((u, v));
            }
        }
    }
    let needed = positives.len() + val_links.len();
    if pool.len() < needed {
        return Err(EvalError::NegativePool {
            snapshot: t + 1,
            needed,
            available: pool.len(),
        });
    }
    for k in 0..needed {
        let j = k + rng.gen_range(0..pool.len() - k);
        pool.swap(k, j);
    }
    let mut negatives: Vec<(NodeId, NodeId)> = pool[..positives.len()].to_vec();
    let val_negatives: Vec<(NodeId, NodeId)> = pool[positives.len()..needed].to_vec();

    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);
    let per_class_train = (opts.train_fraction * positives.len() as f64).floor() as usize;
    let example = |pairs: &[(NodeId, NodeId)], label: bool| {
        pairs
            .iter()
            .map(|&(u, v)| LinkExample { u, v, label })
            .collect::<Vec<_>>()
    };
    let mut train = example(&positives[..per_class_train], true);
    train.extend(example(&negatives[..per_class_train], false));
    let mut test = example(&positives[per_class_train..], true);
    test.extend(example(&negatives[per_class_train..], false));
    let mut validation = example(&val_links, true);
    validation.extend(example(&val_negatives, false));

    Ok(EvalSplit {
        snapshot: t + 1,
        train,
        test,
        validation,
    })
}

/// Elementwise product feature for a node pair.
pub fn hadamard_features(e_u: &[f64], e_v: &[f64]) -> Result<Vec<f64>, EvalError> {
    if e_u.len() != e_v.len() {
        return Err(EvalError::DimMismatch {
            lhs: e_u.len(),
            rhs: e_v.len(),
        });
    }
    Ok(e_u.iter().zip(e_v).map(|(&a, &b)| a * b).collect())
}

fn sigma(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Linear classifier over pair features.
#[derive(Debug, Clone)]
pub struct Logistic {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Logistic {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(&w, &v)| w * v).sum::<f64>() + self.bias
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        sigma(self.score(x))
    }
}

fn check_features(features: &[Vec<f64>], labels: &[bool]) -> Result<usize, EvalError> {
    if features.is_empty() {
        return Err(EvalError::Empty);
    }
    let dim = features[0].len();
    for (i, f) in features.iter().enumerate() {
        if f.len() != dim {
            return Err(EvalError::DimMismatch {
                lhs: dim,
                rhs: f.len(),
            });
        }
        if f.iter().any(|x| !x.is_finite()) {
            return Err(EvalError::NonFinite { index: i });
        }
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(EvalError::SingleClass { label: labels[0] });
    }
    Ok(dim)
}

/// Mean binary cross-entropy plus (l2/2)||w||^2, bias unregularized.
fn logistic_objective(w: &[f64], b: f64, features: &[Vec<f64>], labels: &[bool], l2: f64) -> f64 {
    let n = features.len() as f64;
    let mut total = 0.0;
    for (x, &y) in features.iter().zip(labels) {
        let s = w.iter().zip(x).map(|(&wi, &xi)| wi * xi).sum::<f64>() + b;
        // -ln sigma(s) = softplus(-s); -ln(1 - sigma(s)) = softplus(s)
        total += if y { softplus(-s) } else { softplus(s) };
    }
    total / n + 0.5 * l2 * w.iter().map(|&wi| wi * wi).sum::<f64>()
}

/// Full-batch gradient descent with Armijo backtracking line search.
pub fn logistic_fit(
    features: &[Vec<f64>],
    labels: &[bool],
    l2: f64,
    iters: usize,
) -> Result<Logistic, EvalError> {
    let dim = check_features(features, labels)?;
    let n = features.len() as f64;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut f_cur = logistic_objective(&w, b, features, labels, l2);
    for _ in 0..iters {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            let s = w.iter().zip(x).map(|(&wi, &xi)| wi * xi).sum::<f64>() + b;
            let r = sigma(s) - if y { 1.0 } else { 0.0 };
            for (gwi, &xi) in gw.iter_mut().zip(x) {
                *gwi += r * xi;
            }
            gb += r;
        }
        for (gwi, &wi) in gw.iter_mut().zip(&w) {
            *gwi = *gwi / n + l2 * wi;
        }
        gb /= n;
        let g_sq = gw.iter().map(|&g| g * g).sum::<f64>() + gb * gb;
        if g_sq.sqrt() < 1e-10 {
            break;
        }
        let mut step = 1.0;
        loop {
            let w_new: Vec<f64> = w.iter().zip(&gw).map(|(&wi, &gi)| wi - step * gi).collect();
            let b_new = b - step * gb;
            let f_new = logistic_objective(&w_new, b_new, features, labels, l2);
            if f_new <= f_cur - 1e-4 * step * g_sq || step < 1e-12 {
                w = w_new;
                b = b_new;
                f_cur = f_new;
                break;
            }
            step *= 0.5;
        }
    }
    Ok(Logistic { weights: w, bias: b })
}

/// Rank-statistic ROC-AUC with midrank tie handling. Equals the probability
/// that a random positive outscores a random negative, ties counting 1/2.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass { label: labels[0] });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Midranks: tied scores share the average of their 1-based rank range.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    /// Ridge strengths tried on the validation links; first entry is the
    /// fallback when no validation set exists.
    pub l2_grid: Vec<f64>,
    pub iterations: usize,
    pub split: SplitOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            l2_grid: vec![0.01, 0.1, 1.0],
            iterations: 300,
            split: SplitOptions::default(),
        }
    }
}

/// Aggregated link-prediction results.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Evaluation steps t (embeddings at t predict t+1).
    pub steps: Vec<usize>,
    /// per_step_aucs[i][s] = test AUC at steps[i] under seed s.
    pub per_step_aucs: Vec<Vec<f64>>,
    pub micro_per_seed: Vec<f64>,
    pub macro_per_seed: Vec<f64>,
    pub micro_mean: f64,
    pub micro_std: f64,
    pub macro_mean: f64,
    pub macro_std: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

struct PreparedFeatures {
    train: Vec<Vec<f64>>,
    train_labels: Vec<bool>,
    test: Vec<Vec<f64>>,
    test_labels: Vec<bool>,
    validation: Vec<Vec<f64>>,
    validation_labels: Vec<bool>,
}

fn prepare_features(
    table: &EmbeddingTable,
    t: usize,
    split: &EvalSplit,
) -> Result<PreparedFeatures, EvalError> {
    let featurize = |examples: &[LinkExample]| -> Result<(Vec<Vec<f64>>, Vec<bool>), EvalError> {
        let mut feats = Vec::with_capacity(examples.len());
        let mut labels = Vec::with_capacity(examples.len());
        for ex in examples {
            feats.push(hadamard_features(
                table.embedding(t, ex.u),
                table.embedding(t, ex.v),
            )?);
            labels.push(ex.label);
        }
        Ok((feats, labels))
    };
    let (train, train_labels) = featurize(&split.train)?;
    let (test, test_labels) = featurize(&split.test)?;
    let (validation, validation_labels) = featurize(&split.validation)?;

    // Standardize every set by the training statistics.
    let dim = train.first().map(|f| f.len()).unwrap_or(0);
    let n = train.len() as f64;
    let mut mu = vec![0.0; dim];
    for f in &train {
        for (m, &x) in mu.iter_mut().zip(f) {
            *m += x;
        }
    }
    for m in mu.iter_mut() {
        *m /= n;
    }
    let mut sd = vec![0.0; dim];
    for f in &train {
        for (s, (&x, &m)) in sd.iter_mut().zip(f.iter().zip(&mu)) {
            *s += (x - m) * (x - m);
        }
    }
    for s in sd.iter_mut() {
        *s = (*s / n).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let apply = |mut set: Vec<Vec<f64>>| {
        for f in set.iter_mut() {
            for ((x, &m), &s) in f.iter_mut().zip(&mu).zip(&sd) {
                *x = (*x - m) / s;
            }
        }
        set
    };
    Ok(PreparedFeatures {
        train: apply(train),
        train_labels,
        test: apply(test),
        test_labels,
        validation: apply(validation),
        validation_labels,
    })
}

/// Runs the single-step link-prediction protocol: per seed and per step,
/// build a split, tune the
/// ridge strength on the validation links, fit on the 25% train portion, and
/// score the 75% test portion. Micro-AUC pools test instances across steps;
/// macro-AUC averages per-step AUCs. Means and population standard deviations
/// are taken over seeds.
pub fn evaluate(
    g: &DynamicGraph,
    tables: &[(usize, EmbeddingTable)],
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if cfg.seeds.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    if tables.is_empty() {
        return Err(EvalError::MissingTable { step: 1 });
    }
    let mut steps: Vec<usize> = tables.iter().map(|(t, _)| *t).collect();
    steps.sort_unstable();
    let mut per_step_aucs = vec![Vec::with_capacity(cfg.seeds.len()); steps.len()];
    let mut micro_per_seed = Vec::with_capacity(cfg.seeds.len());
    let mut macro_per_seed = Vec::with_capacity(cfg.seeds.len());

    for &seed in &cfg.seeds {
        let mut pooled_scores = Vec::new();
        let mut pooled_labels = Vec::new();
        let mut step_aucs = Vec::with_capacity(steps.len());
        for (i, &t) in steps.iter().enumerate() {
            let table = tables
                .iter()
                .find(|(s, _)| *s == t)
                .map(|(_, tab)| tab)
                .ok_or(EvalError::MissingTable { step: t })?;
            let split = build_eval_split(g, t, seed, &cfg.split)?;
            let feats = prepare_features(table, t, &split)?;

            // Hyperparameter selection on validation links only.
            let mut l2 = cfg.l2_grid[0];
            let has_two_classes = feats.validation_labels.iter().any(|&l| l)
                && feats.validation_labels.iter().any(|&l| !l);
            if cfg.l2_grid.len() > 1 && has_two_classes {
                let mut best = f64::NEG_INFINITY;
                for &candidate in &cfg.l2_grid {
                    let model =
                        logistic_fit(&feats.train, &feats.train_labels, candidate, cfg.iterations)?;
                    let scores: Vec<f64> = feats
                        .validation
                        .iter()
                        .map(|x| model.probability(x))
                        .collect();
                    let auc = roc_auc(&scores, &feats.validation_labels)?;
                    if auc > best {
                        best = auc;
                        l2 = candidate;
                    }
                }
            }

            let model = logistic_fit(&feats.train, &feats.train_labels, l2, cfg.iterations)?;
            let scores: Vec<f64> = feats.test.iter().map(|x| model.probability(x)).collect();
            let auc = roc_auc(&scores, &feats.test_labels)?;
            step_aucs.push(auc);
            per_step_aucs[i].push(auc);
            pooled_scores.extend(scores);
            pooled_labels.extend(feats.test_labels);
        }
        micro_per_seed.push(roc_auc(&pooled_scores, &pooled_labels)?);
        macro_per_seed.push(mean(&step_aucs));
    }

    Ok(EvalReport {
        steps,
        per_step_aucs,
        micro_mean: mean(&micro_per_seed),
        micro_std: std_dev(&micro_per_seed),
        macro_mean: mean(&macro_per_seed),
        macro_std: std_dev(&macro_per_seed),
        micro_per_seed,
        macro_per_seed,
    })
}

impl EvalReport {
    /// CSV rows: step, AUC per seed, mean, std.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for i in 0..self.micro_per_seed.len() {
            out.push_str(&format!(",auc_seed{i}"));
        }
        out.push_str(",mean,std\n");
        for (i, &step) in self.steps.iter().enumerate() {
            out.push_str(&step.to_string());
            for auc in &self.per_step_aucs[i] {
                out.push_str(&format!(",{auc}"));
            }
            out.push_str(&format!(
                ",{},{}\n",
                mean(&self.per_step_aucs[i]),
                std_dev(&self.per_step_aucs[i])
            ));
        }
        out
    }

    /// One-line JSON summary of the pooled metrics.
    pub fn summary_json(&self) -> String {
        format!(
            "{{\"micro_mean\":{},\"micro_std\":{},\"macro_mean\":{},\"macro_std\":{}}}",
            serde_json::Number::from_f64(self.micro_mean).expect("finite"),
            serde_json::Number::from_f64(self.micro_std).expect("finite"),
            serde_json::Number::from_f64(self.macro_mean).expect("finite"),
            serde_json::Number::from_f64(self.macro_std).expect("finite"),
        )
    }
}
