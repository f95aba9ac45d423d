//! Mini-batch Adam training over evaluation steps, with gradient clipping,
//! decoupled weight decay, and checkpoint/resume support.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::graph::DynamicGraph;
use crate::layers::SnapshotDense;
use crate::model::{
    context_loss, dense_blocks, forward, forward_from_ids, init_params, is_decayed,
    EmbeddingTable, ModelConfig, ModelError, ParamStore, ScoredPair,
};
use crate::sampling::{
    random_walks, sample_pairs, NegativeTable, PairIndex, SamplingError, WalkConfig,
};
use crate::seeds::{self, stream};
use crate::tape::{ComputationTape, TensorError};

/// Exponent for degree-proportional negative sampling.
pub const NEGATIVE_POWER: f64 = 0.75;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config invalid: {0}")]
    BadConfig(String),
    #[error("loss diverged at step {time_step}, epoch {epoch}")]
    Diverged { time_step: usize, epoch: usize },
    #[error("non-finite gradient in parameter '{name}' after clipping")]
    NanGradient { name: String },
    #[error("graph has {steps} snapshots; need at least 2")]
    TooFewSteps { steps: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_per_step: usize,
    /// Positive context pairs sampled per snapshot per epoch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay, applied only to shared transforms and conv kernels.
    pub weight_decay: f64,
    pub gradient_clip_norm: f64,
    pub seed: u64,
    pub walks_per_node: usize,
    pub walk_length: usize,
    pub context_window: usize,
    /// Re-initialize parameters at every evaluation step instead of carrying
    /// them forward.
    pub cold_start: bool,
    /// Restrict each epoch's loss to the latest snapshot instead of summing
    /// over all t <= t*.
    pub latest_only: bool,
    /// First evaluation step t* (embeddings at t* predict links of t*+1).
    pub first_eval_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_step: 200,
            batch_size: 512,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 5e-4,
            gradient_clip_norm: 10.0,
            seed: 0,
            walks_per_node: 10,
            walk_length: 40,
            context_window: 10,
            cold_start: false,
            latest_only: false,
            first_eval_step: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
            ("gradient_clip_norm", self.gradient_clip_norm),
            ("walks_per_node", self.walks_per_node as f64),
            ("walk_length", self.walk_length as f64),
            ("context_window", self.context_window as f64),
            ("first_eval_step", self.first_eval_step as f64),
        ];
        for (name, value) in positive {
            if !value.is_finite() || value <= 0.0 {
                return Err(TrainError::BadConfig(format!("{name} must be positive")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::BadConfig("weight_decay must be >= 0".into()));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(beta > 0.0 && beta < 1.0) {
                return Err(TrainError::BadConfig(format!("{name} must lie in (0,1)")));
            }
        }
        Ok(())
    }
}

/// One logged optimization epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub time_step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Wall-clock companion to [`EpochRecord`], kept out of the deterministic
/// metrics stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochTiming {
    pub time_step: usize,
    pub epoch: usize,
    pub wall_ms: f64,
}

/// Scales all gradients so their global L2 norm is at most `clip`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, clip: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let factor = clip / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= factor;
            }
        }
    }
    norm
}

/// First and second moment vectors keyed by parameter name.
pub type MomentMap = BTreeMap<String, (Vec<f64>, Vec<f64>)>;

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    step_count: u64,
    moments: MomentMap,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            weight_decay: cfg.weight_decay,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Drops all moments and the step counter (used at evaluation-step
    /// boundaries so each step starts with fresh statistics).
    pub fn reset(&mut self) {
        self.step_count = 0;
        self.moments.clear();
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub(crate) fn state(&self) -> (u64, &MomentMap) {
        (self.step_count, &self.moments)
    }

    pub(crate) fn restore(&mut self, step_count: u64, moments: MomentMap) {
        self.step_count = step_count;
        self.moments = moments;
    }

    /// One update over every parameter. Gradients must already be clipped and
    /// finite; a non-finite gradient aborts with the parameter's name.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<(), TrainError> {
        for (name, grad) in grads {
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NanGradient { name: name.clone() });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, param) in store.iter_mut() {
            let Some(grad) = grads.get(name) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let data = param.data_mut();
            let decay = if self.weight_decay > 0.0 && is_decayed(name) {
                1.0 - self.learning_rate * self.weight_decay
            } else {
                1.0
            };
            for i in 0..data.len() {
                if decay != 1.0 {
                    data[i] *= decay;
                }
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Sampled training corpus for one snapshot within the current step.
struct SnapshotSlot {
    walks: Vec<Vec<crate::graph::NodeId>>,
    negative: Option<NegativeTable>,
}

struct StepCorpus {
    step: usize,
    index: PairIndex,
    slots: Vec<SnapshotSlot>,
}

/// Incremental trainer: owns parameters, optimizer state, and the loss log,
/// and can snapshot itself into a [`Checkpoint`] between epochs.
pub struct Trainer {
    graph: DynamicGraph,
    dense: Vec<SnapshotDense>,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    store: ParamStore,
    adam: Adam,
    current_step: usize,
    epoch_in_step: usize,
    total_epochs: usize,
    records: Vec<EpochRecord>,
    timings: Vec<EpochTiming>,
    history: Vec<(usize, ParamStore)>,
    corpus: Option<StepCorpus>,
}

impl Trainer {
    pub fn new(
        graph: DynamicGraph,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
    ) -> Result<Self, TrainError> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        if graph.steps() < 2 {
            return Err(TrainError::TooFewSteps {
                steps: graph.steps(),
            });
        }
        if train_cfg.first_eval_step >= graph.steps() {
            return Err(TrainError::BadConfig(format!(
                "first_eval_step {} leaves no snapshot to predict (T = {})",
                train_cfg.first_eval_step,
                graph.steps()
            )));
        }
        let store = init_params(
            &model_cfg,
            graph.node_count(),
            graph.steps(),
            train_cfg.seed,
        )?;
        let dense = dense_blocks(&graph);
        let adam = Adam::new(&train_cfg);
        let current_step = train_cfg.first_eval_step;
        Ok(Self {
            graph,
            dense,
            model_cfg,
            train_cfg,
            store,
            adam,
            current_step,
            epoch_in_step: 0,
            total_epochs: 0,
            records: Vec::new(),
            timings: Vec::new(),
            history: Vec::new(),
            corpus: None,
        })
    }

    /// Last evaluation step: embeddings at T-1 predict snapshot T.
    fn last_step(&self) -> usize {
        self.graph.steps() - 1
    }

    pub fn graph(&self) -> &DynamicGraph {
        &self.graph
    }

    /// Evaluation step currently being trained (1-based).
    pub fn current_step(&self) -> usize {
        self.current_step
    }

    pub fn finished(&self) -> bool {
        self.current_step > self.last_step()
    }

    pub fn total_epochs(&self) -> usize {
        self.total_epochs
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn timings(&self) -> &[EpochTiming] {
        &self.timings
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable parameter access, for fault-injection fixtures.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Parameter snapshots taken at the end of each completed step.
    pub fn step_params(&self) -> &[(usize, ParamStore)] {
        &self.history
    }

    /// Runs until done or until `max_new_epochs` more epochs have executed.
    /// Returns true when all steps have finished.
    pub fn run(&mut self, max_new_epochs: Option<usize>) -> Result<bool, TrainError> {
        let mut budget_used = 0usize;
        loop {
            if self.finished() {
                return Ok(true);
            }
            if self.epoch_in_step >= self.train_cfg.epochs_per_step {
                self.finalize_step();
                continue;
            }
            if let Some(max) = max_new_epochs {
                if budget_used >= max {
                    return Ok(false);
                }
            }
            self.ensure_step_ready()?;
            self.run_one_epoch()?;
            budget_used += 1;
        }
    }

    fn finalize_step(&mut self) {
        self.history.push((self.current_step, self.store.clone()));
        self.current_step += 1;
        self.epoch_in_step = 0;
        self.corpus = None;
    }

    fn ensure_step_ready(&mut self) -> Result<(), TrainError> {
        if matches!(&self.corpus, Some(c) if c.step == self.current_step) {
            return Ok(());
        }
        let t_star = self.current_step;
        if self.epoch_in_step == 0 {
            self.adam.reset();
            if self.train_cfg.cold_start && t_star > self.train_cfg.first_eval_step {
                self.store = init_params(
                    &self.model_cfg,
                    self.graph.node_count(),
                    self.graph.steps(),
                    seeds::key(self.train_cfg.seed, &[stream::INIT, t_star as u64]),
                )?;
            }
        }
        let walk_cfg = WalkConfig {
            walks_per_node: self.train_cfg.walks_per_node,
            walk_length: self.train_cfg.walk_length,
            window: self.train_cfg.context_window,
            seed: seeds::key(self.train_cfg.seed, &[stream::WALK, t_star as u64]),
        };
        let mut slots = Vec::with_capacity(t_star);
        for s in 1..=t_star {
            let snapshot = &self.graph.snapshots()[s - 1];
            let walks = random_walks(snapshot, &walk_cfg)?;
            let negative = NegativeTable::from_snapshot(snapshot, NEGATIVE_POWER).ok();
            slots.push(SnapshotSlot { walks, negative });
        }
        self.corpus = Some(StepCorpus {
            step: t_star,
            index: PairIndex::new(self.train_cfg.walk_length, self.train_cfg.context_window),
            slots,
        });
        Ok(())
    }

    fn run_one_epoch(&mut self) -> Result<(), TrainError> {
        let started = Instant::now();
        let t_star = self.current_step;
        let epoch = self.epoch_in_step;
        // Runaway updates surface as non-finite parameters (the loss itself
        // is clamp-protected); abort before forward so the last checkpoint
        // stays valid.
        if self.store.iter().any(|(_, t)| !t.all_finite()) {
            return Err(TrainError::Diverged {
                time_step: t_star,
                epoch,
            });
        }
        let corpus = self.corpus.as_ref().expect("corpus built by caller");

        let mut positives: Vec<ScoredPair> = Vec::new();
        let mut negatives: Vec<ScoredPair> = Vec::new();
        let first = if self.train_cfg.latest_only { t_star } else { 1 };
        for s in first..=t_star {
            let slot = &corpus.slots[s - 1];
            let mut pair_rng = seeds::rng(
                self.train_cfg.seed,
                &[stream::PAIR, t_star as u64, s as u64, epoch as u64],
            );
            let pairs = sample_pairs(
                &slot.walks,
                &corpus.index,
                self.train_cfg.batch_size,
                &mut pair_rng,
            );
            if pairs.is_empty() {
                continue;
            }
            if let Some(table) = &slot.negative {
                let mut neg_rng = seeds::rng(
                    self.train_cfg.seed,
                    &[stream::NEGATIVE, t_star as u64, s as u64, epoch as u64],
                );
                let per_pos = self.model_cfg.negatives_per_positive;
                for &(v, _) in &pairs {
                    negatives.extend(
                        table
                            .sample(per_pos, &mut neg_rng)
                            .into_iter()
                            .map(|u| (s, v, u)),
                    );
                }
            }
            positives.extend(pairs.into_iter().map(|(v, u)| (s, v, u)));
        }

        // Snapshots without a single usable pair (e.g. an empty first bin)
        // contribute nothing; an entirely empty epoch is logged as loss 0 and
        // skips the update so the metrics stream stays aligned.
        let loss = if positives.is_empty() {
            0.0
        } else {
            let mut tape = ComputationTape::new();
            let registered = self.store.register_all(&mut tape);
            // Every attention row has at least one unmasked entry by
            // construction (self-loops structurally, the diagonal
            // temporally), so a fully-masked row mid-epoch can only mean the
            // scores went non-finite: that is divergence, not a shape defect.
            let classify = |e: ModelError| match e {
                ModelError::Tensor(TensorError::FullyMaskedRow { .. }) => TrainError::Diverged {
                    time_step: t_star,
                    epoch,
                },
                other => TrainError::Model(other),
            };
            let big =
                forward_from_ids(&mut tape, &self.dense, &registered, &self.model_cfg, t_star)
                    .map_err(classify)?;
            let loss_id = context_loss(
                &mut tape,
                big,
                t_star,
                self.graph.node_count(),
                &positives,
                &negatives,
                self.model_cfg.negative_ratio,
                self.model_cfg.reduction,
            )
            .map_err(classify)?;
            let loss = tape.value(loss_id)?.data()[0];
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    time_step: t_star,
                    epoch,
                });
            }
            tape.backward(loss_id)?;
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (name, id) in registered.iter() {
                let g = match tape.grad(*id)? {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; self.store.get(name).expect("registered").data().len()],
                };
                grads.insert(name.clone(), g);
            }
            clip_global_norm(&mut grads, self.train_cfg.gradient_clip_norm);
            self.adam.step(&mut self.store, &grads)?;
            loss
        };

        self.records.push(EpochRecord {
            time_step: t_star,
            epoch,
            loss,
        });
        self.timings.push(EpochTiming {
            time_step: t_star,
            epoch,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        self.epoch_in_step += 1;
        self.total_epochs += 1;
        Ok(())
    }

    /// Embeddings for evaluation step t, from the parameters as they were
    /// when that step finished training.
    pub fn embeddings_for_step(&self, t: usize) -> Result<EmbeddingTable, TrainError> {
        let store = self
            .history
            .iter()
            .find(|(step, _)| *step == t)
            .map(|(_, s)| s)
            .ok_or_else(|| TrainError::BadConfig(format!("step {t} has not finished training")))?;
        Ok(forward(&self.graph, store, &self.model_cfg, t)?)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (step_count, moments) = self.adam.state();
        Checkpoint {
            model_cfg: self.model_cfg.clone(),
            train_cfg: self.train_cfg.clone(),
            current_step: self.current_step,
            epoch_in_step: self.epoch_in_step,
            total_epochs: self.total_epochs,
            adam_step_count: step_count,
            params: self
                .store
                .iter()
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
            moments: moments.clone(),
            history: self
                .history
                .iter()
                .map(|(step, store)| {
                    (
                        *step,
                        store.iter().map(|(n, t)| (n.clone(), t.clone())).collect(),
                    )
                })
                .collect(),
            records: self.records.clone(),
        }
    }

    /// Rebuilds a trainer in the exact state captured by `ckpt`. Walk corpora
    /// are re-derived from the seed, so continuation is bit-identical to an
    /// uninterrupted run.
    pub fn from_checkpoint(graph: DynamicGraph, ckpt: Checkpoint) -> Result<Self, TrainError> {
        let mut trainer = Self::new(graph, ckpt.model_cfg, ckpt.train_cfg)?;
        let mut store = ParamStore::new();
        for (name, tensor) in ckpt.params {
            store.insert(name, tensor);
        }
        trainer.store = store;
        trainer.adam.restore(ckpt.adam_step_count, ckpt.moments);
        trainer.current_step = ckpt.current_step;
        trainer.epoch_in_step = ckpt.epoch_in_step;
        trainer.total_epochs = ckpt.total_epochs;
        trainer.records = ckpt.records;
        trainer.history = ckpt
            .history
            .into_iter()
            .map(|(step, params)| {
                let mut s = ParamStore::new();
                for (name, tensor) in params {
                    s.insert(name, tensor);
                }
                (step, s)
            })
            .collect();
        Ok(trainer)
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            store: self.store,
            records: self.records,
            timings: self.timings,
            step_params: self.history,
        }
    }
}

/// Result of a completed training run.
pub struct TrainOutcome {
    pub store: ParamStore,
    pub records: Vec<EpochRecord>,
    pub timings: Vec<EpochTiming>,
    pub step_params: Vec<(usize, ParamStore)>,
}

/// Trains to completion and returns parameters, loss log, and per-step
/// parameter snapshots.
pub fn train(
    graph: DynamicGraph,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(graph, model_cfg, train_cfg)?;
    trainer.run(None)?;
    Ok(trainer.into_outcome())
}
