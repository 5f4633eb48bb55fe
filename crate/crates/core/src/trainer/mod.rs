//! Per-task training loop and cross-task lifecycle.
//!
//! One task at a time: evict if the queue is full, create a fresh
//! reparameterized prompt and an all-ones aggregator sized for the new
//! queue, jointly optimize the new prompt, aggregator, shared prefix and
//! task head with Adam (adding the memory-retention term once the queue
//! has overflowed), early-stop on validation accuracy, then materialize
//! the prompt, freeze it into the queue, and emit an immutable snapshot.
//! Old tasks are always evaluated through their snapshots, which is what
//! makes backward transfer exactly zero by construction.
//!
//! Snapshots and resumable stream state live on disk as checkpoint
//! bundles; in-memory prompt storage stays bounded by the queue capacity
//! plus the shared prefix no matter how many tasks the stream has.

pub mod checkpoint;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{rebind, RankOneAggregator};
use crate::backbone::{FrozenBackbone, TaskHead};
use crate::error::{Error, Result};
use crate::metrics::{transfer_report, RMatrix, TransferReport};
use crate::numkernel::{adam_step, AdamState, Matrix, NodeId, Tape};
use crate::objectives::{
    mr_loss_jsd_on_tape, Discriminator, EtaSchedule, MrVariant, OldReference,
};
use crate::prompts::{EvictionPolicy, PromptQueue, ResidualMlpPrompt, Segment, SegmentTag};
use crate::taskstream::{derive_rng, SyntheticTask};
use checkpoint::{Bundle, BundleWriter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Bounded queue with eviction, aggregation, shared prefix, MR.
    QTuning,
    /// Identical lifecycle but an unbounded, never-evicted prompt list.
    PromptList,
    /// Fresh prompt and head per task; no queue, no prefix, no MR.
    PerTaskPrompt,
    /// Only the continually trained shared prefix plus per-task heads.
    SharedPromptOnly,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Self::QTuning => "qtuning",
            Self::PromptList => "progprompt_baseline",
            Self::PerTaskPrompt => "pertask_prompt",
            Self::SharedPromptOnly => "shared_prompt_only",
        }
    }

    fn uses_queue(&self) -> bool {
        matches!(self, Self::QTuning | Self::PromptList)
    }

    fn uses_new_prompt(&self) -> bool {
        !matches!(self, Self::SharedPromptOnly)
    }

    fn allows_prefix(&self) -> bool {
        !matches!(self, Self::PerTaskPrompt)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Validation evaluations without improvement before stopping.
    pub patience: usize,
    pub prompt_len: usize,
    pub q_size: usize,
    pub eviction: EvictionPolicy,
    pub eta_value: f64,
    pub mr_variant: MrVariant,
    pub aggregation: bool,
    pub shared_prefix: bool,
    pub prefix_len: usize,
    pub prompt_mlp_hidden: usize,
    pub disc_hidden: usize,
    pub disc_lr: f64,
    /// Discriminator updates per minibatch on the JSD route.
    pub disc_steps: usize,
    pub seed: u64,
    pub measure_fwt: bool,
    pub probe_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            learning_rate: 0.05,
            patience: 10,
            prompt_len: 10,
            q_size: 5,
            eviction: EvictionPolicy::DqPca,
            eta_value: 1e-2,
            mr_variant: MrVariant::Kl,
            aggregation: true,
            shared_prefix: true,
            prefix_len: 10,
            prompt_mlp_hidden: 64,
            disc_hidden: 64,
            disc_lr: 1e-3,
            disc_steps: 1,
            seed: 0,
            measure_fwt: true,
            probe_epochs: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.batch_size == 0
            || self.patience == 0
            || self.prompt_len == 0
            || self.q_size == 0
            || self.probe_epochs == 0
        {
            return Err(Error::InvalidConfig(
                "epochs, batch_size, patience, prompt_len, q_size and probe_epochs must be \
                 at least 1"
                    .into(),
            ));
        }
        if self.learning_rate <= 0.0 || self.disc_lr <= 0.0 {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if self.eta_value < 0.0 {
            return Err(Error::InvalidConfig("eta_value must be non-negative".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> EtaSchedule {
        EtaSchedule {
            q_size: self.q_size,
            eta_value: self.eta_value,
        }
    }
}

/// Frozen per-task bundle used for all later evaluation of this task.
#[derive(Clone)]
pub struct TaskInferenceSnapshot {
    pub task_id: usize,
    pub task_index: usize,
    pub prefix: Option<Matrix>,
    pub aggregator: Option<RankOneAggregator>,
    pub queue_segments: Vec<Segment>,
    pub head: TaskHead,
    pub backbone: Arc<FrozenBackbone>,
}

impl TaskInferenceSnapshot {
    /// All queue rows stacked; `None` when the snapshot holds no prompts.
    pub fn queue_stack(&self) -> Option<Matrix> {
        if self.queue_segments.is_empty() {
            return None;
        }
        let parts: Vec<&Matrix> = self.queue_segments.iter().map(|s| &s.rows).collect();
        Some(Matrix::concat_rows(&parts).expect("segments share embed dim"))
    }

    /// Queue rows with the snapshot's aggregator applied.
    pub fn scaled_queue(&self) -> Result<Option<Matrix>> {
        match self.queue_stack() {
            None => Ok(None),
            Some(stack) => match &self.aggregator {
                Some(agg) => Ok(Some(agg.apply(&stack)?)),
                None => Ok(Some(stack)),
            },
        }
    }

    /// Deterministic test accuracy of this frozen configuration.
    pub fn evaluate(&self, data: &crate::taskstream::Split) -> Result<f64> {
        let scaled = self.scaled_queue()?;
        accuracy_of(
            &self.backbone,
            self.prefix.as_ref(),
            scaled.as_ref(),
            &self.head,
            data,
        )
    }
}

/// Accuracy of a frozen configuration on a labeled split.
pub fn snapshot_eval(
    snapshot: &TaskInferenceSnapshot,
    data: &crate::taskstream::Split,
) -> Result<f64> {
    snapshot.evaluate(data)
}

fn accuracy_of(
    bb: &FrozenBackbone,
    prefix: Option<&Matrix>,
    scaled_queue: Option<&Matrix>,
    head: &TaskHead,
    data: &crate::taskstream::Split,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidData("empty evaluation split".into()));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= head.k) {
        return Err(Error::InvalidData(format!(
            "label {bad} outside the head's {} classes",
            head.k
        )));
    }
    let mut correct = 0usize;
    for (seq, &label) in data.sequences.iter().zip(&data.labels) {
        let logits = bb.forward(prefix, scaled_queue, seq, head)?;
        let pred = argmax(&logits);
        if pred == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub task_index: usize,
    pub epoch: usize,
    pub step: usize,
    pub l_q: f64,
    pub l_mr: f64,
    pub eta: f64,
    pub l_total: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_index: usize,
    pub task_id: usize,
    pub epochs_ran: usize,
    pub steps_ran: usize,
    pub mean_step_ms: f64,
    pub encoder_rows: usize,
    pub resident_prompt_floats: usize,
    pub eta: f64,
    pub best_val_acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub task_index: usize,
    pub row_importance: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub train_config: TrainConfig,
    pub n_tasks: usize,
    pub rmatrix: RMatrix,
    pub metrics: TransferReport,
    pub task_summaries: Vec<TaskSummary>,
    pub heatmaps: Vec<HeatmapRow>,
    pub peak_resident_prompt_floats: usize,
    pub train_log: Vec<StepLog>,
}

/// Mutable cross-task state plus run bookkeeping; checkpointed after
/// every task so any run can resume.
pub struct StreamState {
    pub tasks_done: usize,
    pub queue: PromptQueue,
    pub prefix: Option<Matrix>,
    pub rmatrix: RMatrix,
    pub train_log: Vec<StepLog>,
    pub task_summaries: Vec<TaskSummary>,
    pub heatmaps: Vec<HeatmapRow>,
}

// ---------------------------------------------------------------------
// Per-task training
// ---------------------------------------------------------------------

/// The per-task trainable modules. Which ones exist depends on the
/// method and the ablation toggles.
#[derive(Clone)]
struct TaskModel {
    prompt: Option<ResidualMlpPrompt>,
    aggregator: Option<RankOneAggregator>,
    prefix: Option<Matrix>,
    head: TaskHead,
}

impl TaskModel {
    fn param_entries(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        if let Some(p) = &self.prompt {
            out.push(("prompt.raw".into(), p.raw.clone()));
            out.push(("prompt.w1".into(), p.w1.clone()));
            out.push(("prompt.b1".into(), p.b1.clone()));
            out.push(("prompt.w2".into(), p.w2.clone()));
            out.push(("prompt.b2".into(), p.b2.clone()));
        }
        if let Some(a) = &self.aggregator {
            out.push(("agg.u".into(), a.u.clone()));
            out.push(("agg.v".into(), a.v.clone()));
        }
        if let Some(p) = &self.prefix {
            out.push(("prefix".into(), p.clone()));
        }
        out.push(("head.alpha".into(), self.head.alpha.clone()));
        out
    }

    fn value_mut(&mut self, name: &str) -> &mut Matrix {
        match name {
            "prompt.raw" => &mut self.prompt.as_mut().unwrap().raw,
            "prompt.w1" => &mut self.prompt.as_mut().unwrap().w1,
            "prompt.b1" => &mut self.prompt.as_mut().unwrap().b1,
            "prompt.w2" => &mut self.prompt.as_mut().unwrap().w2,
            "prompt.b2" => &mut self.prompt.as_mut().unwrap().b2,
            "agg.u" => &mut self.aggregator.as_mut().unwrap().u,
            "agg.v" => &mut self.aggregator.as_mut().unwrap().v,
            "prefix" => self.prefix.as_mut().unwrap(),
            "head.alpha" => &mut self.head.alpha,
            other => panic!("unknown parameter {other:?}"),
        }
    }
}

struct RegisteredModel {
    prompt: Option<crate::prompts::MlpPromptNodes>,
    u: Option<NodeId>,
    v: Option<NodeId>,
    prefix: Option<NodeId>,
    head: NodeId,
}

fn register_model(tape: &mut Tape, model: &TaskModel) -> Result<RegisteredModel> {
    let prompt = match &model.prompt {
        Some(p) => Some(p.register(tape, "prompt")?),
        None => None,
    };
    let (u, v) = match &model.aggregator {
        Some(a) => (
            Some(tape.param("agg.u", a.u.clone())?),
            Some(tape.param("agg.v", a.v.clone())?),
        ),
        None => (None, None),
    };
    let prefix = match &model.prefix {
        Some(p) => Some(tape.param("prefix", p.clone())?),
        None => None,
    };
    let head = tape.param("head.alpha", model.head.alpha.clone())?;
    Ok(RegisteredModel {
        prompt,
        u,
        v,
        prefix,
        head,
    })
}

/// Builds the scaled-queue node: frozen rows followed by the materialized
/// trainable prompt, elementwise-scaled by the rank-one aggregator.
fn scaled_queue_node(
    tape: &mut Tape,
    frozen_rows: &Matrix,
    reg: &RegisteredModel,
) -> Result<Option<NodeId>> {
    let mut parts = Vec::new();
    if frozen_rows.rows() > 0 {
        parts.push(tape.constant(frozen_rows.clone()));
    }
    if let Some(nodes) = &reg.prompt {
        parts.push(ResidualMlpPrompt::materialize_on_tape(tape, nodes)?);
    }
    if parts.is_empty() {
        return Ok(None);
    }
    let stacked = tape.concat_rows(&parts)?;
    match (reg.u, reg.v) {
        (Some(u), Some(v)) => Ok(Some(RankOneAggregator::apply_on_tape(tape, u, v, stacked)?)),
        _ => Ok(Some(stacked)),
    }
}

fn batch_logits(
    tape: &mut Tape,
    bb: &FrozenBackbone,
    bb_nodes: &crate::backbone::BackboneNodes,
    prefix: Option<NodeId>,
    scaled_queue: Option<NodeId>,
    sequences: &[Vec<usize>],
    batch: &[usize],
    head: NodeId,
) -> Result<NodeId> {
    let mut rows = Vec::with_capacity(batch.len());
    for &i in batch {
        rows.push(bb.encode_cls_on_tape(tape, bb_nodes, prefix, scaled_queue, &sequences[i])?);
    }
    let h = tape.concat_rows(&rows)?;
    tape.matmul(h, head)
}

struct TaskTrainStats {
    log: Vec<StepLog>,
    summary: TaskSummary,
}

const STREAM_PREFIX_INIT: u64 = 7_001;
const STREAM_TASK_INIT: u64 = 7_002;
const STREAM_TASK_TRAIN: u64 = 7_003;
const STREAM_PROBE: u64 = 7_005;

fn purpose_rng(seed: u64, purpose: u64, task_index: usize) -> ChaCha8Rng {
    derive_rng(seed, purpose.wrapping_mul(1_000_003).wrapping_add(task_index as u64))
}

/// True when the memory-retention term participates in this task's loss.
pub fn mr_active(cfg: &TrainConfig, method: Method, task_index: usize) -> bool {
    method.allows_prefix()
        && cfg.shared_prefix
        && cfg.prefix_len > 0
        && cfg.mr_variant != MrVariant::None
        && task_index >= 2
        && cfg.schedule().eta(task_index) > 0.0
}

fn class_count(task: &SyntheticTask) -> Result<usize> {
    if task.train.is_empty() || task.val.is_empty() || task.test.is_empty() {
        return Err(Error::InvalidData(format!(
            "task {} has an empty split",
            task.task_id
        )));
    }
    let max = task
        .train
        .labels
        .iter()
        .chain(&task.val.labels)
        .chain(&task.test.labels)
        .copied()
        .max()
        .unwrap_or(0);
    Ok((max + 1).max(2))
}

#[allow(clippy::too_many_arguments)]
fn train_task(
    bb: &Arc<FrozenBackbone>,
    cfg: &TrainConfig,
    method: Method,
    task_index: usize,
    task: &SyntheticTask,
    queue: &mut PromptQueue,
    stream_prefix: &mut Option<Matrix>,
    old_snapshot: Option<&TaskInferenceSnapshot>,
) -> Result<(TaskInferenceSnapshot, TaskTrainStats)> {
    let d = bb.d_model();
    let k = class_count(task)?;
    let use_queue = method.uses_queue();
    let use_prompt = method.uses_new_prompt();
    let use_prefix = method.allows_prefix() && cfg.shared_prefix && cfg.prefix_len > 0;
    let use_agg = use_queue && cfg.aggregation;

    if method == Method::SharedPromptOnly && !use_prefix {
        return Err(Error::InvalidConfig(
            "shared_prompt_only requires shared_prefix with prefix_len >= 1".into(),
        ));
    }

    // (a) Eviction happens before the new task trains, bounded queue only.
    if method == Method::QTuning && queue.is_full() {
        queue.evict(&cfg.eviction)?;
    }

    let mut init_rng = purpose_rng(cfg.seed, STREAM_TASK_INIT, task_index);
    let prompt = if use_prompt {
        Some(ResidualMlpPrompt::init(
            cfg.prompt_len,
            d,
            cfg.prompt_mlp_hidden,
            bb.embedding(),
            &mut init_rng,
        ))
    } else {
        None
    };
    let prompt_rows = prompt.as_ref().map_or(0, |p| p.len());
    let queue_rows_for_task = if use_queue { queue.rows() + prompt_rows } else { prompt_rows };

    // (c) Fresh identity aggregator bound to the new queue size.
    let aggregator = use_agg.then(|| rebind(None, queue_rows_for_task, d));

    if use_prefix && stream_prefix.is_none() {
        let mut rng = purpose_rng(cfg.seed, STREAM_PREFIX_INIT, 0);
        let mut rows = Matrix::zeros(cfg.prefix_len, d);
        for i in 0..cfg.prefix_len {
            let src = rand::Rng::random_range(&mut rng, 0..bb.embedding().rows());
            rows.row_mut(i).copy_from_slice(bb.embedding().row(src));
        }
        *stream_prefix = Some(rows);
    }

    let mut model = TaskModel {
        prompt,
        aggregator,
        prefix: if use_prefix { stream_prefix.clone() } else { None },
        head: TaskHead::init(task.task_id, d, k, &mut init_rng),
    };

    let eta = cfg.schedule().eta(task_index);
    let mr_on = mr_active(cfg, method, task_index) && old_snapshot.is_some();
    let old_ref = if mr_on {
        Some(OldReference::build(old_snapshot, bb, &task.train.sequences)?)
    } else {
        None
    };
    let mut disc = (mr_on && cfg.mr_variant == MrVariant::Jsd)
        .then(|| Discriminator::init(k, cfg.disc_hidden, &mut init_rng));
    let mut disc_adam: Vec<AdamState> = disc
        .as_ref()
        .map(|dsc| {
            dsc.values()
                .iter()
                .map(|m| AdamState::new(m.rows(), m.cols(), cfg.disc_lr))
                .collect()
        })
        .unwrap_or_default();

    // Fresh Adam state per task for every group, the shared prefix
    // included, so task boundaries are also optimizer boundaries.
    let mut adam: Vec<(String, AdamState)> = model
        .param_entries()
        .iter()
        .map(|(name, m)| (name.clone(), AdamState::new(m.rows(), m.cols(), cfg.learning_rate)))
        .collect();

    let frozen_rows = if use_queue { queue.stack() } else { Matrix::zeros(0, d) };
    let n_train = task.train.len();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut train_rng = purpose_rng(cfg.seed, STREAM_TASK_TRAIN, task_index);

    let mut log = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_model = model.clone();
    let mut stale = 0usize;
    let mut epochs_ran = 0usize;
    let mut step_total_ms = 0.0;
    let mut steps_ran = 0usize;

    for epoch in 0..cfg.epochs {
        epochs_ran = epoch + 1;
        order.shuffle(&mut train_rng);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let started = Instant::now();

            // Alternating JSD update: the discriminator tightens the
            // bound on its own tape before the prompt side steps.
            let mut perm: Vec<usize> = (0..batch.len()).collect();
            if let (Some(dsc), Some(oref)) = (disc.as_mut(), old_ref.as_ref()) {
                perm.shuffle(&mut train_rng);
                for _ in 0..cfg.disc_steps.max(1) {
                    disc_update(bb, dsc, &mut disc_adam, &model, oref, task, batch, &perm)?;
                }
            }

            let mut tape = Tape::new();
            let bb_nodes = bb.constants_on_tape(&mut tape)?;
            let reg = register_model(&mut tape, &model)?;
            let scaled = scaled_queue_node(&mut tape, &frozen_rows, &reg)?;
            let logits = batch_logits(
                &mut tape,
                bb,
                &bb_nodes,
                reg.prefix,
                scaled,
                &task.train.sequences,
                batch,
                reg.head,
            )?;
            let labels: Vec<usize> = batch.iter().map(|&i| task.train.labels[i]).collect();
            let l_q_node = tape.cross_entropy_mean(logits, &labels)?;
            let l_q = tape.scalar(l_q_node);

            let (loss_node, l_mr) = match old_ref.as_ref() {
                Some(oref) if eta > 0.0 => {
                    let prefix_node = reg
                        .prefix
                        .ok_or_else(|| Error::State("MR requires the shared prefix".into()))?;
                    let l_mr_node = mr_loss_node(
                        &mut tape,
                        bb,
                        &bb_nodes,
                        prefix_node,
                        &model,
                        oref,
                        disc.as_ref(),
                        task,
                        batch,
                        &perm,
                        cfg.mr_variant,
                    )?;
                    let l_mr = tape.scalar(l_mr_node);
                    let weighted = tape.scale(l_mr_node, eta);
                    (tape.add(l_q_node, weighted)?, l_mr)
                }
                _ => (l_q_node, 0.0),
            };
            let l_total = tape.scalar(loss_node);

            let grads = tape.backward(loss_node)?;
            for (name, state) in adam.iter_mut() {
                adam_step(state, model.value_mut(name), grads.expect(name))?;
            }

            let wall_ms = started.elapsed().as_secs_f64() * 1e3;
            step_total_ms += wall_ms;
            steps_ran += 1;
            log.push(StepLog {
                task_index,
                epoch,
                step,
                l_q,
                l_mr,
                eta,
                l_total,
                wall_ms,
            });
        }

        let val_acc = eval_model(bb, &model, &frozen_rows, &task.val)?;
        if val_acc > best_val {
            best_val = val_acc;
            best_model = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    // (e) Restore the best-validation parameters.
    model = best_model;

    // (f) Materialize, freeze into the queue, snapshot.
    let mut snapshot_segments: Vec<Segment> = Vec::new();
    if use_queue {
        if let Some(p) = &model.prompt {
            queue.enqueue(p.materialize()?, task.task_id)?;
        }
        snapshot_segments = queue.segments().to_vec();
    } else if let Some(p) = &model.prompt {
        snapshot_segments.push(Segment {
            tag: SegmentTag::TrainedPrompt {
                task_id: task.task_id,
            },
            rows: p.materialize()?,
        });
    }
    if use_prefix {
        *stream_prefix = model.prefix.clone();
    }

    let seq_len = task.train.sequences[0].len();
    let resident = queue_rows_for_task * d + model.prefix.as_ref().map_or(0, |p| p.rows() * d);
    let summary = TaskSummary {
        task_index,
        task_id: task.task_id,
        epochs_ran,
        steps_ran,
        mean_step_ms: step_total_ms / steps_ran.max(1) as f64,
        encoder_rows: bb.sequence_rows(
            model.prefix.as_ref().map_or(0, |p| p.rows()),
            queue_rows_for_task,
            seq_len,
        ),
        resident_prompt_floats: resident,
        eta,
        best_val_acc: best_val,
    };

    let snapshot = TaskInferenceSnapshot {
        task_id: task.task_id,
        task_index,
        prefix: model.prefix.clone(),
        aggregator: model.aggregator.clone(),
        queue_segments: snapshot_segments,
        head: model.head.clone(),
        backbone: bb.clone(),
    };
    Ok((snapshot, TaskTrainStats { log, summary }))
}

/// New-branch probabilities (shared prefix only) as a tape node, plus the
/// MR loss against the detached old branch.
#[allow(clippy::too_many_arguments)]
fn mr_loss_node(
    tape: &mut Tape,
    bb: &FrozenBackbone,
    bb_nodes: &crate::backbone::BackboneNodes,
    prefix_node: NodeId,
    model: &TaskModel,
    old_ref: &OldReference,
    disc: Option<&Discriminator>,
    task: &SyntheticTask,
    batch: &[usize],
    perm: &[usize],
    variant: MrVariant,
) -> Result<NodeId> {
    // The task head enters as a constant: MR shapes only the prefix.
    let head_const = tape.constant(model.head.alpha.clone());
    let logits_new = batch_logits(
        tape,
        bb,
        bb_nodes,
        Some(prefix_node),
        None,
        &task.train.sequences,
        batch,
        head_const,
    )?;
    let p_new = tape.row_softmax(logits_new);
    let p_old = tape.constant(old_ref.probs(batch, &model.head)?);
    match variant {
        MrVariant::Kl => tape.kl_div_mean(p_new, p_old),
        MrVariant::Jsd => {
            let dsc = disc.ok_or_else(|| Error::State("JSD MR needs a discriminator".into()))?;
            let nodes = dsc.nodes_on_tape(tape, false)?;
            mr_loss_jsd_on_tape(tape, p_new, p_old, perm, &nodes)
        }
        MrVariant::None => Err(Error::State("MR loss requested with variant none".into())),
    }
}

/// One discriminator update: maximize the bound (minimize the JSD loss in
/// the discriminator weights) with the prompt side frozen.
#[allow(clippy::too_many_arguments)]
fn disc_update(
    bb: &FrozenBackbone,
    disc: &mut Discriminator,
    disc_adam: &mut [AdamState],
    model: &TaskModel,
    old_ref: &OldReference,
    task: &SyntheticTask,
    batch: &[usize],
    perm: &[usize],
) -> Result<()> {
    let prefix = model
        .prefix
        .as_ref()
        .ok_or_else(|| Error::State("MR requires the shared prefix".into()))?;
    let mut p_new = Matrix::zeros(batch.len(), model.head.k);
    for (r, &i) in batch.iter().enumerate() {
        let logits = bb.forward(Some(prefix), None, &task.train.sequences[i], &model.head)?;
        let p = crate::backbone::predict_proba(&logits);
        p_new.row_mut(r).copy_from_slice(&p);
    }
    let p_old = old_ref.probs(batch, &model.head)?;

    let mut tape = Tape::new();
    let pn = tape.constant(p_new);
    let po = tape.constant(p_old);
    let nodes = disc.nodes_on_tape(&mut tape, true)?;
    let loss = mr_loss_jsd_on_tape(&mut tape, pn, po, perm, &nodes)?;
    let grads = tape.backward(loss)?;
    let names = Discriminator::param_names();
    for (i, value) in disc.values_mut().into_iter().enumerate() {
        adam_step(&mut disc_adam[i], value, grads.expect(names[i]))?;
    }
    Ok(())
}

/// Validation/eval forward of the in-training configuration.
fn eval_model(
    bb: &FrozenBackbone,
    model: &TaskModel,
    frozen_rows: &Matrix,
    data: &crate::taskstream::Split,
) -> Result<f64> {
    let mut parts: Vec<Matrix> = Vec::new();
    if frozen_rows.rows() > 0 {
        parts.push(frozen_rows.clone());
    }
    if let Some(p) = &model.prompt {
        parts.push(p.materialize()?);
    }
    let scaled = if parts.is_empty() {
        None
    } else {
        let refs: Vec<&Matrix> = parts.iter().collect();
        let stacked = Matrix::concat_rows(&refs)?;
        Some(match &model.aggregator {
            Some(a) => a.apply(&stacked)?,
            None => stacked,
        })
    };
    accuracy_of(bb, model.prefix.as_ref(), scaled.as_ref(), &model.head, data)
}

// ---------------------------------------------------------------------
// Forward-transfer probes
// ---------------------------------------------------------------------

/// Trains a fresh raw prompt and head on one task for a fixed small
/// budget, on top of a frozen context (accumulated prefix and scaled
/// queue). With an empty context this is the independent baseline; the
/// same derived seed is used for both so the two differ only by the
/// inherited context.
pub fn probe_accuracy(
    bb: &FrozenBackbone,
    cfg: &TrainConfig,
    context_prefix: Option<&Matrix>,
    context_queue: Option<&Matrix>,
    task: &SyntheticTask,
    seed: u64,
) -> Result<f64> {
    let d = bb.d_model();
    let k = class_count(task)?;
    let mut rng = derive_rng(seed, STREAM_PROBE);
    let mut prompt = Matrix::zeros(cfg.prompt_len, d);
    for i in 0..cfg.prompt_len {
        let src = rand::Rng::random_range(&mut rng, 0..bb.embedding().rows());
        prompt.row_mut(i).copy_from_slice(bb.embedding().row(src));
    }
    let mut head = TaskHead::init(task.task_id, d, k, &mut rng);
    let mut prompt_adam = AdamState::new(prompt.rows(), prompt.cols(), cfg.learning_rate);
    let mut head_adam = AdamState::new(head.alpha.rows(), head.alpha.cols(), cfg.learning_rate);

    let mut order: Vec<usize> = (0..task.train.len()).collect();
    for _ in 0..cfg.probe_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bb_nodes = bb.constants_on_tape(&mut tape)?;
            let prompt_node = tape.param("probe.prompt", prompt.clone())?;
            let head_node = tape.param("probe.head", head.alpha.clone())?;
            let prefix_node = context_prefix
                .filter(|p| p.rows() > 0)
                .map(|p| tape.constant(p.clone()));
            let queue_node = match context_queue.filter(|q| q.rows() > 0) {
                Some(q) => {
                    let ctx = tape.constant(q.clone());
                    tape.concat_rows(&[ctx, prompt_node])?
                }
                None => prompt_node,
            };
            let logits = batch_logits(
                &mut tape,
                bb,
                &bb_nodes,
                prefix_node,
                Some(queue_node),
                &task.train.sequences,
                batch,
                head_node,
            )?;
            let labels: Vec<usize> = batch.iter().map(|&i| task.train.labels[i]).collect();
            let loss = tape.cross_entropy_mean(logits, &labels)?;
            let grads = tape.backward(loss)?;
            adam_step(&mut prompt_adam, &mut prompt, grads.expect("probe.prompt"))?;
            adam_step(&mut head_adam, &mut head.alpha, grads.expect("probe.head"))?;
        }
    }

    let scaled = match context_queue.filter(|q| q.rows() > 0) {
        Some(q) => Some(Matrix::concat_rows(&[q, &prompt])?),
        None => Some(prompt),
    };
    accuracy_of(bb, context_prefix, scaled.as_ref(), &head, &task.test)
}

// ---------------------------------------------------------------------
// Stream driver
// ---------------------------------------------------------------------

fn snapshot_dir(workdir: &Path, task_pos: usize) -> PathBuf {
    workdir.join(format!("task_{task_pos:03}"))
}

pub fn state_dir(workdir: &Path, tasks_done: usize) -> PathBuf {
    workdir.join(format!("state_after_task_{tasks_done:03}"))
}

/// Most recent per-task state bundle inside a run workdir.
pub fn latest_state_dir(workdir: &Path) -> Option<PathBuf> {
    let mut best: Option<(usize, PathBuf)> = None;
    let entries = std::fs::read_dir(workdir).ok()?;
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(suffix) = name.strip_prefix("state_after_task_") {
            if let Ok(n) = suffix.parse::<usize>() {
                if best.as_ref().map_or(true, |(b, _)| n > *b) {
                    best = Some((n, entry.path()));
                }
            }
        }
    }
    best.map(|(_, p)| p)
}

fn validate_run(
    method: Method,
    bb: &FrozenBackbone,
    tasks: &[SyntheticTask],
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("task stream is empty".into()));
    }
    let max_input = tasks
        .iter()
        .flat_map(|t| {
            t.train
                .sequences
                .iter()
                .chain(&t.val.sequences)
                .chain(&t.test.sequences)
        })
        .map(|s| s.len())
        .max()
        .unwrap_or(0);
    let prefix_rows = if method.allows_prefix() && cfg.shared_prefix {
        cfg.prefix_len
    } else {
        0
    };
    if method == Method::QTuning {
        let capacity = cfg.prompt_len * cfg.q_size;
        let need = bb.sequence_rows(prefix_rows, capacity, max_input);
        if need > bb.config().max_seq_len {
            return Err(Error::InvalidConfig(format!(
                "max_seq_len {} cannot hold prefix {prefix_rows} + queue capacity {capacity} \
                 + input {max_input} (+1 readout) = {need}",
                bb.config().max_seq_len
            )));
        }
    }
    Ok(())
}

fn fresh_state(method: Method, bb: &FrozenBackbone, cfg: &TrainConfig, n_tasks: usize) -> Result<StreamState> {
    let queue = match method {
        Method::QTuning => PromptQueue::bounded(cfg.prompt_len, cfg.q_size, bb.d_model())?,
        _ => PromptQueue::unbounded(cfg.prompt_len, bb.d_model())?,
    };
    Ok(StreamState {
        tasks_done: 0,
        queue,
        prefix: None,
        rmatrix: RMatrix::new(n_tasks),
        train_log: Vec::new(),
        task_summaries: Vec::new(),
        heatmaps: Vec::new(),
    })
}

/// Trains the full task stream with the given method, filling the
/// R-matrix from frozen snapshots after every stage. Snapshots and
/// resumable state go under `workdir`.
pub fn run_method(
    method: Method,
    bb: &Arc<FrozenBackbone>,
    tasks: &[SyntheticTask],
    cfg: &TrainConfig,
    workdir: &Path,
) -> Result<RunRecord> {
    validate_run(method, bb, tasks, cfg)?;
    let state = fresh_state(method, bb, cfg, tasks.len())?;
    run_from(state, method, bb, tasks, cfg, workdir)
}

/// Continues a run from a state bundle written by a previous (possibly
/// interrupted) run over the same task stream and config.
pub fn resume_method(
    state_bundle: &Path,
    method: Method,
    bb: &Arc<FrozenBackbone>,
    tasks: &[SyntheticTask],
    cfg: &TrainConfig,
    workdir: &Path,
) -> Result<RunRecord> {
    validate_run(method, bb, tasks, cfg)?;
    let state = load_stream_state(state_bundle, tasks.len())?;
    run_from(state, method, bb, tasks, cfg, workdir)
}

/// Q-tuning over the stream: bounded queue with the configured eviction.
pub fn run_stream(
    bb: &Arc<FrozenBackbone>,
    tasks: &[SyntheticTask],
    cfg: &TrainConfig,
    workdir: &Path,
) -> Result<RunRecord> {
    run_method(Method::QTuning, bb, tasks, cfg, workdir)
}

/// Unbounded prompt-list baseline: no eviction, no capacity bound, so
/// cost grows with every task until the encoder length limit is hit.
pub fn run_progprompt_baseline(
    bb: &Arc<FrozenBackbone>,
    tasks: &[SyntheticTask],
    cfg: &TrainConfig,
    workdir: &Path,
) -> Result<RunRecord> {
    run_method(Method::PromptList, bb, tasks, cfg, workdir)
}

fn run_from(
    mut state: StreamState,
    method: Method,
    bb: &Arc<FrozenBackbone>,
    tasks: &[SyntheticTask],
    cfg: &TrainConfig,
    workdir: &Path,
) -> Result<RunRecord> {
    std::fs::create_dir_all(workdir)?;
    for t in state.tasks_done..tasks.len() {
        let task_index = t + 1;
        let old_snapshot = if mr_active(cfg, method, task_index) && t >= 1 {
            Some(load_snapshot(&snapshot_dir(workdir, t - 1), bb.clone())?)
        } else {
            None
        };
        let (snapshot, stats) = train_task(
            bb,
            cfg,
            method,
            task_index,
            &tasks[t],
            &mut state.queue,
            &mut state.prefix,
            old_snapshot.as_ref(),
        )?;
        save_snapshot(&snapshot, &snapshot_dir(workdir, t))?;
        if let Some(agg) = &snapshot.aggregator {
            state.heatmaps.push(HeatmapRow {
                task_index,
                row_importance: agg.row_importance(),
            });
        }
        state.train_log.extend(stats.log);
        state.task_summaries.push(stats.summary);

        // Snapshots are reloaded from disk for every stage so resident
        // prompt storage stays bounded by the live training state.
        for j in 0..=t {
            let sj = load_snapshot(&snapshot_dir(workdir, j), bb.clone())?;
            let acc = sj.evaluate(&tasks[j].test)?;
            state.rmatrix.set(t, j, acc);
        }

        if cfg.measure_fwt && t + 1 < tasks.len() {
            let next = &tasks[t + 1];
            let probe_seed = cfg.seed ^ (next.task_id as u64).wrapping_mul(0x9e37_79b9);
            let (ctx_prefix, ctx_queue) = match method {
                Method::QTuning | Method::PromptList => {
                    (state.prefix.clone(), snapshot.scaled_queue()?)
                }
                Method::SharedPromptOnly => (state.prefix.clone(), None),
                Method::PerTaskPrompt => (None, None),
            };
            let probe = probe_accuracy(
                bb,
                cfg,
                ctx_prefix.as_ref(),
                ctx_queue.as_ref(),
                next,
                probe_seed,
            )?;
            state.rmatrix.set(t, t + 1, probe);
            let baseline = probe_accuracy(bb, cfg, None, None, next, probe_seed)?;
            state.rmatrix.set_baseline(t + 1, baseline);
        }

        state.tasks_done = t + 1;
        save_stream_state(&state, &state_dir(workdir, t))?;
    }

    let metrics = transfer_report(&state.rmatrix)?;
    let peak = state
        .task_summaries
        .iter()
        .map(|s| s.resident_prompt_floats)
        .max()
        .unwrap_or(0);
    Ok(RunRecord {
        method: method.name().to_string(),
        train_config: cfg.clone(),
        n_tasks: tasks.len(),
        rmatrix: state.rmatrix,
        metrics,
        task_summaries: state.task_summaries,
        heatmaps: state.heatmaps,
        peak_resident_prompt_floats: peak,
        train_log: state.train_log,
    })
}

// ---------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------

fn save_snapshot(snapshot: &TaskInferenceSnapshot, dir: &Path) -> Result<()> {
    let mut w = BundleWriter::create(dir)?;
    w.set_meta("kind", "task_snapshot");
    w.set_meta("task_id", snapshot.task_id);
    w.set_meta("task_index", snapshot.task_index);
    w.set_meta("classes", snapshot.head.k);
    if let Some(p) = &snapshot.prefix {
        w.add_tensor("prefix.bin", "prefix", None, p)?;
    }
    if let Some(a) = &snapshot.aggregator {
        w.add_tensor("agg_u.bin", "agg_u", None, &a.u)?;
        w.add_tensor("agg_v.bin", "agg_v", None, &a.v)?;
    }
    for (i, seg) in snapshot.queue_segments.iter().enumerate() {
        w.add_tensor(
            &format!("queue_seg_{i:03}.bin"),
            "queue_segment",
            Some(seg.tag.to_string()),
            &seg.rows,
        )?;
    }
    w.add_tensor("head_alpha.bin", "head_alpha", None, &snapshot.head.alpha)?;
    w.finish()
}

pub fn load_snapshot(dir: &Path, backbone: Arc<FrozenBackbone>) -> Result<TaskInferenceSnapshot> {
    let bundle = Bundle::open(dir)?;
    let task_id: usize = bundle
        .require_meta("task_id")?
        .parse()
        .map_err(|_| Error::InvalidData("bad task_id in snapshot".into()))?;
    let task_index: usize = bundle
        .require_meta("task_index")?
        .parse()
        .map_err(|_| Error::InvalidData("bad task_index in snapshot".into()))?;
    let k: usize = bundle
        .require_meta("classes")?
        .parse()
        .map_err(|_| Error::InvalidData("bad classes in snapshot".into()))?;
    let prefix = bundle.load_role_optional("prefix")?;
    let u = bundle.load_role_optional("agg_u")?;
    let v = bundle.load_role_optional("agg_v")?;
    let aggregator = match (u, v) {
        (Some(u), Some(v)) => Some(RankOneAggregator {
            u,
            v,
            trainable: false,
        }),
        (None, None) => None,
        _ => {
            return Err(Error::InvalidData(
                "snapshot has only one aggregator factor".into(),
            ))
        }
    };
    let mut queue_segments = Vec::new();
    for entry in bundle.entries_with_role("queue_segment") {
        let tag = entry
            .tag
            .as_deref()
            .ok_or_else(|| Error::InvalidData("queue segment without tag".into()))?;
        queue_segments.push(Segment {
            tag: SegmentTag::parse(tag)?,
            rows: bundle.load_entry(entry)?,
        });
    }
    let alpha = bundle.load_role("head_alpha")?;
    Ok(TaskInferenceSnapshot {
        task_id,
        task_index,
        prefix,
        aggregator,
        queue_segments,
        head: TaskHead { task_id, k, alpha },
        backbone,
    })
}

#[derive(Serialize, Deserialize)]
struct RunBookkeeping {
    tasks_done: usize,
    rmatrix: RMatrix,
    train_log: Vec<StepLog>,
    task_summaries: Vec<TaskSummary>,
    heatmaps: Vec<HeatmapRow>,
}

/// Writes the resumable cross-task state: queue segments, shared prefix,
/// and the run bookkeeping JSON.
pub fn save_stream_state(state: &StreamState, dir: &Path) -> Result<()> {
    let mut w = BundleWriter::create(dir)?;
    w.set_meta("kind", "stream_state");
    w.set_meta("tasks_done", state.tasks_done);
    w.set_meta("queue_prompt_len", state.queue.prompt_len());
    w.set_meta("queue_embed_dim", state.queue.embed_dim());
    w.set_meta(
        "queue_q_size",
        state
            .queue
            .capacity()
            .map(|c| (c / state.queue.prompt_len()).to_string())
            .unwrap_or_else(|| "unbounded".to_string()),
    );
    w.set_meta("queue_pca_generation", state.queue.pca_generation());
    w.set_meta("queue_evictions", state.queue.eviction_count());
    if let Some(p) = &state.prefix {
        w.add_tensor("prefix.bin", "prefix", None, p)?;
    }
    for (i, seg) in state.queue.segments().iter().enumerate() {
        w.add_tensor(
            &format!("queue_seg_{i:03}.bin"),
            "queue_segment",
            Some(seg.tag.to_string()),
            &seg.rows,
        )?;
    }
    w.add_json(
        "run_state",
        "run_state.json",
        &RunBookkeeping {
            tasks_done: state.tasks_done,
            rmatrix: state.rmatrix.clone(),
            train_log: state.train_log.clone(),
            task_summaries: state.task_summaries.clone(),
            heatmaps: state.heatmaps.clone(),
        },
    )?;
    w.finish()
}

/// Reads a state bundle back; `n_tasks` must match the stream being
/// resumed.
pub fn load_stream_state(dir: &Path, n_tasks: usize) -> Result<StreamState> {
    let bundle = Bundle::open(dir)?;
    if bundle.meta("kind") != Some("stream_state") {
        return Err(Error::InvalidData(format!(
            "{} is not a stream-state bundle",
            dir.display()
        )));
    }
    let book: RunBookkeeping = bundle.load_json("run_state")?;
    if book.rmatrix.tasks() != n_tasks {
        return Err(Error::InvalidData(format!(
            "state bundle covers {} tasks, stream has {n_tasks}",
            book.rmatrix.tasks()
        )));
    }
    let prompt_len: usize = bundle
        .require_meta("queue_prompt_len")?
        .parse()
        .map_err(|_| Error::InvalidData("bad queue_prompt_len".into()))?;
    let embed_dim: usize = bundle
        .require_meta("queue_embed_dim")?
        .parse()
        .map_err(|_| Error::InvalidData("bad queue_embed_dim".into()))?;
    let q_size = match bundle.require_meta("queue_q_size")? {
        "unbounded" => None,
        s => Some(
            s.parse::<usize>()
                .map_err(|_| Error::InvalidData("bad queue_q_size".into()))?,
        ),
    };
    let pca_generation: usize = bundle
        .require_meta("queue_pca_generation")?
        .parse()
        .map_err(|_| Error::InvalidData("bad queue_pca_generation".into()))?;
    let evictions: u64 = bundle
        .require_meta("queue_evictions")?
        .parse()
        .map_err(|_| Error::InvalidData("bad queue_evictions".into()))?;
    let mut segments = Vec::new();
    for entry in bundle.entries_with_role("queue_segment") {
        let tag = entry
            .tag
            .as_deref()
            .ok_or_else(|| Error::InvalidData("queue segment without tag".into()))?;
        segments.push(Segment {
            tag: SegmentTag::parse(tag)?,
            rows: bundle.load_entry(entry)?,
        });
    }
    let queue = PromptQueue::restore(
        prompt_len,
        q_size,
        embed_dim,
        segments,
        pca_generation,
        evictions,
    );
    let prefix = bundle.load_role_optional("prefix")?;
    Ok(StreamState {
        tasks_done: book.tasks_done,
        queue,
        prefix,
        rmatrix: book.rmatrix,
        train_log: book.train_log,
        task_summaries: book.task_summaries,
        heatmaps: book.heatmaps,
    })
}

/// Training-log CSV: one line per optimizer step.
pub fn train_log_csv(log: &[StepLog]) -> String {
    let mut out = String::from("task,epoch,step,l_q,l_mr,eta,l_total,wall_time_ms\n");
    for s in log {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{},{:.6},{:.3}\n",
            s.task_index, s.epoch, s.step, s.l_q, s.l_mr, s.eta, s.l_total, s.wall_ms
        ));
    }
    out
}

/// Aggregation heatmap CSV: `(task, queue_row, importance)` triples.
pub fn heatmap_csv(rows: &[HeatmapRow]) -> String {
    let mut out = String::from("task,queue_row,importance\n");
    for h in rows {
        for (i, v) in h.row_importance.iter().enumerate() {
            out.push_str(&format!("{},{},{v:.6}\n", h.task_index, i));
        }
    }
    out
}
