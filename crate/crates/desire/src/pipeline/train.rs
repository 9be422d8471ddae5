//! Per-task adapter training.
//!
//! Each task trains its own low-rank adapter set from a fresh start, on
//! that task's data alone, with the backbone frozen: only the adapter
//! matrices and the task's new classifier rows receive gradients. The
//! trained artifacts — adapter matrices, head rows, per-class feature
//! statistics — are everything later stages need, so the raw training
//! data can be dropped the moment training ends.
//!
//! Because independent task training depends only on (backbone, data,
//! seed, task index), its results are shared across method variants via a
//! [`TrajectoryCache`]; the sequential baseline, which keeps training one
//! living set, cannot use the cache and has its own entry point.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::backbone::{compute_features, forward_features, register_backbone, BackboneWeights};
use crate::error::{Error, Result};
use crate::lora::{AdapterLedger, LoraConfig, LoraSet, Projection};
use crate::numerics::kernels;
use crate::numerics::optim::{cosine_anneal_lr, SgdMomentum};
use crate::numerics::rng::SeededRng;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::pipeline::data::Task;
use crate::stats::{compute_class_stats, ClassStats};

/// Hyperparameters for one task's adapter training.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("training batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive and finite".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Everything one task's training produces; sufficient to rebuild the
/// live adapter set and the task's classifier rows without the data.
#[derive(Debug, Clone)]
pub struct TrainedTask {
    pub task_index: usize,
    pub class_ids: Vec<u32>,
    /// Site-ordered (A, B) adapter pairs.
    pub parts: Vec<(Tensor, Tensor)>,
    /// Classifier rows for this task's classes, [k × d], in `class_ids`
    /// order.
    pub head_rows: Tensor,
    pub head_bias: Vec<f64>,
    /// Per-class feature statistics under this task's trained adapters,
    /// in `class_ids` order.
    pub stats: Vec<ClassStats>,
    /// Flattened dense delta of the trained set (for geometry reports).
    pub delta_flat: Vec<f64>,
    pub final_train_loss: f64,
}

/// Independent training results keyed by (seed, task index), shared by
/// every variant that trains tasks independently.
pub type TrajectoryCache = BTreeMap<(u64, usize), TrainedTask>;

fn local_labels(task: &Task, labels: &[u32]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            task.class_ids
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| Error::Consistency(format!("label {l} is not in task {}", task.index)))
        })
        .collect()
}

/// The shared fitting loop: adapters (from `masters`) plus a task-local
/// head, trained with cross-entropy on the task's own classes only. The
/// backbone contributes activations but no trainable parameters.
#[allow(clippy::too_many_arguments)]
fn fit_adapters(
    weights: &BackboneWeights,
    masters: &mut [(Tensor, Tensor)],
    head_w: &mut Tensor,
    head_b: &mut Tensor,
    inputs: &Tensor,
    locals: &[usize],
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<()> {
    cfg.validate()?;
    let n = inputs.shape()[0];
    if n == 0 {
        return Err(Error::Config("task has no training data".into()));
    }
    let mut opt = SgdMomentum::new(cfg.learning_rate, cfg.momentum)?;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        opt.set_lr(cosine_anneal_lr(epoch, cfg.epochs, cfg.learning_rate)?)?;
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let x = inputs.gather_rows(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| locals[i]).collect();

            let mut tape = Tape::new();
            let nodes = register_backbone(&mut tape, weights, false);
            let ab_vars: Vec<(Var, Var)> = masters
                .iter()
                .map(|(a, b)| {
                    (
                        tape.leaf(a.clone().with_requires_grad(true)),
                        tape.leaf(b.clone().with_requires_grad(true)),
                    )
                })
                .collect();
            let hw = tape.leaf(head_w.clone().with_requires_grad(true));
            let hb = tape.leaf(head_b.clone().with_requires_grad(true));

            let mut hook = |t: &mut Tape, block: usize, proj: Projection| -> Result<Option<Var>> {
                let (av, bv) = ab_vars[block * 2 + proj as usize];
                Ok(Some(t.matmul(av, bv)?))
            };
            let feats = forward_features(&mut tape, weights, &nodes, &mut hook, &x)?;
            let scores = tape.matmul_nt(feats, hw)?;
            let logits = tape.add_row(scores, hb)?;
            let loss = tape.cross_entropy(logits, &y)?;
            tape.backward(loss)?;

            let mut grads: Vec<Vec<f64>> = Vec::with_capacity(2 * masters.len() + 2);
            for &(av, bv) in &ab_vars {
                for v in [av, bv] {
                    grads.push(
                        tape.grad(v)
                            .map(|g| g.to_vec())
                            .unwrap_or_else(|| vec![0.0; tape.value(v).numel()]),
                    );
                }
            }
            grads.push(tape.grad(hw).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; head_w.numel()]));
            grads.push(tape.grad(hb).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; head_b.numel()]));

            let mut params: Vec<&mut Tensor> = Vec::with_capacity(grads.len());
            for (a, b) in masters.iter_mut() {
                params.push(a);
                params.push(b);
            }
            params.push(head_w);
            params.push(head_b);
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            opt.step(&mut params, &grad_refs)?;
        }
    }
    Ok(())
}

fn write_back(set: &mut LoraSet, masters: Vec<(Tensor, Tensor)>) {
    let sites: Vec<(usize, Projection)> =
        set.sites().map(|(block, proj, _)| (block, proj)).collect();
    for ((block, proj), (a, b)) in sites.into_iter().zip(masters) {
        let ad = set.adapter_mut(block, proj);
        ad.a = a;
        ad.b = b;
    }
}

/// Cross-entropy of the trained task head over the full task data.
fn task_loss(
    weights: &BackboneWeights,
    set: &LoraSet,
    head_w: &Tensor,
    head_b: &Tensor,
    inputs: &Tensor,
    locals: &[usize],
    eval_batch: usize,
) -> Result<f64> {
    let feats = compute_features(weights, Some(set), inputs, eval_batch)?;
    let scores = kernels::matmul_nt(&feats, head_w)?;
    let logits = kernels::add_row(&scores, head_b)?;
    Ok(kernels::cross_entropy(&logits, locals)?.0)
}

/// Per-class feature statistics under the given adapters, in task class
/// order.
pub fn compute_task_stats(
    weights: &BackboneWeights,
    set: &LoraSet,
    task: &Task,
    inputs: &Tensor,
    labels: &[u32],
    eval_batch: usize,
) -> Result<Vec<ClassStats>> {
    let feats = compute_features(weights, Some(set), inputs, eval_batch)?;
    task.class_ids
        .iter()
        .map(|&class| {
            let rows: Vec<usize> =
                labels.iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| i).collect();
            compute_class_stats(class, &feats.gather_rows(&rows)?)
        })
        .collect()
}

/// Train one task's adapters and head from a fresh start, then summarize
/// its classes as feature-space Gaussians under the trained set. Fully
/// determined by (backbone, data, config, seed, task index).
#[allow(clippy::too_many_arguments)]
pub fn train_individual(
    weights: &BackboneWeights,
    lora_cfg: &LoraConfig,
    cfg: &TrainConfig,
    task: &Task,
    inputs: &Tensor,
    labels: &[u32],
    seed: u64,
    ledger: Option<&Arc<AdapterLedger>>,
    eval_batch: usize,
) -> Result<(LoraSet, TrainedTask)> {
    let d = weights.config.model_dim;
    let tag = task.index.to_string();
    let mut init_rng = SeededRng::derive(seed, &["task", &tag, "adapter-init"]);
    let mut set = LoraSet::init(weights.config.num_blocks, d, d, lora_cfg, &mut init_rng, ledger)?;

    let locals = local_labels(task, labels)?;
    let k = task.class_ids.len();
    let mut head_w = Tensor::zeros(&[k, d]);
    let mut head_b = Tensor::zeros(&[k]);
    let mut masters = set.to_parts();
    let mut shuffle_rng = SeededRng::derive(seed, &["task", &tag, "individual"]);
    fit_adapters(weights, &mut masters, &mut head_w, &mut head_b, inputs, &locals, cfg, &mut shuffle_rng)?;
    write_back(&mut set, masters);

    let final_train_loss = task_loss(weights, &set, &head_w, &head_b, inputs, &locals, eval_batch)?;
    let stats = compute_task_stats(weights, &set, task, inputs, labels, eval_batch)?;
    let record = TrainedTask {
        task_index: task.index,
        class_ids: task.class_ids.clone(),
        parts: set.to_parts(),
        head_rows: head_w,
        head_bias: head_b.data().to_vec(),
        stats,
        delta_flat: set.flattened_delta()?,
        final_train_loss,
    };
    Ok((set, record))
}

/// Rebuild the live adapter set a cached record describes, registering it
/// on the run's ledger.
pub fn revive(
    record: &TrainedTask,
    num_blocks: usize,
    rank: usize,
    ledger: Option<&Arc<AdapterLedger>>,
) -> Result<LoraSet> {
    LoraSet::from_parts(num_blocks, rank, &record.parts, ledger)
}

/// Continue training one living adapter set on a new task (the
/// sequential baseline): no fresh start, no statistics, same loss and
/// optimizer as independent training. Returns the task's head rows, bias,
/// and final loss; the set is updated in place.
#[allow(clippy::too_many_arguments)]
pub fn train_sequential(
    weights: &BackboneWeights,
    set: &mut LoraSet,
    cfg: &TrainConfig,
    task: &Task,
    inputs: &Tensor,
    labels: &[u32],
    seed: u64,
    eval_batch: usize,
) -> Result<(Tensor, Vec<f64>, f64)> {
    let d = weights.config.model_dim;
    let locals = local_labels(task, labels)?;
    let k = task.class_ids.len();
    let mut head_w = Tensor::zeros(&[k, d]);
    let mut head_b = Tensor::zeros(&[k]);
    let mut masters = set.to_parts();
    let tag = task.index.to_string();
    let mut shuffle_rng = SeededRng::derive(seed, &["task", &tag, "individual"]);
    fit_adapters(weights, &mut masters, &mut head_w, &mut head_b, inputs, &locals, cfg, &mut shuffle_rng)?;
    write_back(set, masters);
    let loss = task_loss(weights, set, &head_w, &head_b, inputs, &locals, eval_batch)?;
    Ok((head_w, head_b.data().to_vec(), loss))
}
