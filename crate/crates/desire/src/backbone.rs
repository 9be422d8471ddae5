//! The frozen feature extractor, its classifier head, and pretraining.
//!
//! The backbone is a small pre-norm transformer encoder: inputs are split
//! into tokens, linearly embedded, given learned positional offsets, passed
//! through self-attention/MLP blocks, and mean-pooled into one feature
//! vector per sample. After pretraining it stays frozen for the whole task
//! stream; all adaptation happens through low-rank deltas on the query and
//! value projections, injected into the forward pass by a caller-supplied
//! hook so the same graph-building code serves training, merging, and
//! evaluation.
//!
//! The classifier is a plain affine head that grows rows as classes appear.
//! It counts its own evaluations, which lets tests prove the coefficient
//! optimizer never consults it.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::lora::{LoraSet, Projection};
use crate::numerics::optim::{cosine_anneal_lr, SgdMomentum};
use crate::numerics::rng::SeededRng;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Epsilon inside every layer-norm denominator.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Transformer blocks.
    pub num_blocks: usize,
    /// Model (feature) dimension d.
    pub model_dim: usize,
    /// Attention heads; must divide `model_dim`.
    pub num_heads: usize,
    /// Hidden width of each block's MLP.
    pub mlp_hidden: usize,
    /// Raw input dimension; must be `tokens · token_dim`.
    pub input_dim: usize,
    /// Tokens each input is split into.
    pub tokens: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_blocks", self.num_blocks),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("mlp_hidden", self.mlp_hidden),
            ("input_dim", self.input_dim),
            ("tokens", self.tokens),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("backbone {name} must be positive")));
            }
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.num_heads
            )));
        }
        if self.input_dim % self.tokens != 0 {
            return Err(Error::Config(format!(
                "input_dim {} not divisible into {} tokens",
                self.input_dim, self.tokens
            )));
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.input_dim / self.tokens
    }
}

#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct BackboneWeights {
    pub config: BackboneConfig,
    pub embed: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
}

impl BackboneWeights {
    /// Fan-in scaled Gaussian init for weight matrices, unit/zero affine
    /// norm parameters, small positional offsets.
    pub fn init(config: &BackboneConfig, rng: &mut SeededRng) -> Result<BackboneWeights> {
        config.validate()?;
        let d = config.model_dim;
        let td = config.token_dim();
        let mat = |rows: usize, cols: usize, rng: &mut SeededRng| -> Result<Tensor> {
            let std = 1.0 / (rows as f64).sqrt();
            Tensor::from_vec(&[rows, cols], rng.normal_vec(rows * cols, 0.0, std))
        };
        let mut blocks = Vec::with_capacity(config.num_blocks);
        let embed = mat(td, d, rng)?;
        let pos = Tensor::from_vec(&[config.tokens, d], rng.normal_vec(config.tokens * d, 0.0, 0.02))?;
        for _ in 0..config.num_blocks {
            blocks.push(BlockWeights {
                ln1_gamma: Tensor::filled(&[d], 1.0),
                ln1_beta: Tensor::zeros(&[d]),
                wq: mat(d, d, rng)?,
                wk: mat(d, d, rng)?,
                wv: mat(d, d, rng)?,
                wo: mat(d, d, rng)?,
                ln2_gamma: Tensor::filled(&[d], 1.0),
                ln2_beta: Tensor::zeros(&[d]),
                w1: mat(d, config.mlp_hidden, rng)?,
                b1: Tensor::zeros(&[config.mlp_hidden]),
                w2: mat(config.mlp_hidden, d, rng)?,
                b2: Tensor::zeros(&[d]),
            });
        }
        Ok(BackboneWeights {
            config: config.clone(),
            embed,
            pos,
            blocks,
            final_gamma: Tensor::filled(&[d], 1.0),
            final_beta: Tensor::zeros(&[d]),
        })
    }

    /// All parameters in one canonical order (embed, pos, per-block fields
    /// in declaration order, final norm). Serialization, optimization, and
    /// graph registration all walk this order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = vec![&self.embed, &self.pos];
        for b in &self.blocks {
            out.extend([
                &b.ln1_gamma,
                &b.ln1_beta,
                &b.wq,
                &b.wk,
                &b.wv,
                &b.wo,
                &b.ln2_gamma,
                &b.ln2_beta,
                &b.w1,
                &b.b1,
                &b.w2,
                &b.b2,
            ]);
        }
        out.extend([&self.final_gamma, &self.final_beta]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embed, &mut self.pos];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_gamma,
                &mut b.ln1_beta,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ln2_gamma,
                &mut b.ln2_beta,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.extend([&mut self.final_gamma, &mut self.final_beta]);
        out
    }

    /// Order-sensitive checksum over every parameter; adapter training and
    /// merging must leave it bit-identical.
    pub fn checksum(&self) -> u64 {
        let mut acc: u64 = 0xcbf29ce484222325;
        for p in self.params() {
            let c = p.checksum();
            for byte in c.to_le_bytes() {
                acc ^= byte as u64;
                acc = acc.wrapping_mul(0x100000001b3);
            }
        }
        acc
    }
}

/// Graph handles for every backbone parameter, in [`BackboneWeights::params`] order.
pub struct BackboneNodes {
    pub embed: Var,
    pub pos: Var,
    pub blocks: Vec<BlockNodes>,
    pub final_gamma: Var,
    pub final_beta: Var,
}

pub struct BlockNodes {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BackboneNodes {
    /// Parameter vars aligned with [`BackboneWeights::params`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = vec![self.embed, self.pos];
        for b in &self.blocks {
            out.extend([
                b.ln1_gamma, b.ln1_beta, b.wq, b.wk, b.wv, b.wo, b.ln2_gamma, b.ln2_beta, b.w1,
                b.b1, b.w2, b.b2,
            ]);
        }
        out.extend([self.final_gamma, self.final_beta]);
        out
    }
}

/// Put every backbone parameter on the tape. `trainable` is true only
/// during pretraining; afterwards the weights enter graphs as frozen
/// constants, so no gradient buffer can ever exist for them.
pub fn register_backbone(tape: &mut Tape, weights: &BackboneWeights, trainable: bool) -> BackboneNodes {
    let mut reg = |t: &Tensor| tape.leaf(t.clone().with_requires_grad(trainable));
    let embed = reg(&weights.embed);
    let pos = reg(&weights.pos);
    let mut blocks = Vec::with_capacity(weights.blocks.len());
    for b in &weights.blocks {
        blocks.push(BlockNodes {
            ln1_gamma: reg(&b.ln1_gamma),
            ln1_beta: reg(&b.ln1_beta),
            wq: reg(&b.wq),
            wk: reg(&b.wk),
            wv: reg(&b.wv),
            wo: reg(&b.wo),
            ln2_gamma: reg(&b.ln2_gamma),
            ln2_beta: reg(&b.ln2_beta),
            w1: reg(&b.w1),
            b1: reg(&b.b1),
            w2: reg(&b.w2),
            b2: reg(&b.b2),
        });
    }
    let final_gamma = reg(&weights.final_gamma);
    let final_beta = reg(&weights.final_beta);
    BackboneNodes { embed, pos, blocks, final_gamma, final_beta }
}

/// Per-site adapter injection: given (tape, block, projection), return the
/// delta node to add onto that projection's weight, or None to leave the
/// base weight untouched.
pub type DeltaHook<'a> = dyn FnMut(&mut Tape, usize, Projection) -> Result<Option<Var>> + 'a;

/// Hook that folds a fixed adapter set in as constants (evaluation path).
pub fn fixed_set_hook(set: &LoraSet) -> impl FnMut(&mut Tape, usize, Projection) -> Result<Option<Var>> + '_ {
    move |tape: &mut Tape, block: usize, proj: Projection| {
        let delta = set.adapter(block, proj).delta()?;
        Ok(Some(tape.constant(delta)))
    }
}

/// Hook that applies no adapters anywhere.
pub fn no_adapter_hook() -> impl FnMut(&mut Tape, usize, Projection) -> Result<Option<Var>> {
    |_: &mut Tape, _, _| Ok(None)
}

/// Build the feature extraction graph for a batch of raw inputs
/// ([batch × input_dim]) and return the [batch × model_dim] feature node.
pub fn forward_features(
    tape: &mut Tape,
    weights: &BackboneWeights,
    nodes: &BackboneNodes,
    hook: &mut DeltaHook,
    inputs: &Tensor,
) -> Result<Var> {
    let cfg = &weights.config;
    if inputs.shape().len() != 2 || inputs.shape()[1] != cfg.input_dim {
        return Err(Error::Dimension(format!(
            "inputs {:?}, expected [batch × {}]",
            inputs.shape(),
            cfg.input_dim
        )));
    }
    let batch = inputs.shape()[0];
    let tokens = cfg.tokens;
    // Row-major [batch × input_dim] reinterprets directly as token rows.
    let x = tape.constant(inputs.reshaped(&[batch * tokens, cfg.token_dim()])?);

    let mut h = tape.matmul(x, nodes.embed)?;
    h = tape.add_blocks(h, nodes.pos, tokens)?;

    for (bi, bn) in nodes.blocks.iter().enumerate() {
        let n1 = tape.layer_norm(h, bn.ln1_gamma, bn.ln1_beta, LN_EPS)?;
        let wq = match hook(tape, bi, Projection::Query)? {
            Some(delta) => tape.add(bn.wq, delta)?,
            None => bn.wq,
        };
        let wv = match hook(tape, bi, Projection::Value)? {
            Some(delta) => tape.add(bn.wv, delta)?,
            None => bn.wv,
        };
        let q = tape.matmul(n1, wq)?;
        let k = tape.matmul(n1, bn.wk)?;
        let v = tape.matmul(n1, wv)?;
        let att = tape.attention(q, k, v, cfg.num_heads, tokens)?;
        let o = tape.matmul(att, bn.wo)?;
        h = tape.add(h, o)?;

        let n2 = tape.layer_norm(h, bn.ln2_gamma, bn.ln2_beta, LN_EPS)?;
        let mut m = tape.matmul(n2, bn.w1)?;
        m = tape.add_row(m, bn.b1)?;
        m = tape.gelu(m)?;
        m = tape.matmul(m, bn.w2)?;
        m = tape.add_row(m, bn.b2)?;
        h = tape.add(h, m)?;
    }

    let hf = tape.layer_norm(h, nodes.final_gamma, nodes.final_beta, LN_EPS)?;
    tape.mean_pool(hf, tokens)
}

/// Evaluate features for a whole input matrix with the backbone frozen,
/// batching internally. `set` folds in a fixed adapter set; None runs the
/// bare backbone.
pub fn compute_features(
    weights: &BackboneWeights,
    set: Option<&LoraSet>,
    inputs: &Tensor,
    batch_size: usize,
) -> Result<Tensor> {
    if batch_size == 0 {
        return Err(Error::Range("batch_size must be positive".into()));
    }
    let n = inputs.shape()[0];
    let d = weights.config.model_dim;
    let mut out = Tensor::zeros(&[n, d]);
    let mut start = 0;
    while start < n {
        let stop = (start + batch_size).min(n);
        let chunk = inputs.row_range(start, stop)?;
        let mut tape = Tape::new();
        let nodes = register_backbone(&mut tape, weights, false);
        let feat = match set {
            Some(s) => {
                let mut hook = fixed_set_hook(s);
                forward_features(&mut tape, weights, &nodes, &mut hook, &chunk)?
            }
            None => {
                let mut hook = no_adapter_hook();
                forward_features(&mut tape, weights, &nodes, &mut hook, &chunk)?
            }
        };
        let vals = tape.value(feat);
        out.data_mut()[start * d..stop * d].copy_from_slice(vals.data());
        start = stop;
    }
    Ok(out)
}

/// Affine classification head that grows one row per class, in order of
/// first appearance. Rows are zero-initialized so expansion never disturbs
/// logits of existing classes.
#[derive(Debug)]
pub struct Classifier {
    weight: Tensor,
    bias: Tensor,
    class_ids: Vec<u32>,
    evals: AtomicU64,
}

impl Clone for Classifier {
    fn clone(&self) -> Self {
        Classifier {
            weight: self.weight.clone(),
            bias: self.bias.clone(),
            class_ids: self.class_ids.clone(),
            evals: AtomicU64::new(self.evals.load(Ordering::SeqCst)),
        }
    }
}

impl Classifier {
    pub fn new(feature_dim: usize) -> Classifier {
        Classifier {
            weight: Tensor::zeros(&[0, feature_dim]),
            bias: Tensor::zeros(&[0]),
            class_ids: Vec::new(),
            evals: AtomicU64::new(0),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn row_of(&self, class_id: u32) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    /// Append zero-initialized rows for new classes. Existing rows keep
    /// their exact bytes.
    pub fn expand(&mut self, new_class_ids: &[u32]) -> Result<()> {
        for &id in new_class_ids {
            if self.class_ids.contains(&id) {
                return Err(Error::Consistency(format!("class {id} already has a classifier row")));
            }
        }
        let d = self.feature_dim();
        let old_c = self.num_classes();
        let add = new_class_ids.len();
        let mut w = Tensor::zeros(&[old_c + add, d]);
        w.data_mut()[..old_c * d].copy_from_slice(self.weight.data());
        let mut b = Tensor::zeros(&[old_c + add]);
        b.data_mut()[..old_c].copy_from_slice(self.bias.data());
        self.weight = w;
        self.bias = b;
        self.class_ids.extend_from_slice(new_class_ids);
        Ok(())
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// Replace the full head (used by refinement and head training).
    pub fn set_head(&mut self, weight: Tensor, bias: Tensor) -> Result<()> {
        if weight.shape() != self.weight.shape() || bias.shape() != self.bias.shape() {
            return Err(Error::Dimension(format!(
                "head replacement {:?}/{:?} does not match {:?}/{:?}",
                weight.shape(),
                bias.shape(),
                self.weight.shape(),
                self.bias.shape()
            )));
        }
        weight.validate_finite("classifier weight")?;
        bias.validate_finite("classifier bias")?;
        self.weight = weight;
        self.bias = bias;
        Ok(())
    }

    /// Raw logits for a feature batch; counts as a classifier evaluation.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        self.evals.fetch_add(1, Ordering::SeqCst);
        let scores = crate::numerics::kernels::matmul_nt(features, &self.weight)?;
        crate::numerics::kernels::add_row(&scores, &self.bias)
    }

    /// Predicted class ids (argmax over rows; ties resolve to the lowest
    /// row index, i.e. the earliest-seen class).
    pub fn predict(&self, features: &Tensor) -> Result<Vec<u32>> {
        let logits = self.logits(features)?;
        let c = self.num_classes();
        if c == 0 {
            return Err(Error::Consistency("prediction with an empty classifier".into()));
        }
        let mut out = Vec::with_capacity(logits.shape()[0]);
        for rowi in 0..logits.shape()[0] {
            let row = logits.row_slice(rowi);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(self.class_ids[best]);
        }
        Ok(out)
    }

    /// How many times `logits`/`predict` ran — lets tests prove a phase
    /// never consulted the classifier.
    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    /// Classes used for pretraining (must not reappear in the stream).
    pub classes: Vec<u32>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Held-out accuracy the pretrained backbone must reach.
    pub min_holdout_accuracy: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PretrainOutcome {
    pub holdout_accuracy: f64,
    pub final_train_loss: f64,
    pub backbone_checksum: u64,
}

/// Train backbone + throwaway head jointly with cross-entropy on the
/// pretraining classes, then score the result on held-out data. The head
/// is discarded; only the feature extractor survives. Labels are head rows
/// in ascending class-id order.
pub fn pretrain_backbone(
    config: &BackboneConfig,
    pretrain_cfg: &PretrainConfig,
    train_inputs: &Tensor,
    train_labels: &[u32],
    holdout_inputs: &Tensor,
    holdout_labels: &[u32],
) -> Result<(BackboneWeights, PretrainOutcome)> {
    if pretrain_cfg.epochs == 0 || pretrain_cfg.batch_size == 0 {
        return Err(Error::Config("pretraining needs positive epochs and batch size".into()));
    }
    let mut class_ids = pretrain_cfg.classes.clone();
    class_ids.sort_unstable();
    class_ids.dedup();
    if class_ids.len() < 2 {
        return Err(Error::Config("pretraining needs at least two classes".into()));
    }
    let row_of = |label: u32| -> Result<usize> {
        class_ids
            .binary_search(&label)
            .map_err(|_| Error::Consistency(format!("label {label} is not a pretraining class")))
    };

    let mut rng = SeededRng::derive(pretrain_cfg.seed, &["pretrain"]);
    let mut weights = BackboneWeights::init(config, &mut rng)?;
    let d = config.model_dim;
    let c = class_ids.len();
    let mut head_w = Tensor::from_vec(&[c, d], rng.normal_vec(c * d, 0.0, 0.02))?;
    let mut head_b = Tensor::zeros(&[c]);

    let n = train_inputs.shape()[0];
    if train_labels.len() != n {
        return Err(Error::Dimension(format!("{n} inputs but {} labels", train_labels.len())));
    }
    let mut opt = SgdMomentum::new(pretrain_cfg.learning_rate, pretrain_cfg.momentum)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut last_loss = f64::NAN;

    for epoch in 0..pretrain_cfg.epochs {
        opt.set_lr(cosine_anneal_lr(epoch, pretrain_cfg.epochs, pretrain_cfg.learning_rate)?)?;
        rng.shuffle(&mut order);
        for chunk in order.chunks(pretrain_cfg.batch_size) {
            let inputs = train_inputs.gather_rows(chunk)?;
            let labels: Vec<usize> =
                chunk.iter().map(|&i| row_of(train_labels[i])).collect::<Result<_>>()?;

            let mut tape = Tape::new();
            let nodes = register_backbone(&mut tape, &weights, true);
            let wv = tape.leaf(head_w.clone().with_requires_grad(true));
            let bv = tape.leaf(head_b.clone().with_requires_grad(true));
            let mut hook = no_adapter_hook();
            let feat = forward_features(&mut tape, &weights, &nodes, &mut hook, &inputs)?;
            let scores = tape.matmul_nt(feat, wv)?;
            let logits = tape.add_row(scores, bv)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            tape.backward(loss)?;
            last_loss = tape.value(loss).item()?;

            let mut param_vars = nodes.param_vars();
            param_vars.push(wv);
            param_vars.push(bv);
            let grads: Vec<Vec<f64>> = param_vars
                .iter()
                .map(|&v| {
                    tape.grad(v)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
                })
                .collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            let mut params = weights.params_mut();
            params.push(&mut head_w);
            params.push(&mut head_b);
            opt.step(&mut params, &grad_refs)?;
        }
    }

    // Score on the held-out split with the throwaway head.
    let feats = compute_features(&weights, None, holdout_inputs, 256)?;
    let scores = crate::numerics::kernels::matmul_nt(&feats, &head_w)?;
    let logits = crate::numerics::kernels::add_row(&scores, &head_b)?;
    let mut correct = 0usize;
    for i in 0..holdout_inputs.shape()[0] {
        let row = logits.row_slice(i);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if class_ids[best] == holdout_labels[i] {
            correct += 1;
        }
    }
    let holdout_accuracy = correct as f64 / holdout_labels.len().max(1) as f64;
    if holdout_accuracy < pretrain_cfg.min_holdout_accuracy {
        return Err(Error::Consistency(format!(
            "pretrained backbone reached {:.3} held-out accuracy, below the {:.3} gate",
            holdout_accuracy, pretrain_cfg.min_holdout_accuracy
        )));
    }
    let outcome = PretrainOutcome {
        holdout_accuracy,
        final_train_loss: last_loss,
        backbone_checksum: weights.checksum(),
    };
    Ok((weights, outcome))
}
