//! Learned merging of the previous and current adapter sets.
//!
//! After each task, exactly two adapter sets exist: the running merged set
//! and the one just trained. This module learns how to combine them, one
//! scalar per (block, projection, matrix, role), by minimizing the mean
//! Shannon entropy of class-attribution distributions on a small unlabeled
//! merge dataset: each item's per-class Gaussian log-densities are min-max
//! normalized, sharpened by a temperature, and pushed through a softmax;
//! confident attributions mean the merged features still fall inside some
//! class's density model.
//!
//! This phase touches no labels and never consults the classifier — it only
//! needs the backbone, the two adapter sets, the class statistics, and raw
//! inputs.

use crate::backbone::{forward_features, register_backbone, BackboneWeights};
use crate::error::{Error, Result};
use crate::lora::{LoraSet, MatrixSlot, MergeCoefficients, Projection, Role};
use crate::numerics::optim::SgdMomentum;
use crate::numerics::rng::SeededRng;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::stats::StatsStore;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsolidationConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Temperature dividing the normalized surrogate logits before the
    /// softmax; smaller values sharpen attributions.
    pub temperature: f64,
    /// Starting value for every [previous, current] coefficient pair.
    pub lambda_init: [f64; 2],
    /// Items sampled into the merge dataset.
    pub merge_dataset_size: usize,
}

impl ConsolidationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("consolidation batch_size must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "consolidation temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.merge_dataset_size == 0 {
            return Err(Error::Config("merge_dataset_size must be positive".into()));
        }
        if !self.lambda_init.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("lambda_init must be finite".into()));
        }
        Ok(())
    }
}

/// Unlabeled inputs used to optimize merge coefficients. Deliberately
/// carries no labels: the merging phase cannot see any.
#[derive(Debug, Clone)]
pub struct MergeDataset {
    pub inputs: Tensor,
}

impl MergeDataset {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sample `size` rows from the concatenation of the given pools. Sampling
/// is without replacement while the pools suffice; an undersized pool falls
/// back to with-replacement sampling and reports it.
pub fn sample_merge_dataset(
    pools: &[&Tensor],
    size: usize,
    rng: &mut SeededRng,
) -> Result<(MergeDataset, bool)> {
    if size == 0 {
        return Err(Error::Config("merge dataset size must be positive".into()));
    }
    if pools.is_empty() {
        return Err(Error::Config("merge dataset needs at least one input pool".into()));
    }
    let cols = pools[0].shape()[1];
    let mut total = 0usize;
    for p in pools {
        if p.shape().len() != 2 || p.shape()[1] != cols {
            return Err(Error::Dimension(format!(
                "merge pool shape {:?} incompatible with width {cols}",
                p.shape()
            )));
        }
        total += p.shape()[0];
    }
    if total == 0 {
        return Err(Error::Config("merge dataset pools are all empty".into()));
    }
    let with_replacement = size > total;
    let picks = if with_replacement {
        rng.sample_with_replacement(total, size)
    } else {
        rng.sample_without_replacement(total, size)
    };
    let mut data = Vec::with_capacity(size * cols);
    for flat in picks {
        let mut idx = flat;
        for p in pools {
            let n = p.shape()[0];
            if idx < n {
                data.extend_from_slice(p.row_slice(idx));
                break;
            }
            idx -= n;
        }
    }
    Ok((MergeDataset { inputs: Tensor::from_vec(&[size, cols], data)? }, with_replacement))
}

/// Graph handles for every merge coefficient, aligned with
/// [`MergeCoefficients::values`] slot order.
pub struct CoefficientVars {
    num_blocks: usize,
    vars: Vec<Var>,
}

impl CoefficientVars {
    pub fn var(&self, block: usize, proj: Projection, slot: MatrixSlot, role: Role) -> Var {
        self.vars[MergeCoefficients::slot_index(block, proj, slot, role)]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }
}

/// Put every coefficient on the tape as a scalar leaf.
pub fn register_coefficients(
    tape: &mut Tape,
    coeffs: &MergeCoefficients,
    trainable: bool,
) -> CoefficientVars {
    let vars = coeffs
        .values()
        .iter()
        .map(|&v| tape.leaf(Tensor::scalar(v).with_requires_grad(trainable)))
        .collect();
    CoefficientVars { num_blocks: coeffs.num_blocks(), vars }
}

/// Adapter hook computing, per site, the delta of the coefficient-merged
/// pair: (λpA·Ap + λcA·Ac)·(λpB·Bp + λcB·Bc). The λ nodes come from
/// `cv`, so gradients flow to the coefficients and nowhere else.
pub fn merged_set_hook<'a>(
    prev: &'a LoraSet,
    curr: &'a LoraSet,
    cv: &'a CoefficientVars,
) -> impl FnMut(&mut Tape, usize, Projection) -> Result<Option<Var>> + 'a {
    move |tape: &mut Tape, block: usize, proj: Projection| -> Result<Option<Var>> {
        let ap = tape.constant(prev.adapter(block, proj).a.clone());
        let bp = tape.constant(prev.adapter(block, proj).b.clone());
        let ac = tape.constant(curr.adapter(block, proj).a.clone());
        let bc = tape.constant(curr.adapter(block, proj).b.clone());
        let lpa = cv.var(block, proj, MatrixSlot::Down, Role::Previous);
        let lca = cv.var(block, proj, MatrixSlot::Down, Role::Current);
        let lpb = cv.var(block, proj, MatrixSlot::Up, Role::Previous);
        let lcb = cv.var(block, proj, MatrixSlot::Up, Role::Current);
        let sa_p = tape.scale_var(lpa, ap)?;
        let sa_c = tape.scale_var(lca, ac)?;
        let ma = tape.add(sa_p, sa_c)?;
        let sb_p = tape.scale_var(lpb, bp)?;
        let sb_c = tape.scale_var(lcb, bc)?;
        let mb = tape.add(sb_p, sb_c)?;
        Ok(Some(tape.matmul(ma, mb)?))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AttributionStats {
    /// Items whose surrogate logits were all equal and had to be skipped.
    pub degenerate_skipped: usize,
    /// Items that contributed to the loss.
    pub used: usize,
}

/// Build the attribution-entropy loss for one batch of unlabeled inputs
/// under the coefficient-merged adapters. Returns the scalar loss node.
///
/// Every term is bounded by [0, ln C]; items whose per-class densities tie
/// exactly carry no attribution signal and are skipped (counted).
pub fn attribution_loss(
    tape: &mut Tape,
    weights: &BackboneWeights,
    prev: &LoraSet,
    curr: &LoraSet,
    cv: &CoefficientVars,
    stats: &StatsStore,
    inputs: &Tensor,
    temperature: f64,
) -> Result<(Var, AttributionStats)> {
    let classes = stats.len();
    if classes < 2 {
        return Err(Error::Config(format!(
            "attribution entropy needs at least two classes, have {classes}"
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let d = weights.config.model_dim;
    if stats.dim() != Some(d) {
        return Err(Error::Dimension(format!(
            "class stats dim {:?} does not match feature dim {d}",
            stats.dim()
        )));
    }

    let nodes = register_backbone(tape, weights, false);
    let mut hook = merged_set_hook(prev, curr, cv);
    let feat = forward_features(tape, weights, &nodes, &mut hook, inputs)?;

    // Per-class constants, registered once per graph.
    let mut class_consts = Vec::with_capacity(classes);
    for s in stats.iter() {
        let mean = tape.constant(s.mean().clone());
        let precision = tape.constant(s.precision().clone());
        class_consts.push((mean, precision, s.log_norm_constant()));
    }

    let batch = inputs.shape()[0];
    let mut stats_out = AttributionStats::default();
    let mut terms = Vec::with_capacity(batch);
    for i in 0..batch {
        let z = tape.row(feat, i)?;
        let mut logits = Vec::with_capacity(classes);
        for &(mean, precision, log_norm) in &class_consts {
            let diff = tape.sub(z, mean)?;
            let solved = tape.matvec(precision, diff)?;
            let quad = tape.dot(diff, solved)?;
            let scaled = tape.scale(quad, -0.5)?;
            logits.push(tape.add_const(scaled, -0.5 * log_norm)?);
        }
        let stacked = tape.stack_scalars(&logits)?;
        let (normalized, degenerate) = tape.minmax_normalize(stacked)?;
        if degenerate {
            stats_out.degenerate_skipped += 1;
            continue;
        }
        let sharpened = tape.scale(normalized, 1.0 / temperature)?;
        terms.push(tape.softmax_entropy(sharpened)?);
        stats_out.used += 1;
    }
    if terms.is_empty() {
        return Err(Error::Numeric(
            "every merge item had degenerate (all-equal) surrogate logits".into(),
        ));
    }
    let loss = tape.mean_scalars(&terms)?;
    Ok((loss, stats_out))
}

/// Loss value at fixed coefficients (no gradients) over one input matrix.
pub fn attribution_loss_value(
    weights: &BackboneWeights,
    prev: &LoraSet,
    curr: &LoraSet,
    coeffs: &MergeCoefficients,
    stats: &StatsStore,
    inputs: &Tensor,
    temperature: f64,
) -> Result<(f64, AttributionStats)> {
    let mut tape = Tape::new();
    let cv = register_coefficients(&mut tape, coeffs, false);
    let (loss, st) = attribution_loss(&mut tape, weights, prev, curr, &cv, stats, inputs, temperature)?;
    Ok((tape.value(loss).item()?, st))
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ConsolidationOutcome {
    /// Learned coefficient values in slot order.
    pub coefficient_values: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Pre-step loss of every optimization batch, in order.
    pub batch_losses: Vec<f64>,
    pub degenerate_skipped: usize,
    /// True when a non-finite loss aborted optimization; the returned
    /// coefficients are the last finite ones.
    pub aborted_non_finite: bool,
}

impl ConsolidationOutcome {
    pub fn coefficients(&self, num_blocks: usize) -> Result<MergeCoefficients> {
        let mut c = MergeCoefficients::splat(num_blocks, 0.0, 0.0);
        c.set_values(&self.coefficient_values)?;
        Ok(c)
    }
}

/// Learn merge coefficients by SGD with momentum on the attribution
/// entropy over the merge dataset. Zero epochs return the initialization
/// untouched (with its loss measured).
pub fn optimize_coefficients(
    weights: &BackboneWeights,
    prev: &LoraSet,
    curr: &LoraSet,
    stats: &StatsStore,
    merge: &MergeDataset,
    cfg: &ConsolidationConfig,
    rng: &mut SeededRng,
) -> Result<ConsolidationOutcome> {
    cfg.validate()?;
    if merge.is_empty() {
        return Err(Error::Config("merge dataset is empty".into()));
    }
    let num_blocks = prev.num_blocks();
    let mut coeffs = MergeCoefficients::balanced(num_blocks, cfg.lambda_init);
    let mut lambda = Tensor::from_vec(&[coeffs.len()], coeffs.values().to_vec())?;

    let (initial_loss, init_stats) =
        attribution_loss_value(weights, prev, curr, &coeffs, stats, &merge.inputs, cfg.temperature)?;
    let mut degenerate_skipped = init_stats.degenerate_skipped;
    let mut batch_losses = Vec::new();
    let mut aborted = false;

    let mut opt = SgdMomentum::new(cfg.learning_rate, cfg.momentum)?;
    let n = merge.len();
    let mut order: Vec<usize> = (0..n).collect();

    'epochs: for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let inputs = merge.inputs.gather_rows(chunk)?;
            let mut tape = Tape::new();
            coeffs.set_values(lambda.data())?;
            let cv = register_coefficients(&mut tape, &coeffs, true);
            let built = attribution_loss(
                &mut tape, weights, prev, curr, &cv, stats, &inputs, cfg.temperature,
            );
            let (loss, st) = match built {
                Ok(ok) => ok,
                Err(Error::Numeric(_)) => {
                    aborted = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            degenerate_skipped += st.degenerate_skipped;
            match tape.backward(loss) {
                Ok(()) => {}
                Err(Error::Numeric(_)) => {
                    aborted = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            batch_losses.push(tape.value(loss).item()?);
            let grad: Vec<f64> = cv
                .vars()
                .iter()
                .map(|&v| tape.grad(v).map(|g| g[0]).unwrap_or(0.0))
                .collect();
            if grad.iter().any(|g| !g.is_finite()) {
                aborted = true;
                break 'epochs;
            }
            opt.step(&mut [&mut lambda], &[&grad])?;
        }
    }

    coeffs.set_values(lambda.data())?;
    let (final_loss, _) =
        attribution_loss_value(weights, prev, curr, &coeffs, stats, &merge.inputs, cfg.temperature)?;
    Ok(ConsolidationOutcome {
        coefficient_values: coeffs.values().to_vec(),
        initial_loss,
        final_loss,
        batch_losses,
        degenerate_skipped,
        aborted_non_finite: aborted,
    })
}
