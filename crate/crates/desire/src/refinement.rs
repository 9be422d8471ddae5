//! Classifier refinement on pseudo-features.
//!
//! Individually trained classifier rows only ever saw their own task's
//! classes, so decision boundaries between classes from different tasks
//! were never calibrated against each other. This module redraws a balanced
//! synthetic feature set from the stored per-class Gaussians (ẑ = μ + L·ε,
//! using the same conditioned covariance factor the densities use) and
//! retrains the full head with cross-entropy over all seen classes — no
//! stored inputs, only moments.

use crate::backbone::Classifier;
use crate::error::{Error, Result};
use crate::numerics::optim::SgdMomentum;
use crate::numerics::rng::SeededRng;
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;
use crate::stats::StatsStore;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Pseudo-features drawn per class, independent of how many real
    /// samples the class had.
    pub pseudo_per_class: usize,
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("refinement batch_size must be positive".into()));
        }
        if self.pseudo_per_class == 0 {
            return Err(Error::Config("pseudo_per_class must be positive".into()));
        }
        Ok(())
    }
}

/// Draw exactly `per_class` pseudo-features from every stored class, in
/// ascending class-id order; labels are global class ids, one per row.
pub fn sample_pseudo_features(
    stats: &StatsStore,
    per_class: usize,
    rng: &mut SeededRng,
) -> Result<(Tensor, Vec<u32>)> {
    if per_class == 0 {
        return Err(Error::Config("pseudo_per_class must be positive".into()));
    }
    let d = stats
        .dim()
        .ok_or_else(|| Error::Consistency("pseudo-feature sampling from an empty stats store".into()))?;
    let classes = stats.len();
    let mut features = Tensor::zeros(&[classes * per_class, d]);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (ci, s) in stats.iter().enumerate() {
        let block = s.sample(per_class, rng)?;
        let start = ci * per_class * d;
        features.data_mut()[start..start + per_class * d].copy_from_slice(block.data());
        labels.extend(std::iter::repeat(s.class_id()).take(per_class));
    }
    Ok((features, labels))
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RefinementOutcome {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub samples: usize,
}

/// Retrain the full classification head (every row, old and new) with
/// cross-entropy on the given features and class-id labels. Zero epochs
/// leave the head bit-identical.
pub fn refine_classifier(
    classifier: &mut Classifier,
    features: &Tensor,
    labels: &[u32],
    cfg: &RefinementConfig,
    rng: &mut SeededRng,
) -> Result<RefinementOutcome> {
    cfg.validate()?;
    let n = features.shape()[0];
    if labels.len() != n {
        return Err(Error::Dimension(format!("{n} feature rows but {} labels", labels.len())));
    }
    if features.shape()[1] != classifier.feature_dim() {
        return Err(Error::Dimension(format!(
            "features of dim {} for a head of dim {}",
            features.shape()[1],
            classifier.feature_dim()
        )));
    }
    let rows: Vec<usize> = labels
        .iter()
        .map(|&id| {
            classifier
                .row_of(id)
                .ok_or_else(|| Error::Consistency(format!("label {id} has no classifier row")))
        })
        .collect::<Result<_>>()?;

    let full_loss = |w: &Tensor, b: &Tensor| -> Result<f64> {
        let scores = crate::numerics::kernels::matmul_nt(features, w)?;
        let logits = crate::numerics::kernels::add_row(&scores, b)?;
        Ok(crate::numerics::kernels::cross_entropy(&logits, &rows)?.0)
    };

    let mut w = classifier.weight().clone();
    let mut b = classifier.bias().clone();
    let initial_loss = full_loss(&w, &b)?;

    let mut opt = SgdMomentum::new(cfg.learning_rate, cfg.momentum)?;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = features.gather_rows(chunk)?;
            let batch_rows: Vec<usize> = chunk.iter().map(|&i| rows[i]).collect();
            let mut tape = Tape::new();
            let feat = tape.constant(batch);
            let wv = tape.leaf(w.clone().with_requires_grad(true));
            let bv = tape.leaf(b.clone().with_requires_grad(true));
            let scores = tape.matmul_nt(feat, wv)?;
            let logits = tape.add_row(scores, bv)?;
            let loss = tape.cross_entropy(logits, &batch_rows)?;
            tape.backward(loss)?;
            let gw = tape.grad(wv).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; w.numel()]);
            let gb = tape.grad(bv).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; b.numel()]);
            opt.step(&mut [&mut w, &mut b], &[&gw, &gb])?;
        }
    }

    let final_loss = full_loss(&w, &b)?;
    if cfg.epochs > 0 {
        classifier.set_head(w, b)?;
    }
    Ok(RefinementOutcome { initial_loss, final_loss, samples: n })
}
