//! A multinomial logistic-regression probe.
//!
//! Trained directly on raw inputs, the probe measures how linearly
//! separable the data is. The experiment's data generator is required to
//! produce inputs that defeat this probe while remaining learnable
//! through the feature extractor — otherwise a plain linear model would
//! explain away any result.

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::optim::{cosine_anneal_lr, SgdMomentum};
use crate::numerics::rng::SeededRng;
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 40, batch_size: 32, learning_rate: 0.2, momentum: 0.9, seed: 17 }
    }
}

/// Train a linear classifier on `(train_x, train_labels)` and return its
/// accuracy on `(test_x, test_labels)`. Labels are arbitrary ids; rows are
/// assigned by sorted order.
pub fn linear_probe_accuracy(
    train_x: &Tensor,
    train_labels: &[u32],
    test_x: &Tensor,
    test_labels: &[u32],
    cfg: &ProbeConfig,
) -> Result<f64> {
    if train_x.shape().len() != 2 || test_x.shape().len() != 2 {
        return Err(Error::Dimension("probe expects [n, d] matrices".into()));
    }
    let n = train_x.shape()[0];
    let d = train_x.shape()[1];
    if n != train_labels.len() || test_x.shape()[0] != test_labels.len() {
        return Err(Error::Dimension("probe labels must match row counts".into()));
    }
    if test_x.shape()[1] != d {
        return Err(Error::Dimension("probe train/test widths differ".into()));
    }
    if n == 0 {
        return Err(Error::Config("probe needs training data".into()));
    }
    let mut ids: Vec<u32> = train_labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::Config("probe needs at least two classes".into()));
    }
    let row_of = |label: u32| -> Result<usize> {
        ids.binary_search(&label)
            .map_err(|_| Error::Index(format!("label {label} unseen during probe training")))
    };
    let c = ids.len();

    let mut weight = Tensor::zeros(&[c, d]);
    let mut bias = Tensor::zeros(&[c]);
    weight.set_requires_grad(true);
    bias.set_requires_grad(true);

    let mut opt = SgdMomentum::new(cfg.learning_rate, cfg.momentum)?;
    let mut rng = SeededRng::derive(cfg.seed, &["probe"]);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        opt.set_lr(cosine_anneal_lr(epoch, cfg.epochs, cfg.learning_rate)?)?;
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let x = train_x.gather_rows(chunk)?;
            let y: Vec<usize> =
                chunk.iter().map(|&i| row_of(train_labels[i])).collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let wv = tape.leaf(weight.clone());
            let bv = tape.leaf(bias.clone());
            let scores = tape.matmul_nt(xv, wv)?;
            let logits = tape.add_row(scores, bv)?;
            let loss = tape.cross_entropy(logits, &y)?;
            tape.backward(loss)?;
            let gw = tape.grad(wv).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; c * d]);
            let gb = tape.grad(bv).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; c]);
            opt.step(&mut [&mut weight, &mut bias], &[&gw, &gb])?;
        }
    }

    let logits = kernels::add_row(&kernels::matmul_nt(test_x, &weight)?, &bias)?;
    let mut correct = 0usize;
    for (r, &label) in test_labels.iter().enumerate() {
        let row = logits.row_slice(r);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if ids[best] == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_labels.len() as f64)
}
