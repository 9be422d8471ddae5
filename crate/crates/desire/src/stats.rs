//! Class-conditional Gaussian statistics over backbone features.
//!
//! After training on a task, the pipeline summarizes each new class by the
//! sample mean and unbiased covariance of its feature vectors. Those
//! moments stand in for the raw data from then on: they produce surrogate
//! logits (per-class log-densities) for coefficient optimization and
//! pseudo-features for classifier refinement, so earlier inputs never need
//! to be revisited.
//!
//! Raw covariances of small sample sets are often ill-conditioned, so each
//! class stores the smallest diagonal shrinkage from a fixed schedule that
//! makes the matrix positive definite, and caches the Cholesky factor,
//! log-determinant, and precision matrix of the conditioned covariance.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::linalg;
use crate::numerics::rng::SeededRng;
use crate::numerics::tensor::Tensor;

pub const LN_TWO_PI: f64 = 1.8378770664093453;

/// Relative shrinkage levels tried in order until the conditioned
/// covariance admits a Cholesky factorization.
pub const SHRINKAGE_SCHEDULE: [f64; 6] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

/// Moment summary of one class, with cached decompositions of the
/// conditioned covariance.
#[derive(Debug, Clone)]
pub struct ClassStats {
    class_id: u32,
    count: usize,
    mean: Tensor,
    covariance: Tensor,
    shrinkage: f64,
    chol: Tensor,
    precision: Tensor,
    logdet: f64,
}

impl ClassStats {
    /// Build stats from raw moments. `covariance` is the unconditioned
    /// (unbiased) estimate; shrinkage is chosen here, deterministically, so
    /// reconstructing from stored moments always reproduces the same
    /// conditioned matrix.
    pub fn from_moments(class_id: u32, count: usize, mean: Tensor, covariance: Tensor) -> Result<ClassStats> {
        let d = mean.numel();
        if mean.shape().len() != 1 {
            return Err(Error::Dimension(format!("class mean must be a vector, got {:?}", mean.shape())));
        }
        if covariance.shape() != [d, d] {
            return Err(Error::Dimension(format!(
                "covariance shape {:?} does not match feature dim {d}",
                covariance.shape()
            )));
        }
        mean.validate_finite("class mean")?;
        covariance.validate_finite("class covariance")?;

        let trace: f64 = (0..d).map(|i| covariance.at(i, i)).sum();
        // Relative to the average variance; falls back to an absolute unit
        // scale when the covariance is exactly zero (all-identical samples)
        // so the floor still produces a positive definite matrix.
        let scale = if trace > 0.0 { trace / d as f64 } else { 1.0 };

        let mut chosen: Option<(f64, Tensor)> = None;
        for rel in SHRINKAGE_SCHEDULE {
            let eps = rel * scale;
            let mut conditioned = covariance.clone();
            for i in 0..d {
                *conditioned.at_mut(i, i) += eps;
            }
            if let Ok(factor) = linalg::cholesky(&conditioned) {
                chosen = Some((eps, factor));
                break;
            }
        }
        let (shrinkage, chol) = chosen.ok_or_else(|| {
            Error::Conditioning(format!(
                "class {class_id}: covariance not positive definite at any shrinkage level"
            ))
        })?;
        let logdet = linalg::logdet_from_factor(&chol)?;
        let precision = linalg::spd_inverse_from_factor(&chol)?;
        Ok(ClassStats { class_id, count, mean, covariance, shrinkage, chol, precision, logdet })
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.mean.numel()
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    /// Unconditioned covariance, as estimated from the data.
    pub fn covariance(&self) -> &Tensor {
        &self.covariance
    }

    /// Diagonal shrinkage that was added to make the covariance positive
    /// definite (absolute value, already scaled).
    pub fn shrinkage(&self) -> f64 {
        self.shrinkage
    }

    /// Inverse of the conditioned covariance.
    pub fn precision(&self) -> &Tensor {
        &self.precision
    }

    /// log |conditioned covariance|.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// d·ln(2π) + ln|Σ| — the z-independent part of the log density.
    pub fn log_norm_constant(&self) -> f64 {
        self.dim() as f64 * LN_TWO_PI + self.logdet
    }

    /// Gaussian log density of `z` under this class's conditioned moments:
    /// −½ [(z−μ)ᵀ Σ⁻¹ (z−μ) + d·ln(2π) + ln|Σ|].
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        let d = self.dim();
        if z.len() != d {
            return Err(Error::Dimension(format!("feature has {} dims, stats have {d}", z.len())));
        }
        let centered: Vec<f64> = z.iter().zip(self.mean.data()).map(|(a, b)| a - b).collect();
        let solved = linalg::solve_with_factor(&self.chol, &centered)?;
        let quad: f64 = centered.iter().zip(&solved).map(|(a, b)| a * b).sum();
        let val = -0.5 * (quad + self.log_norm_constant());
        if !val.is_finite() {
            return Err(Error::Numeric(format!("non-finite log density for class {}", self.class_id)));
        }
        Ok(val)
    }

    /// Draw `n` pseudo-features ẑ = μ + L·ε with ε ~ N(0, I), where L is
    /// the Cholesky factor of the conditioned covariance — the same matrix
    /// the density uses, so sampled points score consistently.
    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> Result<Tensor> {
        let d = self.dim();
        let mut out = Tensor::zeros(&[n, d]);
        let mut eps = vec![0.0; d];
        for row in 0..n {
            for e in eps.iter_mut() {
                *e = rng.normal();
            }
            for i in 0..d {
                let mut acc = self.mean.data()[i];
                // L is lower triangular: row i uses ε[0..=i].
                for (j, &ej) in eps.iter().enumerate().take(i + 1) {
                    acc += self.chol.at(i, j) * ej;
                }
                *out.at_mut(row, i) = acc;
            }
        }
        Ok(out)
    }
}

/// Sample mean and unbiased covariance of `features` ([n × d], n ≥ 2),
/// conditioned per the shrinkage schedule.
pub fn compute_class_stats(class_id: u32, features: &Tensor) -> Result<ClassStats> {
    if features.shape().len() != 2 {
        return Err(Error::Dimension(format!("features must be [n × d], got {:?}", features.shape())));
    }
    let n = features.shape()[0];
    let d = features.shape()[1];
    if n < 2 {
        return Err(Error::InsufficientSamples(format!(
            "class {class_id}: covariance needs at least 2 samples, got {n}"
        )));
    }
    features.validate_finite("class features")?;

    let mut mean = vec![0.0; d];
    for row in 0..n {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += features.at(row, j);
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }

    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in 0..n {
        for j in 0..d {
            centered[j] = features.at(row, j) - mean[j];
        }
        for i in 0..d {
            let ci = centered[i];
            let dst = &mut cov[i * d..(i + 1) * d];
            for (j, c) in centered.iter().enumerate() {
                dst[j] += ci * c;
            }
        }
    }
    let denom = (n - 1) as f64;
    for v in cov.iter_mut() {
        *v /= denom;
    }

    ClassStats::from_moments(class_id, n, Tensor::from_vec(&[d], mean)?, Tensor::from_vec(&[d, d], cov)?)
}

/// All per-class statistics seen so far, keyed and iterated in class-id
/// order so every consumer sees one canonical class ordering.
#[derive(Debug, Clone, Default)]
pub struct StatsStore {
    stats: BTreeMap<u32, ClassStats>,
}

impl StatsStore {
    pub fn new() -> StatsStore {
        StatsStore::default()
    }

    /// Insert (or replace) one class's stats. All entries must share one
    /// feature dimension.
    pub fn insert(&mut self, stats: ClassStats) -> Result<()> {
        if let Some(existing) = self.stats.values().next() {
            if existing.dim() != stats.dim() {
                return Err(Error::Dimension(format!(
                    "class {} has dim {}, store has dim {}",
                    stats.class_id(),
                    stats.dim(),
                    existing.dim()
                )));
            }
        }
        self.stats.insert(stats.class_id(), stats);
        Ok(())
    }

    pub fn get(&self, class_id: u32) -> Option<&ClassStats> {
        self.stats.get(&class_id)
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.stats.values().next().map(|s| s.dim())
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.stats.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassStats> {
        self.stats.values()
    }

    /// Per-class log densities of `z`, in ascending class-id order.
    pub fn surrogate_logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        if self.stats.is_empty() {
            return Err(Error::Consistency("surrogate logits over an empty stats store".into()));
        }
        self.stats.values().map(|s| s.log_density(z)).collect()
    }
}
