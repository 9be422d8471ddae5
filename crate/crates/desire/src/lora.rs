//! Low-rank adapters and their merging machinery.
//!
//! Each adapted weight site (the query and value projections of every
//! transformer block) carries a pair of matrices: a down-projection `A`
//! ([d×r], small Gaussian init) and an up-projection `B` ([r×k], zero init),
//! contributing a delta `A·B` on top of the frozen base weight. Zero-init of
//! `B` guarantees a fresh adapter set is an exact identity.
//!
//! Task streams never hold more than two sets alive — the running merged
//! "previous" set and the "current" set being trained. That bound is not
//! just a convention: sets can register on an [`AdapterLedger`], and the
//! pipeline asserts the ledger's peak. Merging two sets is a per-site linear
//! combination of like matrices with learned coefficients, one scalar per
//! (block, projection, matrix, role) slot.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::rng::SeededRng;
use crate::numerics::tensor::Tensor;

/// Which attention projection a site adapts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Projection {
    Query,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 2] = [Projection::Query, Projection::Value];

    pub fn label(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Value => "v",
        }
    }

    fn index(self) -> usize {
        match self {
            Projection::Query => 0,
            Projection::Value => 1,
        }
    }
}

/// Which of the two low-rank matrices a merging coefficient scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixSlot {
    /// The down-projection (d×r).
    Down,
    /// The up-projection (r×k).
    Up,
}

impl MatrixSlot {
    pub const ALL: [MatrixSlot; 2] = [MatrixSlot::Down, MatrixSlot::Up];

    pub fn label(self) -> &'static str {
        match self {
            MatrixSlot::Down => "down",
            MatrixSlot::Up => "up",
        }
    }

    fn index(self) -> usize {
        match self {
            MatrixSlot::Down => 0,
            MatrixSlot::Up => 1,
        }
    }
}

/// Whose matrix a merging coefficient scales: the running merged set or the
/// freshly trained one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Previous,
    Current,
}

impl Role {
    pub const ALL: [Role; 2] = [Role::Previous, Role::Current];

    pub fn label(self) -> &'static str {
        match self {
            Role::Previous => "previous",
            Role::Current => "current",
        }
    }

    fn index(self) -> usize {
        match self {
            Role::Previous => 0,
            Role::Current => 1,
        }
    }
}

/// Counts live adapter instances so tests and the pipeline can prove the
/// two-set storage bound instead of assuming it.
#[derive(Debug, Default)]
pub struct AdapterLedger {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl AdapterLedger {
    pub fn new() -> Arc<AdapterLedger> {
        Arc::new(AdapterLedger::default())
    }

    fn register(&self) {
        let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    fn unregister(&self) {
        self.live.fetch_sub(1, Ordering::SeqCst);
    }

    /// Currently live adapters (one adapter = one A/B pair).
    pub fn live(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    /// High-water mark of live adapters.
    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub init_std: f64,
}

impl LoraConfig {
    pub fn validate(&self, d: usize, k: usize) -> Result<()> {
        let cap = d.min(k) / 4;
        if self.rank == 0 || self.rank > cap {
            return Err(Error::Config(format!(
                "adapter rank {} outside 1..={} for a {d}x{k} site",
                self.rank, cap
            )));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!("adapter init_std must be positive, got {}", self.init_std)));
        }
        Ok(())
    }
}

/// One low-rank pair attached to a single weight site.
#[derive(Debug)]
pub struct LoraAdapter {
    /// Down-projection A, [d × r], N(0, init_std²) init.
    pub a: Tensor,
    /// Up-projection B, [r × k], zero init.
    pub b: Tensor,
    ledger: Option<Arc<AdapterLedger>>,
}

impl LoraAdapter {
    fn new(a: Tensor, b: Tensor, ledger: Option<Arc<AdapterLedger>>) -> LoraAdapter {
        if let Some(l) = &ledger {
            l.register();
        }
        LoraAdapter { a, b, ledger }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    /// The dense delta this adapter adds to its base weight: A·B, [d × k].
    pub fn delta(&self) -> Result<Tensor> {
        kernels::matmul(&self.a, &self.b)
    }

    /// W + A·B. The base weight is untouched; a fresh (B = 0) adapter
    /// returns W exactly.
    pub fn effective_weight(&self, base: &Tensor) -> Result<Tensor> {
        let delta = self.delta()?;
        if base.shape() != delta.shape() {
            return Err(Error::Dimension(format!(
                "adapter delta {:?} does not match base weight {:?}",
                delta.shape(),
                base.shape()
            )));
        }
        kernels::add(base, &delta)
    }
}

impl Clone for LoraAdapter {
    fn clone(&self) -> Self {
        LoraAdapter::new(self.a.clone(), self.b.clone(), self.ledger.clone())
    }
}

impl Drop for LoraAdapter {
    fn drop(&mut self) {
        if let Some(l) = &self.ledger {
            l.unregister();
        }
    }
}

/// A full set of adapters: one per (block, projection) site, in a fixed
/// block-major, query-then-value order.
#[derive(Debug, Clone)]
pub struct LoraSet {
    num_blocks: usize,
    rank: usize,
    adapters: Vec<LoraAdapter>,
}

impl LoraSet {
    /// Freshly initialized set: every A ~ N(0, init_std²), every B = 0, so
    /// the set is an exact identity until trained.
    pub fn init(
        num_blocks: usize,
        d: usize,
        k: usize,
        cfg: &LoraConfig,
        rng: &mut SeededRng,
        ledger: Option<&Arc<AdapterLedger>>,
    ) -> Result<LoraSet> {
        if num_blocks == 0 {
            return Err(Error::Config("adapter set needs at least one block".into()));
        }
        cfg.validate(d, k)?;
        let mut adapters = Vec::with_capacity(num_blocks * 2);
        for _ in 0..num_blocks {
            for _ in Projection::ALL {
                let a = Tensor::from_vec(&[d, cfg.rank], rng.normal_vec(d * cfg.rank, 0.0, cfg.init_std))?;
                let b = Tensor::zeros(&[cfg.rank, k]);
                adapters.push(LoraAdapter::new(a, b, ledger.cloned()));
            }
        }
        Ok(LoraSet { num_blocks, rank: cfg.rank, adapters })
    }

    pub fn from_adapters(num_blocks: usize, rank: usize, adapters: Vec<LoraAdapter>) -> Result<LoraSet> {
        if adapters.len() != num_blocks * 2 {
            return Err(Error::Dimension(format!(
                "{} adapters for {} blocks (need {})",
                adapters.len(),
                num_blocks,
                num_blocks * 2
            )));
        }
        Ok(LoraSet { num_blocks, rank, adapters })
    }

    /// Rebuild a set from raw (A, B) pairs in site order, registering on
    /// `ledger` — used to revive serialized or cached sets.
    pub fn from_parts(
        num_blocks: usize,
        rank: usize,
        parts: &[(Tensor, Tensor)],
        ledger: Option<&Arc<AdapterLedger>>,
    ) -> Result<LoraSet> {
        if parts.len() != num_blocks * 2 {
            return Err(Error::Dimension(format!(
                "{} adapter pairs for {} blocks (need {})",
                parts.len(),
                num_blocks,
                num_blocks * 2
            )));
        }
        for (a, b) in parts {
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != rank || b.shape()[0] != rank {
                return Err(Error::Dimension(format!(
                    "adapter pair shapes {:?}/{:?} do not carry rank {rank}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        let adapters = parts
            .iter()
            .map(|(a, b)| LoraAdapter::new(a.clone(), b.clone(), ledger.cloned()))
            .collect();
        Ok(LoraSet { num_blocks, rank, adapters })
    }

    /// Raw (A, B) pairs in site order (for caching and serialization).
    pub fn to_parts(&self) -> Vec<(Tensor, Tensor)> {
        self.adapters.iter().map(|ad| (ad.a.clone(), ad.b.clone())).collect()
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn num_adapters(&self) -> usize {
        self.adapters.len()
    }

    pub fn adapter(&self, block: usize, proj: Projection) -> &LoraAdapter {
        &self.adapters[block * 2 + proj.index()]
    }

    pub fn adapter_mut(&mut self, block: usize, proj: Projection) -> &mut LoraAdapter {
        &mut self.adapters[block * 2 + proj.index()]
    }

    pub fn sites(&self) -> impl Iterator<Item = (usize, Projection, &LoraAdapter)> {
        self.adapters.iter().enumerate().map(|(i, ad)| {
            let proj = if i % 2 == 0 { Projection::Query } else { Projection::Value };
            (i / 2, proj, ad)
        })
    }

    fn check_compatible(&self, other: &LoraSet) -> Result<()> {
        if self.num_blocks != other.num_blocks || self.rank != other.rank {
            return Err(Error::Dimension(format!(
                "incompatible adapter sets: {} blocks rank {} vs {} blocks rank {}",
                self.num_blocks, self.rank, other.num_blocks, other.rank
            )));
        }
        for (site, (a, b)) in self.adapters.iter().zip(&other.adapters).enumerate() {
            if a.a.shape() != b.a.shape() || a.b.shape() != b.b.shape() {
                return Err(Error::Dimension(format!("adapter shape mismatch at site {site}")));
            }
        }
        Ok(())
    }

    /// Concatenated dense deltas of all sites, in site order — the task
    /// signature used by the cross-task similarity diagnostic.
    pub fn flattened_delta(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for ad in &self.adapters {
            out.extend_from_slice(ad.delta()?.data());
        }
        Ok(out)
    }

    /// Merge `curr` into this set in place: for every site and both
    /// matrices, self ← λ_prev·self + λ_curr·curr. Used by the pipeline so
    /// that no third set ever exists.
    pub fn merge_from(&mut self, curr: &LoraSet, coeffs: &MergeCoefficients) -> Result<()> {
        self.check_compatible(curr)?;
        coeffs.check_blocks(self.num_blocks)?;
        for block in 0..self.num_blocks {
            for proj in Projection::ALL {
                for slot in MatrixSlot::ALL {
                    let lp = coeffs.get(block, proj, slot, Role::Previous);
                    let lc = coeffs.get(block, proj, slot, Role::Current);
                    let (dst, src) = match slot {
                        MatrixSlot::Down => {
                            (&mut self.adapters[block * 2 + proj.index()].a, &curr.adapter(block, proj).a)
                        }
                        MatrixSlot::Up => {
                            (&mut self.adapters[block * 2 + proj.index()].b, &curr.adapter(block, proj).b)
                        }
                    };
                    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                        *d = lp * *d + lc * *s;
                    }
                    dst.validate_finite("merged adapter matrix")?;
                }
            }
        }
        Ok(())
    }
}

/// Pure merging of two sets into a new one (same arithmetic as
/// [`LoraSet::merge_from`]); the result is not ledger-tracked.
pub fn merge_sets(prev: &LoraSet, curr: &LoraSet, coeffs: &MergeCoefficients) -> Result<LoraSet> {
    let mut out = LoraSet {
        num_blocks: prev.num_blocks,
        rank: prev.rank,
        adapters: prev
            .adapters
            .iter()
            .map(|ad| LoraAdapter::new(ad.a.clone(), ad.b.clone(), None))
            .collect(),
    };
    out.merge_from(curr, coeffs)?;
    Ok(out)
}

/// One scalar per (block, projection, matrix, role): 8 per block.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeCoefficients {
    num_blocks: usize,
    values: Vec<f64>,
}

impl MergeCoefficients {
    pub const PER_BLOCK: usize = 8;

    /// Position of a coefficient in the flat slot order (block-major, then
    /// projection, matrix, role) — shared by the optimizer's parameter
    /// vector and graph registration.
    pub fn slot_index(block: usize, proj: Projection, slot: MatrixSlot, role: Role) -> usize {
        ((block * 2 + proj.index()) * 2 + slot.index()) * 2 + role.index()
    }

    fn slot(block: usize, proj: Projection, slot: MatrixSlot, role: Role) -> usize {
        Self::slot_index(block, proj, slot, role)
    }

    /// Every slot set to (prev_value, curr_value).
    pub fn splat(num_blocks: usize, prev_value: f64, curr_value: f64) -> MergeCoefficients {
        let mut values = vec![0.0; num_blocks * Self::PER_BLOCK];
        for i in 0..num_blocks * 4 {
            values[i * 2] = prev_value;
            values[i * 2 + 1] = curr_value;
        }
        MergeCoefficients { num_blocks, values }
    }

    /// Balanced starting point for coefficient optimization.
    pub fn balanced(num_blocks: usize, init: [f64; 2]) -> MergeCoefficients {
        Self::splat(num_blocks, init[0], init[1])
    }

    /// Coefficients that make the running merge a uniform average over all
    /// `t` sets seen so far: prev·(t−1)/t + curr·1/t.
    pub fn running_average(num_blocks: usize, t: usize) -> Result<MergeCoefficients> {
        if t < 2 {
            return Err(Error::Range(format!("running average needs task index >= 2, got {t}")));
        }
        let tf = t as f64;
        Ok(Self::splat(num_blocks, (tf - 1.0) / tf, 1.0 / tf))
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_blocks(&self, num_blocks: usize) -> Result<()> {
        if self.num_blocks != num_blocks {
            return Err(Error::Dimension(format!(
                "coefficients cover {} blocks, adapter set has {}",
                self.num_blocks, num_blocks
            )));
        }
        Ok(())
    }

    pub fn get(&self, block: usize, proj: Projection, slot: MatrixSlot, role: Role) -> f64 {
        self.values[Self::slot(block, proj, slot, role)]
    }

    pub fn set(&mut self, block: usize, proj: Projection, slot: MatrixSlot, role: Role, value: f64) {
        self.values[Self::slot(block, proj, slot, role)] = value;
    }

    /// Flat view in slot order (the optimizer treats this as one parameter).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Dimension(format!(
                "{} coefficient values for {} slots",
                values.len(),
                self.values.len()
            )));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> MergeCoefficients {
        MergeCoefficients {
            num_blocks: self.num_blocks,
            values: self.values.iter().map(|v| alpha * v).collect(),
        }
    }

    /// Rows for the coefficient dump: (block, projection, matrix, role, value).
    pub fn rows(&self) -> Vec<(usize, &'static str, &'static str, &'static str, f64)> {
        let mut out = Vec::with_capacity(self.values.len());
        for block in 0..self.num_blocks {
            for proj in Projection::ALL {
                for slot in MatrixSlot::ALL {
                    for role in Role::ALL {
                        out.push((
                            block,
                            proj.label(),
                            slot.label(),
                            role.label(),
                            self.get(block, proj, slot, role),
                        ));
                    }
                }
            }
        }
        out
    }
}

/// Pairwise cosine similarity between flattened task deltas.
#[derive(Debug, Clone)]
pub struct CosineReport {
    /// Indices (into the input list) of tasks with non-zero delta norm.
    pub included: Vec<usize>,
    /// Indices excluded because their delta norm was zero.
    pub excluded: Vec<usize>,
    /// [n_included × n_included] similarity matrix; unit diagonal.
    pub matrix: Tensor,
}

impl CosineReport {
    /// Mean |cos| over off-diagonal entries; zero when fewer than two tasks.
    pub fn mean_abs_off_diagonal(&self) -> f64 {
        let n = self.included.len();
        if n < 2 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += self.matrix.at(i, j).abs();
                }
            }
        }
        acc / (n * n - n) as f64
    }
}

/// Cosine similarities between per-task adapter deltas (each flattened to a
/// vector). Zero-norm deltas cannot be normalized and are excluded.
pub fn cross_task_cosine(deltas: &[Vec<f64>]) -> Result<CosineReport> {
    if deltas.is_empty() {
        return Err(Error::Dimension("cosine of zero task deltas".into()));
    }
    let len = deltas[0].len();
    for (i, d) in deltas.iter().enumerate() {
        if d.len() != len {
            return Err(Error::Dimension(format!(
                "task {i} delta has {} elements, expected {len}",
                d.len()
            )));
        }
        if !d.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric(format!("task {i} delta contains non-finite values")));
        }
    }
    let norms: Vec<f64> = deltas.iter().map(|d| d.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let included: Vec<usize> = (0..deltas.len()).filter(|&i| norms[i] > 0.0).collect();
    let excluded: Vec<usize> = (0..deltas.len()).filter(|&i| norms[i] == 0.0).collect();
    let n = included.len();
    let mut m = vec![0.0; n * n];
    for (r, &i) in included.iter().enumerate() {
        for (c, &j) in included.iter().enumerate() {
            if r == c {
                m[r * n + c] = 1.0;
            } else {
                let dot: f64 = deltas[i].iter().zip(&deltas[j]).map(|(&x, &y)| x * y).sum();
                m[r * n + c] = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(CosineReport { included, excluded, matrix: Tensor::from_vec(&[n, n], m)? })
}
