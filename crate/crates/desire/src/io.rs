//! Binary checkpoints and dataset files.
//!
//! Four little-endian formats, each identified by a 4-byte magic:
//!
//! * `DSRB` — frozen backbone weights (config header + every parameter in
//!   canonical order).
//! * `DSRL` — one adapter set (the "previous" state carried between CLI
//!   invocations).
//! * `DSRS` — per-class feature statistics, stored as *raw* moments; the
//!   covariance conditioning is re-derived on load so the file stays a pure
//!   moment record.
//! * `DSR1` — a labeled sample table (header `n, d, num_classes`, then `n`
//!   records of `d` features plus a `u32` label). This format carries no
//!   trailer; its layout is part of the external data contract.
//!
//! The three checkpoint formats end in an FNV-1a 64-bit digest of every
//! preceding byte, verified on load, so corruption and truncation surface as
//! parse errors rather than silently wrong numbers. All files are
//! byte-identical across platforms for identical contents.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::backbone::{BackboneConfig, BackboneWeights};
use crate::error::{Error, Result};
use crate::lora::{LoraSet, Projection};
use crate::numerics::tensor::Tensor;
use crate::pipeline::data::{Dataset, GeneratorConfig};
use crate::stats::{ClassStats, StatsStore};

const MAGIC_BACKBONE: &[u8; 4] = b"DSRB";
const MAGIC_ADAPTERS: &[u8; 4] = b"DSRL";
const MAGIC_STATS: &[u8; 4] = b"DSRS";
const MAGIC_DATASET: &[u8; 4] = b"DSR1";

/// Format revision written into every checkpoint header.
const VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Byte-level plumbing
// ---------------------------------------------------------------------------

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SHA-256 digest rendered as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

#[derive(Default)]
struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn with_capacity(n: usize) -> ByteWriter {
        ByteWriter { buf: Vec::with_capacity(n) }
    }

    fn magic(&mut self, m: &[u8; 4]) {
        self.buf.extend_from_slice(m);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for &v in vs {
            self.f64(v);
        }
    }

    /// Append the FNV-1a digest of everything written so far and return the
    /// finished buffer.
    fn seal(mut self) -> Vec<u8> {
        let digest = fnv1a64(&self.buf);
        self.u64(digest);
        self.buf
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    label: &'a str,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8], label: &'a str) -> ByteReader<'a> {
        ByteReader { buf, pos: 0, label }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse(format!(
                "{}: truncated at byte {} (wanted {n} more of {})",
                self.label,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expect {
            return Err(Error::Parse(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.label,
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expect)
            )));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != VERSION {
            return Err(Error::Parse(format!("{}: unsupported format version {v}", self.label)));
        }
        Ok(())
    }

    /// Separate the payload from the 8-byte digest trailer and verify it.
    fn verify_trailer(buf: &'a [u8], label: &str) -> Result<&'a [u8]> {
        if buf.len() < 8 {
            return Err(Error::Parse(format!("{label}: file too short to hold a digest")));
        }
        let (payload, trailer) = buf.split_at(buf.len() - 8);
        let stored = u64::from_le_bytes(trailer.try_into().unwrap());
        let computed = fnv1a64(payload);
        if stored != computed {
            return Err(Error::Parse(format!(
                "{label}: digest mismatch (stored {stored:016x}, computed {computed:016x}) — file corrupt"
            )));
        }
        Ok(payload)
    }

    /// Assert the payload was consumed exactly.
    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Parse(format!(
                "{}: {} unexpected trailing bytes",
                self.label,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("reading {}: {e}", path.display())))
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| {
                Error::Io(std::io::Error::new(e.kind(), format!("creating {}: {e}", parent.display())))
            })?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("writing {}: {e}", path.display())))
    })
}

fn usize_as_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Range(format!("{what} {v} exceeds u32 range")))
}

// ---------------------------------------------------------------------------
// Backbone checkpoints (DSRB)
// ---------------------------------------------------------------------------

/// Serialize frozen backbone weights: magic, version, the six config fields,
/// then every parameter tensor in canonical order, digest trailer last.
pub fn backbone_to_bytes(weights: &BackboneWeights) -> Result<Vec<u8>> {
    let cfg = &weights.config;
    cfg.validate()?;
    let mut w = ByteWriter::with_capacity(64 + weights.params().iter().map(|p| p.numel() * 8).sum::<usize>());
    w.magic(MAGIC_BACKBONE);
    w.u32(VERSION);
    for (name, v) in [
        ("num_blocks", cfg.num_blocks),
        ("model_dim", cfg.model_dim),
        ("num_heads", cfg.num_heads),
        ("mlp_hidden", cfg.mlp_hidden),
        ("input_dim", cfg.input_dim),
        ("tokens", cfg.tokens),
    ] {
        w.u32(usize_as_u32(v, name)?);
    }
    for p in weights.params() {
        w.f64s(p.data());
    }
    Ok(w.seal())
}

pub fn backbone_from_bytes(bytes: &[u8]) -> Result<BackboneWeights> {
    let payload = ByteReader::verify_trailer(bytes, "backbone checkpoint")?;
    let mut r = ByteReader::new(payload, "backbone checkpoint");
    r.magic(MAGIC_BACKBONE)?;
    r.version()?;
    let config = BackboneConfig {
        num_blocks: r.u32()? as usize,
        model_dim: r.u32()? as usize,
        num_heads: r.u32()? as usize,
        mlp_hidden: r.u32()? as usize,
        input_dim: r.u32()? as usize,
        tokens: r.u32()? as usize,
    };
    config.validate().map_err(|e| Error::Parse(format!("backbone checkpoint: {e}")))?;

    // Build a correctly-shaped skeleton, then overwrite every parameter in
    // the same canonical order the writer used.
    let mut rng = crate::numerics::rng::SeededRng::derive(0, &["checkpoint", "skeleton"]);
    let mut weights = BackboneWeights::init(&config, &mut rng)?;
    for p in weights.params_mut() {
        let n = p.numel();
        let data = r.f64s(n)?;
        p.data_mut().copy_from_slice(&data);
    }
    r.finish()?;
    for p in weights.params() {
        p.validate_finite("backbone checkpoint parameter")
            .map_err(|e| Error::Parse(format!("backbone checkpoint: {e}")))?;
    }
    Ok(weights)
}

pub fn save_backbone(path: &Path, weights: &BackboneWeights) -> Result<()> {
    write_file(path, &backbone_to_bytes(weights)?)
}

pub fn load_backbone(path: &Path) -> Result<BackboneWeights> {
    backbone_from_bytes(&read_file(path)?)
}

// ---------------------------------------------------------------------------
// Adapter checkpoints (DSRL)
// ---------------------------------------------------------------------------

/// Serialize one adapter set: magic, version, block count, rank, the two
/// projection dimensions, then per site (block-major, Q before V) the A and B
/// matrices, digest trailer last.
pub fn adapters_to_bytes(set: &LoraSet) -> Result<Vec<u8>> {
    let first = set.adapter(0, Projection::Query);
    let d = first.a.shape()[0];
    let k = first.b.shape()[1];
    let r = set.rank();
    let mut w = ByteWriter::with_capacity(32 + set.num_adapters() * (d * r + r * k) * 8);
    w.magic(MAGIC_ADAPTERS);
    w.u32(VERSION);
    w.u32(usize_as_u32(set.num_blocks(), "num_blocks")?);
    w.u32(usize_as_u32(r, "rank")?);
    w.u32(usize_as_u32(d, "input dim")?);
    w.u32(usize_as_u32(k, "output dim")?);
    for (_, _, adapter) in set.sites() {
        if adapter.a.shape() != [d, r] || adapter.b.shape() != [r, k] {
            return Err(Error::Dimension(format!(
                "adapter shapes {:?}/{:?} differ across sites",
                adapter.a.shape(),
                adapter.b.shape()
            )));
        }
        w.f64s(adapter.a.data());
        w.f64s(adapter.b.data());
    }
    Ok(w.seal())
}

pub fn adapters_from_bytes(bytes: &[u8]) -> Result<LoraSet> {
    let payload = ByteReader::verify_trailer(bytes, "adapter checkpoint")?;
    let mut r = ByteReader::new(payload, "adapter checkpoint");
    r.magic(MAGIC_ADAPTERS)?;
    r.version()?;
    let num_blocks = r.u32()? as usize;
    let rank = r.u32()? as usize;
    let d = r.u32()? as usize;
    let k = r.u32()? as usize;
    if num_blocks == 0 || rank == 0 || d == 0 || k == 0 {
        return Err(Error::Parse("adapter checkpoint: zero dimension in header".into()));
    }
    let mut parts = Vec::with_capacity(num_blocks * 2);
    for _ in 0..num_blocks * 2 {
        let a = Tensor::from_vec(&[d, rank], r.f64s(d * rank)?)?;
        let b = Tensor::from_vec(&[rank, k], r.f64s(rank * k)?)?;
        a.validate_finite("adapter A matrix").map_err(|e| Error::Parse(format!("adapter checkpoint: {e}")))?;
        b.validate_finite("adapter B matrix").map_err(|e| Error::Parse(format!("adapter checkpoint: {e}")))?;
        parts.push((a, b));
    }
    r.finish()?;
    LoraSet::from_parts(num_blocks, rank, &parts, None)
}

pub fn save_adapters(path: &Path, set: &LoraSet) -> Result<()> {
    write_file(path, &adapters_to_bytes(set)?)
}

pub fn load_adapters(path: &Path) -> Result<LoraSet> {
    adapters_from_bytes(&read_file(path)?)
}

// ---------------------------------------------------------------------------
// Statistics checkpoints (DSRS)
// ---------------------------------------------------------------------------

/// Serialize per-class statistics: magic, version, class count, feature
/// dimension, then per class its id, sample count, the conditioning epsilon
/// actually applied, the mean, and the *raw* covariance. On load the
/// conditioning is re-derived from the raw moments — the stored epsilon is
/// only a cross-check, so the file stays a pure moment record.
pub fn stats_to_bytes(store: &StatsStore) -> Result<Vec<u8>> {
    let d = store
        .dim()
        .ok_or_else(|| Error::Consistency("cannot serialize an empty statistics store".into()))?;
    let mut w = ByteWriter::with_capacity(16 + store.len() * (16 + 8 + d * 8 + d * d * 8));
    w.magic(MAGIC_STATS);
    w.u32(VERSION);
    w.u32(usize_as_u32(store.len(), "class count")?);
    w.u32(usize_as_u32(d, "feature dim")?);
    for stats in store.iter() {
        w.u32(stats.class_id());
        w.u32(usize_as_u32(stats.count(), "sample count")?);
        w.f64(stats.shrinkage());
        w.f64s(stats.mean().data());
        w.f64s(stats.covariance().data());
    }
    Ok(w.seal())
}

pub fn stats_from_bytes(bytes: &[u8]) -> Result<StatsStore> {
    let payload = ByteReader::verify_trailer(bytes, "stats checkpoint")?;
    let mut r = ByteReader::new(payload, "stats checkpoint");
    r.magic(MAGIC_STATS)?;
    r.version()?;
    let classes = r.u32()? as usize;
    let d = r.u32()? as usize;
    if d == 0 {
        return Err(Error::Parse("stats checkpoint: zero feature dimension".into()));
    }
    let mut store = StatsStore::new();
    for _ in 0..classes {
        let class_id = r.u32()?;
        let count = r.u32()? as usize;
        let eps = r.f64()?;
        let mean = Tensor::from_vec(&[d], r.f64s(d)?)?;
        let covariance = Tensor::from_vec(&[d, d], r.f64s(d * d)?)?;
        let stats = ClassStats::from_moments(class_id, count, mean, covariance)
            .map_err(|e| Error::Parse(format!("stats checkpoint class {class_id}: {e}")))?;
        if stats.shrinkage().to_bits() != eps.to_bits() {
            return Err(Error::Parse(format!(
                "stats checkpoint class {class_id}: conditioning epsilon {} does not reproduce stored {eps}",
                stats.shrinkage()
            )));
        }
        store.insert(stats)?;
    }
    r.finish()?;
    Ok(store)
}

pub fn save_stats(path: &Path, store: &StatsStore) -> Result<()> {
    write_file(path, &stats_to_bytes(store)?)
}

pub fn load_stats(path: &Path) -> Result<StatsStore> {
    stats_from_bytes(&read_file(path)?)
}

// ---------------------------------------------------------------------------
// Sample tables (DSR1) and dataset directories
// ---------------------------------------------------------------------------

/// Serialize one labeled sample table: magic, record count, feature
/// dimension, distinct-class count, then each record as `d` features followed
/// by its `u32` label. Records appear in ascending class order, original
/// sample order within a class. No trailer — the layout is pinned externally.
pub fn samples_to_bytes(split: &BTreeMap<u32, Tensor>, input_dim: usize) -> Result<Vec<u8>> {
    let n: usize = split.values().map(|t| t.shape()[0]).sum();
    let mut w = ByteWriter::with_capacity(16 + n * (input_dim * 8 + 4));
    w.magic(MAGIC_DATASET);
    w.u32(usize_as_u32(n, "record count")?);
    w.u32(usize_as_u32(input_dim, "feature dim")?);
    w.u32(usize_as_u32(split.len(), "class count")?);
    for (&class_id, samples) in split {
        if samples.shape().len() != 2 || samples.shape()[1] != input_dim {
            return Err(Error::Dimension(format!(
                "class {class_id} samples have shape {:?}, expected [*, {input_dim}]",
                samples.shape()
            )));
        }
        for row in 0..samples.shape()[0] {
            w.f64s(samples.row_slice(row));
            w.u32(class_id);
        }
    }
    Ok(w.buf)
}

pub fn samples_from_bytes(bytes: &[u8], label: &str) -> Result<BTreeMap<u32, Tensor>> {
    let mut r = ByteReader::new(bytes, label);
    r.magic(MAGIC_DATASET)?;
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    if d == 0 {
        return Err(Error::Parse(format!("{label}: zero feature dimension")));
    }
    let mut rows: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for _ in 0..n {
        let features = r.f64s(d)?;
        let class_id = r.u32()?;
        rows.entry(class_id).or_default().extend_from_slice(&features);
    }
    r.finish()?;
    if rows.len() != num_classes {
        return Err(Error::Parse(format!(
            "{label}: header promises {num_classes} classes, records contain {}",
            rows.len()
        )));
    }
    let mut split = BTreeMap::new();
    for (class_id, data) in rows {
        let count = data.len() / d;
        let t = Tensor::from_vec(&[count, d], data)?;
        t.validate_finite("sample features").map_err(|e| Error::Parse(format!("{label}: {e}")))?;
        split.insert(class_id, t);
    }
    Ok(split)
}

/// Sidecar describing a dataset directory: the generator settings and a
/// SHA-256 digest plus record count for each split file.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub num_classes: usize,
    pub input_dim: usize,
    pub generator: GeneratorConfig,
    pub files: BTreeMap<String, FileDigest>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDigest {
    pub sha256: String,
    pub records: usize,
}

pub const TRAIN_FILE: &str = "train.dsr1";
pub const TEST_FILE: &str = "test.dsr1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Write a generated dataset as a directory: one sample table per split plus
/// a JSON manifest recording the generator settings and file digests.
pub fn save_dataset(dir: &Path, dataset: &Dataset, generator: &GeneratorConfig) -> Result<DatasetManifest> {
    dataset.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("creating {}: {e}", dir.display())))
    })?;
    let mut files = BTreeMap::new();
    for (name, split) in [(TRAIN_FILE, &dataset.train), (TEST_FILE, &dataset.test)] {
        let bytes = samples_to_bytes(split, dataset.input_dim)?;
        write_file(&dir.join(name), &bytes)?;
        let records = split.values().map(|t| t.shape()[0]).sum();
        files.insert(name.to_string(), FileDigest { sha256: sha256_hex(&bytes), records });
    }
    let manifest = DatasetManifest {
        format: String::from_utf8_lossy(MAGIC_DATASET).into_owned(),
        num_classes: dataset.num_classes(),
        input_dim: dataset.input_dim,
        generator: generator.clone(),
        files,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Parse(format!("encoding manifest: {e}")))?;
    write_file(&dir.join(MANIFEST_FILE), format!("{json}\n").as_bytes())?;
    Ok(manifest)
}

/// Load a dataset directory written by [`save_dataset`], verifying each split
/// file against its manifest digest.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let manifest_bytes = read_file(&dir.join(MANIFEST_FILE))?;
    let manifest: DatasetManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Parse(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    if manifest.format != String::from_utf8_lossy(MAGIC_DATASET) {
        return Err(Error::Parse(format!("manifest format {:?} not supported", manifest.format)));
    }
    let mut splits = Vec::with_capacity(2);
    for name in [TRAIN_FILE, TEST_FILE] {
        let digest = manifest
            .files
            .get(name)
            .ok_or_else(|| Error::Parse(format!("manifest lists no digest for {name}")))?;
        let path = dir.join(name);
        let bytes = read_file(&path)?;
        let actual = sha256_hex(&bytes);
        if actual != digest.sha256 {
            return Err(Error::Parse(format!(
                "{}: digest mismatch against manifest — file corrupt or stale",
                path.display()
            )));
        }
        let split = samples_from_bytes(&bytes, name)?;
        let records: usize = split.values().map(|t| t.shape()[0]).sum();
        if records != digest.records {
            return Err(Error::Parse(format!(
                "{}: {} records, manifest promises {}",
                path.display(),
                records,
                digest.records
            )));
        }
        splits.push(split);
    }
    let test = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    let dataset = Dataset { input_dim: manifest.input_dim, train, test };
    dataset.validate()?;
    if dataset.num_classes() != manifest.num_classes {
        return Err(Error::Parse(format!(
            "dataset holds {} classes, manifest promises {}",
            dataset.num_classes(),
            manifest.num_classes
        )));
    }
    Ok((dataset, manifest))
}

/// Resolve the conventional paths inside a dataset directory.
pub fn dataset_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join(TRAIN_FILE), dir.join(TEST_FILE), dir.join(MANIFEST_FILE))
}
