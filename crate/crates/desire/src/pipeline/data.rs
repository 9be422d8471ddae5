//! Synthetic data generation and the task stream protocol.
//!
//! The generator samples each class as an anisotropic Gaussian in a shared
//! latent space, pushes every point through one fixed random nonlinear warp
//! (residual tanh layers followed by a linear lift), and adds observation
//! noise. Classes stay well separated in latent space while the warp bends
//! their images enough that raw-input linear models lose accuracy — which
//! is what makes a learned feature extractor worth having.
//!
//! The task stream slices a class list into equally sized tasks and hands
//! each task's training data out exactly once, by move. After a task is
//! trained, its raw training inputs are gone; only test pools (for
//! evaluation and unlabeled merge sampling) remain reachable. That makes
//! the no-revisiting protocol a property of the ownership system rather
//! than a promise.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::rng::SeededRng;
use crate::numerics::tensor::Tensor;

/// Per-class train/test pools of raw inputs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub input_dim: usize,
    pub train: BTreeMap<u32, Tensor>,
    pub test: BTreeMap<u32, Tensor>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.train.len()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.train.keys().copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Config("dataset has no classes".into()));
        }
        if self.train.keys().ne(self.test.keys()) {
            return Err(Error::Consistency("train/test class sets differ".into()));
        }
        for (id, t) in self.train.iter().chain(self.test.iter()) {
            if t.shape().len() != 2 || t.shape()[1] != self.input_dim {
                return Err(Error::Dimension(format!(
                    "class {id} pool shape {:?} does not match input dim {}",
                    t.shape(),
                    self.input_dim
                )));
            }
            t.validate_finite("dataset pool")?;
        }
        Ok(())
    }

    /// Stack the given classes' split into one matrix plus labels,
    /// concatenated in the order given.
    pub fn stacked(&self, train_split: bool, classes: &[u32]) -> Result<(Tensor, Vec<u32>)> {
        let source = if train_split { &self.train } else { &self.test };
        let mut rows = 0usize;
        for id in classes {
            rows += source
                .get(id)
                .ok_or_else(|| Error::Index(format!("class {id} not in dataset")))?
                .shape()[0];
        }
        let mut out = Tensor::zeros(&[rows, self.input_dim]);
        let mut labels = Vec::with_capacity(rows);
        let mut at = 0usize;
        for id in classes {
            let pool = &source[id];
            let n = pool.shape()[0];
            out.data_mut()[at * self.input_dim..(at + n) * self.input_dim].copy_from_slice(pool.data());
            labels.extend(std::iter::repeat(*id).take(n));
            at += n;
        }
        Ok((out, labels))
    }
}

/// An extra warp applied to the classes of one domain only, creating a
/// representation gap between a model pretrained on the earlier classes
/// and the data it later has to adapt to.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Classes with id ≥ this pass through the extra warp.
    pub from_class: u32,
    /// Residual tanh layers in the extra warp.
    pub depth: usize,
    /// Gain of the extra warp's random weights.
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_classes: u32,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Dimension of the latent space classes are sampled in.
    pub latent_dim: usize,
    /// Residual tanh layers in the shared warp.
    pub warp_depth: usize,
    /// Scale of class mean placement in latent space.
    pub mean_scale: f64,
    /// Per-dimension within-class standard deviations are drawn uniformly
    /// from this range.
    pub within_std: [f64; 2],
    /// Gain applied to each tanh layer's random weights.
    pub warp_gain: f64,
    /// Observation noise added after the lift.
    pub noise_std: f64,
    /// Extra warp for the later classes (the adaptation target domain).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub domain_shift: Option<DomainShift>,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Desk-scale defaults: callers override counts/seed as needed.
    pub fn desk(num_classes: u32, input_dim: usize, samples_per_class: usize, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            num_classes,
            input_dim,
            train_per_class: samples_per_class,
            test_per_class: samples_per_class,
            latent_dim: 16,
            warp_depth: 3,
            mean_scale: 1.0,
            within_std: [0.6, 1.3],
            warp_gain: 3.0,
            noise_std: 0.35,
            domain_shift: Some(DomainShift { from_class: num_classes / 2, depth: 2, gain: 2.0 }),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("generator needs at least two classes".into()));
        }
        if self.input_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config("generator dimensions must be positive".into()));
        }
        if self.train_per_class < 2 || self.test_per_class < 1 {
            return Err(Error::Config(
                "generator needs at least two train and one test sample per class".into(),
            ));
        }
        if !(self.within_std[0] > 0.0 && self.within_std[1] >= self.within_std[0]) {
            return Err(Error::Config("within_std range must be positive and ordered".into()));
        }
        if self.mean_scale <= 0.0 || self.warp_gain <= 0.0 || self.noise_std < 0.0 {
            return Err(Error::Config("generator scales must be positive".into()));
        }
        if let Some(shift) = &self.domain_shift {
            if shift.gain <= 0.0 {
                return Err(Error::Config("domain shift gain must be positive".into()));
            }
        }
        Ok(())
    }
}

/// The fixed nonlinear map from latent space to input space: `warp_depth`
/// residual tanh layers, then a linear lift. Shifted-domain classes pass
/// through extra residual layers between the shared stack and the lift.
struct Warp {
    layers: Vec<Tensor>,
    shift_layers: Vec<Tensor>,
    lift: Tensor,
}

fn residual_tanh(cur: &mut Tensor, w: &Tensor) -> Result<()> {
    let lin = kernels::matmul(cur, w)?;
    for (n, l) in cur.data_mut().iter_mut().zip(lin.data()) {
        *n += l.tanh();
    }
    Ok(())
}

impl Warp {
    fn sample(cfg: &GeneratorConfig, rng: &mut SeededRng, shift_rng: &mut SeededRng) -> Result<Warp> {
        let l = cfg.latent_dim;
        let scale = cfg.warp_gain / (l as f64).sqrt();
        let layers = (0..cfg.warp_depth)
            .map(|_| Tensor::from_vec(&[l, l], rng.normal_vec(l * l, 0.0, scale)))
            .collect::<Result<Vec<_>>>()?;
        let lift = Tensor::from_vec(
            &[l, cfg.input_dim],
            rng.normal_vec(l * cfg.input_dim, 0.0, 1.0 / (l as f64).sqrt()),
        )?;
        let shift_layers = match &cfg.domain_shift {
            Some(shift) => {
                let scale = shift.gain / (l as f64).sqrt();
                (0..shift.depth)
                    .map(|_| Tensor::from_vec(&[l, l], shift_rng.normal_vec(l * l, 0.0, scale)))
                    .collect::<Result<Vec<_>>>()?
            }
            None => Vec::new(),
        };
        Ok(Warp { layers, shift_layers, lift })
    }

    /// Apply to a batch of latent rows.
    fn apply(&self, h: &Tensor, shifted: bool) -> Result<Tensor> {
        let mut cur = h.clone();
        for w in &self.layers {
            residual_tanh(&mut cur, w)?;
        }
        if shifted {
            for w in &self.shift_layers {
                residual_tanh(&mut cur, w)?;
            }
        }
        kernels::matmul(&cur, &self.lift)
    }
}

/// Generate the full per-class dataset. Deterministic in the seed: class
/// placement, the warp, and every sample come from purpose-tagged streams.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut warp_rng = SeededRng::derive(cfg.seed, &["data", "warp"]);
    let mut shift_rng = SeededRng::derive(cfg.seed, &["data", "warp-shift"]);
    let warp = Warp::sample(cfg, &mut warp_rng, &mut shift_rng)?;

    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    for class in 0..cfg.num_classes {
        let shifted = cfg.domain_shift.as_ref().map(|s| class >= s.from_class).unwrap_or(false);
        let tag = class.to_string();
        let mut rng = SeededRng::derive(cfg.seed, &["data", "class", &tag]);
        let l = cfg.latent_dim;
        let mean = rng.normal_vec(l, 0.0, cfg.mean_scale);
        let stds: Vec<f64> = (0..l).map(|_| rng.uniform(cfg.within_std[0], cfg.within_std[1])).collect();
        let sample_split = |count: usize, rng: &mut SeededRng| -> Result<Tensor> {
            let mut latent = Tensor::zeros(&[count, l]);
            for r in 0..count {
                for j in 0..l {
                    *latent.at_mut(r, j) = mean[j] + stds[j] * rng.normal();
                }
            }
            let mut x = warp.apply(&latent, shifted)?;
            if cfg.noise_std > 0.0 {
                for v in x.data_mut().iter_mut() {
                    *v += cfg.noise_std * rng.normal();
                }
            }
            Ok(x)
        };
        train.insert(class, sample_split(cfg.train_per_class, &mut rng)?);
        test.insert(class, sample_split(cfg.test_per_class, &mut rng)?);
    }
    let ds = Dataset { input_dim: cfg.input_dim, train, test };
    ds.validate()?;
    Ok(ds)
}

/// One task: a set of classes introduced together.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Task {
    pub index: usize,
    pub class_ids: Vec<u32>,
}

/// The class-incremental stream. Training data is surrendered by move,
/// once per task; test pools stay for evaluation and unlabeled sampling.
#[derive(Debug)]
pub struct TaskStream {
    tasks: Vec<Task>,
    train: Vec<Option<(Tensor, Vec<u32>)>>,
    test: BTreeMap<u32, Tensor>,
    input_dim: usize,
}

impl TaskStream {
    /// Split `stream_classes` (in the order given) into `num_tasks` equal
    /// consecutive groups.
    pub fn new(dataset: &Dataset, stream_classes: &[u32], num_tasks: usize) -> Result<TaskStream> {
        if num_tasks == 0 {
            return Err(Error::Config("stream needs at least one task".into()));
        }
        if stream_classes.is_empty() || stream_classes.len() % num_tasks != 0 {
            return Err(Error::Config(format!(
                "{} stream classes cannot split into {num_tasks} equal tasks",
                stream_classes.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &c in stream_classes {
            if !seen.insert(c) {
                return Err(Error::Config(format!("class {c} appears twice in the stream")));
            }
        }
        let per = stream_classes.len() / num_tasks;
        let mut tasks = Vec::with_capacity(num_tasks);
        let mut train = Vec::with_capacity(num_tasks);
        let mut test = BTreeMap::new();
        for (index, chunk) in stream_classes.chunks(per).enumerate() {
            let task = Task { index, class_ids: chunk.to_vec() };
            let (inputs, labels) = dataset.stacked(true, chunk)?;
            train.push(Some((inputs, labels)));
            for &c in chunk {
                let pool = dataset
                    .test
                    .get(&c)
                    .ok_or_else(|| Error::Index(format!("class {c} missing test pool")))?;
                test.insert(c, pool.clone());
            }
            tasks.push(task);
        }
        Ok(TaskStream { tasks, train, test, input_dim: dataset.input_dim })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Move task `t`'s training data out. Second calls fail: the data is
    /// gone, which is exactly the rehearsal-free guarantee.
    pub fn take_train(&mut self, t: usize) -> Result<(Tensor, Vec<u32>)> {
        self.train
            .get_mut(t)
            .ok_or_else(|| Error::Index(format!("task {t} out of range")))?
            .take()
            .ok_or_else(|| Error::Leakage(format!("task {t} training data was already consumed")))
    }

    /// Whether task `t`'s training data is still reachable.
    pub fn train_available(&self, t: usize) -> bool {
        self.train.get(t).map(|o| o.is_some()).unwrap_or(false)
    }

    /// Test pool of one class (classes stay available once introduced).
    pub fn test_pool(&self, class_id: u32) -> Result<&Tensor> {
        self.test
            .get(&class_id)
            .ok_or_else(|| Error::Index(format!("class {class_id} not in stream")))
    }

    /// Class ids of tasks 0..=t in introduction order.
    pub fn seen_classes(&self, through_task: usize) -> Vec<u32> {
        self.tasks[..=through_task]
            .iter()
            .flat_map(|task| task.class_ids.iter().copied())
            .collect()
    }
}
