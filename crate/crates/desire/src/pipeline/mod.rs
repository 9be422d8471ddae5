//! End-to-end experiment orchestration: data generation, the task
//! stream, per-task adapter training, merging, refinement, evaluation,
//! and report assembly.
//!
//! [`run_variant`] executes one method variant over one seeded stream
//! and returns a [`metrics::RunReport`]. [`run_ablation`] executes every
//! variant over every seed, sharing the independent per-task training
//! trajectories between variants through a [`train::TrajectoryCache`]
//! (identical by construction, and checked by test).

pub mod data;
pub mod metrics;
pub mod probe;
pub mod train;

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::backbone::{compute_features, BackboneWeights, Classifier};
use crate::config::ExperimentConfig;
use crate::consolidation::{optimize_coefficients, sample_merge_dataset};
use crate::error::{Error, Result};
use crate::lora::{cross_task_cosine, AdapterLedger, LoraSet, MergeCoefficients};
use crate::numerics::rng::SeededRng;
use crate::numerics::tensor::Tensor;
use crate::refinement::{refine_classifier, sample_pseudo_features};
use crate::stats::StatsStore;

use data::{Dataset, TaskStream};
use metrics::{
    average_accuracy, population_sd, CosineSummary, DriftRecord, RunDiagnostics, RunReport,
    StageRecord, VariantSummary,
};
use train::{revive, train_individual, train_sequential, TrainedTask, TrajectoryCache};

/// The method variants the experiment compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Independent task training, learned merge coefficients, and
    /// pseudo-feature boundary refinement.
    DesireFull,
    /// Independent task training merged with fixed running-average
    /// coefficients; no refinement.
    BaselineMerge,
    /// Fixed-coefficient merging plus learned coefficients only
    /// (no refinement).
    BaselinePlusDrc,
    /// Fixed-coefficient merging plus refinement only.
    BaselinePlusDbr,
    /// One adapter set trained through the stream sequentially.
    SeqLora,
    /// Every task's set kept and averaged uniformly at evaluation time.
    WeightAverage,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::DesireFull,
        Variant::BaselineMerge,
        Variant::BaselinePlusDrc,
        Variant::BaselinePlusDbr,
        Variant::SeqLora,
        Variant::WeightAverage,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::DesireFull => "desire_full",
            Variant::BaselineMerge => "baseline_merge",
            Variant::BaselinePlusDrc => "baseline_plus_drc",
            Variant::BaselinePlusDbr => "baseline_plus_dbr",
            Variant::SeqLora => "seq_lora",
            Variant::WeightAverage => "weight_average",
        }
    }

    /// Whether per-task training is independent of earlier tasks (and
    /// therefore shareable through the trajectory cache).
    pub fn trains_independently(&self) -> bool {
        !matches!(self, Variant::SeqLora)
    }

    fn learns_coefficients(&self) -> bool {
        matches!(self, Variant::DesireFull | Variant::BaselinePlusDrc)
    }

    fn refines_boundary(&self) -> bool {
        matches!(self, Variant::DesireFull | Variant::BaselinePlusDbr)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        Variant::ALL
            .iter()
            .find(|v| v.as_str() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.as_str()).collect();
                Error::Config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Shared, read-only inputs of every run under one configuration.
pub struct RunContext<'a> {
    pub weights: &'a BackboneWeights,
    pub dataset: &'a Dataset,
    pub config: &'a ExperimentConfig,
    pub config_hash: &'a str,
}

/// Observer invoked once per (stage, class) with that class's feature
/// rows under the stage's deployed adapters.
pub type FeatureSink<'a> = dyn FnMut(usize, u32, &Tensor) + 'a;

struct ClassEval {
    correct: usize,
    total: usize,
    mean: Vec<f64>,
}

struct StageEval {
    accuracy: f64,
    per_class: BTreeMap<u32, ClassEval>,
}

/// One full evaluation pass over the union of seen test pools under the
/// deployed adapters: accuracy, per-class tallies, per-class feature
/// means, and optional feature export — all from a single feature pass.
fn evaluate_stage(
    weights: &BackboneWeights,
    set: &LoraSet,
    classifier: &Classifier,
    stream: &TaskStream,
    seen: &[u32],
    eval_batch: usize,
    stage: usize,
    sink: &mut Option<&mut FeatureSink<'_>>,
) -> Result<StageEval> {
    let d_in = stream.input_dim();
    let mut total_rows = 0usize;
    for &c in seen {
        total_rows += stream.test_pool(c)?.shape()[0];
    }
    if total_rows == 0 {
        return Err(Error::Config("no test data for seen classes".into()));
    }
    let mut inputs = Tensor::zeros(&[total_rows, d_in]);
    let mut labels = Vec::with_capacity(total_rows);
    let mut ranges: Vec<(u32, usize, usize)> = Vec::with_capacity(seen.len());
    let mut at = 0usize;
    for &c in seen {
        let pool = stream.test_pool(c)?;
        let n = pool.shape()[0];
        inputs.data_mut()[at * d_in..(at + n) * d_in].copy_from_slice(pool.data());
        labels.extend(std::iter::repeat(c).take(n));
        ranges.push((c, at, at + n));
        at += n;
    }

    let features = compute_features(weights, Some(set), &inputs, eval_batch)?;
    let predictions = classifier.predict(&features)?;

    let mut per_class = BTreeMap::new();
    let d = features.shape()[1];
    for &(c, start, stop) in &ranges {
        let mut correct = 0usize;
        let mut mean = vec![0.0; d];
        for r in start..stop {
            if predictions[r] == labels[r] {
                correct += 1;
            }
            for (m, v) in mean.iter_mut().zip(features.row_slice(r)) {
                *m += v;
            }
        }
        let n = (stop - start) as f64;
        for m in mean.iter_mut() {
            *m /= n;
        }
        if let Some(s) = sink.as_mut() {
            s(stage, c, &features.row_range(start, stop)?);
        }
        per_class.insert(c, ClassEval { correct, total: stop - start, mean });
    }
    let correct: usize = per_class.values().map(|e| e.correct).sum();
    Ok(StageEval { accuracy: correct as f64 / total_rows as f64, per_class })
}

/// Write one task's trained head rows into the global classifier.
fn install_head_rows(classifier: &mut Classifier, record_classes: &[u32], rows: &Tensor, bias: &[f64]) -> Result<()> {
    classifier.expand(record_classes)?;
    let mut weight = classifier.weight().clone();
    let mut b = classifier.bias().clone();
    let d = weight.shape()[1];
    for (i, &class) in record_classes.iter().enumerate() {
        let row = classifier
            .row_of(class)
            .ok_or_else(|| Error::Consistency(format!("class {class} missing after expansion")))?;
        weight.data_mut()[row * d..(row + 1) * d].copy_from_slice(rows.row_slice(i));
        b.data_mut()[row] = bias[i];
    }
    classifier.set_head(weight, b)
}

/// Uniform average of stored sets, built by repeated running-average
/// folding (equivalent to the arithmetic mean of the matrices).
fn uniform_average(stored: &[LoraSet]) -> Result<LoraSet> {
    let first = stored.first().ok_or_else(|| Error::Config("no stored sets to average".into()))?;
    let mut avg = first.clone();
    for (i, set) in stored.iter().enumerate().skip(1) {
        let coeffs = MergeCoefficients::running_average(avg.num_blocks(), i + 1)?;
        avg.merge_from(set, &coeffs)?;
    }
    Ok(avg)
}

/// The class order a seed visits: the configured stream list permuted by a
/// seed-derived shuffle, so every seed fixes one deterministic class order
/// and cross-seed aggregates average over orders.
pub fn stream_order(cfg: &ExperimentConfig, seed: u64) -> Vec<u32> {
    let mut classes = cfg.stream.classes.clone();
    let mut rng = SeededRng::derive(seed, &["stream", "order"]);
    rng.shuffle(&mut classes);
    classes
}

/// Execute one variant over one seeded stream.
///
/// `cache` may hold precomputed independent training results for this
/// seed; runs with and without it are byte-identical. `feature_sink`
/// observes per-class evaluation features at every stage.
pub fn run_variant(
    ctx: &RunContext<'_>,
    variant: Variant,
    seed: u64,
    cache: Option<&TrajectoryCache>,
    mut feature_sink: Option<&mut FeatureSink<'_>>,
) -> Result<RunReport> {
    let cfg = ctx.config;
    cfg.validate()?;
    let weights = ctx.weights;
    let checksum_before = weights.checksum();
    let d = weights.config.model_dim;
    let num_blocks = weights.config.num_blocks;

    let order = stream_order(cfg, seed);
    let mut stream = TaskStream::new(ctx.dataset, &order, cfg.stream.num_tasks)?;
    let num_tasks = stream.num_tasks();
    let ledger = AdapterLedger::new();
    let mut classifier = Classifier::new(d);
    let mut store = StatsStore::new();

    // Variant state.
    let mut deployed: Option<LoraSet> = None; // merge family
    let mut living: Option<LoraSet> = None; // sequential baseline
    let mut stored: Vec<LoraSet> = Vec::new(); // uniform-average baseline

    if variant == Variant::SeqLora {
        let mut init_rng = SeededRng::derive(seed, &["task", "0", "adapter-init"]);
        living = Some(LoraSet::init(num_blocks, d, d, &cfg.lora, &mut init_rng, Some(&ledger))?);
    }

    let mut stages: Vec<StageRecord> = Vec::with_capacity(num_tasks);
    let mut rehearsal_audit_passed = true;
    let mut consolidation_evals = 0u64;
    let mut sampled_with_replacement = false;
    let mut deltas: Vec<Vec<f64>> = Vec::new();
    let mut intro_means: BTreeMap<u32, (usize, Vec<f64>)> = BTreeMap::new();
    let mut drift: Vec<DriftRecord> = Vec::new();
    let mut final_eval: Option<StageEval> = None;

    for t in 0..num_tasks {
        // Earlier tasks' training data must already be unreachable, and
        // this task's must become unreachable once taken.
        for s in 0..t {
            if stream.train_available(s) {
                rehearsal_audit_passed = false;
            }
        }
        let task = stream.tasks()[t].clone();
        let (inputs, labels) = stream.take_train(t)?;
        if stream.train_available(t) {
            rehearsal_audit_passed = false;
        }

        // Train this task; independent variants may reuse cached results.
        let mut consolidation_outcome = None;
        let train_loss;
        if variant == Variant::SeqLora {
            let set = living.as_mut().expect("sequential set initialized above");
            let (rows, bias, loss) = train_sequential(
                weights, set, &cfg.individual, &task, &inputs, &labels, seed, cfg.eval_batch_size,
            )?;
            install_head_rows(&mut classifier, &task.class_ids, &rows, &bias)?;
            train_loss = loss;
            drop(inputs);
            drop(labels);
        } else {
            let (set, record): (LoraSet, TrainedTask) = match cache.and_then(|c| c.get(&(seed, t))) {
                Some(record) => {
                    let set = revive(record, num_blocks, cfg.lora.rank, Some(&ledger))?;
                    (set, record.clone())
                }
                None => train_individual(
                    weights,
                    &cfg.lora,
                    &cfg.individual,
                    &task,
                    &inputs,
                    &labels,
                    seed,
                    Some(&ledger),
                    cfg.eval_batch_size,
                )?,
            };
            // The raw task data is dropped here, before any merging or
            // refinement can see it.
            drop(inputs);
            drop(labels);

            install_head_rows(&mut classifier, &record.class_ids, &record.head_rows, &record.head_bias)?;
            for s in &record.stats {
                store.insert(s.clone())?;
            }
            deltas.push(record.delta_flat.clone());
            train_loss = record.final_train_loss;

            match variant {
                Variant::WeightAverage => stored.push(set),
                _ => {
                    if t == 0 {
                        deployed = Some(set);
                    } else {
                        let mut prev = deployed.take().expect("deployed set exists after task 0");
                        let curr = set;
                        let coeffs = if variant.learns_coefficients() {
                            let tag = t.to_string();
                            let mut merge_rng = SeededRng::derive(seed, &["task", &tag, "merge-data"]);
                            let seen = stream.seen_classes(t);
                            let pools: Vec<&Tensor> =
                                seen.iter().map(|&c| stream.test_pool(c)).collect::<Result<Vec<_>>>()?;
                            let (merge_ds, with_replacement) = sample_merge_dataset(
                                &pools,
                                cfg.consolidation.merge_dataset_size,
                                &mut merge_rng,
                            )?;
                            sampled_with_replacement |= with_replacement;

                            let evals_before = classifier.eval_count();
                            let mut drc_rng = SeededRng::derive(seed, &["task", &tag, "consolidation"]);
                            let outcome = optimize_coefficients(
                                weights, &prev, &curr, &store, &merge_ds, &cfg.consolidation, &mut drc_rng,
                            )?;
                            consolidation_evals += classifier.eval_count() - evals_before;
                            let coeffs = outcome.coefficients(num_blocks)?;
                            consolidation_outcome = Some(outcome);
                            coeffs
                        } else {
                            MergeCoefficients::running_average(num_blocks, t + 1)?
                        };
                        prev.merge_from(&curr, &coeffs)?;
                        deployed = Some(prev);
                    }
                }
            }
        }

        // Refinement: retrain the whole head on pseudo-features drawn
        // from the stored class statistics.
        let mut refinement_outcome = None;
        if variant.refines_boundary() {
            let tag = t.to_string();
            let mut refine_rng = SeededRng::derive(seed, &["task", &tag, "refinement"]);
            let (pseudo, pseudo_labels) =
                sample_pseudo_features(&store, cfg.refinement.pseudo_per_class, &mut refine_rng)?;
            refinement_outcome = Some(refine_classifier(
                &mut classifier,
                &pseudo,
                &pseudo_labels,
                &cfg.refinement,
                &mut refine_rng,
            )?);
        }

        // Evaluate the deployed adapters over everything seen so far.
        let eval_set: LoraSet = match variant {
            Variant::SeqLora => living.as_ref().expect("sequential set").clone(),
            Variant::WeightAverage => uniform_average(&stored)?,
            _ => deployed.as_ref().expect("deployed set").clone(),
        };
        let seen = stream.seen_classes(t);
        let eval = evaluate_stage(
            weights,
            &eval_set,
            &classifier,
            &stream,
            &seen,
            cfg.eval_batch_size,
            t,
            &mut feature_sink,
        )?;
        drop(eval_set);

        for (&class, ce) in &eval.per_class {
            match intro_means.get(&class) {
                Some((first_stage, first_mean)) => {
                    let shift = ce
                        .mean
                        .iter()
                        .zip(first_mean)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    drift.push(DriftRecord {
                        class_id: class,
                        first_stage: *first_stage,
                        stage: t,
                        mean_shift: shift,
                    });
                }
                None => {
                    intro_means.insert(class, (t, ce.mean.clone()));
                }
            }
        }

        stages.push(StageRecord {
            task_index: t,
            classes_seen: seen,
            accuracy: eval.accuracy,
            train_loss,
            consolidation: consolidation_outcome,
            refinement: refinement_outcome,
        });
        if t + 1 == num_tasks {
            final_eval = Some(eval);
        }
    }

    // Per-task accuracies at the end of the run.
    let final_eval = final_eval.expect("at least one task ran");
    let mut per_task_final = Vec::with_capacity(num_tasks);
    for task in stream.tasks() {
        let (mut correct, mut total) = (0usize, 0usize);
        for c in &task.class_ids {
            let ce = final_eval
                .per_class
                .get(c)
                .ok_or_else(|| Error::Consistency(format!("class {c} missing from final evaluation")))?;
            correct += ce.correct;
            total += ce.total;
        }
        per_task_final.push(correct as f64 / total as f64);
    }
    let last = stream.tasks().last().expect("stream is non-empty");
    let (mut prev_correct, mut prev_total) = (0usize, 0usize);
    for task in stream.tasks().iter().take(num_tasks - 1) {
        for c in &task.class_ids {
            let ce = &final_eval.per_class[c];
            prev_correct += ce.correct;
            prev_total += ce.total;
        }
    }
    let previous_tasks_accuracy = if prev_total == 0 {
        f64::NAN
    } else {
        prev_correct as f64 / prev_total as f64
    };

    let delta_cosine = if variant.trains_independently() && deltas.len() > 1 {
        let report = cross_task_cosine(&deltas)?;
        let mean = report.mean_abs_off_diagonal();
        let n = report.matrix.shape()[0];
        let matrix = (0..n).map(|r| report.matrix.row_slice(r).to_vec()).collect();
        Some(CosineSummary { matrix, excluded: report.excluded, mean_abs_off_diagonal: mean })
    } else {
        None
    };

    let adapter_sets_stored = match variant {
        Variant::WeightAverage => stored.len(),
        _ => 1,
    };
    let stage_accuracies: Vec<f64> = stages.iter().map(|s| s.accuracy).collect();
    let report = RunReport {
        variant: variant.as_str().to_string(),
        seed,
        config_hash: ctx.config_hash.to_string(),
        average_accuracy: average_accuracy(&stage_accuracies)?,
        last_accuracy: *stage_accuracies.last().expect("stages non-empty"),
        task_accuracy_sd: population_sd(&per_task_final)?,
        final_task_accuracy: per_task_final[last.index],
        previous_tasks_accuracy,
        per_task_final_accuracies: per_task_final,
        stages,
        diagnostics: RunDiagnostics {
            backbone_checksum_before: checksum_before,
            backbone_checksum_after: weights.checksum(),
            backbone_untouched: weights.checksum() == checksum_before,
            adapter_peak_live: ledger.peak(),
            adapter_sets_stored,
            classifier_evals_during_consolidation: consolidation_evals,
            rehearsal_audit_passed,
            merge_sampled_with_replacement: sampled_with_replacement,
            delta_cosine,
            drift,
        },
    };
    Ok(report)
}

/// Precompute the independent training trajectories one seed shares
/// across variants.
pub fn build_cache(ctx: &RunContext<'_>, seed: u64) -> Result<TrajectoryCache> {
    let cfg = ctx.config;
    let order = stream_order(cfg, seed);
    let mut stream = TaskStream::new(ctx.dataset, &order, cfg.stream.num_tasks)?;
    let mut cache = TrajectoryCache::new();
    for t in 0..stream.num_tasks() {
        let task = stream.tasks()[t].clone();
        let (inputs, labels) = stream.take_train(t)?;
        let (_, record) = train_individual(
            ctx.weights,
            &cfg.lora,
            &cfg.individual,
            &task,
            &inputs,
            &labels,
            seed,
            None,
            cfg.eval_batch_size,
        )?;
        cache.insert((seed, t), record);
    }
    Ok(cache)
}

/// Cross-seed, cross-variant summary.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub variants: Vec<VariantSummary>,
}

/// Run every requested variant over every seed. Independent training is
/// shared per seed through the trajectory cache; seeds are distributed
/// over `threads` workers, and results are ordered (variant-major, then
/// seed) regardless of thread count.
pub fn run_ablation(
    ctx: &RunContext<'_>,
    variants: &[Variant],
    seeds: &[u64],
    threads: usize,
) -> Result<(Vec<RunReport>, AblationReport)> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let threads = threads.max(1);

    // One seed's full workload: cache once (when any variant can reuse it),
    // then every variant.
    let wants_cache = variants.iter().any(|v| v.trains_independently());
    let run_seed = |seed: u64| -> Result<Vec<RunReport>> {
        let cache = if wants_cache { Some(build_cache(ctx, seed)?) } else { None };
        variants
            .iter()
            .map(|&v| {
                let used = if v.trains_independently() { cache.as_ref() } else { None };
                run_variant(ctx, v, seed, used, None)
            })
            .collect()
    };

    let mut by_seed: Vec<Vec<RunReport>> = Vec::with_capacity(seeds.len());
    if threads == 1 {
        for &seed in seeds {
            by_seed.push(run_seed(seed)?);
        }
    } else {
        let results: Vec<Result<Vec<RunReport>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .iter()
                .map(|&seed| scope.spawn(move || run_seed(seed)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numeric("worker thread panicked".into()))))
                .collect()
        });
        for r in results {
            by_seed.push(r?);
        }
    }

    // Variant-major ordering, seeds ascending within each variant.
    let mut reports = Vec::with_capacity(seeds.len() * variants.len());
    for (vi, _) in variants.iter().enumerate() {
        for seed_runs in &by_seed {
            reports.push(seed_runs[vi].clone());
        }
    }
    let mut summaries = Vec::with_capacity(variants.len());
    for v in variants {
        let group: Vec<&RunReport> =
            reports.iter().filter(|r| r.variant == v.as_str()).collect();
        summaries.push(VariantSummary::from_reports(v.as_str(), &group)?);
    }
    let ablation = AblationReport { config_hash: ctx.config_hash.to_string(), variants: summaries };
    Ok((reports, ablation))
}
