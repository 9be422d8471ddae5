//! Acceptance gate: eleven end-to-end checks, one test per criterion.
//!
//! Each test prints exactly one `criterion NN (<name>): PASS|FAIL` line
//! (visible with `--nocapture`); failures also list every violated clause.
//! The expensive checks share one fixture — the full six-variant,
//! five-seed study on the standard synthetic stream — built once.

use std::str::FromStr;
use std::sync::OnceLock;
use std::time::Instant;

use desire::backbone::{compute_features, pretrain_backbone, BackboneConfig, BackboneWeights};
use desire::config::ExperimentConfig;
use desire::consolidation::{attribution_loss, attribution_loss_value, register_coefficients};
use desire::lora::{merge_sets, LoraConfig, LoraSet, MergeCoefficients, Projection};
use desire::numerics::kernels::shannon_entropy;
use desire::numerics::rng::SeededRng;
use desire::numerics::tape::Tape;
use desire::numerics::tensor::Tensor;
use desire::pipeline::data::{generate_dataset, GeneratorConfig};
use desire::pipeline::metrics::RunReport;
use desire::pipeline::{run_ablation, run_variant, RunContext, Variant};
use desire::stats::{compute_class_stats, ClassStats, StatsStore};

// ---------------------------------------------------------------------------
// Shared fixture: the pinned desk study (data → pretrain → 6 variants × 5 seeds)
// ---------------------------------------------------------------------------

struct DeskStudy {
    reports: Vec<RunReport>,
    seeds: Vec<u64>,
    build_seconds: f64,
}

static DESK: OnceLock<DeskStudy> = OnceLock::new();

fn desk_study() -> &'static DeskStudy {
    DESK.get_or_init(|| {
        let start = Instant::now();
        let generator = GeneratorConfig::desk(20, 64, 200, 777);
        let dataset = generate_dataset(&generator).expect("generate study data");
        let config = ExperimentConfig::desk_default();
        config.validate().expect("default config valid");
        let (train_x, train_y) = dataset.stacked(true, &config.pretrain.classes).unwrap();
        let (test_x, test_y) = dataset.stacked(false, &config.pretrain.classes).unwrap();
        let (weights, _) =
            pretrain_backbone(&config.backbone, &config.pretrain, &train_x, &train_y, &test_x, &test_y)
                .expect("pretraining meets its holdout gate");
        let hash = config.hash().unwrap();
        let ctx = RunContext { weights: &weights, dataset: &dataset, config: &config, config_hash: &hash };
        let (reports, _) = run_ablation(&ctx, &Variant::ALL, &config.seeds, 1).expect("ablation runs");
        DeskStudy { reports, seeds: config.seeds.clone(), build_seconds: start.elapsed().as_secs_f64() }
    })
}

fn study_report(study: &DeskStudy, variant: Variant, seed: u64) -> &RunReport {
    study
        .reports
        .iter()
        .find(|r| r.variant == variant.as_str() && r.seed == seed)
        .unwrap_or_else(|| panic!("missing report {} seed {seed}", variant.as_str()))
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

/// Print the criterion verdict line and fail the test on any violation.
fn conclude(number: u32, name: &str, violations: Vec<String>) {
    if violations.is_empty() {
        println!("criterion {number:02} ({name}): PASS");
    } else {
        println!("criterion {number:02} ({name}): FAIL");
        for v in &violations {
            println!("  - {v}");
        }
    }
    assert!(violations.is_empty(), "criterion {number:02} ({name}) violated: {violations:?}");
}

fn check(violations: &mut Vec<String>, ok: bool, message: String) {
    if !ok {
        violations.push(message);
    }
}

// ---------------------------------------------------------------------------
// Small shared builders
// ---------------------------------------------------------------------------

fn toy_backbone(num_blocks: usize, model_dim: usize) -> BackboneWeights {
    let config = BackboneConfig {
        num_blocks,
        model_dim,
        num_heads: 2,
        mlp_hidden: model_dim + model_dim / 2,
        input_dim: model_dim,
        tokens: 2,
    };
    let mut rng = SeededRng::derive(41, &["acceptance", "toy-backbone"]);
    BackboneWeights::init(&config, &mut rng).unwrap()
}

/// An adapter set with nonzero B content, so its delta actually moves
/// features.
fn active_set(weights: &BackboneWeights, tag: &str, scale: f64) -> LoraSet {
    let d = weights.config.model_dim;
    let cfg = LoraConfig { rank: 2, init_std: 0.02 };
    let mut rng = SeededRng::derive(57, &["acceptance", tag]);
    let mut set = LoraSet::init(weights.config.num_blocks, d, d, &cfg, &mut rng, None).unwrap();
    for block in 0..weights.config.num_blocks {
        for proj in Projection::ALL {
            let adapter = set.adapter_mut(block, proj);
            for v in adapter.b.data_mut() {
                *v += scale * rng.normal();
            }
        }
    }
    set
}

fn toy_stats(num_classes: usize, d: usize, tag: &str) -> StatsStore {
    let mut rng = SeededRng::derive(91, &["acceptance", tag]);
    let mut store = StatsStore::new();
    for class in 0..num_classes {
        let n = 30;
        let mut data = rng.normal_vec(n * d, 0.0, 1.0);
        for (i, v) in data.iter_mut().enumerate() {
            if i % d == class % d {
                *v += 2.0 + class as f64;
            }
        }
        let features = Tensor::from_vec(&[n, d], data).unwrap();
        store.insert(compute_class_stats(class as u32, &features).unwrap()).unwrap();
    }
    store
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_zero_init_identity() {
    let start = Instant::now();
    let mut violations = Vec::new();

    let weights = toy_backbone(4, 64);
    let cfg = LoraConfig { rank: 4, init_std: 0.02 };
    let mut rng = SeededRng::derive(7, &["acceptance", "fresh-set"]);
    let fresh = LoraSet::init(4, 64, 64, &cfg, &mut rng, None).unwrap();
    let x = Tensor::from_vec(&[32, 64], rng.normal_vec(32 * 64, 0.0, 1.0)).unwrap();

    let frozen = compute_features(&weights, None, &x, 32).unwrap();
    let adapted = compute_features(&weights, Some(&fresh), &x, 32).unwrap();
    let max_diff = frozen
        .data()
        .iter()
        .zip(adapted.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    check(&mut violations, max_diff < 1e-12, format!("fresh-adapter feature deviation {max_diff:e} ≥ 1e-12"));

    let elapsed = start.elapsed().as_secs_f64();
    check(&mut violations, elapsed < 1.0, format!("took {elapsed:.2}s, budget 1s"));
    conclude(1, "zero-init identity", violations);
}

#[test]
fn criterion_02_merge_identity() {
    let start = Instant::now();
    let mut violations = Vec::new();

    let weights = toy_backbone(3, 16);
    let prev = active_set(&weights, "merge-prev", 0.5);
    let curr = active_set(&weights, "merge-curr", 0.8);

    let keep_prev = merge_sets(&prev, &curr, &MergeCoefficients::splat(3, 1.0, 0.0)).unwrap();
    let keep_curr = merge_sets(&prev, &curr, &MergeCoefficients::splat(3, 0.0, 1.0)).unwrap();
    for (block, proj, original) in prev.sites() {
        let merged = keep_prev.adapter(block, proj);
        check(
            &mut violations,
            merged.a.checksum() == original.a.checksum() && merged.b.checksum() == original.b.checksum(),
            format!("λ=(1,0) altered previous adapter at block {block} {proj:?}"),
        );
    }
    for (block, proj, original) in curr.sites() {
        let merged = keep_curr.adapter(block, proj);
        check(
            &mut violations,
            merged.a.checksum() == original.a.checksum() && merged.b.checksum() == original.b.checksum(),
            format!("λ=(0,1) altered current adapter at block {block} {proj:?}"),
        );
    }

    let elapsed = start.elapsed().as_secs_f64();
    check(&mut violations, elapsed < 1.0, format!("took {elapsed:.2}s, budget 1s"));
    conclude(2, "merge identity", violations);
}

#[test]
fn criterion_03_two_set_memory_bound() {
    let start = Instant::now();
    let mut violations = Vec::new();

    // Twenty single-class insertion points; backbone quality is irrelevant
    // to the storage audit, so the backbone stays at initialization.
    let generator = GeneratorConfig::desk(24, 64, 40, 901);
    let dataset = generate_dataset(&generator).unwrap();
    let mut config = ExperimentConfig::desk_default();
    config.pretrain.classes = vec![20, 21, 22, 23];
    config.stream.classes = (0..20).collect();
    config.stream.num_tasks = 20;
    config.individual.epochs = 1;
    config.consolidation.epochs = 1;
    config.consolidation.batch_size = 8;
    config.consolidation.merge_dataset_size = 8;
    config.refinement.epochs = 1;
    config.refinement.pseudo_per_class = 4;
    config.seeds = vec![1];
    config.validate().unwrap();
    let mut rng = SeededRng::derive(3, &["acceptance", "audit-backbone"]);
    let weights = BackboneWeights::init(&config.backbone, &mut rng).unwrap();
    let hash = config.hash().unwrap();
    let ctx = RunContext { weights: &weights, dataset: &dataset, config: &config, config_hash: &hash };

    let adapters_per_set = 2 * config.backbone.num_blocks;
    let full = run_variant(&ctx, Variant::DesireFull, 1, None, None).unwrap();
    check(
        &mut violations,
        full.diagnostics.adapter_peak_live == 2 * adapters_per_set,
        format!(
            "desire_full peak live adapters {} ≠ two sets ({})",
            full.diagnostics.adapter_peak_live,
            2 * adapters_per_set
        ),
    );
    check(
        &mut violations,
        full.diagnostics.adapter_sets_stored == 1,
        format!("desire_full stores {} sets, expected 1", full.diagnostics.adapter_sets_stored),
    );

    let averaged = run_variant(&ctx, Variant::WeightAverage, 1, None, None).unwrap();
    check(
        &mut violations,
        averaged.diagnostics.adapter_sets_stored == 20,
        format!(
            "weight_average stores {} sets, expected T=20",
            averaged.diagnostics.adapter_sets_stored
        ),
    );
    check(
        &mut violations,
        averaged.diagnostics.adapter_peak_live >= 20 * adapters_per_set,
        format!(
            "weight_average peak live adapters {} below its T-set floor {}",
            averaged.diagnostics.adapter_peak_live,
            20 * adapters_per_set
        ),
    );

    let elapsed = start.elapsed().as_secs_f64();
    check(&mut violations, elapsed < 600.0, format!("took {elapsed:.0}s, budget 600s"));
    conclude(3, "two-set memory bound", violations);
}

#[test]
fn criterion_04_gradient_fidelity() {
    let start = Instant::now();
    let mut violations = Vec::new();

    // Relative error with a floor so exact-zero pairs compare as equal.
    fn rel_err(analytic: f64, fd: f64) -> f64 {
        let scale = analytic.abs().max(fd.abs());
        if scale < 1e-10 {
            0.0
        } else {
            (analytic - fd).abs() / scale
        }
    }

    let weights = toy_backbone(2, 8);
    let prev = active_set(&weights, "grad-prev", 0.4);
    let curr = active_set(&weights, "grad-curr", 0.6);
    let mut rng = SeededRng::derive(23, &["acceptance", "grad-inputs"]);
    let inputs = Tensor::from_vec(&[6, 8], rng.normal_vec(48, 0.0, 1.0)).unwrap();

    for num_classes in [2usize, 3] {
        let stats = toy_stats(num_classes, 8, &format!("grad-stats-{num_classes}"));
        let coeffs = MergeCoefficients::balanced(2, [0.55, 0.45]);

        let mut tape = Tape::new();
        let cv = register_coefficients(&mut tape, &coeffs, true);
        let (loss, _) =
            attribution_loss(&mut tape, &weights, &prev, &curr, &cv, &stats, &inputs, 0.1).unwrap();
        tape.backward(loss).unwrap();
        let analytic: Vec<f64> =
            cv.vars().iter().map(|&v| tape.grad(v).map(|g| g[0]).unwrap_or(0.0)).collect();

        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        let mut max_abs_grad: f64 = 0.0;
        for i in 0..coeffs.len() {
            let mut plus = coeffs.clone();
            let mut values = plus.values().to_vec();
            values[i] += h;
            plus.set_values(&values).unwrap();
            let mut minus = coeffs.clone();
            let mut values = minus.values().to_vec();
            values[i] -= h;
            minus.set_values(&values).unwrap();
            let (lp, _) =
                attribution_loss_value(&weights, &prev, &curr, &plus, &stats, &inputs, 0.1).unwrap();
            let (lm, _) =
                attribution_loss_value(&weights, &prev, &curr, &minus, &stats, &inputs, 0.1).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic[i], fd));
            max_abs_grad = max_abs_grad.max(analytic[i].abs()).max(fd.abs());
        }
        check(
            &mut violations,
            max_rel < 1e-4,
            format!("{num_classes}-class attribution gradient rel. err {max_rel:e} ≥ 1e-4"),
        );
        if num_classes == 2 {
            // Two classes leave min-max normalized logits pinned at {0, 1},
            // so the true coefficient gradient is exactly zero; the tape and
            // finite differences must agree on that.
            check(
                &mut violations,
                max_abs_grad < 1e-9,
                format!("2-class toy gradient unexpectedly nonzero ({max_abs_grad:e})"),
            );
        } else {
            check(
                &mut violations,
                max_abs_grad > 1e-6,
                format!("{num_classes}-class toy carried no gradient signal ({max_abs_grad:e})"),
            );
        }
    }

    // Gaussian log-density gradient w.r.t. z against central differences.
    let mut cov = Tensor::zeros(&[3, 3]);
    let entries = [[2.0, 0.5, 0.1], [0.5, 1.5, -0.2], [0.1, -0.2, 1.0]];
    for i in 0..3 {
        for j in 0..3 {
            *cov.at_mut(i, j) = entries[i][j];
        }
    }
    let stats =
        ClassStats::from_moments(1, 5, Tensor::from_vec(&[3], vec![0.3, -0.7, 1.1]).unwrap(), cov).unwrap();
    let z = [1.0, 0.2, -0.5];
    let centered: Vec<f64> = z.iter().zip(stats.mean().data()).map(|(a, b)| a - b).collect();
    for i in 0..3 {
        let analytic: f64 = -(0..3).map(|j| stats.precision().at(i, j) * centered[j]).sum::<f64>();
        let h = 1e-6;
        let mut zp = z;
        let mut zm = z;
        zp[i] += h;
        zm[i] -= h;
        let fd = (stats.log_density(&zp).unwrap() - stats.log_density(&zm).unwrap()) / (2.0 * h);
        let err = rel_err(analytic, fd);
        check(
            &mut violations,
            err < 1e-4,
            format!("log-density gradient dim {i}: rel. err {err:e} ≥ 1e-4"),
        );
    }

    let elapsed = start.elapsed().as_secs_f64();
    check(&mut violations, elapsed < 30.0, format!("took {elapsed:.1}s, budget 30s"));
    conclude(4, "gradient fidelity", violations);
}

#[test]
fn criterion_05_statistical_oracles() {
    let start = Instant::now();
    let mut violations = Vec::new();

    // Hand-computed 2×2 moments: exact in f64.
    let features = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let stats = compute_class_stats(9, &features).unwrap();
    check(&mut violations, stats.mean().data() == [3.0, 4.0], format!("mean {:?} ≠ [3, 4]", stats.mean().data()));
    check(
        &mut violations,
        stats.covariance().data() == [4.0, 4.0, 4.0, 4.0],
        format!("covariance {:?} ≠ [[4,4],[4,4]]", stats.covariance().data()),
    );

    // Log-density against a closed-form 3×3 dense-inverse oracle, evaluated
    // on the conditioned covariance the stats object actually uses.
    let mut rng = SeededRng::derive(67, &["acceptance", "oracle-stats"]);
    let features = Tensor::from_vec(&[60, 3], rng.normal_vec(180, 0.5, 1.3)).unwrap();
    let stats = compute_class_stats(2, &features).unwrap();
    let mut sigma = stats.covariance().clone();
    for i in 0..3 {
        *sigma.at_mut(i, i) += stats.shrinkage();
    }
    let m = |i: usize, j: usize| sigma.at(i, j);
    let det = m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1))
        - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
        + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
    let adj = [
        [m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1), m(0, 2) * m(2, 1) - m(0, 1) * m(2, 2), m(0, 1) * m(1, 2) - m(0, 2) * m(1, 1)],
        [m(1, 2) * m(2, 0) - m(1, 0) * m(2, 2), m(0, 0) * m(2, 2) - m(0, 2) * m(2, 0), m(0, 2) * m(1, 0) - m(0, 0) * m(1, 2)],
        [m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0), m(0, 1) * m(2, 0) - m(0, 0) * m(2, 1), m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0)],
    ];
    for trial in 0..5 {
        let z: Vec<f64> = (0..3).map(|i| 0.5 + 0.3 * (trial as f64) - 0.2 * i as f64).collect();
        let centered: Vec<f64> = z.iter().zip(stats.mean().data()).map(|(a, b)| a - b).collect();
        let mut quad = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                quad += centered[i] * (adj[i][j] / det) * centered[j];
            }
        }
        let oracle = -0.5 * (quad + 3.0 * (2.0 * std::f64::consts::PI).ln() + det.ln());
        let got = stats.log_density(&z).unwrap();
        check(
            &mut violations,
            (oracle - got).abs() < 1e-8,
            format!("log-density trial {trial}: |{got} − oracle {oracle}| ≥ 1e-8"),
        );
    }

    // Pseudo-feature sampling reproduces its source moments.
    let mut rng = SeededRng::derive(68, &["acceptance", "sampling-stats"]);
    let d = 4;
    let n = 400;
    let mut data = rng.normal_vec(n * d, 0.0, 1.0);
    for row in 0..n {
        data[row * d + 1] = 0.6 * data[row * d] + 0.8 * data[row * d + 1];
        data[row * d + 2] = 1.5 * data[row * d + 2] - 1.0;
        data[row * d + 3] = 0.5 * data[row * d + 3] + 2.0;
    }
    let source = compute_class_stats(5, &Tensor::from_vec(&[n, d], data).unwrap()).unwrap();
    let mut rng = SeededRng::derive(69, &["acceptance", "draws"]);
    let draws = source.sample(50_000, &mut rng).unwrap();
    let rows = draws.shape()[0] as f64;
    let mut mean = vec![0.0; d];
    for r in 0..draws.shape()[0] {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += draws.row_slice(r)[j];
        }
    }
    for m in &mut mean {
        *m /= rows;
    }
    let max_mean_err = mean
        .iter()
        .zip(source.mean().data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    check(&mut violations, max_mean_err < 0.02, format!("sample-mean deviation {max_mean_err:.4} ≥ 0.02"));

    // Sample covariance vs the conditioned source covariance (the draws'
    // true distribution), in relative Frobenius norm.
    let mut cov = vec![0.0; d * d];
    for r in 0..draws.shape()[0] {
        let row = draws.row_slice(r);
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (row[i] - mean[i]) * (row[j] - mean[j]);
            }
        }
    }
    for c in &mut cov {
        *c /= rows - 1.0;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..d {
        for j in 0..d {
            let target = source.covariance().at(i, j) + if i == j { source.shrinkage() } else { 0.0 };
            num += (cov[i * d + j] - target).powi(2);
            den += target.powi(2);
        }
    }
    let frob_rel = (num / den).sqrt();
    check(&mut violations, frob_rel < 0.05, format!("sample-covariance Frobenius error {frob_rel:.4} ≥ 5%"));

    let elapsed = start.elapsed().as_secs_f64();
    check(&mut violations, elapsed < 60.0, format!("took {elapsed:.1}s, budget 60s"));
    conclude(5, "statistical oracles", violations);
}

#[test]
fn criterion_06_entropy_bounds() {
    let mut violations = Vec::new();

    for c in [2usize, 3, 10, 17] {
        let uniform = Tensor::filled(&[c], 0.37);
        let h = shannon_entropy(&uniform).unwrap();
        let ln_c = (c as f64).ln();
        check(
            &mut violations,
            (h - ln_c).abs() < 1e-9,
            format!("uniform logits C={c}: entropy {h} ≠ ln C {ln_c}"),
        );
    }

    let mut rng = SeededRng::derive(99, &["acceptance", "entropy"]);
    for c in [2usize, 5, 12] {
        let ln_c = (c as f64).ln();
        for _ in 0..200 {
            let logits = Tensor::from_vec(&[c], rng.normal_vec(c, 0.0, 4.0)).unwrap();
            let h = shannon_entropy(&logits).unwrap();
            check(
                &mut violations,
                (-1e-12..=ln_c + 1e-12).contains(&h),
                format!("entropy {h} outside [0, ln {c}]"),
            );
            if violations.len() > 4 {
                break;
            }
        }
    }

    // The full attribution loss obeys the same bound on a toy batch.
    let weights = toy_backbone(2, 8);
    let prev = active_set(&weights, "entropy-prev", 0.4);
    let curr = active_set(&weights, "entropy-curr", 0.7);
    let stats = toy_stats(3, 8, "entropy-stats");
    let mut rng = SeededRng::derive(101, &["acceptance", "entropy-inputs"]);
    let inputs = Tensor::from_vec(&[10, 8], rng.normal_vec(80, 0.0, 1.0)).unwrap();
    let (loss, _) = attribution_loss_value(
        &weights,
        &prev,
        &curr,
        &MergeCoefficients::balanced(2, [0.5, 0.5]),
        &stats,
        &inputs,
        0.1,
    )
    .unwrap();
    check(
        &mut violations,
        (0.0..=3.0f64.ln() + 1e-12).contains(&loss),
        format!("attribution loss {loss} outside [0, ln 3]"),
    );

    conclude(6, "entropy bounds", violations);
}

#[test]
fn criterion_07_directional_reproduction() {
    let study = desk_study();
    let mut violations = Vec::new();

    let last = |v: Variant, s: u64| study_report(study, v, s).last_accuracy;
    let lasts = |v: Variant| study.seeds.iter().map(|&s| last(v, s)).collect::<Vec<f64>>();

    let med_full = median(lasts(Variant::DesireFull));
    let med_seq = median(lasts(Variant::SeqLora));
    let med_avg = median(lasts(Variant::WeightAverage));
    check(
        &mut violations,
        med_full >= med_seq + 0.10,
        format!("median A_last gap {:.4} < 10 points (full {med_full:.4}, seq {med_seq:.4})", med_full - med_seq),
    );
    check(
        &mut violations,
        med_full >= med_avg,
        format!("median A_last: desire_full {med_full:.4} < weight_average {med_avg:.4}"),
    );

    let mut drc_chain = 0;
    let mut dbr_chain = 0;
    for &s in &study.seeds {
        let full = last(Variant::DesireFull, s);
        let merge = last(Variant::BaselineMerge, s);
        if full >= last(Variant::BaselinePlusDrc, s) && last(Variant::BaselinePlusDrc, s) >= merge {
            drc_chain += 1;
        }
        if full >= last(Variant::BaselinePlusDbr, s) && last(Variant::BaselinePlusDbr, s) >= merge {
            dbr_chain += 1;
        }
    }
    check(
        &mut violations,
        drc_chain >= 4,
        format!("ordering full ≥ +coefficients ≥ fixed-merge holds in {drc_chain}/5 seeds"),
    );
    check(
        &mut violations,
        dbr_chain >= 4,
        format!("ordering full ≥ +refinement ≥ fixed-merge holds in {dbr_chain}/5 seeds"),
    );
    check(
        &mut violations,
        study.build_seconds < 900.0,
        format!("study took {:.0}s, budget 900s", study.build_seconds),
    );
    conclude(7, "directional reproduction", violations);
}

#[test]
fn criterion_08_stability_plasticity() {
    let study = desk_study();
    let mut violations = Vec::new();

    let mut ok = 0;
    for &s in &study.seeds {
        let sd_full = study_report(study, Variant::DesireFull, s).task_accuracy_sd;
        let sd_seq = study_report(study, Variant::SeqLora, s).task_accuracy_sd;
        if sd_full <= sd_seq {
            ok += 1;
        }
    }
    check(&mut violations, ok >= 4, format!("SD(Acc) full ≤ sequential in {ok}/5 seeds"));
    conclude(8, "stability-plasticity dispersion", violations);
}

#[test]
fn criterion_09_orthogonality_diagnostic() {
    let study = desk_study();
    let mut violations = Vec::new();

    for &s in &study.seeds {
        let report = study_report(study, Variant::DesireFull, s);
        let Some(cosine) = &report.diagnostics.delta_cosine else {
            violations.push(format!("seed {s}: no cross-task cosine summary recorded"));
            continue;
        };
        check(
            &mut violations,
            cosine.mean_abs_off_diagonal < 0.5,
            format!("seed {s}: mean |cosine| {:.4} ≥ 0.5", cosine.mean_abs_off_diagonal),
        );
        for (i, row) in cosine.matrix.iter().enumerate() {
            check(
                &mut violations,
                (row[i] - 1.0).abs() < 1e-9,
                format!("seed {s}: diagonal cosine [{i}][{i}] = {} ≠ 1", row[i]),
            );
        }
        check(
            &mut violations,
            cosine.mean_abs_off_diagonal < 1.0,
            format!("seed {s}: off-diagonal mean not below self-similarity"),
        );
    }
    conclude(9, "delta orthogonality", violations);
}

#[test]
fn criterion_10_determinism() {
    let mut violations = Vec::new();
    let bin = env!("CARGO_BIN_EXE_desire");
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let run = |args: &[&str]| -> std::process::Output {
        std::process::Command::new(bin).args(args).output().expect("spawn experiment binary")
    };
    let path = |name: &str| root.join(name).to_str().unwrap().to_string();

    // Micro protocol: tiny backbone, two single-class stream tasks.
    let config = serde_json::json!({
        "backbone": {"num_blocks": 2, "model_dim": 16, "num_heads": 2, "mlp_hidden": 24, "input_dim": 16, "tokens": 4},
        "pretrain": {"classes": [0, 1, 2, 3], "epochs": 3, "batch_size": 16, "learning_rate": 0.2,
                      "momentum": 0.9, "min_holdout_accuracy": 0.3, "seed": 42},
        "stream": {"classes": [4, 5], "num_tasks": 2},
        "lora": {"rank": 2, "init_std": 0.02},
        "individual": {"epochs": 2, "batch_size": 8, "learning_rate": 0.1, "momentum": 0.9},
        "consolidation": {"epochs": 1, "batch_size": 8, "learning_rate": 0.05, "momentum": 0.9,
                           "temperature": 0.1, "lambda_init": [0.5, 0.5], "merge_dataset_size": 16},
        "refinement": {"epochs": 2, "batch_size": 16, "learning_rate": 0.1, "momentum": 0.9, "pseudo_per_class": 8},
        "variant": "desire_full",
        "seeds": [3, 4],
        "eval_batch_size": 32
    });
    std::fs::write(root.join("config.json"), serde_json::to_string_pretty(&config).unwrap()).unwrap();

    for attempt in ["a", "b"] {
        let data = path(&format!("data_{attempt}"));
        let out = run(&["gen-data", "--out", &data, "--classes", "6", "--dim", "16",
                        "--samples-per-class", "12", "--seed", "5"]);
        assert!(out.status.success(), "gen-data failed: {}", String::from_utf8_lossy(&out.stderr));
        let backbone = path(&format!("backbone_{attempt}.dsrb"));
        let out = run(&["pretrain", "--config", &path("config.json"), "--data", &data, "--out", &backbone]);
        assert!(out.status.success(), "pretrain failed: {}", String::from_utf8_lossy(&out.stderr));
        let reports = path(&format!("reports_{attempt}"));
        let out = run(&["ablate", "--config", &path("config.json"), "--data", &data,
                        "--backbone", &backbone, "--out", &reports]);
        assert!(out.status.success(), "ablate failed: {}", String::from_utf8_lossy(&out.stderr));
    }

    // Every produced file must be byte-identical across the two attempts.
    for sub in ["data_a", "reports_a"] {
        let twin = sub.replace("_a", "_b");
        let mut names: Vec<String> = std::fs::read_dir(root.join(sub))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        check(&mut violations, !names.is_empty(), format!("{sub} produced no files"));
        for name in names {
            let a = std::fs::read(root.join(sub).join(&name)).unwrap();
            let b = std::fs::read(root.join(&twin).join(&name));
            match b {
                Ok(b) if a == b => {}
                Ok(_) => violations.push(format!("{sub}/{name} differs between identical reruns")),
                Err(_) => violations.push(format!("{twin}/{name} missing on rerun")),
            }
        }
    }
    let a = std::fs::read(root.join("backbone_a.dsrb")).unwrap();
    let b = std::fs::read(root.join("backbone_b.dsrb")).unwrap();
    check(&mut violations, a == b, "backbone checkpoint differs between identical reruns".into());

    // Contract details of the report directory:
    //   metrics.csv = comment + header + 6 variants × 2 seeds;
    //   coefficients.csv = comment + header + (2 coefficient-learning
    //   variants × 2 seeds × 1 consolidated task × 8 rows per block × 2 blocks);
    //   every report stamped with one and the same config hash.
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("data_a/manifest.json")).unwrap()).unwrap();
    check(
        &mut violations,
        manifest["num_classes"] == serde_json::json!(6),
        format!("manifest class count {} ≠ requested 6", manifest["num_classes"]),
    );
    let lines = |name: &str| -> usize {
        std::fs::read_to_string(root.join("reports_a").join(name)).unwrap().lines().count()
    };
    check(&mut violations, lines("metrics.csv") == 2 + 12, format!("metrics.csv has {} lines, expected 14", lines("metrics.csv")));
    check(
        &mut violations,
        lines("coefficients.csv") == 2 + 2 * 2 * 16,
        format!("coefficients.csv has {} lines, expected 66", lines("coefficients.csv")),
    );
    let mut hashes = std::collections::BTreeSet::new();
    for entry in std::fs::read_dir(root.join("reports_a")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
            if let Some(h) = v.get("config_hash") {
                hashes.insert(h.as_str().unwrap().to_string());
            } else if let Some(vs) = v.get("variants") {
                assert!(vs.is_array());
                hashes.insert(v["config_hash"].as_str().unwrap_or_default().to_string());
            }
        }
    }
    check(
        &mut violations,
        hashes.len() == 1,
        format!("reports carry {} distinct config hashes, expected 1", hashes.len()),
    );

    // Seed fan-out: an explicit three-seed run yields three reports plus
    // one aggregate.
    let run_out = path("reports_run");
    let out = run(&["run", "--config", &path("config.json"), "--data", &path("data_a"),
                    "--backbone", &path("backbone_a.dsrb"), "--out", &run_out,
                    "--variant", "desire_full", "--seeds", "5,6,7"]);
    assert!(out.status.success(), "run failed: {}", String::from_utf8_lossy(&out.stderr));
    for seed in [5, 6, 7] {
        check(
            &mut violations,
            root.join("reports_run").join(format!("report_desire_full_seed{seed}.json")).is_file(),
            format!("missing per-seed report for seed {seed}"),
        );
    }
    check(
        &mut violations,
        root.join("reports_run/aggregate.json").is_file(),
        "missing aggregate summary".into(),
    );

    conclude(10, "rerun determinism", violations);
}

#[test]
fn criterion_11_consolidation_progress() {
    let study = desk_study();
    let mut violations = Vec::new();

    let mut ok = 0;
    for &s in &study.seeds {
        let report = study_report(study, Variant::DesireFull, s);
        let consolidated: Vec<_> =
            report.stages.iter().filter_map(|st| st.consolidation.as_ref()).collect();
        if consolidated.is_empty() {
            violations.push(format!("seed {s}: no consolidation stages recorded"));
            continue;
        }
        if consolidated.iter().all(|c| c.final_loss <= c.initial_loss + 1e-12) {
            ok += 1;
        }
    }
    check(
        &mut violations,
        ok >= 4,
        format!("attribution loss non-increasing over its epochs in {ok}/5 seeds"),
    );
    conclude(11, "consolidation progress", violations);
}

// ---------------------------------------------------------------------------
// Supporting contract checks (not numbered criteria)
// ---------------------------------------------------------------------------

#[test]
fn cli_exit_codes_follow_the_contract() {
    let bin = env!("CARGO_BIN_EXE_desire");
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let run = |args: &[&str]| std::process::Command::new(bin).args(args).output().unwrap();

    // Usage errors → 2.
    let out = run(&["gen-data", "--classes", "4"]);
    assert_eq!(out.status.code(), Some(2), "missing --out must exit 2");
    let config = root.join("config.json");
    let mut cfg = ExperimentConfig::desk_default();
    cfg.save(&config).unwrap();
    let out = run(&["run", "--config", config.to_str().unwrap(), "--data", "x", "--backbone", "y",
                    "--out", "z", "--variant", "nope"]);
    assert_eq!(out.status.code(), Some(2), "unknown variant must exit 2");
    let stderr = String::from_utf8_lossy(&out.stderr);
    for v in Variant::ALL {
        assert!(stderr.contains(v.as_str()), "variant error must list {}", v.as_str());
    }

    // I/O errors → 3.
    let out = run(&["pretrain", "--config", config.to_str().unwrap(), "--data",
                    root.join("missing").to_str().unwrap(), "--out", root.join("b.dsrb").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "missing dataset must exit 3");

    // Protocol violations → 4.
    cfg.pretrain.classes = (5..15).collect();
    let leaky = root.join("leaky.json");
    cfg.save(&leaky).unwrap();
    let out = run(&["pretrain", "--config", leaky.to_str().unwrap(), "--data",
                    root.join("missing").to_str().unwrap(), "--out", root.join("b.dsrb").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "class leakage must exit 4");
}

#[test]
fn cached_and_uncached_runs_agree() {
    // The ablation path revives precomputed trajectories; a direct run must
    // produce the identical report.
    let generator = GeneratorConfig::desk(8, 16, 10, 33);
    let dataset = generate_dataset(&generator).unwrap();
    let mut config = ExperimentConfig::desk_default();
    config.backbone = BackboneConfig {
        num_blocks: 2,
        model_dim: 16,
        num_heads: 2,
        mlp_hidden: 24,
        input_dim: 16,
        tokens: 4,
    };
    config.pretrain.classes = (0..4).collect();
    config.stream.classes = (4..8).collect();
    config.stream.num_tasks = 2;
    config.individual.epochs = 2;
    config.consolidation.merge_dataset_size = 16;
    config.consolidation.batch_size = 8;
    config.refinement.pseudo_per_class = 8;
    config.seeds = vec![6];
    config.validate().unwrap();
    let mut rng = SeededRng::derive(44, &["acceptance", "cache-backbone"]);
    let weights = BackboneWeights::init(&config.backbone, &mut rng).unwrap();
    let hash = config.hash().unwrap();
    let ctx = RunContext { weights: &weights, dataset: &dataset, config: &config, config_hash: &hash };

    let direct = run_variant(&ctx, Variant::DesireFull, 6, None, None).unwrap();
    let cache = desire::pipeline::build_cache(&ctx, 6).unwrap();
    let cached = run_variant(&ctx, Variant::DesireFull, 6, Some(&cache), None).unwrap();
    assert_eq!(direct.to_json().unwrap(), cached.to_json().unwrap());
}

#[test]
fn variant_parsing_matches_the_cli_surface() {
    for v in Variant::ALL {
        assert_eq!(Variant::from_str(v.as_str()).unwrap(), v);
    }
    assert!(Variant::from_str("desire").is_err());
}
