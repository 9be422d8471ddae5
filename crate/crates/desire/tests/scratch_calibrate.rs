//! Temporary calibration harness (not part of the suite): run with
//! `cargo test --test scratch_calibrate -- --ignored --nocapture`.

use std::time::Instant;

use desire::backbone::{pretrain_backbone, BackboneWeights};
use desire::config::ExperimentConfig;
use desire::numerics::rng::SeededRng;
use desire::pipeline::data::{generate_dataset, Dataset, GeneratorConfig};
use desire::pipeline::probe::{linear_probe_accuracy, ProbeConfig};
use desire::pipeline::{build_cache, run_ablation, run_variant, RunContext, Variant};


fn cfg_from_env() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk_default();
    if let Ok(e) = std::env::var("IND_EPOCHS") {
        cfg.individual.epochs = e.parse().unwrap();
    }
    if let Ok(l) = std::env::var("IND_LR") {
        cfg.individual.learning_rate = l.parse().unwrap();
    }
    if let Ok(l) = std::env::var("DRC_LR") {
        cfg.consolidation.learning_rate = l.parse().unwrap();
    }
    cfg
}

fn desk_data(seed: u64) -> (GeneratorConfig, Dataset) {
    let gen = GeneratorConfig::desk(20, 64, 200, seed);
    let ds = generate_dataset(&gen).unwrap();
    (gen, ds)
}

#[test]
#[ignore]
fn probe_difficulty() {
    let t0 = Instant::now();
    let (_, ds) = desk_data(777);
    println!("gen: {:?}", t0.elapsed());

    let classes: Vec<u32> = (0..20).collect();
    let (train_x, train_y) = ds.stacked(true, &classes).unwrap();
    let (test_x, test_y) = ds.stacked(false, &classes).unwrap();
    let t1 = Instant::now();
    let acc = linear_probe_accuracy(&train_x, &train_y, &test_x, &test_y, &ProbeConfig::default()).unwrap();
    println!("probe(all 20): {acc:.4} in {:?}", t1.elapsed());

    let pre: Vec<u32> = (0..10).collect();
    let (ptr_x, ptr_y) = ds.stacked(true, &pre).unwrap();
    let (pte_x, pte_y) = ds.stacked(false, &pre).unwrap();
    let acc10 = linear_probe_accuracy(&ptr_x, &ptr_y, &pte_x, &pte_y, &ProbeConfig::default()).unwrap();
    println!("probe(pretrain 10): {acc10:.4}");
}

#[test]
#[ignore]
fn pretrain_timing() {
    let cfg = cfg_from_env();
    let (_, ds) = desk_data(777);
    let (train_x, train_y) = ds.stacked(true, &cfg.pretrain.classes).unwrap();
    let (test_x, test_y) = ds.stacked(false, &cfg.pretrain.classes).unwrap();
    let t0 = Instant::now();
    let (weights, outcome) =
        pretrain_backbone(&cfg.backbone, &cfg.pretrain, &train_x, &train_y, &test_x, &test_y).unwrap();
    println!(
        "pretrain: holdout={:.4} loss={:.4} in {:?}",
        outcome.holdout_accuracy,
        outcome.final_train_loss,
        t0.elapsed()
    );
    let _ = weights.checksum();
}

#[test]
#[ignore]
fn one_seed_all_variants() {
    let cfg = cfg_from_env();
    let (_, ds) = desk_data(777);
    let (train_x, train_y) = ds.stacked(true, &cfg.pretrain.classes).unwrap();
    let (test_x, test_y) = ds.stacked(false, &cfg.pretrain.classes).unwrap();
    let t0 = Instant::now();
    let (weights, outcome) =
        pretrain_backbone(&cfg.backbone, &cfg.pretrain, &train_x, &train_y, &test_x, &test_y).unwrap();
    println!("pretrain: holdout={:.4} in {:?}", outcome.holdout_accuracy, t0.elapsed());

    let hash = cfg.hash().unwrap();
    let ctx = RunContext { weights: &weights, dataset: &ds, config: &cfg, config_hash: &hash };

    let t1 = Instant::now();
    let cache = build_cache(&ctx, 11).unwrap();
    println!("cache build: {:?}", t1.elapsed());

    for v in Variant::ALL {
        let t = Instant::now();
        let used = if v.trains_independently() { Some(&cache) } else { None };
        let r = run_variant(&ctx, v, 11, used, None).unwrap();
        println!(
            "{:<18} last={:.4} avg={:.4} final_task={:.4} prev={:.4} sd={:.4} peak={} stored={} in {:?}",
            r.variant,
            r.last_accuracy,
            r.average_accuracy,
            r.final_task_accuracy,
            r.previous_tasks_accuracy,
            r.task_accuracy_sd,
            r.diagnostics.adapter_peak_live,
            r.diagnostics.adapter_sets_stored,
            t.elapsed()
        );
        for s in &r.stages {
            let lam = s
                .consolidation
                .as_ref()
                .map(|c| {
                    let v = &c.coefficient_values;
                    format!(
                        " lam=[{:.3},{:.3}..] loss {:.4}->{:.4}",
                        v[0],
                        v[1],
                        c.initial_loss,
                        c.final_loss
                    )
                })
                .unwrap_or_default();
            println!(
                "   stage {} acc={:.4} train_loss={:.4}{}",
                s.task_index, s.accuracy, s.train_loss, lam
            );
        }
    }
    let mut rng = SeededRng::new(0);
    let _ = rng.normal();
    let _ = BackboneWeights::init(&cfg.backbone, &mut rng);
}

#[test]
#[ignore]
fn drc_lr_sweep() {
    use desire::consolidation::{optimize_coefficients, sample_merge_dataset};
    use desire::lora::LoraSet;
    use desire::stats::StatsStore;

    let cfg = cfg_from_env();
    let (_, ds) = desk_data(777);
    let (train_x, train_y) = ds.stacked(true, &cfg.pretrain.classes).unwrap();
    let (test_x, test_y) = ds.stacked(false, &cfg.pretrain.classes).unwrap();
    let (weights, _) =
        pretrain_backbone(&cfg.backbone, &cfg.pretrain, &train_x, &train_y, &test_x, &test_y).unwrap();
    let hash = cfg.hash().unwrap();
    let ctx = RunContext { weights: &weights, dataset: &ds, config: &cfg, config_hash: &hash };
    let cache = build_cache(&ctx, 11).unwrap();

    let r0 = &cache[&(11, 0)];
    let r1 = &cache[&(11, 1)];
    let prev = LoraSet::from_parts(4, cfg.lora.rank, &r0.parts, None).unwrap();
    let curr = LoraSet::from_parts(4, cfg.lora.rank, &r1.parts, None).unwrap();
    let mut store = StatsStore::new();
    for s in r0.stats.iter().chain(r1.stats.iter()) {
        store.insert(s.clone()).unwrap();
    }
    let seen: Vec<u32> = vec![10, 11, 12, 13];
    let pools: Vec<&desire::numerics::tensor::Tensor> =
        seen.iter().map(|&c| ds.test.get(&c).unwrap()).collect();

    for lr in [0.05, 0.5, 2.0, 8.0, 32.0] {
        let mut ccfg = cfg.consolidation.clone();
        ccfg.learning_rate = lr;
        let mut rng = SeededRng::derive(11, &["task", "1", "merge-data"]);
        let (merge, _) = sample_merge_dataset(&pools, ccfg.merge_dataset_size, &mut rng).unwrap();
        let mut orng = SeededRng::derive(11, &["task", "1", "consolidation"]);
        let out = optimize_coefficients(&weights, &prev, &curr, &store, &merge, &ccfg, &mut orng).unwrap();
        let vals = &out.coefficient_values;
        let spread = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - vals.iter().cloned().fold(f64::INFINITY, f64::min);
        println!(
            "lr={lr:<6} loss {:.5} -> {:.5}  spread={spread:.4}  first8={:?}",
            out.initial_loss,
            out.final_loss,
            &vals[..8].iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
}

#[test]
#[ignore]
fn drc_accuracy_sweep() {
    use desire::backbone::{compute_features, Classifier};
    use desire::consolidation::{optimize_coefficients, sample_merge_dataset};
    use desire::lora::{LoraSet, MergeCoefficients};
    use desire::numerics::tensor::Tensor;
    use desire::stats::StatsStore;

    let cfg = cfg_from_env();
    let (_, ds) = desk_data(777);
    let (train_x, train_y) = ds.stacked(true, &cfg.pretrain.classes).unwrap();
    let (test_x, test_y) = ds.stacked(false, &cfg.pretrain.classes).unwrap();
    let (weights, _) =
        pretrain_backbone(&cfg.backbone, &cfg.pretrain, &train_x, &train_y, &test_x, &test_y).unwrap();
    let hash = cfg.hash().unwrap();
    let ctx = RunContext { weights: &weights, dataset: &ds, config: &cfg, config_hash: &hash };

    for seed in [11u64, 12] {
        let cache = build_cache(&ctx, seed).unwrap();
        let r0 = &cache[&(seed, 0)];
        let r1 = &cache[&(seed, 1)];
        let prev = LoraSet::from_parts(4, cfg.lora.rank, &r0.parts, None).unwrap();
        let curr = LoraSet::from_parts(4, cfg.lora.rank, &r1.parts, None).unwrap();
        let mut store = StatsStore::new();
        for s in r0.stats.iter().chain(r1.stats.iter()) {
            store.insert(s.clone()).unwrap();
        }
        let seen: Vec<u32> = vec![10, 11, 12, 13];
        let pools: Vec<&Tensor> = seen.iter().map(|&c| ds.test.get(&c).unwrap()).collect();

        // Head with both tasks' rows, unrefined.
        let mut clf = Classifier::new(64);
        for r in [r0, r1] {
            clf.expand(&r.class_ids).unwrap();
            let mut w = clf.weight().clone();
            let mut b = clf.bias().clone();
            for (i, &c) in r.class_ids.iter().enumerate() {
                let row = clf.row_of(c).unwrap();
                w.data_mut()[row * 64..(row + 1) * 64].copy_from_slice(r.head_rows.row_slice(i));
                b.data_mut()[row] = r.head_bias[i];
            }
            clf.set_head(w, b).unwrap();
        }

        let eval = |set: &LoraSet| -> f64 {
            let mut correct = 0usize;
            let mut total = 0usize;
            for &c in &seen {
                let feats = compute_features(&weights, Some(set), ds.test.get(&c).unwrap(), 128).unwrap();
                let preds = clf.predict(&feats).unwrap();
                correct += preds.iter().filter(|&&p| p == c).count();
                total += preds.len();
            }
            correct as f64 / total as f64
        };

        let mut fixed = prev.clone();
        fixed
            .merge_from(&curr, &MergeCoefficients::running_average(4, 2).unwrap())
            .unwrap();
        println!("seed {seed}: fixed-average acc={:.4}", eval(&fixed));

        for lr in [0.05, 0.1, 0.25, 0.5, 1.0] {
            let mut ccfg = cfg.consolidation.clone();
            ccfg.learning_rate = lr;
            let mut rng = SeededRng::derive(seed, &["task", "1", "merge-data"]);
            let (merge, _) = sample_merge_dataset(&pools, ccfg.merge_dataset_size, &mut rng).unwrap();
            let mut orng = SeededRng::derive(seed, &["task", "1", "consolidation"]);
            let out =
                optimize_coefficients(&weights, &prev, &curr, &store, &merge, &ccfg, &mut orng).unwrap();
            let coeffs = out.coefficients(4).unwrap();
            let mut merged = prev.clone();
            merged.merge_from(&curr, &coeffs).unwrap();
            println!(
                "seed {seed}: lr={lr:<5} loss {:.5}->{:.5} acc={:.4}",
                out.initial_loss,
                out.final_loss,
                eval(&merged)
            );
        }
    }
}

#[test]
#[ignore]
fn drc_landscape() {
    use desire::consolidation::{attribution_loss_value, sample_merge_dataset};
    use desire::lora::{LoraSet, MergeCoefficients};
    use desire::numerics::tensor::Tensor;
    use desire::stats::StatsStore;

    let cfg = cfg_from_env();
    let (_, ds) = desk_data(777);
    let (train_x, train_y) = ds.stacked(true, &cfg.pretrain.classes).unwrap();
    let (test_x, test_y) = ds.stacked(false, &cfg.pretrain.classes).unwrap();
    let (weights, _) =
        pretrain_backbone(&cfg.backbone, &cfg.pretrain, &train_x, &train_y, &test_x, &test_y).unwrap();
    let hash = cfg.hash().unwrap();
    let ctx = RunContext { weights: &weights, dataset: &ds, config: &cfg, config_hash: &hash };
    let cache = build_cache(&ctx, 11).unwrap();
    let r0 = &cache[&(11, 0)];
    let r1 = &cache[&(11, 1)];
    let prev = LoraSet::from_parts(4, cfg.lora.rank, &r0.parts, None).unwrap();
    let curr = LoraSet::from_parts(4, cfg.lora.rank, &r1.parts, None).unwrap();
    let mut store = StatsStore::new();
    for s in r0.stats.iter().chain(r1.stats.iter()) {
        store.insert(s.clone()).unwrap();
    }
    let pools: Vec<&Tensor> = [10u32, 11, 12, 13].iter().map(|&c| ds.test.get(&c).unwrap()).collect();
    let mut rng = SeededRng::derive(11, &["task", "1", "merge-data"]);
    let (merge, _) = sample_merge_dataset(&pools, 100, &mut rng).unwrap();

    println!("rows: lambda_prev in 0..1.25; cols: lambda_curr in 0..1.25");
    for pi in 0..6 {
        let lp = pi as f64 * 0.25;
        let mut row = String::new();
        for ci in 0..6 {
            let lc = ci as f64 * 0.25;
            let coeffs = MergeCoefficients::balanced(4, [lp, lc]);
            let (loss, st) =
                attribution_loss_value(&weights, &prev, &curr, &coeffs, &store, &merge.inputs, 0.1)
                    .unwrap();
            row.push_str(&format!("{loss:.4}({}) ", st.degenerate_skipped));
        }
        println!("lp={lp:.2}: {row}");
    }
}

#[test]
#[ignore]
fn adapter_feature_influence() {
    use desire::backbone::compute_features;
    use desire::lora::LoraSet;
    use desire::numerics::tensor::Tensor;

    let mut cfg = ExperimentConfig::desk_default();
    if let Ok(e) = std::env::var("IND_EPOCHS") {
        cfg.individual.epochs = e.parse().unwrap();
    }
    if let Ok(l) = std::env::var("IND_LR") {
        cfg.individual.learning_rate = l.parse().unwrap();
    }
    println!("individual: epochs={} lr={}", cfg.individual.epochs, cfg.individual.learning_rate);
    let (_, ds) = desk_data(777);
    let (train_x, train_y) = ds.stacked(true, &cfg.pretrain.classes).unwrap();
    let (test_x, test_y) = ds.stacked(false, &cfg.pretrain.classes).unwrap();
    let (weights, _) =
        pretrain_backbone(&cfg.backbone, &cfg.pretrain, &train_x, &train_y, &test_x, &test_y).unwrap();
    let hash = cfg.hash().unwrap();
    let ctx = RunContext { weights: &weights, dataset: &ds, config: &cfg, config_hash: &hash };
    let cache = build_cache(&ctx, 11).unwrap();
    let r0 = &cache[&(11, 0)];
    let set0 = LoraSet::from_parts(4, cfg.lora.rank, &r0.parts, None).unwrap();

    let pool: &Tensor = ds.test.get(&10).unwrap();
    let f_frozen = compute_features(&weights, None, pool, 128).unwrap();
    let f_adapted = compute_features(&weights, Some(&set0), pool, 128).unwrap();
    let num: f64 = f_frozen
        .data()
        .iter()
        .zip(f_adapted.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = f_frozen.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("relative feature change from task-0 adapters: {:.5}", num / den);
    println!("train loss task0: {:.4}", r0.final_train_loss);

    // Head accuracy on task-0 classes with and without the adapters.
    let eval = |set: Option<&LoraSet>| -> f64 {
        let mut correct = 0;
        let mut total = 0;
        for (i, &c) in r0.class_ids.iter().enumerate() {
            let feats = compute_features(&weights, set, ds.test.get(&c).unwrap(), 128).unwrap();
            let logits = desire::numerics::kernels::add_row(
                &desire::numerics::kernels::matmul_nt(&feats, &r0.head_rows).unwrap(),
                &Tensor::from_vec(&[2], r0.head_bias.clone()).unwrap(),
            )
            .unwrap();
            for r in 0..logits.shape()[0] {
                let row = logits.row_slice(r);
                let pred = if row[1] > row[0] { 1 } else { 0 };
                if pred == i {
                    correct += 1;
                }
                total += 1;
            }
        }
        correct as f64 / total as f64
    };
    println!("task0 acc with adapters: {:.4}", eval(Some(&set0)));
    println!("task0 acc frozen backbone (same head): {:.4}", eval(None));
}

#[test]
#[ignore]
fn drc_with_refined_head() {
    use desire::backbone::{compute_features, Classifier};
    use desire::consolidation::{optimize_coefficients, sample_merge_dataset};
    use desire::lora::{LoraSet, MergeCoefficients};
    use desire::numerics::tensor::Tensor;
    use desire::refinement::{refine_classifier, sample_pseudo_features};
    use desire::stats::StatsStore;

    let cfg = cfg_from_env();
    let (_, ds) = desk_data(777);
    let (train_x, train_y) = ds.stacked(true, &cfg.pretrain.classes).unwrap();
    let (test_x, test_y) = ds.stacked(false, &cfg.pretrain.classes).unwrap();
    let (weights, _) =
        pretrain_backbone(&cfg.backbone, &cfg.pretrain, &train_x, &train_y, &test_x, &test_y).unwrap();
    let hash = cfg.hash().unwrap();
    let ctx = RunContext { weights: &weights, dataset: &ds, config: &cfg, config_hash: &hash };

    for seed in [11u64, 12, 13] {
        let cache = build_cache(&ctx, seed).unwrap();
        let r0 = &cache[&(seed, 0)];
        let r1 = &cache[&(seed, 1)];
        let prev = LoraSet::from_parts(4, cfg.lora.rank, &r0.parts, None).unwrap();
        let curr = LoraSet::from_parts(4, cfg.lora.rank, &r1.parts, None).unwrap();
        let mut store = StatsStore::new();
        for s in r0.stats.iter().chain(r1.stats.iter()) {
            store.insert(s.clone()).unwrap();
        }
        let seen: Vec<u32> = vec![10, 11, 12, 13];
        let pools: Vec<&Tensor> = seen.iter().map(|&c| ds.test.get(&c).unwrap()).collect();

        let stale_head = || -> Classifier {
            let mut clf = Classifier::new(64);
            for r in [r0, r1] {
                clf.expand(&r.class_ids).unwrap();
                let mut w = clf.weight().clone();
                let mut b = clf.bias().clone();
                for (i, &c) in r.class_ids.iter().enumerate() {
                    let row = clf.row_of(c).unwrap();
                    w.data_mut()[row * 64..(row + 1) * 64].copy_from_slice(r.head_rows.row_slice(i));
                    b.data_mut()[row] = r.head_bias[i];
                }
                clf.set_head(w, b).unwrap();
            }
            clf
        };
        let refined_head = |seed: u64| -> Classifier {
            let mut clf = stale_head();
            let mut rng = SeededRng::derive(seed, &["task", "1", "refinement"]);
            let (pseudo, labels) =
                sample_pseudo_features(&store, cfg.refinement.pseudo_per_class, &mut rng).unwrap();
            refine_classifier(&mut clf, &pseudo, &labels, &cfg.refinement, &mut rng).unwrap();
            clf
        };

        let eval = |set: &LoraSet, clf: &Classifier| -> f64 {
            let mut correct = 0usize;
            let mut total = 0usize;
            for &c in &seen {
                let feats = compute_features(&weights, Some(set), ds.test.get(&c).unwrap(), 128).unwrap();
                let preds = clf.predict(&feats).unwrap();
                correct += preds.iter().filter(|&&p| p == c).count();
                total += preds.len();
            }
            correct as f64 / total as f64
        };

        let mut fixed = prev.clone();
        fixed.merge_from(&curr, &MergeCoefficients::running_average(4, 2).unwrap()).unwrap();
        let sh = stale_head();
        let rh = refined_head(seed);
        println!(
            "seed {seed}: fixed  stale={:.4} refined={:.4}",
            eval(&fixed, &sh),
            eval(&fixed, &rh)
        );

        for lr in [0.1, 0.25, 0.5] {
            let mut ccfg = cfg.consolidation.clone();
            ccfg.learning_rate = lr;
            let mut rng = SeededRng::derive(seed, &["task", "1", "merge-data"]);
            let (merge, _) = sample_merge_dataset(&pools, ccfg.merge_dataset_size, &mut rng).unwrap();
            let mut orng = SeededRng::derive(seed, &["task", "1", "consolidation"]);
            let out =
                optimize_coefficients(&weights, &prev, &curr, &store, &merge, &ccfg, &mut orng).unwrap();
            let coeffs = out.coefficients(4).unwrap();
            let mut merged = prev.clone();
            merged.merge_from(&curr, &coeffs).unwrap();
            println!(
                "seed {seed}: lr={lr:<5} stale={:.4} refined={:.4} (loss {:.4}->{:.4})",
                eval(&merged, &sh),
                eval(&merged, &rh),
                out.initial_loss,
                out.final_loss
            );
        }
    }
}

#[test]
#[ignore]
fn full_ablation_check() {
    let mut cfg = cfg_from_env();
    if let Ok(v) = std::env::var("DRC_LR") {
        cfg.consolidation.learning_rate = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("DRC_BATCH") {
        cfg.consolidation.batch_size = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("REF_EPOCHS") {
        cfg.refinement.epochs = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("REF_LR") {
        cfg.refinement.learning_rate = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("REF_BATCH") {
        cfg.refinement.batch_size = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("REF_PSEUDO") {
        cfg.refinement.pseudo_per_class = v.parse().unwrap();
    }
    let (_, ds) = desk_data(777);
    let (train_x, train_y) = ds.stacked(true, &cfg.pretrain.classes).unwrap();
    let (test_x, test_y) = ds.stacked(false, &cfg.pretrain.classes).unwrap();
    let start = std::time::Instant::now();
    let (weights, _) =
        pretrain_backbone(&cfg.backbone, &cfg.pretrain, &train_x, &train_y, &test_x, &test_y).unwrap();
    println!("pretrain: {:.1}s", start.elapsed().as_secs_f64());
    let hash = cfg.hash().unwrap();
    let ctx = RunContext { weights: &weights, dataset: &ds, config: &cfg, config_hash: &hash };
    let seeds = [11u64, 12, 13, 14, 15];
    let start = std::time::Instant::now();
    let (reports, _) = run_ablation(&ctx, &Variant::ALL, &seeds, 1).unwrap();
    println!("ablation: {:.1}s", start.elapsed().as_secs_f64());
    let last = |v: Variant, s: u64| -> f64 {
        reports
            .iter()
            .find(|r| r.variant == v.as_str() && r.seed == s)
            .map(|r| r.last_accuracy)
            .unwrap()
    };
    let mut chain_drc = 0;
    let mut chain_dbr = 0;
    let mut sd_ok = 0;
    for &s in &seeds {
        let df = last(Variant::DesireFull, s);
        let bm = last(Variant::BaselineMerge, s);
        let dr = last(Variant::BaselinePlusDrc, s);
        let db = last(Variant::BaselinePlusDbr, s);
        let sq = last(Variant::SeqLora, s);
        let wa = last(Variant::WeightAverage, s);
        let sd_df = reports
            .iter()
            .find(|r| r.variant == "desire_full" && r.seed == s)
            .unwrap()
            .task_accuracy_sd;
        let sd_sq = reports
            .iter()
            .find(|r| r.variant == "seq_lora" && r.seed == s)
            .unwrap()
            .task_accuracy_sd;
        if df >= dr && dr >= bm {
            chain_drc += 1;
        }
        if df >= db && db >= bm {
            chain_dbr += 1;
        }
        if sd_df <= sd_sq {
            sd_ok += 1;
        }
        println!(
            "seed {s}: full={df:.4} merge={bm:.4} +drc={dr:.4} +dbr={db:.4} seq={sq:.4} wavg={wa:.4} | drc-bm={:+.4} df-db={:+.4} | sd {sd_df:.4} vs {sd_sq:.4}",
            dr - bm,
            df - db
        );
    }
    let med = |v: Variant| -> f64 {
        let mut xs: Vec<f64> = seeds.iter().map(|&s| last(v, s)).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs[2]
    };
    println!(
        "medians: full={:.4} seq={:.4} (gap {:+.4}) wavg={:.4}",
        med(Variant::DesireFull),
        med(Variant::SeqLora),
        med(Variant::DesireFull) - med(Variant::SeqLora),
        med(Variant::WeightAverage)
    );
    let mut prog_ok = 0;
    for &s in &seeds {
        let report =
            reports.iter().find(|r| r.variant == "desire_full" && r.seed == s).unwrap();
        let all_improve = report
            .stages
            .iter()
            .filter_map(|st| st.consolidation.as_ref())
            .all(|c| c.final_loss <= c.initial_loss + 1e-12);
        if all_improve {
            prog_ok += 1;
        }
    }
    println!("chains: drc {chain_drc}/5 dbr {chain_dbr}/5 sd {sd_ok}/5 prog {prog_ok}/5");
}

/// Grid search over consolidation lr × batch with shared individual-training
/// caches: only the coefficient-learning variants rerun per grid point.
#[test]
#[ignore]
fn consolidation_grid() {
    let cfg0 = cfg_from_env();
    let (_, ds) = desk_data(777);
    let (train_x, train_y) = ds.stacked(true, &cfg0.pretrain.classes).unwrap();
    let (test_x, test_y) = ds.stacked(false, &cfg0.pretrain.classes).unwrap();
    let (weights, _) =
        pretrain_backbone(&cfg0.backbone, &cfg0.pretrain, &train_x, &train_y, &test_x, &test_y)
            .unwrap();
    let hash0 = cfg0.hash().unwrap();
    let ctx0 = RunContext { weights: &weights, dataset: &ds, config: &cfg0, config_hash: &hash0 };
    let seeds = [11u64, 12, 13, 14, 15];

    let start = Instant::now();
    let caches: Vec<_> = seeds.iter().map(|&s| build_cache(&ctx0, s).unwrap()).collect();
    println!("caches: {:.1}s", start.elapsed().as_secs_f64());

    // Constant across the grid: the fixed-coefficient variants.
    let start = Instant::now();
    let mut bm = Vec::new();
    let mut db = Vec::new();
    for (i, &s) in seeds.iter().enumerate() {
        bm.push(run_variant(&ctx0, Variant::BaselineMerge, s, Some(&caches[i]), None).unwrap().last_accuracy);
        db.push(run_variant(&ctx0, Variant::BaselinePlusDbr, s, Some(&caches[i]), None).unwrap().last_accuracy);
    }
    println!("fixed variants: {:.1}s", start.elapsed().as_secs_f64());

    let lrs: Vec<f64> = std::env::var("GRID_LRS")
        .unwrap_or_else(|_| "0.08,0.09,0.1,0.11,0.12".into())
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    let batches: Vec<usize> = std::env::var("GRID_BATCHES")
        .unwrap_or_else(|_| "16,20,25".into())
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();

    for &batch in &batches {
        for &lr in &lrs {
            let mut cfg = cfg0.clone();
            cfg.consolidation.learning_rate = lr;
            cfg.consolidation.batch_size = batch;
            let hash = cfg.hash().unwrap();
            let ctx = RunContext { weights: &weights, dataset: &ds, config: &cfg, config_hash: &hash };
            let start = Instant::now();
            let mut drc_ok = 0;
            let mut dbr_ok = 0;
            let mut prog_ok = 0;
            let mut detail = String::new();
            for (i, &s) in seeds.iter().enumerate() {
                let full = run_variant(&ctx, Variant::DesireFull, s, Some(&caches[i]), None).unwrap();
                let drc = run_variant(&ctx, Variant::BaselinePlusDrc, s, Some(&caches[i]), None).unwrap();
                let df = full.last_accuracy;
                let dr = drc.last_accuracy;
                if df >= dr && dr >= bm[i] {
                    drc_ok += 1;
                }
                if df >= db[i] && db[i] >= bm[i] {
                    dbr_ok += 1;
                }
                if full
                    .stages
                    .iter()
                    .filter_map(|st| st.consolidation.as_ref())
                    .all(|c| c.final_loss <= c.initial_loss + 1e-12)
                {
                    prog_ok += 1;
                }
                detail.push_str(&format!(
                    " s{s}:{:+.4}/{:+.4}",
                    dr - bm[i],
                    df - db[i]
                ));
            }
            let verdict = if drc_ok >= 4 && dbr_ok >= 4 && prog_ok >= 4 { "PASS" } else { "----" };
            println!(
                "lr={lr:<5} batch={batch:<3} drc {drc_ok}/5 dbr {dbr_ok}/5 prog {prog_ok}/5 {verdict} |{detail} | {:.0}s",
                start.elapsed().as_secs_f64()
            );
        }
    }
}
