//! Experiment command line: synthetic data generation, backbone
//! pretraining, incremental-learning runs, and six-variant ablations.
//!
//! Exit codes: 0 success, 2 usage/configuration, 3 I/O or parse, 4 protocol
//! violation (class leakage), 5 numeric failure, 1 anything else. All output
//! files embed the resolved configuration hash (JSON field or `# config_hash`
//! header comment) and contain no timestamps, so reruns are byte-comparable.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use desire::backbone::pretrain_backbone;
use desire::config::ExperimentConfig;
use desire::error::{Error, Result};
use desire::io;
use desire::lora::MergeCoefficients;
use desire::pipeline::data::{generate_dataset, GeneratorConfig};
use desire::pipeline::metrics::{RunReport, VariantSummary};
use desire::pipeline::{run_ablation, run_variant, AblationReport, RunContext, Variant};

#[derive(Parser)]
#[command(
    name = "desire",
    about = "Rehearsal-free class-incremental learning with two-set adapter merging",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory (sample tables + manifest).
    GenData(GenDataArgs),
    /// Pretrain the frozen backbone and write its checkpoint.
    Pretrain(PretrainArgs),
    /// Run one variant over one or more seeds.
    Run(RunArgs),
    /// Run all six variants over the configured seeds and emit the
    /// comparison table plus the merging-coefficient dump.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for the dataset files.
    #[arg(long)]
    out: PathBuf,
    /// Total number of classes to generate.
    #[arg(long, default_value_t = 20)]
    classes: u32,
    /// Input (observation) dimension.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Training samples per class (test split gets the same count).
    #[arg(long = "samples-per-class", default_value_t = 200)]
    samples_per_class: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 777)]
    seed: u64,
    /// Residual warp layers shared by all classes.
    #[arg(long = "warp-depth")]
    warp_depth: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output path for the backbone checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Backbone checkpoint written by pretrain.
    #[arg(long)]
    backbone: PathBuf,
    /// Variant to run (defaults to the one named in the configuration).
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Comma-separated seed list (defaults to the configured seeds).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory for reports.
    #[arg(long)]
    out: PathBuf,
    /// Also export per-stage features of every evaluated test sample as CSV.
    #[arg(long = "export-features", default_value_t = false)]
    export_features: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Backbone checkpoint written by pretrain.
    #[arg(long)]
    backbone: PathBuf,
    /// Output directory for reports.
    #[arg(long)]
    out: PathBuf,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Run(args) => cmd_run(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code().clamp(0, 255) as u8)
        }
    }
}

/// Worker cap from the environment; 1 when unset (fully serial and
/// deterministic by default).
fn thread_cap() -> Result<usize> {
    match std::env::var("DESIRE_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("DESIRE_THREADS must be a positive integer, got {v:?}")))?;
            if n == 0 {
                return Err(Error::Config("DESIRE_THREADS must be at least 1".into()));
            }
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let mut generator = GeneratorConfig::desk(args.classes, args.dim, args.samples_per_class, args.seed);
    if let Some(depth) = args.warp_depth {
        generator.warp_depth = depth;
    }
    generator.validate()?;
    let dataset = generate_dataset(&generator)?;
    let manifest = io::save_dataset(&args.out, &dataset, &generator)?;
    println!("dataset: {}", args.out.display());
    println!("classes: {}  input_dim: {}", manifest.num_classes, manifest.input_dim);
    for (name, digest) in &manifest.files {
        println!("{name}: {} records, sha256 {}", digest.records, digest.sha256);
    }
    Ok(())
}

fn load_experiment(path: &Path) -> Result<(ExperimentConfig, String)> {
    let config = ExperimentConfig::load(path)?;
    config.validate()?;
    let hash = config.hash()?;
    Ok((config, hash))
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let (config, hash) = load_experiment(&args.config)?;
    let (dataset, _) = io::load_dataset(&args.data)?;
    let (train_x, train_y) = dataset.stacked(true, &config.pretrain.classes)?;
    let (test_x, test_y) = dataset.stacked(false, &config.pretrain.classes)?;
    let (weights, outcome) =
        pretrain_backbone(&config.backbone, &config.pretrain, &train_x, &train_y, &test_x, &test_y)?;
    io::save_backbone(&args.out, &weights)?;
    println!("config_hash: {hash}");
    println!("holdout_accuracy: {:.4}", outcome.holdout_accuracy);
    println!("final_train_loss: {:.6}", outcome.final_train_loss);
    println!("checkpoint: {}", args.out.display());
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let (config, hash) = load_experiment(&args.config)?;
    let (dataset, _) = io::load_dataset(&args.data)?;
    let weights = io::load_backbone(&args.backbone)?;
    let variant = args.variant.unwrap_or(config.variant);
    let seeds = match &args.seeds {
        Some(s) if !s.is_empty() => s.clone(),
        _ => config.seeds.clone(),
    };
    let ctx = RunContext { weights: &weights, dataset: &dataset, config: &config, config_hash: &hash };
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("creating {}: {e}", args.out.display()))))?;

    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let report = if args.export_features {
            let mut rows: Vec<String> = Vec::new();
            let mut sink = |stage: usize, class_id: u32, features: &desire::numerics::tensor::Tensor| {
                let d = features.shape()[1];
                for r in 0..features.shape()[0] {
                    let mut line = format!("{stage},{class_id},{r}");
                    for c in 0..d {
                        line.push_str(&format!(",{:.17e}", features.row_slice(r)[c]));
                    }
                    rows.push(line);
                }
            };
            let report = run_variant(&ctx, variant, seed, None, Some(&mut sink))?;
            let mut csv = format!("# config_hash={hash}\nstage,class_id,sample,{}\n", feature_header(&weights));
            for line in rows {
                csv.push_str(&line);
                csv.push('\n');
            }
            write_text(&args.out.join(format!("features_{}_seed{seed}.csv", variant.as_str())), &csv)?;
            report
        } else {
            run_variant(&ctx, variant, seed, None, None)?
        };
        write_report_files(&args.out, &report, &hash)?;
        println!(
            "{} seed {seed}: A_last {:.4}  Avg {:.4}",
            variant.as_str(),
            report.last_accuracy,
            report.average_accuracy
        );
        reports.push(report);
    }

    write_metrics_csv(&args.out.join("metrics.csv"), &reports, &hash)?;
    write_coefficients_csv(&args.out.join("coefficients.csv"), &reports, &hash)?;
    write_drift_csv(&args.out.join("drift.csv"), &reports, &hash)?;
    let refs: Vec<&RunReport> = reports.iter().collect();
    let aggregate = AblationReport {
        config_hash: hash.clone(),
        variants: vec![VariantSummary::from_reports(variant.as_str(), &refs)?],
    };
    write_aggregate(&args.out.join("aggregate.json"), &aggregate)?;
    println!("reports: {}", args.out.display());
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let (config, hash) = load_experiment(&args.config)?;
    let (dataset, _) = io::load_dataset(&args.data)?;
    let weights = io::load_backbone(&args.backbone)?;
    let threads = thread_cap()?;
    let ctx = RunContext { weights: &weights, dataset: &dataset, config: &config, config_hash: &hash };
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("creating {}: {e}", args.out.display()))))?;

    let (reports, aggregate) = run_ablation(&ctx, &Variant::ALL, &config.seeds, threads)?;
    for report in &reports {
        write_report_files(&args.out, report, &hash)?;
    }
    write_metrics_csv(&args.out.join("metrics.csv"), &reports, &hash)?;
    write_coefficients_csv(&args.out.join("coefficients.csv"), &reports, &hash)?;
    write_drift_csv(&args.out.join("drift.csv"), &reports, &hash)?;
    write_aggregate(&args.out.join("aggregate.json"), &aggregate)?;
    for summary in &aggregate.variants {
        println!(
            "{:<18} A_last {:.4} ± {:.4}   Avg {:.4} ± {:.4}",
            summary.variant,
            summary.last_accuracy.mean,
            summary.last_accuracy.sd,
            summary.average_accuracy.mean,
            summary.average_accuracy.sd
        );
    }
    println!("reports: {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("writing {}: {e}", path.display()))))
}

fn feature_header(weights: &desire::backbone::BackboneWeights) -> String {
    (0..weights.config.model_dim).map(|i| format!("f{i}")).collect::<Vec<_>>().join(",")
}

/// Per-run JSON report plus a per-stage CSV, both named by variant and seed.
fn write_report_files(dir: &Path, report: &RunReport, hash: &str) -> Result<()> {
    let stem = format!("{}_seed{}", report.variant, report.seed);
    write_text(&dir.join(format!("report_{stem}.json")), &format!("{}\n", report.to_json()?))?;

    let mut csv = format!(
        "# config_hash={hash}\ntask_index,num_classes_seen,accuracy,train_loss,\
         consolidation_initial_loss,consolidation_final_loss,refinement_initial_loss,refinement_final_loss\n"
    );
    for stage in &report.stages {
        let (ci, cf) = stage
            .consolidation
            .as_ref()
            .map(|c| (format!("{:.17e}", c.initial_loss), format!("{:.17e}", c.final_loss)))
            .unwrap_or_default();
        let (ri, rf) = stage
            .refinement
            .as_ref()
            .map(|r| (format!("{:.17e}", r.initial_loss), format!("{:.17e}", r.final_loss)))
            .unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{:.17e},{:.17e},{ci},{cf},{ri},{rf}\n",
            stage.task_index,
            stage.classes_seen.len(),
            stage.accuracy,
            stage.train_loss
        ));
    }
    write_text(&dir.join(format!("stages_{stem}.csv")), &csv)
}

/// One row per (variant, seed) with the headline metrics.
fn write_metrics_csv(path: &Path, reports: &[RunReport], hash: &str) -> Result<()> {
    let mut csv = format!(
        "# config_hash={hash}\nvariant,seed,last_accuracy,average_accuracy,\
         final_task_accuracy,previous_tasks_accuracy,task_accuracy_sd\n"
    );
    for r in reports {
        csv.push_str(&format!(
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            r.variant,
            r.seed,
            r.last_accuracy,
            r.average_accuracy,
            r.final_task_accuracy,
            r.previous_tasks_accuracy,
            r.task_accuracy_sd
        ));
    }
    write_text(path, &csv)
}

/// Learned merging coefficients of every consolidated stage, one row per
/// coefficient slot (block × projection × matrix × role).
fn write_coefficients_csv(path: &Path, reports: &[RunReport], hash: &str) -> Result<()> {
    let mut csv = format!("# config_hash={hash}\nvariant,seed,task_index,block,projection,matrix,role,value\n");
    for r in reports {
        for stage in &r.stages {
            let Some(consolidation) = &stage.consolidation else { continue };
            let num_blocks = consolidation.coefficient_values.len() / 8;
            let mut coeffs = MergeCoefficients::balanced(num_blocks, [0.0, 0.0]);
            coeffs.set_values(&consolidation.coefficient_values)?;
            for (block, projection, matrix, role, value) in coeffs.rows() {
                csv.push_str(&format!(
                    "{},{},{},{block},{projection},{matrix},{role},{value:.17e}\n",
                    r.variant, r.seed, stage.task_index
                ));
            }
        }
    }
    write_text(path, &csv)
}

/// Stored-mean drift of every class across later stages.
fn write_drift_csv(path: &Path, reports: &[RunReport], hash: &str) -> Result<()> {
    let mut csv = format!("# config_hash={hash}\nvariant,seed,class_id,first_stage,stage,mean_shift\n");
    for r in reports {
        for d in &r.diagnostics.drift {
            csv.push_str(&format!(
                "{},{},{},{},{},{:.17e}\n",
                r.variant, r.seed, d.class_id, d.first_stage, d.stage, d.mean_shift
            ));
        }
    }
    write_text(path, &csv)
}

/// Aggregate summary, written atomically (temp file + rename).
fn write_aggregate(path: &Path, aggregate: &AblationReport) -> Result<()> {
    let json = serde_json::to_string_pretty(aggregate)
        .map_err(|e| Error::Parse(format!("encoding aggregate: {e}")))?;
    let tmp = path.with_extension("json.tmp");
    write_text(&tmp, &format!("{json}\n"))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("renaming {}: {e}", tmp.display()))))
}
