//! Run records, summary metrics, and diagnostics.
//!
//! Every run produces one [`RunReport`]: a stage-by-stage trace plus the
//! two headline numbers — accuracy after the final stage over all seen
//! classes, and the mean of the per-stage accuracies — and a diagnostics
//! block recording the invariants the protocol promises (frozen backbone,
//! bounded adapter memory, no rehearsal, no label access during merging).
//! Reports serialize to JSON with fully ordered keys so identical runs
//! produce byte-identical files.

use crate::consolidation::ConsolidationOutcome;
use crate::error::{Error, Result};
use crate::refinement::RefinementOutcome;

/// Mean of per-stage accuracies (each stage measured over all classes
/// seen so far).
pub fn average_accuracy(stage_accuracies: &[f64]) -> Result<f64> {
    if stage_accuracies.is_empty() {
        return Err(Error::Config("no stage accuracies to average".into()));
    }
    Ok(stage_accuracies.iter().sum::<f64>() / stage_accuracies.len() as f64)
}

/// Population standard deviation (divides by n, not n−1): spread of
/// per-task accuracies at the end of the run.
pub fn population_sd(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Config("no values for standard deviation".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// What happened at one stage of the stream.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StageRecord {
    pub task_index: usize,
    /// All classes evaluable at this stage, in introduction order.
    pub classes_seen: Vec<u32>,
    /// Accuracy over the union of seen test pools after this stage's
    /// training, merging, and refinement.
    pub accuracy: f64,
    /// Cross-entropy of the stage's individual adapter training at its end.
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consolidation: Option<ConsolidationOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refinement: Option<RefinementOutcome>,
}

/// Pairwise cosine structure of per-task adapter deltas.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CosineSummary {
    pub matrix: Vec<Vec<f64>>,
    /// Tasks whose flattened delta had zero norm (excluded from the mean).
    pub excluded: Vec<usize>,
    pub mean_abs_off_diagonal: f64,
}

/// Movement of one class's feature-space mean between stages, measured on
/// its test pool under the currently deployed adapters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DriftRecord {
    pub class_id: u32,
    /// Stage at which the class was introduced.
    pub first_stage: usize,
    /// Stage this measurement was taken at.
    pub stage: usize,
    /// Euclidean distance between the class's current feature mean and
    /// its mean at the introduction stage.
    pub mean_shift: f64,
}

/// Protocol invariants, checked while the run executes.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunDiagnostics {
    pub backbone_checksum_before: u64,
    pub backbone_checksum_after: u64,
    /// The two checksums match: no backbone weight changed during the run.
    pub backbone_untouched: bool,
    /// Highest number of adapter matrices alive at once (audited by the
    /// allocation ledger).
    pub adapter_peak_live: usize,
    /// Adapter sets retained at the end of the run.
    pub adapter_sets_stored: usize,
    /// Classifier evaluations issued while merge coefficients were being
    /// learned — must be zero (merging never consults labels or heads).
    pub classifier_evals_during_consolidation: u64,
    /// Every task's training data was consumed exactly once and was
    /// unreachable at every later stage.
    pub rehearsal_audit_passed: bool,
    /// Whether any stage's unlabeled merge batch needed sampling with
    /// replacement (pools smaller than the requested batch).
    pub merge_sampled_with_replacement: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_cosine: Option<CosineSummary>,
    pub drift: Vec<DriftRecord>,
}

/// The complete record of one variant × seed run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub seed: u64,
    /// Hash of the experiment configuration the run executed.
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
    /// Mean of stage accuracies.
    pub average_accuracy: f64,
    /// Accuracy after the final stage over all seen classes.
    pub last_accuracy: f64,
    /// Accuracy per task's own classes, measured after the final stage.
    pub per_task_final_accuracies: Vec<f64>,
    /// Population SD of `per_task_final_accuracies`.
    pub task_accuracy_sd: f64,
    /// Final-stage accuracy on the last task's classes (plasticity).
    pub final_task_accuracy: f64,
    /// Final-stage accuracy on all earlier tasks' classes (stability).
    pub previous_tasks_accuracy: f64,
    pub diagnostics: RunDiagnostics,
}

impl RunReport {
    /// Ordered, reproducible JSON rendering.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<RunReport> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Mean and spread of one summary metric across seeds.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub sd: f64,
    pub values: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> Result<MetricSummary> {
        let mean = average_accuracy(&values)?;
        let sd = population_sd(&values)?;
        Ok(MetricSummary { mean, sd, values })
    }
}

/// Cross-seed aggregate for one variant.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub last_accuracy: MetricSummary,
    pub average_accuracy: MetricSummary,
    pub final_task_accuracy: MetricSummary,
    pub previous_tasks_accuracy: MetricSummary,
}

impl VariantSummary {
    pub fn from_reports(variant: &str, reports: &[&RunReport]) -> Result<VariantSummary> {
        if reports.is_empty() {
            return Err(Error::Config(format!("no reports for variant {variant}")));
        }
        let pull = |f: fn(&RunReport) -> f64| -> Result<MetricSummary> {
            MetricSummary::from_values(reports.iter().map(|r| f(r)).collect())
        };
        Ok(VariantSummary {
            variant: variant.to_string(),
            seeds: reports.iter().map(|r| r.seed).collect(),
            last_accuracy: pull(|r| r.last_accuracy)?,
            average_accuracy: pull(|r| r.average_accuracy)?,
            final_task_accuracy: pull(|r| r.final_task_accuracy)?,
            previous_tasks_accuracy: pull(|r| r.previous_tasks_accuracy)?,
        })
    }
}
