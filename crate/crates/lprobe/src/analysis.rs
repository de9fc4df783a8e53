//! Correlation analysis and the end-to-end experiment driver.
//!
//! Correlations relate each generalization measure to zero-shot transfer
//! accuracy via Pearson's r, grouped three ways: across domains within one
//! trained model, pooled per objective, and pooled over everything. The
//! experiment driver trains an (objective x seed) grid on a suite's anchor
//! domain, measures every model across the shifted domains, and writes a
//! deterministic artifact bundle: rerunning the same plan produces
//! byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{
    default_manifest, derive_seed, suite_from_manifest, DataError, Dataset, SuiteManifest,
    DEFAULT_GEN_SEED, DEFAULT_PROTOTYPES_SEED,
};
use crate::measures::{
    measure_all, AlphaSharpnessConfig, MeasureError, MeasureIdentity, MeasureReport,
    SharpnessConfig, DEFAULT_MEASURE_SEED,
};
use crate::model::{init_model, Model, ModelError, ModelSpec};
use crate::objectives::{train, Objective, ObjectiveError, TrainConfig};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("input lengths differ: {x} vs {y}")]
    LengthMismatch { x: usize, y: usize },
    #[error("need at least 3 samples for a correlation, got {got}")]
    TooFewSamples { got: usize },
    #[error("correlation is undefined for a constant input")]
    ConstantInput,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid experiment plan: {0}")]
    BadPlan(String),
    #[error(transparent)]
    Train(#[from] ObjectiveError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fraction of rows whose argmax logit matches the label. Ties resolve to
/// the lowest class index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64, AnalysisError> {
    let rows = logits.shape()[0];
    if rows != labels.len() {
        return Err(AnalysisError::LengthMismatch {
            x: rows,
            y: labels.len(),
        });
    }
    if rows == 0 {
        return Err(AnalysisError::EmptyDataset);
    }
    let mut hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let mut arg = 0usize;
        let mut best = row[0];
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                arg = j;
            }
        }
        if arg == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows as f64)
}

/// Accuracy of a model over a whole dataset.
pub fn model_accuracy(model: &Model, dataset: &Dataset) -> Result<f64, AnalysisError> {
    if dataset.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }
    let (x, _) = dataset.full_batch();
    let logits = model.forward(&x)?;
    accuracy(&logits, dataset.labels())
}

/// Pearson correlation coefficient. Errors on mismatched lengths, fewer
/// than 3 samples, or a constant input.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::LengthMismatch {
            x: xs.len(),
            y: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(AnalysisError::TooFewSamples { got: xs.len() });
    }
    // Exact check first: a repeated value can leave a nonzero rounding
    // residue in the variance below.
    if xs.iter().all(|&x| x == xs[0]) || ys.iter().all(|&y| y == ys[0]) {
        return Err(AnalysisError::ConstantInput);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(AnalysisError::ConstantInput);
    }
    Ok((cov / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0))
}

/// One correlation of a measure against accuracy within a group of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub grouping: String,
    pub measure: String,
    pub r: f64,
    pub n: usize,
}

/// All correlations plus the bookkeeping around skipped groups.
#[derive(Debug, Clone, Default)]
pub struct CorrelationSet {
    pub results: Vec<CorrelationResult>,
    pub warnings: Vec<String>,
    /// Rows dropped from the alpha-sharpness correlations because their
    /// search failed.
    pub alpha_excluded: usize,
}

const MEASURE_NAMES: [&str; 4] = ["margin", "phi_difference", "phi_alpha", "frobenius_distance"];

fn measure_value(report: &MeasureReport, measure: &str) -> Option<f64> {
    match measure {
        "margin" => Some(report.margin),
        "phi_difference" => Some(report.phi_difference),
        "phi_alpha" => {
            if report.phi_alpha_failed {
                None
            } else {
                report.phi_alpha
            }
        }
        "frobenius_distance" => Some(report.frobenius_distance),
        _ => None,
    }
}

fn correlate_group(group: &str, rows: &[&MeasureReport], set: &mut CorrelationSet) {
    for measure in MEASURE_NAMES {
        let mut xs = Vec::with_capacity(rows.len());
        let mut ys = Vec::with_capacity(rows.len());
        for r in rows {
            if let Some(v) = measure_value(r, measure) {
                xs.push(v);
                ys.push(r.accuracy);
            }
        }
        match pearson(&xs, &ys) {
            Ok(r) => set.results.push(CorrelationResult {
                grouping: group.to_string(),
                measure: measure.to_string(),
                r,
                n: xs.len(),
            }),
            Err(e) => set
                .warnings
                .push(format!("skipping {group}/{measure}: {e}")),
        }
    }
}

/// Correlate every measure against accuracy, grouped per model, per
/// objective, and pooled. Rows with a failed alpha-sharpness search are
/// excluded from the `phi_alpha` correlations and counted.
pub fn correlate_measures(reports: &[MeasureReport]) -> CorrelationSet {
    let mut set = CorrelationSet {
        alpha_excluded: reports.iter().filter(|r| r.phi_alpha_failed).count(),
        ..Default::default()
    };
    if set.alpha_excluded > 0 {
        set.warnings.push(format!(
            "excluded {} rows with a failed alpha-sharpness search from phi_alpha correlations",
            set.alpha_excluded
        ));
    }

    // First-appearance order keeps output deterministic for ordered input.
    let mut model_order = Vec::new();
    let mut objective_order = Vec::new();
    for r in reports {
        if !model_order.contains(&r.model_id) {
            model_order.push(r.model_id.clone());
        }
        if !objective_order.contains(&r.objective) {
            objective_order.push(r.objective.clone());
        }
    }

    for model_id in &model_order {
        let rows: Vec<&MeasureReport> =
            reports.iter().filter(|r| &r.model_id == model_id).collect();
        correlate_group(&format!("model/{model_id}"), &rows, &mut set);
    }
    for objective in &objective_order {
        let rows: Vec<&MeasureReport> =
            reports.iter().filter(|r| &r.objective == objective).collect();
        correlate_group(&format!("objective/{objective}"), &rows, &mut set);
    }
    let all: Vec<&MeasureReport> = reports.iter().collect();
    correlate_group("pooled", &all, &mut set);
    set
}

/// Render correlations with the fixed `group,measure,r,n` column order.
pub fn correlations_to_csv(results: &[CorrelationResult]) -> String {
    let mut out = String::from("group,measure,r,n\n");
    for c in results {
        let _ = writeln!(out, "{},{},{:.16e},{}", c.grouping, c.measure, c.r, c.n);
    }
    out
}

/// Per-objective accuracy stability across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRow {
    pub objective: String,
    /// Mean over seeds of the per-seed mean domain accuracy.
    pub mean_acc: f64,
    /// Population standard deviation over seeds of the same quantity.
    pub std_acc: f64,
}

/// Aggregate per-seed mean accuracies into per-objective stability rows.
pub fn stability_rows(reports: &[MeasureReport]) -> Vec<StabilityRow> {
    // objective -> seed -> accuracies; BTreeMaps keep emission order stable.
    let mut grouped: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    let mut objective_order = Vec::new();
    for r in reports {
        if !objective_order.contains(&r.objective) {
            objective_order.push(r.objective.clone());
        }
        grouped
            .entry((r.objective.clone(), r.seed))
            .or_default()
            .push(r.accuracy);
    }
    objective_order
        .into_iter()
        .map(|objective| {
            let per_seed: Vec<f64> = grouped
                .iter()
                .filter(|((o, _), _)| *o == objective)
                .map(|(_, accs)| accs.iter().sum::<f64>() / accs.len() as f64)
                .collect();
            let n = per_seed.len() as f64;
            let mean = per_seed.iter().sum::<f64>() / n;
            let var = per_seed.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            StabilityRow {
                objective,
                mean_acc: mean,
                std_acc: var.sqrt(),
            }
        })
        .collect()
}

pub fn stability_to_csv(rows: &[StabilityRow]) -> String {
    let mut out = String::from("objective,mean_acc,std_acc\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.16e},{:.16e}", r.objective, r.mean_acc, r.std_acc);
    }
    out
}

/// Declarative description of a full experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub suite: SuiteManifest,
    /// Hidden layer widths of every trained model.
    pub hidden_dims: Vec<usize>,
    /// Training configurations; each runs once per seed, with the seed
    /// replacing the config's own.
    pub objectives: Vec<TrainConfig>,
    pub seeds: Vec<u64>,
    pub sharpness: SharpnessConfig,
    pub alpha: AlphaSharpnessConfig,
    #[serde(default)]
    pub sweep_noise: bool,
    pub output_dir: String,
}

impl ExperimentPlan {
    /// The default grid: all four objectives, eight seeds, default suite.
    pub fn defaults() -> Self {
        Self {
            suite: default_manifest(DEFAULT_PROTOTYPES_SEED, DEFAULT_GEN_SEED),
            hidden_dims: vec![16],
            objectives: Objective::ALL
                .iter()
                .map(|&o| TrainConfig::defaults(o, 0))
                .collect(),
            seeds: (0..8).collect(),
            sharpness: SharpnessConfig::defaults(DEFAULT_MEASURE_SEED),
            alpha: AlphaSharpnessConfig::defaults(DEFAULT_MEASURE_SEED),
            sweep_noise: false,
            output_dir: "experiment-out".into(),
        }
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.objectives.is_empty() {
            return Err(AnalysisError::BadPlan("no training configs".into()));
        }
        if self.seeds.is_empty() {
            return Err(AnalysisError::BadPlan("no seeds".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(AnalysisError::BadPlan("duplicate seeds".into()));
        }
        for cfg in &self.objectives {
            cfg.validate()?;
        }
        self.sharpness
            .validate()
            .map_err(|e| AnalysisError::BadPlan(e.to_string()))?;
        self.alpha
            .validate()
            .map_err(|e| AnalysisError::BadPlan(e.to_string()))?;
        Ok(())
    }
}

/// Label training configs by objective name, disambiguating repeats.
fn objective_labels(configs: &[TrainConfig]) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for cfg in configs {
        *counts.entry(cfg.objective.name()).or_default() += 1;
    }
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    configs
        .iter()
        .map(|cfg| {
            let name = cfg.objective.name();
            let idx = seen.entry(name).or_default();
            *idx += 1;
            if counts[name] > 1 {
                format!("{name}{idx}")
            } else {
                name.to_string()
            }
        })
        .collect()
}

struct RunData {
    reports: Vec<MeasureReport>,
    history_csv: String,
    row_errors: Vec<(String, String)>,
}

struct RunOutput {
    run_id: String,
    outcome: Result<RunData, String>,
}

/// Summary returned by [`run_experiment`] after the bundle is written.
#[derive(Debug)]
pub struct ExperimentSummary {
    pub out_dir: PathBuf,
    pub total_runs: usize,
    /// `(run id, error)` for runs that failed; the bundle still contains
    /// every successful run.
    pub failed: Vec<(String, String)>,
    pub report_rows: usize,
    pub warnings: Vec<String>,
    /// The correlations also written to `correlations.csv`.
    pub correlations: Vec<CorrelationResult>,
}

impl ExperimentSummary {
    pub fn fully_succeeded(&self) -> bool {
        self.failed.is_empty()
    }
}

/// Train and measure the full (objective x seed) grid, then write the
/// artifact bundle under `out_dir`:
///
/// - `plan.json`: echo of the executed plan
/// - `reports.csv`: one row per (run, domain)
/// - `correlations.csv`: grouped measure/accuracy correlations
/// - `stability.csv`: per-objective accuracy mean and deviation over seeds
/// - `notes.txt`: run statuses, correlation warnings, exclusion counts
/// - `history/<run-id>.csv`: per-epoch training curves
///
/// `jobs` bounds worker threads (0 = library default). Outputs are
/// byte-identical across reruns and job counts; failed runs are recorded
/// and the rest of the bundle is still produced.
pub fn run_experiment(
    plan: &ExperimentPlan,
    out_dir: &Path,
    jobs: usize,
) -> Result<ExperimentSummary, AnalysisError> {
    plan.validate()?;
    let suite = suite_from_manifest(&plan.suite)?;
    let labels = objective_labels(&plan.objectives);

    struct RunDesc<'a> {
        run_id: String,
        label: &'a str,
        cfg: TrainConfig,
        seed: u64,
    }
    let mut descs = Vec::new();
    for (cfg, label) in plan.objectives.iter().zip(&labels) {
        for &seed in &plan.seeds {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            descs.push(RunDesc {
                run_id: format!("{label}-seed{seed}"),
                label,
                cfg,
                seed,
            });
        }
    }

    let spec_template = ModelSpec {
        input_dim: suite.input_dim,
        hidden_dims: plan.hidden_dims.clone(),
        num_classes: suite.num_classes,
        init_seed: 0,
    };
    spec_template.validate().map_err(AnalysisError::Model)?;

    let run_one = |desc: &RunDesc| -> RunOutput {
        let outcome = (|| -> Result<RunData, String> {
            let spec = ModelSpec {
                init_seed: derive_seed(desc.seed, "init"),
                ..spec_template.clone()
            };
            let model = init_model(&spec).map_err(|e| e.to_string())?;
            let trained = train(model, &suite.anchor, &desc.cfg).map_err(|e| e.to_string())?;
            let identity = MeasureIdentity {
                model_id: desc.run_id.clone(),
                objective: desc.label.to_string(),
                seed: desc.seed,
            };
            let measured = measure_all(
                &identity,
                &trained.model,
                &suite,
                &plan.sharpness,
                &plan.alpha,
                plan.sweep_noise,
            )
            .map_err(|e| e.to_string())?;
            Ok(RunData {
                reports: measured.reports,
                history_csv: trained.history_csv(),
                row_errors: measured.row_errors,
            })
        })();
        RunOutput {
            run_id: desc.run_id.clone(),
            outcome,
        }
    };

    // Results collect in descriptor order, so aggregation does not depend
    // on worker scheduling.
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| AnalysisError::BadPlan(format!("cannot build thread pool: {e}")))?;
    let outputs: Vec<RunOutput> = pool.install(|| {
        use rayon::prelude::*;
        descs.par_iter().map(run_one).collect()
    });

    fs::create_dir_all(out_dir.join("history"))?;
    let mut plan_json = serde_json::to_string_pretty(plan)?;
    plan_json.push('\n');
    fs::write(out_dir.join("plan.json"), plan_json)?;

    let mut reports = Vec::new();
    let mut failed = Vec::new();
    let mut notes = String::from("run statuses\n");
    let mut warnings = Vec::new();
    for out in &outputs {
        match &out.outcome {
            Ok(data) => {
                let _ = writeln!(notes, "  {}: ok ({} rows)", out.run_id, data.reports.len());
                for (domain, err) in &data.row_errors {
                    let msg = format!("row failure in {} domain {domain}: {err}", out.run_id);
                    let _ = writeln!(notes, "  {msg}");
                    warnings.push(msg);
                }
                reports.extend(data.reports.iter().cloned());
            }
            Err(e) => {
                let _ = writeln!(notes, "  {}: failed: {e}", out.run_id);
                failed.push((out.run_id.clone(), e.clone()));
            }
        }
    }

    fs::write(
        out_dir.join("reports.csv"),
        crate::measures::reports_to_csv(&reports, plan.sweep_noise),
    )?;

    let correlations = correlate_measures(&reports);
    warnings.extend(correlations.warnings.iter().cloned());
    fs::write(
        out_dir.join("correlations.csv"),
        correlations_to_csv(&correlations.results),
    )?;

    let stability = stability_rows(&reports);
    fs::write(out_dir.join("stability.csv"), stability_to_csv(&stability))?;

    for out in &outputs {
        if let Ok(data) = &out.outcome {
            fs::write(
                out_dir.join("history").join(format!("{}.csv", out.run_id)),
                &data.history_csv,
            )?;
        }
    }

    notes.push_str("correlation notes\n");
    let _ = writeln!(
        notes,
        "  phi_alpha rows excluded for failed searches: {}",
        correlations.alpha_excluded
    );
    for w in &correlations.warnings {
        let _ = writeln!(notes, "  {w}");
    }
    fs::write(out_dir.join("notes.txt"), notes)?;

    Ok(ExperimentSummary {
        out_dir: out_dir.to_path_buf(),
        total_runs: outputs.len(),
        failed,
        report_rows: reports.len(),
        warnings,
        correlations: correlations.results,
    })
}
