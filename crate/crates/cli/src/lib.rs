//! Library behind the `otcd` binary: experiment sweeps, figure-data
//! emission, and the file-level wrappers around the core operations.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use otcd_core::data::{generate, load, save, SyntheticSpec};
use otcd_core::eval::{
    accuracy_all, accuracy_known, accuracy_unknown_agnostic, accuracy_unknown_aware,
    class_count_report, MetricsReport,
};
use otcd_core::ot::{sinkhorn_plan, TransportProblem};
use otcd_core::trainer::{train, RunReport, TrainConfig};
use otcd_core::Scalar;

/// JSON schema of a transport problem file for the `sinkhorn` subcommand.
#[derive(Debug, Serialize, Deserialize)]
pub struct ProblemFile {
    pub predictions: Vec<Vec<f64>>,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    pub smoothing: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_max_iters() -> usize {
    otcd_core::ot::DEFAULT_MAX_ITERS
}

fn default_tolerance() -> f64 {
    otcd_core::ot::DEFAULT_TOLERANCE
}

/// JSON schema of the emitted plan.
#[derive(Debug, Serialize, Deserialize)]
pub struct PlanFile {
    pub plan: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub iterations_used: usize,
    pub row_residual: f64,
    pub col_residual: f64,
}

/// Solves the problem in `input` and writes the plan JSON to `output`.
pub fn cmd_sinkhorn(input: &Path, output: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input)
        .with_context(|| format!("reading {}", input.display()))?;
    let file: ProblemFile = serde_json::from_str(&text).context("parsing problem JSON")?;
    let m = file.predictions.len();
    let c = file.predictions.first().map_or(0, |r| r.len());
    if file.predictions.iter().any(|r| r.len() != c) {
        bail!("prediction rows have inconsistent lengths");
    }
    let mut predictions = Array2::<Scalar>::zeros((m, c));
    for (i, row) in file.predictions.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            predictions[[i, j]] = p;
        }
    }
    let problem = TransportProblem::new(
        predictions,
        Array1::from_vec(file.row_marginal),
        Array1::from_vec(file.col_marginal),
        file.smoothing,
        file.max_iters,
        file.tolerance,
    )?;
    let plan = sinkhorn_plan(&problem)?;
    let out = PlanFile {
        plan: plan
            .plan
            .rows()
            .into_iter()
            .map(|r| r.iter().copied().collect())
            .collect(),
        alpha: plan.alpha.to_vec(),
        beta: plan.beta.to_vec(),
        iterations_used: plan.iterations_used,
        row_residual: plan.row_residual,
        col_residual: plan.col_residual,
    };
    std::fs::write(output, serde_json::to_vec_pretty(&out)?)
        .with_context(|| format!("writing {}", output.display()))?;
    Ok(())
}

/// Generates a synthetic dataset and writes it to `out`.
pub fn cmd_gen(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    let dataset = generate(spec)?;
    save(&dataset, out)?;
    Ok(())
}

/// Trains on a saved dataset with an optional JSON config and writes the
/// run artifacts into `out`.
pub fn cmd_train(dataset_dir: &Path, config_path: Option<&Path>, out: &Path) -> Result<()> {
    let dataset = load(dataset_dir)?;
    let config: TrainConfig = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).context("parsing train config JSON")?
        }
        None => TrainConfig::default(),
    };
    train::<Scalar>(&dataset, &config, Some(out))?;
    Ok(())
}

/// Scores a predictions file (JSON array of class indices over the
/// unlabeled pool in ascending row order) against a dataset. The report's
/// prior error compares the empirical distribution of the predictions to
/// the ground-truth pool distribution.
pub fn cmd_eval(dataset_dir: &Path, predictions_path: &Path, out: &Path) -> Result<()> {
    let dataset = load(dataset_dir)?;
    let text = std::fs::read_to_string(predictions_path)
        .with_context(|| format!("reading {}", predictions_path.display()))?;
    let preds: Vec<usize> = serde_json::from_str(&text).context("parsing predictions JSON")?;
    let pool = dataset.unlabeled_indices();
    if preds.len() != pool.len() {
        bail!(
            "{} predictions for an unlabeled pool of {}",
            preds.len(),
            pool.len()
        );
    }
    let truth: Vec<usize> = pool.iter().map(|&i| dataset.labels[i]).collect();
    let c = dataset.num_classes();
    let counts = class_count_report(&preds, c);
    let truth_prior = dataset.unlabeled_prior();
    let n = preds.len() as f64;
    let prior_l1_error = counts
        .iter()
        .zip(truth_prior.iter())
        .map(|(&k, &t)| (k as f64 / n - t).abs())
        .sum();
    let report = MetricsReport {
        acc_all: accuracy_all(&preds, &truth, c)?,
        acc_known: accuracy_known(&preds, &truth, &dataset.known_classes)?,
        acc_unknown_aware: accuracy_unknown_aware(&preds, &truth, &dataset.known_classes, c)?,
        acc_unknown_agnostic: accuracy_unknown_agnostic(
            &preds,
            &truth,
            &dataset.known_classes,
            c,
        )?,
        prior_l1_error,
        predicted_class_counts: counts,
        epoch: 0,
    };
    std::fs::write(out, serde_json::to_vec_pretty(&report)?)?;
    Ok(())
}

/// Where a sweep's data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// A saved dataset directory, reused by every run.
    Path(PathBuf),
    /// A generator spec; each run regenerates with its own seed.
    Spec(SyntheticSpec),
}

/// The swept dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Imbalance factors; requires a generator spec.
    Rho(Vec<f64>),
    /// Loss-component switches.
    Ablation(Vec<AblationMode>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    WoSup,
    WoIns,
    WoProto,
    /// Keeps the class prior pinned at uniform.
    UniformPrior,
}

impl AblationMode {
    pub fn label(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::WoSup => "wo_sup",
            AblationMode::WoIns => "wo_ins",
            AblationMode::WoProto => "wo_proto",
            AblationMode::UniformPrior => "uniform_prior",
        }
    }

    pub fn apply(self, config: &mut TrainConfig) {
        match self {
            AblationMode::Full => {}
            AblationMode::WoSup => config.loss.lambda_sup = 0.0,
            AblationMode::WoIns => config.loss.lambda_ins = 0.0,
            AblationMode::WoProto => config.loss.lambda_proto = 0.0,
            AblationMode::UniformPrior => config.fix_prior = true,
        }
    }
}

/// A full experiment grid: one axis, several seeds, shared base config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub train: TrainConfig,
    pub axis: SweepAxis,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

/// Aggregate of one axis value over its successful seeds.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub axis: String,
    pub value: String,
    pub seeds_ok: usize,
    pub acc_all: (f64, f64),
    pub acc_known: (f64, f64),
    pub acc_unknown_aware: (f64, f64),
    pub acc_unknown_agnostic: (f64, f64),
    pub prior_l1_error: (f64, f64),
}

#[derive(Debug)]
pub struct SweepSummary {
    pub rows: Vec<SummaryRow>,
    pub total_runs: usize,
    pub failed_runs: usize,
}

impl SweepSummary {
    pub fn all_succeeded(&self) -> bool {
        self.failed_runs == 0
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs the grid: for each (axis value, seed) generate/load data, train,
/// and evaluate; failures are recorded and the sweep continues. Writes
/// `summary.csv` (one row per axis value, in axis order) and `runs.csv`
/// into the output directory.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepSummary> {
    if config.seeds.is_empty() {
        bail!("sweep needs at least one seed");
    }
    if let DatasetSource::Path(path) = &config.dataset {
        if !path.exists() {
            bail!("dataset path {} does not exist", path.display());
        }
        if matches!(config.axis, SweepAxis::Rho(_)) {
            bail!("a rho sweep needs a generator spec, not a fixed dataset path");
        }
    }
    std::fs::create_dir_all(&config.out_dir)?;

    let axis_values: Vec<(String, String)> = match &config.axis {
        SweepAxis::Rho(rhos) => rhos
            .iter()
            .map(|r| ("rho".to_string(), format!("{r}")))
            .collect(),
        SweepAxis::Ablation(modes) => modes
            .iter()
            .map(|m| ("ablation".to_string(), m.label().to_string()))
            .collect(),
    };

    let mut rows = Vec::new();
    let mut runs_log = String::from("axis,value,seed,status,dir\n");
    let mut total = 0usize;
    let mut failed = 0usize;
    for (idx, (axis_name, value)) in axis_values.iter().enumerate() {
        let mut per_metric: Vec<Vec<f64>> = vec![Vec::new(); 5];
        for &seed in &config.seeds {
            total += 1;
            let run_dir = config.out_dir.join(format!("{axis_name}={value}_seed={seed}"));
            let status = run_one(config, idx, seed, &run_dir);
            match status {
                Ok(metrics) => {
                    per_metric[0].push(metrics.acc_all);
                    per_metric[1].push(metrics.acc_known);
                    per_metric[2].push(metrics.acc_unknown_aware);
                    per_metric[3].push(metrics.acc_unknown_agnostic);
                    per_metric[4].push(metrics.prior_l1_error);
                    runs_log.push_str(&format!(
                        "{axis_name},{value},{seed},ok,{}\n",
                        run_dir.display()
                    ));
                }
                Err(err) => {
                    failed += 1;
                    runs_log.push_str(&format!(
                        "{axis_name},{value},{seed},failed: {err},{}\n",
                        run_dir.display()
                    ));
                }
            }
        }
        rows.push(SummaryRow {
            axis: axis_name.clone(),
            value: value.clone(),
            seeds_ok: per_metric[0].len(),
            acc_all: mean_std(&per_metric[0]),
            acc_known: mean_std(&per_metric[1]),
            acc_unknown_aware: mean_std(&per_metric[2]),
            acc_unknown_agnostic: mean_std(&per_metric[3]),
            prior_l1_error: mean_std(&per_metric[4]),
        });
    }

    let mut summary = String::from(
        "axis,value,seeds_ok,acc_all_mean,acc_all_std,acc_known_mean,acc_known_std,\
         acc_unknown_aware_mean,acc_unknown_aware_std,acc_unknown_agnostic_mean,\
         acc_unknown_agnostic_std,prior_l1_mean,prior_l1_std\n",
    );
    for row in &rows {
        summary.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            row.axis,
            row.value,
            row.seeds_ok,
            row.acc_all.0,
            row.acc_all.1,
            row.acc_known.0,
            row.acc_known.1,
            row.acc_unknown_aware.0,
            row.acc_unknown_aware.1,
            row.acc_unknown_agnostic.0,
            row.acc_unknown_agnostic.1,
            row.prior_l1_error.0,
            row.prior_l1_error.1,
        ));
    }
    std::fs::write(config.out_dir.join("summary.csv"), summary)?;
    std::fs::write(config.out_dir.join("runs.csv"), runs_log)?;
    Ok(SweepSummary {
        rows,
        total_runs: total,
        failed_runs: failed,
    })
}

fn run_one(
    config: &ExperimentConfig,
    axis_index: usize,
    seed: u64,
    run_dir: &Path,
) -> Result<MetricsReport> {
    std::fs::create_dir_all(run_dir)?;
    let dataset = match &config.dataset {
        DatasetSource::Path(path) => load(path)?,
        DatasetSource::Spec(spec) => {
            let mut spec = spec.clone();
            spec.seed = seed;
            if let SweepAxis::Rho(rhos) = &config.axis {
                spec.rho = rhos[axis_index];
            }
            let dataset = generate(&spec)?;
            save(&dataset, &run_dir.join("dataset"))?;
            dataset
        }
    };
    let mut train_config = config.train.clone();
    train_config.seed = seed;
    if let SweepAxis::Ablation(modes) = &config.axis {
        modes[axis_index].apply(&mut train_config);
    }
    let outcome = train::<Scalar>(&dataset, &train_config, Some(run_dir))?;
    outcome
        .history
        .last()
        .cloned()
        .ok_or_else(|| anyhow::anyhow!("run produced no evaluation"))
}

/// Rebuilds the per-class count comparison of a finished run from its
/// stored predictions: `class,truth_count,predicted_count,abs_deviation`.
pub fn emit_figure_data(run_dir: &Path, out: &Path) -> Result<()> {
    let report_path = run_dir.join("report.json");
    let preds_path = run_dir.join("predictions.json");
    if !report_path.exists() || !preds_path.exists() {
        bail!("missing run artifacts under {}", run_dir.display());
    }
    let report: RunReport = serde_json::from_str(&std::fs::read_to_string(&report_path)?)
        .context("parsing report.json")?;
    let preds: Vec<usize> = serde_json::from_str(&std::fs::read_to_string(&preds_path)?)
        .context("parsing predictions.json")?;
    let counts = class_count_report(&preds, report.num_classes);
    let mut csv = String::from("class,truth_count,predicted_count,abs_deviation\n");
    for class in 0..report.num_classes {
        let truth = report.truth_unlabeled_counts[class];
        let predicted = counts[class];
        let dev = truth.abs_diff(predicted);
        csv.push_str(&format!("{class},{truth},{predicted},{dev}\n"));
    }
    std::fs::write(out, csv)?;
    Ok(())
}

/// Known-class set helper shared by the binary.
pub fn known_set(dataset: &otcd_core::data::Dataset) -> BTreeSet<usize> {
    dataset.known_classes.clone()
}
