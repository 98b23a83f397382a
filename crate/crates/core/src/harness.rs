//! The experiment pipeline and the lambda / threshold sweeps.

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::flops::{place_branches, PlacementPlan};
use crate::graph::{build_backbone, NetworkGraph};
use crate::infer::{EvalReport, ExitPolicy, ExitRecords};
use crate::model::{attach, Model};
use crate::params::ParameterStore;
use crate::pretrain::{pretrain, PretrainOutcome};
use crate::train::{train_branches, TrainConfig};

/// Threshold used to evaluate each lambda.
pub const SWEEP_THRESHOLD: f64 = 0.5;

/// Loads the configured dataset and splits it into (train, validation).
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let data = load_dataset(&cfg.dataset)?;
    if data.num_classes != cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the experiment expects {}",
            data.num_classes, cfg.num_classes
        )));
    }
    data.split(cfg.train_fraction, cfg.split_seed)
}

pub fn backbone_graph(cfg: &ExperimentConfig, sample_shape: &[usize]) -> Result<NetworkGraph> {
    build_backbone(&cfg.architecture, cfg.num_classes, sample_shape)
}

pub fn pretrain_backbone(cfg: &ExperimentConfig, train: &Dataset) -> Result<(NetworkGraph, PretrainOutcome)> {
    let graph = backbone_graph(cfg, &train.sample_shape)?;
    let out = pretrain(&graph, train, &cfg.pretrain)?;
    Ok((graph, out))
}

/// Places the configured branches and attaches them, freshly initialized.
pub fn assemble(cfg: &ExperimentConfig, graph: &NetworkGraph, params: &ParameterStore) -> Result<(Model, PlacementPlan)> {
    let plan = place_branches(graph, cfg.distribution, cfg.branches.count)?;
    let specs = cfg.branches.specs(cfg.num_classes);
    let model = attach(graph, params, &plan.attach_points, &specs, cfg.seed)?;
    Ok((model, plan))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Failed,
}

/// One lambda of the sweep. Accuracy is measured against the backbone's own
/// predictions; metric fields are empty for failed rows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub accuracy_vs_backbone: Option<f64>,
    pub avg_relative_cost: Option<f64>,
    pub cost_reduction: Option<f64>,
    pub accuracy_vs_true: Option<f64>,
    pub avg_relative_cost_segment: Option<f64>,
    pub cost_reduction_segment: Option<f64>,
    /// Mean cumulative cost of the first exit in the last training epoch.
    pub train_mean_c0: Option<f64>,
    pub status: RowStatus,
    pub error: Option<String>,
}

impl LambdaRow {
    fn ok(lambda: f64, r: &EvalReport, c0: f64) -> Self {
        Self {
            lambda,
            accuracy_vs_backbone: Some(r.accuracy_vs_pseudo),
            avg_relative_cost: Some(r.avg_relative_cost),
            cost_reduction: Some(r.cost_reduction),
            accuracy_vs_true: r.accuracy_vs_true,
            avg_relative_cost_segment: Some(r.avg_relative_cost_segment),
            cost_reduction_segment: Some(r.cost_reduction_segment),
            train_mean_c0: Some(c0),
            status: RowStatus::Ok,
            error: None,
        }
    }

    fn failed(lambda: f64, err: &Error) -> Self {
        Self {
            lambda,
            accuracy_vs_backbone: None,
            avg_relative_cost: None,
            cost_reduction: None,
            accuracy_vs_true: None,
            avg_relative_cost_segment: None,
            cost_reduction_segment: None,
            train_mean_c0: None,
            status: RowStatus::Failed,
            error: Some(err.to_string()),
        }
    }
}

pub struct LambdaSweep {
    pub rows: Vec<LambdaRow>,
    /// Trained model per row, `None` where training failed.
    pub models: Vec<Option<Model>>,
}

/// Trains the branches of `model` once per lambda, always from the same
/// initial parameters, and evaluates each result at T = 0.5 on `eval`.
/// Rows come back sorted by lambda; a failed run is recorded and skipped.
pub fn sweep_lambda(
    model: &Model,
    train: &Dataset,
    eval: &Dataset,
    base: &TrainConfig,
    lambdas: &[f64],
) -> Result<LambdaSweep> {
    if lambdas.is_empty() {
        return Err(Error::invalid("lambda grid is empty"));
    }
    let mut grid = lambdas.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let policy = ExitPolicy::Single(SWEEP_THRESHOLD);
    let mut rows = Vec::with_capacity(grid.len());
    let mut models = Vec::with_capacity(grid.len());
    for lambda in grid {
        let cfg = TrainConfig { lambda, ..base.clone() };
        let run = train_branches(model, train, &cfg).and_then(|out| {
            let c0 = out.metrics.last().map_or(f64::NAN, |m| m.cost[0]);
            let report = ExitRecords::compute(&out.model, eval)?.report(&policy)?;
            Ok((out.model, report, c0))
        });
        match run {
            Ok((trained, report, c0)) => {
                log::info!(
                    "lambda {lambda}: accuracy {:.4} relative cost {:.4}",
                    report.accuracy_vs_pseudo,
                    report.avg_relative_cost
                );
                rows.push(LambdaRow::ok(lambda, &report, c0));
                models.push(Some(trained));
            }
            Err(e) => {
                log::warn!("lambda {lambda} failed: {e}");
                rows.push(LambdaRow::failed(lambda, &e));
                models.push(None);
            }
        }
    }
    Ok(LambdaSweep { rows, models })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub accuracy_vs_backbone: f64,
    pub avg_relative_cost: f64,
    pub cost_reduction: f64,
    pub accuracy_vs_true: Option<f64>,
    pub avg_relative_cost_segment: f64,
    pub cost_reduction_segment: f64,
}

/// Sorted, deduplicated copy of a threshold grid; duplicates are logged.
pub fn threshold_grid(thresholds: &[f64]) -> Result<Vec<f64>> {
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::invalid(format!("threshold {t} outside [0, 1]")));
    }
    let mut grid = thresholds.to_vec();
    grid.sort_by(f64::total_cmp);
    let before = grid.len();
    grid.dedup();
    if grid.len() < before {
        log::warn!("dropped {} duplicate threshold(s)", before - grid.len());
    }
    Ok(grid)
}

/// Evaluates one trained model at every threshold. The forward pass runs
/// once; each threshold only replays the exit decisions.
pub fn sweep_threshold(model: &Model, data: &Dataset, thresholds: &[f64]) -> Result<Vec<ThresholdRow>> {
    let grid = threshold_grid(thresholds)?;
    let records = ExitRecords::compute(model, data)?;
    sweep_threshold_records(&records, &grid)
}

pub fn sweep_threshold_records(records: &ExitRecords, thresholds: &[f64]) -> Result<Vec<ThresholdRow>> {
    threshold_grid(thresholds)?
        .into_iter()
        .map(|t| {
            let r = records.report(&ExitPolicy::Single(t))?;
            Ok(ThresholdRow {
                threshold: t,
                accuracy_vs_backbone: r.accuracy_vs_pseudo,
                avg_relative_cost: r.avg_relative_cost,
                cost_reduction: r.cost_reduction,
                accuracy_vs_true: r.accuracy_vs_true,
                avg_relative_cost_segment: r.avg_relative_cost_segment,
                cost_reduction_segment: r.cost_reduction_segment,
            })
        })
        .collect()
}

/// Serializes rows as CSV with a header line, even when there are no rows.
pub fn to_csv<R: Serialize>(rows: &[R], header: &[&str]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub const LAMBDA_HEADER: [&str; 10] = [
    "lambda",
    "accuracy_vs_backbone",
    "avg_relative_cost",
    "cost_reduction",
    "accuracy_vs_true",
    "avg_relative_cost_segment",
    "cost_reduction_segment",
    "train_mean_c0",
    "status",
    "error",
];

pub const THRESHOLD_HEADER: [&str; 7] = [
    "threshold",
    "accuracy_vs_backbone",
    "avg_relative_cost",
    "cost_reduction",
    "accuracy_vs_true",
    "avg_relative_cost_segment",
    "cost_reduction_segment",
];

pub fn lambda_csv(rows: &[LambdaRow]) -> Result<String> {
    to_csv(rows, &LAMBDA_HEADER)
}

pub fn threshold_csv(rows: &[ThresholdRow]) -> Result<String> {
    to_csv(rows, &THRESHOLD_HEADER)
}

/// One row per report: threshold, both accuracies, executed cost, and the
/// exit histogram as `exit_0_count, .., exit_main_count`.
pub fn eval_csv(reports: &[EvalReport]) -> Result<String> {
    let exits = reports.first().map_or(0, |r| r.exit_histogram.len());
    if reports.iter().any(|r| r.exit_histogram.len() != exits) {
        return Err(Error::invalid("reports disagree on the number of exits"));
    }
    let mut header: Vec<String> = ["threshold", "accuracy_vs_pseudo", "accuracy_vs_true", "avg_relative_cost", "cost_reduction"]
        .map(String::from)
        .to_vec();
    header.extend((0..exits.saturating_sub(1)).map(|i| format!("exit_{i}_count")));
    if exits > 0 {
        header.push("exit_main_count".into());
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for r in reports {
        let mut row = vec![
            r.policy.label(),
            r.accuracy_vs_pseudo.to_string(),
            r.accuracy_vs_true.map(|a| a.to_string()).unwrap_or_default(),
            r.avg_relative_cost.to_string(),
            r.cost_reduction.to_string(),
        ];
        row.extend(r.exit_histogram.iter().map(|c| c.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
