//! `exitnet`: pretrain a backbone, attach and train exit branches, and sweep
//! the cost weight and the confidence threshold. Every subcommand reads the
//! same JSON experiment config; artifacts chain through the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use exitnet::checkpoint::{load_checkpoint, load_checkpoint_with_metadata, save_checkpoint_with, write_atomic};
use exitnet::config::ExperimentConfig;
use exitnet::data::Dataset;
use exitnet::error::{Error, Result};
use exitnet::flops::segment_costs;
use exitnet::harness::{
    assemble, backbone_graph, eval_csv, lambda_csv, prepare_data, pretrain_backbone, sweep_lambda, sweep_threshold,
    threshold_csv,
};
use exitnet::infer::{ExitPolicy, ExitRecords};
use exitnet::model::{Model, ModelGraph};
use exitnet::pretrain::accuracy;
use exitnet::train::{metrics_csv, train_branches};
use serde_json::{json, Value};

const BACKBONE: &str = "backbone.ckpt";
const ATTACHED: &str = "model.ckpt";
const TRAINED: &str = "trained.ckpt";

#[derive(Parser, Debug)]
#[command(name = "exitnet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (JSON); the built-in desk experiment when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the backbone on the training split and save `backbone.ckpt`.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Pretraining seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Place and initialize the branches on a pretrained backbone; saves `model.ckpt`.
    Attach {
        #[command(flatten)]
        common: Common,
        /// Branch initialization seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Backbone checkpoint [default: <out>/backbone.ckpt].
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Train the branches against the frozen backbone; saves `trained.ckpt`.
    TrainBranches {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        lambda: Option<f64>,
        /// Shuffling seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Attached model [default: <out>/model.ckpt].
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Early-exit evaluation on the validation split; writes `eval.csv`.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Thresholds to evaluate [default: the config grid].
        #[arg(long, value_delimiter = ',')]
        threshold: Vec<f64>,
        /// Trained model [default: <out>/trained.ckpt].
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Print the cost table as CSV.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Read the structure from a checkpoint instead of the config.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train once per lambda from the same initial branches; writes `lambda_sweep.csv`.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        /// Lambda grid [default: the config grid].
        #[arg(long, value_delimiter = ',')]
        lambda: Vec<f64>,
        /// Shuffling seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Backbone checkpoint [default: <out>/backbone.ckpt].
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Evaluate one trained model over a threshold grid; writes `threshold_sweep.csv`.
    SweepThreshold {
        #[command(flatten)]
        common: Common,
        /// Threshold grid [default: the config grid].
        #[arg(long, value_delimiter = ',')]
        threshold: Vec<f64>,
        /// Trained model [default: <out>/trained.ckpt].
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Run {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &common.out {
            cfg.output_dir = out.clone();
        }
        let out = cfg.output_dir.clone();
        fs::create_dir_all(&out).map_err(|source| Error::Io {
            path: out.clone(),
            source,
        })?;
        Ok(Self { cfg, out })
    }

    fn path(&self, explicit: &Option<PathBuf>, default: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out.join(default))
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        write_atomic(&path, text.as_bytes())?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    /// Provenance stored in checkpoints and run records.
    fn provenance(&self, command: &str) -> Value {
        json!({
            "command": command,
            "split_seed": self.cfg.split_seed,
            "train_fraction": self.cfg.train_fraction,
            "config": serde_json::to_value(&self.cfg).expect("config serializes"),
        })
    }

    /// `<command>.json` in the output directory: provenance plus results.
    fn record(&self, command: &str, results: Value) -> Result<()> {
        let mut v = self.provenance(command);
        v["results"] = results;
        self.write(&format!("{command}.json"), &serde_json::to_string_pretty(&v).expect("json"))?;
        Ok(())
    }

    fn save(&self, command: &str, name: &str, model: &Model) -> Result<PathBuf> {
        let path = self.out.join(name);
        save_checkpoint_with(&path, &model.graph, &model.params, self.provenance(command))?;
        log::info!("saved {}", path.display());
        Ok(path)
    }

    fn data(&self) -> Result<(Dataset, Dataset)> {
        let (train, val) = prepare_data(&self.cfg)?;
        log::info!(
            "{} training / {} validation samples (split seed {})",
            train.len(),
            val.len(),
            self.cfg.split_seed
        );
        Ok((train, val))
    }

    fn load(&self, path: &Path) -> Result<Model> {
        let (graph, params) = load_checkpoint(path)?;
        if graph.backbone.num_classes != self.cfg.num_classes {
            return Err(Error::Config(format!(
                "{} has {} classes but the config expects {}",
                path.display(),
                graph.backbone.num_classes,
                self.cfg.num_classes
            )));
        }
        Model::new(graph, params)
    }

    fn load_backbone(&self, path: &Path) -> Result<Model> {
        let m = self.load(path)?;
        if m.num_branches() != 0 {
            return Err(Error::InvalidArgument(format!("{} already has branches", path.display())));
        }
        Ok(m)
    }

    fn load_branched(&self, path: &Path) -> Result<Model> {
        let m = self.load(path)?;
        if m.num_branches() == 0 {
            return Err(Error::InvalidArgument(format!("{} has no branches", path.display())));
        }
        Ok(m)
    }

    fn thresholds(&self, given: &[f64]) -> Vec<f64> {
        if given.is_empty() { self.cfg.thresholds.clone() } else { given.to_vec() }
    }
}

fn pretrain(run: &mut Run, seed: Option<u64>) -> Result<()> {
    if let Some(s) = seed {
        run.cfg.pretrain.seed = s;
    }
    let (train, val) = run.data()?;
    let (graph, out) = pretrain_backbone(&run.cfg, &train)?;
    let val_acc = accuracy(&graph, &out.params, &val)?;
    log::info!("backbone validation accuracy {val_acc:.4}");
    let model = Model::new(ModelGraph::backbone_only(graph), out.params)?;
    run.save("pretrain", BACKBONE, &model)?;
    run.record("pretrain", json!({ "validation_accuracy": val_acc, "epochs": out.metrics }))
}

fn attach(run: &mut Run, seed: Option<u64>, backbone: &Option<PathBuf>) -> Result<()> {
    if let Some(s) = seed {
        run.cfg.seed = s;
    }
    let base = run.load_backbone(&run.path(backbone, BACKBONE))?;
    let (model, plan) = assemble(&run.cfg, &base.graph.backbone, &base.params)?;
    let table = model.graph.cost_table()?;
    run.save("attach", ATTACHED, &model)?;
    run.write("flops.csv", &table.to_csv())?;
    run.record("attach", json!({ "placement": plan, "relative_costs": table.relative_costs() }))
}

fn train(run: &mut Run, lambda: Option<f64>, seed: Option<u64>, model: &Option<PathBuf>) -> Result<()> {
    if let Some(l) = lambda {
        run.cfg.train.lambda = l;
    }
    if let Some(s) = seed {
        run.cfg.train.seed = s;
    }
    run.cfg.validate()?;
    let init = run.load_branched(&run.path(model, ATTACHED))?;
    let (train, _) = run.data()?;
    let out = train_branches(&init, &train, &run.cfg.train)?;
    run.save("train-branches", TRAINED, &out.model)?;
    run.write("train_metrics.csv", &metrics_csv(&out.metrics, out.model.num_branches()))?;
    run.record("train-branches", json!({ "lambda": run.cfg.train.lambda, "epochs": out.metrics.len() }))
}

fn eval(run: &Run, thresholds: &[f64], model: &Option<PathBuf>) -> Result<()> {
    let model = run.load_branched(&run.path(model, TRAINED))?;
    let (_, val) = run.data()?;
    let grid = exitnet::harness::threshold_grid(&run.thresholds(thresholds))?;
    let records = ExitRecords::compute(&model, &val)?;
    let reports = grid
        .iter()
        .map(|t| records.report(&ExitPolicy::single(*t)?))
        .collect::<Result<Vec<_>>>()?;
    let csv = eval_csv(&reports)?;
    run.write("eval.csv", &csv)?;
    print!("{csv}");
    run.record("eval", json!({ "reports": reports }))
}

fn flops(run: &Run, model: &Option<PathBuf>) -> Result<()> {
    let table = match model {
        Some(p) => load_checkpoint_with_metadata(p)?.0.graph.cost_table()?,
        None => {
            let (train, _) = run.data()?;
            let graph = backbone_graph(&run.cfg, &train.sample_shape)?;
            let plan = exitnet::flops::place_branches(&graph, run.cfg.distribution, run.cfg.branches.count)?;
            segment_costs(&graph, &plan.attach_points, &run.cfg.branches.specs(run.cfg.num_classes))?
        }
    };
    print!("{}", table.to_csv());
    Ok(())
}

fn lambda_sweep(run: &mut Run, lambdas: &[f64], seed: Option<u64>, backbone: &Option<PathBuf>) -> Result<()> {
    if !lambdas.is_empty() {
        run.cfg.lambdas = lambdas.to_vec();
    }
    if let Some(s) = seed {
        run.cfg.train.seed = s;
    }
    run.cfg.validate()?;
    let base = run.load_backbone(&run.path(backbone, BACKBONE))?;
    let (init, _) = assemble(&run.cfg, &base.graph.backbone, &base.params)?;
    let (train, val) = run.data()?;
    let sweep = sweep_lambda(&init, &train, &val, &run.cfg.train, &run.cfg.lambdas)?;
    let mut saved = Vec::new();
    for (row, model) in sweep.rows.iter().zip(&sweep.models) {
        if let Some(m) = model {
            let name = format!("lambda_{}.ckpt", row.lambda);
            run.save("sweep-lambda", &name, m)?;
            saved.push(name);
        }
    }
    let csv = lambda_csv(&sweep.rows)?;
    run.write("lambda_sweep.csv", &csv)?;
    print!("{csv}");
    run.record("sweep-lambda", json!({ "rows": sweep.rows, "checkpoints": saved }))
}

fn threshold_sweep(run: &Run, thresholds: &[f64], model: &Option<PathBuf>) -> Result<()> {
    let model = run.load_branched(&run.path(model, TRAINED))?;
    let (_, val) = run.data()?;
    let rows = sweep_threshold(&model, &val, &run.thresholds(thresholds))?;
    let csv = threshold_csv(&rows)?;
    run.write("threshold_sweep.csv", &csv)?;
    print!("{csv}");
    run.record("sweep-threshold", json!({ "rows": rows }))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, seed } => pretrain(&mut Run::new(&common)?, seed),
        Command::Attach { common, seed, backbone } => attach(&mut Run::new(&common)?, seed, &backbone),
        Command::TrainBranches {
            common,
            lambda,
            seed,
            model,
        } => train(&mut Run::new(&common)?, lambda, seed, &model),
        Command::Eval {
            common,
            threshold,
            model,
        } => eval(&Run::new(&common)?, &threshold, &model),
        Command::Flops { common, model } => flops(&Run::new(&common)?, &model),
        Command::SweepLambda {
            common,
            lambda,
            seed,
            backbone,
        } => lambda_sweep(&mut Run::new(&common)?, &lambda, seed, &backbone),
        Command::SweepThreshold {
            common,
            threshold,
            model,
        } => threshold_sweep(&Run::new(&common)?, &threshold, &model),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // one line, JSON-quoted message: `error kind=<tag> message="..."`
            eprintln!("error kind={} message={}", e.kind(), Value::String(e.to_string()));
            ExitCode::FAILURE
        }
    }
}
