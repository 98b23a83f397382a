mod common;

use common::{tiny_blobs, tiny_model};
use exitnet::config::ExperimentConfig;
use exitnet::data::{BlobConfig, DatasetSource};
use exitnet::harness::{
    assemble, lambda_csv, prepare_data, pretrain_backbone, sweep_lambda, sweep_threshold, threshold_csv, RowStatus,
    LAMBDA_HEADER,
};
use exitnet::pretrain::accuracy;
use exitnet::train::TrainConfig;

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 16,
        seed: 2,
        ..Default::default()
    }
}

#[test]
fn single_lambda_gives_single_row() {
    let d = tiny_blobs(64, 4, 1);
    let model = tiny_model(&d);
    let s = sweep_lambda(&model, &d, &d, &quick(), &[0.9]).unwrap();
    let csv = lambda_csv(&s.rows).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(csv.lines().next().unwrap(), LAMBDA_HEADER.join(","));
    assert!(sweep_lambda(&model, &d, &d, &quick(), &[]).is_err());
}

#[test]
fn failed_lambda_is_marked_and_sweep_continues() {
    let d = tiny_blobs(64, 4, 2);
    let model = tiny_model(&d);
    // the cost term overflows f32 for this lambda
    let s = sweep_lambda(&model, &d, &d, &quick(), &[1e39, 0.5]).unwrap();
    assert_eq!(s.rows.iter().map(|r| r.lambda).collect::<Vec<_>>(), vec![0.5, 1e39]);
    assert_eq!(s.rows[0].status, RowStatus::Ok);
    assert_eq!(s.rows[1].status, RowStatus::Failed);
    assert!(s.models[0].is_some() && s.models[1].is_none());
    let csv = lambda_csv(&s.rows).unwrap();
    assert!(csv.lines().nth(2).unwrap().contains(",failed,"));
}

#[test]
fn threshold_sweep_dedups_and_ends_at_backbone() {
    let d = tiny_blobs(64, 4, 3);
    let model = tiny_model(&d);
    let trained = exitnet::train::train_branches(&model, &d, &quick()).unwrap().model;
    let rows = sweep_threshold(&trained, &d, &[0.5, 0.1, 0.5, 1.0]).unwrap();
    assert_eq!(rows.iter().map(|r| r.threshold).collect::<Vec<_>>(), vec![0.1, 0.5, 1.0]);
    let last = rows.last().unwrap();
    assert_eq!(last.accuracy_vs_backbone, 1.0);
    assert_eq!(last.accuracy_vs_true, Some(accuracy(trained.backbone(), &trained.params, &d).unwrap()));
    assert!(sweep_threshold(&trained, &d, &[-0.1]).is_err());
}

fn tiny_config() -> ExperimentConfig {
    let mut blobs = BlobConfig::new(120, 4, 5);
    blobs.image_size = 8;
    let mut cfg = ExperimentConfig {
        num_classes: 4,
        dataset: DatasetSource::SyntheticBlobs(blobs),
        lambdas: vec![0.2, 2.3],
        thresholds: vec![0.3, 0.6, 1.0],
        ..Default::default()
    };
    cfg.branches.width = Some(4);
    cfg.pretrain.epochs = 1;
    cfg.train.epochs = 1;
    cfg
}

fn run(cfg: &ExperimentConfig) -> (String, String) {
    let (train, val) = prepare_data(cfg).unwrap();
    let (graph, pre) = pretrain_backbone(cfg, &train).unwrap();
    let (model, _) = assemble(cfg, &graph, &pre.params).unwrap();
    let sweep = sweep_lambda(&model, &train.without_labels(), &val, &cfg.train, &cfg.lambdas).unwrap();
    let trained = sweep.models[0].as_ref().unwrap();
    let rows = sweep_threshold(trained, &val, &cfg.thresholds).unwrap();
    (lambda_csv(&sweep.rows).unwrap(), threshold_csv(&rows).unwrap())
}

#[test]
fn pipeline_is_byte_for_byte_deterministic() {
    let cfg = tiny_config();
    let a = run(&cfg);
    assert_eq!(a, run(&cfg));
    assert_eq!(a.0.lines().count(), 3);
    assert_eq!(a.1.lines().count(), 4);
}
