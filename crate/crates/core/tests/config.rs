use exitnet::config::ExperimentConfig;
use exitnet::data::{BlobConfig, DatasetSource};
use exitnet::flops::DistributionMethod;
use exitnet::graph::Architecture;
use exitnet::train::CostRecursion;
use proptest::prelude::*;

#[test]
fn file_errors_name_the_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.json");
    std::fs::write(&path, "{\n\"seed\": 3,\n\"branchez\": {}\n}").unwrap();
    let msg = ExperimentConfig::load(&path).unwrap_err().to_string();
    assert!(msg.contains("exp.json") && msg.contains("branchez") && msg.contains("line 3"), "{msg}");
}

#[test]
fn file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.json");
    let cfg = ExperimentConfig::default();
    std::fs::write(&path, cfg.to_json()).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parse_serialize_parse_is_identity(
        depth in prop::sample::select(vec![8usize, 14, 20, 110]),
        method in prop::sample::select(vec![DistributionMethod::Fine, DistributionMethod::Pareto, DistributionMethod::Golden, DistributionMethod::Linear]),
        lambdas in prop::collection::vec(0.0f64..10.0, 1..5),
        thresholds in prop::collection::vec(0.0f64..=1.0, 0..12),
        width in prop::option::of(1usize..64),
        lr in 1e-4f32..1.0,
        seed in any::<u64>(),
        literal in any::<bool>(),
        fraction in 0.05f64..0.95,
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.architecture = Architecture::Resnet { depth };
        cfg.distribution = method;
        cfg.lambdas = lambdas;
        cfg.thresholds = thresholds;
        cfg.branches.width = width;
        cfg.train.learning_rate = lr;
        cfg.train.cost_recursion = if literal { CostRecursion::Literal } else { CostRecursion::Recursive };
        cfg.seed = seed;
        cfg.train_fraction = fraction;
        cfg.dataset = DatasetSource::SyntheticBlobs(BlobConfig::new(50, 10, seed));
        let text = cfg.to_json();
        let back = ExperimentConfig::from_json(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_json(), text);
    }
}
