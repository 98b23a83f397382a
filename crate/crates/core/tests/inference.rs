mod common;

use std::sync::OnceLock;

use exitnet::branch::BranchSpec;
use exitnet::data::{synthetic_blobs, BlobConfig, Dataset};
use exitnet::graph::{build_backbone, Architecture};
use exitnet::infer::{evaluate, infer, ExitPolicy, ExitRecords};
use exitnet::model::{attach, Model};
use exitnet::tensor::argmax;
use exitnet::train::hard_composition;
use proptest::prelude::*;

fn untrained() -> &'static (Model, Dataset) {
    static CELL: OnceLock<(Model, Dataset)> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut cfg = BlobConfig::new(200, 10, 21);
        cfg.image_size = 8;
        let data = synthetic_blobs(&cfg).unwrap();
        let g = build_backbone(&Architecture::Resnet { depth: 8 }, 10, &[3, 8, 8]).unwrap();
        let p = g.init_params(4).unwrap();
        let model = attach(&g, &p, &[0, 1, 2], &vec![BranchSpec::with_width(2, 4, 10); 3], 5).unwrap();
        (model, data)
    })
}

#[test]
fn early_exit_matches_brute_force_composition() {
    let (model, data) = untrained();
    let table = model.graph.cost_table().unwrap();
    let all = model.forward_all(&data.batch(&(0..data.len()).collect::<Vec<_>>())).unwrap();
    let k = 10;
    let policy = ExitPolicy::Single(0.5);
    let mut hist = vec![0u64; table.exits.len()];
    let mut flops = 0u64;
    for i in 0..data.len() {
        let t = infer(model, &table, &data.batch(&[i]), &policy).unwrap();
        let fires: Vec<bool> = all.h.iter().map(|h| policy.fires(0, h[i])).collect();
        let y: Vec<Vec<f64>> = all
            .y_hat
            .iter()
            .map(|y| y.data()[i * k..(i + 1) * k].iter().map(|v| *v as f64).collect())
            .collect();
        let main: Vec<f64> = all.main.data()[i * k..(i + 1) * k].iter().map(|v| *v as f64).collect();
        assert_eq!(t.predicted_class, argmax(&hard_composition(&fires, &y, &main)), "sample {i}");
        assert_eq!(t.exit_index, fires.iter().position(|f| *f).unwrap_or(3));
        hist[t.exit_index] += 1;
        flops += t.flops_consumed;
    }
    let weighted: u64 = hist.iter().zip(&table.exits).map(|(c, e)| c * e.executed_flops).sum();
    assert_eq!(flops, weighted);
    assert!(hist.iter().filter(|c| **c > 0).count() >= 2, "{hist:?}");
}

#[test]
fn unit_threshold_reproduces_backbone() {
    let (model, data) = untrained();
    let r = evaluate(model, data, &ExitPolicy::Single(1.0)).unwrap();
    assert_eq!(r.accuracy_vs_pseudo, 1.0);
    assert_eq!(*r.exit_histogram.last().unwrap(), data.len());
    assert_eq!(r.avg_relative_cost_segment, 1.0);
    let backbone = exitnet::pretrain::accuracy(model.backbone(), &model.params, data).unwrap();
    assert_eq!(r.accuracy_vs_true, Some(backbone));
}

#[test]
fn per_exit_thresholds_gate_each_exit() {
    let (model, data) = untrained();
    let rec = ExitRecords::compute(model, data).unwrap();
    let r = rec.report(&ExitPolicy::PerExit(vec![1.0, 0.0, 1.0])).unwrap();
    assert_eq!(r.exit_histogram, vec![0, data.len(), 0, 0]);
    assert!(rec.report(&ExitPolicy::PerExit(vec![0.5; 2])).is_err());
}

#[test]
fn confidences_are_strictly_inside_unit_interval() {
    let (model, data) = untrained();
    let all = model.forward_all(&data.batch(&(0..data.len()).collect::<Vec<_>>())).unwrap();
    assert!(all.h.iter().flatten().all(|h| *h > 0.0 && *h < 1.0));
    for y in &all.y_hat {
        for row in y.data().chunks(10) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raising_the_threshold_never_exits_earlier(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (model, data) = untrained();
        static REC: OnceLock<ExitRecords> = OnceLock::new();
        let rec = REC.get_or_init(|| ExitRecords::compute(model, data).unwrap());
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        for i in 0..data.len() {
            let (x, y) = (rec.trace(i, &ExitPolicy::Single(lo)), rec.trace(i, &ExitPolicy::Single(hi)));
            prop_assert!(x.exit_index <= y.exit_index);
            prop_assert!(x.flops_consumed <= y.flops_consumed);
        }
        let (rl, rh) = (rec.report(&ExitPolicy::Single(lo)).unwrap(), rec.report(&ExitPolicy::Single(hi)).unwrap());
        prop_assert!(rl.avg_relative_cost <= rh.avg_relative_cost);
    }
}
