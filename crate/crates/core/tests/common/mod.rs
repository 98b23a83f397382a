//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use exitnet::autodiff::Tape;
use exitnet::branch::BranchSpec;
use exitnet::graph::{Block, NetworkGraph};
use exitnet::layer::{Layer, LayerSpec, Mode};
use exitnet::model::{attach, Model};
use exitnet::params::ParameterStore;
use exitnet::train::{record_model_loss, CostRecursion};
use exitnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stem conv plus two conv-bn-relu blocks of width `c` on `[1, size, size]`, K = 3.
pub fn two_block_backbone(c: usize, size: usize) -> NetworkGraph {
    let block = |i: usize| Block::Sequential {
        layers: vec![
            Layer::new(format!("backbone.block{i}.0"), LayerSpec::conv3x3(c, c, 1)),
            Layer::new(format!("backbone.block{i}.1"), LayerSpec::BatchNorm2d { channels: c }),
            Layer::new(format!("backbone.block{i}.2"), LayerSpec::Relu),
        ],
    };
    NetworkGraph::new(
        "two-block",
        vec![1, size, size],
        3,
        vec![
            Layer::new("backbone.stem.0", LayerSpec::conv3x3(1, c, 1)),
            Layer::new("backbone.stem.1", LayerSpec::Relu),
        ],
        vec![block(0), block(1)],
        vec![
            Layer::new("backbone.classifier.0", LayerSpec::GlobalAvgPool),
            Layer::new(
                "backbone.classifier.1",
                LayerSpec::Linear {
                    in_features: c,
                    out_features: 3,
                },
            ),
            Layer::new("backbone.classifier.2", LayerSpec::Softmax),
        ],
    )
    .unwrap()
}

/// Conv2 branch of the given width after the first block.
pub fn gradcheck_model(c: usize, size: usize, width: usize, seed: u64) -> Model {
    let g = two_block_backbone(c, size);
    let p = g.init_params(seed).unwrap();
    attach(&g, &p, &[1], &[BranchSpec::with_width(2, width, 3)], seed + 1).unwrap()
}

pub fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
    pub backbone_nonzero: usize,
    pub branch_params: usize,
}

fn loss_and_grads(
    model: &Model,
    store: &mut ParameterStore<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    costs: &[f64],
    lambda: f64,
    mode: Mode,
    backward: bool,
) -> f64 {
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let vars = record_model_loss(
        &mut tape,
        &model.graph,
        store,
        xv,
        labels,
        costs,
        lambda,
        CostRecursion::Recursive,
        mode,
    )
    .unwrap();
    let loss = tape.value(vars.loss).data()[0];
    if backward {
        store.zero_grad();
        tape.backward(vars.loss, store).unwrap();
    }
    loss
}

/// Central differences with `step` against the analytic gradient of the
/// branch loss, in f64. A coordinate passes when the relative error is
/// below 1e-3.
pub fn gradient_check(model: &Model, batch: usize, lambda: f64, step: f64, mode: Mode, seed: u64) -> GradCheck {
    let mut store: ParameterStore<f64> = model.params.cast();
    let mut shape = vec![batch];
    shape.extend_from_slice(&model.graph.backbone.input_shape);
    let x = random_input(&shape, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let k = model.graph.backbone.num_classes;
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..k)).collect();
    let costs = model.graph.cost_table().unwrap().relative_costs();

    loss_and_grads(model, &mut store, &x, &labels, &costs, lambda, mode, true);
    let analytic = store.clone();
    let mut backbone_nonzero = 0;
    let mut names = Vec::new();
    for (name, e) in analytic.params() {
        if name.starts_with("backbone.") {
            backbone_nonzero += e.tensor.grad.as_ref().map_or(0, |g| g.iter().filter(|v| **v != 0.0).count());
        } else {
            names.push(name.to_string());
        }
    }
    let (mut checked, mut passed, mut worst) = (0, 0, 0.0f64);
    let mut branch_params = 0;
    for name in &names {
        let grad = analytic.entry(name).unwrap().tensor.grad.clone().unwrap_or_default();
        let len = analytic.tensor(name).unwrap().len();
        branch_params += len;
        for i in 0..len {
            let orig = store.tensor(name).unwrap().data()[i];
            store.entry_mut(name).unwrap().tensor.data_mut()[i] = orig + step;
            let up = loss_and_grads(model, &mut store, &x, &labels, &costs, lambda, mode, false);
            store.entry_mut(name).unwrap().tensor.data_mut()[i] = orig - step;
            let down = loss_and_grads(model, &mut store, &x, &labels, &costs, lambda, mode, false);
            store.entry_mut(name).unwrap().tensor.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.get(i).copied().unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            checked += 1;
            if rel < 1e-3 {
                passed += 1;
            }
            worst = worst.max(rel);
        }
    }
    GradCheck {
        checked,
        passed,
        worst,
        backbone_nonzero,
        branch_params,
    }
}

/// Small labelled blobs: `n` samples, 3x8x8, `k` classes.
pub fn tiny_blobs(n: usize, k: usize, seed: u64) -> exitnet::data::Dataset {
    let mut cfg = exitnet::data::BlobConfig::new(n, k, seed);
    cfg.image_size = 8;
    exitnet::data::synthetic_blobs(&cfg).unwrap()
}

/// ResNet-8 on [`tiny_blobs`], briefly pretrained, with three Conv2 width-4
/// branches at Fine placement.
pub fn tiny_model(data: &exitnet::data::Dataset) -> Model {
    use exitnet::flops::{place_branches, DistributionMethod};
    use exitnet::graph::{build_backbone, Architecture};
    use exitnet::pretrain::{pretrain, PretrainConfig};
    let g = build_backbone(&Architecture::Resnet { depth: 8 }, data.num_classes, &data.sample_shape).unwrap();
    let cfg = PretrainConfig {
        epochs: 2,
        seed: 1,
        ..Default::default()
    };
    let p = pretrain(&g, data, &cfg).unwrap().params;
    let plan = place_branches(&g, DistributionMethod::Fine, 3).unwrap();
    let specs = vec![BranchSpec::with_width(2, 4, data.num_classes); 3];
    attach(&g, &p, &plan.attach_points, &specs, 9).unwrap()
}

/// Order-sensitive digest of every array whose name starts with `prefix`.
pub fn digest(store: &ParameterStore, prefix: &str) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for (name, e) in store.params() {
        if name.starts_with(prefix) {
            name.hash(&mut h);
            e.tensor.data().iter().for_each(|v| v.to_bits().hash(&mut h));
        }
    }
    for (name, t) in store.buffers() {
        if name.starts_with(prefix) {
            name.hash(&mut h);
            t.data().iter().for_each(|v| v.to_bits().hash(&mut h));
        }
    }
    h.finish()
}
