//! Branch training against a frozen backbone.
//!
//! Exit `n` gets the cumulative prediction `Y_n = h_n y_n + (1 - h_n) Y_{n+1}`
//! and cumulative cost `C_n = h_n c_n + (1 - h_n) C_{n+1}`, anchored at the
//! backbone classifier (`Y_N = y_main`, `C_N = 1`). The loss summed over the
//! branch exits is `CE(Y_n) + lambda * C_n`, averaged over the batch, with
//! the backbone's own argmax standing in for labels.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, PROB_FLOOR};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flops::check_monotone;
use crate::graph::NetworkGraph;
use crate::layer::Mode;
use crate::model::{backbone_predict, backbone_taps, Model, ModelGraph};
use crate::optim::{apply_bn_updates, Sgd};
use crate::params::{ParameterStore, Scope};
use crate::tensor::{argmax, Scalar, Tensor};

/// Which term closes the cost recursion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostRecursion {
    /// `C_n = h_n c_n + (1 - h_n) C_{n+1}`.
    #[default]
    Recursive,
    /// `C_n = h_n c_n + (1 - h_n) c_{n+1}`: closes on the next exit's own cost.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
    pub seed: u64,
    #[serde(default)]
    pub cost_recursion: CostRecursion,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            cost_recursion: CostRecursion::Recursive,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Sgd::new(self.learning_rate, self.momentum).map(|_| ())
    }
}

/// Backbone argmax per sample (ties to the lowest class); labels are never read.
pub fn pseudo_labels(backbone: &NetworkGraph, params: &ParameterStore, x: &Tensor) -> Result<Vec<usize>> {
    let probs = backbone_predict(backbone, params, x)?;
    Ok(probs.data().chunks(backbone.num_classes).map(argmax).collect())
}

/// `Y_0 .. Y_{N-1}` for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CumulativePrediction {
    pub per_exit: Vec<Vec<f64>>,
}

fn check_gates(h: &[f64]) -> Result<()> {
    match h.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(bad) => Err(Error::invalid(format!("confidence {bad} outside [0, 1]"))),
        None => Ok(()),
    }
}

pub fn cumulative_prediction(h: &[f64], y_hat: &[Vec<f64>], y_main: &[f64]) -> Result<CumulativePrediction> {
    if h.len() != y_hat.len() {
        return Err(Error::invalid(format!("{} confidences but {} exit predictions", h.len(), y_hat.len())));
    }
    if let Some(y) = y_hat.iter().find(|y| y.len() != y_main.len()) {
        return Err(Error::invalid(format!("exit predicts {} classes, main {}", y.len(), y_main.len())));
    }
    check_gates(h)?;
    let mut per_exit = vec![Vec::new(); h.len()];
    let mut next = y_main.to_vec();
    for n in (0..h.len()).rev() {
        next = y_hat[n]
            .iter()
            .zip(&next)
            .map(|(a, b)| h[n] * a + (1.0 - h[n]) * b)
            .collect();
        per_exit[n] = next.clone();
    }
    Ok(CumulativePrediction { per_exit })
}

/// `C_0 .. C_{N-1}` from gates `h` and relative costs `c` (length `N + 1`,
/// strictly increasing, ending in exactly 1).
pub fn cumulative_cost(h: &[f64], c: &[f64], recursion: CostRecursion) -> Result<Vec<f64>> {
    if c.len() != h.len() + 1 {
        return Err(Error::invalid(format!("{} gates need {} costs, got {}", h.len(), h.len() + 1, c.len())));
    }
    check_costs(c)?;
    check_gates(h)?;
    let mut out = vec![0.0; h.len()];
    let mut next = 1.0;
    for n in (0..h.len()).rev() {
        let tail = match recursion {
            CostRecursion::Recursive => next,
            CostRecursion::Literal => c[n + 1],
        };
        next = h[n] * c[n] + (1.0 - h[n]) * tail;
        out[n] = next;
    }
    Ok(out)
}

fn check_costs(c: &[f64]) -> Result<()> {
    if c.last() != Some(&1.0) {
        return Err(Error::CostTable(format!("main exit must cost exactly 1, got {:?}", c.last())));
    }
    if c[0] <= 0.0 || c.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::CostTable(format!("relative costs {c:?} must be positive and strictly increasing")));
    }
    Ok(())
}

/// The hard composition: the first exit whose gate fires decides, otherwise
/// the main classifier. `fires[n]` is the 0/1 indicator for exit `n`.
pub fn hard_composition(fires: &[bool], y_hat: &[Vec<f64>], y_main: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; y_main.len()];
    let mut none_before = 1.0;
    for (n, y) in y_hat.iter().enumerate() {
        let ind = if fires[n] { 1.0 } else { 0.0 };
        for (o, v) in out.iter_mut().zip(y) {
            *o += none_before * ind * v;
        }
        none_before *= 1.0 - ind;
    }
    for (o, v) in out.iter_mut().zip(y_main) {
        *o += none_before * v;
    }
    out
}

/// Per-exit terms averaged over a batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub ce: Vec<f64>,
    pub cost: Vec<f64>,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn ce_sum(&self) -> f64 {
        self.ce.iter().sum()
    }

    pub fn cost_sum(&self) -> f64 {
        self.cost.iter().sum()
    }
}

/// Batch-mean loss from per-sample cumulative predictions and costs
/// (`cum_cost[sample][n]`).
pub fn total_loss(
    cum_pred: &[CumulativePrediction],
    labels: &[usize],
    cum_cost: &[Vec<f64>],
    lambda: f64,
) -> Result<LossBreakdown> {
    if cum_pred.len() != labels.len() || cum_cost.len() != labels.len() || labels.is_empty() {
        return Err(Error::invalid("loss inputs must share a non-zero batch size"));
    }
    let n_exits = cum_pred[0].per_exit.len();
    let b = labels.len() as f64;
    let mut ce = vec![0.0; n_exits];
    let mut cost = vec![0.0; n_exits];
    for ((p, &y), c) in cum_pred.iter().zip(labels).zip(cum_cost) {
        if p.per_exit.len() != n_exits || c.len() != n_exits {
            return Err(Error::invalid("every sample needs the same number of exits"));
        }
        for n in 0..n_exits {
            let py = *p.per_exit[n]
                .get(y)
                .ok_or_else(|| Error::invalid(format!("label {y} out of range")))?;
            ce[n] += -py.max(PROB_FLOOR).ln() / b;
            cost[n] += c[n] / b;
        }
    }
    let total = ce.iter().zip(&cost).map(|(l, c)| l + lambda * c).sum();
    Ok(LossBreakdown { ce, cost, lambda, total })
}

/// Tape handles for one recorded loss.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub loss: Var,
    /// `[batch, 1]` per exit.
    pub h: Vec<Var>,
    /// `[1]` batch-mean CE per exit.
    pub ce: Vec<Var>,
    /// `[1]` batch-mean cumulative cost per exit.
    pub cost: Vec<Var>,
}

/// Records the loss on `tape` given the backbone feature maps at each attach
/// point (`taps`) and the backbone output `main`.
#[allow(clippy::too_many_arguments)]
pub fn record_branch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    graph: &ModelGraph,
    store: &ParameterStore<T>,
    taps: &[Var],
    main: Var,
    labels: &[usize],
    costs: &[f64],
    lambda: f64,
    recursion: CostRecursion,
    mode: Mode,
) -> Result<LossVars> {
    let n_exits = graph.num_branches();
    if n_exits == 0 {
        return Err(Error::invalid("model has no branches to train"));
    }
    if taps.len() != n_exits || costs.len() != n_exits + 1 {
        return Err(Error::invalid("one feature map per branch and one cost per exit are required"));
    }
    check_costs(costs)?;
    let batch = labels.len();
    let mut h = Vec::with_capacity(n_exits);
    let mut y = Vec::with_capacity(n_exits);
    for (ab, &tap) in graph.branches.iter().zip(taps) {
        let (hv, yv) = ab.branch.forward(tape, tap, store, mode)?;
        h.push(hv);
        y.push(yv);
    }
    let column = |tape: &mut Tape<T>, v: f64| tape.constant(Tensor::full(&[batch, 1], T::lit(v)));

    let mut ce = vec![main; n_exits];
    let mut cost = vec![main; n_exits];
    let mut pred_next = main;
    let mut cost_next = column(tape, 1.0);
    for n in (0..n_exits).rev() {
        pred_next = tape.mix(h[n], y[n], pred_next)?;
        let per_sample = tape.cross_entropy(pred_next, labels)?;
        ce[n] = tape.mean(per_sample);

        let own = column(tape, costs[n]);
        let tail = match recursion {
            CostRecursion::Recursive => cost_next,
            CostRecursion::Literal => column(tape, costs[n + 1]),
        };
        cost_next = tape.mix(h[n], own, tail)?;
        cost[n] = tape.mean(cost_next);
    }
    let mut terms = ce.clone();
    for &c in &cost {
        terms.push(tape.scale(c, T::lit(lambda)));
    }
    let loss = tape.sum(&terms)?;
    Ok(LossVars { loss, h, ce, cost })
}

/// Records the full model (frozen backbone in inference mode, branches in
/// `mode`) from raw input and returns the loss handles.
#[allow(clippy::too_many_arguments)]
pub fn record_model_loss<T: Scalar>(
    tape: &mut Tape<T>,
    graph: &ModelGraph,
    store: &ParameterStore<T>,
    x: Var,
    labels: &[usize],
    costs: &[f64],
    lambda: f64,
    recursion: CostRecursion,
    mode: Mode,
) -> Result<LossVars> {
    let (taps, main) = backbone_taps(&graph.backbone, tape, x, store, &graph.attach_points())?;
    record_branch_loss(tape, graph, store, &taps, main, labels, costs, lambda, recursion, mode)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub total_loss: f64,
    pub ce: Vec<f64>,
    pub cost: Vec<f64>,
    pub mean_h: Vec<f64>,
}

impl TrainEpoch {
    pub fn ce_sum(&self) -> f64 {
        self.ce.iter().sum()
    }

    pub fn cost_sum(&self) -> f64 {
        self.cost.iter().sum()
    }
}

pub fn metrics_csv(metrics: &[TrainEpoch], num_exits: usize) -> String {
    let mut out = String::from("epoch,total_loss,ce_sum,cost_sum");
    for prefix in ["mean_h", "ce", "cost"] {
        for n in 0..num_exits {
            let _ = write!(out, ",{prefix}_{n}");
        }
    }
    out.push('\n');
    for m in metrics {
        let _ = write!(out, "{},{},{},{}", m.epoch, m.total_loss, m.ce_sum(), m.cost_sum());
        for v in m.mean_h.iter().chain(&m.ce).chain(&m.cost) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<TrainEpoch>,
}

/// Backbone outputs that do not change while the branches train.
struct FeatureCache {
    /// Per attach point: flat `[samples, c, h, w]` and per-sample shape.
    taps: Vec<(Vec<f32>, Vec<usize>)>,
    main: Vec<f32>,
    labels: Vec<usize>,
}

impl FeatureCache {
    fn build(model: &Model, data: &Dataset) -> Result<Self> {
        let graph = &model.graph;
        let points = graph.attach_points();
        let shapes = graph.backbone.boundary_shapes()?;
        let mut taps: Vec<(Vec<f32>, Vec<usize>)> = points.iter().map(|&p| (Vec::new(), shapes[p].clone())).collect();
        let mut main = Vec::with_capacity(data.len() * graph.backbone.num_classes);
        let all: Vec<usize> = (0..data.len()).collect();
        for idx in all.chunks(128) {
            let mut tape = Tape::new();
            let x = tape.constant(data.batch(idx));
            let (vars, m) = backbone_taps(&graph.backbone, &mut tape, x, &model.params, &points)?;
            for (slot, v) in taps.iter_mut().zip(vars) {
                slot.0.extend_from_slice(tape.value(v).data());
            }
            main.extend_from_slice(tape.value(m).data());
        }
        let labels = main.chunks(graph.backbone.num_classes).map(argmax).collect();
        Ok(Self { taps, main, labels })
    }

    fn gather(&self, flat: &[f32], per: usize, shape: &[usize], idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&flat[i * per..(i + 1) * per]);
        }
        let mut full = vec![idx.len()];
        full.extend_from_slice(shape);
        Tensor::new(full, data).expect("cached shapes")
    }
}

/// Trains every branch parameter of `model` on `data` (labels unused).
/// Backbone arrays and statistics are left bit-identical.
pub fn train_branches(model: &Model, data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if model.num_branches() == 0 {
        return Err(Error::invalid("model has no branches to train"));
    }
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let table = model.graph.cost_table()?;
    check_monotone(&table)?;
    let costs = table.relative_costs();

    let mut params = model.params.clone();
    params.freeze(Scope::Backbone);
    let frozen_model = Model {
        graph: model.graph.clone(),
        params: params.clone(),
    };
    let mut metrics = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            model: frozen_model,
            metrics,
        });
    }
    let cache = FeatureCache::build(&frozen_model, data)?;
    let k = model.graph.backbone.num_classes;
    let n_exits = model.num_branches();

    let mut opt = Sgd::new(config.learning_rate, config.momentum)?.with_weight_decay(config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        let last_good = params.clone();
        order.shuffle(&mut rng);
        let mut sums = TrainEpoch {
            epoch,
            total_loss: 0.0,
            ce: vec![0.0; n_exits],
            cost: vec![0.0; n_exits],
            mean_h: vec![0.0; n_exits],
        };
        for idx in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let taps: Vec<Var> = cache
                .taps
                .iter()
                .map(|(flat, shape)| {
                    let per = shape.iter().product();
                    tape.constant(cache.gather(flat, per, shape, idx))
                })
                .collect();
            let main = tape.constant(cache.gather(&cache.main, k, &[k], idx));
            let labels: Vec<usize> = idx.iter().map(|&i| cache.labels[i]).collect();
            let vars = record_branch_loss(
                &mut tape,
                &frozen_model.graph,
                &params,
                &taps,
                main,
                &labels,
                &costs,
                config.lambda,
                config.cost_recursion,
                Mode::Train,
            )?;
            let loss = tape.value(vars.loss).data()[0] as f64;
            let diverged = |loss: f64| Error::Diverged {
                epoch,
                loss,
                last_good: Some(Box::new(last_good.clone())),
            };
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            let w = idx.len() as f64 / data.len() as f64;
            sums.total_loss += loss * w;
            for n in 0..n_exits {
                sums.ce[n] += tape.value(vars.ce[n]).data()[0] as f64 * w;
                sums.cost[n] += tape.value(vars.cost[n]).data()[0] as f64 * w;
                let hs = tape.value(vars.h[n]).data();
                sums.mean_h[n] += hs.iter().map(|v| *v as f64).sum::<f64>() / data.len() as f64;
            }
            params.zero_grad();
            tape.backward(vars.loss, &mut params)?;
            match opt.step(&mut params) {
                Err(Error::NonFiniteGradient { name }) => {
                    log::error!("non-finite gradient for `{name}` in epoch {epoch}");
                    return Err(diverged(f64::NAN));
                }
                other => other?,
            }
            apply_bn_updates(&mut params, &tape.take_bn_updates())?;
        }
        log::info!(
            "branch epoch {epoch}: loss {:.4} ce {:?} cost {:?} mean h {:?}",
            sums.total_loss,
            sums.ce,
            sums.cost,
            sums.mean_h
        );
        metrics.push(sums);
    }
    params.zero_grad();
    Ok(TrainOutcome {
        model: Model {
            graph: model.graph.clone(),
            params,
        },
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_exit_prediction_example() {
        let p = cumulative_prediction(&[0.25], &[vec![1.0, 0.0, 0.0]], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(p.per_exit[0], vec![0.25, 0.75, 0.0]);
    }

    #[test]
    fn cost_example_and_limits() {
        let c = [0.2, 1.0];
        assert!((cumulative_cost(&[0.5], &c, CostRecursion::Recursive).unwrap()[0] - 0.6).abs() < 1e-12);
        let c = [0.1, 0.3, 0.6, 1.0];
        assert_eq!(cumulative_cost(&[1.0; 3], &c, CostRecursion::Recursive).unwrap(), vec![0.1, 0.3, 0.6]);
        assert_eq!(cumulative_cost(&[0.0; 3], &c, CostRecursion::Recursive).unwrap(), vec![1.0; 3]);
        assert_eq!(cumulative_cost(&[0.0; 3], &c, CostRecursion::Literal).unwrap(), vec![0.3, 0.6, 1.0]);
        assert!(cumulative_cost(&[0.5, 0.5], &[0.3, 0.2, 1.0], CostRecursion::Recursive).is_err());
    }

    #[test]
    fn loss_example() {
        let p = CumulativePrediction {
            per_exit: vec![vec![0.1; 10]],
        };
        let l = total_loss(&[p], &[4], &[vec![0.6]], 0.9).unwrap();
        assert!((l.total - (10f64.ln() + 0.54)).abs() < 1e-9);
        assert!((l.total - 2.8426).abs() < 1e-4);
    }

    #[test]
    fn lambda_zero_is_ce_only() {
        let p = CumulativePrediction {
            per_exit: vec![vec![0.5, 0.5], vec![0.2, 0.8]],
        };
        let l = total_loss(&[p], &[1], &[vec![0.4, 0.7]], 0.0).unwrap();
        assert_eq!(l.total, l.ce_sum());
    }

    #[test]
    fn perfect_predictions_cost_only() {
        let p = CumulativePrediction {
            per_exit: vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        };
        let l = total_loss(&[p], &[1], &[vec![0.3, 0.7]], 2.0).unwrap();
        assert!((l.total - 2.0).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(cumulative_prediction(&[0.5, 0.5], &[vec![1.0, 0.0]], &[0.0, 1.0]).is_err());
        assert!(cumulative_prediction(&[1.5], &[vec![1.0, 0.0]], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn hard_composition_picks_first_firing() {
        let y = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let main = [0.0, 0.0, 1.0];
        assert_eq!(hard_composition(&[false, true], &y, &main), vec![0.0, 1.0, 0.0]);
        assert_eq!(hard_composition(&[true, true], &y, &main), vec![1.0, 0.0, 0.0]);
        assert_eq!(hard_composition(&[false, false], &y, &main), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn negative_lambda_rejected() {
        let cfg = TrainConfig {
            lambda: -0.1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
