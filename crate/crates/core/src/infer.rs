//! Threshold-gated inference: run blocks and branches in order and stop at
//! the first exit whose confidence reaches its threshold.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flops::CostTable;
use crate::layer::Mode;
use crate::model::Model;
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExitPolicy {
    /// One threshold for every exit.
    Single(f64),
    /// One threshold per branch exit.
    PerExit(Vec<f64>),
}

impl ExitPolicy {
    pub fn single(t: f64) -> Result<Self> {
        let p = ExitPolicy::Single(t);
        p.validate(None)?;
        Ok(p)
    }

    pub fn validate(&self, num_branches: Option<usize>) -> Result<()> {
        let values: &[f64] = match self {
            ExitPolicy::Single(t) => std::slice::from_ref(t),
            ExitPolicy::PerExit(v) => {
                if let Some(n) = num_branches {
                    if v.len() != n {
                        return Err(Error::invalid(format!("{} thresholds for {n} branches", v.len())));
                    }
                }
                v
            }
        };
        match values.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            Some(bad) => Err(Error::invalid(format!("threshold {bad} outside [0, 1]"))),
            None => Ok(()),
        }
    }

    pub fn threshold(&self, exit: usize) -> f64 {
        match self {
            ExitPolicy::Single(t) => *t,
            ExitPolicy::PerExit(v) => v[exit],
        }
    }

    /// Whether exit `n` fires for confidence `h`; `>=`, so `T = 0` always fires.
    pub fn fires(&self, exit: usize, h: f32) -> bool {
        h as f64 >= self.threshold(exit)
    }

    /// Display form used in CSV rows.
    pub fn label(&self) -> String {
        match self {
            ExitPolicy::Single(t) => format!("{t}"),
            ExitPolicy::PerExit(v) => v.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(";"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InferenceTrace {
    /// `0..N`; `N` is the backbone classifier.
    pub exit_index: usize,
    pub predicted_class: usize,
    /// `h` of the exit that fired; at the main exit, the top class probability.
    pub confidence_at_exit: f32,
    /// FLOPs actually executed: backbone prefix plus every branch evaluated.
    pub flops_consumed: u64,
    /// `c_n` of the exit taken (backbone total for main), without the
    /// overhead of branches that did not fire.
    pub segment_flops: u64,
}

fn trace_for(table: &CostTable, exit: usize, class: usize, conf: f32) -> InferenceTrace {
    let e = &table.exits[exit];
    InferenceTrace {
        exit_index: exit,
        predicted_class: class,
        confidence_at_exit: conf,
        flops_consumed: e.executed_flops,
        segment_flops: e.absolute_flops,
    }
}

/// Early-terminating inference on one sample (`[c, h, w]` or `[1, c, h, w]`).
pub fn infer(model: &Model, table: &CostTable, x: &Tensor, policy: &ExitPolicy) -> Result<InferenceTrace> {
    let n = model.num_branches();
    if n == 0 {
        return Err(Error::invalid("model has no attached branches"));
    }
    if table.num_branches() != n {
        return Err(Error::CostTable(format!("table has {} branch exits, model {n}", table.num_branches())));
    }
    policy.validate(Some(n))?;
    let x = if x.shape().len() == 3 {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        x.clone().reshape(&shape)?
    } else {
        x.clone()
    };
    if x.shape()[0] != 1 {
        return Err(Error::shape("infer input", "a single sample", x.shape()));
    }
    let graph = &model.graph;
    let backbone = &graph.backbone;
    let params = &model.params;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let mut feat = backbone.forward_stem(&mut tape, xv, params, Mode::Eval)?;
    let mut done = 0;
    for (i, ab) in graph.branches.iter().enumerate() {
        feat = backbone.forward_blocks(&mut tape, feat, params, Mode::Eval, done..ab.attach_point)?;
        done = ab.attach_point;
        let (h, y) = ab.branch.forward(&mut tape, feat, params, Mode::Eval)?;
        let h = tape.value(h).data()[0];
        if policy.fires(i, h) {
            return Ok(trace_for(table, i, argmax(tape.value(y).data()), h));
        }
    }
    feat = backbone.forward_blocks(&mut tape, feat, params, Mode::Eval, done..backbone.blocks.len())?;
    let y = backbone.forward_classifier(&mut tape, feat, params, Mode::Eval)?;
    let probs = tape.value(y).data();
    let class = argmax(probs);
    Ok(trace_for(table, n, class, probs[class]))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub policy: ExitPolicy,
    pub samples: usize,
    pub accuracy_vs_pseudo: f64,
    pub accuracy_vs_true: Option<f64>,
    /// Mean executed FLOPs over the backbone total.
    pub avg_relative_cost: f64,
    pub cost_reduction: f64,
    /// Mean `c_n` of the exits taken over the backbone total.
    pub avg_relative_cost_segment: f64,
    pub cost_reduction_segment: f64,
    /// Counts per exit; the last entry is main.
    pub exit_histogram: Vec<usize>,
}

fn report(
    policy: &ExitPolicy,
    table: &CostTable,
    traces: &[InferenceTrace],
    pseudo: &[usize],
    truth: Option<&[usize]>,
) -> EvalReport {
    let n = traces.len() as f64;
    let mut hist = vec![0; table.exits.len()];
    let (mut exec, mut seg) = (0u128, 0u128);
    for t in traces {
        hist[t.exit_index] += 1;
        exec += t.flops_consumed as u128;
        seg += t.segment_flops as u128;
    }
    let acc = |labels: &[usize]| traces.iter().zip(labels).filter(|(t, y)| t.predicted_class == **y).count() as f64 / n;
    let total = table.total_flops as f64;
    let avg = exec as f64 / n / total;
    let avg_seg = seg as f64 / n / total;
    EvalReport {
        policy: policy.clone(),
        samples: traces.len(),
        accuracy_vs_pseudo: acc(pseudo),
        accuracy_vs_true: truth.map(acc),
        avg_relative_cost: avg,
        cost_reduction: 1.0 - avg,
        avg_relative_cost_segment: avg_seg,
        cost_reduction_segment: 1.0 - avg_seg,
        exit_histogram: hist,
    }
}

/// Per-sample early-exit inference over `data`. Samples are processed in
/// parallel and gathered in dataset order.
pub fn evaluate(model: &Model, data: &Dataset, policy: &ExitPolicy) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let table = model.graph.cost_table()?;
    let traces = (0..data.len())
        .into_par_iter()
        .map(|i| infer(model, &table, &data.batch(&[i]), policy))
        .collect::<Result<Vec<_>>>()?;
    let pseudo = crate::pretrain::predict(model.backbone(), &model.params, data, 128)?;
    Ok(report(policy, &table, &traces, &pseudo, data.labels()))
}

/// All exit outputs for a dataset, computed once so that many policies can
/// be scored without re-running the network.
#[derive(Clone, Debug)]
pub struct ExitRecords {
    pub table: CostTable,
    /// `h[sample][n]`.
    pub h: Vec<Vec<f32>>,
    /// Argmax and top probability per sample per exit, main last.
    pub class: Vec<Vec<usize>>,
    pub main_conf: Vec<f32>,
    pub pseudo: Vec<usize>,
    pub truth: Option<Vec<usize>>,
}

impl ExitRecords {
    pub fn compute(model: &Model, data: &Dataset) -> Result<Self> {
        if model.num_branches() == 0 {
            return Err(Error::invalid("model has no attached branches"));
        }
        if data.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty dataset"));
        }
        let table = model.graph.cost_table()?;
        let k = model.backbone().num_classes;
        let n = model.num_branches();
        let all: Vec<usize> = (0..data.len()).collect();
        let chunks: Vec<&[usize]> = all.chunks(64).collect();
        let parts = chunks
            .par_iter()
            .map(|idx| model.forward_all(&data.batch(idx)).map(|e| (idx.len(), e)))
            .collect::<Result<Vec<_>>>()?;
        let (mut h, mut class, mut main_conf, mut pseudo) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (b, e) in parts {
            for s in 0..b {
                h.push((0..n).map(|i| e.h[i][s]).collect());
                let mut c: Vec<usize> = (0..n).map(|i| argmax(e.y_hat[i].row(s))).collect();
                let row = &e.main.data()[s * k..(s + 1) * k];
                let m = argmax(row);
                c.push(m);
                class.push(c);
                main_conf.push(row[m]);
                pseudo.push(m);
            }
        }
        Ok(Self {
            table,
            h,
            class,
            main_conf,
            pseudo,
            truth: data.labels().map(<[usize]>::to_vec),
        })
    }

    /// The trace `infer` would produce for sample `i` under `policy`.
    pub fn trace(&self, i: usize, policy: &ExitPolicy) -> InferenceTrace {
        let n = self.table.num_branches();
        for (e, &h) in self.h[i].iter().enumerate() {
            if policy.fires(e, h) {
                return trace_for(&self.table, e, self.class[i][e], h);
            }
        }
        trace_for(&self.table, n, self.class[i][n], self.main_conf[i])
    }

    pub fn report(&self, policy: &ExitPolicy) -> Result<EvalReport> {
        policy.validate(Some(self.table.num_branches()))?;
        let traces: Vec<InferenceTrace> = (0..self.h.len()).map(|i| self.trace(i, policy)).collect();
        Ok(report(policy, &self.table, &traces, &self.pseudo, self.truth.as_deref()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branch::BranchSpec;
    use crate::data::{synthetic_blobs, BlobConfig};
    use crate::graph::{build_backbone, Architecture};
    use crate::model::attach;

    fn setup() -> (Model, Dataset) {
        let mut cfg = BlobConfig::new(12, 4, 2);
        cfg.image_size = 8;
        let data = synthetic_blobs(&cfg).unwrap();
        let g = build_backbone(&Architecture::Resnet { depth: 8 }, 4, &[3, 8, 8]).unwrap();
        let p = g.init_params(1).unwrap();
        let m = attach(&g, &p, &[0, 1, 2], &vec![BranchSpec::with_width(2, 4, 4); 3], 3).unwrap();
        (m, data)
    }

    #[test]
    fn zero_threshold_exits_first() {
        let (m, d) = setup();
        let table = m.graph.cost_table().unwrap();
        let t = infer(&m, &table, &d.batch(&[0]), &ExitPolicy::Single(0.0)).unwrap();
        assert_eq!(t.exit_index, 0);
        assert_eq!(t.flops_consumed, table.exits[0].absolute_flops);
    }

    #[test]
    fn unit_threshold_matches_backbone() {
        let (m, d) = setup();
        let r = evaluate(&m, &d, &ExitPolicy::Single(1.0)).unwrap();
        assert_eq!(r.accuracy_vs_pseudo, 1.0);
        assert_eq!(r.exit_histogram[3], d.len());
        assert!(r.avg_relative_cost > 1.0);
        assert_eq!(r.avg_relative_cost_segment, 1.0);
    }

    #[test]
    fn records_agree_with_infer() {
        let (m, d) = setup();
        let rec = ExitRecords::compute(&m, &d).unwrap();
        for t in [0.0, 0.3, 0.5, 0.7, 1.0] {
            let p = ExitPolicy::Single(t);
            let full = evaluate(&m, &d, &p).unwrap();
            assert_eq!(rec.report(&p).unwrap(), full);
        }
    }

    #[test]
    fn single_sample_histogram() {
        let (m, d) = setup();
        let r = evaluate(&m, &d.subset(&[0]), &ExitPolicy::Single(0.0)).unwrap();
        assert_eq!(r.exit_histogram, vec![1, 0, 0, 0]);
    }

    #[test]
    fn bad_policies_rejected() {
        assert!(ExitPolicy::single(1.2).is_err());
        assert!(ExitPolicy::PerExit(vec![0.5, 0.5]).validate(Some(3)).is_err());
        let (m, d) = setup();
        let g = m.graph.backbone.clone();
        let bare = Model::new(crate::model::ModelGraph::backbone_only(g), m.params.subset("backbone.")).unwrap();
        assert!(evaluate(&bare, &d, &ExitPolicy::Single(0.5)).is_err());
    }
}
