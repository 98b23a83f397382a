//! Static cost model. One FLOP is a multiply-accumulate pair; only conv and
//! linear layers carry MACs, everything else counts zero.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::branch::{Branch, BranchSpec};
use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::layer::{Layer, LayerSpec};

/// FLOPs of one layer applied to a per-sample `input_shape`.
pub fn layer_flops(layer: &LayerSpec, input_shape: &[usize]) -> Result<u64> {
    let out = Layer::new(layer.kind(), layer.clone()).output_shape(input_shape)?;
    Ok(match *layer {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => (in_channels * kernel * kernel * out_channels * out[1] * out[2]) as u64,
        LayerSpec::Linear {
            in_features,
            out_features,
        } => (in_features * out_features) as u64,
        _ => 0,
    })
}

/// Sum over a chain of layers; returns `(flops, output_shape)`.
pub fn layers_flops(layers: &[Layer], input_shape: &[usize]) -> Result<(u64, Vec<usize>)> {
    let mut shape = input_shape.to_vec();
    let mut total = 0;
    for layer in layers {
        total += layer_flops(&layer.spec, &shape)?;
        shape = layer.output_shape(&shape)?;
    }
    Ok((total, shape))
}

/// Backbone FLOPs split by stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphFlops {
    pub stem: u64,
    pub blocks: Vec<u64>,
    pub classifier: u64,
}

impl GraphFlops {
    pub fn total(&self) -> u64 {
        self.stem + self.blocks.iter().sum::<u64>() + self.classifier
    }

    /// Backbone FLOPs before a branch attached after `point` blocks.
    pub fn prefix(&self, point: usize) -> u64 {
        self.stem + self.blocks[..point].iter().sum::<u64>()
    }
}

pub fn graph_flops(graph: &NetworkGraph) -> Result<GraphFlops> {
    let shapes = graph.boundary_shapes()?;
    let (stem, _) = layers_flops(&graph.stem, &graph.input_shape)?;
    let mut blocks = Vec::with_capacity(graph.blocks.len());
    for (block, input) in graph.blocks.iter().zip(&shapes) {
        let mut f = 0;
        for (layer, shape) in block.layers().into_iter().zip(block.layer_inputs(input)?) {
            f += layer_flops(&layer.spec, &shape)?;
        }
        blocks.push(f);
    }
    let (classifier, _) = layers_flops(&graph.classifier, shapes.last().expect("validated graph"))?;
    Ok(GraphFlops {
        stem,
        blocks,
        classifier,
    })
}

pub fn total_flops(graph: &NetworkGraph) -> Result<u64> {
    Ok(graph_flops(graph)?.total())
}

pub fn branch_flops(branch: &Branch) -> Result<u64> {
    let (features, pooled) = layers_flops(&branch.features, &branch.input_shape)?;
    let (classifier, _) = layers_flops(&branch.classifier, &pooled)?;
    let (confidence, _) = layers_flops(&branch.confidence, &pooled)?;
    Ok(features + classifier + confidence)
}

/// Identifies an exit: a branch index or the backbone classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExitId {
    Branch(usize),
    Main,
}

impl fmt::Display for ExitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExitId::Branch(n) => write!(f, "{n}"),
            ExitId::Main => f.write_str("main"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExitCost {
    pub exit: ExitId,
    /// `c_n`: backbone prefix plus this branch; the backbone total for main.
    pub absolute_flops: u64,
    pub relative_cost: f64,
    /// What a sample leaving here actually ran: the prefix plus every branch
    /// up to and including this one (all branches for main).
    pub executed_flops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostTable {
    /// Branch exits in order, then main.
    pub exits: Vec<ExitCost>,
    pub total_flops: u64,
}

impl CostTable {
    pub fn num_branches(&self) -> usize {
        self.exits.len() - 1
    }

    /// `c_0 .. c_{N-1}` followed by `1.0` for main.
    pub fn relative_costs(&self) -> Vec<f64> {
        self.exits.iter().map(|e| e.relative_cost).collect()
    }

    /// Executed-path cost relative to the backbone, per exit.
    pub fn executed_relative(&self) -> Vec<f64> {
        self.exits
            .iter()
            .map(|e| e.executed_flops as f64 / self.total_flops as f64)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("exit_index,absolute_flops,relative_cost\n");
        for e in &self.exits {
            let _ = writeln!(out, "{},{},{}", e.exit, e.absolute_flops, e.relative_cost);
        }
        out
    }
}

/// Per-exit costs for branches at `attach_points`.
pub fn segment_costs(graph: &NetworkGraph, attach_points: &[usize], branch_specs: &[BranchSpec]) -> Result<CostTable> {
    if attach_points.len() != branch_specs.len() {
        return Err(Error::invalid(format!(
            "{} attach points but {} branch specs",
            attach_points.len(),
            branch_specs.len()
        )));
    }
    let legal = graph.attach_points();
    if let Some(p) = attach_points.iter().find(|p| !legal.contains(p)) {
        return Err(Error::invalid(format!("attach point {p} outside legal range {legal:?}")));
    }
    let shapes = graph.boundary_shapes()?;
    let branches = attach_points
        .iter()
        .zip(branch_specs)
        .enumerate()
        .map(|(n, (&p, spec))| Branch::new(spec, &shapes[p], format!("branch{n}")))
        .collect::<Result<Vec<_>>>()?;
    cost_table(graph, attach_points, &branches)
}

/// Cost table for already laid-out branches.
pub fn cost_table(graph: &NetworkGraph, attach_points: &[usize], branches: &[Branch]) -> Result<CostTable> {
    let gf = graph_flops(graph)?;
    let total = gf.total();
    if total == 0 {
        return Err(Error::CostTable("backbone has zero FLOPs".into()));
    }
    let mut exits = Vec::with_capacity(branches.len() + 1);
    let mut executed_branches = 0;
    for (n, (&p, b)) in attach_points.iter().zip(branches).enumerate() {
        let own = branch_flops(b)?;
        executed_branches += own;
        let c = gf.prefix(p) + own;
        exits.push(ExitCost {
            exit: ExitId::Branch(n),
            absolute_flops: c,
            relative_cost: c as f64 / total as f64,
            executed_flops: gf.prefix(p) + executed_branches,
        });
    }
    exits.push(ExitCost {
        exit: ExitId::Main,
        absolute_flops: total,
        relative_cost: 1.0,
        executed_flops: total + executed_branches,
    });
    Ok(CostTable {
        exits,
        total_flops: total,
    })
}

/// Rejects tables whose relative costs are not strictly increasing.
pub fn check_monotone(table: &CostTable) -> Result<()> {
    for w in table.exits.windows(2) {
        if w[1].relative_cost <= w[0].relative_cost {
            return Err(Error::CostTable(format!(
                "exit {} costs {:.4} but exit {} costs {:.4}; later exits must cost more",
                w[0].exit, w[0].relative_cost, w[1].exit, w[1].relative_cost
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionMethod {
    Fine,
    Pareto,
    Golden,
    Linear,
}

impl DistributionMethod {
    /// Relative-cost targets for `n` branches, increasing and inside (0, 1).
    pub fn targets(self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| match self {
                DistributionMethod::Fine => 1.0 - 0.95f64.powi(i as i32 + 1),
                DistributionMethod::Pareto => 1.0 - 0.8f64.powi(i as i32 + 1),
                DistributionMethod::Golden => 1.0 - (1.0 - GOLDEN).powi(i as i32 + 1),
                DistributionMethod::Linear => (i + 1) as f64 / (n + 1) as f64,
            })
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            DistributionMethod::Fine => "fine",
            DistributionMethod::Pareto => "pareto",
            DistributionMethod::Golden => "golden",
            DistributionMethod::Linear => "linear",
        }
    }
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

impl fmt::Display for DistributionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistributionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine" => Ok(Self::Fine),
            "pareto" => Ok(Self::Pareto),
            "golden" => Ok(Self::Golden),
            "linear" => Ok(Self::Linear),
            other => Err(Error::invalid(format!(
                "unknown distribution method `{other}` (expected fine, pareto, golden or linear)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub method: DistributionMethod,
    pub target_levels: Vec<f64>,
    /// Blocks executed before each branch, strictly increasing.
    pub attach_points: Vec<usize>,
    /// Backbone prefix cost at each chosen point, relative to the total.
    pub snapped_levels: Vec<f64>,
}

/// Snaps each method target to the closest legal boundary by relative
/// backbone-prefix cost, keeping the points strictly increasing and leaving
/// room for the branches still to place.
pub fn place_branches(graph: &NetworkGraph, method: DistributionMethod, n: usize) -> Result<PlacementPlan> {
    if n == 0 {
        return Err(Error::invalid("branch count must be at least 1"));
    }
    let legal = graph.attach_points();
    if n > legal.len() {
        return Err(Error::invalid(format!(
            "{n} branches requested but the graph has only {} legal boundaries",
            legal.len()
        )));
    }
    let gf = graph_flops(graph)?;
    let total = gf.total() as f64;
    let level = |p: usize| gf.prefix(p) as f64 / total;
    let targets = method.targets(n);
    let mut points = Vec::with_capacity(n);
    let mut lo = legal.start;
    for (i, &t) in targets.iter().enumerate() {
        let hi = legal.end - (n - i);
        // ties (within rounding) go to the smaller index
        let mut best = lo;
        for p in lo + 1..=hi {
            if (level(p) - t).abs() < (level(best) - t).abs() - 1e-12 {
                best = p;
            }
        }
        points.push(best);
        lo = best + 1;
    }
    Ok(PlacementPlan {
        method,
        snapped_levels: points.iter().map(|&p| level(p)).collect(),
        target_levels: targets,
        attach_points: points,
    })
}
