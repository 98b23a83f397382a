//! A backbone with early-exit branches attached at block boundaries.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::branch::{Branch, BranchSpec};
use crate::error::{Error, Result};
use crate::flops::{cost_table, CostTable};
use crate::graph::NetworkGraph;
use crate::layer::Mode;
use crate::params::{ParameterStore, Scope};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttachedBranch {
    /// Number of backbone blocks executed before this branch.
    pub attach_point: usize,
    pub branch: Branch,
}

/// Structure of an assembled model; this is what checkpoints describe.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelGraph {
    pub backbone: NetworkGraph,
    #[serde(default)]
    pub branches: Vec<AttachedBranch>,
}

impl ModelGraph {
    pub fn backbone_only(backbone: NetworkGraph) -> Self {
        Self {
            backbone,
            branches: Vec::new(),
        }
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn attach_points(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.attach_point).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let shapes = self.backbone.boundary_shapes()?;
        let legal = self.backbone.attach_points();
        let mut prev = None;
        for (n, ab) in self.branches.iter().enumerate() {
            let p = ab.attach_point;
            if !legal.contains(&p) {
                return Err(Error::invalid(format!("branch {n} attach point {p} outside legal range {legal:?}")));
            }
            if prev.is_some_and(|q| p <= q) {
                return Err(Error::invalid("attach points must be strictly increasing"));
            }
            prev = Some(p);
            if ab.branch.input_shape != shapes[p] {
                return Err(Error::shape(
                    format!("branch {n} input"),
                    format!("{:?}", shapes[p]),
                    &ab.branch.input_shape,
                ));
            }
            if ab.branch.spec.num_classes != self.backbone.num_classes {
                return Err(Error::invalid(format!(
                    "branch {n} predicts {} classes, backbone {}",
                    ab.branch.spec.num_classes, self.backbone.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn cost_table(&self) -> Result<CostTable> {
        let branches: Vec<Branch> = self.branches.iter().map(|b| b.branch.clone()).collect();
        cost_table(&self.backbone, &self.attach_points(), &branches)
    }
}

/// Everything a forward pass of the assembled model produces, in inference mode.
#[derive(Clone, Debug, PartialEq)]
pub struct AllExits {
    /// `h[n][sample]`.
    pub h: Vec<Vec<f32>>,
    /// `y_hat[n]` is `[batch, K]`.
    pub y_hat: Vec<Tensor>,
    /// Backbone classifier output, `[batch, K]`.
    pub main: Tensor,
}

/// Records the backbone on `tape` and returns the feature maps at each of
/// `points` plus the classifier output.
pub fn backbone_taps<T: Scalar>(
    backbone: &NetworkGraph,
    tape: &mut Tape<T>,
    x: Var,
    store: &ParameterStore<T>,
    points: &[usize],
) -> Result<(Vec<Var>, Var)> {
    let mut h = backbone.forward_stem(tape, x, store, Mode::Eval)?;
    let mut done = 0;
    let mut taps = Vec::with_capacity(points.len());
    for &p in points {
        h = backbone.forward_blocks(tape, h, store, Mode::Eval, done..p)?;
        done = p;
        taps.push(h);
    }
    h = backbone.forward_blocks(tape, h, store, Mode::Eval, done..backbone.blocks.len())?;
    let main = backbone.forward_classifier(tape, h, store, Mode::Eval)?;
    Ok((taps, main))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub graph: ModelGraph,
    pub params: ParameterStore,
}

impl Model {
    pub fn new(graph: ModelGraph, params: ParameterStore) -> Result<Self> {
        graph.validate()?;
        let mut expected = 0;
        for layer in graph
            .backbone
            .all_layers()
            .into_iter()
            .chain(graph.branches.iter().flat_map(|b| b.branch.layers()))
        {
            for (name, shape) in layer.param_shapes() {
                let t = params.tensor(&name)?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape(format!("parameter `{name}`"), format!("{shape:?}"), t.shape()));
                }
                expected += 1;
            }
        }
        if params.len() != expected {
            return Err(Error::invalid(format!(
                "parameter store holds {} arrays, graph declares {expected}",
                params.len()
            )));
        }
        Ok(Self { graph, params })
    }

    pub fn num_branches(&self) -> usize {
        self.graph.num_branches()
    }

    pub fn backbone(&self) -> &NetworkGraph {
        &self.graph.backbone
    }

    /// Branch parameters only.
    pub fn branch_params(&self) -> ParameterStore {
        let mut p = self.params.clone();
        p.remove_prefix(&Scope::Backbone.prefix());
        p
    }

    pub fn forward_all(&self, x: &Tensor) -> Result<AllExits> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (taps, main) = backbone_taps(&self.graph.backbone, &mut tape, xv, &self.params, &self.graph.attach_points())?;
        let mut h = Vec::with_capacity(taps.len());
        let mut y_hat = Vec::with_capacity(taps.len());
        for (ab, tap) in self.graph.branches.iter().zip(taps) {
            let (hv, yv) = ab.branch.forward(&mut tape, tap, &self.params, Mode::Eval)?;
            h.push(tape.value(hv).data().to_vec());
            y_hat.push(tape.value(yv).clone());
        }
        Ok(AllExits {
            h,
            y_hat,
            main: tape.value(main).clone(),
        })
    }

    /// Backbone class distribution `[batch, K]`.
    pub fn backbone_forward(&self, x: &Tensor) -> Result<Tensor> {
        backbone_predict(&self.graph.backbone, &self.params, x)
    }
}

pub fn backbone_predict(backbone: &NetworkGraph, params: &ParameterStore, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = backbone.forward(&mut tape, xv, params, Mode::Eval)?;
    Ok(tape.value(y).clone())
}

/// Attaches freshly initialized branches at `attach_points` and freezes the
/// backbone. Branch `n` is seeded with `seed + n`.
pub fn attach(
    backbone: &NetworkGraph,
    backbone_params: &ParameterStore,
    attach_points: &[usize],
    specs: &[BranchSpec],
    seed: u64,
) -> Result<Model> {
    if attach_points.len() != specs.len() {
        return Err(Error::invalid(format!(
            "{} attach points but {} branch specs",
            attach_points.len(),
            specs.len()
        )));
    }
    let shapes = backbone.boundary_shapes()?;
    let legal = backbone.attach_points();
    let mut params = backbone_params.clone();
    params.freeze(Scope::Backbone);
    let mut branches = Vec::with_capacity(specs.len());
    for (n, (&p, spec)) in attach_points.iter().zip(specs).enumerate() {
        if !legal.contains(&p) {
            return Err(Error::invalid(format!("attach point {p} outside legal range {legal:?}")));
        }
        let branch = Branch::new(spec, &shapes[p], format!("branch{n}"))?;
        params.merge(branch.init_params(seed.wrapping_add(n as u64))?)?;
        branches.push(AttachedBranch { attach_point: p, branch });
    }
    Model::new(
        ModelGraph {
            backbone: backbone.clone(),
            branches,
        },
        params,
    )
}
