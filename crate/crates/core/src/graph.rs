//! Backbone graphs: a stem, an ordered list of basic blocks, and a
//! classifier. Branches may only attach at the boundaries between units
//! (after the stem, or after any block but the last).

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layer::{forward_layers, layers_output_shape, Layer, LayerSpec, Mode};
use crate::params::{ParameterStore, BACKBONE_PREFIX};
use crate::tensor::Scalar;

pub const DEFAULT_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Architecture {
    PlainCnnSmall,
    /// CIFAR-style residual network of depth `6n + 2`.
    Resnet { depth: usize },
    Vgg19,
    Densenet121,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::PlainCnnSmall => write!(f, "plain-cnn-small"),
            Architecture::Resnet { depth } => write!(f, "resnet-{depth}"),
            Architecture::Vgg19 => write!(f, "vgg-19"),
            Architecture::Densenet121 => write!(f, "densenet-121"),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace("-style", "");
        match s.as_str() {
            "plain-cnn-small" => Ok(Architecture::PlainCnnSmall),
            "vgg-19" | "vgg19" => Ok(Architecture::Vgg19),
            "densenet-121" | "densenet121" => Ok(Architecture::Densenet121),
            _ => {
                let depth = s
                    .strip_prefix("resnet-")
                    .or_else(|| s.strip_prefix("resnet"))
                    .and_then(|d| d.parse::<usize>().ok())
                    .ok_or_else(|| Error::invalid(format!("unknown architecture `{s}`")))?;
                resnet_blocks_per_stage(depth)?;
                Ok(Architecture::Resnet { depth })
            }
        }
    }
}

impl TryFrom<String> for Architecture {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Architecture> for String {
    fn from(a: Architecture) -> String {
        a.to_string()
    }
}

fn resnet_blocks_per_stage(depth: usize) -> Result<usize> {
    if depth < 8 || !(depth - 2).is_multiple_of(6) {
        return Err(Error::invalid(format!(
            "resnet depth {depth} is not of the form 6n + 2 with n >= 1"
        )));
    }
    Ok((depth - 2) / 6)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Block {
    Sequential {
        layers: Vec<Layer>,
    },
    /// `relu(body(x) + shortcut(x))`; an empty shortcut is the identity.
    Residual {
        body: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
    /// Each unit sees the concatenation of the block input and all previous
    /// unit outputs; the transition runs on the final concatenation.
    Dense {
        units: Vec<Vec<Layer>>,
        transition: Vec<Layer>,
    },
}

impl Block {
    pub fn layers(&self) -> Vec<&Layer> {
        match self {
            Block::Sequential { layers } => layers.iter().collect(),
            Block::Residual { body, shortcut } => body.iter().chain(shortcut).collect(),
            Block::Dense { units, transition } => units.iter().flatten().chain(transition).collect(),
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Block::Sequential { layers } => layers_output_shape(layers, input),
            Block::Residual { body, shortcut } => {
                let a = layers_output_shape(body, input)?;
                let b = layers_output_shape(shortcut, input)?;
                if a != b {
                    return Err(Error::shape("residual shortcut", format!("{a:?}"), &b));
                }
                Ok(a)
            }
            Block::Dense { units, transition } => {
                let mut shape = input.to_vec();
                for unit in units {
                    let out = layers_output_shape(unit, &shape)?;
                    if out.len() != 3 || out[1..] != shape[1..] {
                        return Err(Error::shape("dense unit", format!("[g, {}, {}]", shape[1], shape[2]), &out));
                    }
                    shape[0] += out[0];
                }
                layers_output_shape(transition, &shape)
            }
        }
    }

    /// Per-layer input shapes, in the order returned by [`Block::layers`].
    pub fn layer_inputs(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        fn chain(layers: &[Layer], input: &[usize], out: &mut Vec<Vec<usize>>) -> Result<Vec<usize>> {
            let mut shape = input.to_vec();
            for l in layers {
                out.push(shape.clone());
                shape = l.output_shape(&shape)?;
            }
            Ok(shape)
        }
        let mut out = Vec::new();
        match self {
            Block::Sequential { layers } => {
                chain(layers, input, &mut out)?;
            }
            Block::Residual { body, shortcut } => {
                chain(body, input, &mut out)?;
                chain(shortcut, input, &mut out)?;
            }
            Block::Dense { units, transition } => {
                let mut shape = input.to_vec();
                for unit in units {
                    let o = chain(unit, &shape, &mut out)?;
                    shape[0] += o[0];
                }
                chain(transition, &shape, &mut out)?;
            }
        }
        Ok(out)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        store: &ParameterStore<T>,
        mode: Mode,
    ) -> Result<Var> {
        match self {
            Block::Sequential { layers } => forward_layers(layers, tape, x, store, mode),
            Block::Residual { body, shortcut } => {
                let a = forward_layers(body, tape, x, store, mode)?;
                let b = forward_layers(shortcut, tape, x, store, mode)?;
                let sum = tape.add(a, b)?;
                Ok(tape.relu(sum))
            }
            Block::Dense { units, transition } => {
                let mut parts = vec![x];
                let mut current = x;
                for unit in units {
                    let y = forward_layers(unit, tape, current, store, mode)?;
                    parts.push(y);
                    current = tape.concat(&parts)?;
                }
                forward_layers(transition, tape, current, store, mode)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkGraph {
    pub name: String,
    pub num_classes: usize,
    /// `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub stem: Vec<Layer>,
    pub blocks: Vec<Block>,
    pub classifier: Vec<Layer>,
}

impl NetworkGraph {
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        num_classes: usize,
        stem: Vec<Layer>,
        blocks: Vec<Block>,
        classifier: Vec<Layer>,
    ) -> Result<Self> {
        let g = Self {
            name: name.into(),
            num_classes,
            input_shape,
            stem,
            blocks,
            classifier,
        };
        g.validate()?;
        Ok(g)
    }

    /// Checks the shape chain and that the classifier ends in a softmax over K.
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
            return Err(Error::shape("graph input", "[c, h, w]", &self.input_shape));
        }
        if self.blocks.is_empty() {
            return Err(Error::invalid("graph has no basic blocks"));
        }
        let shapes = self.boundary_shapes()?;
        let out = layers_output_shape(&self.classifier, shapes.last().unwrap())?;
        if out != [self.num_classes] || !matches!(self.classifier.last().map(|l| &l.spec), Some(LayerSpec::Softmax)) {
            return Err(Error::shape(
                "classifier",
                format!("softmax over [{}]", self.num_classes),
                &out,
            ));
        }
        Ok(())
    }

    /// Per-sample shapes after the stem (index 0) and after each block
    /// (index `i + 1`).
    pub fn boundary_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![layers_output_shape(&self.stem, &self.input_shape)?];
        for block in &self.blocks {
            let next = block.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Legal attach points, expressed as the number of blocks executed before
    /// the branch. The point after the stem is legal only when the stem is
    /// non-empty; the point after the last block is never legal.
    pub fn attach_points(&self) -> std::ops::Range<usize> {
        let first = if self.stem.is_empty() { 1 } else { 0 };
        first..self.blocks.len()
    }

    pub fn attach_shape(&self, point: usize) -> Result<Vec<usize>> {
        if !self.attach_points().contains(&point) {
            return Err(Error::invalid(format!(
                "attach point {point} outside legal range {:?}",
                self.attach_points()
            )));
        }
        Ok(self.boundary_shapes()?.swap_remove(point))
    }

    pub fn all_layers(&self) -> Vec<&Layer> {
        self.stem
            .iter()
            .chain(self.blocks.iter().flat_map(|b| b.layers()))
            .chain(&self.classifier)
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.all_layers().iter().map(|l| l.num_params()).sum()
    }

    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        for layer in self.all_layers() {
            layer.init_params(&mut store, &mut rng)?;
        }
        Ok(store)
    }

    pub fn forward_stem<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, store: &ParameterStore<T>, mode: Mode) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 4 || shape[1..] != self.input_shape[..] {
            return Err(Error::shape(
                format!("input of `{}`", self.name),
                format!("[batch, {:?}]", self.input_shape),
                shape,
            ));
        }
        forward_layers(&self.stem, tape, x, store, mode)
    }

    /// Runs blocks `range` on the output of the previous unit.
    pub fn forward_blocks<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        mut x: Var,
        store: &ParameterStore<T>,
        mode: Mode,
        range: std::ops::Range<usize>,
    ) -> Result<Var> {
        for block in &self.blocks[range] {
            x = block.forward(tape, x, store, mode)?;
        }
        Ok(x)
    }

    pub fn forward_classifier<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, store: &ParameterStore<T>, mode: Mode) -> Result<Var> {
        forward_layers(&self.classifier, tape, x, store, mode)
    }

    /// Full backbone pass; returns the class distribution `[batch, K]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, store: &ParameterStore<T>, mode: Mode) -> Result<Var> {
        let h = self.forward_stem(tape, x, store, mode)?;
        let h = self.forward_blocks(tape, h, store, mode, 0..self.blocks.len())?;
        self.forward_classifier(tape, h, store, mode)
    }
}

fn prefixed(scope: &str) -> String {
    format!("{BACKBONE_PREFIX}{scope}")
}

fn named(scope: &str, specs: Vec<LayerSpec>) -> Vec<Layer> {
    specs
        .into_iter()
        .enumerate()
        .map(|(i, s)| Layer::new(format!("{scope}.{i}"), s))
        .collect()
}

fn bn(c: usize) -> LayerSpec {
    LayerSpec::BatchNorm2d { channels: c }
}

fn head(features: usize, k: usize, scope: &str) -> Vec<Layer> {
    named(
        scope,
        vec![
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                in_features: features,
                out_features: k,
            },
            LayerSpec::Softmax,
        ],
    )
}

/// Builds a backbone graph of the given family.
pub fn build_backbone(arch: &Architecture, num_classes: usize, input_shape: &[usize]) -> Result<NetworkGraph> {
    if num_classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    let [c_in, _, _] = *input_shape else {
        return Err(Error::shape("backbone input", "[c, h, w]", input_shape));
    };
    let (stem, blocks, classifier) = match arch {
        Architecture::PlainCnnSmall => {
            let stem = named(&prefixed("stem"), vec![LayerSpec::conv3x3(c_in, 16, 1), bn(16), LayerSpec::Relu]);
            let plan: [(usize, usize, bool); 4] = [(16, 16, false), (16, 32, true), (32, 32, false), (32, 64, true)];
            let blocks = plan
                .iter()
                .enumerate()
                .map(|(i, &(a, b, pool))| {
                    let mut specs = vec![LayerSpec::conv3x3(a, b, 1), bn(b), LayerSpec::Relu];
                    if pool {
                        specs.push(LayerSpec::MaxPool2d { kernel: 2, stride: 2 });
                    }
                    Block::Sequential {
                        layers: named(&prefixed(&format!("block{i}")), specs),
                    }
                })
                .collect();
            (stem, blocks, head(64, num_classes, &prefixed("classifier")))
        }
        Architecture::Resnet { depth } => {
            let n = resnet_blocks_per_stage(*depth)?;
            let stem = named(&prefixed("stem"), vec![LayerSpec::conv3x3(c_in, 16, 1), bn(16), LayerSpec::Relu]);
            let mut blocks = Vec::with_capacity(3 * n);
            let mut in_c = 16;
            for (stage, width) in [16usize, 32, 64].into_iter().enumerate() {
                for j in 0..n {
                    let stride = if stage > 0 && j == 0 { 2 } else { 1 };
                    let scope = prefixed(&format!("block{}", blocks.len()));
                    let body = named(
                        &format!("{scope}.body"),
                        vec![
                            LayerSpec::conv3x3(in_c, width, stride),
                            bn(width),
                            LayerSpec::Relu,
                            LayerSpec::conv3x3(width, width, 1),
                            bn(width),
                        ],
                    );
                    let shortcut = if stride != 1 || in_c != width {
                        named(
                            &format!("{scope}.shortcut"),
                            vec![LayerSpec::conv1x1(in_c, width, stride), bn(width)],
                        )
                    } else {
                        Vec::new()
                    };
                    blocks.push(Block::Residual { body, shortcut });
                    in_c = width;
                }
            }
            (stem, blocks, head(64, num_classes, &prefixed("classifier")))
        }
        Architecture::Vgg19 => {
            let stages: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)];
            let mut blocks = Vec::new();
            let mut in_c = c_in;
            for (width, convs) in stages {
                let pairs = convs / 2;
                for p in 0..pairs {
                    let mut specs = Vec::new();
                    for _ in 0..2 {
                        specs.extend([LayerSpec::conv3x3(in_c, width, 1), bn(width), LayerSpec::Relu]);
                        in_c = width;
                    }
                    if p + 1 == pairs {
                        specs.push(LayerSpec::MaxPool2d { kernel: 2, stride: 2 });
                    }
                    let scope = prefixed(&format!("block{}", blocks.len()));
                    blocks.push(Block::Sequential {
                        layers: named(&scope, specs),
                    });
                }
            }
            (Vec::new(), blocks, head(512, num_classes, &prefixed("classifier")))
        }
        Architecture::Densenet121 => {
            let growth = 32;
            let stem = named(&prefixed("stem"), vec![LayerSpec::conv3x3(c_in, 2 * growth, 1)]);
            let mut blocks = Vec::new();
            let mut c = 2 * growth;
            let layout = [6usize, 12, 24, 16];
            for (bi, &units_n) in layout.iter().enumerate() {
                let scope = prefixed(&format!("block{bi}"));
                let mut units = Vec::with_capacity(units_n);
                for u in 0..units_n {
                    units.push(named(
                        &format!("{scope}.unit{u}"),
                        vec![
                            bn(c),
                            LayerSpec::Relu,
                            LayerSpec::conv1x1(c, 4 * growth, 1),
                            bn(4 * growth),
                            LayerSpec::Relu,
                            LayerSpec::conv3x3(4 * growth, growth, 1),
                        ],
                    ));
                    c += growth;
                }
                let transition = if bi + 1 < layout.len() {
                    let out = c / 2;
                    let t = named(
                        &format!("{scope}.transition"),
                        vec![
                            bn(c),
                            LayerSpec::Relu,
                            LayerSpec::conv1x1(c, out, 1),
                            LayerSpec::AvgPool2d { kernel: 2, stride: 2 },
                        ],
                    );
                    c = out;
                    t
                } else {
                    Vec::new()
                };
                blocks.push(Block::Dense { units, transition });
            }
            let classifier = named(
                &prefixed("classifier"),
                vec![
                    bn(c),
                    LayerSpec::Relu,
                    LayerSpec::GlobalAvgPool,
                    LayerSpec::Linear {
                        in_features: c,
                        out_features: num_classes,
                    },
                    LayerSpec::Softmax,
                ],
            );
            (stem, blocks, classifier)
        }
    };
    NetworkGraph::new(arch.to_string(), input_shape.to_vec(), num_classes, stem, blocks, classifier)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form parameter count of the CIFAR residual family with
    /// projection shortcuts.
    fn resnet_param_oracle(depth: usize, c_in: usize, k: usize) -> usize {
        let n = (depth - 2) / 6;
        let bnp = |c: usize| 2 * c;
        let mut total = 9 * c_in * 16 + bnp(16);
        let mut prev = 16;
        for w in [16usize, 32, 64] {
            for j in 0..n {
                let inc = if j == 0 { prev } else { w };
                total += 9 * inc * w + bnp(w) + 9 * w * w + bnp(w);
                if inc != w {
                    total += inc * w + bnp(w);
                }
            }
            prev = w;
        }
        total + 64 * k + k
    }

    #[test]
    fn resnet110_layout() {
        let g = build_backbone(&Architecture::Resnet { depth: 110 }, 10, &[3, 32, 32]).unwrap();
        assert_eq!(g.blocks.len(), 54);
        assert!(g.blocks.iter().all(|b| matches!(b, Block::Residual { .. })));
        let shapes = g.boundary_shapes().unwrap();
        assert_eq!(shapes[18], vec![16, 32, 32]);
        assert_eq!(shapes[36], vec![32, 16, 16]);
        assert_eq!(shapes[54], vec![64, 8, 8]);
        assert_eq!(g.num_params(), resnet_param_oracle(110, 3, 10));
    }

    #[test]
    fn resnet_param_counts_match_oracle() {
        for depth in [8, 20, 32, 110] {
            let g = build_backbone(&Architecture::Resnet { depth }, 10, &[3, 32, 32]).unwrap();
            let store = g.init_params(0).unwrap();
            assert_eq!(store.num_scalars(), resnet_param_oracle(depth, 3, 10), "depth {depth}");
        }
    }

    #[test]
    fn rejects_bad_depths_and_names() {
        assert!("resnet-21".parse::<Architecture>().is_err());
        assert!("resnet-2".parse::<Architecture>().is_err());
        assert!("alexnet".parse::<Architecture>().is_err());
        assert_eq!("resnet-style-110".parse::<Architecture>().unwrap(), Architecture::Resnet { depth: 110 });
        assert_eq!("vgg-style-19".parse::<Architecture>().unwrap(), Architecture::Vgg19);
    }

    #[test]
    fn families_build_at_32() {
        let plain = build_backbone(&Architecture::PlainCnnSmall, 10, &[3, 32, 32]).unwrap();
        assert_eq!(plain.blocks.len(), 4);
        let vgg = build_backbone(&Architecture::Vgg19, 10, &[3, 32, 32]).unwrap();
        assert_eq!(vgg.blocks.len(), 8);
        assert_eq!(vgg.attach_points(), 1..8);
        let dense = build_backbone(&Architecture::Densenet121, 10, &[3, 32, 32]).unwrap();
        assert_eq!(dense.blocks.len(), 4);
        assert_eq!(dense.boundary_shapes().unwrap()[4], vec![1024, 4, 4]);
    }

    #[test]
    fn graph_serde_roundtrip() {
        let g = build_backbone(&Architecture::Resnet { depth: 8 }, 10, &[3, 16, 16]).unwrap();
        let json = serde_json::to_string(&g).unwrap();
        let back: NetworkGraph = serde_json::from_str(&json).unwrap();
        assert_eq!(g, back);
    }
}
