//! ConvX early-exit branch: `X` blocks of 3x3 conv, batch norm and ReLU,
//! a global average pool, then two heads reading the pooled features: a
//! softmax classifier and a single-unit sigmoid confidence head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layer::{forward_layers, layers_output_shape, Layer, LayerSpec, Mode};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    /// Number of conv blocks (the X in ConvX).
    pub blocks: usize,
    /// Out-channels per conv block; `None` keeps the attach-point width.
    #[serde(default)]
    pub channels: Option<Vec<usize>>,
    pub num_classes: usize,
}

impl BranchSpec {
    pub fn conv(blocks: usize, num_classes: usize) -> Self {
        Self {
            blocks,
            channels: None,
            num_classes,
        }
    }

    pub fn with_width(blocks: usize, width: usize, num_classes: usize) -> Self {
        Self {
            blocks,
            channels: Some(vec![width; blocks]),
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::invalid("a ConvX branch needs at least one conv block"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("branch needs at least two classes"));
        }
        if let Some(ch) = &self.channels {
            if ch.len() != self.blocks || ch.contains(&0) {
                return Err(Error::invalid(format!(
                    "branch channels {ch:?} must list {} positive widths",
                    self.blocks
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub name: String,
    pub spec: BranchSpec,
    /// Per-sample `[c, h, w]` at the attach point.
    pub input_shape: Vec<usize>,
    /// Conv blocks followed by the global average pool.
    pub features: Vec<Layer>,
    pub classifier: Vec<Layer>,
    pub confidence: Vec<Layer>,
}

/// One sample's exit output.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutput {
    /// Confidence in `(0, 1)`.
    pub h: f32,
    /// Class distribution over K.
    pub y_hat: Vec<f32>,
}

impl Branch {
    /// Lays out a ConvX branch for a feature map of `input_shape`.
    pub fn new(spec: &BranchSpec, input_shape: &[usize], name: impl Into<String>) -> Result<Self> {
        spec.validate()?;
        let name = name.into();
        let [c, h, w] = *input_shape else {
            return Err(Error::shape(format!("input of `{name}`"), "[c, h, w]", input_shape));
        };
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                format!("input of `{name}`"),
                "spatial size >= 1 after every conv block",
                input_shape,
            ));
        }
        let widths = spec.channels.clone().unwrap_or_else(|| vec![c; spec.blocks]);
        let mut features = Vec::with_capacity(3 * spec.blocks + 1);
        let mut in_c = c;
        for (i, &out_c) in widths.iter().enumerate() {
            features.push(Layer::new(format!("{name}.block{i}.conv"), LayerSpec::conv3x3(in_c, out_c, 1)));
            features.push(Layer::new(
                format!("{name}.block{i}.bn"),
                LayerSpec::BatchNorm2d { channels: out_c },
            ));
            features.push(Layer::new(format!("{name}.block{i}.relu"), LayerSpec::Relu));
            in_c = out_c;
        }
        features.push(Layer::new(format!("{name}.pool"), LayerSpec::GlobalAvgPool));
        let classifier = vec![
            Layer::new(
                format!("{name}.classifier"),
                LayerSpec::Linear {
                    in_features: in_c,
                    out_features: spec.num_classes,
                },
            ),
            Layer::new(format!("{name}.softmax"), LayerSpec::Softmax),
        ];
        let confidence = vec![
            Layer::new(
                format!("{name}.confidence"),
                LayerSpec::Linear {
                    in_features: in_c,
                    out_features: 1,
                },
            ),
            Layer::new(format!("{name}.sigmoid"), LayerSpec::Sigmoid),
        ];
        let branch = Self {
            name,
            spec: spec.clone(),
            input_shape: input_shape.to_vec(),
            features,
            classifier,
            confidence,
        };
        let pooled = layers_output_shape(&branch.features, input_shape)?;
        if pooled != [in_c] {
            return Err(Error::shape(format!("`{}` pooled features", branch.name), format!("[{in_c}]"), &pooled));
        }
        Ok(branch)
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.features.iter().chain(&self.classifier).chain(&self.confidence)
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|l| l.num_params()).sum()
    }

    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        for layer in self.layers() {
            layer.init_params(&mut store, &mut rng)?;
        }
        Ok(store)
    }

    /// Records the branch on `tape`; returns `(h [batch, 1], y_hat [batch, K])`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        feature_map: Var,
        store: &ParameterStore<T>,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let shape = tape.value(feature_map).shape();
        if shape.len() != 4 || shape[1..] != self.input_shape[..] {
            return Err(Error::shape(
                format!("input of `{}`", self.name),
                format!("[batch, {:?}]", self.input_shape),
                shape,
            ));
        }
        let pooled = forward_layers(&self.features, tape, feature_map, store, mode)?;
        let y = forward_layers(&self.classifier, tape, pooled, store, mode)?;
        let h = forward_layers(&self.confidence, tape, pooled, store, mode)?;
        Ok((h, y))
    }
}

/// Lays out a ConvX branch and initializes its parameters.
pub fn build_convx(
    spec: &BranchSpec,
    input_shape: &[usize],
    name: &str,
    seed: u64,
) -> Result<(Branch, ParameterStore)> {
    let branch = Branch::new(spec, input_shape, name)?;
    let params = branch.init_params(seed)?;
    Ok((branch, params))
}

/// Inference-mode branch evaluation on a batched feature map.
pub fn branch_forward(branch: &Branch, params: &ParameterStore, feature_map: &Tensor) -> Result<Vec<BranchOutput>> {
    let mut tape = Tape::new();
    let x = tape.constant(feature_map.clone());
    let (h, y) = branch.forward(&mut tape, x, params, Mode::Eval)?;
    let k = branch.spec.num_classes;
    let hv = tape.value(h).data();
    Ok(tape
        .value(y)
        .data()
        .chunks(k)
        .zip(hv)
        .map(|(row, h)| BranchOutput {
            h: *h,
            y_hat: row.to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2_heads_have_expected_sizes() {
        let (b, params) = build_convx(&BranchSpec::conv(2, 10), &[16, 16, 16], "branch0", 1).unwrap();
        let out = branch_forward(&b, &params, &Tensor::full(&[2, 16, 16, 16], 0.3)).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].y_hat.len(), 10);
        assert!(out[0].h > 0.0 && out[0].h < 1.0);
    }

    #[test]
    fn conv1_and_conv2_differ_by_one_block() {
        let shape = [16, 8, 8];
        let c1 = Branch::new(&BranchSpec::conv(1, 10), &shape, "b").unwrap();
        let c2 = Branch::new(&BranchSpec::conv(2, 10), &shape, "b").unwrap();
        // one 3x3 conv without bias plus one batch norm (scale and shift)
        let block = 16 * 16 * 9 + 2 * 16;
        assert_eq!(c2.num_params() - c1.num_params(), block);
    }

    #[test]
    fn zero_blocks_rejected() {
        assert!(Branch::new(&BranchSpec::conv(0, 10), &[16, 8, 8], "b").is_err());
        assert!(Branch::new(&BranchSpec::conv(2, 10), &[16, 0, 8], "b").is_err());
    }

    #[test]
    fn zero_heads_give_uniform_and_half() {
        let (b, mut params) = build_convx(&BranchSpec::conv(2, 10), &[4, 6, 6], "branch0", 3).unwrap();
        for name in ["branch0.classifier.weight", "branch0.classifier.bias", "branch0.confidence.weight", "branch0.confidence.bias"] {
            params.entry_mut(name).unwrap().tensor.data_mut().fill(0.0);
        }
        let out = branch_forward(&b, &params, &Tensor::zeros(&[1, 4, 6, 6])).unwrap();
        assert_eq!(out[0].h, 0.5);
        assert!(out[0].y_hat.iter().all(|p| (*p - 0.1).abs() < 1e-7));
    }

    #[test]
    fn deterministic_under_seed() {
        let x = Tensor::from_slice(&[1, 4, 5, 5], &(0..100).map(|i| (i as f32 * 0.37).cos()).collect::<Vec<_>>()).unwrap();
        let (b1, p1) = build_convx(&BranchSpec::conv(2, 3), &[4, 5, 5], "branch0", 9).unwrap();
        let (b2, p2) = build_convx(&BranchSpec::conv(2, 3), &[4, 5, 5], "branch0", 9).unwrap();
        assert_eq!(branch_forward(&b1, &p1, &x).unwrap(), branch_forward(&b2, &p2, &x).unwrap());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (b, p) = build_convx(&BranchSpec::conv(1, 3), &[4, 5, 5], "branch0", 9).unwrap();
        assert!(branch_forward(&b, &p, &Tensor::zeros(&[1, 4, 6, 6])).is_err());
    }
}
