//! Layer descriptors and their forward pass on a [`Tape`].
//!
//! Shapes passed around here are per sample (`[c, h, w]` or `[features]`);
//! the batch axis is added by the tape ops.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_output_size, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm, running stats queued for update.
    Train,
    /// Running statistics in batch norm; nothing is mutated.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    #[serde(rename = "batchnorm2d")]
    BatchNorm2d { channels: usize },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d { kernel: usize, stride: usize },
    #[serde(rename = "avgpool2d")]
    AvgPool2d { kernel: usize, stride: usize },
    #[serde(rename = "avgpool_global")]
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Softmax,
    Sigmoid,
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
            bias: false,
        }
    }

    pub fn conv1x1(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: 1,
            stride,
            padding: 0,
            bias: false,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm2d { .. } => "batchnorm2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::AvgPool2d { .. } => "avgpool2d",
            LayerSpec::GlobalAvgPool => "avgpool_global",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Sigmoid => "sigmoid",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

impl Layer {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Self {
        Self {
            name: name.into(),
            spec,
        }
    }

    fn shape_err(&self, expected: impl Into<String>, actual: &[usize]) -> Error {
        Error::shape(format!("layer `{}` ({})", self.name, self.spec.kind()), expected, actual)
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match &self.spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if *in_channels == 0 || *out_channels == 0 || *kernel == 0 || *stride == 0 {
                    return Err(Error::invalid(format!(
                        "layer `{}`: conv2d sizes must be positive",
                        self.name
                    )));
                }
                let expected = format!("[{in_channels}, h, w]");
                match *input {
                    [c, h, w] if c == *in_channels => {
                        match (
                            conv_output_size(h, *kernel, *stride, *padding),
                            conv_output_size(w, *kernel, *stride, *padding),
                        ) {
                            (Some(ho), Some(wo)) => Ok(vec![*out_channels, ho, wo]),
                            _ => Err(self.shape_err(format!("{expected} with h, w >= {kernel}"), input)),
                        }
                    }
                    _ => Err(self.shape_err(expected, input)),
                }
            }
            LayerSpec::BatchNorm2d { channels } => match *input {
                [c, _, _] if c == *channels => Ok(input.to_vec()),
                _ => Err(self.shape_err(format!("[{channels}, h, w]"), input)),
            },
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::Softmax => match *input {
                [_] => Ok(input.to_vec()),
                _ => Err(self.shape_err("[classes]", input)),
            },
            LayerSpec::MaxPool2d { kernel, stride } | LayerSpec::AvgPool2d { kernel, stride } => match *input {
                [c, h, w]
                    if *kernel > 0
                        && *stride > 0
                        && h >= *kernel
                        && w >= *kernel
                        && (h - kernel) % stride == 0
                        && (w - kernel) % stride == 0 =>
                {
                    Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
                }
                _ => Err(self.shape_err(
                    format!("[c, h, w] tiled exactly by kernel {kernel} stride {stride}"),
                    input,
                )),
            },
            LayerSpec::GlobalAvgPool => match *input {
                [c, _, _] => Ok(vec![c]),
                _ => Err(self.shape_err("[c, h, w]", input)),
            },
            LayerSpec::Linear {
                in_features,
                out_features,
            } => match *input {
                [f] if f == *in_features => Ok(vec![*out_features]),
                _ => Err(self.shape_err(format!("[{in_features}]"), input)),
            },
        }
    }

    /// Trainable parameter names and shapes owned by this layer.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let n = &self.name;
        match &self.spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![(format!("{n}.weight"), vec![*out_channels, *in_channels, *kernel, *kernel])];
                if *bias {
                    v.push((format!("{n}.bias"), vec![*out_channels]));
                }
                v
            }
            LayerSpec::BatchNorm2d { channels } => vec![
                (format!("{n}.weight"), vec![*channels]),
                (format!("{n}.bias"), vec![*channels]),
            ],
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![
                (format!("{n}.weight"), vec![*out_features, *in_features]),
                (format!("{n}.bias"), vec![*out_features]),
            ],
            _ => Vec::new(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// He (fan-in) initialization for weights, zero biases, unit batch-norm scale.
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        let n = &self.name;
        match &self.spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                let shape = [*out_channels, *in_channels, *kernel, *kernel];
                store.insert(format!("{n}.weight"), he_normal(&shape, fan_in, rng))?;
                if *bias {
                    store.insert(format!("{n}.bias"), Tensor::zeros(&[*out_channels]))?;
                }
            }
            LayerSpec::BatchNorm2d { channels } => {
                store.insert(format!("{n}.weight"), Tensor::full(&[*channels], 1.0))?;
                store.insert(format!("{n}.bias"), Tensor::zeros(&[*channels]))?;
                store.insert_buffer(format!("{n}.running_mean"), Tensor::zeros(&[*channels]))?;
                store.insert_buffer(format!("{n}.running_var"), Tensor::full(&[*channels], 1.0))?;
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                store.insert(
                    format!("{n}.weight"),
                    he_normal(&[*out_features, *in_features], *in_features, rng),
                )?;
                store.insert(format!("{n}.bias"), Tensor::zeros(&[*out_features]))?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Records this layer on `tape`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        store: &ParameterStore<T>,
        mode: Mode,
    ) -> Result<Var> {
        let shape = tape.value(input).shape().to_vec();
        if shape.is_empty() {
            return Err(self.shape_err("[batch, ...]", &shape));
        }
        self.output_shape(&shape[1..])?;
        let n = &self.name;
        match &self.spec {
            LayerSpec::Conv2d {
                stride, padding, bias, ..
            } => {
                let w = tape.param(store, &format!("{n}.weight"))?;
                let b = if *bias {
                    Some(tape.param(store, &format!("{n}.bias"))?)
                } else {
                    None
                };
                tape.conv2d(input, w, b, *stride, *padding)
            }
            LayerSpec::BatchNorm2d { .. } => {
                let g = tape.param(store, &format!("{n}.weight"))?;
                let b = tape.param(store, &format!("{n}.bias"))?;
                match mode {
                    Mode::Train => tape.batch_norm(input, g, b, None, n),
                    Mode::Eval => {
                        let rm = store.buffer(&format!("{n}.running_mean"))?.data();
                        let rv = store.buffer(&format!("{n}.running_var"))?.data();
                        tape.batch_norm(input, g, b, Some((rm, rv)), n)
                    }
                }
            }
            LayerSpec::Relu => Ok(tape.relu(input)),
            LayerSpec::MaxPool2d { kernel, stride } => tape.max_pool2d(input, *kernel, *stride),
            LayerSpec::AvgPool2d { kernel, stride } => tape.avg_pool2d(input, *kernel, *stride),
            LayerSpec::GlobalAvgPool => tape.global_avg_pool(input),
            LayerSpec::Linear { .. } => {
                let w = tape.param(store, &format!("{n}.weight"))?;
                let b = tape.param(store, &format!("{n}.bias"))?;
                tape.linear(input, w, Some(b))
            }
            LayerSpec::Softmax => tape.softmax(input),
            LayerSpec::Sigmoid => Ok(tape.sigmoid(input)),
        }
    }
}

fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| normal.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Runs a sequence of layers.
pub fn forward_layers<T: Scalar>(
    layers: &[Layer],
    tape: &mut Tape<T>,
    mut x: Var,
    store: &ParameterStore<T>,
    mode: Mode,
) -> Result<Var> {
    for layer in layers {
        x = layer.forward(tape, x, store, mode)?;
    }
    Ok(x)
}

pub fn layers_output_shape(layers: &[Layer], input: &[usize]) -> Result<Vec<usize>> {
    layers
        .iter()
        .try_fold(input.to_vec(), |shape, layer| layer.output_shape(&shape))
}

/// One-shot inference-mode forward of a single layer on a batched input.
pub fn forward(layer: &Layer, input: &Tensor, params: &ParameterStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = layer.forward(&mut tape, x, params, Mode::Eval)?;
    Ok(tape.value(y).clone())
}

/// `-ln(max(prediction[label], 1e-12))` for a single distribution.
pub fn cross_entropy(prediction: &[f32], label: usize) -> Result<f32> {
    if label >= prediction.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            prediction.len()
        )));
    }
    if prediction.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::invalid("prediction has negative or NaN entries"));
    }
    let sum: f64 = prediction.iter().map(|p| *p as f64).sum();
    if (sum - 1.0).abs() > 1e-5 {
        return Err(Error::NotNormalized { sum });
    }
    Ok(-(prediction[label].max(crate::autodiff::PROB_FLOOR as f32)).ln())
}
