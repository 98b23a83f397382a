//! Tape-based reverse-mode differentiation over the handful of ops the
//! backbones, branches and the early-exit loss need.
//!
//! A [`Tape`] records every op as a node holding its forward value. Nodes
//! only take part in the backward sweep when at least one of their inputs
//! requires a gradient, so a frozen backbone costs nothing on the way back:
//! propagation stops at the first node above the stitching point.

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Lower bound applied to probabilities inside the log of the cross entropy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Softmax(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    Mix {
        gate: Var,
        a: Var,
        b: Var,
    },
    CrossEntropy {
        pred: Var,
        labels: Vec<usize>,
    },
    Mean(Var),
    Scale(Var, T),
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    param: Option<String>,
}

/// Batch statistics observed by a training-mode batch norm, to be folded
/// into the running buffers by whoever owns the parameters.
#[derive(Clone, Debug)]
pub struct BnUpdate<T: Scalar> {
    pub layer: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    spent: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

/// Gradients from one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || size + 2 * padding < kernel {
        return None;
    }
    Some((size + 2 * padding - kernel) / stride + 1)
}

fn dims4(t: &Tensor<impl Scalar>, ctx: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::shape(ctx, "[batch, channels, height, width]", t.shape())),
    }
}

fn dims2(t: &Tensor<impl Scalar>, ctx: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [b, f] => Ok((b, f)),
        _ => Err(Error::shape(ctx, "[batch, features]", t.shape())),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    s: usize,
    p: usize,
    (ho, wo): (usize, usize),
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oh in 0..ho {
                    let ih = (oh * s + ki) as isize - p as isize;
                    let out = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let line = &src[ih as usize * w..(ih as usize + 1) * w];
                    if s == 1 {
                        // contiguous run of in-bounds columns
                        let lo = p.saturating_sub(kj).min(wo);
                        let hi = (w + p).saturating_sub(kj).min(wo).max(lo);
                        out.fill(T::zero());
                        if lo < hi {
                            out[lo..hi].copy_from_slice(&line[lo + kj - p..hi + kj - p]);
                        }
                        continue;
                    }
                    for (ow, o) in out.iter_mut().enumerate() {
                        let iw = (ow * s + kj) as isize - p as isize;
                        *o = if iw >= 0 && iw < w as isize {
                            line[iw as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    s: usize,
    p: usize,
    (ho, wo): (usize, usize),
    dx: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oh in 0..ho {
                    let ih = (oh * s + ki) as isize - p as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    if s == 1 {
                        let lo = p.saturating_sub(kj).min(wo);
                        let hi = (w + p).saturating_sub(kj).min(wo).max(lo);
                        if lo >= hi {
                            continue;
                        }
                        let line = &mut dst[ih as usize * w..(ih as usize + 1) * w];
                        for (d, v) in line[lo + kj - p..hi + kj - p].iter_mut().zip(&src[oh * wo + lo..oh * wo + hi]) {
                            *d += *v;
                        }
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * s + kj) as isize - p as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[ih as usize * w + iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            spent: false,
            bn_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf bound to a named parameter; it requires a gradient unless frozen.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        let entry = store.entry(name)?;
        let mut value = entry.tensor.clone();
        value.grad = None;
        self.nodes.push(Node {
            value,
            requires_grad: !entry.frozen,
            op: Op::Leaf,
            param: Some(name.to_string()),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let wt = &self.nodes[weight.0].value;
        let (b, ci, h, w) = dims4(x, "conv2d input")?;
        let (co, wci, k) = match *wt.shape() {
            [co, wci, k1, k2] if k1 == k2 => (co, wci, k1),
            _ => return Err(Error::shape("conv2d weight", "[out, in, k, k]", wt.shape())),
        };
        if wci != ci {
            return Err(Error::shape(
                "conv2d input",
                format!("{wci} channels to match weight {:?}", wt.shape()),
                x.shape(),
            ));
        }
        let (ho, wo) = match (
            conv_output_size(h, k, stride, padding),
            conv_output_size(w, k, stride, padding),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::shape(
                    "conv2d input",
                    format!("spatial size >= kernel {k} after padding {padding}"),
                    x.shape(),
                ))
            }
        };
        if let Some(bv) = bias {
            if self.nodes[bv.0].value.shape() != [co] {
                return Err(Error::shape("conv2d bias", format!("[{co}]"), self.nodes[bv.0].value.shape()));
            }
        }
        let ckk = ci * k * k;
        let plane = ho * wo;
        let mut out = vec![T::zero(); b * co * plane];
        let mut cols = vec![T::zero(); ckk * plane];
        for s in 0..b {
            let xs = &x.data()[s * ci * h * w..(s + 1) * ci * h * w];
            im2col(xs, (ci, h, w), k, stride, padding, (ho, wo), &mut cols);
            let os = &mut out[s * co * plane..(s + 1) * co * plane];
            T::gemm(
                co,
                ckk,
                plane,
                wt.data(),
                (ckk as isize, 1),
                &cols,
                (plane as isize, 1),
                os,
                (plane as isize, 1),
                false,
            );
            if let Some(bv) = bias {
                let bd = self.nodes[bv.0].value.data();
                for (o, chunk) in os.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bd[o]);
                }
            }
        }
        let value = Tensor::new(vec![b, co, ho, wo], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                kernel: k,
                stride,
                padding,
            },
            &inputs,
        ))
    }

    /// Batch norm over `[batch, channels, h, w]`.
    ///
    /// With `running = None` the batch statistics normalize the input and a
    /// [`BnUpdate`] for `layer` is queued; otherwise the given running
    /// `(mean, var)` are used and nothing is queued.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        layer: &str,
    ) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let (b, c, h, w) = dims4(x, layer)?;
        for v in [gamma, beta] {
            if self.nodes[v.0].value.shape() != [c] {
                return Err(Error::shape(
                    format!("{layer} affine"),
                    format!("[{c}]"),
                    self.nodes[v.0].value.shape(),
                ));
            }
        }
        let plane = h * w;
        let count = b * plane;
        let eps = T::lit(BN_EPS);
        let (mean, var_biased) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape(format!("{layer} running stats"), format!("[{c}]"), &[rm.len()]));
                }
                (rm.to_vec(), rv.to_vec())
            }
            None => {
                let n = T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for s in 0..b {
                        let base = (s * c + ch) * plane;
                        acc += x.data()[base..base + plane].iter().copied().sum::<T>();
                    }
                    mean[ch] = acc / n;
                    let mut sq = T::zero();
                    for s in 0..b {
                        let base = (s * c + ch) * plane;
                        sq += x.data()[base..base + plane]
                            .iter()
                            .map(|v| (*v - mean[ch]) * (*v - mean[ch]))
                            .sum::<T>();
                    }
                    var[ch] = sq / n;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let g = self.nodes[gamma.0].value.data();
        let be = self.nodes[beta.0].value.data();
        let mut out = vec![T::zero(); x.len()];
        for s in 0..b {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                let (m, is, gg, bb) = (mean[ch], inv_std[ch], g[ch], be[ch]);
                for i in base..base + plane {
                    out[i] = gg * (x.data()[i] - m) * is + bb;
                }
            }
        }
        let batch_stats = running.is_none();
        if batch_stats {
            let unbiased = if count > 1 {
                let f = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
                var_biased.iter().map(|v| *v * f).collect()
            } else {
                var_biased.clone()
            };
            self.bn_updates.push(BnUpdate {
                layer: layer.to_string(),
                mean: mean.clone(),
                var: unbiased,
            });
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let data = x.data().iter().map(|v| v.max(T::zero())).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(input), &[input])
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let (b, c, h, w) = dims4(x, "maxpool2d input")?;
        let (ho, wo) = pool_output(h, w, kernel, stride, x.shape())?;
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(out.capacity());
        for bc in 0..b * c {
            let base = bc * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = base + oh * stride * w + ow * stride;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let idx = base + (oh * stride + ki) * w + ow * stride + kj;
                            if x.data()[idx] > x.data()[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![b, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, &[input]))
    }

    pub fn avg_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let (b, c, h, w) = dims4(x, "avgpool2d input")?;
        let (ho, wo) = pool_output(h, w, kernel, stride, x.shape())?;
        let scale = T::one() / T::from_usize(kernel * kernel).unwrap();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        for bc in 0..b * c {
            let base = bc * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = T::zero();
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            acc += x.data()[base + (oh * stride + ki) * w + ow * stride + kj];
                        }
                    }
                    out.push(acc * scale);
                }
            }
        }
        let value = Tensor::new(vec![b, c, ho, wo], out)?;
        Ok(self.push(value, Op::AvgPool { input, kernel, stride }, &[input]))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let (b, c, h, w) = dims4(x, "global average pool input")?;
        let plane = h * w;
        let scale = T::one() / T::from_usize(plane).unwrap();
        let out = x
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().copied().sum::<T>() * scale)
            .collect();
        let value = Tensor::new(vec![b, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(input), &[input]))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let wt = &self.nodes[weight.0].value;
        let (b, fin) = dims2(x, "linear input")?;
        let (fout, win) = match *wt.shape() {
            [o, i] => (o, i),
            _ => return Err(Error::shape("linear weight", "[out, in]", wt.shape())),
        };
        if win != fin {
            return Err(Error::shape(
                "linear input",
                format!("{win} features to match weight {:?}", wt.shape()),
                x.shape(),
            ));
        }
        let bias_data = match bias {
            Some(bv) => {
                let t = &self.nodes[bv.0].value;
                if t.shape() != [fout] {
                    return Err(Error::shape("linear bias", format!("[{fout}]"), t.shape()));
                }
                Some(t.data())
            }
            None => None,
        };
        // Plain dot products keep each output independent of the batch size.
        let mut out = vec![T::zero(); b * fout];
        for s in 0..b {
            let xr = &x.data()[s * fin..(s + 1) * fin];
            for o in 0..fout {
                let wr = &wt.data()[o * fin..(o + 1) * fin];
                let mut acc = T::zero();
                for (a, c) in xr.iter().zip(wr) {
                    acc += *a * *c;
                }
                out[s * fout + o] = acc + bias_data.map_or(T::zero(), |bd| bd[o]);
            }
        }
        let value = Tensor::new(vec![b, fout], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(value, Op::Linear { input, weight, bias }, &inputs))
    }

    /// Row-wise softmax over the last axis of a `[batch, k]` input.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let (_, k) = dims2(x, "softmax input")?;
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|v| (*v - max).exp()).collect();
            let total: T = exps.iter().copied().sum();
            out.extend(exps.into_iter().map(|e| e / total));
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(input), &[input]))
    }

    /// Logistic sigmoid, clamped to `[eps, 1 - eps]` so outputs stay strictly
    /// inside the unit interval at the working precision.
    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let (lo, hi) = sigmoid_bounds::<T>();
        let data = x
            .data()
            .iter()
            .map(|v| (T::one() / (T::one() + (-*v).exp())).max(lo).min(hi))
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Sigmoid(input), &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?}", va.shape()), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Concatenates along axis 1 (channels for 4-D, features for 2-D).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .nodes
            .get(parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?.0)
            .unwrap()
            .value
            .shape()
            .to_vec();
        let batch = first[0];
        let tail: Vec<usize> = first[2..].to_vec();
        let mut channels = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len() || s[0] != batch || s[2..] != tail[..] {
                return Err(Error::shape("concat", format!("[{batch}, _, {tail:?}]"), s));
            }
            channels += s[1];
        }
        let inner: usize = tail.iter().product();
        let mut out = Vec::with_capacity(batch * channels * inner);
        for s in 0..batch {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[s * c * inner..(s + 1) * c * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// `gate * a + (1 - gate) * b` with a `[batch, 1]` gate broadcast over
    /// the columns of `[batch, k]` operands.
    pub fn mix(&mut self, gate: Var, a: Var, b: Var) -> Result<Var> {
        let g = &self.nodes[gate.0].value;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (batch, k) = dims2(va, "mix operand")?;
        if vb.shape() != va.shape() {
            return Err(Error::shape("mix operand", format!("{:?}", va.shape()), vb.shape()));
        }
        if g.shape() != [batch, 1] {
            return Err(Error::shape("mix gate", format!("[{batch}, 1]"), g.shape()));
        }
        let mut out = Vec::with_capacity(batch * k);
        for s in 0..batch {
            let h = g.data()[s];
            let rest = T::one() - h;
            for j in 0..k {
                out.push(h * va.data()[s * k + j] + rest * vb.data()[s * k + j]);
            }
        }
        let value = Tensor::new(vec![batch, k], out)?;
        Ok(self.push(value, Op::Mix { gate, a, b }, &[gate, a, b]))
    }

    /// Per-sample `-ln(max(p[label], floor))` for a `[batch, k]` distribution.
    pub fn cross_entropy(&mut self, pred: Var, labels: &[usize]) -> Result<Var> {
        let p = &self.nodes[pred.0].value;
        let (batch, k) = dims2(p, "cross entropy prediction")?;
        if labels.len() != batch {
            return Err(Error::shape("cross entropy labels", format!("{batch} labels"), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let floor = T::lit(PROB_FLOOR);
        let out = labels
            .iter()
            .enumerate()
            .map(|(s, l)| -p.data()[s * k + l].max(floor).ln())
            .collect();
        let value = Tensor::new(vec![batch], out)?;
        Ok(self.push(
            value,
            Op::CrossEntropy {
                pred,
                labels: labels.to_vec(),
            },
            &[pred],
        ))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let m = x.data().iter().copied().sum::<T>() / T::from_usize(x.len()).unwrap();
        self.push(Tensor::scalar(m), Op::Mean(input), &[input])
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let x = &self.nodes[input.0].value;
        let data = x.data().iter().map(|v| *v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(input, factor), &[input])
    }

    /// Elementwise sum of same-shaped values.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("sum of nothing"))?;
        let shape = self.nodes[first.0].value.shape().to_vec();
        let mut acc = vec![T::zero(); self.nodes[first.0].value.len()];
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("sum", format!("{shape:?}"), t.shape()));
            }
            acc.iter_mut().zip(t.data()).for_each(|(a, b)| *a += *b);
        }
        let value = Tensor::new(shape, acc)?;
        Ok(self.push(value, Op::Sum(parts.to_vec()), parts))
    }

    /// Runs the backward sweep from a scalar `loss` and accumulates the
    /// gradient of every non-frozen parameter leaf into `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParameterStore<T>) -> Result<Gradients<T>> {
        if self.spent {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].value.shape() != [1] {
            return Err(Error::shape("backward", "scalar loss [1]", self.nodes[loss.0].value.shape()));
        }
        self.spent = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            log::warn!("backward on a recording with no trainable parameters; no gradients populated");
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(name), Some(g)) = (&node.param, g) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        macro_rules! with_slot {
            ($v:expr, |$d:ident| $body:expr) => {
                if let Some($d) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                kernel,
                stride,
                padding,
            } => {
                let x = &nodes[input.0].value;
                let wt = &nodes[weight.0].value;
                let (b, ci, h, w) = dims4(x, "").unwrap();
                let (co, ho, wo) = (out.shape()[1], out.shape()[2], out.shape()[3]);
                let (k, s, p) = (*kernel, *stride, *padding);
                let ckk = ci * k * k;
                let plane = ho * wo;
                let need_w = nodes[weight.0].requires_grad;
                let need_x = nodes[input.0].requires_grad;
                let mut cols = vec![T::zero(); ckk * plane];
                let mut dcols = vec![T::zero(); ckk * plane];
                for sm in 0..b {
                    let gy = &g[sm * co * plane..(sm + 1) * co * plane];
                    if need_w {
                        let xs = &x.data()[sm * ci * h * w..(sm + 1) * ci * h * w];
                        im2col(xs, (ci, h, w), k, s, p, (ho, wo), &mut cols);
                        with_slot!(*weight, |dw| T::gemm(
                            co,
                            plane,
                            ckk,
                            gy,
                            (plane as isize, 1),
                            &cols,
                            (1, plane as isize),
                            dw,
                            (ckk as isize, 1),
                            true,
                        ));
                    }
                    if need_x {
                        T::gemm(
                            ckk,
                            co,
                            plane,
                            wt.data(),
                            (1, ckk as isize),
                            gy,
                            (plane as isize, 1),
                            &mut dcols,
                            (plane as isize, 1),
                            false,
                        );
                        with_slot!(*input, |dx| col2im(
                            &dcols,
                            (ci, h, w),
                            k,
                            s,
                            p,
                            (ho, wo),
                            &mut dx[sm * ci * h * w..(sm + 1) * ci * h * w],
                        ));
                    }
                    if let Some(bv) = bias {
                        with_slot!(*bv, |db| for (o, chunk) in gy.chunks(plane).enumerate() {
                            db[o] += chunk.iter().copied().sum::<T>();
                        });
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let x = &nodes[input.0].value;
                let (b, c, h, w) = dims4(x, "").unwrap();
                let plane = h * w;
                let gam = nodes[gamma.0].value.data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for sm in 0..b {
                    for ch in 0..c {
                        let base = (sm * c + ch) * plane;
                        for idx in base..base + plane {
                            let xhat = (x.data()[idx] - mean[ch]) * inv_std[ch];
                            sum_dy[ch] += g[idx];
                            sum_dy_xhat[ch] += g[idx] * xhat;
                        }
                    }
                }
                with_slot!(*gamma, |dg| for ch in 0..c {
                    dg[ch] += sum_dy_xhat[ch];
                });
                with_slot!(*beta, |db| for ch in 0..c {
                    db[ch] += sum_dy[ch];
                });
                let n = T::from_usize(b * plane).unwrap();
                with_slot!(*input, |dx| for sm in 0..b {
                    for ch in 0..c {
                        let base = (sm * c + ch) * plane;
                        let scale = gam[ch] * inv_std[ch];
                        for idx in base..base + plane {
                            if *batch_stats {
                                let xhat = (x.data()[idx] - mean[ch]) * inv_std[ch];
                                dx[idx] += scale * (g[idx] - sum_dy[ch] / n - xhat * sum_dy_xhat[ch] / n);
                            } else {
                                dx[idx] += scale * g[idx];
                            }
                        }
                    }
                });
            }
            Op::Relu(input) => {
                let x = nodes[input.0].value.data();
                with_slot!(*input, |dx| for (j, d) in dx.iter_mut().enumerate() {
                    if x[j] > T::zero() {
                        *d += g[j];
                    }
                });
            }
            Op::MaxPool { input, argmax } => {
                with_slot!(*input, |dx| for (j, src) in argmax.iter().enumerate() {
                    dx[*src] += g[j];
                });
            }
            Op::AvgPool { input, kernel, stride } => {
                let (b, c, h, w) = dims4(&nodes[input.0].value, "").unwrap();
                let (ho, wo) = (out.shape()[2], out.shape()[3]);
                let scale = T::one() / T::from_usize(kernel * kernel).unwrap();
                with_slot!(*input, |dx| for bc in 0..b * c {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let gv = g[(bc * ho + oh) * wo + ow] * scale;
                            for ki in 0..*kernel {
                                for kj in 0..*kernel {
                                    dx[bc * h * w + (oh * stride + ki) * w + ow * stride + kj] += gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(input) => {
                let shape = nodes[input.0].value.shape();
                let plane = shape[2] * shape[3];
                let scale = T::one() / T::from_usize(plane).unwrap();
                with_slot!(*input, |dx| for (j, chunk) in dx.chunks_mut(plane).enumerate() {
                    let gv = g[j] * scale;
                    chunk.iter_mut().for_each(|d| *d += gv);
                });
            }
            Op::Linear { input, weight, bias } => {
                let x = &nodes[input.0].value;
                let wt = &nodes[weight.0].value;
                let (b, fin) = dims2(x, "").unwrap();
                let fout = wt.shape()[0];
                with_slot!(*input, |dx| for s in 0..b {
                    for o in 0..fout {
                        let gv = g[s * fout + o];
                        let wr = &wt.data()[o * fin..(o + 1) * fin];
                        for (d, wv) in dx[s * fin..(s + 1) * fin].iter_mut().zip(wr) {
                            *d += gv * *wv;
                        }
                    }
                });
                with_slot!(*weight, |dw| for s in 0..b {
                    let xr = &x.data()[s * fin..(s + 1) * fin];
                    for o in 0..fout {
                        let gv = g[s * fout + o];
                        for (d, xv) in dw[o * fin..(o + 1) * fin].iter_mut().zip(xr) {
                            *d += gv * *xv;
                        }
                    }
                });
                if let Some(bv) = bias {
                    with_slot!(*bv, |db| for s in 0..b {
                        for o in 0..fout {
                            db[o] += g[s * fout + o];
                        }
                    });
                }
            }
            Op::Softmax(input) => {
                let k = out.shape()[1];
                with_slot!(*input, |dx| for (s, y) in out.data().chunks(k).enumerate() {
                    let gy = &g[s * k..(s + 1) * k];
                    let dot: T = y.iter().zip(gy).map(|(a, b)| *a * *b).sum();
                    for j in 0..k {
                        dx[s * k + j] += y[j] * (gy[j] - dot);
                    }
                });
            }
            Op::Sigmoid(input) => {
                let (lo, hi) = sigmoid_bounds::<T>();
                with_slot!(*input, |dx| for (j, y) in out.data().iter().enumerate() {
                    if *y > lo && *y < hi {
                        dx[j] += g[j] * *y * (T::one() - *y);
                    }
                });
            }
            Op::Add(a, b) => {
                with_slot!(*a, |da| da.iter_mut().zip(g).for_each(|(d, v)| *d += *v));
                with_slot!(*b, |db| db.iter_mut().zip(g).for_each(|(d, v)| *d += *v));
            }
            Op::Concat(parts) => {
                let batch = out.shape()[0];
                let inner: usize = out.shape()[2..].iter().product();
                let total_c = out.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let c = nodes[p.0].value.shape()[1];
                    with_slot!(*p, |dp| for s in 0..batch {
                        let src = &g[(s * total_c + offset) * inner..(s * total_c + offset + c) * inner];
                        dp[s * c * inner..(s + 1) * c * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, v)| *d += *v);
                    });
                    offset += c;
                }
            }
            Op::Mix { gate, a, b } => {
                let gv = nodes[gate.0].value.data();
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let k = out.shape()[1];
                with_slot!(*gate, |dg| for s in 0..gv.len() {
                    let mut acc = T::zero();
                    for j in 0..k {
                        acc += g[s * k + j] * (va[s * k + j] - vb[s * k + j]);
                    }
                    dg[s] += acc;
                });
                with_slot!(*a, |da| for (j, d) in da.iter_mut().enumerate() {
                    *d += g[j] * gv[j / k];
                });
                with_slot!(*b, |db| for (j, d) in db.iter_mut().enumerate() {
                    *d += g[j] * (T::one() - gv[j / k]);
                });
            }
            Op::CrossEntropy { pred, labels } => {
                let p = nodes[pred.0].value.data();
                let k = nodes[pred.0].value.shape()[1];
                let floor = T::lit(PROB_FLOOR);
                with_slot!(*pred, |dp| for (s, l) in labels.iter().enumerate() {
                    let pv = p[s * k + l];
                    if pv > floor {
                        dp[s * k + l] -= g[s] / pv;
                    }
                });
            }
            Op::Mean(input) => {
                let n = T::from_usize(nodes[input.0].value.len()).unwrap();
                with_slot!(*input, |dx| dx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Scale(input, factor) => {
                with_slot!(*input, |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += *v * *factor));
            }
            Op::Sum(parts) => {
                for p in parts {
                    with_slot!(*p, |dp| dp.iter_mut().zip(g).for_each(|(d, v)| *d += *v));
                }
            }
        }
    }
}

/// Lazily zero-initialized gradient buffer of `v`, or `None` when `v` does
/// not take part in the backward sweep.
fn grad_slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]))
}

pub(crate) fn sigmoid_bounds<T: Scalar>() -> (T, T) {
    (T::epsilon(), T::one() - T::epsilon())
}

fn pool_output(h: usize, w: usize, kernel: usize, stride: usize, shape: &[usize]) -> Result<(usize, usize)> {
    if kernel == 0 || stride == 0 || h < kernel || w < kernel || !(h - kernel).is_multiple_of(stride) || !(w - kernel).is_multiple_of(stride) {
        return Err(Error::shape(
            "pool input",
            format!("spatial size tiled exactly by kernel {kernel} stride {stride}"),
            shape,
        ));
    }
    Ok(((h - kernel) / stride + 1, (w - kernel) / stride + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(shape, data).unwrap()
    }

    #[test]
    fn linear_sum_gradient_is_input() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("w", t(&[1, 3], &[0.5, -1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let w = tape.param(&store, "w").unwrap();
        let y = tape.linear(x, w, None).unwrap();
        let loss = tape.mean(y);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.tensor("w").unwrap().grad.as_deref(), Some(&[1.0, 2.0, 3.0][..]));
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("w", t(&[1], &[1.0])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let loss = tape.scale(w, 2.0);
        tape.backward(loss, &mut store).unwrap();
        assert!(matches!(tape.backward(loss, &mut store), Err(Error::BackwardTwice)));
    }

    #[test]
    fn frozen_graph_populates_nothing() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("backbone.w", t(&[1], &[1.0])).unwrap();
        store.freeze(crate::params::Scope::Backbone);
        let mut tape = Tape::new();
        let w = tape.param(&store, "backbone.w").unwrap();
        let loss = tape.scale(w, 2.0);
        let grads = tape.backward(loss, &mut store).unwrap();
        assert!(grads.get(w).is_none());
        assert!(store.tensor("backbone.w").unwrap().grad.is_none());
    }

    #[test]
    fn identity_kernel_convolution_is_identity() {
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let map: Vec<f64> = (0..25).map(|v| v as f64 * 0.3 - 2.0).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 5, 5], &map));
        let w = tape.constant(t(&[1, 1, 3, 3], &k));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), &map[..]);
    }

    #[test]
    fn strided_conv_output_arithmetic() {
        assert_eq!(conv_output_size(32, 3, 2, 1), Some(16));
        assert_eq!(conv_output_size(32, 1, 2, 0), Some(16));
        assert_eq!(conv_output_size(2, 5, 1, 1), None);
    }

    #[test]
    fn mix_with_hard_gate_is_exact() {
        let mut tape = Tape::new();
        let g = tape.constant(t(&[2, 1], &[1.0, 0.0]));
        let a = tape.constant(t(&[2, 2], &[0.3, 0.7, 0.1, 0.9]));
        let b = tape.constant(t(&[2, 2], &[0.6, 0.4, 0.2, 0.8]));
        let y = tape.mix(g, a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.3, 0.7, 0.2, 0.8]);
    }

    #[test]
    fn sigmoid_saturates_strictly_inside_unit_interval() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_slice(&[3], &[-200.0, 0.0, 200.0]).unwrap());
        let y = tape.sigmoid(x);
        let v = tape.value(y).data();
        assert!(v[0] > 0.0 && v[2] < 1.0);
        assert_eq!(v[1], 0.5);
    }
}
