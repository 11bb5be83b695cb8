//! The autodiff tape.

use crate::error::{Error, Result};

use super::conv::{self, ConvGeom};
use super::{Scalar, Tensor};

/// Normalization epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics produced by a training-mode normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running averages.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv {
        input: NodeId,
        weight: NodeId,
        geom: ConvGeom,
    },
    Norm {
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// Batch statistics (training) or frozen statistics (eval).
        batch: bool,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, T),
    Upsample {
        input: NodeId,
    },
    GlobalAvgPool(NodeId),
    ChannelMul {
        x: NodeId,
        gate: NodeId,
    },
    BiasAdd {
        x: NodeId,
        bias: NodeId,
    },
    Concat(Vec<NodeId>),
    ChannelPad(NodeId),
    Mix {
        inputs: Vec<(usize, NodeId)>,
        weights: NodeId,
    },
    Softmax {
        logits: NodeId,
        mask: Vec<bool>,
        temperature: T,
    },
    DotConst {
        input: NodeId,
        coeffs: Vec<T>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a node, or `None` when no gradient reached it.
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<T>> {
        self.grads[id.0].take()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(a: [usize; 4], b: [usize; 4], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Half-pixel source coordinate: (lower index, upper index, upper weight).
fn bilinear_source(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> [usize; 4] {
        self.nodes[id.0].value.shape()
    }

    /// Convolution with weights (c_out, c_in / groups, k, k).
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, stride: usize, dilation: usize, groups: usize, padding: usize) -> Result<NodeId> {
        let geom = ConvGeom::new(self.shape(input), self.shape(weight), stride, dilation, groups, padding)?;
        let out = conv::forward(&geom, self.value(input).data(), self.value(weight).data());
        let value = Tensor::new(geom.out_shape(), out)?;
        Ok(self.push(value, Op::Conv { input, weight, geom }, &[input, weight]))
    }

    /// Convolution with "same" padding `dilation * (k - 1) / 2`.
    pub fn conv2d_same(&mut self, input: NodeId, weight: NodeId, stride: usize, dilation: usize, groups: usize) -> Result<NodeId> {
        let k = self.shape(weight)[2];
        self.conv2d(input, weight, stride, dilation, groups, dilation * (k - 1) / 2)
    }

    fn check_channel_params(&self, input: NodeId, params: &[NodeId]) -> Result<usize> {
        let c = self.shape(input)[1];
        for &p in params {
            if self.value(p).numel() != c {
                return Err(Error::Shape(format!(
                    "per-channel parameter of length {} for {c} channels",
                    self.value(p).numel()
                )));
            }
        }
        Ok(c)
    }

    /// Training-mode normalization over (batch, row, column) per channel.
    pub fn batchnorm_train(&mut self, input: NodeId, scale: NodeId, shift: NodeId) -> Result<(NodeId, BatchStats<T>)> {
        let c = self.check_channel_params(input, &[scale, shift])?;
        let [b, _, h, w] = self.shape(input);
        let plane = h * w;
        let n = b * plane;
        let x = self.value(input).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let nt = T::cast_from(n as f64);
        for ch in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                let off = (bi * c + ch) * plane;
                for &v in &x[off..off + plane] {
                    s += v;
                }
            }
            let m = s / nt;
            let mut ss = T::zero();
            for bi in 0..b {
                let off = (bi * c + ch) * plane;
                for &v in &x[off..off + plane] {
                    ss += (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            var[ch] = ss / nt;
        }
        let eps = T::cast_from(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (value, xhat) = self.normalize(input, scale, shift, &mean, &inv_std);
        let unbiased = if n > 1 {
            let k = T::cast_from(n as f64 / (n - 1) as f64);
            var.iter().map(|&v| v * k).collect()
        } else {
            var.clone()
        };
        let id = self.push(
            value,
            Op::Norm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                batch: true,
            },
            &[input, scale, shift],
        );
        Ok((id, BatchStats { mean, var: unbiased }))
    }

    /// Eval-mode normalization with frozen statistics.
    pub fn batchnorm_eval(&mut self, input: NodeId, scale: NodeId, shift: NodeId, mean: &[T], var: &[T]) -> Result<NodeId> {
        let c = self.check_channel_params(input, &[scale, shift])?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!("running statistics of length {} for {c} channels", mean.len())));
        }
        let eps = T::cast_from(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (value, xhat) = self.normalize(input, scale, shift, mean, &inv_std);
        Ok(self.push(
            value,
            Op::Norm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                batch: false,
            },
            &[input, scale, shift],
        ))
    }

    fn normalize(&self, input: NodeId, scale: NodeId, shift: NodeId, mean: &[T], inv_std: &[T]) -> (Tensor<T>, Vec<T>) {
        let shape = self.shape(input);
        let [b, c, h, w] = shape;
        let plane = h * w;
        let x = self.value(input).data();
        let g = self.value(scale).data();
        let s = self.value(shift).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for k in off..off + plane {
                    let v = (x[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = v;
                    out[k] = g[ch] * v + s[ch];
                }
            }
        }
        (Tensor { shape, data: out }, xhat)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let value = Tensor { shape: v.shape(), data };
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| T::one() / (T::one() + (-x).exp())).collect();
        let value = Tensor { shape: v.shape(), data };
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.shape(a), self.shape(b), "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor { shape: self.shape(a), data };
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x * factor).collect();
        let value = Tensor { shape: v.shape(), data };
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// Bilinear resize with half-pixel centers.
    pub fn upsample(&mut self, input: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let [b, c, h, w] = self.shape(input);
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::Shape("upsample to or from an empty map".into()));
        }
        let x = self.value(input).data();
        let ys: Vec<_> = (0..out_h).map(|o| bilinear_source(o, h, out_h)).collect();
        let xs: Vec<_> = (0..out_w).map(|o| bilinear_source(o, w, out_w)).collect();
        let mut out = Vec::with_capacity(b * c * out_h * out_w);
        for plane in 0..b * c {
            let p = &x[plane * h * w..(plane + 1) * h * w];
            for &(y0, y1, ly) in &ys {
                let ly = T::cast_from(ly);
                for &(x0, x1, lx) in &xs {
                    let lx = T::cast_from(lx);
                    let top = p[y0 * w + x0] * (T::one() - lx) + p[y0 * w + x1] * lx;
                    let bot = p[y1 * w + x0] * (T::one() - lx) + p[y1 * w + x1] * lx;
                    out.push(top * (T::one() - ly) + bot * ly);
                }
            }
        }
        let value = Tensor::new([b, c, out_h, out_w], out)?;
        Ok(self.push(value, Op::Upsample { input }, &[input]))
    }

    pub fn global_avg_pool(&mut self, a: NodeId) -> NodeId {
        let [b, c, h, w] = self.shape(a);
        let plane = h * w;
        let x = self.value(a).data();
        let inv = T::one() / T::cast_from(plane as f64);
        let data = (0..b * c)
            .map(|p| {
                let mut s = T::zero();
                for &v in &x[p * plane..(p + 1) * plane] {
                    s += v;
                }
                s * inv
            })
            .collect();
        let value = Tensor { shape: [b, c, 1, 1], data };
        self.push(value, Op::GlobalAvgPool(a), &[a])
    }

    /// `x * gate` with gate of shape (batch, channels, 1, 1).
    pub fn channel_mul(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let [b, c, h, w] = self.shape(x);
        same_shape(self.shape(gate), [b, c, 1, 1], "channel gate")?;
        let plane = h * w;
        let xv = self.value(x).data();
        let gv = self.value(gate).data();
        let data = xv.iter().enumerate().map(|(k, &v)| v * gv[k / plane]).collect();
        let value = Tensor { shape: [b, c, h, w], data };
        Ok(self.push(value, Op::ChannelMul { x, gate }, &[x, gate]))
    }

    /// Adds a per-channel bias with `c` elements.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let c = self.check_channel_params(x, &[bias])?;
        let [_, _, h, w] = self.shape(x);
        let plane = h * w;
        let xv = self.value(x).data();
        let bv = self.value(bias).data();
        let data = xv.iter().enumerate().map(|(k, &v)| v + bv[(k / plane) % c]).collect();
        let value = Tensor { shape: self.shape(x), data };
        Ok(self.push(value, Op::BiasAdd { x, bias }, &[x, bias]))
    }

    /// Concatenates along channels.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let [b, _, h, w] = self.shape(first);
        let mut c_total = 0;
        for &p in parts {
            let [pb, pc, ph, pw] = self.shape(p);
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::Shape(format!(
                    "concat: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            c_total += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * c_total * plane);
        for bi in 0..b {
            for &p in parts {
                let pc = self.shape(p)[1];
                let v = self.value(p).data();
                data.extend_from_slice(&v[bi * pc * plane..(bi + 1) * pc * plane]);
            }
        }
        let value = Tensor { shape: [b, c_total, h, w], data };
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Appends zero channels up to `c_out`.
    pub fn channel_pad(&mut self, x: NodeId, c_out: usize) -> Result<NodeId> {
        let [b, c, h, w] = self.shape(x);
        if c_out < c {
            return Err(Error::Shape(format!("cannot pad {c} channels down to {c_out}")));
        }
        if c_out == c {
            return Ok(x);
        }
        let plane = h * w;
        let v = self.value(x).data();
        let mut data = vec![T::zero(); b * c_out * plane];
        for bi in 0..b {
            data[bi * c_out * plane..(bi * c_out + c) * plane].copy_from_slice(&v[bi * c * plane..(bi + 1) * c * plane]);
        }
        let value = Tensor { shape: [b, c_out, h, w], data };
        Ok(self.push(value, Op::ChannelPad(x), &[x]))
    }

    /// `sum_k weights[idx_k] * inputs_k` with a (1, 1, 1, n) weight vector.
    pub fn mix(&mut self, inputs: &[(usize, NodeId)], weights: NodeId) -> Result<NodeId> {
        let (_, first) = *inputs.first().ok_or_else(|| Error::Shape("mix of nothing".into()))?;
        let shape = self.shape(first);
        let wv = self.value(weights).data().to_vec();
        let mut data = vec![T::zero(); self.value(first).numel()];
        for &(k, id) in inputs {
            same_shape(self.shape(id), shape, "mix")?;
            let wk = *wv
                .get(k)
                .ok_or_else(|| Error::Shape(format!("mix weight index {k} out of range")))?;
            for (o, &v) in data.iter_mut().zip(self.value(id).data()) {
                *o += wk * v;
            }
        }
        let mut parents: Vec<NodeId> = inputs.iter().map(|&(_, id)| id).collect();
        parents.push(weights);
        let value = Tensor { shape, data };
        Ok(self.push(
            value,
            Op::Mix {
                inputs: inputs.to_vec(),
                weights,
            },
            &parents,
        ))
    }

    /// Masked softmax of `(logits + noise) / temperature` over a vector node.
    /// The noise is a constant; gradients flow to the logits only.
    pub fn masked_softmax(&mut self, logits: NodeId, noise: &[T], mask: &[bool], temperature: T) -> Result<NodeId> {
        let z = self.value(logits).data();
        if z.len() != mask.len() || noise.len() != mask.len() {
            return Err(Error::Shape(format!(
                "softmax over {} logits with {} mask and {} noise entries",
                z.len(),
                mask.len(),
                noise.len()
            )));
        }
        if !(temperature > T::zero()) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        let scaled: Vec<T> = z.iter().zip(noise).map(|(&a, &g)| (a + g) / temperature).collect();
        let max = scaled
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            return Err(Error::InvalidArgument("all candidates are masked".into()));
        }
        let mut y: Vec<T> = scaled
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { (v - max).exp() } else { T::zero() })
            .collect();
        let mut sum = T::zero();
        for &v in &y {
            sum += v;
        }
        for v in &mut y {
            *v /= sum;
        }
        let value = Tensor::vector(y);
        Ok(self.push(
            value,
            Op::Softmax {
                logits,
                mask: mask.to_vec(),
                temperature,
            },
            &[logits],
        ))
    }

    /// Scalar `sum_i input_i * coeffs_i`.
    pub fn dot_const(&mut self, input: NodeId, coeffs: &[T]) -> Result<NodeId> {
        let v = self.value(input).data();
        if v.len() != coeffs.len() {
            return Err(Error::Shape(format!("dot of {} and {} elements", v.len(), coeffs.len())));
        }
        let mut s = T::zero();
        for (&a, &c) in v.iter().zip(coeffs) {
            s += a * c;
        }
        Ok(self.push(
            Tensor::scalar(s),
            Op::DotConst {
                input,
                coeffs: coeffs.to_vec(),
            },
            &[input],
        ))
    }

    /// Mean pixel-wise negative log-likelihood over non-ignored labels.
    pub fn cross_entropy_2d(&mut self, logits: NodeId, labels: &[usize], ignore: Option<usize>) -> Result<NodeId> {
        let [b, k, h, w] = self.shape(logits);
        let plane = h * w;
        if labels.len() != b * plane {
            return Err(Error::Shape(format!(
                "{} labels for logits of shape {:?}",
                labels.len(),
                self.shape(logits)
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k && Some(l) != ignore) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for bi in 0..b {
            for p in 0..plane {
                let at = |c: usize| (bi * k + c) * plane + p;
                let mut max = T::neg_infinity();
                for c in 0..k {
                    max = max.max(x[at(c)]);
                }
                let mut sum = T::zero();
                for c in 0..k {
                    let e = (x[at(c)] - max).exp();
                    probs[at(c)] = e;
                    sum += e;
                }
                for c in 0..k {
                    probs[at(c)] /= sum;
                }
                let label = labels[bi * plane + p];
                if Some(label) == ignore {
                    continue;
                }
                total += sum.ln() + max - x[at(label)];
                count += 1;
            }
        }
        let loss = if count > 0 {
            total / T::cast_from(count as f64)
        } else {
            T::zero()
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape("backward needs a scalar root".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], id: NodeId) -> Option<&'a mut Vec<T>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let n = self.nodes[id.0].value.numel();
        Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { input, weight, geom } => {
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let mut gx = self.slot(grads, *input).map(std::mem::take);
                let mut gw = self.slot(grads, *weight).map(std::mem::take);
                conv::backward(geom, x, w, g, gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(v) = gx {
                    grads[input.0] = Some(v);
                }
                if let Some(v) = gw {
                    grads[weight.0] = Some(v);
                }
            }
            Op::Norm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                batch,
            } => {
                let [b, c, h, w] = node.value.shape();
                let plane = h * w;
                let n = T::cast_from((b * plane) as f64);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        for k in off..off + plane {
                            sum_g[ch] += g[k];
                            sum_gx[ch] += g[k] * xhat[k];
                        }
                    }
                }
                let gamma = self.value(*scale).data();
                if let Some(gi) = self.slot(grads, *input) {
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * plane;
                            let a = gamma[ch] * inv_std[ch];
                            for k in off..off + plane {
                                gi[k] += if *batch {
                                    a * (g[k] - sum_g[ch] / n - xhat[k] * sum_gx[ch] / n)
                                } else {
                                    a * g[k]
                                };
                            }
                        }
                    }
                }
                if let Some(gs) = self.slot(grads, *scale) {
                    for ch in 0..c {
                        gs[ch] += sum_gx[ch];
                    }
                }
                if let Some(gb) = self.slot(grads, *shift) {
                    for ch in 0..c {
                        gb[ch] += sum_g[ch];
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for k in 0..g.len() {
                        if x[k] > T::zero() {
                            ga[k] += g[k];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(ga) = self.slot(grads, *a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] * y[k] * (T::one() - y[k]);
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if let Some(gx) = self.slot(grads, *id) {
                        for (o, &v) in gx.iter_mut().zip(g) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, &v) in ga.iter_mut().zip(g) {
                        *o += v * *f;
                    }
                }
            }
            Op::Upsample { input } => {
                let [b, c, h, w] = self.shape(*input);
                let [_, _, oh, ow] = node.value.shape();
                let ys: Vec<_> = (0..oh).map(|o| bilinear_source(o, h, oh)).collect();
                let xs: Vec<_> = (0..ow).map(|o| bilinear_source(o, w, ow)).collect();
                if let Some(gi) = self.slot(grads, *input) {
                    let mut k = 0;
                    for plane in 0..b * c {
                        let base = plane * h * w;
                        for &(y0, y1, ly) in &ys {
                            let ly = T::cast_from(ly);
                            for &(x0, x1, lx) in &xs {
                                let lx = T::cast_from(lx);
                                let v = g[k];
                                k += 1;
                                gi[base + y0 * w + x0] += v * (T::one() - ly) * (T::one() - lx);
                                gi[base + y0 * w + x1] += v * (T::one() - ly) * lx;
                                gi[base + y1 * w + x0] += v * ly * (T::one() - lx);
                                gi[base + y1 * w + x1] += v * ly * lx;
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                let [_, _, h, w] = self.shape(*a);
                let plane = h * w;
                let inv = T::one() / T::cast_from(plane as f64);
                if let Some(ga) = self.slot(grads, *a) {
                    for (k, o) in ga.iter_mut().enumerate() {
                        *o += g[k / plane] * inv;
                    }
                }
            }
            Op::ChannelMul { x, gate } => {
                let [_, _, h, w] = self.shape(*x);
                let plane = h * w;
                let xv = self.value(*x).data();
                let gv = self.value(*gate).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * gv[k / plane];
                    }
                }
                if let Some(gg) = self.slot(grads, *gate) {
                    for k in 0..g.len() {
                        gg[k / plane] += g[k] * xv[k];
                    }
                }
            }
            Op::BiasAdd { x, bias } => {
                let [_, c, h, w] = self.shape(*x);
                let plane = h * w;
                if let Some(gx) = self.slot(grads, *x) {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for (k, &v) in g.iter().enumerate() {
                        gb[(k / plane) % c] += v;
                    }
                }
            }
            Op::Concat(parts) => {
                let [b, c_total, h, w] = node.value.shape();
                let plane = h * w;
                let mut c_off = 0;
                for p in parts {
                    let pc = self.shape(*p)[1];
                    if let Some(gp) = self.slot(grads, *p) {
                        for bi in 0..b {
                            let src = (bi * c_total + c_off) * plane;
                            let dst = bi * pc * plane;
                            for k in 0..pc * plane {
                                gp[dst + k] += g[src + k];
                            }
                        }
                    }
                    c_off += pc;
                }
            }
            Op::ChannelPad(x) => {
                let [b, c, h, w] = self.shape(*x);
                let c_out = node.value.shape()[1];
                let plane = h * w;
                if let Some(gx) = self.slot(grads, *x) {
                    for bi in 0..b {
                        for k in 0..c * plane {
                            gx[bi * c * plane + k] += g[bi * c_out * plane + k];
                        }
                    }
                }
            }
            Op::Mix { inputs, weights } => {
                let wv = self.value(*weights).data();
                for &(k, id) in inputs {
                    if let Some(gi) = self.slot(grads, id) {
                        for (o, &v) in gi.iter_mut().zip(g) {
                            *o += v * wv[k];
                        }
                    }
                }
                if self.nodes[weights.0].requires_grad {
                    let mut dw = vec![T::zero(); wv.len()];
                    for &(k, id) in inputs {
                        let mut s = T::zero();
                        for (&a, &b) in g.iter().zip(self.value(id).data()) {
                            s += a * b;
                        }
                        dw[k] += s;
                    }
                    if let Some(gw) = self.slot(grads, *weights) {
                        for (o, v) in gw.iter_mut().zip(dw) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Softmax {
                logits,
                mask,
                temperature,
            } => {
                let y = node.value.data();
                let mut dot = T::zero();
                for (&a, &b) in y.iter().zip(g) {
                    dot += a * b;
                }
                if let Some(gl) = self.slot(grads, *logits) {
                    for j in 0..y.len() {
                        if mask[j] {
                            gl[j] += y[j] * (g[j] - dot) / *temperature;
                        }
                    }
                }
            }
            Op::DotConst { input, coeffs } => {
                if let Some(gi) = self.slot(grads, *input) {
                    for (o, &c) in gi.iter_mut().zip(coeffs) {
                        *o += g[0] * c;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let [b, k, h, w] = self.shape(*logits);
                let plane = h * w;
                let scale = g[0] / T::cast_from(*count as f64);
                if let Some(gl) = self.slot(grads, *logits) {
                    for bi in 0..b {
                        for p in 0..plane {
                            let label = labels[bi * plane + p];
                            if Some(label) == *ignore {
                                continue;
                            }
                            for c in 0..k {
                                let at = (bi * k + c) * plane + p;
                                let target = if c == label { T::one() } else { T::zero() };
                                gl[at] += scale * (probs[at] - target);
                            }
                        }
                    }
                }
            }
        }
    }
}
