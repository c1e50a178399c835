//! Reverse-mode differentiation over [`Array4`] values.
//!
//! A [`Graph`] records every operation as a node in creation order; [`Graph::backward`]
//! walks the nodes in reverse and returns a [`Gradients`] table. A graph is confined
//! to one thread; build one per batch.

use std::sync::Arc;

use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::gaussian;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Array4, Shape4};

pub const LEAKY_SLOPE: f32 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        NodeId(i)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId, String),
    Conv {
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geometry: ConvGeometry,
        mask: Option<Arc<[f32]>>,
        transposed: bool,
    },
    LeakyRelu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    ChannelGain(NodeId, NodeId),
    Softplus(NodeId),
    ClampMin(NodeId, f32),
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize },
    Sum(NodeId),
    Mean(NodeId),
    GaussianBits { y: NodeId, mean: NodeId, scale: NodeId },
    CrossEntropy { logits: NodeId, targets: Arc<[u8]> },
    Rmse(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Input => "input",
            Op::Param(_, name) => name,
            Op::Conv { transposed: false, .. } => "conv",
            Op::Conv { transposed: true, .. } => "transposed_conv",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ChannelGain(..) => "channel_gain",
            Op::Softplus(_) => "softplus",
            Op::ClampMin(..) => "clamp_min",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::GaussianBits { .. } => "gaussian_bits",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Rmse(..) => "rmse",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Array4,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `∂loss/∂node` for every node that requires a gradient.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

fn same_shape(op: &'static str, a: &Array4, b: &Array4) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array4, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Array4 {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, id: NodeId) -> f32 {
        self.nodes[id.0].value.data()[0]
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Array4) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Input whose gradient is tracked.
    pub fn input_with_grad(&mut self, value: Array4) -> NodeId {
        self.push(value, Op::Input, true)
    }

    /// Snapshot of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let value = store.value(id).clone();
        self.push(value, Op::Param(id, store.name(id).to_string()), true)
    }

    /// Copy of `x` cut off from the graph: no gradient flows back through it.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        self.input(v)
    }

    pub fn conv(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geometry: ConvGeometry,
        mask: Option<Arc<[f32]>>,
    ) -> Result<NodeId> {
        self.conv_impl(x, kernel, bias, geometry, mask, false)
    }

    pub fn transposed_conv(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geometry: ConvGeometry,
        mask: Option<Arc<[f32]>>,
    ) -> Result<NodeId> {
        self.conv_impl(x, kernel, bias, geometry, mask, true)
    }

    fn conv_impl(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geometry: ConvGeometry,
        mask: Option<Arc<[f32]>>,
        transposed: bool,
    ) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let kv = self.nodes[kernel.0].value.data();
        let bv = bias.map(|b| self.nodes[b.0].value.data());
        let out = if transposed {
            conv::transposed_conv2d_forward(xv, &geometry, kv, bv, mask.as_deref())?
        } else {
            conv::conv2d_forward(xv, &geometry, kv, bv, mask.as_deref())?
        };
        let mut deps = vec![x, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            out,
            Op::Conv {
                x,
                kernel,
                bias,
                geometry,
                mask,
                transposed,
            },
            rg,
        ))
    }

    /// Leaky ReLU with slope [`LEAKY_SLOPE`] for negative inputs.
    pub fn leaky_relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.map(|v| if v > 0.0 { v } else { v * LEAKY_SLOPE });
        let rg = self.rg(&[x]);
        self.push(v, Op::LeakyRelu(x), rg)
    }

    fn zip(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(f32, f32) -> f32) -> Result<Array4> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(op, av, bv)?;
        Array4::from_vec(av.shape(), av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> NodeId {
        let v = self.nodes[x.0].value.map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, factor), rg)
    }

    /// Multiply channel `c` of `x` by `gain[c]`; `gain` holds one value per channel.
    pub fn channel_gain(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let gv = self.nodes[gain.0].value.data();
        let s = xv.shape();
        if gv.len() != s.c {
            return Err(Error::dim("channel_gain", format!("{} gains for {} channels", gv.len(), s.c)));
        }
        let plane = s.plane();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv[(i / plane) % s.c])
            .collect();
        let v = Array4::from_vec(s, data)?;
        let rg = self.rg(&[x, gain]);
        Ok(self.push(v, Op::ChannelGain(x, gain), rg))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.map(softplus);
        let rg = self.rg(&[x]);
        self.push(v, Op::Softplus(x), rg)
    }

    /// `max(x, min)`; no gradient where the floor is active.
    pub fn clamp_min(&mut self, x: NodeId, min: f32) -> NodeId {
        let v = self.nodes[x.0].value.map(|v| v.max(min));
        let rg = self.rg(&[x]);
        self.push(v, Op::ClampMin(x, min), rg)
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.nodes[parts[0].0].value.shape();
        let mut c = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::dim("concat", format!("{s} vs {first} outside the channel axis")));
            }
            c += s.c;
        }
        let shape = Shape4::new(first.n, c, first.h, first.w);
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..first.n {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let item = v.shape().item();
                data.extend_from_slice(&v.data()[b * item..(b + 1) * item]);
            }
        }
        let v = Array4::from_vec(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::Concat(parts.to_vec()), rg))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let s = xv.shape();
        if start + len > s.c {
            return Err(Error::dim("slice_channels", format!("channels {start}..{} of {s}", start + len)));
        }
        let shape = Shape4::new(s.n, len, s.h, s.w);
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..s.n {
            let off = (b * s.c + start) * s.plane();
            data.extend_from_slice(&xv.data()[off..off + len * s.plane()]);
        }
        let v = Array4::from_vec(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Slice { x, start }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Array4::scalar(self.nodes[x.0].value.sum() as f32);
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let v = Array4::scalar((xv.sum() / xv.len().max(1) as f64) as f32);
        let rg = self.rg(&[x]);
        self.push(v, Op::Mean(x), rg)
    }

    /// Total codelength in bits of `y` under per-element Gaussians `N(mean, scale²)`
    /// integrated over unit-width bins, with probabilities floored at 2⁻¹⁶.
    /// Accumulated in double precision.
    pub fn gaussian_bits(&mut self, y: NodeId, mean: NodeId, scale: NodeId) -> Result<NodeId> {
        let (yv, mv, sv) = (&self.nodes[y.0].value, &self.nodes[mean.0].value, &self.nodes[scale.0].value);
        same_shape("gaussian_bits", yv, mv)?;
        same_shape("gaussian_bits", yv, sv)?;
        let total: f64 = yv
            .data()
            .iter()
            .zip(mv.data())
            .zip(sv.data())
            .map(|((&y, &m), &s)| gaussian::bits(y as f64 - m as f64, s as f64))
            .sum();
        let rg = self.rg(&[y, mean, scale]);
        Ok(self.push(Array4::scalar(total as f32), Op::GaussianBits { y, mean, scale }, rg))
    }

    /// Mean per-pixel softmax cross-entropy (nats). `targets` holds one class index
    /// per pixel in `n×h×w` order.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Arc<[u8]>) -> Result<NodeId> {
        let lv = &self.nodes[logits.0].value;
        let s = lv.shape();
        if targets.len() != s.n * s.plane() {
            return Err(Error::dim("cross_entropy", format!("{} targets for logits {s}", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= s.c) {
            return Err(Error::Contract(format!("class {t} outside {} logits", s.c)));
        }
        let mut total = 0.0f64;
        for b in 0..s.n {
            for p in 0..s.plane() {
                let at = |c: usize| lv.data()[(b * s.c + c) * s.plane() + p] as f64;
                let max = (0..s.c).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..s.c).map(|c| (at(c) - max).exp()).sum::<f64>().ln();
                total += lse - at(targets[b * s.plane() + p] as usize);
            }
        }
        let v = Array4::scalar((total / (s.n * s.plane()).max(1) as f64) as f32);
        let rg = self.rg(&[logits]);
        Ok(self.push(v, Op::CrossEntropy { logits, targets }, rg))
    }

    /// `sqrt(mean((a − b)²))` over all elements.
    pub fn rmse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape("rmse", av, bv)?;
        let mse = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum::<f64>()
            / av.len().max(1) as f64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array4::scalar(mse.sqrt() as f32), Op::Rmse(a, b), rg))
    }

    /// First node (in creation order) holding a NaN or infinity, with its label.
    pub fn first_non_finite(&self) -> Option<(NodeId, String)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (NodeId(i), format!("#{i} {}", n.op.name())))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let mut acc = |id: NodeId, contrib: Vec<f32>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Input | Op::Param(..) => {}
            Op::Conv {
                x,
                kernel,
                bias,
                geometry,
                mask,
                transposed,
            } => {
                let gout = Array4::from_vec(node.value.shape(), g.to_vec())?;
                let (gx, gk, gb) = if *transposed {
                    conv::transposed_conv2d_backward(val(*x), geometry, val(*kernel).data(), mask.as_deref(), &gout)?
                } else {
                    conv::conv2d_backward(val(*x), geometry, val(*kernel).data(), mask.as_deref(), &gout)?
                };
                acc(*x, gx.into_vec());
                acc(*kernel, gk);
                if let Some(b) = bias {
                    acc(*b, gb);
                }
            }
            Op::LeakyRelu(x) => {
                let gx = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &g)| if v > 0.0 { g } else { g * LEAKY_SLOPE })
                    .collect();
                acc(*x, gx);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                acc(*a, g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect());
            }
            Op::Scale(x, f) => acc(*x, g.iter().map(|v| v * f).collect()),
            Op::ChannelGain(x, gain) => {
                let s = val(*x).shape();
                let plane = s.plane();
                let gv = val(*gain).data();
                let xv = val(*x).data();
                let mut ggain = vec![0.0f64; s.c];
                let mut gx = vec![0.0; g.len()];
                for (i, &gi) in g.iter().enumerate() {
                    let c = (i / plane) % s.c;
                    gx[i] = gi * gv[c];
                    ggain[c] += gi as f64 * xv[i] as f64;
                }
                acc(*x, gx);
                acc(*gain, ggain.into_iter().map(|v| v as f32).collect());
            }
            Op::Softplus(x) => acc(*x, val(*x).data().iter().zip(g).map(|(&v, &g)| g * sigmoid(v)).collect()),
            Op::ClampMin(x, min) => acc(
                *x,
                val(*x).data().iter().zip(g).map(|(&v, &g)| if v > *min { g } else { 0.0 }).collect(),
            ),
            Op::Concat(parts) => {
                let s = node.value.shape();
                let item = s.item();
                let mut off = 0;
                for p in parts {
                    let ps = val(*p).shape();
                    let pitem = ps.item();
                    let mut gp = Vec::with_capacity(ps.len());
                    for b in 0..s.n {
                        gp.extend_from_slice(&g[b * item + off..b * item + off + pitem]);
                    }
                    off += pitem;
                    acc(*p, gp);
                }
            }
            Op::Slice { x, start } => {
                let xs = val(*x).shape();
                let os = node.value.shape();
                let mut gx = vec![0.0; xs.len()];
                for b in 0..xs.n {
                    let dst = (b * xs.c + start) * xs.plane();
                    let src = b * os.item();
                    gx[dst..dst + os.item()].copy_from_slice(&g[src..src + os.item()]);
                }
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len().max(1);
                acc(*x, vec![g[0] / n as f32; n]);
            }
            Op::GaussianBits { y, mean, scale } => {
                let (yv, mv, sv) = (val(*y).data(), val(*mean).data(), val(*scale).data());
                let mut gy = Vec::with_capacity(yv.len());
                let mut gs = Vec::with_capacity(yv.len());
                for i in 0..yv.len() {
                    let (_, dd, ds) = gaussian::bits_and_grad(yv[i] as f64 - mv[i] as f64, sv[i] as f64);
                    gy.push((g[0] as f64 * dd) as f32);
                    gs.push((g[0] as f64 * ds) as f32);
                }
                acc(*mean, gy.iter().map(|v| -v).collect());
                acc(*y, gy);
                acc(*scale, gs);
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = val(*logits);
                let s = lv.shape();
                let norm = g[0] as f64 / (s.n * s.plane()).max(1) as f64;
                let mut gl = vec![0.0; s.len()];
                for b in 0..s.n {
                    for p in 0..s.plane() {
                        let at = |c: usize| (b * s.c + c) * s.plane() + p;
                        let max = (0..s.c).map(|c| lv.data()[at(c)] as f64).fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = (0..s.c).map(|c| (lv.data()[at(c)] as f64 - max).exp()).sum();
                        let t = targets[b * s.plane() + p] as usize;
                        for c in 0..s.c {
                            let p_c = (lv.data()[at(c)] as f64 - max).exp() / z;
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[at(c)] = ((p_c - onehot) * norm) as f32;
                        }
                    }
                }
                acc(*logits, gl);
            }
            Op::Rmse(a, b) => {
                let r = node.value.data()[0] as f64;
                let n = val(*a).len().max(1) as f64;
                let coef = if r > 0.0 { g[0] as f64 / (n * r) } else { 0.0 };
                let ga: Vec<f32> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(&x, &y)| ((x as f64 - y as f64) * coef) as f32)
                    .collect();
                acc(*b, ga.iter().map(|v| -v).collect());
                acc(*a, ga);
            }
        }
        Ok(())
    }

    /// Add the gradients of every parameter node into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid, _) = &node.op {
                let g = grads.get(NodeId(i)).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; node.value.len()]);
                store.accumulate_grad(*pid, &g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite-difference oracle shared by the gradient tests.

    use super::*;

    /// Relative error with a unit floor on the denominator, so entries whose true
    /// gradient is near zero are judged on absolute error.
    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    /// Build the graph with `inputs` (all tracked), run backward and compare every
    /// input gradient entry against central differences with step `h`.
    /// Returns the worst relative error.
    pub fn check(inputs: &[Array4], h: f32, build: impl Fn(&mut Graph, &[NodeId]) -> NodeId) -> f64 {
        let eval = |vals: &[Array4]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<_> = vals.iter().map(|v| g.input(v.clone())).collect();
            let out = build(&mut g, &ids);
            g.scalar(out) as f64
        };
        let mut g = Graph::new();
        let ids: Vec<_> = inputs.iter().map(|v| g.input_with_grad(v.clone())).collect();
        let out = build(&mut g, &ids);
        let grads = g.backward(out).unwrap();
        let mut worst = 0.0f64;
        for (k, id) in ids.iter().enumerate() {
            let analytic = grads.get(*id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
            for j in 0..inputs[k].len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[j] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
                worst = worst.max(rel_err(analytic[j] as f64, num));
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: Shape4, rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Array4 {
        Array4::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
    }

    const TOL: f64 = 1e-3;
    const STEP: f32 = 1e-3;

    /// Weighted sum with fixed pseudo-random coefficients so every output element
    /// contributes a distinct weight.
    fn project(g: &mut Graph, x: NodeId) -> NodeId {
        let s = g.value(x).shape();
        let w = Array4::from_fn(s, |n, c, y, xx| 0.5 + ((n * 7 + c * 5 + y * 3 + xx) % 7) as f32 * 0.25 - 0.75);
        let w = g.input(w);
        let m = g.mul(x, w).unwrap();
        g.sum(m)
    }

    #[test]
    fn sum_gives_unit_gradient() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Array4::full(Shape4::new(1, 2, 2, 2), 3.0));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Array4::zeros(Shape4::new(1, 1, 2, 1)));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn masked_kernel_positions_get_zero_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let geom = ConvGeometry::new(2, 2, 3, 1, 1);
        let mask: Arc<[f32]> = (0..geom.kernel_len()).map(|i| (i % 3 != 0) as u8 as f32).collect();
        let mut g = Graph::new();
        let x = g.input(rand_arr(Shape4::new(1, 2, 4, 4), &mut rng, -1.0, 1.0));
        let k = g.input_with_grad(rand_arr(geom.kernel_shape(), &mut rng, -1.0, 1.0));
        let y = g.conv(x, k, None, geom, Some(mask.clone())).unwrap();
        let s = g.sum(y);
        let gk = g.backward(s).unwrap().get(k).unwrap().to_vec();
        for (gv, m) in gk.iter().zip(mask.iter()) {
            if *m == 0.0 {
                assert_eq!(*gv, 0.0);
            }
        }
        assert!(gk.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn conv_and_transposed_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let geom = ConvGeometry::new(2, 2, 3, 2, 1);
        let inputs = [
            rand_arr(Shape4::new(1, 2, 4, 4), &mut rng, -1.0, 1.0),
            rand_arr(geom.kernel_shape(), &mut rng, -1.0, 1.0),
            rand_arr(Shape4::new(1, 1, 1, 2), &mut rng, -1.0, 1.0),
        ];
        let err = check(&inputs, STEP, |g, ids| {
            let y = g.conv(ids[0], ids[1], Some(ids[2]), geom, None).unwrap();
            project(g, y)
        });
        assert!(err < TOL, "conv {err}");

        let geom = ConvGeometry::new(2, 3, 4, 2, 1);
        let inputs = [
            rand_arr(Shape4::new(1, 3, 2, 2), &mut rng, -1.0, 1.0),
            rand_arr(geom.kernel_shape(), &mut rng, -1.0, 1.0),
            rand_arr(Shape4::new(1, 1, 1, 2), &mut rng, -1.0, 1.0),
        ];
        let err = check(&inputs, STEP, |g, ids| {
            let y = g.transposed_conv(ids[0], ids[1], Some(ids[2]), geom, None).unwrap();
            project(g, y)
        });
        assert!(err < TOL, "transposed {err}");
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = Shape4::new(1, 2, 3, 3);
        // keep values away from the leaky-relu kink and the clamp floor
        let away = |rng: &mut ChaCha8Rng| {
            Array4::from_fn(s, |_, _, _, _| {
                let v: f32 = rng.gen_range(0.1..1.5);
                if rng.gen() {
                    v
                } else {
                    -v
                }
            })
        };
        let a = away(&mut rng);
        let b = rand_arr(s, &mut rng, -1.0, 1.0);
        let gain = rand_arr(Shape4::new(1, 1, 1, 2), &mut rng, 0.5, 1.5);
        let cases: Vec<(&str, Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)> = vec![
            ("leaky", Box::new(|g, ids| {
                let y = g.leaky_relu(ids[0]);
                project(g, y)
            })),
            ("add", Box::new(|g, ids| {
                let y = g.add(ids[0], ids[1]).unwrap();
                project(g, y)
            })),
            ("sub", Box::new(|g, ids| {
                let y = g.sub(ids[0], ids[1]).unwrap();
                project(g, y)
            })),
            ("mul", Box::new(|g, ids| {
                let y = g.mul(ids[0], ids[1]).unwrap();
                project(g, y)
            })),
            ("scale", Box::new(|g, ids| {
                let y = g.scale(ids[0], -1.7);
                project(g, y)
            })),
            ("softplus", Box::new(|g, ids| {
                let y = g.softplus(ids[0]);
                project(g, y)
            })),
            ("clamp", Box::new(|g, ids| {
                let y = g.clamp_min(ids[0], 0.05);
                project(g, y)
            })),
            ("concat+slice", Box::new(|g, ids| {
                let c = g.concat(&[ids[0], ids[1]]).unwrap();
                let y = g.slice_channels(c, 1, 2).unwrap();
                project(g, y)
            })),
            ("mean", Box::new(|g, ids| {
                let m = g.mul(ids[0], ids[1]).unwrap();
                g.mean(m)
            })),
            ("rmse", Box::new(|g, ids| g.rmse(ids[0], ids[1]).unwrap())),
        ];
        for (name, build) in &cases {
            let err = check(&[a.clone(), b.clone()], STEP, build);
            assert!(err < TOL, "{name}: {err}");
        }
        let err = check(&[a.clone(), gain], STEP, |g, ids| {
            let y = g.channel_gain(ids[0], ids[1]).unwrap();
            project(g, y)
        });
        assert!(err < TOL, "channel_gain {err}");
    }

    #[test]
    fn likelihood_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = Shape4::new(1, 2, 2, 3);
        let y = rand_arr(s, &mut rng, -2.0, 2.0);
        let m = rand_arr(s, &mut rng, -0.5, 0.5);
        let sigma = rand_arr(s, &mut rng, 0.5, 2.0);
        let err = check(&[y, m, sigma], STEP, |g, ids| g.gaussian_bits(ids[0], ids[1], ids[2]).unwrap());
        assert!(err < TOL, "gaussian_bits {err}");

        let logits = rand_arr(Shape4::new(2, 4, 2, 2), &mut rng, -2.0, 2.0);
        let targets: Arc<[u8]> = (0..8).map(|i| (i * 3 % 4) as u8).collect();
        let err = check(&[logits], STEP, move |g, ids| g.cross_entropy(ids[0], targets.clone()).unwrap());
        assert!(err < TOL, "cross_entropy {err}");
    }

    #[test]
    fn three_layer_net_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let g1 = ConvGeometry::new(3, 2, 3, 1, 1);
        let g2 = ConvGeometry::new(2, 3, 3, 2, 1);
        let g3 = ConvGeometry::new(2, 2, 4, 2, 1);
        let inputs = [
            rand_arr(Shape4::new(1, 2, 4, 4), &mut rng, -1.0, 1.0),
            rand_arr(g1.kernel_shape(), &mut rng, -0.5, 0.5),
            rand_arr(g2.kernel_shape(), &mut rng, -0.5, 0.5),
            rand_arr(g3.kernel_shape(), &mut rng, -0.5, 0.5),
        ];
        let err = check(&inputs, STEP, |g, ids| {
            let h = g.conv(ids[0], ids[1], None, g1, None).unwrap();
            let h = g.leaky_relu(h);
            let h = g.conv(h, ids[2], None, g2, None).unwrap();
            let h = g.leaky_relu(h);
            let h = g.transposed_conv(h, ids[3], None, g3, None).unwrap();
            project(g, h)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Array4::full(Shape4::new(1, 1, 1, 2), 2.0));
        let d = g.detach(x);
        let y = g.mul(d, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn non_finite_is_located() {
        let mut g = Graph::new();
        let x = g.input(Array4::full(Shape4::scalar(), 1.0));
        let y = g.scale(x, f32::MAX);
        let _z = g.scale(y, 10.0);
        let (id, label) = g.first_non_finite().unwrap();
        assert_eq!(id.0, 2);
        assert!(label.contains("scale"));
    }
}
