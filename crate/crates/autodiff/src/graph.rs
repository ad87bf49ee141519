//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of records. Each op pushes one record
//! holding its output value plus whatever it needs for backward, so the
//! arena order is already a topological order and [`Graph::backward`] is a
//! single reverse sweep. Parameters live outside the graph; a forward pass
//! registers them as leaves and reads their gradients back afterwards.

use crate::error::{arg_err, shape_err, Result, TensorError};
use crate::kernels::conv::{conv3d_backward, conv3d_forward, ConvGeometry};
use crate::kernels::norm::{
    batch_norm_backward, batch_norm_forward, BatchNormOptions, BnSaved, NormMode, RunningStats,
};
use crate::kernels::resize::{resize_trilinear, resize_trilinear_backward};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a record in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an op defined outside this crate (losses, mostly).
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one optional gradient per input, each shaped like that input.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

/// Op kind plus saved context for one record.
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Resize {
        input: Var,
        input_spatial: [usize; 3],
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    SoftmaxChannels {
        input: Var,
    },
    Sum {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Tensor<T>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3d { .. } => "conv3d",
            Op::Resize { .. } => "upsample_trilinear",
            Op::BatchNorm { .. } => "batch_norm3d",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "add",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::SoftmaxChannels { .. } => "softmax_channels",
            Op::Sum { .. } => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Number of records on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Differentiable leaf (parameter or input under test).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.value(input).shape(),
            self.value(weight).shape(),
            stride,
            padding,
        )?;
        let out = conv3d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            out,
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            },
            &inputs,
        )
    }

    /// Strided convolution that divides each spatial extent exactly by its
    /// factor. The kernel must have odd extents; padding is `k / 2`.
    pub fn conv3d_strided_down(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        factors: [usize; 3],
    ) -> Result<Var> {
        const OP: &str = "conv3d_strided_down";
        let [_, _, d, h, w] = self.value(input).dims5(OP)?;
        let wshape = self.value(weight).shape().to_vec();
        if wshape.len() != 5 {
            return Err(shape_err(OP, format!("weight must be 5-d, got {wshape:?}")));
        }
        for (axis, (&extent, &factor)) in ["depth", "height", "width"]
            .into_iter()
            .zip([d, h, w].iter().zip(&factors))
        {
            if factor == 0 {
                return Err(arg_err(OP, format!("{axis} factor must be >= 1")));
            }
            if extent % factor != 0 {
                return Err(TensorError::IndivisibleExtent {
                    op: OP,
                    axis,
                    extent,
                    factor,
                });
            }
        }
        let kernel = [wshape[2], wshape[3], wshape[4]];
        if kernel.iter().any(|k| k % 2 == 0) {
            return Err(arg_err(OP, format!("kernel extents must be odd, got {kernel:?}")));
        }
        let padding = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
        self.conv3d(input, weight, bias, factors, padding)
    }

    pub fn upsample_trilinear(&mut self, input: Var, factors: [usize; 3]) -> Result<Var> {
        let [_, _, d, h, w] = self.value(input).dims5("upsample_trilinear")?;
        if factors.contains(&0) {
            return Err(arg_err("upsample_trilinear", "factors must be >= 1"));
        }
        let out = resize_trilinear(
            self.value(input),
            [d * factors[0], h * factors[1], w * factors[2]],
        )?;
        self.push(
            out,
            Op::Resize {
                input,
                input_spatial: [d, h, w],
            },
            &[input],
        )
    }

    /// Trilinear resize to an arbitrary spatial extent (differentiable).
    pub fn resize_trilinear(&mut self, input: Var, output: [usize; 3]) -> Result<Var> {
        let [_, _, d, h, w] = self.value(input).dims5("resize_trilinear")?;
        let out = resize_trilinear(self.value(input), output)?;
        self.push(
            out,
            Op::Resize {
                input,
                input_spatial: [d, h, w],
            },
            &[input],
        )
    }

    pub fn batch_norm3d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running: &mut RunningStats<T>,
        opts: BatchNormOptions,
    ) -> Result<Var> {
        let (out, saved) = batch_norm_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            mode,
            running,
            opts,
        )?;
        self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            },
            &[input, gamma, beta],
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu { input }, &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data)?;
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err(
                "concat_channels",
                format!("{sa:?} and {sb:?} differ outside the channel axis"),
            ));
        }
        let n = sa[0];
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for s in 0..n {
            data.extend_from_slice(&va.data()[s * ca..(s + 1) * ca]);
            data.extend_from_slice(&vb.data()[s * cb..(s + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        shape[1] = sa[1] + sb[1];
        let out = Tensor::from_vec(shape, data)?;
        self.push(out, Op::ConcatChannels { a, b }, &[a, b])
    }

    /// Softmax over axis 1, computed with max subtraction.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.rank() < 2 {
            return Err(shape_err(
                "softmax_channels",
                format!("need a channel axis, got {:?}", x.shape()),
            ));
        }
        let out = softmax_channels_value(x);
        self.push(out, Op::SoftmaxChannels { input }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(out, Op::Sum { input }, &[input])
    }

    /// `sum(weights * input)` with constant weights.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(shape_err(
                "weighted_sum",
                format!("{:?} vs weights {:?}", x.shape(), weights.shape()),
            ));
        }
        let s = x.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { input, weights }, &[input])
    }

    /// Records an externally computed value with a custom backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        op: impl CustomOp<T> + 'static,
    ) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op: Box::new(op),
            },
            inputs,
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into every
    /// reachable record that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NotScalar { shape });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = Tensor::full(shape, T::one());
        match &mut self.nodes[loss.0].grad {
            Some(g) => g.accumulate(&seed),
            slot => *slot = Some(seed),
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (v, dg) in contributions {
                let node = &mut self.nodes[v.0];
                match &mut node.grad {
                    Some(acc) => acc.accumulate(&dg),
                    slot => *slot = Some(dg),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = [
                    self.needs(*input),
                    self.needs(*weight),
                    bias.is_some_and(|b| self.needs(b)),
                ];
                let grads = conv3d_backward(self.value(*input), self.value(*weight), geom, g, need);
                out.extend(grads.input.map(|t| (*input, t)));
                out.extend(grads.weight.map(|t| (*weight, t)));
                if let (Some(b), Some(t)) = (bias, grads.bias) {
                    out.push((*b, t));
                }
            }
            Op::Resize {
                input,
                input_spatial,
            } => {
                if self.needs(*input) {
                    out.push((*input, resize_trilinear_backward(g, *input_spatial)));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            } => {
                let grads = batch_norm_backward(self.value(*gamma), saved, g);
                for (v, t) in [(*input, grads.input), (*gamma, grads.gamma), (*beta, grads.beta)] {
                    if self.needs(v) {
                        out.push((v, t));
                    }
                }
            }
            Op::Relu { input } => {
                if self.needs(*input) {
                    let x = self.value(*input);
                    let data = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    out.push((*input, Tensor::from_vec(x.shape().to_vec(), data)?));
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        out.push((v, g.clone()));
                    }
                }
            }
            Op::ConcatChannels { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let n = sa[0];
                let inner: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                let mut ga = Vec::with_capacity(n * ca);
                let mut gb = Vec::with_capacity(n * cb);
                for s in 0..n {
                    let row = &g.data()[s * (ca + cb)..(s + 1) * (ca + cb)];
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                if self.needs(*a) {
                    out.push((*a, Tensor::from_vec(sa.to_vec(), ga)?));
                }
                if self.needs(*b) {
                    out.push((*b, Tensor::from_vec(sb.to_vec(), gb)?));
                }
            }
            Op::SoftmaxChannels { input } => {
                if self.needs(*input) {
                    out.push((*input, softmax_channels_backward(&node.value, g)));
                }
            }
            Op::Sum { input } => {
                if self.needs(*input) {
                    let shape = self.value(*input).shape().to_vec();
                    out.push((*input, Tensor::full(shape, g.item())));
                }
            }
            Op::WeightedSum { input, weights } => {
                if self.needs(*input) {
                    let s = g.item();
                    out.push((*input, weights.map(|w| w * s)));
                }
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = op.backward(&values, &node.value, g)?;
                if grads.len() != inputs.len() {
                    return Err(arg_err(
                        "backward",
                        format!("{} returned {} gradients for {} inputs", op.name(), grads.len(), inputs.len()),
                    ));
                }
                for (&v, dg) in inputs.iter().zip(grads) {
                    if let Some(dg) = dg {
                        if dg.shape() != self.value(v).shape() {
                            return Err(shape_err(op.name(), "gradient shape differs from input"));
                        }
                        if self.needs(v) {
                            out.push((v, dg));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn softmax_channels_value<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.shape()[0];
    let c = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    let mut out = vec![T::zero(); x.len()];
    let data = x.data();
    for s in 0..n {
        let base = s * c * inner;
        for i in 0..inner {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(data[base + ch * inner + i]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (data[base + ch * inner + i] - m).exp();
                out[base + ch * inner + i] = e;
                z += e;
            }
            for ch in 0..c {
                out[base + ch * inner + i] /= z;
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out).expect("same shape")
}

fn softmax_channels_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let n = y.shape()[0];
    let c = y.shape()[1];
    let inner: usize = y.shape()[2..].iter().product();
    let (yd, gd) = (y.data(), g.data());
    let mut dx = vec![T::zero(); y.len()];
    for s in 0..n {
        let base = s * c * inner;
        for i in 0..inner {
            let mut dot = T::zero();
            for ch in 0..c {
                let k = base + ch * inner + i;
                dot += yd[k] * gd[k];
            }
            for ch in 0..c {
                let k = base + ch * inner + i;
                dx[k] = yd[k] * (gd[k] - dot);
            }
        }
    }
    Tensor::from_vec(y.shape().to_vec(), dx).expect("same shape")
}

/// Softmax over axis 1 outside any graph.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(shape_err("softmax_channels", format!("need a channel axis, got {:?}", x.shape())));
    }
    Ok(softmax_channels_value(x))
}
