//! Reverse-mode differentiation over a linear recording of operations.
//!
//! A [`Tape`] lives for one forward/backward pass. Parameters are copied
//! onto it as leaves that remember their slot in a [`ParamSet`], so the
//! gradients of a pass can be accumulated back into the set.

use crate::conv::{self, ConvGeom};
use crate::error::{shape_err, Result, TensorError};
use crate::norm::{self, BatchNormStats, BnSaved, Mode};
use crate::param::ParamSet;
use crate::scalar::Scalar;
use crate::shuffle;
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf { param: Option<usize> },
    Conv { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    BatchNorm { input: Var, gamma: Var, beta: Var, saved: BnSaved<T> },
    Relu { input: Var },
    Unshuffle { input: Var, factor: usize },
    Shuffle { input: Var, factor: usize },
    Concat { inputs: Vec<Var> },
    Slice { input: Var, start: usize },
    MulConst { input: Var, factor: Vec<T> },
    Scale { input: Var, factor: T },
    Sum { input: Var },
    WeightedSum { input: Var, weights: Vec<T> },
    Mse { pred: Var, target: Var },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    released: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), released: false }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.released {
            return Err(TensorError::GraphReleased);
        }
        value.ensure_finite(name)?;
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Value of a recorded node. Intermediate values are gone after backward.
    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.nodes[v.0].value.as_ref().ok_or(TensorError::GraphReleased)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.as_ref().expect("value of live node")
    }

    pub fn shape(&self, v: Var) -> Result<Shape> {
        Ok(self.value(v)?.shape())
    }

    /// Gradient of the last backward pass with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Records a tensor; differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Result<Var> {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf { param: None }, rg, "leaf")
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Result<Var> {
        self.push(tensor.with_requires_grad(false), Op::Leaf { param: None }, false, "leaf")
    }

    /// Copies a named parameter onto the tape.
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var> {
        let idx = params.index_of(name)?;
        let p = params.by_index(idx);
        let mut t = p.tensor.clone();
        t.zero_grad();
        self.push(t, Op::Leaf { param: Some(idx) }, p.trainable, "param")
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (geom, out) = conv::forward(self.val(input), self.val(weight), self.val(bias), stride, padding)?;
        let rg = self.needs(&[input, weight, bias]);
        self.push(out, Op::Conv { input, weight, bias, geom }, rg, "conv2d")
    }

    /// Batch normalization. Train mode updates `stats` in place.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let (out, saved) = norm::forward(
            self.val(input),
            self.val(gamma).data(),
            self.val(beta).data(),
            stats,
            mode,
            momentum,
            eps,
        )?;
        let rg = self.needs(&[input, gamma, beta]);
        self.push(out, Op::BatchNorm { input, gamma, beta, saved }, rg, "batchnorm2d")
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.val(input);
        let data = x.data().iter().map(|v| if *v > T::zero() { *v } else { T::zero() }).collect();
        let out = Tensor::new(x.shape(), data)?;
        let rg = self.needs(&[input]);
        self.push(out, Op::Relu { input }, rg, "relu")
    }

    pub fn pixel_unshuffle(&mut self, input: Var, factor: usize) -> Result<Var> {
        let out = shuffle::pixel_unshuffle(self.val(input), factor)?;
        let rg = self.needs(&[input]);
        self.push(out, Op::Unshuffle { input, factor }, rg, "pixel_unshuffle")
    }

    pub fn pixel_shuffle(&mut self, input: Var, factor: usize) -> Result<Var> {
        let out = shuffle::pixel_shuffle(self.val(input), factor)?;
        let rg = self.needs(&[input]);
        self.push(out, Op::Shuffle { input, factor }, rg, "pixel_shuffle")
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.val(*inputs.first().ok_or_else(|| shape_err("concat", "no inputs"))?).shape();
        let mut channels = 0;
        for v in inputs {
            let s = self.val(*v).shape();
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(shape_err("concat", format!("{s} incompatible with {first}")));
            }
            channels += s.c;
        }
        let out_shape = Shape::new(first.n, channels, first.h, first.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..first.n {
            for v in inputs {
                let t = self.val(*v);
                let len = t.shape().c * first.plane();
                data.extend_from_slice(&t.data()[n * len..(n + 1) * len]);
            }
        }
        let out = Tensor::new(out_shape, data)?;
        let rg = self.needs(inputs);
        self.push(out, Op::Concat { inputs: inputs.to_vec() }, rg, "concat")
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.val(input);
        let s = x.shape();
        if len == 0 || start + len > s.c {
            return Err(shape_err("slice_channels", format!("range {start}..{} of {} channels", start + len, s.c)));
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&x.data()[base..base + len * plane]);
        }
        let out = Tensor::new(Shape::new(s.n, len, s.h, s.w), data)?;
        let rg = self.needs(&[input]);
        self.push(out, Op::Slice { input, start }, rg, "slice_channels")
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, input: Var, factor: &Tensor<T>) -> Result<Var> {
        let x = self.val(input);
        if x.shape() != factor.shape() {
            return Err(shape_err("mul_const", format!("{} vs {}", x.shape(), factor.shape())));
        }
        let data = x.data().iter().zip(factor.data()).map(|(a, b)| *a * *b).collect();
        let out = Tensor::new(x.shape(), data)?;
        let rg = self.needs(&[input]);
        self.push(out, Op::MulConst { input, factor: factor.data().to_vec() }, rg, "mul_const")
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let x = self.val(input);
        let out = Tensor::new(x.shape(), x.data().iter().map(|v| *v * factor).collect())?;
        let rg = self.needs(&[input]);
        self.push(out, Op::Scale { input, factor }, rg, "scale")
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total: f64 = self.val(input).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.needs(&[input]);
        self.push(Tensor::scalar(T::lit(total)), Op::Sum { input }, rg, "sum")
    }

    /// `sum(input * weights)` for constant weights.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        let x = self.val(input);
        if x.shape() != weights.shape() {
            return Err(shape_err("weighted_sum", format!("{} vs {}", x.shape(), weights.shape())));
        }
        let total: f64 = x.data().iter().zip(weights.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        let rg = self.needs(&[input]);
        self.push(
            Tensor::scalar(T::lit(total)),
            Op::WeightedSum { input, weights: weights.data().to_vec() },
            rg,
            "weighted_sum",
        )
    }

    /// Mean of squared differences over every element.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.val(pred), self.val(target));
        if p.shape() != t.shape() {
            return Err(shape_err("mse_loss", format!("prediction {} vs target {}", p.shape(), t.shape())));
        }
        let n = p.data().len() as f64;
        let total: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
        let rg = self.needs(&[pred, target]);
        self.push(Tensor::scalar(T::lit(total / n)), Op::Mse { pred, target }, rg, "mse_loss")
    }

    /// Propagates d(loss)/d(node) to every differentiable node, then frees
    /// the recorded graph. Leaf gradients stay readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.released {
            return Err(TensorError::GraphReleased);
        }
        let ls = self.val(loss).shape();
        if ls.numel() != 1 {
            return Err(TensorError::NonScalarLoss(ls.dims()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (target, delta) in self.local_grads(i, &g)? {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += *d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
                debug_assert!(matches!(self.nodes[i].op, Op::Leaf { .. }));
            }
        }
        self.grads = grads;
        self.release();
        Ok(())
    }

    /// Runs [`Tape::backward`] and adds parameter-leaf gradients into `params`.
    pub fn backward_into(&mut self, loss: Var, params: &mut ParamSet<T>) -> Result<()> {
        self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf { param: Some(idx) }, Some(g)) = (&node.op, &self.grads[i]) {
                params.by_index_mut(*idx).tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn release(&mut self) {
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf { .. }) {
                node.value = None;
                node.op = Op::Leaf { param: None };
                node.requires_grad = false;
            }
        }
        self.released = true;
    }

    pub fn is_released(&self) -> bool {
        self.released
    }

    fn local_grads(&self, i: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Conv { input, weight, bias, geom } => {
                let want = [self.nodes[input.0].requires_grad, self.nodes[weight.0].requires_grad, self.nodes[bias.0].requires_grad];
                let grads = conv::backward(geom, self.val(*input).data(), self.val(*weight).data(), g, want);
                if let Some(d) = grads.input {
                    out.push((*input, d));
                }
                if let Some(d) = grads.weight {
                    out.push((*weight, d));
                }
                if let Some(d) = grads.bias {
                    out.push((*bias, d));
                }
            }
            Op::BatchNorm { input, gamma, beta, saved } => {
                let grads = norm::backward(self.val(*input), self.val(*gamma).data(), saved, g);
                out.push((*input, grads.input));
                out.push((*gamma, grads.gamma));
                out.push((*beta, grads.beta));
            }
            Op::Relu { input } => {
                let x = self.val(*input).data();
                let d = x.iter().zip(g).map(|(x, g)| if *x > T::zero() { *g } else { T::zero() }).collect();
                out.push((*input, d));
            }
            Op::Unshuffle { input, factor } => {
                let s = self.val(*input).shape();
                out.push((*input, shuffle::shuffle_data(s, *factor, g)));
            }
            Op::Shuffle { input, factor } => {
                let s = self.val(i_var(i)).shape();
                out.push((*input, shuffle::unshuffle_data(s, *factor, g)));
            }
            Op::Concat { inputs } => {
                let s = self.val(i_var(i)).shape();
                let plane = s.plane();
                let mut offset = 0;
                for v in inputs {
                    let c = self.val(*v).shape().c;
                    let mut d = Vec::with_capacity(s.n * c * plane);
                    for n in 0..s.n {
                        let base = (n * s.c + offset) * plane;
                        d.extend_from_slice(&g[base..base + c * plane]);
                    }
                    out.push((*v, d));
                    offset += c;
                }
            }
            Op::Slice { input, start } => {
                let s = self.val(*input).shape();
                let len = self.val(i_var(i)).shape().c;
                let plane = s.plane();
                let mut d = vec![T::zero(); s.numel()];
                for n in 0..s.n {
                    let base = (n * s.c + start) * plane;
                    d[base..base + len * plane].copy_from_slice(&g[n * len * plane..(n + 1) * len * plane]);
                }
                out.push((*input, d));
            }
            Op::MulConst { input, factor } => {
                out.push((*input, g.iter().zip(factor).map(|(g, f)| *g * *f).collect()));
            }
            Op::Scale { input, factor } => {
                out.push((*input, g.iter().map(|g| *g * *factor).collect()));
            }
            Op::Sum { input } => {
                out.push((*input, vec![g[0]; self.val(*input).shape().numel()]));
            }
            Op::WeightedSum { input, weights } => {
                out.push((*input, weights.iter().map(|w| *w * g[0]).collect()));
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.val(*pred).data(), self.val(*target).data());
                let k = g[0] * T::lit(2.0 / p.len() as f64);
                let d: Vec<T> = p.iter().zip(t).map(|(p, t)| (*p - *t) * k).collect();
                if self.nodes[target.0].requires_grad {
                    out.push((*target, d.iter().map(|v| -*v).collect()));
                }
                out.push((*pred, d));
            }
        }
        Ok(out)
    }
}

fn i_var(i: usize) -> Var {
    Var(i)
}
