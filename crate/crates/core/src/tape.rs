//! Reverse-mode automatic differentiation over an explicit, per-pass tape.
//!
//! A [`Tape`] records every primitive applied to its [`Var`] handles. Each
//! primitive's vector-Jacobian product is itself written in terms of tape
//! primitives, so a backward pass run with `create_graph` produces gradients
//! that can be differentiated again. That is how second derivatives (and the
//! gradient of a loss built from first derivatives) are obtained.
//!
//! ```
//! use lwdistill::tape::{GradOptions, Tape};
//! use lwdistill::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0)).unwrap();
//! let y = tape.square(x).unwrap();
//! let g = tape.backward(y, &[x]).unwrap();
//! assert_eq!(g[0].item().unwrap(), 6.0);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Tensor};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        geo: ConvGeometry,
    },
    Conv2dInputGrad {
        g: Var,
        w: Var,
        geo: ConvGeometry,
    },
    Conv2dWeightGrad {
        x: Var,
        g: Var,
        geo: ConvGeometry,
    },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    ClampMin(Var, f64),
    AvgPool(Var, usize),
    AvgPoolGrad(Var, usize),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    SumAll(Var),
    SumAxis(Var),
    BroadcastTo(Var),
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Matmul(a, b) => [Some(a), Some(b)],
            Conv2d { x, w, .. } => [Some(x), Some(w)],
            Conv2dInputGrad { g, w, .. } => [Some(g), Some(w)],
            Conv2dWeightGrad { x, g, .. } => [Some(x), Some(g)],
            Scale(a, _) | Transpose(a) | Relu(a) | Tanh(a) | Exp(a) | Log(a) | Square(a) | Abs(a) | ClampMin(a, _)
            | AvgPool(a, _) | AvgPoolGrad(a, _) | Reshape(a) | Softmax(a) | LogSoftmax(a) | SumAll(a)
            | SumAxis(a) | BroadcastTo(a) => [Some(a), None],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Options for [`Tape::grad`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradOptions {
    /// Record the backward computation so the returned gradients are
    /// themselves differentiable. Implies `retain`.
    pub create_graph: bool,
    /// Keep the tape usable for further backward passes.
    pub retain: bool,
}

impl GradOptions {
    pub fn retained() -> Self {
        Self {
            create_graph: false,
            retain: true,
        }
    }

    pub fn higher_order() -> Self {
        Self {
            create_graph: true,
            retain: true,
        }
    }
}

/// Append-only record of one forward pass (plus any backward passes run on it).
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    no_grad: bool,
}

macro_rules! unary {
    ($(#[$doc:meta])* $name:ident, $op:ident, $label:literal, $kernel:expr) => {
        $(#[$doc])*
        pub fn $name(&mut self, a: Var) -> Result<Var> {
            let value = ($kernel)(self.value(a))?;
            self.push(Op::$op(a), value, $label)
        }
    };
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes; usable as a mark for [`Tape::truncate`].
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node recorded after `mark`. Vars created after the mark
    /// become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.ensure_finite("leaf")?;
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input (model parameter or anything we take derivatives
    /// with respect to).
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, label: &'static str) -> Result<Var> {
        value.ensure_finite(label)?;
        let requires_grad = !self.no_grad && op.inputs().iter().flatten().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Brings two operands to a common shape, inserting reshape/broadcast
    /// nodes as needed.
    fn broadcast_pair(&mut self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        if self.shape(a) == self.shape(b) {
            return Ok((a, b));
        }
        let target = tensor::broadcast_shape(self.shape(a), self.shape(b)).ok_or_else(|| Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        })?;
        Ok((self.expand(a, &target)?, self.expand(b, &target)?))
    }

    fn expand(&mut self, a: Var, target: &[usize]) -> Result<Var> {
        if self.shape(a) == target {
            return Ok(a);
        }
        let mut padded = vec![1; target.len() - self.shape(a).len()];
        padded.extend_from_slice(self.shape(a));
        let a = self.reshape(a, &padded)?;
        self.broadcast_to(a, target)
    }

    fn binary(&mut self, a: Var, b: Var, label: &'static str, mk: fn(Var, Var) -> Op, f: fn(f64, f64) -> f64) -> Result<Var> {
        let (a, b) = self.broadcast_pair(label, a, b)?;
        let value = self.value(a).zip_with(self.value(b), label, f)?;
        self.push(mk(a, b), value, label)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div, |x, y| x / y)
    }

    /// Multiply by a compile-time-constant factor.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * factor);
        self.push(Op::Scale(a, factor), value, "scale")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        self.push(Op::Matmul(a, b), value, "matmul")
    }

    unary!(transpose, Transpose, "transpose", tensor::transpose);

    pub fn conv2d(&mut self, x: Var, w: Var, geo: ConvGeometry) -> Result<Var> {
        let value = tensor::conv2d(self.value(x), self.value(w), geo)?;
        self.push(Op::Conv2d { x, w, geo }, value, "conv2d")
    }

    fn conv2d_input_grad(&mut self, g: Var, w: Var, geo: ConvGeometry, in_hw: (usize, usize)) -> Result<Var> {
        let value = tensor::conv2d_input_grad(self.value(g), self.value(w), geo, in_hw)?;
        self.push(Op::Conv2dInputGrad { g, w, geo }, value, "conv2d_input_grad")
    }

    fn conv2d_weight_grad(&mut self, x: Var, g: Var, geo: ConvGeometry, kernel: (usize, usize)) -> Result<Var> {
        let value = tensor::conv2d_weight_grad(self.value(x), self.value(g), geo, kernel)?;
        self.push(Op::Conv2dWeightGrad { x, g, geo }, value, "conv2d_weight_grad")
    }

    unary!(relu, Relu, "relu", |t: &Tensor| -> Result<Tensor> { Ok(t.map(|v| v.max(0.0))) });
    unary!(tanh, Tanh, "tanh", |t: &Tensor| -> Result<Tensor> { Ok(t.map(f64::tanh)) });
    unary!(exp, Exp, "exp", |t: &Tensor| -> Result<Tensor> { Ok(t.map(f64::exp)) });
    unary!(
        /// Natural logarithm; non-positive inputs are rejected as non-finite.
        log, Log, "log", |t: &Tensor| -> Result<Tensor> { Ok(t.map(f64::ln)) }
    );
    unary!(square, Square, "square", |t: &Tensor| -> Result<Tensor> { Ok(t.map(|v| v * v)) });
    unary!(abs, Abs, "abs", |t: &Tensor| -> Result<Tensor> { Ok(t.map(f64::abs)) });
    unary!(softmax, Softmax, "softmax", tensor::softmax_last);
    unary!(log_softmax, LogSoftmax, "log_softmax", tensor::log_softmax_last);

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v.max(floor));
        self.push(Op::ClampMin(a, floor), value, "clamp_min")
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let value = tensor::avg_pool2d(self.value(x), k)?;
        self.push(Op::AvgPool(x, k), value, "avg_pool2d")
    }

    fn avg_pool2d_grad(&mut self, g: Var, k: usize) -> Result<Var> {
        let value = tensor::avg_pool2d_grad(self.value(g), k)?;
        self.push(Op::AvgPoolGrad(g, k), value, "avg_pool2d_grad")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let value = self.value(a).reshape(shape)?;
        self.push(Op::Reshape(a), value, "reshape")
    }

    /// Collapse all but the leading (batch) axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let lead = shape.first().copied().unwrap_or(1);
        let rest: usize = shape.iter().skip(1).product();
        self.reshape(a, &[lead, rest])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), value, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = tensor::sum_axis_keepdim(self.value(a), axis)?;
        self.push(Op::SumAxis(a), value, "sum_axis")
    }

    /// Mean along `axis`, with the axis removed.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(a).get(axis).ok_or_else(|| Error::InvalidShape {
            op: "mean_axis",
            shape: self.shape(a).to_vec(),
            reason: format!("axis {axis} out of range"),
        })?;
        let mut out_shape = self.shape(a).to_vec();
        out_shape.remove(axis);
        let s = self.sum_axis(a, axis)?;
        let s = self.reshape(s, &out_shape)?;
        self.scale(s, 1.0 / len as f64)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let value = tensor::broadcast_to(self.value(a), shape)?;
        self.push(Op::BroadcastTo(a), value, "broadcast_to")
    }

    /// Reduce a broadcast result back to `shape` (the adjoint of broadcasting).
    fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let mut cur = a;
        let src = self.shape(a).to_vec();
        for (axis, (&s, &t)) in src.iter().zip(shape).enumerate() {
            if s != t {
                cur = self.sum_axis(cur, axis)?;
            }
        }
        Ok(cur)
    }

    /// Elementwise product with a constant tensor of the same shape.
    fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let c = self.constant(c)?;
        self.mul(a, c)
    }

    /// Vector-Jacobian product of node `i` given its output cotangent `g`.
    /// Every contribution is built from tape primitives so it can itself be
    /// differentiated when the backward pass records a graph.
    fn vjp(&mut self, i: usize, g: Var) -> Result<[Option<(Var, Var)>; 2]> {
        let node_var = Var(i);
        let op = self.nodes[i].op.clone();
        let out = match op {
            Op::Leaf => [None, None],
            Op::Add(a, b) => [Some((a, g)), Some((b, g))],
            Op::Sub(a, b) => {
                let nb = self.neg(g)?;
                [Some((a, g)), Some((b, nb))]
            }
            Op::Mul(a, b) => {
                let ga = self.mul(g, b)?;
                let gb = self.mul(g, a)?;
                [Some((a, ga)), Some((b, gb))]
            }
            Op::Div(a, b) => {
                // d(a/b) = g/b da - g a/b^2 db
                let ga = self.div(g, b)?;
                let t = self.mul(ga, node_var)?;
                let gb = self.neg(t)?;
                [Some((a, ga)), Some((b, gb))]
            }
            Op::Scale(a, f) => [Some((a, self.scale(g, f)?)), None],
            Op::Matmul(a, b) => {
                let bt = self.transpose(b)?;
                let ga = self.matmul(g, bt)?;
                let at = self.transpose(a)?;
                let gb = self.matmul(at, g)?;
                [Some((a, ga)), Some((b, gb))]
            }
            Op::Transpose(a) => [Some((a, self.transpose(g)?)), None],
            Op::Conv2d { x, w, geo } => {
                let xs = self.shape(x).to_vec();
                let ws = self.shape(w).to_vec();
                let gx = self.conv2d_input_grad(g, w, geo, (xs[2], xs[3]))?;
                let gw = self.conv2d_weight_grad(x, g, geo, (ws[2], ws[3]))?;
                [Some((x, gx)), Some((w, gw))]
            }
            Op::Conv2dInputGrad { g: cg, w, geo } => {
                // bilinear in (cg, w): <dz, A(cg, w)> = <cg, conv(dz, w)> = <w, wgrad(dz, cg)>
                let ws = self.shape(w).to_vec();
                let d_cg = self.conv2d(g, w, geo)?;
                let d_w = self.conv2d_weight_grad(g, cg, geo, (ws[2], ws[3]))?;
                [Some((cg, d_cg)), Some((w, d_w))]
            }
            Op::Conv2dWeightGrad { x, g: cg, geo } => {
                // <dw, B(x, cg)> = <cg, conv(x, dw)> = <x, A(cg, dw)>
                let xs = self.shape(x).to_vec();
                let d_x = self.conv2d_input_grad(cg, g, geo, (xs[2], xs[3]))?;
                let d_cg = self.conv2d(x, g, geo)?;
                [Some((x, d_x)), Some((cg, d_cg))]
            }
            Op::Relu(a) => {
                let mask = self.value(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                [Some((a, self.mul_const(g, mask)?)), None]
            }
            Op::Tanh(a) => {
                // (1 - y^2) g
                let y2 = self.square(node_var)?;
                let gy2 = self.mul(g, y2)?;
                let ga = self.sub(g, gy2)?;
                [Some((a, ga)), None]
            }
            Op::Exp(a) => [Some((a, self.mul(g, node_var)?)), None],
            Op::Log(a) => [Some((a, self.div(g, a)?)), None],
            Op::Square(a) => {
                let t = self.mul(g, a)?;
                [Some((a, self.scale(t, 2.0)?)), None]
            }
            Op::Abs(a) => {
                let sign = self.value(a).map(f64::signum);
                [Some((a, self.mul_const(g, sign)?)), None]
            }
            Op::ClampMin(a, floor) => {
                let mask = self.value(a).map(|v| if v > floor { 1.0 } else { 0.0 });
                [Some((a, self.mul_const(g, mask)?)), None]
            }
            Op::AvgPool(a, k) => [Some((a, self.avg_pool2d_grad(g, k)?)), None],
            Op::AvgPoolGrad(a, k) => [Some((a, self.avg_pool2d(g, k)?)), None],
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                [Some((a, self.reshape(g, &shape)?)), None]
            }
            Op::Softmax(a) => {
                // y * (g - sum(g * y))
                let last = self.shape(a).len() - 1;
                let shape = self.shape(a).to_vec();
                let gy = self.mul(g, node_var)?;
                let s = self.sum_axis(gy, last)?;
                let s = self.broadcast_to(s, &shape)?;
                let d = self.sub(g, s)?;
                [Some((a, self.mul(node_var, d)?)), None]
            }
            Op::LogSoftmax(a) => {
                // g - softmax * sum(g)
                let last = self.shape(a).len() - 1;
                let shape = self.shape(a).to_vec();
                let p = self.exp(node_var)?;
                let s = self.sum_axis(g, last)?;
                let s = self.broadcast_to(s, &shape)?;
                let ps = self.mul(p, s)?;
                [Some((a, self.sub(g, ps)?)), None]
            }
            Op::SumAll(a) => {
                let shape = self.shape(a).to_vec();
                let ones = vec![1; shape.len()];
                let g1 = self.reshape(g, &ones)?;
                [Some((a, self.broadcast_to(g1, &shape)?)), None]
            }
            Op::SumAxis(a) => {
                let shape = self.shape(a).to_vec();
                [Some((a, self.broadcast_to(g, &shape)?)), None]
            }
            Op::BroadcastTo(a) => {
                let shape = self.shape(a).to_vec();
                [Some((a, self.sum_to(g, &shape)?)), None]
            }
        };
        Ok(out)
    }

    /// Gradients of `output` (a scalar) with respect to each var in `wrt`.
    ///
    /// Vars that `output` does not depend on receive zero gradients.
    pub fn grad(&mut self, output: Var, wrt: &[Var], opts: GradOptions) -> Result<Vec<Var>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(output).numel() != 1 || !self.shape(output).is_empty() {
            return Err(Error::NotScalar(self.shape(output).to_vec()));
        }
        let n = output.0 + 1;
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.0 < n {
                relevant[w.0] = true;
            }
        }
        for i in 0..n {
            if !relevant[i] && self.nodes[i].op.inputs().iter().flatten().any(|v| relevant[v.0]) {
                relevant[i] = true;
            }
        }

        let saved_no_grad = self.no_grad;
        self.no_grad = !opts.create_graph;
        let result = self.accumulate(output, n, &relevant, wrt);
        self.no_grad = saved_no_grad;
        if !opts.retain && !opts.create_graph {
            self.consumed = true;
        }
        result
    }

    fn accumulate(&mut self, output: Var, n: usize, relevant: &[bool], wrt: &[Var]) -> Result<Vec<Var>> {
        let mut adjoint: Vec<Option<Var>> = vec![None; n];
        adjoint[output.0] = Some(self.constant(Tensor::scalar(1.0))?);
        for i in (0..n).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !relevant[i] {
                continue;
            }
            for (input, contrib) in self.vjp(i, g)?.into_iter().flatten() {
                if !relevant[input.0] {
                    continue;
                }
                adjoint[input.0] = Some(match adjoint[input.0] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }
        wrt.iter()
            .map(|w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let zeros = Tensor::zeros(self.shape(*w));
                    self.constant(zeros)
                }
            })
            .collect()
    }

    /// First-order gradients as plain tensors. Consumes the tape: a second
    /// call fails with [`Error::TapeConsumed`]. Use [`Tape::grad`] with
    /// [`GradOptions::retained`] to keep it.
    pub fn backward(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.grad(output, wrt, GradOptions::default())?;
        Ok(grads.into_iter().map(|g| self.value(g).clone()).collect())
    }

    /// Diagonal of the Hessian of `output` with respect to each var in
    /// `params`, one tensor per var, computed exactly by differentiating the
    /// recorded first backward pass once per coordinate.
    pub fn hessian_diag(&mut self, output: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.grad(output, params, GradOptions::higher_order())?;
        let mut diags = Vec::with_capacity(params.len());
        for (&p, &g) in params.iter().zip(&grads) {
            let shape = self.shape(p).to_vec();
            let n = self.value(p).numel();
            let mut diag = vec![0.0; n];
            if self.requires_grad(g) {
                for (k, slot) in diag.iter_mut().enumerate() {
                    let mark = self.len();
                    let mut onehot = Tensor::zeros(&shape);
                    onehot.data_mut()[k] = 1.0;
                    let picked = self.mul_const(g, onehot)?;
                    let gk = self.sum(picked)?;
                    let h = self.grad(gk, &[p], GradOptions::retained())?;
                    *slot = self.value(h[0]).data()[k];
                    self.truncate(mark);
                }
            }
            diags.push(Tensor::new(shape, diag)?);
        }
        Ok(diags)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0)).unwrap();
        let y = tape.square(x).unwrap();
        assert_eq!(tape.backward(y, &[x]).unwrap()[0].item().unwrap(), 6.0);
    }

    #[test]
    fn relu_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![-1.0, 2.0])).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let s = tape.sum(r).unwrap();
        assert_eq!(tape.backward(s, &[x]).unwrap()[0].data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_forward_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0])).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn backward_twice_without_retention_fails() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0)).unwrap();
        let y = tape.square(x).unwrap();
        tape.backward(y, &[x]).unwrap();
        assert!(matches!(tape.backward(y, &[x]), Err(Error::TapeConsumed)));
    }

    #[test]
    fn retained_backward_can_repeat() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0)).unwrap();
        let y = tape.square(x).unwrap();
        let a = tape.grad(y, &[x], GradOptions::retained()).unwrap();
        let b = tape.grad(y, &[x], GradOptions::retained()).unwrap();
        assert_eq!(tape.value(a[0]), tape.value(b[0]));
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let y = tape.square(x).unwrap();
        assert!(matches!(tape.backward(y, &[x]), Err(Error::NotScalar(_))));
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let mut tape = Tape::new();
        assert!(matches!(tape.param(Tensor::scalar(f64::NAN)), Err(Error::NonFinite { .. })));
        let z = tape.constant(Tensor::scalar(0.0)).unwrap();
        assert!(matches!(tape.log(z), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[4])).unwrap();
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn cube_second_derivative() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0)).unwrap();
        let x2 = tape.square(x).unwrap();
        let x3 = tape.mul(x2, x).unwrap();
        let h = tape.hessian_diag(x3, &[x]).unwrap();
        assert!((h[0].item().unwrap() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_diagonal_is_two() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.5, -1.0, 4.0])).unwrap();
        let sq = tape.square(x).unwrap();
        let s = tape.sum(sq).unwrap();
        let h = tape.hessian_diag(s, &[x]).unwrap();
        assert_eq!(h[0].data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn unrelated_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0)).unwrap();
        let y = tape.param(t(&[2], &[1.0, 1.0])).unwrap();
        let z = tape.square(x).unwrap();
        let g = tape.backward(z, &[y]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn broadcast_bias_gradient_sums_over_batch() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let b = tape.param(t(&[2], &[0.1, 0.2])).unwrap();
        let y = tape.add(x, b).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s, &[b]).unwrap();
        assert_eq!(g[0].shape(), &[2]);
        assert_eq!(g[0].data(), &[3.0, 3.0]);
    }

    #[test]
    fn truncate_discards_later_nodes() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0)).unwrap();
        let mark = tape.len();
        tape.square(x).unwrap();
        assert_eq!(tape.len(), mark + 1);
        tape.truncate(mark);
        assert_eq!(tape.len(), mark);
    }
}
