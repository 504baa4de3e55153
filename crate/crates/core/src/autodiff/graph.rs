//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every op evaluates eagerly
//! and, when any operand requires a gradient, records itself so that
//! [`Graph::backward`] can replay the tape in reverse. A graph lives for one
//! forward pass; drop it after reading the gradients.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

use super::kernels;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis2d {
    /// Along the width (last) dimension.
    X,
    /// Along the height (second to last) dimension.
    Y,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    BroadcastTo(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Softmax { input: Var, axis: usize },
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Clamp { input: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    AvgPool2d { input: Var, kernel: usize },
    Upsample2d { input: Var, factor: usize },
    PadReflect { input: Var, pad: usize },
    Diff { input: Var, axis: Axis2d },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// (outer, axis length, inner) decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn expect_4d(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![0; 4],
        }),
    }
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

    /// Inserts a tensor that takes part in differentiation.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.insert_leaf(value, true)
    }

    /// Inserts a tensor that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.insert_leaf(value, false)
    }

    fn insert_leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Copies `x` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, x: Var) -> &Tensor {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, x: Var) -> Option<&[f64]> {
        self.nodes[x.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise binary ops with broadcasting ----

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape =
            kernels::broadcast_shape(sa, sb).ok_or_else(|| shape_err(name, sa, sb))?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = vec![0.0; numel(&out_shape)];
        kernels::for_each_broadcast(&out_shape, sa, sb, |o, ia, ib| {
            out[o] = f(va[ia], vb[ib]);
        });
        self.push(name, Tensor::from_parts(out_shape, out), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    // ---- unary ops ----

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("sqrt of a negative value"));
        }
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp { input: x, lo, hi })
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        match kernels::broadcast_shape(sx, shape) {
            Some(s) if s == shape => {}
            _ => return Err(shape_err("broadcast_to", sx, shape)),
        }
        let vx = self.value(x).data();
        let mut out = vec![0.0; numel(shape)];
        kernels::for_each_broadcast(shape, sx, shape, |o, ix, _| out[o] = vx[ix]);
        self.push(
            "broadcast_to",
            Tensor::from_parts(shape.to_vec(), out),
            Op::BroadcastTo(x),
            &[x],
        )
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        self.push(
            "softmax",
            Tensor::from_parts(shape, out),
            Op::Softmax { input: x, axis },
            &[x],
        )
    }

    // ---- linear algebra and layout ----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            (n, 1),
            0.0,
        );
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = match *self.shape(x) {
            [r, c] => (r, c),
            _ => return Err(shape_err("transpose", self.shape(x), &[0, 0])),
        };
        let out = kernels::transpose(self.value(x).data(), r, c);
        self.push("transpose", Tensor::from_parts(vec![c, r], out), Op::Transpose(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            "concat",
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err("slice", &shape, &[axis, start, len]));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(
            "slice",
            Tensor::from_parts(out_shape, out),
            Op::Slice { input: x, axis, start },
            &[x],
        )
    }

    // ---- spatial ops on NCHW tensors ----

    /// 2-D convolution (cross-correlation) with zero padding.
    ///
    /// `input` is `[N, C, H, W]`, `weight` is `[O, C, KH, KW]`, `bias` is `[O]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = expect_4d("conv2d", self.shape(input))?;
        let [o, wc, kh, kw] = expect_4d("conv2d", self.shape(weight))?;
        if wc != c || stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err("conv2d", self.shape(input), self.shape(weight)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(shape_err("conv2d", self.shape(b), &[o]));
            }
        }
        let geom = kernels::ConvGeom::new([c, h, w], [kh, kw], stride, padding);
        let mut out = vec![0.0; n * o * geom.out_pixels()];
        kernels::conv2d_forward(
            &geom,
            n,
            o,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            Tensor::from_parts(vec![n, o, geom.out_h, geom.out_w], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            &inputs,
        )
    }

    /// Non-overlapping average pooling with a square window.
    pub fn avg_pool2d(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let [n, c, h, w] = expect_4d("avg_pool2d", self.shape(x))?;
        if kernel == 0 || h % kernel != 0 || w % kernel != 0 {
            return Err(shape_err("avg_pool2d", self.shape(x), &[kernel, kernel]));
        }
        let (oh, ow) = (h / kernel, w / kernel);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let norm = 1.0 / (kernel * kernel) as f64;
        for p in 0..n * c {
            for i in 0..h {
                for j in 0..w {
                    out[p * oh * ow + (i / kernel) * ow + j / kernel] += src[p * h * w + i * w + j] * norm;
                }
            }
        }
        self.push(
            "avg_pool2d",
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::AvgPool2d { input: x, kernel },
            &[x],
        )
    }

    pub fn upsample_nearest2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = expect_4d("nearest_upsample2d", self.shape(x))?;
        if factor == 0 {
            return Err(shape_err("nearest_upsample2d", self.shape(x), &[0]));
        }
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for i in 0..oh {
                for j in 0..ow {
                    out[p * oh * ow + i * ow + j] = src[p * h * w + (i / factor) * w + j / factor];
                }
            }
        }
        self.push(
            "nearest_upsample2d",
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::Upsample2d { input: x, factor },
            &[x],
        )
    }

    /// Mirror padding that does not repeat the edge sample.
    pub fn pad_reflect(&mut self, x: Var, pad: usize) -> Result<Var> {
        let [n, c, h, w] = expect_4d("pad_reflect", self.shape(x))?;
        if pad >= h || pad >= w {
            return Err(shape_err("pad_reflect", self.shape(x), &[pad]));
        }
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for i in 0..oh {
                let si = kernels::reflect(i as isize - pad as isize, h);
                for j in 0..ow {
                    let sj = kernels::reflect(j as isize - pad as isize, w);
                    out[p * oh * ow + i * ow + j] = src[p * h * w + si * w + sj];
                }
            }
        }
        self.push(
            "pad_reflect",
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::PadReflect { input: x, pad },
            &[x],
        )
    }

    /// Forward difference along one spatial axis; the last row or column is zero.
    pub fn diff(&mut self, x: Var, axis: Axis2d) -> Result<Var> {
        let [n, c, h, w] = expect_4d("diff", self.shape(x))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..h {
                for j in 0..w {
                    let at = base + i * w + j;
                    out[at] = match axis {
                        Axis2d::X if j + 1 < w => src[at + 1] - src[at],
                        Axis2d::Y if i + 1 < h => src[at + w] - src[at],
                        _ => 0.0,
                    };
                }
            }
        }
        self.push(
            "diff",
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::Diff { input: x, axis },
            &[x],
        )
    }

    // ---- reverse pass ----

    /// Back-propagates from a scalar `loss`, adding into the gradient of
    /// every reachable leaf that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let (Some(g), node) = (g, &mut self.nodes[i]) else { continue };
            if node.requires_grad {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let out_shape = node.value.shape();
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        // Lazily creates the gradient buffer of `v` and hands it to `f`.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };

        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(a, &mut |ga| {
                    kernels::for_each_broadcast(out_shape, shp(a), shp(a), |o, ia, _| ga[ia] += g[o])
                });
                acc(b, &mut |gb| {
                    kernels::for_each_broadcast(out_shape, shp(b), shp(b), |o, ib, _| {
                        gb[ib] += sign * g[o]
                    })
                });
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |ga| {
                    kernels::for_each_broadcast(out_shape, shp(a), shp(b), |o, ia, ib| {
                        ga[ia] += g[o] * vb[ib]
                    })
                });
                acc(b, &mut |gb| {
                    kernels::for_each_broadcast(out_shape, shp(a), shp(b), |o, ia, ib| {
                        gb[ib] += g[o] * va[ia]
                    })
                });
            }
            &Op::Div(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |ga| {
                    kernels::for_each_broadcast(out_shape, shp(a), shp(b), |o, ia, ib| {
                        ga[ia] += g[o] / vb[ib]
                    })
                });
                acc(b, &mut |gb| {
                    kernels::for_each_broadcast(out_shape, shp(a), shp(b), |o, ia, ib| {
                        gb[ib] -= g[o] * va[ia] / (vb[ib] * vb[ib])
                    })
                });
            }
            &Op::Maximum(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |ga| {
                    kernels::for_each_broadcast(out_shape, shp(a), shp(b), |o, ia, ib| {
                        if va[ia] >= vb[ib] {
                            ga[ia] += g[o]
                        }
                    })
                });
                acc(b, &mut |gb| {
                    kernels::for_each_broadcast(out_shape, shp(a), shp(b), |o, ia, ib| {
                        if va[ia] < vb[ib] {
                            gb[ib] += g[o]
                        }
                    })
                });
            }
            &Op::Scale(x, c) => acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s)),
            &Op::AddScalar(x) | &Op::Reshape(x) => {
                acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += s))
            }
            &Op::BroadcastTo(x) => acc(x, &mut |gx| {
                kernels::for_each_broadcast(out_shape, shp(x), shp(x), |o, ix, _| gx[ix] += g[o])
            }),
            &Op::MatMul(a, b) => {
                let (m, n) = (out_shape[0], out_shape[1]);
                let k = shp(a)[1];
                // dA = G B^T, dB = A^T G
                acc(a, &mut |ga| kernels::gemm(m, n, k, g, (n, 1), val(b), (1, n), ga, (k, 1), 1.0));
                acc(b, &mut |gb| kernels::gemm(k, m, n, val(a), (1, k), g, (n, 1), gb, (n, 1), 1.0));
            }
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let [n, c, h, w]: [usize; 4] = shp(input).try_into().unwrap();
                let [o, _, kh, kw]: [usize; 4] = shp(weight).try_into().unwrap();
                let geom = kernels::ConvGeom::new([c, h, w], [kh, kw], stride, padding);
                if let Some(b) = bias {
                    acc(b, &mut |gb| {
                        let pix = geom.out_pixels();
                        for img in 0..n {
                            for (ch, d) in gb.iter_mut().enumerate() {
                                let start = (img * o + ch) * pix;
                                *d += g[start..start + pix].iter().sum::<f64>();
                            }
                        }
                    });
                }
                let x = val(input);
                let wt = val(weight);
                let mut gw_local = rg(weight).then(|| vec![0.0; wt.len()]);
                let mut gx_local = rg(input).then(|| vec![0.0; x.len()]);
                kernels::conv2d_backward(
                    &geom,
                    n,
                    o,
                    x,
                    wt,
                    g,
                    gw_local.as_deref_mut(),
                    gx_local.as_deref_mut(),
                );
                if let Some(gw) = gw_local {
                    acc(weight, &mut |d| d.iter_mut().zip(&gw).for_each(|(a, b)| *a += b));
                }
                if let Some(gx) = gx_local {
                    acc(input, &mut |d| d.iter_mut().zip(&gx).for_each(|(a, b)| *a += b));
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (shp(x)[0], shp(x)[1]);
                acc(x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = shp(v)[*axis];
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            for t in 0..len * inner {
                                gv[dst + t] += g[src + t];
                            }
                        }
                    });
                    offset += len;
                }
            }
            &Op::Slice { input, axis, start } => {
                let (outer, full, inner) = split_axis(shp(input), axis);
                let len = out_shape[axis];
                acc(input, &mut |gx| {
                    for o in 0..outer {
                        let dst = o * full * inner + start * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            gx[dst + t] += g[src + t];
                        }
                    }
                });
            }
            &Op::Softmax { input, axis } => {
                let (outer, len, inner) = split_axis(out_shape, axis);
                acc(input, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + i;
                            let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            &Op::Sigmoid(x) => acc(x, &mut |gx| {
                for ((d, s), yv) in gx.iter_mut().zip(g).zip(y) {
                    *d += s * yv * (1.0 - yv);
                }
            }),
            &Op::Relu(x) => {
                let vx = val(x);
                acc(x, &mut |gx| {
                    for ((d, s), xv) in gx.iter_mut().zip(g).zip(vx) {
                        if *xv > 0.0 {
                            *d += s;
                        }
                    }
                })
            }
            &Op::Abs(x) => {
                let vx = val(x);
                acc(x, &mut |gx| {
                    for ((d, s), xv) in gx.iter_mut().zip(g).zip(vx) {
                        if *xv > 0.0 {
                            *d += s;
                        } else if *xv < 0.0 {
                            *d -= s;
                        }
                    }
                })
            }
            &Op::Square(x) => {
                let vx = val(x);
                acc(x, &mut |gx| {
                    for ((d, s), xv) in gx.iter_mut().zip(g).zip(vx) {
                        *d += 2.0 * xv * s;
                    }
                })
            }
            &Op::Sqrt(x) => acc(x, &mut |gx| {
                for ((d, s), yv) in gx.iter_mut().zip(g).zip(y) {
                    *d += s / (2.0 * yv);
                }
            }),
            &Op::Clamp { input, lo, hi } => {
                let vx = val(input);
                acc(input, &mut |gx| {
                    for ((d, s), xv) in gx.iter_mut().zip(g).zip(vx) {
                        if *xv > lo && *xv < hi {
                            *d += s;
                        }
                    }
                })
            }
            &Op::Sum(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            &Op::Mean(x) => acc(x, &mut |gx| {
                let scale = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|d| *d += scale)
            }),
            &Op::AvgPool2d { input, kernel } => {
                let [_, _, h, w]: [usize; 4] = shp(input).try_into().unwrap();
                let (oh, ow) = (h / kernel, w / kernel);
                let norm = 1.0 / (kernel * kernel) as f64;
                acc(input, &mut |gx| {
                    for p in 0..gx.len() / (h * w) {
                        for i in 0..h {
                            for j in 0..w {
                                gx[p * h * w + i * w + j] += g[p * oh * ow + (i / kernel) * ow + j / kernel] * norm;
                            }
                        }
                    }
                });
            }
            &Op::Upsample2d { input, factor } => {
                let [_, _, h, w]: [usize; 4] = shp(input).try_into().unwrap();
                let (oh, ow) = (h * factor, w * factor);
                acc(input, &mut |gx| {
                    for p in 0..gx.len() / (h * w) {
                        for i in 0..oh {
                            for j in 0..ow {
                                gx[p * h * w + (i / factor) * w + j / factor] += g[p * oh * ow + i * ow + j];
                            }
                        }
                    }
                });
            }
            &Op::PadReflect { input, pad } => {
                let [_, _, h, w]: [usize; 4] = shp(input).try_into().unwrap();
                let (oh, ow) = (h + 2 * pad, w + 2 * pad);
                acc(input, &mut |gx| {
                    for p in 0..gx.len() / (h * w) {
                        for i in 0..oh {
                            let si = kernels::reflect(i as isize - pad as isize, h);
                            for j in 0..ow {
                                let sj = kernels::reflect(j as isize - pad as isize, w);
                                gx[p * h * w + si * w + sj] += g[p * oh * ow + i * ow + j];
                            }
                        }
                    }
                });
            }
            &Op::Diff { input, axis } => {
                let [_, _, h, w]: [usize; 4] = shp(input).try_into().unwrap();
                acc(input, &mut |gx| {
                    for p in 0..gx.len() / (h * w) {
                        let base = p * h * w;
                        for i in 0..h {
                            for j in 0..w {
                                let at = base + i * w + j;
                                let next = match axis {
                                    Axis2d::X if j + 1 < w => at + 1,
                                    Axis2d::Y if i + 1 < h => at + w,
                                    _ => continue,
                                };
                                gx[next] += g[at];
                                gx[at] -= g[at];
                            }
                        }
                    }
                });
            }
        }
    }
}
