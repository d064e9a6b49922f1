use super::kernels::{
    bilinear_resize_backward, bilinear_resize_forward, conv_backward, conv_forward,
    gemm, maxpool2_forward, ConvGeom,
};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused operation whose forward is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp<T: Real>: Send {
    fn name(&self) -> &'static str;

    /// One gradient per input, `None` where `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Matmul(Var, Var),
    Conv2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Pow(Var, T),
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    L2Normalize(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Resize(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Epsilon added to the norm in [`Tape::l2_normalize`].
pub const L2_EPS: f64 = 1e-8;

/// Single-writer record of operations for reverse-mode differentiation.
///
/// Leaf gradients accumulate across repeated [`Tape::backward`] calls until
/// [`Tape::zero_grad`]; gradients of interior nodes are recomputed each call.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: false,
        }
    }

    /// Turns on NaN/Inf detection for every recorded output.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root w.r.t. `v` (leaves only retain it).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let shape = self.shape(v).to_vec();
        self.grad(v)
            .map(|g| Tensor::new(shape, g.to_vec()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Trainable input.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push_unchecked(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_unchecked(t, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite {
            if let Some(index) = value.first_non_finite() {
                return Err(TensorError::NonFinite { op: name, index });
            }
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(name, out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("mul_scalar", a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -T::one())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, |x| x.ln(), Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, |x| x.abs(), Op::Abs(a))
    }

    pub fn power(&mut self, a: Var, p: T) -> Result<Var> {
        self.unary("power", a, |x| x.powf(p), Op::Pow(a, p))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::Invalid {
                op: "clamp",
                msg: format!("lower bound {lo} exceeds upper bound {hi}"),
            });
        }
        self.unary("clamp", a, |x| x.max(lo).min(hi), Op::Clamp { x: a, lo, hi })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let m = v.sum() / T::lit(v.len() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let row = &src[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let t = Tensor::new(new_shape, out)?;
        self.push("sum_axis", t, Op::SumAxis { x: a, axis }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of shape {shape:?}", start + len),
            });
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let t = Tensor::new(new_shape, out)?;
        self.push("slice", t, Op::Slice { x: a, axis, start }, &[a])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let ext = self.shape(x)[axis];
                let src = self.value(x).data();
                out.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        self.push(
            "concat",
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        let t = Tensor::new([m, n], out)?;
        self.push("matmul", t, Op::Matmul(a, b), &[a, b])
    }

    /// Stride-1 convolution with "same" zero padding; input [C_in,H,W],
    /// kernel [C_out,C_in,kh,kw] with odd kh, kw, optional bias [C_out].
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        if sx.len() != 3 {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 3,
                got: sx,
            });
        }
        if sk.len() != 4 {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 4,
                got: sk,
            });
        }
        if sk[1] != sx[0] || sk[2].is_multiple_of(2) || sk[3].is_multiple_of(2) {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [sk[0]] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![sk[0]],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            cin: sx[0],
            cout: sk[0],
            h: sx[1],
            w: sx[2],
            kh: sk[2],
            kw: sk[3],
        };
        let out = conv_forward(
            self.value(x).data(),
            self.value(k).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let t = Tensor::new([geom.cout, geom.h, geom.w], out)?;
        let mut inputs = vec![x, k];
        inputs.extend(bias);
        self.push("conv2d", t, Op::Conv2d { x, k, bias, geom }, &inputs)
    }

    /// 2×2 max pool, stride 2, over [C,H,W].
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(TensorError::Rank {
                op: "maxpool2",
                expected: 3,
                got: s,
            });
        }
        if s[1] < 2 || s[2] < 2 {
            return Err(TensorError::Invalid {
                op: "maxpool2",
                msg: format!("spatial dims too small: {s:?}"),
            });
        }
        let (out, argmax) = maxpool2_forward(self.value(x).data(), s[0], s[1], s[2]);
        let t = Tensor::new([s[0], s[1] / 2, s[2] / 2], out)?;
        self.push("maxpool2", t, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// Normalizes every column along axis 0: `x / (‖x‖ + 1e-8)`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() == 0 {
            return Err(TensorError::Rank {
                op: "l2_normalize",
                expected: 1,
                got: vec![],
            });
        }
        let c = v.shape()[0];
        let cols = v.len() / c.max(1);
        let norms = column_norms(v.data(), c, cols);
        let eps = T::lit(L2_EPS);
        let mut out = v.data().to_vec();
        for ch in 0..c {
            for j in 0..cols {
                out[ch * cols + j] /= norms[j] + eps ;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push("l2_normalize", t, Op::L2Normalize(x), &[x])
    }

    /// Bilinear resample of [C,H,W] to [C,oh,ow].
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(TensorError::Rank {
                op: "bilinear_resize",
                expected: 3,
                got: s,
            });
        }
        if oh == 0 || ow == 0 || s[1] == 0 || s[2] == 0 {
            return Err(TensorError::Invalid {
                op: "bilinear_resize",
                msg: format!("cannot resize {s:?} to {oh}x{ow}"),
            });
        }
        let out = bilinear_resize_forward(self.value(x).data(), s[0], s[1], s[2], oh, ow);
        let t = Tensor::new([s[0], oh, ow], out)?;
        self.push("bilinear_resize", t, Op::Resize(x), &[x])
    }

    /// Records a fused op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let name = op.name();
        self.push(
            name,
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape(root).to_vec()));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.grads, root.0, vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn send(&mut self, v: Var, contribution: Vec<T>) {
        if self.needs(v) {
            accumulate(&mut self.grads, v.0, contribution);
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        let mut sends: Vec<(Var, Vec<T>)> = Vec::new();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                sends.push((*a, g.to_vec()));
                sends.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                sends.push((*a, g.to_vec()));
                sends.push((*b, g.iter().map(|&x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.needs(*a) {
                    sends.push((*a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect()));
                }
                if self.needs(*b) {
                    sends.push((*b, g.iter().zip(va).map(|(&g, &x)| g * x).collect()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.needs(*a) {
                    sends.push((*a, g.iter().zip(vb).map(|(&g, &y)| g / y).collect()));
                }
                if self.needs(*b) {
                    let d = g
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect();
                    sends.push((*b, d));
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => sends.push((*a, g.to_vec())),
            Op::MulScalar(a, c) => sends.push((*a, g.iter().map(|&x| x * *c).collect())),
            Op::Matmul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g, false, val(*b), true, T::zero(), &mut da);
                    sends.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, val(*a), true, g, false, T::zero(), &mut db);
                    sends.push((*b, db));
                }
            }
            Op::Conv2d { x, k, bias, geom } => {
                let nb = bias.is_some_and(|b| self.needs(b));
                let (dx, dk, db) =
                    conv_backward(val(*x), val(*k), g, geom, self.needs(*x), self.needs(*k), nb);
                if let Some(d) = dx {
                    sends.push((*x, d));
                }
                if let Some(d) = dk {
                    sends.push((*k, d));
                }
                if let (Some(b), Some(d)) = (bias, db) {
                    sends.push((*b, d));
                }
            }
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(out)
                    .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                sends.push((*a, d));
            }
            Op::Sigmoid(a) => {
                let d = g.iter().zip(out).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                sends.push((*a, d));
            }
            Op::Exp(a) => sends.push((*a, g.iter().zip(out).map(|(&g, &y)| g * y).collect())),
            Op::Log(a) => {
                sends.push((*a, g.iter().zip(val(*a)).map(|(&g, &x)| g / x).collect()))
            }
            Op::Sqrt(a) => {
                let half = T::lit(0.5);
                sends.push((*a, g.iter().zip(out).map(|(&g, &y)| g * half / y).collect()))
            }
            Op::Abs(a) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                sends.push((*a, d));
            }
            Op::Pow(a, p) => {
                let pm1 = *p - T::one();
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| g * *p * x.powf(pm1))
                    .collect();
                sends.push((*a, d));
            }
            Op::Clamp { x, lo, hi } => {
                let d = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { T::zero() })
                    .collect();
                sends.push((*x, d));
            }
            Op::Sum(a) => sends.push((*a, vec![g[0]; nodes[a.0].value.len()])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len();
                sends.push((*a, vec![g[0] / T::lit(n as f64); n]));
            }
            Op::SumAxis { x, axis } => {
                let (outer, ext, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let mut d = Vec::with_capacity(outer * ext * inner);
                for o in 0..outer {
                    for _ in 0..ext {
                        d.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                sends.push((*x, d));
            }
            Op::Slice { x, axis, start } => {
                let (outer, ext, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let len = nodes[i].value.shape()[*axis];
                let mut d = vec![T::zero(); outer * ext * inner];
                for o in 0..outer {
                    let base = (o * ext + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                sends.push((*x, d));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(nodes[i].value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let ext = nodes[x.0].value.shape()[*axis];
                    if self.needs(x) {
                        let mut d = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + ext * inner]);
                        }
                        sends.push((x, d));
                    }
                    offset += ext;
                }
            }
            Op::L2Normalize(x) => {
                let xv = val(*x);
                let c = nodes[x.0].value.shape()[0];
                let cols = xv.len() / c.max(1);
                let norms = column_norms(xv, c, cols);
                let eps = T::lit(L2_EPS);
                let mut dots = vec![T::zero(); cols];
                for ch in 0..c {
                    for j in 0..cols {
                        dots[j] += xv[ch * cols + j] * g[ch * cols + j];
                    }
                }
                let mut d = vec![T::zero(); xv.len()];
                for ch in 0..c {
                    for j in 0..cols {
                        let n = norms[j];
                        let den = n + eps;
                        let mut v = g[ch * cols + j] / den;
                        if n > T::zero() {
                            v -= xv[ch * cols + j] * dots[j] / (n * den * den);
                        }
                        d[ch * cols + j] = v;
                    }
                }
                sends.push((*x, d));
            }
            Op::Resize(x) => {
                let s = nodes[x.0].value.shape();
                let o = nodes[i].value.shape();
                sends.push((*x, bilinear_resize_backward(g, s[0], s[1], s[2], o[1], o[2])));
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = vec![T::zero(); nodes[x.0].value.len()];
                for (&a, &gv) in argmax.iter().zip(g) {
                    d[a] += gv;
                }
                sends.push((*x, d));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let grads = op.backward(&ins, &nodes[i].value, g, &needs);
                for (&v, d) in inputs.iter().zip(grads) {
                    if let Some(d) = d {
                        debug_assert_eq!(d.len(), nodes[v.0].value.len(), "{}", op.name());
                        sends.push((v, d));
                    }
                }
            }
        }
        for (v, d) in sends {
            self.send(v, d);
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], i: usize, contribution: Vec<T>) {
    match &mut grads[i] {
        Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, c)| *a += c),
        slot @ None => *slot = Some(contribution),
    }
}

fn column_norms<T: Real>(x: &[T], c: usize, cols: usize) -> Vec<T> {
    let mut norms = vec![T::zero(); cols];
    for ch in 0..c {
        for j in 0..cols {
            let v = x[ch * cols + j];
            norms[j] += v * v;
        }
    }
    norms.iter_mut().for_each(|n| *n = n.sqrt());
    norms
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([2, 3, 3], |i| i as f64 * 0.5 - 2.0));
        let k = tape.constant(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(x, k, None).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn ones_conv_interior_and_corner() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 4, 4], 1.0f64));
        let k = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, None).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 4.0);
        assert_eq!(v[5], 9.0);
        assert_eq!(v[10], 9.0);
        assert_eq!(v[15], 4.0);
    }

    #[test]
    fn conv_rejects_2d_input() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([4, 4]));
        let k = tape.leaf(Tensor::zeros([1, 1, 3, 3]));
        let err = tape.conv2d(x, k, None).unwrap_err();
        assert!(matches!(err, TensorError::Rank { op: "conv2d", .. }));
    }

    #[test]
    fn conv_names_offending_dims() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([3, 4, 4]));
        let k = tape.leaf(Tensor::zeros([8, 2, 3, 3]));
        match tape.conv2d(x, k, None).unwrap_err() {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "conv2d");
                assert_eq!(lhs, vec![3, 4, 4]);
                assert_eq!(rhs, vec![8, 2, 3, 3]);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([2, 3, 2], |i| i as f64));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
        tape.zero_grad();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert_eq!(
            tape.backward(x).unwrap_err(),
            TensorError::NonScalarRoot(vec![2])
        );
    }

    #[test]
    fn finite_checks_catch_log_of_zero() {
        let mut tape = Tape::new().with_finite_checks();
        let x = tape.leaf(t(&[2], &[1.0, 0.0]));
        let err = tape.log(x).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "log", index: 1 });
    }

    #[test]
    fn l2_normalize_unit_norm() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3, 2], &[3.0, 0.0, 4.0, 0.0, 0.0, 0.05]));
        let y = tape.l2_normalize(x).unwrap();
        let v = tape.value(y).data();
        let n0 = (v[0] * v[0] + v[2] * v[2] + v[4] * v[4]).sqrt();
        let n1 = (v[1] * v[1] + v[3] * v[3] + v[5] * v[5]).sqrt();
        assert!((n0 - 1.0).abs() < 1e-6);
        assert!((n1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn slice_concat_inverse() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let a = tape.slice(x, 2, 0, 1).unwrap();
        let b = tape.slice(x, 2, 1, 3).unwrap();
        let c = tape.concat(&[a, b], 2).unwrap();
        assert_eq!(tape.value(c), tape.value(x));
    }

    #[test]
    fn sum_axis_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([2, 3], |i| i as f64));
        let s = tape.sum_axis(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[3.0, 5.0, 7.0]);
        let s1 = tape.sum_axis(x, 1).unwrap();
        assert_eq!(tape.value(s1).data(), &[3.0, 12.0]);
    }
}
