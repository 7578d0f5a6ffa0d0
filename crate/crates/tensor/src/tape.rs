//! Append-only computation tape with reverse-mode differentiation.
//!
//! Every backward rule is written in terms of tape operations, so gradients
//! computed with `create_graph = true` are themselves differentiable. That is
//! what makes input-gradient penalties trainable.

use std::cell::{Cell, RefCell};
use std::ops;
use std::sync::Arc;

use crate::conv::{self, ConvGeom, ConvOpts};
use crate::fft;
use crate::tensor::broadcast_shape;
use crate::{Scalar, Tensor};

#[derive(Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddScalar(usize),
    MulConst(usize, Arc<Tensor<T>>),
    Square(usize),
    Recip(usize),
    Sqrt(usize),
    Rsqrt(usize),
    Exp(usize),
    Ln(usize),
    Sigmoid(usize),
    Softplus(usize),
    LeakyRelu(usize, T),
    Abs(usize),
    BroadcastTo(usize),
    SumTo(usize),
    Reshape(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Pad { x: usize, axis: usize, start: usize },
    Conv { x: usize, w: usize, geom: ConvGeom },
    ConvT { g: usize, w: usize, geom: ConvGeom },
    ConvW { x: usize, g: usize, geom: ConvGeom },
    Upsample2(usize),
    SumPool2(usize),
    Rfft2(usize),
    Irfft2(usize),
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            Neg(x) | Scale(x, _) | AddScalar(x) | MulConst(x, _) | Square(x) | Recip(x)
            | Sqrt(x) | Rsqrt(x) | Exp(x) | Ln(x) | Sigmoid(x) | Softplus(x)
            | LeakyRelu(x, _) | Abs(x) | BroadcastTo(x) | SumTo(x) | Reshape(x)
            | Upsample2(x) | SumPool2(x) | Rfft2(x) | Irfft2(x) => vec![*x],
            Narrow { x, .. } | Pad { x, .. } => vec![*x],
            Concat { parts, .. } => parts.clone(),
            Conv { x, w, .. } => vec![*x, *w],
            ConvT { g, w, .. } => vec![*g, *w],
            ConvW { x, g, .. } => vec![*x, *g],
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Owner of one computation graph. Dropping the tape frees every
/// intermediate value.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad =
            self.recording.get() && op.parents().iter().any(|&p| nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Arc::new(value), true)
    }

    pub fn var_shared(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Arc::new(value), false)
    }

    pub fn constant_shared(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.push_leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_, T> {
        self.constant(Tensor::scalar(T::lit(value)))
    }

    /// Runs `f` without recording history; results are constants.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.recording.replace(false);
        let out = f();
        self.recording.set(prev);
        out
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    /// Gradients of `sum(y)` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned gradients are recorded on the tape
    /// and can be differentiated again. Unreachable targets get zeros.
    pub fn grad<'t>(&'t self, y: Var<'t, T>, wrt: &[Var<'t, T>], create_graph: bool) -> Vec<Var<'t, T>> {
        let top = y.id;
        let mut needed = vec![false; top + 1];
        {
            let nodes = self.nodes.borrow();
            let mut lowest = top + 1;
            for w in wrt {
                if w.id <= top {
                    needed[w.id] = true;
                    lowest = lowest.min(w.id);
                }
            }
            for i in lowest..=top {
                if !needed[i] && nodes[i].requires_grad {
                    needed[i] = nodes[i].op.parents().iter().any(|&p| needed[p]);
                }
            }
        }
        let prev = self.recording.replace(create_graph);
        let mut grads: Vec<Option<Var<'t, T>>> = vec![None; top + 1];
        if needed[top] {
            grads[top] = Some(self.constant(Tensor::ones(&y.shape())));
        }
        for id in (0..=top).rev() {
            if !needed[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let out = Var { tape: self, id };
            for (p, gp) in self.backward(&op, out, g, &needed) {
                grads[p] = Some(match grads[p] {
                    Some(acc) => acc + gp,
                    None => gp,
                });
            }
        }
        let result = wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(&w.shape())),
            })
            .collect();
        self.recording.set(prev);
        result
    }

    fn backward<'t>(
        &'t self,
        op: &Op<T>,
        out: Var<'t, T>,
        g: Var<'t, T>,
        needed: &[bool],
    ) -> Vec<(usize, Var<'t, T>)> {
        let v = |id: usize| Var { tape: self, id };
        let need = |id: usize| needed[id];
        let mut res = Vec::with_capacity(2);
        let mut emit = |id: usize, f: &dyn Fn() -> Var<'t, T>| {
            if need(id) {
                res.push((id, f()));
            }
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, &|| g);
                emit(*b, &|| g);
            }
            Op::Sub(a, b) => {
                emit(*a, &|| g);
                emit(*b, &|| -g);
            }
            Op::Mul(a, b) => {
                emit(*a, &|| g * v(*b));
                emit(*b, &|| g * v(*a));
            }
            Op::Neg(x) => emit(*x, &|| -g),
            Op::Scale(x, c) => emit(*x, &|| g.scale_t(*c)),
            Op::AddScalar(x) => emit(*x, &|| g),
            Op::MulConst(x, m) => emit(*x, &|| g.mul_const(m.clone())),
            Op::Square(x) => emit(*x, &|| (g * v(*x)).scale(2.0)),
            Op::Recip(x) => emit(*x, &|| -(g * out.square())),
            Op::Sqrt(x) => emit(*x, &|| (g * out.recip()).scale(0.5)),
            Op::Rsqrt(x) => emit(*x, &|| (g * out.square() * out).scale(-0.5)),
            Op::Exp(x) => emit(*x, &|| g * out),
            Op::Ln(x) => emit(*x, &|| g * v(*x).recip()),
            Op::Sigmoid(x) => emit(*x, &|| g * out * (-out).add_scalar(1.0)),
            Op::Softplus(x) => emit(*x, &|| g * v(*x).sigmoid()),
            Op::LeakyRelu(x, slope) => emit(*x, &|| {
                let s = *slope;
                let mask = v(*x).value().map(|t| if t > T::zero() { T::one() } else { s });
                g.mul_const(Arc::new(mask))
            }),
            Op::Abs(x) => emit(*x, &|| {
                let mask = v(*x).value().map(|t| {
                    if t > T::zero() {
                        T::one()
                    } else if t < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                });
                g.mul_const(Arc::new(mask))
            }),
            Op::BroadcastTo(x) => emit(*x, &|| g.sum_to(&v(*x).shape())),
            Op::SumTo(x) => emit(*x, &|| g.broadcast_to(&v(*x).shape())),
            Op::Reshape(x) => emit(*x, &|| g.reshape(&v(*x).shape())),
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                emit(a, &|| {
                    if ta {
                        v(b).matmul_t(g, tb, true)
                    } else {
                        g.matmul_t(v(b), false, !tb)
                    }
                });
                emit(b, &|| {
                    if tb {
                        g.matmul_t(v(a), true, ta)
                    } else {
                        v(a).matmul_t(g, !ta, false)
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let len = v(p).shape()[*axis];
                    let start = offset;
                    emit(p, &|| g.narrow(*axis, start, len));
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                emit(*x, &|| g.pad_axis(*axis, *start, v(*x).shape()[*axis]))
            }
            Op::Pad { x, axis, start } => {
                emit(*x, &|| g.narrow(*axis, *start, v(*x).shape()[*axis]))
            }
            Op::Conv { x, w, geom } => {
                emit(*x, &|| Var::conv_t(g, v(*w), *geom));
                emit(*w, &|| Var::conv_w(v(*x), g, *geom));
            }
            Op::ConvT { g: go, w, geom } => {
                emit(*go, &|| Var::conv_geom(g, v(*w), *geom));
                emit(*w, &|| Var::conv_w(g, v(*go), *geom));
            }
            Op::ConvW { x, g: go, geom } => {
                emit(*x, &|| Var::conv_t(v(*go), g, *geom));
                emit(*go, &|| Var::conv_geom(v(*x), g, *geom));
            }
            Op::Upsample2(x) => emit(*x, &|| g.sum_pool2x()),
            Op::SumPool2(x) => emit(*x, &|| g.upsample2x()),
            Op::Rfft2(x) => emit(*x, &|| {
                let shape = v(*x).shape();
                let (h, w) = (shape[2], shape[3]);
                let hw = (h * w) as f64;
                let f = fft::column_factor(&g.shape(), w, |m| hw / m as f64);
                g.mul_const(Arc::new(f)).irfft2(w)
            }),
            Op::Irfft2(z) => emit(*z, &|| {
                let shape = out.shape();
                let (h, w) = (shape[2], shape[3]);
                let hw = (h * w) as f64;
                let f = fft::column_factor(&v(*z).shape(), w, |m| m as f64 / hw);
                g.rfft2().mul_const(Arc::new(f))
            }),
        }
        res
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> T {
        self.value().item()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant_shared(self.value())
    }

    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Self {
        let value = self.value().map(f);
        self.tape.push(value, op)
    }

    fn expand(self, shape: &[usize]) -> Self {
        let mut cur = self;
        let s = cur.shape();
        if s.len() < shape.len() {
            let mut padded = vec![1; shape.len() - s.len()];
            padded.extend_from_slice(&s);
            cur = cur.reshape(&padded);
        }
        if cur.shape() != shape {
            cur = cur.broadcast_to(shape);
        }
        cur
    }

    fn binary(self, other: Self, make: fn(usize, usize) -> Op<T>, f: fn(T, T) -> T) -> Self {
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            let shape = broadcast_shape(&sa, &sb)
                .unwrap_or_else(|| panic!("shapes {sa:?} and {sb:?} do not broadcast"));
            return self.expand(&shape).binary(other.expand(&shape), make, f);
        }
        let value = self.value().zip_map(&other.value(), f);
        self.tape.push(value, make(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Self {
        self.scale_t(T::lit(c))
    }

    pub fn scale_t(self, c: T) -> Self {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_scalar(self, c: f64) -> Self {
        let c = T::lit(c);
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    /// Elementwise product with a fixed tensor of the same shape.
    pub fn mul_const(self, m: Arc<Tensor<T>>) -> Self {
        let value = self.value().zip_map(&m, |a, b| a * b);
        self.tape.push(value, Op::MulConst(self.id, m))
    }

    pub fn square(self) -> Self {
        self.unary(Op::Square(self.id), |v| v * v)
    }

    pub fn recip(self) -> Self {
        self.unary(Op::Recip(self.id), |v| v.recip())
    }

    pub fn sqrt(self) -> Self {
        self.unary(Op::Sqrt(self.id), |v| v.sqrt())
    }

    pub fn rsqrt(self) -> Self {
        self.unary(Op::Rsqrt(self.id), |v| v.sqrt().recip())
    }

    pub fn exp(self) -> Self {
        self.unary(Op::Exp(self.id), |v| v.exp())
    }

    pub fn ln(self) -> Self {
        self.unary(Op::Ln(self.id), |v| v.ln())
    }

    pub fn sigmoid(self) -> Self {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Self {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn leaky_relu(self, slope: f64) -> Self {
        let s = T::lit(slope);
        self.unary(Op::LeakyRelu(self.id, s), move |v| if v > T::zero() { v } else { v * s })
    }

    pub fn relu(self) -> Self {
        self.leaky_relu(0.0)
    }

    pub fn abs(self) -> Self {
        self.unary(Op::Abs(self.id), |v| v.abs())
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self;
        }
        let value = self.value().broadcast_to(shape);
        self.tape.push(value, Op::BroadcastTo(self.id))
    }

    pub fn sum_to(self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self;
        }
        let value = self.value().sum_to(shape);
        self.tape.push(value, Op::SumTo(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self;
        }
        let value = self.value().reshape(shape);
        self.tape.push(value, Op::Reshape(self.id))
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(self, axes: &[usize]) -> Self {
        let mut shape = self.shape();
        for &a in axes {
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn mean_axes(self, axes: &[usize]) -> Self {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).scale(1.0 / count as f64)
    }

    /// Sum of all elements as a rank-0 value.
    pub fn sum_all(self) -> Self {
        let ones = vec![1; self.shape().len()];
        self.sum_to(&ones).reshape(&[])
    }

    pub fn mean_all(self) -> Self {
        let n: usize = self.shape().iter().product();
        self.sum_all().scale(1.0 / n as f64)
    }

    pub fn matmul(self, rhs: Self) -> Self {
        self.matmul_t(rhs, false, false)
    }

    /// `op(self) * op(rhs)` where `op` optionally transposes a rank-2 value.
    pub fn matmul_t(self, rhs: Self, ta: bool, tb: bool) -> Self {
        let value = self.value().matmul(&rhs.value(), ta, tb);
        self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                ta,
                tb,
            },
        )
    }

    pub fn concat(parts: &[Self], axis: usize) -> Self {
        assert!(!parts.is_empty(), "concat of nothing");
        if parts.len() == 1 {
            return parts[0];
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let value = Tensor::concat(&refs, axis);
        parts[0].tape.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        )
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Self {
        if start == 0 && self.shape()[axis] == len {
            return self;
        }
        let value = self.value().narrow(axis, start, len);
        self.tape.push(
            value,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        )
    }

    pub fn pad_axis(self, axis: usize, start: usize, total: usize) -> Self {
        let value = self.value().pad_axis(axis, start, total);
        self.tape.push(
            value,
            Op::Pad {
                x: self.id,
                axis,
                start,
            },
        )
    }

    /// 2-D cross-correlation of an NCHW input with an OIHW kernel.
    pub fn conv2d(self, w: Self, opts: ConvOpts) -> Self {
        let geom = ConvGeom::resolve(&self.shape(), &w.shape(), opts);
        Self::conv_geom(self, w, geom)
    }

    fn conv_geom(x: Self, w: Self, geom: ConvGeom) -> Self {
        let value = conv::conv2d(&x.value(), &w.value(), &geom);
        x.tape.push(value, Op::Conv { x: x.id, w: w.id, geom })
    }

    fn conv_t(g: Self, w: Self, geom: ConvGeom) -> Self {
        let value = conv::conv2d_transpose(&g.value(), &w.value(), &geom);
        g.tape.push(value, Op::ConvT { g: g.id, w: w.id, geom })
    }

    fn conv_w(x: Self, g: Self, geom: ConvGeom) -> Self {
        let value = conv::conv2d_weight_grad(&x.value(), &g.value(), &geom);
        x.tape.push(value, Op::ConvW { x: x.id, g: g.id, geom })
    }

    pub fn upsample2x(self) -> Self {
        let value = self.value().upsample2x();
        self.tape.push(value, Op::Upsample2(self.id))
    }

    pub fn sum_pool2x(self) -> Self {
        let value = self.value().sum_pool2x();
        self.tape.push(value, Op::SumPool2(self.id))
    }

    pub fn avg_pool2x(self) -> Self {
        self.sum_pool2x().scale(0.25)
    }

    /// Stacked real 2-D FFT, see [`crate::fft`].
    pub fn rfft2(self) -> Self {
        let value = fft::rfft2_stacked(&self.value());
        self.tape.push(value, Op::Rfft2(self.id))
    }

    /// Inverse of [`Var::rfft2`] producing width `w`.
    pub fn irfft2(self, w: usize) -> Self {
        let value = fft::irfft2_stacked(&self.value(), w);
        self.tape.push(value, Op::Irfft2(self.id))
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(v: T) -> T {
    // max(v, 0) + ln(1 + e^{-|v|})
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

impl<'t, T: Scalar> ops::Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Add, |a, b| a + b)
    }
}

impl<'t, T: Scalar> ops::Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Sub, |a, b| a - b)
    }
}

impl<'t, T: Scalar> ops::Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Mul, |a, b| a * b)
    }
}

impl<'t, T: Scalar> ops::Div for Var<'t, T> {
    type Output = Var<'t, T>;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, rhs: Self) -> Self {
        self * rhs.recip()
    }
}

impl<'t, T: Scalar> ops::Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Self {
        self.unary(Op::Neg(self.id), |v| -v)
    }
}
