use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::{Tensor, TensorError, CLAMP_EPS};
use crate::scalar::Scalar;

/// Pointwise nonlinearity selectable from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

type CustomBackward<T> = Box<dyn Fn(&[T], &[&Tensor<T>], &Tensor<T>) -> Vec<Vec<T>>>;

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Maximum(usize, usize),
    Minimum(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddScalar(usize),
    Sigmoid(usize),
    Relu(usize),
    Gelu(usize),
    Log(usize),
    Exp(usize),
    Abs(usize),
    Powf(usize, T),
    Sum(usize),
    Mean(usize),
    Softmax {
        x: usize,
        lanes: Lanes,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Transpose(usize),
    Reshape(usize),
    Slice {
        x: usize,
        lanes: Lanes,
        start: usize,
        count: usize,
    },
    Concat {
        parts: Vec<(usize, usize)>,
        outer: usize,
        inner: usize,
    },
    SelectRows {
        x: usize,
        idx: Vec<usize>,
    },
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Custom {
        inputs: Vec<usize>,
        backward: CustomBackward<T>,
    },
}

/// Decomposition of a shape around one axis: `outer × len × inner`.
#[derive(Debug, Clone, Copy)]
struct Lanes {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Lanes {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records executed operations so that `backward` can replay them in reverse.
///
/// Nodes are appended in execution order, which is a topological order by
/// construction. A tape is single-threaded; independent tapes may live on
/// different threads.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Option<Vec<Option<Vec<T>>>>>,
    backward_done: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("backward_done", &self.backward_done.get())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

/// `b` may equal `a` or be a trailing suffix of it (leading-axis expansion).
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(None),
            backward_done: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    /// Concatenates along `axis`; every other extent must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut total = 0;
        let mut meta = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let same_rank = s.len() == base.len();
            if !same_rank
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(mismatch("concat", &base, &s));
            }
            total += s[axis];
            meta.push((p.id, s[axis]));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for &(id, len) in &meta {
                    let src = &nodes[id].value.data;
                    let w = len * inner;
                    data.extend_from_slice(&src[o * w..(o + 1) * w]);
                }
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = meta.iter().map(|m| m.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: meta,
                outer,
                inner,
            },
            rg,
        ))
    }

    /// Records an operation whose backward rule is supplied by the caller.
    ///
    /// `backward(grad_out, inputs, output)` returns one gradient buffer per input.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t, T>],
        value: Tensor<T>,
        backward: impl Fn(&[T], &[&Tensor<T>], &Tensor<T>) -> Vec<Vec<T>> + 'static,
    ) -> Var<'t, T> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = self.rg(&ids);
        self.push(
            value,
            Op::Custom {
                inputs: ids,
                backward: Box::new(backward),
            },
            rg,
        )
    }

    /// Clears stored gradients so `backward` may run again.
    pub fn reset_grads(&self) {
        *self.grads.borrow_mut() = None;
        self.backward_done.set(false);
    }

    /// Reverse sweep from a scalar loss, accumulating into every leaf.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<(), TensorError> {
        if self.backward_done.get() {
            return Err(TensorError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape.clone()));
        }
        if !root.requires_grad {
            return Err(TensorError::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, &mut grads, node, &g);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = Some(grads);
        self.backward_done.set(true);
        Ok(())
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn unary(&self, x: usize, f: impl Fn(T) -> T, op: Op<T>) -> Var<'_, T> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[x].value.map(f), nodes[x].requires_grad)
        };
        self.push(value, op, rg)
    }

    fn binary(
        &self,
        name: &'static str,
        a: usize,
        b: usize,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'_, T>, TensorError> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            if !broadcastable(&va.shape, &vb.shape) {
                return Err(mismatch(name, &va.shape, &vb.shape));
            }
            let nb = vb.data.len();
            let data = if nb == va.data.len() {
                va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect()
            } else {
                va.data
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, vb.data[i % nb]))
                    .collect()
            };
            (
                Tensor {
                    shape: va.shape.clone(),
                    data,
                },
                nodes[a].requires_grad || nodes[b].requires_grad,
            )
        };
        Ok(self.push(value, op, rg))
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, n: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); n])
}

/// Adds `g` (shaped like the output) into the gradient of a possibly broadcast input.
fn acc_broadcast<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize, g: impl Iterator<Item = T>) {
    if !nodes[id].requires_grad {
        return;
    }
    let n = nodes[id].value.data.len();
    let dst = slot(grads, id, n);
    for (i, v) in g.enumerate() {
        dst[i % n] += v;
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize, g: impl Iterator<Item = T>) {
    if !nodes[id].requires_grad {
        return;
    }
    let n = nodes[id].value.data.len();
    let dst = slot(grads, id, n);
    for (d, v) in dst.iter_mut().zip(g) {
        *d += v;
    }
}

fn bval<T: Scalar>(b: &Tensor<T>, i: usize) -> T {
    b.data[i % b.data.len()]
}

fn backprop<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T]) {
    let out = &node.value;
    let eps = T::of(CLAMP_EPS);
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, nodes, *a, g.iter().copied());
            acc_broadcast(grads, nodes, *b, g.iter().copied());
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, g.iter().copied());
            acc_broadcast(grads, nodes, *b, g.iter().map(|&v| -v));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            acc(grads, nodes, *a, g.iter().enumerate().map(|(i, &v)| v * bval(vb, i)));
            acc_broadcast(grads, nodes, *b, g.iter().enumerate().map(|(i, &v)| v * va.data[i]));
        }
        Op::Div(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            acc(
                grads,
                nodes,
                *a,
                g.iter().enumerate().map(|(i, &v)| v / bval(vb, i).max(eps)),
            );
            acc_broadcast(
                grads,
                nodes,
                *b,
                g.iter().enumerate().map(|(i, &v)| {
                    let d = bval(vb, i);
                    if d > eps {
                        -v * va.data[i] / (d * d)
                    } else {
                        T::zero()
                    }
                }),
            );
        }
        Op::Maximum(a, b) | Op::Minimum(a, b) => {
            let is_max = matches!(node.op, Op::Maximum(..));
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let pick_a = |i: usize| {
                let (x, y) = (va.data[i], bval(vb, i));
                if is_max {
                    x >= y
                } else {
                    x <= y
                }
            };
            acc(
                grads,
                nodes,
                *a,
                g.iter()
                    .enumerate()
                    .map(|(i, &v)| if pick_a(i) { v } else { T::zero() }),
            );
            acc_broadcast(
                grads,
                nodes,
                *b,
                g.iter()
                    .enumerate()
                    .map(|(i, &v)| if pick_a(i) { T::zero() } else { v }),
            );
        }
        Op::Neg(a) => acc(grads, nodes, *a, g.iter().map(|&v| -v)),
        Op::Scale(a, c) => acc(grads, nodes, *a, g.iter().map(|&v| v * *c)),
        Op::AddScalar(a) => acc(grads, nodes, *a, g.iter().copied()),
        Op::Sigmoid(a) => acc(
            grads,
            nodes,
            *a,
            g.iter().zip(&out.data).map(|(&v, &y)| v * y * (T::one() - y)),
        ),
        Op::Relu(a) => {
            let x = &nodes[*a].value;
            acc(
                grads,
                nodes,
                *a,
                g.iter()
                    .zip(&x.data)
                    .map(|(&v, &x)| if x > T::zero() { v } else { T::zero() }),
            )
        }
        Op::Gelu(a) => {
            let x = &nodes[*a].value;
            acc(grads, nodes, *a, g.iter().zip(&x.data).map(|(&v, &x)| v * gelu_grad(x)))
        }
        Op::Log(a) => {
            let x = &nodes[*a].value;
            acc(
                grads,
                nodes,
                *a,
                g.iter()
                    .zip(&x.data)
                    .map(|(&v, &x)| if x > eps { v / x } else { T::zero() }),
            )
        }
        Op::Exp(a) => acc(grads, nodes, *a, g.iter().zip(&out.data).map(|(&v, &y)| v * y)),
        Op::Abs(a) => {
            let x = &nodes[*a].value;
            acc(
                grads,
                nodes,
                *a,
                g.iter().zip(&x.data).map(|(&v, &x)| {
                    if x > T::zero() {
                        v
                    } else if x < T::zero() {
                        -v
                    } else {
                        T::zero()
                    }
                }),
            )
        }
        Op::Powf(a, c) => {
            let x = &nodes[*a].value;
            let c = *c;
            acc(
                grads,
                nodes,
                *a,
                g.iter().zip(&x.data).map(|(&v, &x)| {
                    if x == T::zero() && c < T::one() {
                        T::zero()
                    } else {
                        v * c * x.powf(c - T::one())
                    }
                }),
            )
        }
        Op::Sum(a) => {
            let n = nodes[*a].value.numel();
            acc(grads, nodes, *a, std::iter::repeat_n(g[0], n))
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.numel();
            let v = g[0] / T::of(n.max(1) as f64);
            acc(grads, nodes, *a, std::iter::repeat_n(v, n))
        }
        Op::Softmax { x, lanes } => {
            if !nodes[*x].requires_grad {
                return;
            }
            let Lanes { outer, len, inner } = *lanes;
            let y = &out.data;
            let dst = slot(grads, *x, y.len());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * len * inner + k * inner + i;
                    let dot: T = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                    for k in 0..len {
                        dst[at(k)] += y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = nodes[*gain].value.numel();
            let rows = rstd.len();
            let gv = &nodes[*gain].value.data;
            if nodes[*gain].requires_grad {
                let dst = slot(grads, *gain, d);
                for r in 0..rows {
                    for j in 0..d {
                        dst[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if nodes[*bias].requires_grad {
                let dst = slot(grads, *bias, d);
                for r in 0..rows {
                    for j in 0..d {
                        dst[j] += g[r * d + j];
                    }
                }
            }
            if nodes[*x].requires_grad {
                let dst = slot(grads, *x, rows * d);
                let inv_d = T::one() / T::of(d as f64);
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let base = r * d;
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        dxhat[j] = g[base + j] * gv[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[base + j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for j in 0..d {
                        dst[base + j] += rstd[r] * (dxhat[j] - m1 - xhat[base + j] * m2);
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (out.shape[1], out.shape[0]);
            // input is [m, n], output [n, m]
            acc(
                grads,
                nodes,
                *a,
                (0..m * n).map(|idx| {
                    let (i, j) = (idx / n, idx % n);
                    g[j * m + i]
                }),
            )
        }
        Op::Reshape(a) => acc(grads, nodes, *a, g.iter().copied()),
        Op::Slice {
            x,
            lanes,
            start,
            count,
        } => {
            if !nodes[*x].requires_grad {
                return;
            }
            let Lanes { outer, len, inner } = *lanes;
            let dst = slot(grads, *x, outer * len * inner);
            let w = count * inner;
            for o in 0..outer {
                let src = &g[o * w..(o + 1) * w];
                let off = o * len * inner + start * inner;
                for (d, &v) in dst[off..off + w].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        Op::Concat { parts, outer, inner } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut off = 0;
            for &(id, len) in parts {
                if nodes[id].requires_grad {
                    let w = len * inner;
                    let dst = slot(grads, id, outer * w);
                    for o in 0..*outer {
                        let src = &g[o * total * inner + off * inner..][..w];
                        for (d, &v) in dst[o * w..(o + 1) * w].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                off += len;
            }
        }
        Op::SelectRows { x, idx } => {
            if !nodes[*x].requires_grad {
                return;
            }
            let w = nodes[*x].value.row_len();
            let n = nodes[*x].value.numel();
            let dst = slot(grads, *x, n);
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..w {
                    dst[i * w + j] += g[r * w + j];
                }
            }
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
            if nodes[*a].requires_grad {
                // dA[m,k] += G[m,n] · Bᵀ
                let dst = slot(grads, *a, m * k);
                T::gemm(m, n, k, T::one(), g, n as isize, 1, &vb.data, 1, n as isize, T::one(), dst, k as isize, 1);
            }
            if nodes[*b].requires_grad {
                // dB[k,n] += Aᵀ · G
                let dst = slot(grads, *b, k * n);
                T::gemm(k, m, n, T::one(), &va.data, 1, k as isize, g, n as isize, 1, T::one(), dst, n as isize, 1);
            }
        }
        Op::MatMulNT(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[0]);
            if nodes[*a].requires_grad {
                // dA[m,k] += G[m,n] · B[n,k]
                let dst = slot(grads, *a, m * k);
                T::gemm(m, n, k, T::one(), g, n as isize, 1, &vb.data, k as isize, 1, T::one(), dst, k as isize, 1);
            }
            if nodes[*b].requires_grad {
                // dB[n,k] += Gᵀ · A
                let dst = slot(grads, *b, n * k);
                T::gemm(n, m, k, T::one(), g, 1, n as isize, &va.data, k as isize, 1, T::one(), dst, k as isize, 1);
            }
        }
        Op::Custom { inputs, backward } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| &nodes[i].value).collect();
            let parts = backward(g, &ins, out);
            for (&id, part) in inputs.iter().zip(parts) {
                acc(grads, nodes, id, part.into_iter());
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape.clone()
    }

    /// First element; the whole value for scalars.
    pub fn item(&self) -> T {
        self.tape.value_ref(self.id).data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient accumulated by the last `backward`, if this node received one.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let grads = self.tape.grads.borrow();
        let g = grads.as_ref()?.get(self.id)?.as_ref()?;
        Some(Tensor {
            shape: self.shape(),
            data: g.clone(),
        })
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(self.value())
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.tape.binary("add", self.id, other.id, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.tape.binary("sub", self.id, other.id, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.tape.binary("mul", self.id, other.id, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Division with the divisor clamped below at `CLAMP_EPS`.
    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let eps = T::of(CLAMP_EPS);
        self.tape
            .binary("div", self.id, other.id, move |a, b| a / b.max(eps), Op::Div(self.id, other.id))
    }

    pub fn maximum(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.tape
            .binary("maximum", self.id, other.id, |a, b| a.max(b), Op::Maximum(self.id, other.id))
    }

    pub fn minimum(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.tape
            .binary("minimum", self.id, other.id, |a, b| a.min(b), Op::Minimum(self.id, other.id))
    }

    pub fn neg(self) -> Var<'t, T> {
        self.tape.unary(self.id, |x| -x, Op::Neg(self.id))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.tape.unary(self.id, move |x| x * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        self.tape.unary(self.id, move |x| x + c, Op::AddScalar(self.id))
    }

    /// `c - self`.
    pub fn rsub_scalar(self, c: T) -> Var<'t, T> {
        self.neg().add_scalar(c)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.tape.unary(self.id, sigmoid, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.tape
            .unary(self.id, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(self.id))
    }

    pub fn gelu(self) -> Var<'t, T> {
        self.tape.unary(self.id, gelu, Op::Gelu(self.id))
    }

    pub fn activate(self, act: Activation) -> Var<'t, T> {
        match act {
            Activation::Relu => self.relu(),
            Activation::Gelu => self.gelu(),
        }
    }

    /// Natural log with the argument clamped below at `CLAMP_EPS`.
    pub fn log(self) -> Var<'t, T> {
        let eps = T::of(CLAMP_EPS);
        self.tape.unary(self.id, move |x| x.max(eps).ln(), Op::Log(self.id))
    }

    pub fn exp(self) -> Var<'t, T> {
        self.tape.unary(self.id, |x| x.exp(), Op::Exp(self.id))
    }

    pub fn abs(self) -> Var<'t, T> {
        self.tape.unary(self.id, |x| x.abs(), Op::Abs(self.id))
    }

    pub fn powf(self, c: T) -> Var<'t, T> {
        self.tape.unary(self.id, move |x| x.powf(c), Op::Powf(self.id, c))
    }

    pub fn sum(self) -> Var<'t, T> {
        let (s, rg) = {
            let n = self.tape.nodes.borrow();
            (n[self.id].value.data.iter().copied().sum::<T>(), n[self.id].requires_grad)
        };
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'t, T> {
        let (s, rg) = {
            let n = self.tape.nodes.borrow();
            let v = &n[self.id].value;
            let s = v.data.iter().copied().sum::<T>() / T::of(v.numel().max(1) as f64);
            (s, n[self.id].requires_grad)
        };
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id), rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        let (value, lanes, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            if axis >= x.shape.len() {
                return Err(TensorError::AxisOutOfRange {
                    op: "softmax",
                    axis,
                    shape: x.shape.clone(),
                });
            }
            let lanes = Lanes::of(&x.shape, axis);
            let Lanes { outer, len, inner } = lanes;
            let mut y = vec![T::zero(); x.data.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * len * inner + k * inner + i;
                    let mx = (0..len)
                        .map(|k| x.data[at(k)])
                        .fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for k in 0..len {
                        let e = (x.data[at(k)] - mx).exp();
                        y[at(k)] = e;
                        z += e;
                    }
                    for k in 0..len {
                        y[at(k)] /= z;
                    }
                }
            }
            (
                Tensor {
                    shape: x.shape.clone(),
                    data: y,
                },
                lanes,
                nodes[self.id].requires_grad,
            )
        };
        Ok(self.tape.push(value, Op::Softmax { x: self.id, lanes }, rg))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: T) -> Result<Var<'t, T>, TensorError> {
        let (value, xhat, rstd) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let d = *x.shape.last().unwrap_or(&0);
            let (gv, bv) = (&nodes[gain.id].value, &nodes[bias.id].value);
            if gv.shape != [d] || bv.shape != [d] {
                return Err(mismatch("layer_norm", &x.shape, &gv.shape));
            }
            let rows = if d == 0 { 0 } else { x.data.len() / d };
            let mut xhat = vec![T::zero(); x.data.len()];
            let mut rstd = vec![T::zero(); rows];
            let mut y = vec![T::zero(); x.data.len()];
            let inv_d = T::one() / T::of(d.max(1) as f64);
            for r in 0..rows {
                let row = &x.data[r * d..(r + 1) * d];
                let mu = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
                let s = T::one() / (var + eps).sqrt();
                rstd[r] = s;
                for j in 0..d {
                    let h = (row[j] - mu) * s;
                    xhat[r * d + j] = h;
                    y[r * d + j] = h * gv.data[j] + bv.data[j];
                }
            }
            (
                Tensor {
                    shape: x.shape.clone(),
                    data: y,
                },
                xhat,
                rstd,
            )
        };
        let rg = self.tape.rg(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn transpose(self) -> Result<Var<'t, T>, TensorError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            if x.shape.len() != 2 {
                return Err(TensorError::InvalidArgument {
                    op: "transpose",
                    msg: format!("expected a matrix, got {:?}", x.shape),
                });
            }
            let (m, n) = (x.shape[0], x.shape[1]);
            let data = (0..m * n).map(|idx| x.data[(idx % m) * n + idx / m]).collect();
            (
                Tensor {
                    shape: vec![n, m],
                    data,
                },
                nodes[self.id].requires_grad,
            )
        };
        Ok(self.tape.push(value, Op::Transpose(self.id), rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].value.clone().reshape(shape)?, nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// `count` entries along `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, count: usize) -> Result<Var<'t, T>, TensorError> {
        let (value, lanes, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            if axis >= x.shape.len() {
                return Err(TensorError::AxisOutOfRange {
                    op: "slice",
                    axis,
                    shape: x.shape.clone(),
                });
            }
            if start + count > x.shape[axis] {
                return Err(TensorError::InvalidArgument {
                    op: "slice",
                    msg: format!("range {start}..{} exceeds extent {}", start + count, x.shape[axis]),
                });
            }
            let lanes = Lanes::of(&x.shape, axis);
            let Lanes { outer, len, inner } = lanes;
            let mut data = Vec::with_capacity(outer * count * inner);
            for o in 0..outer {
                let off = o * len * inner + start * inner;
                data.extend_from_slice(&x.data[off..off + count * inner]);
            }
            let mut shape = x.shape.clone();
            shape[axis] = count;
            (Tensor { shape, data }, lanes, nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(
            value,
            Op::Slice {
                x: self.id,
                lanes,
                start,
                count,
            },
            rg,
        ))
    }

    /// Gathers rows (first-axis entries) by index; indices may repeat.
    pub fn select_rows(self, idx: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            if let Some(&bad) = idx.iter().find(|&&i| i >= x.shape[0]) {
                return Err(TensorError::InvalidArgument {
                    op: "select_rows",
                    msg: format!("row {bad} out of range for shape {:?}", x.shape),
                });
            }
            (x.select_rows(idx), nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(
            value,
            Op::SelectRows {
                x: self.id,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Matrix product `self[m,k] · other[k,n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(mismatch("matmul", &a.shape, &b.shape));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut c = vec![T::zero(); m * n];
            T::gemm(m, k, n, T::one(), &a.data, k as isize, 1, &b.data, n as isize, 1, T::zero(), &mut c, n as isize, 1);
            Tensor {
                shape: vec![m, n],
                data: c,
            }
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    /// Matrix product with the second operand transposed: `self[m,k] · other[n,k]ᵀ`.
    pub fn matmul_nt(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
                return Err(mismatch("matmul_nt", &a.shape, &b.shape));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
            let mut c = vec![T::zero(); m * n];
            T::gemm(m, k, n, T::one(), &a.data, k as isize, 1, &b.data, 1, k as isize, T::zero(), &mut c, n as isize, 1);
            Tensor {
                shape: vec![m, n],
                data: c,
            }
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMulNT(self.id, other.id), rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small_product() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let x = t(&[2, 2], &[0.3, -1.5, 2.0, 7.25]);
        let i = tape.constant(Tensor::eye(2));
        let out = i.matmul(tape.constant(x.clone())).unwrap().value();
        assert_eq!(out, x);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn softmax_closed_forms() {
        let tape = Tape::new();
        let y = tape.constant(t(&[2], &[0.0, 0.0])).softmax(0).unwrap().value();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = tape
            .constant(t(&[2], &[2f64.ln(), 0.0]))
            .softmax(0)
            .unwrap()
            .value();
        assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_non_last_axis() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let y = x.softmax(0).unwrap().value();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_rows() {
        let tape = Tape::new();
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape
            .constant(t(&[1, 2], &[1.0, 3.0]))
            .layer_norm(g, b, 1e-12)
            .unwrap()
            .value();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape
            .constant(t(&[1, 3], &[4.0, 4.0, 4.0]))
            .layer_norm(g, b, 1e-5)
            .unwrap()
            .value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_at_zero_and_concat_shape() {
        let tape = Tape::new();
        assert_eq!(tape.scalar(0.0).sigmoid().item(), 0.5);
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(&[2, 5]));
        assert_eq!(tape.concat(&[a, b], 1).unwrap().shape(), vec![2, 8]);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0f64));
        tape.backward(x.sigmoid()).unwrap();
        assert!((x.grad().unwrap().item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_sum_and_square() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]));
        tape.backward(x.sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let loss = x.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert_eq!(tape.backward(x), Err(TensorError::NonScalarLoss(vec![2])));
        let c = tape.constant(t(&[1], &[1.0]));
        assert_eq!(tape.backward(c), Err(TensorError::DetachedLoss));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward(loss), Err(TensorError::BackwardTwice));
        tape.reset_grads();
        tape.backward(loss).unwrap();
    }

    #[test]
    fn reused_input_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.5, -1.0]));
        let y = x.scale(3.0).add(x.sigmoid()).unwrap().sum();
        tape.backward(y).unwrap();
        let g = x.grad().unwrap();
        for (i, &xv) in [0.5f64, -1.0].iter().enumerate() {
            let s = 1.0 / (1.0 + (-xv).exp());
            assert!((g.data()[i] - (3.0 + s * (1.0 - s))).abs() < 1e-14);
        }
    }

    #[test]
    fn log_is_clamped() {
        let tape = Tape::new();
        let y = tape.scalar(0.0).log().item();
        assert!((y - (1e-12f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn broadcast_only_over_leading_axes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(a.add(tape.constant(Tensor::zeros(&[4]))).is_ok());
        assert!(a.add(tape.constant(Tensor::zeros(&[3]))).is_err());
        assert!(a.add(tape.constant(Tensor::zeros(&[3, 1]))).is_err());
    }
}
