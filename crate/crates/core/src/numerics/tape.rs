//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every forward op appends a node to the [`Tape`]; [`Tape::backward`] walks
//! the nodes in exact reverse order, so an op's inputs always precede it.

use std::cell::RefCell;
use std::rc::Rc;

use super::attention::{self, AttnCache, AttnSpec};
use super::element::{gemm, Element};
use super::tensor::Tensor;
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        d_in: usize,
        d_out: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        s: T,
    },
    GatherRows {
        table: usize,
        idx: Vec<usize>,
        cols: usize,
    },
    Softmax {
        a: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
        d: usize,
    },
    Gelu {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    Log {
        a: usize,
    },
    LogSigmoid {
        a: usize,
    },
    Concat {
        parts: Vec<usize>,
        sizes: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Narrow {
        a: usize,
        outer: usize,
        n: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        a: usize,
    },
    Mean {
        a: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Sum {
        a: usize,
    },
    WeightedPool {
        x: usize,
        group_len: usize,
        weights: Vec<T>,
        d: usize,
    },
    CrossEntropy {
        logits: usize,
        probs: Vec<T>,
        targets: Vec<usize>,
        ignore: usize,
        count: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        rel: Option<(usize, usize, usize)>,
        spec: AttnSpec,
        cache: AttnCache<T>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
}

/// Ordered record of executed operations.
///
/// A tape is single-threaded; build one per forward pass and drop it once
/// gradients have been extracted.
pub struct Tape<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Element = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Element> Copy for Var<'_, T> {}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of `v`, or `None` if `v` did not influence the loss.
    pub fn get(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let g = self.grads.get(v.id)?.as_ref()?;
        Some(Tensor::from_parts(self.shapes[v.id].clone(), g.clone()))
    }

    /// Like [`get`](Self::get) but yields zeros for non-participating values.
    pub fn get_or_zero(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }

    pub fn participated(&self, v: Var<'_, T>) -> bool {
        matches!(self.grads.get(v.id), Some(Some(_)))
    }
}

fn check_finite<T: Element>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFiniteValue { op })
    }
}

fn mismatch(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn scalar_shape(shape: Vec<usize>) -> Vec<usize> {
    if shape.is_empty() {
        vec![1]
    } else {
        shape
    }
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn log_sigmoid<T: Element>(x: T) -> T {
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Element>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    T::of(0.5) * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf (parameter, input or constant).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf_rc(Rc::new(value))
    }

    pub fn leaf_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    fn push(&self, value: Rc<Tensor<T>>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var<'_, T>> {
        check_finite(op_name, value.data())?;
        Ok(self.push(Rc::new(value), op))
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(NumericsError::NotScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            if matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mut acc = |input: usize, contrib: Vec<T>| match &mut grads[input] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            };
            backward_op(&nodes, id, &g, &mut acc);
        }
        let shapes = nodes[..=loss.id]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

fn backward_op<T: Element>(
    nodes: &[Node<T>],
    id: usize,
    g: &[T],
    acc: &mut dyn FnMut(usize, Vec<T>),
) {
    let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
    let out = val(id);
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let mut da = vec![T::zero(); m * k];
            gemm(m, n, k, g, false, val(*b).data(), true, &mut da, false);
            let mut db = vec![T::zero(); k * n];
            gemm(k, m, n, val(*a).data(), true, g, false, &mut db, false);
            acc(*a, da);
            acc(*b, db);
        }
        Op::Linear {
            x,
            w,
            b,
            rows,
            d_in,
            d_out,
        } => {
            let (r, di, dout) = (*rows, *d_in, *d_out);
            let mut dx = vec![T::zero(); r * di];
            gemm(r, dout, di, g, false, val(*w).data(), true, &mut dx, false);
            let mut dw = vec![T::zero(); di * dout];
            gemm(di, r, dout, val(*x).data(), true, g, false, &mut dw, false);
            acc(*x, dx);
            acc(*w, dw);
            if let Some(b) = b {
                let mut db = vec![T::zero(); dout];
                for row in g.chunks(dout) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*b, db);
            }
        }
        Op::Add { a, b } => {
            acc(*a, g.to_vec());
            acc(*b, g.to_vec());
        }
        Op::Sub { a, b } => {
            acc(*a, g.to_vec());
            acc(*b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul { a, b } => {
            let av = val(*a).data();
            let bv = val(*b).data();
            acc(*a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
            acc(*b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
        }
        Op::Scale { a, s } => {
            acc(*a, g.iter().map(|&v| v * *s).collect());
        }
        Op::GatherRows { table, idx, cols } => {
            let mut dt = vec![T::zero(); val(*table).numel()];
            for (r, &src) in idx.iter().enumerate() {
                let dst = &mut dt[src * cols..(src + 1) * cols];
                for (d, &v) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                    *d += v;
                }
            }
            acc(*table, dt);
        }
        Op::Softmax { a, outer, n, inner } => {
            let y = out.data();
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    let mut dot = T::zero();
                    for j in 0..*n {
                        dot += g[at(j)] * y[at(j)];
                    }
                    for j in 0..*n {
                        dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            acc(*a, dx);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
            d,
        } => {
            let d = *d;
            let gv = val(*gain).data();
            let mut dx = vec![T::zero(); xhat.len()];
            let mut dgain = vec![T::zero(); d];
            let mut dbias = vec![T::zero(); d];
            let inv_d = T::one() / T::of(d as f64);
            for (r, (gr, xr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                let mut mean_dxh = T::zero();
                let mut mean_dxh_xh = T::zero();
                for j in 0..d {
                    let dxh = gr[j] * gv[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xr[j];
                    dgain[j] += gr[j] * xr[j];
                    dbias[j] += gr[j];
                }
                mean_dxh *= inv_d;
                mean_dxh_xh *= inv_d;
                let out_row = &mut dx[r * d..(r + 1) * d];
                for j in 0..d {
                    out_row[j] = rstd[r] * (gr[j] * gv[j] - mean_dxh - xr[j] * mean_dxh_xh);
                }
            }
            acc(*x, dx);
            acc(*gain, dgain);
            acc(*bias, dbias);
        }
        Op::Gelu { a } => {
            let xv = val(*a).data();
            acc(
                *a,
                g.iter().zip(xv).map(|(&g, &x)| g * gelu_grad(x)).collect(),
            );
        }
        Op::Sigmoid { a } => {
            let y = out.data();
            acc(
                *a,
                g.iter()
                    .zip(y)
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect(),
            );
        }
        Op::Log { a } => {
            let xv = val(*a).data();
            acc(*a, g.iter().zip(xv).map(|(&g, &x)| g / x).collect());
        }
        Op::LogSigmoid { a } => {
            let xv = val(*a).data();
            acc(
                *a,
                g.iter().zip(xv).map(|(&g, &x)| g * sigmoid(-x)).collect(),
            );
        }
        Op::Concat {
            parts,
            sizes,
            outer,
            inner,
        } => {
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            for (&p, &size) in parts.iter().zip(sizes) {
                let mut dp = Vec::with_capacity(outer * size * inner);
                for o in 0..*outer {
                    let start = (o * total + offset) * inner;
                    dp.extend_from_slice(&g[start..start + size * inner]);
                }
                acc(p, dp);
                offset += size;
            }
        }
        Op::Narrow {
            a,
            outer,
            n,
            inner,
            start,
            len,
        } => {
            let mut da = vec![T::zero(); outer * n * inner];
            for o in 0..*outer {
                let dst = (o * n + start) * inner;
                let src = o * len * inner;
                da[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            acc(*a, da);
        }
        Op::Reshape { a } => acc(*a, g.to_vec()),
        Op::Mean { a, outer, n, inner } => {
            let inv = T::one() / T::of(*n as f64);
            let mut da = vec![T::zero(); outer * n * inner];
            for o in 0..*outer {
                for j in 0..*n {
                    for i in 0..*inner {
                        da[(o * n + j) * inner + i] = g[o * inner + i] * inv;
                    }
                }
            }
            acc(*a, da);
        }
        Op::Sum { a } => acc(*a, vec![g[0]; val(*a).numel()]),
        Op::WeightedPool {
            x,
            group_len,
            weights,
            d,
        } => {
            let mut dx = vec![T::zero(); weights.len() * d];
            for (r, &w) in weights.iter().enumerate() {
                let grp = r / group_len;
                let gr = &g[grp * d..(grp + 1) * d];
                for (dst, &v) in dx[r * d..(r + 1) * d].iter_mut().zip(gr) {
                    *dst = w * v;
                }
            }
            acc(*x, dx);
        }
        Op::CrossEntropy {
            logits,
            probs,
            targets,
            ignore,
            count,
        } => {
            let mut dl = vec![T::zero(); probs.len()];
            if *count > 0 {
                let v = probs.len() / targets.len();
                let s = g[0] / T::of(*count as f64);
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore {
                        continue;
                    }
                    let row = &mut dl[r * v..(r + 1) * v];
                    for (d, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                        *d = p * s;
                    }
                    row[t] -= s;
                }
            }
            acc(*logits, dl);
        }
        Op::Attention {
            q,
            k,
            v,
            rel,
            spec,
            cache,
        } => {
            let relv = rel.map(|(r, u, vb)| (val(r), val(u), val(vb)));
            let grads = attention::backward(
                spec,
                val(*q).data(),
                val(*k).data(),
                val(*v).data(),
                relv.as_ref()
                    .map(|(r, u, vb)| (r.data(), u.data(), vb.data())),
                cache,
                g,
            );
            acc(*q, grads.dq);
            acc(*k, grads.dk);
            acc(*v, grads.dv);
            if let (Some((r, u, vb)), Some((dr, du, dvb))) = (rel, grads.drel) {
                acc(*r, dr);
                acc(*u, du);
                acc(*vb, dvb);
            }
        }
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'_, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(mismatch(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![T::zero(); m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
        self.tape.record(
            "matmul",
            Tensor::from_parts(vec![m, n], c),
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                m,
                k,
                n,
            },
        )
    }

    /// `x·W + b` applied to every row of `x` (last axis is the feature axis).
    pub fn linear(self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        self.same_tape(&w);
        let x = self.value();
        let wv = w.value();
        let d_in = x.cols();
        if wv.rank() != 2 || wv.shape()[0] != d_in {
            return Err(mismatch(
                "linear",
                format!("x {:?} with W {:?}", x.shape(), wv.shape()),
            ));
        }
        let d_out = wv.shape()[1];
        let rows = x.rows();
        let mut y = vec![T::zero(); rows * d_out];
        if let Some(b) = b {
            let bv = b.value();
            if bv.numel() != d_out {
                return Err(mismatch(
                    "linear",
                    format!("bias {:?} for {} outputs", bv.shape(), d_out),
                ));
            }
            for row in y.chunks_mut(d_out) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            rows,
            d_in,
            d_out,
            x.data(),
            false,
            wv.data(),
            false,
            &mut y,
            b.is_some(),
        );
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        self.tape.record(
            "linear",
            Tensor::from_parts(shape, y),
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                rows,
                d_in,
                d_out,
            },
        )
    }

    fn zip_with(
        self,
        rhs: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        if a.shape() != b.shape() {
            return Err(mismatch(
                name,
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.tape
            .record(name, Tensor::from_parts(a.shape().to_vec(), data), op)
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let op = Op::Add {
            a: self.id,
            b: rhs.id,
        };
        self.zip_with(rhs, "add", |x, y| x + y, op)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let op = Op::Sub {
            a: self.id,
            b: rhs.id,
        };
        self.zip_with(rhs, "sub", |x, y| x - y, op)
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let op = Op::Mul {
            a: self.id,
            b: rhs.id,
        };
        self.zip_with(rhs, "mul", |x, y| x * y, op)
    }

    pub fn scale(self, s: f64) -> Result<Var<'t, T>> {
        let a = self.value();
        let s = T::of(s);
        let data = a.data().iter().map(|&x| x * s).collect();
        self.tape.record(
            "scale",
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::Scale { a: self.id, s },
        )
    }

    fn map(self, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| f(x)).collect();
        self.tape
            .record(name, Tensor::from_parts(a.shape().to_vec(), data), op)
    }

    pub fn gelu(self) -> Result<Var<'t, T>> {
        self.map("gelu", gelu, Op::Gelu { a: self.id })
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.map("sigmoid", sigmoid, Op::Sigmoid { a: self.id })
    }

    pub fn log(self) -> Result<Var<'t, T>> {
        self.map("log", |x| x.ln(), Op::Log { a: self.id })
    }

    /// `log(sigmoid(x))`, evaluated without overflow.
    pub fn log_sigmoid(self) -> Result<Var<'t, T>> {
        self.map("log_sigmoid", log_sigmoid, Op::LogSigmoid { a: self.id })
    }

    /// Row lookup: output row `r` is `self[idx[r]]`. This is the embedding op.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let t = self.value();
        if t.rank() != 2 {
            return Err(mismatch("gather_rows", format!("table {:?}", t.shape())));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(mismatch(
                "gather_rows",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        if idx.is_empty() {
            return Err(mismatch("gather_rows", "empty index list".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        self.tape.record(
            "gather_rows",
            Tensor::from_parts(vec![idx.len(), cols], data),
            Op::GatherRows {
                table: self.id,
                idx: idx.to_vec(),
                cols,
            },
        )
    }

    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t, T>> {
        self.gather_rows(ids)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(mismatch(
                "softmax",
                format!("axis {axis} of {:?}", a.shape()),
            ));
        }
        let (outer, n, inner) = axis_split(a.shape(), axis);
        let x = a.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(x[at(j)]);
                }
                let mut s = T::zero();
                for j in 0..n {
                    let e = (x[at(j)] - mx).exp();
                    y[at(j)] = e;
                    s += e;
                }
                for j in 0..n {
                    y[at(j)] /= s;
                }
            }
        }
        self.tape.record(
            "softmax",
            Tensor::from_parts(a.shape().to_vec(), y),
            Op::Softmax {
                a: self.id,
                outer,
                n,
                inner,
            },
        )
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = x.cols();
        let gv = gain.value();
        let bv = bias.value();
        if gv.numel() != d || bv.numel() != d {
            return Err(mismatch(
                "layer_norm",
                format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    x.shape(),
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let rows = x.rows();
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); rows * d];
        let inv_d = T::one() / T::of(d as f64);
        let eps = T::of(LAYER_NORM_EPS);
        for r in 0..rows {
            let xr = &x.data()[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        self.tape.record(
            "layer_norm",
            Tensor::from_parts(x.shape().to_vec(), y),
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
                d,
            },
        )
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat", "no inputs".into()))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(mismatch("concat", format!("axis {axis} of {base:?}")));
        }
        for v in &values {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", format!("{base:?} vs {s:?}")));
            }
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &size) in values.iter().zip(&sizes) {
                let start = o * size * inner;
                data.extend_from_slice(&v.data()[start..start + size * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        first.tape.record(
            "concat",
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                sizes,
                outer,
                inner,
            },
        )
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        if axis >= a.rank() || len == 0 || start + len > a.shape()[axis] {
            return Err(mismatch(
                "narrow",
                format!(
                    "[{start}, {}) on axis {axis} of {:?}",
                    start + len,
                    a.shape()
                ),
            ));
        }
        let (outer, n, inner) = axis_split(a.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            data.extend_from_slice(&a.data()[s..s + len * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        self.tape.record(
            "narrow",
            Tensor::from_parts(shape, data),
            Op::Narrow {
                a: self.id,
                outer,
                n,
                inner,
                start,
                len,
            },
        )
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'t, T>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(axis, start, s)?);
            start += s;
        }
        let full = self.value().shape().get(axis).copied().unwrap_or(0);
        if start != full {
            return Err(mismatch(
                "split",
                format!("sizes sum to {start}, axis has {full}"),
            ));
        }
        Ok(out)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        let t = (*a).clone().reshaped(shape)?;
        self.tape.record("reshape", t, Op::Reshape { a: self.id })
    }

    pub fn mean(self, axis: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(mismatch("mean", format!("axis {axis} of {:?}", a.shape())));
        }
        let (outer, n, inner) = axis_split(a.shape(), axis);
        let inv = T::one() / T::of(n as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    data[o * inner + i] += a.data()[(o * n + j) * inner + i];
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        self.tape.record(
            "mean",
            Tensor::from_parts(scalar_shape(shape), data),
            Op::Mean {
                a: self.id,
                outer,
                n,
                inner,
            },
        )
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let a = self.value();
        self.tape
            .record("sum", Tensor::scalar(a.sum()), Op::Sum { a: self.id })
    }

    pub fn mean_all(self) -> Result<Var<'t, T>> {
        let n = self.value().numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Weighted sum over consecutive row groups: `x` is `[G·len, d]`,
    /// output row `g` is `Σ_l weights[g·len + l] · x[g·len + l]`.
    pub fn weighted_pool(self, group_len: usize, weights: &[T]) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = x.cols();
        let rows = x.rows();
        if group_len == 0 || !rows.is_multiple_of(group_len) || weights.len() != rows {
            return Err(mismatch(
                "weighted_pool",
                format!(
                    "{:?} in groups of {group_len} with {} weights",
                    x.shape(),
                    weights.len()
                ),
            ));
        }
        let groups = rows / group_len;
        let mut data = vec![T::zero(); groups * d];
        for (r, &w) in weights.iter().enumerate() {
            if w == T::zero() {
                continue;
            }
            let grp = r / group_len;
            for (o, &v) in data[grp * d..(grp + 1) * d].iter_mut().zip(x.row(r)) {
                *o += w * v;
            }
        }
        self.tape.record(
            "weighted_pool",
            Tensor::from_parts(vec![groups, d], data),
            Op::WeightedPool {
                x: self.id,
                group_len,
                weights: weights.to_vec(),
                d,
            },
        )
    }

    /// Mean token cross-entropy of row-wise logits against `targets`;
    /// rows whose target equals `ignore` contribute neither loss nor gradient.
    pub fn cross_entropy(self, targets: &[usize], ignore: usize) -> Result<Var<'t, T>> {
        let l = self.value();
        let v = l.cols();
        if l.rows() != targets.len() {
            return Err(mismatch(
                "cross_entropy",
                format!("{} rows vs {} targets", l.rows(), targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore && t >= v) {
            return Err(mismatch(
                "cross_entropy",
                format!("target {bad} outside {v} classes"),
            ));
        }
        let mut probs = vec![T::zero(); l.numel()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            let row = l.row(r);
            let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut s = T::zero();
            let p = &mut probs[r * v..(r + 1) * v];
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - mx).exp();
                s += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= s;
            }
            if t != ignore {
                total += s.ln() + mx - row[t];
                count += 1;
            }
        }
        let loss = if count > 0 {
            total / T::of(count as f64)
        } else {
            T::zero()
        };
        self.tape.record(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                probs,
                targets: targets.to_vec(),
                ignore,
                count,
            },
        )
    }
}

/// Multi-head attention recorded as a single op.
///
/// `q` is `[batch·q_len, d]`, `k`/`v` are `[batch·k_len, d]`. With `rel`
/// set to `(r, u, v_bias)` the score gains the relative-position terms
/// `q·r_{i−j} + u·k_j + v_bias·r_{i−j}`; `r` is a `[2·R−1, d]` table whose
/// centre row is offset zero.
pub fn attention<'t, T: Element>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    rel: Option<(Var<'t, T>, Var<'t, T>, Var<'t, T>)>,
    spec: AttnSpec,
) -> Result<Var<'t, T>> {
    q.same_tape(&k);
    q.same_tape(&v);
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let relv = rel.map(|(r, u, vb)| (r.value(), u.value(), vb.value()));
    let (out, cache) = attention::forward(
        &spec,
        &qv,
        &kv,
        &vv,
        relv.as_ref().map(|(r, u, vb)| (&**r, &**u, &**vb)),
    )?;
    let shape = vec![spec.batch * spec.q_len, qv.cols()];
    q.tape.record(
        "attention",
        Tensor::from_parts(shape, out),
        Op::Attention {
            q: q.id,
            k: k.id,
            v: v.id,
            rel: rel.map(|(r, u, vb)| (r.id, u.id, vb.id)),
            spec,
            cache,
        },
    )
}
