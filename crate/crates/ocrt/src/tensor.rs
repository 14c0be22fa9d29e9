//! Dense tensors with reverse-mode differentiation.
//!
//! Eager define-by-run tape: every operation that touches a
//! gradient-requiring input records a backward closure on the produced
//! node. Nodes carry monotonically increasing ids, so creation order is
//! a topological order and `backward` simply replays ids in reverse.
//!
//! All operation boundaries reject NaN/Inf outputs.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{OcrtError, Result};
use crate::scalar::Scalar;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn<S> = Box<dyn Fn(&[S])>;

struct Node<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<S>>>,
    parents: Vec<Tensor<S>>,
    backward: Option<BackwardFn<S>>,
}

/// Shape-tagged dense array with an attached differentiation record.
pub struct Tensor<S: Scalar> {
    node: Rc<Node<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn check_finite<S: Scalar>(op: &'static str, data: &[S]) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        Err(OcrtError::NonFinite { op })
    } else {
        Ok(())
    }
}

fn check_shape<S: Scalar>(op: &'static str, shape: &[usize], data: &[S]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if shape.iter().any(|&e| e == 0) || numel != data.len() {
        return Err(OcrtError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("extents must be positive and their product must equal data length {}", data.len()),
        });
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    fn leaf(shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        make_backward: impl FnOnce() -> BackwardFn<S>,
    ) -> Result<Self> {
        check_finite(op, &data)?;
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward) = if requires_grad {
            (parents, Some(make_backward()))
        } else {
            (Vec::new(), None)
        };
        Ok(Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward,
            }),
        })
    }

    // ── constructors ─────────────────────────────────────────────

    pub fn from_vec(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        check_shape("from_vec", shape, &data)?;
        check_finite("from_vec", &data)?;
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Trainable leaf: participates in `backward` and receives a gradient buffer.
    pub fn param(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        check_shape("param", shape, &data)?;
        check_finite("param", &data)?;
        Ok(Self::leaf(shape.to_vec(), data, true))
    }

    pub fn scalar(v: S) -> Self {
        Self::leaf(vec![1], vec![v], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![S::zero(); n], false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![S::one(); n], false)
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![v; n], false)
    }

    /// Standard-normal leaf, deterministic in the RNG state. Sampling is
    /// done in f64 so f32 and f64 tensors see the same draw sequence.
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self::leaf(shape.to_vec(), data, false)
    }

    pub fn randn_param(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(scale * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self::leaf(shape.to_vec(), data, true)
    }

    // ── accessors ────────────────────────────────────────────────

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.node.data.borrow().clone()
    }

    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.node.data.borrow()[0]
    }

    /// Overwrite the value in place (optimizer updates, EMA copies).
    pub fn set_data(&self, data: Vec<S>) -> Result<()> {
        check_shape("set_data", &self.node.shape, &data)?;
        check_finite("set_data", &data)?;
        *self.node.data.borrow_mut() = data;
        Ok(())
    }

    /// Gradient as a vector; zeros when the leaf was not on the loss path.
    pub fn grad_vec(&self) -> Vec<S> {
        self.node
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![S::zero(); self.numel()])
    }

    pub fn has_grad(&self) -> bool {
        self.node.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Same value, cut off from the tape.
    pub fn detach(&self) -> Tensor<S> {
        Self::leaf(self.node.shape.clone(), self.to_vec(), false)
    }

    fn accumulate(&self, g: &[S]) {
        if !self.node.requires_grad {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    // ── reverse pass ─────────────────────────────────────────────

    /// Populate gradients for every `requires_grad` tensor reachable
    /// from this scalar.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(OcrtError::NonScalarLoss {
                shape: self.node.shape.clone(),
            });
        }
        if !self.node.requires_grad {
            return Ok(());
        }
        *self.node.grad.borrow_mut() = Some(vec![S::one()]);

        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut nodes: Vec<Tensor<S>> = Vec::new();
        while let Some(t) = stack.pop() {
            if seen.insert(t.node.id) {
                for p in &t.node.parents {
                    stack.push(p.clone());
                }
                nodes.push(t);
            }
        }
        nodes.sort_by(|a, b| b.node.id.cmp(&a.node.id));
        for t in &nodes {
            if let Some(bw) = &t.node.backward {
                let g = t.node.grad.borrow();
                if let Some(g) = g.as_ref() {
                    bw(g);
                }
            }
        }
        Ok(())
    }

    // ── elementwise binary ops with broadcasting ─────────────────

    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary("add", rhs, |a, b| a + b, BinKind::Add)
    }

    pub fn sub(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary("sub", rhs, |a, b| a - b, BinKind::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary("mul", rhs, |a, b| a * b, BinKind::Mul)
    }

    pub fn div(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary("div", rhs, |a, b| a / b, BinKind::Div)
    }

    fn binary(
        &self,
        op: &'static str,
        rhs: &Tensor<S>,
        f: fn(S, S) -> S,
        kind: BinKind,
    ) -> Result<Tensor<S>> {
        let (out_shape, map) = broadcast_plan(op, self.shape(), rhs.shape())?;
        let la = self.node.data.borrow();
        let lb = rhs.node.data.borrow();
        let out: Vec<S> = match &map {
            None => la.iter().zip(lb.iter()).map(|(&a, &b)| f(a, b)).collect(),
            Some((ia, ib)) => (0..ia.len()).map(|i| f(la[ia[i]], lb[ib[i]])).collect(),
        };
        drop(la);
        drop(lb);
        let a = self.clone();
        let b = rhs.clone();
        Tensor::from_op(op, out_shape, out, vec![a.clone(), b.clone()], move || {
            Box::new(move |g: &[S]| {
                let da_needed = a.requires_grad();
                let db_needed = b.requires_grad();
                let mut da = vec![S::zero(); a.numel()];
                let mut db = vec![S::zero(); b.numel()];
                let ad = a.node.data.borrow();
                let bd = b.node.data.borrow();
                let (idx_a, idx_b): (Box<dyn Fn(usize) -> usize>, Box<dyn Fn(usize) -> usize>) =
                    match &map {
                        None => (Box::new(|i| i), Box::new(|i| i)),
                        Some((ia, ib)) => {
                            let ia = ia.clone();
                            let ib = ib.clone();
                            (Box::new(move |i| ia[i]), Box::new(move |i| ib[i]))
                        }
                    };
                for (i, &gi) in g.iter().enumerate() {
                    let ja = idx_a(i);
                    let jb = idx_b(i);
                    match kind {
                        BinKind::Add => {
                            if da_needed {
                                da[ja] += gi;
                            }
                            if db_needed {
                                db[jb] += gi;
                            }
                        }
                        BinKind::Sub => {
                            if da_needed {
                                da[ja] += gi;
                            }
                            if db_needed {
                                db[jb] -= gi;
                            }
                        }
                        BinKind::Mul => {
                            if da_needed {
                                da[ja] += gi * bd[jb];
                            }
                            if db_needed {
                                db[jb] += gi * ad[ja];
                            }
                        }
                        BinKind::Div => {
                            let bv = bd[jb];
                            if da_needed {
                                da[ja] += gi / bv;
                            }
                            if db_needed {
                                db[jb] -= gi * ad[ja] / (bv * bv);
                            }
                        }
                    }
                }
                drop(ad);
                drop(bd);
                if da_needed {
                    a.accumulate(&da);
                }
                if db_needed {
                    b.accumulate(&db);
                }
            })
        })
    }

    pub fn add_scalar(&self, v: S) -> Result<Tensor<S>> {
        let out: Vec<S> = self.data().iter().map(|&x| x + v).collect();
        let a = self.clone();
        Tensor::from_op("add_scalar", self.shape().to_vec(), out, vec![a.clone()], move || {
            Box::new(move |g: &[S]| a.accumulate(g))
        })
    }

    pub fn mul_scalar(&self, v: S) -> Result<Tensor<S>> {
        let out: Vec<S> = self.data().iter().map(|&x| x * v).collect();
        let a = self.clone();
        Tensor::from_op("mul_scalar", self.shape().to_vec(), out, vec![a.clone()], move || {
            Box::new(move |g: &[S]| {
                let da: Vec<S> = g.iter().map(|&gi| gi * v).collect();
                a.accumulate(&da);
            })
        })
    }

    pub fn neg(&self) -> Result<Tensor<S>> {
        self.mul_scalar(-S::one())
    }

    // ── matrix ops ───────────────────────────────────────────────

    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(OcrtError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, p, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        {
            let a = self.data();
            let b = rhs.data();
            matmul_raw(&a, &b, m, p, n, &mut out);
        }
        let a = self.clone();
        let b = rhs.clone();
        Tensor::from_op("matmul", vec![m, n], out, vec![a.clone(), b.clone()], move || {
            Box::new(move |g: &[S]| {
                let ad = a.node.data.borrow();
                let bd = b.node.data.borrow();
                if a.requires_grad() {
                    // dA[i,k] = sum_j g[i,j] * B[k,j]
                    let mut da = vec![S::zero(); m * p];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for k in 0..p {
                            let brow = &bd[k * n..(k + 1) * n];
                            let mut s = S::zero();
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            da[i * p + k] = s;
                        }
                    }
                    drop(ad);
                    a.accumulate(&da);
                } else {
                    drop(ad);
                }
                if b.requires_grad() {
                    // dB[k,j] = sum_i A[i,k] * g[i,j]
                    let ad = a.node.data.borrow();
                    let mut db = vec![S::zero(); p * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for k in 0..p {
                            let aik = ad[i * p + k];
                            let drow = &mut db[k * n..(k + 1) * n];
                            for j in 0..n {
                                drow[j] += aik * grow[j];
                            }
                        }
                    }
                    drop(ad);
                    drop(bd);
                    b.accumulate(&db);
                }
            })
        })
    }

    pub fn transpose(&self) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(OcrtError::InvalidShape {
                op: "transpose",
                shape: s.to_vec(),
                reason: "rank-2 tensor required".into(),
            });
        }
        let (m, n) = (s[0], s[1]);
        let d = self.data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        drop(d);
        let a = self.clone();
        Tensor::from_op("transpose", vec![n, m], out, vec![a.clone()], move || {
            Box::new(move |g: &[S]| {
                let mut da = vec![S::zero(); m * n];
                for j in 0..n {
                    for i in 0..m {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                a.accumulate(&da);
            })
        })
    }

    // ── reductions ───────────────────────────────────────────────

    pub fn sum(&self) -> Result<Tensor<S>> {
        let mut s = S::zero();
        for &v in self.data().iter() {
            s += v;
        }
        let n = self.numel();
        let a = self.clone();
        Tensor::from_op("sum", vec![1], vec![s], vec![a.clone()], move || {
            Box::new(move |g: &[S]| {
                let da = vec![g[0]; n];
                a.accumulate(&da);
            })
        })
    }

    pub fn mean(&self) -> Result<Tensor<S>> {
        let n = S::from_f64(self.numel() as f64);
        self.sum()?.mul_scalar(S::one() / n)
    }

    /// Sum along one axis of a rank-2 tensor, keeping the reduced axis
    /// with extent 1 so the result broadcasts back.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(OcrtError::InvalidShape {
                op: "sum_axis",
                shape: s.to_vec(),
                reason: "rank-2 tensor required".into(),
            });
        }
        if axis > 1 {
            return Err(OcrtError::InvalidAxis {
                op: "sum_axis",
                axis,
                shape: s.to_vec(),
            });
        }
        let (m, n) = (s[0], s[1]);
        let d = self.data();
        let (out_shape, out): (Vec<usize>, Vec<S>) = if axis == 0 {
            let mut out = vec![S::zero(); n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += d[i * n + j];
                }
            }
            (vec![1, n], out)
        } else {
            let mut out = vec![S::zero(); m];
            for i in 0..m {
                for j in 0..n {
                    out[i] += d[i * n + j];
                }
            }
            (vec![m, 1], out)
        };
        drop(d);
        let a = self.clone();
        Tensor::from_op("sum_axis", out_shape, out, vec![a.clone()], move || {
            Box::new(move |g: &[S]| {
                let mut da = vec![S::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = if axis == 0 { g[j] } else { g[i] };
                    }
                }
                a.accumulate(&da);
            })
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<S>> {
        let extent = self.shape()[axis];
        self.sum_axis(axis)?
            .mul_scalar(S::one() / S::from_f64(extent as f64))
    }

    /// Per-row/column maxima as a detached constant (softmax shift).
    pub fn max_axis_detached(&self, axis: usize) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 2 || axis > 1 {
            return Err(OcrtError::InvalidAxis {
                op: "max_axis",
                axis,
                shape: s.to_vec(),
            });
        }
        let (m, n) = (s[0], s[1]);
        let d = self.data();
        if axis == 0 {
            let mut out = vec![S::neg_infinity(); n];
            for i in 0..m {
                for j in 0..n {
                    if d[i * n + j] > out[j] {
                        out[j] = d[i * n + j];
                    }
                }
            }
            drop(d);
            Tensor::from_vec(out, &[1, n])
        } else {
            let mut out = vec![S::neg_infinity(); m];
            for i in 0..m {
                for j in 0..n {
                    if d[i * n + j] > out[i] {
                        out[i] = d[i * n + j];
                    }
                }
            }
            drop(d);
            Tensor::from_vec(out, &[m, 1])
        }
    }

    // ── unary maps ───────────────────────────────────────────────

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(S) -> S,
        dfdx_from_in_out: impl Fn(S, S) -> S + 'static,
    ) -> Result<Tensor<S>> {
        let input: Vec<S> = self.to_vec();
        let out: Vec<S> = input.iter().map(|&x| f(x)).collect();
        let saved_out = out.clone();
        let a = self.clone();
        Tensor::from_op(op, self.shape().to_vec(), out, vec![a.clone()], move || {
            Box::new(move |g: &[S]| {
                let da: Vec<S> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * dfdx_from_in_out(input[i], saved_out[i]))
                    .collect();
                a.accumulate(&da);
            })
        })
    }

    pub fn exp(&self) -> Result<Tensor<S>> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Result<Tensor<S>> {
        self.unary("ln", |x| x.ln(), |x, _| S::one() / x)
    }

    pub fn sqrt(&self) -> Result<Tensor<S>> {
        self.unary("sqrt", |x| x.sqrt(), |_, y| {
            S::from_f64(0.5) / y
        })
    }

    pub fn square(&self) -> Result<Tensor<S>> {
        self.unary("square", |x| x * x, |x, _| S::from_f64(2.0) * x)
    }

    pub fn tanh_t(&self) -> Result<Tensor<S>> {
        self.unary("tanh", |x| x.tanh(), |_, y| S::one() - y * y)
    }

    pub fn sigmoid(&self) -> Result<Tensor<S>> {
        self.unary(
            "sigmoid",
            |x| S::one() / (S::one() + (-x).exp()),
            |_, y| y * (S::one() - y),
        )
    }

    pub fn relu(&self) -> Result<Tensor<S>> {
        self.unary(
            "relu",
            |x| if x > S::zero() { x } else { S::zero() },
            |x, _| if x > S::zero() { S::one() } else { S::zero() },
        )
    }

    /// Clamp to [lo, hi]; gradient is zero outside the open interval.
    pub fn clamp(&self, lo: S, hi: S) -> Result<Tensor<S>> {
        self.unary(
            "clamp",
            move |x| {
                if x < lo {
                    lo
                } else if x > hi {
                    hi
                } else {
                    x
                }
            },
            move |x, _| {
                if x > lo && x < hi {
                    S::one()
                } else {
                    S::zero()
                }
            },
        )
    }

    /// Numerically stable softmax along one axis of a rank-2 tensor.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>> {
        let shift = self.max_axis_detached(axis)?;
        let e = self.sub(&shift)?.exp()?;
        let denom = e.sum_axis(axis)?;
        e.div(&denom)
    }

    // ── structural ops ───────────────────────────────────────────

    pub fn concat(parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(OcrtError::Contract("concat of zero tensors".into()));
        }
        let rank = parts[0].shape().len();
        if rank != 2 || axis > 1 {
            return Err(OcrtError::InvalidAxis {
                op: "concat",
                axis,
                shape: parts[0].shape().to_vec(),
            });
        }
        let fixed = 1 - axis;
        let fixed_extent = parts[0].shape()[fixed];
        for p in parts {
            if p.shape().len() != 2 || p.shape()[fixed] != fixed_extent {
                return Err(OcrtError::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let out_shape = if axis == 0 {
            vec![total, fixed_extent]
        } else {
            vec![fixed_extent, total]
        };
        let mut out = vec![S::zero(); total * fixed_extent];
        if axis == 0 {
            let mut row = 0;
            for p in parts {
                let d = p.data();
                out[row * fixed_extent..(row + p.shape()[0]) * fixed_extent].copy_from_slice(&d);
                row += p.shape()[0];
            }
        } else {
            let mut col = 0;
            for p in parts {
                let w = p.shape()[1];
                let d = p.data();
                for i in 0..fixed_extent {
                    out[i * total + col..i * total + col + w]
                        .copy_from_slice(&d[i * w..(i + 1) * w]);
                }
                col += w;
            }
        }
        let owned: Vec<Tensor<S>> = parts.iter().map(|p| (*p).clone()).collect();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let parents = owned.clone();
        Tensor::from_op("concat", out_shape, out, parents, move || {
            Box::new(move |g: &[S]| {
                if axis == 0 {
                    let mut row = 0;
                    for (p, &h) in owned.iter().zip(&widths) {
                        if p.requires_grad() {
                            p.accumulate(&g[row * fixed_extent..(row + h) * fixed_extent]);
                        }
                        row += h;
                    }
                } else {
                    let total: usize = widths.iter().sum();
                    let mut col = 0;
                    for (p, &w) in owned.iter().zip(&widths) {
                        if p.requires_grad() {
                            let mut dp = vec![S::zero(); fixed_extent * w];
                            for i in 0..fixed_extent {
                                dp[i * w..(i + 1) * w]
                                    .copy_from_slice(&g[i * total + col..i * total + col + w]);
                            }
                            p.accumulate(&dp);
                        }
                        col += w;
                    }
                }
            })
        })
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 2 || end > s[1] || start >= end {
            return Err(OcrtError::InvalidShape {
                op: "slice_cols",
                shape: s.to_vec(),
                reason: format!("column range {start}..{end} invalid"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let w = end - start;
        let d = self.data();
        let mut out = vec![S::zero(); m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&d[i * n + start..i * n + end]);
        }
        drop(d);
        let a = self.clone();
        Tensor::from_op("slice_cols", vec![m, w], out, vec![a.clone()], move || {
            Box::new(move |g: &[S]| {
                let mut da = vec![S::zero(); m * n];
                for i in 0..m {
                    da[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                a.accumulate(&da);
            })
        })
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 2 || end > s[0] || start >= end {
            return Err(OcrtError::InvalidShape {
                op: "slice_rows",
                shape: s.to_vec(),
                reason: format!("row range {start}..{end} invalid"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let h = end - start;
        let out = self.data()[start * n..end * n].to_vec();
        let a = self.clone();
        Tensor::from_op("slice_rows", vec![h, n], out, vec![a.clone()], move || {
            Box::new(move |g: &[S]| {
                let mut da = vec![S::zero(); m * n];
                da[start * n..end * n].copy_from_slice(g);
                a.accumulate(&da);
            })
        })
    }

    /// Gather flat elements: out[i] = self_flat[indices[i]].
    /// Backward scatter-adds, so repeated indices are fine.
    pub fn gather(&self, indices: &[usize], out_shape: &[usize]) -> Result<Tensor<S>> {
        let n_out: usize = out_shape.iter().product();
        if n_out != indices.len() {
            return Err(OcrtError::InvalidShape {
                op: "gather",
                shape: out_shape.to_vec(),
                reason: format!("output shape incompatible with {} indices", indices.len()),
            });
        }
        let n_in = self.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_in) {
            return Err(OcrtError::Contract(format!(
                "gather index {bad} out of range for {n_in} elements"
            )));
        }
        let d = self.data();
        let out: Vec<S> = indices.iter().map(|&i| d[i]).collect();
        drop(d);
        let idx: Rc<Vec<usize>> = Rc::new(indices.to_vec());
        let a = self.clone();
        Tensor::from_op("gather", out_shape.to_vec(), out, vec![a.clone()], move || {
            Box::new(move |g: &[S]| {
                let mut da = vec![S::zero(); n_in];
                for (o, &i) in idx.iter().enumerate() {
                    da[i] += g[o];
                }
                a.accumulate(&da);
            })
        })
    }

    /// Gather whole rows of a rank-2 tensor.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(OcrtError::InvalidShape {
                op: "gather_rows",
                shape: s.to_vec(),
                reason: "rank-2 tensor required".into(),
            });
        }
        let n = s[1];
        let mut flat = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= s[0] {
                return Err(OcrtError::Contract(format!(
                    "gather_rows index {r} out of range for {} rows",
                    s[0]
                )));
            }
            for j in 0..n {
                flat.push(r * n + j);
            }
        }
        self.gather(&flat, &[rows.len(), n])
    }
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Row-major matmul, ikj order.
pub fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, p: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for k in 0..p {
            let aik = a[i * p + k];
            if aik == S::zero() {
                continue;
            }
            let brow = &b[k * n..(k + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

type IndexMaps = Option<(Rc<Vec<usize>>, Rc<Vec<usize>>)>;

/// NumPy-style broadcast: returns the output shape, plus per-operand
/// flat index maps when the shapes differ (None for the equal-shape
/// fast path).
fn broadcast_plan(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<usize>, IndexMaps)> {
    if a == b {
        return Ok((a.to_vec(), None));
    }
    let rank = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| -> usize {
        if i + s.len() >= rank {
            s[i + s.len() - rank]
        } else {
            1
        }
    };
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let (da, db) = (dim(a, i), dim(b, i));
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(OcrtError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    let strides = |s: &[usize]| -> Vec<usize> {
        let mut st = vec![0usize; rank];
        let mut acc = 1usize;
        for i in (0..rank).rev() {
            let d = dim(s, i);
            st[i] = if d == 1 { 0 } else { acc };
            acc *= d;
        }
        st
    };
    let (sa, sb) = (strides(a), strides(b));
    let numel: usize = out.iter().product();
    let mut ia = vec![0usize; numel];
    let mut ib = vec![0usize; numel];
    let mut idx = vec![0usize; rank];
    for flat in 0..numel {
        let (mut oa, mut ob) = (0usize, 0usize);
        for i in 0..rank {
            oa += idx[i] * sa[i];
            ob += idx[i] * sb[i];
        }
        ia[flat] = oa;
        ib[flat] = ob;
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < out[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    Ok((out, Some((Rc::new(ia), Rc::new(ib)))))
}
