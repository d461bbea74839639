//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Every model computation is expressed through the ops in this module so
//! that gradients are exact and checkable against finite differences.
//! A [`Tensor`] is a node in an implicit tape: leaves hold inputs or
//! parameters, interior nodes remember the op and input references needed
//! for the backward rule. The graph is a DAG; [`backward`] walks it once
//! per node in reverse topological order and accumulates gradients into
//! every reachable tensor with `requires_grad` set.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, AdError>;

/// Elementwise nonlinearities used by the layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed in terms of input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Recorded operation plus the input references its backward rule needs.
enum Op {
    MatMul { a: Tensor, b: Tensor },
    Transpose { x: Tensor },
    AddBias { x: Tensor, b: Tensor },
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    Scale { x: Tensor, c: f64 },
    Activation { x: Tensor, kind: Activation },
    SoftmaxRows { x: Tensor },
    Concat { parts: Vec<Tensor>, axis0: bool },
    Row { x: Tensor, index: usize },
    Reshape { x: Tensor },
    Sum { x: Tensor },
    MseLoss { pred: Tensor, target: Tensor },
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    grad: RefCell<Vec<f64>>,
    requires_grad: Cell<bool>,
    op: Option<Op>,
}

/// Dense real tensor with a gradient slot. Cloning is cheap (shared node).
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("values", &self.0.values.borrow())
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(numel_of(&shape), values.len());
        let n = values.len();
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            values: RefCell::new(values),
            grad: RefCell::new(vec![0.0; n]),
            requires_grad: Cell::new(requires_grad),
            op,
        }))
    }

    /// Leaf tensor that does not receive gradients (model inputs, targets).
    pub fn leaf(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if numel_of(shape) != values.len() {
            return Err(AdError::InvalidShape {
                op: "leaf",
                detail: format!("shape {:?} does not hold {} values", shape, values.len()),
            });
        }
        Ok(Tensor::new(shape.to_vec(), values, false, None))
    }

    /// Leaf tensor that accumulates gradients (trainable parameter).
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::leaf(shape, values)?;
        t.0.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), vec![0.0; numel_of(shape)], false, None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v], false, None)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.0.values.borrow()
    }

    pub fn grad(&self) -> Ref<'_, Vec<f64>> {
        self.0.grad.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.values.borrow().clone()
    }

    pub fn grad_vec(&self) -> Vec<f64> {
        self.0.grad.borrow().clone()
    }

    /// Scalar extraction; panics if the tensor is not a single element.
    pub fn item(&self) -> f64 {
        let v = self.0.values.borrow();
        assert_eq!(v.len(), 1, "item() on non-scalar tensor");
        v[0]
    }

    /// Overwrite stored values in place (optimizer updates).
    pub fn set_values(&self, values: &[f64]) {
        let mut v = self.0.values.borrow_mut();
        assert_eq!(v.len(), values.len());
        v.copy_from_slice(values);
    }

    /// Overwrite the gradient buffer (used by optimizers and tests).
    pub fn set_grad(&self, values: &[f64]) {
        let mut g = self.0.grad.borrow_mut();
        assert_eq!(g.len(), values.len());
        g.copy_from_slice(values);
    }

    pub fn zero_grad(&self) {
        for g in self.0.grad.borrow_mut().iter_mut() {
            *g = 0.0;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.values.borrow().iter().all(|v| v.is_finite())
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            other => Err(AdError::InvalidShape {
                op,
                detail: format!("expected rank-2 tensor, got shape {:?}", other),
            }),
        }
    }

    fn out_requires(inputs: &[&Tensor]) -> bool {
        inputs.iter().any(|t| t.requires_grad())
    }

    // ── Forward ops ──────────────────────────────────────────────────

    /// Matrix product `[m×k]·[k×n] -> [m×n]`.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = b.rows_cols("matmul")?;
        if k != k2 {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                left: self.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let av = self.values();
        let bv = b.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        drop(av);
        drop(bv);
        let req = Self::out_requires(&[self, b]);
        Ok(Tensor::new(
            vec![m, n],
            out,
            req,
            Some(Op::MatMul {
                a: self.clone(),
                b: b.clone(),
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.rows_cols("transpose")?;
        let v = self.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        drop(v);
        let req = self.requires_grad();
        Ok(Tensor::new(
            vec![n, m],
            out,
            req,
            Some(Op::Transpose { x: self.clone() }),
        ))
    }

    /// Row-wise addition of a rank-1 bias: `[m×n] + [n] -> [m×n]`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.rows_cols("add_bias")?;
        if bias.shape() != [n] {
            return Err(AdError::ShapeMismatch {
                op: "add_bias",
                left: self.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let xv = self.values();
        let bv = bias.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = xv[i * n + j] + bv[j];
            }
        }
        drop(xv);
        drop(bv);
        let req = Self::out_requires(&[self, bias]);
        Ok(Tensor::new(
            vec![m, n],
            out,
            req,
            Some(Op::AddBias {
                x: self.clone(),
                b: bias.clone(),
            }),
        ))
    }

    fn elementwise(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        if self.shape() != other.shape() {
            return Err(AdError::ShapeMismatch {
                op,
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let a = self.values();
        let b = other.values();
        Ok(a.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.elementwise(other, "add", |a, b| a + b)?;
        let req = Self::out_requires(&[self, other]);
        Ok(Tensor::new(
            self.shape().to_vec(),
            out,
            req,
            Some(Op::Add {
                a: self.clone(),
                b: other.clone(),
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.elementwise(other, "sub", |a, b| a - b)?;
        let req = Self::out_requires(&[self, other]);
        Ok(Tensor::new(
            self.shape().to_vec(),
            out,
            req,
            Some(Op::Sub {
                a: self.clone(),
                b: other.clone(),
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.elementwise(other, "mul", |a, b| a * b)?;
        let req = Self::out_requires(&[self, other]);
        Ok(Tensor::new(
            self.shape().to_vec(),
            out,
            req,
            Some(Op::Mul {
                a: self.clone(),
                b: other.clone(),
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.values().iter().map(|v| v * c).collect();
        let req = self.requires_grad();
        Tensor::new(
            self.shape().to_vec(),
            out,
            req,
            Some(Op::Scale { x: self.clone(), c }),
        )
    }

    /// Elementwise activation with analytic backward rule.
    pub fn activation(&self, kind: Activation) -> Tensor {
        let out: Vec<f64> = self.values().iter().map(|v| kind.apply(*v)).collect();
        let req = self.requires_grad();
        Tensor::new(
            self.shape().to_vec(),
            out,
            req,
            Some(Op::Activation {
                x: self.clone(),
                kind,
            }),
        )
    }

    /// Numerically stable softmax applied to each row of a rank-2 tensor.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.rows_cols("softmax_rows")?;
        let v = self.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        drop(v);
        let req = self.requires_grad();
        Ok(Tensor::new(
            vec![m, n],
            out,
            req,
            Some(Op::SoftmaxRows { x: self.clone() }),
        ))
    }

    /// Concatenation along the last axis. Parts must agree on every other
    /// dimension; rank-1 and rank-2 tensors are supported.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        Self::concat_impl(parts, false)
    }

    /// Stack along the first axis (rows). Used to assemble sequences.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        Self::concat_impl(parts, true)
    }

    fn concat_impl(parts: &[Tensor], axis0: bool) -> Result<Tensor> {
        let op = if axis0 { "concat_rows" } else { "concat" };
        if parts.is_empty() {
            return Err(AdError::InvalidShape {
                op: "concat",
                detail: "no parts given".into(),
            });
        }
        let rank = parts[0].shape().len();
        if rank == 0 || rank > 2 {
            return Err(AdError::InvalidShape {
                op: "concat",
                detail: format!("unsupported rank {}", rank),
            });
        }
        let mut out_shape = parts[0].shape().to_vec();
        let axis = if axis0 { 0 } else { rank - 1 };
        if axis0 && rank != 2 {
            return Err(AdError::InvalidShape {
                op: "concat_rows",
                detail: "row stacking needs rank-2 parts".into(),
            });
        }
        let mut total = parts[0].shape()[axis];
        for p in &parts[1..] {
            if p.shape().len() != rank {
                return Err(AdError::ShapeMismatch {
                    op,
                    left: parts[0].shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            for (d, (a, b)) in parts[0].shape().iter().zip(p.shape().iter()).enumerate() {
                if d != axis && a != b {
                    return Err(AdError::ShapeMismatch {
                        op,
                        left: parts[0].shape().to_vec(),
                        right: p.shape().to_vec(),
                    });
                }
            }
            total += p.shape()[axis];
        }
        out_shape[axis] = total;

        let mut out = Vec::with_capacity(numel_of(&out_shape));
        if axis0 || rank == 1 {
            for p in parts {
                out.extend_from_slice(&p.values());
            }
        } else {
            let rows = out_shape[0];
            for i in 0..rows {
                for p in parts {
                    let w = p.shape()[1];
                    out.extend_from_slice(&p.values()[i * w..(i + 1) * w]);
                }
            }
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let req = Self::out_requires(&refs);
        Ok(Tensor::new(
            out_shape,
            out,
            req,
            Some(Op::Concat {
                parts: parts.to_vec(),
                axis0,
            }),
        ))
    }

    /// Select row `index` of a rank-2 tensor as a `[1×n]` tensor.
    pub fn row(&self, index: usize) -> Result<Tensor> {
        let (m, n) = self.rows_cols("row")?;
        if index >= m {
            return Err(AdError::InvalidShape {
                op: "row",
                detail: format!("row {} out of bounds for {} rows", index, m),
            });
        }
        let out = self.values()[index * n..(index + 1) * n].to_vec();
        let req = self.requires_grad();
        Ok(Tensor::new(
            vec![1, n],
            out,
            req,
            Some(Op::Row {
                x: self.clone(),
                index,
            }),
        ))
    }

    /// View with a new shape of identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(AdError::InvalidShape {
                op: "reshape",
                detail: format!(
                    "cannot reshape {:?} ({} elems) to {:?}",
                    self.shape(),
                    self.numel(),
                    shape
                ),
            });
        }
        let req = self.requires_grad();
        Ok(Tensor::new(
            shape.to_vec(),
            self.to_vec(),
            req,
            Some(Op::Reshape { x: self.clone() }),
        ))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.values().iter().sum();
        let req = self.requires_grad();
        Tensor::new(vec![1], vec![s], req, Some(Op::Sum { x: self.clone() }))
    }

    /// Mean of squared differences over all elements, as a scalar tensor.
    pub fn mse_loss(&self, target: &Tensor) -> Result<Tensor> {
        if self.shape() != target.shape() {
            return Err(AdError::ShapeMismatch {
                op: "mse_loss",
                left: self.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let p = self.values();
        let t = target.values();
        let n = p.len() as f64;
        let s: f64 = p.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        drop(p);
        drop(t);
        let req = Self::out_requires(&[self, target]);
        Ok(Tensor::new(
            vec![1],
            vec![s / n],
            req,
            Some(Op::MseLoss {
                pred: self.clone(),
                target: target.clone(),
            }),
        ))
    }
}

// ── Backward pass ──────────────────────────────────────────────────────

/// Counters from one backward traversal; the tape invariant is that every
/// reachable node is visited exactly once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardStats {
    pub nodes: usize,
    pub visits: usize,
}

fn op_inputs(op: &Op) -> Vec<&Tensor> {
    match op {
        Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
            vec![a, b]
        }
        Op::Transpose { x }
        | Op::Scale { x, .. }
        | Op::Activation { x, .. }
        | Op::SoftmaxRows { x }
        | Op::Row { x, .. }
        | Op::Reshape { x }
        | Op::Sum { x } => vec![x],
        Op::AddBias { x, b } => vec![x, b],
        Op::Concat { parts, .. } => parts.iter().collect(),
        Op::MseLoss { pred, target } => vec![pred, target],
    }
}

/// Iterative post-order topological sort of the DAG rooted at `root`.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order: Vec<Tensor> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    // Stack entries: (node, expanded?) to emulate recursion.
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(op) = &node.0.op {
            for input in op_inputs(op) {
                if !seen.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

fn accumulate(target: &Tensor, delta: &[f64]) {
    let mut g = target.0.grad.borrow_mut();
    debug_assert_eq!(g.len(), delta.len());
    for (gi, di) in g.iter_mut().zip(delta.iter()) {
        *gi += di;
    }
}

fn backward_node(node: &Tensor) {
    let op = match &node.0.op {
        Some(op) => op,
        None => return,
    };
    let up = node.0.grad.borrow().clone();
    match op {
        Op::MatMul { a, b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                let bv = b.values();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += up[i * n + j] * bv[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                drop(bv);
                accumulate(a, &da);
            }
            if b.requires_grad() {
                let av = a.values();
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += aip * up[i * n + j];
                        }
                    }
                }
                drop(av);
                accumulate(b, &db);
            }
        }
        Op::Transpose { x } => {
            if x.requires_grad() {
                let (n, m) = (node.shape()[0], node.shape()[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        dx[j * n + i] = up[i * m + j];
                    }
                }
                accumulate(x, &dx);
            }
        }
        Op::AddBias { x, b } => {
            let (m, n) = (x.shape()[0], x.shape()[1]);
            if x.requires_grad() {
                accumulate(x, &up);
            }
            if b.requires_grad() {
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += up[i * n + j];
                    }
                }
                accumulate(b, &db);
            }
        }
        Op::Add { a, b } => {
            if a.requires_grad() {
                accumulate(a, &up);
            }
            if b.requires_grad() {
                accumulate(b, &up);
            }
        }
        Op::Sub { a, b } => {
            if a.requires_grad() {
                accumulate(a, &up);
            }
            if b.requires_grad() {
                let neg: Vec<f64> = up.iter().map(|v| -v).collect();
                accumulate(b, &neg);
            }
        }
        Op::Mul { a, b } => {
            if a.requires_grad() {
                let bv = b.values();
                let da: Vec<f64> = up.iter().zip(bv.iter()).map(|(u, v)| u * v).collect();
                drop(bv);
                accumulate(a, &da);
            }
            if b.requires_grad() {
                let av = a.values();
                let db: Vec<f64> = up.iter().zip(av.iter()).map(|(u, v)| u * v).collect();
                drop(av);
                accumulate(b, &db);
            }
        }
        Op::Scale { x, c } => {
            if x.requires_grad() {
                let dx: Vec<f64> = up.iter().map(|u| u * c).collect();
                accumulate(x, &dx);
            }
        }
        Op::Activation { x, kind } => {
            if x.requires_grad() {
                let xv = x.values();
                let yv = node.values();
                let dx: Vec<f64> = up
                    .iter()
                    .zip(xv.iter().zip(yv.iter()))
                    .map(|(u, (xi, yi))| u * kind.derivative(*xi, *yi))
                    .collect();
                drop(xv);
                drop(yv);
                accumulate(x, &dx);
            }
        }
        Op::SoftmaxRows { x } => {
            if x.requires_grad() {
                let (m, n) = (node.shape()[0], node.shape()[1]);
                let y = node.values();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let ur = &up[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(ur.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (ur[j] - dot);
                    }
                }
                drop(y);
                accumulate(x, &dx);
            }
        }
        Op::Concat { parts, axis0 } => {
            if *axis0 || parts[0].shape().len() == 1 {
                let mut offset = 0;
                for p in parts {
                    let len = p.numel();
                    if p.requires_grad() {
                        accumulate(p, &up[offset..offset + len]);
                    }
                    offset += len;
                }
            } else {
                let rows = node.shape()[0];
                let total = node.shape()[1];
                let mut col_offset = 0;
                for p in parts {
                    let w = p.shape()[1];
                    if p.requires_grad() {
                        let mut dp = vec![0.0; rows * w];
                        for i in 0..rows {
                            dp[i * w..(i + 1) * w].copy_from_slice(
                                &up[i * total + col_offset..i * total + col_offset + w],
                            );
                        }
                        accumulate(p, &dp);
                    }
                    col_offset += w;
                }
            }
        }
        Op::Row { x, index } => {
            if x.requires_grad() {
                let n = node.shape()[1];
                let mut dx = vec![0.0; x.numel()];
                dx[index * n..(index + 1) * n].copy_from_slice(&up);
                accumulate(x, &dx);
            }
        }
        Op::Reshape { x } => {
            if x.requires_grad() {
                accumulate(x, &up);
            }
        }
        Op::Sum { x } => {
            if x.requires_grad() {
                let dx = vec![up[0]; x.numel()];
                accumulate(x, &dx);
            }
        }
        Op::MseLoss { pred, target } => {
            let n = pred.numel() as f64;
            let p = pred.values();
            let t = target.values();
            if pred.requires_grad() {
                let dp: Vec<f64> = p
                    .iter()
                    .zip(t.iter())
                    .map(|(a, b)| up[0] * 2.0 * (a - b) / n)
                    .collect();
                drop(p);
                let dp_ref = dp;
                accumulate(pred, &dp_ref);
            } else {
                drop(p);
            }
            if target.requires_grad() {
                let p2 = pred.values();
                let dt: Vec<f64> = p2
                    .iter()
                    .zip(t.iter())
                    .map(|(a, b)| up[0] * 2.0 * (b - a) / n)
                    .collect();
                drop(p2);
                accumulate(target, &dt);
            }
        }
    }
}

/// Populate gradients of every tensor reachable from a scalar `loss`.
/// Gradients accumulate; callers zero parameter grads between steps.
pub fn backward(loss: &Tensor) -> Result<()> {
    backward_with_stats(loss).map(|_| ())
}

/// [`backward`] plus instrumentation counters for the visit-once invariant.
pub fn backward_with_stats(loss: &Tensor) -> Result<BackwardStats> {
    if loss.numel() != 1 {
        return Err(AdError::NonScalarLoss(loss.shape().to_vec()));
    }
    if !loss.item().is_finite() {
        return Err(AdError::NonFinite("backward loss".into()));
    }
    let order = topo_order(loss);
    {
        let mut g = loss.0.grad.borrow_mut();
        g[0] += 1.0;
    }
    let mut visits = 0usize;
    let mut visited: HashSet<u64> = HashSet::new();
    for node in order.iter().rev() {
        visits += 1;
        visited.insert(node.id());
        if node.requires_grad() {
            backward_node(node);
        }
    }
    Ok(BackwardStats {
        nodes: visited.len(),
        visits,
    })
}

// ── Finite-difference gradient checking ────────────────────────────────

/// Max relative error between the analytic gradient of `f` at `param` and
/// a central finite-difference estimate. `f` must rebuild its graph from
/// the current values of `param` on every call.
pub fn finite_difference_check<F>(f: F, param: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    assert!(eps > 0.0, "finite_difference_check requires eps > 0");
    param.zero_grad();
    let loss = f()?;
    if loss.numel() != 1 {
        return Err(AdError::NonScalarLoss(loss.shape().to_vec()));
    }
    backward(&loss)?;
    let analytic = param.grad_vec();

    let mut max_err = 0.0f64;
    let n = param.numel();
    for i in 0..n {
        let orig = param.values()[i];
        let nudge = |v: f64| -> Result<f64> {
            {
                let mut vals = param.0.values.borrow_mut();
                vals[i] = v;
            }
            let out = f()?.item();
            {
                let mut vals = param.0.values.borrow_mut();
                vals[i] = orig;
            }
            Ok(out)
        };
        let plus = nudge(orig + eps)?;
        let minus = nudge(orig - eps)?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(AdError::NonFinite("finite_difference_check probe".into()));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-12);
        let err = (analytic[i] - numeric).abs() / denom;
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

/// Run [`finite_difference_check`] against each parameter in turn and
/// return the worst relative error.
pub fn finite_difference_check_all<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    let mut worst = 0.0f64;
    for p in params {
        let err = finite_difference_check(&f, p, eps)?;
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
