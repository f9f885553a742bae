//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Every [`Tensor`] produced by a recorded operation keeps handles to its
//! inputs, so the computation record is the DAG reachable from a result.
//! Backward rules are themselves written in terms of recorded operations,
//! which means a gradient computed with `create_record = true` can be
//! differentiated again. The MAML outer loop depends on this.
//!
//! Recording is confined to the current thread. A `Tensor` is `!Send`;
//! share raw parameter vectors between threads and rebuild tensors there.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

mod edge;
mod sparse;

pub use edge::{edge_conv, edge_conv_t, edge_weight_grad, EdgeIndex};
pub use sparse::{apply_sparse, SparseMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("gradient requested of a non-scalar output with shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("input #{0} is not reachable from the output in the computation record")]
    NotInRecord(usize),
    #[error("axis {axis} is invalid for a tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static RECORDING: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Whether operations on this thread are currently being recorded.
pub fn is_recording() -> bool {
    RECORDING.with(|r| r.get())
}

/// Restores the previous recording flag on drop.
pub struct RecordGuard {
    previous: bool,
}

impl Drop for RecordGuard {
    fn drop(&mut self) {
        RECORDING.with(|r| r.set(self.previous));
    }
}

/// Sets the recording flag for the lifetime of the returned guard.
pub fn set_recording(on: bool) -> RecordGuard {
    let previous = RECORDING.with(|r| r.replace(on));
    RecordGuard { previous }
}

/// Runs `f` with recording disabled. Results are constants.
pub fn no_record<T>(f: impl FnOnce() -> T) -> T {
    let _g = set_recording(false);
    f()
}

/// Backward rule of a recorded operation.
///
/// `parents` are the operation inputs in the order they were recorded and
/// `out` is the operation result. Implementations must only use `Tensor`
/// operations so that the backward pass can itself be recorded.
trait Backward {
    fn backward(&self, out: &Tensor, grad: &Tensor, parents: &[Tensor]) -> Vec<Option<Tensor>>;
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    op: Option<Box<dyn Backward>>,
}

/// Dense row-major array participating in the computation record.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("recorded", &self.0.op.is_some())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor> {
        if data.len() != numel(&shape) {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            parents: Vec::new(),
            op: None,
        })))
    }

    /// A constant (no gradient flows into it).
    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::leaf(data, shape.to_vec(), false)
    }

    /// A differentiable leaf, typically a model parameter.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::leaf(data, shape.to_vec(), true)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(vec![v], Vec::new(), false).expect("scalar shape")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(vec![0.0; numel(shape)], shape.to_vec(), false).expect("zeros shape")
    }

    fn full_like(&self, v: f64) -> Tensor {
        Tensor::leaf(vec![v; self.numel()], self.0.shape.clone(), false).expect("same shape")
    }

    /// Builds an operation result, recording it only when recording is on
    /// and some input needs a gradient.
    fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: &[&Tensor],
        op: impl Backward + 'static,
    ) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape));
        let track = is_recording() && parents.iter().any(|p| p.0.requires_grad);
        if !track {
            return Tensor::leaf(data, shape, false).expect("op output shape");
        }
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad: true,
            parents: parents.iter().map(|p| (*p).clone()).collect(),
            op: Some(Box::new(op)),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Whether this tensor was produced by a recorded operation.
    pub fn is_recorded(&self) -> bool {
        self.0.op.is_some()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// A constant copy cut off from the record.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.data.clone(), self.0.shape.clone(), false).expect("same shape")
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![0, 0],
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise binary operations (equal shapes, or one side a single element)

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Square,
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

/// Reduces a gradient back onto an operand that may have been broadcast.
fn unbroadcast(g: Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        g
    } else {
        g.sum().reshape(target.shape()).expect("single element")
    }
}

struct BinaryBackward(BinaryOp);

impl Backward for BinaryBackward {
    fn backward(&self, out: &Tensor, g: &Tensor, p: &[Tensor]) -> Vec<Option<Tensor>> {
        let (a, b) = (&p[0], &p[1]);
        let (ga, gb) = match self.0 {
            BinaryOp::Add => (g.clone(), g.clone()),
            BinaryOp::Sub => (g.clone(), g.neg()),
            BinaryOp::Mul => (g.mul(b).unwrap(), g.mul(a).unwrap()),
            BinaryOp::Div => {
                let ga = g.div(b).unwrap();
                let gb = g.mul(out).unwrap().div(b).unwrap().neg();
                (ga, gb)
            }
        };
        vec![
            a.0.requires_grad.then(|| unbroadcast(ga, a)),
            b.0.requires_grad.then(|| unbroadcast(gb, b)),
        ]
    }
}

fn binary_kernel(op: BinaryOp) -> fn(f64, f64) -> f64 {
    match op {
        BinaryOp::Add => |x, y| x + y,
        BinaryOp::Sub => |x, y| x - y,
        BinaryOp::Mul => |x, y| x * y,
        BinaryOp::Div => |x, y| x / y,
    }
}

struct UnaryBackward(UnaryOp);

impl Backward for UnaryBackward {
    fn backward(&self, out: &Tensor, g: &Tensor, p: &[Tensor]) -> Vec<Option<Tensor>> {
        let x = &p[0];
        let gx = match self.0 {
            UnaryOp::Neg => g.neg(),
            UnaryOp::Exp => g.mul(out).unwrap(),
            UnaryOp::Square => g.mul(x).unwrap().scale(2.0),
        };
        vec![Some(gx)]
    }
}

struct ScaleBackward(f64);

impl Backward for ScaleBackward {
    fn backward(&self, _out: &Tensor, g: &Tensor, _p: &[Tensor]) -> Vec<Option<Tensor>> {
        vec![Some(g.scale(self.0))]
    }
}

struct ShiftBackward;

impl Backward for ShiftBackward {
    fn backward(&self, _out: &Tensor, g: &Tensor, _p: &[Tensor]) -> Vec<Option<Tensor>> {
        vec![Some(g.clone())]
    }
}

struct EluBackward;

impl Backward for EluBackward {
    fn backward(&self, out: &Tensor, g: &Tensor, p: &[Tensor]) -> Vec<Option<Tensor>> {
        // d/dx elu = 1 for x > 0, e^x = elu(x) + 1 otherwise; derivative at 0 taken as 1.
        let x = &p[0];
        let pos: Vec<f64> = x.data().iter().map(|&v| if v >= 0.0 { 1.0 } else { 0.0 }).collect();
        let neg: Vec<f64> = pos.iter().map(|m| 1.0 - m).collect();
        let pos = Tensor::constant(pos, x.shape()).unwrap();
        let neg = Tensor::constant(neg, x.shape()).unwrap();
        let slope = out.add_scalar(1.0).mul(&neg).unwrap().add(&pos).unwrap();
        vec![Some(g.mul(&slope).unwrap())]
    }
}

impl Tensor {
    pub fn apply_binary(&self, op: BinaryOp, other: &Tensor) -> Result<Tensor> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let shape = broadcast_shape(name, self, other)?;
        let f = binary_kernel(op);
        let (a, b) = (self.data(), other.data());
        let data: Vec<f64> = if a.len() == b.len() {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        } else if b.len() == 1 {
            a.iter().map(|&x| f(x, b[0])).collect()
        } else {
            b.iter().map(|&y| f(a[0], y)).collect()
        };
        Ok(Tensor::from_op(data, shape, &[self, other], BinaryBackward(op)))
    }

    pub fn apply_unary(&self, op: UnaryOp) -> Tensor {
        let data: Vec<f64> = match op {
            UnaryOp::Neg => self.data().iter().map(|x| -x).collect(),
            UnaryOp::Exp => self.data().iter().map(|x| x.exp()).collect(),
            UnaryOp::Square => self.data().iter().map(|x| x * x).collect(),
        };
        Tensor::from_op(data, self.0.shape.clone(), &[self], UnaryBackward(op))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.apply_binary(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.apply_binary(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.apply_binary(BinaryOp::Mul, other)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.apply_binary(BinaryOp::Div, other)
    }

    pub fn neg(&self) -> Tensor {
        self.apply_unary(UnaryOp::Neg)
    }

    pub fn exp(&self) -> Tensor {
        self.apply_unary(UnaryOp::Exp)
    }

    pub fn square(&self) -> Tensor {
        self.apply_unary(UnaryOp::Square)
    }

    /// Multiplication by a fixed scalar.
    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op(data, self.0.shape.clone(), &[self], ScaleBackward(c))
    }

    /// Addition of a fixed scalar.
    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x + c).collect();
        Tensor::from_op(data, self.0.shape.clone(), &[self], ShiftBackward)
    }

    /// Exponential linear unit: `x` for `x > 0`, `e^x - 1` otherwise.
    pub fn elu(&self) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { x.exp_m1() })
            .collect();
        Tensor::from_op(data, self.0.shape.clone(), &[self], EluBackward)
    }
}

// ---------------------------------------------------------------------------
// Matrix product

struct MatMulBackward {
    ta: bool,
    tb: bool,
}

impl Backward for MatMulBackward {
    fn backward(&self, _out: &Tensor, g: &Tensor, p: &[Tensor]) -> Vec<Option<Tensor>> {
        let (a, b) = (&p[0], &p[1]);
        let ga = a.0.requires_grad.then(|| {
            if self.ta {
                b.matmul_t(self.tb, g, true).unwrap()
            } else {
                g.matmul_t(false, b, !self.tb).unwrap()
            }
        });
        let gb = b.0.requires_grad.then(|| {
            if self.tb {
                g.matmul_t(true, a, self.ta).unwrap()
            } else {
                a.matmul_t(!self.ta, g, false).unwrap()
            }
        });
        vec![ga, gb]
    }
}

/// `c += op(a) * op(b)` on raw row-major buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // op(a) is m×k; stored as k×m when transposed.
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe exactly the m×k, k×n and m×n row-major
    // buffers whose lengths the callers check.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// Standard matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_t(false, other, false)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(&self, ta: bool, other: &Tensor, tb: bool) -> Result<Tensor> {
        let (ar, ac) = self.rows_cols("matmul")?;
        let (br, bc) = other.rows_cols("matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), ta, other.data(), tb, &mut out);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            &[self, other],
            MatMulBackward { ta, tb },
        ))
    }
}

// ---------------------------------------------------------------------------
// Reductions, broadcasting and reshaping

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct SumAllBackward {
    scale: f64,
}

impl Backward for SumAllBackward {
    fn backward(&self, _out: &Tensor, g: &Tensor, p: &[Tensor]) -> Vec<Option<Tensor>> {
        let x = &p[0];
        let ones = x.full_like(self.scale);
        vec![Some(ones.mul(&g.reshape(&[]).unwrap()).unwrap())]
    }
}

struct SumAxisBackward {
    axis: usize,
    len: usize,
    scale: f64,
}

impl Backward for SumAxisBackward {
    fn backward(&self, _out: &Tensor, g: &Tensor, _p: &[Tensor]) -> Vec<Option<Tensor>> {
        let gx = g.broadcast_axis(self.axis, self.len).unwrap();
        vec![Some(if self.scale == 1.0 { gx } else { gx.scale(self.scale) })]
    }
}

struct BroadcastBackward {
    axis: usize,
}

impl Backward for BroadcastBackward {
    fn backward(&self, _out: &Tensor, g: &Tensor, _p: &[Tensor]) -> Vec<Option<Tensor>> {
        vec![Some(g.sum_axis(self.axis).unwrap())]
    }
}

struct ReshapeBackward {
    shape: Vec<usize>,
}

impl Backward for ReshapeBackward {
    fn backward(&self, _out: &Tensor, g: &Tensor, _p: &[Tensor]) -> Vec<Option<Tensor>> {
        vec![Some(g.reshape(&self.shape).unwrap())]
    }
}

impl Tensor {
    /// Sum of all elements (scalar result).
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![s], Vec::new(), &[self], SumAllBackward { scale: 1.0 })
    }

    /// Mean of all elements (scalar result).
    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        let s: f64 = self.data().iter().sum::<f64>() / n;
        Tensor::from_op(vec![s], Vec::new(), &[self], SumAllBackward { scale: 1.0 / n })
    }

    /// Reduction over all elements or over one axis (which is removed).
    pub fn reduce(&self, op: ReduceOp, axis: Option<usize>) -> Result<Tensor> {
        match (op, axis) {
            (ReduceOp::Sum, None) => Ok(self.sum()),
            (ReduceOp::Mean, None) => Ok(self.mean()),
            (ReduceOp::Sum, Some(ax)) => self.sum_axis(ax),
            (ReduceOp::Mean, Some(ax)) => self.mean_axis(ax),
        }
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { axis, rank });
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let scale = if mean && len > 0 { 1.0 / len as f64 } else { 1.0 };
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(
            out,
            shape,
            &[self],
            SumAxisBackward { axis, len, scale },
        ))
    }

    /// Inserts a new axis of length `len` at position `axis`, repeating data.
    pub fn broadcast_axis(&self, axis: usize, len: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis > rank {
            return Err(TensorError::InvalidAxis { axis, rank });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis..].iter().product();
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = &x[o * inner..(o + 1) * inner];
            for _ in 0..len {
                out.extend_from_slice(src);
            }
        }
        let mut shape = self.shape().to_vec();
        shape.insert(axis, len);
        Ok(Tensor::from_op(out, shape, &[self], BroadcastBackward { axis }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            &[self],
            ReshapeBackward {
                shape: self.shape().to_vec(),
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// Column concatenation and slicing of matrices

struct ConcatColsBackward {
    split: usize,
}

impl Backward for ConcatColsBackward {
    fn backward(&self, _out: &Tensor, g: &Tensor, p: &[Tensor]) -> Vec<Option<Tensor>> {
        let total = g.shape()[1];
        vec![
            p[0].0
                .requires_grad
                .then(|| g.slice_cols(0, self.split).unwrap()),
            p[1].0
                .requires_grad
                .then(|| g.slice_cols(self.split, total).unwrap()),
        ]
    }
}

struct SliceColsBackward {
    start: usize,
    total: usize,
}

impl Backward for SliceColsBackward {
    fn backward(&self, _out: &Tensor, g: &Tensor, _p: &[Tensor]) -> Vec<Option<Tensor>> {
        vec![Some(g.pad_cols(self.start, self.total).unwrap())]
    }
}

struct PadColsBackward {
    start: usize,
    width: usize,
}

impl Backward for PadColsBackward {
    fn backward(&self, _out: &Tensor, g: &Tensor, _p: &[Tensor]) -> Vec<Option<Tensor>> {
        vec![Some(g.slice_cols(self.start, self.start + self.width).unwrap())]
    }
}

impl Tensor {
    /// `[m, p] ++ [m, q] -> [m, p + q]`.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        let (m, p) = self.rows_cols("concat_cols")?;
        let (m2, q) = other.rows_cols("concat_cols")?;
        if m != m2 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(&self.data()[r * p..(r + 1) * p]);
            out.extend_from_slice(&other.data()[r * q..(r + 1) * q]);
        }
        Ok(Tensor::from_op(
            out,
            vec![m, p + q],
            &[self, other],
            ConcatColsBackward { split: p },
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = self.rows_cols("slice_cols")?;
        if start > end || end > n {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                left: self.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&self.data()[r * n + start..r * n + end]);
        }
        Ok(Tensor::from_op(
            out,
            vec![m, w],
            &[self],
            SliceColsBackward { start, total: n },
        ))
    }

    /// Embeds a matrix into `total` zero columns starting at `start`.
    pub fn pad_cols(&self, start: usize, total: usize) -> Result<Tensor> {
        let (m, w) = self.rows_cols("pad_cols")?;
        if start + w > total {
            return Err(TensorError::ShapeMismatch {
                op: "pad_cols",
                left: self.shape().to_vec(),
                right: vec![start, total],
            });
        }
        let mut out = vec![0.0; m * total];
        for r in 0..m {
            out[r * total + start..r * total + start + w]
                .copy_from_slice(&self.data()[r * w..(r + 1) * w]);
        }
        Ok(Tensor::from_op(
            out,
            vec![m, total],
            &[self],
            PadColsBackward { start, width: w },
        ))
    }
}

// ---------------------------------------------------------------------------
// Differentiation

/// Options for [`grad_with`].
#[derive(Clone, Copy, Debug, Default)]
pub struct GradOptions {
    /// Record the backward pass so the returned gradients are differentiable.
    pub create_record: bool,
    /// Return zeros for inputs the output does not depend on instead of failing.
    pub allow_unused: bool,
}

/// Gradients of a scalar `output` with respect to each of `inputs`.
pub fn grad(output: &Tensor, inputs: &[Tensor], create_record: bool) -> Result<Vec<Tensor>> {
    grad_with(
        output,
        inputs,
        GradOptions {
            create_record,
            allow_unused: false,
        },
    )
}

pub fn grad_with(output: &Tensor, inputs: &[Tensor], opts: GradOptions) -> Result<Vec<Tensor>> {
    if output.numel() != 1 {
        return Err(TensorError::NonScalarOutput(output.shape().to_vec()));
    }
    let input_ids: HashMap<u64, usize> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| (t.0.id, i))
        .collect();

    // Post-order walk over nodes that lie on a path to some input. Inputs are
    // treated as leaves of this pass even if they were themselves recorded.
    let mut relevant: HashMap<u64, bool> = HashMap::new();
    let mut order: Vec<Tensor> = Vec::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(output.clone(), 0)];
    while let Some((node, child)) = stack.pop() {
        let id = node.0.id;
        if child == 0 && relevant.contains_key(&id) {
            continue;
        }
        let is_input = input_ids.contains_key(&id);
        if !is_input && child < node.0.parents.len() {
            let parent = node.0.parents[child].clone();
            stack.push((node, child + 1));
            if parent.0.requires_grad && !relevant.contains_key(&parent.0.id) {
                stack.push((parent, 0));
            }
            continue;
        }
        let rel = is_input
            || node
                .0
                .parents
                .iter()
                .any(|p| relevant.get(&p.0.id).copied().unwrap_or(false));
        relevant.insert(id, rel);
        if rel {
            order.push(node);
        }
    }

    let _guard = set_recording(opts.create_record);
    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(output.0.id, output.full_like(1.0));
    for node in order.iter().rev() {
        let id = node.0.id;
        if input_ids.contains_key(&id) {
            continue;
        }
        let Some(g) = grads.remove(&id) else { continue };
        let Some(op) = node.0.op.as_ref() else { continue };
        let parent_grads = op.backward(node, &g, &node.0.parents);
        for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !relevant.get(&parent.0.id).copied().unwrap_or(false) {
                continue;
            }
            match grads.remove(&parent.0.id) {
                Some(acc) => {
                    grads.insert(parent.0.id, acc.add(&pg).expect("gradient shapes agree"));
                }
                None => {
                    grads.insert(parent.0.id, pg);
                }
            }
        }
    }

    inputs
        .iter()
        .enumerate()
        .map(|(i, t)| match grads.get(&t.0.id) {
            Some(g) => Ok(g.clone()),
            None if opts.allow_unused => Ok(t.full_like(0.0)),
            None => Err(TensorError::NotInRecord(i)),
        })
        .collect()
}
