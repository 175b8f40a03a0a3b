//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Values are row-major `Vec<f32>` buffers behind an `Rc`. Ops optionally
//! record onto a [`Tape`]; calling [`backward`] on a scalar walks the tape in
//! reverse, accumulating gradients into [`Param`]s and returning per-node
//! gradients for inspection. [`Tensor::detach`] severs the tape link and acts
//! as an exact gradient barrier.
//!
//! Everything here is single-threaded per tape. Tensors without a tape link
//! are plain immutable values.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    DataLength {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: unsupported ranks {lhs:?} x {rhs:?}")]
    UnsupportedRank {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("layer_norm: eps must be positive, got {eps}")]
    NonPositiveEps { eps: f32 },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    BackwardNonScalar { shape: Vec<usize> },
    #[error("backward: loss is detached from any tape")]
    BackwardDetached,
}

pub type Result<T> = std::result::Result<T, TensorError>;

// ---------------------------------------------------------------------------
// Live-value accounting.
//
// Every Storage allocation bumps a thread-local counter by its element count
// and decrements it on drop; the high-water mark backs the decoding
// complexity benchmark. Thread-local so concurrent tests do not interfere.
// ---------------------------------------------------------------------------

thread_local! {
    static LIVE_VALUES: Cell<usize> = const { Cell::new(0) };
    static PEAK_VALUES: Cell<usize> = const { Cell::new(0) };
}

/// Number of f32 values currently alive on this thread.
pub fn live_values() -> usize {
    LIVE_VALUES.with(|c| c.get())
}

/// High-water mark of live values since the last [`reset_peak_values`].
pub fn peak_values() -> usize {
    PEAK_VALUES.with(|c| c.get())
}

/// Resets the high-water mark to the current live count.
pub fn reset_peak_values() {
    let live = live_values();
    PEAK_VALUES.with(|c| c.set(live));
}

pub(crate) struct Storage {
    data: Vec<f32>,
}

impl Storage {
    pub(crate) fn new(data: Vec<f32>) -> Rc<Self> {
        LIVE_VALUES.with(|c| c.set(c.get() + data.len()));
        LIVE_VALUES.with(|live| {
            PEAK_VALUES.with(|peak| {
                if live.get() > peak.get() {
                    peak.set(live.get());
                }
            })
        });
        Rc::new(Storage { data })
    }
}

impl Drop for Storage {
    fn drop(&mut self) {
        LIVE_VALUES.with(|c| c.set(c.get().saturating_sub(self.data.len())));
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Recording of one differentiable computation. Rebuilt per forward pass;
/// dropped wholesale once gradients have been taken.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.inner.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

struct Node {
    op: Op,
}

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    index: usize,
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// Dense row-major f32 value, optionally linked to a tape node.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Storage>,
    node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                op: "from_vec",
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data: Storage::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: Storage::new(vec![0.0; n]),
            node: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: Storage::new(vec![value; n]),
            node: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: Storage::new(vec![value]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn data(&self) -> &[f32] {
        &self.data.data
    }

    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.data.data[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, no tape linkage. Gradients never flow through the result.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    fn tape_of(inputs: &[&Tensor]) -> Option<Tape> {
        let mut found: Option<Tape> = None;
        for t in inputs {
            if let Some(node) = &t.node {
                match &found {
                    None => found = Some(node.tape.clone()),
                    Some(existing) => {
                        assert!(
                            existing.same_tape(&node.tape),
                            "operands recorded on different tapes"
                        );
                    }
                }
            }
        }
        found
    }

    fn record(shape: Vec<usize>, data: Vec<f32>, tape: Option<Tape>, op: Op) -> Tensor {
        let node = tape.map(|tape| {
            let index = tape.push(Node { op });
            NodeRef { tape, index }
        });
        Tensor {
            shape,
            data: Storage::new(data),
            node,
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct ParamInner {
    name: String,
    shape: Vec<usize>,
    value: RefCell<Rc<Storage>>,
    grad: RefCell<Vec<f32>>,
}

/// Learnable tensor. Holds its own gradient accumulator; entering a tape via
/// [`Param::on`] makes it a leaf that [`backward`] writes into.
#[derive(Clone)]
pub struct Param {
    inner: Rc<ParamInner>,
}

/// Borrow-free view of a parameter's value at the time of the call.
pub struct ValueRef(Rc<Storage>);

impl AsRef<[f32]> for ValueRef {
    fn as_ref(&self) -> &[f32] {
        &self.0.data
    }
}

impl fmt::Debug for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.inner.name)
            .field("shape", &self.inner.shape)
            .finish()
    }
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let n = numel(&shape);
        assert_eq!(n, data.len(), "param data length mismatch");
        Param {
            inner: Rc::new(ParamInner {
                name: name.into(),
                shape,
                value: RefCell::new(Storage::new(data)),
                grad: RefCell::new(vec![0.0; n]),
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn value(&self) -> Vec<f32> {
        self.inner.value.borrow().data.clone()
    }

    /// Cheap shared handle to the current value buffer.
    pub fn snapshot(&self) -> ValueRef {
        ValueRef(Rc::clone(&self.inner.value.borrow()))
    }

    /// Replaces the stored value. Tensors created before the call keep the
    /// old buffer, so an in-flight tape stays consistent.
    pub fn set_value(&self, data: Vec<f32>) {
        assert_eq!(data.len(), self.numel(), "param value length mismatch");
        *self.inner.value.borrow_mut() = Storage::new(data);
    }

    pub fn grad(&self) -> Vec<f32> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        self.inner.grad.borrow_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    /// View as a tensor, recording a leaf node when a tape is given.
    pub fn on(&self, tape: Option<&Tape>) -> Tensor {
        let data = Rc::clone(&self.inner.value.borrow());
        match tape {
            None => Tensor {
                shape: self.inner.shape.clone(),
                data,
                node: None,
            },
            Some(tape) => {
                let index = tape.push(Node {
                    op: Op::Leaf {
                        param: Rc::clone(&self.inner),
                    },
                });
                Tensor {
                    shape: self.inner.shape.clone(),
                    data,
                    node: Some(NodeRef {
                        tape: tape.clone(),
                        index,
                    }),
                }
            }
        }
    }

}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

enum Op {
    Leaf {
        param: Rc<ParamInner>,
    },
    Add {
        a: Tensor,
        b: Tensor,
    },
    /// `b` broadcast over the leading extents of `a`; b.shape is a suffix of a.shape.
    AddBias {
        a: Tensor,
        b: Tensor,
    },
    Mul {
        a: Tensor,
        b: Tensor,
    },
    Scale {
        a: Tensor,
        c: f32,
    },
    /// Constant suffix-broadcast addend: gradient passes through unchanged.
    AddConst {
        a: Tensor,
    },
    /// Constant elementwise factor (dropout masks).
    MulConst {
        a: Tensor,
        mask: Rc<Vec<f32>>,
    },
    Matmul {
        a: Tensor,
        b: Tensor,
    },
    Permute {
        a: Tensor,
        axes: Vec<usize>,
    },
    Reshape {
        a: Tensor,
    },
    Softmax {
        a: Tensor,
        out: Rc<Storage>,
        axis: usize,
    },
    LogSoftmax {
        a: Tensor,
        out: Rc<Storage>,
    },
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    Relu {
        a: Tensor,
    },
    Sum {
        a: Tensor,
    },
    /// out[i] = a[i, idx[i]] for a rank-2 input.
    Pick {
        a: Tensor,
        idx: Rc<Vec<usize>>,
    },
    /// Row gather from a rank-2 weight; backward scatter-adds.
    Embed {
        weight: Tensor,
        ids: Rc<Vec<usize>>,
    },
}

impl Op {
    fn input_nodes(&self, out: &mut Vec<usize>) {
        let mut push = |t: &Tensor| {
            if let Some(n) = &t.node {
                out.push(n.index);
            }
        };
        match self {
            Op::Leaf { .. } => {}
            Op::Add { a, b } | Op::AddBias { a, b } | Op::Mul { a, b } | Op::Matmul { a, b } => {
                push(a);
                push(b);
            }
            Op::Scale { a, .. }
            | Op::AddConst { a }
            | Op::MulConst { a, .. }
            | Op::Permute { a, .. }
            | Op::Reshape { a }
            | Op::Softmax { a, .. }
            | Op::LogSoftmax { a, .. }
            | Op::Relu { a }
            | Op::Sum { a }
            | Op::Pick { a, .. } => push(a),
            Op::LayerNorm { x, gamma, beta, .. } => {
                push(x);
                push(gamma);
                push(beta);
            }
            Op::Embed { weight, .. } => push(weight),
        }
    }
}

// ---------------------------------------------------------------------------
// Forward ops
// ---------------------------------------------------------------------------

/// Splits `[batch dims.., m, k]` into (batch, m, k).
fn split_matrix_shape(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    let m = shape[r - 2];
    let k = shape[r - 1];
    (shape[..r - 2].iter().product(), m, k)
}

fn matmul_2d_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// a[m,k]ᵀ · g[m,n] accumulated into out[k,n].
fn matmul_at_g_into(a: &[f32], g: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// g[m,n] · b[k,n]ᵀ accumulated into out[m,k].
fn matmul_g_bt_into(g: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            *o += s;
        }
    }
}

fn suffix_ok(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn permuted_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn permute_data(data: &[f32], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let in_strides = permuted_strides(shape);
    let mut out = vec![0.0; data.len()];
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut src = 0;
        for (d, &ax) in axes.iter().enumerate() {
            src += idx[d] * in_strides[ax];
        }
        *o = data[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data: Vec<f32> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        let tape = Tensor::tape_of(&[self, other]);
        Ok(Tensor::record(
            self.shape.clone(),
            data,
            tape,
            Op::Add {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    /// Adds `bias`, broadcasting it over the leading extents of `self`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if !suffix_ok(&self.shape, &bias.shape) {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let bn = bias.numel();
        let data: Vec<f32> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a + bias.data()[i % bn])
            .collect();
        let tape = Tensor::tape_of(&[self, bias]);
        Ok(Tensor::record(
            self.shape.clone(),
            data,
            tape,
            Op::AddBias {
                a: self.clone(),
                b: bias.clone(),
            },
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data: Vec<f32> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        let tape = Tensor::tape_of(&[self, other]);
        Ok(Tensor::record(
            self.shape.clone(),
            data,
            tape,
            Op::Mul {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|a| a * c).collect();
        let tape = Tensor::tape_of(&[self]);
        Tensor::record(
            self.shape.clone(),
            data,
            tape,
            Op::Scale {
                a: self.clone(),
                c,
            },
        )
    }

    /// Adds a constant buffer, suffix-broadcast. No gradient flows into `buf`.
    pub fn add_const(&self, buf: &[f32]) -> Result<Tensor> {
        if self.numel() % buf.len() != 0 {
            return Err(TensorError::DataLength {
                op: "add_const",
                len: buf.len(),
                shape: self.shape.clone(),
            });
        }
        let bn = buf.len();
        let data: Vec<f32> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a + buf[i % bn])
            .collect();
        let tape = Tensor::tape_of(&[self]);
        Ok(Tensor::record(
            self.shape.clone(),
            data,
            tape,
            Op::AddConst { a: self.clone() },
        ))
    }

    /// Multiplies by a constant same-length mask (dropout).
    pub fn mul_const(&self, mask: Rc<Vec<f32>>) -> Result<Tensor> {
        if mask.len() != self.numel() {
            return Err(TensorError::DataLength {
                op: "mul_const",
                len: mask.len(),
                shape: self.shape.clone(),
            });
        }
        let data: Vec<f32> = self
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(a, m)| a * m)
            .collect();
        let tape = Tensor::tape_of(&[self]);
        Ok(Tensor::record(
            self.shape.clone(),
            data,
            tape,
            Op::MulConst {
                a: self.clone(),
                mask,
            },
        ))
    }

    /// Matrix product. Supports `[m,k]x[k,n]`, batched `[b,m,k]x[b,k,n]`,
    /// and `[b,m,k]x[k,n]` with the right operand shared across the batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, rb) = (self.rank(), other.rank());
        if !((ra == 2 && rb == 2) || (ra == 3 && rb == 3) || (ra == 3 && rb == 2)) {
            return Err(TensorError::UnsupportedRank {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (ba, m, k) = split_matrix_shape(&self.shape);
        let (bb, kb, n) = split_matrix_shape(&other.shape);
        let shared_b = rb == 2;
        if k != kb || (!shared_b && ba != bb) {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; ba * m * n];
        for bi in 0..ba {
            let a_off = bi * m * k;
            let b_off = if shared_b { 0 } else { bi * k * n };
            matmul_2d_into(
                &self.data()[a_off..a_off + m * k],
                &other.data()[b_off..b_off + k * n],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape: Vec<usize> = self.shape[..ra - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let tape = Tensor::tape_of(&[self, other]);
        Ok(Tensor::record(
            shape,
            out,
            tape,
            Op::Matmul {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank {
            return Err(TensorError::AxisOutOfRange {
                op: "permute",
                axis: axes.len(),
                rank,
            });
        }
        for &ax in axes {
            if ax >= rank || seen[ax] {
                return Err(TensorError::AxisOutOfRange {
                    op: "permute",
                    axis: ax,
                    rank,
                });
            }
            seen[ax] = true;
        }
        let (shape, data) = permute_data(self.data(), &self.shape, axes);
        let tape = Tensor::tape_of(&[self]);
        Ok(Tensor::record(
            shape,
            data,
            tape,
            Op::Permute {
                a: self.clone(),
                axes: axes.to_vec(),
            },
        ))
    }

    /// Transpose of the two trailing axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let rank = self.rank();
        if rank < 2 {
            return Err(TensorError::AxisOutOfRange {
                op: "transpose",
                axis: 1,
                rank,
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 1, rank - 2);
        self.permute(&axes)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != self.numel() {
            return Err(TensorError::DataLength {
                op: "reshape",
                len: self.numel(),
                shape,
            });
        }
        let tape = Tensor::tape_of(&[self]);
        Ok(Tensor::record(
            shape,
            self.data().to_vec(),
            tape,
            Op::Reshape { a: self.clone() },
        ))
    }

    /// Numerically stabilized softmax along `axis`. Slices that contain
    /// `-inf` entries get exactly zero weight there; an all-`-inf` slice is a
    /// caller error and reports as non-finite.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: self.rank(),
            });
        }
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = vec![0.0f32; self.numel()];
        let x = self.data();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut max = f32::NEG_INFINITY;
                for e in 0..extent {
                    max = max.max(x[base + e * inner]);
                }
                let mut denom = 0.0f32;
                for e in 0..extent {
                    let v = (x[base + e * inner] - max).exp();
                    out[base + e * inner] = v;
                    denom += v;
                }
                if !denom.is_finite() || denom == 0.0 {
                    return Err(TensorError::NonFinite { op: "softmax" });
                }
                for e in 0..extent {
                    out[base + e * inner] /= denom;
                }
            }
        }
        let tape = Tensor::tape_of(&[self]);
        let storage = Storage::new(out);
        let t = Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&storage),
            node: None,
        };
        let node = tape.map(|tape| {
            let index = tape.push(Node {
                op: Op::Softmax {
                    a: self.clone(),
                    out: storage,
                    axis,
                },
            });
            NodeRef { tape, index }
        });
        Ok(Tensor { node, ..t })
    }

    /// Log-softmax along the last axis of a rank-2 tensor.
    pub fn log_softmax(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::UnsupportedRank {
                op: "log_softmax",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0f32; self.numel()];
        let x = self.data();
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f32;
            for &v in row {
                denom += (v - max).exp();
            }
            let log_denom = denom.ln() + max;
            if !log_denom.is_finite() {
                return Err(TensorError::NonFinite { op: "log_softmax" });
            }
            for (c, &v) in row.iter().enumerate() {
                out[r * cols + c] = v - log_denom;
            }
        }
        let tape = Tensor::tape_of(&[self]);
        let storage = Storage::new(out);
        let t = Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&storage),
            node: None,
        };
        let node = tape.map(|tape| {
            let index = tape.push(Node {
                op: Op::LogSoftmax {
                    a: self.clone(),
                    out: storage,
                },
            });
            NodeRef { tape, index }
        });
        Ok(Tensor { node, ..t })
    }

    /// Per-last-axis standardization followed by the affine `gamma·x̂ + beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(TensorError::NonPositiveEps { eps });
        }
        let d = *self.shape.last().ok_or(TensorError::AxisOutOfRange {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / d;
        let x = self.data();
        let g = gamma.data();
        let b = beta.data();
        let mut out = vec![0.0f32; self.numel()];
        let mut means = vec![0.0f32; rows];
        let mut rstds = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rstd = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            for c in 0..d {
                out[r * d + c] = (row[c] - mean) * rstd * g[c] + b[c];
            }
        }
        let tape = Tensor::tape_of(&[self, gamma, beta]);
        Ok(Tensor::record(
            self.shape.clone(),
            out,
            tape,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean: means,
                rstd: rstds,
            },
        ))
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|&v| v.max(0.0)).collect();
        let tape = Tensor::tape_of(&[self]);
        Tensor::record(self.shape.clone(), data, tape, Op::Relu { a: self.clone() })
    }

    pub fn sum(&self) -> Tensor {
        let total: f32 = self.data().iter().sum();
        let tape = Tensor::tape_of(&[self]);
        Tensor::record(vec![1], vec![total], tape, Op::Sum { a: self.clone() })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f32;
        self.sum().scale(1.0 / n)
    }

    /// Selects `a[i, idx[i]]` from a rank-2 tensor.
    pub fn pick(&self, idx: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 || idx.len() != self.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                lhs: self.shape.clone(),
                rhs: vec![idx.len()],
            });
        }
        let cols = self.shape[1];
        let mut data = vec![0.0; idx.len()];
        for (i, &j) in idx.iter().enumerate() {
            if j >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index: j,
                    extent: cols,
                });
            }
            data[i] = self.data()[i * cols + j];
        }
        let tape = Tensor::tape_of(&[self]);
        Ok(Tensor::record(
            vec![idx.len()],
            data,
            tape,
            Op::Pick {
                a: self.clone(),
                idx: Rc::new(idx.to_vec()),
            },
        ))
    }

    /// Gathers rows of a rank-2 weight by id.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::UnsupportedRank {
                op: "embed",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (vocab, d) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embed",
                    index: id,
                    extent: vocab,
                });
            }
            data[i * d..(i + 1) * d].copy_from_slice(&self.data()[id * d..(id + 1) * d]);
        }
        let tape = Tensor::tape_of(&[self]);
        Ok(Tensor::record(
            vec![ids.len(), d],
            data,
            tape,
            Op::Embed {
                weight: self.clone(),
                ids: Rc::new(ids.to_vec()),
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Per-node gradients from one [`backward`] call, queryable by tensor.
pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, if `t` was reachable.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f32]> {
        let node = t.node.as_ref()?;
        if !self.tape.same_tape(&node.tape) {
            return None;
        }
        self.grads.get(node.index)?.as_deref()
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, len: usize, f: impl FnOnce(&mut [f32])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn add_into(slot: &mut Option<Vec<f32>>, src: &[f32]) {
    accumulate(slot, src.len(), |buf| {
        for (d, s) in buf.iter_mut().zip(src) {
            *d += s;
        }
    });
}

/// Accumulates `d loss/d param` into every parameter reachable from `loss`,
/// respecting detach boundaries, and returns intermediate gradients.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    let node = loss.node.as_ref().ok_or(TensorError::BackwardDetached)?;
    if loss.numel() != 1 {
        return Err(TensorError::BackwardNonScalar {
            shape: loss.shape.clone(),
        });
    }
    let tape = node.tape.clone();
    let loss_idx = node.index;
    let nodes = tape.inner.borrow();

    // Reachable set: inputs always have smaller indices than outputs.
    let mut reachable = HashSet::new();
    let mut stack = vec![loss_idx];
    while let Some(i) = stack.pop() {
        if !reachable.insert(i) {
            continue;
        }
        let mut inputs = Vec::new();
        nodes[i].op.input_nodes(&mut inputs);
        stack.extend(inputs);
    }

    let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
    grads.resize_with(loss_idx + 1, || None);
    grads[loss_idx] = Some(vec![1.0]);

    for i in (0..=loss_idx).rev() {
        if !reachable.contains(&i) {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        backprop_node(&nodes[i].op, &g, &mut grads);
        grads[i] = Some(g);
    }
    drop(nodes);
    Ok(Gradients { tape, grads })
}

fn slot_of<'a>(grads: &'a mut [Option<Vec<f32>>], t: &Tensor) -> Option<&'a mut Option<Vec<f32>>> {
    t.node.as_ref().map(|n| &mut grads[n.index])
}

fn backprop_node(op: &Op, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    match op {
        Op::Leaf { param } => {
            let mut grad = param.grad.borrow_mut();
            for (dst, src) in grad.iter_mut().zip(g) {
                *dst += src;
            }
        }
        Op::Add { a, b } => {
            if let Some(slot) = slot_of(grads, a) {
                add_into(slot, g);
            }
            if let Some(slot) = slot_of(grads, b) {
                add_into(slot, g);
            }
        }
        Op::AddBias { a, b } => {
            if let Some(slot) = slot_of(grads, a) {
                add_into(slot, g);
            }
            if let Some(slot) = slot_of(grads, b) {
                let bn = b.numel();
                accumulate(slot, bn, |buf| {
                    for (i, gv) in g.iter().enumerate() {
                        buf[i % bn] += gv;
                    }
                });
            }
        }
        Op::Mul { a, b } => {
            if let Some(slot) = slot_of(grads, a) {
                accumulate(slot, a.numel(), |buf| {
                    for ((d, gv), bv) in buf.iter_mut().zip(g).zip(b.data()) {
                        *d += gv * bv;
                    }
                });
            }
            if let Some(slot) = slot_of(grads, b) {
                accumulate(slot, b.numel(), |buf| {
                    for ((d, gv), av) in buf.iter_mut().zip(g).zip(a.data()) {
                        *d += gv * av;
                    }
                });
            }
        }
        Op::Scale { a, c } => {
            if let Some(slot) = slot_of(grads, a) {
                accumulate(slot, a.numel(), |buf| {
                    for (d, gv) in buf.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                });
            }
        }
        Op::AddConst { a } => {
            if let Some(slot) = slot_of(grads, a) {
                add_into(slot, g);
            }
        }
        Op::MulConst { a, mask } => {
            if let Some(slot) = slot_of(grads, a) {
                accumulate(slot, a.numel(), |buf| {
                    for ((d, gv), mv) in buf.iter_mut().zip(g).zip(mask.iter()) {
                        *d += gv * mv;
                    }
                });
            }
        }
        Op::Matmul { a, b } => {
            let (ba, m, k) = split_matrix_shape(&a.shape);
            let (_, _, n) = split_matrix_shape(&b.shape);
            let shared_b = b.rank() == 2;
            if let Some(slot) = slot_of(grads, a) {
                accumulate(slot, a.numel(), |buf| {
                    for bi in 0..ba {
                        let b_off = if shared_b { 0 } else { bi * k * n };
                        matmul_g_bt_into(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &b.data()[b_off..b_off + k * n],
                            m,
                            k,
                            n,
                            &mut buf[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                });
            }
            if let Some(slot) = slot_of(grads, b) {
                accumulate(slot, b.numel(), |buf| {
                    for bi in 0..ba {
                        let b_off = if shared_b { 0 } else { bi * k * n };
                        matmul_at_g_into(
                            &a.data()[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut buf[b_off..b_off + k * n],
                        );
                    }
                });
            }
        }
        Op::Permute { a, axes } => {
            if let Some(slot) = slot_of(grads, a) {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let out_shape: Vec<usize> = axes.iter().map(|&ax| a.shape[ax]).collect();
                let (_, gperm) = permute_data(g, &out_shape, &inverse);
                add_into(slot, &gperm);
            }
        }
        Op::Reshape { a } => {
            if let Some(slot) = slot_of(grads, a) {
                add_into(slot, g);
            }
        }
        Op::Softmax { a, out, axis } => {
            if let Some(slot) = slot_of(grads, a) {
                let extent = a.shape[*axis];
                let inner: usize = a.shape[*axis + 1..].iter().product();
                let outer: usize = a.shape[..*axis].iter().product();
                let s = &out.data;
                accumulate(slot, a.numel(), |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * extent * inner + i;
                            let mut dot = 0.0f32;
                            for e in 0..extent {
                                let p = base + e * inner;
                                dot += g[p] * s[p];
                            }
                            for e in 0..extent {
                                let p = base + e * inner;
                                buf[p] += s[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
        }
        Op::LogSoftmax { a, out } => {
            if let Some(slot) = slot_of(grads, a) {
                let cols = a.shape[1];
                let rows = a.shape[0];
                accumulate(slot, a.numel(), |buf| {
                    for r in 0..rows {
                        let gs: f32 = g[r * cols..(r + 1) * cols].iter().sum();
                        for c in 0..cols {
                            let p = r * cols + c;
                            buf[p] += g[p] - out.data[p].exp() * gs;
                        }
                    }
                });
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let d = *x.shape.last().unwrap();
            let rows = x.numel() / d;
            let xd = x.data();
            let gm = gamma.data();
            if let Some(slot) = slot_of(grads, x) {
                accumulate(slot, x.numel(), |buf| {
                    for r in 0..rows {
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut sum_dxhat = 0.0f32;
                        let mut sum_dxhat_xhat = 0.0f32;
                        for c in 0..d {
                            let p = r * d + c;
                            let xhat = (xd[p] - mu) * rs;
                            let dxhat = g[p] * gm[c];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let nd = d as f32;
                        for c in 0..d {
                            let p = r * d + c;
                            let xhat = (xd[p] - mu) * rs;
                            let dxhat = g[p] * gm[c];
                            buf[p] += rs * (dxhat - sum_dxhat / nd - xhat * sum_dxhat_xhat / nd);
                        }
                    }
                });
            }
            if let Some(slot) = slot_of(grads, gamma) {
                accumulate(slot, d, |buf| {
                    for r in 0..rows {
                        for c in 0..d {
                            let p = r * d + c;
                            buf[c] += g[p] * (xd[p] - mean[r]) * rstd[r];
                        }
                    }
                });
            }
            if let Some(slot) = slot_of(grads, beta) {
                accumulate(slot, d, |buf| {
                    for r in 0..rows {
                        for c in 0..d {
                            buf[c] += g[r * d + c];
                        }
                    }
                });
            }
        }
        Op::Relu { a } => {
            if let Some(slot) = slot_of(grads, a) {
                accumulate(slot, a.numel(), |buf| {
                    for ((d, gv), av) in buf.iter_mut().zip(g).zip(a.data()) {
                        if *av > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
        }
        Op::Sum { a } => {
            if let Some(slot) = slot_of(grads, a) {
                accumulate(slot, a.numel(), |buf| {
                    for d in buf.iter_mut() {
                        *d += g[0];
                    }
                });
            }
        }
        Op::Pick { a, idx } => {
            if let Some(slot) = slot_of(grads, a) {
                let cols = a.shape[1];
                accumulate(slot, a.numel(), |buf| {
                    for (i, &j) in idx.iter().enumerate() {
                        buf[i * cols + j] += g[i];
                    }
                });
            }
        }
        Op::Embed { weight, ids } => {
            if let Some(slot) = slot_of(grads, weight) {
                let d = weight.shape[1];
                accumulate(slot, weight.numel(), |buf| {
                    for (i, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            buf[id * d + c] += g[i * d + c];
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn param_from(rng: &mut ChaCha8Rng, name: &str, shape: Vec<usize>) -> Param {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Param::new(name, shape, data)
    }

    #[test]
    fn matmul_identity() {
        let i = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = i.matmul(&b).unwrap();
        assert_eq!(c.data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ta = Tensor::from_vec(vec![3, 4], a.clone()).unwrap();
        let tb = Tensor::from_vec(vec![4, 2], b.clone()).unwrap();
        let c = ta.matmul(&tb).unwrap();
        // independent naive oracle
        let mut expect = vec![0.0f32; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a[i * 4 + p] * b[p * 2 + j];
                }
                expect[i * 2 + j] = s;
            }
        }
        for (got, want) in c.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let t = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-6);

        for c in [-3.0f32, 0.0, 2.5] {
            let t = Tensor::from_vec(vec![2], vec![c, c + 3f32.ln()]).unwrap();
            let s = t.softmax(0).unwrap();
            assert!((s.data()[0] - 0.25).abs() < 1e-6);
            assert!((s.data()[1] - 0.75).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let t = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = t.softmax(0).unwrap();
        let expect = [0.09003057f32, 0.24472847, 0.66524096];
        for (got, want) in s.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_mid_axis() {
        let t = Tensor::from_vec(vec![2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let s = t.softmax(1).unwrap();
        // lanes along axis 1: (0,2), (1,3), (4,6), (5,7)
        for o in 0..2 {
            for i in 0..2 {
                let lo = s.data()[o * 4 + i];
                let hi = s.data()[o * 4 + 2 + i];
                assert!((lo + hi - 1.0).abs() < 1e-6);
                assert!(hi > lo);
            }
        }
    }

    #[test]
    fn layer_norm_limits() {
        let gamma = Tensor::from_vec(vec![3], vec![1.0; 3]).unwrap();
        let beta = Tensor::from_vec(vec![3], vec![0.0; 3]).unwrap();
        let constant = Tensor::from_vec(vec![3], vec![4.0; 3]).unwrap();
        let out = constant.layer_norm(&gamma, &beta, 1e-5).unwrap();
        for v in out.data() {
            assert!(v.abs() < 1e-3);
        }

        let g2 = Tensor::from_vec(vec![2], vec![1.0; 2]).unwrap();
        let b2 = Tensor::from_vec(vec![2], vec![0.0; 2]).unwrap();
        let x = Tensor::from_vec(vec![2], vec![1.0, 3.0]).unwrap();
        let out = x.layer_norm(&g2, &b2, 1e-12).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-4);
        assert!((out.data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 64;
        let x = Tensor::from_vec(
            vec![d],
            (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let gamma = Tensor::from_vec(vec![d], vec![1.0; d]).unwrap();
        let beta = Tensor::from_vec(vec![d], vec![0.0; d]).unwrap();
        let out = x.layer_norm(&gamma, &beta, 1e-5).unwrap();
        let mean: f32 = out.data().iter().sum::<f32>() / d as f32;
        let var: f32 = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        assert!(mean.abs() < 1e-4);
        assert!((var - 1.0).abs() < 1e-2);
    }

    #[test]
    fn layer_norm_rejects_bad_eps() {
        let x = Tensor::zeros(vec![2]);
        let g = Tensor::from_vec(vec![2], vec![1.0; 2]).unwrap();
        let b = Tensor::zeros(vec![2]);
        assert!(matches!(
            x.layer_norm(&g, &b, 0.0),
            Err(TensorError::NonPositiveEps { .. })
        ));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let tape = Tape::new();
        let p = Param::new("x", vec![3], vec![1.0, -2.0, 0.5]);
        let x = p.on(Some(&tape));
        let loss = x.sum();
        backward(&loss).unwrap();
        assert_eq!(p.grad(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn detach_blocks_gradient_exactly() {
        let tape = Tape::new();
        let px = Param::new("x", vec![2], vec![1.0, 2.0]);
        let py = Param::new("y", vec![2], vec![3.0, 4.0]);
        let x = px.on(Some(&tape));
        let y = py.on(Some(&tape));
        let loss = x.detach().mul(&y).unwrap().sum();
        backward(&loss).unwrap();
        assert_eq!(px.grad(), vec![0.0, 0.0]);
        assert_eq!(py.grad(), vec![1.0, 2.0]);
    }

    #[test]
    fn detach_preserves_values_and_is_idempotent() {
        let t = Tensor::from_vec(vec![2], vec![1.5, -0.25]).unwrap();
        let d = t.detach();
        assert_eq!(t.data(), d.data());
        let dd = d.detach();
        assert_eq!(d.data(), dd.data());
        assert!(!dd.is_tracked());
    }

    #[test]
    fn backward_rejects_detached_and_non_scalar() {
        let t = Tensor::from_vec(vec![1], vec![2.0]).unwrap();
        assert!(matches!(backward(&t), Err(TensorError::BackwardDetached)));

        let tape = Tape::new();
        let p = Param::new("x", vec![2], vec![1.0, 2.0]);
        let x = p.on(Some(&tape));
        assert!(matches!(
            backward(&x),
            Err(TensorError::BackwardNonScalar { .. })
        ));
    }

    /// Independent f64 reference of the test network (matmul, bias, relu,
    /// layer norm, softmax, square, sum) for finite differencing. f32
    /// central differences sit above the 1e-3 tolerance, so the oracle runs
    /// in f64.
    struct RefMlp {
        x: Vec<f64>,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        gamma: Vec<f64>,
        beta: Vec<f64>,
    }

    impl RefMlp {
        fn forward(&self) -> f64 {
            let (rows, d_in, d_h, d_out) = (2usize, 4usize, 5usize, 3usize);
            let mut h1 = vec![0.0f64; rows * d_h];
            for r in 0..rows {
                for c in 0..d_h {
                    let mut s = self.b1[c];
                    for i in 0..d_in {
                        s += self.x[r * d_in + i] * self.w1[i * d_h + c];
                    }
                    h1[r * d_h + c] = s.max(0.0);
                }
            }
            let mut h2 = vec![0.0f64; rows * d_out];
            for r in 0..rows {
                for c in 0..d_out {
                    let mut s = 0.0;
                    for i in 0..d_h {
                        s += h1[r * d_h + i] * self.w2[i * d_out + c];
                    }
                    h2[r * d_out + c] = s;
                }
            }
            let mut total = 0.0f64;
            for r in 0..rows {
                let row = &h2[r * d_out..(r + 1) * d_out];
                let mean = row.iter().sum::<f64>() / d_out as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d_out as f64;
                let rstd = 1.0 / (var + 1e-5).sqrt();
                let normed: Vec<f64> = row
                    .iter()
                    .enumerate()
                    .map(|(c, v)| (v - mean) * rstd * self.gamma[c] + self.beta[c])
                    .collect();
                let mx = normed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = normed.iter().map(|v| (v - mx).exp()).sum();
                for v in &normed {
                    let s = (v - mx).exp() / denom;
                    total += s * s;
                }
            }
            total
        }

        fn slot(&mut self, which: usize) -> &mut Vec<f64> {
            match which {
                0 => &mut self.w1,
                1 => &mut self.b1,
                2 => &mut self.w2,
                3 => &mut self.gamma,
                _ => &mut self.beta,
            }
        }
    }

    /// Central finite differences (f64 reference, eps 1e-3) against the
    /// analytic gradients for a randomized two-layer MLP.
    #[test]
    fn finite_difference_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let w1 = param_from(&mut rng, "w1", vec![4, 5]);
            let b1 = param_from(&mut rng, "b1", vec![5]);
            let w2 = param_from(&mut rng, "w2", vec![5, 3]);
            let gamma = Param::new("g", vec![3], vec![1.0, 0.9, 1.1]);
            let beta = Param::new("b", vec![3], vec![0.0, 0.1, -0.1]);
            let x = Tensor::from_vec(vec![2, 4], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();

            let tape = Tape::new();
            let h = x
                .matmul(&w1.on(Some(&tape)))
                .unwrap()
                .add_bias(&b1.on(Some(&tape)))
                .unwrap()
                .relu()
                .matmul(&w2.on(Some(&tape)))
                .unwrap()
                .layer_norm(&gamma.on(Some(&tape)), &beta.on(Some(&tape)), 1e-5)
                .unwrap()
                .softmax(1)
                .unwrap();
            let loss = h.mul(&h).unwrap().sum();
            backward(&loss).unwrap();

            let to64 = |p: &Param| p.value().iter().map(|&v| v as f64).collect::<Vec<f64>>();
            let mut reference = RefMlp {
                x: x.data().iter().map(|&v| v as f64).collect(),
                w1: to64(&w1),
                b1: to64(&b1),
                w2: to64(&w2),
                gamma: to64(&gamma),
                beta: to64(&beta),
            };

            let eps = 1e-3f64;
            for (slot, p) in [&w1, &b1, &w2, &gamma, &beta].iter().enumerate() {
                let analytic = p.grad();
                for i in 0..p.numel() {
                    let orig = reference.slot(slot)[i];
                    reference.slot(slot)[i] = orig + eps;
                    let fp = reference.forward();
                    reference.slot(slot)[i] = orig - eps;
                    let fm = reference.forward();
                    reference.slot(slot)[i] = orig;
                    let numeric = (fp - fm) / (2.0 * eps);
                    let a = analytic[i] as f64;
                    if a.abs() < 1e-6 && numeric.abs() < 1e-6 {
                        continue;
                    }
                    let rel = (numeric - a).abs() / numeric.abs().max(a.abs());
                    assert!(
                        rel < 1e-3,
                        "param {} index {i}: analytic {a} vs numeric {numeric} (rel {rel})",
                        p.name()
                    );
                }
                p.zero_grad();
            }
        }
    }

    #[test]
    fn gradients_wrt_intermediate() {
        let tape = Tape::new();
        let p = Param::new("x", vec![2], vec![2.0, 3.0]);
        let x = p.on(Some(&tape));
        let y = x.scale(2.0);
        let loss = y.sum();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.wrt(&y).unwrap(), &[1.0, 1.0]);
        assert_eq!(p.grad(), vec![2.0, 2.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::from_vec(vec![2, 3, 4], (0..24).map(|v| v as f32).collect()).unwrap();
        let p = t.permute(&[1, 0, 2]).unwrap();
        assert_eq!(p.shape(), &[3, 2, 4]);
        let back = p.permute(&[1, 0, 2]).unwrap();
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn live_value_accounting_tracks_drops() {
        let before = live_values();
        let t = Tensor::zeros(vec![10, 10]);
        assert_eq!(live_values(), before + 100);
        drop(t);
        assert_eq!(live_values(), before);
    }
}
