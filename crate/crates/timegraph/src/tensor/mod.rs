//! Dense 64-bit tensors with reverse-mode automatic differentiation.
//!
//! Tensors are row-major `f64` buffers with an optional handle into the
//! active [`Tape`]. Operations on detached tensors just compute values;
//! as soon as any operand is tape-attached the result is recorded, and
//! [`Tape::backward`] later yields gradients for everything the loss
//! touched. Everything is 64-bit: finite-difference verification at the
//! tolerances used here is not trustworthy in single precision.

mod gradcheck;
mod rng;
mod tape;

pub use gradcheck::grad_check;
pub use rng::{RngState, SeededRng};
pub use tape::{Gradients, Tape};

use std::rc::Rc;

use crate::error::{Error, Result};
use tape::{strides, OpKind, Record};

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Rc<Vec<f64>>,
    /// Present when the tensor is a node on a live tape.
    pub(crate) node: Option<(Tape, usize)>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("attached", &self.node.is_some())
            .finish()
    }
}

// ---------------------------------------------------------------------
// Construction and accessors
// ---------------------------------------------------------------------

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("{numel} elements for shape {shape:?}"),
                format!("{}", data.len()),
            ));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dim("tensor", "positive extents", format!("{shape:?}")));
        }
        Ok(Self::from_parts(shape, data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor {
            shape,
            data: Rc::new(data),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; numel])
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![1.0; numel])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; numel])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_parts(vec![n], data)
    }

    /// Seeded uniform entries in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform_in(lo, hi)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    /// Seeded standard-normal entries, optionally scaled.
    pub fn normal(shape: &[usize], scale: f64, rng: &mut SeededRng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.normal() * scale).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let s = strides(&self.shape);
        let flat: usize = idx.iter().zip(s.iter()).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// A copy that no longer participates in gradient recording.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Replaces the data buffer in place (parameter updates). Panics if
    /// the tensor is attached to a tape; updates happen between steps.
    pub fn set_data(&mut self, data: Vec<f64>) {
        assert!(self.node.is_none(), "cannot mutate a tape-attached tensor");
        assert_eq!(data.len(), self.numel());
        self.data = Rc::new(data);
    }
}

// ---------------------------------------------------------------------
// Recording plumbing
// ---------------------------------------------------------------------

/// Finds the tape shared by the attached operands, erroring on mixed
/// tapes. `None` means the whole expression is detached.
fn active_tape(inputs: &[&Tensor]) -> Result<Option<Tape>> {
    let mut found: Option<Tape> = None;
    for t in inputs {
        if let Some((tape, _)) = &t.node {
            match &found {
                None => found = Some(tape.clone()),
                Some(existing) if existing.same_tape(tape) => {}
                Some(_) => {
                    return Err(Error::Contract(
                        "operands live on different tapes".into(),
                    ))
                }
            }
        }
    }
    Ok(found)
}

fn record(inputs: &[&Tensor], shape: Vec<usize>, data: Vec<f64>, kind: OpKind) -> Result<Tensor> {
    let data = Rc::new(data);
    match active_tape(inputs)? {
        None => Ok(Tensor {
            shape,
            data,
            node: None,
        }),
        Some(tape) => {
            let ids: Vec<usize> = inputs
                .iter()
                .map(|t| match &t.node {
                    Some((_, id)) => *id,
                    None => tape.push(t.shape.clone(), t.data.clone(), None),
                })
                .collect();
            let id = tape.push(shape.clone(), data.clone(), Some(Record { kind, inputs: ids }));
            Ok(Tensor {
                shape,
                data,
                node: Some((tape, id)),
            })
        }
    }
}

fn binary_shapes<'a>(op: &'static str, a: &'a Tensor, b: &'a Tensor) -> Result<&'a [usize]> {
    if a.shape == b.shape {
        return Ok(&a.shape);
    }
    if a.numel() == 1 {
        return Ok(&b.shape);
    }
    if b.numel() == 1 {
        return Ok(&a.shape);
    }
    Err(Error::dim(
        op,
        format!("{:?} (or scalar)", a.shape),
        format!("{:?}", b.shape),
    ))
}

fn ew(a: &Tensor, b: &Tensor, i: usize) -> (f64, f64) {
    let av = if a.data.len() == 1 { a.data[0] } else { a.data[i] };
    let bv = if b.data.len() == 1 { b.data[0] } else { b.data[i] };
    (av, bv)
}

// ---------------------------------------------------------------------
// Operation catalog
// ---------------------------------------------------------------------

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shapes("add", self, other)?.to_vec();
        let n = shape.iter().product();
        let data = (0..n).map(|i| {
            let (a, b) = ew(self, other, i);
            a + b
        });
        record(&[self, other], shape.clone(), data.collect(), OpKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shapes("sub", self, other)?.to_vec();
        let n = shape.iter().product();
        let data = (0..n).map(|i| {
            let (a, b) = ew(self, other, i);
            a - b
        });
        record(&[self, other], shape.clone(), data.collect(), OpKind::Sub)
    }

    /// Elementwise (Hadamard) product; either operand may be scalar.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shapes("mul", self, other)?.to_vec();
        let n = shape.iter().product();
        let data = (0..n).map(|i| {
            let (a, b) = ew(self, other, i);
            a * b
        });
        record(&[self, other], shape.clone(), data.collect(), OpKind::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shapes("div", self, other)?.to_vec();
        let n = shape.iter().product();
        let data = (0..n).map(|i| {
            let (a, b) = ew(self, other, i);
            a / b
        });
        record(&[self, other], shape.clone(), data.collect(), OpKind::Div)
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`, or matrix-vector
    /// `[m,k] x [k] -> [m]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = match self.shape[..] {
            [m, k] => (m, k),
            _ => {
                return Err(Error::dim("matmul", "rank-2 lhs", format!("{:?}", self.shape)));
            }
        };
        let (k2, n, vec_rhs) = match other.shape[..] {
            [k2, n] => (k2, n, false),
            [k2] => (k2, 1, true),
            _ => {
                return Err(Error::dim(
                    "matmul",
                    "rank-1 or rank-2 rhs",
                    format!("{:?}", other.shape),
                ));
            }
        };
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimension {k}"),
                format!("{k2}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += a * other.data[p * n + j];
                }
            }
        }
        let shape = if vec_rhs { vec![m] } else { vec![m, n] };
        record(&[self, other], shape, out, OpKind::MatMul)
    }

    /// Outer product of two vectors: `[m] x [n] -> [m,n]`.
    pub fn outer(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 1 || other.shape.len() != 1 {
            return Err(Error::dim(
                "outer",
                "two rank-1 tensors",
                format!("{:?}, {:?}", self.shape, other.shape),
            ));
        }
        let (m, n) = (self.shape[0], other.shape[0]);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(self.data[i] * other.data[j]);
            }
        }
        record(&[self, other], vec![m, n], out, OpKind::Outer)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = match self.shape[..] {
            [m, n] => (m, n),
            _ => {
                return Err(Error::dim(
                    "transpose",
                    "rank-2 tensor",
                    format!("{:?}", self.shape),
                ));
            }
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        record(&[self], vec![n, m], out, OpKind::Transpose)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data = self
            .data
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        record(&[self], self.shape.clone(), data, OpKind::Sigmoid)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|x| x.tanh()).collect();
        record(&[self], self.shape.clone(), data, OpKind::Tanh)
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|x| x.exp()).collect();
        record(&[self], self.shape.clone(), data, OpKind::Exp)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.data.iter().find(|&&x| x <= 0.0) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        let data = self.data.iter().map(|x| x.ln()).collect();
        record(&[self], self.shape.clone(), data, OpKind::Log)
    }

    /// Elementwise power with a constant exponent.
    pub fn powf(&self, c: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|x| x.powf(c)).collect();
        record(&[self], self.shape.clone(), data, OpKind::PowConst(c))
    }

    /// Clamps values to `[lo, hi]`. Gradient passes through inside the
    /// range and is zero outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|x| x.clamp(lo, hi)).collect();
        record(&[self], self.shape.clone(), data, OpKind::Clamp(lo, hi))
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|x| x * c).collect();
        record(&[self], self.shape.clone(), data, OpKind::Scale(c))
    }

    pub fn add_const(&self, c: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|x| x + c).collect();
        record(&[self], self.shape.clone(), data, OpKind::AddConst(c))
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    /// Sum of all entries, as a scalar tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data.iter().sum();
        record(&[self], vec![], vec![s], OpKind::Sum)
    }

    pub fn mean(&self) -> Result<Tensor> {
        let s: f64 = self.data.iter().sum();
        record(&[self], vec![], vec![s / self.numel() as f64], OpKind::Mean)
    }

    /// Euclidean (Frobenius) norm of all entries, as a scalar tensor.
    pub fn l2_norm(&self) -> Result<Tensor> {
        let s: f64 = self.data.iter().map(|x| x * x).sum();
        record(&[self], vec![], vec![s.sqrt()], OpKind::L2Norm)
    }

    /// Concatenates tensors along the last axis. All other extents must
    /// agree.
    pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_last of zero tensors".into()));
        }
        let lead = &parts[0].shape[..parts[0].shape.len() - 1];
        for p in parts {
            if p.shape.is_empty() || &p.shape[..p.shape.len() - 1] != lead {
                return Err(Error::dim(
                    "concat_last",
                    format!("leading dims {lead:?}"),
                    format!("{:?}", p.shape),
                ));
            }
        }
        let last: usize = parts.iter().map(|p| *p.shape.last().unwrap()).sum();
        let rows: usize = lead.iter().product();
        let mut shape = lead.to_vec();
        shape.push(last);
        let mut data = Vec::with_capacity(rows * last);
        for r in 0..rows {
            for p in parts {
                let l = *p.shape.last().unwrap();
                data.extend_from_slice(&p.data[r * l..(r + 1) * l]);
            }
        }
        record(parts, shape, data, OpKind::ConcatLast)
    }

    /// Extracts row `i` of a matrix as a vector.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let (m, n) = match self.shape[..] {
            [m, n] => (m, n),
            _ => return Err(Error::dim("row", "rank-2 tensor", format!("{:?}", self.shape))),
        };
        if i >= m {
            return Err(Error::Contract(format!("row {i} out of {m}")));
        }
        let data = self.data[i * n..(i + 1) * n].to_vec();
        record(&[self], vec![n], data, OpKind::Row(i))
    }

    /// Reorders axes: `out.shape[d] = in.shape[perm[d]]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&d| d >= rank || std::mem::replace(&mut seen[d], true)) {
            return Err(Error::Contract(format!(
                "invalid axis permutation {perm:?} for rank {rank}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&d| self.shape[d]).collect();
        let in_strides = strides(&self.shape);
        let out_strides = strides(&out_shape);
        let mut data = vec![0.0; self.numel()];
        let mut idx = vec![0usize; rank];
        for flat_in in 0..self.numel() {
            let mut rem = flat_in;
            for (d, s) in in_strides.iter().enumerate() {
                idx[d] = rem / s;
                rem %= s;
            }
            let mut flat_out = 0;
            for (d_out, &d_in) in perm.iter().enumerate() {
                flat_out += idx[d_in] * out_strides[d_out];
            }
            data[flat_out] = self.data[flat_in];
        }
        record(&[self], out_shape, data, OpKind::Permute(perm.to_vec()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::dim(
                "reshape",
                format!("{} elements", self.numel()),
                format!("{shape:?}"),
            ));
        }
        record(
            &[self],
            shape.to_vec(),
            self.data.as_ref().clone(),
            OpKind::Reshape,
        )
    }

    pub fn flatten(&self) -> Result<Tensor> {
        self.reshape(&[self.numel()])
    }

    /// Elementwise product with a constant mask (dropout, top-k
    /// sparsification). The mask is baked into the record: gradients
    /// flow only through retained entries.
    pub fn apply_mask(&self, mask: &[f64]) -> Result<Tensor> {
        if mask.len() != self.numel() {
            return Err(Error::dim(
                "apply_mask",
                format!("{} mask entries", self.numel()),
                format!("{}", mask.len()),
            ));
        }
        let data = self.data.iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        record(
            &[self],
            self.shape.clone(),
            data,
            OpKind::ApplyMask(Rc::new(mask.to_vec())),
        )
    }

    /// Valid-mode 2-D cross-correlation. Input `[C_in, H, W]`, kernel
    /// `[C_out, C_in, KH, KW]`, output `[C_out, H-KH+1, W-KW+1]`:
    ///
    /// `y[o,i,j] = sum_{c,p,q} x[c, i+p, j+q] * w[o, c, p, q]`
    pub fn cross_correlate2d(&self, kernel: &Tensor) -> Result<Tensor> {
        let (c_in, h, w_dim) = match self.shape[..] {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::dim(
                    "cross_correlate2d",
                    "rank-3 input [C_in, H, W]",
                    format!("{:?}", self.shape),
                ));
            }
        };
        let (c_out, c_in2, kh, kw) = match kernel.shape[..] {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => {
                return Err(Error::dim(
                    "cross_correlate2d",
                    "rank-4 kernel [C_out, C_in, KH, KW]",
                    format!("{:?}", kernel.shape),
                ));
            }
        };
        if c_in != c_in2 {
            return Err(Error::dim(
                "cross_correlate2d",
                format!("{c_in} input channels"),
                format!("{c_in2}"),
            ));
        }
        if kh > h || kw > w_dim {
            return Err(Error::dim(
                "cross_correlate2d",
                format!("kernel within input {h}x{w_dim}"),
                format!("{kh}x{kw}"),
            ));
        }
        let (oh, ow) = (h - kh + 1, w_dim - kw + 1);
        let mut out = vec![0.0; c_out * oh * ow];
        for o in 0..c_out {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for p in 0..kh {
                            for q in 0..kw {
                                acc += self.data[(c * h + i + p) * w_dim + j + q]
                                    * kernel.data[((o * c_in + c) * kh + p) * kw + q];
                            }
                        }
                    }
                    out[(o * oh + i) * ow + j] = acc;
                }
            }
        }
        record(
            &[self, kernel],
            vec![c_out, oh, ow],
            out,
            OpKind::CrossCorrelate2d,
        )
    }
}

// ---------------------------------------------------------------------
// Uniform dispatch over the op catalog
// ---------------------------------------------------------------------

/// Named forward operations, for catalog-wide iteration (gradient
/// verification sweeps the whole enum).
#[derive(Debug, Clone)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Outer,
    Transpose,
    ConcatLast,
    Sigmoid,
    Tanh,
    Log,
    Exp,
    PowConst(f64),
    Clamp(f64, f64),
    Scale(f64),
    Sum,
    Mean,
    L2Norm,
    Row(usize),
    Permute(Vec<usize>),
    Flatten,
    /// Second input is the (constant) mask.
    ApplyMask,
    CrossCorrelate2d,
}

/// Applies a catalog operation to its inputs.
pub fn forward_op(kind: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let need = |n: usize| -> Result<()> {
        if inputs.len() != n {
            return Err(Error::Contract(format!(
                "{kind:?} takes {n} inputs, got {}",
                inputs.len()
            )));
        }
        Ok(())
    };
    match kind {
        Op::Add => {
            need(2)?;
            inputs[0].add(inputs[1])
        }
        Op::Sub => {
            need(2)?;
            inputs[0].sub(inputs[1])
        }
        Op::Mul => {
            need(2)?;
            inputs[0].mul(inputs[1])
        }
        Op::Div => {
            need(2)?;
            inputs[0].div(inputs[1])
        }
        Op::MatMul => {
            need(2)?;
            inputs[0].matmul(inputs[1])
        }
        Op::Outer => {
            need(2)?;
            inputs[0].outer(inputs[1])
        }
        Op::Transpose => {
            need(1)?;
            inputs[0].transpose()
        }
        Op::ConcatLast => Tensor::concat_last(inputs),
        Op::Sigmoid => {
            need(1)?;
            inputs[0].sigmoid()
        }
        Op::Tanh => {
            need(1)?;
            inputs[0].tanh()
        }
        Op::Log => {
            need(1)?;
            inputs[0].log()
        }
        Op::Exp => {
            need(1)?;
            inputs[0].exp()
        }
        Op::PowConst(c) => {
            need(1)?;
            inputs[0].powf(*c)
        }
        Op::Clamp(lo, hi) => {
            need(1)?;
            inputs[0].clamp(*lo, *hi)
        }
        Op::Scale(c) => {
            need(1)?;
            inputs[0].scale(*c)
        }
        Op::Sum => {
            need(1)?;
            inputs[0].sum()
        }
        Op::Mean => {
            need(1)?;
            inputs[0].mean()
        }
        Op::L2Norm => {
            need(1)?;
            inputs[0].l2_norm()
        }
        Op::Row(i) => {
            need(1)?;
            inputs[0].row(*i)
        }
        Op::Permute(perm) => {
            need(1)?;
            inputs[0].permute(perm)
        }
        Op::Flatten => {
            need(1)?;
            inputs[0].flatten()
        }
        Op::ApplyMask => {
            need(2)?;
            inputs[0].apply_mask(inputs[1].data())
        }
        Op::CrossCorrelate2d => {
            need(2)?;
            inputs[0].cross_correlate2d(inputs[1])
        }
    }
}
