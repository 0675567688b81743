//! Operation recording and reverse-mode gradient propagation.
//!
//! A [`Tape`] records every tensor operation whose inputs touch it, in
//! execution order. [`Tape::backward`] walks the records once, in
//! reverse, accumulating vector-Jacobian products into per-node gradient
//! buffers. Nodes are topologically ordered by construction, so a single
//! reverse sweep visits each record exactly once.

use std::cell::RefCell;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Recorded operation kinds, together with whatever constants the
/// backward rule needs (masks, exponents, axis permutations).
#[derive(Debug, Clone)]
pub(crate) enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Outer,
    Transpose,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    PowConst(f64),
    Clamp(f64, f64),
    Scale(f64),
    AddConst(#[allow(dead_code)] f64),
    Sum,
    Mean,
    L2Norm,
    ConcatLast,
    Row(usize),
    Permute(Vec<usize>),
    Reshape,
    ApplyMask(Rc<Vec<f64>>),
    CrossCorrelate2d,
}

pub(crate) struct Record {
    pub kind: OpKind,
    pub inputs: Vec<usize>,
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Rc<Vec<f64>>,
    pub record: Option<Record>,
}

pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
}

/// Shared, single-threaded recording context. Cloning a `Tape` clones
/// the handle, not the records.
#[derive(Clone)]
pub struct Tape {
    pub(crate) inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    pub(crate) fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        value: Rc<Vec<f64>>,
        record: Option<Record>,
    ) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape,
            value,
            record,
        });
        inner.nodes.len() - 1
    }

    /// Attaches a tensor to this tape as a leaf and returns the attached
    /// handle. A tensor already living on this tape is returned as-is.
    pub fn attach(&self, t: &Tensor) -> Tensor {
        if let Some((tape, id)) = &t.node {
            if self.same_tape(tape) {
                return Tensor {
                    shape: t.shape.clone(),
                    data: t.data.clone(),
                    node: Some((self.clone(), *id)),
                };
            }
        }
        let id = self.push(t.shape.clone(), t.data.clone(), None);
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            node: Some((self.clone(), id)),
        }
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// node on the tape; nodes the loss never touched read back as zero.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let loss_id = match &loss.node {
            Some((tape, id)) if self.same_tape(tape) => *id,
            Some(_) => return Err(Error::Contract("loss lives on a different tape".into())),
            None => return Err(Error::Contract("loss is not attached to the tape".into())),
        };
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                loss.shape
            )));
        }

        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); nodes.len()];
        grads[loss_id] = vec![1.0];

        for id in (0..=loss_id).rev() {
            if grads[id].is_empty() {
                continue;
            }
            let Some(record) = &nodes[id].record else {
                continue;
            };
            propagate(record, id, nodes, &mut grads);
        }

        Ok(Gradients {
            tape: self.clone(),
            grads,
        })
    }
}

/// Gradient buffers produced by one backward sweep.
pub struct Gradients {
    tape: Tape,
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, as a detached tensor.
    /// Tape-attached tensors the loss never touched get zeros.
    pub fn wrt(&self, t: &Tensor) -> Result<Tensor> {
        let Some((tape, id)) = &t.node else {
            return Err(Error::Contract(
                "gradient requested for a detached tensor".into(),
            ));
        };
        if !self.tape.same_tape(tape) {
            return Err(Error::Contract(
                "gradient requested for a tensor on a different tape".into(),
            ));
        }
        Ok(self.by_id(*id, &t.shape))
    }

    pub(crate) fn by_id(&self, id: usize, shape: &[usize]) -> Tensor {
        let buf = &self.grads[id];
        let data = if buf.is_empty() {
            vec![0.0; shape.iter().product()]
        } else {
            buf.clone()
        };
        Tensor::from_parts(shape.to_vec(), data)
    }
}

fn ensure(grads: &mut [Vec<f64>], id: usize, numel: usize) {
    if grads[id].is_empty() {
        grads[id] = vec![0.0; numel];
    }
}

/// Adds `contrib` into the gradient of input node `id`, collapsing to a
/// scalar sum when the input was a broadcast scalar.
fn add_into(grads: &mut [Vec<f64>], nodes: &[Node], id: usize, contrib: impl Iterator<Item = f64>) {
    let numel: usize = nodes[id].shape.iter().product();
    ensure(grads, id, numel);
    if numel == 1 {
        let total: f64 = contrib.sum();
        grads[id][0] += total;
    } else {
        for (slot, c) in grads[id].iter_mut().zip(contrib) {
            *slot += c;
        }
    }
}

#[allow(clippy::too_many_lines)]
fn propagate(record: &Record, out_id: usize, nodes: &[Node], grads: &mut Vec<Vec<f64>>) {
    let go = std::mem::take(&mut grads[out_id]);
    let out = &nodes[out_id];
    let ins = &record.inputs;
    let val = |id: usize| -> &[f64] { &nodes[id].value };
    // Broadcast-aware fetch for elementwise binary ops.
    let fetch = |id: usize, i: usize| -> f64 {
        let v = val(id);
        if v.len() == 1 {
            v[0]
        } else {
            v[i]
        }
    };

    match &record.kind {
        OpKind::Add => {
            add_into(grads, nodes, ins[0], go.iter().copied());
            add_into(grads, nodes, ins[1], go.iter().copied());
        }
        OpKind::Sub => {
            add_into(grads, nodes, ins[0], go.iter().copied());
            add_into(grads, nodes, ins[1], go.iter().map(|g| -g));
        }
        OpKind::Mul => {
            let (a, b) = (ins[0], ins[1]);
            add_into(
                grads,
                nodes,
                a,
                go.iter().enumerate().map(|(i, g)| g * fetch(b, i)),
            );
            add_into(
                grads,
                nodes,
                b,
                go.iter().enumerate().map(|(i, g)| g * fetch(a, i)),
            );
        }
        OpKind::Div => {
            let (a, b) = (ins[0], ins[1]);
            add_into(
                grads,
                nodes,
                a,
                go.iter().enumerate().map(|(i, g)| g / fetch(b, i)),
            );
            add_into(
                grads,
                nodes,
                b,
                go.iter().enumerate().map(|(i, g)| {
                    let bv = fetch(b, i);
                    -g * fetch(a, i) / (bv * bv)
                }),
            );
        }
        OpKind::MatMul => {
            let (a_id, b_id) = (ins[0], ins[1]);
            let (a, b) = (val(a_id), val(b_id));
            let (m, k) = (nodes[a_id].shape[0], nodes[a_id].shape[1]);
            let n = if nodes[b_id].shape.len() == 2 {
                nodes[b_id].shape[1]
            } else {
                1
            };
            let numel_a = m * k;
            let numel_b = k * n;
            ensure(grads, a_id, numel_a);
            ensure(grads, b_id, numel_b);
            // ga = go . b^T ; gb = a^T . go
            for i in 0..m {
                for j in 0..n {
                    let g = go[i * n + j];
                    if g == 0.0 {
                        continue;
                    }
                    for p in 0..k {
                        grads[a_id][i * k + p] += g * b[p * n + j];
                        grads[b_id][p * n + j] += g * a[i * k + p];
                    }
                }
            }
        }
        OpKind::Outer => {
            let (a_id, b_id) = (ins[0], ins[1]);
            let (a, b) = (val(a_id), val(b_id));
            let (m, n) = (a.len(), b.len());
            ensure(grads, a_id, m);
            ensure(grads, b_id, n);
            for i in 0..m {
                for j in 0..n {
                    let g = go[i * n + j];
                    grads[a_id][i] += g * b[j];
                    grads[b_id][j] += g * a[i];
                }
            }
        }
        OpKind::Transpose => {
            let a_id = ins[0];
            let (m, n) = (nodes[a_id].shape[0], nodes[a_id].shape[1]);
            ensure(grads, a_id, m * n);
            for i in 0..n {
                for j in 0..m {
                    grads[a_id][j * n + i] += go[i * m + j];
                }
            }
        }
        OpKind::Sigmoid => {
            let y = &out.value;
            add_into(
                grads,
                nodes,
                ins[0],
                go.iter().zip(y.iter()).map(|(g, y)| g * y * (1.0 - y)),
            );
        }
        OpKind::Tanh => {
            let y = &out.value;
            add_into(
                grads,
                nodes,
                ins[0],
                go.iter().zip(y.iter()).map(|(g, y)| g * (1.0 - y * y)),
            );
        }
        OpKind::Exp => {
            let y = &out.value;
            add_into(
                grads,
                nodes,
                ins[0],
                go.iter().zip(y.iter()).map(|(g, y)| g * y),
            );
        }
        OpKind::Log => {
            let x = val(ins[0]);
            add_into(
                grads,
                nodes,
                ins[0],
                go.iter().zip(x.iter()).map(|(g, x)| g / x),
            );
        }
        OpKind::PowConst(c) => {
            let x = val(ins[0]);
            let c = *c;
            add_into(
                grads,
                nodes,
                ins[0],
                go.iter()
                    .zip(x.iter())
                    .map(move |(g, x)| g * c * x.powf(c - 1.0)),
            );
        }
        OpKind::Clamp(lo, hi) => {
            let x = val(ins[0]);
            let (lo, hi) = (*lo, *hi);
            add_into(
                grads,
                nodes,
                ins[0],
                go.iter()
                    .zip(x.iter())
                    .map(move |(g, x)| if *x >= lo && *x <= hi { *g } else { 0.0 }),
            );
        }
        OpKind::Scale(c) => {
            let c = *c;
            add_into(grads, nodes, ins[0], go.iter().map(move |g| g * c));
        }
        OpKind::AddConst(_) => {
            add_into(grads, nodes, ins[0], go.iter().copied());
        }
        OpKind::Sum => {
            let numel: usize = nodes[ins[0]].shape.iter().product();
            let g = go[0];
            add_into(grads, nodes, ins[0], std::iter::repeat(g).take(numel));
        }
        OpKind::Mean => {
            let numel: usize = nodes[ins[0]].shape.iter().product();
            let g = go[0] / numel as f64;
            add_into(grads, nodes, ins[0], std::iter::repeat(g).take(numel));
        }
        OpKind::L2Norm => {
            let x = val(ins[0]);
            let norm = out.value[0];
            let g = go[0];
            // Gradient saturates to zero at the origin.
            add_into(
                grads,
                nodes,
                ins[0],
                x.iter()
                    .map(move |x| if norm > 0.0 { g * x / norm } else { 0.0 }),
            );
        }
        OpKind::ConcatLast => {
            let out_last = *out.shape.last().unwrap();
            let rows = out.value.len() / out_last;
            let mut offset = 0;
            for &in_id in ins {
                let in_last = *nodes[in_id].shape.last().unwrap();
                let numel = rows * in_last;
                ensure(grads, in_id, numel);
                for r in 0..rows {
                    for c in 0..in_last {
                        grads[in_id][r * in_last + c] += go[r * out_last + offset + c];
                    }
                }
                offset += in_last;
            }
        }
        OpKind::Row(i) => {
            let a_id = ins[0];
            let n = nodes[a_id].shape[1];
            ensure(grads, a_id, nodes[a_id].shape[0] * n);
            for c in 0..n {
                grads[a_id][i * n + c] += go[c];
            }
        }
        OpKind::Permute(perm) => {
            let a_id = ins[0];
            let in_shape = &nodes[a_id].shape;
            let numel: usize = in_shape.iter().product();
            ensure(grads, a_id, numel);
            let out_shape = &out.shape;
            let in_strides = strides(in_shape);
            let out_strides = strides(out_shape);
            let rank = in_shape.len();
            let mut idx = vec![0usize; rank];
            for flat_in in 0..numel {
                // Multi-index of the input element, then its destination.
                let mut rem = flat_in;
                for (d, s) in in_strides.iter().enumerate() {
                    idx[d] = rem / s;
                    rem %= s;
                }
                let mut flat_out = 0;
                for (d_out, &d_in) in perm.iter().enumerate() {
                    flat_out += idx[d_in] * out_strides[d_out];
                }
                grads[a_id][flat_in] += go[flat_out];
            }
        }
        OpKind::Reshape => {
            add_into(grads, nodes, ins[0], go.iter().copied());
        }
        OpKind::ApplyMask(mask) => {
            add_into(
                grads,
                nodes,
                ins[0],
                go.iter().zip(mask.iter()).map(|(g, m)| g * m),
            );
        }
        OpKind::CrossCorrelate2d => {
            let (x_id, w_id) = (ins[0], ins[1]);
            let x_shape = nodes[x_id].shape.clone();
            let w_shape = nodes[w_id].shape.clone();
            let (c_in, h, w_dim) = (x_shape[0], x_shape[1], x_shape[2]);
            let (c_out, _, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
            let (oh, ow) = (h - kh + 1, w_dim - kw + 1);
            ensure(grads, x_id, c_in * h * w_dim);
            ensure(grads, w_id, c_out * c_in * kh * kw);
            let x = nodes[x_id].value.clone();
            let w = nodes[w_id].value.clone();
            for o in 0..c_out {
                for i in 0..oh {
                    for j in 0..ow {
                        let g = go[(o * oh + i) * ow + j];
                        if g == 0.0 {
                            continue;
                        }
                        for c in 0..c_in {
                            for p in 0..kh {
                                for q in 0..kw {
                                    let xi = (c * h + i + p) * w_dim + j + q;
                                    let wi = ((o * c_in + c) * kh + p) * kw + q;
                                    grads[x_id][xi] += g * w[wi];
                                    grads[w_id][wi] += g * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    grads[out_id] = go;
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}
