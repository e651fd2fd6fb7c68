//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation on a [`Tape`] appends a node holding the computed value and,
//! when any operand requires a gradient, the information its backward rule
//! needs. Nodes are appended in evaluation order, so the node list is already
//! topologically sorted and [`Tape::backward`] is a single reverse sweep.
//!
//! There is no implicit broadcasting. Operand shapes must agree exactly;
//! use [`Tape::reshape`] and [`Tape::expand`] to line them up.

mod backward;
pub mod gradcheck;

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{axis_split, permute, Element, Tensor};

pub use backward::Gradients;
pub use gradcheck::{finite_diff_check, GradCheckReport};

/// Names of the differentiable primitives, in a fixed order.
pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "concat",
    "slice",
    "reshape",
    "expand",
    "sum",
    "mean",
    "sum_axis",
    "mean_axis",
    "exp",
    "log",
    "gelu",
    "softmax",
    "layer_norm",
    "embedding_gather",
    "masked_fill",
    "l2_normalize",
    "cross_entropy_from_logits",
];

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var, usize, usize),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Expand(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Exp(Var),
    Log(Var),
    Gelu(Var, Vec<T>),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        axis: usize,
        inv_std: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        norms: Vec<T>,
        eps: T,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Expand(..) => "expand",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "embedding_gather",
            Op::MaskedFill { .. } => "masked_fill",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::CrossEntropy { .. } => "cross_entropy_from_logits",
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// A recording of tensor operations, differentiable in reverse.
///
/// A tape is confined to the thread that builds it. Independent tapes share
/// nothing and may be driven from different threads.
pub struct Tape<T: Element = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) fault: Option<&'static str>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

/// Multiplier applied to the incoming gradient of a sabotaged backward rule.
const FAULT_FACTOR: f64 = 1.5;

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Vars created after
    /// that point become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Fault injection for exercising gradient checks: the backward rule of
    /// the named primitive scales its incoming gradient by 1.5.
    #[doc(hidden)]
    pub fn corrupt_backward_rule(&mut self, op: &str) -> Result<()> {
        let name = PRIMITIVES
            .iter()
            .find(|&&p| p == op)
            .ok_or_else(|| Error::Invalid(format!("unknown primitive {op:?}")))?;
        self.fault = Some(name);
        Ok(())
    }

    pub(crate) fn fault_factor(&self, op: &str) -> Option<T> {
        (self.fault == Some(op)).then(|| T::lit(FAULT_FACTOR))
    }

    /// Records a leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::InvalidAxis { op, axis, rank });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// `(m, k) · (k, n)` or batched `(b, m, k) · (b, k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => (*b, *m, *k, *n),
            _ => return Err(mismatch()),
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ta, tb) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &ta[bi * m * k..],
                    k as isize,
                    1,
                    &tb[bi * k * n..],
                    n as isize,
                    1,
                    T::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b]))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, axis_a: usize, axis_b: usize) -> Result<Var> {
        self.check_axis("transpose", x, axis_a)?;
        self.check_axis("transpose", x, axis_b)?;
        let t = self.value(x);
        let mut perm: Vec<usize> = (0..t.rank()).collect();
        perm.swap(axis_a, axis_b);
        let (shape, data) = permute(t.shape(), t.data(), &perm);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Transpose(x, axis_a, axis_b),
            &[x],
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat(parts.to_vec(), axis),
            parts,
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let t = self.value(x);
        let extent = t.shape()[axis];
        if len == 0 || start + len > extent {
            return Err(Error::IndexOutOfRange {
                op: "slice",
                index: start + len,
                limit: extent,
            });
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Slice { x, axis, start },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Repeats size-1 axes to reach `shape`. Ranks must match.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let src = t.shape();
        let ok = src.len() == shape.len()
            && src
                .iter()
                .zip(shape)
                .all(|(&s, &d)| s == d || (s == 1 && d > 0));
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "expand",
                lhs: src.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        expand_into(t.data(), src, shape, &mut data);
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Expand(x),
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().fold(T::zero(), |acc, &v| acc + v) / T::lit(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    fn reduce_axis(&self, x: Var, axis: usize) -> (Vec<usize>, Vec<T>) {
        let t = self.value(x);
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &t.data()[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        (shape, out)
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let (shape, data) = self.reduce_axis(x, axis);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SumAxis(x, axis), &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let n = T::lit(self.shape(x)[axis] as f64);
        let (shape, mut data) = self.reduce_axis(x, axis);
        for v in data.iter_mut() {
            *v = *v / n;
        }
        Ok(self.push(Tensor::from_parts(shape, data), Op::MeanAxis(x, axis), &[x]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push(out, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.ln());
        self.push(out, Op::Log(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = T::lit(GELU_C);
        let a = T::lit(GELU_A);
        let half = T::lit(0.5);
        let th: Vec<T> = t
            .data()
            .iter()
            .map(|&v| fast_tanh(c * (v + a * v * v * v)))
            .collect();
        let data = t
            .data()
            .iter()
            .zip(&th)
            .map(|(&v, &h)| half * v * (T::one() + h))
            .collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Gelu(x, th), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let t = self.value(x);
        let mut data = t.data().to_vec();
        let (outer, n, inner) = axis_split(t.shape(), axis);
        for o in 0..outer {
            for j in 0..inner {
                softmax_strided(&mut data, o * n * inner + j, n, inner);
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(out, Op::Softmax(x, axis), &[x]))
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine).
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis("layer_norm", x, axis)?;
        let t = self.value(x);
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let nf = T::lit(n as f64);
        let eps = T::lit(eps);
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let base = o * n * inner + j;
                let mut mean = T::zero();
                for i in 0..n {
                    mean += data[base + i * inner];
                }
                mean = mean / nf;
                let mut var = T::zero();
                for i in 0..n {
                    let d = data[base + i * inner] - mean;
                    var += d * d;
                }
                let inv = T::one() / (var / nf + eps).sqrt();
                for i in 0..n {
                    let v = &mut data[base + i * inner];
                    *v = (*v - mean) * inv;
                }
                inv_std.push(inv);
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(out, Op::LayerNorm { x, axis, inv_std }, &[x]))
    }

    /// Rows of a `(vocab, d)` table selected by `ids`, giving `(ids.len(), d)`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let [rows, d] = t.shape() else {
            return Err(Error::Shape(format!(
                "embedding_gather: table must be rank 2, got {:?}",
                t.shape()
            )));
        };
        let (rows, d) = (*rows, *d);
        if ids.is_empty() {
            return Err(Error::Invalid("embedding_gather: empty id list".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange {
                    op: "embedding_gather",
                    index: id,
                    limit: rows,
                });
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_fill",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let fill = T::lit(value);
        let data = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(
            out,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            &[x],
        ))
    }

    /// `x / max(‖x‖₂, 1e-8)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("l2_normalize", x, axis)?;
        let eps = T::lit(1e-8);
        let t = self.value(x);
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let base = o * n * inner + j;
                let mut ss = T::zero();
                for i in 0..n {
                    let v = data[base + i * inner];
                    ss += v * v;
                }
                let norm = ss.sqrt().max(eps);
                for i in 0..n {
                    let v = &mut data[base + i * inner];
                    *v = *v / norm;
                }
                norms.push(norm);
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(
            out,
            Op::L2Normalize {
                x,
                axis,
                norms,
                eps,
            },
            &[x],
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `(rows, classes)` logits. `None` targets are ignored; if every target
    /// is ignored the loss is 0.
    pub fn cross_entropy_from_logits(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<Var> {
        let t = self.value(logits);
        let [rows, classes] = t.shape() else {
            return Err(Error::Shape(format!(
                "cross_entropy_from_logits: logits must be rank 2, got {:?}",
                t.shape()
            )));
        };
        let (rows, classes) = (*rows, *classes);
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_from_logits",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = t.data().to_vec();
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, target) in targets.iter().enumerate() {
            let row = &mut probs[r * classes..(r + 1) * classes];
            let lse = log_sum_exp(row);
            if let Some(c) = *target {
                if c >= classes {
                    return Err(Error::IndexOutOfRange {
                        op: "cross_entropy_from_logits",
                        index: c,
                        limit: classes,
                    });
                }
                total += lse - row[c];
                count += 1;
            }
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::lit(count as f64)
        };
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; saturates cleanly for large `|u|`.
#[inline]
fn fast_tanh<T: Element>(u: T) -> T {
    let two = T::lit(2.0);
    let e = (two * u).exp();
    if e.is_infinite() {
        return T::one();
    }
    T::one() - two / (e + T::one())
}

/// GELU derivative given `x` and the cached inner `tanh`.
pub(crate) fn gelu_grad<T: Element>(x: T, th: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Stable `ln Σ exp(row)`.
pub(crate) fn log_sum_exp<T: Element>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if max == T::neg_infinity() {
        return max;
    }
    let s = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
    max + s.ln()
}

fn softmax_strided<T: Element>(data: &mut [T], base: usize, n: usize, stride: usize) {
    let mut max = T::neg_infinity();
    for i in 0..n {
        max = max.max(data[base + i * stride]);
    }
    if max == T::neg_infinity() {
        // Fully masked: no mass anywhere.
        for i in 0..n {
            data[base + i * stride] = T::zero();
        }
        return;
    }
    let mut sum = T::zero();
    for i in 0..n {
        let e = (data[base + i * stride] - max).exp();
        data[base + i * stride] = e;
        sum += e;
    }
    for i in 0..n {
        data[base + i * stride] = data[base + i * stride] / sum;
    }
}

/// Appends `src` (shaped `src_shape`) broadcast to `dst_shape`.
pub(crate) fn expand_into<T: Copy>(
    src: &[T],
    src_shape: &[usize],
    dst_shape: &[usize],
    out: &mut Vec<T>,
) {
    if src_shape == dst_shape {
        out.extend_from_slice(src);
        return;
    }
    let inner: usize = src_shape[1..].iter().product();
    if src_shape[0] == dst_shape[0] {
        for i in 0..src_shape[0] {
            expand_into(
                &src[i * inner..(i + 1) * inner],
                &src_shape[1..],
                &dst_shape[1..],
                out,
            );
        }
    } else {
        let start = out.len();
        expand_into(&src[..inner], &src_shape[1..], &dst_shape[1..], out);
        let end = out.len();
        for _ in 1..dst_shape[0] {
            out.extend_from_within(start..end);
        }
    }
}

/// Adjoint of [`expand_into`]: sums `g` (shaped `dst_shape`) into `acc`.
pub(crate) fn reduce_into<T: Element>(
    g: &[T],
    src_shape: &[usize],
    dst_shape: &[usize],
    acc: &mut [T],
) {
    if src_shape == dst_shape {
        for (a, &v) in acc.iter_mut().zip(g) {
            *a += v;
        }
        return;
    }
    let s_inner: usize = src_shape[1..].iter().product();
    let d_inner: usize = dst_shape[1..].iter().product();
    let broadcast = src_shape[0] != dst_shape[0];
    for i in 0..dst_shape[0] {
        let si = if broadcast { 0 } else { i };
        reduce_into(
            &g[i * d_inner..(i + 1) * d_inner],
            &src_shape[1..],
            &dst_shape[1..],
            &mut acc[si * s_inner..(si + 1) * s_inner],
        );
    }
}

#[cfg(test)]
mod tests;
