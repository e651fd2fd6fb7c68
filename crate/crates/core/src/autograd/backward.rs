use std::collections::BTreeMap;

use super::{gelu_grad, reduce_into, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{axis_split, permute, Element, Tensor};

/// Gradients of a scalar with respect to every leaf that requires one.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T: Element = f32> {
    grads: BTreeMap<usize, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v.id())
    }

    /// Gradient map keyed by node id.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

struct Acc<'a, T: Element> {
    slots: &'a mut [Option<Tensor<T>>],
    shapes: &'a [Vec<usize>],
}

impl<T: Element> Acc<'_, T> {
    fn slot(&mut self, v: Var) -> &mut Tensor<T> {
        let shape = &self.shapes[v.id()];
        self.slots[v.id()].get_or_insert_with(|| Tensor::zeros(shape.clone()))
    }

    fn add(&mut self, v: Var, g: impl Iterator<Item = T>) {
        if self.slots[v.id()].is_none() {
            let shape = self.shapes[v.id()].clone();
            let data: Vec<T> = g.collect();
            debug_assert_eq!(data.len(), shape.iter().product::<usize>());
            self.slots[v.id()] = Some(Tensor::from_parts(shape, data));
            return;
        }
        for (a, b) in self.slot(v).data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }
}

impl<T: Element> Tape<T> {
    /// Reverse sweep from a scalar `loss`.
    ///
    /// The tape is left intact, so calling this twice yields identical
    /// gradients. Every leaf with `requires_grad` gets an entry, zero if the
    /// loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let n = loss.id() + 1;
        let shapes: Vec<Vec<usize>> = self.nodes[..n]
            .iter()
            .map(|nd| nd.value.shape().to_vec())
            .collect();
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; n];
        if self.nodes[loss.id()].requires_grad {
            slots[loss.id()] = Some(Tensor::full(shapes[loss.id()].clone(), T::one()));
        }

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = slots[i].take() else {
                continue;
            };
            if let Some(f) = self.fault_factor(node.op.name()) {
                for v in g.data_mut() {
                    *v *= f;
                }
            }
            let mut acc = Acc {
                slots: &mut slots,
                shapes: &shapes,
            };
            self.apply_rule(i, &g, &mut acc);
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, nd)| nd.requires_grad && matches!(nd.op, Op::Leaf))
            .map(|(i, nd)| {
                let g = slots
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(nd.value.shape().to_vec()));
                (i, g)
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.id()].requires_grad
    }

    fn apply_rule(&self, i: usize, g: &Tensor<T>, acc: &mut Acc<'_, T>) {
        let out = &self.nodes[i].value;
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc.add(*a, gd.iter().copied());
                }
                if self.needs(*b) {
                    acc.add(*b, gd.iter().copied());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc.add(*a, gd.iter().copied());
                }
                if self.needs(*b) {
                    acc.add(*b, gd.iter().map(|&v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    acc.add(*a, gd.iter().zip(vb).map(|(&g, &y)| g * y));
                }
                if self.needs(*b) {
                    acc.add(*b, gd.iter().zip(va).map(|(&g, &x)| g * x));
                }
            }
            Op::Scale(x, c) => acc.add(*x, gd.iter().map(|&v| v * *c)),
            Op::MatMul(a, b) => self.matmul_rule(*a, *b, gd, acc),
            Op::Transpose(x, p, q) => {
                let mut perm: Vec<usize> = (0..out.rank()).collect();
                perm.swap(*p, *q);
                let (_, back) = permute(out.shape(), gd, &perm);
                acc.add(*x, back.into_iter());
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.needs(p) {
                        let mut piece = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            piece.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        acc.add(p, piece.into_iter());
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let n = self.shape(*x)[*axis];
                let dst = acc.slot(*x).data_mut();
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    for (d, &s) in dst[base..base + len * inner]
                        .iter_mut()
                        .zip(&gd[o * len * inner..])
                    {
                        *d += s;
                    }
                }
            }
            Op::Reshape(x) => acc.add(*x, gd.iter().copied()),
            Op::Expand(x) => {
                let src_shape = self.shape(*x);
                reduce_into(gd, src_shape, out.shape(), acc.slot(*x).data_mut());
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc.add(*x, std::iter::repeat_n(gd[0], n));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = gd[0] / T::lit(n as f64);
                acc.add(*x, std::iter::repeat_n(v, n));
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let scale = if matches!(self.nodes[i].op, Op::MeanAxis(..)) {
                    T::one() / T::lit(n as f64)
                } else {
                    T::one()
                };
                let dst = acc.slot(*x).data_mut();
                for o in 0..outer {
                    for k in 0..n {
                        let row = &mut dst[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (d, &s) in row.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                            *d += s * scale;
                        }
                    }
                }
            }
            Op::Exp(x) => acc.add(*x, gd.iter().zip(out.data()).map(|(&g, &y)| g * y)),
            Op::Log(x) => {
                let vx = self.value(*x).data();
                acc.add(*x, gd.iter().zip(vx).map(|(&g, &v)| g / v));
            }
            Op::Gelu(x, th) => {
                let vx = self.value(*x).data();
                acc.add(
                    *x,
                    gd.iter()
                        .zip(vx)
                        .zip(th)
                        .map(|((&g, &v), &h)| g * gelu_grad(v, h)),
                );
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let dst = acc.slot(*x).data_mut();
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * n * inner + j;
                        let mut dot = T::zero();
                        for k in 0..n {
                            dot += gd[base + k * inner] * y[base + k * inner];
                        }
                        for k in 0..n {
                            let idx = base + k * inner;
                            dst[idx] += y[idx] * (gd[idx] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let nf = T::lit(n as f64);
                let y = out.data();
                let dst = acc.slot(*x).data_mut();
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * n * inner + j;
                        let mut mg = T::zero();
                        let mut mgy = T::zero();
                        for k in 0..n {
                            let idx = base + k * inner;
                            mg += gd[idx];
                            mgy += gd[idx] * y[idx];
                        }
                        mg = mg / nf;
                        mgy = mgy / nf;
                        let inv = inv_std[o * inner + j];
                        for k in 0..n {
                            let idx = base + k * inner;
                            dst[idx] += inv * (gd[idx] - mg - y[idx] * mgy);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                let dst = acc.slot(*table).data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    for (a, &b) in dst[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&gd[r * d..(r + 1) * d])
                    {
                        *a += b;
                    }
                }
            }
            Op::MaskedFill { x, mask } => {
                acc.add(
                    *x,
                    gd.iter()
                        .zip(mask)
                        .map(|(&g, &m)| if m { T::zero() } else { g }),
                );
            }
            Op::L2Normalize {
                x,
                axis,
                norms,
                eps,
            } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let dst = acc.slot(*x).data_mut();
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * n * inner + j;
                        let norm = norms[o * inner + j];
                        let floored = norm <= *eps;
                        let mut dot = T::zero();
                        if !floored {
                            for k in 0..n {
                                dot += gd[base + k * inner] * y[base + k * inner];
                            }
                        }
                        for k in 0..n {
                            let idx = base + k * inner;
                            dst[idx] += (gd[idx] - y[idx] * dot) / norm;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let classes = self.shape(*logits)[1];
                let scale = gd[0] / T::lit(*count as f64);
                let dst = acc.slot(*logits).data_mut();
                for (r, target) in targets.iter().enumerate() {
                    let Some(c) = *target else { continue };
                    let row = r * classes;
                    for k in 0..classes {
                        let onehot = if k == c { T::one() } else { T::zero() };
                        dst[row + k] += (probs[row + k] - onehot) * scale;
                    }
                }
            }
        }
    }

    fn matmul_rule(&self, a: Var, b: Var, gd: &[T], acc: &mut Acc<'_, T>) {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        let (batch, m, k) = match sa.as_slice() {
            [m, k] => (1, *m, *k),
            [bt, m, k] => (*bt, *m, *k),
            _ => unreachable!("matmul operands validated at record time"),
        };
        let n = *sb.last().expect("rank checked");
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        if self.needs(a) {
            // dA = G · Bᵀ
            let dst = acc.slot(a).data_mut();
            for bi in 0..batch {
                T::gemm(
                    m,
                    n,
                    k,
                    &gd[bi * m * n..],
                    n as isize,
                    1,
                    &vb[bi * k * n..],
                    1,
                    n as isize,
                    T::one(),
                    &mut dst[bi * m * k..(bi + 1) * m * k],
                );
            }
        }
        if self.needs(b) {
            // dB = Aᵀ · G
            let dst = acc.slot(b).data_mut();
            for bi in 0..batch {
                T::gemm(
                    k,
                    m,
                    n,
                    &va[bi * m * k..],
                    1,
                    k as isize,
                    &gd[bi * m * n..],
                    n as isize,
                    1,
                    T::one(),
                    &mut dst[bi * k * n..(bi + 1) * k * n],
                );
            }
        }
    }
}
