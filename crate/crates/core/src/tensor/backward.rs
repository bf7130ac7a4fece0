use std::collections::BTreeMap;

use super::ops::{axis_split, gelu_grad_scalar, layer_norm_stats, matmul_plan, swap_axes};
use super::params::GradMap;
use super::{numel, BackwardFault, Element, Node, Op, Tensor};
use crate::error::{contract, Result};

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    named: BTreeMap<String, (Vec<usize>, usize)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient with respect to `t`, if it requires gradients and the loss reaches it.
    pub fn get(&self, t: &Tensor<'_, T>) -> Option<&[T]> {
        self.grads.get(t.id()).and_then(|g| g.as_deref())
    }

    /// Gradients of the named leaves. Leaves the loss does not reach get zeros.
    pub fn into_grad_map(mut self) -> GradMap<T> {
        let mut map = GradMap::default();
        for (name, (shape, id)) in std::mem::take(&mut self.named) {
            let data = self.grads[id].take().unwrap_or_else(|| vec![T::ZERO; numel(&shape)]);
            map.insert(name, shape, data);
        }
        map
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::ZERO; len])
}

impl<'t, T: Element> Tensor<'t, T> {
    /// Reverse sweep from this scalar; returns gradients for every node that
    /// requires them.
    pub fn backward(&self) -> Result<Gradients<T>> {
        let tape = self.tape();
        let fault = tape.fault();
        let nodes = tape.nodes();
        let root = &nodes[self.id()];
        if root.value.len() != 1 {
            return contract(format!("backward from non-scalar tensor of shape {:?}", root.shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=self.id()).map(|_| None).collect();
        let mut named = BTreeMap::new();
        grads[self.id()] = Some(vec![T::ONE]);

        for id in (0..=self.id()).rev() {
            let node = &nodes[id];
            if let (Op::Leaf, Some(name)) = (&node.op, &node.name) {
                named.insert(name.clone(), (node.shape.clone(), id));
            }
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            propagate(&nodes, node, &g, &mut grads, fault);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, named })
    }
}

fn wants<T>(nodes: &[Node<T>], id: usize) -> bool {
    nodes[id].requires_grad
}

fn propagate<T: Element>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
    fault: Option<BackwardFault>,
) {
    match &node.op {
        Op::Leaf => {}
        Op::Add { lhs, rhs } => {
            if wants(nodes, *lhs) {
                let dst = accumulate(&mut grads[*lhs], g.len());
                dst.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            if wants(nodes, *rhs) {
                let len = nodes[*rhs].value.len();
                let dst = accumulate(&mut grads[*rhs], len);
                for chunk in g.chunks(len) {
                    dst.iter_mut().zip(chunk).for_each(|(d, &x)| *d += x);
                }
            }
        }
        Op::Mul { lhs, rhs } => {
            let a = &nodes[*lhs].value;
            let b = &nodes[*rhs].value;
            let len = b.len();
            if wants(nodes, *lhs) {
                let dst = accumulate(&mut grads[*lhs], g.len());
                for (i, d) in dst.iter_mut().enumerate() {
                    *d += g[i] * b[i % len];
                }
            }
            if wants(nodes, *rhs) {
                let dst = accumulate(&mut grads[*rhs], len);
                for (i, (&gi, &ai)) in g.iter().zip(a.iter()).enumerate() {
                    dst[i % len] += gi * ai;
                }
            }
        }
        Op::Scale { input, factor } => {
            let f = T::from_f64(*factor);
            let dst = accumulate(&mut grads[*input], g.len());
            dst.iter_mut().zip(g).for_each(|(d, &x)| *d += x * f);
        }
        Op::MatMul { lhs, rhs } => {
            let (a_node, b_node) = (&nodes[*lhs], &nodes[*rhs]);
            let plan = matmul_plan(&a_node.shape, &b_node.shape).expect("validated in forward");
            let (m, k, p) = (plan.m, plan.k, plan.p);
            let (a, b) = (&a_node.value, &b_node.value);
            if wants(nodes, *lhs) {
                let dst = accumulate(&mut grads[*lhs], a.len());
                if plan.flat {
                    let rows = plan.pairs.len() * m;
                    T::gemm(
                        rows,
                        p,
                        k,
                        T::ONE,
                        g,
                        p as isize,
                        1,
                        b,
                        1,
                        p as isize,
                        T::ONE,
                        dst,
                        k as isize,
                        1,
                    );
                } else {
                    for (bi, &(ai, bj)) in plan.pairs.iter().enumerate() {
                        T::gemm(
                            m,
                            p,
                            k,
                            T::ONE,
                            &g[bi * m * p..(bi + 1) * m * p],
                            p as isize,
                            1,
                            &b[bj * k * p..(bj + 1) * k * p],
                            1,
                            p as isize,
                            T::ONE,
                            &mut dst[ai * m * k..(ai + 1) * m * k],
                            k as isize,
                            1,
                        );
                    }
                }
            }
            if wants(nodes, *rhs) {
                let dst = accumulate(&mut grads[*rhs], b.len());
                if plan.flat {
                    let rows = plan.pairs.len() * m;
                    T::gemm(
                        k,
                        rows,
                        p,
                        T::ONE,
                        a,
                        1,
                        k as isize,
                        g,
                        p as isize,
                        1,
                        T::ONE,
                        dst,
                        p as isize,
                        1,
                    );
                } else {
                    for (bi, &(ai, bj)) in plan.pairs.iter().enumerate() {
                        T::gemm(
                            k,
                            m,
                            p,
                            T::ONE,
                            &a[ai * m * k..(ai + 1) * m * k],
                            1,
                            k as isize,
                            &g[bi * m * p..(bi + 1) * m * p],
                            p as isize,
                            1,
                            T::ONE,
                            &mut dst[bj * k * p..(bj + 1) * k * p],
                            p as isize,
                            1,
                        );
                    }
                }
            }
        }
        Op::Gelu { input } => {
            let x = &nodes[*input].value;
            let skew = if fault == Some(BackwardFault::Gelu) {
                T::from_f64(1.01)
            } else {
                T::ONE
            };
            let dst = accumulate(&mut grads[*input], g.len());
            for ((d, &gi), &xi) in dst.iter_mut().zip(g).zip(x.iter()) {
                *d += gi * gelu_grad_scalar(xi) * skew;
            }
        }
        Op::Reshape { input } => {
            let dst = accumulate(&mut grads[*input], g.len());
            dst.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
        }
        Op::Transpose { input, axes } => {
            let (back, _) = swap_axes(g, &node.shape, axes.0, axes.1);
            let dst = accumulate(&mut grads[*input], g.len());
            dst.iter_mut().zip(&back).for_each(|(d, &x)| *d += x);
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_split(&node.shape, *axis);
            let mut offset = 0;
            for &input in inputs {
                let len = nodes[input].shape[*axis];
                if wants(nodes, input) {
                    let dst = accumulate(&mut grads[input], outer * len * inner);
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let d = &mut dst[o * len * inner..(o + 1) * len * inner];
                        d.iter_mut().zip(src).for_each(|(d, &x)| *d += x);
                    }
                }
                offset += len;
            }
        }
        Op::Slice { input, axis, start } => {
            let src_shape = &nodes[*input].shape;
            let (outer, len, inner) = axis_split(src_shape, *axis);
            let width = node.shape[*axis];
            let dst = accumulate(&mut grads[*input], outer * len * inner);
            for o in 0..outer {
                let d = &mut dst[(o * len + start) * inner..(o * len + start + width) * inner];
                let s = &g[o * width * inner..(o + 1) * width * inner];
                d.iter_mut().zip(s).for_each(|(d, &x)| *d += x);
            }
        }
        Op::Sum { input } => {
            let len = nodes[*input].value.len();
            let dst = accumulate(&mut grads[*input], len);
            dst.iter_mut().for_each(|d| *d += g[0]);
        }
        Op::Mean { input } => {
            let len = nodes[*input].value.len();
            let share = g[0] / T::from_f64(len as f64);
            let dst = accumulate(&mut grads[*input], len);
            dst.iter_mut().for_each(|d| *d += share);
        }
        Op::Softmax { input, axis } => {
            let y = &node.value;
            let (outer, len, inner) = axis_split(&node.shape, *axis);
            let dst = accumulate(&mut grads[*input], y.len());
            for o in 0..outer {
                let base = o * len * inner;
                for i in 0..inner {
                    let at = |j: usize| base + j * inner + i;
                    let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        dst[at(j)] += y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { input, gain, bias, eps } => {
            let x = &nodes[*input].value;
            let gamma = &nodes[*gain].value;
            let width = gamma.len();
            let stats = layer_norm_stats(x, width, *eps);
            let n = T::from_f64(width as f64);
            let centered = fault != Some(BackwardFault::LayerNorm);
            if wants(nodes, *input) {
                let dst = accumulate(&mut grads[*input], x.len());
                let mut dxhat = vec![T::ZERO; width];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let row = &x[r * width..(r + 1) * width];
                    let gr = &g[r * width..(r + 1) * width];
                    let mut sum_d = T::ZERO;
                    let mut sum_dx = T::ZERO;
                    for j in 0..width {
                        dxhat[j] = gr[j] * gamma[j];
                        let xhat = (row[j] - mean) * rstd;
                        sum_d += dxhat[j];
                        sum_dx += dxhat[j] * xhat;
                    }
                    let mean_d = if centered { sum_d / n } else { T::ZERO };
                    let mean_dx = sum_dx / n;
                    for j in 0..width {
                        let xhat = (row[j] - mean) * rstd;
                        dst[r * width + j] += rstd * (dxhat[j] - mean_d - xhat * mean_dx);
                    }
                }
            }
            if wants(nodes, *gain) {
                let dst = accumulate(&mut grads[*gain], width);
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    for j in 0..width {
                        dst[j] += g[r * width + j] * (x[r * width + j] - mean) * rstd;
                    }
                }
            }
            if wants(nodes, *bias) {
                let dst = accumulate(&mut grads[*bias], width);
                for chunk in g.chunks(width) {
                    dst.iter_mut().zip(chunk).for_each(|(d, &x)| *d += x);
                }
            }
        }
        Op::Embedding { table, ids } => {
            let width = nodes[*table].shape[1];
            let len = nodes[*table].value.len();
            let dst = accumulate(&mut grads[*table], len);
            for (row, &id) in ids.iter().enumerate() {
                let d = &mut dst[id * width..(id + 1) * width];
                d.iter_mut()
                    .zip(&g[row * width..(row + 1) * width])
                    .for_each(|(d, &x)| *d += x);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            pad,
            count,
        } => {
            let z = &nodes[*logits].value;
            let width = nodes[*logits].shape[1];
            let share = g[0] / T::from_f64(*count as f64);
            let dst = accumulate(&mut grads[*logits], z.len());
            for (r, &target) in targets.iter().enumerate() {
                if target == *pad {
                    continue;
                }
                let row = &z[r * width..(r + 1) * width];
                let max = row.iter().copied().fold(row[0], T::max);
                let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
                let d = &mut dst[r * width..(r + 1) * width];
                for j in 0..width {
                    let p = (row[j] - max).exp() / denom;
                    let onehot = if j == target { T::ONE } else { T::ZERO };
                    d[j] += share * (p - onehot);
                }
            }
        }
    }
}
