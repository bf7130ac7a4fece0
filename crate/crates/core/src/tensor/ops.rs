use super::{numel, Element, Op, Tensor};
use crate::error::{contract, Error, Result};

/// Length of the trailing block `rhs` covers when broadcast into `lhs`.
///
/// Only leading broadcast is supported: after left-padding `rhs` with ones
/// it must read `[1, .., 1, lhs[k..]]` for some `k`.
pub(crate) fn broadcast_block(lhs: &[usize], rhs: &[usize]) -> Option<usize> {
    if rhs.len() > lhs.len() {
        return None;
    }
    let pad = lhs.len() - rhs.len();
    let padded: Vec<usize> = std::iter::repeat_n(1, pad).chain(rhs.iter().copied()).collect();
    for k in 0..=lhs.len() {
        if padded[..k].iter().all(|&d| d == 1) && padded[k..] == lhs[k..] {
            return Some(numel(&lhs[k..]));
        }
    }
    None
}

/// Batch bookkeeping for a (possibly broadcast) batched matrix product.
pub(crate) struct MatMulPlan {
    pub out_shape: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub p: usize,
    /// For each output batch element, the batch index into `a` and `b`.
    pub pairs: Vec<(usize, usize)>,
    /// `b` is shared by every batch and `a` is laid out contiguously.
    pub flat: bool,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatMulPlan> {
    let mismatch = || Error::Dimension {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, p) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let rank = a_batch.len().max(b_batch.len());
    let pad = |dims: &[usize]| -> Vec<usize> {
        std::iter::repeat_n(1, rank - dims.len())
            .chain(dims.iter().copied())
            .collect()
    };
    let (ab, bb) = (pad(a_batch), pad(b_batch));
    let mut batch = Vec::with_capacity(rank);
    for (&x, &y) in ab.iter().zip(&bb) {
        if x == y || y == 1 {
            batch.push(x);
        } else if x == 1 {
            batch.push(y);
        } else {
            return Err(mismatch());
        }
    }
    let total = numel(&batch);
    let mut pairs = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let (mut ai, mut bi) = (0usize, 0usize);
        for d in 0..rank {
            ai = ai * ab[d] + if ab[d] == 1 { 0 } else { idx[d] };
            bi = bi * bb[d] + if bb[d] == 1 { 0 } else { idx[d] };
        }
        pairs.push((ai, bi));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let flat = pairs.iter().enumerate().all(|(i, &(ai, bi))| ai == i && bi == 0);
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(p);
    Ok(MatMulPlan {
        out_shape,
        m,
        k,
        p,
        pairs,
        flat,
    })
}

pub(crate) fn matmul_forward<T: Element>(plan: &MatMulPlan, a: &[T], b: &[T]) -> Vec<T> {
    let (m, k, p) = (plan.m, plan.k, plan.p);
    let mut out = vec![T::ZERO; numel(&plan.out_shape)];
    if plan.flat {
        let rows = plan.pairs.len() * m;
        T::gemm(
            rows,
            k,
            p,
            T::ONE,
            a,
            k as isize,
            1,
            b,
            p as isize,
            1,
            T::ZERO,
            &mut out,
            p as isize,
            1,
        );
        return out;
    }
    for (bi, &(ai, bj)) in plan.pairs.iter().enumerate() {
        T::gemm(
            m,
            k,
            p,
            T::ONE,
            &a[ai * m * k..(ai + 1) * m * k],
            k as isize,
            1,
            &b[bj * k * p..(bj + 1) * k * p],
            p as isize,
            1,
            T::ZERO,
            &mut out[bi * m * p..(bi + 1) * m * p],
            p as isize,
            1,
        );
    }
    out
}

/// Copies `data` with axes `i` and `j` exchanged.
pub(crate) fn swap_axes<T: Element>(data: &[T], shape: &[usize], i: usize, j: usize) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(i, j);
    let mut strides = in_strides.clone();
    strides.swap(i, j);
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// `(outer, len, inner)` decomposition around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

pub(crate) const GELU_COEF: f64 = 0.044_715;
pub(crate) const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub(crate) fn gelu_scalar<T: Element>(x: T) -> T {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let inner = c * (x + T::from_f64(GELU_COEF) * x * x * x);
    T::from_f64(0.5) * x * (T::ONE + inner.tanh())
}

pub(crate) fn gelu_grad_scalar<T: Element>(x: T) -> T {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_COEF);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::from_f64(0.5);
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + T::from_f64(3.0) * a * x * x)
}

/// Numerically stable softmax of each `(outer, inner)` fibre along the axis.
pub(crate) fn softmax_forward<T: Element>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let mut max = x[at(0)];
            for j in 1..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::ZERO;
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            let inv = T::ONE / sum;
            for j in 0..len {
                out[at(j)] *= inv;
            }
        }
    }
    out
}

/// Per-row `(mean, 1/sqrt(var + eps))` over the last axis.
pub(crate) fn layer_norm_stats<T: Element>(x: &[T], width: usize, eps: f64) -> Vec<(T, T)> {
    let n = T::from_f64(width as f64);
    x.chunks(width)
        .map(|row| {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            (mean, T::ONE / (var + T::from_f64(eps)).sqrt())
        })
        .collect()
}

/// `log(sum(exp(row)))` computed with max subtraction.
pub(crate) fn log_sum_exp<T: Element>(row: &[T]) -> T {
    let max = row.iter().copied().fold(row[0], T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

impl<'t, T: Element> Tensor<'t, T> {
    fn node_data(&self) -> (Vec<usize>, std::sync::Arc<Vec<T>>) {
        let nodes = self.tape.nodes();
        let n = &nodes[self.id];
        (n.shape.clone(), std::sync::Arc::clone(&n.value))
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: op,
                index: axis,
                len: shape.len(),
            });
        }
        Ok(shape)
    }

    fn binary(&self, other: &Tensor<'t, T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        self.same_tape(other)?;
        let (ls, lv) = self.node_data();
        let (rs, rv) = other.node_data();
        let block = broadcast_block(&ls, &rs).ok_or_else(|| Error::Dimension {
            op,
            lhs: ls.clone(),
            rhs: rs.clone(),
        })?;
        let out = if block == 0 {
            Vec::new()
        } else {
            lv.chunks(block)
                .flat_map(|chunk| chunk.iter().zip(rv.iter()).map(|(&a, &b)| f(a, b)))
                .collect()
        };
        Ok((ls, out))
    }

    /// Elementwise sum; `other` may broadcast over leading dimensions.
    pub fn add(&self, other: &Tensor<'t, T>) -> Result<Tensor<'t, T>> {
        let (shape, out) = self.binary(other, "add", |a, b| a + b)?;
        Ok(self.tape.push_op(
            shape,
            out,
            Op::Add {
                lhs: self.id,
                rhs: other.id,
            },
            &[self.id, other.id],
        ))
    }

    /// Elementwise product; `other` may broadcast over leading dimensions.
    pub fn mul(&self, other: &Tensor<'t, T>) -> Result<Tensor<'t, T>> {
        let (shape, out) = self.binary(other, "mul", |a, b| a * b)?;
        Ok(self.tape.push_op(
            shape,
            out,
            Op::Mul {
                lhs: self.id,
                rhs: other.id,
            },
            &[self.id, other.id],
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor<'t, T> {
        let (shape, v) = self.node_data();
        let f = T::from_f64(factor);
        let out = v.iter().map(|&x| x * f).collect();
        self.tape
            .push_op(shape, out, Op::Scale { input: self.id, factor }, &[self.id])
    }

    /// Batched matrix product over the last two axes.
    pub fn matmul(&self, other: &Tensor<'t, T>) -> Result<Tensor<'t, T>> {
        self.same_tape(other)?;
        let (ls, lv) = self.node_data();
        let (rs, rv) = other.node_data();
        let plan = matmul_plan(&ls, &rs)?;
        let out = matmul_forward(&plan, &lv, &rv);
        Ok(self.tape.push_op(
            plan.out_shape,
            out,
            Op::MatMul {
                lhs: self.id,
                rhs: other.id,
            },
            &[self.id, other.id],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<'t, T> {
        let (shape, v) = self.node_data();
        let out = v.iter().map(|&x| gelu_scalar(x)).collect();
        self.tape.push_op(shape, out, Op::Gelu { input: self.id }, &[self.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<'t, T>> {
        let (old, v) = self.node_data();
        if numel(shape) != v.len() || shape.contains(&0) {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: old,
                rhs: shape.to_vec(),
            });
        }
        Ok(self.tape.push_op(
            shape.to_vec(),
            v.as_ref().clone(),
            Op::Reshape { input: self.id },
            &[self.id],
        ))
    }

    /// Exchanges two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<'t, T>> {
        self.check_axis(a, "transpose axis")?;
        self.check_axis(b, "transpose axis")?;
        let (shape, v) = self.node_data();
        let (out, out_shape) = swap_axes(&v, &shape, a, b);
        Ok(self.tape.push_op(
            out_shape,
            out,
            Op::Transpose {
                input: self.id,
                axes: (a, b),
            },
            &[self.id],
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor<'t, T>], axis: usize) -> Result<Tensor<'t, T>> {
        let Some(first) = parts.first() else {
            return contract("concat of zero tensors");
        };
        let base = first.check_axis(axis, "concat axis")?;
        let mut datas = Vec::with_capacity(parts.len());
        let mut total_axis = 0;
        for p in parts {
            first.same_tape(p)?;
            let (s, v) = p.node_data();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s,
                });
            }
            total_axis += s[axis];
            datas.push((s[axis], v));
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for (len, v) in &datas {
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push_op(
            shape,
            out,
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    /// The half-open range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<'t, T>> {
        let shape = self.check_axis(axis, "slice axis")?;
        if start >= end || end > shape[axis] {
            return Err(Error::Index {
                what: "slice end",
                index: end,
                len: shape[axis],
            });
        }
        let (_, v) = self.node_data();
        let (outer, len, inner) = axis_split(&shape, axis);
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&v[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        Ok(self.tape.push_op(
            out_shape,
            out,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor<'t, T> {
        let (_, v) = self.node_data();
        let s = v.iter().copied().sum();
        self.tape
            .push_op(Vec::new(), vec![s], Op::Sum { input: self.id }, &[self.id])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self) -> Tensor<'t, T> {
        let (_, v) = self.node_data();
        let s: T = v.iter().copied().sum();
        let m = s / T::from_f64(v.len() as f64);
        self.tape
            .push_op(Vec::new(), vec![m], Op::Mean { input: self.id }, &[self.id])
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<'t, T>> {
        let shape = self.check_axis(axis, "softmax axis")?;
        let (_, v) = self.node_data();
        let (outer, len, inner) = axis_split(&shape, axis);
        let out = softmax_forward(&v, outer, len, inner);
        Ok(self
            .tape
            .push_op(shape, out, Op::Softmax { input: self.id, axis }, &[self.id]))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor<'t, T>, bias: &Tensor<'t, T>, eps: f64) -> Result<Tensor<'t, T>> {
        self.same_tape(gain)?;
        self.same_tape(bias)?;
        let (shape, v) = self.node_data();
        let (gs, g) = gain.node_data();
        let (bs, b) = bias.node_data();
        let width = *shape.last().unwrap_or(&1);
        if shape.is_empty() || gs != [width] || bs != [width] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: shape,
                rhs: gs,
            });
        }
        let stats = layer_norm_stats(&v, width, eps);
        let mut out = Vec::with_capacity(v.len());
        for (row, &(mean, rstd)) in v.chunks(width).zip(&stats) {
            for (j, &x) in row.iter().enumerate() {
                out.push((x - mean) * rstd * g[j] + b[j]);
            }
        }
        Ok(self.tape.push_op(
            shape,
            out,
            Op::LayerNorm {
                input: self.id,
                gain: gain.id,
                bias: bias.id,
                eps,
            },
            &[self.id, gain.id, bias.id],
        ))
    }

    /// Gathers rows of a `[rows, width]` table.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor<'t, T>> {
        let (shape, v) = self.node_data();
        if shape.len() != 2 {
            return Err(Error::Dimension {
                op: "embedding",
                lhs: shape,
                rhs: vec![ids.len()],
            });
        }
        if ids.is_empty() {
            return contract("embedding lookup with no ids");
        }
        let (rows, width) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    len: rows,
                });
            }
            out.extend_from_slice(&v[id * width..(id + 1) * width]);
        }
        Ok(self.tape.push_op(
            vec![ids.len(), width],
            out,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[t, vocab]` logits, skipping positions whose target is `pad`.
    pub fn cross_entropy(&self, targets: &[usize], pad: usize) -> Result<Tensor<'t, T>> {
        let (shape, v) = self.node_data();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let width = shape[1];
        let mut total = T::ZERO;
        let mut count = 0usize;
        for (row, &target) in v.chunks(width).zip(targets) {
            if target == pad {
                continue;
            }
            if target >= width {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: target,
                    len: width,
                });
            }
            total += log_sum_exp(row) - row[target];
            count += 1;
        }
        if count == 0 {
            return contract("every target position is padding");
        }
        let loss = total / T::from_f64(count as f64);
        Ok(self.tape.push_op(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                pad,
                count,
            },
            &[self.id],
        ))
    }
}
