use super::kernels::{self, gemm};
use super::{check_finite, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::num::Scalar;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// The operator set of the tape. Attributes travel with the kind.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Mul,
    /// `[.., n] + [n]`, the bias repeated over every leading index.
    AddBias,
    /// Multiply by a compile-time constant.
    Scale(f64),
    /// Batched matrix product `[.., m, k] x [.., k, n]`. The right operand may
    /// be a plain `[k, n]` matrix shared across the batch. With `trans_b` the
    /// right operand is stored `[.., n, k]`.
    MatMul {
        trans_b: bool,
    },
    SoftmaxLastDim,
    /// Inputs `(x, gamma, beta)`, normalizing over the last axis.
    LayerNormAffine {
        eps: f64,
    },
    Gelu,
    MeanOverAxes {
        axes: Vec<usize>,
    },
    ConcatAxis {
        axis: usize,
    },
    SliceAxis {
        axis: usize,
        start: usize,
        end: usize,
    },
    BroadcastTo {
        shape: Vec<usize>,
    },
    /// `[N]` levels to `[N, dim]` embeddings (cosines then sines).
    SinusoidalEmbed {
        dim: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Permute {
        perm: Vec<usize>,
    },
}

enum Saved<T> {
    Nothing,
    LayerNorm { xhat: Vec<T>, rstd: Vec<T> },
}

enum Record<T> {
    Leaf,
    /// Output of an op none of whose inputs needed a gradient.
    Detached,
    Op {
        kind: OpKind,
        inputs: Vec<Var>,
        saved: Saved<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    record: Record<T>,
    needs_grad: bool,
}

/// Define-by-run autodiff tape. Build one per forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf; it is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node { value: tensor, record: Record::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Whether `v` was produced by an op that is on the differentiable tape.
    pub fn is_recorded(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].record, Record::Op { .. })
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        self.nodes.swap_remove(v.0).value
    }

    /// Apply `kind` to `inputs`, recording the op when any input needs a
    /// gradient.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let (value, saved) = self.forward(&kind, inputs)?;
        if !moves_data_only(&kind) {
            check_finite(op_name(&kind), value.data())?;
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let record = if needs_grad { Record::Op { kind, inputs: inputs.to_vec(), saved } } else { Record::Detached };
        self.nodes.push(Node { value, record, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul { trans_b: false }, &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul { trans_b: true }, &[a, b])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::SoftmaxLastDim, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.apply(OpKind::LayerNormAffine { eps }, &[x, gamma, beta])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Gelu, &[a])
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.apply(OpKind::MeanOverAxes { axes: axes.to_vec() }, &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::ConcatAxis { axis }, inputs)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::SliceAxis { axis, start, end }, &[a])
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::BroadcastTo { shape: shape.to_vec() }, &[a])
    }

    pub fn sinusoidal_embed(&mut self, levels: Var, dim: usize) -> Result<Var> {
        self.apply(OpKind::SinusoidalEmbed { dim }, &[levels])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape { shape: shape.to_vec() }, &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.apply(OpKind::Permute { perm: perm.to_vec() }, &[a])
    }

    /// `x · w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.apply(OpKind::AddBias, &[y, b])
    }

    /// Reverse sweep from a one-element loss. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].record, Record::Leaf) {
                if self.nodes[idx].needs_grad {
                    self.nodes[idx].value.accumulate_grad(&g);
                }
                continue;
            }
            match &self.nodes[idx].record {
                Record::Leaf | Record::Detached => {}
                Record::Op { kind, inputs, saved } => {
                    let contributions = self.vjp(kind, inputs, saved, &self.nodes[idx].value, &g)?;
                    for (v, c) in inputs.iter().zip(contributions) {
                        if let Some(c) = c {
                            if !self.nodes[v.0].needs_grad {
                                continue;
                            }
                            match &mut grads[v.0] {
                                Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a += b),
                                slot @ None => *slot = Some(c),
                            }
                        }
                    }
                }
            }
        }
        // unreachable differentiable leaves still get a (zero) gradient
        for n in &mut self.nodes[..=loss.0] {
            if n.needs_grad && matches!(n.record, Record::Leaf) && n.value.grad().is_none() {
                let z = vec![T::zero(); n.value.len()];
                n.value.accumulate_grad(&z);
            }
        }
        Ok(())
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn forward(&self, kind: &OpKind, inputs: &[Var]) -> Result<(Tensor<T>, Saved<T>)> {
        let arity_ok = match kind {
            OpKind::Add | OpKind::Mul | OpKind::AddBias | OpKind::MatMul { .. } => inputs.len() == 2,
            OpKind::LayerNormAffine { .. } => inputs.len() == 3,
            OpKind::ConcatAxis { .. } => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(shape_err!("{} got {} inputs", op_name(kind), inputs.len()));
        }
        let x = self.val(inputs[0]);
        let out = match kind {
            OpKind::Add | OpKind::Mul => {
                let y = self.val(inputs[1]);
                if x.shape() != y.shape() {
                    return Err(shape_err!("{}: {:?} vs {:?}", op_name(kind), x.shape(), y.shape()));
                }
                let data = if *kind == OpKind::Add {
                    x.data().iter().zip(y.data()).map(|(&a, &b)| a + b).collect()
                } else {
                    x.data().iter().zip(y.data()).map(|(&a, &b)| a * b).collect()
                };
                Tensor::from_vec(x.shape().to_vec(), data)?
            }
            OpKind::AddBias => {
                let b = self.val(inputs[1]);
                if b.rank() != 1 || x.shape().last() != Some(&b.len()) {
                    return Err(shape_err!("add_bias: {:?} + {:?}", x.shape(), b.shape()));
                }
                let mut data = x.data().to_vec();
                for row in data.chunks_exact_mut(b.len()) {
                    for (v, &bv) in row.iter_mut().zip(b.data()) {
                        *v += bv;
                    }
                }
                Tensor::from_vec(x.shape().to_vec(), data)?
            }
            OpKind::Scale(c) => x.scaled(T::from_f64(*c)),
            OpKind::MatMul { trans_b } => {
                let y = self.val(inputs[1]);
                let dims = matmul_dims(x.shape(), y.shape(), *trans_b)?;
                let mut data = vec![T::zero(); dims.batch * dims.m * dims.n];
                if dims.shared_rhs {
                    gemm(x.data(), y.data(), &mut data, dims.batch * dims.m, dims.k, dims.n, false, *trans_b, false);
                } else {
                    let (sa, sb, sc) = (dims.m * dims.k, dims.k * dims.n, dims.m * dims.n);
                    for bi in 0..dims.batch {
                        gemm(
                            &x.data()[bi * sa..(bi + 1) * sa],
                            &y.data()[bi * sb..(bi + 1) * sb],
                            &mut data[bi * sc..(bi + 1) * sc],
                            dims.m,
                            dims.k,
                            dims.n,
                            false,
                            *trans_b,
                            false,
                        );
                    }
                }
                Tensor::from_vec(dims.out_shape, data)?
            }
            OpKind::SoftmaxLastDim => {
                let d = *x.shape().last().unwrap();
                let mut data = x.data().to_vec();
                for row in data.chunks_mut(d) {
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut s = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - mx).exp();
                        s += *v;
                    }
                    let inv = T::one() / s;
                    row.iter_mut().for_each(|v| *v *= inv);
                }
                Tensor::from_vec(x.shape().to_vec(), data)?
            }
            OpKind::LayerNormAffine { eps } => {
                let (gamma, beta) = (self.val(inputs[1]), self.val(inputs[2]));
                let d = *x.shape().last().unwrap();
                if gamma.shape() != [d] || beta.shape() != [d] {
                    return Err(shape_err!(
                        "layer_norm: features {d}, gamma {:?}, beta {:?}",
                        gamma.shape(),
                        beta.shape()
                    ));
                }
                let rows = x.len() / d;
                let mut xhat = Vec::with_capacity(x.len());
                let mut rstd = Vec::with_capacity(rows);
                let mut out = Vec::with_capacity(x.len());
                let inv_d = T::one() / T::from_usize(d);
                for row in x.data().chunks(d) {
                    let mean = row.iter().copied().sum::<T>() * inv_d;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                    let r = T::one() / (var + T::from_f64(*eps)).sqrt();
                    rstd.push(r);
                    for (j, &v) in row.iter().enumerate() {
                        let h = (v - mean) * r;
                        xhat.push(h);
                        out.push(h * gamma.data()[j] + beta.data()[j]);
                    }
                }
                return Ok((Tensor::from_vec(x.shape().to_vec(), out)?, Saved::LayerNorm { xhat, rstd }));
            }
            OpKind::Gelu => x.map(kernels::gelu),
            OpKind::MeanOverAxes { axes } => {
                let (out_shape, keep) = reduce_shape(x.shape(), axes)?;
                let count: usize = axes.iter().map(|&a| x.shape()[a]).product();
                let mut data = vec![T::zero(); out_shape.iter().product()];
                let strides = keep_strides(x.shape(), &keep);
                kernels::for_each_offset(x.shape(), &strides, |lin, off| data[off] += x.data()[lin]);
                let inv = T::one() / T::from_usize(count);
                data.iter_mut().for_each(|v| *v *= inv);
                Tensor::from_vec(out_shape, data)?
            }
            OpKind::ConcatAxis { axis } => {
                let parts: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.val(v)).collect();
                let out_shape = concat_shape(&parts, *axis)?;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let mut data = Vec::with_capacity(out_shape.iter().product());
                for o in 0..outer {
                    for p in &parts {
                        let w = p.shape()[*axis] * inner;
                        data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
                    }
                }
                Tensor::from_vec(out_shape, data)?
            }
            OpKind::SliceAxis { axis, start, end } => {
                let s = x.shape();
                if *axis >= s.len() || start >= end || *end > s[*axis] {
                    return Err(shape_err!("slice [{start}, {end}) on axis {axis} of {s:?}"));
                }
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut data = Vec::with_capacity(outer * (end - start) * inner);
                for o in 0..outer {
                    let base = o * s[*axis] * inner;
                    data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
                }
                let mut shape = s.to_vec();
                shape[*axis] = end - start;
                Tensor::from_vec(shape, data)?
            }
            OpKind::BroadcastTo { shape } => {
                let strides = kernels::broadcast_strides(x.shape(), shape)
                    .ok_or_else(|| shape_err!("cannot broadcast {:?} to {shape:?}", x.shape()))?;
                Tensor::from_vec(shape.clone(), kernels::gather_strided(x.data(), shape, &strides))?
            }
            OpKind::SinusoidalEmbed { dim } => {
                if x.rank() != 1 || *dim < 2 || dim % 2 != 0 {
                    return Err(shape_err!("sinusoidal_embed: input {:?}, dim {dim}", x.shape()));
                }
                let freqs = kernels::sinusoid_freqs(*dim);
                let half = dim / 2;
                let mut data = vec![T::zero(); x.len() * dim];
                for (i, &t) in x.data().iter().enumerate() {
                    for (f, &w) in freqs.iter().enumerate() {
                        let a = t.to_f64() * w;
                        data[i * dim + f] = T::from_f64(a.cos());
                        data[i * dim + half + f] = T::from_f64(a.sin());
                    }
                }
                Tensor::from_vec(vec![x.len(), *dim], data)?
            }
            OpKind::Reshape { shape } => {
                if shape.iter().product::<usize>() != x.len() {
                    return Err(shape_err!("reshape {:?} to {shape:?}", x.shape()));
                }
                Tensor::from_vec(shape.clone(), x.data().to_vec())?
            }
            OpKind::Permute { perm } => {
                check_perm(perm, x.rank())?;
                let (data, shape) = kernels::permute(x.data(), x.shape(), perm);
                Tensor::from_vec(shape, data)?
            }
        };
        Ok((out, Saved::Nothing))
    }

    /// Vector-Jacobian products for each input of one recorded op.
    fn vjp(
        &self,
        kind: &OpKind,
        inputs: &[Var],
        saved: &Saved<T>,
        out: &Tensor<T>,
        g: &[T],
    ) -> Result<Vec<Option<Vec<T>>>> {
        let need = |i: usize| self.nodes[inputs[i].0].needs_grad;
        let x = self.val(inputs[0]);
        Ok(match kind {
            OpKind::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            OpKind::AddBias => {
                let n = self.val(inputs[1]).len();
                let gb = need(1).then(|| {
                    let mut gb = vec![T::zero(); n];
                    for row in g.chunks_exact(n) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    gb
                });
                vec![Some(g.to_vec()), gb]
            }
            OpKind::Mul => {
                let y = self.val(inputs[1]);
                let gx = need(0).then(|| g.iter().zip(y.data()).map(|(&a, &b)| a * b).collect());
                let gy = need(1).then(|| g.iter().zip(x.data()).map(|(&a, &b)| a * b).collect());
                vec![gx, gy]
            }
            OpKind::Scale(c) => {
                let c = T::from_f64(*c);
                vec![Some(g.iter().map(|&v| v * c).collect())]
            }
            OpKind::MatMul { trans_b } => {
                let y = self.val(inputs[1]);
                let d = matmul_dims(x.shape(), y.shape(), *trans_b)?;
                let mut gx = need(0).then(|| vec![T::zero(); x.len()]);
                let mut gy = need(1).then(|| vec![T::zero(); y.len()]);
                let rows = if d.shared_rhs { d.batch * d.m } else { d.m };
                let batches = if d.shared_rhs { 1 } else { d.batch };
                let (sa, sb, sc) = (rows * d.k, d.k * d.n, rows * d.n);
                for bi in 0..batches {
                    let a = &x.data()[bi * sa..(bi + 1) * sa];
                    let b = &y.data()[bi * sb..(bi + 1) * sb];
                    let gc = &g[bi * sc..(bi + 1) * sc];
                    if let Some(gx) = gx.as_mut() {
                        // dA = dC · op(B)^T
                        let ga = &mut gx[bi * sa..(bi + 1) * sa];
                        gemm(gc, b, ga, rows, d.n, d.k, false, !*trans_b, true);
                    }
                    if let Some(gy) = gy.as_mut() {
                        let gb = &mut gy[bi * sb..(bi + 1) * sb];
                        if *trans_b {
                            // B stored n×k: dB = dC^T · A
                            gemm(gc, a, gb, d.n, rows, d.k, true, false, true);
                        } else {
                            gemm(a, gc, gb, d.k, rows, d.n, true, false, true);
                        }
                    }
                }
                vec![gx, gy]
            }
            OpKind::SoftmaxLastDim => {
                let dlen = *x.shape().last().unwrap();
                let mut gx = Vec::with_capacity(g.len());
                for (yr, gr) in out.data().chunks(dlen).zip(g.chunks(dlen)) {
                    let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - s)));
                }
                vec![Some(gx)]
            }
            OpKind::LayerNormAffine { .. } => {
                let Saved::LayerNorm { xhat, rstd } = saved else {
                    return Err(Error::Internal("layer_norm lost its saved statistics".into()));
                };
                let gamma = self.val(inputs[1]);
                let dlen = gamma.len();
                let mut ggamma = vec![T::zero(); dlen];
                let mut gbeta = vec![T::zero(); dlen];
                let mut gx = vec![T::zero(); g.len()];
                let inv_d = T::one() / T::from_usize(dlen);
                for (r, (gr, hr)) in g.chunks(dlen).zip(xhat.chunks(dlen)).enumerate() {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..dlen {
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                        let dh = gr[j] * gamma.data()[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                    }
                    let out_row = &mut gx[r * dlen..(r + 1) * dlen];
                    for j in 0..dlen {
                        let dh = gr[j] * gamma.data()[j];
                        out_row[j] = rstd[r] * (dh - s1 * inv_d - hr[j] * s2 * inv_d);
                    }
                }
                vec![need(0).then_some(gx), need(1).then_some(ggamma), need(2).then_some(gbeta)]
            }
            OpKind::Gelu => {
                vec![Some(g.iter().zip(x.data()).map(|(&gv, &xv)| gv * kernels::gelu_grad(xv)).collect())]
            }
            OpKind::MeanOverAxes { axes } => {
                let (_, keep) = reduce_shape(x.shape(), axes)?;
                let count: usize = axes.iter().map(|&a| x.shape()[a]).product();
                let inv = T::one() / T::from_usize(count);
                let strides = keep_strides(x.shape(), &keep);
                let mut gx = vec![T::zero(); x.len()];
                kernels::for_each_offset(x.shape(), &strides, |lin, off| gx[lin] = g[off] * inv);
                vec![Some(gx)]
            }
            OpKind::ConcatAxis { axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<T>> = inputs.iter().map(|v| Vec::with_capacity(self.val(*v).len())).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (p, v) in parts.iter_mut().zip(inputs) {
                        let w = self.val(*v).shape()[*axis] * inner;
                        p.extend_from_slice(&g[pos..pos + w]);
                        pos += w;
                    }
                }
                parts.into_iter().map(Some).collect()
            }
            OpKind::SliceAxis { axis, start, end } => {
                let s = x.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let w = (end - start) * inner;
                let mut gx = vec![T::zero(); x.len()];
                for o in 0..outer {
                    let base = o * s[*axis] * inner + start * inner;
                    gx[base..base + w].copy_from_slice(&g[o * w..(o + 1) * w]);
                }
                vec![Some(gx)]
            }
            OpKind::BroadcastTo { shape } => {
                let strides = kernels::broadcast_strides(x.shape(), shape)
                    .ok_or_else(|| Error::Internal("broadcast shape changed".into()))?;
                let mut gx = vec![T::zero(); x.len()];
                kernels::for_each_offset(shape, &strides, |lin, off| gx[off] += g[lin]);
                vec![Some(gx)]
            }
            OpKind::SinusoidalEmbed { dim } => {
                let freqs = kernels::sinusoid_freqs(*dim);
                let half = dim / 2;
                let gx = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| {
                        let mut s = 0.0;
                        for (f, &w) in freqs.iter().enumerate() {
                            let a = t.to_f64() * w;
                            s += -w * a.sin() * g[i * dim + f].to_f64();
                            s += w * a.cos() * g[i * dim + half + f].to_f64();
                        }
                        T::from_f64(s)
                    })
                    .collect();
                vec![Some(gx)]
            }
            OpKind::Reshape { .. } => vec![Some(g.to_vec())],
            OpKind::Permute { perm } => {
                let (gx, _) = kernels::permute(g, out.shape(), &kernels::inverse_perm(perm));
                vec![Some(gx)]
            }
        })
    }
}

/// Ops that only rearrange or copy values and so cannot create a non-finite one.
fn moves_data_only(kind: &OpKind) -> bool {
    matches!(
        kind,
        OpKind::Reshape { .. }
            | OpKind::Permute { .. }
            | OpKind::SliceAxis { .. }
            | OpKind::ConcatAxis { .. }
            | OpKind::BroadcastTo { .. }
    )
}

fn op_name(kind: &OpKind) -> &'static str {
    match kind {
        OpKind::Add => "add",
        OpKind::Mul => "mul",
        OpKind::AddBias => "add_bias",
        OpKind::Scale(_) => "scale",
        OpKind::MatMul { .. } => "matmul",
        OpKind::SoftmaxLastDim => "softmax_lastdim",
        OpKind::LayerNormAffine { .. } => "layer_norm_affine",
        OpKind::Gelu => "gelu",
        OpKind::MeanOverAxes { .. } => "mean_over_axes",
        OpKind::ConcatAxis { .. } => "concat_axis",
        OpKind::SliceAxis { .. } => "slice_axis",
        OpKind::BroadcastTo { .. } => "broadcast_to",
        OpKind::SinusoidalEmbed { .. } => "sinusoidal_embed",
        OpKind::Reshape { .. } => "reshape",
        OpKind::Permute { .. } => "permute",
    }
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatMulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err!("matmul needs rank >= 2, got {a:?} x {b:?}"));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = if trans_b { (b[b.len() - 1], b[b.len() - 2]) } else { (b[b.len() - 2], b[b.len() - 1]) };
    if k != kb {
        return Err(shape_err!("matmul inner extents differ: {a:?} x {b:?} (trans_b={trans_b})"));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let shared_rhs = b_batch.is_empty();
    if !shared_rhs && a_batch != b_batch {
        return Err(shape_err!("matmul batch extents differ: {a:?} x {b:?}"));
    }
    let mut out_shape = a_batch.to_vec();
    out_shape.extend([m, n]);
    Ok(MatMulDims { batch: a_batch.iter().product(), m, k, n, shared_rhs, out_shape })
}

fn reduce_shape(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<bool>)> {
    let mut keep = vec![true; shape.len()];
    for &a in axes {
        if a >= shape.len() || !keep[a] {
            return Err(shape_err!("bad reduction axes {axes:?} for {shape:?}"));
        }
        keep[a] = false;
    }
    let mut out: Vec<usize> = shape.iter().zip(&keep).filter(|(_, &k)| k).map(|(&d, _)| d).collect();
    if out.is_empty() {
        out.push(1);
    }
    Ok((out, keep))
}

/// Strides into the reduced output, zero on reduced axes.
fn keep_strides(shape: &[usize], keep: &[bool]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if keep[i] {
            strides[i] = acc;
            acc *= shape[i];
        }
    }
    strides
}

fn concat_shape<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Vec<usize>> {
    let first = parts[0].shape();
    if axis >= first.len() {
        return Err(shape_err!("concat axis {axis} out of range for {first:?}"));
    }
    let mut shape = first.to_vec();
    shape[axis] = 0;
    for p in parts {
        let s = p.shape();
        let same = s.len() == first.len() && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(shape_err!("concat {s:?} with {first:?} on axis {axis}"));
        }
        shape[axis] += s[axis];
    }
    Ok(shape)
}

fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(shape_err!("permutation {perm:?} for rank {rank}"));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(shape_err!("invalid permutation {perm:?}"));
        }
        seen[p] = true;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
        assert!(!g.is_recorded(c));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros(&[3]));
        let s = g.softmax(a).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::<f64>::eye(3));
        let x = t(&[3, 4], &(0..12).map(|v| v as f64 * 0.5 - 2.0).collect::<Vec<_>>());
        let xv = g.constant(x.clone());
        let y = g.matmul(i, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros(&[2]));
        let b = g.constant(Tensor::<f64>::zeros(&[3]));
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
        let m = g.constant(Tensor::<f64>::zeros(&[2, 3]));
        assert!(matches!(g.matmul(m, m), Err(Error::Shape(_))));
        assert!(matches!(g.slice(m, 1, 2, 4), Err(Error::Shape(_))));
        assert!(matches!(g.permute(m, &[0, 0]), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(g.scale(a, 10.0), Err(Error::Numerics(_))));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let m = g.mean_all(sq).unwrap();
        let loss = g.scale(m, 3.0).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let c = g.constant(t(&[1], &[5.0]));
        let loss = g.scale(c, 2.0).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, -1.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.mean_all(sq).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -2.0]);
        g.zero_grad();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, -1.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f(x) = mean((x*x + x) * (x*x)) ; hand-expanded: (x^4 + x^3)/n
        // df/dx = (4x^3 + 3x^2)/n
        let xs = [0.5, -1.5, 2.0];
        let mut g = Graph::new();
        let x = g.param(t(&[3], &xs));
        let sq = g.mul(x, x).unwrap();
        let s = g.add(sq, x).unwrap();
        let p = g.mul(s, sq).unwrap();
        let loss = g.mean_all(p).unwrap();
        g.backward(loss).unwrap();
        for (gv, &xv) in g.grad(x).unwrap().iter().zip(&xs) {
            let want = (4.0 * xv * xv * xv + 3.0 * xv * xv) / 3.0;
            assert!((gv - want).abs() < 1e-12, "{gv} vs {want}");
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]));
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        for row in g.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_over_some_axes() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let m0 = g.mean(x, &[0]).unwrap();
        assert_eq!(g.value(m0).data(), &[2.5, 3.5, 4.5]);
        let m1 = g.mean(x, &[1]).unwrap();
        assert_eq!(g.value(m1).data(), &[2.0, 5.0]);
        let all = g.mean_all(x).unwrap();
        assert_eq!(g.value(all).shape(), &[1]);
    }

    #[test]
    fn concat_and_slice_invert() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]);
        let s = g.slice(c, 1, 1, 3).unwrap();
        assert_eq!(g.value(s), g.value(b));
    }

    #[test]
    fn broadcast_follows_numpy_rules() {
        let mut g = Graph::new();
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.broadcast_to(b, &[2, 3]).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let c = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let z = g.broadcast_to(c, &[2, 3]).unwrap();
        assert_eq!(g.value(z).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert!(g.broadcast_to(b, &[2, 4]).is_err());
    }

    #[test]
    fn add_bias_sums_gradient_over_rows() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[0.0; 6]).with_requires_grad(true));
        let b = g.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
        let w = g.constant(t(&[3, 3], &[0.0; 9]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = g.mean_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0 / 6.0; 3]);
        let bad = g.constant(t(&[2], &[0.0; 2]));
        assert!(g.apply(OpKind::AddBias, &[x, bad]).is_err());
    }
}
