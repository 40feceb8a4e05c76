//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough
//! information to run the vector-Jacobian product later. Node indices are a
//! topological order by construction, so [`Tape::backward`] walks the tape in
//! reverse once. Gradients accumulate additively when a value is reused.

use crate::error::{dim_err, Error, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{
    broadcast_shapes, broadcast_strides, for_each_strided, strides, Element, Tensor,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<E> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    MatMul(Var, Var),
    Gelu(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<E>,
        rstd: Vec<E>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastTo(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    IndexSelect(Var, Vec<usize>),
    Sum(Var),
    SumAxis(Var, usize),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        ignore: usize,
        probs: Vec<E>,
        count: usize,
    },
    Focal {
        logits: Var,
        labels: Vec<usize>,
        gamma: E,
        probs: Vec<E>,
    },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Recording of a forward computation.
pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves that requested them, produced by [`Tape::backward`].
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Only leaves with `requires_grad` receive
    /// gradients.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(E, E) -> E) -> Result<Tensor<E>> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shapes(ta.shape(), tb.shape())?;
        let xa = expand(ta, &shape);
        let xb = expand(tb, &shape);
        let data = xa.iter().zip(&xb).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(&shape, data)
    }

    pub fn scale(&mut self, a: Var, s: E) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// GELU using the exact Gaussian CDF.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    // ---- linear algebra ----------------------------------------------------

    /// Batched matrix product `[..., m, k] × [..., k, n] -> [..., m, n]` with
    /// broadcasting over the leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.value(a).shape(), self.value(b).shape())?;
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![E::ZERO; plan.out_shape.iter().product()];
        let (m, k, n) = (plan.m, plan.k, plan.n);
        plan.for_each_batch(|bi, ao, bo| {
            gemm_nn(
                m,
                k,
                n,
                &ta[ao * m * k..(ao + 1) * m * k],
                &tb[bo * k * n..(bo + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        });
        let value = Tensor::new(&plan.out_shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Softmax along `axis`, computed with the row maximum subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return dim_err(format!(
                "softmax axis {axis} out of range for shape {:?}",
                t.shape()
            ));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = out[base];
                for j in 1..len {
                    mx = mx.max(out[base + j * inner]);
                }
                let mut sum = E::ZERO;
                for j in 0..len {
                    let e = (out[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                let inv = E::ONE / sum;
                for j in 0..len {
                    out[base + j * inner] *= inv;
                }
            }
        }
        let value = Tensor::new(t.shape(), out)?;
        Ok(self.push(value, Op::Softmax(x, axis), &[x]))
    }

    /// Layer normalisation over the last axis followed by `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: E) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap_or(&0);
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [d] {
                return dim_err(format!(
                    "layer_norm {name} has shape {:?}, input last dim is {d} (input {:?})",
                    self.shape(p),
                    t.shape()
                ));
            }
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = t.numel() / d;
        let dn = E::from_f64(d as f64);
        let mut xhat = vec![E::ZERO; t.numel()];
        let mut rstd = vec![E::ZERO; rows];
        let mut out = vec![E::ZERO; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<E>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / dn;
            let rs = E::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + bt[j];
            }
        }
        let value = Tensor::new(t.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(perm)?;
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// Materialises `x` broadcast to `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if broadcast_shapes(src.shape(), shape)? != shape {
            return dim_err(format!("cannot broadcast {:?} to {shape:?}", src.shape()));
        }
        let value = Tensor::new(shape, expand(src, shape))?;
        Ok(self.push(value, Op::BroadcastTo(x), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return dim_err(format!(
                "concat axis {axis} out of range for shape {base:?}"
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return dim_err(format!("concat along {axis} of {base:?} and {s:?}"));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return dim_err(format!(
                "narrow({axis}, {start}, {len}) out of range for shape {:?}",
                t.shape()
            ));
        }
        let (outer, full, inner) = split_axis(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&t.data()[from..from + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Gathers rows (axis 0) of `x`.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 || indices.is_empty() {
            return dim_err("index_select needs a ranked tensor and at least one index");
        }
        let rows = t.shape()[0];
        let width = t.numel() / rows;
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return dim_err(format!("row index {i} out of range for {rows} rows"));
            }
            out.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::IndexSelect(x, indices.to_vec()), &[x]))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || t.rank() < 2 {
            return dim_err(format!("sum_axis({axis}) on shape {:?}", t.shape()));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = vec![E::ZERO; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &t.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::SumAxis(x, axis), &[x]))
    }

    // ---- losses ------------------------------------------------------------

    /// Softmax cross-entropy over the last axis, averaged over rows whose
    /// label differs from `ignore`. Returns 0 when every row is ignored.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        ignore: usize,
    ) -> Result<Var> {
        let t = self.value(logits);
        let k = *t.shape().last().unwrap_or(&0);
        let rows = t.numel() / k.max(1);
        if t.rank() < 1 || rows != labels.len() {
            return dim_err(format!(
                "{} labels for logits of shape {:?}",
                labels.len(),
                t.shape()
            ));
        }
        let probs = row_softmax(t.data(), k);
        let mut loss = E::ZERO;
        let mut count = 0;
        for (r, &y) in labels.iter().enumerate() {
            if y == ignore {
                continue;
            }
            if y >= k {
                return Err(Error::Data(format!(
                    "label {y} at row {r} outside [0, {k}) and not the ignore label {ignore}"
                )));
            }
            loss -= log_prob(&t.data()[r * k..(r + 1) * k], y);
            count += 1;
        }
        if count > 0 {
            loss = loss / E::from_f64(count as f64);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Focal loss `-(1 - p_y)^gamma · ln p_y` averaged over rows.
    pub fn focal_loss(&mut self, logits: Var, labels: &[usize], gamma: E) -> Result<Var> {
        let t = self.value(logits);
        let k = *t.shape().last().unwrap_or(&0);
        let rows = t.numel() / k.max(1);
        if rows != labels.len() {
            return dim_err(format!(
                "{} labels for logits of shape {:?}",
                labels.len(),
                t.shape()
            ));
        }
        let probs = row_softmax(t.data(), k);
        let mut loss = E::ZERO;
        for (r, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::Data(format!(
                    "label {y} at row {r} outside [0, {k})"
                )));
            }
            let p = probs[r * k + y];
            let logp = log_prob(&t.data()[r * k..(r + 1) * k], y);
            loss -= focal_weight(E::ONE - p, gamma) * logp;
        }
        loss = loss / E::from_f64(rows as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Focal {
                logits,
                labels: labels.to_vec(),
                gamma,
                probs,
            },
            &[logits],
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Runs the reverse pass from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<E>> {
        let nodes = self.nodes;
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), E::ONE));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let g = g.data();
            let out = &node.value;
            let val = |v: Var| &nodes[v.0].value;
            let wants = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -E::ONE
                    } else {
                        E::ONE
                    };
                    if wants(*a) {
                        reduce_into(
                            buf(&mut grads, *a, val(*a).shape()),
                            val(*a).shape(),
                            out.shape(),
                            g,
                            E::ONE,
                        );
                    }
                    if wants(*b) {
                        reduce_into(
                            buf(&mut grads, *b, val(*b).shape()),
                            val(*b).shape(),
                            out.shape(),
                            g,
                            sign,
                        );
                    }
                }
                Op::Mul(a, b) => {
                    for (this, other) in [(*a, *b), (*b, *a)] {
                        if wants(this) {
                            let o = expand(val(other), out.shape());
                            let prod: Vec<E> = g.iter().zip(&o).map(|(&x, &y)| x * y).collect();
                            reduce_into(
                                buf(&mut grads, this, val(this).shape()),
                                val(this).shape(),
                                out.shape(),
                                &prod,
                                E::ONE,
                            );
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let dst = buf(&mut grads, *a, out.shape());
                    for (d, &x) in dst.iter_mut().zip(g) {
                        *d += x * *s;
                    }
                }
                Op::MatMul(a, b) => {
                    let plan = MatmulPlan::new(val(*a).shape(), val(*b).shape())?;
                    let (m, k, n) = (plan.m, plan.k, plan.n);
                    if wants(*a) {
                        let tb = val(*b).data();
                        let dst = buf(&mut grads, *a, val(*a).shape());
                        plan.for_each_batch(|bi, ao, bo| {
                            gemm_nt(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                &tb[bo * k * n..(bo + 1) * k * n],
                                &mut dst[ao * m * k..(ao + 1) * m * k],
                            );
                        });
                    }
                    if wants(*b) {
                        let ta = val(*a).data();
                        let dst = buf(&mut grads, *b, val(*b).shape());
                        plan.for_each_batch(|bi, ao, bo| {
                            gemm_tn(
                                m,
                                k,
                                n,
                                &ta[ao * m * k..(ao + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut dst[bo * k * n..(bo + 1) * k * n],
                            );
                        });
                    }
                }
                Op::Gelu(a) => {
                    let x = val(*a).data();
                    let dst = buf(&mut grads, *a, out.shape());
                    for ((d, &gi), &xi) in dst.iter_mut().zip(g).zip(x) {
                        *d += gi * gelu_grad(xi);
                    }
                }
                Op::Softmax(a, axis) => {
                    let y = out.data();
                    let (outer, len, inner) = split_axis(out.shape(), *axis);
                    let dst = buf(&mut grads, *a, out.shape());
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut s = E::ZERO;
                            for j in 0..len {
                                let at = base + j * inner;
                                s += g[at] * y[at];
                            }
                            for j in 0..len {
                                let at = base + j * inner;
                                dst[at] += y[at] * (g[at] - s);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = *out.shape().last().unwrap();
                    let rows = out.numel() / d;
                    if wants(*beta) {
                        let dst = buf(&mut grads, *beta, &[d]);
                        for r in 0..rows {
                            for j in 0..d {
                                dst[j] += g[r * d + j];
                            }
                        }
                    }
                    if wants(*gamma) {
                        let dst = buf(&mut grads, *gamma, &[d]);
                        for r in 0..rows {
                            for j in 0..d {
                                dst[j] += g[r * d + j] * xhat[r * d + j];
                            }
                        }
                    }
                    if wants(*x) {
                        let gm = val(*gamma).data();
                        let dn = E::from_f64(d as f64);
                        let dst = buf(&mut grads, *x, out.shape());
                        let mut dxh = vec![E::ZERO; d];
                        for r in 0..rows {
                            let mut mean_dxh = E::ZERO;
                            let mut mean_dxh_xh = E::ZERO;
                            for j in 0..d {
                                dxh[j] = g[r * d + j] * gm[j];
                                mean_dxh += dxh[j];
                                mean_dxh_xh += dxh[j] * xhat[r * d + j];
                            }
                            mean_dxh = mean_dxh / dn;
                            mean_dxh_xh = mean_dxh_xh / dn;
                            for j in 0..d {
                                dst[r * d + j] +=
                                    rstd[r] * (dxh[j] - mean_dxh - xhat[r * d + j] * mean_dxh_xh);
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    let dst = buf(&mut grads, *a, val(*a).shape());
                    for (d, &x) in dst.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                Op::Permute(a, perm) => {
                    // out axis i is input axis perm[i]; scatter back through the
                    // input strides.
                    let in_strides = strides(val(*a).shape());
                    let scatter: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                    let dst = buf(&mut grads, *a, val(*a).shape());
                    for_each_strided(out.shape(), &scatter, |o, s| dst[s] += g[o]);
                }
                Op::BroadcastTo(a) => {
                    let dst = buf(&mut grads, *a, val(*a).shape());
                    reduce_into(dst, val(*a).shape(), out.shape(), g, E::ONE);
                }
                Op::Concat(parts, axis) => {
                    let outer: usize = out.shape()[..*axis].iter().product();
                    let inner: usize = out.shape()[axis + 1..].iter().product();
                    let row = out.shape()[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let chunk = val(p).shape()[*axis] * inner;
                        if wants(p) {
                            let dst = buf(&mut grads, p, val(p).shape());
                            for o in 0..outer {
                                let src = &g[o * row + offset..o * row + offset + chunk];
                                for (d, &x) in dst[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                    *d += x;
                                }
                            }
                        }
                        offset += chunk;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let (outer, full, inner) = split_axis(val(*x).shape(), *axis);
                    let len = out.shape()[*axis];
                    let dst = buf(&mut grads, *x, val(*x).shape());
                    for o in 0..outer {
                        let to = (o * full + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, &v) in dst[to..to + len * inner].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                Op::IndexSelect(a, indices) => {
                    let width = out.numel() / indices.len();
                    let dst = buf(&mut grads, *a, val(*a).shape());
                    for (r, &i) in indices.iter().enumerate() {
                        for (d, &v) in dst[i * width..(i + 1) * width]
                            .iter_mut()
                            .zip(&g[r * width..(r + 1) * width])
                        {
                            *d += v;
                        }
                    }
                }
                Op::Sum(a) => {
                    let dst = buf(&mut grads, *a, val(*a).shape());
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::SumAxis(a, axis) => {
                    let (outer, len, inner) = split_axis(val(*a).shape(), *axis);
                    let dst = buf(&mut grads, *a, val(*a).shape());
                    for o in 0..outer {
                        for j in 0..len {
                            let d = &mut dst[(o * len + j) * inner..(o * len + j + 1) * inner];
                            for (x, &v) in d.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *x += v;
                            }
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    ignore,
                    probs,
                    count,
                } => {
                    let k = *val(*logits).shape().last().unwrap();
                    let dst = buf(&mut grads, *logits, val(*logits).shape());
                    if *count > 0 {
                        let w = g[0] / E::from_f64(*count as f64);
                        for (r, &y) in labels.iter().enumerate() {
                            if y == *ignore {
                                continue;
                            }
                            for j in 0..k {
                                let onehot = if j == y { E::ONE } else { E::ZERO };
                                dst[r * k + j] += w * (probs[r * k + j] - onehot);
                            }
                        }
                    }
                }
                Op::Focal {
                    logits,
                    labels,
                    gamma,
                    probs,
                } => {
                    let k = *val(*logits).shape().last().unwrap();
                    let z = val(*logits).data();
                    let w = g[0] / E::from_f64(labels.len() as f64);
                    let dst = buf(&mut grads, *logits, val(*logits).shape());
                    for (r, &y) in labels.iter().enumerate() {
                        let p = probs[r * k + y];
                        let q = E::ONE - p;
                        let logp = log_prob(&z[r * k..(r + 1) * k], y);
                        // dL/dp for L = -(1-p)^γ ln p
                        let lead = if *gamma == E::ZERO || q == E::ZERO {
                            E::ZERO
                        } else {
                            *gamma * focal_weight(q, *gamma - E::ONE) * logp
                        };
                        let dl_dp = lead - focal_weight(q, *gamma) / p;
                        for j in 0..k {
                            let onehot = if j == y { E::ONE } else { E::ZERO };
                            dst[r * k + j] += w * dl_dp * p * (onehot - probs[r * k + j]);
                        }
                    }
                }
            }
        }

        // keep only the leaves that asked for gradients
        for (i, node) in nodes.iter().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn buf<'a, E: Element>(grads: &'a mut [Option<Tensor<E>>], v: Var, shape: &[usize]) -> &'a mut [E] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

/// Accumulates `scale · g` (shaped `out`) into `dst` (shaped `src`), summing
/// over axes where `src` was broadcast.
fn reduce_into<E: Element>(dst: &mut [E], src: &[usize], out: &[usize], g: &[E], scale: E) {
    if src == out {
        for (d, &x) in dst.iter_mut().zip(g) {
            *d += scale * x;
        }
        return;
    }
    let st = broadcast_strides(out, src);
    for_each_strided(out, &st, |o, s| dst[s] += scale * g[o]);
}

fn expand<E: Element>(t: &Tensor<E>, shape: &[usize]) -> Vec<E> {
    if t.shape() == shape {
        return t.data().to_vec();
    }
    let st = broadcast_strides(shape, t.shape());
    let mut out = Vec::with_capacity(shape.iter().product());
    let src = t.data();
    for_each_strided(shape, &st, |_, s| out.push(src[s]));
    out
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn row_softmax<E: Element>(z: &[E], k: usize) -> Vec<E> {
    let mut out = z.to_vec();
    for row in out.chunks_mut(k) {
        let mx = row.iter().copied().fold(row[0], E::max);
        let mut s = E::ZERO;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    out
}

fn log_prob<E: Element>(row: &[E], y: usize) -> E {
    let mx = row.iter().copied().fold(row[0], E::max);
    let lse = row.iter().map(|&v| (v - mx).exp()).sum::<E>().ln();
    row[y] - mx - lse
}

fn focal_weight<E: Element>(q: E, gamma: E) -> E {
    if gamma == E::ZERO {
        E::ONE
    } else {
        q.powf(gamma)
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu<E: Element>(x: E) -> E {
    let half = E::from_f64(0.5);
    half * x * (E::ONE + (x * E::from_f64(FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<E: Element>(x: E) -> E {
    let half = E::from_f64(0.5);
    let cdf = half * (E::ONE + (x * E::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = E::from_f64(FRAC_1_SQRT_2PI) * (-half * x * x).exp();
    cdf + x * pdf
}

/// Batch bookkeeping for broadcast matrix products.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    batch: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return dim_err(format!("matmul needs rank >= 2, got {a:?} x {b:?}"));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return dim_err(format!("matmul inner dimensions differ: {a:?} x {b:?}"));
        }
        let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let batch = broadcast_shapes(ab, bb).map_err(|_| {
            Error::Dimension(format!("matmul batch dims do not broadcast: {a:?} x {b:?}"))
        })?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        Ok(Self {
            m,
            k,
            n,
            a_strides: broadcast_strides(&batch, ab),
            b_strides: broadcast_strides(&batch, bb),
            batch,
            out_shape,
        })
    }

    /// Calls `f(out_matrix, a_matrix, b_matrix)` for each batch entry in order.
    fn for_each_batch(&self, mut f: impl FnMut(usize, usize, usize)) {
        if self.batch.is_empty() {
            f(0, 0, 0);
            return;
        }
        let mut a_off = Vec::with_capacity(self.batch.iter().product());
        for_each_strided(&self.batch, &self.a_strides, |_, s| a_off.push(s));
        let mut i = 0;
        for_each_strided(&self.batch, &self.b_strides, |o, s| {
            f(o, a_off[i], s);
            i += 1;
        });
    }
}
