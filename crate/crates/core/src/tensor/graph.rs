use super::conv::{self, ConvGeom};
use super::{broadcast_shape, broadcast_strides, for_each_broadcast, gemm, strides_of, MatRef, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(super) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log { x: Var, eps: T },
    Sqrt(Var),
    Square(Var),
    ClampMin { x: Var, min: T },
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    Softmax(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<T>, inv_std: Vec<T> },
}

pub(super) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// A single-threaded tape. Nodes are appended in evaluation order, so parents
/// always precede children and backward is a reverse sweep.
pub struct Graph<T: Real> {
    pub(super) nodes: Vec<Node<T>>,
    pub(super) grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Trainable leaf: gradients are accumulated into it by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
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

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = &self.nodes[x.0].value;
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v)).collect(),
        };
        self.push_op(value, op, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if va.shape == vb.shape {
            Tensor {
                shape: va.shape.clone(),
                data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        } else {
            let out = broadcast_shape(&va.shape, &vb.shape)
                .ok_or_else(|| Error::shape(name, &va.shape, &vb.shape))?;
            let sa = broadcast_strides(&va.shape, &out);
            let sb = broadcast_strides(&vb.shape, &out);
            let mut data = vec![T::zero(); out.iter().product()];
            for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(va.data[i], vb.data[j]));
            Tensor { shape: out, data }
        };
        Ok(self.push_op(value, op, &[a, b]))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log(&mut self, x: Var, eps: T) -> Var {
        self.unary(x, Op::Log { x, eps }, |v| v.max(eps).ln())
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn clamp_min(&mut self, x: Var, min: T) -> Var {
        self.unary(x, Op::ClampMin { x, min }, |v| v.max(min))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().copied().sum::<T>();
        self.push_op(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel();
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        if axis >= src.shape.len() {
            return Err(Error::Invalid(format!(
                "sum over axis {axis} of rank-{} tensor",
                src.shape.len()
            )));
        }
        let outer: usize = src.shape[..axis].iter().product();
        let n = src.shape[axis];
        let inner: usize = src.shape[axis + 1..].iter().product();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for k in 0..n {
                let row = &src.data[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut shape = src.shape.clone();
        shape.remove(axis);
        Ok(self.push_op(Tensor { shape, data }, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::Invalid(format!("mean over missing axis {axis}")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::lit(n as f64)))
    }

    /// Unbiased (n−1) variance along `axis`, removing it.
    pub fn variance_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .get(axis)
            .ok_or_else(|| Error::Invalid(format!("variance over missing axis {axis}")))?;
        if n < 2 {
            return Err(Error::Invalid(format!(
                "unbiased variance needs at least 2 samples along axis {axis}, got {n}"
            )));
        }
        let mean = self.mean_axis(x, axis)?;
        let mut keep = shape.clone();
        keep[axis] = 1;
        let mean = self.reshape(mean, &keep)?;
        let centered = self.sub(x, mean)?;
        let sq = self.square(centered);
        let s = self.sum_axis(sq, axis)?;
        Ok(self.scale(s, T::one() / T::lit((n - 1) as f64)))
    }

    pub fn frobenius_norm(&mut self, x: Var) -> Var {
        let sq = self.square(x);
        let s = self.sum_all(sq);
        self.sqrt(s)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let d = *src
            .shape
            .last()
            .ok_or_else(|| Error::Invalid("softmax of a scalar".into()))?;
        let mut data = src.data.clone();
        if d > 0 {
            for row in data.chunks_mut(d) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
        }
        let shape = src.shape.clone();
        Ok(self.push_op(Tensor { shape, data }, Op::Softmax(x), &[x]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// (Batched) matrix product of the last two axes, optionally transposing
    /// either operand. Rank-3 operands must share the leading batch extent.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let err = || Error::shape("matmul", &va.shape, &vb.shape);
        let (batch, ra, ca, rb, cb) = match (va.shape.as_slice(), vb.shape.as_slice()) {
            ([r1, c1], [r2, c2]) => (None, *r1, *c1, *r2, *c2),
            ([n1, r1, c1], [n2, r2, c2]) if n1 == n2 => (Some(*n1), *r1, *c1, *r2, *c2),
            _ => return Err(err()),
        };
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(err());
        }
        let nb = batch.unwrap_or(1);
        let mut data = vec![T::zero(); nb * m * n];
        for i in 0..nb {
            gemm(
                MatRef::new(&va.data[i * ra * ca..(i + 1) * ra * ca], ra, ca, ta),
                MatRef::new(&vb.data[i * rb * cb..(i + 1) * rb * cb], rb, cb, tb),
                &mut data[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let shape = match batch {
            Some(nb) => vec![nb, m, n],
            None => vec![m, n],
        };
        Ok(self.push_op(Tensor { shape, data }, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    /// 2D convolution over NCHW input with square `(O, C, k, k)` kernels.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let geom = ConvGeom::new(&vx.shape, &vw.shape, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", &vx.shape, &vw.shape))?;
        let bias = match b {
            Some(bv) => {
                let vb = &self.nodes[bv.0].value;
                if vb.shape != [geom.out_c] {
                    return Err(Error::shape("conv2d bias", &vb.shape, &[geom.out_c]));
                }
                Some(vb.data.as_slice())
            }
            None => None,
        };
        let data = conv::forward(&geom, &vx.data, &vw.data, bias);
        let shape = vec![geom.batch, geom.out_c, geom.out_h, geom.out_w];
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push_op(Tensor { shape, data }, Op::Conv2d { x, w, b, geom }, &parents))
    }

    /// Group normalization of `B × C × …` input over each sample's channel
    /// groups, followed by the per-channel affine map `gamma`, `beta` (`[C]`).
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let (vg, vb) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if vx.shape.len() < 2 || groups == 0 || !vx.shape[1].is_multiple_of(groups) {
            return Err(Error::Invalid(format!("group_norm: {groups} groups for shape {:?}", vx.shape)));
        }
        let c = vx.shape[1];
        if vg.shape != [c] || vb.shape != [c] {
            return Err(Error::shape("group_norm", &vg.shape, &[c]));
        }
        let spatial: usize = vx.shape[2..].iter().product();
        let len = c / groups * spatial;
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut inv_std = Vec::with_capacity(vx.numel() / len.max(1));
        let mut data = vec![T::zero(); vx.numel()];
        for (blk, (src, dst)) in vx.data.chunks(len).zip(xhat.chunks_mut(len)).enumerate() {
            let n = T::lit(len as f64);
            let mean = src.iter().copied().sum::<T>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - mean) * is;
            }
            let c0 = (blk % groups) * (c / groups);
            for (k, (o, &h)) in data[blk * len..(blk + 1) * len].iter_mut().zip(dst.iter()).enumerate() {
                let ch = c0 + k / spatial;
                *o = h * vg.data[ch] + vb.data[ch];
            }
        }
        let shape = vx.shape.clone();
        Ok(self.push_op(
            Tensor { shape, data },
            Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std },
            &[x, gamma, beta],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != src.numel() {
            return Err(Error::shape("reshape", &src.shape, shape));
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: src.data.clone(),
        };
        Ok(self.push_op(value, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let rank = src.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Invalid(format!(
                "invalid permutation {perm:?} for shape {:?}",
                src.shape
            )));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| src.shape[p]).collect();
        let data = permute_data(&src.data, &src.shape, perm);
        Ok(self.push_op(Tensor { shape, data }, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Invalid(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = &self.nodes[v.0].value;
                let len = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push_op(Tensor { shape, data }, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        if axis >= src.shape.len() || start + len > src.shape[axis] {
            return Err(Error::Invalid(format!(
                "slice [{start}, {}) on axis {axis} of shape {:?}",
                start + len,
                src.shape
            )));
        }
        let outer: usize = src.shape[..axis].iter().product();
        let n = src.shape[axis];
        let inner: usize = src.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src.data[base..base + len * inner]);
        }
        let mut shape = src.shape.clone();
        shape[axis] = len;
        Ok(self.push_op(Tensor { shape, data }, Op::Slice { x, axis, start }, &[x]))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        // intermediate gradients from a previous sweep are stale
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        super::backward::accumulate(&mut self.grads[loss.0], &[T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
        }
        Ok(())
    }
}

pub(super) fn permute_data<T: Copy + Default>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![T::default(); data.len()];
    if data.is_empty() {
        return out;
    }
    if rank == 0 {
        out[0] = data[0];
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let inner = out_shape[rank - 1];
    let step = src_strides[rank - 1];
    let mut o = 0;
    loop {
        let mut s = off;
        for _ in 0..inner {
            out[o] = data[s];
            o += 1;
            s += step;
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub(super) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks every input gradient of `f` against central differences.
    fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars);
        // a fixed random weighting makes every output entry matter
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(g.shape(out), &mut rng);
        let wv = g.constant(w);
        let weighted = g.mul(out, wv).unwrap();
        let loss = g.sum_all(weighted);
        g.backward(loss).unwrap();
        let weights = g.value(wv).clone();
        let eval_w = |xs: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
            let out = f(&mut g, &vars);
            let wv = g.constant(weights.clone());
            let m = g.mul(out, wv).unwrap();
            let s = g.sum_all(m);
            g.value(s).item()
        };
        let h = 1e-6;
        for (k, v) in vars.iter().enumerate() {
            let analytic = g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
            for e in 0..inputs[k].numel() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[e] -= h;
                let num = (eval_w(&plus) - eval_w(&minus)) / (2.0 * h);
                let a = analytic[e];
                assert!(
                    (a - num).abs() <= 1e-6 * (1.0 + num.abs()),
                    "input {k} entry {e}: analytic {a} vs numeric {num}"
                );
            }
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn broadcast_arithmetic_gradients() {
        let mut r = rng();
        let a = random(&[2, 3, 4], &mut r);
        let b = random(&[3, 1], &mut r);
        check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap());
        check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap());
        check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
        let pos = Tensor::new(&[3, 1], b.data().iter().map(|x| x.abs() + 0.5).collect()).unwrap();
        check(vec![a, pos], |g, v| g.div(v[0], v[1]).unwrap());
    }

    #[test]
    fn group_norm_gradients_and_moments() {
        let mut r = rng();
        let x = random(&[2, 4, 3, 3], &mut r);
        let gamma = random(&[4], &mut r);
        let beta = random(&[4], &mut r);
        check(vec![x.clone(), gamma, beta], |g, v| g.group_norm(v[0], v[1], v[2], 2, 1e-5).unwrap());
        let mut g = Graph::new();
        let xv = g.constant(x);
        let one = g.constant(Tensor::full(&[4], 1.0));
        let zero = g.constant(Tensor::zeros(&[4]));
        let y = g.group_norm(xv, one, zero, 2, 0.0).unwrap();
        for grp in g.value(y).data().chunks(18) {
            let mean = grp.iter().sum::<f64>() / 18.0;
            let var = grp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
        assert!(g.group_norm(xv, one, zero, 3, 1e-5).is_err());
    }

    #[test]
    fn unary_gradients() {
        let mut r = rng();
        let x = random(&[3, 5], &mut r);
        check(vec![x.clone()], |g, v| g.scale(v[0], 2.5));
        check(vec![x.clone()], |g, v| g.add_scalar(v[0], 0.3));
        check(vec![x.clone()], |g, v| g.relu(v[0]));
        check(vec![x.clone()], |g, v| g.sigmoid(v[0]));
        check(vec![x.clone()], |g, v| g.exp(v[0]));
        check(vec![x.clone()], |g, v| g.square(v[0]));
        check(vec![x.clone()], |g, v| g.clamp_min(v[0], 0.1));
        let pos = Tensor::new(&[3, 5], x.data().iter().map(|v| v.abs() + 0.2).collect()).unwrap();
        check(vec![pos.clone()], |g, v| g.sqrt(v[0]));
        check(vec![pos], |g, v| g.log(v[0], 1e-8));
    }

    #[test]
    fn reduction_gradients() {
        let mut r = rng();
        let x = random(&[2, 3, 4], &mut r);
        for axis in 0..3 {
            check(vec![x.clone()], move |g, v| g.sum_axis(v[0], axis).unwrap());
            check(vec![x.clone()], move |g, v| g.mean_axis(v[0], axis).unwrap());
            check(vec![x.clone()], move |g, v| g.variance_axis(v[0], axis).unwrap());
        }
        check(vec![x.clone()], |g, v| g.mean_all(v[0]));
        check(vec![x.clone()], |g, v| g.frobenius_norm(v[0]));
        check(vec![x], |g, v| g.softmax(v[0]).unwrap());
    }

    #[test]
    fn matmul_gradients_all_transpositions() {
        let mut r = rng();
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = random(if ta { &[4, 3] } else { &[3, 4] }, &mut r);
            let b = random(if tb { &[2, 4] } else { &[4, 2] }, &mut r);
            check(vec![a, b], move |g, v| g.matmul_t(v[0], v[1], ta, tb).unwrap());
            let a = random(if ta { &[2, 4, 3] } else { &[2, 3, 4] }, &mut r);
            let b = random(if tb { &[2, 5, 4] } else { &[2, 4, 5] }, &mut r);
            check(vec![a, b], move |g, v| g.matmul_t(v[0], v[1], ta, tb).unwrap());
        }
    }

    #[test]
    fn conv_gradients() {
        let mut r = rng();
        let x = random(&[2, 2, 5, 5], &mut r);
        let w = random(&[3, 2, 3, 3], &mut r);
        let b = random(&[3], &mut r);
        check(vec![x.clone(), w.clone(), b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap());
        check(vec![x, w], |g, v| g.conv2d(v[0], v[1], None, 1, 0).unwrap());
    }

    #[test]
    fn layout_gradients() {
        let mut r = rng();
        let x = random(&[2, 3, 4], &mut r);
        let y = random(&[2, 1, 4], &mut r);
        check(vec![x.clone()], |g, v| g.reshape(v[0], &[6, 4]).unwrap());
        check(vec![x.clone()], |g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
        check(vec![x.clone(), y], |g, v| g.concat(&[v[0], v[1]], 1).unwrap());
        check(vec![x], |g, v| g.slice(v[0], 2, 1, 2).unwrap());
    }

    #[test]
    fn shared_inputs_accumulate() {
        let mut r = rng();
        let x = random(&[4], &mut r);
        check(vec![x], |g, v| {
            let s = g.sigmoid(v[0]);
            let p = g.mul(s, v[0]).unwrap();
            g.add(p, v[0]).unwrap()
        });
    }

    #[test]
    fn backward_rejects_non_scalar_and_leaf_grads_accumulate() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        assert!(g.backward(x).is_err());
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        assert!(g.matmul(a, a).is_err());
        assert!(g.reshape(a, &[5]).is_err());
    }
}
