//! Vector-Jacobian products for every recorded [`Op`].

use super::conv;
use super::graph::{inverse_permutation, permute_data, Graph, Op, Var};
use super::{broadcast_strides, for_each_broadcast, gemm, MatRef, Real};

pub(super) fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contribution: &[T]) {
    match slot {
        Some(g) => g.iter_mut().zip(contribution).for_each(|(a, &c)| *a += c),
        None => *slot = Some(contribution.to_vec()),
    }
}

fn accumulate_owned<T: Real>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, &c)| *a += c),
        None => *slot = Some(contribution),
    }
}

/// Sums `g` (shaped `out`) down to `target` for a broadcast operand,
/// weighting each term with `weight(out_index, other_index)`.
fn reduce_broadcast<T: Real>(
    g: &[T],
    out: &[usize],
    target: &[usize],
    other: &[usize],
    weight: impl Fn(usize, usize) -> T,
) -> Vec<T> {
    let mut acc = vec![T::zero(); target.iter().product()];
    let st = broadcast_strides(target, out);
    let so = broadcast_strides(other, out);
    for_each_broadcast(out, &st, &so, |o, i, j| acc[i] += g[o] * weight(o, j));
    acc
}

impl<T: Real> Graph<T> {
    pub(super) fn backprop_node(&mut self, i: usize, g: &[T]) {
        let Graph { nodes, grads } = self;
        let node = &nodes[i];
        let rg = |v: &Var| nodes[v.0].requires_grad;
        let val = |v: &Var| &nodes[v.0].value;
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if rg(a) {
                    let ga = if val(a).shape() == out_shape {
                        g.to_vec()
                    } else {
                        reduce_broadcast(g, out_shape, val(a).shape(), val(b).shape(), |_, _| T::one())
                    };
                    accumulate_owned(&mut grads[a.0], ga);
                }
                if rg(b) {
                    let mut gb = if val(b).shape() == out_shape {
                        g.to_vec()
                    } else {
                        reduce_broadcast(g, out_shape, val(b).shape(), val(a).shape(), |_, _| T::one())
                    };
                    if sign < T::zero() {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate_owned(&mut grads[b.0], gb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                if rg(a) {
                    let ga = if va.shape() == vb.shape() {
                        g.iter().zip(vb.data()).map(|(&x, &y)| x * y).collect()
                    } else {
                        reduce_broadcast(g, out_shape, va.shape(), vb.shape(), |_, j| vb.data()[j])
                    };
                    accumulate_owned(&mut grads[a.0], ga);
                }
                if rg(b) {
                    let gb = if va.shape() == vb.shape() {
                        g.iter().zip(va.data()).map(|(&x, &y)| x * y).collect()
                    } else {
                        reduce_broadcast(g, out_shape, vb.shape(), va.shape(), |_, j| va.data()[j])
                    };
                    accumulate_owned(&mut grads[b.0], gb);
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(a), val(b));
                let y = node.value.data();
                if rg(a) {
                    let ga = if va.shape() == vb.shape() {
                        g.iter().zip(vb.data()).map(|(&x, &d)| x / d).collect()
                    } else {
                        reduce_broadcast(g, out_shape, va.shape(), vb.shape(), |_, j| T::one() / vb.data()[j])
                    };
                    accumulate_owned(&mut grads[a.0], ga);
                }
                if rg(b) {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let gb = if va.shape() == vb.shape() {
                        g.iter()
                            .zip(y)
                            .zip(vb.data())
                            .map(|((&x, &q), &d)| -x * q / d)
                            .collect()
                    } else {
                        let mut acc = vec![T::zero(); vb.numel()];
                        let sb = broadcast_strides(vb.shape(), out_shape);
                        let sa = broadcast_strides(va.shape(), out_shape);
                        for_each_broadcast(out_shape, &sb, &sa, |o, j, _| {
                            acc[j] -= g[o] * y[o] / vb.data()[j];
                        });
                        acc
                    };
                    accumulate_owned(&mut grads[b.0], gb);
                }
            }
            Op::Scale(x, c) => {
                let gx: Vec<T> = g.iter().map(|&v| v * *c).collect();
                accumulate_owned(&mut grads[x.0], gx);
            }
            Op::AddScalar(x) | Op::Reshape(x) => accumulate(&mut grads[x.0], g),
            Op::Relu(x) => {
                let gx = zip_map(g, node.value.data(), |d, y| if y > T::zero() { d } else { T::zero() });
                accumulate_owned(&mut grads[x.0], gx);
            }
            Op::Sigmoid(x) => {
                let gx = zip_map(g, node.value.data(), |d, y| d * y * (T::one() - y));
                accumulate_owned(&mut grads[x.0], gx);
            }
            Op::Exp(x) => {
                let gx = zip_map(g, node.value.data(), |d, y| d * y);
                accumulate_owned(&mut grads[x.0], gx);
            }
            Op::Log { x, eps } => {
                let gx = zip_map(g, val(x).data(), |d, v| if v > *eps { d / v } else { T::zero() });
                accumulate_owned(&mut grads[x.0], gx);
            }
            Op::Sqrt(x) => {
                let two = T::lit(2.0);
                let gx = zip_map(g, node.value.data(), |d, y| d / (two * y));
                accumulate_owned(&mut grads[x.0], gx);
            }
            Op::Square(x) => {
                let two = T::lit(2.0);
                let gx = zip_map(g, val(x).data(), |d, v| two * v * d);
                accumulate_owned(&mut grads[x.0], gx);
            }
            Op::ClampMin { x, min } => {
                let gx = zip_map(g, val(x).data(), |d, v| if v > *min { d } else { T::zero() });
                accumulate_owned(&mut grads[x.0], gx);
            }
            Op::SumAll(x) => {
                let gx = vec![g[0]; val(x).numel()];
                accumulate_owned(&mut grads[x.0], gx);
            }
            Op::SumAxis { x, axis } => {
                let shape = val(x).shape();
                let outer: usize = shape[..*axis].iter().product();
                let n = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate_owned(&mut grads[x.0], gx);
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                let c = out_shape[1];
                let spatial: usize = out_shape[2..].iter().product();
                let len = c / groups * spatial;
                let gm = val(gamma).data();
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let mut gx = vec![T::zero(); g.len()];
                let n = T::lit(len as f64);
                for (blk, ((gr, hr), out)) in g.chunks(len).zip(xhat.chunks(len)).zip(gx.chunks_mut(len)).enumerate() {
                    let c0 = (blk % groups) * (c / groups);
                    let (mut m1, mut m2) = (T::zero(), T::zero());
                    for (k, (&gv, &h)) in gr.iter().zip(hr).enumerate() {
                        let ch = c0 + k / spatial;
                        ggamma[ch] += gv * h;
                        gbeta[ch] += gv;
                        let d = gv * gm[ch];
                        m1 += d;
                        m2 += d * h;
                    }
                    let (m1, m2, is) = (m1 / n, m2 / n, inv_std[blk]);
                    for (k, (o, (&gv, &h))) in out.iter_mut().zip(gr.iter().zip(hr)).enumerate() {
                        let d = gv * gm[c0 + k / spatial];
                        *o = is * (d - m1 - h * m2);
                    }
                }
                if rg(x) {
                    accumulate_owned(&mut grads[x.0], gx);
                }
                if rg(gamma) {
                    accumulate_owned(&mut grads[gamma.0], ggamma);
                }
                if rg(beta) {
                    accumulate_owned(&mut grads[beta.0], gbeta);
                }
            }
            Op::Softmax(x) => {
                let d = *out_shape.last().unwrap_or(&1);
                let y = node.value.data();
                let mut gx = vec![T::zero(); y.len()];
                if d > 0 {
                    for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - dot);
                        }
                    }
                }
                accumulate_owned(&mut grads[x.0], gx);
            }
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (val(a), val(b));
                let sa = va.shape();
                let sb = vb.shape();
                let r = sa.len();
                let (ra, ca, rb, cb) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
                let nb = if r == 3 { sa[0] } else { 1 };
                let (m, n) = (out_shape[r - 2], out_shape[r - 1]);
                if rg(a) {
                    let mut ga = vec![T::zero(); va.numel()];
                    for k in 0..nb {
                        let gk = MatRef::new(&g[k * m * n..(k + 1) * m * n], m, n, false);
                        let bk = &vb.data()[k * rb * cb..(k + 1) * rb * cb];
                        let dst = &mut ga[k * ra * ca..(k + 1) * ra * ca];
                        if *ta {
                            gemm(MatRef::new(bk, rb, cb, *tb), MatRef { transposed: true, ..gk }, dst, false);
                        } else {
                            gemm(gk, MatRef::new(bk, rb, cb, !*tb), dst, false);
                        }
                    }
                    accumulate_owned(&mut grads[a.0], ga);
                }
                if rg(b) {
                    let mut gb = vec![T::zero(); vb.numel()];
                    for k in 0..nb {
                        let gk = MatRef::new(&g[k * m * n..(k + 1) * m * n], m, n, false);
                        let ak = &va.data()[k * ra * ca..(k + 1) * ra * ca];
                        let dst = &mut gb[k * rb * cb..(k + 1) * rb * cb];
                        if *tb {
                            gemm(MatRef { transposed: true, ..gk }, MatRef::new(ak, ra, ca, *ta), dst, false);
                        } else {
                            gemm(MatRef::new(ak, ra, ca, !*ta), gk, dst, false);
                        }
                    }
                    accumulate_owned(&mut grads[b.0], gb);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let need_db = b.as_ref().is_some_and(rg);
                let res = conv::backward(
                    geom,
                    val(x).data(),
                    val(w).data(),
                    g,
                    rg(x),
                    rg(w),
                    need_db,
                );
                if let Some(dx) = res.dx {
                    accumulate_owned(&mut grads[x.0], dx);
                }
                if let Some(dw) = res.dw {
                    accumulate_owned(&mut grads[w.0], dw);
                }
                if let (Some(bv), Some(db)) = (b, res.db) {
                    accumulate_owned(&mut grads[bv.0], db);
                }
            }
            Op::Permute { x, perm } => {
                let inv = inverse_permutation(perm);
                let gx = permute_data(g, out_shape, &inv);
                accumulate_owned(&mut grads[x.0], gx);
            }
            Op::Concat { xs, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for v in xs {
                    let len = val(v).shape()[*axis] * inner;
                    if rg(v) {
                        let mut gv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gv.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        accumulate_owned(&mut grads[v.0], gv);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = val(x).shape();
                let outer: usize = shape[..*axis].iter().product();
                let n = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let len = out_shape[*axis];
                let mut gx = vec![T::zero(); val(x).numel()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate_owned(&mut grads[x.0], gx);
            }
        }
    }
}

fn zip_map<T: Real>(g: &[T], v: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    g.iter().zip(v).map(|(&a, &b)| f(a, b)).collect()
}
