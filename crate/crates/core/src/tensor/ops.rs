//! Differentiable tensor operations.
//!
//! Each op computes its forward value eagerly and, when any input carries
//! gradient, records a backward closure over the parent handles. Broadcasting
//! is deliberately limited to leading batch dimensions and scalar operands.

use super::{Node, Result, Scalar, Tensor, TensorError};

// ── shape helpers ────────────────────────────────────────────────────

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// How the smaller operand maps onto the larger in an elementwise op.
#[derive(Clone, Copy, PartialEq)]
enum Spread {
    Same,
    /// rhs is a scalar or a suffix of lhs, repeated over leading dims
    RhsOntoLhs,
    /// lhs is a scalar or a suffix of rhs
    LhsOntoRhs,
}

fn spread_of(lhs: &[usize], rhs: &[usize]) -> Option<Spread> {
    if lhs == rhs {
        return Some(Spread::Same);
    }
    let ln: usize = lhs.iter().product();
    let rn: usize = rhs.iter().product();
    if rn == 1 {
        return Some(Spread::RhsOntoLhs);
    }
    if ln == 1 {
        return Some(Spread::LhsOntoRhs);
    }
    if rhs.len() <= lhs.len() && &lhs[lhs.len() - rhs.len()..] == rhs {
        return Some(Spread::RhsOntoLhs);
    }
    if lhs.len() <= rhs.len() && &rhs[rhs.len() - lhs.len()..] == lhs {
        return Some(Spread::LhsOntoRhs);
    }
    None
}

/// Fold a cotangent of `out_len` elements down to an operand repeated with
/// period `period` (scalar operands have period 1 via chunk summing).
fn reduce_to_period<E: Scalar>(g: &[E], period: usize) -> Vec<E> {
    if g.len() == period {
        return g.to_vec();
    }
    let mut out = vec![E::zero(); period];
    for chunk in g.chunks_exact(period) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn elementwise_forward<E: Scalar>(
    a: &[E],
    b: &[E],
    spread: Spread,
    f: impl Fn(E, E) -> E,
) -> Vec<E> {
    match spread {
        Spread::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Spread::RhsOntoLhs => {
            let p = b.len();
            a.iter()
                .enumerate()
                .map(|(i, &x)| f(x, b[i % p]))
                .collect()
        }
        Spread::LhsOntoRhs => {
            let p = a.len();
            b.iter()
                .enumerate()
                .map(|(i, &y)| f(a[i % p], y))
                .collect()
        }
    }
}

// ── matmul kernels ───────────────────────────────────────────────────

/// c += a(m,k) @ b(k,n)
fn matmul_acc<E: Scalar>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// da += g(m,n) @ b(k,n)^T
fn matmul_nt_acc<E: Scalar>(da: &mut [E], g: &[E], b: &[E], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for (p, dv) in darow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = E::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            *dv += s;
        }
    }
}

/// db += a(m,k)^T @ g(m,n)
fn matmul_tn_acc<E: Scalar>(db: &mut [E], a: &[E], g: &[E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (dv, &gv) in dbrow.iter_mut().zip(grow) {
                *dv += av * gv;
            }
        }
    }
}

fn permute_raw<E: Scalar>(data: &[E], shape: &[usize], perm: &[usize]) -> (Vec<E>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let out_strides = strides_of(&out_shape);
    let n = data.len();
    let mut out = vec![E::zero(); n];
    // walk output coordinates, reading from the permuted input position
    let mut coords = vec![0usize; rank];
    for (oi, slot) in out.iter_mut().enumerate() {
        let mut rem = oi;
        for d in 0..rank {
            coords[d] = rem / out_strides[d];
            rem %= out_strides[d];
        }
        let mut ii = 0;
        for d in 0..rank {
            ii += coords[d] * in_strides[perm[d]];
        }
        *slot = data[ii];
    }
    (out, out_shape)
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (d, &p) in perm.iter().enumerate() {
        inv[p] = d;
    }
    inv
}

impl<E: Scalar> Tensor<E> {
    fn unary_op(
        &self,
        data: Vec<E>,
        shape: Vec<usize>,
        backward: impl Fn(&Tensor<E>, &[E]) + 'static,
    ) -> Tensor<E> {
        if self.needs_grad() {
            let parent = self.clone();
            let node = Node {
                parents: vec![self.clone()],
                backward: Box::new(move |g: &[E]| backward(&parent, g)),
            };
            Tensor::build(data, shape, false, Some(node))
        } else {
            Tensor::build(data, shape, false, None)
        }
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary_elementwise(rhs, |x, y| x + y, BinaryKind::Add)
    }

    pub fn sub(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary_elementwise(rhs, |x, y| x - y, BinaryKind::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary_elementwise(rhs, |x, y| x * y, BinaryKind::Mul)
    }

    fn binary_elementwise(
        &self,
        rhs: &Tensor<E>,
        f: impl Fn(E, E) -> E,
        kind: BinaryKind,
    ) -> Result<Tensor<E>> {
        let spread = spread_of(self.shape(), rhs.shape()).ok_or_else(|| {
            TensorError::BroadcastMismatch {
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            }
        })?;
        let (out_shape, out) = {
            let a = self.data();
            let b = rhs.data();
            let out = elementwise_forward(&a, &b, spread, f);
            let shape = match spread {
                Spread::Same | Spread::RhsOntoLhs => self.shape().to_vec(),
                Spread::LhsOntoRhs => rhs.shape().to_vec(),
            };
            (shape, out)
        };
        if !self.needs_grad() && !rhs.needs_grad() {
            return Ok(Tensor::build(out, out_shape, false, None));
        }
        let a = self.clone();
        let b = rhs.clone();
        let node = Node {
            parents: vec![self.clone(), rhs.clone()],
            backward: Box::new(move |g: &[E]| {
                if a.needs_grad() {
                    let da = match kind {
                        BinaryKind::Add | BinaryKind::Sub => reduce_to_period(g, a.numel()),
                        BinaryKind::Mul => {
                            let bd = b.data();
                            let spread = spread_of_unchecked(a.shape(), b.shape());
                            let prod = match spread {
                                Spread::Same => {
                                    g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv * bv).collect()
                                }
                                Spread::RhsOntoLhs => {
                                    let p = bd.len();
                                    g.iter()
                                        .enumerate()
                                        .map(|(i, &gv)| gv * bd[i % p])
                                        .collect::<Vec<E>>()
                                }
                                Spread::LhsOntoRhs => {
                                    g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv * bv).collect()
                                }
                            };
                            reduce_to_period(&prod, a.numel())
                        }
                    };
                    a.accumulate_grad(&da);
                }
                if b.needs_grad() {
                    let db = match kind {
                        BinaryKind::Add => reduce_to_period(g, b.numel()),
                        BinaryKind::Sub => {
                            let mut v = reduce_to_period(g, b.numel());
                            for x in &mut v {
                                *x = -*x;
                            }
                            v
                        }
                        BinaryKind::Mul => {
                            let ad = a.data();
                            let spread = spread_of_unchecked(a.shape(), b.shape());
                            let prod = match spread {
                                Spread::Same | Spread::LhsOntoRhs => {
                                    let p = ad.len();
                                    g.iter()
                                        .enumerate()
                                        .map(|(i, &gv)| gv * ad[i % p])
                                        .collect::<Vec<E>>()
                                }
                                Spread::RhsOntoLhs => {
                                    g.iter().zip(ad.iter()).map(|(&gv, &av)| gv * av).collect()
                                }
                            };
                            reduce_to_period(&prod, b.numel())
                        }
                    };
                    b.accumulate_grad(&db);
                }
            }),
        };
        Ok(Tensor::build(out, out_shape, false, Some(node)))
    }

    pub fn neg(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&v| -v).collect();
        self.unary_op(data, self.shape().to_vec(), |p, g| {
            let d: Vec<E> = g.iter().map(|&v| -v).collect();
            p.accumulate_grad(&d);
        })
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: E) -> Tensor<E> {
        let data = self.data().iter().map(|&v| v * c).collect();
        self.unary_op(data, self.shape().to_vec(), move |p, g| {
            let d: Vec<E> = g.iter().map(|&v| v * c).collect();
            p.accumulate_grad(&d);
        })
    }

    /// Add a constant to every element.
    pub fn add_scalar(&self, c: E) -> Tensor<E> {
        let data = self.data().iter().map(|&v| v + c).collect();
        self.unary_op(data, self.shape().to_vec(), |p, g| {
            p.accumulate_grad(g);
        })
    }

    // ── matmul ───────────────────────────────────────────────────────

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    /// Leading batch dims must match exactly, or one operand may be a plain
    /// rank-2 matrix broadcast across the other's batch.
    pub fn matmul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let ls = self.shape().to_vec();
        let rs = rhs.shape().to_vec();
        let mismatch = || TensorError::MatmulShapeMismatch {
            lhs: ls.clone(),
            rhs: rs.clone(),
        };
        if ls.len() < 2 || rs.len() < 2 {
            return Err(mismatch());
        }
        let (m, ka) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let (kb, n) = (rs[rs.len() - 2], rs[rs.len() - 1]);
        if ka != kb {
            return Err(mismatch());
        }
        let k = ka;
        let lb = &ls[..ls.len() - 2];
        let rb = &rs[..rs.len() - 2];
        let (batch_shape, lhs_batched, rhs_batched) = if lb == rb {
            (lb.to_vec(), true, true)
        } else if rb.is_empty() {
            (lb.to_vec(), true, false)
        } else if lb.is_empty() {
            (rb.to_vec(), false, true)
        } else {
            return Err(mismatch());
        };
        let batches: usize = batch_shape.iter().product();
        let mut out = vec![E::zero(); batches * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for t in 0..batches {
                let ao = if lhs_batched { t * m * k } else { 0 };
                let bo = if rhs_batched { t * k * n } else { 0 };
                matmul_acc(
                    &mut out[t * m * n..(t + 1) * m * n],
                    &a[ao..ao + m * k],
                    &b[bo..bo + k * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut out_shape = batch_shape;
        out_shape.push(m);
        out_shape.push(n);
        if !self.needs_grad() && !rhs.needs_grad() {
            return Ok(Tensor::build(out, out_shape, false, None));
        }
        let a = self.clone();
        let b = rhs.clone();
        let node = Node {
            parents: vec![self.clone(), rhs.clone()],
            backward: Box::new(move |g: &[E]| {
                if a.needs_grad() {
                    let bd = b.data();
                    let mut da = vec![E::zero(); a.numel()];
                    for t in 0..batches {
                        let ao = if lhs_batched { t * m * k } else { 0 };
                        let bo = if rhs_batched { t * k * n } else { 0 };
                        matmul_nt_acc(
                            &mut da[ao..ao + m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &bd[bo..bo + k * n],
                            m,
                            n,
                            k,
                        );
                    }
                    a.accumulate_grad(&da);
                }
                if b.needs_grad() {
                    let ad = a.data();
                    let mut db = vec![E::zero(); b.numel()];
                    for t in 0..batches {
                        let ao = if lhs_batched { t * m * k } else { 0 };
                        let bo = if rhs_batched { t * k * n } else { 0 };
                        matmul_tn_acc(
                            &mut db[bo..bo + k * n],
                            &ad[ao..ao + m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                    }
                    b.accumulate_grad(&db);
                }
            }),
        };
        Ok(Tensor::build(out, out_shape, false, Some(node)))
    }

    // ── shape ops ────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let to_elems: usize = shape.iter().product();
        if to_elems != self.numel() {
            return Err(TensorError::ReshapeMismatch {
                from: self.shape().to_vec(),
                from_elems: self.numel(),
                to: shape.to_vec(),
                to_elems,
            });
        }
        Ok(self.unary_op(self.to_vec(), shape.to_vec(), |p, g| {
            p.accumulate_grad(g);
        }))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<E>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        let valid = perm.len() == rank
            && perm.iter().all(|&p| {
                if p >= rank || seen[p] {
                    false
                } else {
                    seen[p] = true;
                    true
                }
            });
        if !valid {
            return Err(TensorError::InvalidPermutation {
                perm: perm.to_vec(),
                rank,
            });
        }
        let (out, out_shape) = permute_raw(&self.data(), self.shape(), perm);
        let inv = invert_perm(perm);
        let g_shape = out_shape.clone();
        Ok(self.unary_op(out, out_shape, move |p, g| {
            let (dg, _) = permute_raw(g, &g_shape, &inv);
            p.accumulate_grad(&dg);
        }))
    }

    /// Swap the last two axes.
    pub fn t2(&self) -> Result<Tensor<E>> {
        let rank = self.rank();
        if rank < 2 {
            return Err(TensorError::AxisOutOfBounds { axis: 1, rank });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfBounds { axis, rank });
        }
        let extent = self.shape()[axis];
        if start + len > extent {
            return Err(TensorError::SliceOutOfBounds {
                axis,
                start,
                len,
                extent,
            });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let d = self.data();
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let parent_len = self.numel();
        Ok(self.unary_op(out, out_shape, move |p, g| {
            let mut dg = vec![E::zero(); parent_len];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * extent + start) * inner;
                dg[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            p.accumulate_grad(&dg);
        }))
    }

    /// Concatenate along `axis`. All operands must agree on every other
    /// extent.
    pub fn concat(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = parts[0];
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfBounds { axis, rank });
        }
        let mut total_axis = 0usize;
        for p in parts {
            if p.rank() != rank {
                return Err(TensorError::ConcatShapeMismatch {
                    axis,
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != first.shape()[d] {
                    return Err(TensorError::ConcatShapeMismatch {
                        axis,
                        lhs: first.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
            total_axis += p.shape()[axis];
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total_axis;
        let mut out = vec![E::zero(); outer * total_axis * inner];
        let mut offset = 0usize;
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let plen = p.shape()[axis];
            let d = p.data();
            for o in 0..outer {
                let dst = (o * total_axis + offset) * inner;
                let src = o * plen * inner;
                out[dst..dst + plen * inner].copy_from_slice(&d[src..src + plen * inner]);
            }
            lens.push(plen);
            offset += plen;
        }
        let any_grad = parts.iter().any(|p| p.needs_grad());
        if !any_grad {
            return Ok(Tensor::build(out, out_shape, false, None));
        }
        let parents: Vec<Tensor<E>> = parts.iter().map(|&p| p.clone()).collect();
        let handles = parents.clone();
        let node = Node {
            parents,
            backward: Box::new(move |g: &[E]| {
                let mut offset = 0usize;
                for (p, &plen) in handles.iter().zip(&lens) {
                    if p.needs_grad() {
                        let mut dg = vec![E::zero(); outer * plen * inner];
                        for o in 0..outer {
                            let src = (o * total_axis + offset) * inner;
                            let dst = o * plen * inner;
                            dg[dst..dst + plen * inner]
                                .copy_from_slice(&g[src..src + plen * inner]);
                        }
                        p.accumulate_grad(&dg);
                    }
                    offset += plen;
                }
            }),
        };
        Ok(Tensor::build(out, out_shape, false, Some(node)))
    }

    /// Cyclic shift along one axis: element at position `i` moves to
    /// `(i + shift) mod extent`.
    pub fn roll(&self, axis: usize, shift: isize) -> Result<Tensor<E>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfBounds { axis, rank });
        }
        let extent = self.shape()[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let s = if extent == 0 {
            0
        } else {
            shift.rem_euclid(extent as isize) as usize
        };
        let mut out = vec![E::zero(); self.numel()];
        {
            let d = self.data();
            for o in 0..outer {
                for i in 0..extent {
                    let j = (i + s) % extent;
                    let src = (o * extent + i) * inner;
                    let dst = (o * extent + j) * inner;
                    out[dst..dst + inner].copy_from_slice(&d[src..src + inner]);
                }
            }
        }
        let shape = self.shape().to_vec();
        Ok(self.unary_op(out, shape, move |p, g| {
            // inverse roll of the cotangent
            let mut dg = vec![E::zero(); g.len()];
            for o in 0..outer {
                for i in 0..extent {
                    let j = (i + s) % extent;
                    let src = (o * extent + j) * inner;
                    let dst = (o * extent + i) * inner;
                    dg[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                }
            }
            p.accumulate_grad(&dg);
        }))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor<E> {
        let s = self.data().iter().copied().sum();
        let n = self.numel();
        self.unary_op(vec![s], Vec::new(), move |p, g| {
            p.accumulate_grad(&vec![g[0]; n]);
        })
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let n = self.numel();
        let inv = E::from_f64(1.0 / n as f64);
        let s: E = self.data().iter().copied().sum();
        self.unary_op(vec![s * inv], Vec::new(), move |p, g| {
            p.accumulate_grad(&vec![g[0] * inv; n]);
        })
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<E>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfBounds { axis, rank });
        }
        let extent = self.shape()[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let inv = E::from_f64(1.0 / extent as f64);
        let mut out = vec![E::zero(); outer * inner];
        {
            let d = self.data();
            for o in 0..outer {
                for i in 0..extent {
                    let base = (o * extent + i) * inner;
                    for j in 0..inner {
                        out[o * inner + j] += d[base + j];
                    }
                }
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let mut out_shape = self.shape().to_vec();
        out_shape.remove(axis);
        Ok(self.unary_op(out, out_shape, move |p, g| {
            let mut dg = vec![E::zero(); outer * extent * inner];
            for o in 0..outer {
                for i in 0..extent {
                    let base = (o * extent + i) * inner;
                    for j in 0..inner {
                        dg[base + j] = g[o * inner + j] * inv;
                    }
                }
            }
            p.accumulate_grad(&dg);
        }))
    }

    // ── nonlinear ────────────────────────────────────────────────────

    /// Numerically stable softmax along `axis`: the lane max is subtracted
    /// before exponentiation, so arbitrarily large inputs stay finite.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfBounds { axis, rank });
        }
        let extent = self.shape()[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out = vec![E::zero(); self.numel()];
        {
            let d = self.data();
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| (o * extent + i) * inner + j;
                    let mut mx = d[at(0)];
                    for i in 1..extent {
                        if d[at(i)] > mx {
                            mx = d[at(i)];
                        }
                    }
                    let mut denom = E::zero();
                    for i in 0..extent {
                        let e = (d[at(i)] - mx).exp();
                        out[at(i)] = e;
                        denom += e;
                    }
                    for i in 0..extent {
                        out[at(i)] = out[at(i)] / denom;
                    }
                }
            }
        }
        let y = out.clone();
        let shape = self.shape().to_vec();
        Ok(self.unary_op(out, shape, move |p, g| {
            // dx = y * (g - sum(g * y)) per lane
            let mut dg = vec![E::zero(); g.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| (o * extent + i) * inner + j;
                    let mut dot = E::zero();
                    for i in 0..extent {
                        dot += g[at(i)] * y[at(i)];
                    }
                    for i in 0..extent {
                        dg[at(i)] = y[at(i)] * (g[at(i)] - dot);
                    }
                }
            }
            p.accumulate_grad(&dg);
        }))
    }

    /// Layer normalization over the last axis with affine parameters:
    /// per-row zero mean and unit population variance, then `gamma * x + beta`.
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let rank = self.rank();
        if rank == 0 {
            return Err(TensorError::AxisOutOfBounds { axis: 0, rank });
        }
        let n = self.shape()[rank - 1];
        for t in [gamma, beta] {
            if t.shape() != [n] {
                return Err(TensorError::ShapeMismatch {
                    expected: vec![n],
                    actual: t.shape().to_vec(),
                });
            }
        }
        let rows = self.numel() / n;
        let epsv = E::from_f64(eps);
        let invn = E::from_f64(1.0 / n as f64);
        let mut out = vec![E::zero(); self.numel()];
        let mut means = vec![E::zero(); rows];
        let mut invstds = vec![E::zero(); rows];
        {
            let d = self.data();
            let gw = gamma.data();
            let bw = beta.data();
            for r in 0..rows {
                let row = &d[r * n..(r + 1) * n];
                let mut mean = E::zero();
                for &v in row {
                    mean += v;
                }
                mean = mean * invn;
                let mut var = E::zero();
                for &v in row {
                    let c = v - mean;
                    var += c * c;
                }
                var = var * invn;
                let invstd = (var + epsv).sqrt().recip();
                means[r] = mean;
                invstds[r] = invstd;
                let orow = &mut out[r * n..(r + 1) * n];
                for k in 0..n {
                    orow[k] = (row[k] - mean) * invstd * gw[k] + bw[k];
                }
            }
        }
        let parents_need = self.needs_grad() || gamma.needs_grad() || beta.needs_grad();
        if !parents_need {
            return Ok(Tensor::build(out, self.shape().to_vec(), false, None));
        }
        let x = self.clone();
        let gm = gamma.clone();
        let bt = beta.clone();
        let node = Node {
            parents: vec![self.clone(), gamma.clone(), beta.clone()],
            backward: Box::new(move |g: &[E]| {
                let xd = x.data();
                let gw = gm.data();
                let mut dx = if x.needs_grad() {
                    Some(vec![E::zero(); xd.len()])
                } else {
                    None
                };
                let mut dgamma = vec![E::zero(); n];
                let mut dbeta = vec![E::zero(); n];
                for r in 0..rows {
                    let row = &xd[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let mean = means[r];
                    let invstd = invstds[r];
                    let mut m1 = E::zero(); // mean of g*gamma
                    let mut m2 = E::zero(); // mean of g*gamma*xhat
                    for k in 0..n {
                        let xhat = (row[k] - mean) * invstd;
                        let gg = grow[k] * gw[k];
                        m1 += gg;
                        m2 += gg * xhat;
                        dgamma[k] += grow[k] * xhat;
                        dbeta[k] += grow[k];
                    }
                    m1 = m1 * invn;
                    m2 = m2 * invn;
                    if let Some(dx) = dx.as_mut() {
                        let dxrow = &mut dx[r * n..(r + 1) * n];
                        for k in 0..n {
                            let xhat = (row[k] - mean) * invstd;
                            let gg = grow[k] * gw[k];
                            dxrow[k] = invstd * (gg - m1 - xhat * m2);
                        }
                    }
                }
                if let Some(dx) = dx {
                    x.accumulate_grad(&dx);
                }
                if gm.needs_grad() {
                    gm.accumulate_grad(&dgamma);
                }
                if bt.needs_grad() {
                    bt.accumulate_grad(&dbeta);
                }
            }),
        };
        Ok(Tensor::build(out, self.shape().to_vec(), false, Some(node)))
    }

    /// Exact GELU `x * Phi(x)` with the Gaussian CDF, not the tanh
    /// approximation.
    pub fn gelu(&self) -> Tensor<E> {
        let half = E::from_f64(0.5);
        let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let phi = move |v: E| half * (E::one() + (v * inv_sqrt2).erf());
        let data: Vec<E> = self.data().iter().map(|&v| v * phi(v)).collect();
        let inv_sqrt_2pi = E::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        self.unary_op(data, self.shape().to_vec(), move |p, g| {
            let xd = p.data();
            let dg: Vec<E> = xd
                .iter()
                .zip(g)
                .map(|(&v, &gv)| {
                    let pdf = (-v * v * half).exp() * inv_sqrt_2pi;
                    gv * (phi(v) + v * pdf)
                })
                .collect();
            drop(xd);
            p.accumulate_grad(&dg);
        })
    }

    // ── indexing ─────────────────────────────────────────────────────

    /// Select rows of a `(rows, cols)` table by index, with repetition.
    /// Gradient scatter-adds into the selected rows.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(TensorError::AxisOutOfBounds {
                axis: 1,
                rank: self.rank(),
            });
        }
        let rows = self.shape()[0];
        let cols = self.shape()[1];
        for &i in indices {
            if i >= rows {
                return Err(TensorError::GatherIndexOutOfBounds { index: i, rows });
            }
        }
        let mut out = Vec::with_capacity(indices.len() * cols);
        {
            let d = self.data();
            for &i in indices {
                out.extend_from_slice(&d[i * cols..(i + 1) * cols]);
            }
        }
        let idx: Vec<usize> = indices.to_vec();
        let table_len = self.numel();
        Ok(self.unary_op(out, vec![indices.len(), cols], move |p, g| {
            let mut dg = vec![E::zero(); table_len];
            for (r, &i) in idx.iter().enumerate() {
                let src = &g[r * cols..(r + 1) * cols];
                let dst = &mut dg[i * cols..(i + 1) * cols];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            p.accumulate_grad(&dg);
        }))
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

fn spread_of_unchecked(lhs: &[usize], rhs: &[usize]) -> Spread {
    spread_of(lhs, rhs).expect("spread was validated at op construction")
}

/// Cross-entropy of `logits` against label-smoothed targets
/// `q = (1 - eps) * onehot + eps / K`, averaged over the batch.
pub fn label_smoothed_ce<E: Scalar>(
    logits: &Tensor<E>,
    targets: &[usize],
    eps: f64,
) -> Result<Tensor<E>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(TensorError::InvalidSmoothing { eps });
    }
    if logits.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            expected: vec![targets.len(), 0],
            actual: logits.shape().to_vec(),
        });
    }
    let batch = logits.shape()[0];
    let classes = logits.shape()[1];
    if targets.len() != batch {
        return Err(TensorError::TargetCountMismatch {
            targets: targets.len(),
            batch,
        });
    }
    for &t in targets {
        if t >= classes {
            return Err(TensorError::TargetOutOfRange {
                target: t,
                classes,
            });
        }
    }
    let eps_e = E::from_f64(eps);
    let uniform = eps_e / E::from_f64(classes as f64);
    let confident = E::one() - eps_e;
    let mut probs = vec![E::zero(); batch * classes];
    let mut total = E::zero();
    {
        let z = logits.data();
        for b in 0..batch {
            let row = &z[b * classes..(b + 1) * classes];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = E::zero();
            for &v in row {
                denom += (v - mx).exp();
            }
            let lse = mx + denom.ln();
            let mut qdotz = E::zero();
            for (k, &v) in row.iter().enumerate() {
                let q = uniform + if k == targets[b] { confident } else { E::zero() };
                qdotz += q * v;
                probs[b * classes + k] = (v - lse).exp();
            }
            total += lse - qdotz;
        }
    }
    let inv_batch = E::from_f64(1.0 / batch as f64);
    let loss = total * inv_batch;
    if !logits.needs_grad() {
        return Ok(Tensor::build(vec![loss], Vec::new(), false, None));
    }
    let parent = logits.clone();
    let tgt: Vec<usize> = targets.to_vec();
    let node = Node {
        parents: vec![logits.clone()],
        backward: Box::new(move |g: &[E]| {
            // d loss / d z = (softmax(z) - q) / batch
            let gscale = g[0] * inv_batch;
            let mut dz = vec![E::zero(); batch * classes];
            for b in 0..batch {
                for k in 0..classes {
                    let q = uniform + if k == tgt[b] { confident } else { E::zero() };
                    dz[b * classes + k] = gscale * (probs[b * classes + k] - q);
                }
            }
            parent.accumulate_grad(&dz);
        }),
    };
    Ok(Tensor::build(vec![loss], Vec::new(), false, Some(node)))
}
