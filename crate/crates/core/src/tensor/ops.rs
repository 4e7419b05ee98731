use std::rc::Rc;

use super::kernels::{self, gemm, gemm_nt, gemm_tn};
use super::{Tape, Tensor, Var};
use crate::error::{dim_err, param_err, Result};

/// Reduction applied over the last axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Max,
    Min,
}

impl Tape {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err!("{op}: shapes {sa:?} and {sb:?} differ"));
        }
        Ok(sa)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "add")?;
        let (da, db) = (self.data(a), self.data(b));
        let out = da.iter().zip(db.iter()).map(|(x, y)| x + y).collect();
        Ok(self.push_op(shape, out, &[a, b], move |g, grads| {
            grads.add(a, g);
            grads.add(b, g);
        }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "sub")?;
        let (da, db) = (self.data(a), self.data(b));
        let out = da.iter().zip(db.iter()).map(|(x, y)| x - y).collect();
        Ok(self.push_op(shape, out, &[a, b], move |g, grads| {
            grads.add(a, g);
            if grads.wants(b) {
                grads.add_owned(b, g.iter().map(|v| -v).collect());
            }
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "mul")?;
        let (da, db) = (self.data(a), self.data(b));
        let out = da.iter().zip(db.iter()).map(|(x, y)| x * y).collect();
        Ok(self.push_op(shape, out, &[a, b], move |g, grads| {
            if grads.wants(a) {
                grads.add_owned(a, g.iter().zip(db.iter()).map(|(g, y)| g * y).collect());
            }
            if grads.wants(b) {
                grads.add_owned(b, g.iter().zip(da.iter()).map(|(g, x)| g * x).collect());
            }
        }))
    }

    pub fn scale(&self, a: Var, s: f32) -> Var {
        let out = self.data(a).iter().map(|x| x * s).collect();
        self.push_op(self.shape(a), out, &[a], move |g, grads| {
            grads.add_owned(a, g.iter().map(|v| v * s).collect());
        })
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Sum of several same-shape values.
    pub fn add_n(&self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or_else(|| param_err!("add_n of nothing"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Elementwise mean of several same-shape values, accumulated in f64 so
    /// that averaging identical inputs returns them unchanged.
    pub fn mean_n(&self, xs: &[Var]) -> Result<Var> {
        let &first = xs.first().ok_or_else(|| param_err!("mean_n of nothing"))?;
        let shape = self.shape(first);
        if let Some(&bad) = xs.iter().find(|&&x| self.shape(x) != shape) {
            return Err(dim_err!("mean_n: {:?} vs {shape:?}", self.shape(bad)));
        }
        let datas: Vec<_> = xs.iter().map(|&x| self.data(x)).collect();
        let n = xs.len() as f64;
        let out =
            (0..datas[0].len()).map(|i| (datas.iter().map(|d| f64::from(d[i])).sum::<f64>() / n) as f32).collect();
        let inputs = xs.to_vec();
        let inv = 1.0 / xs.len() as f32;
        Ok(self.push_op(shape, out, xs, move |g, grads| {
            for &x in &inputs {
                if grads.wants(x) {
                    grads.add_owned(x, g.iter().map(|v| v * inv).collect());
                }
            }
        }))
    }

    /// Applies the constant matrix `m[p×n]` along `axis` (extent `n`):
    /// `y[.., i, ..] = Σ_j m[i, j]·x[.., j, ..]`.
    pub fn matmul_axis(&self, x: Var, m: &Tensor, axis: usize) -> Result<Var> {
        let shape = self.shape(x);
        let (outer, n, inner) = split_axis(&shape, axis)?;
        let (p, mn) = m.dims2()?;
        if mn != n {
            return Err(dim_err!("matmul_axis: matrix {:?} against extent {n} of {shape:?}", m.shape()));
        }
        let mt = Rc::new(m.data().to_vec());
        let dx = self.data(x);
        let mut out = vec![0.0; outer * p * inner];
        apply_axis(&mt, &dx, &mut out, outer, p, n, inner, false);
        let mut oshape = shape;
        oshape[axis] = p;
        Ok(self.push_op(oshape, out, &[x], move |g, grads| {
            apply_axis(&mt, g, grads.slot(x), outer, p, n, inner, true);
        }))
    }

    /// [`Tape::matmul_axis`] for a matrix with known exact row sums. Every
    /// line is shifted by its first entry `x₀` before the product and the
    /// shift comes back as `sums·x₀`, so a constant line maps to exactly
    /// `sums·x₀` with no rounding residue. Backward is the adjoint of this map.
    pub fn matmul_axis_shifted(&self, x: Var, m: &Tensor, sums: &[f32], axis: usize) -> Result<Var> {
        let shape = self.shape(x);
        let (outer, n, inner) = split_axis(&shape, axis)?;
        let (p, mn) = m.dims2()?;
        if mn != n || sums.len() != p || n == 0 {
            return Err(dim_err!("matmul_axis_shifted: matrix {:?}, {} sums against {shape:?}", m.shape(), sums.len()));
        }
        let mt = Rc::new(m.data().to_vec());
        let sums = Rc::new(sums.to_vec());
        let mut shifted = self.data(x).to_vec();
        let mut first = vec![0.0f32; outer * inner];
        for o in 0..outer {
            let line = &mut shifted[o * n * inner..(o + 1) * n * inner];
            let (head, rest) = line.split_at_mut(inner);
            for (i, x0) in head.iter_mut().enumerate() {
                first[o * inner + i] = *x0;
                for j in 0..n - 1 {
                    rest[j * inner + i] -= *x0;
                }
                *x0 = 0.0;
            }
        }
        let mut out = vec![0.0; outer * p * inner];
        apply_axis(&mt, &shifted, &mut out, outer, p, n, inner, false);
        for o in 0..outer {
            for k in 0..p {
                for i in 0..inner {
                    out[(o * p + k) * inner + i] += sums[k] * first[o * inner + i];
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = p;
        Ok(self.push_op(oshape, out, &[x], move |g, grads| {
            let mut t = vec![0.0f32; outer * n * inner];
            apply_axis(&mt, g, &mut t, outer, p, n, inner, true);
            let dx = grads.slot(x);
            for o in 0..outer {
                for i in 0..inner {
                    let sg: f32 = (0..p).map(|k| sums[k] * g[(o * p + k) * inner + i]).sum();
                    let rest: f32 = (1..n).map(|j| t[(o * n + j) * inner + i]).sum();
                    dx[o * n * inner + i] += sg - rest;
                    for j in 1..n {
                        dx[(o * n + j) * inner + i] += t[(o * n + j) * inner + i];
                    }
                }
            }
        }))
    }

    /// Multiplies `x` by the vector `v` broadcast along `axis`
    /// (`v.len() == shape[axis]`).
    pub fn mul_broadcast(&self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x);
        let (outer, n, inner) = split_axis(&shape, axis)?;
        if self.numel(v) != n {
            return Err(dim_err!("mul_broadcast: vector of {} along axis {axis} of {shape:?}", self.numel(v)));
        }
        let (dx, dv) = (self.data(x), self.data(v));
        let mut out = vec![0.0; dx.len()];
        for o in 0..outer {
            for i in 0..n {
                let base = (o * n + i) * inner;
                let s = dv[i];
                for (y, &xv) in out[base..base + inner].iter_mut().zip(&dx[base..base + inner]) {
                    *y = xv * s;
                }
            }
        }
        Ok(self.push_op(shape, out, &[x, v], move |g, grads| {
            if grads.wants(x) {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..n {
                        let base = (o * n + i) * inner;
                        let s = dv[i];
                        for (y, &gv) in gx[base..base + inner].iter_mut().zip(&g[base..base + inner]) {
                            *y = gv * s;
                        }
                    }
                }
                grads.add_owned(x, gx);
            }
            if grads.wants(v) {
                let mut gv = vec![0.0; n];
                for o in 0..outer {
                    for (i, acc) in gv.iter_mut().enumerate() {
                        let base = (o * n + i) * inner;
                        *acc += kernels::dot(&g[base..base + inner], &dx[base..base + inner]);
                    }
                }
                grads.add_owned(v, gv);
            }
        }))
    }

    /// Adds the vector `v` broadcast along `axis`.
    pub fn add_broadcast(&self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x);
        let (outer, n, inner) = split_axis(&shape, axis)?;
        if self.numel(v) != n {
            return Err(dim_err!("add_broadcast: vector of {} along axis {axis} of {shape:?}", self.numel(v)));
        }
        let (dx, dv) = (self.data(x), self.data(v));
        let mut out = dx.as_ref().clone();
        for o in 0..outer {
            for i in 0..n {
                let base = (o * n + i) * inner;
                out[base..base + inner].iter_mut().for_each(|y| *y += dv[i]);
            }
        }
        Ok(self.push_op(shape, out, &[x, v], move |g, grads| {
            grads.add(x, g);
            if grads.wants(v) {
                let mut gv = vec![0.0; n];
                for o in 0..outer {
                    for (i, acc) in gv.iter_mut().enumerate() {
                        let base = (o * n + i) * inner;
                        *acc += g[base..base + inner].iter().sum::<f32>();
                    }
                }
                grads.add_owned(v, gv);
            }
        }))
    }

    /// Matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = match (&sa[..], &sb[..]) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => return Err(dim_err!("matmul needs 2-d operands, got {sa:?} and {sb:?}")),
        };
        if k != k2 {
            return Err(dim_err!("matmul: inner extents {k} and {k2} differ"));
        }
        self.linear_impl(a, b, m, k, n, vec![m, n])
    }

    /// `x[..., k] · w[k×n]`, flattening all leading axes.
    pub fn linear(&self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let &[k, n] = &sw[..] else {
            return Err(dim_err!("linear weight must be 2-d, got {sw:?}"));
        };
        if sx.last() != Some(&k) {
            return Err(dim_err!("linear: input {sx:?} does not end in {k}"));
        }
        let m = self.numel(x) / k.max(1);
        let mut shape = sx;
        *shape.last_mut().expect("non-empty") = n;
        self.linear_impl(x, w, m, k, n, shape)
    }

    /// `x · w + bias`.
    pub fn linear_bias(&self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.linear(x, w)?;
        let axis = self.shape(y).len() - 1;
        self.add_broadcast(y, bias, axis)
    }

    fn linear_impl(&self, a: Var, b: Var, m: usize, k: usize, n: usize, shape: Vec<usize>) -> Result<Var> {
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        gemm(&da, &db, &mut out, m, k, n);
        Ok(self.push_op(shape, out, &[a, b], move |g, grads| {
            if grads.wants(a) {
                gemm_nt(g, &db, grads.slot(a), m, n, k);
            }
            if grads.wants(b) {
                gemm_tn(&da, g, grads.slot(b), m, k, n);
            }
        }))
    }

    /// Batched product `a[B×m×k] · b[B×k×n]`, or with `b[B×n×k]` transposed
    /// when `trans_b` is set.
    pub fn bmm(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (bs, m, k, bs2, r, c) = match (&sa[..], &sb[..]) {
            ([bs, m, k], [bs2, r, c]) => (*bs, *m, *k, *bs2, *r, *c),
            _ => return Err(dim_err!("bmm needs 3-d operands, got {sa:?} and {sb:?}")),
        };
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if bs != bs2 || k != kb {
            return Err(dim_err!("bmm: incompatible shapes {sa:?} and {sb:?}"));
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            let (ab, bb, ob) = (&da[i * m * k..], &db[i * k * n..], &mut out[i * m * n..]);
            if trans_b {
                gemm_nt(ab, bb, ob, m, k, n);
            } else {
                gemm(ab, bb, ob, m, k, n);
            }
        }
        Ok(self.push_op(vec![bs, m, n], out, &[a, b], move |g, grads| {
            if grads.wants(a) {
                let ga = grads.slot(a);
                for i in 0..bs {
                    let (gb, bb) = (&g[i * m * n..], &db[i * k * n..]);
                    let gab = &mut ga[i * m * k..(i + 1) * m * k];
                    if trans_b {
                        gemm(gb, bb, gab, m, n, k);
                    } else {
                        gemm_nt(gb, bb, gab, m, n, k);
                    }
                }
            }
            if grads.wants(b) {
                let gbuf = grads.slot(b);
                for i in 0..bs {
                    let (gb, ab) = (&g[i * m * n..], &da[i * m * k..]);
                    let gbb = &mut gbuf[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        gemm_tn(gb, ab, gbb, m, n, k);
                    } else {
                        gemm_tn(ab, gb, gbb, m, k, n);
                    }
                }
            }
        }))
    }

    pub fn reshape(&self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape(x)));
        }
        Ok(self.push_shared(shape, self.data(x), &[x], move |g, grads| grads.add(x, g)))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(dim_err!("invalid permutation {perm:?} for shape {shape:?}"));
        }
        let out = kernels::permute(&self.data(x), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let inv = kernels::inverse_perm(perm);
        let oshape = out_shape.clone();
        Ok(self.push_op(out_shape, out, &[x], move |g, grads| {
            grads.add_owned(x, kernels::permute(g, &oshape, &inv));
        }))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| param_err!("concat of nothing"))?;
        let shape0 = self.shape(*first);
        if axis >= shape0.len() {
            return Err(dim_err!("concat axis {axis} out of range for {shape0:?}"));
        }
        let outer: usize = shape0[..axis].iter().product();
        let inner: usize = shape0[axis + 1..].iter().product();
        let mut extents = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != shape0.len() || s[..axis] != shape0[..axis] || s[axis + 1..] != shape0[axis + 1..] {
                return Err(dim_err!("concat: {s:?} incompatible with {shape0:?} on axis {axis}"));
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let datas: Vec<Rc<Vec<f32>>> = xs.iter().map(|&x| self.data(x)).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (d, &e) in datas.iter().zip(&extents) {
                out.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = shape0;
        shape[axis] = total;
        let inputs = xs.to_vec();
        Ok(self.push_op(shape, out, xs, move |g, grads| {
            let mut offset = 0;
            for (&x, &e) in inputs.iter().zip(&extents) {
                if grads.wants(x) {
                    let mut gx = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gx.extend_from_slice(&g[start..start + e * inner]);
                    }
                    grads.add_owned(x, gx);
                }
                offset += e;
            }
        }))
    }

    /// Selects rows `idx` of `x` viewed as `[n, rest...]`. Backward scatters
    /// (adds) into the selected rows.
    pub fn gather_rows(&self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(x);
        let n = *shape.first().ok_or_else(|| dim_err!("gather_rows on a scalar"))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(dim_err!("gather_rows: index {bad} out of range {n}"));
        }
        let row: usize = shape[1..].iter().product();
        let dx = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx.iter() {
            out.extend_from_slice(&dx[i * row..(i + 1) * row]);
        }
        let mut oshape = shape;
        oshape[0] = idx.len();
        Ok(self.push_op(oshape, out, &[x], move |g, grads| {
            let gx = grads.slot(x);
            for (j, &i) in idx.iter().enumerate() {
                kernels::axpy(1.0, &g[j * row..(j + 1) * row], &mut gx[i * row..(i + 1) * row]);
            }
        }))
    }

    /// Selects entries `idx` along the last axis.
    pub fn gather_last(&self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(x);
        let n = *shape.last().ok_or_else(|| dim_err!("gather_last on a scalar"))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(dim_err!("gather_last: index {bad} out of range {n}"));
        }
        let rows = self.numel(x) / n.max(1);
        let k = idx.len();
        let dx = self.data(x);
        let mut out = Vec::with_capacity(rows * k);
        for r in 0..rows {
            out.extend(idx.iter().map(|&i| dx[r * n + i]));
        }
        let mut oshape = shape;
        *oshape.last_mut().expect("non-empty") = k;
        Ok(self.push_op(oshape, out, &[x], move |g, grads| {
            let gx = grads.slot(x);
            for r in 0..rows {
                for (j, &i) in idx.iter().enumerate() {
                    gx[r * n + i] += g[r * k + j];
                }
            }
        }))
    }

    /// Adjoint of [`Tape::gather_last`]: places entries at `idx` of a zero
    /// last axis of length `n`.
    pub fn scatter_last(&self, x: Var, idx: Rc<Vec<usize>>, n: usize) -> Result<Var> {
        let shape = self.shape(x);
        let k = *shape.last().ok_or_else(|| dim_err!("scatter_last on a scalar"))?;
        if k != idx.len() {
            return Err(dim_err!("scatter_last: {} indices for last extent {k}", idx.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(dim_err!("scatter_last: index {bad} out of range {n}"));
        }
        let rows = self.numel(x).checked_div(k).unwrap_or_else(|| shape[..shape.len() - 1].iter().product());
        let dx = self.data(x);
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            for (j, &i) in idx.iter().enumerate() {
                out[r * n + i] += dx[r * k + j];
            }
        }
        let mut oshape = shape;
        *oshape.last_mut().expect("non-empty") = n;
        Ok(self.push_op(oshape, out, &[x], move |g, grads| {
            let gx = grads.slot(x);
            for r in 0..rows {
                for (j, &i) in idx.iter().enumerate() {
                    gx[r * k + j] += g[r * n + i];
                }
            }
        }))
    }

    /// Mean, max or min over the last axis; max/min route the gradient to the
    /// first extremal entry.
    pub fn reduce_last(&self, x: Var, how: Reduce) -> Result<Var> {
        let shape = self.shape(x);
        let n = *shape.last().ok_or_else(|| dim_err!("reduce_last on a scalar"))?;
        if n == 0 {
            return Err(param_err!("reduce_last over an empty axis"));
        }
        let rows = self.numel(x) / n;
        let dx = self.data(x);
        let mut out = Vec::with_capacity(rows);
        let mut arg = Vec::with_capacity(if how == Reduce::Mean { 0 } else { rows });
        for r in 0..rows {
            let row = &dx[r * n..(r + 1) * n];
            match how {
                Reduce::Mean => out.push(row.iter().sum::<f32>() / n as f32),
                Reduce::Max | Reduce::Min => {
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate() {
                        let better = if how == Reduce::Max { v > row[best] } else { v < row[best] };
                        if better {
                            best = j;
                        }
                    }
                    arg.push(best);
                    out.push(row[best]);
                }
            }
        }
        let mut oshape = shape;
        oshape.pop();
        if oshape.is_empty() {
            oshape.push(1);
        }
        Ok(self.push_op(oshape, out, &[x], move |g, grads| {
            let gx = grads.slot(x);
            match how {
                Reduce::Mean => {
                    for (r, &gr) in g.iter().enumerate() {
                        gx[r * n..(r + 1) * n].iter_mut().for_each(|v| *v += gr / n as f32);
                    }
                }
                Reduce::Max | Reduce::Min => {
                    for (r, (&gr, &j)) in g.iter().zip(&arg).enumerate() {
                        gx[r * n + j] += gr;
                    }
                }
            }
        }))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.data(x).iter().map(|&v| f64::from(v)).sum::<f64>() as f32;
        let n = self.numel(x);
        self.push_op(vec![1], vec![s], &[x], move |g, grads| {
            grads.add_owned(x, vec![g[0]; n]);
        })
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.numel(x).max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f32)
    }

    /// Index of the maximum along the last axis, per row (not differentiable).
    pub fn argmax_last(&self, x: Var) -> Vec<usize> {
        argmax_rows(&self.value(x))
    }
}

pub(crate) fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let n = *t.shape().last().unwrap_or(&1);
    t.data()
        .chunks(n.max(1))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// `out += m·x` along the middle axis of `x[outer×n×inner]`, or `mᵀ·x`
/// (with `x[outer×p×inner]`, `out[outer×n×inner]`) when `transpose` is set.
#[allow(clippy::too_many_arguments)]
fn apply_axis(m: &[f32], x: &[f32], out: &mut [f32], outer: usize, p: usize, n: usize, inner: usize, transpose: bool) {
    let (rin, rout) = if transpose { (p, n) } else { (n, p) };
    for o in 0..outer {
        let xs = &x[o * rin * inner..(o + 1) * rin * inner];
        let ys = &mut out[o * rout * inner..(o + 1) * rout * inner];
        if inner == 1 {
            for (i, y) in ys.iter_mut().enumerate() {
                *y += if transpose {
                    (0..p).map(|r| m[r * n + i] * xs[r]).sum::<f32>()
                } else {
                    kernels::dot(&m[i * n..(i + 1) * n], xs)
                };
            }
        } else if transpose {
            kernels::gemm_tn(m, xs, ys, p, n, inner);
        } else {
            kernels::gemm(m, xs, ys, p, n, inner);
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {axis} out of range for {shape:?}"));
    }
    Ok((shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let x = Tensor::from_fn([3, 3], |i| i as f32 - 4.0);
        let i3 = tape.constant(Tensor::eye(3));
        let xv = tape.constant(x.clone());
        let y = tape.matmul(i3, xv).unwrap();
        assert_eq!(tape.value(y), x);
    }

    #[test]
    fn matmul_by_hand() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([4, 5]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_gradients() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(a, b).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(a).unwrap(), &[3.0, 4.0]);
        assert_eq!(g.get(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn gather_scatter_are_adjoint() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let idx = Rc::new(vec![2, 0]);
        let g = tape.gather_last(x, Rc::clone(&idx)).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0, 1.0, 6.0, 4.0]);
        let s = tape.scatter_last(g, idx, 3).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0, 3.0, 4.0, 0.0, 6.0]);
    }

    #[test]
    fn reductions() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let v = |r| tape.value(tape.reduce_last(x, r).unwrap()).data()[0];
        assert_eq!((v(Reduce::Mean), v(Reduce::Max), v(Reduce::Min)), (2.0, 3.0, 1.0));
    }

    #[test]
    fn concat_splits_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let l = tape.sum(tape.mul(c, w).unwrap());
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0, 4.0]);
        assert_eq!(g.get(b).unwrap(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_axis_matches_naive() {
        let x = Tensor::from_fn([2, 3, 4], |i| (i as f32 * 0.31).cos());
        let m = Tensor::from_fn([5, 3], |i| i as f32 * 0.5 - 2.0);
        let tape = Tape::new();
        let y = tape.value(tape.matmul_axis(tape.constant(x.clone()), &m, 1).unwrap());
        assert_eq!(y.shape(), [2, 5, 4]);
        for (a, i, b) in (0..2).flat_map(|a| (0..5).flat_map(move |i| (0..4).map(move |b| (a, i, b)))) {
            let want: f32 = (0..3).map(|j| m.at(&[i, j]) * x.at(&[a, j, b])).sum();
            assert!((y.at(&[a, i, b]) - want).abs() < 1e-5);
        }
        for axis in 0..3 {
            let n = x.shape()[axis];
            let m = Tensor::from_fn([2, n], |i| (i as f32 + 1.0) * 0.25);
            let f = |t: &Tape, v: Var| {
                let y = t.matmul_axis(v, &m, axis)?;
                Ok(t.sum(t.mul(y, y)?))
            };
            let r = crate::tensor::grad_check(f, &x, 1e-2).unwrap();
            assert!(r.max_rel_err < 1e-3, "axis {axis}: {}", r.max_rel_err);
        }
    }

    #[test]
    fn shifted_matmul_axis_agrees_and_is_exact_on_constants() {
        let x = Tensor::from_fn([2, 3, 4], |i| (i as f32 * 0.31).cos());
        // rows sum to 1.5 and 0 exactly in real arithmetic
        let m = t(&[2, 3], &[0.2, 0.3, 1.0, 0.1, -0.7, 0.6]);
        let sums = [1.5f32, 0.0];
        for axis in 0..3 {
            let n = x.shape()[axis];
            let m = if n == 3 { m.clone() } else { Tensor::from_fn([2, n], |i| (i as f32 + 1.0) * 0.25) };
            let sums: Vec<f32> =
                if n == 3 { sums.to_vec() } else { (0..2).map(|k| (0..n).map(|j| m.at(&[k, j])).sum()).collect() };
            let tape = Tape::new();
            let a = tape.value(tape.matmul_axis(tape.constant(x.clone()), &m, axis).unwrap());
            let b = tape.value(tape.matmul_axis_shifted(tape.constant(x.clone()), &m, &sums, axis).unwrap());
            assert!(a.max_abs_diff(&b) < 1e-5, "axis {axis}");
            let f = |t: &Tape, v: Var| {
                let y = t.matmul_axis_shifted(v, &m, &sums, axis)?;
                Ok(t.sum(t.mul(y, y)?))
            };
            let r = crate::tensor::grad_check(f, &x, 1e-2).unwrap();
            assert!(r.max_rel_err < 1e-3, "axis {axis}: {}", r.max_rel_err);
        }
        let tape = Tape::new();
        let c = Tensor::full([2, 3, 2], 0.1);
        let y = tape.value(tape.matmul_axis_shifted(tape.constant(c), &m, &sums, 1).unwrap());
        assert!(y.data().iter().enumerate().all(|(i, &v)| if (i / 2) % 2 == 0 { v == 1.5 * 0.1f32 } else { v == 0.0 }));
    }

    #[test]
    fn mean_n_of_copies_is_exact() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([7], |i| (i as f32 * 1.37).sin() * 1e3));
        let m = tape.mean_n(&[x, x, x]).unwrap();
        assert_eq!(tape.value(m), tape.value(x));
        let g = tape.backward(tape.sum(m)).unwrap();
        assert!(g.get(x).unwrap().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }
}
