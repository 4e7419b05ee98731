use super::scan::{associative_scan, DiagAffine};
use super::{discretize_scalar, phi1, phi1_prime, Discretization};
use crate::error::{dim_err, Error, Result};
use crate::tensor::nn::softplus;
use crate::tensor::{kernels, Tape, Tensor, Var};

/// Per-step parameters of a selective (input-dependent) scan over a
/// sequence of `L` steps and `C` channels with state size `N`.
#[derive(Clone, Debug)]
pub struct SelectiveInputs {
    /// `L × C`, strictly positive
    pub delta: Tensor,
    /// `L × N`
    pub b: Tensor,
    /// `L × N`
    pub c: Tensor,
    /// `C × N` diagonal state matrix per channel, typically negative
    pub a: Tensor,
    /// `C`
    pub d: Vec<f32>,
    pub method: Discretization,
}

impl SelectiveInputs {
    fn dims(&self) -> Result<(usize, usize, usize)> {
        let (l, c) = self.delta.dims2()?;
        let (ca, n) = self.a.dims2()?;
        if ca != c || self.d.len() != c || self.b.shape() != [l, n] || self.c.shape() != [l, n] {
            return Err(dim_err!(
                "selective inputs disagree: delta {:?}, A {:?}, B {:?}, C {:?}, D {}",
                self.delta.shape(),
                self.a.shape(),
                self.b.shape(),
                self.c.shape(),
                self.d.len()
            ));
        }
        Ok((l, c, n))
    }

    fn check_x(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (l, c, n) = self.dims()?;
        if x.shape() != [l, c] {
            return Err(dim_err!("input {:?} does not match selective inputs {l}×{c}", x.shape()));
        }
        if !x.is_finite() || !self.delta.is_finite() || !self.b.is_finite() || !self.c.is_finite() {
            return Err(Error::Numeric("selective scan: non-finite input".into()));
        }
        Ok((l, c, n))
    }
}

/// Learned linear maps producing [`SelectiveInputs`] from `x`:
/// `Δ = softplus(x·W_Δ + b_Δ)`, `B = x·W_B + b_B`, `C = x·W_C + b_C`.
#[derive(Clone, Debug)]
pub struct SelectiveProjections {
    /// `C × C`
    pub w_delta: Tensor,
    pub b_delta: Vec<f32>,
    /// `C × N`
    pub w_b: Tensor,
    pub b_b: Vec<f32>,
    /// `C × N`
    pub w_c: Tensor,
    pub b_c: Vec<f32>,
    pub a: Tensor,
    pub d: Vec<f32>,
    pub method: Discretization,
}

impl SelectiveProjections {
    pub fn project(&self, x: &Tensor) -> Result<SelectiveInputs> {
        let (l, c) = x.dims2()?;
        let n = self.w_b.shape()[1];
        if self.w_delta.shape() != [c, c] || self.w_b.shape() != [c, n] || self.w_c.shape() != [c, n] {
            return Err(dim_err!("projection weights do not match {c} channels"));
        }
        let affine = |w: &Tensor, b: &[f32], cols: usize| {
            let mut out = Vec::with_capacity(l * cols);
            for _ in 0..l {
                out.extend_from_slice(b);
            }
            kernels::gemm(x.data(), w.data(), &mut out, l, c, cols);
            out
        };
        let delta = affine(&self.w_delta, &self.b_delta, c).into_iter().map(softplus).collect();
        Ok(SelectiveInputs {
            delta: Tensor::new([l, c], delta)?,
            b: Tensor::new([l, n], affine(&self.w_b, &self.b_b, n))?,
            c: Tensor::new([l, n], affine(&self.w_c, &self.b_c, n))?,
            a: self.a.clone(),
            d: self.d.clone(),
            method: self.method,
        })
    }
}

/// Runs the selective recurrence: at every step each channel's diagonal `A`
/// is discretized with that step's `Δ`, then
/// `h = Ā h + β B_k x`, `y = C_k·h + D x`.
pub fn selective_scan(s: &SelectiveInputs, x: &Tensor) -> Result<Tensor> {
    let (l, c, n) = s.check_x(x)?;
    let mut y = vec![0.0; l * c];
    let mut h = vec![0.0f32; c * n];
    scan_forward(
        x.data(),
        s.delta.data(),
        s.a.data(),
        s.b.data(),
        s.c.data(),
        &s.d,
        &mut h,
        &mut y,
        None,
        l,
        c,
        n,
        s.method,
    );
    Tensor::new([l, c], y)
}

/// [`selective_scan`] evaluated with the blocked associative scan.
pub fn selective_scan_parallel(s: &SelectiveInputs, x: &Tensor) -> Result<Tensor> {
    let (l, c, n) = s.check_x(x)?;
    let elems: Vec<DiagAffine> = (0..l)
        .map(|k| {
            let mut a = Vec::with_capacity(c * n);
            let mut b = Vec::with_capacity(c * n);
            for ch in 0..c {
                let dt = s.delta.data()[k * c + ch];
                let xv = x.data()[k * c + ch];
                for j in 0..n {
                    let (ab, beta) = discretize_scalar(s.a.data()[ch * n + j], dt, s.method);
                    a.push(ab);
                    b.push(beta * s.b.data()[k * n + j] * xv);
                }
            }
            DiagAffine { a, b }
        })
        .collect();
    let states = associative_scan(&elems, &vec![0.0; c * n]);
    let mut y = vec![0.0; l * c];
    for (k, h) in states.iter().enumerate() {
        let ck = &s.c.data()[k * n..(k + 1) * n];
        for ch in 0..c {
            y[k * c + ch] = kernels::dot(ck, &h[ch * n..(ch + 1) * n]) + s.d[ch] * x.data()[k * c + ch];
        }
    }
    Tensor::new([l, c], y)
}

/// Sequential kernel over one sequence. When `hs` is given, the state after
/// every step is stored there (`L × C × N`).
#[allow(clippy::too_many_arguments)]
fn scan_forward(
    u: &[f32],
    delta: &[f32],
    a: &[f32],
    b: &[f32],
    cm: &[f32],
    d: &[f32],
    h: &mut [f32],
    y: &mut [f32],
    mut hs: Option<&mut [f32]>,
    l: usize,
    c: usize,
    n: usize,
    method: Discretization,
) {
    for t in 0..l {
        let bt = &b[t * n..(t + 1) * n];
        let ct = &cm[t * n..(t + 1) * n];
        for ch in 0..c {
            let dt = delta[t * c + ch];
            let xv = u[t * c + ch];
            let hc = &mut h[ch * n..(ch + 1) * n];
            let ac = &a[ch * n..(ch + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                let (ab, beta) = discretize_scalar(ac[j], dt, method);
                hc[j] = ab * hc[j] + beta * bt[j] * xv;
                acc += ct[j] * hc[j];
            }
            y[t * c + ch] = acc + d[ch] * xv;
        }
        if let Some(hs) = hs.as_deref_mut() {
            hs[t * c * n..(t + 1) * c * n].copy_from_slice(h);
        }
    }
}

/// Partial derivatives of `(Ā, β)` with respect to `(Δ, a)`.
#[inline(always)]
fn discretize_grads(a: f32, dt: f32, method: Discretization) -> (f32, f32, f32, f32, f32, f32) {
    let z = dt * a;
    match method {
        Discretization::Bilinear => {
            let inv = 1.0 / (1.0 - 0.5 * z);
            let inv2 = inv * inv;
            let ab = (1.0 + 0.5 * z) * inv;
            let beta = dt * inv;
            (ab, beta, a * inv2, dt * inv2, inv2, 0.5 * dt * dt * inv2)
        }
        Discretization::Zoh => {
            let e = z.exp();
            (e, dt * phi1(z), a * e, dt * e, e, dt * dt * phi1_prime(z))
        }
    }
}

struct BackOperands<'a> {
    du: &'a [f32],
    ddelta: &'a [f32],
    da: &'a [f32],
    db: &'a [f32],
    dc: &'a [f32],
    dd: &'a [f32],
    hs: &'a [f32],
    g: &'a [f32],
}

struct BackGrads<'a> {
    gu: &'a mut [f32],
    gdelta: &'a mut [f32],
    ga: &'a mut [f32],
    gb: &'a mut [f32],
    gc: &'a mut [f32],
    gd: &'a mut [f32],
}

/// Reverse-time pass of the selective scan. `grads_of(a, Δ)` returns Ā, β
/// and their partials; it is monomorphised per discretization so the
/// inner loop carries no branch.
#[inline(always)]
fn scan_backward(
    o: &BackOperands,
    out: &mut BackGrads,
    bs: usize,
    l: usize,
    ch: usize,
    n: usize,
    grads_of: impl Fn(f32, f32) -> (f32, f32, f32, f32, f32, f32),
) {
    let zero = vec![0.0; ch * n];
    let mut dh = vec![0.0; ch * n];
    for s in 0..bs {
        dh.iter_mut().for_each(|v| *v = 0.0);
        let hseq = &o.hs[s * l * ch * n..(s + 1) * l * ch * n];
        for t in (0..l).rev() {
            let uo = (s * l + t) * ch;
            let no = (s * l + t) * n;
            let h_t = &hseq[t * ch * n..(t + 1) * ch * n];
            let h_p = if t > 0 { &hseq[(t - 1) * ch * n..t * ch * n] } else { &zero[..] };
            let (bt, ct) = (&o.db[no..no + n], &o.dc[no..no + n]);
            let gc_t = &mut out.gc[no..no + n];
            let gb_t = &mut out.gb[no..no + n];
            for k in 0..ch {
                let gy = o.g[uo + k];
                let xv = o.du[uo + k];
                let dt = o.ddelta[uo + k];
                out.gd[k] += gy * xv;
                let row = k * n..(k + 1) * n;
                let (ar, hr, hpr) = (&o.da[row.clone()], &h_t[row.clone()], &h_p[row.clone()]);
                let dhr = &mut dh[row.clone()];
                let gar = &mut out.ga[row];
                let (mut g_dt, mut g_u) = (0.0, gy * o.dd[k]);
                for j in 0..n {
                    gc_t[j] += gy * hr[j];
                    let dht = dhr[j] + gy * ct[j];
                    let (ab, beta, dab_dt, dab_da, dbeta_dt, dbeta_da) = grads_of(ar[j], dt);
                    let g_ab = dht * hpr[j];
                    let g_beta = dht * bt[j] * xv;
                    gb_t[j] += dht * beta * xv;
                    g_u += dht * beta * bt[j];
                    g_dt += g_ab * dab_dt + g_beta * dbeta_dt;
                    gar[j] += g_ab * dab_da + g_beta * dbeta_da;
                    dhr[j] = dht * ab;
                }
                out.gu[uo + k] += g_u;
                out.gdelta[uo + k] += g_dt;
            }
        }
    }
}

impl Tape {
    /// Differentiable selective scan over a batch of sequences.
    ///
    /// Shapes: `u`, `delta`: `B×L×C`; `a`: `C×N`; `b`, `c`: `B×L×N`; `d`: `C`.
    /// Returns `y`: `B×L×C`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        method: Discretization,
    ) -> Result<Var> {
        let su = self.shape(u);
        let &[bs, l, ch] = &su[..] else {
            return Err(dim_err!("selective_scan: u must be B×L×C, got {su:?}"));
        };
        let sa = self.shape(a);
        let &[ca, n] = &sa[..] else {
            return Err(dim_err!("selective_scan: A must be C×N, got {sa:?}"));
        };
        if self.shape(delta) != su
            || ca != ch
            || self.shape(b) != [bs, l, n]
            || self.shape(c) != [bs, l, n]
            || self.numel(d) != ch
        {
            return Err(dim_err!("selective_scan: inconsistent operand shapes"));
        }
        let (du, ddelta, da, db, dc, dd) =
            (self.data(u), self.data(delta), self.data(a), self.data(b), self.data(c), self.data(d));
        if du.iter().chain(ddelta.iter()).chain(db.iter()).chain(dc.iter()).any(|v| v.is_nan()) {
            return Err(Error::Numeric("selective_scan: NaN input".into()));
        }
        let needs_grad = [u, delta, a, b, c, d].iter().any(|&v| self.requires_grad(v));
        let mut hs = if needs_grad { vec![0.0; bs * l * ch * n] } else { Vec::new() };
        let mut y = vec![0.0; bs * l * ch];
        for s in 0..bs {
            let mut h = vec![0.0; ch * n];
            let (o1, o2) = (s * l * ch, s * l * n);
            scan_forward(
                &du[o1..o1 + l * ch],
                &ddelta[o1..o1 + l * ch],
                &da,
                &db[o2..o2 + l * n],
                &dc[o2..o2 + l * n],
                &dd,
                &mut h,
                &mut y[o1..o1 + l * ch],
                needs_grad.then(|| &mut hs[s * l * ch * n..(s + 1) * l * ch * n]),
                l,
                ch,
                n,
                method,
            );
        }
        Ok(self.push_op(su.clone(), y, &[u, delta, a, b, c, d], move |g, grads| {
            let mut gu = vec![0.0; du.len()];
            let mut gdelta = vec![0.0; ddelta.len()];
            let mut ga = vec![0.0; da.len()];
            let mut gb = vec![0.0; db.len()];
            let mut gc = vec![0.0; dc.len()];
            let mut gd = vec![0.0; dd.len()];
            let ops = BackOperands { du: &du, ddelta: &ddelta, da: &da, db: &db, dc: &dc, dd: &dd, hs: &hs, g };
            let mut out =
                BackGrads { gu: &mut gu, gdelta: &mut gdelta, ga: &mut ga, gb: &mut gb, gc: &mut gc, gd: &mut gd };
            match method {
                Discretization::Bilinear => scan_backward(&ops, &mut out, bs, l, ch, n, |a, dt| {
                    discretize_grads(a, dt, Discretization::Bilinear)
                }),
                Discretization::Zoh => {
                    scan_backward(&ops, &mut out, bs, l, ch, n, |a, dt| discretize_grads(a, dt, Discretization::Zoh))
                }
            }
            grads.add_owned(u, gu);
            grads.add_owned(delta, gdelta);
            grads.add_owned(a, ga);
            grads.add_owned(b, gb);
            grads.add_owned(c, gc);
            grads.add_owned(d, gd);
        }))
    }
}
