use super::{kernels, Tape, Var};
use crate::error::{dim_err, param_err, Result};

/// Stride, zero padding and dilation per spatial axis (D, H, W).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Self { stride: [1; 3], padding: [0; 3], dilation: [1; 3] }
    }
}

impl Conv3dSpec {
    /// Stride 1 with padding that keeps extents for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        let p = dilation * (kernel - 1) / 2;
        Self { stride: [1; 3], padding: [p; 3], dilation: [dilation; 3] }
    }
}

/// Index arithmetic shared by the correlation kernels. `big` is the
/// high-resolution side (conv input / transposed-conv output) and `small`
/// the side indexed by output positions of the correlation.
#[derive(Clone, Copy)]
struct Geom {
    big: [usize; 3],
    small: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    dil: [usize; 3],
}

impl Geom {
    fn big_len(&self) -> usize {
        self.big.iter().product()
    }

    fn small_len(&self) -> usize {
        self.small.iter().product()
    }

    fn taps(&self) -> usize {
        self.k.iter().product()
    }

    /// Output positions `o` with `0 <= o*stride + offset < big`.
    fn range(&self, axis: usize, tap: usize) -> (usize, usize, isize) {
        let off = (tap * self.dil[axis]) as isize - self.pad[axis] as isize;
        let s = self.stride[axis] as isize;
        let big = self.big[axis] as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if big - off <= 0 { 0 } else { ((big - off + s - 1) / s).min(self.small[axis] as isize) };
        (lo.max(0) as usize, hi.max(0) as usize, off)
    }

    /// Calls `f(tap, small_row_start, big_row_start, count)` for every
    /// contiguous-in-W run; big indices advance by `stride[2]`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [_, sh, sw] = self.small;
        let [_, bh, bw] = self.big;
        for kd in 0..self.k[0] {
            let (d_lo, d_hi, d_off) = self.range(0, kd);
            for kh in 0..self.k[1] {
                let (h_lo, h_hi, h_off) = self.range(1, kh);
                for kw in 0..self.k[2] {
                    let (w_lo, w_hi, w_off) = self.range(2, kw);
                    if w_hi <= w_lo {
                        continue;
                    }
                    let tap = (kd * self.k[1] + kh) * self.k[2] + kw;
                    for od in d_lo..d_hi {
                        let id = (od as isize * self.stride[0] as isize + d_off) as usize;
                        for oh in h_lo..h_hi {
                            let ih = (oh as isize * self.stride[1] as isize + h_off) as usize;
                            let small = (od * sh + oh) * sw + w_lo;
                            let iw = (w_lo as isize * self.stride[2] as isize + w_off) as usize;
                            let big = (id * bh + ih) * bw + iw;
                            f(tap, small, big, w_hi - w_lo);
                        }
                    }
                }
            }
        }
    }
}

/// `out[co, s] += Σ_{ci, tap} w[co, ci, tap] · x[ci, big(s, tap)]`
fn correlate(x: &[f32], w: &[f32], out: &mut [f32], ci_n: usize, co_n: usize, g: &Geom) {
    let (bl, sl, taps, st) = (g.big_len(), g.small_len(), g.taps(), g.stride[2]);
    for co in 0..co_n {
        let orow = &mut out[co * sl..(co + 1) * sl];
        for ci in 0..ci_n {
            let xr = &x[ci * bl..(ci + 1) * bl];
            let wr = &w[(co * ci_n + ci) * taps..(co * ci_n + ci + 1) * taps];
            g.for_each_run(|tap, s, b, n| {
                let wv = wr[tap];
                if st == 1 {
                    for (o, &xv) in orow[s..s + n].iter_mut().zip(&xr[b..b + n]) {
                        *o += wv * xv;
                    }
                } else {
                    for j in 0..n {
                        orow[s + j] += wv * xr[b + j * st];
                    }
                }
            });
        }
    }
}

/// Adjoint of [`correlate`] with respect to `x`.
fn correlate_adjoint(gy: &[f32], w: &[f32], gx: &mut [f32], ci_n: usize, co_n: usize, g: &Geom) {
    let (bl, sl, taps, st) = (g.big_len(), g.small_len(), g.taps(), g.stride[2]);
    for ci in 0..ci_n {
        let xr = &mut gx[ci * bl..(ci + 1) * bl];
        for co in 0..co_n {
            let gr = &gy[co * sl..(co + 1) * sl];
            let wr = &w[(co * ci_n + ci) * taps..(co * ci_n + ci + 1) * taps];
            g.for_each_run(|tap, s, b, n| {
                let wv = wr[tap];
                if st == 1 {
                    for (xv, &gv) in xr[b..b + n].iter_mut().zip(&gr[s..s + n]) {
                        *xv += wv * gv;
                    }
                } else {
                    for j in 0..n {
                        xr[b + j * st] += wv * gr[s + j];
                    }
                }
            });
        }
    }
}

/// Gradient of [`correlate`] with respect to `w`.
fn correlate_wgrad(x: &[f32], gy: &[f32], gw: &mut [f32], ci_n: usize, co_n: usize, g: &Geom) {
    let (bl, sl, taps, st) = (g.big_len(), g.small_len(), g.taps(), g.stride[2]);
    for co in 0..co_n {
        let gr = &gy[co * sl..(co + 1) * sl];
        for ci in 0..ci_n {
            let xr = &x[ci * bl..(ci + 1) * bl];
            let wr = &mut gw[(co * ci_n + ci) * taps..(co * ci_n + ci + 1) * taps];
            g.for_each_run(|tap, s, b, n| {
                let acc: f32 = if st == 1 {
                    kernels::dot(&gr[s..s + n], &xr[b..b + n])
                } else {
                    (0..n).map(|j| gr[s + j] * xr[b + j * st]).sum()
                };
                wr[tap] += acc;
            });
        }
    }
}

/// Places `cols[voxel × (co, tap)]` of a transposed convolution whose
/// kernel equals its stride: every output voxel receives exactly one tap.
fn tile_scatter(cols: &[f32], out: &mut [f32], co_n: usize, g: &Geom) {
    let [sd, sh, sw] = g.small;
    let [_, bh, bw] = g.big;
    let [kd, kh, kw] = g.k;
    let (taps, bl) = (g.taps(), g.big_len());
    for d in 0..sd {
        for h in 0..sh {
            for w in 0..sw {
                let row = &cols[((d * sh + h) * sw + w) * co_n * taps..];
                for co in 0..co_n {
                    for a in 0..kd {
                        for b in 0..kh {
                            let base = co * bl + ((d * kd + a) * bh + h * kh + b) * bw + w * kw;
                            let t = (co * kd * kh + a * kh + b) * kw;
                            out[base..base + kw].copy_from_slice(&row[t..t + kw]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`tile_scatter`].
fn tile_gather(out: &[f32], co_n: usize, g: &Geom) -> Vec<f32> {
    let [sd, sh, sw] = g.small;
    let [_, bh, bw] = g.big;
    let [kd, kh, kw] = g.k;
    let (taps, bl) = (g.taps(), g.big_len());
    let mut cols = vec![0.0; g.small_len() * co_n * taps];
    for d in 0..sd {
        for h in 0..sh {
            for w in 0..sw {
                let row = &mut cols[((d * sh + h) * sw + w) * co_n * taps..];
                for co in 0..co_n {
                    for a in 0..kd {
                        for b in 0..kh {
                            let base = co * bl + ((d * kd + a) * bh + h * kh + b) * bw + w * kw;
                            let t = (co * kd * kh + a * kh + b) * kw;
                            row[t..t + kw].copy_from_slice(&out[base..base + kw]);
                        }
                    }
                }
            }
        }
    }
    cols
}

fn dims4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match *shape {
        [c, d, h, w] => Ok([c, d, h, w]),
        _ => Err(dim_err!("{what}: expected C×D×H×W, got {shape:?}")),
    }
}

fn dims5(shape: &[usize], what: &str) -> Result<[usize; 5]> {
    match *shape {
        [a, b, d, h, w] => Ok([a, b, d, h, w]),
        _ => Err(dim_err!("{what}: expected a 5-d kernel, got {shape:?}")),
    }
}

fn add_bias(out: &mut [f32], bias: &[f32]) {
    let per = out.len() / bias.len().max(1);
    for (chunk, &b) in out.chunks_mut(per).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(g: &[f32], channels: usize) -> Vec<f32> {
    let per = g.len() / channels.max(1);
    g.chunks(per).map(|c| c.iter().sum()).collect()
}

impl Tape {
    /// 3-D cross-correlation of `x[Cin×D×H×W]` with `kernel[Cout×Cin×kd×kh×kw]`.
    pub fn conv3d(&self, x: Var, kernel: Var, bias: Option<Var>, spec: Conv3dSpec) -> Result<Var> {
        let [ci_n, d, h, w] = dims4(&self.shape(x), "conv3d")?;
        let [co_n, ci_k, kd, kh, kw] = dims5(&self.shape(kernel), "conv3d")?;
        if ci_k != ci_n {
            return Err(dim_err!("conv3d: kernel expects {ci_k} input channels, got {ci_n}"));
        }
        if spec.stride.contains(&0) || spec.dilation.contains(&0) {
            return Err(param_err!("conv3d: stride and dilation must be >= 1"));
        }
        let big = [d, h, w];
        let k = [kd, kh, kw];
        let mut small = [0; 3];
        for a in 0..3 {
            let eff = (k[a] - 1) * spec.dilation[a] + 1;
            let padded = big[a] + 2 * spec.padding[a];
            if k[a] == 0 || eff > padded {
                return Err(dim_err!("conv3d: effective kernel {eff} exceeds padded input {padded} on axis {a}"));
            }
            small[a] = (padded - eff) / spec.stride[a] + 1;
        }
        if let Some(b) = bias {
            if self.numel(b) != co_n {
                return Err(dim_err!("conv3d: bias of {} for {co_n} channels", self.numel(b)));
            }
        }
        let geom = Geom { big, small, k, stride: spec.stride, pad: spec.padding, dil: spec.dilation };
        let (dx, dk) = (self.data(x), self.data(kernel));
        let mut out = vec![0.0; co_n * geom.small_len()];
        let pointwise = k == [1; 3] && spec.stride == [1; 3] && spec.padding == [0; 3];
        if pointwise {
            kernels::gemm(&dk, &dx, &mut out, co_n, ci_n, geom.big_len());
        } else {
            correlate(&dx, &dk, &mut out, ci_n, co_n, &geom);
        }
        let bdata = bias.map(|b| self.data(b));
        if let Some(bd) = &bdata {
            add_bias(&mut out, bd);
        }
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push_op(vec![co_n, small[0], small[1], small[2]], out, &inputs, move |g, grads| {
            let n = geom.big_len();
            if grads.wants(x) {
                if pointwise {
                    kernels::gemm_tn(&dk, g, grads.slot(x), co_n, ci_n, n);
                } else {
                    correlate_adjoint(g, &dk, grads.slot(x), ci_n, co_n, &geom);
                }
            }
            if grads.wants(kernel) {
                if pointwise {
                    kernels::gemm_nt(g, &dx, grads.slot(kernel), co_n, n, ci_n);
                } else {
                    correlate_wgrad(&dx, g, grads.slot(kernel), ci_n, co_n, &geom);
                }
            }
            if let Some(b) = bias {
                if grads.wants(b) {
                    grads.add_owned(b, bias_grad(g, co_n));
                }
            }
        }))
    }

    /// Transposed 3-D convolution (no padding) of `x[Cin×D×H×W]` with
    /// `kernel[Cin×Cout×kd×kh×kw]`; output extent per axis is
    /// `(in − 1)·stride + kernel`. This is the adjoint of [`Tape::conv3d`]
    /// with the same kernel array and stride.
    pub fn conv_transpose3d(&self, x: Var, kernel: Var, bias: Option<Var>, stride: [usize; 3]) -> Result<Var> {
        if stride.contains(&0) {
            return Err(param_err!("conv_transpose3d: stride must be >= 1, got {stride:?}"));
        }
        let [ci_n, d, h, w] = dims4(&self.shape(x), "conv_transpose3d")?;
        let [ci_k, co_n, kd, kh, kw] = dims5(&self.shape(kernel), "conv_transpose3d")?;
        if ci_k != ci_n {
            return Err(dim_err!("conv_transpose3d: kernel expects {ci_k} input channels, got {ci_n}"));
        }
        if let Some(b) = bias {
            if self.numel(b) != co_n {
                return Err(dim_err!("conv_transpose3d: bias of {} for {co_n} channels", self.numel(b)));
            }
        }
        let small = [d, h, w];
        let k = [kd, kh, kw];
        let big = [0, 1, 2].map(|a| (small[a] - 1) * stride[a] + k[a]);
        // As a correlation, the transposed kernel has Co = Cin and Ci = Cout.
        let geom = Geom { big, small, k, stride, pad: [0; 3], dil: [1; 3] };
        let (dx, dk) = (self.data(x), self.data(kernel));
        let mut out = vec![0.0; co_n * geom.big_len()];
        let tiled = k == stride;
        if tiled {
            let mut cols = vec![0.0; geom.small_len() * co_n * geom.taps()];
            kernels::gemm_tn(&dx, &dk, &mut cols, ci_n, geom.small_len(), co_n * geom.taps());
            tile_scatter(&cols, &mut out, co_n, &geom);
        } else {
            correlate_adjoint(&dx, &dk, &mut out, co_n, ci_n, &geom);
        }
        let bdata = bias.map(|b| self.data(b));
        if let Some(bd) = &bdata {
            add_bias(&mut out, bd);
        }
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push_op(vec![co_n, big[0], big[1], big[2]], out, &inputs, move |g, grads| {
            if tiled {
                let (n, ct) = (geom.small_len(), co_n * geom.taps());
                let cols = tile_gather(g, co_n, &geom);
                if grads.wants(x) {
                    kernels::gemm_nt(&dk, &cols, grads.slot(x), ci_n, ct, n);
                }
                if grads.wants(kernel) {
                    kernels::gemm(&dx, &cols, grads.slot(kernel), ci_n, n, ct);
                }
            } else {
                if grads.wants(x) {
                    correlate(g, &dk, grads.slot(x), co_n, ci_n, &geom);
                }
                if grads.wants(kernel) {
                    correlate_wgrad(g, &dx, grads.slot(kernel), co_n, ci_n, &geom);
                }
            }
            if let Some(b) = bias {
                if grads.wants(b) {
                    grads.add_owned(b, bias_grad(g, co_n));
                }
            }
        }))
    }

    /// Causal depthwise 1-D convolution over `x[B×L×C]` with `kernel[C×K]`:
    /// `y[b,t,c] = bias[c] + Σ_j kernel[c,j]·x[b, t+j−(K−1), c]`.
    pub fn causal_conv1d(&self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x);
        let &[bs, l, c] = &shape[..] else {
            return Err(dim_err!("causal_conv1d: expected B×L×C, got {shape:?}"));
        };
        let ks = self.shape(kernel);
        let &[kc, k] = &ks[..] else {
            return Err(dim_err!("causal_conv1d: kernel must be C×K, got {ks:?}"));
        };
        if kc != c || self.numel(bias) != c || k == 0 {
            return Err(dim_err!("causal_conv1d: kernel {ks:?} / bias do not match {c} channels"));
        }
        let (dx, dk, db) = (self.data(x), self.data(kernel), self.data(bias));
        let mut out = vec![0.0; dx.len()];
        for b in 0..bs {
            for t in 0..l {
                let orow = &mut out[(b * l + t) * c..(b * l + t + 1) * c];
                orow.copy_from_slice(&db);
                for j in 0..k {
                    let Some(src) = (t + j).checked_sub(k - 1) else { continue };
                    let xrow = &dx[(b * l + src) * c..(b * l + src + 1) * c];
                    for ch in 0..c {
                        orow[ch] += dk[ch * k + j] * xrow[ch];
                    }
                }
            }
        }
        Ok(self.push_op(shape, out, &[x, kernel, bias], move |g, grads| {
            if grads.wants(bias) {
                let gb = grads.slot(bias);
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
            }
            let want_x = grads.wants(x);
            let want_k = grads.wants(kernel);
            let mut gx = if want_x { vec![0.0; dx.len()] } else { Vec::new() };
            let mut gk = if want_k { vec![0.0; c * k] } else { Vec::new() };
            for b in 0..bs {
                for t in 0..l {
                    let grow = &g[(b * l + t) * c..(b * l + t + 1) * c];
                    for j in 0..k {
                        let Some(src) = (t + j).checked_sub(k - 1) else { continue };
                        let base = (b * l + src) * c;
                        for ch in 0..c {
                            if want_x {
                                gx[base + ch] += dk[ch * k + j] * grow[ch];
                            }
                            if want_k {
                                gk[ch * k + j] += dx[base + ch] * grow[ch];
                            }
                        }
                    }
                }
            }
            if want_x {
                grads.add_owned(x, gx);
            }
            if want_k {
                grads.add_owned(kernel, gk);
            }
        }))
    }
}
