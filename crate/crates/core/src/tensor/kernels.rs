//! Slice-level numeric kernels. All loops run in a fixed order, so results
//! are bitwise reproducible for identical inputs.

const LANES: usize = 8;

/// Dot product with eight independent accumulators.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Transpose of a row-major `rows × cols` matrix.
pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if n < LANES && k >= 2 * LANES && m >= 4 {
        // Rows too short to vectorise; use dot products against bᵀ.
        return gemm_nt_dot(a, &transpose(&b[..k * n], k, n), c, m, k, n);
    }
    gemm_blocked(a, b, c, m, k, n);
}

const MR: usize = 4;
const NR: usize = 16;
const KC: usize = 256;

/// Register-blocked kernel: `MR × NR` tiles of `c` are accumulated over the
/// whole `k` range before being added back.
fn gemm_blocked(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    gemm_strided(a, (k, 1), b, c, m, k, n);
}

/// `c += A · b` where `A(i, p) = a[i·rs + p·cs]`. Register-blocked: `MR × NR`
/// tiles of `c` accumulate over a `KC`-long slice of the reduction, so a
/// column panel of `b` stays in cache.
fn gemm_strided(a: &[f32], (rs, cs): (usize, usize), b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for p0 in (0..k).step_by(KC) {
        let kc = KC.min(k - p0);
        let bp = &b[p0 * n..];
        let at = |i: usize, p: usize| a[i * rs + (p0 + p) * cs];
        let mut i = 0;
        while i + MR <= m {
            let mut j = 0;
            while j + NR <= n {
                let mut acc = [[0.0f32; NR]; MR];
                for p in 0..kc {
                    let brow: &[f32; NR] = bp[p * n + j..][..NR].try_into().expect("NR columns");
                    let (x0, x1, x2, x3) = (at(i, p), at(i + 1, p), at(i + 2, p), at(i + 3, p));
                    for q in 0..NR {
                        let bv = brow[q];
                        acc[0][q] += x0 * bv;
                        acc[1][q] += x1 * bv;
                        acc[2][q] += x2 * bv;
                        acc[3][q] += x3 * bv;
                    }
                }
                for (r, acc_r) in acc.iter().enumerate() {
                    let crow = &mut c[(i + r) * n + j..][..NR];
                    crow.iter_mut().zip(acc_r).for_each(|(cv, av)| *cv += av);
                }
                j += NR;
            }
            if j < n {
                for r in i..i + MR {
                    for p in 0..kc {
                        axpy(at(r, p), &bp[p * n + j..(p + 1) * n], &mut c[r * n + j..(r + 1) * n]);
                    }
                }
            }
            i += MR;
        }
        for r in i..m {
            for p in 0..kc {
                axpy(at(r, p), &bp[p * n..(p + 1) * n], &mut c[r * n..(r + 1) * n]);
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if (k < 4 * LANES || n >= 2 * LANES) && n >= LANES && m >= MR {
        return gemm_blocked(a, &transpose(&b[..n * k], n, k), c, m, k, n);
    }
    gemm_nt_dot(a, b, c, m, k, n);
}

fn gemm_nt_dot(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[r×m]ᵀ · b[r×n]`
pub fn gemm_tn(a: &[f32], b: &[f32], c: &mut [f32], r: usize, m: usize, n: usize) {
    debug_assert!(a.len() >= r * m && b.len() >= r * n && c.len() >= m * n);
    if n < LANES && r >= 2 * LANES {
        let (at, bt) = (transpose(&a[..r * m], r, m), transpose(&b[..r * n], r, n));
        return gemm_nt_dot(&at, &bt, c, m, r, n);
    }
    gemm_strided(a, (1, m), b, c, m, r, n);
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (with `shape`) into a new buffer laid out in the axis order
/// `perm`, i.e. `out.shape[i] = shape[perm[i]]`.
pub fn permute(src: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let nd = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    // The innermost output axis is copied in a tight loop.
    let inner = out_shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        }
        // Advance the multi-index over all axes except the last.
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f32], r: usize, c: usize) -> Vec<f32> {
        permute(x, &[r, c], &[1, 0])
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (5, 11, 7);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 7 % 13) as f32 - 6.0) / 5.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 5 % 11) as f32 - 5.0) / 3.0).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm(&a, &b, &mut c, m, k, n);
        let mut c_nt = vec![0.0; m * n];
        gemm_nt(&a, &transpose(&b, k, n), &mut c_nt, m, k, n);
        let mut c_tn = vec![0.0; m * n];
        gemm_tn(&transpose(&a, m, k), &b, &mut c_tn, k, m, n);
        for i in 0..m * n {
            assert!((c[i] - want[i]).abs() < 1e-4);
            assert!((c_nt[i] - want[i]).abs() < 1e-4);
            assert!((c_tn[i] - want[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn permute_roundtrip() {
        let shape = [2, 3, 4, 5];
        let src: Vec<f32> = (0..120).map(|i| i as f32).collect();
        let perm = [2, 0, 3, 1];
        let p = permute(&src, &shape, &perm);
        let pshape: Vec<usize> = perm.iter().map(|&i| shape[i]).collect();
        // element (a,b,c,d) of src lands at (c,a,d,b)
        let ps = strides(&pshape);
        assert_eq!(p[ps[0] + ps[1] + 4 * ps[2] + 2 * ps[3]], src[60 + 2 * 20 + 5 + 4]);
        assert_eq!(permute(&p, &pshape, &inverse_perm(&perm)), src);
    }
}
