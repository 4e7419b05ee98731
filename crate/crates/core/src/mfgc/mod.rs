//! Multi-frequency gated convolution: a separable orthonormal 3-D DCT,
//! per-channel pooling of the selected coefficients, a sigmoid channel gate
//! and the inverse transform.

use std::f64::consts::PI;
use std::rc::Rc;

use crate::error::{dim_err, param_err, Result};
use crate::tensor::{Init, ParamId, ParamStore, Reduce, Tape, Tensor, Var};

/// A set of `(z, u, v)` frequency triples within `bounds = (D, H, W)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreqIndexSet {
    bounds: [usize; 3],
    triples: Vec<[usize; 3]>,
}

impl FreqIndexSet {
    pub fn new(bounds: [usize; 3], triples: Vec<[usize; 3]>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for t in &triples {
            if t.iter().zip(&bounds).any(|(k, n)| k >= n) {
                return Err(param_err!("frequency {t:?} outside bounds {bounds:?}"));
            }
            if !seen.insert(*t) {
                return Err(param_err!("duplicate frequency {t:?}"));
            }
        }
        Ok(FreqIndexSet { bounds, triples })
    }

    /// Every frequency of the cube, in row-major order.
    pub fn full(bounds: [usize; 3]) -> Self {
        Self::low(bounds, bounds)
    }

    /// The low-frequency sub-cube `[0, cube)` clipped to `bounds`.
    pub fn low(bounds: [usize; 3], cube: [usize; 3]) -> Self {
        let c = [0, 1, 2].map(|i| cube[i].min(bounds[i]));
        let triples = (0..c[0]).flat_map(|z| (0..c[1]).flat_map(move |u| (0..c[2]).map(move |v| [z, u, v]))).collect();
        FreqIndexSet { bounds, triples }
    }

    pub fn bounds(&self) -> [usize; 3] {
        self.bounds
    }

    pub fn triples(&self) -> &[[usize; 3]] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    fn is_full(&self) -> bool {
        self.len() == self.bounds.iter().product::<usize>()
            && self.triples.iter().enumerate().all(|(i, t)| flat(self.bounds, *t) == i)
    }

    fn flat_indices(&self) -> Rc<Vec<usize>> {
        Rc::new(self.triples.iter().map(|&t| flat(self.bounds, t)).collect())
    }
}

fn flat([_, h, w]: [usize; 3], [z, u, v]: [usize; 3]) -> usize {
    (z * h + u) * w + v
}

fn scale(n: usize, k: usize) -> f64 {
    if k == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    }
}

/// Orthonormal 1-D DCT-II matrix, `m[k][n] = s_k·cos(π(n+½)k/N)`.
pub fn dct_matrix(n: usize) -> Tensor {
    Tensor::from_fn([n, n], |i| {
        let (k, x) = (i / n, i % n);
        (scale(n, k) * (PI * (x as f64 + 0.5) * k as f64 / n as f64).cos()) as f32
    })
}

/// The 3-D basis function for frequency `k` evaluated on the whole cube.
pub fn dct_basis(bounds: [usize; 3], k: [usize; 3]) -> Result<Tensor> {
    if k.iter().zip(&bounds).any(|(a, n)| a >= n) {
        return Err(param_err!("frequency {k:?} outside bounds {bounds:?}"));
    }
    let axis = |a: usize, x: usize| {
        let n = bounds[a];
        scale(n, k[a]) * (PI * (x as f64 + 0.5) * k[a] as f64 / n as f64).cos()
    };
    let [_, h, w] = bounds;
    Ok(Tensor::from_fn(bounds.to_vec(), |i| {
        let (z, y, x) = (i / (h * w), i / w % h, i % w);
        (axis(0, z) * axis(1, y) * axis(2, x)) as f32
    }))
}

fn check_volume(tape: &Tape, x: Var, bounds: [usize; 3]) -> Result<usize> {
    let shape = tape.shape(x);
    let &[c, d, h, w] = &shape[..] else {
        return Err(dim_err!("expected C×D×H×W, got {shape:?}"));
    };
    if [d, h, w] != bounds {
        return Err(dim_err!("volume {:?} does not match frequency bounds {bounds:?}", [d, h, w]));
    }
    Ok(c)
}

/// Coefficients `[C × K]` of `x[C×D×H×W]` at the frequencies of `idx`.
pub fn dct_forward(tape: &Tape, x: Var, idx: &FreqIndexSet) -> Result<Var> {
    let c = check_volume(tape, x, idx.bounds)?;
    let mut y = x;
    for (axis, &n) in idx.bounds.iter().enumerate() {
        // Row sums of the orthonormal DCT are √N for k = 0 and zero
        // otherwise, so constant lines land exactly on the DC coefficient.
        let mut sums = vec![0.0f32; n];
        sums[0] = (n as f64).sqrt() as f32;
        y = tape.matmul_axis_shifted(y, &dct_matrix(n), &sums, axis + 1)?;
    }
    let y = tape.reshape(y, [c, idx.bounds.iter().product()])?;
    if idx.is_full() {
        Ok(y)
    } else {
        tape.gather_last(y, idx.flat_indices())
    }
}

/// Synthesis `Σ_k coeff_k·basis_k` from `[C × K]` coefficients.
pub fn idct(tape: &Tape, coeffs: Var, idx: &FreqIndexSet) -> Result<Var> {
    let shape = tape.shape(coeffs);
    let &[c, k] = &shape[..] else {
        return Err(dim_err!("coefficients must be C×K, got {shape:?}"));
    };
    if k != idx.len() {
        return Err(dim_err!("{k} coefficients for an index set of {}", idx.len()));
    }
    let cube = idx.bounds.iter().product();
    let y = if idx.is_full() { coeffs } else { tape.scatter_last(coeffs, idx.flat_indices(), cube)? };
    let [d, h, w] = idx.bounds;
    let mut y = tape.reshape(y, [c, d, h, w])?;
    for (axis, &n) in idx.bounds.iter().enumerate() {
        let m = dct_matrix(n);
        let mt = Tensor::from_fn([n, n], |i| m.data()[(i % n) * n + i / n]);
        y = tape.matmul_axis(y, &mt, axis + 1)?;
    }
    Ok(y)
}

/// Per-channel mean, max and min over the `K` coefficients: `[3 × C]`.
pub fn freq_pool(tape: &Tape, coeffs: Var) -> Result<Var> {
    let shape = tape.shape(coeffs);
    let &[c, k] = &shape[..] else {
        return Err(dim_err!("coefficients must be C×K, got {shape:?}"));
    };
    if k == 0 {
        return Err(param_err!("cannot pool an empty frequency set"));
    }
    let pools = [Reduce::Mean, Reduce::Max, Reduce::Min]
        .map(|r| tape.reduce_last(coeffs, r).and_then(|v| tape.reshape(v, [1, c])));
    let [a, b, m] = pools;
    tape.concat(&[a?, b?, m?], 0)
}

/// Shared two-layer gate `M = σ(Σ_pool W_r·δ(W_1·Z_pool))` with GELU as `δ`.
#[derive(Clone, Debug)]
pub struct GateMlp {
    pub channels: usize,
    pub reduced: usize,
    w1: ParamId,
    wr: ParamId,
}

impl GateMlp {
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, channels: usize, ratio: usize) -> Result<Self> {
        if channels == 0 || ratio == 0 {
            return Err(param_err!("gate needs positive channels and ratio"));
        }
        let reduced = (channels / ratio).max(1);
        let w1 = store.add(format!("{prefix}.w1"), init.fan_in([channels, reduced], channels), false);
        let wr = store.add(format!("{prefix}.wr"), init.fan_in([reduced, channels], reduced), false);
        Ok(GateMlp { channels, reduced, w1, wr })
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w1, self.wr]
    }

    /// Gate values `[C]` in `(0, 1)` from pooled stats `[3 × C]`.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, stats: Var) -> Result<Var> {
        let shape = tape.shape(stats);
        if shape != [3, self.channels] {
            return Err(dim_err!("gate built for 3×{}, got {shape:?}", self.channels));
        }
        let hidden = tape.gelu(tape.matmul(stats, tape.param(store, self.w1))?);
        let per_pool = tape.matmul(hidden, tape.param(store, self.wr))?;
        let summed = tape.matmul(tape.constant(Tensor::full([1, 3], 1.0)), per_pool)?;
        tape.reshape(tape.sigmoid(summed), [self.channels])
    }
}

/// Free-function form of [`GateMlp::forward`].
pub fn freq_gate(tape: &Tape, store: &ParamStore, stats: Var, g: &GateMlp) -> Result<Var> {
    g.forward(tape, store, stats)
}

/// The complete block.
#[derive(Clone, Debug)]
pub struct Mfgc {
    pub idx: FreqIndexSet,
    pub gate: GateMlp,
}

impl Mfgc {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        channels: usize,
        idx: FreqIndexSet,
    ) -> Result<Self> {
        let gate = GateMlp::new(store, init, &format!("{prefix}.gate"), channels, 4)?;
        Ok(Mfgc { idx, gate })
    }

    /// `x[C×D×H×W]` → gated reconstruction of the same shape.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let coeffs = dct_forward(tape, x, &self.idx)?;
        let m = self.gate.forward(tape, store, freq_pool(tape, coeffs)?)?;
        let gated = tape.mul_broadcast(coeffs, m, 0)?;
        idct(tape, gated, &self.idx)
    }
}

/// Free-function form of [`Mfgc::forward`].
pub fn mfgc_forward(tape: &Tape, store: &ParamStore, block: &Mfgc, x: Var) -> Result<Var> {
    block.forward(tape, store, x)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{grad_check, grad_check_params};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Coefficients by direct summation against the directly evaluated basis.
    fn naive_dct(x: &Tensor, idx: &FreqIndexSet) -> Vec<f64> {
        let c = x.shape()[0];
        let vox: usize = idx.bounds.iter().product();
        let mut out = Vec::new();
        for ch in 0..c {
            for &k in idx.triples() {
                let b = dct_basis(idx.bounds, k).unwrap();
                let xs = &x.data()[ch * vox..(ch + 1) * vox];
                out.push(xs.iter().zip(b.data()).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum());
            }
        }
        out
    }

    #[test]
    fn dc_basis_is_constant() {
        let b = dct_basis([2, 3, 4], [0, 0, 0]).unwrap();
        let want = (1.0f64 / 24.0).sqrt() as f32;
        assert!(b.data().iter().all(|&v| (v - want).abs() < 1e-7));
    }

    #[test]
    fn first_axis_cosine_at_voxel() {
        // raw cos(π(n+½)k/N) at N=2, k=1, n=1 is cos(3π/4); the DC factors
        // on the other two axes and √(2/2) on this one give the value below
        let b = dct_basis([2, 2, 2], [1, 0, 0]).unwrap();
        let want = -(0.5f64.sqrt()) * 0.5;
        assert!((f64::from(b.at(&[1, 0, 0])) - want).abs() < 1e-7);
        assert!(dct_basis([2, 2, 2], [2, 0, 0]).is_err());
    }

    #[test]
    fn gram_is_identity() {
        let bounds = [3, 4, 2];
        let all = FreqIndexSet::full(bounds);
        let bases: Vec<Tensor> = all.triples().iter().map(|&k| dct_basis(bounds, k).unwrap()).collect();
        for (i, a) in bases.iter().enumerate() {
            for (j, b) in bases.iter().enumerate() {
                let g: f64 = a.data().iter().zip(b.data()).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g - want).abs() < 1e-5, "({i},{j}) = {g}");
            }
        }
    }

    #[test]
    fn forward_matches_direct_summation() {
        let bounds = [3, 4, 5];
        let x = random(&[2, 3, 4, 5], 1);
        for idx in
            [FreqIndexSet::full(bounds), FreqIndexSet::new(bounds, vec![[2, 0, 1], [0, 3, 4], [1, 1, 1]]).unwrap()]
        {
            let tape = Tape::new();
            let got = tape.value(dct_forward(&tape, tape.constant(x.clone()), &idx).unwrap());
            let want = naive_dct(&x, &idx);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((f64::from(*g) - w).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn constant_volume_is_dc_only() {
        let bounds = [4, 4, 4];
        let tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 4, 4, 4], 2.5));
        let c = tape.value(dct_forward(&tape, x, &FreqIndexSet::full(bounds)).unwrap());
        assert!((c.data()[0] - 2.5 * 8.0).abs() < 1e-4);
        assert!(c.data()[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_gives_basis_values() {
        let bounds = [2, 3, 3];
        let idx = FreqIndexSet::full(bounds);
        let mut x = Tensor::zeros([1, 2, 3, 3]);
        x.data_mut()[0] = 1.0;
        let tape = Tape::new();
        let c = tape.value(dct_forward(&tape, tape.constant(x), &idx).unwrap());
        for (i, &k) in idx.triples().iter().enumerate() {
            assert!((c.data()[i] - dct_basis(bounds, k).unwrap().data()[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn linearity() {
        let idx = FreqIndexSet::low([4, 4, 4], [2, 3, 2]);
        let (x, y) = (random(&[2, 4, 4, 4], 2), random(&[2, 4, 4, 4], 3));
        let tape = Tape::new();
        let mix = Tensor::from_fn([2, 4, 4, 4], |i| 2.0 * x.data()[i] - 0.5 * y.data()[i]);
        let f = |t: &Tensor| tape.value(dct_forward(&tape, tape.constant(t.clone()), &idx).unwrap());
        let (cx, cy, cm) = (f(&x), f(&y), f(&mix));
        for i in 0..cm.numel() {
            assert!((cm.data()[i] - (2.0 * cx.data()[i] - 0.5 * cy.data()[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn roundtrip_on_full_set() {
        let idx = FreqIndexSet::full([8, 8, 8]);
        let x = random(&[2, 8, 8, 8], 4);
        let tape = Tape::new();
        let c = dct_forward(&tape, tape.constant(x.clone()), &idx).unwrap();
        let back = tape.value(idct(&tape, c, &idx).unwrap());
        let norm = x.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(back.max_abs_diff(&x) / norm < 1e-4);
    }

    #[test]
    fn dc_only_and_empty_synthesis() {
        let bounds = [2, 2, 3];
        let tape = Tape::new();
        let dc = FreqIndexSet::low(bounds, [1, 1, 1]);
        let v = tape.value(idct(&tape, tape.constant(Tensor::full([1, 1], 3.0)), &dc).unwrap());
        let first = v.data()[0];
        assert!(v.data().iter().all(|&a| (a - first).abs() < 1e-6));
        let empty = FreqIndexSet::new(bounds, vec![]).unwrap();
        let z = tape.value(idct(&tape, tape.constant(Tensor::zeros([2, 0])), &empty).unwrap());
        assert_eq!(z.shape(), [2, 2, 2, 3]);
        assert!(z.data().iter().all(|&a| a == 0.0));
        assert!(idct(&tape, tape.constant(Tensor::zeros([2, 3])), &empty).is_err());
    }

    #[test]
    fn index_set_validation() {
        assert!(FreqIndexSet::new([2, 2, 2], vec![[0, 0, 2]]).is_err());
        assert!(FreqIndexSet::new([2, 2, 2], vec![[1, 0, 0], [1, 0, 0]]).is_err());
        assert_eq!(FreqIndexSet::low([4, 2, 8], [2, 2, 2]).len(), 8);
    }

    #[test]
    fn pooling_by_hand() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::new([2, 2], vec![1.0, 3.0, -1.0, -1.0]).unwrap());
        let p = tape.value(freq_pool(&tape, c).unwrap());
        assert_eq!(p.data(), &[2.0, -1.0, 3.0, -1.0, 1.0, -1.0]);
        let one = tape.constant(Tensor::new([2, 1], vec![4.0, 5.0]).unwrap());
        assert_eq!(tape.value(freq_pool(&tape, one).unwrap()).data(), &[4.0, 5.0, 4.0, 5.0, 4.0, 5.0]);
        assert!(freq_pool(&tape, tape.constant(Tensor::zeros([2, 0]))).is_err());
    }

    #[test]
    fn zero_gate_weights_give_one_half() {
        let mut store = ParamStore::new();
        let g = GateMlp::new(&mut store, &mut Init::new(0), "g", 8, 4).unwrap();
        for id in g.params() {
            store.get_mut(id).tensor.data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let m = tape.value(g.forward(&tape, &store, tape.constant(random(&[3, 8], 5))).unwrap());
        assert!(m.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gate_is_monotone_in_a_pool_with_positive_weights() {
        let mut store = ParamStore::new();
        let g = GateMlp::new(&mut store, &mut Init::new(0), "g", 1, 4).unwrap();
        store.get_mut(g.w1).tensor.data_mut()[0] = 0.7;
        store.get_mut(g.wr).tensor.data_mut()[0] = 1.3;
        let eval = |z: f32| {
            let tape = Tape::new();
            let s = tape.constant(Tensor::new([3, 1], vec![z, 0.2, -0.1]).unwrap());
            tape.value(g.forward(&tape, &store, s).unwrap()).data()[0]
        };
        let mut prev = eval(-0.5);
        for i in 1..20 {
            let cur = eval(-0.5 + i as f32 * 0.1);
            assert!(cur > prev && cur < 1.0 && cur > 0.0);
            prev = cur;
        }
    }

    #[test]
    fn unit_and_zero_gates() {
        let idx = FreqIndexSet::full([4, 4, 4]);
        let x = random(&[2, 4, 4, 4], 6);
        let tape = Tape::new();
        let c = dct_forward(&tape, tape.constant(x.clone()), &idx).unwrap();
        let ones = tape.mul_broadcast(c, tape.constant(Tensor::full([2], 1.0)), 0).unwrap();
        assert!(tape.value(idct(&tape, ones, &idx).unwrap()).max_abs_diff(&x) < 1e-4);
        let zeros = tape.mul_broadcast(c, tape.constant(Tensor::zeros([2])), 0).unwrap();
        assert!(tape.value(idct(&tape, zeros, &idx).unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mfgc_gradients() {
        let mut store = ParamStore::new();
        let block = Mfgc::new(&mut store, &mut Init::new(2), "f", 2, FreqIndexSet::full([4, 4, 4])).unwrap();
        let x = random(&[2, 4, 4, 4], 7);
        let w = random(&[2, 4, 4, 4], 8);
        let tape = Tape::new();
        assert_eq!(tape.shape(block.forward(&tape, &store, tape.constant(x.clone())).unwrap()), [2, 4, 4, 4]);
        let f = |t: &Tape, v: Var| {
            let y = block.forward(t, &store, v)?;
            Ok(t.sum(t.mul(y, t.constant(w.clone()))?))
        };
        let r = grad_check(f, &x, 1e-2).unwrap();
        assert!(r.max_rel_err < 1e-3, "input: {}", r.max_rel_err);
        let g = |t: &Tape, s: &ParamStore| {
            let y = block.forward(t, s, t.constant(x.clone()))?;
            Ok(t.sum(t.mul(y, t.constant(w.clone()))?))
        };
        let r = grad_check_params(&store, g, 1e-2, 4).unwrap();
        assert!(r.max_rel_err < 1e-3, "params: {}", r.max_rel_err);
    }
}
