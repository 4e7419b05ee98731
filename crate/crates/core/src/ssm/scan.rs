use rayon::prelude::*;

use super::{DiscreteSsm, StateMatrix};
use crate::error::{dim_err, Result};
use crate::tensor::{kernels, Tensor};

/// An affine map `h ↦ a·h + b`. `then` composes `self` followed by `next`:
/// `(a₁,b₁) ∘ (a₂,b₂) = (a₂a₁, a₂b₁ + b₂)`, which is associative.
pub trait Affine: Clone + Send + Sync {
    fn then(&self, next: &Self) -> Self;
    fn apply(&self, h: &[f32]) -> Vec<f32>;
}

/// Affine map with a diagonal linear part.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagAffine {
    pub a: Vec<f32>,
    pub b: Vec<f32>,
}

impl Affine for DiagAffine {
    fn then(&self, next: &Self) -> Self {
        let a = self.a.iter().zip(&next.a).map(|(a1, a2)| a2 * a1).collect();
        let b = self.b.iter().zip(&next.a).zip(&next.b).map(|((b1, a2), b2)| a2 * b1 + b2).collect();
        Self { a, b }
    }

    fn apply(&self, h: &[f32]) -> Vec<f32> {
        h.iter().zip(&self.a).zip(&self.b).map(|((h, a), b)| a * h + b).collect()
    }
}

/// Affine map with a dense `n×n` linear part (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseAffine {
    pub n: usize,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
}

impl Affine for DenseAffine {
    fn then(&self, next: &Self) -> Self {
        let n = self.n;
        let mut a = vec![0.0; n * n];
        kernels::gemm(&next.a, &self.a, &mut a, n, n, n);
        let mut b = next.b.clone();
        for (i, bi) in b.iter_mut().enumerate() {
            *bi += kernels::dot(&next.a[i * n..(i + 1) * n], &self.b);
        }
        Self { n, a, b }
    }

    fn apply(&self, h: &[f32]) -> Vec<f32> {
        let n = self.n;
        (0..n).map(|i| kernels::dot(&self.a[i * n..(i + 1) * n], h) + self.b[i]).collect()
    }
}

/// Applies the inclusive scan of `elems` to `h0`, returning every
/// intermediate state.
///
/// Evaluation is blocked: chunk aggregates are reduced in parallel, carried
/// across chunks, then each chunk is expanded from its carry-in state.
pub fn associative_scan<E: Affine>(elems: &[E], h0: &[f32]) -> Vec<Vec<f32>> {
    let len = elems.len();
    if len == 0 {
        return Vec::new();
    }
    let chunk = (len as f64).sqrt().ceil().max(1.0) as usize;
    let aggregates: Vec<E> =
        elems.par_chunks(chunk).map(|c| c[1..].iter().fold(c[0].clone(), |acc, e| acc.then(e))).collect();
    // Exclusive prefix over chunk aggregates gives each chunk's carry-in.
    let mut carries = Vec::with_capacity(aggregates.len());
    let mut state = h0.to_vec();
    for agg in &aggregates {
        carries.push(state.clone());
        state = agg.apply(&state);
    }
    elems
        .par_chunks(chunk)
        .zip(carries.par_iter())
        .flat_map_iter(|(c, carry)| {
            // Prefix within the chunk, composed as maps, then applied.
            let mut prefix = c[0].clone();
            let mut out = Vec::with_capacity(c.len());
            out.push(prefix.apply(carry));
            for e in &c[1..] {
                prefix = prefix.then(e);
                out.push(prefix.apply(carry));
            }
            out
        })
        .collect()
}

fn check_input(d: &DiscreteSsm, x: &Tensor, h0: &[f32]) -> Result<(usize, usize)> {
    let (l, din) = x.dims2()?;
    if din != d.input_dim() {
        return Err(dim_err!("input has {din} channels, SSM expects {}", d.input_dim()));
    }
    if h0.len() != d.state_dim() {
        return Err(dim_err!("h0 has {} entries, state dimension is {}", h0.len(), d.state_dim()));
    }
    x.ensure_finite("scan")?;
    Ok((l, din))
}

fn bx(d: &DiscreteSsm, xk: &[f32]) -> Vec<f32> {
    let din = xk.len();
    d.b_bar.data().chunks(din).map(|row| kernels::dot(row, xk)).collect()
}

fn readout(d: &DiscreteSsm, h: &[f32], xk: &[f32], out: &mut [f32]) {
    let n = h.len();
    let din = xk.len();
    for (m, o) in out.iter_mut().enumerate() {
        *o = kernels::dot(&d.c_bar.data()[m * n..(m + 1) * n], h)
            + kernels::dot(&d.d_bar.data()[m * din..(m + 1) * din], xk);
    }
}

/// Exact recurrence `h_k = Ā h_{k−1} + B̄ x_k`, `y_k = C̄ h_k + D̄ x_k`.
pub fn scan_sequential(d: &DiscreteSsm, x: &Tensor, h0: &[f32]) -> Result<(Tensor, Vec<f32>)> {
    let (l, din) = check_input(d, x, h0)?;
    let m = d.output_dim();
    let mut y = vec![0.0; l * m];
    let mut h = h0.to_vec();
    let mut ah = vec![0.0; h.len()];
    for k in 0..l {
        let xk = &x.data()[k * din..(k + 1) * din];
        d.a_bar.apply(&h, &mut ah);
        for ((hv, a), b) in h.iter_mut().zip(&ah).zip(bx(d, xk)) {
            *hv = a + b;
        }
        readout(d, &h, xk, &mut y[k * m..(k + 1) * m]);
    }
    Ok((Tensor::new([l, m], y)?, h))
}

/// Same outputs as [`scan_sequential`], evaluated with
/// [`associative_scan`].
pub fn scan_parallel(d: &DiscreteSsm, x: &Tensor, h0: &[f32]) -> Result<Tensor> {
    let (l, din) = check_input(d, x, h0)?;
    let m = d.output_dim();
    let rows: Vec<&[f32]> = x.data().chunks(din.max(1)).take(l).collect();
    let states = match &d.a_bar {
        StateMatrix::Diagonal(a) => {
            let elems: Vec<DiagAffine> = rows.iter().map(|xk| DiagAffine { a: a.clone(), b: bx(d, xk) }).collect();
            associative_scan(&elems, h0)
        }
        StateMatrix::Dense(a) => {
            let n = d.state_dim();
            let elems: Vec<DenseAffine> =
                rows.iter().map(|xk| DenseAffine { n, a: a.data().to_vec(), b: bx(d, xk) }).collect();
            associative_scan(&elems, h0)
        }
    };
    let mut y = vec![0.0; l * m];
    for (k, h) in states.iter().enumerate() {
        readout(d, h, rows[k], &mut y[k * m..(k + 1) * m]);
    }
    Tensor::new([l, m], y)
}
