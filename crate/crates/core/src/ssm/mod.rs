//! Linear state-space models: `h' = A h + B x`, `y = C h + D x`, their
//! discretization with a timescale `Δ`, and the scans that evaluate the
//! discrete recurrence `h_k = Ā h_{k−1} + B̄ x_k`, `y_k = C̄ h_k + D̄ x_k`.
//!
//! `C̄ = C` and `D̄ = D`; only `A` and `B` change under discretization.

mod scan;
mod selective;

use nalgebra::DMatrix;

pub use scan::{associative_scan, scan_parallel, scan_sequential, Affine, DenseAffine, DiagAffine};
pub use selective::{selective_scan, selective_scan_parallel, SelectiveInputs, SelectiveProjections};

use crate::error::{dim_err, param_err, Error, Result};
use crate::tensor::Tensor;

/// Discretization rule mapping `(A, B, Δ)` to `(Ā, B̄)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Discretization {
    /// `Ā = (I − Δ/2·A)⁻¹(I + Δ/2·A)`, `B̄ = (I − Δ/2·A)⁻¹ ΔB`
    #[default]
    Bilinear,
    /// `Ā = exp(ΔA)`, `B̄ = (ΔA)⁻¹(exp(ΔA) − I) ΔB`
    Zoh,
}

impl std::str::FromStr for Discretization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Self::Bilinear),
            "zoh" => Ok(Self::Zoh),
            other => Err(Error::Config(format!("unknown discretization {other:?}"))),
        }
    }
}

/// State matrix storage: the diagonal (N entries) or a dense `N×N` matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum StateMatrix {
    Diagonal(Vec<f32>),
    Dense(Tensor),
}

impl StateMatrix {
    pub fn state_dim(&self) -> usize {
        match self {
            Self::Diagonal(d) => d.len(),
            Self::Dense(t) => t.shape()[0],
        }
    }

    /// `out = self · h`
    pub(crate) fn apply(&self, h: &[f32], out: &mut [f32]) {
        match self {
            Self::Diagonal(d) => {
                for ((o, &a), &hv) in out.iter_mut().zip(d).zip(h) {
                    *o = a * hv;
                }
            }
            Self::Dense(t) => {
                let n = h.len();
                for (i, o) in out.iter_mut().enumerate() {
                    *o = crate::tensor::kernels::dot(&t.data()[i * n..(i + 1) * n], h);
                }
            }
        }
    }
}

/// Continuous-time parameters `A`, `B`, `C`, `D` and timescale `Δ`.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub a: StateMatrix,
    /// `N × D`
    pub b: Tensor,
    /// `M × N`
    pub c: Tensor,
    /// `M × D`
    pub d_skip: Tensor,
    pub delta: f32,
}

impl SsmParams {
    /// S4D-style diagonal initialisation `A_n = −(n+1)`.
    pub fn s4d_diagonal(n: usize) -> StateMatrix {
        StateMatrix::Diagonal((0..n).map(|i| -((i + 1) as f32)).collect())
    }

    fn validate(&self) -> Result<(usize, usize, usize)> {
        let n = self.a.state_dim();
        if n == 0 {
            return Err(param_err!("state dimension must be >= 1"));
        }
        if !(self.delta > 0.0) {
            return Err(param_err!("timescale must be positive, got {}", self.delta));
        }
        if let StateMatrix::Dense(t) = &self.a {
            if t.shape() != [n, n] {
                return Err(dim_err!("dense A must be square, got {:?}", t.shape()));
            }
        }
        let (bn, d) = self.b.dims2()?;
        let (m, cn) = self.c.dims2()?;
        if bn != n || cn != n || self.d_skip.shape() != [m, d] {
            return Err(dim_err!(
                "inconsistent SSM shapes: A {n}, B {:?}, C {:?}, D {:?}",
                self.b.shape(),
                self.c.shape(),
                self.d_skip.shape()
            ));
        }
        Ok((n, d, m))
    }
}

/// Discrete-time `Ā`, `B̄`, `C̄`, `D̄`.
#[derive(Clone, Debug)]
pub struct DiscreteSsm {
    pub a_bar: StateMatrix,
    /// `N × D`
    pub b_bar: Tensor,
    /// `M × N`
    pub c_bar: Tensor,
    /// `M × D`
    pub d_bar: Tensor,
    pub method: Discretization,
}

impl DiscreteSsm {
    pub fn state_dim(&self) -> usize {
        self.a_bar.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.b_bar.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.c_bar.shape()[0]
    }
}

/// Scalar discretization of one diagonal entry: returns `(Ā, β)` with
/// `B̄ = β·B`.
#[inline(always)]
pub(crate) fn discretize_scalar(a: f32, delta: f32, method: Discretization) -> (f32, f32) {
    let z = delta * a;
    match method {
        Discretization::Bilinear => {
            let inv = 1.0 / (1.0 - 0.5 * z);
            ((1.0 + 0.5 * z) * inv, delta * inv)
        }
        Discretization::Zoh => (z.exp(), delta * phi1(z)),
    }
}

/// `(e^z − 1) / z`, continuous at 0.
pub(crate) fn phi1(z: f32) -> f32 {
    if z.abs() < 1e-4 {
        1.0 + z * (0.5 + z / 6.0)
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`phi1`].
pub(crate) fn phi1_prime(z: f32) -> f32 {
    if z.abs() < 0.1 {
        0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z * (1.0 / 144.0 + z / 840.0))))
    } else {
        let z64 = f64::from(z);
        ((z64 * z64.exp() - z64.exp_m1()) / (z64 * z64)) as f32
    }
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    DMatrix::from_row_iterator(r, c, t.data().iter().map(|&v| f64::from(v)))
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    Tensor::from_fn([r, c], |i| m[(i / c, i % c)] as f32)
}

/// `Σ_{k≥0} M^k / (k+1)!`, used for ZOH when `ΔA` is (nearly) singular.
fn phi1_series(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..60 {
        term = &term * m / (k as f64 + 1.0);
        sum += &term;
        if term.amax() < 1e-17 {
            break;
        }
    }
    sum
}

/// Maps continuous parameters to their discrete counterparts.
pub fn discretize(p: &SsmParams, method: Discretization) -> Result<DiscreteSsm> {
    let (n, d, _) = p.validate()?;
    let delta = p.delta;
    let (a_bar, b_bar) = match &p.a {
        StateMatrix::Diagonal(diag) => {
            let mut a_bar = Vec::with_capacity(n);
            let mut b_bar = p.b.clone();
            for (i, &a) in diag.iter().enumerate() {
                if method == Discretization::Bilinear && (1.0 - 0.5 * delta * a).abs() < 1e-12 {
                    return Err(Error::Singular(format!("I − Δ/2·A is singular at state {i}")));
                }
                let (ab, beta) = discretize_scalar(a, delta, method);
                a_bar.push(ab);
                b_bar.data_mut()[i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= beta);
            }
            (StateMatrix::Diagonal(a_bar), b_bar)
        }
        StateMatrix::Dense(a) => {
            let a = to_matrix(a);
            let b = to_matrix(&p.b);
            let da = &a * f64::from(delta);
            let eye = DMatrix::<f64>::identity(n, n);
            match method {
                Discretization::Bilinear => {
                    let lhs = &eye - &da * 0.5;
                    let lu = lhs.clone().lu();
                    let pivot = lu.u().diagonal().amin();
                    let inv = lu
                        .try_inverse()
                        .filter(|_| pivot > 1e-6 * lhs.amax().max(1.0))
                        .ok_or_else(|| Error::Singular("I − Δ/2·A is not invertible".into()))?;
                    let a_bar = &inv * (&eye + &da * 0.5);
                    let b_bar = &inv * &b * f64::from(delta);
                    (StateMatrix::Dense(from_matrix(&a_bar)), from_matrix(&b_bar))
                }
                Discretization::Zoh => {
                    let exp = da.clone().exp();
                    let phi = if da.amax() < 0.5 {
                        phi1_series(&da)
                    } else {
                        match da.clone().try_inverse() {
                            Some(inv) if inv.amax() < 1e8 => &inv * (&exp - &eye),
                            _ => phi1_series(&da),
                        }
                    };
                    let b_bar = &phi * &b * f64::from(delta);
                    (StateMatrix::Dense(from_matrix(&exp)), from_matrix(&b_bar))
                }
            }
        }
    };
    Ok(DiscreteSsm { a_bar, b_bar, c_bar: p.c.clone(), d_bar: p.d_skip.clone(), method })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f32, b: f32, delta: f32) -> SsmParams {
        SsmParams {
            a: StateMatrix::Diagonal(vec![a]),
            b: Tensor::new([1, 1], vec![b]).unwrap(),
            c: Tensor::full([1, 1], 1.0),
            d_skip: Tensor::zeros([1, 1]),
            delta,
        }
    }

    fn diag_entry(d: &DiscreteSsm) -> (f32, f32) {
        match &d.a_bar {
            StateMatrix::Diagonal(v) => (v[0], d.b_bar.data()[0]),
            StateMatrix::Dense(_) => unreachable!(),
        }
    }

    #[test]
    fn zero_matrix_bilinear() {
        let d = discretize(&scalar(0.0, 1.0, 0.1), Discretization::Bilinear).unwrap();
        let (a, b) = diag_entry(&d);
        assert_eq!(a, 1.0);
        assert!((b - 0.1).abs() < 1e-7);
    }

    #[test]
    fn scalar_bilinear_closed_form() {
        let d = discretize(&scalar(-1.0, 1.0, 0.1), Discretization::Bilinear).unwrap();
        assert!((diag_entry(&d).0 - 0.904_762).abs() < 1e-6);
    }

    #[test]
    fn scalar_zoh_closed_form() {
        let d = discretize(&scalar(-1.0, 1.0, 0.1), Discretization::Zoh).unwrap();
        let (a, b) = diag_entry(&d);
        assert!((a - 0.904_837).abs() < 1e-6);
        // (e^{-0.1} − 1)/(−1)
        assert!((b - (1.0 - (-0.1f32).exp())).abs() < 1e-6);
    }

    #[test]
    fn bilinear_singularity() {
        // 1 − Δ/2·a = 0 at a = 2/Δ
        assert!(matches!(discretize(&scalar(20.0, 1.0, 0.1), Discretization::Bilinear), Err(Error::Singular(_))));
        let mut p = scalar(0.0, 1.0, 0.1);
        p.a = StateMatrix::Dense(Tensor::new([2, 2], vec![20.0, 0.0, 0.0, -1.0]).unwrap());
        p.b = Tensor::zeros([2, 1]);
        p.c = Tensor::zeros([1, 2]);
        assert!(matches!(discretize(&p, Discretization::Bilinear), Err(Error::Singular(_))));
    }

    #[test]
    fn dense_matches_diagonal() {
        let diag = vec![-1.0, -2.5, -0.3];
        let b = Tensor::from_fn([3, 2], |i| i as f32 * 0.25 - 0.5);
        let mk =
            |a| SsmParams { a, b: b.clone(), c: Tensor::full([1, 3], 1.0), d_skip: Tensor::zeros([1, 2]), delta: 0.2 };
        let mut dense = Tensor::zeros([3, 3]);
        for (i, &v) in diag.iter().enumerate() {
            dense.data_mut()[i * 3 + i] = v;
        }
        for method in [Discretization::Bilinear, Discretization::Zoh] {
            let dd = discretize(&mk(StateMatrix::Diagonal(diag.clone())), method).unwrap();
            let dn = discretize(&mk(StateMatrix::Dense(dense.clone())), method).unwrap();
            let StateMatrix::Diagonal(ad) = &dd.a_bar else { unreachable!() };
            let StateMatrix::Dense(an) = &dn.a_bar else { unreachable!() };
            for i in 0..3 {
                assert!((ad[i] - an.data()[i * 4]).abs() < 1e-6);
            }
            assert!(dd.b_bar.max_abs_diff(&dn.b_bar) < 1e-6);
        }
    }

    #[test]
    fn zoh_singular_a_uses_series() {
        // A = 0 gives B̄ = ΔB.
        let mut p = scalar(0.0, 1.0, 0.1);
        p.a = StateMatrix::Dense(Tensor::zeros([2, 2]));
        p.b = Tensor::full([2, 1], 1.0);
        p.c = Tensor::zeros([1, 2]);
        let d = discretize(&p, Discretization::Zoh).unwrap();
        assert!(d.b_bar.data().iter().all(|v| (v - 0.1).abs() < 1e-7));
    }

    #[test]
    fn phi_derivative_matches_difference() {
        for z in [-3.0f32, -0.5, -0.05, -1e-3, 0.0, 0.02, 0.3] {
            let h = 1e-3;
            let fd = (f64::from(phi1(z + h)) - f64::from(phi1(z - h))) / (2.0 * f64::from(h));
            assert!((fd as f32 - phi1_prime(z)).abs() < 1e-3, "z={z}");
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(matches!(discretize(&scalar(-1.0, 1.0, 0.0), Discretization::Bilinear), Err(Error::Parameter(_))));
        let mut p = scalar(-1.0, 1.0, 0.1);
        p.b = Tensor::zeros([2, 1]);
        assert!(matches!(discretize(&p, Discretization::Bilinear), Err(Error::Dimension(_))));
    }
}
