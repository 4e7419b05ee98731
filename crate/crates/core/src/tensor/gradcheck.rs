use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(‖analytic‖∞, ‖numeric‖∞)` over the
    /// checked entries.
    pub max_rel_err: f32,
    pub checked: usize,
}

fn eval(f: &dyn Fn(&Tape, Var) -> Result<Var>, x: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = f(&tape, xv)?;
    let v = f64::from(tape.scalar_value(y));
    if !v.is_finite() {
        return Err(Error::Numeric("grad_check: f(x) is not finite".into()));
    }
    Ok(v)
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f32 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    (diff / scale) as f32
}

/// `orig ± eps` rounds in f32, so divide by the step actually taken.
fn step_taken(hi: f32, lo: f32) -> f64 {
    f64::from(hi) - f64::from(lo)
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// `(f(x+eps) − f(x−eps)) / (2·eps)` for every element of `x`.
pub fn grad_check(f: impl Fn(&Tape, Var) -> Result<Var>, x: &Tensor, eps: f32) -> Result<GradCheckReport> {
    x.ensure_finite("grad_check")?;
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv)?;
    let y0 = tape.scalar_value(y);
    if !y0.is_finite() {
        return Err(Error::Numeric("grad_check: f(x) is not finite".into()));
    }
    let grads = tape.backward(y)?;
    let analytic: Vec<f64> = match grads.get(xv) {
        Some(g) => g.iter().map(|&v| f64::from(v)).collect(),
        None => vec![0.0; x.numel()],
    };
    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let (hi, lo) = (orig + eps, orig - eps);
        probe.data_mut()[i] = hi;
        let fp = eval(&f, &probe)?;
        probe.data_mut()[i] = lo;
        let fm = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((fp - fm) / step_taken(hi, lo));
    }
    Ok(GradCheckReport { max_rel_err: rel_err(&analytic, &numeric), checked: x.numel() })
}

/// Finite-difference check of the gradient with respect to every trainable
/// parameter in `store`. At most `max_per_param` evenly spaced entries of
/// each parameter are perturbed.
pub fn grad_check_params(
    store: &ParamStore,
    f: impl Fn(&Tape, &ParamStore) -> Result<Var>,
    eps: f32,
    max_per_param: usize,
) -> Result<GradCheckReport> {
    let tape = Tape::new();
    let y = f(&tape, store)?;
    let grads = tape.backward(y)?;
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    tape.accumulate_param_grads(&grads, &mut with_grads)?;

    let mut probe = store.clone();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let ids: Vec<_> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).tensor.numel();
        let step = n.div_ceil(max_per_param.max(1)).max(1);
        let g = with_grads.get(id).tensor.grad().map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for i in (0..n).step_by(step) {
            let orig = probe.get(id).tensor.data()[i];
            let mut run = |v: f32| -> Result<f64> {
                probe.get_mut(id).tensor.data_mut()[i] = v;
                let t = Tape::new();
                let out = f64::from(t.scalar_value(f(&t, &probe)?));
                if !out.is_finite() {
                    return Err(Error::Numeric("grad_check: f is not finite".into()));
                }
                Ok(out)
            };
            let (hi, lo) = (orig + eps, orig - eps);
            let fp = run(hi)?;
            let fm = run(lo)?;
            probe.get_mut(id).tensor.data_mut()[i] = orig;
            analytic.push(f64::from(g[i]));
            numeric.push((fp - fm) / step_taken(hi, lo));
        }
    }
    Ok(GradCheckReport { max_rel_err: rel_err(&analytic, &numeric), checked: analytic.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_fn([5], |i| i as f32 * 0.3 - 0.6);
        // Central differences are exact for a quadratic, so a wide step isolates
        // rounding error.
        let r = grad_check(|t, x| Ok(t.sum(t.mul(x, x)?)), &x, 0.25).unwrap();
        assert!(r.max_rel_err < 1e-6, "{}", r.max_rel_err);

        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = tape.sum(tape.mul(xv, xv).unwrap());
        let g = tape.backward(y).unwrap();
        for (gi, xi) in g.get(xv).unwrap().iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-6);
        }
    }

    #[test]
    fn two_layer_mlp() {
        let mut init = Init::new(11);
        let w1 = init.fan_in([6, 8], 6);
        let w2 = init.fan_in([8, 3], 8);
        let x = init.uniform([4, 6], 1.0);
        let f = move |t: &Tape, x: Var| {
            let h = t.gelu(t.linear(x, t.constant(w1.clone()))?);
            let y = t.linear(h, t.constant(w2.clone()))?;
            Ok(t.sum(t.mul(y, y)?))
        };
        let r = grad_check(f, &x, 1e-3).unwrap();
        assert!(r.max_rel_err < 1e-3, "{}", r.max_rel_err);
    }

    #[test]
    fn nan_input_is_numeric_error() {
        let x = Tensor::new([2], vec![1.0, f32::NAN]).unwrap();
        let r = grad_check(|t, x| Ok(t.sum(x)), &x, 1e-3);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
