use super::{Tape, Var};
use crate::error::{dim_err, Error, Result};

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

impl Tape {
    fn unary(&self, x: Var, f: impl Fn(f32) -> f32, df: impl Fn(f32, f32) -> f32 + 'static) -> Var {
        let dx = self.data(x);
        let out: Vec<f32> = dx.iter().map(|&v| f(v)).collect();
        let y = std::rc::Rc::new(out.clone());
        self.push_op(self.shape(x), out, &[x], move |g, grads| {
            let gx = dx.iter().zip(y.iter()).zip(g).map(|((&xv, &yv), &gv)| gv * df(xv, yv)).collect();
            grads.add_owned(x, gx);
        })
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |xv, _| if xv > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| v * sigmoid(v),
            |xv, _| {
                let s = sigmoid(xv);
                s * (1.0 + xv * (1.0 - s))
            },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, gelu, |xv, _| gelu_grad(xv))
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, softplus, |xv, _| sigmoid(xv))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f32::exp, |_, y| y)
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax_last(&self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = *shape.last().ok_or_else(|| dim_err!("softmax on a scalar"))?;
        if n == 0 {
            return Err(dim_err!("softmax over an empty axis"));
        }
        let dx = self.data(x);
        if dx.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax: NaN input".into()));
        }
        let mut out = vec![0.0; dx.len()];
        for (row, orow) in dx.chunks(n).zip(out.chunks_mut(n)) {
            softmax_row(row, orow);
        }
        let y = std::rc::Rc::new(out.clone());
        Ok(self.push_op(shape, out, &[x], move |g, grads| {
            let gx = grads.slot(x);
            for ((yr, gr), gxr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                let s = super::kernels::dot(yr, gr);
                for ((o, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
                    *o += yv * (gv - s);
                }
            }
        }))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x);
        let n = *shape.last().ok_or_else(|| dim_err!("layer_norm on a scalar"))?;
        if self.numel(gamma) != n || self.numel(beta) != n {
            return Err(dim_err!("layer_norm: affine parameters do not match last extent {n}"));
        }
        let (dx, dg, db) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = dx.len() / n;
        let mut xhat = vec![0.0; dx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; dx.len()];
        for r in 0..rows {
            let row = &dx[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * dg[j] + db[j];
            }
        }
        Ok(self.push_op(shape, out, &[x, gamma, beta], move |g, grads| {
            if grads.wants(gamma) {
                let gg = grads.slot(gamma);
                for r in 0..rows {
                    for j in 0..n {
                        gg[j] += g[r * n + j] * xhat[r * n + j];
                    }
                }
            }
            if grads.wants(beta) {
                let gb = grads.slot(beta);
                for r in 0..rows {
                    for j in 0..n {
                        gb[j] += g[r * n + j];
                    }
                }
            }
            if grads.wants(x) {
                let gx = grads.slot(x);
                for r in 0..rows {
                    let (mut s1, mut s2) = (0.0f32, 0.0f32);
                    for j in 0..n {
                        let gh = g[r * n + j] * dg[j];
                        s1 += gh;
                        s2 += gh * xhat[r * n + j];
                    }
                    let (m1, m2) = (s1 / n as f32, s2 / n as f32);
                    for j in 0..n {
                        let gh = g[r * n + j] * dg[j];
                        gx[r * n + j] += rstd[r] * (gh - m1 - xhat[r * n + j] * m2);
                    }
                }
            }
        }))
    }
}

pub(crate) fn softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o *= inv);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn softmax(vals: &[f32]) -> Vec<f32> {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([vals.len()], vals.to_vec()).unwrap());
        tape.value(tape.softmax_last(x).unwrap()).into_data()
    }

    #[test]
    fn softmax_symmetric() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax(&[2f32.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_nan() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([2], vec![f32::NAN, 0.0]).unwrap());
        assert!(matches!(tape.softmax_last(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_handles_large_logits() {
        let p = softmax(&[1000.0, 999.0, -1000.0]);
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([3, 8], |i| (i * i) as f32 * 0.1));
        let g = tape.constant(Tensor::full([8], 1.0));
        let b = tape.constant(Tensor::zeros([8]));
        let y = tape.value(tape.layer_norm(x, g, b, 1e-5).unwrap());
        for row in y.data().chunks(8) {
            let mean: f32 = row.iter().sum::<f32>() / 8.0;
            let var: f32 = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 8.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3);
        }
    }
}
