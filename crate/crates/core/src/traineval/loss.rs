use std::rc::Rc;

use crate::error::{dim_err, param_err, Result};
use crate::tensor::{Tape, Var};

/// Smoothing term of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

/// Parts of the combined loss for one prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub dice: f64,
    pub ce: f64,
}

fn softmax_classes(z: &[f32], k: usize, n: usize) -> Vec<f64> {
    let mut p = vec![0.0f64; k * n];
    for v in 0..n {
        let m = (0..k).map(|c| z[c * n + v]).fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0.0;
        for c in 0..k {
            let e = f64::from(z[c * n + v] - m).exp();
            p[c * n + v] = e;
            s += e;
        }
        (0..k).for_each(|c| p[c * n + v] /= s);
    }
    p
}

fn check(shape: &[usize], labels: &[u8]) -> Result<(usize, usize)> {
    let Some((&k, rest)) = shape.split_first() else {
        return Err(dim_err!("logits need a class axis"));
    };
    let n: usize = rest.iter().product();
    if k < 2 || labels.len() != n {
        return Err(dim_err!("logits {shape:?} do not match {} labels", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= k) {
        return Err(param_err!("label {bad} out of range for {k} classes"));
    }
    Ok((k, n))
}

/// Soft Dice over foreground classes plus voxel-mean cross-entropy, without
/// recording anything.
pub fn dice_ce_parts(logits: &[f32], shape: &[usize], labels: &[u8]) -> Result<LossParts> {
    let (k, n) = check(shape, labels)?;
    let p = softmax_classes(logits, k, n);
    let ce =
        -labels.iter().enumerate().map(|(v, &y)| p[usize::from(y) * n + v].max(1e-300).ln()).sum::<f64>() / n as f64;
    let mut dice = 0.0;
    for c in 1..k {
        let (mut inter, mut sum) = (0.0, 0.0);
        for (v, &y) in labels.iter().enumerate() {
            let t = f64::from(u8::from(usize::from(y) == c));
            inter += p[c * n + v] * t;
            sum += p[c * n + v] + t;
        }
        dice += (2.0 * inter + DICE_EPS) / (sum + DICE_EPS);
    }
    Ok(LossParts { dice: 1.0 - dice / (k - 1) as f64, ce })
}

impl Tape {
    /// Combined soft Dice and cross-entropy loss for `logits` `[K × …]`
    /// against integer `labels` over the trailing axes.
    pub fn loss_dice_ce(&self, logits: Var, labels: &[u8]) -> Result<Var> {
        let shape = self.shape(logits);
        let (k, n) = check(&shape, labels)?;
        let z = self.data(logits);
        let p = softmax_classes(&z, k, n);
        let parts = dice_ce_parts(&z, &shape, labels)?;
        let labels: Rc<Vec<u8>> = Rc::new(labels.to_vec());
        let value = (parts.dice + parts.ce) as f32;
        Ok(self.push_op(vec![1], vec![value], &[logits], move |g, grads| {
            let g = f64::from(g[0]);
            // dL/dp for the Dice term, per foreground class.
            let mut a = vec![0.0f64; k * n];
            let fg = (k - 1) as f64;
            for c in 1..k {
                let (mut inter, mut sum) = (0.0, 0.0);
                for (v, &y) in labels.iter().enumerate() {
                    let t = f64::from(u8::from(usize::from(y) == c));
                    inter += p[c * n + v] * t;
                    sum += p[c * n + v] + t;
                }
                let (num, den) = (2.0 * inter + DICE_EPS, sum + DICE_EPS);
                for (v, &y) in labels.iter().enumerate() {
                    let t = f64::from(u8::from(usize::from(y) == c));
                    a[c * n + v] = -(2.0 * t * den - num) / (den * den * fg);
                }
            }
            let mut gz = vec![0.0f32; k * n];
            for (v, &y) in labels.iter().enumerate() {
                let dot: f64 = (0..k).map(|c| p[c * n + v] * a[c * n + v]).sum();
                for c in 0..k {
                    let pc = p[c * n + v];
                    let ce = (pc - f64::from(u8::from(usize::from(y) == c))) / n as f64;
                    gz[c * n + v] = (g * (ce + pc * (a[c * n + v] - dot))) as f32;
                }
            }
            grads.add_owned(logits, gz);
        }))
    }
}

/// Free-function form of [`Tape::loss_dice_ce`].
pub fn loss_dice_ce(tape: &Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    tape.loss_dice_ce(logits, labels)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{grad_check, Tensor};

    #[test]
    fn perfect_prediction_is_near_zero() {
        let labels = [0u8, 1, 2, 3, 3, 1];
        let z = Tensor::from_fn([4, 6], |i| if usize::from(labels[i % 6]) == i / 6 { 20.0 } else { 0.0 });
        let tape = Tape::new();
        let l = tape.loss_dice_ce(tape.constant(z), &labels).unwrap();
        assert!(tape.scalar_value(l) < 1e-3);
    }

    #[test]
    fn uniform_logits_give_ln4_cross_entropy() {
        let labels = [0u8, 1, 2, 3, 0, 0, 2, 1];
        let parts = dice_ce_parts(&[0.0; 32], &[4, 8], &labels).unwrap();
        assert!((parts.ce - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (k, n) = (4, 30);
        let z: Vec<f32> = (0..k * n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..k as u8)).collect();
        // Per-voxel softmax written out term by term.
        let mut ce = 0.0f64;
        let mut inter = [0.0f64; 4];
        let mut psum = [0.0f64; 4];
        let mut tsum = [0.0f64; 4];
        for v in 0..n {
            let denom: f64 = (0..k).map(|c| f64::from(z[c * n + v]).exp()).sum();
            for c in 0..k {
                let pc = f64::from(z[c * n + v]).exp() / denom;
                let is = usize::from(labels[v]) == c;
                if is {
                    ce -= pc.ln();
                    inter[c] += pc;
                    tsum[c] += 1.0;
                }
                psum[c] += pc;
            }
        }
        let dice: f64 = (1..k).map(|c| (2.0 * inter[c] + 1e-5) / (psum[c] + tsum[c] + 1e-5)).sum::<f64>() / 3.0;
        let expect = (1.0 - dice) + ce / n as f64;
        let tape = Tape::new();
        let l = tape.loss_dice_ce(tape.constant(Tensor::new([k, n], z).unwrap()), &labels).unwrap();
        assert!((f64::from(tape.scalar_value(l)) - expect).abs() < 1e-6);
    }

    #[test]
    fn label_range_checked() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros([3, 2]));
        assert!(tape.loss_dice_ce(z, &[0, 3]).is_err());
        assert!(tape.loss_dice_ce(z, &[0, 1, 2]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = Tensor::from_fn([4, 2, 3, 3], |_| rng.random_range(-2.0..2.0));
        let labels: Vec<u8> = (0..18).map(|_| rng.random_range(0..4)).collect();
        let r = grad_check(|t, x| t.loss_dice_ce(x, &labels), &z, 1e-2).unwrap();
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }
}
