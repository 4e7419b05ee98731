//! Seeded inputs shared by the benchmarks.

use mambasam_core::ssm::{Discretization, SelectiveInputs};
use mambasam_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Selective-scan operands for `L` steps, `C` channels and state size `N`.
pub fn selective_case(l: usize, c: usize, n: usize, method: Discretization, seed: u64) -> (SelectiveInputs, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = |rng: &mut ChaCha8Rng, shape: [usize; 2], lo, hi| {
        Tensor::new(shape, uniform(rng, shape[0] * shape[1], lo, hi)).expect("shape")
    };
    let s = SelectiveInputs {
        delta: t(&mut rng, [l, c], 0.01, 0.1),
        b: t(&mut rng, [l, n], -1.0, 1.0),
        c: t(&mut rng, [l, n], -1.0, 1.0),
        a: t(&mut rng, [c, n], -2.0, -0.5),
        d: uniform(&mut rng, c, -1.0, 1.0),
        method,
    };
    let x = t(&mut rng, [l, c], -1.0, 1.0);
    (s, x)
}
