use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{param_err, Result};
use crate::ssm::{selective_scan, Discretization, SelectiveInputs};
use crate::tensor::{kernels, Tensor};

/// State size used for the scan side of the benchmark.
const BENCH_STATE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub length: usize,
    /// Median seconds.
    pub scan_s: f64,
    pub attention_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub d_model: usize,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
    /// Time ratio per doubling of `L` between consecutive lengths.
    pub scan_ratios: Vec<f64>,
    pub attention_ratios: Vec<f64>,
    /// Least-squares slope of `log t` against `log L`.
    pub scan_exponent: f64,
    pub attention_exponent: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Shortest span a single timing sample should cover; cheaper calls are
/// repeated inside the sample and averaged.
const MIN_SAMPLE_S: f64 = 0.02;

/// Calls `f` once and returns how many calls make up one sample.
fn calibrate(f: &mut dyn FnMut()) -> usize {
    let t = Instant::now();
    f();
    let once = t.elapsed().as_secs_f64().max(1e-9);
    ((MIN_SAMPLE_S / once).ceil() as usize).clamp(1, 1000)
}

fn sample(calls: usize, f: &mut dyn FnMut()) -> f64 {
    let t = Instant::now();
    for _ in 0..calls {
        f();
    }
    t.elapsed().as_secs_f64() / calls as f64
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Full softmax self-attention `softmax(QKᵀ/√d)·V` for `L × d` inputs.
pub fn dense_attention(q: &[f32], k: &[f32], v: &[f32], l: usize, d: usize) -> Vec<f32> {
    let mut s = vec![0.0f32; l * l];
    kernels::gemm_nt(q, k, &mut s, l, d, l);
    let scale = 1.0 / (d as f32).sqrt();
    for row in s.chunks_exact_mut(l) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) * scale;
        let mut sum = 0.0;
        row.iter_mut().for_each(|x| {
            *x = (*x * scale - m).exp();
            sum += *x;
        });
        row.iter_mut().for_each(|x| *x /= sum);
    }
    let mut out = vec![0.0f32; l * d];
    kernels::gemm(&s, v, &mut out, l, l, d);
    out
}

/// Median wall time of a selective scan and of full self-attention at
/// each sequence length, with the same model width.
pub fn bench_scaling(lengths: &[usize], d_model: usize, repeats: usize) -> Result<BenchReport> {
    if repeats < 3 {
        return Err(param_err!("need at least 3 repeats for a median, got {repeats}"));
    }
    if lengths.len() < 2 || lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] == 0 || d_model == 0 {
        return Err(param_err!("lengths {lengths:?} must be at least two, positive and strictly ascending"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rand = |n: usize, lo: f32, hi: f32| -> Vec<f32> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
    let (c, n) = (d_model, BENCH_STATE);
    let mut cases = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let s = SelectiveInputs {
            delta: Tensor::new([l, c], rand(l * c, 0.01, 0.1))?,
            b: Tensor::new([l, n], rand(l * n, -1.0, 1.0))?,
            c: Tensor::new([l, n], rand(l * n, -1.0, 1.0))?,
            a: Tensor::new([c, n], rand(c * n, -2.0, -0.5))?,
            d: rand(c, -1.0, 1.0),
            method: Discretization::Zoh,
        };
        let x = Tensor::new([l, c], rand(l * c, -1.0, 1.0))?;
        selective_scan(&s, &x)?;
        let (q, k, v) = (rand(l * c, -1.0, 1.0), rand(l * c, -1.0, 1.0), rand(l * c, -1.0, 1.0));
        cases.push((l, s, x, q, k, v));
    }
    let mut fns: Vec<[Box<dyn FnMut() + '_>; 2]> = cases
        .iter()
        .map(|(l, s, x, q, k, v)| -> [Box<dyn FnMut()>; 2] {
            [
                Box::new(move || {
                    std::hint::black_box(selective_scan(s, x).ok());
                }),
                Box::new(move || {
                    std::hint::black_box(dense_attention(q, k, v, *l, c));
                }),
            ]
        })
        .collect();
    let calls: Vec<[usize; 2]> = fns.iter_mut().map(|[a, b]| [calibrate(a.as_mut()), calibrate(b.as_mut())]).collect();
    // One phase per kernel so attention's heavy gemms do not disturb the
    // scan timings; within a phase, rounds visit every length in turn so
    // drift in machine speed hits all of them alike.
    let mut times = vec![[Vec::with_capacity(repeats), Vec::with_capacity(repeats)]; lengths.len()];
    for j in 0..2 {
        for _ in 0..repeats {
            for (i, pair) in fns.iter_mut().enumerate() {
                times[i][j].push(sample(calls[i][j], pair[j].as_mut()));
            }
        }
    }
    let rows: Vec<BenchRow> = lengths
        .iter()
        .zip(times)
        .map(|(&length, [scan, att])| BenchRow { length, scan_s: median(scan), attention_s: median(att) })
        .collect();
    let ratios = |f: fn(&BenchRow) -> f64| -> Vec<f64> {
        rows.windows(2)
            .map(|w| {
                let doublings = (w[1].length as f64 / w[0].length as f64).log2();
                (f(&w[1]) / f(&w[0])).powf(1.0 / doublings)
            })
            .collect()
    };
    let ll: Vec<f64> = rows.iter().map(|r| (r.length as f64).ln()).collect();
    let exponent = |f: fn(&BenchRow) -> f64| slope(&ll, &rows.iter().map(|r| f(r).ln()).collect::<Vec<_>>());
    Ok(BenchReport {
        d_model,
        repeats,
        scan_ratios: ratios(|r| r.scan_s),
        attention_ratios: ratios(|r| r.attention_s),
        scan_exponent: exponent(|r| r.scan_s),
        attention_exponent: exponent(|r| r.attention_s),
        rows,
    })
}

impl BenchReport {
    /// CSV with header `length,scan_ms,attention_ms,scan_ratio,attention_ratio`;
    /// the ratio columns compare each row with the previous one and are
    /// empty on the first row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("length,scan_ms,attention_ms,scan_ratio,attention_ratio\n");
        for (i, r) in self.rows.iter().enumerate() {
            let (sr, ar) = if i == 0 {
                (String::new(), String::new())
            } else {
                (format!("{:.4}", self.scan_ratios[i - 1]), format!("{:.4}", self.attention_ratios[i - 1]))
            };
            let _ = writeln!(s, "{},{:.6},{:.6},{sr},{ar}", r.length, r.scan_s * 1e3, r.attention_s * 1e3);
        }
        s
    }
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "d_model {}, median of {} runs", self.d_model, self.repeats)?;
        for r in &self.rows {
            writeln!(
                f,
                "L={:>6}  scan {:>10.3} ms  attention {:>10.3} ms",
                r.length,
                r.scan_s * 1e3,
                r.attention_s * 1e3
            )?;
        }
        write!(f, "growth exponent: scan {:.2}, attention {:.2}", self.scan_exponent, self.attention_exponent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_has_every_field() {
        let r = bench_scaling(&[16, 32, 64], 8, 3).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.scan_ratios.len(), 2);
        assert_eq!(r.attention_ratios.len(), 2);
        assert!(r.scan_exponent.is_finite() && r.attention_exponent.is_finite());
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("length,scan_ms,attention_ms,scan_ratio,attention_ratio\n16,"));
    }

    #[test]
    fn bad_arguments_rejected() {
        assert!(bench_scaling(&[16, 32], 8, 2).is_err());
        assert!(bench_scaling(&[32, 16], 8, 3).is_err());
        assert!(bench_scaling(&[16], 8, 3).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let l = 5;
        let v = vec![1.0f32; l];
        let q: Vec<f32> = (0..l).map(|i| i as f32 * 0.3).collect();
        let out = dense_attention(&q, &q, &v, l, 1);
        assert!(out.iter().all(|&o| (o - 1.0).abs() < 1e-6));
    }
}
