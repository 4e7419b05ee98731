use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mambasam_bench::{selective_case, uniform};
use mambasam_core::ssm::{selective_scan, selective_scan_parallel, Discretization};
use mambasam_core::tensor::kernels;
use mambasam_core::traineval::dense_attention;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const D_MODEL: usize = 64;
const LENGTHS: [usize; 3] = [1024, 2048, 4096];

fn scan(c: &mut Criterion) {
    let mut g = c.benchmark_group("selective_scan");
    for l in LENGTHS {
        g.throughput(Throughput::Elements(l as u64));
        for method in [Discretization::Bilinear, Discretization::Zoh] {
            let (s, x) = selective_case(l, D_MODEL, 8, method, 1);
            g.bench_with_input(BenchmarkId::new(format!("sequential/{method:?}"), l), &l, |b, _| {
                b.iter(|| selective_scan(&s, &x).unwrap())
            });
        }
        let (s, x) = selective_case(l, D_MODEL, 8, Discretization::Bilinear, 1);
        g.bench_with_input(BenchmarkId::new("parallel/Bilinear", l), &l, |b, _| {
            b.iter(|| selective_scan_parallel(&s, &x).unwrap())
        });
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("dense_attention");
    g.sample_size(10);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for l in LENGTHS {
        let (q, k, v) = (
            uniform(&mut rng, l * D_MODEL, -1.0, 1.0),
            uniform(&mut rng, l * D_MODEL, -1.0, 1.0),
            uniform(&mut rng, l * D_MODEL, -1.0, 1.0),
        );
        g.throughput(Throughput::Elements(l as u64));
        g.bench_with_input(BenchmarkId::from_parameter(l), &l, |b, &l| {
            b.iter(|| dense_attention(&q, &k, &v, l, D_MODEL))
        });
    }
    g.finish();
}

fn gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("gemm");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (m, k, n) in [(1024, 64, 128), (128, 1024, 64), (256, 256, 256)] {
        let a = uniform(&mut rng, m * k, -1.0, 1.0);
        let bt = uniform(&mut rng, k * n, -1.0, 1.0);
        let mut out = vec![0.0; m * n];
        g.throughput(Throughput::Elements((m * k * n) as u64));
        let id = format!("{m}x{k}x{n}");
        g.bench_function(BenchmarkId::new("nn", &id), |b| b.iter(|| kernels::gemm(&a, &bt, &mut out, m, k, n)));
        g.bench_function(BenchmarkId::new("nt", &id), |b| b.iter(|| kernels::gemm_nt(&a, &bt, &mut out, m, k, n)));
        g.bench_function(BenchmarkId::new("tn", &id), |b| b.iter(|| kernels::gemm_tn(&a, &bt, &mut out, k, m, n)));
    }
    g.finish();
}

criterion_group!(benches, scan, attention, gemm);
criterion_main!(benches);
