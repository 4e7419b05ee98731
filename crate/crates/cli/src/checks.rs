//! Self-checks shared by `selftest` and the acceptance suite. Each returns
//! [`Check`] lines rather than panicking so a caller can print them all.

use std::fmt;
use std::time::Instant;

use mambasam_core::adapters::{adapter_forward, tokens_to_volume, AdapterConfig, LocalPathKind, TpMambaAdapter};
use mambasam_core::data::{phantom_dataset, PhantomSpec};
use mambasam_core::fusion::{
    cross_branch_attention, lora_forward, vit_block_forward, CbaWeights, LoraPair, VitBlock, VitBlockConfig,
};
use mambasam_core::mamba::{mamba_block_forward, MambaBlock, MambaBlockConfig, ScanDirection};
use mambasam_core::mfgc::{dct_basis, dct_forward, idct, mfgc_forward, FreqIndexSet, Mfgc};
use mambasam_core::models::{decode_2d, decode_3d, Decoder, Model, ModelConfig, ModelKind};
use mambasam_core::ssm::{
    discretize, scan_parallel, scan_sequential, selective_scan, selective_scan_parallel, Discretization,
    SelectiveInputs, SsmParams, StateMatrix,
};
use mambasam_core::tensor::{grad_check, grad_check_params, GradCheckReport, Init};
use mambasam_core::traineval::{
    bench_scaling, metric_hd95, metric_overlap, train_step, AdamW, BenchReport, TrainConfig,
};
use mambasam_core::{Error, ParamStore, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }

    /// A check that could not run counts as failed.
    fn from_result(name: &str, r: Result<Check>) -> Check {
        r.unwrap_or_else(|e| Check::new(name, false, format!("error: {e}")))
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Random stable linear-time-invariant system with `N ≤ 8`.
fn random_lti(rng: &mut ChaCha8Rng) -> Result<mambasam_core::ssm::DiscreteSsm> {
    let n = rng.random_range(1..=8);
    let (din, dout) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let a = if rng.random::<bool>() {
        StateMatrix::Diagonal((0..n).map(|_| rng.random_range(-3.0..-0.2)).collect())
    } else {
        // Negative diagonal plus a small coupling keeps the spectrum in the
        // left half-plane.
        StateMatrix::Dense(Tensor::from_fn([n, n], |i| {
            if i / n == i % n {
                rng.random_range(-3.0..-1.0)
            } else {
                rng.random_range(-0.3..0.3) / n as f32
            }
        }))
    };
    let s = 1.0 / (n as f32).sqrt();
    let p = SsmParams {
        a,
        b: uniform(rng, &[n, din], -s, s),
        c: uniform(rng, &[dout, n], -s, s),
        d_skip: uniform(rng, &[dout, din], -1.0, 1.0),
        delta: rng.random_range(0.01..0.5),
    };
    let method = if rng.random::<bool>() { Discretization::Bilinear } else { Discretization::Zoh };
    discretize(&p, method)
}

fn random_selective(rng: &mut ChaCha8Rng, l: usize) -> SelectiveInputs {
    let (c, n) = (rng.random_range(1..=6), rng.random_range(1..=8));
    let s = 1.0 / (n as f32).sqrt();
    SelectiveInputs {
        delta: uniform(rng, &[l, c], 0.001, 0.5),
        b: uniform(rng, &[l, n], -s, s),
        c: uniform(rng, &[l, n], -s, s),
        a: uniform(rng, &[c, n], -3.0, -0.1),
        d: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        method: if rng.random::<bool>() { Discretization::Bilinear } else { Discretization::Zoh },
    }
}

/// Largest `|parallel − sequential|` over `cases` random systems with
/// `N ≤ 8` and `L ≤ 256`, alternating time-invariant and selective ones.
pub fn scan_equivalence(cases: usize, seed: u64) -> Check {
    let name = "scan equivalence";
    let t = Instant::now();
    let run = || -> Result<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f32;
        for i in 0..cases {
            let l = rng.random_range(1..=256);
            let err = if i % 2 == 0 {
                let d = random_lti(&mut rng)?;
                let x = uniform(&mut rng, &[l, d.input_dim()], -1.0, 1.0);
                let h0: Vec<f32> = (0..d.state_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
                scan_parallel(&d, &x, &h0)?.max_abs_diff(&scan_sequential(&d, &x, &h0)?.0)
            } else {
                let s = random_selective(&mut rng, l);
                let x = uniform(&mut rng, &[l, s.d.len()], -1.0, 1.0);
                selective_scan_parallel(&s, &x)?.max_abs_diff(&selective_scan(&s, &x)?)
            };
            worst = worst.max(err);
        }
        Ok(worst)
    };
    Check::from_result(
        name,
        run().map(|w| {
            Check::new(
                name,
                w < 1e-5,
                format!("{cases} cases, max error {w:.2e} (< 1e-5), {:.1}s", t.elapsed().as_secs_f64()),
            )
        }),
    )
}

/// Gram matrix of the full 3-D basis, inverse-of-forward on random input
/// and the transform of a constant volume.
pub fn dct_checks(bounds: [usize; 3], seed: u64) -> Vec<Check> {
    let gram = || -> Result<Check> {
        let idx = FreqIndexSet::full(bounds);
        let bases = idx.triples().iter().map(|&k| dct_basis(bounds, k)).collect::<Result<Vec<_>>>()?;
        let mut worst = 0.0f64;
        for (i, a) in bases.iter().enumerate() {
            for (j, b) in bases.iter().enumerate().skip(i) {
                let g: f64 = a.data().iter().zip(b.data()).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
                worst = worst.max((g - f64::from(u8::from(i == j))).abs());
            }
        }
        Ok(Check::new(
            "dct gram",
            worst < 1e-5,
            format!("{} basis functions, max |G − I| {worst:.2e} (< 1e-5)", bases.len()),
        ))
    };
    let roundtrip = || -> Result<Check> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, &[2, bounds[0], bounds[1], bounds[2]], -1.0, 1.0);
        let idx = FreqIndexSet::full(bounds);
        let tape = Tape::new();
        let y = tape.value(idct(&tape, dct_forward(&tape, tape.constant(x.clone()), &idx)?, &idx)?);
        let scale = x.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let rel = y.max_abs_diff(&x) / scale;
        Ok(Check::new("dct roundtrip", rel < 1e-4, format!("max relative error {rel:.2e} (< 1e-4)")))
    };
    let dc = || -> Result<Check> {
        let idx = FreqIndexSet::full(bounds);
        let tape = Tape::new();
        let mut clean = true;
        for value in [1.0f32, -0.37, 2.5, 1e3] {
            let x = Tensor::full([1, bounds[0], bounds[1], bounds[2]], value);
            let c = tape.value(dct_forward(&tape, tape.constant(x), &idx)?);
            clean &= c.data()[0] != 0.0 && c.data()[1..].iter().all(|&v| v == 0.0);
        }
        Ok(Check::new("dct dc-only", clean, "constant volumes have exactly zero non-DC coefficients"))
    };
    vec![
        Check::from_result("dct gram", gram()),
        Check::from_result("dct roundtrip", roundtrip()),
        Check::from_result("dct dc-only", dc()),
    ]
}

/// `Σ y ⊙ w` for a fixed random weighting `w`, so every output entry
/// contributes a distinct gradient.
fn weighted(tape: &Tape, y: Var, w: &Tensor) -> Result<Var> {
    Ok(tape.sum(tape.mul(y, tape.constant(w.clone()))?))
}

/// Smallest distance between the two largest or the two smallest
/// coefficients of any channel of a `C×K` tensor.
fn extreme_gap(coeffs: &Tensor) -> f32 {
    let k = coeffs.shape()[1];
    coeffs
        .data()
        .chunks(k)
        .map(|row| {
            let mut v = row.to_vec();
            v.sort_by(f32::total_cmp);
            (v[1] - v[0]).min(v[k - 1] - v[k - 2])
        })
        .fold(f32::INFINITY, f32::min)
}

/// Draws uniform inputs until the frequency max/min pools of `coeffs(x)` have
/// no near-tie. A central difference straddling a tie measures the average
/// of two one-sided slopes, not the gradient.
fn away_from_pool_ties(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    margin: f32,
    coeffs: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    for _ in 0..10_000 {
        let x = uniform(rng, shape, -1.0, 1.0);
        if extreme_gap(&coeffs(&x)?) > margin {
            return Ok(x);
        }
    }
    Err(Error::Parameter(format!("no probe input with pool gaps above {margin}")))
}

fn grad_line(name: &str, reports: &[GradCheckReport]) -> Check {
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0f32, f32::max);
    let checked: usize = reports.iter().map(|r| r.checked).sum();
    Check::new(format!("grad {name}"), worst < 1e-3, format!("{checked} entries, max rel err {worst:.2e} (< 1e-3)"))
}

/// Finite-difference checks on inputs and parameters of every trainable
/// building block at desk widths.
pub fn grad_suite(seed: u64) -> Vec<Check> {
    const EPS: f32 = 1e-2;
    const PER_PARAM: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &str, f: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<Vec<GradCheckReport>>| {
        let t = Instant::now();
        let mut c = match f(&mut rng) {
            Ok(r) => grad_line(name, &r),
            Err(e) => Check::new(format!("grad {name}"), false, format!("error: {e}")),
        };
        c.detail.push_str(&format!(", {:.1}s", t.elapsed().as_secs_f64()));
        out.push(c);
    };

    run("mamba_block_forward", &mut |rng| {
        let mut reports = Vec::new();
        for (scan, method) in
            [(ScanDirection::Forward, Discretization::Bilinear), (ScanDirection::Bidirectional, Discretization::Zoh)]
        {
            let mut store = ParamStore::new();
            let cfg = MambaBlockConfig { scan, method, ..MambaBlockConfig::new(16) };
            let block = MambaBlock::new(&mut store, &mut Init::new(1), "m", cfg, false)?;
            let x = uniform(rng, &[16, 16], -1.0, 1.0);
            let w = uniform(rng, &[16, 16], -1.0, 1.0);
            reports.push(grad_check(|t, v| weighted(t, mamba_block_forward(&block, t, &store, v)?, &w), &x, EPS)?);
            reports.push(grad_check_params(
                &store,
                |t, s| weighted(t, mamba_block_forward(&block, t, s, t.constant(x.clone()))?, &w),
                EPS,
                PER_PARAM,
            )?);
        }
        Ok(reports)
    });

    run("mfgc_forward", &mut |rng| {
        let mut store = ParamStore::new();
        let bounds = [2, 4, 4];
        let block = Mfgc::new(&mut store, &mut Init::new(2), "f", 16, FreqIndexSet::full(bounds))?;
        // At init the max and min pools nearly cancel through the GELU, so
        // gate gradients sit close to the f32 resolution of the probe.
        for id in block.gate.params() {
            let shape = store.get(id).tensor.shape().to_vec();
            store.get_mut(id).tensor = uniform(rng, &shape, -0.5, 0.5);
        }
        let x = away_from_pool_ties(rng, &[16, 2, 4, 4], 4.0 * EPS, |x| {
            let tape = Tape::inference();
            Ok(tape.value(dct_forward(&tape, tape.constant(x.clone()), &block.idx)?))
        })?;
        let w = uniform(rng, &[16, 2, 4, 4], -1.0, 1.0);
        Ok(vec![
            grad_check(|t, v| weighted(t, mfgc_forward(t, &store, &block, v)?, &w), &x, EPS)?,
            grad_check_params(
                &store,
                |t, s| weighted(t, mfgc_forward(t, s, &block, t.constant(x.clone()))?, &w),
                EPS,
                PER_PARAM,
            )?,
        ])
    });

    run("cross_branch_attention", &mut |rng| {
        let mut store = ParamStore::new();
        let cba = CbaWeights::new(&mut store, &mut Init::new(3), "cba", 32, 64, 4, 16)?;
        let (fm, fs) = (uniform(rng, &[8, 32], -1.0, 1.0), uniform(rng, &[8, 64], -1.0, 1.0));
        let w = uniform(rng, &[8, 64], -1.0, 1.0);
        Ok(vec![
            grad_check(
                |t, v| weighted(t, cross_branch_attention(t, &store, &cba, v, t.constant(fs.clone()))?, &w),
                &fm,
                EPS,
            )?,
            grad_check(
                |t, v| weighted(t, cross_branch_attention(t, &store, &cba, t.constant(fm.clone()), v)?, &w),
                &fs,
                EPS,
            )?,
            grad_check_params(
                &store,
                |t, s| {
                    weighted(t, cross_branch_attention(t, s, &cba, t.constant(fm.clone()), t.constant(fs.clone()))?, &w)
                },
                EPS,
                PER_PARAM,
            )?,
        ])
    });

    run("vit_block_forward", &mut |rng| {
        let mut store = ParamStore::new();
        let mut init = Init::new(4);
        let mut block =
            VitBlock::new(&mut store, &mut init, "vit", VitBlockConfig { dim: 64, heads: 4, mlp_ratio: 2 }, false);
        block.add_lora(&mut store, &mut init, "vit", 4)?;
        // Nonzero up-matrices so the LoRA down-projections get gradient.
        let ups: Vec<_> = store.iter().filter(|(_, p)| p.name.ends_with(".up")).map(|(id, _)| id).collect();
        for id in ups {
            let shape = store.get(id).tensor.shape().to_vec();
            store.get_mut(id).tensor = uniform(rng, &shape, -0.1, 0.1);
        }
        let x = uniform(rng, &[1, 8, 64], -1.0, 1.0);
        let w = uniform(rng, &[1, 8, 64], -1.0, 1.0);
        Ok(vec![
            grad_check(|t, v| weighted(t, vit_block_forward(t, &store, &block, v)?, &w), &x, EPS)?,
            grad_check_params(
                &store,
                |t, s| weighted(t, vit_block_forward(t, s, &block, t.constant(x.clone()))?, &w),
                EPS,
                PER_PARAM,
            )?,
        ])
    });

    run("adapter_forward", &mut |rng| {
        let mut reports = Vec::new();
        let dims = [2, 2, 2];
        for local in [LocalPathKind::mfgc(), LocalPathKind::conv()] {
            let mut store = ParamStore::new();
            let cfg = AdapterConfig { d_sam: 64, d_adapter: 16, dims, local, mamba: MambaBlockConfig::new(16) };
            let a = TpMambaAdapter::new(&mut store, &mut Init::new(5), "ad", cfg)?;
            // The up-projection starts at zero, which would hide every other
            // gradient.
            let up = store.id("ad.up.w").expect("adapter up-projection");
            store.get_mut(up).tensor = uniform(rng, &[16, 64], -0.5, 0.5);
            // The MFGC path pools the DCT of the down-projected tokens. One
            // perturbed token entry moves those coefficients by well under
            // EPS / 4, so that margin keeps the input check clear of ties.
            let x = away_from_pool_ties(rng, &[8, 64], EPS / 4.0, |x| {
                let tape = Tape::inference();
                let p = |name: &str| tape.param(&store, store.id(name).expect("adapter down-projection"));
                let h = tape.gelu(tape.linear_bias(tape.constant(x.clone()), p("ad.down.w"), p("ad.down.b"))?);
                let vol = tokens_to_volume(&tape, h, dims)?;
                Ok(tape.value(dct_forward(&tape, vol, &FreqIndexSet::full(dims))?))
            })?;
            let w = uniform(rng, &[8, 64], -1.0, 1.0);
            reports.push(grad_check(|t, v| weighted(t, adapter_forward(t, &store, &a, v)?, &w), &x, EPS)?);
            reports.push(grad_check_params(
                &store,
                |t, s| weighted(t, adapter_forward(t, s, &a, t.constant(x.clone()))?, &w),
                EPS,
                PER_PARAM,
            )?);
        }
        Ok(reports)
    });

    run("decoders", &mut |rng| {
        let mut store = ParamStore::new();
        let d = Decoder::new(&mut store, &mut Init::new(6), "dec", &[64, 32, 16, 8], 4)?;
        let x2 = uniform(rng, &[64, 2, 1, 1], -1.0, 1.0);
        let w2 = uniform(rng, &[4, 2, 8, 8], -1.0, 1.0);
        let x3 = uniform(rng, &[64, 2, 1, 2], -1.0, 1.0);
        let w3 = uniform(rng, &[4, 2, 8, 16], -1.0, 1.0);
        Ok(vec![
            grad_check(|t, v| weighted(t, decode_2d(t, &store, &d, v)?, &w2), &x2, EPS)?,
            grad_check(|t, v| weighted(t, decode_3d(t, &store, &d, v)?, &w3), &x3, EPS)?,
            grad_check_params(
                &store,
                |t, s| weighted(t, decode_3d(t, s, &d, t.constant(x3.clone()))?, &w3),
                EPS,
                PER_PARAM,
            )?,
        ])
    });

    run("loss_dice_ce", &mut |rng| {
        // Entries of this gradient scale like 1/voxels; f32 central
        // differences cannot resolve them on much larger volumes.
        let z = uniform(rng, &[4, 1, 4, 8], -2.0, 2.0);
        let labels: Vec<u8> = (0..32).map(|_| rng.random_range(0..4)).collect();
        Ok(vec![grad_check(|t, v| t.loss_dice_ce(v, &labels), &z, EPS)?])
    });
    out
}

/// Bitwise identities at initialisation: adapter model against its frozen
/// stub, and a zero-up LoRA layer against the plain frozen layer.
pub fn init_identity(patch_dims: [usize; 3], seed: u64) -> Vec<Check> {
    let model = || -> Result<Check> {
        let mut lines = Vec::new();
        let mut ok = true;
        for kind in [ModelKind::AdapterConv, ModelKind::AdapterMfgc, ModelKind::AdapterLora] {
            let cfg = ModelConfig { kind, patch_dims, ..ModelConfig::default() };
            let m = Model::build(&cfg, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = uniform(&mut rng, &[1, patch_dims[0], patch_dims[1], patch_dims[2]], 0.0, 1.0);
            let tape = Tape::inference();
            let a = tape.value(m.encoder_output(&tape, &x)?);
            let b = tape.value(m.frozen_stub_output(&tape, &x)?);
            let same = a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
            ok &= same;
            lines.push(format!("{kind} {}", if same { "equal" } else { "differs" }));
        }
        Ok(Check::new("init identity (adapter model)", ok, lines.join(", ")))
    };
    let lora = || -> Result<Check> {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let w = store.add("w", init.fan_in([64, 48], 64), true);
        let lp = LoraPair::new(&mut store, &mut init, "lora", 64, 48, 4)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, &[10, 64], -1.0, 1.0);
        let tape = Tape::new();
        let xv = tape.constant(x);
        let a = tape.value(lora_forward(&tape, &store, xv, w, Some(&lp))?);
        let b = tape.value(lora_forward(&tape, &store, xv, w, None)?);
        let same = a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
        Ok(Check::new("init identity (lora)", same, "zero up-matrix output against the frozen layer"))
    };
    vec![
        Check::from_result("init identity (adapter model)", model()),
        Check::from_result("init identity (lora)", lora()),
    ]
}

/// Trains `steps` steps on phantoms and checks every frozen hash, that the
/// trainable set moved, and that the reported ratio equals the configured one.
pub fn freeze_contract(cfg: &ModelConfig, steps: usize, seed: u64) -> Check {
    let name = format!("freeze contract ({}, {steps} steps)", cfg.kind);
    let run = || -> Result<Check> {
        let mut model = Model::build(cfg, seed)?;
        let spec = PhantomSpec::for_dims(cfg.patch_dims);
        let data = phantom_dataset(&spec, steps.min(8), seed)?;
        let before: Vec<Vec<f32>> =
            model.store.iter().filter(|(_, p)| !p.frozen).map(|(_, p)| p.tensor.data().to_vec()).collect();
        let tc = TrainConfig { base_lr: 1e-3, warmup_steps: 0, total_steps: steps, seed, ..TrainConfig::default() };
        let mut opt = AdamW::new(&model.store, tc.weight_decay);
        for s in 0..steps {
            train_step(&mut model, &[&data[s % data.len()]], &tc, &mut opt, s)?;
        }
        let report = model.freeze_report();
        let after = model.store.iter().filter(|(_, p)| !p.frozen).map(|(_, p)| p.tensor.data().to_vec());
        let moved = before.into_iter().zip(after).filter(|(b, a)| b != a).count();
        let (trainable, total) = cfg.expected_counts()?;
        let ratio_ok = report.trainable == trainable && report.total == total;
        let ok = report.all_pass() && ratio_ok && moved > 0;
        Ok(Check::new(
            name.clone(),
            ok,
            format!(
                "{}/{} frozen unchanged, {moved} trainable tensors moved, ratio {:.4} = {trainable}/{total} ({})",
                report.entries.len() - report.failures().len(),
                report.entries.len(),
                report.ratio(),
                if ratio_ok { "matches" } else { "MISMATCH" }
            ),
        ))
    };
    Check::from_result(&name, run())
}

fn brute_overlap(pred: &[u8], gt: &[u8], class: u8) -> (f64, f64) {
    let a: Vec<usize> = (0..pred.len()).filter(|&i| pred[i] == class).collect();
    let b: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] == class).collect();
    let inter = a.iter().filter(|i| b.contains(i)).count() as f64;
    let union = (a.len() + b.len()) as f64 - inter;
    if a.is_empty() && b.is_empty() {
        return (1.0, 1.0);
    }
    (2.0 * inter / (a.len() + b.len()) as f64, inter / union)
}

/// Surface voxels as coordinates: in the mask with a face neighbour
/// outside it or outside the volume.
fn brute_surface(mask: &[bool], dims: [usize; 3]) -> Vec<[i64; 3]> {
    let [d, h, w] = dims.map(|v| v as i64);
    let inside = |z: i64, y: i64, x: i64| {
        z >= 0 && y >= 0 && x >= 0 && z < d && y < h && x < w && mask[((z * h + y) * w + x) as usize]
    };
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !inside(z, y, x) {
                    continue;
                }
                let steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if steps.iter().any(|&(a, b, c)| !inside(z + a, y + b, x + c)) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn brute_p95(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = 0.95 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < v.len() {
        v[lo] * (1.0 - frac) + v[lo + 1] * frac
    } else {
        v[lo]
    }
}

fn brute_hd95(pred: &[u8], gt: &[u8], dims: [usize; 3], spacing: [f64; 3], class: u8) -> Option<f64> {
    let sa = brute_surface(&pred.iter().map(|&v| v == class).collect::<Vec<_>>(), dims);
    let sb = brute_surface(&gt.iter().map(|&v| v == class).collect::<Vec<_>>(), dims);
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let dist =
        |p: &[i64; 3], q: &[i64; 3]| (0..3).map(|i| ((p[i] - q[i]) as f64 * spacing[i]).powi(2)).sum::<f64>().sqrt();
    let directed = |from: &[[i64; 3]], to: &[[i64; 3]]| {
        brute_p95(from.iter().map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)).collect())
    };
    Some(directed(&sa, &sb).max(directed(&sb, &sa)))
}

/// Library metrics against exhaustive-search versions on random mask pairs
/// of extent up to `6³`.
pub fn metric_oracles(pairs: usize, seed: u64) -> Check {
    let name = "metric oracles";
    let run = || -> Result<Check> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut overlap_bad, mut hd_worst, mut hd_bad) = (0usize, 0.0f64, 0usize);
        for _ in 0..pairs {
            let dims = [0; 3].map(|_| rng.random_range(1..=6usize));
            let n: usize = dims.iter().product();
            let k = rng.random_range(2..=4u8);
            // Blobby masks: a per-pair foreground rate keeps empty and full
            // classes in the mix.
            let rate = rng.random_range(0.0..1.0);
            let mask = |rng: &mut ChaCha8Rng| -> Vec<u8> {
                (0..n).map(|_| if rng.random::<f64>() < rate { rng.random_range(1..k) } else { 0 }).collect()
            };
            let (pred, gt) = (mask(&mut rng), mask(&mut rng));
            let spacing = [0; 3].map(|_| rng.random_range(0.5..2.5f32));
            let lib = metric_overlap(&pred, &gt, usize::from(k))?;
            for c in 1..k {
                let (dice, iou) = brute_overlap(&pred, &gt, c);
                let o = lib[usize::from(c) - 1];
                overlap_bad += usize::from(o.dice != dice || o.iou != iou);
                let want = brute_hd95(&pred, &gt, dims, spacing.map(f64::from), c);
                match (metric_hd95(&pred, &gt, dims, spacing, c)?, want) {
                    (Some(a), Some(b)) => {
                        hd_worst = hd_worst.max((a - b).abs());
                        hd_bad += usize::from((a - b).abs() >= 1e-6);
                    }
                    (None, None) => {}
                    _ => hd_bad += 1,
                }
            }
        }
        Ok(Check::new(
            name,
            overlap_bad == 0 && hd_bad == 0,
            format!("{pairs} pairs, {overlap_bad} Dice/IoU mismatches, {hd_bad} HD95 mismatches, max HD95 diff {hd_worst:.1e} mm"),
        ))
    };
    Check::from_result(name, run())
}

/// Per-doubling time ratios of the selective scan (at most 2.5) and of
/// dense attention (at least 3.0).
pub fn complexity(lengths: &[usize], d_model: usize, repeats: usize) -> (Check, Option<BenchReport>) {
    let name = "complexity";
    match bench_scaling(lengths, d_model, repeats) {
        Ok(r) => {
            let smax = r.scan_ratios.iter().copied().fold(0.0, f64::max);
            let amin = r.attention_ratios.iter().copied().fold(f64::INFINITY, f64::min);
            let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/");
            let c = Check::new(
                name,
                smax <= 2.5 && amin >= 3.0,
                format!(
                    "L {lengths:?}, d {d_model}: scan ratios {} (≤ 2.5), attention ratios {} (≥ 3.0)",
                    fmt(&r.scan_ratios),
                    fmt(&r.attention_ratios)
                ),
            );
            (c, Some(r))
        }
        Err(e) => (Check::new(name, false, format!("error: {e}")), None),
    }
}

/// The quick subset run by `selftest`.
pub fn selftest() -> Vec<Check> {
    let mut out = vec![scan_equivalence(200, 1)];
    out.extend(dct_checks([8, 8, 8], 2));
    out.extend(grad_suite(3));
    out.extend(init_identity([8, 32, 32], 4));
    let cfg = ModelConfig { patch_dims: [8, 32, 32], ..ModelConfig::default() };
    out.push(freeze_contract(&cfg, 3, 5));
    out.push(freeze_contract(&ModelConfig { kind: ModelKind::DualBranch, ..cfg }, 3, 5));
    out.push(metric_oracles(100, 6));
    out
}
