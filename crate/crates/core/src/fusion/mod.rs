//! Attention-based building blocks: multi-head attention, cross-branch
//! attention, residual fusion, LoRA and the ViT block of the frozen encoder.

mod vit;

use crate::error::{dim_err, param_err, Result};
use crate::tensor::{Init, ParamId, ParamStore, Tape, Var};

pub use vit::{vit_block_forward, Stage, VitBlock, VitBlockConfig};

fn dims3(tape: &Tape, x: Var, what: &str) -> Result<(usize, usize, usize)> {
    match tape.shape(x)[..] {
        [b, l, d] => Ok((b, l, d)),
        ref s => Err(dim_err!("{what}: expected B×L×d, got {s:?}")),
    }
}

/// `[B × L × h·c]` → `[B·h × L × c]`
fn split_heads(tape: &Tape, x: Var, heads: usize) -> Result<Var> {
    let (b, l, hc) = dims3(tape, x, "split_heads")?;
    if hc % heads != 0 {
        return Err(dim_err!("width {hc} not divisible by {heads} heads"));
    }
    let c = hc / heads;
    let y = tape.permute(tape.reshape(x, [b, l, heads, c])?, &[0, 2, 1, 3])?;
    tape.reshape(y, [b * heads, l, c])
}

fn merge_heads(tape: &Tape, x: Var, heads: usize) -> Result<Var> {
    let (bh, l, c) = dims3(tape, x, "merge_heads")?;
    let b = bh / heads;
    let y = tape.permute(tape.reshape(x, [b, heads, l, c])?, &[0, 2, 1, 3])?;
    tape.reshape(y, [b, l, heads * c])
}

/// Scaled dot-product attention over `heads` heads. `q: B×Lq×h·dk`,
/// `k: B×Lk×h·dk`, `v: B×Lk×h·dv`. Returns the merged output
/// `B×Lq×h·dv` and the attention weights `B·h×Lq×Lk`.
pub fn multi_head_attention(tape: &Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var)> {
    let (bq, _, hk) = dims3(tape, q, "attention query")?;
    let (bk, lk, hk2) = dims3(tape, k, "attention key")?;
    let (bv, lv, _) = dims3(tape, v, "attention value")?;
    if bq != bk || bk != bv || lk != lv || hk != hk2 {
        return Err(dim_err!(
            "attention operands disagree: {:?}, {:?}, {:?}",
            tape.shape(q),
            tape.shape(k),
            tape.shape(v)
        ));
    }
    let dk = hk / heads.max(1);
    let (qh, kh, vh) = (split_heads(tape, q, heads)?, split_heads(tape, k, heads)?, split_heads(tape, v, heads)?);
    let scores = tape.scale(tape.bmm(qh, kh, true)?, 1.0 / (dk as f32).sqrt());
    let attn = tape.softmax_last(scores)?;
    let out = tape.bmm(attn, vh, false)?;
    Ok((merge_heads(tape, out, heads)?, attn))
}

/// Query/key/value/output projections of cross-branch attention.
#[derive(Clone, Debug)]
pub struct CbaWeights {
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
}

impl CbaWeights {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        d_mamba: usize,
        d_sam: usize,
        heads: usize,
        d_k: usize,
    ) -> Result<Self> {
        if heads == 0 || d_k == 0 {
            return Err(param_err!("attention needs at least one head of positive width"));
        }
        let hk = heads * d_k;
        let w_q = store.add(format!("{prefix}.w_q"), init.fan_in([d_mamba, hk], d_mamba), false);
        let w_k = store.add(format!("{prefix}.w_k"), init.fan_in([d_sam, hk], d_sam), false);
        let w_v = store.add(format!("{prefix}.w_v"), init.fan_in([d_sam, hk], d_sam), false);
        let w_o = store.add(format!("{prefix}.w_o"), init.fan_in([hk, d_sam], hk), false);
        Ok(CbaWeights { heads, d_k, d_v: d_k, w_q, w_k, w_v, w_o })
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w_q, self.w_k, self.w_v, self.w_o]
    }

    /// `f_mamba: B×L×D_mamba`, `f_sam: B×L×D_sam` → `(F_cba: B×L×D_sam,
    /// attention weights)`.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, f_mamba: Var, f_sam: Var) -> Result<(Var, Var)> {
        let (bm, lm, _) = dims3(tape, f_mamba, "cba specialist features")?;
        let (bs, ls, _) = dims3(tape, f_sam, "cba generalist features")?;
        if (bm, lm) != (bs, ls) {
            return Err(dim_err!("cba: token grids {:?} and {:?} differ", tape.shape(f_mamba), tape.shape(f_sam)));
        }
        let p = |id| tape.param(store, id);
        let q = tape.linear(f_mamba, p(self.w_q))?;
        let k = tape.linear(f_sam, p(self.w_k))?;
        let v = tape.linear(f_sam, p(self.w_v))?;
        let (o, attn) = multi_head_attention(tape, q, k, v, self.heads)?;
        Ok((tape.linear(o, p(self.w_o))?, attn))
    }
}

/// Cross-branch attention on single token grids `L×D`.
pub fn cross_branch_attention(
    tape: &Tape,
    store: &ParamStore,
    w: &CbaWeights,
    f_mamba: Var,
    f_sam: Var,
) -> Result<Var> {
    let lift = |x: Var| -> Result<Var> {
        let s = tape.shape(x);
        match s[..] {
            [l, d] => tape.reshape(x, [1, l, d]),
            _ => Ok(x),
        }
    };
    let single = tape.shape(f_sam).len() == 2;
    let (y, _) = w.forward(tape, store, lift(f_mamba)?, lift(f_sam)?)?;
    if single {
        let s = tape.shape(y);
        tape.reshape(y, [s[1], s[2]])
    } else {
        Ok(y)
    }
}

/// `F_sam + F_cba`
pub fn residual_fuse(tape: &Tape, f_sam: Var, f_cba: Var) -> Result<Var> {
    tape.add(f_sam, f_cba)
}

/// Low-rank update `ΔW = (α/r)·down·up` beside a frozen weight.
#[derive(Clone, Debug)]
pub struct LoraPair {
    pub rank: usize,
    pub scale: f32,
    pub down: ParamId,
    pub up: ParamId,
}

impl LoraPair {
    /// `up` starts at zero. Uses `α = r`, so the scale is 1.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
    ) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(param_err!("LoRA rank {rank} must lie in 1..={}", d_in.min(d_out)));
        }
        let down = store.add(format!("{prefix}.down"), init.fan_in([d_in, rank], d_in), false);
        let up = store.add(format!("{prefix}.up"), crate::Tensor::zeros([rank, d_out]), false);
        Ok(LoraPair { rank, scale: 1.0, down, up })
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.down, self.up]
    }
}

/// `x·W + (α/r)·x·down·up`. With `lp` absent this is the plain layer.
pub fn lora_forward(tape: &Tape, store: &ParamStore, x: Var, frozen_w: ParamId, lp: Option<&LoraPair>) -> Result<Var> {
    let y = tape.linear(x, tape.param(store, frozen_w))?;
    let Some(lp) = lp else { return Ok(y) };
    let low = tape.linear(tape.linear(x, tape.param(store, lp.down))?, tape.param(store, lp.up))?;
    tape.add(y, tape.scale(low, lp.scale))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{grad_check, grad_check_params, Tensor};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn cba(dm: usize, ds: usize, heads: usize, dk: usize) -> (ParamStore, CbaWeights) {
        let mut store = ParamStore::new();
        let w = CbaWeights::new(&mut store, &mut Init::new(4), "cba", dm, ds, heads, dk).unwrap();
        (store, w)
    }

    #[test]
    fn single_token_returns_projected_value() {
        let (store, w) = cba(3, 5, 2, 2);
        let tape = Tape::new();
        let fs = random(&[1, 5], 1);
        let y1 = tape.value(
            cross_branch_attention(&tape, &store, &w, tape.constant(random(&[1, 3], 2)), tape.constant(fs.clone()))
                .unwrap(),
        );
        let y2 = tape.value(
            cross_branch_attention(&tape, &store, &w, tape.constant(random(&[1, 3], 3)), tape.constant(fs.clone()))
                .unwrap(),
        );
        assert_eq!(y1, y2);
        let wv = &store.get(w.w_v).tensor;
        let wo = &store.get(w.w_o).tensor;
        let v: Vec<f32> = (0..4).map(|j| (0..5).map(|i| fs.data()[i] * wv.at(&[i, j])).sum()).collect();
        for o in 0..5 {
            let want: f32 = (0..4).map(|j| v[j] * wo.at(&[j, o])).sum();
            assert!((y1.data()[o] - want).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (store, w) = cba(4, 6, 2, 3);
        let tape = Tape::new();
        let (_, attn) = w
            .forward(&tape, &store, tape.constant(random(&[2, 5, 4], 1)), tape.constant(random(&[2, 5, 6], 2)))
            .unwrap();
        let a = tape.value(attn);
        for row in a.data().chunks(5) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn matches_formula_for_one_head() {
        let (store, w) = cba(3, 4, 1, 2);
        let (fm, fs) = (random(&[3, 3], 5), random(&[3, 4], 6));
        let tape = Tape::new();
        let got = tape.value(
            cross_branch_attention(&tape, &store, &w, tape.constant(fm.clone()), tape.constant(fs.clone())).unwrap(),
        );
        let mat = |id: ParamId| store.get(id).tensor.clone();
        let (wq, wk, wv, wo) = (mat(w.w_q), mat(w.w_k), mat(w.w_v), mat(w.w_o));
        let proj = |x: &Tensor, m: &Tensor, i: usize, j: usize| -> f64 {
            (0..x.shape()[1]).map(|c| f64::from(x.at(&[i, c])) * f64::from(m.at(&[c, j]))).sum()
        };
        for i in 0..3 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (0..2).map(|c| proj(&fm, &wq, i, c) * proj(&fs, &wk, j, c)).sum::<f64>() / 2f64.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for o in 0..4 {
                let mut want = 0.0;
                for c in 0..2 {
                    let head: f64 = (0..3).map(|j| logits[j].exp() / z * proj(&fs, &wv, j, c)).sum();
                    want += head * f64::from(wo.at(&[c, o]));
                }
                assert!((f64::from(got.at(&[i, o])) - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn token_count_mismatch() {
        let (store, w) = cba(3, 4, 1, 2);
        let tape = Tape::new();
        let r = cross_branch_attention(
            &tape,
            &store,
            &w,
            tape.constant(random(&[3, 3], 1)),
            tape.constant(random(&[2, 4], 1)),
        );
        assert!(r.is_err());
    }

    #[test]
    fn logit_shift_invariance() {
        let tape = Tape::new();
        let (q, k, v) = (random(&[1, 4, 4], 1), random(&[1, 4, 4], 2), random(&[1, 4, 4], 3));
        let (o, _) = multi_head_attention(
            &tape,
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
            1,
        )
        .unwrap();
        // Adding the same vector to every key row shifts each query's
        // logits by a constant.
        let shift = [0.3f32, -1.1, 0.7, 2.0];
        let k2 = Tensor::from_fn([1, 4, 4], |i| k.data()[i] + shift[i % 4]);
        let (o2, _) = multi_head_attention(&tape, tape.constant(q), tape.constant(k2), tape.constant(v), 1).unwrap();
        assert!(tape.value(o).max_abs_diff(&tape.value(o2)) < 1e-5);
    }

    #[test]
    fn cba_gradients() {
        let (store, w) = cba(4, 6, 2, 2);
        let (fm, fs) = (random(&[5, 4], 1), random(&[5, 6], 2));
        let wt = random(&[5, 6], 3);
        let f = |t: &Tape, v: Var| {
            let y = cross_branch_attention(t, &store, &w, v, t.constant(fs.clone()))?;
            Ok(t.sum(t.mul(y, t.constant(wt.clone()))?))
        };
        assert!(grad_check(f, &fm, 1e-2).unwrap().max_rel_err < 1e-3);
        let f = |t: &Tape, v: Var| {
            let y = cross_branch_attention(t, &store, &w, t.constant(fm.clone()), v)?;
            Ok(t.sum(t.mul(y, t.constant(wt.clone()))?))
        };
        assert!(grad_check(f, &fs, 1e-2).unwrap().max_rel_err < 1e-3);
        let g = |t: &Tape, s: &ParamStore| {
            let y = cross_branch_attention(t, s, &w, t.constant(fm.clone()), t.constant(fs.clone()))?;
            Ok(t.sum(t.mul(y, t.constant(wt.clone()))?))
        };
        assert!(grad_check_params(&store, g, 1e-2, 8).unwrap().max_rel_err < 1e-3);
    }

    #[test]
    fn residual_fuse_rules() {
        let tape = Tape::new();
        let (a, b) = (tape.constant(random(&[3, 4], 1)), tape.constant(random(&[3, 4], 2)));
        let z = tape.constant(Tensor::zeros([3, 4]));
        assert_eq!(tape.value(residual_fuse(&tape, a, z).unwrap()), tape.value(a));
        assert_eq!(tape.value(residual_fuse(&tape, a, b).unwrap()), tape.value(residual_fuse(&tape, b, a).unwrap()));
        let c = tape.constant(Tensor::zeros([3, 2]));
        assert!(residual_fuse(&tape, a, c).is_err());
    }

    fn lora_setup(rank: usize) -> (ParamStore, ParamId, LoraPair) {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let w = store.add("w", init.fan_in([6, 5], 6), true);
        let lp = LoraPair::new(&mut store, &mut init, "lora", 6, 5, rank).unwrap();
        (store, w, lp)
    }

    #[test]
    fn zero_up_is_the_frozen_layer() {
        let (store, w, lp) = lora_setup(2);
        let tape = Tape::new();
        let x = tape.constant(random(&[4, 6], 9));
        let with = tape.value(lora_forward(&tape, &store, x, w, Some(&lp)).unwrap());
        let without = tape.value(lora_forward(&tape, &store, x, w, None).unwrap());
        assert_eq!(with, without);
    }

    #[test]
    fn rank_bounds() {
        let mut store = ParamStore::new();
        assert!(LoraPair::new(&mut store, &mut Init::new(0), "a", 6, 5, 6).is_err());
        assert!(LoraPair::new(&mut store, &mut Init::new(0), "b", 6, 5, 0).is_err());
    }

    #[test]
    fn update_has_bounded_rank() {
        let (mut store, _, lp) = lora_setup(2);
        let up = random(&[2, 5], 3);
        store.get_mut(lp.up).tensor = up.clone();
        let down = &store.get(lp.down).tensor;
        let dw = nalgebra::DMatrix::from_fn(6, 5, |i, j| {
            (0..2).map(|r| f64::from(down.at(&[i, r]) * up.at(&[r, j]))).sum::<f64>()
        });
        let sv = dw.singular_values();
        let numerical_rank = sv.iter().filter(|&&s| s > 1e-6 * sv.max()).count();
        assert!(numerical_rank <= 2);
    }

    #[test]
    fn frozen_weight_gets_no_gradient() {
        let (mut store, w, lp) = lora_setup(2);
        let tape = Tape::new();
        let y = lora_forward(&tape, &store, tape.constant(random(&[4, 6], 9)), w, Some(&lp)).unwrap();
        let g = tape.backward(tape.sum(y)).unwrap();
        store.zero_grad();
        tape.accumulate_param_grads(&g, &mut store).unwrap();
        assert!(store.get(w).tensor.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)));
        assert!(store.get(lp.up).tensor.grad().unwrap().iter().any(|&v| v != 0.0));
    }
}
