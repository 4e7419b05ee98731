use super::{dims3, lora_forward, multi_head_attention, LoraPair};
use crate::error::{dim_err, Result};
use crate::tensor::{Init, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VitBlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl VitBlockConfig {
    /// Scalars in one block, excluding LoRA.
    pub fn param_count(&self) -> usize {
        let (d, h) = (self.dim, self.dim * self.mlp_ratio);
        4 * d + 4 * (d * d + d) + d * h + h + h * d + d
    }
}

/// Pre-norm transformer block: `x + MSA(LN(x))`, then `+ MLP(LN(·))`.
#[derive(Clone, Debug)]
pub struct VitBlock {
    pub cfg: VitBlockConfig,
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
    /// Optional low-rank updates on the q, k and v projections.
    pub lora: Option<[LoraPair; 3]>,
}

/// Where a hook runs inside [`VitBlock::forward_hooked`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    AfterMsa,
    AfterMlp,
}

impl VitBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, cfg: VitBlockConfig, frozen: bool) -> Self {
        let (d, h) = (cfg.dim, cfg.dim * cfg.mlp_ratio);
        let mut lin = |name: &str, i: usize, o: usize, init: &mut Init| {
            let w = store.add(format!("{prefix}.{name}.w"), init.fan_in([i, o], i), frozen);
            let b = store.add(format!("{prefix}.{name}.b"), init.fan_in([o], i), frozen);
            (w, b)
        };
        let q = lin("q", d, d, init);
        let k = lin("k", d, d, init);
        let v = lin("v", d, d, init);
        let o = lin("o", d, d, init);
        let fc1 = lin("fc1", d, h, init);
        let fc2 = lin("fc2", h, d, init);
        let mut norm = |name: &str| {
            (
                store.add(format!("{prefix}.{name}.g"), Tensor::full([d], 1.0), frozen),
                store.add(format!("{prefix}.{name}.b"), Tensor::zeros([d]), frozen),
            )
        };
        let ln1 = norm("ln1");
        let ln2 = norm("ln2");
        VitBlock { cfg, ln1, q, k, v, o, ln2, fc1, fc2, lora: None }
    }

    /// Attaches trainable rank-`rank` updates to q, k and v.
    pub fn add_lora(&mut self, store: &mut ParamStore, init: &mut Init, prefix: &str, rank: usize) -> Result<()> {
        let d = self.cfg.dim;
        let mk = |name: &str, store: &mut ParamStore, init: &mut Init| {
            LoraPair::new(store, init, &format!("{prefix}.{name}"), d, d, rank)
        };
        let q = mk("lora_q", store, init)?;
        let k = mk("lora_k", store, init)?;
        let v = mk("lora_v", store, init)?;
        self.lora = Some([q, k, v]);
        Ok(())
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.forward_hooked(tape, store, x, &mut |_, y| Ok(y))
    }

    /// Like [`VitBlock::forward`], passing the residual stream through
    /// `hook` after each sub-block.
    pub fn forward_hooked(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x: Var,
        hook: &mut dyn FnMut(Stage, Var) -> Result<Var>,
    ) -> Result<Var> {
        let (_, _, d) = dims3(tape, x, "vit block")?;
        if d != self.cfg.dim {
            return Err(dim_err!("vit block built for width {}, got {d}", self.cfg.dim));
        }
        let p = |id| tape.param(store, id);
        let norm = |x: Var, (g, b): (ParamId, ParamId)| tape.layer_norm(x, p(g), p(b), 1e-5);
        let proj = |x: Var, (w, b): (ParamId, ParamId), lp: Option<&LoraPair>| -> Result<Var> {
            let y = lora_forward(tape, store, x, w, lp)?;
            tape.add_broadcast(y, p(b), 2)
        };
        let lora = |i: usize| self.lora.as_ref().map(|l| &l[i]);

        let h = norm(x, self.ln1)?;
        let q = proj(h, self.q, lora(0))?;
        let k = proj(h, self.k, lora(1))?;
        let v = proj(h, self.v, lora(2))?;
        let (att, _) = multi_head_attention(tape, q, k, v, self.cfg.heads)?;
        let x = tape.add(x, proj(att, self.o, None)?)?;
        let x = hook(Stage::AfterMsa, x)?;

        let h = norm(x, self.ln2)?;
        let h = tape.gelu(proj(h, self.fc1, None)?);
        let x = tape.add(x, proj(h, self.fc2, None)?)?;
        hook(Stage::AfterMlp, x)
    }
}

/// Free-function form of [`VitBlock::forward`].
pub fn vit_block_forward(tape: &Tape, store: &ParamStore, w: &VitBlock, tokens: Var) -> Result<Var> {
    w.forward(tape, store, tokens)
}
