use crate::error::{dim_err, Result};
use crate::fusion::{Stage, VitBlock, VitBlockConfig};
use crate::tensor::{Init, ParamId, ParamStore, Tape, Tensor, Var};

/// Splits `image[S×C×H×W]` into non-overlapping `p×p` patches:
/// `[S × (H/p·W/p) × (C·p·p)]`, patches in row-major grid order and each
/// patch flattened as `(c, y, x)`.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let (s, c, h, w) = image.dims4()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(dim_err!("image {h}×{w} is not divisible into {p}×{p} patches"));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(image.numel());
    let src = image.data();
    for si in 0..s {
        for gy in 0..gh {
            for gx in 0..gw {
                for ci in 0..c {
                    for y in 0..p {
                        let row = ((si * c + ci) * h + gy * p + y) * w + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new([s, gh * gw, c * p * p], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VitEncoderConfig {
    pub in_channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
}

impl Default for VitEncoderConfig {
    fn default() -> Self {
        VitEncoderConfig { in_channels: 1, dim: 64, depth: 4, heads: 4, patch: 8, mlp_ratio: 2 }
    }
}

impl VitEncoderConfig {
    pub fn block(&self) -> VitBlockConfig {
        VitBlockConfig { dim: self.dim, heads: self.heads, mlp_ratio: self.mlp_ratio }
    }

    /// Scalars in the encoder for a token grid of `tokens` positions.
    pub fn param_count(&self, tokens: usize) -> usize {
        let pin = self.in_channels * self.patch * self.patch;
        pin * self.dim + self.dim + tokens * self.dim + self.depth * self.block().param_count()
    }
}

/// Patch embedding with learned positions followed by ViT blocks, applied
/// per slice.
#[derive(Clone, Debug)]
pub struct VitEncoder {
    pub cfg: VitEncoderConfig,
    pub tokens: usize,
    embed: (ParamId, ParamId),
    pos: ParamId,
    pub blocks: Vec<VitBlock>,
}

impl VitEncoder {
    /// `grid` is the per-slice patch grid `(H/p, W/p)`.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        cfg: VitEncoderConfig,
        grid: (usize, usize),
        frozen: bool,
    ) -> Self {
        let pin = cfg.in_channels * cfg.patch * cfg.patch;
        let tokens = grid.0 * grid.1;
        let w = store.add(format!("{prefix}.embed.w"), init.fan_in([pin, cfg.dim], pin), frozen);
        let b = store.add(format!("{prefix}.embed.b"), init.fan_in([cfg.dim], pin), frozen);
        let pos = store.add(format!("{prefix}.pos"), init.uniform([tokens, cfg.dim], 0.02), frozen);
        let blocks = (0..cfg.depth)
            .map(|i| VitBlock::new(store, init, &format!("{prefix}.block{i}"), cfg.block(), frozen))
            .collect();
        VitEncoder { cfg, tokens, embed: (w, b), pos, blocks }
    }

    /// Embeds `image[S×C×H×W]` into `[S × T × dim]` tokens.
    pub fn embed(&self, tape: &Tape, store: &ParamStore, image: &Tensor) -> Result<Var> {
        let patches = patchify(image, self.cfg.patch)?;
        if patches.shape()[1] != self.tokens
            || patches.shape()[2] != self.cfg.in_channels * self.cfg.patch * self.cfg.patch
        {
            return Err(dim_err!(
                "encoder built for {} tokens, image {:?} gives {:?}",
                self.tokens,
                image.shape(),
                patches.shape()
            ));
        }
        let x = tape.constant(patches);
        let p = |id| tape.param(store, id);
        let x = tape.linear_bias(x, p(self.embed.0), p(self.embed.1))?;
        let s = tape.shape(x)[0];
        let pos = tape.reshape(p(self.pos), [1, self.tokens * self.cfg.dim])?;
        let pos = tape.gather_rows(pos, std::rc::Rc::new(vec![0; s]))?;
        tape.add(x, tape.reshape(pos, [s, self.tokens, self.cfg.dim])?)
    }

    /// Runs every block and returns each block's output. `hook` sees the
    /// residual stream after each sub-block of block `i`.
    pub fn forward_hooked(
        &self,
        tape: &Tape,
        store: &ParamStore,
        image: &Tensor,
        hook: &mut dyn FnMut(usize, Stage, Var) -> Result<Var>,
    ) -> Result<Vec<Var>> {
        let mut x = self.embed(tape, store, image)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            x = b.forward_hooked(tape, store, x, &mut |stage, y| hook(i, stage, y))?;
            outs.push(x);
        }
        Ok(outs)
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, image: &Tensor) -> Result<Vec<Var>> {
        self.forward_hooked(tape, store, image, &mut |_, _, y| Ok(y))
    }
}
