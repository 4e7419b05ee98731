//! Tri-plane Mamba adapter: a bottleneck inserted into a frozen ViT block
//! that reshapes tokens into a volume and mixes a local path with a global
//! tri-plane Mamba path.

use crate::error::{dim_err, param_err, Result};
use crate::mamba::{MambaBlock, MambaBlockConfig, TriPlane};
use crate::mfgc::{FreqIndexSet, Mfgc};
use crate::tensor::{Conv3dSpec, Init, ParamId, ParamStore, Tape, Tensor, Var};

/// `tokens[(D·H·W) × C]` with index `d·H·W + h·W + w` → `C×D×H×W`.
pub fn tokens_to_volume(tape: &Tape, tokens: Var, dims: [usize; 3]) -> Result<Var> {
    let shape = tape.shape(tokens);
    let n: usize = dims.iter().product();
    let &[rows, c] = &shape[..] else {
        return Err(dim_err!("tokens must be N×C, got {shape:?}"));
    };
    if rows != n {
        return Err(dim_err!("{rows} tokens cannot fill a {dims:?} volume"));
    }
    let [d, h, w] = dims;
    tape.reshape(tape.transpose(tokens)?, [c, d, h, w])
}

/// Inverse of [`tokens_to_volume`].
pub fn volume_to_tokens(tape: &Tape, volume: Var) -> Result<Var> {
    let shape = tape.shape(volume);
    let &[c, d, h, w] = &shape[..] else {
        return Err(dim_err!("volume must be C×D×H×W, got {shape:?}"));
    };
    tape.transpose(tape.reshape(volume, [c, d * h * w])?)
}

#[derive(Clone, Debug, PartialEq)]
pub enum LocalPathKind {
    /// Parallel `3×3×3` convolutions, one per dilation, summed.
    MultiScaleConv3d { dilations: Vec<usize> },
    /// Gated DCT block over a low-frequency cube of the given size (the
    /// full cube when it covers the volume).
    Mfgc { cube: [usize; 3] },
}

impl LocalPathKind {
    pub fn conv() -> Self {
        LocalPathKind::MultiScaleConv3d { dilations: vec![1, 2] }
    }

    pub fn mfgc() -> Self {
        LocalPathKind::Mfgc { cube: [usize::MAX; 3] }
    }
}

#[derive(Clone, Debug)]
enum LocalPath {
    Conv(Vec<(usize, ParamId, ParamId)>),
    Mfgc(Mfgc),
}

#[derive(Clone, Debug)]
pub struct AdapterConfig {
    pub d_sam: usize,
    pub d_adapter: usize,
    pub dims: [usize; 3],
    pub local: LocalPathKind,
    pub mamba: MambaBlockConfig,
}

#[derive(Clone, Debug)]
pub struct TpMambaAdapter {
    pub cfg: AdapterConfig,
    down: (ParamId, ParamId),
    local: LocalPath,
    planes: [MambaBlock; 3],
    tri: TriPlane,
    fuse: (ParamId, ParamId),
    up: (ParamId, ParamId),
}

impl TpMambaAdapter {
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, cfg: AdapterConfig) -> Result<Self> {
        let (ds, da) = (cfg.d_sam, cfg.d_adapter);
        if ds == 0 || da == 0 {
            return Err(param_err!("adapter widths must be positive"));
        }
        if cfg.mamba.d_model != da {
            return Err(dim_err!("plane Mamba width {} differs from adapter width {da}", cfg.mamba.d_model));
        }
        let mut lin = |store: &mut ParamStore, name: &str, i: usize, o: usize, zero: bool| {
            let (w, b) = if zero {
                (Tensor::zeros([i, o]), Tensor::zeros([o]))
            } else {
                (init.fan_in([i, o], i), init.fan_in([o], i))
            };
            (store.add(format!("{prefix}.{name}.w"), w, false), store.add(format!("{prefix}.{name}.b"), b, false))
        };
        let down = lin(store, "down", ds, da, false);
        let fuse = lin(store, "fuse", 2 * da, da, false);
        let up = lin(store, "up", da, ds, true);
        let local = match &cfg.local {
            LocalPathKind::MultiScaleConv3d { dilations } => {
                if dilations.is_empty() || dilations.contains(&0) {
                    return Err(param_err!("multi-scale conv needs positive dilations"));
                }
                let convs = dilations
                    .iter()
                    .map(|&dl| {
                        let w =
                            store.add(format!("{prefix}.conv_d{dl}.w"), init.fan_in([da, da, 3, 3, 3], 27 * da), false);
                        let b = store.add(format!("{prefix}.conv_d{dl}.b"), Tensor::zeros([da]), false);
                        (dl, w, b)
                    })
                    .collect();
                LocalPath::Conv(convs)
            }
            LocalPathKind::Mfgc { cube } => {
                let idx = FreqIndexSet::low(cfg.dims, *cube);
                LocalPath::Mfgc(Mfgc::new(store, init, &format!("{prefix}.mfgc"), da, idx)?)
            }
        };
        let names = ["axial", "coronal", "sagittal"];
        let planes =
            [0, 1, 2].map(|p| MambaBlock::new(store, init, &format!("{prefix}.{}", names[p]), cfg.mamba, false));
        let [a, c, s] = planes;
        let tri = TriPlane::new(cfg.dims)?;
        Ok(TpMambaAdapter { cfg, down, local, planes: [a?, c?, s?], tri, fuse, up })
    }

    /// `F_in` tokens `(D·H·W) × D_sam` (any leading shape with that many
    /// rows) → `F_adapter` of the same shape.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, f_in: Var) -> Result<Var> {
        let shape = tape.shape(f_in);
        let n: usize = self.cfg.dims.iter().product();
        if shape.last() != Some(&self.cfg.d_sam) || tape.numel(f_in) != n * self.cfg.d_sam {
            return Err(dim_err!("adapter expects {n} tokens of width {}, got {shape:?}", self.cfg.d_sam));
        }
        let p = |id| tape.param(store, id);
        let lin = |x: Var, (w, b): (ParamId, ParamId)| tape.linear_bias(x, p(w), p(b));
        let x = tape.reshape(f_in, [n, self.cfg.d_sam])?;
        let h = tape.gelu(lin(x, self.down)?);

        let vol = tokens_to_volume(tape, h, self.cfg.dims)?;
        let local = match &self.local {
            LocalPath::Conv(convs) => {
                let outs = convs
                    .iter()
                    .map(|&(dl, w, b)| tape.conv3d(vol, p(w), Some(p(b)), Conv3dSpec::same(3, dl)))
                    .collect::<Result<Vec<_>>>()?;
                tape.add_n(&outs)?
            }
            LocalPath::Mfgc(m) => m.forward(tape, store, vol)?,
        };
        let local = volume_to_tokens(tape, local)?;

        let seq = tape.reshape(h, [1, n, self.cfg.d_adapter])?;
        let outs = [0, 1, 2].map(|i| self.tri.split(tape, seq, i).and_then(|s| self.planes[i].forward(tape, store, s)));
        let [a, c, s] = outs;
        let global = tape.reshape(self.tri.assemble(tape, [a?, c?, s?])?, [n, self.cfg.d_adapter])?;

        let fused = lin(tape.concat(&[local, global], 1)?, self.fuse)?;
        let out = lin(fused, self.up)?;
        tape.reshape(out, shape)
    }
}

/// Free-function form of [`TpMambaAdapter::forward`].
pub fn adapter_forward(tape: &Tape, store: &ParamStore, a: &TpMambaAdapter, f_in: Var) -> Result<Var> {
    a.forward(tape, store, f_in)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{grad_check, grad_check_params};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn adapter(local: LocalPathKind, ds: usize, da: usize, dims: [usize; 3]) -> (ParamStore, TpMambaAdapter) {
        let mut store = ParamStore::new();
        let cfg = AdapterConfig { d_sam: ds, d_adapter: da, dims, local, mamba: MambaBlockConfig::new(da) };
        let a = TpMambaAdapter::new(&mut store, &mut Init::new(12), "ad", cfg).unwrap();
        (store, a)
    }

    #[test]
    fn token_volume_roundtrip() {
        let tape = Tape::new();
        let x = Tensor::from_fn([8, 3], |i| i as f32);
        let v = tokens_to_volume(&tape, tape.constant(x.clone()), [2, 2, 2]).unwrap();
        let vt = tape.value(v);
        assert_eq!(vt.shape(), [3, 2, 2, 2]);
        // token d·4 + h·2 + w, channel c sits at volume [c, d, h, w]
        assert_eq!(vt.at(&[2, 1, 0, 1]), x.at(&[5, 2]));
        assert_eq!(tape.value(volume_to_tokens(&tape, v).unwrap()), x);
        assert!(tokens_to_volume(&tape, tape.constant(Tensor::zeros([7, 3])), [2, 2, 2]).is_err());
    }

    #[test]
    fn zero_at_init_for_both_paths() {
        for local in [LocalPathKind::conv(), LocalPathKind::mfgc()] {
            let (store, a) = adapter(local, 16, 8, [2, 4, 4]);
            let tape = Tape::new();
            let x = tape.constant(random(&[2, 16, 16], 1));
            let y = tape.value(a.forward(&tape, &store, x).unwrap());
            assert_eq!(y.shape(), [2, 16, 16]);
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gradients_for_both_paths() {
        for local in [LocalPathKind::conv(), LocalPathKind::mfgc()] {
            let (mut store, a) = adapter(local, 16, 8, [2, 4, 4]);
            // Nonzero up-projection so gradients reach the rest of the adapter.
            let up = store.id("ad.up.w").unwrap();
            store.get_mut(up).tensor = random(&[8, 16], 2);
            let x = random(&[32, 16], 3);
            let w = random(&[32, 16], 4);
            let f = |t: &Tape, v: Var| Ok(t.sum(t.mul(a.forward(t, &store, v)?, t.constant(w.clone()))?));
            let r = grad_check(f, &x, 1e-2).unwrap();
            assert!(r.max_rel_err < 1e-3, "input: {}", r.max_rel_err);
            let g = |t: &Tape, s: &ParamStore| {
                Ok(t.sum(t.mul(a.forward(t, s, t.constant(x.clone()))?, t.constant(w.clone()))?))
            };
            let r = grad_check_params(&store, g, 1e-2, 3).unwrap();
            assert!(r.max_rel_err < 1e-3, "params: {}", r.max_rel_err);
        }
    }

    #[test]
    fn token_count_mismatch() {
        let (store, a) = adapter(LocalPathKind::mfgc(), 16, 8, [2, 4, 4]);
        let tape = Tape::new();
        assert!(a.forward(&tape, &store, tape.constant(Tensor::zeros([30, 16]))).is_err());
    }
}
