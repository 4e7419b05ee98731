//! The two segmentation architectures, their freezing contract and
//! checkpoints.
//!
//! * [`DualBranchModel`]: frozen ViT generalist and a trainable cross-scan
//!   Mamba specialist, fused by cross-branch attention, decoded per slice.
//! * [`AdapterModel`]: the same frozen ViT with tri-plane Mamba adapters
//!   after every MSA and MLP sub-block (optionally LoRA on q/k/v) and a
//!   volumetric decoder.
//!
//! Both take an image volume `[C × D × H × W]` and return logits
//! `[classes × D × H × W]`; the dual-branch model treats the `D` slices
//! independently.

mod decoder;
mod encoder;
mod freeze;

use std::fmt;
use std::str::FromStr;

use crate::adapters::{tokens_to_volume, AdapterConfig, LocalPathKind, TpMambaAdapter};
use crate::error::{dim_err, param_err, Error, Result};
use crate::fusion::{CbaWeights, Stage};
use crate::mamba::{cross_scan_2d, MambaBlock, MambaBlockConfig};
use crate::ssm::Discretization;
use crate::tensor::{Init, ParamId, ParamStore, Tape, Tensor, Var};

pub use decoder::{decode_2d, decode_3d, Decoder};
pub use encoder::{patchify, VitEncoder, VitEncoderConfig};
pub use freeze::{
    assert_frozen, checkpoint_bytes, hash_tensor, load_into, parse_checkpoint, read_checkpoint, save_checkpoint,
    CheckpointEntry, FreezePolicy, FreezeReport, Hash,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    DualBranch,
    AdapterConv,
    AdapterMfgc,
    /// MFGC adapters plus LoRA on every q/k/v projection.
    AdapterLora,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual_branch" => Ok(ModelKind::DualBranch),
            "adapter_conv" => Ok(ModelKind::AdapterConv),
            "adapter_mfgc" => Ok(ModelKind::AdapterMfgc),
            "adapter_lora" => Ok(ModelKind::AdapterLora),
            _ => Err(Error::Config(format!("unknown model kind `{s}`"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::DualBranch => "dual_branch",
            ModelKind::AdapterConv => "adapter_conv",
            ModelKind::AdapterMfgc => "adapter_mfgc",
            ModelKind::AdapterLora => "adapter_lora",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub classes: usize,
    pub encoder: VitEncoderConfig,
    /// `(D, H, W)` of the input patch.
    pub patch_dims: [usize; 3],
    pub d_adapter: usize,
    pub lora_rank: usize,
    pub d_state: usize,
    pub method: Discretization,
    /// Low-frequency cube kept by MFGC; clipped to the token volume.
    pub mfgc_cube: [usize; 3],
    /// Specialist stem patch size.
    pub stem_patch: usize,
    /// Specialist widths; each step after the first halves the grid.
    pub specialist: Vec<usize>,
    pub cba_heads: usize,
    pub cba_dk: usize,
    /// Optional trainable projection of the generalist features.
    pub sam_proj: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::AdapterMfgc,
            classes: 4,
            encoder: VitEncoderConfig::default(),
            patch_dims: [16, 64, 64],
            d_adapter: 16,
            lora_rank: 4,
            d_state: 8,
            method: Discretization::Bilinear,
            mfgc_cube: [usize::MAX; 3],
            stem_patch: 4,
            specialist: vec![16, 32],
            cba_heads: 4,
            cba_dk: 16,
            sam_proj: None,
        }
    }
}

impl ModelConfig {
    fn grid(&self) -> Result<(usize, usize)> {
        let p = self.encoder.patch;
        let [_, h, w] = self.patch_dims;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(dim_err!("input {h}×{w} is not divisible by patch {p}"));
        }
        Ok((h / p, w / p))
    }

    /// Number of ×2 decoder stages, `log2(patch)`.
    fn up_stages(&self) -> Result<usize> {
        let p = self.encoder.patch;
        if !p.is_power_of_two() {
            return Err(param_err!("patch {p} must be a power of two"));
        }
        Ok(p.trailing_zeros() as usize)
    }

    fn decoder_widths(&self, input: usize) -> Result<Vec<usize>> {
        let mut w = vec![input];
        for _ in 0..self.up_stages()? {
            let last = *w.last().expect("non-empty");
            w.push((last / 2).max(4));
        }
        Ok(w)
    }

    fn mamba(&self, d: usize) -> MambaBlockConfig {
        MambaBlockConfig { d_state: self.d_state, method: self.method, ..MambaBlockConfig::new(d) }
    }

    fn adapter(&self) -> AdapterConfig {
        let [d, _, _] = self.patch_dims;
        let (gh, gw) = self.grid().unwrap_or((0, 0));
        AdapterConfig {
            d_sam: self.encoder.dim,
            d_adapter: self.d_adapter,
            dims: [d, gh, gw],
            local: match self.kind {
                ModelKind::AdapterConv => LocalPathKind::conv(),
                _ => LocalPathKind::Mfgc { cube: self.mfgc_cube },
            },
            mamba: self.mamba(self.d_adapter),
        }
    }

    /// `(trainable, total)` parameter counts implied by the configuration.
    pub fn expected_counts(&self) -> Result<(usize, usize)> {
        let (gh, gw) = self.grid()?;
        let frozen = self.encoder.param_count(gh * gw);
        let e = &self.encoder;
        let trainable = match self.kind {
            ModelKind::DualBranch => {
                let c = &self.specialist;
                let pin = e.in_channels * self.stem_patch * self.stem_patch;
                let mut n = pin * c[0] + c[0];
                for (i, &ci) in c.iter().enumerate() {
                    if i > 0 {
                        n += 4 * c[i - 1] * ci + ci;
                    }
                    n += 2 * ci + self.mamba(ci).param_count();
                }
                n += 2 * c[c.len() - 1];
                let dsam = self.sam_proj.unwrap_or(e.dim);
                if let Some(p) = self.sam_proj {
                    n += e.dim * p + p;
                }
                let hk = self.cba_heads * self.cba_dk;
                n += c[c.len() - 1] * hk + 2 * dsam * hk + hk * dsam;
                n + Decoder::param_count(&self.decoder_widths(dsam)?, self.classes)
            }
            _ => {
                let (ds, da) = (e.dim, self.d_adapter);
                let local = match self.adapter().local {
                    LocalPathKind::MultiScaleConv3d { dilations } => dilations.len() * (27 * da * da + da),
                    LocalPathKind::Mfgc { .. } => 2 * da * (da / 4).max(1),
                };
                let per = ds * da + da + 2 * da * da + da + da * ds + ds + local + 3 * self.mamba(da).param_count();
                let lora = if self.kind == ModelKind::AdapterLora { 3 * 2 * e.dim * self.lora_rank } else { 0 };
                2 * e.depth * per + e.depth * lora + Decoder::param_count(&self.decoder_widths(ds)?, self.classes)
            }
        };
        Ok((trainable, trainable + frozen))
    }
}

/// Frozen generalist, trainable specialist and cross-branch attention.
#[derive(Clone, Debug)]
pub struct DualBranchModel {
    pub generalist: VitEncoder,
    sam_proj: Option<(ParamId, ParamId)>,
    stem: (ParamId, ParamId),
    stages: Vec<SpecialistStage>,
    final_norm: (ParamId, ParamId),
    pub cba: CbaWeights,
    pub decoder: Decoder,
}

#[derive(Clone, Debug)]
struct SpecialistStage {
    merge: Option<(ParamId, ParamId)>,
    norm: (ParamId, ParamId),
    block: MambaBlock,
}

/// Frozen ViT with adapters after every sub-block.
#[derive(Clone, Debug)]
pub struct AdapterModel {
    pub encoder: VitEncoder,
    pub adapters: Vec<TpMambaAdapter>,
    pub decoder: Decoder,
}

#[derive(Clone, Debug)]
pub enum Net {
    Dual(DualBranchModel),
    Adapter(AdapterModel),
}

/// A built model: configuration, parameters, freeze snapshot and network.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub policy: FreezePolicy,
    pub net: Net,
}

fn norm_params(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.g"), Tensor::full([d], 1.0), false),
        store.add(format!("{name}.b"), Tensor::zeros([d]), false),
    )
}

fn linear_params(store: &mut ParamStore, init: &mut Init, name: &str, i: usize, o: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.w"), init.fan_in([i, o], i), false),
        store.add(format!("{name}.b"), init.fan_in([o], i), false),
    )
}

impl Model {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let (gh, gw) = cfg.grid()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let mut encoder = VitEncoder::new(&mut store, &mut init, "generalist", cfg.encoder, (gh, gw), true);
        let net = match cfg.kind {
            ModelKind::DualBranch => {
                let c = &cfg.specialist;
                if c.is_empty() || cfg.stem_patch << (c.len() - 1) != cfg.encoder.patch {
                    return Err(param_err!(
                        "specialist stem {} with {} stages does not reach the generalist grid (patch {})",
                        cfg.stem_patch,
                        c.len(),
                        cfg.encoder.patch
                    ));
                }
                let dsam = cfg.sam_proj.unwrap_or(cfg.encoder.dim);
                let sam_proj =
                    cfg.sam_proj.map(|p| linear_params(&mut store, &mut init, "sam_proj", cfg.encoder.dim, p));
                let pin = cfg.encoder.in_channels * cfg.stem_patch * cfg.stem_patch;
                let stem = linear_params(&mut store, &mut init, "specialist.stem", pin, c[0]);
                let mut stages = Vec::with_capacity(c.len());
                for (i, &ci) in c.iter().enumerate() {
                    let merge = (i > 0).then(|| {
                        linear_params(&mut store, &mut init, &format!("specialist.merge{i}"), 4 * c[i - 1], ci)
                    });
                    let norm = norm_params(&mut store, &format!("specialist.norm{i}"), ci);
                    let block =
                        MambaBlock::new(&mut store, &mut init, &format!("specialist.mamba{i}"), cfg.mamba(ci), false)?;
                    stages.push(SpecialistStage { merge, norm, block });
                }
                let final_norm = norm_params(&mut store, "specialist.final_norm", c[c.len() - 1]);
                let cba =
                    CbaWeights::new(&mut store, &mut init, "cba", c[c.len() - 1], dsam, cfg.cba_heads, cfg.cba_dk)?;
                let decoder = Decoder::new(&mut store, &mut init, "decoder", &cfg.decoder_widths(dsam)?, cfg.classes)?;
                Net::Dual(DualBranchModel { generalist: encoder, sam_proj, stem, stages, final_norm, cba, decoder })
            }
            _ => {
                if cfg.kind == ModelKind::AdapterLora {
                    for (i, b) in encoder.blocks.iter_mut().enumerate() {
                        b.add_lora(&mut store, &mut init, &format!("generalist.block{i}"), cfg.lora_rank)?;
                    }
                }
                let acfg = cfg.adapter();
                let mut adapters = Vec::with_capacity(2 * cfg.encoder.depth);
                for i in 0..cfg.encoder.depth {
                    for stage in ["msa", "mlp"] {
                        adapters.push(TpMambaAdapter::new(
                            &mut store,
                            &mut init,
                            &format!("adapter{i}.{stage}"),
                            acfg.clone(),
                        )?);
                    }
                }
                let decoder =
                    Decoder::new(&mut store, &mut init, "decoder", &cfg.decoder_widths(cfg.encoder.dim)?, cfg.classes)?;
                Net::Adapter(AdapterModel { encoder, adapters, decoder })
            }
        };
        let policy = FreezePolicy::snapshot(&store);
        Ok(Model { cfg: cfg.clone(), store, policy, net })
    }

    fn check_input(&self, image: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let (c, d, h, w) = image.dims4()?;
        let [pd, ph, pw] = self.cfg.patch_dims;
        let want_d = matches!(self.net, Net::Dual(_)) || d == pd;
        if c != self.cfg.encoder.in_channels || !want_d || (h, w) != (ph, pw) {
            return Err(dim_err!(
                "model expects {}×{pd}×{ph}×{pw} input, got {:?}",
                self.cfg.encoder.in_channels,
                image.shape()
            ));
        }
        Ok((c, d, h, w))
    }

    /// `[C × D × H × W]` → `[D × C × H × W]`, one 2-D image per slice.
    fn slices(image: &Tensor) -> Result<Tensor> {
        let (c, d, h, w) = image.dims4()?;
        let data = crate::tensor::kernels::permute(image.data(), image.shape(), &[1, 0, 2, 3]);
        Tensor::new([d, c, h, w], data)
    }

    /// Logits `[classes × D × H × W]`.
    pub fn forward(&self, tape: &Tape, image: &Tensor) -> Result<Var> {
        let (_, d, _, _) = self.check_input(image)?;
        let (gh, gw) = self.cfg.grid()?;
        let slices = Self::slices(image)?;
        let store = &self.store;
        match &self.net {
            Net::Dual(m) => {
                let f_sam = *m.generalist.forward(tape, store, &slices)?.last().expect("depth >= 1");
                let f_sam = match m.sam_proj {
                    Some((w, b)) => tape.linear_bias(f_sam, tape.param(store, w), tape.param(store, b))?,
                    None => f_sam,
                };
                let f_mamba = m.specialist(tape, store, &self.cfg, &slices)?;
                let (f_cba, _) = m.cba.forward(tape, store, f_mamba, f_sam)?;
                let fused = crate::fusion::residual_fuse(tape, f_sam, f_cba)?;
                let width = tape.shape(fused)[2];
                let tokens = tape.reshape(fused, [d * gh * gw, width])?;
                m.decoder.forward(tape, store, tokens_to_volume(tape, tokens, [d, gh, gw])?)
            }
            Net::Adapter(m) => {
                let outs = m.encoder.forward_hooked(tape, store, &slices, &mut |i, stage, x| {
                    let a = &m.adapters[2 * i + usize::from(stage == Stage::AfterMlp)];
                    tape.add(x, a.forward(tape, store, x)?)
                })?;
                let n = outs.len();
                let feats = if n >= 2 { tape.add(outs[n - 2], outs[n - 1])? } else { outs[n - 1] };
                let tokens = tape.reshape(feats, [d * gh * gw, self.cfg.encoder.dim])?;
                m.decoder.forward(tape, store, tokens_to_volume(tape, tokens, [d, gh, gw])?)
            }
        }
    }

    /// Output of the last encoder block including any adapters and LoRA.
    pub fn encoder_output(&self, tape: &Tape, image: &Tensor) -> Result<Var> {
        self.check_input(image)?;
        let slices = Self::slices(image)?;
        let store = &self.store;
        let outs = match &self.net {
            Net::Dual(m) => m.generalist.forward(tape, store, &slices)?,
            Net::Adapter(m) => m.encoder.forward_hooked(tape, store, &slices, &mut |i, stage, x| {
                let a = &m.adapters[2 * i + usize::from(stage == Stage::AfterMlp)];
                tape.add(x, a.forward(tape, store, x)?)
            })?,
        };
        Ok(*outs.last().expect("depth >= 1"))
    }

    /// Output of the last block of the bare frozen encoder (no adapters, no
    /// LoRA).
    pub fn frozen_stub_output(&self, tape: &Tape, image: &Tensor) -> Result<Var> {
        self.check_input(image)?;
        let mut enc = match &self.net {
            Net::Dual(m) => m.generalist.clone(),
            Net::Adapter(m) => m.encoder.clone(),
        };
        enc.blocks.iter_mut().for_each(|b| b.lora = None);
        let outs = enc.forward(tape, &self.store, &Self::slices(image)?)?;
        Ok(*outs.last().expect("depth >= 1"))
    }

    pub fn freeze_report(&self) -> FreezeReport {
        assert_frozen(&self.policy, &self.store)
    }
}

impl DualBranchModel {
    /// Specialist features `[S × T × c_last]` on the generalist's grid.
    fn specialist(&self, tape: &Tape, store: &ParamStore, cfg: &ModelConfig, slices: &Tensor) -> Result<Var> {
        let p = |id| tape.param(store, id);
        let (s, _, h, w) = slices.dims4()?;
        let sp = cfg.stem_patch;
        let (mut gh, mut gw) = (h / sp, w / sp);
        let x = tape.constant(patchify(slices, sp)?);
        let mut x = tape.linear_bias(x, p(self.stem.0), p(self.stem.1))?;
        for st in &self.stages {
            if let Some((mw, mb)) = st.merge {
                let c = tape.shape(x)[2];
                if gh % 2 != 0 || gw % 2 != 0 {
                    return Err(dim_err!("cannot merge an odd {gh}×{gw} grid"));
                }
                let g = tape.reshape(x, [s, gh / 2, 2, gw / 2, 2, c])?;
                let g = tape.permute(g, &[0, 1, 3, 2, 4, 5])?;
                (gh, gw) = (gh / 2, gw / 2);
                let g = tape.reshape(g, [s, gh * gw, 4 * c])?;
                x = tape.linear_bias(g, p(mw), p(mb))?;
            }
            let n = tape.layer_norm(x, p(st.norm.0), p(st.norm.1), 1e-5)?;
            x = tape.add(x, cross_scan_2d(tape, store, &st.block, n, gh, gw)?)?;
        }
        tape.layer_norm(x, p(self.final_norm.0), p(self.final_norm.1), 1e-5)
    }
}

/// Free-function form of [`Model::forward`] for the dual-branch model; the
/// input is a stack of slices `[C × S × H × W]`.
pub fn dual_branch_forward(tape: &Tape, m: &Model, slices: &Tensor) -> Result<Var> {
    match m.net {
        Net::Dual(_) => m.forward(tape, slices),
        Net::Adapter(_) => Err(param_err!("dual_branch_forward on a {} model", m.cfg.kind)),
    }
}

/// Free-function form of [`Model::forward`] for adapter models.
pub fn adapter_model_forward(tape: &Tape, m: &Model, patch: &Tensor) -> Result<Var> {
    match m.net {
        Net::Adapter(_) => m.forward(tape, patch),
        Net::Dual(_) => Err(param_err!("adapter_model_forward on a dual-branch model")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            encoder: VitEncoderConfig { dim: 16, depth: 2, heads: 2, patch: 4, ..Default::default() },
            patch_dims: [2, 8, 8],
            d_adapter: 8,
            lora_rank: 2,
            stem_patch: 2,
            specialist: vec![8, 8],
            cba_heads: 2,
            cba_dk: 4,
            ..Default::default()
        }
    }

    fn image(dims: [usize; 3]) -> Tensor {
        Tensor::from_fn([1, dims[0], dims[1], dims[2]], |i| ((i * 13 % 7) as f32) / 7.0)
    }

    #[test]
    fn shapes_and_counts() {
        for kind in [ModelKind::DualBranch, ModelKind::AdapterConv, ModelKind::AdapterMfgc, ModelKind::AdapterLora] {
            let cfg = small(kind);
            let m = Model::build(&cfg, 1).unwrap();
            let tape = Tape::new();
            let y = m.forward(&tape, &image(cfg.patch_dims)).unwrap();
            assert_eq!(tape.shape(y), [4, 2, 8, 8], "{kind}");
            let (tr, tot) = cfg.expected_counts().unwrap();
            assert_eq!((m.store.trainable_count(), m.store.total_count()), (tr, tot), "{kind}");
            assert!(m.freeze_report().all_pass());
        }
    }

    #[test]
    fn desk_shapes() {
        let cfg = ModelConfig::default();
        let m = Model::build(&cfg, 1).unwrap();
        let tape = Tape::new();
        let y = m.forward(&tape, &image(cfg.patch_dims)).unwrap();
        assert_eq!(tape.shape(y), [4, 16, 64, 64]);
        let dual = Model::build(&ModelConfig { kind: ModelKind::DualBranch, ..cfg }, 1).unwrap();
        let tape = Tape::new();
        let y = dual_branch_forward(&tape, &dual, &image([1, 64, 64])).unwrap();
        assert_eq!(tape.shape(y), [4, 1, 64, 64]);
    }

    #[test]
    fn init_identity_is_bitwise() {
        for kind in [ModelKind::AdapterMfgc, ModelKind::AdapterConv, ModelKind::AdapterLora] {
            let cfg = small(kind);
            let m = Model::build(&cfg, 2).unwrap();
            let tape = Tape::new();
            let x = image(cfg.patch_dims);
            let a = tape.value(m.encoder_output(&tape, &x).unwrap());
            let b = tape.value(m.frozen_stub_output(&tape, &x).unwrap());
            assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small(ModelKind::AdapterMfgc);
        let m = Model::build(&cfg, 3).unwrap();
        let x = image(cfg.patch_dims);
        let run = || {
            let tape = Tape::new();
            tape.value(m.forward(&tape, &x).unwrap())
        };
        assert_eq!(run(), run());
        assert_eq!(checkpoint_bytes(&Model::build(&cfg, 3).unwrap().store), checkpoint_bytes(&m.store));
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = small(ModelKind::AdapterMfgc);
        let m = Model::build(&cfg, 3).unwrap();
        let tape = Tape::new();
        assert!(m.forward(&tape, &image([2, 8, 6])).is_err());
        assert!(m.forward(&tape, &image([3, 8, 8])).is_err());
        assert!(Model::build(&ModelConfig { patch_dims: [2, 10, 8], ..cfg.clone() }, 0).is_err());
        let bad = ModelConfig { specialist: vec![8], ..small(ModelKind::DualBranch) };
        assert!(Model::build(&bad, 0).is_err());
    }
}
