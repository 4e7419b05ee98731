use crate::error::{dim_err, param_err, Result};
use crate::tensor::{Conv3dSpec, Init, ParamId, ParamStore, Tape, Tensor, Var};

/// Stacked transposed convolutions, each doubling the in-plane extents
/// (kernel and stride `(1, 2, 2)`) followed by GELU, then a `1×1×1` conv to
/// class logits. Used for volumes and, with slices on the depth axis, for
/// 2-D maps.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub widths: Vec<usize>,
    pub classes: usize,
    stages: Vec<(ParamId, ParamId)>,
    head: (ParamId, ParamId),
}

impl Decoder {
    /// `widths[0]` is the input width; each further entry adds one stage.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        widths: &[usize],
        classes: usize,
    ) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) || classes == 0 {
            return Err(param_err!("decoder needs positive widths and classes"));
        }
        let stages = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let k = store.add(format!("{prefix}.up{i}.w"), init.fan_in([w[0], w[1], 1, 2, 2], w[0]), false);
                let b = store.add(format!("{prefix}.up{i}.b"), Tensor::zeros([w[1]]), false);
                (k, b)
            })
            .collect();
        let last = *widths.last().expect("non-empty");
        let head = (
            store.add(format!("{prefix}.head.w"), init.fan_in([classes, last, 1, 1, 1], last), false),
            store.add(format!("{prefix}.head.b"), Tensor::zeros([classes]), false),
        );
        Ok(Decoder { widths: widths.to_vec(), classes, stages, head })
    }

    pub fn param_count(widths: &[usize], classes: usize) -> usize {
        let ups: usize = widths.windows(2).map(|w| w[0] * w[1] * 4 + w[1]).sum();
        ups + classes * widths.last().copied().unwrap_or(0) + classes
    }

    /// `features[C×D×h×w]` → `logits[classes × D × h·2ˢ × w·2ˢ]`.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, features: Var) -> Result<Var> {
        let shape = tape.shape(features);
        if shape.len() != 4 || shape[0] != self.widths[0] {
            return Err(dim_err!("decoder expects {}×D×H×W features, got {shape:?}", self.widths[0]));
        }
        let p = |id| tape.param(store, id);
        let mut x = features;
        for &(k, b) in &self.stages {
            x = tape.gelu(tape.conv_transpose3d(x, p(k), Some(p(b)), [1, 2, 2])?);
        }
        tape.conv3d(x, p(self.head.0), Some(p(self.head.1)), Conv3dSpec::default())
    }
}

/// Decodes a batch of 2-D feature maps `[C × B × h × w]` (slices on the
/// depth axis) to `[classes × B × H × W]`.
pub fn decode_2d(tape: &Tape, store: &ParamStore, d: &Decoder, features: Var) -> Result<Var> {
    d.forward(tape, store, features)
}

/// Decodes volumetric features `[C × D × h × w]` to `[classes × D × H × W]`.
pub fn decode_3d(tape: &Tape, store: &ParamStore, d: &Decoder, features: Var) -> Result<Var> {
    d.forward(tape, store, features)
}
