//! Mamba block and the multi-directional sequence orderings used to run it
//! over 2-D maps and 3-D volumes.

mod order;

use rand::Rng;

use crate::error::{dim_err, param_err, Result};
use crate::ssm::Discretization;
use crate::tensor::{Init, ParamId, ParamStore, Tape, Tensor, Var};

pub use order::{cross_scan_2d, Permutation, ScanOrder, TriPlane, PLANES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScanDirection {
    #[default]
    Forward,
    /// Mean of a forward pass and a pass over the reversed sequence.
    Bidirectional,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MambaBlockConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
    pub scan: ScanDirection,
    pub method: Discretization,
}

impl MambaBlockConfig {
    pub fn new(d_model: usize) -> Self {
        MambaBlockConfig {
            d_model,
            d_state: 8,
            expand: 2,
            d_conv: 4,
            scan: ScanDirection::Forward,
            method: Discretization::Bilinear,
        }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// Rank of the Δ projection.
    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16).max(1)
    }

    fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_state == 0 || self.expand == 0 || self.d_conv == 0 {
            return Err(param_err!("mamba config entries must be positive: {self:?}"));
        }
        Ok(())
    }

    /// Number of scalars in one block.
    pub fn param_count(&self) -> usize {
        let (d, e, n, r) = (self.d_model, self.inner(), self.d_state, self.dt_rank());
        2 * d * e + e * self.d_conv + e + e * r + r * e + e + 2 * e * n + e * n + e + e * d
    }
}

/// Parameter handles of one Mamba block.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub cfg: MambaBlockConfig,
    in_x: ParamId,
    in_z: ParamId,
    conv_w: ParamId,
    conv_b: ParamId,
    dt_down: ParamId,
    dt_up: ParamId,
    dt_bias: ParamId,
    w_b: ParamId,
    w_c: ParamId,
    a_log: ParamId,
    d_skip: ParamId,
    out: ParamId,
}

/// `softplus⁻¹(y) = ln(eʸ − 1)`
fn softplus_inv(y: f32) -> f32 {
    y + (-(-y).exp_m1()).ln()
}

impl MambaBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        cfg: MambaBlockConfig,
        frozen: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, e, n, r, k) = (cfg.d_model, cfg.inner(), cfg.d_state, cfg.dt_rank(), cfg.d_conv);
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t, frozen);
        let in_x = add("in_x", init.fan_in([d, e], d));
        let in_z = add("in_z", init.fan_in([d, e], d));
        let conv_w = add("conv_w", init.fan_in([e, k], k));
        let conv_b = add("conv_b", Tensor::zeros([e]));
        let dt_down = add("dt_down", init.fan_in([e, r], e));
        let dt_up = add("dt_up", init.fan_in([r, e], r));
        // Δ at zero input is log-uniform in [0.01, 0.1].
        let bias: Vec<f32> = (0..e)
            .map(|_| {
                let u: f32 = init.rng().random();
                softplus_inv((0.01f32.ln() + u * (0.1f32.ln() - 0.01f32.ln())).exp())
            })
            .collect();
        let dt_bias = add("dt_bias", Tensor::new([e], bias)?);
        let w_b = add("w_b", init.fan_in([e, n], e));
        let w_c = add("w_c", init.fan_in([e, n], e));
        let a_log = add("a_log", Tensor::from_fn([e, n], |i| ((i % n) as f32 + 1.0).ln()));
        let d_skip = add("d_skip", Tensor::full([e], 1.0));
        let out = add("out", init.fan_in([e, d], e));
        Ok(MambaBlock { cfg, in_x, in_z, conv_w, conv_b, dt_down, dt_up, dt_bias, w_b, w_c, a_log, d_skip, out })
    }

    /// Sets the output projection to zero, which makes the block the zero map.
    pub fn zero_out_proj(&self, store: &mut ParamStore) {
        store.get_mut(self.out).tensor.data_mut().fill(0.0);
    }

    /// Handles of every parameter in the block.
    pub fn params(&self) -> [ParamId; 12] {
        [
            self.in_x,
            self.in_z,
            self.conv_w,
            self.conv_b,
            self.dt_down,
            self.dt_up,
            self.dt_bias,
            self.w_b,
            self.w_c,
            self.a_log,
            self.d_skip,
            self.out,
        ]
    }

    /// `x`: `B×L×d_model` → `B×L×d_model`, without residual.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        let &[bs, l, d] = &shape[..] else {
            return Err(dim_err!("mamba block expects B×L×d, got {shape:?}"));
        };
        if d != self.cfg.d_model {
            return Err(dim_err!("mamba block built for d_model {}, got {d}", self.cfg.d_model));
        }
        match self.cfg.scan {
            ScanDirection::Forward => self.forward_once(tape, store, x),
            ScanDirection::Bidirectional => {
                let rev: Vec<usize> = (0..bs).flat_map(|b| (0..l).rev().map(move |t| b * l + t)).collect();
                let rev = std::rc::Rc::new(rev);
                let flat = tape.reshape(x, [bs * l, d])?;
                let xr = tape.reshape(tape.gather_rows(flat, rev.clone())?, [bs, l, d])?;
                let yf = self.forward_once(tape, store, x)?;
                let yr = self.forward_once(tape, store, xr)?;
                let yr = tape.gather_rows(tape.reshape(yr, [bs * l, d])?, rev)?;
                let sum = tape.add(tape.reshape(yf, [bs * l, d])?, yr)?;
                tape.reshape(tape.scale(sum, 0.5), [bs, l, d])
            }
        }
    }

    fn forward_once(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let p = |id| tape.param(store, id);
        let xv = tape.linear(x, p(self.in_x))?;
        let z = tape.linear(x, p(self.in_z))?;
        let xc = tape.silu(tape.causal_conv1d(xv, p(self.conv_w), p(self.conv_b))?);
        let dt = tape.linear(tape.linear(xc, p(self.dt_down))?, p(self.dt_up))?;
        let dt = tape.softplus(tape.add_broadcast(dt, p(self.dt_bias), 2)?);
        let bm = tape.linear(xc, p(self.w_b))?;
        let cm = tape.linear(xc, p(self.w_c))?;
        let a = tape.neg(tape.exp(p(self.a_log)));
        let y = tape.selective_scan(xc, dt, a, bm, cm, p(self.d_skip), self.cfg.method)?;
        let y = tape.mul(y, tape.silu(z))?;
        tape.linear(y, p(self.out))
    }
}

/// Free-function form of [`MambaBlock::forward`] for a single sequence
/// `L×d_model`.
pub fn mamba_block_forward(block: &MambaBlock, tape: &Tape, store: &ParamStore, tokens: Var) -> Result<Var> {
    let shape = tape.shape(tokens);
    let &[l, d] = &shape[..] else {
        return Err(dim_err!("expected L×d tokens, got {shape:?}"));
    };
    let y = block.forward(tape, store, tape.reshape(tokens, [1, l, d])?)?;
    tape.reshape(y, [l, d])
}
