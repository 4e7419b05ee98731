use crate::error::{param_err, Error, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f32,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub clip_norm: f32,
    pub batch_size: usize,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 2e-4,
            warmup_steps: 10,
            total_steps: 1000,
            clip_norm: 1.0,
            batch_size: 1,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(param_err!("warmup {} must be below total steps {}", self.warmup_steps, self.total_steps));
        }
        if !(self.clip_norm > 0.0) || !(self.base_lr >= 0.0) || self.batch_size == 0 || self.weight_decay < 0.0 {
            return Err(param_err!("clip norm, learning rate, batch size or weight decay out of range"));
        }
        Ok(())
    }
}

/// Linear warm-up from 0 to `base_lr`, then cosine decay to 0 at
/// `total_steps`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> Result<f32> {
    cfg.validate()?;
    if step > cfg.total_steps {
        return Err(param_err!("step {step} past total {}", cfg.total_steps));
    }
    let base = f64::from(cfg.base_lr);
    let lr = if step < cfg.warmup_steps {
        base * step as f64 / cfg.warmup_steps as f64
    } else {
        let t = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
        0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
    };
    Ok(lr as f32)
}

/// Scales all trainable gradients so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f32) -> Result<f32> {
    let norm = store.grad_norm();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut().filter(|p| !p.frozen) {
            if let Some(g) = p.tensor.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    Ok(norm)
}

/// AdamW with decoupled weight decay. Moments are kept per parameter in
/// store order; frozen parameters are never touched.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f32) -> Self {
        let zeros =
            || store.iter().map(|(_, p)| if p.frozen { Vec::new() } else { vec![0.0; p.tensor.numel()] }).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    pub fn update(&mut self, store: &mut ParamStore, lr: f32) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(param_err!("optimizer built for {} parameters, store has {}", self.m.len(), store.len()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (i, p) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let Some(g) = p.tensor.grad().map(<[f32]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.tensor.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let step = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *w -= lr * (step + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}
