use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::metrics::{evaluate_labels, MetricReport};
use super::optim::{clip_grad_norm, lr_at, AdamW, TrainConfig};
use crate::data::LabeledVolume;
use crate::error::{dim_err, param_err, Error, Result};
use crate::models::Model;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Mean loss over the batch.
    pub loss: f32,
    /// Global gradient norm before clipping.
    pub grad_norm: f32,
    pub lr: f32,
}

/// One optimisation step: forward and loss per sample, averaged gradients,
/// global-norm clipping and an AdamW update of the trainable parameters.
/// On a non-finite loss nothing is updated.
pub fn train_step(
    model: &mut Model,
    batch: &[&LabeledVolume],
    cfg: &TrainConfig,
    opt: &mut AdamW,
    step: usize,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(param_err!("empty batch"));
    }
    let lr = lr_at(cfg, step)?;
    model.store.zero_grad();
    let mut total = 0.0f64;
    for sample in batch {
        let labels = sample.labels()?;
        let tape = Tape::new();
        let logits = model.forward(&tape, &sample.image)?;
        let loss = tape.loss_dice_ce(logits, labels)?;
        let value = tape.scalar_value(loss);
        if !value.is_finite() {
            model.store.zero_grad();
            return Err(Error::Numeric(format!("loss is {value} at step {step}")));
        }
        total += f64::from(value);
        let grads = tape.backward(loss)?;
        tape.accumulate_param_grads(&grads, &mut model.store)?;
    }
    if batch.len() > 1 {
        let s = 1.0 / batch.len() as f32;
        for p in model.store.iter_mut() {
            if let Some(g) = p.tensor.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    let grad_norm = clip_grad_norm(&mut model.store, cfg.clip_norm)?;
    opt.update(&mut model.store, lr)?;
    model.store.zero_grad();
    Ok(StepStats { loss: (total / batch.len() as f64) as f32, grad_norm, lr })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f32,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub epochs: usize,
    /// Random flips along `H` and `W`.
    pub augment: bool,
}

/// Trains for `opts.epochs` passes over `data` in a seeded shuffled order.
/// The schedule length is set from the epoch count; `cfg.total_steps` is
/// ignored and the warm-up is capped below it. `on_epoch` sees the model
/// after every epoch; an error from it stops training.
pub fn fit(
    model: &mut Model,
    data: &[LabeledVolume],
    cfg: &TrainConfig,
    opts: &FitOptions,
    mut on_epoch: impl FnMut(&EpochStats, &Model) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    if data.is_empty() || opts.epochs == 0 {
        return Err(param_err!("fit needs data and at least one epoch"));
    }
    let per_epoch = data.len().div_ceil(cfg.batch_size.max(1));
    let total = opts.epochs * per_epoch;
    let sched = TrainConfig { total_steps: total, warmup_steps: cfg.warmup_steps.min(total - 1), ..cfg.clone() };
    sched.validate()?;
    let mut opt = AdamW::new(&model.store, sched.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0f64;
        for chunk in order.chunks(sched.batch_size) {
            let augmented: Vec<LabeledVolume>;
            let batch: Vec<&LabeledVolume> = if opts.augment {
                augmented = chunk.iter().map(|&i| augment(&data[i], &mut rng)).collect::<Result<_>>()?;
                augmented.iter().collect()
            } else {
                chunk.iter().map(|&i| &data[i]).collect()
            };
            sum += f64::from(train_step(model, &batch, &sched, &mut opt, step)?.loss);
            step += 1;
        }
        let stats = EpochStats { epoch, mean_loss: (sum / per_epoch as f64) as f32, steps: step };
        on_epoch(&stats, model)?;
        history.push(stats);
    }
    Ok(history)
}

fn augment(v: &LabeledVolume, rng: &mut ChaCha8Rng) -> Result<LabeledVolume> {
    let mut out = v.clone();
    for axis in [1, 2] {
        if rng.random::<bool>() {
            out = out.flip(axis)?;
        }
    }
    Ok(out)
}

/// Window starts covering `0..len` with windows of `size` and the given
/// stride; the last window is flush with the end.
fn window_starts(len: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (0..=len - size).step_by(stride.max(1)).collect();
    if *s.last().expect("len >= size") != len - size {
        s.push(len - size);
    }
    s
}

/// Class logits `[K × D × H × W]` for a whole volume. Volumes larger than the
/// model input are covered by half-overlapping windows whose logits are
/// averaged.
pub fn predict_logits(model: &Model, image: &Tensor) -> Result<Tensor> {
    let (c, d, h, w) = image.dims4()?;
    let dims = [d, h, w];
    let patch = model.cfg.patch_dims;
    if (0..3).any(|i| dims[i] < patch[i]) {
        return Err(dim_err!("volume {dims:?} is smaller than the model input {patch:?}"));
    }
    let k = model.cfg.classes;
    if dims == patch {
        let tape = Tape::inference();
        return Ok(tape.value(model.forward(&tape, image)?));
    }
    let vol = LabeledVolume { image: image.clone(), labels: None, spacing: [1.0; 3] };
    let n = d * h * w;
    let mut acc = vec![0.0f32; k * n];
    let mut count = vec![0u32; n];
    let starts: Vec<Vec<usize>> = (0..3).map(|i| window_starts(dims[i], patch[i], patch[i].div_ceil(2))).collect();
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let crop = if c == 1 {
                    vol.crop([z0, y0, x0], patch)?.image
                } else {
                    return Err(dim_err!("tiled prediction expects one channel, got {c}"));
                };
                let tape = Tape::inference();
                let out = tape.value(model.forward(&tape, &crop)?);
                let pn = patch.iter().product::<usize>();
                for z in 0..patch[0] {
                    for y in 0..patch[1] {
                        for x in 0..patch[2] {
                            let src = (z * patch[1] + y) * patch[2] + x;
                            let dst = ((z0 + z) * h + y0 + y) * w + x0 + x;
                            count[dst] += 1;
                            for cl in 0..k {
                                acc[cl * n + dst] += out.data()[cl * pn + src];
                            }
                        }
                    }
                }
            }
        }
    }
    for cl in 0..k {
        for (v, &cnt) in count.iter().enumerate() {
            acc[cl * n + v] /= cnt as f32;
        }
    }
    Tensor::new([k, d, h, w], acc)
}

/// Per-voxel argmax over the class axis of `[K × …]` logits.
pub fn argmax_classes(logits: &Tensor) -> Vec<u8> {
    let k = logits.shape()[0];
    let n = logits.numel() / k;
    let z = logits.data();
    (0..n)
        .map(|v| {
            let mut best = 0;
            for c in 1..k {
                if z[c * n + v] > z[best * n + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

pub fn predict_labels(model: &Model, image: &Tensor) -> Result<Vec<u8>> {
    Ok(argmax_classes(&predict_logits(model, image)?))
}

/// Class-wise metrics averaged over labelled volumes.
pub fn evaluate(model: &Model, vols: &[LabeledVolume]) -> Result<MetricReport> {
    let reports = vols
        .iter()
        .map(|v| {
            let pred = predict_labels(model, &v.image)?;
            evaluate_labels(&pred, v.labels()?, v.dims(), v.spacing, model.cfg.classes)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::average(&reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cover_the_axis() {
        assert_eq!(window_starts(64, 64, 32), vec![0]);
        assert_eq!(window_starts(72, 64, 32), vec![0, 8]);
        assert_eq!(window_starts(100, 64, 32), vec![0, 32, 36]);
    }

    #[test]
    fn argmax_picks_largest_class() {
        let z = Tensor::new([3, 2], vec![0.0, 5.0, 1.0, 2.0, -1.0, 9.0]).unwrap();
        assert_eq!(argmax_classes(&z), vec![1, 2]);
    }
}
