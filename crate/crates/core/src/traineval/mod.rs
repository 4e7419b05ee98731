//! Combined Dice/cross-entropy loss, overlap and surface-distance metrics,
//! AdamW with a warm-up/cosine schedule, the training loop and the
//! scan-versus-attention scaling benchmark.

mod bench;
mod loss;
mod metrics;
mod optim;
mod train;

pub use bench::{bench_scaling, dense_attention, BenchReport, BenchRow};
pub use loss::{dice_ce_parts, loss_dice_ce, LossParts, DICE_EPS};
pub use metrics::{
    evaluate_labels, metric_hd95, metric_overlap, percentile_f64, squared_edt, surface, ClassMetrics, MetricReport,
    Overlap,
};
pub use optim::{clip_grad_norm, lr_at, AdamW, TrainConfig};
pub use train::{
    argmax_classes, evaluate, fit, predict_labels, predict_logits, train_step, EpochStats, FitOptions, StepStats,
};
