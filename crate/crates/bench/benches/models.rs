use criterion::{criterion_group, criterion_main, Criterion};
use mambasam_core::data::{phantom_dataset, PhantomSpec};
use mambasam_core::models::{Model, ModelConfig, ModelKind};
use mambasam_core::traineval::{predict_logits, train_step, AdamW, TrainConfig};

const KINDS: [ModelKind; 3] = [ModelKind::AdapterMfgc, ModelKind::AdapterConv, ModelKind::DualBranch];

fn step(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    let cfg = ModelConfig::default();
    let data = phantom_dataset(&PhantomSpec::for_dims(cfg.patch_dims), 2, 7).unwrap();
    for kind in KINDS {
        let mut model = Model::build(&ModelConfig { kind, ..cfg.clone() }, 7).unwrap();
        let tc = TrainConfig { warmup_steps: 0, total_steps: usize::MAX, ..TrainConfig::default() };
        let mut opt = AdamW::new(&model.store, tc.weight_decay);
        let mut s = 0;
        g.bench_function(kind.to_string(), |b| {
            b.iter(|| {
                train_step(&mut model, &[&data[s % 2]], &tc, &mut opt, s).unwrap();
                s += 1;
            })
        });
    }
    g.finish();
}

fn inference(c: &mut Criterion) {
    let mut g = c.benchmark_group("predict");
    g.sample_size(10);
    let cfg = ModelConfig::default();
    let data = phantom_dataset(&PhantomSpec::for_dims(cfg.patch_dims), 1, 8).unwrap();
    for kind in KINDS {
        let model = Model::build(&ModelConfig { kind, ..cfg.clone() }, 8).unwrap();
        g.bench_function(kind.to_string(), |b| b.iter(|| predict_logits(&model, &data[0].image).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, step, inference);
criterion_main!(benches);
