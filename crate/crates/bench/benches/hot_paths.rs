use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fiss_core::federation::aggregate;
use fiss_core::losses::{total_objective, BatchItem, ObjectiveSpec, OldOutputs, PseudoLabeling};
use fiss_core::model::{ModelParams, ModelShape, TraceGrad};
use fiss_core::pseudo_label::compute_thresholds;
use fiss_core::synth_data::{generate_dataset, GridSize, Sample};

fn setup() -> (ModelParams, ModelParams, Vec<Sample>) {
    let grid = GridSize::new(16, 16);
    let old = ModelParams::init(ModelShape::new(3, [8, 16], 4), 1).unwrap();
    let current = old.extend_head(1, 0.01, 2).unwrap();
    let samples = generate_dataset(5, grid, 4, 3).unwrap();
    (old, current, samples)
}

fn model(c: &mut Criterion) {
    let (_, current, samples) = setup();
    let image = &samples[0].image;
    c.bench_function("forward 16x16", |b| {
        b.iter(|| current.forward(black_box(image)).unwrap())
    });
    let trace = current.forward(image).unwrap();
    let mut grad = TraceGrad::zeros_like(&trace);
    grad.logits.iter_mut().for_each(|v| *v = 0.01);
    c.bench_function("backward 16x16", |b| {
        b.iter(|| current.backward(black_box(image), &trace, &grad).unwrap())
    });
}

fn objective(c: &mut Criterion) {
    let (old, current, samples) = setup();
    let batch_samples = &samples[..4];
    let olds: Vec<OldOutputs> = batch_samples
        .iter()
        .map(|s| OldOutputs::from_trace(&old.forward(&s.image).unwrap()))
        .collect();
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let table = compute_thresholds(&images, &old, &current, 0.5).unwrap();
    let spec = ObjectiveSpec {
        lambda1: 0.5,
        lambda2: 0.0005,
        balanced: true,
        labeling: PseudoLabeling::Adaptive(table),
        local_old: 4,
        local_new: 1,
    };
    let batch: Vec<BatchItem> = batch_samples
        .iter()
        .zip(&olds)
        .map(|(s, o)| BatchItem {
            image: &s.image,
            train_label: &s.train_label,
            old: Some(o),
        })
        .collect();
    c.bench_function("total_objective batch 4", |b| {
        b.iter(|| total_objective(&current, black_box(&batch), 2, &spec).unwrap())
    });
    c.bench_function("compute_thresholds 20 images", |b| {
        b.iter(|| compute_thresholds(black_box(&images), &old, &current, 0.5).unwrap())
    });
}

fn aggregation(c: &mut Criterion) {
    let (_, current, _) = setup();
    let base = current.flatten();
    let models: Vec<Vec<f64>> = (0..4)
        .map(|k| base.iter().map(|v| v + k as f64 * 1e-3).collect())
        .collect();
    let weights = [12.0, 7.0, 9.0, 3.0];
    c.bench_function("aggregate 4 clients", |b| {
        b.iter(|| aggregate(black_box(&models), &weights).unwrap())
    });
}

criterion_group!(benches, model, objective, aggregation);
criterion_main!(benches);
