use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use hoil_core::gridpool::assign_cells;
use hoil_core::losses::{supcon, PairMask};
use hoil_core::model::Mode;
use hoil_core::pipeline::{simulate_record, RunConfig, Trainer};
use hoil_core::serialize::{serialize_points, CurveKind};
use hoil_core::sim::{make_test_scene, simulate_frame, ContactConfig, SceneParams, SensorModel};
use hoil_core::tensor::{Graph, Tensor};
use hoil_core::temporal::{savitzky_golay, Trajectory};
use hoil_core::types::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random_points(n: usize, seed: u64) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect()
}

fn bench_serialize(c: &mut Criterion) {
    let pts = random_points(10_000, 1);
    c.bench_function("serialize 10k points", |b| {
        b.iter(|| serialize_points(black_box(&pts), CurveKind::default()).unwrap())
    });
    c.bench_function("grid cells 10k points", |b| b.iter(|| assign_cells(black_box(&pts), 0.1).unwrap()));
}

fn bench_supcon(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = Tensor::from_fn(128, 64, |_, _| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..128).map(|i| i % 26).collect();
    let mask = PairMask::from_labels(&labels);
    c.bench_function("supcon 128x64 forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::detached();
            let v = g.input(z.clone());
            let v = g.normalize_rows(v).unwrap();
            let l = supcon(&mut g, v, &mask, 0.07).unwrap();
            g.backward(l).unwrap()
        })
    });
}

fn bench_raycast(c: &mut Criterion) {
    let scene = make_test_scene(&SceneParams::default()).unwrap();
    let sensor = SensorModel::default();
    let mut group = c.benchmark_group("sim");
    group.sample_size(10);
    group.bench_function("labelled scan", |b| {
        b.iter(|| simulate_frame(&scene, &sensor, &ContactConfig::default(), 3).unwrap())
    });
    group.bench_function("cropped frame record", |b| {
        b.iter(|| simulate_record(&RunConfig::default(), 0).unwrap())
    });
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.optimizer.batch = 2;
    let records = (0..2).map(|f| simulate_record(&cfg, f).unwrap()).collect();
    let data = hoil_core::pipeline::Dataset::new(records, cfg.sim.profile, cfg.sim.dt, cfg.seed).unwrap();
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("pretrain step, batch 2 x 128 points", |b| {
        b.iter_batched(
            || Trainer::new(&cfg, Mode::Pretrain, std::slice::from_ref(&data)).unwrap(),
            |mut t| t.train_step().unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

fn bench_filters(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let traj: Trajectory = (0..300)
        .map(|_| (0..16).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect())
        .collect();
    c.bench_function("savitzky-golay 300 frames x 16 joints", |b| {
        b.iter(|| savitzky_golay(black_box(&traj), 7, 2).unwrap())
    });
}

criterion_group!(benches, bench_serialize, bench_supcon, bench_raycast, bench_train_step, bench_filters);
criterion_main!(benches);
