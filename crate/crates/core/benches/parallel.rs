use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pavd::data::{Dataset, SequenceSpec};
use pavd::denoiser::{build_ar1_prior, AnalyticDenoiser, ToyDenoiser};
use pavd::eval::{compare_methods, CompareOptions, DEFAULT_SCENE_THRESHOLD, DEFAULT_SCENE_WINDOW};
use pavd::par::Execution;
use pavd::run::{Method, SampleConfig};
use pavd::schedule::VarianceSchedule;
use pavd::training::{batch_gradient, TrainConfig, TrainExample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn gradient(c: &mut Criterion) {
    let vs = VarianceSchedule::default();
    let config = TrainConfig {
        batch_size: 64,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = Dataset::generate(&SequenceSpec::ar1(0.9, 1.0, 16, 64, 1), 64, Execution::Parallel).unwrap();
    let params = ToyDenoiser::init(config.toy_shape(16), &mut rng).unwrap();
    let len = config.window_len();
    let examples: Vec<TrainExample> = data
        .sequences
        .iter()
        .map(|s| TrainExample::draw(&s.slice_frames(0, len), &config, &vs, &mut rng).unwrap())
        .collect();
    let mut g = c.benchmark_group("batch_gradient");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| batch_gradient(&params, &examples, &vs, exec).unwrap())
        });
    }
    g.finish();
}

fn dataset(c: &mut Criterion) {
    let spec = SequenceSpec::ar1(0.9, 1.0, 16, 256, 2);
    let mut g = c.benchmark_group("dataset_generate");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| Dataset::generate(&spec, 512, exec).unwrap())
        });
    }
    g.finish();
}

fn comparison(c: &mut Criterion) {
    let vs = VarianceSchedule::default();
    let base = SampleConfig {
        steps: 12,
        chunk: 3,
        frames: 240,
        ..SampleConfig::default()
    };
    let den = AnalyticDenoiser::new(build_ar1_prior(0.95, 1.0, base.window_frames(), 8).unwrap());
    let configs: Vec<SampleConfig> = Method::ALL
        .iter()
        .map(|&method| SampleConfig {
            method,
            ..base.clone()
        })
        .collect();
    let mut g = c.benchmark_group("compare_methods");
    g.sample_size(10);
    for (name, exec) in MODES {
        let options = CompareOptions {
            seeds: (0..8).collect(),
            clip_len: 20,
            scene_window: DEFAULT_SCENE_WINDOW,
            scene_threshold: DEFAULT_SCENE_THRESHOLD,
            true_velocity: None,
            reference: None,
            exec,
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| compare_methods(&configs, &den, &vs, 8, &options).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, gradient, dataset, comparison);
criterion_main!(benches);
