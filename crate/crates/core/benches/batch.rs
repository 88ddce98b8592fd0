use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reschunk::config::RunConfig;
use reschunk::corpus::{make_windows, Corpus};
use reschunk::eval::evaluate_windows;
use reschunk::model::{ModelParams, Normalizer};
use reschunk::motion_data::{synth_dataset, Split, SynthConfig};
use reschunk::par::Execution;
use reschunk::training::batch_loss_and_grad;

fn setup() -> (RunConfig, ModelParams, Vec<reschunk::motion_data::WindowSample>, reschunk::motion_data::SkeletonSpec) {
    let seqs = synth_dataset(10, 8, 25.0, 6.0, &SynthConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let corpus = Corpus::by_index(seqs).unwrap();
    let cfg = RunConfig::default();
    let windows = make_windows(&corpus.train, &cfg.windowing, Split::Train, 1).unwrap();
    let mut params = ModelParams::init(&cfg.model, 1).unwrap();
    params.normalizer = Normalizer::fit(windows.iter().map(|w| w.input.view())).unwrap();
    (cfg, params, windows, corpus.skeleton)
}

fn bench(c: &mut Criterion) {
    let (cfg, params, windows, skeleton) = setup();
    let batch: Vec<usize> = (0..16).collect();
    let mut g = c.benchmark_group("batch_gradient");
    for exec in [Execution::Sequential, Execution::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| batch_loss_and_grad(&params, &cfg.model, &windows, &batch, 0, 0, exec).unwrap())
        });
    }
    g.finish();

    let frames = cfg.horizons.frames(cfg.model.output_frames).unwrap();
    let mut g = c.benchmark_group("evaluate_windows");
    for exec in [Execution::Sequential, Execution::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| evaluate_windows(&params, &cfg.model, &windows, &skeleton, &frames, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench
}
criterion_main!(benches);
