//! Trains the toy denoiser twice on identical data and seeds, once with progressive
//! level ladders and once with one shared level per clip, then compares validation
//! error on both level layouts and the drift of long progressive rollouts.
//!
//! `cargo run --release -p pavd-core --example progressive_vs_uniform`

use pavd::data::{Dataset, SequenceSpec};
use pavd::par::Execution;
use pavd::run::{sample_sequence, Method, SampleConfig};
use pavd::schedule::VarianceSchedule;
use pavd::training::{train_run, TrainConfig, TrainLevelMode, Trainer, ValidationSet};

const RHO: f64 = 0.9;
const DIM: usize = 8;

fn frame_stats(xs: &[f64], dim: usize) -> (f64, f64) {
    let n = xs.len() as f64;
    let var = xs.iter().map(|x| x * x).sum::<f64>() / n;
    let lag = xs[dim..].iter().zip(xs).map(|(a, b)| a * b).sum::<f64>() / (xs.len() - dim) as f64;
    (var, lag / var)
}

fn main() {
    let vs = VarianceSchedule::default();
    let exec = Execution::Parallel;
    let data = Dataset::generate(&SequenceSpec::ar1(RHO, 1.0, DIM, 64, 11), 400, exec).unwrap();
    let base = TrainConfig {
        steps: 2000,
        batch_size: 16,
        learning_rate: 3e-3,
        sampling_steps: 12,
        chunk: 3,
        keep_clean: true,
        hidden: 32,
        embed: 8,
        log_every: 500,
        seed: 9,
        ..TrainConfig::default()
    };
    let uniform_cfg = TrainConfig {
        level_mode: TrainLevelMode::Uniform,
        ..base.clone()
    };
    let val_prog = ValidationSet::draw(&data.sequences, &base, &vs, 512, 4242).unwrap();
    let val_unif = ValidationSet::draw(&data.sequences, &uniform_cfg, &vs, 512, 4242).unwrap();

    println!("{:<12} {:>28} {:>28}", "training", "val mse progressive (l/m/h)", "val mse uniform (l/m/h)");
    let mut models = Vec::new();
    for (name, cfg) in [("progressive", base.clone()), ("uniform", uniform_cfg)] {
        let out = train_run(Trainer::new(cfg, DIM).unwrap(), &data.sequences, &vs, None, exec).unwrap();
        let toy = out.trainer.params().clone();
        let fmt = |b: [f64; 3]| format!("{:.4}/{:.4}/{:.4}", b[0], b[1], b[2]);
        let p = val_prog.band_mse(&toy, &vs, exec).unwrap();
        let u = val_unif.band_mse(&toy, &vs, exec).unwrap();
        println!("{name:<12} {:>28} {:>28}", fmt(p), fmt(u));
        models.push((name, toy));
    }

    println!();
    println!("rollouts: 600 frames, last 300 measured, 5 seeds (data: variance 1, lag-1 {RHO})");
    println!("{:<12} {:<12} {:>10} {:>10}", "training", "method", "variance", "lag-1");
    for (name, toy) in &models {
        for method in [Method::Pa, Method::Independent] {
            let (mut var, mut lag) = (0.0, 0.0);
            for seed in 0..5 {
                let cfg = SampleConfig {
                    method,
                    steps: 12,
                    chunk: 3,
                    frames: 600,
                    keep_clean: true,
                    seed,
                    ..SampleConfig::default()
                };
                let seq = sample_sequence(&cfg, toy, &vs, DIM).unwrap();
                let (v, l) = frame_stats(seq.slice_frames(300, 600).as_slice(), DIM);
                var += v / 5.0;
                lag += l / 5.0;
            }
            println!("{name:<12} {:<12} {var:>10.3} {lag:>10.3}", method.to_string());
        }
    }
}
