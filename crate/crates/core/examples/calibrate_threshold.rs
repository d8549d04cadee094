//! Calibrates the scene-change ratio threshold.
//!
//! Null runs are AR(1) sequences with no cuts (1000 frames, D = 16, rho spread over
//! [0.5, 0.95]); the threshold is the 99th percentile of each run's largest ratio,
//! rounded up to a multiple of 0.25. Detection power is then measured on the clip
//! boundaries of concatenated independent AR(1) windows.
//!
//! cargo run --release -p pavd-core --example calibrate_threshold

use pavd::data::{sample_ar1_sequence, SequenceSpec};
use pavd::eval::{change_ratios, DEFAULT_SCENE_THRESHOLD, DEFAULT_SCENE_WINDOW};
use pavd::par::{self, Execution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const RUNS: usize = 400;
const FRAMES: usize = 1000;
const DIM: usize = 16;

fn rho(i: usize) -> f64 {
    0.5 + 0.45 * i as f64 / (RUNS - 1) as f64
}

fn main() {
    let mut maxima = par::map_range(RUNS, Execution::Parallel, |i| {
        let spec = SequenceSpec::ar1(rho(i), 1.0, DIM, FRAMES, i as u64);
        let s = sample_ar1_sequence(&spec, &mut ChaCha8Rng::seed_from_u64(i as u64)).unwrap();
        change_ratios(&s, DEFAULT_SCENE_WINDOW).into_iter().fold(0.0, f64::max)
    });
    maxima.sort_by(f64::total_cmp);
    let q = |p: f64| maxima[((maxima.len() - 1) as f64 * p).round() as usize];
    let threshold = (q(0.99) * 4.0).ceil() / 4.0;
    println!("null max ratio: median {:.3}, p95 {:.3}, p99 {:.3}, max {:.3}", q(0.5), q(0.95), q(0.99), q(1.0));
    println!("calibrated threshold {threshold:.2} (frozen default {DEFAULT_SCENE_THRESHOLD:.2})");

    // cuts every 40 frames between independent windows
    let hits = par::map_range(RUNS, Execution::Parallel, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + i as u64);
        let spec = SequenceSpec::ar1(rho(i), 1.0, DIM, 40, 0);
        let mut s = sample_ar1_sequence(&spec, &mut rng).unwrap();
        for _ in 1..25 {
            s.extend(&sample_ar1_sequence(&spec, &mut rng).unwrap());
        }
        let r = change_ratios(&s, DEFAULT_SCENE_WINDOW);
        (1..25).map(|k| r[40 * k - 1]).collect::<Vec<f64>>()
    });
    let cuts: Vec<f64> = hits.into_iter().flatten().collect();
    for (name, t) in [("calibrated", threshold), ("frozen default", DEFAULT_SCENE_THRESHOLD)] {
        let found = cuts.iter().filter(|&&x| x > t).count();
        println!(
            "detection at the {name} threshold {t:.2}: {found}/{} cuts ({:.1}%)",
            cuts.len(),
            100.0 * found as f64 / cuts.len() as f64
        );
    }
}
