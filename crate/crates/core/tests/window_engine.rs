use pavd::denoiser::{build_ar1_prior, AnalyticDenoiser, GaussianProcessPrior, ZeroDenoiser};
use pavd::diffusion::LatentSequence;
use pavd::schedule::{SamplingSchedule, VarianceSchedule};
use pavd::window::{generate, generate_into, CollectSink, EmittedFrame, FrameSink, GenerationConfig, Phase, WindowState};
use pavd::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn config(steps: usize, chunk: usize, keep_clean: bool) -> GenerationConfig {
    GenerationConfig {
        steps,
        chunk,
        keep_clean,
        total_frames: 20 * chunk,
        ..GenerationConfig::default()
    }
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn appended_chunks_are_standard_normal() {
    let vs = VarianceSchedule::default();
    let mut tail = Vec::new();
    for seed in 0..2000 {
        let cfg = GenerationConfig {
            seed,
            init_from_noise: false,
            ..config(6, 2, false)
        };
        let mut st = WindowState::init_from_video(&LatentSequence::zeros(6, 3), &cfg, &vs).unwrap();
        for _ in 0..2 {
            st.sample_step(&ZeroDenoiser, &vs).unwrap();
        }
        st.shift_window().unwrap();
        let w = st.frames().unwrap();
        tail.extend_from_slice(w.slice_frames(4, 6).as_slice());
    }
    let (m, v) = moments(&tail);
    // 12000 draws: SE of the mean ≈ 0.009, of the variance ≈ 0.013
    assert!(m.abs() < 0.04, "mean {m}");
    assert!((v - 1.0).abs() < 0.06, "variance {v}");
}

#[test]
fn init_from_video_noises_each_chunk_to_its_level() {
    let vs = VarianceSchedule::default();
    let (s, c) = (12, 3);
    let sched = SamplingSchedule::linear(1.0, s).unwrap();
    let mut per_chunk = vec![Vec::new(); s / c];
    for seed in 0..3000 {
        let cfg = GenerationConfig {
            seed,
            init_from_noise: false,
            ..config(s, c, false)
        };
        let st = WindowState::init_from_video(&LatentSequence::zeros(s, 2), &cfg, &vs).unwrap();
        let w = st.frames().unwrap();
        for (j, acc) in per_chunk.iter_mut().enumerate() {
            acc.extend_from_slice(w.slice_frames(j * c, (j + 1) * c).as_slice());
        }
    }
    for (j, xs) in per_chunk.iter().enumerate() {
        let level = sched.level((j + 1) * c);
        let expect = 1.0 - vs.alpha_bar(level);
        let (m, v) = moments(xs);
        let se = expect * (2.0 / xs.len() as f64).sqrt();
        assert!(m.abs() < 4.0 * (expect / xs.len() as f64).sqrt(), "chunk {j} mean {m}");
        assert!((v - expect).abs() < 4.0 * se, "chunk {j}: variance {v}, expected {expect}");
    }
}

#[test]
fn clean_prefix_of_an_initial_clip_is_kept_verbatim() {
    let vs = VarianceSchedule::default();
    let cfg = GenerationConfig {
        init_from_noise: false,
        ..config(6, 2, true)
    };
    let x0 = LatentSequence::new(8, 1, (0..8).map(f64::from).collect()).unwrap();
    let st = WindowState::init_from_video(&x0, &cfg, &vs).unwrap();
    assert!(st.has_clean_context());
    assert_eq!(st.frames().unwrap().slice_frames(0, 2).as_slice(), &[0.0, 1.0]);
    assert_eq!(st.levels().unwrap().levels()[..2], [0.0, 0.0]);
    assert_eq!(st.phase(), Phase::Steady);
}

/// With an identity prior the exact denoiser acts frame by frame, so each deterministic
/// step multiplies a frame by `sqrt(a b) + sqrt((1 - a)(1 - b))`. Emitted frames are
/// the initial noise scaled by the product of those factors along the grid.
#[test]
fn identity_prior_matches_scalar_ddim_contraction() {
    let vs = VarianceSchedule::default();
    let (s, c) = (20, 4);
    let sched = SamplingSchedule::linear(1.0, s).unwrap();
    let mut gain = 1.0;
    for i in (1..=s).rev() {
        let a = vs.alpha_bar(sched.level(i));
        let b = vs.alpha_bar(sched.level(i - 1));
        gain *= (a * b).sqrt() + ((1.0 - a) * (1.0 - b)).sqrt();
    }
    let prior = GaussianProcessPrior::separable(DMatrix::identity(s, s), 2, true).unwrap();
    let cfg = GenerationConfig {
        total_frames: 6000,
        terminate: true,
        seed: 3,
        ..config(s, c, false)
    };
    let out = generate(&cfg, &AnalyticDenoiser::new(prior), &vs, 2, None).unwrap();
    let xs = out.as_slice();
    let (m, v) = moments(xs);
    let se = gain * gain * (2.0 / xs.len() as f64).sqrt();
    assert!(m.abs() < 4.0 * gain / (xs.len() as f64).sqrt(), "mean {m}");
    assert!((v - gain * gain).abs() < 4.0 * se, "variance {v}, scalar oracle {}", gain * gain);
    let lag: f64 = xs.windows(3).step_by(2).map(|w| w[0] * w[2]).sum::<f64>() / (xs.len() / 2) as f64;
    assert!(lag.abs() / v < 0.05, "frames are correlated: {}", lag / v);
}

#[derive(Default)]
struct Audit {
    frames: Vec<EmittedFrame>,
    steps: usize,
    violations: Vec<String>,
}

impl FrameSink for Audit {
    fn on_emit(&mut self, frames: &[EmittedFrame]) -> pavd::Result<()> {
        self.frames.extend_from_slice(frames);
        Ok(())
    }

    fn on_step(&mut self, st: &WindowState) -> pavd::Result<()> {
        self.steps += 1;
        let g = st.chunk_grid_indices();
        let noisy = &g[usize::from(st.has_clean_context())..];
        if noisy.windows(2).any(|w| w[1] != w[0] + st.config().chunk) {
            self.violations.push(format!("step {}: grid {g:?}", self.steps));
        }
        Ok(())
    }

    fn on_period(&mut self, st: &WindowState) -> pavd::Result<()> {
        if st.created_frames() != st.emitted_frames() + st.pending_frames() as u64 {
            self.violations.push(format!("period {}: conservation", st.period()));
        }
        Ok(())
    }
}

#[test]
fn exhaustive_small_runs_keep_order_and_count() {
    let vs = VarianceSchedule::default();
    for (s, c) in [(4, 1), (4, 2), (6, 3), (12, 4), (30, 5)] {
        for keep_clean in [false, true] {
            for init_from_noise in [false, true] {
                let window = s + if keep_clean { c } else { 0 };
                let den = AnalyticDenoiser::new(build_ar1_prior(0.8, 1.0, window, 2).unwrap());
                let x0 = (!init_from_noise).then(|| LatentSequence::zeros(window, 2));
                let n = 10 * c + s;
                let cfg = GenerationConfig {
                    total_frames: n,
                    terminate: true,
                    init_from_noise,
                    ..config(s, c, keep_clean)
                };
                let mut audit = Audit::default();
                let summary = generate_into(&cfg, &den, &vs, 2, x0.as_ref(), &mut audit).unwrap();
                let tag = format!("S={s} C={c} keep={keep_clean} noise={init_from_noise}");
                assert!(audit.violations.is_empty(), "{tag}: {:?}", audit.violations);
                assert_eq!(summary.emitted as usize, n, "{tag}");
                assert_eq!(summary.steps as usize, audit.steps, "{tag}");
                assert!(audit.frames.iter().enumerate().all(|(i, f)| f.index as usize == i), "{tag}");
                assert!(audit.frames.windows(2).all(|w| w[0].created <= w[1].created), "{tag}");
            }
        }
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let vs = VarianceSchedule::default();
    let den = AnalyticDenoiser::new(build_ar1_prior(0.9, 1.0, 14, 3).unwrap());
    let cfg = GenerationConfig {
        eta: 0.7,
        total_frames: 80,
        ..config(12, 2, true)
    };
    let a = generate(&cfg, &den, &vs, 3, None).unwrap();
    let b = generate(&cfg, &den, &vs, 3, None).unwrap();
    assert_eq!(a, b);
    let c = generate(&GenerationConfig { seed: 1, ..cfg }, &den, &vs, 3, None).unwrap();
    assert_ne!(a, c);
}

#[test]
fn misuse_is_reported() {
    let vs = VarianceSchedule::default();
    let cfg = config(6, 2, false);
    let mut st = WindowState::init_from_noise(&cfg, &vs, 1).unwrap();
    assert!(matches!(st.shift_window(), Err(Error::Phase(_))));
    st.sample_step(&ZeroDenoiser, &vs).unwrap();
    assert!(matches!(st.begin_termination(), Err(Error::Phase(_))));
    st.sample_step(&ZeroDenoiser, &vs).unwrap();
    assert!(matches!(st.sample_step(&ZeroDenoiser, &vs), Err(Error::Phase(_))));
    let bad = GenerationConfig { chunk: 4, ..cfg };
    let err = bad.validate().unwrap_err().to_string();
    assert!(err.contains("divisible"), "{err}");
}

#[test]
fn terminate_drains_every_pending_frame() {
    let vs = VarianceSchedule::default();
    let cfg = GenerationConfig {
        init_from_noise: false,
        ..config(6, 2, true)
    };
    let mut st = WindowState::init_from_video(&LatentSequence::zeros(8, 1), &cfg, &vs).unwrap();
    let pending = st.pending_frames();
    st.terminate(&ZeroDenoiser, &vs).unwrap();
    assert_eq!(st.phase(), Phase::Done);
    assert_eq!(st.take_emitted().len(), pending);
    assert_eq!(st.pending_frames(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn output_length_is_exact_under_termination(
        k in 1usize..6, c in 1usize..4, extra in 0usize..12, keep_clean: bool, seed in 0u64..1000
    ) {
        let vs = VarianceSchedule::default();
        let s = k * c;
        let n = s + extra * c;
        let cfg = GenerationConfig {
            total_frames: n,
            terminate: true,
            seed,
            ..config(s, c, keep_clean)
        };
        let mut sink = CollectSink::default();
        let summary = generate_into(&cfg, &ZeroDenoiser, &vs, 1, None, &mut sink).unwrap();
        prop_assert_eq!(summary.emitted as usize, n);
        prop_assert_eq!(sink.frames.len(), n);
    }

    #[test]
    fn without_termination_exactly_n_frames_arrive(k in 1usize..5, c in 1usize..4, m in 1usize..15, keep_clean: bool) {
        let vs = VarianceSchedule::default();
        let cfg = GenerationConfig { total_frames: m * c, ..config(k * c, c, keep_clean) };
        let out = generate(&cfg, &ZeroDenoiser, &vs, 1, None).unwrap();
        prop_assert_eq!(out.frames(), m * c);
    }
}
