use pavd::data::{Dataset, SequenceSpec};
use pavd::par::Execution;
use pavd::schedule::VarianceSchedule;
use pavd::training::{sample_training_levels, train_run, TrainConfig, TrainLevelMode, Trainer, METRICS_HEADER};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        sampling_steps: 12,
        chunk: 3,
        hidden: 12,
        embed: 4,
        log_every: 10,
        val_clips: 32,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn data() -> Dataset {
    Dataset::generate(&SequenceSpec::ar1(0.9, 1.0, 4, 40, 17), 60, Execution::Parallel).unwrap()
}

#[test]
fn loss_falls_over_two_hundred_steps() {
    let vs = VarianceSchedule::default();
    let d = data();
    let mut t = Trainer::new(small(200), 4).unwrap();
    let mut losses = Vec::new();
    for _ in 0..200 {
        let clips = t.sample_clips(&d.sequences).unwrap();
        losses.push(t.train_step(&clips, &vs, Execution::Parallel).unwrap());
    }
    let head = losses[..20].iter().sum::<f64>() / 20.0;
    let tail = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.8 * head, "loss {head} -> {tail}");
}

#[test]
fn resumed_training_continues_bit_identically() {
    let vs = VarianceSchedule::default();
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let mut straight = Trainer::new(small(40), 4).unwrap();
    for _ in 0..20 {
        let c = straight.sample_clips(&d.sequences).unwrap();
        straight.train_step(&c, &vs, Execution::Parallel).unwrap();
    }
    straight.save(&dir.path().join("mid")).unwrap();
    let mut resumed = Trainer::load(&dir.path().join("mid")).unwrap();
    assert_eq!(resumed.step(), 20);
    for _ in 0..5 {
        let a = straight.sample_clips(&d.sequences).unwrap();
        let b = resumed.sample_clips(&d.sequences).unwrap();
        assert_eq!(a, b);
        let la = straight.train_step(&a, &vs, Execution::Parallel).unwrap();
        let lb = resumed.train_step(&b, &vs, Execution::Sequential).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
    }
    assert_eq!(straight.params(), resumed.params());
}

#[test]
fn run_writes_metrics_and_checkpoints_and_resumes() {
    let vs = VarianceSchedule::default();
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        checkpoint_every: 25,
        ..small(50)
    };
    let out = train_run(Trainer::new(config.clone(), 4).unwrap(), &d.sequences, &vs, Some(dir.path()), Execution::Parallel).unwrap();
    assert_eq!(out.rows.len(), 5);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 6);
    assert!(dir.path().join("checkpoint-25.bin").exists());
    assert!(dir.path().join("checkpoint-50.json").exists());

    // continue the same run to 80 steps from the 50-step checkpoint
    let mut t = Trainer::load(&dir.path().join("checkpoint")).unwrap();
    assert_eq!(t.step(), 50);
    t.extend_to(80).unwrap();
    assert!(t.extend_to(10).is_err());
    let more = train_run(t, &d.sequences, &vs, Some(dir.path()), Execution::Parallel).unwrap();
    assert_eq!(more.rows.len(), 3);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
    assert_eq!(csv.lines().filter(|l| *l == METRICS_HEADER).count(), 1);
}

#[test]
fn equal_seeds_give_identical_checkpoints() {
    let vs = VarianceSchedule::default();
    let d = data();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (dir, exec) in dirs.iter().zip([Execution::Parallel, Execution::Sequential]) {
        train_run(Trainer::new(small(30), 4).unwrap(), &d.sequences, &vs, Some(dir.path()), exec).unwrap();
    }
    for name in ["checkpoint.bin", "checkpoint.json", "checkpoint.train.json", "metrics.csv"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
}

/// Perturbed progressive levels should reach every part of `[0, T]`.
#[test]
fn training_levels_cover_the_level_range() {
    let vs = VarianceSchedule::default();
    for keep_clean in [false, true] {
        let config = TrainConfig {
            keep_clean,
            ..small(1)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seen = Vec::new();
        for i in 0..4000 {
            let lengths = config.lengths();
            let len = lengths[i % lengths.len()];
            let lv = sample_training_levels(&config, len, &vs, &mut rng).unwrap();
            assert!(lv.levels().windows(2).all(|w| w[0] <= w[1]));
            assert!(lv.levels().iter().all(|&l| (0.0..=1.0).contains(&l)));
            seen.extend_from_slice(lv.levels());
        }
        seen.sort_by(f64::total_cmp);
        seen.dedup();
        let max_gap = seen.windows(2).map(|w| w[1] - w[0]).fold(seen[0], f64::max).max(1.0 - seen[seen.len() - 1]);
        assert!(max_gap <= 2.0 / 12.0, "keep_clean {keep_clean}: gap {max_gap}");
    }
}

#[test]
fn uniform_mode_gives_one_level_per_clip() {
    let vs = VarianceSchedule::default();
    let config = TrainConfig {
        level_mode: TrainLevelMode::Uniform,
        ..small(1)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let lv = sample_training_levels(&config, 6, &vs, &mut rng).unwrap();
        assert!(lv.levels().iter().all(|&l| l == lv.levels()[0]));
    }
    assert!(sample_training_levels(&config, 5, &vs, &mut rng).is_err());
}
