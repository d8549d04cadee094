use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use pavd::data::{read_dataset, write_dataset, Dataset, Generator, SequenceSpec, WrapMode};
use pavd::diffusion::LatentSequence;
use pavd::eval::{
    compare_methods, compute_clip_metrics, detect_scene_changes, estimate_velocity, CompareOptions, MetricReport,
    DEFAULT_SCENE_THRESHOLD, DEFAULT_SCENE_WINDOW,
};
use pavd::par::Execution;
use pavd::run::{execute_run, load_run_sequence, replay_run, write_report, DenoiserSpec, Method, RunManifest, SampleConfig};
use pavd::schedule::{ScheduleKind, VarianceSchedule};
use pavd::training::{train_run, TrainConfig, TrainLevelMode, Trainer, LEVEL_BANDS};

#[derive(Parser)]
#[command(name = "pavd", version, about = "Progressive autoregressive diffusion sampling on synthetic latent sequences")]
struct Cli {
    /// Run data-parallel work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData(GenDataArgs),
    /// Train the toy denoiser on a dataset.
    Train(TrainArgs),
    /// Sample a run directory with one method.
    Sample(SampleArgs),
    /// Recompute metrics for a run directory or a dataset sequence.
    Eval(EvalArgs),
    /// Run several methods over shared seeds and tabulate the metrics.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorKind {
    Ar1,
    Bump,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    /// JSON sequence spec; flags given explicitly override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ar1")]
    generator: GeneratorKind,
    #[arg(long, default_value_t = 256)]
    count: usize,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Bump width in grid cells.
    #[arg(long, default_value_t = 2.0)]
    width: f64,
    /// Bump velocity in cells per frame.
    #[arg(long, default_value_t = 0.5)]
    velocity: f64,
    #[arg(long, default_value_t = 32)]
    grid: usize,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    start: f64,
    /// Clamp the bump at the grid edges instead of wrapping.
    #[arg(long)]
    clamped: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file from `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for metrics.csv and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; flags given explicitly override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from `<out>/checkpoint`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Sampling steps S the model is trained for.
    #[arg(long)]
    sampling_steps: Option<usize>,
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long, conflicts_with = "no_keep_clean")]
    keep_clean: bool,
    #[arg(long)]
    no_keep_clean: bool,
    #[arg(long, value_parser = PossibleValuesParser::new(["progressive", "uniform"]))]
    level_mode: Option<String>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    embed: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    log_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args, Clone)]
struct SampleFlags {
    /// JSON sample config; flags given explicitly override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = method_parser())]
    method: Option<Method>,
    /// Sampling steps S.
    #[arg(long)]
    steps: Option<usize>,
    /// Chunk size C.
    #[arg(long)]
    chunk: Option<usize>,
    /// Frames N to produce.
    #[arg(long)]
    frames: Option<usize>,
    /// Keep the newest clean chunk in the window (the default).
    #[arg(long, conflicts_with = "no_keep_clean")]
    keep_clean: bool,
    #[arg(long)]
    no_keep_clean: bool,
    #[arg(long)]
    eta: Option<f64>,
    /// Drain the window at the end so exactly N frames are produced.
    #[arg(long)]
    terminate: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset whose first sequence supplies the initial clip.
    #[arg(long)]
    init_video: Option<PathBuf>,
    /// Condition frames E for the replacement baselines.
    #[arg(long)]
    condition_len: Option<usize>,
    /// Frames per metric clip.
    #[arg(long)]
    clip_len: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DenoiserKind {
    /// Exact posterior under an AR(1) prior.
    Analytic,
    /// Trained toy network (needs --checkpoint).
    Toy,
    /// Predicts zero noise.
    Zero,
}

#[derive(Args, Clone)]
struct DenoiserFlags {
    #[arg(long, value_enum, default_value = "analytic")]
    denoiser: DenoiserKind,
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Checkpoint stem for the toy denoiser, e.g. `train-out/checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Run directory [default: runs/<method>-seed<seed>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-execute the manifest of an existing run directory.
    #[arg(long, conflicts_with = "config")]
    replay: Option<PathBuf>,
    #[command(flatten)]
    sample: SampleFlags,
    #[command(flatten)]
    denoiser: DenoiserFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory or dataset file.
    source: PathBuf,
    /// Sequence to evaluate when the source is a dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Where to write metrics.csv, report.json and plots [default: the run directory].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    clip_len: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SCENE_WINDOW)]
    scene_window: usize,
    #[arg(long, default_value_t = DEFAULT_SCENE_THRESHOLD)]
    scene_threshold: f64,
    /// True bump velocity; adds the velocity error.
    #[arg(long)]
    true_velocity: Option<f64>,
}

#[derive(Args)]
struct CompareArgs {
    /// Output directory for comparison.csv and comparison.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "pa,rw,rn,independent", value_parser = method_parser())]
    methods: Vec<Method>,
    /// Number of seeds.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long, default_value_t = DEFAULT_SCENE_WINDOW)]
    scene_window: usize,
    #[arg(long, default_value_t = DEFAULT_SCENE_THRESHOLD)]
    scene_threshold: f64,
    #[arg(long)]
    true_velocity: Option<f64>,
    #[command(flatten)]
    sample: SampleFlags,
    #[command(flatten)]
    denoiser: DenoiserFlags,
}

fn method_parser() -> impl TypedValueParser<Value = Method> {
    PossibleValuesParser::new(Method::ALL.map(Method::name)).map(|s| s.parse::<Method>().expect("listed value"))
}

/// Usage and configuration problems exit with 2, everything else with 1.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<pavd::Error> for Failure {
    fn from(e: pavd::Error) -> Self {
        match e {
            pavd::Error::InvalidConfig(_) | pavd::Error::InvalidSchedule(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn read_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn gen_data(a: GenDataArgs, exec: Execution) -> CliResult<()> {
    let mut spec = match &a.config {
        Some(p) => read_config::<SequenceSpec>(p)?,
        None => {
            let generator = match a.generator {
                GeneratorKind::Ar1 => Generator::Ar1Gaussian {
                    rho: a.rho,
                    sigma: a.sigma,
                    dim: a.dim,
                },
                GeneratorKind::Bump => Generator::MovingBump {
                    width: a.width,
                    velocity: a.velocity,
                    grid: a.grid,
                    wrap: if a.clamped { WrapMode::Clamped } else { WrapMode::Periodic },
                    noise: a.noise,
                    start: a.start,
                },
            };
            SequenceSpec {
                generator,
                length: 200,
                seed: 0,
            }
        }
    };
    if let Some(l) = a.length {
        spec.length = l;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let data = Dataset::generate(&spec, a.count, exec)?;
    write_dataset(&data, &a.out)?;
    println!(
        "wrote {} sequences of {} frames x {} dims to {}",
        data.len(),
        data.frames(),
        data.dim(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs, exec: Execution) -> CliResult<()> {
    let data = read_dataset(&a.data)?;
    let vs = VarianceSchedule::default();
    let trainer = if a.resume {
        let mut t = Trainer::load(&a.out.join("checkpoint"))?;
        if let Some(s) = a.steps {
            t.extend_to(s)?;
        }
        println!("resuming at step {} of {}", t.step(), t.config().steps);
        t
    } else {
        let mut c = match &a.config {
            Some(p) => read_config::<TrainConfig>(p)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$( if let Some(v) = a.$f { c.$f = v; } )*};
        }
        set!(steps, batch_size, learning_rate, sampling_steps, chunk, hidden, embed, seed, log_every, checkpoint_every);
        if a.keep_clean || a.no_keep_clean {
            c.keep_clean = a.keep_clean;
        }
        if let Some(m) = &a.level_mode {
            c.level_mode = if m == "uniform" {
                TrainLevelMode::Uniform
            } else {
                TrainLevelMode::ProgressivePerturbed
            };
        }
        Trainer::new(c, data.dim())?
    };
    let outcome = train_run(trainer, &data.sequences, &vs, Some(&a.out), exec)?;
    println!("step  train     val-{}  val-{}  val-{}", LEVEL_BANDS[0], LEVEL_BANDS[1], LEVEL_BANDS[2]);
    for r in &outcome.rows {
        println!(
            "{:<5} {:.5}  {:.5}  {:.5}  {:.5}",
            r.step, r.train_loss, r.val_loss_low, r.val_loss_mid, r.val_loss_high
        );
    }
    println!("checkpoint written to {}", a.out.join("checkpoint").display());
    Ok(())
}

fn sample_config(f: &SampleFlags) -> CliResult<SampleConfig> {
    let mut c = match &f.config {
        Some(p) => read_config::<SampleConfig>(p)?,
        None => SampleConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => {$( if let Some(v) = f.$f.clone() { c.$f = v; } )*};
    }
    set!(method, steps, chunk, frames, eta, seed, clip_len);
    if f.keep_clean || f.no_keep_clean {
        c.keep_clean = f.keep_clean;
    }
    if f.terminate {
        c.terminate = true;
    }
    if f.init_video.is_some() {
        c.init_video = f.init_video.clone();
    }
    if f.condition_len.is_some() {
        c.condition_len = f.condition_len;
    }
    c.validate()?;
    Ok(c)
}

fn denoiser_spec(f: &DenoiserFlags) -> CliResult<DenoiserSpec> {
    Ok(match f.denoiser {
        DenoiserKind::Analytic => DenoiserSpec::AnalyticAr1 {
            rho: f.rho,
            sigma: f.sigma,
            dim: f.dim,
        },
        DenoiserKind::Toy => DenoiserSpec::Toy {
            checkpoint: f
                .checkpoint
                .clone()
                .ok_or_else(|| Failure::Usage("--denoiser toy needs --checkpoint".into()))?,
        },
        DenoiserKind::Zero => DenoiserSpec::Zero { dim: f.dim },
    })
}

fn print_report(frames: usize, dir: &Path, report: &MetricReport) {
    println!("{frames} frames in {}", dir.display());
    if !report.clips.is_empty() {
        let d = &report.drift;
        println!(
            "drift (last - first quartile): mean {:+.4}, variance {:+.4}, autocorr {:+.4}, delta {:+.4}",
            d.mean, d.variance, d.autocorr, d.delta
        );
    }
    if let Some(s) = &report.scene_changes {
        println!("scene changes: {} events, {} segments", s.events, s.segments);
    }
    if let Some(v) = report.velocity_error {
        println!("velocity MAE: {v:.4}");
    }
}

fn sample(a: SampleArgs) -> CliResult<()> {
    let outcome = match &a.replay {
        Some(src) => {
            let dir = a.out.clone().unwrap_or_else(|| {
                let mut s = src.clone().into_os_string();
                s.push("-replay");
                PathBuf::from(s)
            });
            replay_run(src, &dir).map(|o| (o, dir))?
        }
        None => {
            let config = sample_config(&a.sample)?;
            let dir = a
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", config.method, config.seed)));
            let manifest = RunManifest::new(config, denoiser_spec(&a.denoiser)?, ScheduleKind::default(), 1.0)?;
            execute_run(&manifest, &dir).map(|o| (o, dir))?
        }
    };
    let (o, dir) = outcome;
    print_report(o.sequence.frames(), &dir, &o.report);
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let (seq, clip_len, reference, default_out): (LatentSequence, usize, _, Option<PathBuf>) = if a.source.is_dir() {
        let (m, seq) = load_run_sequence(&a.source)?;
        (seq, m.sample.clip_len, m.denoiser.reference(), Some(a.source.clone()))
    } else {
        let data = read_dataset(&a.source)?;
        let seq = data.sequences.get(a.index).cloned().ok_or_else(|| {
            Failure::Usage(format!("dataset has {} sequences, no index {}", data.len(), a.index))
        })?;
        (seq, pavd::eval::DEFAULT_CLIP_LEN, None, None)
    };
    let clip_len = a.clip_len.unwrap_or(clip_len);
    let mut report = compute_clip_metrics(&seq, clip_len, reference.as_ref())?;
    report.scene_changes = Some(detect_scene_changes(&seq, a.scene_window, a.scene_threshold));
    if let Some(v) = a.true_velocity {
        report.velocity_error = Some(estimate_velocity(&seq, v)?.mae);
    }
    let out = a
        .out
        .or(default_out)
        .ok_or_else(|| Failure::Usage("--out is required when evaluating a dataset".into()))?;
    fs::create_dir_all(&out)?;
    write_report(&out, &report)?;
    print_report(seq.frames(), &out, &report);
    Ok(())
}

fn compare(a: CompareArgs, exec: Execution) -> CliResult<()> {
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let base = sample_config(&a.sample)?;
    let spec = denoiser_spec(&a.denoiser)?;
    let (denoiser, dim) = spec.build(base.window_frames())?;
    let mut methods = a.methods.clone();
    methods.sort();
    methods.dedup();
    let configs = methods
        .iter()
        .map(|&method| {
            let c = SampleConfig { method, ..base.clone() };
            c.validate().map(|_| c)
        })
        .collect::<pavd::Result<Vec<_>>>()?;
    let options = CompareOptions {
        seeds: (a.first_seed..a.first_seed + a.seeds).collect(),
        clip_len: base.clip_len,
        scene_window: a.scene_window,
        scene_threshold: a.scene_threshold,
        true_velocity: a.true_velocity,
        reference: spec.reference(),
        exec,
    };
    let table = compare_methods(&configs, denoiser.as_ref(), &VarianceSchedule::default(), dim, &options)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("comparison.csv"), table.to_csv())?;
    fs::write(a.out.join("comparison.json"), table.to_json()?)?;
    println!("{:<12} {:<14} {:>10} {:>10}", "method", "metric", "mean", "95% ci");
    for s in &table.summary {
        println!("{:<12} {:<14} {:>10.4} {:>10.4}", s.method.to_string(), s.metric, s.mean, 1.96 * s.stderr);
    }
    println!("wrote {}", a.out.join("comparison.csv").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = exec(cli.sequential);
    let result = match cli.command {
        Command::GenData(a) => gen_data(a, exec),
        Command::Train(a) => train(a, exec),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a, exec),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `pavd --help` for usage");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
