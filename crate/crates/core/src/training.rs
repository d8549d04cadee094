//! Training the toy denoiser on clean sequences.
//!
//! Each batch picks one clip length, cuts random clips from the training sequences,
//! draws per-clip levels and noise, and takes one Adam step on the mean squared noise
//! error. Progressive levels are a contiguous run of chunks from the sampling ladder
//! (including the clean chunk when `keep_clean` is set) at a random intra-period offset,
//! shifted by `0.4 * eps * C * T / S` with one `eps` per clip.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, ToyDenoiser, ToyShape};
use crate::diffusion::{forward_diffuse, LatentSequence};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::schedule::{
    perturb_training_levels, progressive_chunk_index, FrameNoiseVector, LevelMode, SamplingSchedule,
    VarianceSchedule,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainLevelMode {
    ProgressivePerturbed,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Sampling steps `S` of the ladder the model is trained for.
    pub sampling_steps: usize,
    pub chunk: usize,
    pub keep_clean: bool,
    /// Allowed clip lengths in frames; each a multiple of `chunk`. Empty means every
    /// multiple of `chunk` up to the full window.
    pub clip_lengths: Vec<usize>,
    pub level_mode: TrainLevelMode,
    pub hidden: usize,
    pub embed: usize,
    pub seed: u64,
    /// Steps between metric rows (and validation passes).
    pub log_every: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub val_fraction: f64,
    /// Validation clips drawn from the held-out sequences.
    pub val_clips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            sampling_steps: 30,
            chunk: 5,
            keep_clean: true,
            clip_lengths: Vec::new(),
            level_mode: TrainLevelMode::ProgressivePerturbed,
            hidden: 32,
            embed: 8,
            seed: 0,
            log_every: 100,
            checkpoint_every: 0,
            val_fraction: 0.1,
            val_clips: 64,
        }
    }
}

impl TrainConfig {
    /// Frames in the longest window the ladder describes.
    pub fn window_len(&self) -> usize {
        self.sampling_steps + if self.keep_clean { self.chunk } else { 0 }
    }

    pub fn lengths(&self) -> Vec<usize> {
        if self.clip_lengths.is_empty() {
            (1..=self.window_len() / self.chunk.max(1)).map(|k| k * self.chunk).collect()
        } else {
            self.clip_lengths.clone()
        }
    }

    pub fn max_clip_len(&self) -> usize {
        self.lengths().into_iter().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk == 0 || self.sampling_steps == 0 || self.sampling_steps % self.chunk != 0 {
            return Err(Error::config(format!(
                "steps S = {} must be a positive multiple of chunk size C = {}",
                self.sampling_steps, self.chunk
            )));
        }
        for &l in &self.lengths() {
            if l == 0 || l % self.chunk != 0 || l > self.window_len() {
                return Err(Error::config(format!(
                    "clip length {l} must be a positive multiple of C = {} no longer than {}",
                    self.chunk,
                    self.window_len()
                )));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_epsilon > 0.0) {
            return Err(Error::config("Adam decay rates must lie in [0, 1) and epsilon must be positive"));
        }
        if self.batch_size == 0 || self.hidden == 0 || self.embed == 0 || self.log_every == 0 {
            return Err(Error::config("batch size, hidden width, embedding size and log cadence must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) || self.val_clips == 0 {
            return Err(Error::config("validation fraction must lie in (0, 1) with at least one clip"));
        }
        Ok(())
    }

    pub fn toy_shape(&self, dim: usize) -> ToyShape {
        ToyShape {
            dim,
            hidden: self.hidden,
            embed: self.embed,
            max_frames: self.max_clip_len(),
        }
    }
}

/// Levels for one training clip of `clip_len` frames.
pub fn sample_training_levels<R: Rng + ?Sized>(
    config: &TrainConfig,
    clip_len: usize,
    vs: &VarianceSchedule,
    rng: &mut R,
) -> Result<FrameNoiseVector> {
    if !config.lengths().contains(&clip_len) {
        return Err(Error::config(format!(
            "clip length {clip_len} is not one of {:?}",
            config.lengths()
        )));
    }
    let schedule = SamplingSchedule::linear(vs.max_level(), config.sampling_steps)?;
    let c = config.chunk;
    match config.level_mode {
        TrainLevelMode::Uniform => {
            let t = rng.random_range(0.0..vs.max_level());
            FrameNoiseVector::new(vec![t; clip_len], c, LevelMode::Uniform)
        }
        TrainLevelMode::ProgressivePerturbed => {
            let r = rng.random_range(0..c);
            let noisy = config.sampling_steps / c;
            let mut ladder: Vec<usize> = (0..noisy).map(|j| progressive_chunk_index(j, c, r)).collect();
            if config.keep_clean {
                ladder.insert(0, 0);
            }
            let k = clip_len / c;
            let offset = rng.random_range(0..=ladder.len() - k);
            let levels = ladder[offset..offset + k]
                .iter()
                .flat_map(|&g| std::iter::repeat_n(schedule.level(g), c))
                .collect();
            let base = FrameNoiseVector::new(levels, c, LevelMode::Progressive)?;
            perturb_training_levels(&base, &schedule, rng)
        }
    }
}

/// One corrupted training example.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub xt: LatentSequence,
    pub levels: FrameNoiseVector,
    pub eps: LatentSequence,
}

impl TrainExample {
    pub fn draw<R: Rng + ?Sized>(
        x0: &LatentSequence,
        config: &TrainConfig,
        vs: &VarianceSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        let levels = sample_training_levels(config, x0.frames(), vs, rng)?;
        let eps = LatentSequence::standard_normal(x0.frames(), x0.dim(), rng);
        let xt = forward_diffuse(x0, &levels, &eps, vs)?;
        Ok(Self { xt, levels, eps })
    }
}

/// Mean loss and mean gradient over `examples`. Per-example work may run in
/// parallel; the reduction is in example order.
pub fn batch_gradient(
    params: &ToyDenoiser,
    examples: &[TrainExample],
    vs: &VarianceSchedule,
    exec: Execution,
) -> Result<(f64, ToyDenoiser)> {
    if examples.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let parts = par::map_slice(examples, exec, |ex| params.loss_and_grad(&ex.xt, &ex.levels, &ex.eps, vs));
    let mut grad = ToyDenoiser::zeros(params.shape())?;
    let mut loss = 0.0;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        for (a, b) in grad.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *a += b;
        }
    }
    let n = examples.len() as f64;
    grad.as_mut_slice().iter_mut().for_each(|v| *v /= n);
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], config: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= config.learning_rate * mh / (vh.sqrt() + config.adam_epsilon);
        }
    }
}

fn describe_batch(examples: &[TrainExample]) -> String {
    let mut out = String::new();
    for (i, ex) in examples.iter().enumerate() {
        let xs = ex.xt.as_slice();
        let max = xs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        out.push_str(&format!(
            "\n  example {i}: chunk levels {:?}, max |x_t| {max:.3e}",
            ex.levels.chunk_levels()
        ));
    }
    out
}

/// Parameters, optimizer state and RNG of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    params: ToyDenoiser,
    adam: AdamState,
    step: u64,
    rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct TrainerFile {
    config: TrainConfig,
    step: u64,
    adam: AdamState,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ToyDenoiser::init(config.toy_shape(dim), &mut rng)?;
        let adam = AdamState::new(params.as_slice().len());
        Ok(Self {
            config,
            params,
            adam,
            step: 0,
            rng,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ToyDenoiser {
        &self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Raises the step budget of a resumed run.
    pub fn extend_to(&mut self, steps: u64) -> Result<()> {
        if steps < self.step {
            return Err(Error::config(format!(
                "cannot train to step {steps}: the checkpoint is already at step {}",
                self.step
            )));
        }
        self.config.steps = steps;
        Ok(())
    }

    /// Cuts `batch_size` random clips of one random allowed length from `sequences`.
    pub fn sample_clips(&mut self, sequences: &[LatentSequence]) -> Result<Vec<LatentSequence>> {
        let lengths = self.config.lengths();
        let len = lengths[self.rng.random_range(0..lengths.len())];
        (0..self.config.batch_size)
            .map(|_| {
                let s = &sequences[self.rng.random_range(0..sequences.len())];
                if s.frames() < len {
                    return Err(Error::shape(format!("sequences of at least {len} frames"), s.frames()));
                }
                let start = self.rng.random_range(0..=s.frames() - len);
                Ok(s.slice_frames(start, start + len))
            })
            .collect()
    }

    /// Corrupts `clips`, takes one optimizer step and returns the pre-update loss.
    pub fn train_step(&mut self, clips: &[LatentSequence], vs: &VarianceSchedule, exec: Execution) -> Result<f64> {
        let examples = clips
            .iter()
            .map(|x0| TrainExample::draw(x0, &self.config, vs, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grad) = batch_gradient(&self.params, &examples, vs, exec)?;
        if !loss.is_finite() || grad.as_slice().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "training loss {loss} at step {}{}",
                self.step,
                describe_batch(&examples)
            )));
        }
        self.adam
            .update(self.params.as_mut_slice(), grad.as_slice(), &self.config);
        self.step += 1;
        Ok(loss)
    }

    /// Writes `<stem>.bin`/`<stem>.json` (parameters) and `<stem>.train.json` (step,
    /// optimizer moments, RNG state).
    pub fn save(&self, stem: &Path) -> Result<()> {
        self.params.save(stem)?;
        let file = TrainerFile {
            config: self.config.clone(),
            step: self.step,
            adam: self.adam.clone(),
            rng: self.rng.clone(),
        };
        fs::write(trainer_state_path(stem), serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let params = ToyDenoiser::load(stem)?;
        let path = trainer_state_path(stem);
        let file: TrainerFile = serde_json::from_slice(&fs::read(&path)?)?;
        file.config.validate()?;
        if file.adam.m.len() != params.as_slice().len() || file.adam.v.len() != params.as_slice().len() {
            return Err(Error::Format {
                path,
                reason: "optimizer state does not match the parameter count".into(),
            });
        }
        Ok(Self {
            config: file.config,
            params,
            adam: file.adam,
            step: file.step,
            rng: file.rng,
        })
    }
}

fn trainer_state_path(stem: &Path) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".train.json");
    PathBuf::from(s)
}

pub const LEVEL_BANDS: [&str; 3] = ["low", "mid", "high"];

/// Band of a level: `[0, T/3)`, `[T/3, 2T/3)`, `[2T/3, T]`.
pub fn level_band(t: f64, max_level: f64) -> usize {
    ((3.0 * t / max_level).floor() as usize).min(2)
}

/// Fixed held-out examples drawn from the training level distribution.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub examples: Vec<TrainExample>,
}

impl ValidationSet {
    pub fn draw(sequences: &[LatentSequence], config: &TrainConfig, vs: &VarianceSchedule, count: usize, seed: u64) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::config("no validation sequences"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lengths = config.lengths();
        let examples = (0..count)
            .map(|i| {
                let len = lengths[i % lengths.len()];
                let s = &sequences[rng.random_range(0..sequences.len())];
                if s.frames() < len {
                    return Err(Error::shape(format!("sequences of at least {len} frames"), s.frames()));
                }
                let start = rng.random_range(0..=s.frames() - len);
                TrainExample::draw(&s.slice_frames(start, start + len), config, vs, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { examples })
    }

    /// Per-band mean squared error over noisy frames. Frames at level 0 carry no
    /// recoverable noise and are skipped. Empty bands report NaN.
    pub fn band_mse<D: Denoiser + ?Sized>(&self, denoiser: &D, vs: &VarianceSchedule, exec: Execution) -> Result<[f64; 3]> {
        let parts = par::map_slice(&self.examples, exec, |ex| -> Result<[(f64, usize); 3]> {
            let pred = denoiser.predict_eps(&ex.xt, &ex.levels, vs)?;
            let mut acc = [(0.0, 0usize); 3];
            for (f, &t) in ex.levels.levels().iter().enumerate() {
                if t == 0.0 {
                    continue;
                }
                let b = level_band(t, vs.max_level());
                for (p, e) in pred.frame(f).iter().zip(ex.eps.frame(f)) {
                    acc[b].0 += (p - e) * (p - e);
                    acc[b].1 += 1;
                }
            }
            Ok(acc)
        });
        let mut tot = [(0.0, 0usize); 3];
        for p in parts {
            for (t, a) in tot.iter_mut().zip(p?) {
                t.0 += a.0;
                t.1 += a.1;
            }
        }
        Ok(tot.map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 }))
    }

    /// Mean squared error over every noisy frame.
    pub fn mse<D: Denoiser + ?Sized>(&self, denoiser: &D, vs: &VarianceSchedule, exec: Execution) -> Result<f64> {
        let parts = par::map_slice(&self.examples, exec, |ex| -> Result<(f64, usize)> {
            let pred = denoiser.predict_eps(&ex.xt, &ex.levels, vs)?;
            let mut acc = (0.0, 0);
            for (f, &t) in ex.levels.levels().iter().enumerate() {
                if t > 0.0 {
                    for (p, e) in pred.frame(f).iter().zip(ex.eps.frame(f)) {
                        acc.0 += (p - e) * (p - e);
                        acc.1 += 1;
                    }
                }
            }
            Ok(acc)
        });
        let (mut s, mut n) = (0.0, 0);
        for p in parts {
            let (a, b) = p?;
            s += a;
            n += b;
        }
        Ok(s / n.max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsRow {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss_low: f64,
    pub val_loss_mid: f64,
    pub val_loss_high: f64,
}

pub const METRICS_HEADER: &str = "step,trainLoss,valLossLow,valLossMid,valLossHigh";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.train_loss, self.val_loss_low, self.val_loss_mid, self.val_loss_high
        )
    }
}

/// Splits off the last `fraction` of the sequences (at least one) for validation.
pub fn split_dataset(sequences: &[LatentSequence], fraction: f64) -> Result<(&[LatentSequence], &[LatentSequence])> {
    if sequences.len() < 2 {
        return Err(Error::config("need at least two sequences to hold one out for validation"));
    }
    let n_val = ((sequences.len() as f64 * fraction).round() as usize).clamp(1, sequences.len() - 1);
    Ok(sequences.split_at(sequences.len() - n_val))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub rows: Vec<MetricsRow>,
}

/// Full training loop from `trainer`'s current step to `config.steps`.
///
/// In `out_dir` it appends to `metrics.csv` (creating it with a header) and writes
/// `checkpoint` plus `checkpoint-<step>` files at the checkpoint cadence.
pub fn train_run(
    mut trainer: Trainer,
    sequences: &[LatentSequence],
    vs: &VarianceSchedule,
    out_dir: Option<&Path>,
    exec: Execution,
) -> Result<TrainOutcome> {
    let config = trainer.config.clone();
    let (train, val) = split_dataset(sequences, config.val_fraction)?;
    let val_set = ValidationSet::draw(val, &config, vs, config.val_clips, config.seed ^ 0x5eed_0f_7a11)?;
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("metrics.csv");
            let fresh = !path.exists() || trainer.step == 0;
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(path)?;
            if fresh {
                writeln!(f, "{METRICS_HEADER}")?;
            }
            Some(f)
        }
        None => None,
    };
    let mut rows = Vec::new();
    let mut window = (0.0, 0u64);
    while trainer.step < config.steps {
        let clips = trainer.sample_clips(train)?;
        let loss = trainer.train_step(&clips, vs, exec)?;
        window.0 += loss;
        window.1 += 1;
        let step = trainer.step;
        if step % config.log_every == 0 {
            let [lo, mid, hi] = val_set.band_mse(&trainer.params, vs, exec)?;
            let row = MetricsRow {
                step,
                train_loss: window.0 / window.1 as f64,
                val_loss_low: lo,
                val_loss_mid: mid,
                val_loss_high: hi,
            };
            if let Some(f) = csv.as_mut() {
                writeln!(f, "{}", row.csv())?;
            }
            rows.push(row);
            window = (0.0, 0);
        }
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                trainer.save(&dir.join(format!("checkpoint-{step}")))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        trainer.save(&dir.join("checkpoint"))?;
    }
    Ok(TrainOutcome { trainer, rows })
}
