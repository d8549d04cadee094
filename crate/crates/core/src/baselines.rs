//! Replacement-style autoregressive baselines and an independent-clips control.
//!
//! All three denoise a window of `F` frames that share one level at every step. The
//! replacement methods hold the last `E` frames generated so far at the front of the
//! window and produce `F - E` new frames per clip:
//!
//! - without noise: after every step the condition frames are overwritten with their
//!   clean values (the model sees them labelled with the window's level);
//! - with noise: before every step the condition frames are forward diffused to the
//!   current level with fresh noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{ddim_step, forward_diffuse, LatentSequence};
use crate::error::{Error, Result};
use crate::schedule::{FrameNoiseVector, SamplingSchedule, VarianceSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplacementMethod {
    WithNoise,
    WithoutNoise,
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReplacementConfig {
    /// Window length `F`.
    pub window_len: usize,
    /// Condition length `E`; zero for independent clips.
    pub condition_len: usize,
    pub method: ReplacementMethod,
    /// Sampling steps `S` per clip.
    pub steps: usize,
    pub eta: f64,
    /// Outer iterations `k`.
    pub clips: usize,
    pub seed: u64,
}

impl ReplacementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.window_len == 0 {
            return Err(Error::config("steps S and window length F must be positive"));
        }
        match self.method {
            ReplacementMethod::Independent if self.condition_len != 0 => Err(Error::config(format!(
                "independent clips take no condition frames, got E = {}",
                self.condition_len
            ))),
            ReplacementMethod::WithNoise | ReplacementMethod::WithoutNoise
                if self.condition_len == 0 || self.condition_len >= self.window_len =>
            {
                Err(Error::config(format!(
                    "condition length E = {} must satisfy 0 < E < F = {}",
                    self.condition_len, self.window_len
                )))
            }
            _ if !(0.0..=1.0).contains(&self.eta) => {
                Err(Error::config(format!("eta must lie in [0, 1], got {}", self.eta)))
            }
            _ => Ok(()),
        }
    }

    /// New frames per clip, `F - E`.
    pub fn stride(&self) -> usize {
        self.window_len - self.condition_len
    }

    /// Outer iterations needed so that `seed_len + k * stride >= frames`.
    pub fn clips_for(&self, seed_len: usize, frames: usize) -> usize {
        frames.saturating_sub(seed_len).div_ceil(self.stride())
    }
}

fn uniform(level: f64, frames: usize) -> Result<FrameNoiseVector> {
    FrameNoiseVector::uniform(level, frames, 1)
}

fn overwrite_front(window: &mut LatentSequence, cond: &LatentSequence) {
    let n = cond.as_slice().len();
    window.as_mut_slice()[..n].copy_from_slice(cond.as_slice());
}

/// One clip. `cond` holds the clean condition frames (none for independent clips).
fn sample_clip<D: Denoiser + ?Sized>(
    config: &ReplacementConfig,
    denoiser: &D,
    vs: &VarianceSchedule,
    schedule: &SamplingSchedule,
    cond: Option<&LatentSequence>,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LatentSequence> {
    let f = config.window_len;
    let e = cond.map_or(0, LatentSequence::frames);
    let mut x = LatentSequence::standard_normal(f, dim, rng);
    if let (Some(c), ReplacementMethod::WithoutNoise) = (cond, config.method) {
        overwrite_front(&mut x, c);
    }
    for i in (1..=config.steps).rev() {
        let from = uniform(schedule.level(i), f)?;
        let to = uniform(schedule.level(i - 1), f)?;
        if let (Some(c), ReplacementMethod::WithNoise) = (cond, config.method) {
            let noise = LatentSequence::standard_normal(e, dim, rng);
            let noised = forward_diffuse(c, &uniform(schedule.level(i), e)?, &noise, vs)?;
            overwrite_front(&mut x, &noised);
        }
        let eps = denoiser.predict_eps(&x, &from, vs)?;
        x = ddim_step(&x, &eps, &from, &to, vs, config.eta, rng)?;
        if let (Some(c), ReplacementMethod::WithoutNoise) = (cond, config.method) {
            overwrite_front(&mut x, c);
        }
    }
    Ok(x)
}

/// Shared outer loop: `seed` followed by `clips` strides of new frames.
fn rollout<D: Denoiser + ?Sized>(
    config: &ReplacementConfig,
    denoiser: &D,
    vs: &VarianceSchedule,
    seed: &LatentSequence,
) -> Result<LatentSequence> {
    config.validate()?;
    let e = config.condition_len;
    if seed.frames() < e {
        return Err(Error::shape(format!("seed clip of at least E = {e} frames"), seed.frames()));
    }
    let schedule = SamplingSchedule::linear(vs.max_level(), config.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = seed.clone();
    for _ in 0..config.clips {
        let cond = out.slice_frames(out.frames() - e, out.frames());
        let clip = sample_clip(config, denoiser, vs, &schedule, Some(&cond), seed.dim(), &mut rng)?;
        out.extend(&clip.slice_frames(e, config.window_len));
    }
    Ok(out)
}

/// Replacement without noise: clean condition frames are written back after every step.
pub fn generate_replacement_without_noise<D: Denoiser + ?Sized>(
    config: &ReplacementConfig,
    denoiser: &D,
    vs: &VarianceSchedule,
    seed: &LatentSequence,
) -> Result<LatentSequence> {
    if config.method != ReplacementMethod::WithoutNoise {
        return Err(Error::config("configuration is not for replacement without noise"));
    }
    rollout(config, denoiser, vs, seed)
}

/// Replacement with noise: condition frames are re-noised to the current level with
/// fresh noise before every step.
pub fn generate_replacement_with_noise<D: Denoiser + ?Sized>(
    config: &ReplacementConfig,
    denoiser: &D,
    vs: &VarianceSchedule,
    seed: &LatentSequence,
) -> Result<LatentSequence> {
    if config.method != ReplacementMethod::WithNoise {
        return Err(Error::config("configuration is not for replacement with noise"));
    }
    rollout(config, denoiser, vs, seed)
}

/// `clips` unconditioned windows of `F` frames, concatenated.
pub fn generate_independent_clips<D: Denoiser + ?Sized>(
    config: &ReplacementConfig,
    denoiser: &D,
    vs: &VarianceSchedule,
    dim: usize,
) -> Result<LatentSequence> {
    config.validate()?;
    if config.method != ReplacementMethod::Independent {
        return Err(Error::config("configuration is not for independent clips"));
    }
    if config.clips == 0 || dim == 0 {
        return Err(Error::config("independent generation needs at least one clip and a positive dimension"));
    }
    let schedule = SamplingSchedule::linear(vs.max_level(), config.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = sample_clip(config, denoiser, vs, &schedule, None, dim, &mut rng)?;
    for _ in 1..config.clips {
        out.extend(&sample_clip(config, denoiser, vs, &schedule, None, dim, &mut rng)?);
    }
    Ok(out)
}

/// A single unconditioned window, used to seed the replacement methods.
pub fn generate_seed_clip<D: Denoiser + ?Sized>(
    window_len: usize,
    steps: usize,
    eta: f64,
    denoiser: &D,
    vs: &VarianceSchedule,
    dim: usize,
    seed: u64,
) -> Result<LatentSequence> {
    let config = ReplacementConfig {
        window_len,
        condition_len: 0,
        method: ReplacementMethod::Independent,
        steps,
        eta,
        clips: 1,
        seed,
    };
    generate_independent_clips(&config, denoiser, vs, dim)
}

/// Dispatches on `config.method`. Replacement methods need a seed clip.
pub fn generate_baseline<D: Denoiser + ?Sized>(
    config: &ReplacementConfig,
    denoiser: &D,
    vs: &VarianceSchedule,
    dim: usize,
    seed: Option<&LatentSequence>,
) -> Result<LatentSequence> {
    match (config.method, seed) {
        (ReplacementMethod::Independent, _) => generate_independent_clips(config, denoiser, vs, dim),
        (_, Some(s)) => rollout(config, denoiser, vs, s),
        (_, None) => Err(Error::config("replacement methods need a seed clip")),
    }
}
