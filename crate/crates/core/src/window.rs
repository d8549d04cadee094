//! Progressive autoregressive sampling over a sliding window of chunks.
//!
//! The window holds up to `S / C` noisy chunks whose levels rise from the oldest to the
//! newest, optionally preceded by one clean chunk. Each sampling step moves every noisy
//! chunk one grid index down. After `C` steps the oldest noisy chunk is clean; the
//! period boundary ([`WindowState::shift_window`]) emits it and appends a fresh chunk
//! of pure noise at level `T`.
//!
//! Phases:
//! - `Initializing`: started from a single noisy chunk; boundaries append without
//!   removing until the window has its steady shape.
//! - `Steady`: every boundary emits one chunk and appends one.
//! - `Terminating`: boundaries emit without appending until no noisy chunk is left.
//! - `Done`.
//!
//! Frames are emitted as soon as they are fully denoised. With `keep_clean` the emitted
//! chunk also stays at the front of the window as read-only clean context, replacing
//! the previous one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{ddim_step, forward_diffuse, LatentSequence};
use crate::error::{Error, Result};
use crate::schedule::{FrameNoiseVector, LevelMode, SamplingSchedule, VarianceSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GenerationConfig {
    /// Sampling steps `S`; also the number of noisy frames in a steady window.
    pub steps: usize,
    /// Chunk size `C`.
    pub chunk: usize,
    pub eta: f64,
    /// Frames to emit, `N_f`. With termination this includes the drained window.
    pub total_frames: usize,
    pub keep_clean: bool,
    /// Grow the window from one chunk of noise instead of starting from a given clip.
    pub init_from_noise: bool,
    pub terminate: bool,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            chunk: 5,
            eta: 0.0,
            total_frames: 1000,
            keep_clean: true,
            init_from_noise: true,
            terminate: false,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.chunk == 0 {
            return Err(Error::config("steps S and chunk size C must be positive"));
        }
        if self.steps % self.chunk != 0 {
            return Err(Error::config(format!(
                "steps S = {} must be divisible by chunk size C = {}",
                self.steps, self.chunk
            )));
        }
        if self.total_frames % self.chunk != 0 {
            return Err(Error::config(format!(
                "frame count N = {} must be divisible by chunk size C = {}",
                self.total_frames, self.chunk
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        Ok(())
    }

    pub fn chunks_per_window(&self) -> usize {
        self.steps / self.chunk
    }

    /// Frames in a steady window: `S`, or `S + C` with a clean chunk.
    pub fn window_len(&self) -> usize {
        self.steps + if self.keep_clean { self.chunk } else { 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Initializing,
    Steady,
    Terminating,
    Done,
}

/// A frame that has left the noisy part of the window.
#[derive(Debug, Clone, PartialEq)]
pub struct EmittedFrame {
    /// Period boundary at which the frame was emitted.
    pub period: u64,
    /// Position in the output sequence.
    pub index: u64,
    /// Period in which the frame entered the window as noise.
    pub created: u64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Chunk {
    data: Vec<f64>,
    /// Grid index of the chunk's level; 0 once clean.
    grid: usize,
    /// Kept-clean context; never denoised again and never re-emitted.
    context: bool,
    created: u64,
}

/// Live state of one generation. Single owner; the RNG is part of the state.
#[derive(Debug, Clone)]
pub struct WindowState {
    config: GenerationConfig,
    schedule: SamplingSchedule,
    dim: usize,
    chunks: Vec<Chunk>,
    phase: Phase,
    r: usize,
    steps_this_period: usize,
    period: u64,
    total_steps: u64,
    created_frames: u64,
    emitted_frames: u64,
    emitted: Vec<EmittedFrame>,
    rng: ChaCha8Rng,
}

impl WindowState {
    fn empty(config: &GenerationConfig, vs: &VarianceSchedule, dim: usize) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::config("frame dimension must be positive"));
        }
        Ok(Self {
            config: config.clone(),
            schedule: SamplingSchedule::linear(vs.max_level(), config.steps)?,
            dim,
            chunks: Vec::new(),
            phase: Phase::Initializing,
            r: 0,
            steps_this_period: 0,
            period: 0,
            total_steps: 0,
            created_frames: 0,
            emitted_frames: 0,
            emitted: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }

    /// Starts from a clean clip of `window_len()` frames. Noisy chunks are forward
    /// diffused to the `r = 0` progressive levels; a leading clean chunk is kept as is.
    pub fn init_from_video(x0: &LatentSequence, config: &GenerationConfig, vs: &VarianceSchedule) -> Result<Self> {
        let mut s = Self::empty(config, vs, x0.dim())?;
        if x0.frames() != config.window_len() {
            return Err(Error::shape(
                format!("initial clip of {} frames", config.window_len()),
                x0.frames(),
            ));
        }
        let c = config.chunk;
        let prefix = if config.keep_clean { c } else { 0 };
        if config.keep_clean {
            s.chunks.push(Chunk {
                data: x0.slice_frames(0, c).into_vec(),
                grid: 0,
                context: true,
                created: 0,
            });
        }
        let noisy = x0.slice_frames(prefix, x0.frames());
        let grids: Vec<usize> = (0..config.chunks_per_window()).map(|j| (j + 1) * c).collect();
        let levels = FrameNoiseVector::new(
            grids
                .iter()
                .flat_map(|&g| std::iter::repeat_n(s.schedule.level(g), c))
                .collect(),
            c,
            LevelMode::Progressive,
        )?;
        let noise = LatentSequence::standard_normal(noisy.frames(), s.dim, &mut s.rng);
        let xt = forward_diffuse(&noisy, &levels, &noise, vs)?;
        for (j, &g) in grids.iter().enumerate() {
            s.chunks.push(Chunk {
                data: xt.slice_frames(j * c, (j + 1) * c).into_vec(),
                grid: g,
                context: false,
                created: 0,
            });
        }
        s.created_frames = config.steps as u64;
        s.phase = Phase::Steady;
        Ok(s)
    }

    /// Starts from a single chunk of standard-normal noise at level `T`.
    pub fn init_from_noise(config: &GenerationConfig, vs: &VarianceSchedule, dim: usize) -> Result<Self> {
        if !config.init_from_noise {
            return Err(Error::config("initialization from noise is disabled in this configuration"));
        }
        let mut s = Self::empty(config, vs, dim)?;
        s.append_fresh();
        s.update_phase();
        Ok(s)
    }

    fn append_fresh(&mut self) {
        let n = self.config.chunk * self.dim;
        let data = (0..n).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        self.chunks.push(Chunk {
            data,
            grid: self.config.steps,
            context: false,
            created: self.period,
        });
        self.created_frames += self.config.chunk as u64;
    }

    fn has_context(&self) -> bool {
        self.chunks.first().is_some_and(|c| c.context)
    }

    fn noisy_chunks(&self) -> usize {
        self.chunks.len() - usize::from(self.has_context())
    }

    fn update_phase(&mut self) {
        match self.phase {
            Phase::Initializing => {
                let full = self.noisy_chunks() == self.config.chunks_per_window();
                if full && (!self.config.keep_clean || self.has_context()) {
                    self.phase = Phase::Steady;
                }
            }
            Phase::Terminating if self.noisy_chunks() == 0 => {
                self.chunks.clear();
                self.phase = Phase::Done;
            }
            _ => {}
        }
    }

    pub fn config(&self) -> &GenerationConfig {
        &self.config
    }

    pub fn schedule(&self) -> &SamplingSchedule {
        &self.schedule
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Intra-period step counter `r` in `[0, C)`.
    pub fn intra_period_step(&self) -> usize {
        self.r
    }

    /// Completed period boundaries.
    pub fn period(&self) -> u64 {
        self.period
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn window_frames(&self) -> usize {
        self.chunks.len() * self.config.chunk
    }

    /// Frames that are still noisy.
    pub fn pending_frames(&self) -> usize {
        self.noisy_chunks() * self.config.chunk
    }

    pub fn created_frames(&self) -> u64 {
        self.created_frames
    }

    pub fn emitted_frames(&self) -> u64 {
        self.emitted_frames
    }

    /// Per-chunk grid indices, oldest first; the clean context chunk reports 0.
    pub fn chunk_grid_indices(&self) -> Vec<usize> {
        self.chunks.iter().map(|c| c.grid).collect()
    }

    pub fn has_clean_context(&self) -> bool {
        self.has_context()
    }

    /// Current window latents, or `None` once the window is empty.
    pub fn frames(&self) -> Option<LatentSequence> {
        if self.chunks.is_empty() {
            return None;
        }
        let data = self.chunks.iter().flat_map(|c| c.data.iter().copied()).collect();
        Some(LatentSequence::new(self.window_frames(), self.dim, data).expect("window latents are finite"))
    }

    fn levels_for(&self, grids: impl Iterator<Item = usize>) -> Result<FrameNoiseVector> {
        let c = self.config.chunk;
        let levels = grids.flat_map(|g| std::iter::repeat_n(self.schedule.level(g), c)).collect();
        FrameNoiseVector::new(levels, c, LevelMode::Progressive)
    }

    /// Current per-frame levels, or `None` once the window is empty.
    pub fn levels(&self) -> Option<FrameNoiseVector> {
        if self.chunks.is_empty() {
            return None;
        }
        Some(self.levels_for(self.chunks.iter().map(|c| c.grid)).expect("window levels are progressive"))
    }

    /// True when `C` steps have run since the last boundary.
    pub fn at_period_end(&self) -> bool {
        self.steps_this_period == self.config.chunk
    }

    /// One denoising step over the whole window: every noisy chunk moves one grid index
    /// down, clean frames pass through.
    pub fn sample_step<D: Denoiser + ?Sized>(&mut self, denoiser: &D, vs: &VarianceSchedule) -> Result<()> {
        if self.phase == Phase::Done {
            return Err(Error::Phase("generation is finished".into()));
        }
        if self.at_period_end() {
            return Err(Error::Phase("period complete; shift the window before stepping again".into()));
        }
        let xt = self.frames().ok_or_else(|| Error::Phase("window is empty".into()))?;
        let from = self.levels().expect("non-empty window");
        let to = self.levels_for(self.chunks.iter().map(|c| c.grid.saturating_sub(1)))?;
        let eps = denoiser.predict_eps(&xt, &from, vs)?;
        let next = ddim_step(&xt, &eps, &from, &to, vs, self.config.eta, &mut self.rng)?;
        let width = self.config.chunk * self.dim;
        for (chunk, rows) in self.chunks.iter_mut().zip(next.as_slice().chunks_exact(width)) {
            if chunk.grid > 0 {
                chunk.data.copy_from_slice(rows);
                chunk.grid -= 1;
            }
        }
        self.r = (self.r + 1) % self.config.chunk;
        self.steps_this_period += 1;
        self.total_steps += 1;
        Ok(())
    }

    /// Period boundary. A fully denoised oldest chunk is emitted and leaves the noisy
    /// part of the window (staying as clean context with `keep_clean`); a fresh noise
    /// chunk at level `T` is appended unless terminating. During initialization there
    /// may be nothing to emit and the window only grows.
    pub fn shift_window(&mut self) -> Result<()> {
        if self.phase == Phase::Done {
            return Err(Error::Phase("generation is finished".into()));
        }
        if !self.at_period_end() {
            return Err(Error::Phase(format!(
                "shift requested after {} of {} steps in the period",
                self.steps_this_period, self.config.chunk
            )));
        }
        let first = usize::from(self.has_context());
        if self.chunks.get(first).is_some_and(|c| c.grid == 0) {
            let done = self.chunks[first].clone();
            for row in done.data.chunks_exact(self.dim) {
                self.emitted.push(EmittedFrame {
                    period: self.period,
                    index: self.emitted_frames,
                    created: done.created,
                    values: row.to_vec(),
                });
                self.emitted_frames += 1;
            }
            if self.config.keep_clean {
                if first == 1 {
                    self.chunks.remove(0);
                }
                self.chunks[0].context = true;
            } else {
                self.chunks.remove(0);
            }
        } else if self.phase != Phase::Initializing {
            return Err(Error::Phase("oldest noisy chunk is not clean at the period boundary".into()));
        }
        self.period += 1;
        if self.phase != Phase::Terminating {
            self.append_fresh();
        }
        self.steps_this_period = 0;
        self.update_phase();
        Ok(())
    }

    /// Stops appending; subsequent periods drain the window. Only valid at a boundary.
    pub fn begin_termination(&mut self) -> Result<()> {
        match self.phase {
            Phase::Done | Phase::Terminating => Err(Error::Phase("already terminating".into())),
            _ if self.steps_this_period != 0 => Err(Error::Phase("termination must start at a period boundary".into())),
            _ => {
                self.phase = Phase::Terminating;
                self.update_phase();
                Ok(())
            }
        }
    }

    /// Runs the termination stage to completion, emitting every remaining frame.
    pub fn terminate<D: Denoiser + ?Sized>(&mut self, denoiser: &D, vs: &VarianceSchedule) -> Result<()> {
        if self.phase != Phase::Terminating {
            self.begin_termination()?;
        }
        while self.phase != Phase::Done {
            for _ in 0..self.config.chunk {
                self.sample_step(denoiser, vs)?;
            }
            self.shift_window()?;
        }
        Ok(())
    }

    /// Emitted frames not yet taken.
    pub fn emitted(&self) -> &[EmittedFrame] {
        &self.emitted
    }

    pub fn take_emitted(&mut self) -> Vec<EmittedFrame> {
        std::mem::take(&mut self.emitted)
    }

    fn run_period<D: Denoiser + ?Sized, S: FrameSink + ?Sized>(
        &mut self,
        denoiser: &D,
        vs: &VarianceSchedule,
        sink: &mut S,
    ) -> Result<()> {
        for _ in 0..self.config.chunk {
            self.sample_step(denoiser, vs)?;
            sink.on_step(self)?;
        }
        self.shift_window()?;
        sink.on_period(self)?;
        let frames = self.take_emitted();
        if !frames.is_empty() {
            sink.on_emit(&frames)?;
        }
        Ok(())
    }
}

/// Receives progress and emitted frames during [`generate_into`].
pub trait FrameSink {
    fn on_emit(&mut self, frames: &[EmittedFrame]) -> Result<()>;

    /// Called after every sampling step.
    fn on_step(&mut self, _state: &WindowState) -> Result<()> {
        Ok(())
    }

    /// Called after every period boundary, before the emitted frames are handed over.
    fn on_period(&mut self, _state: &WindowState) -> Result<()> {
        Ok(())
    }
}

/// Collects every emitted frame in memory.
#[derive(Debug, Default)]
pub struct CollectSink {
    pub frames: Vec<EmittedFrame>,
}

impl FrameSink for CollectSink {
    fn on_emit(&mut self, frames: &[EmittedFrame]) -> Result<()> {
        self.frames.extend_from_slice(frames);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerationSummary {
    pub periods: u64,
    pub steps: u64,
    pub emitted: u64,
}

/// Full generation loop, streaming emitted frames to `sink`.
///
/// `x0` must be given exactly when `init_from_noise` is off. Without termination the
/// loop stops once `total_frames` have been emitted. With termination it switches to
/// draining as soon as emitted plus still-noisy frames reach `total_frames`, so the
/// output has exactly `total_frames` frames.
pub fn generate_into<D: Denoiser + ?Sized, S: FrameSink + ?Sized>(
    config: &GenerationConfig,
    denoiser: &D,
    vs: &VarianceSchedule,
    dim: usize,
    x0: Option<&LatentSequence>,
    sink: &mut S,
) -> Result<GenerationSummary> {
    let mut state = match (x0, config.init_from_noise) {
        (Some(x0), false) => {
            if x0.dim() != dim {
                return Err(Error::shape(format!("initial clip of dim {dim}"), x0.dim()));
            }
            WindowState::init_from_video(x0, config, vs)?
        }
        (None, true) => WindowState::init_from_noise(config, vs, dim)?,
        (Some(_), true) => return Err(Error::config("an initial clip was given but init_from_noise is on")),
        (None, false) => return Err(Error::config("init_from_noise is off and no initial clip was given")),
    };
    let target = config.total_frames as u64;
    if config.terminate && (state.pending_frames() as u64) > target {
        return Err(Error::config(format!(
            "frame count N = {target} is smaller than the {} frames drained at termination",
            state.pending_frames()
        )));
    }
    loop {
        if state.phase() == Phase::Done {
            break;
        }
        if state.phase() != Phase::Terminating {
            if config.terminate {
                if state.emitted_frames() + state.pending_frames() as u64 >= target {
                    state.begin_termination()?;
                    continue;
                }
            } else if state.emitted_frames() >= target {
                break;
            }
        }
        state.run_period(denoiser, vs, sink)?;
    }
    Ok(GenerationSummary {
        periods: state.period(),
        steps: state.total_steps(),
        emitted: state.emitted_frames(),
    })
}

/// Runs [`generate_into`] and returns the emitted frames in temporal order.
pub fn generate<D: Denoiser + ?Sized>(
    config: &GenerationConfig,
    denoiser: &D,
    vs: &VarianceSchedule,
    dim: usize,
    x0: Option<&LatentSequence>,
) -> Result<LatentSequence> {
    let mut sink = CollectSink::default();
    generate_into(config, denoiser, vs, dim, x0, &mut sink)?;
    if sink.frames.is_empty() {
        return Err(Error::config("generation emitted no frames"));
    }
    let data = sink.frames.iter().flat_map(|f| f.values.iter().copied()).collect();
    LatentSequence::new(sink.frames.len(), dim, data)
}
