//! Sampling runs: method dispatch, run directories and replay.
//!
//! A run directory holds
//!
//! ```text
//! manifest.json   everything needed to re-run bit-exactly
//! frames.bin      per frame: period u64 | frame index u64 | dim x f64, little-endian
//! metrics.csv     per-clip curves
//! report.json     scalar summaries
//! plots/*.svg     one chart per clip metric
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::baselines::{generate_baseline, generate_seed_clip, ReplacementConfig, ReplacementMethod};
use crate::data::read_dataset;
use crate::denoiser::{build_ar1_prior, AnalyticDenoiser, Denoiser, ToyDenoiser, ZeroDenoiser};
use crate::diffusion::LatentSequence;
use crate::error::{Error, Result};
use crate::eval::{
    compute_clip_metrics, detect_scene_changes, line_chart, MetricReport, ReferenceStats, DEFAULT_CLIP_LEN,
    DEFAULT_SCENE_THRESHOLD, DEFAULT_SCENE_WINDOW, METRIC_NAMES,
};
use crate::schedule::{ScheduleDocument, ScheduleKind, VarianceSchedule};
use crate::window::{generate_into, EmittedFrame, FrameSink, GenerationConfig};

pub const RUN_FORMAT: &str = "pavd-run";

/// Offset mixed into the run seed for the unconditioned clip that seeds the
/// replacement baselines, so it does not share a noise stream with the rollout.
const SEED_CLIP_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Progressive autoregressive window.
    Pa,
    /// Replacement with noise.
    Rw,
    /// Replacement without noise.
    Rn,
    Independent,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Pa, Method::Rw, Method::Rn, Method::Independent];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pa => "pa",
            Method::Rw => "rw",
            Method::Rn => "rn",
            Method::Independent => "independent",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method {s:?}; expected pa, rw, rn or independent")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SampleConfig {
    pub method: Method,
    pub steps: usize,
    pub chunk: usize,
    /// Frames to produce.
    pub frames: usize,
    pub keep_clean: bool,
    pub eta: f64,
    pub terminate: bool,
    pub seed: u64,
    /// Dataset whose first sequence provides the starting clip.
    pub init_video: Option<PathBuf>,
    /// Replacement condition length `E`; defaults to one chunk.
    pub condition_len: Option<usize>,
    pub clip_len: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            method: Method::Pa,
            steps: 30,
            chunk: 5,
            frames: 1000,
            keep_clean: true,
            eta: 0.0,
            terminate: false,
            seed: 0,
            init_video: None,
            condition_len: None,
            clip_len: DEFAULT_CLIP_LEN,
        }
    }
}

impl SampleConfig {
    /// Frames the denoiser sees at once: `S + C` with a clean chunk, else `S`. The
    /// baselines use the same window so all methods share one denoiser.
    pub fn window_frames(&self) -> usize {
        self.steps + if self.keep_clean { self.chunk } else { 0 }
    }

    pub fn generation_config(&self) -> GenerationConfig {
        GenerationConfig {
            steps: self.steps,
            chunk: self.chunk,
            eta: self.eta,
            total_frames: self.frames,
            keep_clean: self.keep_clean,
            init_from_noise: self.init_video.is_none(),
            terminate: self.terminate,
            seed: self.seed,
        }
    }

    pub fn replacement_config(&self) -> ReplacementConfig {
        let (method, e) = match self.method {
            Method::Independent => (ReplacementMethod::Independent, 0),
            Method::Rn => (ReplacementMethod::WithoutNoise, self.condition_len.unwrap_or(self.chunk)),
            _ => (ReplacementMethod::WithNoise, self.condition_len.unwrap_or(self.chunk)),
        };
        let mut c = ReplacementConfig {
            window_len: self.window_frames(),
            condition_len: e,
            method,
            steps: self.steps,
            eta: self.eta,
            clips: 0,
            seed: self.seed,
        };
        c.clips = match method {
            ReplacementMethod::Independent => self.frames.div_ceil(c.window_len.max(1)),
            _ => c.clips_for(c.window_len, self.frames),
        };
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::config("frame count N must be positive"));
        }
        match self.method {
            Method::Pa => self.generation_config().validate(),
            _ => {
                if self.steps == 0 || self.chunk == 0 {
                    return Err(Error::config("steps S and chunk size C must be positive"));
                }
                self.replacement_config().validate()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DenoiserSpec {
    /// Exact posterior under a stationary AR(1) prior sized to the run's window.
    AnalyticAr1 { rho: f64, sigma: f64, dim: usize },
    /// Trained toy network; `checkpoint` is the stem of the `.bin`/`.json` pair.
    Toy { checkpoint: PathBuf },
    Zero { dim: usize },
}

impl DenoiserSpec {
    /// Builds the denoiser for windows of up to `window` frames; returns it with the
    /// frame dimension.
    pub fn build(&self, window: usize) -> Result<(Box<dyn Denoiser>, usize)> {
        match self {
            DenoiserSpec::AnalyticAr1 { rho, sigma, dim } => Ok((
                Box::new(AnalyticDenoiser::new(build_ar1_prior(*rho, *sigma, window, *dim)?)),
                *dim,
            )),
            DenoiserSpec::Toy { checkpoint } => {
                let toy = ToyDenoiser::load(checkpoint)?;
                let shape = toy.shape();
                if shape.max_frames < window {
                    return Err(Error::config(format!(
                        "checkpoint handles at most {} frames but the window has {window}",
                        shape.max_frames
                    )));
                }
                Ok((Box::new(toy), shape.dim))
            }
            DenoiserSpec::Zero { dim } => Ok((Box::new(ZeroDenoiser), *dim)),
        }
    }

    /// Stationary statistics of the prior, when known in closed form.
    pub fn reference(&self) -> Option<ReferenceStats> {
        match self {
            DenoiserSpec::AnalyticAr1 { rho, sigma, .. } => Some(ReferenceStats {
                mean: 0.0,
                variance: sigma * sigma,
                autocorr: *rho,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub method: Method,
    pub sample: SampleConfig,
    pub denoiser: DenoiserSpec,
    pub schedule: ScheduleDocument,
    pub dim: usize,
    /// Frames written to `frames.bin`; zero until the run finishes.
    pub frame_count: usize,
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new(sample: SampleConfig, denoiser: DenoiserSpec, variance: ScheduleKind, max_level: f64) -> Result<Self> {
        sample.validate()?;
        let (_, dim) = denoiser.build(sample.window_frames())?;
        Ok(Self {
            format: RUN_FORMAT.into(),
            version: 1,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            method: sample.method,
            schedule: ScheduleDocument {
                variance,
                max_level,
                steps: sample.steps,
            },
            sample,
            denoiser,
            dim,
            frame_count: 0,
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let m: RunManifest = serde_json::from_slice(&fs::read(&path)?)?;
        if m.format != RUN_FORMAT || m.version != 1 {
            return Err(Error::Format {
                path,
                reason: format!("unsupported run format {} v{}", m.format, m.version),
            });
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// One row of `frames.bin`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub period: u64,
    pub index: u64,
    pub values: Vec<f64>,
}

impl From<&EmittedFrame> for FrameRecord {
    fn from(f: &EmittedFrame) -> Self {
        Self {
            period: f.period,
            index: f.index,
            values: f.values.clone(),
        }
    }
}

/// Append-only writer for `frames.bin`.
pub struct FrameLog {
    out: BufWriter<fs::File>,
    written: usize,
}

impl FrameLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(fs::File::create(path)?),
            written: 0,
        })
    }

    pub fn append(&mut self, period: u64, index: u64, values: &[f64]) -> Result<()> {
        self.out.write_all(&period.to_le_bytes())?;
        self.out.write_all(&index.to_le_bytes())?;
        for v in values {
            self.out.write_all(&v.to_le_bytes())?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> usize {
        self.written
    }

    pub fn finish(mut self) -> Result<usize> {
        self.out.flush()?;
        Ok(self.written)
    }
}

pub fn read_frame_log(path: &Path, dim: usize) -> Result<Vec<FrameRecord>> {
    let bytes = fs::read(path)?;
    let row = 16 + 8 * dim;
    if dim == 0 || bytes.len() % row != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{} bytes is not a whole number of {row}-byte frames", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(row)
        .map(|r| {
            let u = |i: usize| u64::from_le_bytes(r[i..i + 8].try_into().expect("8 bytes"));
            FrameRecord {
                period: u(0),
                index: u(8),
                values: r[16..]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            }
        })
        .collect())
}

pub fn records_to_sequence(records: &[FrameRecord], dim: usize) -> Result<LatentSequence> {
    let data = records.iter().flat_map(|r| r.values.iter().copied()).collect();
    LatentSequence::new(records.len(), dim, data)
}

struct Streaming<'a> {
    log: Option<&'a mut FrameLog>,
    kept: Vec<FrameRecord>,
    limit: u64,
}

impl FrameSink for Streaming<'_> {
    fn on_emit(&mut self, frames: &[EmittedFrame]) -> Result<()> {
        for f in frames.iter().filter(|f| f.index < self.limit) {
            if let Some(log) = self.log.as_deref_mut() {
                log.append(f.period, f.index, &f.values)?;
            }
            self.kept.push(f.into());
        }
        Ok(())
    }
}

fn initial_clip(path: &Path, frames: usize) -> Result<LatentSequence> {
    let ds = read_dataset(path)?;
    let first = &ds.sequences[0];
    if first.frames() < frames {
        return Err(Error::shape(format!("initial video of at least {frames} frames"), first.frames()));
    }
    Ok(first.slice_frames(0, frames))
}

/// Produces `config.frames` frames with the configured method, streaming them to
/// `log` when given.
pub fn sample_records(
    config: &SampleConfig,
    denoiser: &dyn Denoiser,
    vs: &VarianceSchedule,
    dim: usize,
    log: Option<&mut FrameLog>,
) -> Result<Vec<FrameRecord>> {
    config.validate()?;
    let window = config.window_frames();
    let init = config.init_video.as_deref().map(|p| initial_clip(p, window)).transpose()?;
    if let Method::Pa = config.method {
        let mut sink = Streaming {
            log,
            kept: Vec::new(),
            limit: config.frames as u64,
        };
        generate_into(&config.generation_config(), denoiser, vs, dim, init.as_ref(), &mut sink)?;
        return Ok(sink.kept);
    }
    let rc = config.replacement_config();
    let seq = match rc.method {
        ReplacementMethod::Independent => generate_baseline(&rc, denoiser, vs, dim, None)?,
        _ => {
            let seed = match init {
                Some(clip) => clip,
                None => generate_seed_clip(window, config.steps, config.eta, denoiser, vs, dim, config.seed ^ SEED_CLIP_SALT)?,
            };
            generate_baseline(&rc, denoiser, vs, dim, Some(&seed))?
        }
    };
    let stride = rc.stride();
    let mut out = Vec::with_capacity(config.frames);
    let mut log = log;
    for (i, row) in seq.rows().take(config.frames).enumerate() {
        let period = match rc.method {
            ReplacementMethod::Independent => i / window,
            _ if i < window => 0,
            _ => 1 + (i - window) / stride,
        } as u64;
        if let Some(l) = log.as_deref_mut() {
            l.append(period, i as u64, row)?;
        }
        out.push(FrameRecord {
            period,
            index: i as u64,
            values: row.to_vec(),
        });
    }
    Ok(out)
}

pub fn sample_sequence(
    config: &SampleConfig,
    denoiser: &dyn Denoiser,
    vs: &VarianceSchedule,
    dim: usize,
) -> Result<LatentSequence> {
    records_to_sequence(&sample_records(config, denoiser, vs, dim, None)?, dim)
}

/// Metric report with scene changes for a finished sequence. Short sequences get an
/// empty clip curve.
pub fn evaluate_sequence(seq: &LatentSequence, clip_len: usize, reference: Option<&ReferenceStats>) -> Result<MetricReport> {
    let mut report = if seq.frames() >= 2 * clip_len {
        compute_clip_metrics(seq, clip_len, reference)?
    } else {
        MetricReport {
            clip_len,
            clips: Vec::new(),
            drift: crate::eval::ClipStats {
                mean: f64::NAN,
                variance: f64::NAN,
                autocorr: f64::NAN,
                delta: f64::NAN,
            },
            reference_error: None,
            velocity_error: None,
            scene_changes: None,
        }
    };
    report.scene_changes = Some(detect_scene_changes(seq, DEFAULT_SCENE_WINDOW, DEFAULT_SCENE_THRESHOLD));
    Ok(report)
}

/// Writes `metrics.csv`, `report.json` and `plots/*.svg` for `report` into `dir`.
pub fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    let mut csv = String::from("clip,startFrame,mean,variance,autocorr,delta\n");
    for (i, c) in report.clips.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            i * report.clip_len,
            c.mean,
            c.variance,
            c.autocorr,
            c.delta
        ));
    }
    fs::write(dir.join("metrics.csv"), csv)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    let plots = dir.join("plots");
    fs::create_dir_all(&plots)?;
    for (m, name) in METRIC_NAMES.iter().enumerate() {
        let ys: Vec<f64> = report.clips.iter().map(|c| c.get(m)).collect();
        let svg = line_chart(&format!("{name} per clip"), "clip index", name, &[(name, &ys)]);
        fs::write(plots.join(format!("{name}.svg")), svg)?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub sequence: LatentSequence,
    pub report: MetricReport,
}

/// Executes `manifest` into `dir` (created if needed).
pub fn execute_run(manifest: &RunManifest, dir: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(dir)?;
    let mut manifest = manifest.clone();
    manifest.sample.validate()?;
    let (vs, _) = manifest.schedule.build()?;
    let (denoiser, dim) = manifest.denoiser.build(manifest.sample.window_frames())?;
    if dim != manifest.dim {
        return Err(Error::shape(format!("denoiser of dim {}", manifest.dim), dim));
    }
    manifest.frame_count = 0;
    manifest.save(dir)?;
    let mut log = FrameLog::create(&dir.join("frames.bin"))?;
    let records = sample_records(&manifest.sample, denoiser.as_ref(), &vs, dim, Some(&mut log))?;
    manifest.frame_count = log.finish()?;
    manifest.save(dir)?;
    let sequence = records_to_sequence(&records, dim)?;
    let report = evaluate_sequence(&sequence, manifest.sample.clip_len, manifest.denoiser.reference().as_ref())?;
    write_report(dir, &report)?;
    Ok(RunOutcome {
        manifest,
        sequence,
        report,
    })
}

/// Re-executes the run recorded in `source` into `dir`.
pub fn replay_run(source: &Path, dir: &Path) -> Result<RunOutcome> {
    let manifest = RunManifest::load(source)?;
    execute_run(&manifest, dir)
}

/// Reads a finished run's frames back as a sequence.
pub fn load_run_sequence(dir: &Path) -> Result<(RunManifest, LatentSequence)> {
    let manifest = RunManifest::load(dir)?;
    let records = read_frame_log(&dir.join("frames.bin"), manifest.dim)?;
    let seq = records_to_sequence(&records, manifest.dim)?;
    Ok((manifest, seq))
}
