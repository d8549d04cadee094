//! Metrics over generated sequences.
//!
//! A sequence is cut into consecutive clips; each clip gets a mean, a variance, a lag-1
//! autocorrelation and a mean one-step change. Drift compares the first and last
//! quarter of the clip curves.

mod compare;
mod scene;
mod svg;
mod velocity;

pub use compare::{compare_methods, CompareOptions, ComparisonRow, ComparisonTable, MethodSummary};
pub use scene::{change_ratios, detect_scene_changes, SceneReport, DEFAULT_SCENE_THRESHOLD, DEFAULT_SCENE_WINDOW};
pub use svg::line_chart;
pub use velocity::{estimate_velocity, fit_velocity, VelocityReport};

use serde::{Deserialize, Serialize};

use crate::diffusion::LatentSequence;
use crate::error::{Error, Result};

/// Nominal frame rate used to turn the "two-second clip" convention into frames.
pub const NOMINAL_FRAME_RATE: f64 = 10.0;
pub const DEFAULT_CLIP_LEN: usize = (2.0 * NOMINAL_FRAME_RATE) as usize;

pub const METRIC_NAMES: [&str; 4] = ["mean", "variance", "autocorr", "delta"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipStats {
    pub mean: f64,
    pub variance: f64,
    pub autocorr: f64,
    pub delta: f64,
}

impl ClipStats {
    pub fn get(&self, metric: usize) -> f64 {
        [self.mean, self.variance, self.autocorr, self.delta][metric]
    }
}

/// Statistics of one block of frames.
///
/// - `mean`: average of every entry;
/// - `variance`: squared deviation from the per-dimension block mean, averaged;
/// - `autocorr`: pooled lag-1 autocorrelation around the per-dimension means, 1 when
///   the block has no variance;
/// - `delta`: mean over frame pairs of the RMS one-step change.
pub fn block_stats(seq: &LatentSequence, start: usize, end: usize) -> ClipStats {
    let (n, d) = (end - start, seq.dim());
    let mut means = vec![0.0; d];
    for f in start..end {
        for (m, v) in means.iter_mut().zip(seq.frame(f)) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mean = means.iter().sum::<f64>() / d as f64;
    let (mut ss, mut lag, mut delta) = (0.0, 0.0, 0.0);
    for f in start..end {
        let x = seq.frame(f);
        for k in 0..d {
            ss += (x[k] - means[k]).powi(2);
        }
        if f + 1 < end {
            let y = seq.frame(f + 1);
            let mut step = 0.0;
            for k in 0..d {
                lag += (x[k] - means[k]) * (y[k] - means[k]);
                step += (y[k] - x[k]).powi(2);
            }
            delta += (step / d as f64).sqrt();
        }
    }
    let variance = ss / (n * d) as f64;
    let autocorr = if ss > 0.0 { lag / ss } else { 1.0 };
    let delta = if n > 1 { delta / (n - 1) as f64 } else { 0.0 };
    ClipStats {
        mean,
        variance,
        autocorr,
        delta,
    }
}

/// Known stationary statistics of the generating process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStats {
    pub mean: f64,
    pub variance: f64,
    pub autocorr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricReport {
    pub clip_len: usize,
    pub clips: Vec<ClipStats>,
    /// `|mean(last quarter) - mean(first quarter)|` of each clip curve.
    pub drift: ClipStats,
    /// Mean absolute gap between each clip curve and the reference, when given.
    pub reference_error: Option<ClipStats>,
    pub velocity_error: Option<f64>,
    pub scene_changes: Option<SceneReport>,
}

impl MetricReport {
    /// Sum of the drift components, a single stationarity score.
    pub fn drift_score(&self) -> f64 {
        (0..4).map(|m| self.drift.get(m)).sum()
    }
}

/// Per-clip curves over consecutive clips of `clip_len` frames. A trailing partial clip
/// is dropped.
pub fn compute_clip_metrics(
    seq: &LatentSequence,
    clip_len: usize,
    reference: Option<&ReferenceStats>,
) -> Result<MetricReport> {
    if clip_len == 0 || seq.frames() < 2 * clip_len {
        return Err(Error::config(format!(
            "sequence of {} frames is too short for two clips of {clip_len}",
            seq.frames()
        )));
    }
    let count = seq.frames() / clip_len;
    let clips: Vec<ClipStats> = (0..count)
        .map(|i| block_stats(seq, i * clip_len, (i + 1) * clip_len))
        .collect();
    let q = (count / 4).max(1);
    let avg = |cs: &[ClipStats], m: usize| cs.iter().map(|c| c.get(m)).sum::<f64>() / cs.len() as f64;
    let d = |m: usize| (avg(&clips[count - q..], m) - avg(&clips[..q], m)).abs();
    let drift = ClipStats {
        mean: d(0),
        variance: d(1),
        autocorr: d(2),
        delta: d(3),
    };
    let reference_error = reference.map(|r| {
        let gap = |f: &dyn Fn(&ClipStats) -> f64| clips.iter().map(f).sum::<f64>() / count as f64;
        ClipStats {
            mean: gap(&|c| (c.mean - r.mean).abs()),
            variance: gap(&|c| (c.variance - r.variance).abs()),
            autocorr: gap(&|c| (c.autocorr - r.autocorr).abs()),
            delta: gap(&|c| (c.delta - (2.0 * r.variance * (1.0 - r.autocorr)).sqrt()).abs()),
        }
    });
    for c in &clips {
        if !(c.mean.is_finite() && c.variance.is_finite() && c.autocorr.is_finite() && c.delta.is_finite()) {
            return Err(Error::NonFinite("clip statistics".into()));
        }
    }
    Ok(MetricReport {
        clip_len,
        clips,
        drift,
        reference_error,
        velocity_error: None,
        scene_changes: None,
    })
}

/// First-quarter versus last-quarter comparison of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QuartileDrift {
    pub first: ClipStats,
    pub last: ClipStats,
    pub delta_mean: f64,
    pub variance_ratio: f64,
    pub delta_autocorr: f64,
}

pub fn quartile_drift(seq: &LatentSequence) -> Result<QuartileDrift> {
    let q = seq.frames() / 4;
    if q < 2 {
        return Err(Error::config(format!("{} frames are too few for quartile drift", seq.frames())));
    }
    let n = seq.frames();
    let first = block_stats(seq, 0, q);
    let last = block_stats(seq, n - q, n);
    Ok(QuartileDrift {
        first,
        last,
        delta_mean: last.mean - first.mean,
        variance_ratio: last.variance / first.variance,
        delta_autocorr: last.autocorr - first.autocorr,
    })
}
