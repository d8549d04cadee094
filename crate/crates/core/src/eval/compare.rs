//! Side-by-side evaluation of sampling methods over shared seeds.

use serde::{Deserialize, Serialize};

use super::{compute_clip_metrics, detect_scene_changes, estimate_velocity, ReferenceStats};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::run::{sample_sequence, Method, SampleConfig};
use crate::schedule::VarianceSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct CompareOptions {
    pub seeds: Vec<u64>,
    pub clip_len: usize,
    pub scene_window: usize,
    pub scene_threshold: f64,
    /// True bump velocity; enables the velocity column.
    pub true_velocity: Option<f64>,
    pub reference: Option<ReferenceStats>,
    pub exec: Execution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ComparisonRow {
    pub method: Method,
    pub seed: u64,
    pub drift_mean: f64,
    pub drift_variance: f64,
    pub drift_autocorr: f64,
    pub drift_delta: f64,
    pub drift_score: f64,
    pub scene_events: usize,
    pub scene_segments: usize,
    pub velocity_error: Option<f64>,
}

pub const COMPARISON_HEADER: &str =
    "method,seed,driftMean,driftVariance,driftAutocorr,driftDelta,driftScore,sceneEvents,sceneSegments,velocityError";

const NUMERIC_COLUMNS: [&str; 8] = [
    "driftMean",
    "driftVariance",
    "driftAutocorr",
    "driftDelta",
    "driftScore",
    "sceneEvents",
    "sceneSegments",
    "velocityError",
];

impl ComparisonRow {
    fn numeric(&self) -> [Option<f64>; 8] {
        [
            Some(self.drift_mean),
            Some(self.drift_variance),
            Some(self.drift_autocorr),
            Some(self.drift_delta),
            Some(self.drift_score),
            Some(self.scene_events as f64),
            Some(self.scene_segments as f64),
            self.velocity_error,
        ]
    }
}

/// Mean and standard error of one column for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MethodSummary {
    pub method: Method,
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub summary: Vec<MethodSummary>,
}

impl ComparisonTable {
    fn from_rows(mut rows: Vec<ComparisonRow>) -> Self {
        rows.sort_by(|a, b| (a.method, a.seed).cmp(&(b.method, b.seed)));
        let mut summary = Vec::new();
        let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
        methods.dedup();
        for m in methods {
            let group: Vec<&ComparisonRow> = rows.iter().filter(|r| r.method == m).collect();
            for (c, name) in NUMERIC_COLUMNS.iter().enumerate() {
                let xs: Vec<f64> = group.iter().filter_map(|r| r.numeric()[c]).collect();
                if xs.is_empty() {
                    continue;
                }
                let n = xs.len() as f64;
                let mean = xs.iter().sum::<f64>() / n;
                let stderr = if xs.len() > 1 {
                    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
                } else {
                    0.0
                };
                summary.push(MethodSummary {
                    method: m,
                    metric: (*name).into(),
                    mean,
                    stderr,
                    n: xs.len(),
                });
            }
        }
        Self { rows, summary }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{COMPARISON_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.method,
                r.seed,
                r.drift_mean,
                r.drift_variance,
                r.drift_autocorr,
                r.drift_delta,
                r.drift_score,
                r.scene_events,
                r.scene_segments,
                r.velocity_error.map_or(String::new(), |v| v.to_string())
            ));
        }
        s
    }

    /// Parses [`Self::to_csv`] output; the summary is recomputed.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(COMPARISON_HEADER) {
            return Err(Error::config("comparison CSV has an unexpected header"));
        }
        let bad = |line: &str| Error::config(format!("malformed comparison row: {line}"));
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 10 {
                    return Err(bad(line));
                }
                let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(line));
                let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad(line));
                Ok(ComparisonRow {
                    method: f[0].parse()?,
                    seed: f[1].parse().map_err(|_| bad(line))?,
                    drift_mean: num(2)?,
                    drift_variance: num(3)?,
                    drift_autocorr: num(4)?,
                    drift_delta: num(5)?,
                    drift_score: num(6)?,
                    scene_events: int(7)?,
                    scene_segments: int(8)?,
                    velocity_error: if f[9].is_empty() { None } else { Some(num(9)?) },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_rows(rows))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn row(&self, method: Method, seed: u64) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method && r.seed == seed)
    }
}

/// Runs every config at every seed with one shared denoiser and schedule. Each
/// config's own `seed` is replaced by the seed under test.
pub fn compare_methods(
    configs: &[SampleConfig],
    denoiser: &dyn Denoiser,
    vs: &VarianceSchedule,
    dim: usize,
    options: &CompareOptions,
) -> Result<ComparisonTable> {
    if configs.is_empty() || options.seeds.is_empty() {
        return Err(Error::config("comparison needs at least one method and one seed"));
    }
    let jobs: Vec<(SampleConfig, u64)> = configs
        .iter()
        .flat_map(|c| options.seeds.iter().map(move |&s| (c.clone(), s)))
        .collect();
    let rows = par::map_slice(&jobs, options.exec, |(config, seed)| -> Result<ComparisonRow> {
        let mut config = config.clone();
        config.seed = *seed;
        let seq = sample_sequence(&config, denoiser, vs, dim)?;
        let report = compute_clip_metrics(&seq, options.clip_len, options.reference.as_ref())?;
        let scenes = detect_scene_changes(&seq, options.scene_window, options.scene_threshold);
        let velocity_error = options
            .true_velocity
            .map(|v| estimate_velocity(&seq, v).map(|r| r.mae))
            .transpose()?;
        Ok(ComparisonRow {
            method: config.method,
            seed: *seed,
            drift_mean: report.drift.mean,
            drift_variance: report.drift.variance,
            drift_autocorr: report.drift.autocorr,
            drift_delta: report.drift.delta,
            drift_score: report.drift_score(),
            scene_events: scenes.events,
            scene_segments: scenes.segments,
            velocity_error,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonTable::from_rows(rows))
}
