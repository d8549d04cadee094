//! Velocity of a moving bump from per-frame circular centroids.

use serde::{Deserialize, Serialize};

use crate::data::circular_centroid;
use crate::diffusion::LatentSequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VelocityReport {
    /// Unwrapped centre track.
    pub centers: Vec<f64>,
    /// Finite differences of the track, one per frame pair.
    pub velocities: Vec<f64>,
    pub mean_velocity: f64,
    /// Mean absolute error of `velocities` against the true velocity.
    pub mae: f64,
}

pub fn estimate_velocity(seq: &LatentSequence, true_velocity: f64) -> Result<VelocityReport> {
    if seq.frames() < 2 {
        return Err(Error::config("velocity needs at least two frames"));
    }
    let grid = seq.dim() as f64;
    let mut centers: Vec<f64> = Vec::with_capacity(seq.frames());
    for (f, row) in seq.rows().enumerate() {
        let c = circular_centroid(row)
            .ok_or_else(|| Error::NonFinite(format!("frame {f} has no defined centroid")))?;
        let c = match centers.last() {
            None => c,
            Some(&prev) => {
                let mut step = c - prev;
                step -= grid * (step / grid).round();
                prev + step
            }
        };
        centers.push(c);
    }
    let velocities: Vec<f64> = centers.windows(2).map(|w| w[1] - w[0]).collect();
    let n = velocities.len() as f64;
    Ok(VelocityReport {
        mean_velocity: velocities.iter().sum::<f64>() / n,
        mae: velocities.iter().map(|v| (v - true_velocity).abs()).sum::<f64>() / n,
        centers,
        velocities,
    })
}

/// Least-squares slope of the unwrapped centre track against the frame index.
pub fn fit_velocity(centers: &[f64]) -> f64 {
    let n = centers.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = centers.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &c) in centers.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (c - my);
        sxx += dx * dx;
    }
    sxy / sxx
}
