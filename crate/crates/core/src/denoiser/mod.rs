//! Noise predictors over `(latents, per-frame levels)`.

mod analytic;
mod toy;

pub use analytic::{build_ar1_prior, AnalyticDenoiser, GaussianProcessPrior};
pub use toy::{ToyDenoiser, ToyShape, TENSOR_NAMES};

use crate::diffusion::LatentSequence;
use crate::error::Result;
use crate::schedule::{FrameNoiseVector, VarianceSchedule};

/// An epsilon-predictor. Implementations are read-only at inference time and may be
/// shared across threads.
pub trait Denoiser: Send + Sync {
    fn predict_eps(
        &self,
        xt: &LatentSequence,
        levels: &FrameNoiseVector,
        vs: &VarianceSchedule,
    ) -> Result<LatentSequence>;
}

/// Always predicts zero noise; the reference floor for loss comparisons.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict_eps(
        &self,
        xt: &LatentSequence,
        _levels: &FrameNoiseVector,
        _vs: &VarianceSchedule,
    ) -> Result<LatentSequence> {
        Ok(LatentSequence::zeros(xt.frames(), xt.dim()))
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_eps(
        &self,
        xt: &LatentSequence,
        levels: &FrameNoiseVector,
        vs: &VarianceSchedule,
    ) -> Result<LatentSequence> {
        (**self).predict_eps(xt, levels, vs)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict_eps(
        &self,
        xt: &LatentSequence,
        levels: &FrameNoiseVector,
        vs: &VarianceSchedule,
    ) -> Result<LatentSequence> {
        (**self).predict_eps(xt, levels, vs)
    }
}
