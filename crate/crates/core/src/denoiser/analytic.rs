use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::Denoiser;
use crate::diffusion::LatentSequence;
use crate::error::{Error, Result};
use crate::schedule::{FrameNoiseVector, VarianceSchedule};

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Covariance {
    /// `K (x) I_D`: temporal covariance shared by independent dimensions.
    Separable(DMatrix<f64>),
    /// Dense `(F*D) x (F*D)` covariance, frame-major.
    Full(DMatrix<f64>),
}

/// Zero-mean Gaussian prior over windows of `frames x dim` latents.
///
/// A `stationary` prior may also be applied to shorter windows: the covariance of the
/// first `n` frames is the leading block.
#[derive(Debug, Clone)]
pub struct GaussianProcessPrior {
    frames: usize,
    dim: usize,
    stationary: bool,
    cov: Covariance,
}

fn check_spd(m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::NotPositiveDefinite(format!(
                    "covariance is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let min = m.clone().symmetric_eigenvalues().min();
    if !(min > 0.0) {
        return Err(Error::NotPositiveDefinite(format!("smallest eigenvalue is {min:e}")));
    }
    Ok(())
}

impl GaussianProcessPrior {
    pub fn separable(temporal: DMatrix<f64>, dim: usize, stationary: bool) -> Result<Self> {
        if !temporal.is_square() || temporal.nrows() == 0 || dim == 0 {
            return Err(Error::shape("non-empty square temporal covariance", format!("{:?}", temporal.shape())));
        }
        check_spd(&temporal)?;
        Ok(Self {
            frames: temporal.nrows(),
            dim,
            stationary,
            cov: Covariance::Separable(temporal),
        })
    }

    pub fn full(sigma: DMatrix<f64>, frames: usize, dim: usize, stationary: bool) -> Result<Self> {
        if sigma.shape() != (frames * dim, frames * dim) || frames == 0 || dim == 0 {
            return Err(Error::shape(
                format!("{0}x{0} covariance", frames * dim),
                format!("{:?}", sigma.shape()),
            ));
        }
        check_spd(&sigma)?;
        Ok(Self {
            frames,
            dim,
            stationary,
            cov: Covariance::Full(sigma),
        })
    }

    /// Centered empirical covariance of equally shaped windows plus `jitter * I`.
    /// Returns the prior of the centered data and the per-entry mean that was removed.
    pub fn empirical(samples: &[LatentSequence], jitter: f64) -> Result<(Self, Vec<f64>)> {
        let first = samples
            .first()
            .ok_or_else(|| Error::config("empirical prior needs at least one sample"))?;
        let (frames, dim) = (first.frames(), first.dim());
        let n = frames * dim;
        let mut mean = vec![0.0; n];
        for s in samples {
            first.same_shape(s)?;
            mean.iter_mut().zip(s.as_slice()).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= samples.len() as f64);
        let mut sigma = DMatrix::<f64>::zeros(n, n);
        for s in samples {
            let c = DVector::from_iterator(n, s.as_slice().iter().zip(&mean).map(|(v, m)| v - m));
            sigma.syger(1.0, &c, &c, 1.0);
        }
        sigma /= samples.len() as f64;
        sigma.fill_upper_triangle_with_lower_triangle();
        for i in 0..n {
            sigma[(i, i)] += jitter;
        }
        Ok((Self::full(sigma, frames, dim, true)?, mean))
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_stationary(&self) -> bool {
        self.stationary
    }

    /// Dense frame-major covariance of the full window.
    pub fn covariance(&self) -> DMatrix<f64> {
        match &self.cov {
            Covariance::Full(s) => s.clone(),
            Covariance::Separable(k) => k.kronecker(&DMatrix::identity(self.dim, self.dim)),
        }
    }

    /// Temporal factor of a separable prior.
    pub fn temporal(&self) -> Option<&DMatrix<f64>> {
        match &self.cov {
            Covariance::Separable(k) => Some(k),
            Covariance::Full(_) => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentSequence {
        let (f, d) = (self.frames, self.dim);
        let mut out = LatentSequence::zeros(f, d);
        match &self.cov {
            Covariance::Separable(k) => {
                let l = k.clone().cholesky().expect("validated SPD").unpack();
                let z = DMatrix::<f64>::from_fn(f, d, |_, _| rng.sample(StandardNormal));
                let x = l * z;
                for fi in 0..f {
                    for di in 0..d {
                        out.frame_mut(fi)[di] = x[(fi, di)];
                    }
                }
            }
            Covariance::Full(s) => {
                let l = s.clone().cholesky().expect("validated SPD").unpack();
                let z = DVector::<f64>::from_fn(f * d, |_, _| rng.sample(StandardNormal));
                out.as_mut_slice().copy_from_slice((l * z).as_slice());
            }
        }
        out
    }

    fn frames_for(&self, xt: &LatentSequence) -> Result<usize> {
        let n = xt.frames();
        let fits = n == self.frames || (self.stationary && n < self.frames);
        if xt.dim() != self.dim || !fits {
            return Err(Error::shape(
                format!("window of {}x{} for this prior", self.frames, self.dim),
                format!("{}x{}", n, xt.dim()),
            ));
        }
        Ok(n)
    }

    /// Exact `E[x0 | x_t]` under the per-frame forward process.
    pub fn posterior_mean(
        &self,
        xt: &LatentSequence,
        levels: &FrameNoiseVector,
        vs: &VarianceSchedule,
    ) -> Result<LatentSequence> {
        let n = self.frames_for(xt)?;
        if levels.len() != n {
            return Err(Error::shape(format!("{n} frame levels"), levels.len()));
        }
        let d = self.dim;
        let alpha: Vec<f64> = levels.levels().iter().map(|&t| vs.alpha_bar(t)).collect();
        let sqrt_a: Vec<f64> = alpha.iter().map(|a| a.sqrt()).collect();
        let not_pd = |_| Error::NotPositiveDefinite("A Sigma A^T + D is singular".into());
        match &self.cov {
            Covariance::Separable(k) => {
                let k = k.view((0, 0), (n, n));
                let mut m = DMatrix::<f64>::from_fn(n, n, |i, j| sqrt_a[i] * k[(i, j)] * sqrt_a[j]);
                for i in 0..n {
                    m[(i, i)] += 1.0 - alpha[i];
                }
                let chol = m.cholesky().ok_or(()).map_err(not_pd)?;
                let x = DMatrix::from_row_slice(n, d, xt.as_slice());
                let mut y = chol.solve(&x);
                for (i, mut row) in y.row_iter_mut().enumerate() {
                    row *= sqrt_a[i];
                }
                let x0 = k * y;
                let mut out = LatentSequence::zeros(n, d);
                for f in 0..n {
                    for di in 0..d {
                        out.frame_mut(f)[di] = x0[(f, di)];
                    }
                }
                Ok(out)
            }
            Covariance::Full(s) => {
                let nd = n * d;
                let s = s.view((0, 0), (nd, nd));
                let a = |i: usize| sqrt_a[i / d];
                let mut m = DMatrix::<f64>::from_fn(nd, nd, |i, j| a(i) * s[(i, j)] * a(j));
                for i in 0..nd {
                    m[(i, i)] += 1.0 - alpha[i / d];
                }
                let chol = m.cholesky().ok_or(()).map_err(not_pd)?;
                let mut y = chol.solve(&DVector::from_column_slice(xt.as_slice()));
                for i in 0..nd {
                    y[i] *= a(i);
                }
                let x0 = s * y;
                LatentSequence::new(n, d, x0.as_slice().to_vec())
            }
        }
    }
}

/// Stationary AR(1) prior: `Sigma_fg = sigma^2 rho^|f-g|` per independent dimension.
pub fn build_ar1_prior(rho: f64, sigma: f64, frames: usize, dim: usize) -> Result<GaussianProcessPrior> {
    if !(rho.abs() < 1.0) {
        return Err(Error::config(format!("AR(1) coefficient must satisfy |rho| < 1, got {rho}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("AR(1) scale must be positive, got {sigma}")));
    }
    let s2 = sigma * sigma;
    let k = DMatrix::from_fn(frames, frames, |i, j| s2 * rho.powi(i.abs_diff(j) as i32));
    GaussianProcessPrior::separable(k, dim, true)
}

/// Noise predictor derived from the exact Gaussian posterior mean.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    prior: GaussianProcessPrior,
}

impl AnalyticDenoiser {
    pub fn new(prior: GaussianProcessPrior) -> Self {
        Self { prior }
    }

    pub fn prior(&self) -> &GaussianProcessPrior {
        &self.prior
    }
}

impl Denoiser for AnalyticDenoiser {
    fn predict_eps(
        &self,
        xt: &LatentSequence,
        levels: &FrameNoiseVector,
        vs: &VarianceSchedule,
    ) -> Result<LatentSequence> {
        let x0 = self.prior.posterior_mean(xt, levels, vs)?;
        let mut eps = LatentSequence::zeros(xt.frames(), xt.dim());
        for (f, &t) in levels.levels().iter().enumerate() {
            // eps is unidentifiable on clean frames; report zero
            if t == 0.0 {
                continue;
            }
            let a = vs.alpha_bar(t);
            let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
            let out = eps.frame_mut(f);
            for ((o, &x), &m) in out.iter_mut().zip(xt.frame(f)).zip(x0.frame(f)) {
                *o = (x - sa * m) / sn;
            }
        }
        Ok(eps)
    }
}
