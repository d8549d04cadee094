//! Per-frame diffusion math. Every map here is frame-wise: frame `f` is corrupted
//! or denoised using only its own level, latent row and noise row.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::{FrameNoiseVector, VarianceSchedule};

/// Smallest `alpha_bar` at which the predicted clean sample is still recovered.
pub const MIN_INVERTIBLE_ALPHA_BAR: f64 = 1e-6;

/// `frames x dim` row-major block of latents.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl LatentSequence {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::shape("at least one frame and one dimension", format!("{frames}x{dim}")));
        }
        if data.len() != frames * dim {
            return Err(Error::shape(frames * dim, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("entry {} of frame {}", i % dim, i / dim)));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        assert!(frames > 0 && dim > 0, "empty latent sequence");
        Self {
            frames,
            dim,
            data: vec![0.0; frames * dim],
        }
    }

    pub fn standard_normal<R: Rng + ?Sized>(frames: usize, dim: usize, rng: &mut R) -> Self {
        let mut s = Self::zeros(frames, dim);
        s.data.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        s
    }

    pub fn from_frames(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("rows of equal length", "ragged rows"));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        &self.data[f * self.dim..(f + 1) * self.dim]
    }

    pub fn frame_mut(&mut self, f: usize) -> &mut [f64] {
        &mut self.data[f * self.dim..(f + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    /// Frames `start..end` as a new sequence.
    pub fn slice_frames(&self, start: usize, end: usize) -> Self {
        assert!(start < end && end <= self.frames, "frame range {start}..{end} out of bounds");
        Self {
            frames: end - start,
            dim: self.dim,
            data: self.data[start * self.dim..end * self.dim].to_vec(),
        }
    }

    /// Appends `other`'s frames. Panics on a dimension mismatch.
    pub fn extend(&mut self, other: &LatentSequence) {
        assert_eq!(self.dim, other.dim, "dimension mismatch");
        self.data.extend_from_slice(&other.data);
        self.frames += other.frames;
    }

    /// Drops the first `n` frames.
    pub fn drop_front(&mut self, n: usize) {
        assert!(n < self.frames, "cannot drop every frame");
        self.data.drain(..n * self.dim);
        self.frames -= n;
    }

    pub fn same_shape(&self, other: &LatentSequence) -> Result<()> {
        if self.frames != other.frames || self.dim != other.dim {
            return Err(Error::shape(
                format!("{}x{}", self.frames, self.dim),
                format!("{}x{}", other.frames, other.dim),
            ));
        }
        Ok(())
    }
}

fn check_levels(x: &LatentSequence, levels: &FrameNoiseVector, vs: &VarianceSchedule) -> Result<()> {
    if levels.len() != x.frames() {
        return Err(Error::shape(format!("{} frame levels", x.frames()), levels.len()));
    }
    if let Some((f, &t)) = levels
        .levels()
        .iter()
        .enumerate()
        .find(|(_, &t)| t > vs.max_level())
    {
        return Err(Error::LevelOutOfRange {
            frame: f,
            level: t,
            reason: "above the maximum level T",
        });
    }
    Ok(())
}

/// `x_t = sqrt(a) x_0 + sqrt(1 - a) eps` per frame, with `a = alpha_bar(t_f)`.
pub fn forward_diffuse(
    x0: &LatentSequence,
    levels: &FrameNoiseVector,
    noise: &LatentSequence,
    vs: &VarianceSchedule,
) -> Result<LatentSequence> {
    x0.same_shape(noise)?;
    check_levels(x0, levels, vs)?;
    let mut out = x0.clone();
    for (f, &t) in levels.levels().iter().enumerate() {
        let a = vs.alpha_bar(t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        for (o, &e) in out.frame_mut(f).iter_mut().zip(noise.frame(f)) {
            *o = sa * *o + sn * e;
        }
    }
    Ok(out)
}

/// Inverts the forward process given a noise estimate.
pub fn predict_x0(
    xt: &LatentSequence,
    eps_hat: &LatentSequence,
    levels: &FrameNoiseVector,
    vs: &VarianceSchedule,
) -> Result<LatentSequence> {
    xt.same_shape(eps_hat)?;
    check_levels(xt, levels, vs)?;
    let mut out = xt.clone();
    for (f, &t) in levels.levels().iter().enumerate() {
        let a = vs.alpha_bar(t);
        if a < MIN_INVERTIBLE_ALPHA_BAR {
            return Err(Error::LevelOutOfRange {
                frame: f,
                level: t,
                reason: "alpha_bar too close to zero to recover the clean sample",
            });
        }
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        for (o, &e) in out.frame_mut(f).iter_mut().zip(eps_hat.frame(f)) {
            *o = (*o - sn * e) / sa;
        }
    }
    Ok(out)
}

/// One DDIM transition per frame from `from` to `to` levels.
///
/// `sigma = eta * sqrt((1 - a_to) / (1 - a_from)) * sqrt(1 - a_from / a_to)`. Frames whose
/// level does not change (including clean frames at level 0) are copied unchanged. Fresh
/// noise is drawn from `rng` only when `eta > 0`.
pub fn ddim_step<R: Rng + ?Sized>(
    xt: &LatentSequence,
    eps_hat: &LatentSequence,
    from: &FrameNoiseVector,
    to: &FrameNoiseVector,
    vs: &VarianceSchedule,
    eta: f64,
    rng: &mut R,
) -> Result<LatentSequence> {
    xt.same_shape(eps_hat)?;
    check_levels(xt, from, vs)?;
    check_levels(xt, to, vs)?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::config(format!("eta must lie in [0, 1], got {eta}")));
    }
    let mut out = xt.clone();
    for f in 0..xt.frames() {
        let (tf, tt) = (from.levels()[f], to.levels()[f]);
        if tt > tf {
            return Err(Error::LevelOutOfRange {
                frame: f,
                level: tt,
                reason: "target level is above the current level",
            });
        }
        if tt == tf {
            continue;
        }
        let a_from = vs.alpha_bar(tf);
        let a_to = vs.alpha_bar(tt);
        if a_from < MIN_INVERTIBLE_ALPHA_BAR {
            return Err(Error::LevelOutOfRange {
                frame: f,
                level: tf,
                reason: "alpha_bar too close to zero to recover the clean sample",
            });
        }
        let sigma = eta * ((1.0 - a_to) / (1.0 - a_from)).sqrt() * (1.0 - a_from / a_to).max(0.0).sqrt();
        let dir = (1.0 - a_to - sigma * sigma).max(0.0).sqrt();
        let (sa_from, sn_from, sa_to) = (a_from.sqrt(), (1.0 - a_from).sqrt(), a_to.sqrt());
        let row = out.frame_mut(f);
        for (d, o) in row.iter_mut().enumerate() {
            let e = eps_hat.frame(f)[d];
            let x0 = (*o - sn_from * e) / sa_from;
            let mut v = sa_to * x0 + dir * e;
            if sigma > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                v += sigma * z;
            }
            *o = v;
        }
    }
    Ok(out)
}

/// Mean squared error over every entry.
pub fn mse_eps_loss(eps_hat: &LatentSequence, eps_true: &LatentSequence) -> Result<f64> {
    eps_hat.same_shape(eps_true)?;
    let n = eps_hat.as_slice().len() as f64;
    Ok(eps_hat
        .as_slice()
        .iter()
        .zip(eps_true.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::LevelMode;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vs() -> VarianceSchedule {
        VarianceSchedule::default()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn free(levels: Vec<f64>) -> FrameNoiseVector {
        FrameNoiseVector::new(levels, 1, LevelMode::Independent).unwrap()
    }

    // Level at which alpha_bar equals `target`, by bisection.
    fn level_for(vs: &VarianceSchedule, target: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, vs.max_level());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if vs.alpha_bar(mid) > target {
                lo = mid
            } else {
                hi = mid
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn zero_level_is_identity() {
        let mut r = rng(1);
        let x0 = LatentSequence::standard_normal(3, 4, &mut r);
        let eps = LatentSequence::standard_normal(3, 4, &mut r);
        let lv = FrameNoiseVector::uniform(0.0, 3, 1).unwrap();
        assert_eq!(forward_diffuse(&x0, &lv, &eps, &vs()).unwrap(), x0);
        assert_eq!(predict_x0(&x0, &eps, &lv, &vs()).unwrap(), x0);
    }

    #[test]
    fn near_pure_noise_at_terminal_level() {
        let cos = VarianceSchedule::new(
            crate::schedule::ScheduleKind::Cosine {
                offset: 0.0,
                min_alpha_bar: 1e-12,
            },
            1.0,
        )
        .unwrap();
        let mut r = rng(2);
        let x0 = LatentSequence::standard_normal(2, 3, &mut r);
        let eps = LatentSequence::standard_normal(2, 3, &mut r);
        let lv = FrameNoiseVector::uniform(1.0, 2, 1).unwrap();
        let xt = forward_diffuse(&x0, &lv, &eps, &cos).unwrap();
        for (a, b) in xt.as_slice().iter().zip(eps.as_slice()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn forward_variance_monte_carlo() {
        let vs = vs();
        let t = level_for(&vs, 0.64);
        assert!((vs.alpha_bar(t) - 0.64).abs() < 1e-12);
        let n = 100_000;
        let x0 = LatentSequence::zeros(1, n);
        let eps = LatentSequence::standard_normal(1, n, &mut rng(3));
        let lv = FrameNoiseVector::uniform(t, 1, 1).unwrap();
        let xt = forward_diffuse(&x0, &lv, &eps, &vs).unwrap();
        let mean = xt.as_slice().iter().sum::<f64>() / n as f64;
        let var = xt.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 0.36).abs() / 0.36 < 0.02, "{var}");
    }

    #[test]
    fn one_step_from_terminal_with_true_noise_returns_x0() {
        let vs = vs();
        let mut r = rng(4);
        let x0 = LatentSequence::standard_normal(1, 5, &mut r);
        let eps = LatentSequence::standard_normal(1, 5, &mut r);
        let top = FrameNoiseVector::uniform(1.0, 1, 1).unwrap();
        let zero = FrameNoiseVector::uniform(0.0, 1, 1).unwrap();
        let xt = forward_diffuse(&x0, &top, &eps, &vs).unwrap();
        let out = ddim_step(&xt, &eps, &top, &zero, &vs, 0.0, &mut r).unwrap();
        let x0_hat = predict_x0(&xt, &eps, &top, &vs).unwrap();
        assert_eq!(out, x0_hat);
        for (a, b) in out.as_slice().iter().zip(x0.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ddim_same_level_is_identity_and_rejects_upward() {
        let vs = vs();
        let mut r = rng(5);
        let xt = LatentSequence::standard_normal(3, 2, &mut r);
        let eps = LatentSequence::standard_normal(3, 2, &mut r);
        let lv = free(vec![0.0, 0.3, 0.9]);
        assert_eq!(ddim_step(&xt, &eps, &lv, &lv, &vs, 0.0, &mut r).unwrap(), xt);
        let up = free(vec![0.0, 0.4, 0.9]);
        assert!(matches!(
            ddim_step(&xt, &eps, &lv, &up, &vs, 0.0, &mut r),
            Err(Error::LevelOutOfRange { frame: 1, .. })
        ));
    }

    #[test]
    fn ddim_deterministic_at_eta_zero() {
        let vs = vs();
        let mut r = rng(6);
        let xt = LatentSequence::standard_normal(4, 3, &mut r);
        let eps = LatentSequence::standard_normal(4, 3, &mut r);
        let from = free(vec![0.25, 0.5, 0.75, 1.0]);
        let to = free(vec![0.0, 0.25, 0.5, 0.75]);
        let a = ddim_step(&xt, &eps, &from, &to, &vs, 0.0, &mut rng(1)).unwrap();
        let b = ddim_step(&xt, &eps, &from, &to, &vs, 0.0, &mut rng(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frames_do_not_leak() {
        let vs = vs();
        let mut r = rng(7);
        let xt = LatentSequence::standard_normal(4, 3, &mut r);
        let eps = LatentSequence::standard_normal(4, 3, &mut r);
        let noise = LatentSequence::standard_normal(4, 3, &mut r);
        let from = free(vec![0.25, 0.5, 0.75, 1.0]);
        let to = free(vec![0.0, 0.25, 0.5, 0.75]);
        let base_step = ddim_step(&xt, &eps, &from, &to, &vs, 0.0, &mut r).unwrap();
        let base_fwd = forward_diffuse(&xt, &from, &noise, &vs).unwrap();
        let mut xt2 = xt.clone();
        xt2.frame_mut(2).iter_mut().for_each(|v| *v += 3.0);
        let step = ddim_step(&xt2, &eps, &from, &to, &vs, 0.0, &mut r).unwrap();
        let fwd = forward_diffuse(&xt2, &from, &noise, &vs).unwrap();
        for f in [0, 1, 3] {
            assert_eq!(step.frame(f), base_step.frame(f));
            assert_eq!(fwd.frame(f), base_fwd.frame(f));
        }
        assert_ne!(step.frame(2), base_step.frame(2));
    }

    #[test]
    fn predict_x0_guard_names_frame() {
        let cos = VarianceSchedule::new(
            crate::schedule::ScheduleKind::Cosine {
                offset: 0.0,
                min_alpha_bar: 1e-9,
            },
            1.0,
        )
        .unwrap();
        let x = LatentSequence::zeros(2, 1);
        let lv = free(vec![0.1, 1.0]);
        let err = predict_x0(&x, &x, &lv, &cos).unwrap_err();
        assert!(matches!(err, Error::LevelOutOfRange { frame: 1, .. }), "{err}");
    }

    #[test]
    fn loss_examples() {
        let mut r = rng(8);
        let e = LatentSequence::standard_normal(100, 100, &mut r);
        assert_eq!(mse_eps_loss(&e, &e).unwrap(), 0.0);
        let mut shifted = e.clone();
        shifted.as_mut_slice().iter_mut().for_each(|v| *v += 1.0);
        assert!((mse_eps_loss(&shifted, &e).unwrap() - 1.0).abs() < 1e-12);
        let zero = LatentSequence::zeros(100, 100);
        assert!((mse_eps_loss(&zero, &e).unwrap() - 1.0).abs() < 0.05);
        assert!(mse_eps_loss(&zero, &LatentSequence::zeros(1, 1)).is_err());
    }

    #[test]
    fn ddim_sigma_matches_formula() {
        // with eta=1 the step adds exactly sigma * z; recover z by rerunning with the same rng
        let vs = vs();
        let mut r = rng(9);
        let xt = LatentSequence::standard_normal(1, 1, &mut r);
        let eps = LatentSequence::standard_normal(1, 1, &mut r);
        let (tf, tt) = (0.6, 0.4);
        let from = FrameNoiseVector::uniform(tf, 1, 1).unwrap();
        let to = FrameNoiseVector::uniform(tt, 1, 1).unwrap();
        let det = ddim_step(&xt, &eps, &from, &to, &vs, 0.0, &mut rng(0)).unwrap();
        let sto = ddim_step(&xt, &eps, &from, &to, &vs, 1.0, &mut rng(10)).unwrap();
        let z: f64 = rng(10).sample(StandardNormal);
        let (af, at) = (vs.alpha_bar(tf), vs.alpha_bar(tt));
        let sigma = ((1.0 - at) / (1.0 - af)).sqrt() * (1.0 - af / at).sqrt();
        let x0 = (xt.as_slice()[0] - (1.0 - af).sqrt() * eps.as_slice()[0]) / af.sqrt();
        let want = at.sqrt() * x0 + (1.0 - at - sigma * sigma).sqrt() * eps.as_slice()[0] + sigma * z;
        assert!((sto.as_slice()[0] - want).abs() < 1e-12);
        assert!((det.as_slice()[0] - sto.as_slice()[0]).abs() > 0.0);
    }

    proptest! {
        #[test]
        fn forward_then_inverse_is_identity(seed in any::<u64>(), frames in 1usize..6, dim in 1usize..5) {
            let vs = vs();
            let mut r = rng(seed);
            let x0 = LatentSequence::standard_normal(frames, dim, &mut r);
            let eps = LatentSequence::standard_normal(frames, dim, &mut r);
            let lv = free((0..frames).map(|_| r.random_range(0.0..=1.0)).collect());
            let xt = forward_diffuse(&x0, &lv, &eps, &vs).unwrap();
            let back = predict_x0(&xt, &eps, &lv, &vs).unwrap();
            for (a, b) in back.as_slice().iter().zip(x0.as_slice()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
