//! A small trainable noise predictor.
//!
//! Per frame `f` with level `t_f`:
//!
//! ```text
//! h_f = W_in x_f + W_time phi(t_f) + b_hidden        phi_e(t) = cos(pi e t / T)
//! u_f = h_f + sum_g mix[f, g] h_g                      (temporal mixing)
//! y_f = W_out tanh(u_f) + b_out + W_skip x_f
//! ```
//!
//! Levels are embedded one frame at a time and added to the frame features, so a
//! `(batch, frames)` level grid is handled exactly like a flat batch of scalars.
//! All tensors live in one flat row-major buffer; gradients use the same layout.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Denoiser;
use crate::diffusion::{mse_eps_loss, LatentSequence};
use crate::error::{Error, Result};
use crate::schedule::{FrameNoiseVector, VarianceSchedule};

pub const TENSOR_NAMES: [&str; 7] = ["w_in", "w_time", "b_hidden", "mix", "w_out", "b_out", "w_skip"];

const CHECKPOINT_FORMAT: &str = "pavd-toy-denoiser";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyShape {
    pub dim: usize,
    pub hidden: usize,
    pub embed: usize,
    pub max_frames: usize,
}

impl ToyShape {
    pub fn tensor_shapes(&self) -> [[usize; 2]; 7] {
        let (d, h, e, f) = (self.dim, self.hidden, self.embed, self.max_frames);
        [[h, d], [h, e], [h, 1], [f, f], [d, h], [d, 1], [d, d]]
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes().iter().map(|s| s[0] * s[1]).sum()
    }

    fn offset(&self, idx: usize) -> usize {
        self.tensor_shapes()[..idx].iter().map(|s| s[0] * s[1]).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.embed == 0 || self.max_frames == 0 {
            return Err(Error::config(format!("toy denoiser dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    version: u32,
    layout: ToyShape,
    dtype: String,
    byte_order: String,
    tensors: Vec<TensorEntry>,
}

/// Parameters (or gradients) of the toy denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    shape: ToyShape,
    data: Vec<f64>,
}

struct Forward {
    phi: Vec<f64>,
    h: Vec<f64>,
    a: Vec<f64>,
    y: Vec<f64>,
}

impl ToyDenoiser {
    pub fn zeros(shape: ToyShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            shape,
            data: vec![0.0; shape.param_count()],
        })
    }

    /// Scaled-normal initialisation; mixing and skip weights start at zero.
    pub fn init<R: Rng + ?Sized>(shape: ToyShape, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        let mut fill = |name: &str, scale: f64| {
            for v in p.tensor_mut(name) {
                let z: f64 = rng.sample(StandardNormal);
                *v = z * scale;
            }
        };
        fill("w_in", (1.0 / shape.dim as f64).sqrt());
        fill("w_time", (1.0 / shape.embed as f64).sqrt());
        fill("w_out", (1.0 / shape.hidden as f64).sqrt());
        Ok(p)
    }

    pub fn from_parts(shape: ToyShape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.param_count() {
            return Err(Error::shape(shape.param_count(), data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("toy denoiser parameters".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> ToyShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn range(&self, name: &str) -> std::ops::Range<usize> {
        let idx = TENSOR_NAMES
            .iter()
            .position(|&n| n == name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"));
        let [r, c] = self.shape.tensor_shapes()[idx];
        let start = self.shape.offset(idx);
        start..start + r * c
    }

    pub fn tensor(&self, name: &str) -> &[f64] {
        &self.data[self.range(name)]
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self.range(name);
        &mut self.data[r]
    }

    fn check_input(&self, xt: &LatentSequence, levels: &FrameNoiseVector) -> Result<()> {
        if xt.dim() != self.shape.dim || xt.frames() > self.shape.max_frames {
            return Err(Error::shape(
                format!("at most {} frames of dim {}", self.shape.max_frames, self.shape.dim),
                format!("{}x{}", xt.frames(), xt.dim()),
            ));
        }
        if levels.len() != xt.frames() {
            return Err(Error::shape(format!("{} frame levels", xt.frames()), levels.len()));
        }
        Ok(())
    }

    fn forward(&self, xt: &LatentSequence, levels: &FrameNoiseVector, max_level: f64) -> Forward {
        let ToyShape {
            dim: d,
            hidden: hd,
            embed: e,
            max_frames: fm,
        } = self.shape;
        let n = xt.frames();
        let (w_in, w_t, b) = (self.tensor("w_in"), self.tensor("w_time"), self.tensor("b_hidden"));
        let (mix, w_out, b_out, w_skip) = (
            self.tensor("mix"),
            self.tensor("w_out"),
            self.tensor("b_out"),
            self.tensor("w_skip"),
        );

        let mut phi = vec![0.0; n * e];
        for (f, &t) in levels.levels().iter().enumerate() {
            for k in 0..e {
                phi[f * e + k] = (PI * k as f64 * t / max_level).cos();
            }
        }
        let mut h = vec![0.0; n * hd];
        for f in 0..n {
            let x = xt.frame(f);
            for k in 0..hd {
                let mut acc = b[k];
                acc += w_in[k * d..(k + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                acc += w_t[k * e..(k + 1) * e]
                    .iter()
                    .zip(&phi[f * e..(f + 1) * e])
                    .map(|(w, v)| w * v)
                    .sum::<f64>();
                h[f * hd + k] = acc;
            }
        }
        let mut a = h.clone();
        for f in 0..n {
            for g in 0..n {
                let m = mix[f * fm + g];
                if m != 0.0 {
                    for k in 0..hd {
                        a[f * hd + k] += m * h[g * hd + k];
                    }
                }
            }
        }
        a.iter_mut().for_each(|v| *v = v.tanh());
        let mut y = vec![0.0; n * d];
        for f in 0..n {
            let x = xt.frame(f);
            let af = &a[f * hd..(f + 1) * hd];
            for o in 0..d {
                let mut acc = b_out[o];
                acc += w_out[o * hd..(o + 1) * hd].iter().zip(af).map(|(w, v)| w * v).sum::<f64>();
                acc += w_skip[o * d..(o + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                y[f * d + o] = acc;
            }
        }
        Forward { phi, h, a, y }
    }

    /// Loss and exact gradient of the mean squared noise error for one window.
    pub fn loss_and_grad(
        &self,
        xt: &LatentSequence,
        levels: &FrameNoiseVector,
        eps_true: &LatentSequence,
        vs: &VarianceSchedule,
    ) -> Result<(f64, ToyDenoiser)> {
        self.check_input(xt, levels)?;
        xt.same_shape(eps_true)?;
        let ToyShape {
            dim: d,
            hidden: hd,
            embed: e,
            max_frames: fm,
        } = self.shape;
        let n = xt.frames();
        let fw = self.forward(xt, levels, vs.max_level());
        let scale = 2.0 / (n * d) as f64;
        let dy: Vec<f64> = fw
            .y
            .iter()
            .zip(eps_true.as_slice())
            .map(|(y, t)| scale * (y - t))
            .collect();
        let loss = fw
            .y
            .iter()
            .zip(eps_true.as_slice())
            .map(|(y, t)| (y - t) * (y - t))
            .sum::<f64>()
            / (n * d) as f64;

        let mut grad = Self::zeros(self.shape)?;
        let w_out = self.tensor("w_out");
        let mix = self.tensor("mix");

        {
            let r_out = grad.range("w_out");
            let r_bout = grad.range("b_out");
            let r_skip = grad.range("w_skip");
            let g = &mut grad.data;
            for f in 0..n {
                let x = xt.frame(f);
                for o in 0..d {
                    let dyo = dy[f * d + o];
                    g[r_bout.start + o] += dyo;
                    for k in 0..hd {
                        g[r_out.start + o * hd + k] += dyo * fw.a[f * hd + k];
                    }
                    for i in 0..d {
                        g[r_skip.start + o * d + i] += dyo * x[i];
                    }
                }
            }
        }

        // du = (W_out^T dy) * (1 - a^2)
        let mut du = vec![0.0; n * hd];
        for f in 0..n {
            for k in 0..hd {
                let mut acc = 0.0;
                for o in 0..d {
                    acc += w_out[o * hd + k] * dy[f * d + o];
                }
                let a = fw.a[f * hd + k];
                du[f * hd + k] = acc * (1.0 - a * a);
            }
        }

        // u = (I + mix) h
        let mut dh = du.clone();
        {
            let r_mix = grad.range("mix");
            let g = &mut grad.data;
            for f in 0..n {
                for gi in 0..n {
                    let m = mix[f * fm + gi];
                    let mut acc = 0.0;
                    for k in 0..hd {
                        acc += du[f * hd + k] * fw.h[gi * hd + k];
                        dh[gi * hd + k] += m * du[f * hd + k];
                    }
                    g[r_mix.start + f * fm + gi] += acc;
                }
            }
        }

        {
            let r_in = grad.range("w_in");
            let r_t = grad.range("w_time");
            let r_b = grad.range("b_hidden");
            let g = &mut grad.data;
            for f in 0..n {
                let x = xt.frame(f);
                for k in 0..hd {
                    let dhk = dh[f * hd + k];
                    g[r_b.start + k] += dhk;
                    for i in 0..d {
                        g[r_in.start + k * d + i] += dhk * x[i];
                    }
                    for j in 0..e {
                        g[r_t.start + k * e + j] += dhk * fw.phi[f * e + j];
                    }
                }
            }
        }
        Ok((loss, grad))
    }

    /// Writes `<stem>.bin` (little-endian f64, row-major, tensors back to back) and
    /// `<stem>.json` (shape manifest).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(stem.with_extension("bin"))?;
        f.write_all(&bytes)?;
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            layout: self.shape,
            dtype: "f64".into(),
            byte_order: "little-endian".into(),
            tensors: TENSOR_NAMES
                .iter()
                .enumerate()
                .map(|(i, n)| TensorEntry {
                    name: (*n).into(),
                    shape: self.shape.tensor_shapes()[i],
                    offset: self.shape.offset(i),
                })
                .collect(),
        };
        fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let json_path = stem.with_extension("json");
        let bin_path = stem.with_extension("bin");
        let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&json_path)?)?;
        let bad = |reason: String| Error::Format {
            path: json_path.clone(),
            reason,
        };
        if manifest.format != CHECKPOINT_FORMAT || manifest.version != 1 {
            return Err(bad(format!("unsupported format {} v{}", manifest.format, manifest.version)));
        }
        let shape = manifest.layout;
        shape.validate()?;
        for (i, t) in manifest.tensors.iter().enumerate() {
            if TENSOR_NAMES.get(i) != Some(&t.name.as_str())
                || t.shape != shape.tensor_shapes()[i]
                || t.offset != shape.offset(i)
            {
                return Err(bad(format!("tensor table entry {i} ({}) does not match the layout", t.name)));
            }
        }
        if manifest.tensors.len() != TENSOR_NAMES.len() {
            return Err(bad("wrong number of tensors".into()));
        }
        let bytes = fs::read(&bin_path)?;
        if bytes.len() != shape.param_count() * 8 {
            return Err(Error::Format {
                path: bin_path,
                reason: format!("expected {} bytes, found {}", shape.param_count() * 8, bytes.len()),
            });
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::from_parts(shape, data)
    }

    /// Mean squared noise error for one window.
    pub fn loss(&self, xt: &LatentSequence, levels: &FrameNoiseVector, eps: &LatentSequence, vs: &VarianceSchedule) -> Result<f64> {
        mse_eps_loss(&self.predict_eps(xt, levels, vs)?, eps)
    }
}

impl Denoiser for ToyDenoiser {
    fn predict_eps(
        &self,
        xt: &LatentSequence,
        levels: &FrameNoiseVector,
        vs: &VarianceSchedule,
    ) -> Result<LatentSequence> {
        self.check_input(xt, levels)?;
        let fw = self.forward(xt, levels, vs.max_level());
        LatentSequence::new(xt.frames(), xt.dim(), fw.y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::LevelMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> ToyShape {
        ToyShape {
            dim: 3,
            hidden: 5,
            embed: 4,
            max_frames: 4,
        }
    }

    fn free(levels: Vec<f64>) -> FrameNoiseVector {
        FrameNoiseVector::new(levels, 1, LevelMode::Independent).unwrap()
    }

    fn randomized(seed: u64) -> ToyDenoiser {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ToyDenoiser::init(shape(), &mut rng).unwrap();
        for name in ["mix", "w_skip"] {
            for v in p.tensor_mut(name).iter_mut() {
                *v = 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for v in p.tensor_mut("b_hidden").iter_mut() {
            *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        p
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let p = ToyDenoiser::zeros(shape()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = LatentSequence::standard_normal(3, 3, &mut rng);
        let y = p.predict_eps(&x, &free(vec![0.1, 0.5, 0.9]), &VarianceSchedule::default()).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equivariant_mixing_commutes_with_frame_permutation() {
        let mut p = randomized(2);
        let fm = shape().max_frames;
        let mix = p.tensor_mut("mix");
        for f in 0..fm {
            for g in 0..fm {
                mix[f * fm + g] = if f == g { 0.4 } else { -0.15 };
            }
        }
        let vs = VarianceSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = LatentSequence::standard_normal(4, 3, &mut rng);
        let lv = vec![0.1, 0.4, 0.7, 0.9];
        let y = p.predict_eps(&x, &free(lv.clone()), &vs).unwrap();
        let mut xp = x.clone();
        xp.frame_mut(1).copy_from_slice(x.frame(3));
        xp.frame_mut(3).copy_from_slice(x.frame(1));
        let lvp = vec![lv[0], lv[3], lv[2], lv[1]];
        let yp = p.predict_eps(&xp, &free(lvp), &vs).unwrap();
        for (a, b) in [(0, 0), (1, 3), (2, 2), (3, 1)] {
            for (u, v) in y.frame(a).iter().zip(yp.frame(b)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = randomized(4);
        let vs = VarianceSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = LatentSequence::standard_normal(4, 3, &mut rng);
        let eps = LatentSequence::standard_normal(4, 3, &mut rng);
        let lv = free(vec![0.0, 0.3, 0.6, 1.0]);
        let (_, g) = p.loss_and_grad(&x, &lv, &eps, &vs).unwrap();
        let h = 1e-5;
        for i in 0..p.as_slice().len() {
            let mut plus = p.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = p.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (plus.loss(&x, &lv, &eps, &vs).unwrap() - minus.loss(&x, &lv, &eps, &vs).unwrap()) / (2.0 * h);
            let an = g.as_slice()[i];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn perfect_prediction_has_zero_gradient() {
        let p = randomized(6);
        let vs = VarianceSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = LatentSequence::standard_normal(3, 3, &mut rng);
        let lv = free(vec![0.2, 0.5, 0.8]);
        let target = p.predict_eps(&x, &lv, &vs).unwrap();
        let (loss, g) = p.loss_and_grad(&x, &lv, &target, &vs).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_oversized_windows() {
        let p = ToyDenoiser::zeros(shape()).unwrap();
        let x = LatentSequence::zeros(5, 3);
        assert!(p.predict_eps(&x, &free(vec![0.1; 5]), &VarianceSchedule::default()).is_err());
        let x = LatentSequence::zeros(2, 2);
        assert!(p.predict_eps(&x, &free(vec![0.1; 2]), &VarianceSchedule::default()).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_rejects_truncation() {
        let p = randomized(8);
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        p.save(&stem).unwrap();
        assert_eq!(ToyDenoiser::load(&stem).unwrap(), p);
        let bytes = fs::read(stem.with_extension("bin")).unwrap();
        fs::write(stem.with_extension("bin"), &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(ToyDenoiser::load(&stem), Err(Error::Format { .. })));
    }
}
