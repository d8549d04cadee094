//! Synthetic sequences with closed-form statistics, and the dataset file format.
//!
//! Dataset layout (little-endian):
//!
//! ```text
//! b"PAVD" | version: u8 = 1 | header_len: u32 | header: JSON | payload
//! ```
//!
//! The JSON header holds the generating [`SequenceSpec`], `count`, `frames`, `dim` and
//! `hasCenters`. The payload is every sequence as `frames * dim` f64 values, followed,
//! for moving-bump data, by every sequence's `frames` true centres.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::LatentSequence;
use crate::error::{Error, Result};
use crate::par::{self, Execution};

pub const DATASET_MAGIC: &[u8; 4] = b"PAVD";
pub const DATASET_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WrapMode {
    Periodic,
    Clamped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case")]
pub enum Generator {
    #[serde(rename_all = "camelCase")]
    Ar1Gaussian { rho: f64, sigma: f64, dim: usize },
    #[serde(rename_all = "camelCase")]
    MovingBump {
        width: f64,
        velocity: f64,
        grid: usize,
        wrap: WrapMode,
        noise: f64,
        start: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    #[serde(flatten)]
    pub generator: Generator,
    pub length: usize,
    pub seed: u64,
}

impl SequenceSpec {
    pub fn ar1(rho: f64, sigma: f64, dim: usize, length: usize, seed: u64) -> Self {
        Self {
            generator: Generator::Ar1Gaussian { rho, sigma, dim },
            length,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::config("sequence length must be positive"));
        }
        match self.generator {
            Generator::Ar1Gaussian { rho, sigma, dim } => {
                if !(rho.abs() < 1.0) {
                    return Err(Error::config(format!("AR(1) coefficient must satisfy |rho| < 1, got {rho}")));
                }
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::config(format!("sigma must be positive, got {sigma}")));
                }
                if dim == 0 {
                    return Err(Error::config("dimension must be positive"));
                }
            }
            Generator::MovingBump {
                width,
                velocity,
                grid,
                noise,
                start,
                ..
            } => {
                if !(width > 0.0 && width.is_finite()) {
                    return Err(Error::config(format!("bump width must be positive, got {width}")));
                }
                if grid < 8 {
                    return Err(Error::config(format!("bump grid needs at least 8 cells, got {grid}")));
                }
                if !(noise >= 0.0 && velocity.is_finite() && start.is_finite()) {
                    return Err(Error::config("bump noise must be non-negative and velocity/start finite"));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self.generator {
            Generator::Ar1Gaussian { dim, .. } => dim,
            Generator::MovingBump { grid, .. } => grid,
        }
    }
}

/// `x_0 ~ N(0, sigma^2)`, `x_{f+1} = rho x_f + sqrt(1 - rho^2) sigma z_f`, independently
/// per dimension.
pub fn sample_ar1_sequence<R: Rng + ?Sized>(spec: &SequenceSpec, rng: &mut R) -> Result<LatentSequence> {
    spec.validate()?;
    let Generator::Ar1Gaussian { rho, sigma, dim } = spec.generator else {
        return Err(Error::config("spec is not an AR(1) generator"));
    };
    let innov = (1.0 - rho * rho).sqrt() * sigma;
    let mut data = Vec::with_capacity(spec.length * dim);
    for _ in 0..dim {
        data.push(sigma * rng.sample::<f64, _>(StandardNormal));
    }
    for f in 1..spec.length {
        for d in 0..dim {
            let prev = data[(f - 1) * dim + d];
            data.push(rho * prev + innov * rng.sample::<f64, _>(StandardNormal));
        }
    }
    LatentSequence::new(spec.length, dim, data)
}

/// Moving-bump frames and the true (unwrapped) centre track.
#[derive(Debug, Clone, PartialEq)]
pub struct BumpSequence {
    pub frames: LatentSequence,
    pub centers: Vec<f64>,
}

/// Bump profile `exp(-d^2 / (2 w^2))` on `grid` cells around `center`.
pub fn bump_frame(center: f64, width: f64, grid: usize, wrap: WrapMode) -> Vec<f64> {
    let n = grid as f64;
    (0..grid)
        .map(|i| {
            let mut d = i as f64 - center;
            if wrap == WrapMode::Periodic {
                d -= n * (d / n).round();
            }
            (-d * d / (2.0 * width * width)).exp()
        })
        .collect()
}

/// Frame `f` is a bump centred at `start + velocity * f` plus i.i.d. `N(0, noise^2)`.
/// In clamped mode the centre stops at the grid edges.
pub fn sample_moving_bump<R: Rng + ?Sized>(spec: &SequenceSpec, rng: &mut R) -> Result<BumpSequence> {
    spec.validate()?;
    let Generator::MovingBump {
        width,
        velocity,
        grid,
        wrap,
        noise,
        start,
    } = spec.generator
    else {
        return Err(Error::config("spec is not a moving-bump generator"));
    };
    let mut data = Vec::with_capacity(spec.length * grid);
    let mut centers = Vec::with_capacity(spec.length);
    for f in 0..spec.length {
        let mut c = start + velocity * f as f64;
        if wrap == WrapMode::Clamped {
            c = c.clamp(0.0, (grid - 1) as f64);
        }
        centers.push(c);
        for v in bump_frame(c, width, grid, wrap) {
            let z: f64 = if noise > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
            data.push(v + noise * z);
        }
    }
    Ok(BumpSequence {
        frames: LatentSequence::new(spec.length, grid, data)?,
        centers,
    })
}

/// A set of equally shaped sequences drawn from one spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SequenceSpec,
    pub sequences: Vec<LatentSequence>,
    /// True centre tracks, moving-bump data only.
    pub centers: Option<Vec<Vec<f64>>>,
}

impl Dataset {
    /// Sequence `i` is drawn from ChaCha8 seeded with `spec.seed` on stream `i`, so the
    /// result does not depend on `exec`.
    pub fn generate(spec: &SequenceSpec, count: usize, exec: Execution) -> Result<Self> {
        spec.validate()?;
        if count == 0 {
            return Err(Error::config("dataset needs at least one sequence"));
        }
        let draws = par::map_range(count, exec, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            match spec.generator {
                Generator::Ar1Gaussian { .. } => sample_ar1_sequence(spec, &mut rng).map(|s| (s, None)),
                Generator::MovingBump { .. } => sample_moving_bump(spec, &mut rng).map(|b| (b.frames, Some(b.centers))),
            }
        });
        let mut sequences = Vec::with_capacity(count);
        let mut centers = Vec::new();
        for d in draws {
            let (s, c) = d?;
            sequences.push(s);
            centers.extend(c);
        }
        let centers = (!centers.is_empty()).then_some(centers);
        Ok(Self {
            spec: spec.clone(),
            sequences,
            centers,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.sequences.first().map_or(0, LatentSequence::frames)
    }

    pub fn dim(&self) -> usize {
        self.sequences.first().map_or(0, LatentSequence::dim)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct DatasetHeader {
    spec: SequenceSpec,
    count: usize,
    frames: usize,
    dim: usize,
    has_centers: bool,
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let (frames, dim) = (dataset.frames(), dataset.dim());
    if dataset.is_empty() {
        return Err(Error::config("cannot write an empty dataset"));
    }
    for s in &dataset.sequences {
        if s.frames() != frames || s.dim() != dim {
            return Err(Error::shape(format!("{frames}x{dim}"), format!("{}x{}", s.frames(), s.dim())));
        }
    }
    if let Some(c) = &dataset.centers {
        if c.len() != dataset.len() || c.iter().any(|t| t.len() != frames) {
            return Err(Error::shape("one centre per frame of every sequence", "ragged centre tracks"));
        }
    }
    let header = serde_json::to_vec(&DatasetHeader {
        spec: dataset.spec.clone(),
        count: dataset.len(),
        frames,
        dim,
        has_centers: dataset.centers.is_some(),
    })?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&[DATASET_VERSION])?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for s in &dataset.sequences {
        for v in s.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for track in dataset.centers.iter().flatten() {
        for v in track {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 9 || &bytes[..4] != DATASET_MAGIC {
        return Err(bad("missing PAVD magic bytes".into()));
    }
    if bytes[4] != DATASET_VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(9..9 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: DatasetHeader = serde_json::from_slice(body).map_err(|e| bad(format!("corrupt header: {e}")))?;
    header.spec.validate()?;
    if header.dim != header.spec.dim() || header.count == 0 || header.frames == 0 {
        return Err(bad("header counts disagree with the generator spec".into()));
    }
    let per_seq = header.frames * header.dim;
    let values = header.count * per_seq + if header.has_centers { header.count * header.frames } else { 0 };
    let payload = &bytes[9 + hlen..];
    if payload.len() != values * 8 {
        return Err(bad(format!("expected {} payload bytes, found {}", values * 8, payload.len())));
    }
    let mut floats = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut sequences = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let data: Vec<f64> = floats.by_ref().take(per_seq).collect();
        sequences.push(LatentSequence::new(header.frames, header.dim, data)?);
    }
    let centers = header.has_centers.then(|| {
        (0..header.count)
            .map(|_| floats.by_ref().take(header.frames).collect())
            .collect()
    });
    Ok(Dataset {
        spec: header.spec,
        sequences,
        centers,
    })
}

/// Circular centroid of one frame, in grid cells within `[0, grid)`.
pub fn circular_centroid(frame: &[f64]) -> Option<f64> {
    let n = frame.len() as f64;
    let (mut s, mut c) = (0.0, 0.0);
    for (i, &v) in frame.iter().enumerate() {
        let th = 2.0 * PI * i as f64 / n;
        s += v * th.sin();
        c += v * th.cos();
    }
    if s.hypot(c) < 1e-12 {
        return None;
    }
    Some((s.atan2(c) * n / (2.0 * PI)).rem_euclid(n))
}
