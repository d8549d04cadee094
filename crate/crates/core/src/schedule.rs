//! Noise-level arithmetic: the variance schedule, the linear sampling grid and
//! the per-frame level vectors used for progressive (chunked) denoising.
//!
//! Levels are continuous reals in `[0, T]`. A window's levels are stored as a
//! [`FrameNoiseVector`], which groups frames into chunks of equal level.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale of the training-time level shift relative to the inter-chunk gap.
pub const LEVEL_SHIFT_SCALE: f64 = 0.4;

/// Relative tolerance used when snapping a level back onto the sampling grid.
const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// DDPM-style linear beta ladder over `virtual_steps` steps spread evenly on `[0, T]`.
    LinearBeta {
        beta_start: f64,
        beta_end: f64,
        virtual_steps: usize,
    },
    /// Squared-cosine curve, floored at `min_alpha_bar` so the terminal level stays invertible.
    Cosine { offset: f64, min_alpha_bar: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::LinearBeta {
            beta_start: 1e-4,
            beta_end: 0.02,
            virtual_steps: 1000,
        }
    }
}

/// The forward-process signal curve `t -> alpha_bar(t)` on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    kind: ScheduleKind,
    max_level: f64,
    // log alpha_bar at the virtual-step knots (linear-beta only)
    log_knots: Vec<f64>,
}

impl VarianceSchedule {
    pub fn new(kind: ScheduleKind, max_level: f64) -> Result<Self> {
        if !(max_level.is_finite() && max_level > 0.0) {
            return Err(Error::InvalidSchedule(format!(
                "maximum level must be positive and finite, got {max_level}"
            )));
        }
        let log_knots = match kind {
            ScheduleKind::LinearBeta {
                beta_start,
                beta_end,
                virtual_steps,
            } => {
                if virtual_steps == 0 {
                    return Err(Error::InvalidSchedule("virtual_steps must be >= 1".into()));
                }
                for (name, b) in [("beta_start", beta_start), ("beta_end", beta_end)] {
                    if !(b > 0.0 && b < 1.0) {
                        return Err(Error::InvalidSchedule(format!(
                            "{name} = {b} must lie in (0, 1) for alpha_bar to be strictly decreasing"
                        )));
                    }
                }
                let mut knots = Vec::with_capacity(virtual_steps + 1);
                let mut acc = 0.0f64;
                knots.push(acc);
                for i in 0..virtual_steps {
                    let frac = if virtual_steps == 1 {
                        0.0
                    } else {
                        i as f64 / (virtual_steps - 1) as f64
                    };
                    let beta = beta_start + (beta_end - beta_start) * frac;
                    acc += (-beta).ln_1p();
                    knots.push(acc);
                }
                knots
            }
            ScheduleKind::Cosine {
                offset,
                min_alpha_bar,
            } => {
                if !(offset >= 0.0 && offset.is_finite()) {
                    return Err(Error::InvalidSchedule(format!(
                        "cosine offset must be >= 0, got {offset}"
                    )));
                }
                if !(min_alpha_bar > 0.0 && min_alpha_bar < 1.0) {
                    return Err(Error::InvalidSchedule(format!(
                        "min_alpha_bar must lie in (0, 1), got {min_alpha_bar}"
                    )));
                }
                Vec::new()
            }
        };
        let vs = Self {
            kind,
            max_level,
            log_knots,
        };
        let terminal = vs.alpha_bar(max_level);
        if terminal > 0.01 {
            return Err(Error::InvalidSchedule(format!(
                "alpha_bar(T) = {terminal:.3e} exceeds 0.01; the terminal level is not close to pure noise"
            )));
        }
        Ok(vs)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn max_level(&self) -> f64 {
        self.max_level
    }

    /// Cumulative signal coefficient at level `t`; `t` is clamped to `[0, T]`.
    pub fn alpha_bar(&self, t: f64) -> f64 {
        let u = (t / self.max_level).clamp(0.0, 1.0);
        if u == 0.0 {
            return 1.0;
        }
        match self.kind {
            ScheduleKind::LinearBeta { virtual_steps, .. } => {
                let pos = u * virtual_steps as f64;
                let k = (pos.floor() as usize).min(virtual_steps - 1);
                let frac = pos - k as f64;
                let lo = self.log_knots[k];
                let hi = self.log_knots[k + 1];
                (lo + frac * (hi - lo)).exp()
            }
            ScheduleKind::Cosine {
                offset,
                min_alpha_bar,
            } => {
                let f = |x: f64| ((x + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                min_alpha_bar + (1.0 - min_alpha_bar) * f(u) / f(0.0)
            }
        }
    }
}

impl Default for VarianceSchedule {
    fn default() -> Self {
        Self::new(ScheduleKind::default(), 1.0).expect("default schedule is valid")
    }
}

/// The linear sampling grid `0, T/S, 2T/S, ..., T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingSchedule {
    max_level: f64,
    grid: Vec<f64>,
}

impl SamplingSchedule {
    pub fn linear(max_level: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("the sampling schedule needs at least one step (S >= 1)"));
        }
        if !(max_level.is_finite() && max_level > 0.0) {
            return Err(Error::config(format!("maximum level must be positive, got {max_level}")));
        }
        let s = steps as f64;
        let mut grid: Vec<f64> = (0..=steps).map(|i| max_level * i as f64 / s).collect();
        grid[steps] = max_level;
        Ok(Self { max_level, grid })
    }

    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn max_level(&self) -> f64 {
        self.max_level
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn level(&self, index: usize) -> f64 {
        self.grid[index]
    }

    pub fn spacing(&self) -> f64 {
        self.max_level / self.steps() as f64
    }

    /// Grid index of `level`, if it sits on the grid.
    pub fn index_of(&self, level: f64) -> Option<usize> {
        let pos = level / self.spacing();
        let idx = pos.round();
        if idx < 0.0 || idx > self.steps() as f64 {
            return None;
        }
        let idx = idx as usize;
        ((self.grid[idx] - level).abs() <= GRID_TOL * self.max_level).then_some(idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LevelMode {
    /// Chunk levels increase from the oldest chunk to the newest.
    Progressive,
    /// Every frame shares one level.
    Uniform,
    /// Arbitrary per-frame levels (conditioning prefixes, hand-built inputs).
    Independent,
}

/// Per-frame noise levels, constant within each chunk of `chunk` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameNoiseVector {
    levels: Vec<f64>,
    chunk: usize,
    mode: LevelMode,
}

impl FrameNoiseVector {
    pub fn new(levels: Vec<f64>, chunk: usize, mode: LevelMode) -> Result<Self> {
        Self::validated(levels, chunk, mode, None)
    }

    // `ceiling` is the clamp value T when the vector came out of a clamped shift; ties are
    // then legal at T as well as at 0.
    fn validated(levels: Vec<f64>, chunk: usize, mode: LevelMode, ceiling: Option<f64>) -> Result<Self> {
        if levels.is_empty() || chunk == 0 || levels.len() % chunk != 0 {
            return Err(Error::config(format!(
                "{} levels cannot be split into chunks of {chunk}",
                levels.len()
            )));
        }
        for (f, &t) in levels.iter().enumerate() {
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::LevelOutOfRange {
                    frame: f,
                    level: t,
                    reason: "levels must be finite and non-negative",
                });
            }
        }
        for (j, c) in levels.chunks(chunk).enumerate() {
            if c.iter().any(|&t| t != c[0]) {
                return Err(Error::config(format!("levels differ inside chunk {j}")));
            }
        }
        let v = Self {
            levels,
            chunk,
            mode,
        };
        match mode {
            LevelMode::Uniform => {
                if v.levels.iter().any(|&t| t != v.levels[0]) {
                    return Err(Error::config("uniform level vector has differing levels"));
                }
            }
            LevelMode::Progressive => {
                let chunk_levels = v.chunk_levels();
                for (j, w) in chunk_levels.windows(2).enumerate() {
                    // ties are only legal where clamping pinned two chunks to 0
                    let clamped_tie = w[0] == w[1] && (w[0] == 0.0 || Some(w[0]) == ceiling);
                    if !(w[0] < w[1] || clamped_tie) {
                        return Err(Error::config(format!(
                            "progressive levels must increase from chunk {j} ({}) to chunk {} ({})",
                            w[0],
                            j + 1,
                            w[1]
                        )));
                    }
                }
            }
            LevelMode::Independent => {}
        }
        Ok(v)
    }

    pub fn uniform(level: f64, frames: usize, chunk: usize) -> Result<Self> {
        Self::new(vec![level; frames], chunk, LevelMode::Uniform)
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn chunk(&self) -> usize {
        self.chunk
    }

    pub fn mode(&self) -> LevelMode {
        self.mode
    }

    pub fn chunk_count(&self) -> usize {
        self.levels.len() / self.chunk
    }

    pub fn chunk_levels(&self) -> Vec<f64> {
        self.levels.iter().step_by(self.chunk).copied().collect()
    }

    pub fn max(&self) -> f64 {
        self.levels.iter().copied().fold(0.0, f64::max)
    }
}

/// Grid index held by chunk `j` (0 = oldest) at intra-period offset `r`.
pub fn progressive_chunk_index(j: usize, chunk: usize, r: usize) -> usize {
    (j + 1) * chunk - r
}

/// Progressive input levels for a full window of `chunks` chunks of `chunk` frames.
pub fn progressive_input_levels(
    schedule: &SamplingSchedule,
    chunks: usize,
    chunk: usize,
    offset: usize,
) -> Result<FrameNoiseVector> {
    if chunk == 0 || chunks == 0 {
        return Err(Error::config("chunk size and chunk count must be positive"));
    }
    if chunks * chunk != schedule.steps() {
        return Err(Error::config(format!(
            "window of {chunks} chunks x {chunk} frames must equal the step count S = {}",
            schedule.steps()
        )));
    }
    if offset >= chunk {
        return Err(Error::config(format!(
            "intra-period offset {offset} must be below the chunk size {chunk}"
        )));
    }
    let levels = (0..chunks)
        .flat_map(|j| {
            let t = schedule.level(progressive_chunk_index(j, chunk, offset));
            std::iter::repeat_n(t, chunk)
        })
        .collect();
    FrameNoiseVector::new(levels, chunk, LevelMode::Progressive)
}

/// Moves every level one grid index down.
pub fn output_levels(input: &FrameNoiseVector, schedule: &SamplingSchedule) -> Result<FrameNoiseVector> {
    let levels = input
        .levels()
        .iter()
        .enumerate()
        .map(|(f, &t)| match schedule.index_of(t) {
            Some(0) => Err(Error::LevelOutOfRange {
                frame: f,
                level: t,
                reason: "frame is already fully denoised",
            }),
            Some(i) => Ok(schedule.level(i - 1)),
            None => Err(Error::LevelOutOfRange {
                frame: f,
                level: t,
                reason: "level is not on the sampling grid",
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    FrameNoiseVector::new(levels, input.chunk(), input.mode())
}

/// Adds `0.4 * epsilon * gap` to every level and clamps to `[0, T]`.
pub fn shift_levels(levels: &FrameNoiseVector, epsilon: f64, gap: f64, max_level: f64) -> Result<FrameNoiseVector> {
    let delta = LEVEL_SHIFT_SCALE * epsilon * gap;
    let shifted = levels
        .levels()
        .iter()
        .map(|&t| (t + delta).clamp(0.0, max_level))
        .collect();
    FrameNoiseVector::validated(shifted, levels.chunk(), levels.mode(), Some(max_level))
}

/// Training-time perturbation: one standard-normal draw shared by every frame, scaled
/// by the inter-chunk gap `chunk * T / S`.
pub fn perturb_training_levels<R: Rng + ?Sized>(
    levels: &FrameNoiseVector,
    schedule: &SamplingSchedule,
    rng: &mut R,
) -> Result<FrameNoiseVector> {
    let epsilon: f64 = rng.sample(StandardNormal);
    let gap = levels.chunk() as f64 * schedule.spacing();
    shift_levels(levels, epsilon, gap, schedule.max_level())
}

/// Serializable description of a run's schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDocument {
    #[serde(flatten)]
    pub variance: ScheduleKind,
    #[serde(rename = "T")]
    pub max_level: f64,
    #[serde(rename = "S")]
    pub steps: usize,
}

impl ScheduleDocument {
    pub fn build(&self) -> Result<(VarianceSchedule, SamplingSchedule)> {
        Ok((
            VarianceSchedule::new(self.variance, self.max_level)?,
            SamplingSchedule::linear(self.max_level, self.steps)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(s: usize) -> SamplingSchedule {
        SamplingSchedule::linear(1.0, s).unwrap()
    }

    fn at(s: &SamplingSchedule, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| s.level(i)).collect()
    }

    #[test]
    fn linear_beta_endpoints() {
        let vs = VarianceSchedule::default();
        assert_eq!(vs.alpha_bar(0.0), 1.0);
        assert!(vs.alpha_bar(1.0) < vs.alpha_bar(0.5));
        assert!(vs.alpha_bar(0.5) < 1.0);
    }

    #[test]
    fn terminal_alpha_bar_matches_direct_product() {
        // oracle: plain running product over the 1000-step ladder
        let mut prod = 1.0f64;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            prod *= 1.0 - beta;
        }
        let vs = VarianceSchedule::default();
        let got = vs.alpha_bar(1.0);
        assert!((got - prod).abs() / prod < 1e-10, "{got} vs {prod}");
        assert!((prod - 4.0e-5).abs() < 0.1e-5, "{prod}");
    }

    #[test]
    fn alpha_bar_strictly_decreasing_dense() {
        for kind in [
            ScheduleKind::default(),
            ScheduleKind::Cosine {
                offset: 0.008,
                min_alpha_bar: 1e-4,
            },
        ] {
            let vs = VarianceSchedule::new(kind, 1.0).unwrap();
            let mut prev = vs.alpha_bar(0.0);
            for i in 1..=10_000 {
                let a = vs.alpha_bar(i as f64 / 10_000.0);
                assert!(a < prev, "{kind:?} not decreasing at {i}");
                prev = a;
            }
            assert!(prev <= 0.01);
        }
    }

    #[test]
    fn rejects_bad_variance_params() {
        let bad = ScheduleKind::LinearBeta {
            beta_start: -1e-3,
            beta_end: 0.02,
            virtual_steps: 1000,
        };
        assert!(matches!(VarianceSchedule::new(bad, 1.0), Err(Error::InvalidSchedule(_))));
        let weak = ScheduleKind::LinearBeta {
            beta_start: 1e-5,
            beta_end: 1e-4,
            virtual_steps: 10,
        };
        assert!(VarianceSchedule::new(weak, 1.0).is_err());
        assert!(VarianceSchedule::new(ScheduleKind::default(), 0.0).is_err());
        let bad_kind = serde_json::from_str::<ScheduleDocument>(r#"{"kind":"sigmoid","params":{},"T":1,"S":4}"#);
        assert!(bad_kind.is_err());
    }

    #[test]
    fn linear_grid_examples() {
        assert_eq!(grid(4).grid(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(grid(1).grid(), &[0.0, 1.0]);
        let g = grid(30);
        for w in g.grid().windows(2) {
            assert!((w[1] - w[0] - 1.0 / 30.0).abs() < 1e-15);
        }
        assert!(SamplingSchedule::linear(1.0, 0).is_err());
    }

    #[test]
    fn progressive_examples() {
        let g = grid(4);
        let v = progressive_input_levels(&g, 4, 1, 0).unwrap();
        assert_eq!(v.levels(), at(&g, &[1, 2, 3, 4]).as_slice());
        let v = progressive_input_levels(&g, 2, 2, 0).unwrap();
        assert_eq!(v.levels(), at(&g, &[2, 2, 4, 4]).as_slice());
        let v1 = progressive_input_levels(&g, 2, 2, 1).unwrap();
        assert_eq!(v1.levels(), at(&g, &[1, 1, 3, 3]).as_slice());
        // one decrement of the r=0 state gives the r=1 state
        assert_eq!(output_levels(&v, &g).unwrap(), v1);
        assert!(progressive_input_levels(&g, 3, 1, 0).is_err());
        assert!(progressive_input_levels(&g, 2, 2, 2).is_err());
    }

    #[test]
    fn output_level_examples() {
        let g = grid(4);
        let v = progressive_input_levels(&g, 4, 1, 0).unwrap();
        assert_eq!(output_levels(&v, &g).unwrap().levels(), at(&g, &[0, 1, 2, 3]).as_slice());
        let zero = output_levels(&v, &g).unwrap();
        assert!(matches!(output_levels(&zero, &g), Err(Error::LevelOutOfRange { frame: 0, .. })));

        let mut u = FrameNoiseVector::uniform(1.0, 4, 2).unwrap();
        for _ in 0..4 {
            u = output_levels(&u, &g).unwrap();
        }
        assert_eq!(u.levels(), &[0.0; 4]);
    }

    #[test]
    fn cycle_property() {
        for (s, c) in [(4, 1), (4, 2), (30, 5), (50, 5), (12, 3)] {
            let g = grid(s);
            let k = s / c;
            let start = progressive_input_levels(&g, k, c, 0).unwrap();
            let mut v = start.clone();
            for r in 1..=c {
                v = output_levels(&v, &g).unwrap();
                if r < c {
                    assert_eq!(v, progressive_input_levels(&g, k, c, r).unwrap());
                }
            }
            assert!(v.levels()[..c].iter().all(|&t| t == 0.0));
            let mut shifted = v.levels()[c..].to_vec();
            shifted.extend(std::iter::repeat_n(g.max_level(), c));
            let shifted = FrameNoiseVector::new(shifted, c, LevelMode::Progressive).unwrap();
            assert_eq!(shifted, start);
        }
    }

    #[test]
    fn shift_examples() {
        let g = grid(4);
        let v = progressive_input_levels(&g, 4, 1, 0).unwrap();
        assert_eq!(shift_levels(&v, 0.0, 0.25, 1.0).unwrap(), v);
        let s = shift_levels(&v, 1.0, 0.25, 1.0).unwrap();
        let want = [0.35, 0.6, 0.85, 1.0];
        for (a, b) in s.levels().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn shift_stddev_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let gap = 0.5;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        // levels far from both clamps, so the shift is observed unclamped
        let mid = FrameNoiseVector::new(vec![10.0, 10.0, 20.0, 20.0], 2, LevelMode::Progressive).unwrap();
        for _ in 0..n {
            let p = perturb_training_levels(&mid, &SamplingSchedule::linear(100.0, 400).unwrap(), &mut rng).unwrap();
            let d = p.levels()[0] - 10.0;
            sum += d;
            sum2 += d * d;
        }
        let mean = sum / n as f64;
        let sd = (sum2 / n as f64 - mean * mean).sqrt();
        // gap = chunk * T / S = 2 * 100 / 400
        let want = LEVEL_SHIFT_SCALE * gap;
        assert!((sd - want).abs() / want < 0.02, "{sd} vs {want}");
    }

    #[test]
    fn document_round_trip() {
        let doc = ScheduleDocument {
            variance: ScheduleKind::default(),
            max_level: 1.0,
            steps: 30,
        };
        let s = serde_json::to_string(&doc).unwrap();
        assert!(s.contains(r#""kind":"linear-beta""#), "{s}");
        let back: ScheduleDocument = serde_json::from_str(&s).unwrap();
        assert_eq!(back, doc);
        let (vs, ss) = back.build().unwrap();
        assert_eq!(ss.steps(), 30);
        assert_eq!(vs.alpha_bar(0.0), 1.0);
    }

    proptest! {
        #[test]
        fn linear_grid_is_exact(s in 1usize..200, t in 0.1f64..10.0) {
            let g = SamplingSchedule::linear(t, s).unwrap();
            prop_assert_eq!(g.grid()[0], 0.0);
            prop_assert_eq!(g.grid()[s], t);
            for w in g.grid().windows(2) {
                prop_assert!((w[1] - w[0] - t / s as f64).abs() < 1e-12);
                prop_assert!(w[1] > w[0]);
            }
        }

        #[test]
        fn perturbation_keeps_structure(eps in -6.0f64..6.0, k in 1usize..8, c in 1usize..5, r_seed in 0usize..100, clean in any::<bool>()) {
            let g = SamplingSchedule::linear(1.0, k * c).unwrap();
            let r = r_seed % c;
            let base = progressive_input_levels(&g, k, c, r).unwrap();
            let mut lv = base.levels().to_vec();
            if clean {
                let mut v = vec![0.0; c];
                v.extend(lv);
                lv = v;
            }
            let base = FrameNoiseVector::new(lv, c, LevelMode::Progressive).unwrap();
            let p = shift_levels(&base, eps, c as f64 * g.spacing(), 1.0).unwrap();
            prop_assert!(p.levels().iter().all(|&t| (0.0..=1.0).contains(&t)));
            let cl = p.chunk_levels();
            for w in cl.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
        }
    }
}
