//! Probability paths and their exact target velocities.
//!
//! Three schemes share one interface:
//!
//! | kind        | state `z_t`               | target `v*`                          |
//! |-------------|---------------------------|--------------------------------------|
//! | `Hdfm`      | `t u_t + (1 - t) e`       | `(u_t - z_t) / s(t) - Δu_t`          |
//! | `NoiseFm`   | `t x + (1 - t) e`         | `(x - z_t) / s(t)`                   |
//! | `PureBlur`  | `u_t`                     | `-Δu_t / max(t, t_floor)`            |
//!
//! with `u_t = H_{-log t}(x)` from [`crate::spectral`].

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::field::GridField;
use crate::par::Exec;
use crate::spectral::{heat_endpoint, HeatSchedule};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PathKind {
    /// Interpolated heat-dissipation path (blur + noise).
    Hdfm,
    /// Linear noise-to-data path, no blur.
    NoiseFm,
    /// Deterministic deblurring, no noise.
    PureBlur,
}

impl PathKind {
    pub const ALL: [PathKind; 3] = [PathKind::NoiseFm, PathKind::Hdfm, PathKind::PureBlur];

    pub fn as_str(self) -> &'static str {
        match self {
            PathKind::Hdfm => "hdfm",
            PathKind::NoiseFm => "noise_fm",
            PathKind::PureBlur => "pure_blur",
        }
    }

    /// Whether the scheme's state depends on the heat operator.
    pub fn uses_blur(self) -> bool {
        !matches!(self, PathKind::NoiseFm)
    }
}

impl fmt::Display for PathKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PathKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "hdfm" => Ok(PathKind::Hdfm),
            "noise_fm" | "noise" | "fm" => Ok(PathKind::NoiseFm),
            "pure_blur" | "blur" | "hdfm_blur" => Ok(PathKind::PureBlur),
            other => Err(invalid(format!("unknown path kind '{other}'"))),
        }
    }
}

/// Scale of the Gaussian prior `z(0) ~ N(0, σ² I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { sigma: 1.0 }
    }
}

impl NoiseConfig {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("noise scale must be positive, got {sigma}")));
        }
        Ok(NoiseConfig { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn draw(&self, rng: &mut Rng, shape: &[usize]) -> Result<GridField> {
        let sigma = self.sigma;
        GridField::from_fn(shape, |_| {
            let n: f64 = StandardNormal.sample(rng);
            sigma * n
        })
    }

    pub fn draw_rows(&self, rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
        let sigma = self.sigma;
        Array2::from_shape_simple_fn((rows, cols), || {
            let n: f64 = StandardNormal.sample(rng);
            sigma * n
        })
    }
}

/// One training tuple drawn from a path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub t: f64,
    pub z: GridField,
    pub u: GridField,
    pub lap_u: GridField,
    pub e: GridField,
    pub v_star: GridField,
    pub x: GridField,
    pub label: Option<usize>,
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("flow time must lie in [0, 1], got {t}")));
    }
    Ok(())
}

/// Builds the path state and target velocity for one datum and noise draw.
pub fn sample_path(x: &GridField, t: f64, e: &GridField, sched: &HeatSchedule, kind: PathKind) -> Result<PathSample> {
    x.ensure_same_shape(e)?;
    check_time(t)?;
    let s = sched.s(t);
    let (u, lap_u, z, v_star) = match kind {
        PathKind::Hdfm => {
            let (u, lap) = heat_endpoint(x, t, sched)?;
            let z = u.lin_comb(t, e, 1.0 - t)?;
            let v = u.sub(&z)?.lin_comb(1.0 / s, &lap, -1.0)?;
            (u, lap, z, v)
        }
        PathKind::NoiseFm => {
            let z = x.lin_comb(t, e, 1.0 - t)?;
            let v = x.sub(&z)?.scale(1.0 / s);
            (x.clone(), GridField::zeros(x.shape())?, z, v)
        }
        PathKind::PureBlur => {
            let (u, lap) = heat_endpoint(x, t, sched)?;
            let v = lap.scale(-1.0 / sched.clamp_time(t));
            (u.clone(), lap, u, v)
        }
    };
    Ok(PathSample { t, z, u, lap_u, e: e.clone(), v_star, x: x.clone(), label: None })
}

/// The error made by dropping the Laplacian correction: `v* - v_base = -Δu_t`.
pub fn delta_ignored_bias(x: &GridField, t: f64, e: &GridField, sched: &HeatSchedule) -> Result<GridField> {
    let p = sample_path(x, t, e, sched, PathKind::Hdfm)?;
    let v_base = p.u.sub(&p.z)?.scale(1.0 / sched.s(t));
    p.v_star.sub(&v_base)
}

/// Distribution of training times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeScheme {
    Uniform { lo: f64, hi: f64 },
    /// `sigmoid(mean + std · n)`, clipped to `[lo, hi]`.
    LogitNormal { mean: f64, std: f64, lo: f64, hi: f64 },
}

impl TimeScheme {
    /// `Uniform(t_floor, 1 - t_floor)`.
    pub fn uniform(t_floor: f64) -> Self {
        TimeScheme::Uniform { lo: t_floor, hi: 1.0 - t_floor }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = match *self {
            TimeScheme::Uniform { lo, hi } => (lo, hi),
            TimeScheme::LogitNormal { std, lo, hi, .. } => {
                if !(std > 0.0) {
                    return Err(invalid("logit-normal std must be positive"));
                }
                (lo, hi)
            }
        };
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return Err(invalid(format!("time range must satisfy 0 < lo < hi < 1, got ({lo}, {hi})")));
        }
        Ok(())
    }
}

pub fn draw_time(rng: &mut Rng, scheme: &TimeScheme) -> f64 {
    match *scheme {
        TimeScheme::Uniform { lo, hi } => rng.random_range(lo..hi),
        TimeScheme::LogitNormal { mean, std, lo, hi } => {
            let n: f64 = StandardNormal.sample(rng);
            let t = 1.0 / (1.0 + (-(mean + std * n)).exp());
            t.clamp(lo, hi)
        }
    }
}

/// A batch of path samples, one field per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub t: Vec<f64>,
    pub x: Array2<f64>,
    pub e: Array2<f64>,
    pub z: Array2<f64>,
    pub u: Array2<f64>,
    pub lap_u: Array2<f64>,
    pub v_star: Array2<f64>,
    pub labels: Option<Vec<usize>>,
}

impl PathBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Stacks individual samples; all must share one shape.
    pub fn from_samples(samples: &[PathSample]) -> Result<PathBatch> {
        let first = samples.first().ok_or_else(|| invalid("empty batch"))?;
        let n = first.x.len();
        let stack = |get: &dyn Fn(&PathSample) -> &GridField| -> Result<Array2<f64>> {
            let mut a = Array2::zeros((samples.len(), n));
            for (i, s) in samples.iter().enumerate() {
                let f = get(s);
                first.x.ensure_same_shape(f)?;
                a.row_mut(i).assign(&ndarray::ArrayView1::from(f.data()));
            }
            Ok(a)
        };
        let labels = if samples.iter().all(|s| s.label.is_some()) {
            Some(samples.iter().map(|s| s.label.unwrap_or_default()).collect())
        } else {
            None
        };
        Ok(PathBatch {
            t: samples.iter().map(|s| s.t).collect(),
            x: stack(&|s| &s.x)?,
            e: stack(&|s| &s.e)?,
            z: stack(&|s| &s.z)?,
            u: stack(&|s| &s.u)?,
            lap_u: stack(&|s| &s.lap_u)?,
            v_star: stack(&|s| &s.v_star)?,
            labels,
        })
    }
}

/// Row-wise [`sample_path`] for training batches.
pub fn sample_path_batch(
    x: &Array2<f64>,
    t: &[f64],
    e: &Array2<f64>,
    labels: Option<Vec<usize>>,
    sched: &HeatSchedule,
    kind: PathKind,
    exec: Exec,
) -> Result<PathBatch> {
    if x.dim() != e.dim() {
        return Err(Error::ShapeMismatch { expected: vec![x.nrows(), x.ncols()], got: vec![e.nrows(), e.ncols()] });
    }
    if t.len() != x.nrows() {
        return Err(Error::ShapeMismatch { expected: vec![x.nrows()], got: vec![t.len()] });
    }
    for &ti in t {
        check_time(ti)?;
    }
    let rows = x.nrows();
    let col = |v: Vec<f64>| Array2::from_shape_vec((rows, 1), v).expect("one entry per row");
    let tcol = col(t.to_vec());
    let scol = col(t.iter().map(|&ti| sched.s(ti)).collect());
    let (u, lap_u, z, v_star) = match kind {
        PathKind::Hdfm => {
            let (u, lap) = sched.heat_rows(x, t, exec)?;
            let z = &u * &tcol + e * &(1.0 - &tcol);
            let v = (&u - &z) / &scol - &lap;
            (u, lap, z, v)
        }
        PathKind::NoiseFm => {
            let z = x * &tcol + e * &(1.0 - &tcol);
            let v = (x - &z) / &scol;
            (x.clone(), Array2::zeros(x.raw_dim()), z, v)
        }
        PathKind::PureBlur => {
            let (u, lap) = sched.heat_rows(x, t, exec)?;
            let inv_t = col(t.iter().map(|&ti| -1.0 / sched.clamp_time(ti)).collect());
            let v = &lap * &inv_t;
            (u.clone(), lap, u, v)
        }
    };
    Ok(PathBatch { t: t.to_vec(), x: x.clone(), e: e.clone(), z, u, lap_u, v_star, labels })
}
