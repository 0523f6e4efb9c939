//! Probability-flow ODE integration.
//!
//! Each step assembles `(v_base, δ)` from the model, applies interval
//! classifier-free guidance componentwise, picks the correction weight `β`
//! and advances with `v = v_base - β δ` (Euler or Heun).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};

use crate::error::{invalid, Error, Result};
use crate::field::GridField;
use crate::io::{fmt_f64, write_csv, write_tensor, Tensor};
use crate::neural::{assemble_rows, Head, MlpModel};
use crate::par::Exec;
use crate::path::{NoiseConfig, PathKind};
use crate::spectral::{dct_forward, HeatSchedule};
use crate::{derive_seed, rng_from_seed};

pub const BETA_CLAMP: (f64, f64) = (0.05, 0.95);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Euler,
    Heun,
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Solver::Euler),
            "heun" => Ok(Solver::Heun),
            other => Err(invalid(format!("unknown solver '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaMode {
    /// Used as given, without clamping.
    Fixed(f64),
    Adaptive,
}

impl FromStr for BetaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adaptive" => Ok(BetaMode::Adaptive),
            v => v
                .parse::<f64>()
                .map(BetaMode::Fixed)
                .map_err(|_| invalid(format!("beta must be 'adaptive' or a number, got '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeGrid {
    /// `t_n = t_floor + (1 - t_floor) n / N`.
    Uniform,
    /// `t_n = t_floor^(1 - n / N)`, uniform in heat time.
    Geometric,
}

impl TimeGrid {
    pub fn points(self, t_floor: f64, steps: usize) -> Vec<f64> {
        let n = steps as f64;
        let mut ts: Vec<f64> = (0..=steps)
            .map(|i| {
                let f = i as f64 / n;
                match self {
                    TimeGrid::Uniform => t_floor + (1.0 - t_floor) * f,
                    TimeGrid::Geometric => t_floor.powf(1.0 - f),
                }
            })
            .collect();
        ts[steps] = 1.0;
        ts
    }
}

impl FromStr for TimeGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(TimeGrid::Uniform),
            "geometric" | "log" => Ok(TimeGrid::Geometric),
            other => Err(invalid(format!("unknown time grid '{other}'"))),
        }
    }
}

impl fmt::Display for TimeGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimeGrid::Uniform => "uniform",
            TimeGrid::Geometric => "geometric",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub solver: Solver,
    /// Guidance scale `α ≥ 1`.
    pub cfg_scale: f64,
    /// Guidance is active only for `t_min < t < t_max`.
    pub cfg_interval: (f64, f64),
    pub beta_mode: BetaMode,
    pub beta_clamp: (f64, f64),
    pub noise: NoiseConfig,
    pub seed: u64,
    /// `None` picks uniform for noisy paths and geometric for pure blur.
    pub grid: Option<TimeGrid>,
    /// Keep every state and its DCT in the trajectory.
    pub keep_states: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 100,
            solver: Solver::Heun,
            cfg_scale: 3.5,
            cfg_interval: (0.1, 0.9),
            beta_mode: BetaMode::Adaptive,
            beta_clamp: BETA_CLAMP,
            noise: NoiseConfig::default(),
            seed: 0,
            grid: None,
            keep_states: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("sampler needs at least one step"));
        }
        if !(self.cfg_scale >= 1.0 && self.cfg_scale.is_finite()) {
            return Err(invalid(format!("guidance scale must be >= 1, got {}", self.cfg_scale)));
        }
        let (lo, hi) = self.cfg_interval;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(invalid(format!("guidance interval must satisfy 0 <= t_min < t_max <= 1, got ({lo}, {hi})")));
        }
        let (a, b) = self.beta_clamp;
        if !(0.0 <= a && a <= b) {
            return Err(invalid("beta clamp bounds must be ordered"));
        }
        if let BetaMode::Fixed(beta) = self.beta_mode {
            if !beta.is_finite() {
                return Err(invalid("fixed beta must be finite"));
            }
        }
        Ok(())
    }
}

/// Per-step statistics, one entry per integration step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub beta: f64,
    pub alpha_eff: f64,
    pub base_norm: f64,
    pub delta_norm: f64,
}

/// The sampled path of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub shape: Vec<usize>,
    /// Grid points, `steps + 1` of them.
    pub times: Vec<f64>,
    pub records: Vec<StepRecord>,
    /// States at every grid point when requested.
    pub states: Option<Vec<GridField>>,
    /// DCT coefficients of each state when states are kept.
    pub spectra: Option<Vec<Vec<f64>>>,
}

impl Trajectory {
    pub fn betas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.beta).collect()
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.records
            .iter()
            .map(|r| {
                vec![
                    r.step.to_string(),
                    fmt_f64(r.t),
                    fmt_f64(r.beta),
                    fmt_f64(r.alpha_eff),
                    fmt_f64(r.base_norm),
                    fmt_f64(r.delta_norm),
                ]
            })
            .collect()
    }

    pub const CSV_HEADER: [&'static str; 6] = ["step", "t", "beta", "alpha_eff", "v_base_norm", "delta_norm"];

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_csv(path, &Self::CSV_HEADER, &self.csv_rows())
    }

    /// Stacks the kept states into one tensor of shape `(steps + 1, ...)`.
    pub fn write_states(&self, path: impl AsRef<Path>) -> Result<()> {
        let states = self.states.as_ref().ok_or_else(|| invalid("trajectory has no kept states"))?;
        let mut dims = vec![states.len()];
        dims.extend_from_slice(&self.shape);
        let data: Vec<f64> = states.iter().flat_map(|s| s.data().iter().copied()).collect();
        write_tensor(path, &Tensor::from_f64(dims, data)?)
    }
}

/// Anything that yields `(v_base, δ)` for a batch of states.
pub trait VelocitySource: Sync {
    fn shape(&self) -> &[usize];
    fn kind(&self) -> PathKind;
    fn pair_rows(
        &self,
        z: &Array2<f64>,
        t: f64,
        y: &[Option<usize>],
        sched: &HeatSchedule,
        exec: Exec,
    ) -> Result<(Array2<f64>, Array2<f64>)>;
}

impl VelocitySource for MlpModel {
    fn shape(&self) -> &[usize] {
        &self.config().shape
    }

    fn kind(&self) -> PathKind {
        self.config().path
    }

    fn pair_rows(
        &self,
        z: &Array2<f64>,
        t: f64,
        y: &[Option<usize>],
        sched: &HeatSchedule,
        exec: Exec,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.velocity_pair_rows(z, &vec![t; z.nrows()], y, sched, exec)
    }
}

/// An x-predictor that always returns known data instead of a network output.
#[derive(Debug, Clone)]
pub struct Oracle {
    shape: Vec<usize>,
    kind: PathKind,
    /// One row broadcast to every chain, or one row per chain.
    x: Array2<f64>,
}

impl Oracle {
    pub fn new(x: &GridField, kind: PathKind) -> Self {
        let x_rows = Array2::from_shape_vec((1, x.len()), x.data().to_vec()).expect("one row");
        Oracle { shape: x.shape().to_vec(), kind, x: x_rows }
    }

    pub fn from_rows(shape: &[usize], x: Array2<f64>, kind: PathKind) -> Result<Self> {
        if x.ncols() != shape.iter().product::<usize>() || x.nrows() == 0 {
            return Err(Error::ShapeMismatch { expected: shape.to_vec(), got: vec![x.nrows(), x.ncols()] });
        }
        Ok(Oracle { shape: shape.to_vec(), kind, x })
    }
}

impl VelocitySource for Oracle {
    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn kind(&self) -> PathKind {
        self.kind
    }

    fn pair_rows(
        &self,
        z: &Array2<f64>,
        t: f64,
        _y: &[Option<usize>],
        sched: &HeatSchedule,
        exec: Exec,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let raw = if self.x.nrows() == z.nrows() {
            self.x.clone()
        } else if self.x.nrows() == 1 {
            self.x.broadcast(z.raw_dim()).ok_or_else(|| invalid("oracle shape mismatch"))?.to_owned()
        } else {
            return Err(Error::ShapeMismatch { expected: vec![self.x.nrows()], got: vec![z.nrows()] });
        };
        assemble_rows(sched, self.kind, Head::X, &raw, z, &vec![t; z.nrows()], exec)
    }
}

/// `α` inside the open interval `(t_min, t_max)`, 1 elsewhere.
pub fn alpha_eff(alpha: f64, t: f64, interval: (f64, f64)) -> f64 {
    if t > interval.0 && t < interval.1 {
        alpha
    } else {
        1.0
    }
}

/// Componentwise guidance `u + α'(c - u)`. With `α' = 1` the conditional
/// pair is returned as is.
pub fn cfg_combine(
    cond: (&GridField, &GridField),
    uncond: (&GridField, &GridField),
    alpha: f64,
    t: f64,
    interval: (f64, f64),
) -> Result<(GridField, GridField)> {
    let a = alpha_eff(alpha, t, interval);
    if a == 1.0 {
        return Ok((cond.0.clone(), cond.1.clone()));
    }
    let base = uncond.0.lin_comb(1.0 - a, cond.0, a)?;
    let delta = uncond.1.lin_comb(1.0 - a, cond.1, a)?;
    Ok((base, delta))
}

fn guide(c: Array2<f64>, u: &Array2<f64>, a: f64) -> Array2<f64> {
    u + &((c - u) * a)
}

/// `clip(σ_no / (σ_full + σ_no))`, with `β = 0.5` when both are zero.
pub fn beta_from_sigmas(sigma_full: f64, sigma_no: f64, clamp: (f64, f64)) -> f64 {
    let total = sigma_full + sigma_no;
    if total == 0.0 {
        return 0.5;
    }
    (sigma_no / total).clamp(clamp.0, clamp.1)
}

/// `β` from the state changes of the two candidate one-step advances.
pub fn adaptive_beta(prev: &GridField, full: &GridField, no_delta: &GridField, clamp: (f64, f64)) -> Result<f64> {
    prev.ensure_same_shape(full)?;
    prev.ensure_same_shape(no_delta)?;
    Ok(beta_from_sigmas(full.sub(prev)?.norm_l2(), no_delta.sub(prev)?.norm_l2(), clamp))
}

struct RowsRun {
    last: Array2<f64>,
    /// `records[step][row]`
    records: Vec<Vec<StepRecord>>,
    states: Option<Vec<Array2<f64>>>,
}

fn row_norms(a: &Array2<f64>) -> Vec<f64> {
    a.map_axis(Axis(1), |r| r.dot(&r).sqrt()).to_vec()
}

/// Guided `(v_base, δ)` at one time.
fn guided_pair(
    source: &dyn VelocitySource,
    z: &Array2<f64>,
    t: f64,
    y: &[Option<usize>],
    cfg: &SamplerConfig,
    sched: &HeatSchedule,
    exec: Exec,
) -> Result<(Array2<f64>, Array2<f64>, f64)> {
    let a = alpha_eff(cfg.cfg_scale, t, cfg.cfg_interval);
    let (cb, cd) = source.pair_rows(z, t, y, sched, exec)?;
    if a == 1.0 || y.iter().all(Option::is_none) {
        return Ok((cb, cd, a));
    }
    let nulls = vec![None; y.len()];
    let (ub, ud) = source.pair_rows(z, t, &nulls, sched, exec)?;
    Ok((guide(cb, &ub, a), guide(cd, &ud, a), a))
}

fn integrate_rows(
    source: &dyn VelocitySource,
    cfg: &SamplerConfig,
    sched: &HeatSchedule,
    z0: Array2<f64>,
    y: &[Option<usize>],
    grid: &[f64],
    exec: Exec,
) -> Result<RowsRun> {
    let rows = z0.nrows();
    let mut z = z0;
    let mut states = cfg.keep_states.then(|| vec![z.clone()]);
    let mut records = Vec::with_capacity(grid.len() - 1);
    for (n, w) in grid.windows(2).enumerate() {
        let (t0, t1) = (w[0], w[1]);
        let h = t1 - t0;
        let (base, delta, a) = guided_pair(source, &z, t0, y, cfg, sched, exec)?;
        let base_norms = row_norms(&base);
        let delta_norms = row_norms(&delta);
        let betas: Vec<f64> = match cfg.beta_mode {
            BetaMode::Fixed(b) => vec![b; rows],
            BetaMode::Adaptive if n == 0 => vec![0.5; rows],
            // candidate advances differ from z by h v, so σ = |h| ‖v‖
            BetaMode::Adaptive => {
                let full_norms = row_norms(&(&base - &delta));
                (0..rows)
                    .map(|r| beta_from_sigmas(h.abs() * full_norms[r], h.abs() * base_norms[r], cfg.beta_clamp))
                    .collect()
            }
        };
        let beta_col = Array2::from_shape_vec((rows, 1), betas.clone()).expect("one beta per row");
        let v1 = &base - &(&delta * &beta_col);
        // on noisy paths the step landing on t = 1 is an Euler step: s(t) sits on its
        // floor there and a trapezoid stage would average in the clamped endpoint velocity
        let last = n + 2 == grid.len() && source.kind() != PathKind::PureBlur;
        z = match cfg.solver {
            Solver::Euler => &z + &(&v1 * h),
            Solver::Heun if last => &z + &(&v1 * h),
            Solver::Heun => {
                let z_pred = &z + &(&v1 * h);
                let (b2, d2, _) = guided_pair(source, &z_pred, t1, y, cfg, sched, exec)?;
                let v2 = b2 - &(d2 * &beta_col);
                &z + &((v1 + v2) * (0.5 * h))
            }
        };
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: n });
        }
        records.push(
            (0..rows)
                .map(|r| StepRecord {
                    step: n,
                    t: t0,
                    beta: betas[r],
                    alpha_eff: a,
                    base_norm: base_norms[r],
                    delta_norm: delta_norms[r],
                })
                .collect(),
        );
        if let Some(s) = states.as_mut() {
            s.push(z.clone());
        }
    }
    Ok(RowsRun { last: z, records, states })
}

fn check_source(source: &dyn VelocitySource, sched: &HeatSchedule, kind: PathKind) -> Result<()> {
    if source.kind() != kind {
        return Err(invalid(format!("source follows the {} path, sampler was asked for {kind}", source.kind())));
    }
    if source.shape() != sched.shape() {
        return Err(Error::ShapeMismatch { expected: sched.shape().to_vec(), got: source.shape().to_vec() });
    }
    Ok(())
}

fn to_rows(f: &GridField) -> Array2<f64> {
    Array2::from_shape_vec((1, f.len()), f.data().to_vec()).expect("one row")
}

fn row_field(a: &Array2<f64>, r: usize, shape: &[usize]) -> GridField {
    GridField::from_parts(shape.to_vec(), a.row(r).to_vec())
}

fn trajectory_for(run: &RowsRun, r: usize, grid: &[f64], shape: &[usize]) -> Trajectory {
    let states: Option<Vec<GridField>> =
        run.states.as_ref().map(|s| s.iter().map(|a| row_field(a, r, shape)).collect());
    let spectra = states.as_ref().map(|s| s.iter().map(|f| dct_forward(f).coeffs().to_vec()).collect());
    Trajectory {
        shape: shape.to_vec(),
        times: grid.to_vec(),
        records: run.records.iter().map(|step| step[r].clone()).collect(),
        states,
        spectra,
    }
}

/// Integrates one chain from an explicit starting state.
pub fn sample_from(
    source: &dyn VelocitySource,
    cfg: &SamplerConfig,
    sched: &HeatSchedule,
    z0: &GridField,
    y: Option<usize>,
) -> Result<(GridField, Trajectory)> {
    cfg.validate()?;
    if z0.shape() != sched.shape() {
        return Err(Error::ShapeMismatch { expected: sched.shape().to_vec(), got: z0.shape().to_vec() });
    }
    check_source(source, sched, source.kind())?;
    let default_grid = if source.kind() == PathKind::PureBlur { TimeGrid::Geometric } else { TimeGrid::Uniform };
    let grid = cfg.grid.unwrap_or(default_grid).points(sched.t_floor(), cfg.steps);
    let run = integrate_rows(source, cfg, sched, to_rows(z0), &[y], &grid, Exec::Sequential)?;
    Ok((row_field(&run.last, 0, z0.shape()), trajectory_for(&run, 0, &grid, z0.shape())))
}

/// One chain from `z(t_floor) ~ N(0, σ² I)`, seeded by `derive_seed(cfg.seed, 0)`.
pub fn sample(
    source: &dyn VelocitySource,
    cfg: &SamplerConfig,
    sched: &HeatSchedule,
    y: Option<usize>,
    kind: PathKind,
) -> Result<(GridField, Trajectory)> {
    if kind == PathKind::PureBlur {
        return Err(invalid("pure-blur sampling starts from a blurred field; use sample_pure_blur"));
    }
    check_source(source, sched, kind)?;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 0));
    let z0 = cfg.noise.draw(&mut rng, sched.shape())?;
    sample_from(source, cfg, sched, &z0, y)
}

/// Deterministic deblurring from `x_init` (a strongly blurred field) with `β = 1`.
pub fn sample_pure_blur(
    source: &dyn VelocitySource,
    cfg: &SamplerConfig,
    sched: &HeatSchedule,
    x_init: &GridField,
) -> Result<(GridField, Trajectory)> {
    check_source(source, sched, PathKind::PureBlur)?;
    let cfg = SamplerConfig { beta_mode: BetaMode::Fixed(1.0), ..cfg.clone() };
    sample_from(source, &cfg, sched, x_init, None)
}

/// Many independent chains integrated together, one row each.
///
/// Chain `i` starts from noise seeded by `derive_seed(cfg.seed, i)`, so a
/// chain's draw does not depend on how many chains run alongside it.
pub fn sample_batch(
    source: &dyn VelocitySource,
    cfg: &SamplerConfig,
    sched: &HeatSchedule,
    y: &[Option<usize>],
    kind: PathKind,
    exec: Exec,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    if kind == PathKind::PureBlur {
        return Err(invalid("pure-blur sampling starts from a blurred field; use sample_pure_blur"));
    }
    check_source(source, sched, kind)?;
    let n = sched.field_len();
    let noise = cfg.noise;
    let rows = exec.map_range(y.len(), |i| {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, i as u64));
        noise.draw_rows(&mut rng, 1, n)
    });
    let mut z0 = Array2::zeros((y.len(), n));
    for (i, r) in rows.iter().enumerate() {
        z0.row_mut(i).assign(&r.row(0));
    }
    let grid = cfg.grid.unwrap_or(TimeGrid::Uniform).points(sched.t_floor(), cfg.steps);
    let cfg = SamplerConfig { keep_states: false, ..cfg.clone() };
    Ok(integrate_rows(source, &cfg, sched, z0, y, &grid, exec)?.last)
}
