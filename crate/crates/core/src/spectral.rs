//! Orthonormal DCT transforms under Neumann boundary conditions, the
//! Laplacian eigenvalue grid, and the flow-time calibrated heat operator.
//!
//! The heat semigroup `H_τ = IDCT · diag(exp(λ τ)) · DCT` is diagonal in the
//! DCT-II basis. Flow time `t ∈ (0, 1]` maps to heat time `τ = -log t`, which
//! turns the per-coefficient factor into the power law `t^{|λ|}`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::Array2;
use rustdct::{DctPlanner, TransformType2And3};

use crate::error::{invalid, Error, Result};
use crate::field::{GridField, Layout};
use crate::par::Exec;

pub const DEFAULT_T_FLOOR: f64 = 1e-4;
pub const DEFAULT_S_EPS: f64 = 1e-3;
pub const DEFAULT_ENERGY_CUTOFF: f64 = 0.5;

/// Which implementation evaluates the per-axis transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DctBackend {
    /// Dense `N x N` orthonormal DCT-II matrix products.
    Direct,
    /// `O(N log N)` transforms, rescaled to the orthonormal convention.
    #[default]
    Fast,
}

// ---------------------------------------------------------------------------
// Per-axis transforms

struct FastAxis {
    n: usize,
    plan: Arc<dyn TransformType2And3<f64>>,
    scratch_len: usize,
}

impl FastAxis {
    fn new(n: usize) -> Self {
        let plan = DctPlanner::new().plan_dct2(n);
        let scratch_len = plan.get_scratch_len();
        FastAxis { n, plan, scratch_len }
    }

    fn forward(&self, buf: &mut [f64], scratch: &mut [f64]) {
        self.plan.process_dct2_with_scratch(buf, &mut scratch[..self.scratch_len]);
        let n = self.n as f64;
        buf[0] *= (1.0 / n).sqrt();
        let c = (2.0 / n).sqrt();
        for v in &mut buf[1..] {
            *v *= c;
        }
    }

    fn inverse(&self, buf: &mut [f64], scratch: &mut [f64]) {
        // The unnormalized DCT-III halves the DC term.
        let n = self.n as f64;
        buf[0] *= 2.0 * (1.0 / n).sqrt();
        let c = (2.0 / n).sqrt();
        for v in &mut buf[1..] {
            *v *= c;
        }
        self.plan.process_dct3_with_scratch(buf, &mut scratch[..self.scratch_len]);
    }
}

/// Orthonormal DCT-II matrix, row `k` holds basis vector `k`.
struct DirectAxis {
    n: usize,
    m: Vec<f64>,
}

impl DirectAxis {
    fn new(n: usize) -> Self {
        let mut m = vec![0.0; n * n];
        for k in 0..n {
            let c = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            for i in 0..n {
                m[k * n + i] = c * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
            }
        }
        DirectAxis { n, m }
    }

    fn forward(&self, buf: &mut [f64], tmp: &mut [f64]) {
        let n = self.n;
        for k in 0..n {
            let row = &self.m[k * n..(k + 1) * n];
            tmp[k] = row.iter().zip(buf.iter()).map(|(a, b)| a * b).sum();
        }
        buf.copy_from_slice(&tmp[..n]);
    }

    fn inverse(&self, buf: &mut [f64], tmp: &mut [f64]) {
        let n = self.n;
        tmp[..n].fill(0.0);
        for k in 0..n {
            let ck = buf[k];
            let row = &self.m[k * n..(k + 1) * n];
            for (o, a) in tmp[..n].iter_mut().zip(row) {
                *o += a * ck;
            }
        }
        buf.copy_from_slice(&tmp[..n]);
    }
}

enum AxisPlan {
    Fast(FastAxis),
    Direct(DirectAxis),
}

impl AxisPlan {
    fn scratch_len(&self) -> usize {
        match self {
            AxisPlan::Fast(p) => p.scratch_len.max(p.n),
            AxisPlan::Direct(p) => p.n,
        }
    }

    fn apply(&self, buf: &mut [f64], scratch: &mut [f64], inverse: bool) {
        if buf.len() == 1 {
            return;
        }
        match (self, inverse) {
            (AxisPlan::Fast(p), false) => p.forward(buf, scratch),
            (AxisPlan::Fast(p), true) => p.inverse(buf, scratch),
            (AxisPlan::Direct(p), false) => p.forward(buf, scratch),
            (AxisPlan::Direct(p), true) => p.inverse(buf, scratch),
        }
    }
}

type PlanCache = Mutex<HashMap<(usize, DctBackend), Arc<AxisPlan>>>;

fn axis_plan(n: usize, backend: DctBackend) -> Arc<AxisPlan> {
    thread_local! {
        static LOCAL: std::cell::RefCell<HashMap<(usize, DctBackend), Arc<AxisPlan>>> = std::cell::RefCell::new(HashMap::new());
    }
    if let Some(p) = LOCAL.with(|l| l.borrow().get(&(n, backend)).cloned()) {
        return p;
    }
    static CACHE: OnceLock<PlanCache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let plan = {
        let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
        guard
            .entry((n, backend))
            .or_insert_with(|| {
                Arc::new(match backend {
                    DctBackend::Fast => AxisPlan::Fast(FastAxis::new(n)),
                    DctBackend::Direct => AxisPlan::Direct(DirectAxis::new(n)),
                })
            })
            .clone()
    };
    LOCAL.with(|l| l.borrow_mut().insert((n, backend), plan.clone()));
    plan
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

/// Applies `plan` to the `count` lines of length `n` starting at `start(j)` with spacing `stride`.
fn transform_lines(
    plan: &AxisPlan,
    data: &mut [f64],
    n: usize,
    stride: usize,
    count: usize,
    start: impl Fn(usize) -> usize,
    inverse: bool,
) {
    SCRATCH.with(|cell| {
        let (scratch, line) = &mut *cell.borrow_mut();
        scratch.resize(plan.scratch_len().max(scratch.len()), 0.0);
        line.resize(n.max(line.len()), 0.0);
        for j in 0..count {
            let s = start(j);
            if stride == 1 {
                plan.apply(&mut data[s..s + n], scratch, inverse);
            } else {
                for (i, v) in line[..n].iter_mut().enumerate() {
                    *v = data[s + i * stride];
                }
                plan.apply(&mut line[..n], scratch, inverse);
                for (i, v) in line[..n].iter().enumerate() {
                    data[s + i * stride] = *v;
                }
            }
        }
    });
}

/// Separable transform of one field stored in `data` (layout order), in place.
fn transform_in_place(layout: &Layout, data: &mut [f64], backend: DctBackend, inverse: bool) {
    debug_assert_eq!(data.len(), layout.len());
    let c = layout.channels;
    match layout.spatial.as_slice() {
        [n] => {
            if *n > 1 {
                transform_lines(&axis_plan(*n, backend), data, *n, c, c, |ch| ch, inverse);
            }
        }
        [h, w] => {
            let (h, w) = (*h, *w);
            if w > 1 {
                transform_lines(&axis_plan(w, backend), data, w, c, h * c, |j| (j / c) * w * c + j % c, inverse);
            }
            if h > 1 {
                transform_lines(&axis_plan(h, backend), data, h, w * c, w * c, |j| j, inverse);
            }
        }
        _ => unreachable!("layout validated"),
    }
}

// ---------------------------------------------------------------------------
// Fields in the DCT domain

/// Orthonormal DCT-II coefficients of a [`GridField`], same shape as the source.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    shape: Vec<usize>,
    coeffs: Vec<f64>,
}

impl SpectralField {
    pub fn new(shape: Vec<usize>, coeffs: Vec<f64>) -> Result<Self> {
        let layout = Layout::from_shape(&shape)?;
        if coeffs.len() != layout.len() {
            return Err(Error::ShapeMismatch { expected: shape, got: vec![coeffs.len()] });
        }
        if coeffs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("spectral coefficients".into()));
        }
        Ok(SpectralField { shape, coeffs })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn layout(&self) -> Layout {
        Layout::from_shape(&self.shape).expect("shape validated at construction")
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|v| v * v).sum()
    }
}

pub fn dct_forward(x: &GridField) -> SpectralField {
    dct_forward_with(x, DctBackend::default())
}

pub fn dct_forward_with(x: &GridField, backend: DctBackend) -> SpectralField {
    let layout = x.layout();
    let mut coeffs = x.data().to_vec();
    transform_in_place(&layout, &mut coeffs, backend, false);
    SpectralField { shape: x.shape().to_vec(), coeffs }
}

pub fn dct_inverse(s: &SpectralField) -> GridField {
    dct_inverse_with(s, DctBackend::default())
}

pub fn dct_inverse_with(s: &SpectralField, backend: DctBackend) -> GridField {
    let layout = s.layout();
    let mut data = s.coeffs.clone();
    transform_in_place(&layout, &mut data, backend, true);
    GridField::from_parts(s.shape.clone(), data)
}

/// Forward transform of a raw slice laid out as `layout`.
pub fn dct_forward_slice(layout: &Layout, data: &mut [f64]) {
    transform_in_place(layout, data, DctBackend::default(), false);
}

/// Inverse transform of a raw slice laid out as `layout`.
pub fn dct_inverse_slice(layout: &Layout, data: &mut [f64]) {
    transform_in_place(layout, data, DctBackend::default(), true);
}

// ---------------------------------------------------------------------------
// Laplacian eigenvalues

/// Neumann Laplacian eigenvalues on the spatial grid, scaled by the blur strength.
///
/// `λ[k, l] = -r π² (k²/H² + l²/W²)`; the DC entry is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenGrid {
    spatial: Vec<usize>,
    lambda: Vec<f64>,
    blur_strength: f64,
}

impl EigenGrid {
    pub fn spatial(&self) -> &[usize] {
        &self.spatial
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn blur_strength(&self) -> f64 {
        self.blur_strength
    }

    /// Largest `|λ|` on the grid.
    pub fn max_abs(&self) -> f64 {
        self.lambda.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Smallest nonzero `|λ|`, if any.
    pub fn min_nonzero_abs(&self) -> Option<f64> {
        self.lambda.iter().map(|v| v.abs()).filter(|&v| v > 0.0).min_by(|a, b| a.total_cmp(b))
    }

    /// Same grid with every eigenvalue replaced by `f(λ)`; no validation.
    ///
    /// Used to build deliberately broken operators for self-checks and to
    /// emulate the `r -> 0` limit (`λ ≡ 0`).
    pub fn map_unchecked(&self, f: impl Fn(f64) -> f64) -> EigenGrid {
        EigenGrid {
            spatial: self.spatial.clone(),
            lambda: self.lambda.iter().map(|&l| f(l)).collect(),
            blur_strength: self.blur_strength,
        }
    }

    /// Verifies `r λ ≤ 0` everywhere and `λ_DC = 0`.
    pub fn validate(&self) -> Result<()> {
        if self.lambda.first().copied() != Some(0.0) {
            return Err(invalid("DC eigenvalue must be exactly zero"));
        }
        if self.lambda.iter().any(|&l| !(l <= 0.0)) {
            return Err(invalid("Laplacian eigenvalues must be nonpositive"));
        }
        Ok(())
    }
}

/// Builds the eigenvalue grid for a field shape (channels are broadcast).
pub fn eigen_grid(shape: &[usize], blur_strength: f64) -> Result<EigenGrid> {
    if !(blur_strength > 0.0 && blur_strength <= 1.0) {
        return Err(invalid(format!("blur strength must lie in (0, 1], got {blur_strength}")));
    }
    let layout = Layout::from_shape(shape)?;
    let scale = -blur_strength * PI * PI;
    let lambda = match layout.spatial.as_slice() {
        [n] => (0..*n).map(|k| scale * (k * k) as f64 / (n * n) as f64).collect(),
        [h, w] => {
            let (hf, wf) = ((h * h) as f64, (w * w) as f64);
            (0..*h)
                .flat_map(|k| (0..*w).map(move |l| scale * ((k * k) as f64 / hf + (l * l) as f64 / wf)))
                .collect()
        }
        _ => unreachable!("layout validated"),
    };
    Ok(EigenGrid { spatial: layout.spatial, lambda, blur_strength })
}

/// Normalized radial frequency `sqrt((k/H)² + (l/W)²)` per spatial coefficient.
pub fn radial_frequencies(spatial: &[usize]) -> Vec<f64> {
    match spatial {
        [n] => (0..*n).map(|k| k as f64 / *n as f64).collect(),
        [h, w] => (0..*h)
            .flat_map(|k| {
                (0..*w).map(move |l| ((k as f64 / *h as f64).powi(2) + (l as f64 / *w as f64).powi(2)).sqrt())
            })
            .collect(),
        _ => panic!("spatial grid must have one or two axes"),
    }
}

// ---------------------------------------------------------------------------
// Heat schedule and operators

/// Time calibration and clamping for the forward heat corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatSchedule {
    shape: Vec<usize>,
    layout: Layout,
    eigen: EigenGrid,
    t_floor: f64,
    s_eps: f64,
}

impl HeatSchedule {
    /// Schedule for fields of `shape` with default clamps.
    pub fn new(shape: &[usize], blur_strength: f64) -> Result<Self> {
        let eigen = eigen_grid(shape, blur_strength)?;
        Self::with_eigen(shape, eigen)
    }

    pub fn with_eigen(shape: &[usize], eigen: EigenGrid) -> Result<Self> {
        let layout = Layout::from_shape(shape)?;
        if layout.spatial != eigen.spatial {
            return Err(Error::ShapeMismatch { expected: layout.spatial, got: eigen.spatial.clone() });
        }
        Ok(HeatSchedule {
            shape: shape.to_vec(),
            layout,
            eigen,
            t_floor: DEFAULT_T_FLOOR,
            s_eps: DEFAULT_S_EPS,
        })
    }

    pub fn with_t_floor(mut self, t_floor: f64) -> Result<Self> {
        if !(t_floor > 0.0 && t_floor < 1.0) {
            return Err(invalid(format!("t_floor must lie in (0, 1), got {t_floor}")));
        }
        self.t_floor = t_floor;
        Ok(self)
    }

    pub fn with_s_eps(mut self, s_eps: f64) -> Result<Self> {
        if !(s_eps > 0.0 && s_eps <= 1.0) {
            return Err(invalid(format!("s_eps must lie in (0, 1], got {s_eps}")));
        }
        self.s_eps = s_eps;
        Ok(self)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn eigen(&self) -> &EigenGrid {
        &self.eigen
    }

    pub fn t_floor(&self) -> f64 {
        self.t_floor
    }

    pub fn s_eps(&self) -> f64 {
        self.s_eps
    }

    pub fn field_len(&self) -> usize {
        self.layout.len()
    }

    pub fn clamp_time(&self, t: f64) -> f64 {
        t.max(self.t_floor)
    }

    /// Heat time `τ(t) = -log(max(t, t_floor))`.
    pub fn tau(&self, t: f64) -> f64 {
        -self.clamp_time(t).ln()
    }

    /// Denominator clamp `s(t) = max(1 - t, ε)`.
    pub fn s(&self, t: f64) -> f64 {
        (1.0 - t).max(self.s_eps)
    }

    /// Per-spatial-coefficient factors `exp(λ τ(t)) = t^{|λ|}`.
    pub fn heat_factors(&self, t: f64) -> Vec<f64> {
        let tau = self.tau(t);
        self.eigen.lambda.iter().map(|&l| (l * tau).exp()).collect()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid(format!("flow time must lie in [0, 1], got {t}")));
        }
        Ok(())
    }

    fn check_field(&self, x: &GridField) -> Result<()> {
        if x.shape() != self.shape.as_slice() {
            return Err(Error::ShapeMismatch { expected: self.shape.clone(), got: x.shape().to_vec() });
        }
        Ok(())
    }

    /// `IDCT(m(λ) ⊙ DCT(x))` for a single field.
    pub fn spectral_map(&self, x: &GridField, m: impl Fn(f64) -> f64) -> Result<GridField> {
        self.check_field(x)?;
        let mut data = x.data().to_vec();
        spectral_multiply(&self.layout, &self.eigen.lambda, &mut data, &m);
        Ok(GridField::from_parts(self.shape.clone(), data))
    }

    /// Row-wise `IDCT(m(row, λ) ⊙ DCT(row))`; each row of `x` is one field.
    pub fn spectral_map_rows<F>(&self, x: &Array2<f64>, exec: Exec, m: F) -> Result<Array2<f64>>
    where
        F: Fn(usize, f64) -> f64 + Sync + Send,
    {
        self.check_rows(x)?;
        let mut out = x.to_owned();
        let (layout, lambda) = (&self.layout, &self.eigen.lambda);
        exec.for_each_row(&mut out, |i, mut row| {
            let data = row.as_slice_mut().expect("standard layout");
            spectral_multiply(layout, lambda, data, &|l| m(i, l));
        });
        Ok(out)
    }

    /// Row-wise heat endpoint and Laplacian, one forward and two inverse transforms per row.
    pub fn heat_rows(&self, x: &Array2<f64>, t: &[f64], exec: Exec) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_rows(x)?;
        if t.len() != x.nrows() {
            return Err(Error::ShapeMismatch { expected: vec![x.nrows()], got: vec![t.len()] });
        }
        for &ti in t {
            self.check_time(ti)?;
        }
        let n = self.layout.len();
        let (layout, lambda) = (&self.layout, &self.eigen.lambda);
        let c = layout.channels;
        let taus: Vec<f64> = t.iter().map(|&ti| self.tau(ti)).collect();
        // u_t in the first half of each row, Δu_t in the second
        let mut both = Array2::zeros((x.nrows(), 2 * n));
        exec.for_each_row(&mut both, |i, mut row| {
            let data = row.as_slice_mut().expect("standard layout");
            let (u, lap) = data.split_at_mut(n);
            u.copy_from_slice(x.row(i).as_slice().expect("standard layout"));
            dct_forward_slice(layout, u);
            for (j, (uv, lv)) in u.iter_mut().zip(lap.iter_mut()).enumerate() {
                let l = lambda[j / c];
                *uv *= (l * taus[i]).exp();
                *lv = l * *uv;
            }
            dct_inverse_slice(layout, u);
            dct_inverse_slice(layout, lap);
        });
        let u = both.slice(ndarray::s![.., ..n]).to_owned();
        let lap = both.slice(ndarray::s![.., n..]).to_owned();
        Ok((u, lap))
    }

    fn check_rows(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.layout.len() || !x.is_standard_layout() {
            return Err(Error::ShapeMismatch { expected: vec![self.layout.len()], got: vec![x.ncols()] });
        }
        Ok(())
    }
}

fn spectral_multiply(layout: &Layout, lambda: &[f64], data: &mut [f64], m: &dyn Fn(f64) -> f64) {
    let c = layout.channels;
    dct_forward_slice(layout, data);
    for (j, v) in data.iter_mut().enumerate() {
        *v *= m(lambda[j / c]);
    }
    dct_inverse_slice(layout, data);
}

/// Calibrated heat endpoint `u_t = H_{τ(t)}(x)` and its Laplacian `Δu_t`.
///
/// `t` is clamped to `t_floor` before calibration; `t = 0` is accepted and
/// maps to the floor.
pub fn heat_endpoint(x: &GridField, t: f64, sched: &HeatSchedule) -> Result<(GridField, GridField)> {
    sched.check_field(x)?;
    sched.check_time(t)?;
    let layout = &sched.layout;
    let c = layout.channels;
    let lambda = &sched.eigen.lambda;
    let factors = sched.heat_factors(t);
    let mut u = x.data().to_vec();
    dct_forward_slice(layout, &mut u);
    for (j, v) in u.iter_mut().enumerate() {
        *v *= factors[j / c];
    }
    let mut lap: Vec<f64> = u.iter().enumerate().map(|(j, v)| lambda[j / c] * v).collect();
    dct_inverse_slice(layout, &mut u);
    dct_inverse_slice(layout, &mut lap);
    Ok((GridField::from_parts(x.shape().to_vec(), u), GridField::from_parts(x.shape().to_vec(), lap)))
}

/// Uncalibrated heat operator `H_τ(x) = IDCT(exp(λ τ) ⊙ DCT(x))`, `τ ≥ 0`.
pub fn heat_endpoint_raw_tau(x: &GridField, tau: f64, eigen: &EigenGrid) -> Result<GridField> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(invalid(format!("heat time must be finite and nonnegative, got {tau}")));
    }
    apply_eigen(x, eigen, |l| (l * tau).exp())
}

/// Discrete Laplacian `Δx = IDCT(λ ⊙ DCT(x))`.
pub fn laplacian(x: &GridField, eigen: &EigenGrid) -> Result<GridField> {
    apply_eigen(x, eigen, |l| l)
}

/// `IDCT(m(λ) ⊙ DCT(x))` against an explicit eigenvalue grid.
pub fn apply_eigen(x: &GridField, eigen: &EigenGrid, m: impl Fn(f64) -> f64) -> Result<GridField> {
    let layout = x.layout();
    if layout.spatial != eigen.spatial {
        return Err(Error::ShapeMismatch { expected: eigen.spatial.clone(), got: layout.spatial });
    }
    let mut data = x.data().to_vec();
    spectral_multiply(&layout, &eigen.lambda, &mut data, &m);
    Ok(GridField::from_parts(x.shape().to_vec(), data))
}

// ---------------------------------------------------------------------------
// Energy bands

/// Splits DCT energy at `cutoff` of the Nyquist radius.
///
/// Coefficients with normalized radial frequency strictly below the cutoff
/// count as low; everything else is high. Channels are summed.
pub fn spectral_energy_split(x: &GridField, cutoff: f64) -> Result<(f64, f64)> {
    let s = dct_forward(x);
    coefficient_energy_split(&s.layout(), s.coeffs(), cutoff)
}

/// Energy split on coefficients already in the DCT domain.
pub fn coefficient_energy_split(layout: &Layout, coeffs: &[f64], cutoff: f64) -> Result<(f64, f64)> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(invalid(format!("cutoff fraction must lie in (0, 1), got {cutoff}")));
    }
    let mask = low_band_mask(&layout.spatial, cutoff);
    Ok(split_with_mask(&mask, layout.channels, coeffs))
}

/// `true` where the spatial coefficient belongs to the low band.
pub fn low_band_mask(spatial: &[usize], cutoff: f64) -> Vec<bool> {
    radial_frequencies(spatial).into_iter().map(|rho| rho < cutoff).collect()
}

pub(crate) fn split_with_mask(mask: &[bool], channels: usize, coeffs: &[f64]) -> (f64, f64) {
    let (mut low, mut high) = (0.0, 0.0);
    for (j, v) in coeffs.iter().enumerate() {
        if mask[j / channels] {
            low += v * v;
        } else {
            high += v * v;
        }
    }
    (low, high)
}

/// `E_high / E_low`; zero when both vanish, infinite when only `E_low` does.
pub fn ratio_of(low: f64, high: f64) -> f64 {
    if low > 0.0 {
        high / low
    } else if high > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Frequency ratio `E_high / E_low` of a field.
pub fn frequency_ratio(x: &GridField, cutoff: f64) -> Result<f64> {
    let (low, high) = spectral_energy_split(x, cutoff)?;
    Ok(ratio_of(low, high))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_field(shape: &[usize], seed: u64) -> GridField {
        let mut rng = rng_from_seed(seed);
        GridField::from_fn(shape, |_| StandardNormal.sample(&mut rng)).unwrap()
    }

    /// Orthonormal DCT-II by direct summation over all sample pairs.
    fn brute_force_dct2d(x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let c = |k: usize, n: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        let mut out = vec![0.0; h * w];
        for k in 0..h {
            for l in 0..w {
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        acc += x[i * w + j]
                            * (PI * (2 * i + 1) as f64 * k as f64 / (2 * h) as f64).cos()
                            * (PI * (2 * j + 1) as f64 * l as f64 / (2 * w) as f64).cos();
                    }
                }
                out[k * w + l] = c(k, h) * c(l, w) * acc;
            }
        }
        out
    }

    #[test]
    fn matches_direct_summation_on_8x8() {
        let x = random_field(&[8, 8], 3);
        let oracle = brute_force_dct2d(x.data(), 8, 8);
        for backend in [DctBackend::Fast, DctBackend::Direct] {
            let s = dct_forward_with(&x, backend);
            let err = s.coeffs().iter().zip(&oracle).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-12, "{backend:?}: {err}");
        }
    }

    #[test]
    fn matches_direct_summation_on_rectangular_multichannel() {
        let x = random_field(&[5, 7, 2], 4);
        let s = dct_forward(&x);
        for ch in 0..2 {
            let plane: Vec<f64> = (0..35).map(|p| x.data()[p * 2 + ch]).collect();
            let oracle = brute_force_dct2d(&plane, 5, 7);
            for p in 0..35 {
                assert!((s.coeffs()[p * 2 + ch] - oracle[p]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_field_has_only_dc() {
        let x = GridField::filled(&[6, 4, 3], 2.5).unwrap();
        let s = dct_forward(&x);
        let dc = 2.5 * (24.0f64).sqrt();
        for (j, v) in s.coeffs().iter().enumerate() {
            if j < 3 {
                assert!((v - dc).abs() < 1e-12);
            } else {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_and_dc_only_inverses() {
        let z = GridField::zeros(&[8, 8]).unwrap();
        assert!(dct_forward(&z).coeffs().iter().all(|&v| v == 0.0));
        let zs = SpectralField::new(vec![8, 8], vec![0.0; 64]).unwrap();
        assert!(dct_inverse(&zs).data().iter().all(|&v| v == 0.0));
        let mut c = vec![0.0; 64];
        c[0] = 3.0;
        let f = dct_inverse(&SpectralField::new(vec![8, 8], c).unwrap());
        assert!(f.data().iter().all(|v| (v - 3.0 / 8.0).abs() < 1e-14));
    }

    #[test]
    fn length_one_axes_are_identity() {
        let x = GridField::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let back = dct_inverse(&dct_forward(&x));
        assert!(back.max_abs_diff(&x) < 1e-14);
        let one = GridField::new(vec![1], vec![7.0]).unwrap();
        assert_eq!(dct_forward(&one).coeffs(), &[7.0]);
    }

    #[test]
    fn eigen_values() {
        let g = eigen_grid(&[4], 1.0).unwrap();
        assert_eq!(g.lambda()[0], 0.0);
        assert!((g.lambda()[2] + PI * PI / 4.0).abs() < 1e-15);
        let half = eigen_grid(&[4], 0.5).unwrap();
        for (a, b) in g.lambda().iter().zip(half.lambda()) {
            assert!((a * 0.5 - b).abs() < 1e-15);
        }
        assert!(eigen_grid(&[4], 0.0).is_err());
        assert!(eigen_grid(&[4], 1.5).is_err());
        let g2 = eigen_grid(&[6, 9, 3], 1.0).unwrap();
        g2.validate().unwrap();
        assert_eq!(g2.lambda().len(), 54);
    }

    #[test]
    fn eigenvalues_monotone_in_radial_frequency() {
        let g = eigen_grid(&[7, 5], 0.7).unwrap();
        let rho = radial_frequencies(&[7, 5]);
        let mut pairs: Vec<(f64, f64)> = rho.into_iter().zip(g.lambda().iter().map(|l| l.abs())).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            assert!(w[1].1 >= w[0].1 - 1e-15);
        }
    }

    #[test]
    fn heat_endpoint_identity_at_t1() {
        let x = random_field(&[8, 8, 3], 5);
        let sched = HeatSchedule::new(x.shape(), 1.0).unwrap();
        let (u, lap) = heat_endpoint(&x, 1.0, &sched).unwrap();
        assert!(u.max_abs_diff(&x) < 1e-12);
        let direct = laplacian(&x, sched.eigen()).unwrap();
        assert!(lap.max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn constant_field_is_heat_invariant() {
        let x = GridField::filled(&[8, 8], -0.3).unwrap();
        let sched = HeatSchedule::new(x.shape(), 1.0).unwrap();
        for t in [0.0, 1e-3, 0.4, 1.0] {
            let (u, lap) = heat_endpoint(&x, t, &sched).unwrap();
            assert!(u.max_abs_diff(&x) < 1e-13);
            assert!(lap.max_abs() < 1e-13);
        }
    }

    #[test]
    fn heat_rejects_bad_times_and_shapes() {
        let x = random_field(&[8], 1);
        let sched = HeatSchedule::new(&[8], 1.0).unwrap();
        assert!(heat_endpoint(&x, -0.1, &sched).is_err());
        assert!(heat_endpoint(&x, 1.1, &sched).is_err());
        assert!(heat_endpoint(&x, 0.0, &sched).is_ok());
        assert!(heat_endpoint(&random_field(&[9], 1), 0.5, &sched).is_err());
        assert!(heat_endpoint_raw_tau(&x, -1.0, sched.eigen()).is_err());
    }

    #[test]
    fn t_zero_maps_to_floor() {
        let x = random_field(&[8, 8], 2);
        let sched = HeatSchedule::new(x.shape(), 1.0).unwrap();
        let (a, _) = heat_endpoint(&x, 0.0, &sched).unwrap();
        let (b, _) = heat_endpoint(&x, sched.t_floor(), &sched).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn calibrated_matches_raw_tau() {
        let x = random_field(&[8, 8], 6);
        let sched = HeatSchedule::new(x.shape(), 1.0).unwrap();
        for t in [0.01, 0.3, 0.77] {
            let (u, _) = heat_endpoint(&x, t, &sched).unwrap();
            let raw = heat_endpoint_raw_tau(&x, -(t as f64).ln(), sched.eigen()).unwrap();
            assert!(u.max_abs_diff(&raw) < 1e-12);
        }
    }

    #[test]
    fn semigroup_against_direct_factor_composition() {
        let x = random_field(&[8, 8], 7);
        let g = eigen_grid(x.shape(), 1.0).unwrap();
        for &t1 in &[0.1, 1.0, 10.0] {
            for &t2 in &[0.1, 1.0, 10.0] {
                let composed = heat_endpoint_raw_tau(&heat_endpoint_raw_tau(&x, t1, &g).unwrap(), t2, &g).unwrap();
                let joint = heat_endpoint_raw_tau(&x, t1 + t2, &g).unwrap();
                // independent route: multiply coefficients by exp(λτ₁)·exp(λτ₂) directly
                let mut c = dct_forward(&x);
                for (v, l) in c.coeffs_mut().iter_mut().zip(g.lambda()) {
                    *v *= (l * t1).exp() * (l * t2).exp();
                }
                let oracle = dct_inverse(&c);
                let scale = joint.norm_l2();
                assert!(composed.sub(&joint).unwrap().norm_l2() <= 1e-8 * scale);
                assert!(oracle.sub(&joint).unwrap().norm_l2() <= 1e-8 * scale);
            }
        }
    }

    #[test]
    fn large_tau_flattens_to_channel_mean() {
        let x = random_field(&[8, 8, 2], 8);
        let g = eigen_grid(x.shape(), 1.0).unwrap();
        let u = heat_endpoint_raw_tau(&x, 1e3, &g).unwrap();
        let means = x.channel_means();
        for (j, v) in u.data().iter().enumerate() {
            assert!((v - means[j % 2]).abs() < 1e-6);
        }
        assert!(heat_endpoint_raw_tau(&x, 0.0, &g).unwrap().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn laplacian_is_heat_time_derivative() {
        let x = random_field(&[8, 8], 9);
        let g = eigen_grid(x.shape(), 1.0).unwrap();
        let h = 1e-5;
        for tau in [0.05, 0.5, 2.0] {
            let plus = heat_endpoint_raw_tau(&x, tau + h, &g).unwrap();
            let minus = heat_endpoint_raw_tau(&x, tau - h, &g).unwrap();
            let fd = plus.sub(&minus).unwrap().scale(1.0 / (2.0 * h));
            let exact = laplacian(&heat_endpoint_raw_tau(&x, tau, &g).unwrap(), &g).unwrap();
            assert!(fd.sub(&exact).unwrap().norm_l2() <= 1e-5 * exact.norm_l2());
        }
    }

    #[test]
    fn heat_preserves_channel_means() {
        let x = random_field(&[6, 10, 3], 10);
        let sched = HeatSchedule::new(x.shape(), 1.0).unwrap();
        let m0 = x.channel_means();
        for t in [1e-4, 0.2, 0.9] {
            let (u, _) = heat_endpoint(&x, t, &sched).unwrap();
            for (a, b) in u.channel_means().iter().zip(&m0) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heat_rows_match_single_field_path() {
        let sched = HeatSchedule::new(&[4, 6, 2], 0.8).unwrap();
        let mut rng = rng_from_seed(11);
        let x = Array2::from_shape_fn((5, 48), |_| StandardNormal.sample(&mut rng));
        let t = [0.0, 0.1, 0.5, 0.9, 1.0];
        for exec in [Exec::Sequential, Exec::Parallel] {
            let (u, lap) = sched.heat_rows(&x, &t, exec).unwrap();
            for i in 0..5 {
                let f = GridField::new(vec![4, 6, 2], x.row(i).to_vec()).unwrap();
                let (us, ls) = heat_endpoint(&f, t[i], &sched).unwrap();
                for j in 0..48 {
                    assert!((u[[i, j]] - us.data()[j]).abs() < 1e-13);
                    assert!((lap[[i, j]] - ls.data()[j]).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn energy_split_examples() {
        let c = GridField::filled(&[16, 16], 1.7).unwrap();
        let (_, high) = spectral_energy_split(&c, 0.5).unwrap();
        assert_eq!(high, 0.0);

        let x = random_field(&[64, 64], 12);
        let (low, high) = spectral_energy_split(&x, 0.5).unwrap();
        assert!(((low + high) - x.norm_sq()).abs() <= 1e-10 * x.norm_sq());
        let mask = low_band_mask(&[64, 64], 0.5);
        let n_low = mask.iter().filter(|&&b| b).count() as f64;
        let expected = (mask.len() as f64 - n_low) / n_low;
        let ratio = high / low;
        assert!((ratio / expected - 1.0).abs() < 0.1, "ratio {ratio} expected {expected}");
        assert!(spectral_energy_split(&x, 0.0).is_err());
        assert!(spectral_energy_split(&x, 1.0).is_err());
    }

    #[test]
    fn smoothing_lowers_frequency_ratio_monotonically() {
        let x = random_field(&[16, 16], 13);
        let sched = HeatSchedule::new(x.shape(), 1.0).unwrap();
        let mut prev = f64::INFINITY;
        for i in (1..=20).rev() {
            let t = i as f64 / 20.0;
            let (u, _) = heat_endpoint(&x, t, &sched).unwrap();
            let r = frequency_ratio(&u, 0.5).unwrap();
            assert!(r <= prev * (1.0 + 1e-12));
            prev = r;
        }
    }

    fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop_oneof![
            (1usize..70).prop_map(|n| vec![n]),
            (1usize..20, 1usize..20).prop_map(|(h, w)| vec![h, w]),
            (1usize..12, 1usize..12, 1usize..4).prop_map(|(h, w, c)| vec![h, w, c]),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 128, .. ProptestConfig::default() })]

        #[test]
        fn prop_round_trip_and_parseval(shape in shape_strategy(), seed in any::<u64>()) {
            let x = random_field(&shape, seed);
            let s = dct_forward(&x);
            let back = dct_inverse(&s);
            prop_assert!(back.max_abs_diff(&x) < 1e-10);
            prop_assert!((s.energy() - x.norm_sq()).abs() <= 1e-10 * x.norm_sq().max(1e-300));
            let direct = dct_forward_with(&x, DctBackend::Direct);
            let gap = direct.coeffs().iter().zip(s.coeffs()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            prop_assert!(gap < 1e-11);
        }
    }
}
