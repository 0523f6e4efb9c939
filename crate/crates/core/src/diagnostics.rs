//! Frequency-ratio transport, trajectory straightness and the ill-posedness
//! contrast, all evaluated on analytic paths.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::field::GridField;
use crate::io::{fmt_f64, read_pnm, write_csv};
use crate::par::Exec;
use crate::path::{NoiseConfig, PathKind};
use crate::sampler::Trajectory;
use crate::spectral::{
    dct_forward, dct_forward_slice, dct_inverse_slice, eigen_grid, low_band_mask,
    radial_frequencies, ratio_of, HeatSchedule, DEFAULT_ENERGY_CUTOFF,
};
use crate::toyverse::{make_embedding, SpiralSpec};
use crate::{derive_seed, rng_from_seed};

// ---------------------------------------------------------------------------
// Data sources

/// Seeded textures with a `1/f^exponent` amplitude spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureSpec {
    /// `[H, W]` or `[H, W, C]`.
    pub shape: Vec<usize>,
    pub exponent: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        TextureSpec { shape: vec![32, 32], exponent: 1.0 }
    }
}

impl TextureSpec {
    /// Texture `index` of the stream `seed`. Each texture has its own generator.
    pub fn texture(&self, seed: u64, index: usize) -> Result<GridField> {
        let mut coeffs = GridField::zeros(&self.shape)?;
        let layout = coeffs.layout();
        if layout.spatial.len() != 2 {
            return Err(Error::UnsupportedShape(self.shape.clone()));
        }
        let rho = radial_frequencies(&layout.spatial);
        let floor = 0.5 / layout.spatial.iter().copied().max().unwrap_or(1) as f64;
        let c = layout.channels;
        let mut rng = rng_from_seed(derive_seed(seed, index as u64));
        for (j, v) in coeffs.data_mut().iter_mut().enumerate() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v = n / rho[j / c].max(floor).powf(self.exponent);
        }
        let mut data = coeffs.into_data();
        dct_inverse_slice(&layout, &mut data);
        GridField::new(self.shape.clone(), data)
    }

    pub fn textures(&self, seed: u64, n: usize) -> Result<Vec<GridField>> {
        (0..n).map(|i| self.texture(seed, i)).collect()
    }
}

/// Non-overlapping `size x size` grayscale crops from every PGM/PPM file in
/// `dir`, files in name order, crops in raster order. Colour images are
/// averaged over channels. Pixel values are rescaled to `[-1, 1]`.
pub fn image_crops(dir: impl AsRef<Path>, size: usize, limit: usize) -> Result<Vec<GridField>> {
    if size == 0 {
        return Err(invalid("crop size must be positive"));
    }
    let mut files: Vec<_> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(), Some("pgm" | "ppm" | "pnm"))
        })
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        let img = read_pnm(&f)?;
        let (h, w, c) = match img.shape() {
            [h, w] => (*h, *w, 1),
            [h, w, c] => (*h, *w, *c),
            _ => unreachable!("images are two-dimensional"),
        };
        let gray: Vec<f64> = img.data().chunks(c).map(|px| px.iter().sum::<f64>() / c as f64).collect();
        for r0 in (0..h.saturating_sub(size - 1)).step_by(size) {
            for c0 in (0..w.saturating_sub(size - 1)).step_by(size) {
                if out.len() == limit {
                    return Ok(out);
                }
                let crop = GridField::from_fn(&[size, size], |k| 2.0 * gray[(r0 + k / size) * w + c0 + k % size] - 1.0)?;
                out.push(crop);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Frequency-ratio curves

/// Mean `E_high / E_low` of one scheme's analytic states over a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioCurve {
    pub times: Vec<f64>,
    pub ratios: Vec<f64>,
    pub scheme: PathKind,
    /// Blur strength; `0` for the noise-only scheme, which has no blur.
    pub blur_strength: f64,
    pub n_samples: usize,
}

impl RatioCurve {
    pub const CSV_HEADER: [&'static str; 4] = ["t", "ratio", "scheme", "r"];

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.times
            .iter()
            .zip(&self.ratios)
            .map(|(t, q)| vec![fmt_f64(*t), fmt_f64(*q), self.scheme.to_string(), fmt_f64(self.blur_strength)])
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_csv(path, &Self::CSV_HEADER, &self.csv_rows())
    }

    pub fn file_name(&self) -> String {
        match self.scheme {
            PathKind::NoiseFm => format!("ratio_{}.csv", self.scheme),
            _ => format!("ratio_{}_r{}.csv", self.scheme, self.blur_strength),
        }
    }

    /// Ratio at the grid point closest to `t`.
    pub fn at(&self, t: f64) -> f64 {
        let i = self
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.ratios[i]
    }
}

/// Settings for [`ratio_curves_analytic`].
#[derive(Debug, Clone, PartialEq)]
pub struct RatioConfig {
    pub schemes: Vec<PathKind>,
    pub blur_strengths: Vec<f64>,
    pub times: Vec<f64>,
    pub cutoff: f64,
    pub noise: NoiseConfig,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for RatioConfig {
    fn default() -> Self {
        RatioConfig {
            schemes: PathKind::ALL.to_vec(),
            blur_strengths: vec![1.0],
            times: uniform_grid(0.01, 0.99, 40),
            cutoff: DEFAULT_ENERGY_CUTOFF,
            noise: NoiseConfig::default(),
            seed: 0,
            exec: Exec::Sequential,
        }
    }
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// One curve per `(scheme, r)`; the noise-only scheme yields a single curve.
///
/// Sample `i` draws its noise from stream `derive_seed(seed, i)`, shared by all
/// schemes and times. States are built coefficient-wise in the DCT domain.
pub fn ratio_curves_analytic(data: &[GridField], cfg: &RatioConfig) -> Result<Vec<RatioCurve>> {
    let first = data.first().ok_or_else(|| invalid("ratio curves need at least one sample"))?;
    if cfg.times.is_empty() || cfg.times.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(invalid("time grid must be nonempty and strictly increasing"));
    }
    if cfg.times.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(invalid("time grid must lie in [0, 1]"));
    }
    let shape = first.shape().to_vec();
    let layout = first.layout();
    if data.iter().any(|x| x.shape() != shape.as_slice()) {
        return Err(invalid("all samples must share one shape"));
    }
    if !(cfg.cutoff > 0.0 && cfg.cutoff < 1.0) {
        return Err(invalid(format!("cutoff fraction must lie in (0, 1), got {}", cfg.cutoff)));
    }
    let mask = low_band_mask(&layout.spatial, cfg.cutoff);

    let mut specs: Vec<(PathKind, f64, Option<HeatSchedule>)> = Vec::new();
    for &kind in &cfg.schemes {
        if kind == PathKind::NoiseFm {
            if !specs.iter().any(|s| s.0 == kind) {
                specs.push((kind, 0.0, None));
            }
            continue;
        }
        for &r in &cfg.blur_strengths {
            specs.push((kind, r, Some(HeatSchedule::new(&shape, r)?)));
        }
    }
    let c = layout.channels;
    let nt = cfg.times.len();
    let per_sample: Vec<Result<Vec<f64>>> = cfg.exec.map_range(data.len(), |i| {
        let x = dct_forward(&data[i]);
        let mut rng = rng_from_seed(derive_seed(cfg.seed, i as u64));
        let e = dct_forward(&cfg.noise.draw(&mut rng, &shape)?);
        let mut out = Vec::with_capacity(specs.len() * nt);
        let mut z = vec![0.0; layout.len()];
        for (kind, _, sched) in &specs {
            for &t in &cfg.times {
                let factors = sched.as_ref().map(|s| s.heat_factors(t));
                for (j, zj) in z.iter_mut().enumerate() {
                    let f = factors.as_ref().map_or(1.0, |f| f[j / c]);
                    let (xj, ej) = (x.coeffs()[j], e.coeffs()[j]);
                    *zj = match kind {
                        PathKind::PureBlur => f * xj,
                        _ => t * f * xj + (1.0 - t) * ej,
                    };
                }
                let (low, high) = crate::spectral::split_with_mask(&mask, c, &z);
                out.push(ratio_of(low, high));
            }
        }
        Ok(out)
    });
    let mut sums = vec![0.0; specs.len() * nt];
    for r in per_sample {
        for (s, v) in sums.iter_mut().zip(r?) {
            *s += v;
        }
    }
    let n = data.len() as f64;
    Ok(specs
        .iter()
        .enumerate()
        .map(|(k, (kind, r, _))| RatioCurve {
            times: cfg.times.clone(),
            ratios: sums[k * nt..(k + 1) * nt].iter().map(|s| s / n).collect(),
            scheme: *kind,
            blur_strength: *r,
            n_samples: data.len(),
        })
        .collect())
}

/// Outcome of the spectral-transport checks on a set of curves.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportClaims {
    /// `PURE_BLUR ≤ HDFM ≤ NOISE_FM` on the middle third of the grid, per `r`.
    pub mid_ordering: bool,
    /// Relative gap between HDFM and NOISE_FM at the first grid point, worst `r`.
    pub start_gap: f64,
    /// `|HDFM(r) - NOISE_FM|` at mid-grid times never grows as `r` decreases.
    pub sweep_monotone: bool,
}

impl TransportClaims {
    pub fn all_hold(&self, start_tol: f64) -> bool {
        self.mid_ordering && self.start_gap < start_tol && self.sweep_monotone
    }
}

/// Evaluates the transport claims with a one-sided relative `margin`.
pub fn evaluate_transport(curves: &[RatioCurve], margin: f64) -> Result<TransportClaims> {
    let noise = curves
        .iter()
        .find(|c| c.scheme == PathKind::NoiseFm)
        .ok_or_else(|| invalid("missing the noise-only curve"))?;
    let mut hdfm: Vec<&RatioCurve> = curves.iter().filter(|c| c.scheme == PathKind::Hdfm).collect();
    if hdfm.is_empty() {
        return Err(invalid("missing HDFM curves"));
    }
    hdfm.sort_by(|a, b| b.blur_strength.total_cmp(&a.blur_strength));
    let nt = noise.times.len();
    let mid: Vec<usize> = (nt / 3..(2 * nt).div_ceil(3)).collect();

    let mut mid_ordering = true;
    for h in &hdfm {
        if let Some(p) = curves.iter().find(|c| c.scheme == PathKind::PureBlur && c.blur_strength == h.blur_strength) {
            mid_ordering &= mid.iter().all(|&i| p.ratios[i] <= h.ratios[i] * (1.0 + margin));
        }
        mid_ordering &= mid.iter().all(|&i| h.ratios[i] <= noise.ratios[i] * (1.0 + margin));
    }
    let start_gap = hdfm
        .iter()
        .map(|h| (h.ratios[0] - noise.ratios[0]).abs() / noise.ratios[0].abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    let sweep_monotone = hdfm.windows(2).all(|w| {
        mid.iter()
            .all(|&i| (w[1].ratios[i] - noise.ratios[i]).abs() <= (w[0].ratios[i] - noise.ratios[i]).abs())
    });
    Ok(TransportClaims { mid_ordering, start_gap, sweep_monotone })
}

// ---------------------------------------------------------------------------
// Straightness

/// Which coordinates of each state form the tracked particle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tracking {
    Full,
    Pair(usize, usize),
}

/// Chord-to-arc ratios of trajectories in data space and in the DCT basis.
#[derive(Debug, Clone, PartialEq)]
pub struct StraightnessReport {
    pub data: Vec<f64>,
    pub dct: Vec<f64>,
    pub mean_data: f64,
    pub mean_dct: f64,
}

impl StraightnessReport {
    pub const CSV_HEADER: [&'static str; 3] = ["particle", "data_ratio", "dct_ratio"];

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut rows: Vec<Vec<String>> = self
            .data
            .iter()
            .zip(&self.dct)
            .enumerate()
            .map(|(i, (a, b))| vec![i.to_string(), fmt_f64(*a), fmt_f64(*b)])
            .collect();
        rows.push(vec!["mean".into(), fmt_f64(self.mean_data), fmt_f64(self.mean_dct)]);
        write_csv(path, &Self::CSV_HEADER, &rows)
    }
}

/// `‖p_last − p_first‖ / Σ ‖p_{k+1} − p_k‖`; a path that never moves counts as straight.
pub fn chord_arc_ratio(points: &[Vec<f64>]) -> Result<f64> {
    if points.len() < 3 {
        return Err(invalid(format!("straightness needs at least 3 states, got {}", points.len())));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let arc: f64 = points.windows(2).map(|w| dist(&w[0], &w[1])).sum();
    let chord = dist(&points[0], &points[points.len() - 1]);
    Ok(if arc > 0.0 { (chord / arc).min(1.0) } else { 1.0 })
}

fn tracked(values: &[f64], track: Tracking) -> Result<Vec<f64>> {
    match track {
        Tracking::Full => Ok(values.to_vec()),
        Tracking::Pair(a, b) => match (values.get(a), values.get(b)) {
            (Some(&x), Some(&y)) => Ok(vec![x, y]),
            _ => Err(invalid(format!("tracked coordinates ({a}, {b}) exceed state length {}", values.len()))),
        },
    }
}

/// Straightness of each state sequence, one particle per sequence.
pub fn straightness_of_paths(paths: &[Vec<GridField>], track: Tracking) -> Result<StraightnessReport> {
    if paths.is_empty() {
        return Err(invalid("no trajectories to measure"));
    }
    let mut data = Vec::with_capacity(paths.len());
    let mut dct = Vec::with_capacity(paths.len());
    for states in paths {
        let pts: Vec<Vec<f64>> = states.iter().map(|s| tracked(s.data(), track)).collect::<Result<_>>()?;
        let spec: Vec<Vec<f64>> = states.iter().map(|s| tracked(dct_forward(s).coeffs(), track)).collect::<Result<_>>()?;
        data.push(chord_arc_ratio(&pts)?);
        dct.push(chord_arc_ratio(&spec)?);
    }
    let n = paths.len() as f64;
    let mean_data = data.iter().sum::<f64>() / n;
    let mean_dct = dct.iter().sum::<f64>() / n;
    Ok(StraightnessReport { data, dct, mean_data, mean_dct })
}

/// Straightness of sampled trajectories; each must have been run with states kept.
pub fn straightness(trajs: &[Trajectory], track: Tracking) -> Result<StraightnessReport> {
    let paths: Vec<Vec<GridField>> = trajs
        .iter()
        .map(|t| t.states.clone().ok_or_else(|| invalid("trajectory was sampled without keeping states")))
        .collect::<Result<_>>()?;
    straightness_of_paths(&paths, track)
}

/// Analytic states `z_t` of one path at every grid time.
pub fn analytic_states(x: &GridField, e: &GridField, sched: &HeatSchedule, kind: PathKind, times: &[f64]) -> Result<Vec<GridField>> {
    times
        .iter()
        .map(|&t| crate::path::sample_path(x, t, e, sched, kind).map(|p| p.z))
        .collect()
}

/// Analytic paths of `n` spiral points embedded in `dim` dimensions.
///
/// The embedding, the points and each particle's noise come from separate
/// streams of `seed`.
pub fn spiral_paths(n: usize, dim: usize, seed: u64, sched: &HeatSchedule, kind: PathKind, times: &[f64]) -> Result<Vec<Vec<GridField>>> {
    if sched.shape() != [dim] {
        return Err(Error::ShapeMismatch { expected: vec![dim], got: sched.shape().to_vec() });
    }
    let emb = make_embedding(dim, derive_seed(seed, 1))?;
    let spiral = SpiralSpec { count: n, ..SpiralSpec::default() };
    let x = emb.embed(&spiral.sample(&mut rng_from_seed(derive_seed(seed, 2))));
    let noise_seed = derive_seed(seed, 3);
    (0..n)
        .map(|i| {
            let xi = GridField::new(vec![dim], x.row(i).to_vec())?;
            let e = NoiseConfig::default().draw(&mut rng_from_seed(derive_seed(noise_seed, i as u64)), &[dim])?;
            analytic_states(&xi, &e, sched, kind, times)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Ill-posedness

/// Perturbation sensitivities of the HDFM path against raw heat inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct IllPosednessReport {
    pub times: Vec<f64>,
    /// `‖Δz_t‖ / η` for a noise perturbation of norm `η`.
    pub noise_gain: Vec<f64>,
    /// Largest `|Δz̃_k| / η` over coefficients for data perturbations `η` on coefficient `k`.
    pub data_gain: Vec<f64>,
    /// Largest `|t^{1+|λ_k|} − gain_k|` over coefficients and times.
    pub data_gain_err: f64,
    pub raw_taus: Vec<f64>,
    /// `‖Δ(H_{-τ} y)‖ / η` for a top-frequency perturbation of the blurred state `y`.
    pub raw_gain: Vec<f64>,
}

impl IllPosednessReport {
    pub const CSV_HEADER: [&'static str; 4] = ["kind", "time", "gain", "bound"];

    /// Largest `|noise_gain − (1 − t)|`.
    pub fn noise_gain_err(&self) -> f64 {
        self.times.iter().zip(&self.noise_gain).map(|(t, g)| (g - (1.0 - t)).abs()).fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut rows = Vec::new();
        for (i, t) in self.times.iter().enumerate() {
            rows.push(vec!["hdfm_noise".into(), fmt_f64(*t), fmt_f64(self.noise_gain[i]), fmt_f64(1.0 - t)]);
            rows.push(vec!["hdfm_data".into(), fmt_f64(*t), fmt_f64(self.data_gain[i]), fmt_f64(*t)]);
        }
        for (tau, g) in self.raw_taus.iter().zip(&self.raw_gain) {
            rows.push(vec!["raw_inverse".into(), fmt_f64(*tau), fmt_f64(*g), "inf".into()]);
        }
        write_csv(path, &Self::CSV_HEADER, &rows)
    }
}

/// Measures perturbation gains by finite perturbation of size `eta`.
///
/// HDFM gains come from differencing the path itself; the baseline inverts
/// `y = H_τ(x)` by `H_{-τ}` after perturbing `y` along the highest DCT mode.
pub fn illposedness_stress(
    x: &GridField,
    eta: f64,
    sched: &HeatSchedule,
    times: &[f64],
    raw_taus: &[f64],
    seed: u64,
) -> Result<IllPosednessReport> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(invalid(format!("perturbation scale must be positive, got {eta}")));
    }
    if x.shape() != sched.shape() {
        return Err(Error::ShapeMismatch { expected: sched.shape().to_vec(), got: x.shape().to_vec() });
    }
    let layout = x.layout();
    let c = layout.channels;
    let n = layout.len();
    let mut rng = rng_from_seed(seed);
    let e = NoiseConfig::default().draw(&mut rng, x.shape())?;
    let dir = NoiseConfig::default().draw(&mut rng, x.shape())?;
    let dir = dir.scale(eta / dir.norm_l2());
    let e2 = e.add(&dir)?;
    let lambda = sched.eigen().lambda();

    let mut noise_gain = Vec::with_capacity(times.len());
    let mut data_gain = Vec::with_capacity(times.len());
    let mut data_gain_err: f64 = 0.0;
    let xs = dct_forward(x);
    for &t in times {
        let z1 = crate::path::sample_path(x, t, &e, sched, PathKind::Hdfm)?.z;
        let z2 = crate::path::sample_path(x, t, &e2, sched, PathKind::Hdfm)?.z;
        noise_gain.push(z2.sub(&z1)?.norm_l2() / eta);

        // a single coefficient perturbation stays on its own mode
        let f = sched.heat_factors(t);
        let mut worst: f64 = 0.0;
        for k in 0..n {
            let mut bumped = xs.coeffs().to_vec();
            bumped[k] += eta;
            let mut xb = bumped;
            dct_inverse_slice(&layout, &mut xb);
            let xb = GridField::new(x.shape().to_vec(), xb)?;
            let zb = crate::path::sample_path(&xb, t, &e, sched, PathKind::Hdfm)?.z;
            let mut d = zb.sub(&z1)?.into_data();
            dct_forward_slice(&layout, &mut d);
            let gain = d[k].abs() / eta;
            let expect = t * f[k / c];
            data_gain_err = data_gain_err.max((gain - expect).abs());
            worst = worst.max(gain);
        }
        data_gain.push(worst);
    }

    let top = (0..n).max_by(|&a, &b| lambda[b / c].total_cmp(&lambda[a / c])).unwrap_or(0);
    let mut raw_gain = Vec::with_capacity(raw_taus.len());
    for &tau in raw_taus {
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(invalid(format!("heat time must be finite and nonnegative, got {tau}")));
        }
        let mut y = xs.coeffs().to_vec();
        for (j, v) in y.iter_mut().enumerate() {
            *v *= (lambda[j / c] * tau).exp();
        }
        let mut yp = y.clone();
        yp[top] += eta;
        let inv = |v: &[f64]| -> Vec<f64> {
            let mut o: Vec<f64> = v.iter().enumerate().map(|(j, a)| a * (-lambda[j / c] * tau).exp()).collect();
            dct_inverse_slice(&layout, &mut o);
            o
        };
        let (a, b) = (inv(&y), inv(&yp));
        let diff = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        raw_gain.push(diff / eta);
    }
    Ok(IllPosednessReport { times: times.to_vec(), noise_gain, data_gain, data_gain_err, raw_taus: raw_taus.to_vec(), raw_gain })
}

/// Largest `|λ|` of a one-dimensional `n`-point grid at blur strength `r`.
pub fn top_eigenvalue(n: usize, r: f64) -> Result<f64> {
    Ok(eigen_grid(&[n], r)?.max_abs())
}
