//! A 2D spiral buried in `D` dimensions.
//!
//! Spiral points `x̂ ∈ R²` are embedded as `x = P x̂` with a fixed random
//! column-orthogonal `P ∈ R^{D×2}`, corrupted by a 1D heat kernel along the
//! feature axis, and regenerated by x-, v- or ε-prediction models. Samples are
//! scored by their distance to the embedding plane and to the spiral.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{invalid, Result};
use crate::field::GridField;
use crate::io::{fmt_f64, write_csv};
use crate::neural::{train, Dataset, Head, MlpConfig, MlpModel, TrainConfig};
use crate::par::Exec;
use crate::path::{sample_path, PathKind, PathSample};
use crate::sampler::{sample_batch, BetaMode, SamplerConfig, Solver};
use crate::spectral::HeatSchedule;
use crate::{derive_seed, rng_from_seed, Rng};

/// Archimedean spiral `r(θ) = r0 + growth θ`, `θ ∈ [0, 2π turns]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpiralSpec {
    pub r0: f64,
    pub growth: f64,
    pub turns: f64,
    /// Standard deviation of the isotropic 2D jitter.
    pub jitter: f64,
    pub count: usize,
}

impl Default for SpiralSpec {
    fn default() -> Self {
        SpiralSpec { r0: 0.1, growth: 0.08, turns: 2.0, jitter: 0.01, count: 10_000 }
    }
}

impl SpiralSpec {
    pub fn theta_max(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.turns
    }

    pub fn point(&self, theta: f64) -> [f64; 2] {
        let r = self.r0 + self.growth * theta;
        [r * theta.cos(), r * theta.sin()]
    }

    /// `count` jittered points as rows of an `n x 2` array.
    pub fn sample(&self, rng: &mut Rng) -> Array2<f64> {
        let jitter = Normal::new(0.0, self.jitter.max(0.0)).expect("finite jitter");
        let mut out = Array2::zeros((self.count, 2));
        for mut row in out.rows_mut() {
            let p = self.point(rng.random_range(0.0..=self.theta_max()));
            row[0] = p[0] + jitter.sample(rng);
            row[1] = p[1] + jitter.sample(rng);
        }
        out
    }

    /// Noiseless points at `n` equally spaced angles.
    pub fn dense(&self, n: usize) -> Vec<[f64; 2]> {
        let step = self.theta_max() / (n.max(2) - 1) as f64;
        (0..n).map(|i| self.point(i as f64 * step)).collect()
    }
}

/// Column-orthogonal `P ∈ R^{D×2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    p: Array2<f64>,
}

/// Gram–Schmidt on a seeded Gaussian `D x 2` matrix.
pub fn make_embedding(d: usize, seed: u64) -> Result<Embedding> {
    if d < 2 {
        return Err(invalid(format!("ambient dimension must be at least 2, got {d}")));
    }
    let mut rng = rng_from_seed(seed);
    loop {
        let g = Array2::from_shape_simple_fn((d, 2), || {
            let n: f64 = StandardNormal.sample(&mut rng);
            n
        });
        let a = g.column(0).to_owned();
        let na = a.dot(&a).sqrt();
        if na < 1e-8 {
            continue;
        }
        let q0 = &a / na;
        let b = g.column(1).to_owned();
        // two passes keep the columns orthogonal to machine precision
        let mut q1 = &b - &(&q0 * q0.dot(&b));
        q1 = &q1 - &(&q0 * q0.dot(&q1));
        let n1 = q1.dot(&q1).sqrt();
        if n1 < 1e-8 {
            continue;
        }
        q1 /= n1;
        let mut p = Array2::zeros((d, 2));
        p.column_mut(0).assign(&q0);
        p.column_mut(1).assign(&q1);
        return Ok(Embedding { p });
    }
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.p
    }

    /// Rows `x̂ (n x 2)` to rows `P x̂ (n x D)`.
    pub fn embed(&self, xhat: &Array2<f64>) -> Array2<f64> {
        xhat.dot(&self.p.t())
    }

    /// Rows `x (n x D)` to rows `P^T x (n x 2)`.
    pub fn project(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.p)
    }

    /// `‖x - P P^T x‖` per row.
    pub fn offplane(&self, x: &Array2<f64>) -> Vec<f64> {
        let back = self.embed(&self.project(x));
        (x - &back).rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
    }
}

/// The path sample of one embedded point under the 1D feature-axis heat kernel.
pub fn toy_corruption(x: &GridField, t: f64, e: &GridField, sched: &HeatSchedule) -> Result<PathSample> {
    if x.shape().len() != 1 {
        return Err(crate::Error::UnsupportedShape(x.shape().to_vec()));
    }
    sample_path(x, t, e, sched, PathKind::Hdfm)
}

/// Fixed training points, drawn with replacement.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    shape: [usize; 1],
    rows: Array2<f64>,
}

impl ToyDataset {
    pub fn new(rows: Array2<f64>) -> Self {
        ToyDataset { shape: [rows.ncols()], rows }
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }
}

impl Dataset for ToyDataset {
    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn sample_batch(&self, rng: &mut Rng, n: usize) -> (Array2<f64>, Option<Vec<usize>>) {
        let mut out = Array2::zeros((n, self.rows.ncols()));
        for mut row in out.rows_mut() {
            row.assign(&self.rows.row(rng.random_range(0..self.rows.nrows())));
        }
        (out, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManifoldMetrics {
    pub mean_offplane: f64,
    pub mean_spiral_dist: f64,
}

/// Points used to measure distance to the noiseless spiral.
pub const SPIRAL_RESOLUTION: usize = 10_000;

/// Mean off-plane residual and mean 2D distance to a dense spiral discretization.
pub fn manifold_metrics(samples: &Array2<f64>, emb: &Embedding, spiral: &SpiralSpec) -> Result<ManifoldMetrics> {
    if samples.nrows() == 0 {
        return Err(invalid("no samples to score"));
    }
    if samples.ncols() != emb.dim() {
        return Err(crate::Error::ShapeMismatch { expected: vec![emb.dim()], got: vec![samples.ncols()] });
    }
    let off = emb.offplane(samples);
    let proj = emb.project(samples);
    let dense = spiral.dense(SPIRAL_RESOLUTION);
    let dist: f64 = proj
        .rows()
        .into_iter()
        .map(|r| {
            dense
                .iter()
                .map(|q| (r[0] - q[0]).powi(2) + (r[1] - q[1]).powi(2))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    let n = samples.nrows() as f64;
    Ok(ManifoldMetrics { mean_offplane: off.iter().sum::<f64>() / n, mean_spiral_dist: dist / n })
}

/// Training budget for every dimension at or above `min_dim`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimBudget {
    pub min_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
}

/// Everything one comparison run needs.
#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub dims: Vec<usize>,
    pub heads: Vec<Head>,
    pub seeds: Vec<u64>,
    pub spiral: SpiralSpec,
    pub blur_strength: f64,
    /// Denominator clamp `ε` of the training schedule. Sampling keeps the default.
    pub train_s_eps: f64,
    pub path: PathKind,
    pub hidden: usize,
    pub layers: usize,
    pub train: TrainConfig,
    /// Replaces the step count and batch size of `train` for large `D`.
    /// The last matching entry wins.
    pub dim_budgets: Vec<DimBudget>,
    pub sampler: SamplerConfig,
    pub n_samples: usize,
    /// Record wall-clock seconds in the report. Off keeps reports byte-identical.
    pub timing: bool,
    /// Runs cells concurrently when parallel.
    pub exec: Exec,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            dims: vec![2, 8, 512],
            heads: vec![Head::X, Head::V],
            seeds: vec![0, 1, 2],
            spiral: SpiralSpec::default(),
            blur_strength: 1.0,
            train_s_eps: 0.05,
            path: PathKind::Hdfm,
            hidden: 64,
            layers: 5,
            train: TrainConfig { lr: 6e-3, cosine_decay: true, steps: 12000, batch_size: 256, log_every: 100, ..TrainConfig::default() },
            dim_budgets: vec![DimBudget { min_dim: 64, steps: 4000, batch_size: 128 }],
            sampler: SamplerConfig {
                steps: 50,
                solver: Solver::Heun,
                beta_mode: BetaMode::Fixed(1.0),
                cfg_scale: 1.0,
                ..SamplerConfig::default()
            },
            n_samples: 2000,
            timing: false,
            exec: Exec::Sequential,
        }
    }
}

impl ToyConfig {
    /// Training configuration for dimension `dim`.
    pub fn train_for(&self, dim: usize) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(b) = self.dim_budgets.iter().rev().find(|b| dim >= b.min_dim) {
            t.steps = b.steps;
            t.batch_size = b.batch_size;
        }
        t
    }
}

/// One `(D, head, seed)` cell of the comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyRow {
    pub dim: usize,
    pub head: Head,
    pub seed: u64,
    pub metrics: ManifoldMetrics,
    pub final_loss: f64,
    pub wall_seconds: Option<f64>,
    /// Generated samples projected to the plane, `n x 2`.
    pub scatter: Array2<f64>,
}

/// Trains and samples one cell. Streams derived from `seed` fix the
/// embedding and data independently of the head, so heads share them.
pub fn run_toy_cell(dim: usize, head: Head, seed: u64, cfg: &ToyConfig) -> Result<ToyRow> {
    let start = Instant::now();
    let emb = make_embedding(dim, derive_seed(seed, 1))?;
    let data = ToyDataset::new(emb.embed(&cfg.spiral.sample(&mut rng_from_seed(derive_seed(seed, 2)))));
    let sched = HeatSchedule::new(&[dim], cfg.blur_strength)?;
    let train_sched = sched.clone().with_s_eps(cfg.train_s_eps)?;
    let mcfg = MlpConfig { hidden: cfg.hidden, layers: cfg.layers, path: cfg.path, ..MlpConfig::new(&[dim], head) };
    let model = MlpModel::new(mcfg, &mut rng_from_seed(derive_seed(seed, 3)))?;
    let tcfg = TrainConfig { seed: derive_seed(seed, 4), checkpoint: None, ..cfg.train_for(dim) };
    let trained = train(model, &data, &train_sched, &tcfg)?;
    let final_loss = trained.curve.last().map(|(_, r)| r.velocity).unwrap_or(f64::NAN);
    let scfg = SamplerConfig { seed: derive_seed(seed, 5), ..cfg.sampler.clone() };
    let samples = sample_batch(&trained.model, &scfg, &sched, &vec![None; cfg.n_samples], cfg.path, Exec::Sequential)?;
    let metrics = manifold_metrics(&samples, &emb, &cfg.spiral)?;
    Ok(ToyRow {
        dim,
        head,
        seed,
        metrics,
        final_loss,
        wall_seconds: cfg.timing.then(|| start.elapsed().as_secs_f64()),
        scatter: emb.project(&samples),
    })
}

/// Every `(D, head, seed)` cell, in that nesting order.
pub fn run_toy_comparison(cfg: &ToyConfig) -> Result<Vec<ToyRow>> {
    let cells: Vec<(usize, Head, u64)> = cfg
        .dims
        .iter()
        .flat_map(|&d| cfg.heads.iter().flat_map(move |&h| cfg.seeds.iter().map(move |&s| (d, h, s))))
        .collect();
    cfg.exec
        .map_range(cells.len(), |i| {
            let (d, h, s) = cells[i];
            run_toy_cell(d, h, s, cfg)
        })
        .into_iter()
        .collect()
}

pub const TOY_HEADER: [&str; 7] = ["D", "head", "seed", "mean_offplane", "mean_spiral_dist", "final_loss", "wall_seconds"];

pub fn scatter_file_name(row: &ToyRow) -> String {
    format!("scatter_D{}_{}_seed{}.csv", row.dim, row.head, row.seed)
}

/// `toy_report.csv` plus one scatter CSV per cell.
pub fn write_toy_report(rows: &[ToyRow], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.dim.to_string(),
                r.head.to_string(),
                r.seed.to_string(),
                fmt_f64(r.metrics.mean_offplane),
                fmt_f64(r.metrics.mean_spiral_dist),
                fmt_f64(r.final_loss),
                r.wall_seconds.map(fmt_f64).unwrap_or_else(|| "NA".into()),
            ]
        })
        .collect();
    write_csv(dir.join("toy_report.csv"), &TOY_HEADER, &table)?;
    for r in rows {
        let pts: Vec<Vec<String>> = r.scatter.rows().into_iter().map(|p| vec![fmt_f64(p[0]), fmt_f64(p[1])]).collect();
        write_csv(dir.join(scatter_file_name(r)), &["x1", "x2"], &pts)?;
    }
    Ok(())
}

/// Median over seeds of a metric for one `(D, head)`; `None` when absent.
pub fn median_metric(rows: &[ToyRow], dim: usize, head: Head, f: impl Fn(&ManifoldMetrics) -> f64) -> Option<f64> {
    let mut v: Vec<f64> = rows.iter().filter(|r| r.dim == dim && r.head == head).map(|r| f(&r.metrics)).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// The qualitative claims of the comparison, each with the numbers behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyClaims {
    /// D = 2: both heads within 3 jitter scales of the spiral (medians over seeds).
    pub low_dim_fit: Option<(bool, f64, f64)>,
    /// D = 512: x-pred off-plane below v-pred's.
    pub high_dim_x_cleaner: Option<(bool, f64, f64)>,
    /// v-pred degrades from D = 8 to 512 while x-pred stays within 3x.
    pub degradation: Option<(bool, String)>,
}

impl ToyClaims {
    pub fn all_hold(&self) -> bool {
        [
            self.low_dim_fit.as_ref().map(|c| c.0),
            self.high_dim_x_cleaner.as_ref().map(|c| c.0),
            self.degradation.as_ref().map(|c| c.0),
        ]
        .iter()
        .all(|c| c.unwrap_or(false))
    }
}

pub fn evaluate_claims(rows: &[ToyRow], jitter: f64) -> ToyClaims {
    let off = |d, h| median_metric(rows, d, h, |m| m.mean_offplane);
    let dist = |d, h| median_metric(rows, d, h, |m| m.mean_spiral_dist);
    let low_dim_fit = match (dist(2, Head::X), dist(2, Head::V)) {
        (Some(x), Some(v)) => Some((x < 3.0 * jitter && v < 3.0 * jitter, x, v)),
        _ => None,
    };
    let high_dim_x_cleaner = match (off(512, Head::X), off(512, Head::V)) {
        (Some(x), Some(v)) => Some((x < v, x, v)),
        _ => None,
    };
    let degradation = match (off(8, Head::X), off(512, Head::X), off(8, Head::V), off(512, Head::V)) {
        (Some(x8), Some(x512), Some(v8), Some(v512)) => Some((
            v512 > v8 && x512 <= 3.0 * x8,
            format!("v: {v8:.4e} -> {v512:.4e}, x: {x8:.4e} -> {x512:.4e}"),
        )),
        _ => None,
    };
    ToyClaims { low_dim_fit, high_dim_x_cleaner, degradation }
}

/// Isotropic ambient noise `s · N(0, I_D)` added to rows.
pub fn add_ambient_noise(x: &Array2<f64>, scale: f64, rng: &mut Rng) -> Array2<f64> {
    x + &Array2::from_shape_simple_fn(x.raw_dim(), || {
        let n: f64 = StandardNormal.sample(rng);
        scale * n
    })
}

/// Row `i` as a 1D field.
pub fn row_as_field(x: &Array2<f64>, i: usize) -> GridField {
    GridField::from_parts(vec![x.ncols()], x.row(i).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::NoiseConfig;
    use crate::spectral::eigen_grid;
    use proptest::prelude::*;

    fn max_abs(a: &Array2<f64>) -> f64 {
        a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn embedding_is_orthonormal_and_seeded() {
        for d in [2, 8, 16, 512] {
            let e = make_embedding(d, 7).unwrap();
            let ptp = e.matrix().t().dot(e.matrix());
            assert!(max_abs(&(ptp - Array2::<f64>::eye(2))) < 1e-12, "D = {d}");
            assert_eq!(e, make_embedding(d, 7).unwrap());
        }
        assert!(make_embedding(1, 0).is_err());
    }

    #[test]
    fn embed_project_round_trip_and_residuals() {
        let spiral = SpiralSpec { count: 50, ..SpiralSpec::default() };
        let xhat = spiral.sample(&mut rng_from_seed(1));
        let e = make_embedding(64, 2).unwrap();
        let x = e.embed(&xhat);
        assert!(max_abs(&(e.project(&x) - &xhat)) < 1e-10);
        assert!(e.offplane(&x).iter().all(|&r| r < 1e-10));
        for (a, b) in x.rows().into_iter().zip(xhat.rows()) {
            assert!((a.dot(&a).sqrt() - b.dot(&b).sqrt()).abs() < 1e-10);
        }
        let noise = NoiseConfig::default().draw_rows(&mut rng_from_seed(3), 3, 64);
        assert!(e.offplane(&noise).iter().all(|&r| r > 0.0));
    }

    #[test]
    fn metrics_on_the_noiseless_spiral_are_zero() {
        let spiral = SpiralSpec::default();
        let pts = spiral.dense(SPIRAL_RESOLUTION);
        let xhat = Array2::from_shape_fn((500, 2), |(i, j)| pts[i * 20][j]);
        for d in [2, 512] {
            let e = make_embedding(d, 4).unwrap();
            let m = manifold_metrics(&e.embed(&xhat), &e, &spiral).unwrap();
            assert!(m.mean_offplane < 1e-8 && m.mean_spiral_dist < 1e-8, "{m:?}");
        }
    }

    #[test]
    fn offplane_of_isotropic_noise_follows_the_chi_mean() {
        let spiral = SpiralSpec { count: 2000, ..SpiralSpec::default() };
        let mut rng = rng_from_seed(5);
        let e = make_embedding(512, 6).unwrap();
        let x = e.embed(&spiral.sample(&mut rng));
        let s = 0.05;
        let noisy = add_ambient_noise(&x, s, &mut rng);
        let m = manifold_metrics(&noisy, &e, &spiral).unwrap();
        let expected = s * (510f64).sqrt();
        assert!((m.mean_offplane - expected).abs() < 0.1 * expected, "{} vs {expected}", m.mean_offplane);
        let e2 = make_embedding(2, 6).unwrap();
        let flat = add_ambient_noise(&e2.embed(&spiral.sample(&mut rng)), s, &mut rng);
        assert!(manifold_metrics(&flat, &e2, &spiral).unwrap().mean_offplane < 1e-12);
    }

    #[test]
    fn corruption_endpoints_and_two_point_grid() {
        let e = make_embedding(2, 1).unwrap();
        let eig = eigen_grid(&[2], 1.0).unwrap();
        let expected = -std::f64::consts::PI.powi(2) / 4.0;
        assert_eq!(eig.lambda()[0], 0.0);
        assert!((eig.lambda()[1] - expected).abs() < 1e-15);
        let sched = HeatSchedule::new(&[2], 1.0).unwrap();
        let x = row_as_field(&e.embed(&Array2::from_shape_vec((1, 2), vec![0.3, -0.2]).unwrap()), 0);
        let noise = GridField::new(vec![2], vec![0.5, 1.5]).unwrap();
        let p = toy_corruption(&x, 1.0, &noise, &sched).unwrap();
        assert!(p.z.max_abs_diff(&x) < 1e-15);
        assert!(toy_corruption(&GridField::zeros(&[2, 2]).unwrap(), 0.5, &GridField::zeros(&[2, 2]).unwrap(), &sched).is_err());
    }

    #[test]
    fn corruption_velocity_matches_finite_difference() {
        let mut rng = rng_from_seed(9);
        let d = 16;
        let sched = HeatSchedule::new(&[d], 1.0).unwrap();
        let e = make_embedding(d, 2).unwrap();
        let x = row_as_field(&e.embed(&SpiralSpec { count: 1, ..SpiralSpec::default() }.sample(&mut rng)), 0);
        let noise = NoiseConfig::default().draw(&mut rng, &[d]).unwrap();
        for t in [0.2, 0.6] {
            let h = 1e-5;
            let zp = toy_corruption(&x, t + h, &noise, &sched).unwrap().z;
            let zm = toy_corruption(&x, t - h, &noise, &sched).unwrap().z;
            let fd = zp.sub(&zm).unwrap().scale(0.5 / h);
            let v = toy_corruption(&x, t, &noise, &sched).unwrap().v_star;
            assert!(fd.sub(&v).unwrap().norm_l2() <= 1e-4 * v.norm_l2());
        }
    }

    #[test]
    fn spiral_is_seeded() {
        let s = SpiralSpec { count: 10, ..SpiralSpec::default() };
        assert_eq!(s.sample(&mut rng_from_seed(1)), s.sample(&mut rng_from_seed(1)));
        assert_ne!(s.sample(&mut rng_from_seed(1)), s.sample(&mut rng_from_seed(2)));
    }

    #[test]
    fn claims_use_medians() {
        let row = |dim, head, seed, off, dist| ToyRow {
            dim,
            head,
            seed,
            metrics: ManifoldMetrics { mean_offplane: off, mean_spiral_dist: dist },
            final_loss: 0.0,
            wall_seconds: None,
            scatter: Array2::zeros((0, 2)),
        };
        let rows = vec![
            row(2, Head::X, 0, 0.0, 0.01),
            row(2, Head::V, 0, 0.0, 0.02),
            row(8, Head::X, 0, 0.1, 0.1),
            row(8, Head::V, 0, 0.2, 0.1),
            row(512, Head::X, 0, 0.2, 0.1),
            row(512, Head::V, 0, 0.9, 0.1),
        ];
        assert!(evaluate_claims(&rows, 0.01).all_hold());
        assert_eq!(median_metric(&rows, 2, Head::V, |m| m.mean_spiral_dist), Some(0.02));
        let partial = evaluate_claims(&rows[..2], 0.01);
        assert!(partial.low_dim_fit.unwrap().0 && !partial.all_hold());
    }

    #[test]
    fn small_cell_is_deterministic() {
        let cfg = ToyConfig {
            dims: vec![2],
            heads: vec![Head::X],
            seeds: vec![0],
            hidden: 16,
            layers: 3,
            train: TrainConfig { steps: 30, batch_size: 16, ..ToyConfig::default().train },
            sampler: SamplerConfig { steps: 5, ..ToyConfig::default().sampler },
            n_samples: 20,
            ..ToyConfig::default()
        };
        let a = run_toy_comparison(&cfg).unwrap();
        let b = run_toy_comparison(&cfg).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        write_toy_report(&a, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("toy_report.csv")).unwrap();
        assert!(text.starts_with("D,head,seed,mean_offplane,mean_spiral_dist,final_loss,wall_seconds\n2,x,0,"));
        assert!(text.trim_end().ends_with(",NA"));
        assert!(dir.path().join("scatter_D2_x_seed0.csv").exists());
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 32, .. ProptestConfig::default() })]

        #[test]
        fn prop_projector_is_idempotent(d in 2usize..40, seed in any::<u64>()) {
            let e = make_embedding(d, seed).unwrap();
            let x = NoiseConfig::default().draw_rows(&mut rng_from_seed(seed ^ 1), 3, d);
            let once = e.embed(&e.project(&x));
            let twice = e.embed(&e.project(&once));
            prop_assert!(max_abs(&(once - twice)) < 1e-10);
        }
    }
}
