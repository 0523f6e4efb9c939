//! Velocity assembly from raw network outputs.
//!
//! For every (path, head) pair both velocity components are linear in the raw
//! output `r` and the state `z`, and diagonal in the DCT basis:
//!
//! ```text
//! base~  = b_r(λ) r~ + b_z(λ) z~
//! delta~ = d_r(λ) r~ + d_z(λ) z~
//! v      = base - delta
//! ```
//!
//! The adjoint needed for backprop is therefore the same spectral scaling
//! `b_r - d_r` applied to the incoming gradient.

use ndarray::Array2;

use super::{Head, MlpModel};
use crate::error::{Error, Result};
use crate::field::GridField;
use crate::par::Exec;
use crate::path::PathKind;
use crate::spectral::{dct_forward_slice, dct_inverse_slice, HeatSchedule};

/// Spectral coefficients of the assembly at one flow time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadCoefficients {
    kind: PathKind,
    head: Head,
    t: f64,
    tau: f64,
    s: f64,
    t_clamped: f64,
}

impl HeadCoefficients {
    pub fn new(kind: PathKind, head: Head, t: f64, sched: &HeatSchedule) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(crate::error::invalid(format!("flow time must lie in [0, 1], got {t}")));
        }
        if kind == PathKind::PureBlur && head == Head::Eps {
            return Err(Error::Unsupported("eps prediction on the pure-blur path".into()));
        }
        Ok(HeadCoefficients { kind, head, t, tau: sched.tau(t), s: sched.s(t), t_clamped: sched.clamp_time(t) })
    }

    /// `[b_r, b_z, d_r, d_z]` at eigenvalue `λ`.
    pub fn at(&self, lambda: f64) -> [f64; 4] {
        let (t, s, tc) = (self.t, self.s, self.t_clamped);
        let heat = (lambda * self.tau).exp();
        match (self.kind, self.head) {
            (_, Head::V) => [1.0, 0.0, 0.0, 0.0],
            (PathKind::Hdfm, Head::X) => [heat / s, -1.0 / s, lambda * heat, 0.0],
            // û = (z - (1 - t) ε̂) / t'
            (PathKind::Hdfm, Head::Eps) => {
                let ur = -(1.0 - t) / tc;
                let uz = 1.0 / tc;
                [ur / s, (uz - 1.0) / s, lambda * ur, lambda * uz]
            }
            (PathKind::NoiseFm, Head::X) => [1.0 / s, -1.0 / s, 0.0, 0.0],
            (PathKind::NoiseFm, Head::Eps) => [-(1.0 - t) / (tc * s), (1.0 / tc - 1.0) / s, 0.0, 0.0],
            (PathKind::PureBlur, Head::X) => [0.0, 0.0, lambda * heat / tc, 0.0],
            (PathKind::PureBlur, Head::Eps) => unreachable!("rejected in HeadCoefficients::new"),
        }
    }

    /// True when the state enters with the same weight at every `λ`, so it
    /// needs no transform.
    pub fn state_terms_flat(&self) -> bool {
        !(self.kind == PathKind::Hdfm && self.head == Head::Eps)
    }

    /// `∂v/∂r` in the spectral basis.
    pub fn output_jacobian(&self, lambda: f64) -> f64 {
        let [br, _, dr, _] = self.at(lambda);
        br - dr
    }
}

fn check_rows(sched: &HeatSchedule, a: &Array2<f64>, b: &Array2<f64>, t: &[f64]) -> Result<()> {
    let n = sched.field_len();
    if a.ncols() != n || a.dim() != b.dim() || t.len() != a.nrows() {
        return Err(Error::ShapeMismatch { expected: vec![a.nrows(), n], got: vec![b.nrows(), b.ncols(), t.len()] });
    }
    Ok(())
}

/// Row-wise `(v_base, δ)` from raw outputs `raw` at states `z`.
pub fn assemble_rows(
    sched: &HeatSchedule,
    kind: PathKind,
    head: Head,
    raw: &Array2<f64>,
    z: &Array2<f64>,
    t: &[f64],
    exec: Exec,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_rows(sched, raw, z, t)?;
    if head == Head::V {
        return Ok((raw.clone(), Array2::zeros(raw.raw_dim())));
    }
    let coefs = t.iter().map(|&ti| HeadCoefficients::new(kind, head, ti, sched)).collect::<Result<Vec<_>>>()?;
    let layout = sched.layout();
    let lambda = sched.eigen().lambda();
    let c = layout.channels;
    let n = layout.len();
    let mut out = Array2::zeros((raw.nrows(), 4 * n));
    exec.for_each_row(&mut out, |i, mut row| {
        let data = row.as_slice_mut().expect("standard layout");
        let (base, rest) = data.split_at_mut(n);
        let (delta, rest) = rest.split_at_mut(n);
        let (rs, zs) = rest.split_at_mut(n);
        rs.copy_from_slice(raw.row(i).as_slice().expect("standard layout"));
        zs.copy_from_slice(z.row(i).as_slice().expect("standard layout"));
        dct_forward_slice(layout, rs);
        dct_forward_slice(layout, zs);
        for j in 0..n {
            let [br, bz, dr, dz] = coefs[i].at(lambda[j / c]);
            base[j] = br * rs[j] + bz * zs[j];
            delta[j] = dr * rs[j] + dz * zs[j];
        }
        dct_inverse_slice(layout, base);
        dct_inverse_slice(layout, delta);
    });
    let base = out.slice(ndarray::s![.., ..n]).to_owned();
    let delta = out.slice(ndarray::s![.., n..2 * n]).to_owned();
    Ok((base, delta))
}

/// Row-wise `v = v_base - δ`, with one fewer inverse transform than
/// [`assemble_rows`] and no transform of `z` when its weights are flat.
pub fn assemble_velocity_rows(
    sched: &HeatSchedule,
    kind: PathKind,
    head: Head,
    raw: &Array2<f64>,
    z: &Array2<f64>,
    t: &[f64],
    exec: Exec,
) -> Result<Array2<f64>> {
    check_rows(sched, raw, z, t)?;
    if head == Head::V {
        return Ok(raw.clone());
    }
    let coefs = t.iter().map(|&ti| HeadCoefficients::new(kind, head, ti, sched)).collect::<Result<Vec<_>>>()?;
    let layout = sched.layout();
    let lambda = sched.eigen().lambda();
    let c = layout.channels;
    let n = layout.len();
    let mut out = raw.clone();
    exec.for_each_row(&mut out, |i, mut row| {
        let v = row.as_slice_mut().expect("standard layout");
        let zr = z.row(i);
        let zs = zr.as_slice().expect("standard layout");
        let coef = &coefs[i];
        dct_forward_slice(layout, v);
        if coef.state_terms_flat() {
            let [_, bz, _, dz] = coef.at(0.0);
            for j in 0..n {
                let [br, _, dr, _] = coef.at(lambda[j / c]);
                v[j] *= br - dr;
            }
            dct_inverse_slice(layout, v);
            for (o, zv) in v.iter_mut().zip(zs) {
                *o += (bz - dz) * zv;
            }
        } else {
            let mut zt = zs.to_vec();
            dct_forward_slice(layout, &mut zt);
            for j in 0..n {
                let [br, bz, dr, dz] = coef.at(lambda[j / c]);
                v[j] = (br - dr) * v[j] + (bz - dz) * zt[j];
            }
            dct_inverse_slice(layout, v);
        }
    });
    Ok(out)
}

/// Pulls a velocity gradient back to the raw output: `IDCT((b_r - d_r) ⊙ DCT g)`.
pub(crate) fn output_vjp(
    sched: &HeatSchedule,
    kind: PathKind,
    head: Head,
    grad_v: &Array2<f64>,
    t: &[f64],
    exec: Exec,
) -> Result<Array2<f64>> {
    if head == Head::V {
        return Ok(grad_v.clone());
    }
    let coefs = t.iter().map(|&ti| HeadCoefficients::new(kind, head, ti, sched)).collect::<Result<Vec<_>>>()?;
    sched.spectral_map_rows(grad_v, exec, |i, l| coefs[i].output_jacobian(l))
}

impl MlpModel {
    /// Batched `(v_base, δ)` for states `z` (one field per row).
    pub fn velocity_pair_rows(
        &self,
        z: &Array2<f64>,
        t: &[f64],
        y: &[Option<usize>],
        sched: &HeatSchedule,
        exec: Exec,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_schedule(sched)?;
        let raw = self.forward(z, t, y)?.output;
        assemble_rows(sched, self.config().path, self.head(), &raw, z, t, exec)
    }

    pub(crate) fn check_schedule(&self, sched: &HeatSchedule) -> Result<()> {
        if sched.shape() != self.config().shape.as_slice() {
            return Err(Error::ShapeMismatch { expected: self.config().shape.clone(), got: sched.shape().to_vec() });
        }
        Ok(())
    }
}

fn single_row(f: &GridField) -> Array2<f64> {
    Array2::from_shape_vec((1, f.len()), f.data().to_vec()).expect("one row")
}

/// `v_θ(z_t, t, y)` for one field.
pub fn predict_velocity(model: &MlpModel, z: &GridField, t: f64, y: Option<usize>, sched: &HeatSchedule) -> Result<GridField> {
    if z.shape() != model.config().shape.as_slice() {
        return Err(Error::ShapeMismatch { expected: model.config().shape.clone(), got: z.shape().to_vec() });
    }
    let (base, delta) = model.velocity_pair_rows(&single_row(z), &[t], &[y], sched, Exec::Sequential)?;
    let v = base - delta;
    Ok(GridField::from_parts(z.shape().to_vec(), v.into_raw_vec_and_offset().0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::MlpConfig;
    use crate::path::{sample_path, NoiseConfig};
    use crate::rng_from_seed;
    use crate::spectral::laplacian;

    fn rows(f: &GridField) -> Array2<f64> {
        single_row(f)
    }

    fn row_field(a: &Array2<f64>, shape: &[usize]) -> GridField {
        GridField::new(shape.to_vec(), a.row(0).to_vec()).unwrap()
    }

    #[test]
    fn combined_assembly_matches_pair() {
        let mut rng = rng_from_seed(5);
        let noise = NoiseConfig::default();
        for shape in [vec![9], vec![4, 6], vec![3, 5, 2]] {
            let sched = HeatSchedule::new(&shape, 0.8).unwrap();
            let n: usize = shape.iter().product();
            let raw = noise.draw_rows(&mut rng, 3, n);
            let z = noise.draw_rows(&mut rng, 3, n);
            let t = [0.02, 0.5, 0.999];
            for kind in PathKind::ALL {
                for head in [Head::X, Head::V, Head::Eps] {
                    if kind == PathKind::PureBlur && head == Head::Eps {
                        continue;
                    }
                    let (b, d) = assemble_rows(&sched, kind, head, &raw, &z, &t, Exec::Sequential).unwrap();
                    let v = assemble_velocity_rows(&sched, kind, head, &raw, &z, &t, Exec::Sequential).unwrap();
                    let err = (&b - &d - &v).iter().fold(0.0f64, |m, e| m.max(e.abs()));
                    assert!(err < 1e-10, "{kind} {head}: {err}");
                }
            }
        }
    }

    #[test]
    fn oracle_heads_agree_with_target_velocity() {
        let mut rng = rng_from_seed(11);
        for shape in [vec![8], vec![6, 6], vec![4, 4, 3]] {
            let sched = HeatSchedule::new(&shape, 0.7).unwrap();
            let noise = NoiseConfig::default();
            for kind in [PathKind::Hdfm, PathKind::NoiseFm, PathKind::PureBlur] {
                for &t in &[1e-4, 0.05, 0.5, 0.97, 1.0] {
                    let x = noise.draw(&mut rng, &shape).unwrap();
                    let e = noise.draw(&mut rng, &shape).unwrap();
                    let p = sample_path(&x, t, &e, &sched, kind).unwrap();
                    let mut heads = vec![(Head::X, &p.x), (Head::V, &p.v_star)];
                    if kind != PathKind::PureBlur {
                        heads.push((Head::Eps, &p.e));
                    }
                    for (head, oracle) in heads {
                        let (b, d) = assemble_rows(&sched, kind, head, &rows(oracle), &rows(&p.z), &[t], Exec::Sequential).unwrap();
                        let v = row_field(&(b - d), &shape);
                        let tol = 1e-8 * (1.0 + p.v_star.max_abs());
                        assert!(v.max_abs_diff(&p.v_star) < tol, "{kind} {head} t={t}: {}", v.max_abs_diff(&p.v_star));
                    }
                }
            }
        }
    }

    #[test]
    fn endpoint_pair_and_constant_prediction() {
        let mut rng = rng_from_seed(12);
        let shape = [8, 8];
        let sched = HeatSchedule::new(&shape, 1.0).unwrap();
        let x = NoiseConfig::default().draw(&mut rng, &shape).unwrap();
        let (b, d) = assemble_rows(&sched, PathKind::Hdfm, Head::X, &rows(&x), &rows(&x), &[1.0], Exec::Sequential).unwrap();
        assert!(b.iter().all(|v| v.abs() < 1e-12));
        let lap = laplacian(&x, sched.eigen()).unwrap();
        assert!(row_field(&d, &shape).max_abs_diff(&lap) < 1e-12);

        let c = GridField::filled(&shape, 0.3).unwrap();
        let (_, d) = assemble_rows(&sched, PathKind::Hdfm, Head::X, &rows(&c), &rows(&x), &[0.4], Exec::Sequential).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_network_gives_minus_z_over_s() {
        let mut rng = rng_from_seed(13);
        let cfg = MlpConfig { hidden: 8, layers: 3, ..MlpConfig::new(&[4, 4], Head::X) };
        let mut m = MlpModel::new(cfg, &mut rng).unwrap();
        for (_, block) in m.params_mut().blocks_mut() {
            block.fill(0.0);
        }
        let sched = HeatSchedule::new(&[4, 4], 1.0).unwrap();
        let z = NoiseConfig::default().draw(&mut rng, &[4, 4]).unwrap();
        let t = 0.3;
        let v = predict_velocity(&m, &z, t, None, &sched).unwrap();
        assert!(v.max_abs_diff(&z.scale(-1.0 / sched.s(t))) < 1e-12);
    }

    #[test]
    fn recomposition_matches_predict_velocity() {
        let mut rng = rng_from_seed(14);
        let cfg = MlpConfig { hidden: 16, layers: 3, ..MlpConfig::new(&[8], Head::X) };
        let mut m = MlpModel::new(cfg, &mut rng).unwrap();
        // give the zero-initialised output layer some weight
        m.params_mut().layers[2].w.mapv_inplace(|_| 0.0);
        m.params_mut().layers[2].w.indexed_iter_mut().for_each(|((i, j), w)| *w = ((i * 3 + j) as f64).sin());
        let sched = HeatSchedule::new(&[8], 1.0).unwrap();
        let z = NoiseConfig::default().draw(&mut rng, &[8]).unwrap();
        let v = predict_velocity(&m, &z, 0.6, None, &sched).unwrap();
        let (b, d) = m.velocity_pair_rows(&rows(&z), &[0.6], &[None], &sched, Exec::Sequential).unwrap();
        assert!(row_field(&(b - d), &[8]).max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn v_head_is_exact_pass_through() {
        let raw = Array2::from_shape_fn((2, 5), |(i, j)| (i + j) as f64 * 0.37);
        let sched = HeatSchedule::new(&[5], 1.0).unwrap();
        let (b, d) = assemble_rows(&sched, PathKind::Hdfm, Head::V, &raw, &raw, &[0.2, 0.8], Exec::Sequential).unwrap();
        assert_eq!(b, raw);
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vjp_is_the_adjoint_of_the_forward_map() {
        let mut rng = rng_from_seed(15);
        let shape = [5, 6];
        let sched = HeatSchedule::new(&shape, 1.0).unwrap();
        let noise = NoiseConfig::default();
        let zero = Array2::zeros((1, 30));
        for (kind, head) in [(PathKind::Hdfm, Head::X), (PathKind::Hdfm, Head::Eps), (PathKind::PureBlur, Head::X)] {
            let a = rows(&noise.draw(&mut rng, &shape).unwrap());
            let g = rows(&noise.draw(&mut rng, &shape).unwrap());
            let (b, d) = assemble_rows(&sched, kind, head, &a, &zero, &[0.35], Exec::Sequential).unwrap();
            let fa = b - d;
            let bg = output_vjp(&sched, kind, head, &g, &[0.35], Exec::Sequential).unwrap();
            let lhs: f64 = (&fa * &g).sum();
            let rhs: f64 = (&a * &bg).sum();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{kind} {head}");
        }
    }

    #[test]
    fn pure_blur_eps_is_rejected() {
        let sched = HeatSchedule::new(&[4], 1.0).unwrap();
        assert!(HeadCoefficients::new(PathKind::PureBlur, Head::Eps, 0.5, &sched).is_err());
    }
}
