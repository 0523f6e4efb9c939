use hdfm_core::path::sample_path;
use hdfm_core::spectral::{dct_forward, dct_inverse, heat_endpoint, heat_endpoint_raw_tau};
use hdfm_core::{rng_from_seed, GridField, HeatSchedule, NoiseConfig, PathKind};
use proptest::prelude::*;

fn field(seed: u64, shape: &[usize]) -> GridField {
    NoiseConfig::default().draw(&mut rng_from_seed(seed), shape).unwrap()
}

fn shapes() -> impl Strategy<Value = Vec<usize>> {
    prop_oneof![(2usize..12).prop_map(|n| vec![n]), (2usize..7, 2usize..7).prop_map(|(h, w)| vec![h, w])]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dct_preserves_norm_and_inverts(shape in shapes(), seed in any::<u64>()) {
        let x = field(seed, &shape);
        let s = dct_forward(&x);
        prop_assert!((s.energy() - x.norm_sq()).abs() <= 1e-10 * x.norm_sq().max(1.0));
        prop_assert!(dct_inverse(&s).sub(&x).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn heat_is_a_contracting_semigroup(shape in shapes(), seed in any::<u64>(), a in 0.0f64..3.0, b in 0.0f64..3.0, r in 0.1f64..=1.0) {
        let sched = HeatSchedule::new(&shape, r).unwrap();
        let x = field(seed, &shape);
        let eigen = sched.eigen();
        let ha = heat_endpoint_raw_tau(&x, a, eigen).unwrap();
        let hab = heat_endpoint_raw_tau(&ha, b, eigen).unwrap();
        let direct = heat_endpoint_raw_tau(&x, a + b, eigen).unwrap();
        prop_assert!(hab.sub(&direct).unwrap().max_abs() < 1e-9);
        prop_assert!(ha.norm_l2() <= x.norm_l2() + 1e-12);
        let means = |f: &GridField| f.data().iter().sum::<f64>();
        prop_assert!((means(&ha) - means(&x)).abs() < 1e-9);
    }

    #[test]
    fn hdfm_target_is_the_path_derivative(shape in shapes(), seed in any::<u64>(), t in 0.1f64..0.9) {
        let sched = HeatSchedule::new(&shape, 1.0).unwrap();
        let x = field(seed, &shape);
        let e = field(seed ^ 1, &shape);
        let p = sample_path(&x, t, &e, &sched, PathKind::Hdfm).unwrap();
        let h = 1e-5;
        let zp = sample_path(&x, t + h, &e, &sched, PathKind::Hdfm).unwrap().z;
        let zm = sample_path(&x, t - h, &e, &sched, PathKind::Hdfm).unwrap().z;
        let fd = zp.lin_comb(0.5 / h, &zm, -0.5 / h).unwrap();
        let err = fd.sub(&p.v_star).unwrap().norm_l2() / p.v_star.norm_l2().max(1e-12);
        prop_assert!(err < 1e-4, "relative error {}", err);
    }

    #[test]
    fn hdfm_reaches_data_at_one_and_noise_at_the_floor(shape in shapes(), seed in any::<u64>()) {
        let sched = HeatSchedule::new(&shape, 1.0).unwrap();
        let x = field(seed, &shape);
        let e = field(seed ^ 2, &shape);
        let one = sample_path(&x, 1.0, &e, &sched, PathKind::Hdfm).unwrap();
        prop_assert!(one.z.sub(&x).unwrap().max_abs() < 1e-10);
        let t0 = sched.t_floor();
        let start = sample_path(&x, t0, &e, &sched, PathKind::Hdfm).unwrap();
        prop_assert!(start.z.sub(&e).unwrap().max_abs() <= t0 * (x.norm_l2() + e.max_abs()) + 1e-10);
    }

    #[test]
    fn noise_only_path_has_no_blur(shape in shapes(), seed in any::<u64>(), t in 0.0f64..1.0) {
        let sched = HeatSchedule::new(&shape, 1.0).unwrap();
        let x = field(seed, &shape);
        let e = field(seed ^ 3, &shape);
        let p = sample_path(&x, t, &e, &sched, PathKind::NoiseFm).unwrap();
        prop_assert_eq!(&p.u, &x);
        prop_assert_eq!(p.lap_u.max_abs(), 0.0);
    }
}

#[test]
fn calibration_maps_one_to_identity() {
    let sched = HeatSchedule::new(&[5, 7], 0.6).unwrap();
    let x = field(17, &[5, 7]);
    let (u, _) = heat_endpoint(&x, 1.0, &sched).unwrap();
    assert!(u.sub(&x).unwrap().max_abs() < 1e-12);
    assert!(heat_endpoint(&x, 1.5, &sched).is_err());
}
