use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ossctl::benchmark;
use ossctl::controller::PiGains;
use ossctl::kkt::build_kkt_geometry;
use ossctl::lmi;
use ossctl::objective::quadratic_objective;
use ossctl::synthesis::loop_transform;

fn random_symmetric(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
    let x = DMatrix::from_fn(k, k, |_, _| rng.gen_range(-1.0..1.0));
    &x + x.transpose()
}

/// Symmetric matrix with eigenvalues drawn from `[lo, hi]`.
fn spectrum_in(rng: &mut ChaCha8Rng, k: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let q = DMatrix::from_fn(k, k, |_, _| rng.gen_range(-1.0..1.0)).qr().q();
    let mut eig: Vec<f64> = (0..k).map(|_| rng.gen_range(lo..=hi)).collect();
    eig[0] = lo;
    eig[k - 1] = hi;
    &q * DMatrix::from_diagonal(&DVector::from_vec(eig)) * q.transpose()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stability_lmi_is_affine_and_symmetric(
        kp in 0.05f64..5.0,
        ki in 0.05f64..5.0,
        kappa in 0.01f64..1.0,
        spread in 1.0f64..20.0,
        s in -3.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let plant = benchmark::stable_plant();
        let geo = build_kkt_geometry(&plant).unwrap();
        let gains = PiGains::scalar(1, kp, ki).unwrap();
        let mult = lmi::build_multiplier(kappa, kappa * spread, plant.p(), plant.m()).unwrap();
        let map = lmi::assemble_lmi(&lmi::build_realization(&plant, &gains, &geo).unwrap(), &mult).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = map.state_dim();
        let (p1, p2) = (random_symmetric(&mut rng, k), random_symmetric(&mut rng, k));
        let (a1, a2) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0));

        let f0 = map.eval(&DMatrix::zeros(k, k), 0.0);
        let lhs = map.eval(&(&p1 * s + &p2), a1 * s + a2);
        let rhs = (map.eval(&p1, a1) - &f0) * s + map.eval(&p2, a2);
        prop_assert!((&lhs - &rhs).norm() <= 1e-12 * (1.0 + rhs.norm()));
        prop_assert!((&lhs - lhs.transpose()).norm() <= 1e-12 * (1.0 + lhs.norm()));
    }

    #[test]
    fn loop_transform_maps_sector_to_unit_ball(
        kappa in 0.05f64..3.0,
        spread in 1.01f64..10.0,
        seed in any::<u64>(),
    ) {
        let lipschitz = kappa * spread;
        let plant = benchmark::unstable_plant();
        let geo = build_kkt_geometry(&plant).unwrap();
        let aug = loop_transform(&plant, &geo, kappa, lipschitz).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = spectrum_in(&mut rng, 3, kappa, lipschitz);
        let obj = quadratic_objective(h, DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0))).unwrap();
        for _ in 0..50 {
            let a = DVector::from_fn(3, |_, _| rng.gen_range(-5.0..5.0));
            let b = DVector::from_fn(3, |_, _| rng.gen_range(-5.0..5.0));
            let da = aug.transform_nonlinearity(&obj.gradient_at(&a), &a);
            let db = aug.transform_nonlinearity(&obj.gradient_at(&b), &b);
            prop_assert!((da - db).norm() <= (&a - &b).norm() * (1.0 + 1e-12));
        }
    }
}

#[test]
fn sector_edges_map_to_unit_edges() {
    let plant = benchmark::unstable_plant();
    let geo = build_kkt_geometry(&plant).unwrap();
    let aug = loop_transform(&plant, &geo, 1.0, 2.0).unwrap();
    let v = DVector::from_vec(vec![0.4, -2.0, 1.5]);
    assert!((aug.transform_nonlinearity(&(&v * 1.0), &v) + &v).norm() < 1e-15);
    assert!((aug.transform_nonlinearity(&(&v * 2.0), &v) - &v).norm() < 1e-15);
}

#[test]
fn benchmark_cost_gradient_stays_in_unit_sector_on_1000_pairs() {
    let plant = benchmark::unstable_plant();
    let geo = build_kkt_geometry(&plant).unwrap();
    let aug = loop_transform(&plant, &geo, 1.0, 2.0).unwrap();
    let obj = benchmark::quadratic_cost();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut worst = 0.0_f64;
    for _ in 0..1000 {
        let a = DVector::from_fn(3, |_, _| rng.gen_range(-10.0..10.0));
        let b = DVector::from_fn(3, |_, _| rng.gen_range(-10.0..10.0));
        let da = aug.transform_nonlinearity(&obj.gradient_at(&a), &a);
        let db = aug.transform_nonlinearity(&obj.gradient_at(&b), &b);
        worst = worst.max((da - db).norm() / (&a - &b).norm());
    }
    assert!(worst <= 1.0 + 1e-12, "incremental gain {worst}");
}
