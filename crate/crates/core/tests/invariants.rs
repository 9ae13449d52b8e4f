use current_rdm::config::RunConfig;
use current_rdm::fields::{
    eval_jp, kappa_constant, kappa_gauge_quadratic, kappa_rigid_rotation, make_exponential_density,
    make_gaussian_density,
};
use current_rdm::kernels::{admissible_lambda, kernel_d, kernel_p, kernel_q};
use current_rdm::observables::{current_p_analytic, current_q_analytic, kinetic_density};
use current_rdm::{DensityProfile, KappaField, Mat3, OccupationMode, Vec3, C64};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn vec3() -> impl Strategy<Value = Vec3> {
    (-2.5f64..2.5, -2.5f64..2.5, -2.5f64..2.5).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn density() -> impl Strategy<Value = DensityProfile> {
    (prop::bool::ANY, 0.5f64..4.0, 0.5f64..2.0, vec3()).prop_map(|(gauss, n, a, c)| {
        let c = c * 0.2;
        if gauss {
            make_gaussian_density(n, a, c).unwrap()
        } else {
            make_exponential_density(n, a, c).unwrap()
        }
    })
}

fn kappa() -> impl Strategy<Value = KappaField> {
    (0usize..3, vec3(), -0.5f64..0.5, -0.5f64..0.5, -0.5f64..0.5).prop_map(|(kind, v, a, b, c)| {
        match kind {
            0 => kappa_rigid_rotation(v * 0.4).unwrap(),
            1 => kappa_gauge_quadratic(Mat3::new(a, b, 0.0, b, c, a, 0.0, a, -b)).unwrap(),
            _ => kappa_rigid_rotation(v * 0.2)
                .unwrap()
                .add(&kappa_constant(Vec3::new(a, b, c)).unwrap()),
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn diagonal_is_the_density(rho in density(), k in kappa(), r in vec3(), lambda in 0.05f64..3.0, mu in 0.05f64..3.0, theta in 0.0f64..=1.0) {
        let d = kernel_d(&rho, &k, lambda, mu, theta).unwrap();
        let z = d.eval(&r, &r);
        prop_assert!((z.re - rho.eval(&r)).abs() <= 1e-14 * rho.eval(&r));
        prop_assert_eq!(z.im, 0.0);
    }

    #[test]
    fn mixtures_are_hermitian(rho in density(), k in kappa(), r in vec3(), s in vec3(), theta in 0.0f64..=1.0) {
        let d = kernel_d(&rho, &k, 0.3, 0.7, theta).unwrap();
        let (a, b) = (d.eval(&r, &s), d.eval(&s, &r).conj());
        prop_assert!((a - b).norm() <= 1e-14 * a.norm().max(1e-300));
    }

    #[test]
    fn analytic_currents_average_to_the_prescribed_one(rho in density(), k in kappa(), r in vec3()) {
        let avg = (current_p_analytic(&rho, &k, &r) + current_q_analytic(&rho, &k, &r)) * 0.5;
        let j = eval_jp(&rho, &k, &r);
        let scale = rho.eval(&r) * (k.eval(&r).norm() + (k.jacobian(&r) * r).norm()) + 1e-300;
        prop_assert!((avg - j).norm() <= 1e-13 * scale);
    }

    #[test]
    fn gram_matrices_are_positive(rho in density(), k in kappa(), pts in prop::collection::vec(vec3(), 2..8), lambda in 0.05f64..2.0) {
        for kernel in [kernel_p(&rho, &k, lambda).unwrap(), kernel_q(&rho, &k, lambda).unwrap()] {
            let n = pts.len();
            let m = DMatrix::<C64>::from_fn(n, n, |i, j| kernel.eval(&pts[i], &pts[j]));
            let m = (&m + m.adjoint()) * C64::new(0.5, 0.0);
            let scale: f64 = (0..n).map(|i| m[(i, i)].re).sum();
            let eig = m.symmetric_eigenvalues();
            prop_assert!(eig.iter().all(|e| *e >= -1e-12 * scale.max(1e-300)), "{eig:?}");
        }
    }

    #[test]
    fn spin_resolved_threshold_ratio(n in 0.5f64..10.0, norm in 0.01f64..2.0, q in 1.1f64..6.0) {
        let two = admissible_lambda(n, norm, q, OccupationMode::Spatial).unwrap();
        let one = admissible_lambda(n, norm, q, OccupationMode::SpinResolved).unwrap();
        let want = 4f64.powf(2.0 * two.p / 3.0);
        prop_assert!((one.lambda_min / two.lambda_min - want).abs() <= 1e-12 * want);
        let sharp = (2.0 * two.p / std::f64::consts::PI).powi(2);
        prop_assert!((two.lambda_min / two.lambda_holder - sharp).abs() <= 1e-12 * sharp);
        prop_assert!(two.eigenvalue_bound(two.lambda_holder) <= two.occ_max * (1.0 + 1e-12));
    }

    #[test]
    fn kinetic_density_is_linear_and_bounded_below(rho in density(), k in kappa(), r in vec3(), lambda in 0.05f64..3.0, mu in 0.05f64..3.0, theta in 0.0f64..=1.0) {
        prop_assume!(!rho.near_cusp(&r, 1e-6));
        let kd = kinetic_density(&rho, &k, lambda, mu, &r).unwrap();
        let t = kd.tau_d(theta);
        prop_assert!((t - (theta * kd.tau_p + (1.0 - theta) * kd.tau_q)).abs() <= 1e-14 * t);
        let floor = kd.weizsacker + 3.0 * (theta * lambda + (1.0 - theta) * mu) * rho.eval(&r);
        prop_assert!(t >= floor * (1.0 - 1e-14));
    }

    #[test]
    fn configs_round_trip(theta in 0.0f64..=1.0, scale in 0.01f64..100.0, occ in 1u32..=2, omega in vec3(), counts in 4usize..64, seed in any::<u64>()) {
        let text = format!(
            "[density]\npreset = \"gaussian\"\nparams = {{ n = 2.0, alpha = 0.7 }}\n\n[kappa]\npreset = \"rigid_rotation\"\nomega = [{:?}, {:?}, {:?}]\n\n[kernel]\ntheta = {theta:?}\nlambda_scale = {scale:?}\nocc_max = {occ}\nmu = 0.25\n\n[grid]\ncounts = {counts}\n\n[numerics]\nseed = {seed}\n",
            omega.x, omega.y, omega.z
        );
        let cfg = RunConfig::from_toml(&text).unwrap();
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(cfg, again);
    }
}
