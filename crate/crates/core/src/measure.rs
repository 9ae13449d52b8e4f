//! Local averages over cubes `x + [-eps, eps]^n`, a finite-set maximal
//! function, and the averaged diagonal of a factorized kernel.

use std::ops::{Add, Mul};

use serde::Serialize;

use crate::kernels::KernelFactor;
use crate::quadrature::{gauss_hermite_integral, pairwise_sum, GaussHermiteRule};
use crate::{Vec3, C64};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MeasureError {
    #[error("epsilon sequence must be positive and strictly decreasing (entry {index} = {value})")]
    EpsilonSequence { index: usize, value: f64 },
    #[error("averaging dimension must be 1, 2 or 3, got {0}")]
    Dimension(usize),
    #[error("subgrid needs at least one cell per axis")]
    Subgrid,
}

/// Midpoint offsets of `m` cells across `[-eps, eps]`.
fn offsets(eps: f64, m: usize) -> Vec<f64> {
    let h = 2.0 * eps / m as f64;
    (0..m).map(|k| -eps + (k as f64 + 0.5) * h).collect()
}

/// `(2 eps)^{-n} int_{[-eps, eps]^n} f(x + y) dy` by the tensor midpoint rule
/// with `m` cells per axis. The dimension is `x.len()`.
pub fn local_average<T, F>(f: F, x: &[f64], eps: f64, m: usize) -> Result<T, MeasureError>
where
    T: Copy + Default + Add<Output = T> + Mul<f64, Output = T>,
    F: Fn(&[f64]) -> T,
{
    let n = x.len();
    if !(1..=3).contains(&n) {
        return Err(MeasureError::Dimension(n));
    }
    if m == 0 {
        return Err(MeasureError::Subgrid);
    }
    let off = offsets(eps, m);
    let total = m.pow(n as u32);
    let mut vals = Vec::with_capacity(total);
    let mut y = x.to_vec();
    for idx in 0..total {
        let mut rest = idx;
        for a in 0..n {
            y[a] = x[a] + off[rest % m];
            rest /= m;
        }
        vals.push(f(&y));
    }
    Ok(pairwise_sum(&vals) * (1.0 / total as f64))
}

/// `max_{eps in set} A_eps |f| (x)`, a lower bound of the maximal function.
pub fn maximal_function<F>(f: F, x: &[f64], eps_set: &[f64], m: usize) -> Result<f64, MeasureError>
where
    F: Fn(&[f64]) -> f64,
{
    let mut best = 0.0f64;
    for &eps in eps_set {
        best = best.max(local_average(|y| f(y).abs(), x, eps, m)?);
    }
    Ok(best)
}

/// `1, 1/2, ..., 2^-levels`.
pub fn dyadic_epsilons(levels: u32) -> Vec<f64> {
    (0..=levels).map(|k| 0.5f64.powi(k as i32)).collect()
}

fn validate_epsilons(eps: &[f64]) -> Result<(), MeasureError> {
    for (i, &e) in eps.iter().enumerate() {
        let bad = !(e.is_finite() && e > 0.0) || (i > 0 && e >= eps[i - 1]);
        if bad {
            return Err(MeasureError::EpsilonSequence { index: i, value: e });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub epsilon: f64,
    pub value: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    pub limit: f64,
    /// Every error is strictly below the previous one.
    pub strictly_decreasing: bool,
    /// The last three errors do not decrease: flagged as a failed probe.
    pub stalled: bool,
}

impl ConvergenceTable {
    pub fn from_values(epsilons: &[f64], values: &[f64], limit: f64) -> Self {
        let rows: Vec<ConvergenceRow> = epsilons
            .iter()
            .zip(values)
            .map(|(&epsilon, &value)| ConvergenceRow {
                epsilon,
                value,
                abs_error: (value - limit).abs(),
            })
            .collect();
        let strictly_decreasing = rows.windows(2).all(|w| w[1].abs_error < w[0].abs_error);
        let stalled = match rows.as_slice() {
            [.., a, b, c] => !(b.abs_error < a.abs_error && c.abs_error < b.abs_error),
            _ => false,
        };
        Self {
            rows,
            limit,
            strictly_decreasing,
            stalled,
        }
    }

    pub fn final_error(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.abs_error)
    }
}

/// Probe settings for [`diag_via_averaging`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AveragingSettings {
    /// Midpoint cells per axis in each averaging cube.
    pub subgrid: usize,
    /// Gauss–Hermite points per axis for the inner integral.
    pub gh_order: usize,
}

impl Default for AveragingSettings {
    fn default() -> Self {
        Self {
            subgrid: 4,
            gh_order: 16,
        }
    }
}

/// Averaged diagonal of `C(r, s) = int conj(left(u, r)) right(u, s) du`:
///
/// ```text
/// A_eps C (x, x) = int [avg_a conj(left(u, x + a))] [avg_b right(u, x + b)] du
/// ```
///
/// compared against the factorized diagonal `C(x, x)` from the same rule.
pub fn diag_via_averaging(
    left: &KernelFactor,
    right: &KernelFactor,
    x: &Vec3,
    epsilons: &[f64],
    settings: AveragingSettings,
) -> Result<ConvergenceTable, MeasureError> {
    validate_epsilons(epsilons)?;
    let rule = GaussHermiteRule::new(settings.gh_order).map_err(|_| MeasureError::Subgrid)?;
    let scale = 2.0 * (left.width() + right.width());
    let envelope = |u: &Vec3| (scale * (u - x).norm_squared()).exp();
    let limit = gauss_hermite_integral(
        |u| left.eval(u, x).conj() * right.eval(u, x) * envelope(u),
        x,
        scale,
        &rule,
    )
    .re;
    let xs = [x.x, x.y, x.z];
    let mut values = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let avg = |factor: &KernelFactor, u: &Vec3| -> C64 {
            local_average(
                |v| factor.eval(u, &Vec3::new(v[0], v[1], v[2])),
                &xs,
                eps,
                settings.subgrid,
            )
            .expect("dimension fixed at 3")
        };
        let c = gauss_hermite_integral(
            |u| avg(left, u).conj() * avg(right, u) * envelope(u),
            x,
            scale,
            &rule,
        );
        values.push(c.re);
    }
    Ok(ConvergenceTable::from_values(epsilons, &values, limit))
}

/// `|A_eps g (x)| <= (2 eps)^{-n/2} ||g||_2` over the cube.
pub fn smoothing_bound(eps: f64, n: usize, l2_norm: f64) -> f64 {
    (2.0 * eps).powf(-(n as f64) / 2.0) * l2_norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmoothingCheck {
    pub sup_difference: f64,
    pub bound: f64,
}

/// Compares `max_x |A_eps f_k (x) - A_eps f (x)|` over `points` with the
/// smoothing bound, using the discrete `L^2` norm of `f_k - f` on each cube.
pub fn smoothing_check<F, G>(
    fk: F,
    f: G,
    points: &[Vec<f64>],
    eps: f64,
    m: usize,
) -> Result<SmoothingCheck, MeasureError>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> f64,
{
    let mut worst = SmoothingCheck {
        sup_difference: 0.0,
        bound: f64::INFINITY,
    };
    let mut worst_ratio = f64::NEG_INFINITY;
    for x in points {
        let n = x.len();
        let diff = local_average(|y| fk(y) - f(y), x, eps, m)?.abs();
        let cell = (2.0 * eps / m as f64).powi(n as i32);
        let l2 =
            (local_average(|y| (fk(y) - f(y)).powi(2), x, eps, m)? * m.pow(n as u32) as f64 * cell)
                .sqrt();
        let bound = smoothing_bound(eps, n, l2);
        let ratio = if bound > 0.0 { diff / bound } else { 0.0 };
        if ratio > worst_ratio {
            worst_ratio = ratio;
            worst = SmoothingCheck {
                sup_difference: diff,
                bound,
            };
        }
    }
    Ok(worst)
}

/// Empirical constant `||M f||_p / ||f||_p` on a 1D grid with spacing `h`.
pub fn maximal_ratio_1d<F>(
    f: F,
    xs: &[f64],
    h: f64,
    eps_set: &[f64],
    m: usize,
    p: f64,
) -> Result<f64, MeasureError>
where
    F: Fn(&[f64]) -> f64,
{
    let mut num = Vec::with_capacity(xs.len());
    let mut den = Vec::with_capacity(xs.len());
    for &x in xs {
        num.push(maximal_function(&f, &[x], eps_set, m)?.powf(p) * h);
        den.push(f(&[x]).abs().powf(p) * h);
    }
    Ok((pairwise_sum(&num) / pairwise_sum(&den)).powf(1.0 / p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{kappa_rigid_rotation, kappa_zero, make_gaussian_density};
    use crate::kernels::{factor_g, factor_h};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn constants_average_to_themselves() {
        for n in 1..=3 {
            let x = vec![0.3; n];
            assert_relative_eq!(
                local_average(|_| 2.5, &x, 0.7, 5).unwrap(),
                2.5,
                max_relative = 1e-15
            );
            assert_relative_eq!(
                maximal_function(|_| -2.5, &x, &[1.0, 0.5], 5).unwrap(),
                2.5,
                max_relative = 1e-15
            );
        }
        assert!(local_average(|_| 1.0, &[0.0; 4], 1.0, 2).is_err());
    }

    #[test]
    fn square_average_has_the_midpoint_error() {
        for &eps in &[1.0, 0.25, 0.01] {
            for &m in &[2, 8, 64] {
                let got: f64 = local_average(|y| y[0] * y[0], &[0.0], eps, m).unwrap();
                let exact = eps * eps / 3.0;
                assert_relative_eq!(exact - got, exact / (m * m) as f64, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn lebesgue_points() {
        let f = |y: &[f64]| (y[0].sin() + y[1] * y[1]).exp();
        let x = [0.4, -0.2];
        let errs: Vec<f64> = dyadic_epsilons(8)
            .iter()
            .map(|&e| (local_average(f, &x, e, 6).unwrap() - f(&x)).abs())
            .collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]));
        assert!(errs[8] < 1e-4);
    }

    #[test]
    fn maximal_function_dominates_each_average() {
        let f = |y: &[f64]| (-(y[0] - 0.5).powi(2)).exp() - 0.3;
        let eps = [2.0, 1.0, 0.3, 0.05];
        let mf = maximal_function(f, &[0.1], &eps, 16).unwrap();
        for &e in &eps {
            assert!(local_average(f, &[0.1], e, 16).unwrap().abs() <= mf);
        }
        let xs: Vec<f64> = (0..200).map(|i| -10.0 + 0.1 * i as f64).collect();
        let ratio = maximal_ratio_1d(
            |y| (-y[0] * y[0]).exp(),
            &xs,
            0.1,
            &dyadic_epsilons(6),
            8,
            2.0,
        )
        .unwrap();
        assert!((1.0..5.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn averaged_diagonal_converges_to_the_density() {
        let rho = make_gaussian_density(1.0, 1.0, Vec3::zeros()).unwrap();
        let x = Vec3::new(1.0, 0.0, 0.0);
        for kappa in [
            kappa_zero(),
            kappa_rigid_rotation(Vec3::new(0.0, 0.0, 0.5)).unwrap(),
        ] {
            let g = factor_g(&rho, &kappa, 0.3).unwrap();
            let t = diag_via_averaging(
                &g,
                &g,
                &x,
                &dyadic_epsilons(8),
                AveragingSettings::default(),
            )
            .unwrap();
            assert_relative_eq!(t.limit, rho.eval(&x), max_relative = 1e-10);
            assert!(t.strictly_decreasing, "{:?}", t.rows);
            assert!(!t.stalled);
            assert!(t.final_error() <= 1e-4 * rho.eval(&x));
            let h = factor_h(&rho, &kappa, 0.3).unwrap();
            let t = diag_via_averaging(
                &h,
                &h,
                &x,
                &dyadic_epsilons(4),
                AveragingSettings::default(),
            )
            .unwrap();
            assert_relative_eq!(t.limit, rho.eval(&x), max_relative = 1e-8);
        }
    }

    #[test]
    fn pointwise_spike_is_invisible() {
        let f = |y: &[f64]| (-(y[0] * y[0] + y[1] * y[1])).exp();
        let x = [0.2, -0.1];
        let spiked = |y: &[f64]| if y == x { 1e6 } else { f(y) };
        for &e in &dyadic_epsilons(8) {
            let a: f64 = local_average(f, &x, e, 4).unwrap();
            let b: f64 = local_average(spiked, &x, e, 4).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_bad_epsilon_sequences() {
        let rho = make_gaussian_density(1.0, 1.0, Vec3::zeros()).unwrap();
        let g = factor_g(&rho, &kappa_zero(), 0.3).unwrap();
        let x = Vec3::zeros();
        for bad in [vec![1.0, 1.0], vec![0.5, 1.0], vec![1.0, -0.5]] {
            assert!(diag_via_averaging(&g, &g, &x, &bad, AveragingSettings::default()).is_err());
        }
    }

    #[test]
    fn smoothing_on_a_sequence() {
        let f = |y: &[f64]| (-(y[0] * y[0])).exp();
        let pts: Vec<Vec<f64>> = (0..9).map(|i| vec![-2.0 + 0.5 * i as f64]).collect();
        for k in 1..6 {
            let amp = 0.5f64.powi(k);
            let fk = move |y: &[f64]| f(y) + amp * (7.0 * y[0]).sin();
            let c = smoothing_check(fk, f, &pts, 0.3, 32).unwrap();
            assert!(c.sup_difference <= c.bound * (1.0 + 1e-12));
        }
    }

    proptest! {
        #[test]
        fn averaging_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, eps in 1e-3f64..2.0, x in -2.0f64..2.0, y in -2.0f64..2.0) {
            let f = |p: &[f64]| (p[0] * 1.3).sin() * p[1];
            let g = |p: &[f64]| (-(p[0] * p[0] + p[1] * p[1])).exp();
            let pt = [x, y];
            let lhs: f64 = local_average(|p| a * f(p) + b * g(p), &pt, eps, 5).unwrap();
            let rhs = a * local_average(f, &pt, eps, 5).unwrap() + b * local_average(g, &pt, eps, 5).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-14 * (1.0 + lhs.abs()));
        }
    }
}
