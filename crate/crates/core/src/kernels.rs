//! Closed-form 1-RDM kernels and their Gaussian factors.
//!
//! With `G(u, v) = g(u, v) sqrt(rho(v))` and `H(u, v) = h(u, v) sqrt(rho(v))`,
//!
//! ```text
//! g(u, v) = sqrt(8) (lambda/pi)^{3/4} exp(-i v.kappa(v)) exp(-2 lambda |u - v|^2)
//! h(u, v) = sqrt(8) (mu/pi)^{3/4}     exp(+i u.kappa(v)) exp(-2 mu |u - v|^2)
//! ```
//!
//! the kernels `P = G^dagger * G` and `Q = H^dagger * H` integrate to
//!
//! ```text
//! P(r, s) = sqrt(rho(r) rho(s)) exp(-lambda |r - s|^2) exp(i (r.kappa(r) - s.kappa(s)))
//! Q(r, s) = sqrt(rho(r) rho(s)) exp(-mu |r - s|^2)
//!           exp(-(i/2) (r + s).(kappa(r) - kappa(s)) - |kappa(r) - kappa(s)|^2 / (16 mu))
//! ```
//!
//! The closed forms are the production path. The factors exist so the
//! `u`-integral can be checked by quadrature.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fields::{DensityProfile, KappaField};
use crate::quadrature::{gauss_hermite_integral, GaussHermiteRule, QuadratureError};
use crate::{Vec3, C64};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("parameter `{name}` must be {requirement}, got {value}")]
    InvalidParameter {
        name: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

fn positive(name: &'static str, value: f64) -> Result<f64, KernelError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(KernelError::InvalidParameter {
            name,
            requirement: "finite and > 0",
            value,
        })
    }
}

/// Largest occupation number a natural orbital may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OccupationMode {
    /// Spatial orbitals, occupations in `[0, 2]`.
    #[default]
    Spatial,
    /// Spin orbitals, occupations in `[0, 1]`.
    SpinResolved,
}

impl OccupationMode {
    pub fn max_occupation(self) -> f64 {
        match self {
            OccupationMode::Spatial => 2.0,
            OccupationMode::SpinResolved => 1.0,
        }
    }

    pub fn from_max(occ_max: u32) -> Option<Self> {
        match occ_max {
            2 => Some(OccupationMode::Spatial),
            1 => Some(OccupationMode::SpinResolved),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    /// `g`-type: phase carried on the second argument only.
    G,
    /// `h`-type: phase couples the first argument to `kappa` at the second.
    H,
}

/// `sqrt(8) w^{3/4} / pi^{3/4}`, making `int |g(u, v)|^2 du = 1`.
fn factor_prefactor(width: f64) -> f64 {
    8f64.sqrt() * (width / PI).powf(0.75)
}

/// One of the Gaussian factors `G_lambda` or `H_mu`.
#[derive(Debug, Clone)]
pub struct KernelFactor {
    kind: FactorKind,
    width: f64,
    prefactor: f64,
    rho: DensityProfile,
    kappa: KappaField,
}

impl KernelFactor {
    pub fn kind(&self) -> FactorKind {
        self.kind
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    /// The bare factor `g(u, v)` or `h(u, v)`.
    pub fn bare(&self, u: &Vec3, v: &Vec3) -> C64 {
        let kv = self.kappa.eval(v);
        let phase = match self.kind {
            FactorKind::G => -v.dot(&kv),
            FactorKind::H => u.dot(&kv),
        };
        let envelope = self.prefactor * (-2.0 * self.width * (u - v).norm_squared()).exp();
        C64::from_polar(envelope, phase)
    }

    /// The weighted factor `G(u, v) = g(u, v) sqrt(rho(v))` (resp. `H`).
    pub fn eval(&self, u: &Vec3, v: &Vec3) -> C64 {
        self.bare(u, v) * self.rho.eval(v).sqrt()
    }

    /// `int conj(F(u, r)) F(u, s) du` by Gauss–Hermite quadrature around `(r + s)/2`.
    pub fn gram_quadrature(&self, r: &Vec3, s: &Vec3, rule: &GaussHermiteRule) -> C64 {
        let mid = (r + s) * 0.5;
        let scale = 4.0 * self.width;
        gauss_hermite_integral(
            |u| self.eval(u, r).conj() * self.eval(u, s) * (scale * (u - mid).norm_squared()).exp(),
            &mid,
            scale,
            rule,
        )
    }
}

/// `g`-type factor of width `lambda`.
pub fn factor_g(
    rho: &DensityProfile,
    kappa: &KappaField,
    lambda: f64,
) -> Result<KernelFactor, KernelError> {
    let width = positive("lambda", lambda)?;
    Ok(KernelFactor {
        kind: FactorKind::G,
        width,
        prefactor: factor_prefactor(width),
        rho: rho.clone(),
        kappa: kappa.clone(),
    })
}

/// `h`-type factor of width `mu`.
pub fn factor_h(
    rho: &DensityProfile,
    kappa: &KappaField,
    mu: f64,
) -> Result<KernelFactor, KernelError> {
    let width = positive("mu", mu)?;
    Ok(KernelFactor {
        kind: FactorKind::H,
        width,
        prefactor: factor_prefactor(width),
        rho: rho.clone(),
        kappa: kappa.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    P,
    Q,
    /// `theta P + (1 - theta) Q`.
    D,
}

/// Per-point quantities a kernel evaluation needs; cache these on grids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelPoint {
    pub r: Vec3,
    pub rho: f64,
    pub sqrt_rho: f64,
    pub kappa: Vec3,
    pub r_dot_kappa: f64,
}

/// A closed-form 1-RDM kernel `D(r, s)`.
#[derive(Debug, Clone)]
pub struct RdmKernel {
    kind: KernelKind,
    lambda: f64,
    mu: f64,
    theta: f64,
    occupation: OccupationMode,
    rho: DensityProfile,
    kappa: KappaField,
}

/// `P_lambda`.
pub fn kernel_p(
    rho: &DensityProfile,
    kappa: &KappaField,
    lambda: f64,
) -> Result<RdmKernel, KernelError> {
    Ok(RdmKernel {
        kind: KernelKind::P,
        lambda: positive("lambda", lambda)?,
        mu: f64::NAN,
        theta: 1.0,
        occupation: OccupationMode::default(),
        rho: rho.clone(),
        kappa: kappa.clone(),
    })
}

/// `Q_mu`.
pub fn kernel_q(
    rho: &DensityProfile,
    kappa: &KappaField,
    mu: f64,
) -> Result<RdmKernel, KernelError> {
    Ok(RdmKernel {
        kind: KernelKind::Q,
        lambda: f64::NAN,
        mu: positive("mu", mu)?,
        theta: 0.0,
        occupation: OccupationMode::default(),
        rho: rho.clone(),
        kappa: kappa.clone(),
    })
}

/// `D_theta = theta P_lambda + (1 - theta) Q_mu`.
pub fn kernel_d(
    rho: &DensityProfile,
    kappa: &KappaField,
    lambda: f64,
    mu: f64,
    theta: f64,
) -> Result<RdmKernel, KernelError> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(KernelError::InvalidParameter {
            name: "theta",
            requirement: "in [0, 1]",
            value: theta,
        });
    }
    Ok(RdmKernel {
        kind: KernelKind::D,
        lambda: positive("lambda", lambda)?,
        mu: positive("mu", mu)?,
        theta,
        occupation: OccupationMode::default(),
        rho: rho.clone(),
        kappa: kappa.clone(),
    })
}

impl RdmKernel {
    pub fn with_occupation(mut self, occupation: OccupationMode) -> Self {
        self.occupation = occupation;
        self
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    /// `lambda`; `NaN` for a pure `Q` kernel.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `mu`; `NaN` for a pure `P` kernel.
    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Weight of `P` in the combination (1 for `P`, 0 for `Q`).
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn occupation(&self) -> OccupationMode {
        self.occupation
    }

    pub fn occ_max(&self) -> f64 {
        self.occupation.max_occupation()
    }

    pub fn rho(&self) -> &DensityProfile {
        &self.rho
    }

    pub fn kappa(&self) -> &KappaField {
        &self.kappa
    }

    pub fn label(&self) -> String {
        match self.kind {
            KernelKind::P => format!("P(lambda={})", self.lambda),
            KernelKind::Q => format!("Q(mu={})", self.mu),
            KernelKind::D => format!(
                "D(lambda={}, mu={}, theta={})",
                self.lambda, self.mu, self.theta
            ),
        }
    }

    pub fn point(&self, r: &Vec3) -> KernelPoint {
        let rho = self.rho.eval(r);
        let kappa = self.kappa.eval(r);
        KernelPoint {
            r: *r,
            rho,
            sqrt_rho: rho.sqrt(),
            kappa,
            r_dot_kappa: r.dot(&kappa),
        }
    }

    fn p_part(&self, a: &KernelPoint, b: &KernelPoint) -> C64 {
        let modulus = a.sqrt_rho * b.sqrt_rho * (-self.lambda * (a.r - b.r).norm_squared()).exp();
        C64::from_polar(modulus, a.r_dot_kappa - b.r_dot_kappa)
    }

    fn q_part(&self, a: &KernelPoint, b: &KernelPoint) -> C64 {
        let dk = a.kappa - b.kappa;
        let modulus = a.sqrt_rho
            * b.sqrt_rho
            * (-self.mu * (a.r - b.r).norm_squared() - dk.norm_squared() / (16.0 * self.mu)).exp();
        C64::from_polar(modulus, -0.5 * (a.r + b.r).dot(&dk))
    }

    /// Kernel value from cached point data.
    pub fn eval_points(&self, a: &KernelPoint, b: &KernelPoint) -> C64 {
        if a.r == b.r {
            return C64::new(a.rho, 0.0);
        }
        match self.kind {
            KernelKind::P => self.p_part(a, b),
            KernelKind::Q => self.q_part(a, b),
            KernelKind::D => {
                self.p_part(a, b) * self.theta + self.q_part(a, b) * (1.0 - self.theta)
            }
        }
    }

    pub fn eval(&self, r: &Vec3, s: &Vec3) -> C64 {
        self.eval_points(&self.point(r), &self.point(s))
    }
}

/// Residual of the factorized `u`-integral against a closed-form kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FactorizationResidual {
    pub gh_order: usize,
    pub pairs: usize,
    /// `max |int conj(F(u,r)) F(u,s) du - K(r,s)| / (1 + |K(r,s)|)`.
    pub max_residual: f64,
}

/// Minimum Gauss–Hermite order accepted by [`factorization_residual`].
pub const MIN_FACTORIZATION_ORDER: usize = 8;

pub fn factorization_residual(
    factor: &KernelFactor,
    kernel: &RdmKernel,
    pairs: &[(Vec3, Vec3)],
    gh_order: usize,
) -> Result<FactorizationResidual, KernelError> {
    if gh_order < MIN_FACTORIZATION_ORDER {
        return Err(KernelError::InvalidParameter {
            name: "gh_order",
            requirement: "at least 8",
            value: gh_order as f64,
        });
    }
    let rule = GaussHermiteRule::new(gh_order)?;
    let residuals: Vec<f64> = pairs
        .par_iter()
        .map(|(r, s)| {
            let exact = kernel.eval(r, s);
            (factor.gram_quadrature(r, s, &rule) - exact).norm() / (1.0 + exact.norm())
        })
        .collect();
    Ok(FactorizationResidual {
        gh_order,
        pairs: pairs.len(),
        max_residual: residuals.iter().copied().fold(0.0, f64::max),
    })
}

/// Residuals over increasing quadrature orders.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorizationLadder {
    pub factor: FactorKind,
    pub steps: Vec<FactorizationResidual>,
    /// Each step is no worse than the previous one, or both sit at the rounding floor.
    pub monotone: bool,
    /// The last two orders agree to the floor while the residual stays large:
    /// the quadrature has converged to something other than the kernel.
    pub plateau: bool,
}

/// Residuals below this are treated as rounding noise when judging monotonicity.
pub const RESIDUAL_FLOOR: f64 = 1e-13;

pub fn factorization_ladder(
    factor: &KernelFactor,
    kernel: &RdmKernel,
    pairs: &[(Vec3, Vec3)],
    orders: &[usize],
) -> Result<FactorizationLadder, KernelError> {
    let steps = orders
        .iter()
        .map(|&o| factorization_residual(factor, kernel, pairs, o))
        .collect::<Result<Vec<_>, _>>()?;
    let monotone = steps.windows(2).all(|w| {
        w[1].max_residual <= w[0].max_residual
            || (w[0].max_residual <= RESIDUAL_FLOOR && w[1].max_residual <= RESIDUAL_FLOOR)
    });
    let plateau = match steps.as_slice() {
        [.., a, b] => {
            (a.max_residual - b.max_residual).abs() <= 1e-3 * b.max_residual
                && b.max_residual > 1e-6
        }
        _ => false,
    };
    Ok(FactorizationLadder {
        factor: factor.kind(),
        steps,
        monotone,
        plateau,
    })
}

/// Width threshold guaranteeing the occupation bound for a given `L^q` norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Admissibility {
    pub q: f64,
    /// Hölder conjugate, `1/p + 1/q = 1`.
    pub p: f64,
    pub norm_q: f64,
    pub n: f64,
    pub occ_max: f64,
    /// `(2p/pi) (N ||rho||_q / occ_max^2)^{2p/3}`.
    pub lambda_min: f64,
    /// Smallest width for which the Hölder estimate itself yields
    /// `n <= occ_max`: `(pi/(2p)) (N ||rho||_q / occ_max^2)^{2p/3}`.
    pub lambda_holder: f64,
}

pub fn admissible_lambda(
    n: f64,
    norm_q: f64,
    q: f64,
    occupation: OccupationMode,
) -> Result<Admissibility, KernelError> {
    if !(q.is_finite() && q > 1.0) {
        return Err(KernelError::InvalidParameter {
            name: "q",
            requirement: "finite and > 1 (Hölder conjugate undefined otherwise)",
            value: q,
        });
    }
    positive("N", n)?;
    positive("norm_q", norm_q)?;
    let p = q / (q - 1.0);
    let occ_max = occupation.max_occupation();
    let base = (n * norm_q / (occ_max * occ_max)).powf(2.0 * p / 3.0);
    Ok(Admissibility {
        q,
        p,
        norm_q,
        n,
        occ_max,
        lambda_min: 2.0 * p / PI * base,
        lambda_holder: PI / (2.0 * p) * base,
    })
}

impl Admissibility {
    /// Hölder estimate for the largest eigenvalue at width `lambda`:
    /// `n^2 <= N ||rho||_q (pi / (2 p lambda))^{3/(2p)}`. Returns the right-hand side.
    pub fn eigenvalue_bound_squared(&self, lambda: f64) -> f64 {
        self.n * self.norm_q * (PI / (2.0 * self.p * lambda)).powf(1.5 / self.p)
    }

    /// Bound on the largest eigenvalue itself.
    pub fn eigenvalue_bound(&self, lambda: f64) -> f64 {
        self.eigenvalue_bound_squared(lambda).sqrt()
    }

    pub fn admits(&self, lambda: f64) -> bool {
        lambda >= self.lambda_min
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{
        kappa_constant, kappa_gauge_quadratic, kappa_rigid_rotation, kappa_zero,
        make_exponential_density, make_gaussian_density,
    };
    use crate::Mat3;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian() -> DensityProfile {
        make_gaussian_density(1.0, 1.0, Vec3::zeros()).unwrap()
    }

    fn rotation() -> KappaField {
        kappa_rigid_rotation(Vec3::new(0.0, 0.0, 0.5)).unwrap()
    }

    fn random_pairs(seed: u64, count: usize, max_sep: f64) -> Vec<(Vec3, Vec3)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let r = Vec3::from_fn(|_, _| rng.random_range(-2.5..2.5));
                let d = loop {
                    let d = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                    if d.norm() <= 1.0 {
                        break d;
                    }
                };
                (r, r + d * max_sep)
            })
            .collect()
    }

    #[test]
    fn factor_normalization_on_the_diagonal() {
        let f = factor_g(&gaussian(), &kappa_zero(), 0.7).unwrap();
        let v = Vec3::new(0.2, 0.1, -0.3);
        assert_relative_eq!(
            f.bare(&v, &v).norm(),
            8f64.sqrt() * 0.7f64.powf(0.75) / PI.powf(0.75),
            max_relative = 1e-15
        );
        let g = f.bare(&Vec3::new(1.0, 0.0, 0.0), &v);
        assert!(g.im == 0.0 && g.re > 0.0);
    }

    #[test]
    fn h_phase_is_u_dot_kappa_of_v() {
        let kappa = rotation();
        let f = factor_h(&gaussian(), &kappa, 0.4).unwrap();
        let (u, v) = (Vec3::new(0.3, -0.2, 0.1), Vec3::new(0.5, 0.4, 0.0));
        let expected = u.dot(&kappa.eval(&v));
        assert_relative_eq!(f.bare(&u, &v).arg(), expected, epsilon = 1e-15);
        let g0 = factor_g(&gaussian(), &kappa_zero(), 0.4).unwrap();
        let h0 = factor_h(&gaussian(), &kappa_zero(), 0.4).unwrap();
        assert_eq!(g0.bare(&u, &v), h0.bare(&u, &v));
    }

    #[test]
    fn closed_forms_on_the_diagonal_and_without_current() {
        let rho = gaussian();
        let kappa = rotation();
        let r = Vec3::new(0.4, -0.3, 0.8);
        for k in [
            kernel_p(&rho, &kappa, 0.3).unwrap(),
            kernel_q(&rho, &kappa, 0.3).unwrap(),
            kernel_d(&rho, &kappa, 0.3, 0.5, 0.5).unwrap(),
        ] {
            let d = k.eval(&r, &r);
            assert_eq!(d.im, 0.0);
            assert_relative_eq!(d.re, rho.eval(&r), max_relative = 1e-15);
        }
        let s = Vec3::new(-0.1, 0.9, 0.2);
        let p0 = kernel_p(&rho, &kappa_zero(), 0.3).unwrap().eval(&r, &s);
        let q0 = kernel_q(&rho, &kappa_zero(), 0.3).unwrap().eval(&r, &s);
        assert_eq!(p0.im, 0.0);
        assert_relative_eq!(p0.re, q0.re, max_relative = 1e-15);
        assert_relative_eq!(
            p0.re,
            (rho.eval(&r) * rho.eval(&s)).sqrt() * (-0.3 * (r - s).norm_squared()).exp(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn theta_endpoints() {
        let rho = gaussian();
        let kappa = rotation();
        let (r, s) = (Vec3::new(0.4, -0.3, 0.8), Vec3::new(-0.1, 0.9, 0.2));
        let p = kernel_p(&rho, &kappa, 0.3).unwrap().eval(&r, &s);
        let d1 = kernel_d(&rho, &kappa, 0.3, 0.7, 1.0).unwrap().eval(&r, &s);
        assert_eq!(p, d1);
        assert!(kernel_d(&rho, &kappa, 0.3, 0.7, 1.5).is_err());
        assert!(kernel_d(&rho, &kappa, 0.3, 0.7, -0.1).is_err());
        assert!(kernel_p(&rho, &kappa, 0.0).is_err());
    }

    #[test]
    fn gauss_hermite_unit_normalization_of_factors() {
        let rule = GaussHermiteRule::new(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let kappa = rotation();
        for _ in 0..10 {
            let width = rng.random_range(0.05..3.0);
            let v = Vec3::from_fn(|_, _| rng.random_range(-2.0..2.0));
            for f in [
                factor_g(&gaussian(), &kappa, width).unwrap(),
                factor_h(&gaussian(), &kappa, width).unwrap(),
            ] {
                let norm = gauss_hermite_integral(
                    |u| {
                        C64::new(
                            f.bare(u, &v).norm_sqr() * (4.0 * width * (u - v).norm_squared()).exp(),
                            0.0,
                        )
                    },
                    &v,
                    4.0 * width,
                    &rule,
                );
                assert!((norm.re - 1.0).abs() < 1e-10, "{}", norm.re);
            }
        }
    }

    #[test]
    fn factorization_is_exact_without_current() {
        let rho = gaussian();
        let pairs = random_pairs(11, 16, 2.0);
        let g = factor_g(&rho, &kappa_zero(), 0.3).unwrap();
        let p = kernel_p(&rho, &kappa_zero(), 0.3).unwrap();
        let res = factorization_residual(&g, &p, &pairs, 16).unwrap();
        assert!(res.max_residual <= 1e-12, "{}", res.max_residual);
    }

    #[test]
    fn factorization_converges_for_rotation() {
        let rho = gaussian();
        let kappa = rotation();
        let pairs = random_pairs(12, 24, 2.0);
        let h = factor_h(&rho, &kappa, 0.3).unwrap();
        let q = kernel_q(&rho, &kappa, 0.3).unwrap();
        let ladder = factorization_ladder(&h, &q, &pairs, &[8, 16, 32]).unwrap();
        assert!(ladder.monotone);
        assert!(!ladder.plateau);
        assert!(ladder.steps[2].max_residual <= 1e-8);
        let g = factor_g(&rho, &kappa, 0.3).unwrap();
        let p = kernel_p(&rho, &kappa, 0.3).unwrap();
        assert!(
            factorization_residual(&g, &p, &pairs, 32)
                .unwrap()
                .max_residual
                <= 1e-8
        );
    }

    #[test]
    fn wrong_phase_sign_is_caught() {
        let rho = gaussian();
        // r.kappa vanishes for a pure rotation, so add a constant part to expose the P phase
        let kappa = kappa_rigid_rotation(Vec3::new(0.0, 0.0, 1.0))
            .unwrap()
            .add(&kappa_constant(Vec3::new(1.0, 0.5, 0.0)).unwrap());
        let pairs = random_pairs(13, 16, 2.0);
        let p = kernel_p(&rho, &kappa, 0.3).unwrap();
        let bad = factor_g(&rho, &kappa.negated(), 0.3).unwrap();
        let res = factorization_residual(&bad, &p, &pairs, 16).unwrap();
        // residual is relative to 1 + |K|, and |K| <= max rho here
        assert!(res.max_residual > 1e-2, "{}", res.max_residual);
        let q = kernel_q(&rho, &kappa, 0.3).unwrap();
        let bad_h = factor_h(&rho, &kappa.negated(), 0.3).unwrap();
        let ladder = factorization_ladder(&bad_h, &q, &pairs, &[16, 32]).unwrap();
        assert!(ladder.plateau);
        assert!(factorization_residual(&bad_h, &q, &pairs, 4).is_err());
    }

    #[test]
    fn admissibility_values() {
        let a = admissible_lambda(1.0, 1.0, 2.0, OccupationMode::Spatial).unwrap();
        assert_eq!(a.p, 2.0);
        assert_relative_eq!(
            a.lambda_min,
            4.0 / PI * 0.25f64.powf(4.0 / 3.0),
            max_relative = 1e-15
        );
        assert_relative_eq!(a.lambda_min, 0.200_522_662_996_299_6, max_relative = 1e-12);
        let a3 = admissible_lambda(1.0, 1.0, 3.0, OccupationMode::Spatial).unwrap();
        assert_relative_eq!(1.0 / a3.p + 1.0 / a3.q, 1.0, epsilon = 1e-14);
        let spin = admissible_lambda(1.0, 1.0, 2.0, OccupationMode::SpinResolved).unwrap();
        assert_relative_eq!(
            spin.lambda_min / a.lambda_min,
            4f64.powf(4.0 / 3.0),
            max_relative = 1e-14
        );
        assert!(admissible_lambda(1.0, 1.0, 1.0, OccupationMode::Spatial).is_err());
        assert!(admissible_lambda(1.0, 0.0, 2.0, OccupationMode::Spatial).is_err());
    }

    #[test]
    fn holder_threshold_gives_the_occupation_exactly() {
        let a = admissible_lambda(2.0, 0.5, 2.0, OccupationMode::Spatial).unwrap();
        assert_relative_eq!(
            a.eigenvalue_bound(a.lambda_holder),
            2.0,
            max_relative = 1e-14
        );
        let a = admissible_lambda(2.0, 0.5, 3.0, OccupationMode::SpinResolved).unwrap();
        assert_relative_eq!(
            a.eigenvalue_bound(a.lambda_holder),
            1.0,
            max_relative = 1e-14
        );
    }

    #[test]
    fn gram_matrices_are_positive_semidefinite() {
        use ndarray::Array2;
        use ndarray_linalg::{EigValsh, UPLO};
        let rho = make_exponential_density(1.0, 1.0, Vec3::new(0.05, 0.0, 0.0)).unwrap();
        let a = Mat3::new(0.2, 0.1, 0.0, 0.1, -0.3, 0.0, 0.0, 0.0, 0.1);
        let kappa = rotation().add(&kappa_gauge_quadratic(a).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..60)
            .map(|_| Vec3::from_fn(|_, _| rng.random_range(-2.0..2.0)))
            .collect();
        for k in [
            kernel_p(&rho, &kappa, 0.2).unwrap(),
            kernel_q(&rho, &kappa, 0.2).unwrap(),
            kernel_d(&rho, &kappa, 0.2, 0.4, 0.3).unwrap(),
        ] {
            let m =
                Array2::from_shape_fn((pts.len(), pts.len()), |(i, j)| k.eval(&pts[i], &pts[j]));
            let ev = m.eigvalsh(UPLO::Lower).unwrap();
            let max = ev.iter().copied().fold(f64::MIN, f64::max);
            let min = ev.iter().copied().fold(f64::MAX, f64::min);
            assert!(min >= -1e-10 * max, "{} {}", k.label(), min);
        }
    }

    proptest! {
        #[test]
        fn kernels_are_hermitian(
            rx in -3.0f64..3.0, ry in -3.0f64..3.0, rz in -3.0f64..3.0,
            sx in -3.0f64..3.0, sy in -3.0f64..3.0, sz in -3.0f64..3.0,
            lambda in 0.01f64..5.0, mu in 0.01f64..5.0, theta in 0.0f64..=1.0,
            wz in -2.0f64..2.0,
        ) {
            let rho = gaussian();
            let kappa = kappa_rigid_rotation(Vec3::new(0.1, -0.2, wz)).unwrap();
            let (r, s) = (Vec3::new(rx, ry, rz), Vec3::new(sx, sy, sz));
            let k = kernel_d(&rho, &kappa, lambda, mu, theta).unwrap();
            let a = k.eval(&r, &s);
            let b = k.eval(&s, &r).conj();
            prop_assert!((a - b).norm() <= 1e-15 * (1.0 + a.norm()));
            prop_assert!(a.norm() <= (rho.eval(&r) * rho.eval(&s)).sqrt() * (1.0 + 1e-15));
        }
    }
}
