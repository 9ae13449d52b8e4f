//! Densities, currents and kinetic-energy densities of the kernels, and the
//! functionals and bounds built from them.
//!
//! Derivatives at the diagonal follow `tau(r) = 1/2 sum_a d^2 D / dr_a ds_a |_{s=r}`
//! and `j(r) = Re(-i grad_r D(r, s)) |_{s=r}`.

use std::collections::BTreeMap;
use std::ops::Add;

use serde::Serialize;

use crate::fields::{DensityProfile, KappaField, NormEstimate};
use crate::kernels::{Admissibility, RdmKernel};
use crate::quadrature::{richardson_table, CompactBox, GridSpec, QuadratureError, Rule};
use crate::{Mat3, Vec3};

/// Densities below this are treated as zero in denominators.
pub const DENSITY_FLOOR: f64 = 1e-30;

/// Radius of the ball around a density cusp left out of integrals.
pub const CUSP_EXCLUSION: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObservableError {
    #[error("density vanishes at {r:?} while its gradient does not")]
    Singular { r: [f64; 3] },
    #[error("density gradient undefined at the cusp point {r:?}")]
    Cusp { r: [f64; 3] },
    #[error("finite-difference step must be finite and > 0, got {0}")]
    Step(f64),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// `D(r, r)`, real by construction.
pub fn diag_density(kernel: &RdmKernel, r: &Vec3) -> f64 {
    kernel.eval(r, r).re
}

/// Two-step finite-difference estimate and its Richardson limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdEstimate<T> {
    pub step: f64,
    /// Central difference with step `h`.
    pub coarse: T,
    /// Central difference with step `h/2`.
    pub fine: T,
    /// `(4 fine - coarse) / 3`.
    pub value: T,
    /// The two steps disagree beyond what an O(h^2) error allows.
    pub nonsmooth: bool,
}

fn check_step(h: f64) -> Result<(), ObservableError> {
    if h.is_finite() && h > 0.0 {
        Ok(())
    } else {
        Err(ObservableError::Step(h))
    }
}

/// Relative disagreement between `h` and `h/2` above which a point is flagged.
const SMOOTHNESS_TOL: f64 = 1e-3;

fn current_central(kernel: &RdmKernel, r: &Vec3, h: f64) -> Vec3 {
    let p0 = kernel.point(r);
    Vec3::from_fn(|a, _| {
        let mut e = Vec3::zeros();
        e[a] = h;
        let plus = kernel.eval_points(&kernel.point(&(r + e)), &p0);
        let minus = kernel.eval_points(&kernel.point(&(r - e)), &p0);
        // Re(-i z) = Im(z)
        (plus - minus).im / (2.0 * h)
    })
}

/// Current of a kernel at `r` by central differences in the first argument.
pub fn extract_current_fd(
    kernel: &RdmKernel,
    r: &Vec3,
    h: f64,
) -> Result<FdEstimate<Vec3>, ObservableError> {
    check_step(h)?;
    let coarse = current_central(kernel, r, h);
    let fine = current_central(kernel, r, 0.5 * h);
    let value = (fine * 4.0 - coarse) / 3.0;
    let rho = kernel.rho().eval(r);
    let scale =
        fine.norm() + rho * (1.0 + kernel.kappa().eval(r).norm() + r.norm()) + DENSITY_FLOOR;
    Ok(FdEstimate {
        step: h,
        coarse,
        fine,
        value,
        nonsmooth: (coarse - fine).norm() > SMOOTHNESS_TOL * scale,
    })
}

/// `(r . d_a kappa)_a = sum_b r_b d kappa_b / d r_a`.
fn r_dot_jacobian(j: &Mat3, r: &Vec3) -> Vec3 {
    j * r
}

/// Current of `P_lambda`: `rho (kappa + r . d_a kappa)`.
pub fn current_p_analytic(rho: &DensityProfile, kappa: &KappaField, r: &Vec3) -> Vec3 {
    (kappa.eval(r) + r_dot_jacobian(&kappa.jacobian(r), r)) * rho.eval(r)
}

/// Current of `Q_mu`: `-rho r . d_a kappa`.
pub fn current_q_analytic(rho: &DensityProfile, kappa: &KappaField, r: &Vec3) -> Vec3 {
    -r_dot_jacobian(&kappa.jacobian(r), r) * rho.eval(r)
}

/// `|grad rho|^2 / (8 rho)` with the floor convention.
pub fn weizsacker_density(rho: &DensityProfile, r: &Vec3) -> Result<f64, ObservableError> {
    let g = rho
        .grad(r)
        .ok_or(ObservableError::Cusp { r: (*r).into() })?;
    let d = rho.eval(r);
    if d < DENSITY_FLOOR {
        if g.norm_squared() == 0.0 || g.norm_squared() < DENSITY_FLOOR {
            return Ok(0.0);
        }
        return Err(ObservableError::Singular { r: (*r).into() });
    }
    Ok(g.norm_squared() / (8.0 * d))
}

/// Pointwise kinetic-energy densities of `P_lambda`, `Q_mu` and their combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KineticDensity {
    pub weizsacker: f64,
    pub tau_p: f64,
    pub tau_q: f64,
}

impl KineticDensity {
    pub fn tau_d(&self, theta: f64) -> f64 {
        theta * self.tau_p + (1.0 - theta) * self.tau_q
    }
}

/// Evaluates
///
/// ```text
/// tau_P = |grad rho|^2/(8 rho) + 1/2 |grad(r.kappa)|^2 rho + 3 lambda rho
/// tau_Q = |grad rho|^2/(8 rho) + 1/2 (sum_a (r.d_a kappa)^2 + |J|^2/(8 mu)) rho + 3 mu rho
/// ```
///
/// The width terms carry one `lambda` (`mu`) per Cartesian direction.
pub fn kinetic_density(
    rho: &DensityProfile,
    kappa: &KappaField,
    lambda: f64,
    mu: f64,
    r: &Vec3,
) -> Result<KineticDensity, ObservableError> {
    let weizsacker = weizsacker_density(rho, r)?;
    let d = rho.eval(r);
    let k = kappa.eval(r);
    let j = kappa.jacobian(r);
    let c = r_dot_jacobian(&j, r);
    let grad_phase = k + c;
    let tau_p = weizsacker + 0.5 * grad_phase.norm_squared() * d + 3.0 * lambda * d;
    let tau_q =
        weizsacker + 0.5 * (c.norm_squared() + j.norm_squared() / (8.0 * mu)) * d + 3.0 * mu * d;
    Ok(KineticDensity {
        weizsacker,
        tau_p,
        tau_q,
    })
}

pub fn tau_p(
    rho: &DensityProfile,
    kappa: &KappaField,
    lambda: f64,
    r: &Vec3,
) -> Result<f64, ObservableError> {
    Ok(kinetic_density(rho, kappa, lambda, 1.0, r)?.tau_p)
}

pub fn tau_q(
    rho: &DensityProfile,
    kappa: &KappaField,
    mu: f64,
    r: &Vec3,
) -> Result<f64, ObservableError> {
    Ok(kinetic_density(rho, kappa, 1.0, mu, r)?.tau_q)
}

/// `tau_D` for `theta = 1/2`.
pub fn tau_d(
    rho: &DensityProfile,
    kappa: &KappaField,
    lambda: f64,
    mu: f64,
    r: &Vec3,
) -> Result<f64, ObservableError> {
    Ok(kinetic_density(rho, kappa, lambda, mu, r)?.tau_d(0.5))
}

/// Kinetic-energy density of an [`RdmKernel`] from its own parameters.
pub fn tau_kernel(kernel: &RdmKernel, r: &Vec3) -> Result<f64, ObservableError> {
    let lambda = if kernel.lambda().is_nan() {
        1.0
    } else {
        kernel.lambda()
    };
    let mu = if kernel.mu().is_nan() {
        1.0
    } else {
        kernel.mu()
    };
    Ok(kinetic_density(kernel.rho(), kernel.kappa(), lambda, mu, r)?.tau_d(kernel.theta()))
}

fn tau_central(kernel: &RdmKernel, r: &Vec3, h: f64) -> f64 {
    let mut acc = 0.0;
    for a in 0..3 {
        let mut e = Vec3::zeros();
        e[a] = h;
        let (rp, rm) = (kernel.point(&(r + e)), kernel.point(&(r - e)));
        let mixed = kernel.eval_points(&rp, &rp)
            - kernel.eval_points(&rp, &rm)
            - kernel.eval_points(&rm, &rp)
            + kernel.eval_points(&rm, &rm);
        acc += mixed.re / (4.0 * h * h);
    }
    0.5 * acc
}

/// `1/2 sum_a d^2 D / dr_a ds_a` at `s = r` by central mixed differences.
pub fn tau_fd(kernel: &RdmKernel, r: &Vec3, h: f64) -> Result<FdEstimate<f64>, ObservableError> {
    check_step(h)?;
    let coarse = tau_central(kernel, r, h);
    let fine = tau_central(kernel, r, 0.5 * h);
    let value = (4.0 * fine - coarse) / 3.0;
    Ok(FdEstimate {
        step: h,
        coarse,
        fine,
        value,
        nonsmooth: (coarse - fine).abs() > SMOOTHNESS_TOL * (fine.abs() + DENSITY_FLOOR),
    })
}

/// Grid, rule and Richardson orders used for every integral of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegrationPlan {
    pub grid: GridSpec,
    /// Error orders removed by Richardson extrapolation over halved grids.
    pub orders: Vec<u32>,
}

impl IntegrationPlan {
    pub fn new(grid: GridSpec, orders: Vec<u32>) -> Self {
        Self { grid, orders }
    }

    /// Trapezoid without extrapolation for smooth densities; for a cusp, a
    /// midpoint grid with an even cell count (the cusp never lands on a node)
    /// extrapolated over the `h^4`, `h^6` point-singularity terms.
    pub fn for_density(
        rho: &DensityProfile,
        bx: &CompactBox,
        counts: usize,
    ) -> Result<Self, QuadratureError> {
        match rho.cusp() {
            None => Ok(Self::new(
                GridSpec::over_box(bx, [counts; 3], Rule::Trapezoid)?,
                Vec::new(),
            )),
            Some(_) => {
                let even = counts + counts % 2;
                Ok(Self::new(
                    GridSpec::over_box(bx, [even; 3], Rule::Midpoint)?,
                    vec![4, 6],
                ))
            }
        }
    }

    pub fn grids(&self) -> Vec<GridSpec> {
        let mut out = vec![self.grid.clone()];
        for _ in &self.orders {
            let next = out[out.len() - 1].refined();
            out.push(next);
        }
        out
    }

    /// Integrates a sampled integrand, keeping track of skipped points.
    pub fn integrate(&self, f: impl Fn(&Vec3) -> Sample + Sync) -> Integral {
        let mut levels = Vec::new();
        let mut last = Tally::default();
        for g in self.grids() {
            last = g.reduce(|r, w| match f(r) {
                Sample::Value(v) => Tally {
                    sum: w * v,
                    ..Tally::default()
                },
                Sample::BelowFloor => Tally {
                    dropped: 1,
                    ..Tally::default()
                },
                Sample::Excluded => Tally {
                    excluded: 1,
                    ..Tally::default()
                },
            });
            levels.push(last.sum);
        }
        Integral {
            value: richardson_table(&levels, &self.orders),
            levels,
            dropped: last.dropped,
            excluded: last.excluded,
        }
    }

    pub fn integrate_value(&self, f: impl Fn(&Vec3) -> f64 + Sync) -> f64 {
        self.integrate(|r| Sample::Value(f(r))).value
    }
}

/// One integrand evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sample {
    Value(f64),
    /// Density under [`DENSITY_FLOOR`]; contributes zero.
    BelowFloor,
    /// Inside the cusp exclusion ball.
    Excluded,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Tally {
    sum: f64,
    dropped: usize,
    excluded: usize,
}

impl Add for Tally {
    type Output = Tally;
    fn add(self, o: Tally) -> Tally {
        Tally {
            sum: self.sum + o.sum,
            dropped: self.dropped + o.dropped,
            excluded: self.excluded + o.excluded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Integral {
    pub value: f64,
    pub levels: Vec<f64>,
    /// Nodes under the density floor on the finest level.
    pub dropped: usize,
    /// Nodes inside the cusp exclusion ball on the finest level.
    pub excluded: usize,
}

fn guarded(rho: &DensityProfile, r: &Vec3, radius: f64, f: impl FnOnce(f64) -> f64) -> Sample {
    if rho.near_cusp(r, radius) {
        return Sample::Excluded;
    }
    let d = rho.eval(r);
    if d < DENSITY_FLOOR {
        return Sample::BelowFloor;
    }
    Sample::Value(f(d))
}

/// `T_W = int |grad rho|^2 / (8 rho)`.
pub fn functional_t_w(rho: &DensityProfile, plan: &IntegrationPlan) -> Integral {
    plan.integrate(|r| {
        if rho.near_cusp(r, CUSP_EXCLUSION) {
            return Sample::Excluded;
        }
        match weizsacker_density(rho, r) {
            Ok(_) if rho.eval(r) < DENSITY_FLOOR => Sample::BelowFloor,
            Ok(v) => Sample::Value(v),
            Err(_) => Sample::Excluded,
        }
    })
}

/// `T_p = int |j_p|^2 / (2 rho) = 1/8 int rho |kappa|^2`.
pub fn functional_t_p(
    rho: &DensityProfile,
    kappa: &KappaField,
    plan: &IntegrationPlan,
) -> Integral {
    plan.integrate(|r| {
        guarded(rho, r, CUSP_EXCLUSION, |d| {
            0.125 * d * kappa.eval(r).norm_squared()
        })
    })
}

/// Components `T_ab = int (1 + r^2) rho (d kappa_b / d r_a)^2` and their sum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorFunctional {
    pub components: [[f64; 3]; 3],
    pub sum: f64,
}

pub fn functional_t_ab(
    rho: &DensityProfile,
    kappa: &KappaField,
    plan: &IntegrationPlan,
) -> TensorFunctional {
    let mut components = [[0.0; 3]; 3];
    for (a, row) in components.iter_mut().enumerate() {
        for (b, c) in row.iter_mut().enumerate() {
            *c = plan
                .integrate(|r| {
                    guarded(rho, r, CUSP_EXCLUSION, |d| {
                        (1.0 + r.norm_squared()) * d * kappa.jacobian(r)[(a, b)].powi(2)
                    })
                })
                .value;
        }
    }
    let sum = plan
        .integrate(|r| {
            guarded(rho, r, CUSP_EXCLUSION, |d| {
                (1.0 + r.norm_squared()) * d * kappa.jacobian(r).norm_squared()
            })
        })
        .value;
    TensorFunctional { components, sum }
}

/// `int (1 + r^2) rho |nu|^2` with `nu = curl(kappa) / 2`.
pub fn vorticity_moment(rho: &DensityProfile, kappa: &KappaField, plan: &IntegrationPlan) -> f64 {
    plan.integrate(|r| {
        guarded(rho, r, CUSP_EXCLUSION, |d| {
            (1.0 + r.norm_squared()) * d * kappa.vorticity(r).norm_squared()
        })
    })
    .value
}

/// `int rho r^2 |J|^2` and `int rho |J|^2`.
fn jacobian_moments(
    rho: &DensityProfile,
    kappa: &KappaField,
    plan: &IntegrationPlan,
) -> (f64, f64) {
    let r2 = plan.integrate(|r| {
        guarded(rho, r, CUSP_EXCLUSION, |d| {
            d * r.norm_squared() * kappa.jacobian(r).norm_squared()
        })
    });
    let r0 = plan.integrate(|r| {
        guarded(rho, r, CUSP_EXCLUSION, |d| {
            d * kappa.jacobian(r).norm_squared()
        })
    });
    (r2.value, r0.value)
}

/// Inputs shared by the upper bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundInputs {
    pub t_w: f64,
    pub t_p: f64,
    pub n: f64,
    pub lambda: f64,
    pub mu: f64,
    /// `int rho r^2 |J|^2`.
    pub jac_r2: f64,
    /// `int rho |J|^2`.
    pub jac_0: f64,
}

/// `T_W + 4 T_p + (lambda + mu) N / 2 + int rho (3/4 r^2 + 1/(32 mu)) |J|^2`.
pub fn upper_bound(b: &BoundInputs) -> f64 {
    b.t_w + 4.0 * b.t_p + 0.5 * (b.lambda + b.mu) * b.n + 0.75 * b.jac_r2 + b.jac_0 / (32.0 * b.mu)
}

/// [`upper_bound`] with the width term that three Gaussian directions
/// actually contribute, `3/2 (lambda + mu) N`.
pub fn upper_bound_width_corrected(b: &BoundInputs) -> f64 {
    upper_bound(b) + (b.lambda + b.mu) * b.n
}

/// Lower `T_W + T_p` and the upper value with coefficients
/// `(lambda + mu) N`, `3/2 r^2`, `1/(16 mu)`.
pub fn sandwich(b: &BoundInputs) -> (f64, f64) {
    let lower = b.t_w + b.t_p;
    let upper =
        b.t_w + 4.0 * b.t_p + (b.lambda + b.mu) * b.n + 1.5 * b.jac_r2 + b.jac_0 / (16.0 * b.mu);
    (lower, upper)
}

/// Parameters of one functional evaluation.
#[derive(Debug, Clone)]
pub struct FunctionalInputs<'a> {
    pub rho: &'a DensityProfile,
    pub kappa: &'a KappaField,
    pub lambda: f64,
    pub mu: f64,
    pub theta: f64,
    pub admissibility: Vec<Admissibility>,
    pub norms: Vec<NormEstimate>,
    pub occ_max: f64,
    /// Step for the finite-difference kinetic-energy integral; `None` skips it.
    pub fd_step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunctionalReport {
    pub n: f64,
    pub norms: Vec<NormEstimate>,
    pub t_w: f64,
    pub t_p: f64,
    pub t_ab: TensorFunctional,
    pub vorticity_moment: f64,
    pub admissibility: Vec<Admissibility>,
    pub lambda: f64,
    pub mu: f64,
    pub theta: f64,
    pub tau_integral: f64,
    pub tau_integral_fd: Option<f64>,
    pub upper_bound: f64,
    pub upper_bound_width_corrected: f64,
    pub sandwich_lower: f64,
    pub sandwich_upper: f64,
    pub occ_max: f64,
    pub dropped_points: usize,
    pub excluded_points: usize,
    pub plan: IntegrationPlan,
}

pub fn functional_report(inp: &FunctionalInputs<'_>, plan: &IntegrationPlan) -> FunctionalReport {
    let (rho, kappa) = (inp.rho, inp.kappa);
    let n = plan.integrate(|r| guarded(rho, r, 0.0, |d| d)).value;
    let t_w = functional_t_w(rho, plan);
    let t_p = functional_t_p(rho, kappa, plan).value;
    let t_ab = functional_t_ab(rho, kappa, plan);
    let vort = vorticity_moment(rho, kappa, plan);
    let tau = plan.integrate(|r| {
        if rho.near_cusp(r, CUSP_EXCLUSION) {
            return Sample::Excluded;
        }
        match kinetic_density(rho, kappa, inp.lambda, inp.mu, r) {
            Ok(k) => Sample::Value(k.tau_d(inp.theta)),
            Err(_) => Sample::BelowFloor,
        }
    });
    let tau_fd = inp.fd_step.map(|h| {
        let kernel = crate::kernels::kernel_d(rho, kappa, inp.lambda, inp.mu, inp.theta)
            .expect("validated by caller");
        // keep the whole stencil clear of the cusp
        let radius = CUSP_EXCLUSION.max(4.0 * h);
        plan.integrate(|r| {
            if rho.near_cusp(r, radius) {
                Sample::Excluded
            } else {
                tau_fd(&kernel, r, h)
                    .map(|e| Sample::Value(e.value))
                    .unwrap_or(Sample::Excluded)
            }
        })
        .value
    });
    let (jac_r2, jac_0) = jacobian_moments(rho, kappa, plan);
    let b = BoundInputs {
        t_w: t_w.value,
        t_p,
        n,
        lambda: inp.lambda,
        mu: inp.mu,
        jac_r2,
        jac_0,
    };
    let (sandwich_lower, sandwich_upper) = sandwich(&b);
    FunctionalReport {
        n,
        norms: inp.norms.clone(),
        t_w: t_w.value,
        t_p,
        t_ab,
        vorticity_moment: vort,
        admissibility: inp.admissibility.clone(),
        lambda: inp.lambda,
        mu: inp.mu,
        theta: inp.theta,
        tau_integral: tau.value,
        tau_integral_fd: tau_fd,
        upper_bound: upper_bound(&b),
        upper_bound_width_corrected: upper_bound_width_corrected(&b),
        sandwich_lower,
        sandwich_upper,
        occ_max: inp.occ_max,
        dropped_points: t_w.dropped.max(tau.dropped),
        excluded_points: t_w.excluded.max(tau.excluded),
        plan: plan.clone(),
    }
}

/// Formats `q` for flat keys: `2`, `3`, `1.5`.
pub fn q_key(q: f64) -> String {
    format!("{q}")
}

impl FunctionalReport {
    /// Flat key/value view used in the JSON report.
    pub fn flat(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("N".to_string(), self.n);
        for nrm in &self.norms {
            m.insert(format!("norm_q.{}", q_key(nrm.q)), nrm.value);
        }
        m.insert("T_W".to_string(), self.t_w);
        m.insert("T_p".to_string(), self.t_p);
        m.insert("T_ab.sum".to_string(), self.t_ab.sum);
        let axes = ["x", "y", "z"];
        for a in 0..3 {
            for b in 0..3 {
                m.insert(
                    format!("T_ab.{}{}", axes[a], axes[b]),
                    self.t_ab.components[a][b],
                );
            }
        }
        m.insert("vorticity_moment".to_string(), self.vorticity_moment);
        for adm in &self.admissibility {
            m.insert(format!("lambda_min.{}", q_key(adm.q)), adm.lambda_min);
            m.insert(format!("lambda_holder.{}", q_key(adm.q)), adm.lambda_holder);
        }
        m.insert("lambda".to_string(), self.lambda);
        m.insert("mu".to_string(), self.mu);
        m.insert("theta".to_string(), self.theta);
        m.insert("tau_D_integral.analytic".to_string(), self.tau_integral);
        if let Some(fd) = self.tau_integral_fd {
            m.insert("tau_D_integral.fd".to_string(), fd);
        }
        m.insert("bound.upper".to_string(), self.upper_bound);
        m.insert(
            "bound.upper_width_corrected".to_string(),
            self.upper_bound_width_corrected,
        );
        m.insert("bound.sandwich_lower".to_string(), self.sandwich_lower);
        m.insert("bound.sandwich_upper".to_string(), self.sandwich_upper);
        m.insert("occ_max".to_string(), self.occ_max);
        m.insert(
            "quadrature.dropped_points".to_string(),
            self.dropped_points as f64,
        );
        m.insert(
            "quadrature.excluded_points".to_string(),
            self.excluded_points as f64,
        );
        m.insert("quadrature.nodes".to_string(), self.plan.grid.len() as f64);
        m.insert(
            "quadrature.levels".to_string(),
            (self.plan.orders.len() + 1) as f64,
        );
        m
    }
}

/// Integral of `f` over boxes of growing size around `center`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxSequence {
    pub half_widths: Vec<f64>,
    pub values: Vec<f64>,
    /// Relative change between the last two boxes is below `tol`.
    pub converged: bool,
    pub tol: f64,
}

/// Local integrals over `[c - s, c + s]^3` for each `s`, at fixed spacing.
pub fn expanding_boxes(
    f: impl Fn(&Vec3) -> f64 + Sync,
    center: &Vec3,
    half_widths: &[f64],
    spacing: f64,
    tol: f64,
) -> Result<BoxSequence, QuadratureError> {
    let mut values = Vec::with_capacity(half_widths.len());
    for &s in half_widths {
        let bx = CompactBox::cube(*center, s)?;
        let cells = ((2.0 * s / spacing).round() as usize).max(2);
        let grid = GridSpec::over_box(&bx, [cells; 3], Rule::Midpoint)?;
        values.push(grid.reduce(|r, w| w * f(r)));
    }
    let converged = match values.as_slice() {
        [.., a, b] => (b - a).abs() <= tol * b.abs().max(f64::MIN_POSITIVE),
        _ => false,
    };
    Ok(BoxSequence {
        half_widths: half_widths.to_vec(),
        values,
        converged,
        tol,
    })
}

/// Grid comparison of an extracted current field with a target field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldComparison {
    /// `sqrt(sum_i w_i |a(r_i) - b(r_i)|^2)`.
    pub error_l2: f64,
    pub reference_l2: f64,
    pub relative: f64,
    pub nonsmooth_points: usize,
    pub skipped_points: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct PairTally {
    err: f64,
    reference: f64,
    flagged: usize,
    skipped: usize,
}

impl Add for PairTally {
    type Output = PairTally;
    fn add(self, o: PairTally) -> PairTally {
        PairTally {
            err: self.err + o.err,
            reference: self.reference + o.reference,
            flagged: self.flagged + o.flagged,
            skipped: self.skipped + o.skipped,
        }
    }
}

/// Compares the finite-difference current of `kernel` with `target` on `grid`,
/// leaving out nodes for which `skip` holds.
pub fn compare_current(
    kernel: &RdmKernel,
    grid: &GridSpec,
    h: f64,
    target: impl Fn(&Vec3) -> Vec3 + Sync,
    skip: impl Fn(&Vec3) -> bool + Sync,
) -> Result<FieldComparison, ObservableError> {
    check_step(h)?;
    let t = grid.reduce(|r, w| {
        if skip(r) {
            return PairTally {
                skipped: 1,
                ..PairTally::default()
            };
        }
        let est = extract_current_fd(kernel, r, h).expect("step checked");
        let want = target(r);
        PairTally {
            err: w * (est.value - want).norm_squared(),
            reference: w * want.norm_squared(),
            flagged: est.nonsmooth as usize,
            skipped: 0,
        }
    });
    let error_l2 = t.err.sqrt();
    let reference_l2 = t.reference.sqrt();
    Ok(FieldComparison {
        error_l2,
        reference_l2,
        relative: if reference_l2 > 0.0 {
            error_l2 / reference_l2
        } else {
            f64::INFINITY
        },
        nonsmooth_points: t.flagged,
        skipped_points: t.skipped,
    })
}
