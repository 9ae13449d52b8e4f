//! The five run commands. Each command is a sequence of check groups; every
//! group is public so test suites can run them in isolation.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ConfigError, RunConfig, WidthSetting};
use crate::export;
use crate::fields::{
    eval_jp, lp_norm, sample_scalar, sample_vector, DensityProfile, KappaField, NormEstimate,
};
use crate::kernels::{
    admissible_lambda, factor_g, factor_h, factorization_ladder, kernel_d, kernel_p, kernel_q,
    Admissibility, KernelError, OccupationMode, RdmKernel,
};
use crate::measure::{self, AveragingSettings, ConvergenceTable, MeasureError};
use crate::observables::{
    self, compare_current, current_p_analytic, current_q_analytic, expanding_boxes,
    functional_report, kinetic_density, FunctionalInputs, FunctionalReport, IntegrationPlan,
    ObservableError,
};
use crate::quadrature::{GridSpec, QuadratureError, Rule};
use crate::report::{Check, RunReport};
use crate::spectral::{
    self, bound_width, discretize, eigen_dense, EigenBound, SpectralError, SpectrumTolerances,
};
use crate::Vec3;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Observable(#[from] ObservableError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Construct,
    Verify,
    Spectrum,
    Functionals,
    Convergence,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Construct => "construct",
            Command::Verify => "verify",
            Command::Spectrum => "spectrum",
            Command::Functionals => "functionals",
            Command::Convergence => "convergence",
        }
    }
}

/// Everything derived from a config before any check runs.
#[derive(Debug, Clone)]
pub struct Setup {
    pub config: RunConfig,
    pub rho: DensityProfile,
    pub kappa: KappaField,
    pub plan: IntegrationPlan,
    pub norms: Vec<NormEstimate>,
    pub admissibility: Vec<Admissibility>,
    /// Smallest threshold over the requested exponents; any one exponent suffices.
    pub lambda_threshold: f64,
    pub lambda: f64,
    pub mu: f64,
    pub theta: f64,
    pub occupation: OccupationMode,
    pub p: RdmKernel,
    pub q: RdmKernel,
    pub d: RdmKernel,
}

fn norm_on_plan(
    rho: &DensityProfile,
    q: f64,
    plan: &IntegrationPlan,
) -> Result<NormEstimate, RunError> {
    let base = lp_norm(rho, q, &plan.grid).map_err(|e| ConfigError::Invalid {
        key: "kernel.q".into(),
        message: e.to_string(),
    })?;
    let integral = plan.integrate_value(|r| rho.eval(r).powf(q));
    Ok(NormEstimate {
        value: integral.powf(1.0 / q),
        ..base
    })
}

impl Setup {
    pub fn from_config(config: &RunConfig) -> Result<Self, RunError> {
        config.validate()?;
        let rho = config.build_density()?;
        let kappa = config.build_kappa()?;
        let plan =
            IntegrationPlan::for_density(&rho, &config.integration_box(&rho), config.grid.counts)?;
        let occupation = config.occupation();
        let n = rho.declared_n();
        let mut norms = Vec::new();
        let mut admissibility = Vec::new();
        for &q in &config.kernel.q {
            let nrm = norm_on_plan(&rho, q, &plan)?;
            admissibility.push(admissible_lambda(n, nrm.value, q, occupation)?);
            norms.push(nrm);
        }
        let lambda_threshold = admissibility
            .iter()
            .map(|a| a.lambda_min)
            .fold(f64::INFINITY, f64::min);
        let width = |w: WidthSetting| match w {
            WidthSetting::Auto => lambda_threshold * config.kernel.lambda_scale,
            WidthSetting::Value(v) => v,
        };
        let lambda = width(config.kernel.lambda);
        let mu = width(config.kernel.mu);
        let theta = config.kernel.theta;
        let p = kernel_p(&rho, &kappa, lambda)?.with_occupation(occupation);
        let q = kernel_q(&rho, &kappa, mu)?.with_occupation(occupation);
        let d = kernel_d(&rho, &kappa, lambda, mu, theta)?.with_occupation(occupation);
        Ok(Self {
            config: config.clone(),
            rho,
            kappa,
            plan,
            norms,
            admissibility,
            lambda_threshold,
            lambda,
            mu,
            theta,
            occupation,
            p,
            q,
            d,
        })
    }

    pub fn kernels(&self) -> [(&'static str, &RdmKernel); 3] {
        [("P", &self.p), ("Q", &self.q), ("D", &self.d)]
    }

    pub fn sample_grid(&self) -> Result<GridSpec, RunError> {
        let bx = self.config.sample_box(&self.rho);
        Ok(GridSpec::over_box(
            &bx,
            [self.config.grid.sample_counts; 3],
            Rule::Trapezoid,
        )?)
    }

    pub fn spectral_grid(&self, counts: usize) -> Result<GridSpec, RunError> {
        let bx = self.config.spectral_box(&self.rho);
        Ok(GridSpec::over_box(&bx, [counts; 3], Rule::Trapezoid)?)
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.numerics.seed);
        rng.set_stream(stream);
        rng
    }

    /// Points in `center +- half` drawn from the run seed.
    pub fn random_points(&self, count: usize, half: f64, stream: u64) -> Vec<Vec3> {
        let mut rng = self.rng(stream);
        let c = self.rho.center();
        (0..count)
            .map(|_| c + Vec3::from_fn(|_, _| rng.random_range(-half..half)))
            .collect()
    }

    /// Pairs with `r` in `center +- 2.5` and `|r - s| <= 2`.
    pub fn random_pairs(&self, count: usize, stream: u64) -> Vec<(Vec3, Vec3)> {
        let mut rng = self.rng(stream);
        let c = self.rho.center();
        (0..count)
            .map(|_| {
                let r = c + Vec3::from_fn(|_, _| rng.random_range(-2.5..2.5));
                let d = loop {
                    let d = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                    if d.norm() <= 1.0 {
                        break d;
                    }
                };
                (r, r + d * 2.0)
            })
            .collect()
    }

    /// Distance from a cusp inside which finite-difference stencils are not used.
    pub fn stencil_clearance(&self) -> f64 {
        20.0 * self.config.numerics.fd_step
    }

    fn near_cusp(&self, r: &Vec3) -> bool {
        self.rho.near_cusp(r, self.stencil_clearance())
    }

    pub fn admissible(&self) -> bool {
        self.lambda >= self.lambda_threshold && self.mu >= self.lambda_threshold
    }
}

/// Output of one check group.
#[derive(Debug, Default)]
pub struct GroupResult {
    pub checks: Vec<Check>,
    pub values: Vec<(String, f64)>,
    pub sections: Vec<(String, serde_json::Value)>,
    pub tables: Vec<(String, ConvergenceTable)>,
    pub spectra: Vec<(String, Vec<f64>)>,
}

impl GroupResult {
    fn value(&mut self, key: impl Into<String>, v: f64) {
        self.values.push((key.into(), v));
    }

    fn section(&mut self, key: impl Into<String>, v: &impl Serialize) {
        self.sections.push((
            key.into(),
            serde_json::to_value(v).unwrap_or(serde_json::Value::Null),
        ));
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn value_of(&self, key: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn merge(&mut self, other: GroupResult) {
        self.checks.extend(other.checks);
        self.values.extend(other.values);
        self.sections.extend(other.sections);
        self.tables.extend(other.tables);
        self.spectra.extend(other.spectra);
    }
}

/// Admissibility arithmetic and the chosen widths.
pub fn admissibility_group(s: &Setup) -> GroupResult {
    let mut g = GroupResult::default();
    g.value("N.declared", s.rho.declared_n());
    for (adm, nrm) in s.admissibility.iter().zip(&s.norms) {
        let q = observables::q_key(adm.q);
        g.value(format!("norm_q.{q}"), nrm.value);
        g.value(format!("lambda_min.{q}"), adm.lambda_min);
        g.value(format!("lambda_holder.{q}"), adm.lambda_holder);
        g.checks.push(Check::within(
            format!("admissibility.conjugate.q{q}"),
            1.0 / adm.p + 1.0 / adm.q,
            1.0,
            1e-14,
        ));
        g.checks.push(Check::flag(
            format!("admissibility.positive.q{q}"),
            adm.lambda_min > 0.0,
        ));
        g.checks.push(Check::flag(
            format!("quadrature.norm_not_truncated.q{q}"),
            !nrm.truncated,
        ));
    }
    g.value("lambda", s.lambda);
    g.value("mu", s.mu);
    g.value("theta", s.theta);
    g.value("occ_max", s.occupation.max_occupation());
    g.value("lambda.threshold", s.lambda_threshold);
    g.value("lambda.admissible", if s.admissible() { 1.0 } else { 0.0 });
    g.section("admissibility", &s.admissibility);
    g.section("norms", &s.norms);
    g
}

/// Exact diagonal on the sample grid and trace against `N`.
pub fn diagonal_group(s: &Setup) -> Result<GroupResult, RunError> {
    let mut g = GroupResult::default();
    let grid = s.sample_grid()?;
    let rho_max = grid.reduce(|r, _| MaxF(s.rho.eval(r))).0;
    for (name, k) in s.kernels() {
        let worst = grid
            .reduce(|r, _| {
                let z = k.eval(r, r);
                MaxF((z.re - s.rho.eval(r)).abs().max(z.im.abs()))
            })
            .0;
        g.checks.push(Check::at_most(
            format!("diagonal.{name}"),
            worst / rho_max,
            0.0,
            1e-12,
        ));
    }
    let trace = s
        .plan
        .integrate_value(|r| observables::diag_density(&s.d, r));
    g.value("trace_via_diag", trace);
    g.checks.push(Check::within_rel(
        "diagonal.trace",
        trace,
        s.rho.declared_n(),
        1e-6,
    ));
    Ok(g)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct MaxF(f64);

impl std::ops::Add for MaxF {
    type Output = MaxF;
    fn add(self, o: MaxF) -> MaxF {
        MaxF(self.0.max(o.0))
    }
}

fn current_check(
    name: &str,
    cmp: &observables::FieldComparison,
    rel: f64,
    abs_when_zero: f64,
) -> Check {
    if cmp.reference_l2 > 0.0 {
        Check::at_most(name, cmp.relative, 0.0, rel)
    } else {
        Check::at_most(name, cmp.error_l2, 0.0, abs_when_zero)
    }
}

/// Finite-difference currents against the prescribed and analytic currents.
pub fn current_group(s: &Setup) -> Result<GroupResult, RunError> {
    let mut g = GroupResult::default();
    let grid = s.sample_grid()?;
    let h = s.config.numerics.fd_step;
    let (rho, kappa) = (&s.rho, &s.kappa);
    let skip = |r: &Vec3| s.near_cusp(r);

    let d_half = kernel_d(rho, kappa, s.lambda, s.mu, 0.5)?;
    let jp = compare_current(&d_half, &grid, h, |r| eval_jp(rho, kappa, r), skip)?;
    g.checks
        .push(current_check("current.d_half_vs_jp", &jp, 1e-6, 1e-10));
    let p = compare_current(&s.p, &grid, h, |r| current_p_analytic(rho, kappa, r), skip)?;
    g.checks
        .push(current_check("current.p_fd_vs_analytic", &p, 1e-6, 1e-8));
    let q = compare_current(&s.q, &grid, h, |r| current_q_analytic(rho, kappa, r), skip)?;
    g.checks
        .push(current_check("current.q_fd_vs_analytic", &q, 1e-6, 1e-8));
    let d = compare_current(
        &s.d,
        &grid,
        h,
        |r| {
            current_p_analytic(rho, kappa, r) * s.theta
                + current_q_analytic(rho, kappa, r) * (1.0 - s.theta)
        },
        skip,
    )?;
    g.checks
        .push(current_check("current.d_fd_vs_analytic", &d, 1e-6, 1e-8));
    let flagged =
        jp.nonsmooth_points + p.nonsmooth_points + q.nonsmooth_points + d.nonsmooth_points;
    g.checks.push(Check::at_most(
        "current.nonsmooth_points",
        flagged as f64,
        0.0,
        0.0,
    ));

    // the average of the two analytic currents is the prescribed one, pointwise
    let worst = grid
        .reduce(|r, _| {
            let avg = (current_p_analytic(rho, kappa, r) + current_q_analytic(rho, kappa, r)) * 0.5;
            MaxF((avg - eval_jp(rho, kappa, r)).norm())
        })
        .0;
    let scale = grid
        .reduce(|r, _| MaxF(rho.eval(r) * (kappa.eval(r).norm() + (kappa.jacobian(r) * r).norm())))
        .0;
    g.checks.push(Check::at_most(
        "current.analytic_average",
        worst,
        0.0,
        1e-12 * scale.max(f64::MIN_POSITIVE),
    ));

    // current of the configured theta against j_p, informational
    let mismatch = compare_current(&s.d, &grid, h, |r| eval_jp(rho, kappa, r), skip)?;
    g.value("current.theta_mismatch_l2", mismatch.error_l2);
    g.value("current.p_l2", p.reference_l2);
    g.value("current.p_fd_error_l2", p.error_l2);
    g.value("current.q_fd_error_l2", q.error_l2);
    g.value("current.d_half_relative_error", jp.relative);
    g.value("current.skipped_points", jp.skipped_points as f64);
    g.section(
        "current",
        &[("d_half_vs_jp", jp), ("p", p), ("q", q), ("d", d)],
    );
    Ok(g)
}

/// Gauss–Hermite evaluation of the factorized kernels.
pub fn factorization_group(s: &Setup) -> Result<GroupResult, RunError> {
    let mut g = GroupResult::default();
    let pairs = s.random_pairs(s.config.numerics.factorization_pairs, 1);
    let top = s.config.numerics.gh_order;
    let orders = [top / 4, top / 2, top];
    for (name, factor, kernel) in [
        ("g", factor_g(&s.rho, &s.kappa, s.lambda)?, &s.p),
        ("h", factor_h(&s.rho, &s.kappa, s.mu)?, &s.q),
    ] {
        let ladder = factorization_ladder(&factor, kernel, &pairs, &orders)?;
        let last = ladder.steps[ladder.steps.len() - 1].max_residual;
        g.value(format!("factorization.{name}.residual"), last);
        g.checks.push(Check::at_most(
            format!("factorization.{name}.residual"),
            last,
            0.0,
            1e-8,
        ));
        g.checks.push(Check::flag(
            format!("factorization.{name}.monotone"),
            ladder.monotone,
        ));
        g.checks.push(Check::flag(
            format!("factorization.{name}.no_plateau"),
            !ladder.plateau,
        ));
        g.section(format!("factorization.{name}"), &ladder);
    }
    Ok(g)
}

/// Dense (and optionally matrix-free) spectra of `P`, `Q` and `D`.
pub fn spectrum_group(s: &Setup) -> Result<GroupResult, RunError> {
    spectrum_group_on(s, s.config.grid.spectral_counts)
}

pub fn spectrum_group_on(s: &Setup, counts: usize) -> Result<GroupResult, RunError> {
    let mut g = GroupResult::default();
    let grid = s.spectral_grid(counts)?;
    let expect_fail = s.config.kernel.expect_occupation_failure;
    let mut dense_top = None;
    if s.config.probes.spectral_dense {
        for (name, k) in s.kernels() {
            let bounds: Vec<EigenBound> = s
                .admissibility
                .iter()
                .map(|a| EigenBound::new(a, bound_width(k)))
                .collect();
            let op = discretize(k, &grid, s.config.grid.dense_limit)?;
            let tol = SpectrumTolerances {
                trace_rel: s.config.grid.spectral_trace_rel,
                ..SpectrumTolerances::default()
            };
            let rep = eigen_dense(&op, &bounds, tol)?;
            for c in &rep.checks {
                let mut c = c.clone().prefixed(&format!("spectrum.{name}"));
                if expect_fail && c.name.ends_with(".occupation") {
                    c = c.expecting_failure();
                }
                g.checks.push(c);
            }
            g.value(
                format!("spectrum.{name}.max_eigenvalue"),
                rep.max_eigenvalue,
            );
            g.value(
                format!("spectrum.{name}.min_eigenvalue"),
                rep.min_eigenvalue,
            );
            g.value(format!("spectrum.{name}.trace"), rep.trace);
            for b in &rep.bounds {
                g.value(
                    format!("spectrum.{name}.eigen_bound.{}", observables::q_key(b.q)),
                    b.value,
                );
            }
            if name == "D" {
                dense_top = Some(rep.max_eigenvalue);
            }
            let mut summary = rep.clone();
            summary.eigenvalues.truncate(10);
            g.section(format!("spectrum.{name}"), &summary);
            g.spectra.push((name.to_string(), rep.eigenvalues));
        }
    }
    if s.config.probes.spectral_matfree {
        let n = &s.config.numerics;
        let pi = spectral::top_eigenvalue_matfree(&s.d, &grid, n.power_iters, n.power_tol);
        g.checks
            .push(Check::flag("spectrum.matfree.converged", pi.converged));
        let mut occ = Check::at_most(
            "spectrum.matfree.occupation",
            pi.value,
            s.occupation.max_occupation(),
            1e-4 * s.occupation.max_occupation(),
        );
        if expect_fail {
            occ = occ.expecting_failure();
        }
        g.checks.push(occ);
        if let Some(top) = dense_top {
            g.checks.push(Check::within_rel(
                "spectrum.matfree.matches_dense",
                pi.value,
                top,
                1e-6,
            ));
        }
        g.value("spectrum.matfree.top_eigenvalue", pi.value);
        g.section("spectrum.matfree", &pi);
    }
    Ok(g)
}

/// Pointwise kinetic-energy densities against mixed finite differences.
pub fn kinetic_group(s: &Setup) -> Result<GroupResult, RunError> {
    let mut g = GroupResult::default();
    let h = s.config.numerics.fd_step;
    let points: Vec<Vec3> = s
        .random_points(4 * s.config.numerics.tau_points, 2.0, 2)
        .into_iter()
        .filter(|r| !s.near_cusp(r))
        .take(s.config.numerics.tau_points)
        .collect();
    let mut worst_fd = 0.0f64;
    let mut worst_lin = 0.0f64;
    let mut worst_lower = f64::INFINITY;
    let mut flagged = 0usize;
    for r in &points {
        let kd = kinetic_density(&s.rho, &s.kappa, s.lambda, s.mu, r)?;
        let want = kd.tau_d(s.theta);
        let fd = observables::tau_fd(&s.d, r, h)?;
        flagged += fd.nonsmooth as usize;
        worst_fd = worst_fd.max((fd.value - want).abs() / want.abs());
        if s.theta == 0.5 {
            worst_lin =
                worst_lin.max((want - (0.5 * kd.tau_p + 0.5 * kd.tau_q)).abs() / want.abs());
        }
        let lower = kd.weizsacker + (s.theta * s.lambda + (1.0 - s.theta) * s.mu) * s.rho.eval(r);
        worst_lower = worst_lower.min(want - lower);
    }
    g.value("kinetic.points", points.len() as f64);
    g.value("kinetic.fd_max_relative_error", worst_fd);
    g.checks.push(Check::at_most(
        "kinetic.fd_vs_analytic",
        worst_fd,
        0.0,
        1e-6,
    ));
    g.checks.push(Check::at_most(
        "kinetic.linearity",
        worst_lin,
        0.0,
        4.0 * f64::EPSILON,
    ));
    g.checks.push(Check::at_least(
        "kinetic.pointwise_lower",
        worst_lower,
        0.0,
        0.0,
    ));
    g.checks.push(Check::at_most(
        "kinetic.nonsmooth_points",
        flagged as f64,
        0.0,
        0.0,
    ));
    Ok(g)
}

/// Functionals, the kinetic-energy integral and the bounds around it.
pub fn functional_group(s: &Setup) -> Result<(GroupResult, FunctionalReport), RunError> {
    let mut g = GroupResult::default();
    let inputs = FunctionalInputs {
        rho: &s.rho,
        kappa: &s.kappa,
        lambda: s.lambda,
        mu: s.mu,
        theta: s.theta,
        admissibility: s.admissibility.clone(),
        norms: s.norms.clone(),
        occ_max: s.occupation.max_occupation(),
        fd_step: Some(s.config.numerics.fd_step),
    };
    let rep = functional_report(&inputs, &s.plan);
    for (k, v) in rep.flat() {
        g.value(k, v);
    }
    for (name, v) in [
        ("T_W", rep.t_w),
        ("T_p", rep.t_p),
        ("T_ab.sum", rep.t_ab.sum),
        ("vorticity_moment", rep.vorticity_moment),
    ] {
        g.checks.push(Check::at_least(
            format!("functionals.{name}.nonnegative"),
            v,
            0.0,
            0.0,
        ));
    }
    g.checks.push(Check::at_most(
        "functionals.vorticity_vs_t_ab",
        rep.vorticity_moment,
        0.5 * rep.t_ab.sum,
        1e-12 * rep.t_ab.sum,
    ));
    g.checks.push(Check::within_rel(
        "functionals.N",
        rep.n,
        s.rho.declared_n(),
        1e-6,
    ));
    if let Some(fd) = rep.tau_integral_fd {
        g.checks.push(Check::within_rel(
            "kinetic.integral_fd_vs_analytic",
            fd,
            rep.tau_integral,
            1e-6,
        ));
    }
    let width = s.theta * s.lambda + (1.0 - s.theta) * s.mu;
    let stated = rep.t_w + 0.5 * (s.lambda + s.mu) * rep.n;
    g.value("kinetic.zero_current.stated_value", stated);
    g.value(
        "kinetic.zero_current.three_direction_value",
        rep.t_w + 3.0 * width * rep.n,
    );
    if s.config.kappa.preset == "zero" {
        g.checks.push(Check::within_rel(
            "kinetic.zero_current_identity",
            rep.tau_integral,
            rep.t_w + 3.0 * width * rep.n,
            1e-6,
        ));
        g.value("kinetic.zero_current.stated_gap", rep.tau_integral - stated);
    }

    // global convergence of the kinetic-energy integrand over growing boxes
    let bx = s.config.integration_box(&s.rho);
    let half = bx.half_widths().max();
    let spacing = s.plan.grid.spacing()[0];
    let tau = |r: &Vec3| {
        if s.rho.near_cusp(r, observables::CUSP_EXCLUSION) {
            0.0
        } else {
            kinetic_density(&s.rho, &s.kappa, s.lambda, s.mu, r).map_or(0.0, |k| k.tau_d(s.theta))
        }
    };
    let boxes = expanding_boxes(
        tau,
        &s.rho.center(),
        &[0.5 * half, 0.75 * half, half],
        spacing,
        1e-6,
    )?;
    g.checks
        .push(Check::flag("bounds.global_convergence", boxes.converged));
    g.section("bounds.box_sequence", &boxes);

    g.checks.push(Check::at_least(
        "bounds.lower",
        rep.tau_integral,
        rep.sandwich_lower,
        0.0,
    ));
    g.value("bound.lower_slack", rep.tau_integral - rep.sandwich_lower);
    g.value("bound.upper_slack", rep.upper_bound - rep.tau_integral);
    g.value(
        "bound.upper_width_corrected_slack",
        rep.upper_bound_width_corrected - rep.tau_integral,
    );
    g.value(
        "bound.sandwich_upper_slack",
        rep.sandwich_upper - rep.tau_integral,
    );
    if s.theta == 0.5 && boxes.converged {
        g.checks.push(Check::at_most(
            "bounds.upper_width_corrected",
            rep.tau_integral,
            rep.upper_bound_width_corrected,
            1e-9 * rep.tau_integral.abs(),
        ));
    }
    g.section("functionals", &rep);
    Ok((g, rep))
}

/// Offsets from the density center at which the averaging probes run.
const PROBE_OFFSETS: [[f64; 3]; 5] = [
    [1.0, 0.0, 0.0],
    [0.0, 0.5, 0.0],
    [-0.5, 0.5, 0.3],
    [0.2, -0.8, 0.4],
    [0.0, 0.0, -1.0],
];

pub fn probe_points(s: &Setup) -> Vec<Vec3> {
    let c = s.rho.center();
    (0..s.config.probes.measure_points)
        .map(|i| {
            let o = PROBE_OFFSETS[i % PROBE_OFFSETS.len()];
            let scale = 1.0 + (i / PROBE_OFFSETS.len()) as f64 * 0.25;
            c + Vec3::new(o[0], o[1], o[2]) * scale
        })
        .collect()
}

/// Local-averaging probes of the factorized diagonal and of the averaging operator.
pub fn measure_group(s: &Setup) -> Result<GroupResult, RunError> {
    let mut g = GroupResult::default();
    let pr = &s.config.probes;
    let eps = measure::dyadic_epsilons(pr.averaging_levels);
    let settings = AveragingSettings {
        subgrid: pr.averaging_subgrid,
        gh_order: pr.averaging_gh_order,
    };
    let factor = factor_g(&s.rho, &s.kappa, s.lambda)?;
    for (i, x) in probe_points(s).iter().enumerate() {
        let table = measure::diag_via_averaging(&factor, &factor, x, &eps, settings)?;
        let rho_x = s.rho.eval(x);
        g.checks.push(Check::flag(
            format!("measure.point{i}.strictly_decreasing"),
            table.strictly_decreasing,
        ));
        g.checks.push(Check::at_most(
            format!("measure.point{i}.final_error"),
            table.final_error(),
            0.0,
            1e-4 * rho_x,
        ));
        g.checks.push(Check::within_rel(
            format!("measure.point{i}.limit_is_density"),
            table.limit,
            rho_x,
            1e-8,
        ));
        g.value(format!("measure.point{i}.final_error"), table.final_error());
        g.tables.push((format!("point{i}"), table));
    }
    let m = pr.averaging_subgrid.max(2);
    for &e in &[1.0, 0.5, 0.125] {
        let avg: f64 = measure::local_average(|y| y[0] * y[0], &[0.0], e, m)?;
        let exact = e * e / 3.0;
        // the midpoint rule misses x^2 by exactly eps^2 / (3 m^2)
        let tol = exact / (m * m) as f64 * (1.0 + 1e-10);
        g.checks.push(Check::within(
            format!("measure.square_average.eps{e}"),
            avg,
            exact,
            tol,
        ));
    }
    let f = |y: &[f64]| (-(y[0] * y[0])).exp();
    let pts: Vec<Vec<f64>> = (0..9).map(|i| vec![-2.0 + 0.5 * i as f64]).collect();
    for k in 1..4 {
        let amp = 0.5f64.powi(k);
        let fk = move |y: &[f64]| f(y) + amp * (7.0 * y[0]).sin();
        let c = measure::smoothing_check(fk, f, &pts, 0.3, 32)?;
        g.checks.push(Check::at_most(
            format!("measure.smoothing.k{k}"),
            c.sup_difference,
            c.bound,
            1e-12 * c.bound,
        ));
    }
    Ok(g)
}

fn log_ratio_orders(steps: &[f64], errors: &[f64]) -> Vec<f64> {
    steps
        .windows(2)
        .zip(errors.windows(2))
        .map(|(h, e)| (e[0] / e[1]).ln() / (h[0] / h[1]).ln())
        .collect()
}

#[derive(Debug, Clone, Serialize)]
struct Ladder {
    steps: Vec<f64>,
    errors: Vec<f64>,
    orders: Vec<f64>,
    at_floor: bool,
}

/// Refinement ladders: finite-difference steps, quadrature orders, grids, epsilons.
pub fn convergence_group(s: &Setup) -> Result<GroupResult, RunError> {
    let mut g = GroupResult::default();
    let cc = &s.config.convergence;
    let points: Vec<Vec3> = s
        .random_points(80, 2.0, 3)
        .into_iter()
        .filter(|r| !s.near_cusp(r))
        .take(20)
        .collect();
    let (rho, kappa) = (&s.rho, &s.kappa);
    let target = |r: &Vec3| {
        current_p_analytic(rho, kappa, r) * s.theta
            + current_q_analytic(rho, kappa, r) * (1.0 - s.theta)
    };
    let scale: f64 = points.iter().map(|r| rho.eval(r)).fold(0.0, f64::max);

    let mut cur_err = Vec::new();
    let mut tau_err = Vec::new();
    for &h in &cc.fd_steps {
        let mut ec = 0.0;
        let mut et = 0.0;
        for r in &points {
            // plain central differences: the fine step of an h-estimate is h/2, so use 2h
            let est = observables::extract_current_fd(&s.d, r, 2.0 * h)?;
            ec += (est.fine - target(r)).norm_squared();
            let want = kinetic_density(rho, kappa, s.lambda, s.mu, r)?.tau_d(s.theta);
            let tf = observables::tau_fd(&s.d, r, 2.0 * h)?;
            et += (tf.fine - want).powi(2);
        }
        cur_err.push(ec.sqrt());
        tau_err.push(et.sqrt());
    }
    for (name, errors) in [("current", &cur_err), ("tau", &tau_err)] {
        let orders = log_ratio_orders(&cc.fd_steps, errors);
        let at_floor = errors.iter().all(|e| *e <= 1e-13 * scale.max(1e-300));
        let min_order = orders.iter().copied().fold(f64::INFINITY, f64::min);
        if at_floor {
            g.checks
                .push(Check::flag(format!("convergence.fd_{name}.exact"), true));
        } else {
            g.checks.push(Check::at_least(
                format!("convergence.fd_{name}.order"),
                min_order,
                cc.min_fd_order,
                0.0,
            ));
        }
        g.value(
            format!("convergence.fd_{name}.min_order"),
            if at_floor { f64::NAN } else { min_order },
        );
        g.section(
            format!("convergence.fd_{name}"),
            &Ladder {
                steps: cc.fd_steps.clone(),
                errors: errors.clone(),
                orders,
                at_floor,
            },
        );
    }

    let pairs = s.random_pairs(s.config.numerics.factorization_pairs, 1);
    for (name, factor, kernel) in [
        ("g", factor_g(rho, kappa, s.lambda)?, &s.p),
        ("h", factor_h(rho, kappa, s.mu)?, &s.q),
    ] {
        let ladder = factorization_ladder(&factor, kernel, &pairs, &cc.gh_orders)?;
        g.checks.push(Check::flag(
            format!("convergence.gh_{name}.monotone"),
            ladder.monotone,
        ));
        g.section(format!("convergence.gh_{name}"), &ladder);
    }

    let bx = s.config.integration_box(rho);
    let mut tw = Vec::new();
    for &c in &cc.grid_counts {
        let plan = IntegrationPlan::for_density(rho, &bx, c)?;
        tw.push(observables::functional_t_w(rho, &plan).value);
    }
    let diffs: Vec<f64> = tw.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let floor = 1e-12 * tw.last().copied().unwrap_or(1.0).abs();
    let settling = diffs.windows(2).all(|w| w[1] <= w[0] || w[1] <= floor);
    g.checks
        .push(Check::flag("convergence.grid_t_w.settling", settling));
    g.section("convergence.grid_t_w", &(cc.grid_counts.clone(), tw, diffs));

    let mut traces = Vec::new();
    let mut tops = Vec::new();
    for &c in &cc.spectral_counts {
        let op = discretize(&s.d, &s.spectral_grid(c)?, s.config.grid.dense_limit)?;
        let rep = eigen_dense(&op, &[], SpectrumTolerances::default())?;
        traces.push((rep.trace - rho.declared_n()).abs());
        tops.push(rep.max_eigenvalue);
    }
    g.section(
        "convergence.spectral",
        &(cc.spectral_counts.clone(), traces.clone(), tops),
    );
    let trace_ok = traces.windows(2).all(|w| w[1] <= w[0] || w[1] <= 1e-10);
    g.checks
        .push(Check::flag("convergence.spectral_trace.settling", trace_ok));

    // box growth at roughly fixed spacing: the truncation to a finite cube
    if let Some(&c) = cc.spectral_counts.last() {
        let half = s.config.grid.spectral_half_width;
        let small = ((c - 1) as f64 * 0.75).round() as usize + 1;
        let mut rows = Vec::new();
        for (h, n) in [(0.75 * half, small.max(2)), (half, c)] {
            let bx = crate::quadrature::CompactBox::cube(rho.center(), h)?;
            let grid = GridSpec::over_box(&bx, [n; 3], Rule::Trapezoid)?;
            let op = discretize(&s.d, &grid, s.config.grid.dense_limit)?;
            let rep = eigen_dense(&op, &[], SpectrumTolerances::default())?;
            rows.push((h, n, rep.max_eigenvalue, rep.trace));
        }
        g.value("convergence.spectral_box.top_change", rows[1].2 - rows[0].2);
        g.value(
            "convergence.spectral_box.trace_change",
            rows[1].3 - rows[0].3,
        );
        g.section("convergence.spectral_box", &rows);
    }

    if let Some(x) = probe_points(s).first() {
        let pr = &s.config.probes;
        let table = measure::diag_via_averaging(
            &factor_g(rho, kappa, s.lambda)?,
            &factor_g(rho, kappa, s.lambda)?,
            x,
            &measure::dyadic_epsilons(pr.averaging_levels),
            AveragingSettings {
                subgrid: pr.averaging_subgrid,
                gh_order: pr.averaging_gh_order,
            },
        )?;
        g.checks.push(Check::flag(
            "convergence.averaging.strictly_decreasing",
            table.strictly_decreasing,
        ));
        g.tables.push(("point0".into(), table));
    }
    Ok(g)
}

/// Options that do not belong in the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for the run folder; the config's `output.dir` when `None`.
    pub out_dir: Option<PathBuf>,
    pub timestamp: bool,
    /// Skip writing files entirely.
    pub dry_run: bool,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    /// Folder holding `report.json` and the CSV files.
    pub run_dir: Option<PathBuf>,
}

fn run_groups(
    cmd: Command,
    s: &Setup,
) -> Result<(GroupResult, Option<FunctionalReport>), RunError> {
    let mut all = admissibility_group(s);
    let pr = &s.config.probes;
    let mut functionals = None;
    match cmd {
        Command::Construct => {}
        Command::Verify => {
            all.merge(diagonal_group(s)?);
            all.merge(current_group(s)?);
            if pr.factorization {
                all.merge(factorization_group(s)?);
            }
            all.merge(spectrum_group(s)?);
            all.merge(kinetic_group(s)?);
            let (g, rep) = functional_group(s)?;
            all.merge(g);
            functionals = Some(rep);
            if pr.measure {
                all.merge(measure_group(s)?);
            }
        }
        Command::Spectrum => all.merge(spectrum_group(s)?),
        Command::Functionals => {
            all.merge(kinetic_group(s)?);
            let (g, rep) = functional_group(s)?;
            all.merge(g);
            functionals = Some(rep);
        }
        Command::Convergence => all.merge(convergence_group(s)?),
    }
    Ok((all, functionals))
}

/// Kernel values on a small grid of pairs; Hermiticity and diagonal checked on the way.
type KernelRow = (Vec3, Vec3, crate::C64);

fn kernel_samples(s: &Setup) -> Result<(Vec<KernelRow>, Vec<Check>), RunError> {
    let bx = s.config.sample_box(&s.rho);
    let grid = GridSpec::over_box(
        &bx,
        [s.config.grid.kernel_sample_counts.max(2); 3],
        Rule::Trapezoid,
    )?;
    let nodes: Vec<Vec3> = (0..grid.len()).map(|i| grid.node(i)).collect();
    let mut rows = Vec::with_capacity(nodes.len() * nodes.len());
    let mut herm = 0.0f64;
    let mut diag = 0.0f64;
    let mut peak = 0.0f64;
    for r in &nodes {
        peak = peak.max(s.rho.eval(r));
        for t in &nodes {
            let z = s.d.eval(r, t);
            herm = herm.max((z - s.d.eval(t, r).conj()).norm());
            if r == t {
                diag = diag.max((z.re - s.rho.eval(r)).abs().max(z.im.abs()));
            }
            rows.push((*r, *t, z));
        }
    }
    let checks = vec![
        Check::at_most("kernel.hermitian", herm, 0.0, 1e-15 * peak),
        Check::at_most("kernel.diagonal", diag, 0.0, 1e-15 * peak),
    ];
    Ok((rows, checks))
}

struct Writer {
    dir: PathBuf,
    names: Vec<String>,
}

impl Writer {
    fn create(&mut self, name: &str) -> std::io::Result<std::fs::File> {
        let f = std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(self.dir.join(name))?;
        self.names.push(name.to_string());
        Ok(f)
    }
}

/// Creates `base/stem`, or `base/stem-1`, ... if taken.
fn fresh_dir(base: &Path, stem: &str) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(base)?;
    for k in 0.. {
        let name = if k == 0 {
            stem.to_string()
        } else {
            format!("{stem}-{k}")
        };
        let path = base.join(name);
        match std::fs::create_dir(&path) {
            Ok(()) => return Ok(path),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
    unreachable!("the suffix search is unbounded")
}

fn timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

/// Runs a command and writes its report and CSV files into a fresh run folder.
pub fn execute(
    cmd: Command,
    config: &RunConfig,
    opts: &RunOptions,
) -> Result<RunOutcome, RunError> {
    let workers = config.numerics.workers;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;
    pool.install(|| execute_inner(cmd, config, opts))
}

fn execute_inner(
    cmd: Command,
    config: &RunConfig,
    opts: &RunOptions,
) -> Result<RunOutcome, RunError> {
    let s = Setup::from_config(config)?;
    let (mut groups, _) = run_groups(cmd, &s)?;
    let mut kernel_rows = None;
    if cmd == Command::Construct {
        let (rows, checks) = kernel_samples(&s)?;
        groups.checks.extend(checks);
        kernel_rows = Some(rows);
    }

    let mut report = RunReport::new(cmd.name(), config.clone());
    if opts.timestamp {
        report.timestamp = Some(timestamp());
    }
    for (k, v) in &groups.values {
        report.values.insert(k.clone(), *v);
    }
    for (k, v) in groups.sections.drain(..) {
        report.sections.insert(k, v);
    }
    for (k, t) in &groups.tables {
        report.section(&format!("measure.{k}"), t);
    }
    report.extend(groups.checks.drain(..));

    let mut run_dir = None;
    if !opts.dry_run {
        let base = opts
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(&config.output.dir));
        let dir = fresh_dir(&base, &format!("{}-{}", config.output.prefix, cmd.name()))?;
        let mut w = Writer {
            dir: dir.clone(),
            names: Vec::new(),
        };
        if config.output.csv {
            write_csvs(&s, cmd, &groups, kernel_rows.as_deref(), &mut w)?;
        }
        report.artifacts = w.names.clone();
        report.finish();
        let mut f = w.create("report.json")?;
        f.write_all(report.to_json().as_bytes())?;
        run_dir = Some(dir);
    } else {
        report.finish();
    }
    Ok(RunOutcome { report, run_dir })
}

fn write_csvs(
    s: &Setup,
    cmd: Command,
    groups: &GroupResult,
    kernel_rows: Option<&[KernelRow]>,
    w: &mut Writer,
) -> Result<(), RunError> {
    if let Some(rows) = kernel_rows {
        export::write_kernel_samples(w.create("kernel-D.csv")?, rows)?;
    }
    if matches!(cmd, Command::Construct | Command::Functionals) {
        let grid = s.sample_grid()?;
        export::write_scalar_field(
            w.create("density.csv")?,
            &sample_scalar(&grid, |r| s.rho.eval(r)),
        )?;
        export::write_vector_field(
            w.create("current.csv")?,
            &sample_vector(&grid, |r| eval_jp(&s.rho, &s.kappa, r)),
        )?;
    }
    if cmd == Command::Functionals {
        let grid = s.sample_grid()?;
        let tau = sample_scalar(&grid, |r| {
            kinetic_density(&s.rho, &s.kappa, s.lambda, s.mu, r)
                .map_or(f64::NAN, |k| k.tau_d(s.theta))
        });
        export::write_scalar_field(w.create("tau-D.csv")?, &tau)?;
    }
    for (name, eigs) in &groups.spectra {
        export::write_spectrum(w.create(&format!("spectrum-{name}.csv"))?, eigs)?;
    }
    for (name, table) in &groups.tables {
        export::write_convergence(w.create(&format!("averaging-{name}.csv"))?, table)?;
    }
    Ok(())
}
