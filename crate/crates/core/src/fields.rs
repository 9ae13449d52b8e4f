//! Prescribed densities and current factors.
//!
//! Both kinds of field are plain evaluable closures over positions. No grid is
//! attached to a field; every computation chooses its own grid.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::quadrature::{CompactBox, GridSpec};
use crate::{Mat3, Vec3};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FieldError {
    #[error("parameter `{name}` must be {requirement}, got {value}")]
    InvalidParameter {
        name: &'static str,
        requirement: &'static str,
        value: f64,
    },
}

fn require_positive(name: &'static str, value: f64) -> Result<f64, FieldError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(FieldError::InvalidParameter {
            name,
            requirement: "finite and > 0",
            value,
        })
    }
}

fn require_finite_vec(name: &'static str, v: &Vec3) -> Result<(), FieldError> {
    match v.iter().find(|c| !c.is_finite()) {
        Some(&bad) => Err(FieldError::InvalidParameter {
            name,
            requirement: "finite",
            value: bad,
        }),
        None => Ok(()),
    }
}

/// Name and numeric parameters of the preset a field was built from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PresetInfo {
    pub name: String,
    pub params: BTreeMap<String, f64>,
}

impl PresetInfo {
    pub fn new(name: &str, params: &[(&str, f64)]) -> Self {
        Self {
            name: name.to_owned(),
            params: params.iter().map(|(k, v)| ((*k).to_owned(), *v)).collect(),
        }
    }

    fn with_vector(mut self, key: &str, v: &Vec3) -> Self {
        for (axis, c) in ["x", "y", "z"].iter().zip(v.iter()) {
            self.params.insert(format!("{key}.{axis}"), *c);
        }
        self
    }
}

type ScalarFn = Arc<dyn Fn(&Vec3) -> f64 + Send + Sync>;
type GradientFn = Arc<dyn Fn(&Vec3) -> Option<Vec3> + Send + Sync>;
type VectorFn = Arc<dyn Fn(&Vec3) -> Vec3 + Send + Sync>;
type JacobianFn = Arc<dyn Fn(&Vec3) -> Mat3 + Send + Sync>;

/// A non-negative density with an analytic gradient.
#[derive(Clone)]
pub struct DensityProfile {
    value: ScalarFn,
    gradient: GradientFn,
    declared_n: f64,
    preset: PresetInfo,
    center: Vec3,
    natural_half_width: f64,
    cusp: Option<Vec3>,
}

impl fmt::Debug for DensityProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DensityProfile")
            .field("preset", &self.preset)
            .field("declared_n", &self.declared_n)
            .field("cusp", &self.cusp)
            .finish()
    }
}

impl DensityProfile {
    /// Builds a density from user closures. `gradient` returns `None` where the
    /// gradient does not exist classically; such a point is recorded as `cusp`.
    pub fn from_closures(
        preset: PresetInfo,
        declared_n: f64,
        center: Vec3,
        natural_half_width: f64,
        cusp: Option<Vec3>,
        value: impl Fn(&Vec3) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&Vec3) -> Option<Vec3> + Send + Sync + 'static,
    ) -> Result<Self, FieldError> {
        require_positive("N", declared_n)?;
        require_positive("half_width", natural_half_width)?;
        Ok(Self {
            value: Arc::new(value),
            gradient: Arc::new(gradient),
            declared_n,
            preset,
            center,
            natural_half_width,
            cusp,
        })
    }

    #[inline]
    pub fn eval(&self, r: &Vec3) -> f64 {
        (self.value)(r)
    }

    /// Analytic gradient; `None` at a flagged cusp.
    #[inline]
    pub fn grad(&self, r: &Vec3) -> Option<Vec3> {
        (self.gradient)(r)
    }

    pub fn declared_n(&self) -> f64 {
        self.declared_n
    }

    pub fn preset(&self) -> &PresetInfo {
        &self.preset
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn cusp(&self) -> Option<Vec3> {
        self.cusp
    }

    pub fn near_cusp(&self, r: &Vec3, radius: f64) -> bool {
        self.cusp.is_some_and(|c| (r - c).norm() <= radius)
    }

    /// Cube around the center that holds all but a negligible tail.
    pub fn default_box(&self) -> CompactBox {
        CompactBox::cube(self.center, self.natural_half_width)
            .expect("half width validated at construction")
    }

    /// The density `factor * rho` with declared particle number scaled alike.
    pub fn scaled(&self, factor: f64) -> Result<Self, FieldError> {
        require_positive("factor", factor)?;
        let value = Arc::clone(&self.value);
        let gradient = Arc::clone(&self.gradient);
        let mut preset = self.preset.clone();
        preset.params.insert("scale".to_owned(), factor);
        Ok(Self {
            value: Arc::new(move |r| factor * value(r)),
            gradient: Arc::new(move |r| gradient(r).map(|g| g * factor)),
            declared_n: self.declared_n * factor,
            preset,
            center: self.center,
            natural_half_width: self.natural_half_width,
            cusp: self.cusp,
        })
    }
}

/// `rho(r) = N (alpha/pi)^{3/2} exp(-alpha |r - c|^2)`.
pub fn make_gaussian_density(
    n: f64,
    alpha: f64,
    center: Vec3,
) -> Result<DensityProfile, FieldError> {
    require_positive("N", n)?;
    require_positive("alpha", alpha)?;
    require_finite_vec("center", &center)?;
    let norm = n * (alpha / PI).powf(1.5);
    let preset =
        PresetInfo::new("gaussian", &[("N", n), ("alpha", alpha)]).with_vector("center", &center);
    DensityProfile::from_closures(
        preset,
        n,
        center,
        8.0 / alpha.sqrt(),
        None,
        move |r| norm * (-alpha * (r - center).norm_squared()).exp(),
        move |r| {
            let d = r - center;
            let rho = norm * (-alpha * d.norm_squared()).exp();
            Some(d * (-2.0 * alpha * rho))
        },
    )
}

/// `rho(r) = N (zeta^3/pi) exp(-2 zeta |r - c|)`, hydrogen-like with a cusp at `c`.
pub fn make_exponential_density(
    n: f64,
    zeta: f64,
    center: Vec3,
) -> Result<DensityProfile, FieldError> {
    require_positive("N", n)?;
    require_positive("zeta", zeta)?;
    require_finite_vec("center", &center)?;
    let norm = n * zeta.powi(3) / PI;
    let preset =
        PresetInfo::new("exponential", &[("N", n), ("zeta", zeta)]).with_vector("center", &center);
    DensityProfile::from_closures(
        preset,
        n,
        center,
        14.0 / zeta,
        Some(center),
        move |r| norm * (-2.0 * zeta * (r - center).norm()).exp(),
        move |r| {
            let d = r - center;
            let dist = d.norm();
            if dist == 0.0 {
                return None;
            }
            let rho = norm * (-2.0 * zeta * dist).exp();
            Some(d * (-2.0 * zeta * rho / dist))
        },
    )
}

/// A current factor `kappa` with `j_p = rho * kappa / 2`.
#[derive(Clone)]
pub struct KappaField {
    value: VectorFn,
    jacobian: JacobianFn,
    preset: PresetInfo,
}

impl fmt::Debug for KappaField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KappaField")
            .field("preset", &self.preset)
            .finish()
    }
}

impl KappaField {
    pub fn from_closures(
        preset: PresetInfo,
        value: impl Fn(&Vec3) -> Vec3 + Send + Sync + 'static,
        jacobian: impl Fn(&Vec3) -> Mat3 + Send + Sync + 'static,
    ) -> Self {
        Self {
            value: Arc::new(value),
            jacobian: Arc::new(jacobian),
            preset,
        }
    }

    #[inline]
    pub fn eval(&self, r: &Vec3) -> Vec3 {
        (self.value)(r)
    }

    /// `J[(a, b)] = d kappa_b / d r_a`.
    #[inline]
    pub fn jacobian(&self, r: &Vec3) -> Mat3 {
        (self.jacobian)(r)
    }

    pub fn preset(&self) -> &PresetInfo {
        &self.preset
    }

    /// Vorticity `nu = curl(kappa) / 2` from the analytic Jacobian.
    pub fn vorticity(&self, r: &Vec3) -> Vec3 {
        curl_from_jacobian(&self.jacobian(r)) * 0.5
    }

    /// Pointwise sum of two current factors.
    pub fn add(&self, other: &KappaField) -> KappaField {
        let (va, vb) = (Arc::clone(&self.value), Arc::clone(&other.value));
        let (ja, jb) = (Arc::clone(&self.jacobian), Arc::clone(&other.jacobian));
        let mut params = BTreeMap::new();
        for (k, v) in &self.preset.params {
            params.insert(format!("{}.{k}", self.preset.name), *v);
        }
        for (k, v) in &other.preset.params {
            params.insert(format!("{}.{k}", other.preset.name), *v);
        }
        let preset = PresetInfo {
            name: format!("{}+{}", self.preset.name, other.preset.name),
            params,
        };
        KappaField::from_closures(preset, move |r| va(r) + vb(r), move |r| ja(r) + jb(r))
    }

    /// `-kappa`; flips the sign of every phase built from this field.
    pub fn negated(&self) -> KappaField {
        let (v, j) = (Arc::clone(&self.value), Arc::clone(&self.jacobian));
        let mut preset = self.preset.clone();
        preset.name = format!("-{}", preset.name);
        KappaField::from_closures(preset, move |r| -v(r), move |r| -j(r))
    }
}

/// `curl` of a field whose Jacobian is `J[(a, b)] = d v_b / d r_a`.
pub fn curl_from_jacobian(j: &Mat3) -> Vec3 {
    Vec3::new(
        j[(1, 2)] - j[(2, 1)],
        j[(2, 0)] - j[(0, 2)],
        j[(0, 1)] - j[(1, 0)],
    )
}

pub fn kappa_zero() -> KappaField {
    KappaField::from_closures(
        PresetInfo::new("zero", &[]),
        |_| Vec3::zeros(),
        |_| Mat3::zeros(),
    )
}

pub fn kappa_constant(v: Vec3) -> Result<KappaField, FieldError> {
    require_finite_vec("vector", &v)?;
    Ok(KappaField::from_closures(
        PresetInfo::new("constant", &[]).with_vector("vector", &v),
        move |_| v,
        |_| Mat3::zeros(),
    ))
}

/// `kappa(r) = omega x r`. The Jacobian is the constant antisymmetric matrix of `omega`.
pub fn kappa_rigid_rotation(omega: Vec3) -> Result<KappaField, FieldError> {
    require_finite_vec("omega", &omega)?;
    // row a is d(omega x r)/d r_a = omega x e_a
    let jac = Mat3::from_rows(&[
        omega.cross(&Vec3::x()).transpose(),
        omega.cross(&Vec3::y()).transpose(),
        omega.cross(&Vec3::z()).transpose(),
    ]);
    Ok(KappaField::from_closures(
        PresetInfo::new("rigid_rotation", &[]).with_vector("omega", &omega),
        move |r| omega.cross(r),
        move |_| jac,
    ))
}

/// Pure-gauge factor `kappa = 2 grad(chi)`, shifting `j_p` by `rho grad(chi)`.
///
/// `chi_hessian` must be the Hessian of `chi`, i.e. the Jacobian of `chi_grad`.
pub fn kappa_gauge(
    name: &str,
    chi_grad: impl Fn(&Vec3) -> Vec3 + Send + Sync + 'static,
    chi_hessian: impl Fn(&Vec3) -> Mat3 + Send + Sync + 'static,
) -> KappaField {
    KappaField::from_closures(
        PresetInfo::new(name, &[]),
        move |r| chi_grad(r) * 2.0,
        move |r| chi_hessian(r) * 2.0,
    )
}

/// Gauge factor for `chi(r) = r.A r / 2`, so `grad(chi) = A r` and `kappa = 2 A r`.
pub fn kappa_gauge_quadratic(a: Mat3) -> Result<KappaField, FieldError> {
    if let Some(bad) = a.iter().find(|c| !c.is_finite()) {
        return Err(FieldError::InvalidParameter {
            name: "hessian",
            requirement: "finite",
            value: *bad,
        });
    }
    let asym = (a - a.transpose()).amax();
    if asym > 1e-12 * (1.0 + a.amax()) {
        return Err(FieldError::InvalidParameter {
            name: "hessian",
            requirement: "symmetric (a gradient field needs a symmetric Hessian)",
            value: asym,
        });
    }
    let mut kappa = kappa_gauge("gauge_quadratic", move |r| a * r, move |_| a);
    for i in 0..3 {
        for j in i..3 {
            kappa
                .preset
                .params
                .insert(format!("hessian.{i}{j}"), a[(i, j)]);
        }
    }
    Ok(kappa)
}

/// Paramagnetic current `j_p(r) = rho(r) kappa(r) / 2`.
pub fn eval_jp(rho: &DensityProfile, kappa: &KappaField, r: &Vec3) -> Vec3 {
    kappa.eval(r) * (0.5 * rho.eval(r))
}

/// Discrete `L^q` norm estimate and a truncation diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormEstimate {
    pub q: f64,
    pub value: f64,
    /// Largest density value found on the outer layer of grid nodes.
    pub boundary_max: f64,
    /// Set when the boundary density exceeds `1e-10` of the peak sampled value.
    pub truncated: bool,
}

/// `(sum_i w_i rho(r_i)^q)^{1/q}`.
pub fn lp_norm(rho: &DensityProfile, q: f64, grid: &GridSpec) -> Result<NormEstimate, FieldError> {
    if !(q.is_finite() && q >= 1.0) {
        return Err(FieldError::InvalidParameter {
            name: "q",
            requirement: "finite and >= 1",
            value: q,
        });
    }
    let sum = grid.reduce(|r, w| w * rho.eval(r).powf(q));
    let (mut boundary_max, mut peak) = (0.0_f64, 0.0_f64);
    for i in 0..grid.len() {
        let v = rho.eval(&grid.node(i));
        peak = peak.max(v);
        if grid.is_boundary(i) {
            boundary_max = boundary_max.max(v);
        }
    }
    Ok(NormEstimate {
        q,
        value: sum.powf(1.0 / q),
        boundary_max,
        truncated: boundary_max > 1e-10 * peak,
    })
}

/// Samples a scalar field at every grid node.
pub fn sample_scalar(grid: &GridSpec, f: impl Fn(&Vec3) -> f64) -> Vec<(Vec3, f64)> {
    (0..grid.len())
        .map(|i| {
            let r = grid.node(i);
            (r, f(&r))
        })
        .collect()
}

/// Samples a vector field at every grid node.
pub fn sample_vector(grid: &GridSpec, f: impl Fn(&Vec3) -> Vec3) -> Vec<(Vec3, Vec3)> {
    (0..grid.len())
        .map(|i| {
            let r = grid.node(i);
            (r, f(&r))
        })
        .collect()
}

/// Discrete `L^2` norm of a vector field sampled on a grid.
pub fn vector_l2(grid: &GridSpec, f: impl Fn(&Vec3) -> Vec3 + Sync) -> f64 {
    grid.reduce(|r, w| w * f(r).norm_squared()).sqrt()
}
