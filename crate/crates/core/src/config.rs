//! TOML run configuration. Unknown keys are rejected everywhere.
//!
//! ```toml
//! [density]
//! preset = "gaussian"
//! params = { n = 1.0, alpha = 1.0 }
//!
//! [kappa]
//! preset = "rigid_rotation"
//! omega = [0.0, 0.0, 0.5]
//!
//! [kernel]
//! q = [2.0, 3.0]
//! lambda = "auto"
//! ```

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::fields::{
    kappa_constant, kappa_gauge_quadratic, kappa_rigid_rotation, kappa_zero,
    make_exponential_density, make_gaussian_density, DensityProfile, FieldError, KappaField,
};
use crate::kernels::OccupationMode;
use crate::quadrature::CompactBox;
use crate::{Mat3, Vec3};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(String),
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub density: DensityConfig,
    #[serde(default)]
    pub kappa: KappaConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub numerics: NumericsConfig,
    #[serde(default)]
    pub probes: ProbesConfig,
    #[serde(default)]
    pub convergence: ConvergenceConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityConfig {
    /// `gaussian` (params `n`, `alpha`) or `exponential` (params `n`, `zeta`).
    pub preset: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub center: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KappaConfig {
    /// `zero`, `constant`, `rigid_rotation`, `gauge_quadratic` or `rotation_gauge`.
    pub preset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<[f64; 3]>,
    /// Symmetric matrix `A` of `chi = r.A r / 2`, row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<[[f64; 3]; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<[f64; 3]>,
}

impl Default for KappaConfig {
    fn default() -> Self {
        Self {
            preset: "zero".into(),
            omega: None,
            matrix: None,
            vector: None,
        }
    }
}

/// A width given as `"auto"` or as a number.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum WidthSetting {
    #[default]
    Auto,
    Value(f64),
}

impl Serialize for WidthSetting {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            WidthSetting::Auto => s.serialize_str("auto"),
            WidthSetting::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for WidthSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = WidthSetting;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("\"auto\" or a positive number")
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<WidthSetting, E> {
                if v == "auto" {
                    Ok(WidthSetting::Auto)
                } else {
                    Err(E::custom(format!(
                        "expected \"auto\" or a number, got \"{v}\""
                    )))
                }
            }
            fn visit_f64<E: serde::de::Error>(self, v: f64) -> Result<WidthSetting, E> {
                Ok(WidthSetting::Value(v))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<WidthSetting, E> {
                Ok(WidthSetting::Value(v as f64))
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    /// Exponents for `||rho||_q` and the width threshold; each must exceed 1.
    pub q: Vec<f64>,
    pub lambda: WidthSetting,
    pub mu: WidthSetting,
    /// Multiplies automatically chosen widths.
    pub lambda_scale: f64,
    pub theta: f64,
    /// 2 for spatial orbitals, 1 for spin orbitals.
    pub occ_max: u32,
    /// Marks the occupation checks as demonstrations that must fail.
    pub expect_occupation_failure: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            q: vec![2.0, 3.0],
            lambda: WidthSetting::Auto,
            mu: WidthSetting::Auto,
            lambda_scale: 1.0,
            theta: 0.5,
            occ_max: 2,
            expect_occupation_failure: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Half-width of the integration cube; the preset default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
    /// Nodes (smooth densities) or cells (cusped densities) per axis for integrals.
    pub counts: usize,
    /// Nodes per axis for pointwise sampling and field exports.
    pub sample_counts: usize,
    /// Half-width of the sampling cube; defaults to `half_width / 2`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_half_width: Option<f64>,
    /// Nodes per axis of the Nyström grid.
    pub spectral_counts: usize,
    pub spectral_half_width: f64,
    pub dense_limit: usize,
    /// Allowed relative gap between the Nyström trace and `N`; coarse grids miss cusps.
    pub spectral_trace_rel: f64,
    /// Nodes per axis for the exported kernel samples (pairs = counts^6).
    pub kernel_sample_counts: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            half_width: None,
            counts: 48,
            sample_counts: 17,
            sample_half_width: None,
            spectral_counts: 12,
            spectral_half_width: 5.0,
            dense_limit: crate::spectral::DEFAULT_DENSE_LIMIT,
            spectral_trace_rel: 0.02,
            kernel_sample_counts: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsConfig {
    pub fd_step: f64,
    pub gh_order: usize,
    /// Worker threads; 0 uses all available cores. Results do not depend on it.
    pub workers: usize,
    pub power_iters: usize,
    pub power_tol: f64,
    pub factorization_pairs: usize,
    /// Points for the pointwise kinetic-energy comparison.
    pub tau_points: usize,
    pub seed: u64,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        Self {
            fd_step: 1e-3,
            gh_order: 32,
            workers: 0,
            power_iters: 1000,
            power_tol: 1e-12,
            factorization_pairs: 64,
            tau_points: 100,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbesConfig {
    pub spectral_dense: bool,
    pub spectral_matfree: bool,
    pub factorization: bool,
    pub measure: bool,
    pub measure_points: usize,
    /// Epsilons `1, 1/2, ..., 2^-averaging_levels`.
    pub averaging_levels: u32,
    pub averaging_subgrid: usize,
    pub averaging_gh_order: usize,
}

impl Default for ProbesConfig {
    fn default() -> Self {
        Self {
            spectral_dense: true,
            spectral_matfree: false,
            factorization: true,
            measure: true,
            measure_points: 5,
            averaging_levels: 8,
            averaging_subgrid: 4,
            averaging_gh_order: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceConfig {
    pub fd_steps: Vec<f64>,
    pub gh_orders: Vec<usize>,
    pub grid_counts: Vec<usize>,
    pub spectral_counts: Vec<usize>,
    /// Minimum observed order for the finite-difference ladder.
    pub min_fd_order: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            fd_steps: vec![1e-2, 5e-3, 2.5e-3],
            gh_orders: vec![8, 16, 32],
            grid_counts: vec![16, 24, 32, 48],
            spectral_counts: vec![6, 8, 10],
            min_fd_order: 1.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    pub prefix: String,
    /// Write CSV dumps next to the report.
    pub csv: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            prefix: "run".into(),
            csv: true,
        }
    }
}

fn vec3(v: [f64; 3]) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

fn field_err(prefix: &str, e: FieldError) -> ConfigError {
    match e {
        FieldError::InvalidParameter {
            name,
            requirement,
            value,
        } => invalid(
            &format!("{prefix}.{name}"),
            format!("must be {requirement}, got {value}"),
        ),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.build_density()?;
        self.build_kappa()?;
        let k = &self.kernel;
        if k.q.is_empty() {
            return Err(invalid("kernel.q", "at least one exponent is required"));
        }
        if let Some(q) = k.q.iter().find(|q| !(q.is_finite() && **q > 1.0)) {
            return Err(invalid(
                "kernel.q",
                format!("every q must be finite and > 1, got {q}"),
            ));
        }
        for (key, w) in [("kernel.lambda", k.lambda), ("kernel.mu", k.mu)] {
            if let WidthSetting::Value(v) = w {
                if !(v.is_finite() && v > 0.0) {
                    return Err(invalid(
                        key,
                        format!("must be \"auto\" or finite and > 0, got {v}"),
                    ));
                }
            }
        }
        if !(k.lambda_scale.is_finite() && k.lambda_scale > 0.0) {
            return Err(invalid(
                "kernel.lambda_scale",
                format!("must be finite and > 0, got {}", k.lambda_scale),
            ));
        }
        if !(0.0..=1.0).contains(&k.theta) {
            return Err(invalid(
                "kernel.theta",
                format!("must lie in [0, 1], got {}", k.theta),
            ));
        }
        if OccupationMode::from_max(k.occ_max).is_none() {
            return Err(invalid(
                "kernel.occ_max",
                format!("must be 1 or 2, got {}", k.occ_max),
            ));
        }
        let g = &self.grid;
        for (key, v) in [
            ("grid.half_width", g.half_width),
            ("grid.sample_half_width", g.sample_half_width),
        ] {
            if let Some(h) = v {
                if !(h.is_finite() && h > 0.0) {
                    return Err(invalid(key, format!("must be finite and > 0, got {h}")));
                }
            }
        }
        if !(g.spectral_half_width.is_finite() && g.spectral_half_width > 0.0) {
            return Err(invalid(
                "grid.spectral_half_width",
                "must be finite and > 0",
            ));
        }
        if !(g.spectral_trace_rel.is_finite() && g.spectral_trace_rel > 0.0) {
            return Err(invalid("grid.spectral_trace_rel", "must be finite and > 0"));
        }
        for (key, v, min) in [
            ("grid.counts", g.counts, 2),
            ("grid.sample_counts", g.sample_counts, 2),
            ("grid.spectral_counts", g.spectral_counts, 2),
            ("grid.kernel_sample_counts", g.kernel_sample_counts, 1),
            ("grid.dense_limit", g.dense_limit, 1),
        ] {
            if v < min {
                return Err(invalid(key, format!("must be at least {min}, got {v}")));
            }
        }
        if g.counts > 1024 || g.sample_counts > 1024 || g.kernel_sample_counts > 16 {
            return Err(invalid(
                "grid",
                "counts above 1024 (kernel samples above 16) are not supported",
            ));
        }
        let n = &self.numerics;
        if !(n.fd_step.is_finite() && n.fd_step > 0.0 && n.fd_step < 1.0) {
            return Err(invalid(
                "numerics.fd_step",
                format!("must lie in (0, 1), got {}", n.fd_step),
            ));
        }
        // the factorization ladder runs at gh_order / 4, / 2 and / 1
        if !(32..=128).contains(&n.gh_order) {
            return Err(invalid(
                "numerics.gh_order",
                format!("must lie in [32, 128], got {}", n.gh_order),
            ));
        }
        if !(n.power_tol.is_finite() && n.power_tol > 0.0) {
            return Err(invalid("numerics.power_tol", "must be finite and > 0"));
        }
        if n.power_iters == 0 {
            return Err(invalid("numerics.power_iters", "must be at least 1"));
        }
        let p = &self.probes;
        if !(2..=128).contains(&p.averaging_gh_order) {
            return Err(invalid("probes.averaging_gh_order", "must lie in [2, 128]"));
        }
        if p.averaging_subgrid == 0 || p.averaging_subgrid > 64 {
            return Err(invalid("probes.averaging_subgrid", "must lie in [1, 64]"));
        }
        if p.averaging_levels > 30 {
            return Err(invalid("probes.averaging_levels", "must be at most 30"));
        }
        let c = &self.convergence;
        if let Some(h) = c
            .fd_steps
            .iter()
            .find(|h| !(h.is_finite() && **h > 0.0 && **h < 1.0))
        {
            return Err(invalid(
                "convergence.fd_steps",
                format!("steps must lie in (0, 1), got {h}"),
            ));
        }
        if c.fd_steps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid(
                "convergence.fd_steps",
                "steps must be strictly decreasing",
            ));
        }
        if let Some(o) = c.gh_orders.iter().find(|o| !(8..=128).contains(*o)) {
            return Err(invalid(
                "convergence.gh_orders",
                format!("orders must lie in [8, 128], got {o}"),
            ));
        }
        if let Some(o) = c
            .grid_counts
            .iter()
            .chain(&c.spectral_counts)
            .find(|o| **o < 2 || **o > 1024)
        {
            return Err(invalid(
                "convergence",
                format!("grid counts must lie in [2, 1024], got {o}"),
            ));
        }
        if self.output.prefix.is_empty() || self.output.prefix.contains(['/', '\\']) {
            return Err(invalid(
                "output.prefix",
                "must be a non-empty file-name prefix",
            ));
        }
        Ok(())
    }

    fn param(&self, name: &str) -> Result<f64, ConfigError> {
        self.density.params.get(name).copied().ok_or_else(|| {
            invalid(
                &format!("density.params.{name}"),
                "is required for this preset",
            )
        })
    }

    pub fn build_density(&self) -> Result<DensityProfile, ConfigError> {
        let d = &self.density;
        let allowed: &[&str] = match d.preset.as_str() {
            "gaussian" => &["n", "alpha"],
            "exponential" => &["n", "zeta"],
            other => {
                return Err(invalid(
                    "density.preset",
                    format!("unknown preset \"{other}\" (gaussian, exponential)"),
                ))
            }
        };
        if let Some(k) = d.params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(invalid(
                &format!("density.params.{k}"),
                format!("not a parameter of preset \"{}\"", d.preset),
            ));
        }
        if let Some(c) = d.center.iter().find(|c| !c.is_finite()) {
            return Err(invalid(
                "density.center",
                format!("must be finite, got {c}"),
            ));
        }
        let center = vec3(d.center);
        let built = match d.preset.as_str() {
            "gaussian" => make_gaussian_density(self.param("n")?, self.param("alpha")?, center),
            _ => make_exponential_density(self.param("n")?, self.param("zeta")?, center),
        };
        built.map_err(|e| field_err("density.params", e))
    }

    pub fn build_kappa(&self) -> Result<KappaField, ConfigError> {
        let k = &self.kappa;
        let (needs_omega, needs_matrix, needs_vector) = match k.preset.as_str() {
            "zero" => (false, false, false),
            "constant" => (false, false, true),
            "rigid_rotation" => (true, false, false),
            "gauge_quadratic" => (false, true, false),
            "rotation_gauge" => (true, true, false),
            other => {
                return Err(invalid(
                    "kappa.preset",
                    format!("unknown preset \"{other}\" (zero, constant, rigid_rotation, gauge_quadratic, rotation_gauge)"),
                ))
            }
        };
        for (key, needed, present) in [
            ("kappa.omega", needs_omega, k.omega.is_some()),
            ("kappa.matrix", needs_matrix, k.matrix.is_some()),
            ("kappa.vector", needs_vector, k.vector.is_some()),
        ] {
            if needed && !present {
                return Err(invalid(
                    key,
                    format!("is required for preset \"{}\"", k.preset),
                ));
            }
            if present && !needed {
                return Err(invalid(
                    key,
                    format!("is not used by preset \"{}\"", k.preset),
                ));
            }
        }
        let rotation = || {
            kappa_rigid_rotation(vec3(k.omega.expect("checked"))).map_err(|e| field_err("kappa", e))
        };
        let gauge = || {
            let m = k.matrix.expect("checked");
            kappa_gauge_quadratic(Mat3::from_fn(|i, j| m[i][j])).map_err(|e| field_err("kappa", e))
        };
        match k.preset.as_str() {
            "zero" => Ok(kappa_zero()),
            "constant" => {
                kappa_constant(vec3(k.vector.expect("checked"))).map_err(|e| field_err("kappa", e))
            }
            "rigid_rotation" => rotation(),
            "gauge_quadratic" => gauge(),
            _ => Ok(rotation()?.add(&gauge()?)),
        }
    }

    pub fn occupation(&self) -> OccupationMode {
        OccupationMode::from_max(self.kernel.occ_max).unwrap_or_default()
    }

    /// Integration cube: configured half-width or the preset default.
    pub fn integration_box(&self, rho: &DensityProfile) -> CompactBox {
        match self.grid.half_width {
            Some(h) => CompactBox::cube(rho.center(), h).expect("validated"),
            None => rho.default_box(),
        }
    }

    /// Sampling cube for pointwise checks and field exports.
    pub fn sample_box(&self, rho: &DensityProfile) -> CompactBox {
        let full = self.integration_box(rho);
        let h = self
            .grid
            .sample_half_width
            .unwrap_or(0.5 * full.half_widths().max());
        CompactBox::cube(rho.center(), h).expect("validated")
    }

    pub fn spectral_box(&self, rho: &DensityProfile) -> CompactBox {
        CompactBox::cube(rho.center(), self.grid.spectral_half_width).expect("validated")
    }
}
