//! Deterministic integration over boxes and Gaussian-weighted integrals.
//!
//! Every reduction goes through [`pairwise_sum`] over fixed-size blocks, so a
//! result does not depend on how many worker threads evaluated the nodes.

use std::num::NonZeroUsize;
use std::ops::Add;

use gauss_quad::hermite::GaussHermite;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Vec3, C64};

/// Nodes handled per block in parallel reductions.
const BLOCK: usize = 4096;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuadratureError {
    #[error("{what} must be {requirement}, got {value}")]
    Invalid {
        what: &'static str,
        requirement: &'static str,
        value: f64,
    },
}

fn invalid(what: &'static str, requirement: &'static str, value: f64) -> QuadratureError {
    QuadratureError::Invalid {
        what,
        requirement,
        value,
    }
}

/// Cascade summation; the association order depends only on `values.len()`.
pub fn pairwise_sum<T: Copy + Default + Add<Output = T>>(values: &[T]) -> T {
    match values.len() {
        0 => T::default(),
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let (lo, hi) = values.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

/// Sums `f(0) + ... + f(n-1)` in parallel with a thread-count independent result.
pub fn deterministic_sum<T, F>(n: usize, f: F) -> T
where
    T: Copy + Default + Add<Output = T> + Send + Sync,
    F: Fn(usize) -> T + Sync,
{
    let blocks: Vec<T> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let lo = b * BLOCK;
            let hi = (lo + BLOCK).min(n);
            let vals: Vec<T> = (lo..hi).map(&f).collect();
            pairwise_sum(&vals)
        })
        .collect();
    pairwise_sum(&blocks)
}

/// Product quadrature rule along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Nodes on cell corners, halved weights on the faces.
    #[default]
    Trapezoid,
    /// Nodes on cell centers, uniform weights.
    Midpoint,
}

/// Axis-aligned box `center ± half_widths`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompactBox {
    center: Vec3,
    half_widths: Vec3,
}

impl CompactBox {
    pub fn new(center: Vec3, half_widths: Vec3) -> Result<Self, QuadratureError> {
        if let Some(c) = center.iter().find(|c| !c.is_finite()) {
            return Err(invalid("box center", "finite", *c));
        }
        if let Some(h) = half_widths.iter().find(|h| !(h.is_finite() && **h > 0.0)) {
            return Err(invalid("box half width", "finite and > 0", *h));
        }
        Ok(Self {
            center,
            half_widths,
        })
    }

    pub fn cube(center: Vec3, half_width: f64) -> Result<Self, QuadratureError> {
        Self::new(center, Vec3::repeat(half_width))
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn half_widths(&self) -> Vec3 {
        self.half_widths
    }

    pub fn lower(&self) -> Vec3 {
        self.center - self.half_widths
    }

    pub fn upper(&self) -> Vec3 {
        self.center + self.half_widths
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half_widths.product()
    }

    pub fn contains(&self, r: &Vec3) -> bool {
        (0..3).all(|a| (r[a] - self.center[a]).abs() <= self.half_widths[a])
    }

    pub fn contains_box(&self, other: &CompactBox) -> bool {
        self.contains(&other.lower()) && self.contains(&other.upper())
    }

    /// Same center, half widths multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, QuadratureError> {
        Self::new(self.center, self.half_widths * factor)
    }
}

/// Tensor-product grid with per-node quadrature weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSpec {
    origin: Vec3,
    spacing: [f64; 3],
    counts: [usize; 3],
    rule: Rule,
}

impl GridSpec {
    /// `origin` is the first node for the trapezoid rule and the lower box
    /// corner for the midpoint rule.
    pub fn new(
        origin: Vec3,
        spacing: [f64; 3],
        counts: [usize; 3],
        rule: Rule,
    ) -> Result<Self, QuadratureError> {
        if let Some(o) = origin.iter().find(|o| !o.is_finite()) {
            return Err(invalid("grid origin", "finite", *o));
        }
        if let Some(h) = spacing.iter().find(|h| !(h.is_finite() && **h > 0.0)) {
            return Err(invalid("grid spacing", "finite and > 0", *h));
        }
        let min_count = if rule == Rule::Trapezoid { 2 } else { 1 };
        if let Some(c) = counts.iter().find(|c| **c < min_count) {
            return Err(invalid(
                "grid count",
                "at least 2 (trapezoid) or 1 (midpoint)",
                *c as f64,
            ));
        }
        if counts
            .iter()
            .try_fold(1usize, |acc, c| acc.checked_mul(*c))
            .is_none()
        {
            return Err(invalid("grid node count", "representable", f64::INFINITY));
        }
        Ok(Self {
            origin,
            spacing,
            counts,
            rule,
        })
    }

    /// Grid covering `bx` with `counts` nodes (trapezoid) or cells (midpoint) per axis.
    pub fn over_box(
        bx: &CompactBox,
        counts: [usize; 3],
        rule: Rule,
    ) -> Result<Self, QuadratureError> {
        let lo = bx.lower();
        let width = bx.half_widths() * 2.0;
        let mut spacing = [0.0; 3];
        for a in 0..3 {
            let cells = match rule {
                Rule::Trapezoid => counts[a].saturating_sub(1),
                Rule::Midpoint => counts[a],
            };
            if cells == 0 {
                return Err(invalid(
                    "grid count",
                    "at least 2 (trapezoid) or 1 (midpoint)",
                    counts[a] as f64,
                ));
            }
            spacing[a] = width[a] / cells as f64;
        }
        Self::new(lo, spacing, counts, rule)
    }

    pub fn rule(&self) -> Rule {
        self.rule
    }

    pub fn counts(&self) -> [usize; 3] {
        self.counts
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn split(&self, i: usize) -> [usize; 3] {
        let k = i % self.counts[2];
        let j = (i / self.counts[2]) % self.counts[1];
        let l = i / (self.counts[1] * self.counts[2]);
        [l, j, k]
    }

    fn axis_coord(&self, axis: usize, idx: usize) -> f64 {
        let offset = match self.rule {
            Rule::Trapezoid => idx as f64,
            Rule::Midpoint => idx as f64 + 0.5,
        };
        self.origin[axis] + offset * self.spacing[axis]
    }

    fn axis_weight(&self, axis: usize, idx: usize) -> f64 {
        let h = self.spacing[axis];
        match self.rule {
            Rule::Trapezoid if idx == 0 || idx + 1 == self.counts[axis] => 0.5 * h,
            _ => h,
        }
    }

    pub fn node(&self, i: usize) -> Vec3 {
        let idx = self.split(i);
        Vec3::new(
            self.axis_coord(0, idx[0]),
            self.axis_coord(1, idx[1]),
            self.axis_coord(2, idx[2]),
        )
    }

    pub fn weight(&self, i: usize) -> f64 {
        let idx = self.split(i);
        (0..3).map(|a| self.axis_weight(a, idx[a])).product()
    }

    pub fn is_boundary(&self, i: usize) -> bool {
        let idx = self.split(i);
        (0..3).any(|a| idx[a] == 0 || idx[a] + 1 == self.counts[a])
    }

    /// The box the weights integrate over.
    pub fn bounds(&self) -> CompactBox {
        let mut lo = Vec3::zeros();
        let mut hi = Vec3::zeros();
        for a in 0..3 {
            let cells = match self.rule {
                Rule::Trapezoid => self.counts[a] - 1,
                Rule::Midpoint => self.counts[a],
            };
            lo[a] = self.origin[a];
            hi[a] = self.origin[a] + cells as f64 * self.spacing[a];
        }
        CompactBox::new((lo + hi) * 0.5, (hi - lo) * 0.5).expect("grid validated")
    }

    pub fn volume(&self) -> f64 {
        self.bounds().volume()
    }

    /// Same box, spacing halved.
    pub fn refined(&self) -> Self {
        let counts = match self.rule {
            Rule::Trapezoid => self.counts.map(|c| 2 * c - 1),
            Rule::Midpoint => self.counts.map(|c| 2 * c),
        };
        Self {
            origin: self.origin,
            spacing: self.spacing.map(|h| 0.5 * h),
            counts,
            rule: self.rule,
        }
    }

    /// `sum_i g(r_i, w_i)` with deterministic blocking.
    pub fn reduce<T, G>(&self, g: G) -> T
    where
        T: Copy + Default + Add<Output = T> + Send + Sync,
        G: Fn(&Vec3, f64) -> T + Sync,
    {
        deterministic_sum(self.len(), |i| g(&self.node(i), self.weight(i)))
    }
}

/// `sum_i w_i f(r_i)` over the grid.
pub fn integrate_box<T, F>(f: F, grid: &GridSpec) -> T
where
    T: Copy + Default + Add<Output = T> + std::ops::Mul<f64, Output = T> + Send + Sync,
    F: Fn(&Vec3) -> T + Sync,
{
    grid.reduce(|r, w| f(r) * w)
}

/// Integral of `f` over `bx` with a trapezoid grid of `counts` nodes per axis.
pub fn restrict_local<F>(f: F, bx: &CompactBox, counts: [usize; 3]) -> Result<f64, QuadratureError>
where
    F: Fn(&Vec3) -> f64 + Sync,
{
    let grid = GridSpec::over_box(bx, counts, Rule::Trapezoid)?;
    Ok(integrate_box(f, &grid))
}

/// Values of an integral on successively halved grids and their Richardson limit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtrapolatedIntegral {
    pub levels: Vec<f64>,
    /// Leading error orders eliminated, one per extra level.
    pub orders: Vec<u32>,
    pub value: f64,
}

/// Integrates on `grid` and `levels - 1` successive refinements, then removes
/// the error terms `h^orders[0]`, `h^orders[1]`, ... by Richardson extrapolation.
pub fn extrapolated_integral<F>(f: F, grid: &GridSpec, orders: &[u32]) -> ExtrapolatedIntegral
where
    F: Fn(&Vec3) -> f64 + Sync,
{
    let mut levels = Vec::with_capacity(orders.len() + 1);
    let mut g = grid.clone();
    levels.push(integrate_box(&f, &g));
    for _ in orders {
        g = g.refined();
        levels.push(integrate_box(&f, &g));
    }
    ExtrapolatedIntegral {
        value: richardson_table(&levels, orders),
        levels,
        orders: orders.to_vec(),
    }
}

/// Richardson tableau for step ratio 2; `values[k]` uses step `h / 2^k`.
pub fn richardson_table(values: &[f64], orders: &[u32]) -> f64 {
    let mut row = values.to_vec();
    for &p in orders.iter().take(values.len().saturating_sub(1)) {
        let factor = 2f64.powi(p as i32);
        row = row
            .windows(2)
            .map(|w| (factor * w[1] - w[0]) / (factor - 1.0))
            .collect();
    }
    row[row.len() - 1]
}

/// One-dimensional Gauss–Hermite rule for the weight `exp(-t^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermiteRule {
    order: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermiteRule {
    pub fn new(order: usize) -> Result<Self, QuadratureError> {
        let deg = NonZeroUsize::new(order)
            .filter(|d| d.get() >= 2)
            .ok_or_else(|| invalid("Gauss-Hermite order", ">= 2", order as f64))?;
        let (nodes, weights) = GaussHermite::new(deg)
            .as_node_weight_pairs()
            .iter()
            .copied()
            .unzip();
        Ok(Self {
            order,
            nodes,
            weights,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `int exp(-t^2) f(t) dt`.
    pub fn integrate_1d(&self, f: impl Fn(f64) -> f64) -> f64 {
        let vals: Vec<f64> = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(t, w)| w * f(*t))
            .collect();
        pairwise_sum(&vals)
    }
}

/// `int exp(-scale |u - center|^2) f(u) du` by the tensor-product rule.
///
/// `f` is the integrand with its Gaussian envelope already divided out.
pub fn gauss_hermite_integral(
    f: impl Fn(&Vec3) -> C64,
    center: &Vec3,
    scale: f64,
    rule: &GaussHermiteRule,
) -> C64 {
    let inv = 1.0 / scale.sqrt();
    let n = rule.order;
    let mut vals = Vec::with_capacity(n * n * n);
    for (tx, wx) in rule.nodes.iter().zip(&rule.weights) {
        for (ty, wy) in rule.nodes.iter().zip(&rule.weights) {
            for (tz, wz) in rule.nodes.iter().zip(&rule.weights) {
                let u = center + Vec3::new(*tx, *ty, *tz) * inv;
                vals.push(f(&u) * (wx * wy * wz));
            }
        }
    }
    pairwise_sum(&vals) * inv.powi(3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::make_gaussian_density;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn double_factorial_moment(k: u32) -> f64 {
        // int t^k exp(-t^2) dt
        if k % 2 == 1 {
            return 0.0;
        }
        let mut v = PI.sqrt();
        let mut j = 1;
        while j < k {
            v *= j as f64 / 2.0;
            j += 2;
        }
        v
    }

    #[test]
    fn unit_box_volume() {
        let bx = CompactBox::new(Vec3::new(0.5, 0.5, 0.5), Vec3::repeat(0.5)).unwrap();
        let grid = GridSpec::over_box(&bx, [5, 7, 3], Rule::Trapezoid).unwrap();
        assert_relative_eq!(integrate_box(|_| 1.0, &grid), 1.0, epsilon = 1e-15);
        assert_eq!(grid.len(), 105);
        assert!((0..grid.len()).all(|i| grid.weight(i) > 0.0));
        let mid = GridSpec::over_box(&bx, [4, 4, 4], Rule::Midpoint).unwrap();
        assert_relative_eq!(integrate_box(|_| 1.0, &mid), 1.0, epsilon = 1e-15);
        assert_relative_eq!(mid.volume(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn gaussian_normalization_and_second_moment() {
        let rho = make_gaussian_density(1.0, 1.0, Vec3::zeros()).unwrap();
        let grid = GridSpec::over_box(&rho.default_box(), [48; 3], Rule::Trapezoid).unwrap();
        assert!((integrate_box(|r| rho.eval(r), &grid) - 1.0).abs() < 1e-10);
        let r2 = integrate_box(|r| rho.eval(r) * r.norm_squared(), &grid);
        assert_relative_eq!(r2, 1.5, max_relative = 1e-10);
    }

    #[test]
    fn trapezoid_refinement_order_on_a_smooth_bounded_integrand() {
        let bx = CompactBox::cube(Vec3::zeros(), 1.0).unwrap();
        let f = |r: &Vec3| (r.x + 0.5 * r.y * r.y).cos() * (1.0 + r.z).exp();
        let exact = {
            // tensor Simpson reference on a much finer grid
            let g = GridSpec::over_box(&bx, [257; 3], Rule::Trapezoid).unwrap();
            extrapolated_integral(f, &g, &[2]).value
        };
        let g1 = GridSpec::over_box(&bx, [9; 3], Rule::Trapezoid).unwrap();
        let e1 = (integrate_box(f, &g1) - exact).abs();
        let e2 = (integrate_box(f, &g1.refined()) - exact).abs();
        assert!((e1 / e2).log2() >= 1.9, "order {}", (e1 / e2).log2());
    }

    #[test]
    fn gauss_hermite_monomials_are_exact() {
        for order in [2, 4, 8, 16, 32] {
            let rule = GaussHermiteRule::new(order).unwrap();
            // high powers amplify rounding in the outermost nodes, so stop at degree 40
            for k in 0..(2 * order as u32).min(41) {
                let exact = double_factorial_moment(k);
                let got = rule.integrate_1d(|t| t.powi(k as i32));
                let scale = double_factorial_moment(k + (k % 2)).max(1.0);
                assert!(
                    (got - exact).abs() <= 1e-10 * scale,
                    "order {order}, k {k}: {got} vs {exact}"
                );
            }
        }
        assert!(GaussHermiteRule::new(1).is_err());
    }

    #[test]
    fn gaussian_volume_and_fourier_transform() {
        let rule = GaussHermiteRule::new(32).unwrap();
        let lambda = 0.7;
        let v = gauss_hermite_integral(
            |_| C64::new(1.0, 0.0),
            &Vec3::new(0.3, -1.0, 2.0),
            4.0 * lambda,
            &rule,
        );
        assert_relative_eq!(v.re, (PI / (4.0 * lambda)).powf(1.5), max_relative = 1e-13);
        let k = Vec3::new(1.0, 0.0, 0.0);
        let ft = gauss_hermite_integral(
            |u| C64::from_polar(1.0, k.dot(u)),
            &Vec3::zeros(),
            1.0,
            &rule,
        );
        assert_relative_eq!(ft.re, PI.powf(1.5) * (-0.25f64).exp(), max_relative = 1e-13);
        assert!(ft.im.abs() < 1e-14);
    }

    #[test]
    fn polynomial_integrals_do_not_move_under_order_doubling() {
        let f = |u: &Vec3| C64::new(1.0 + u.x * u.x * u.y * u.y + u.z.powi(4), 0.0);
        let a = gauss_hermite_integral(f, &Vec3::zeros(), 2.0, &GaussHermiteRule::new(8).unwrap());
        let b = gauss_hermite_integral(f, &Vec3::zeros(), 2.0, &GaussHermiteRule::new(16).unwrap());
        assert!((a - b).norm() <= 1e-12 * a.norm());
    }

    #[test]
    fn local_restriction() {
        let rho = make_gaussian_density(1.0, 1.0, Vec3::zeros()).unwrap();
        let f = |r: &Vec3| rho.eval(r);
        let big = CompactBox::cube(Vec3::zeros(), 8.0).unwrap();
        assert!((restrict_local(f, &big, [49; 3]).unwrap() - 1.0).abs() < 1e-10);
        let small = CompactBox::cube(Vec3::zeros(), 1.0).unwrap();
        let part = restrict_local(f, &small, [49; 3]).unwrap();
        // erf(1)^3
        assert_relative_eq!(
            part,
            0.842_700_792_949_714_9f64.powi(3),
            max_relative = 1e-3
        );
        assert!(part < 1.0);
    }

    #[test]
    fn richardson_removes_known_orders() {
        // values exact + c h^2 + d h^4
        let vals: Vec<f64> = (0..3)
            .map(|k| {
                let h = 0.5f64.powi(k);
                3.0 + 0.7 * h * h - 0.2 * h.powi(4)
            })
            .collect();
        assert_relative_eq!(richardson_table(&vals, &[2, 4]), 3.0, epsilon = 1e-14);
    }

    #[test]
    fn bad_specs_are_rejected() {
        assert!(CompactBox::cube(Vec3::zeros(), 0.0).is_err());
        assert!(GridSpec::new(Vec3::zeros(), [0.1, -0.1, 0.1], [3; 3], Rule::Trapezoid).is_err());
        assert!(GridSpec::new(Vec3::zeros(), [0.1; 3], [1, 3, 3], Rule::Trapezoid).is_err());
        assert!(GridSpec::new(Vec3::zeros(), [0.1; 3], [1, 3, 3], Rule::Midpoint).is_ok());
    }

    proptest! {
        #[test]
        fn weights_sum_to_volume(
            nx in 2usize..9, ny in 2usize..9, nz in 2usize..9,
            hx in 0.1f64..3.0, hy in 0.1f64..3.0, hz in 0.1f64..3.0,
            midpoint in any::<bool>(),
        ) {
            let rule = if midpoint { Rule::Midpoint } else { Rule::Trapezoid };
            let bx = CompactBox::new(Vec3::new(0.1, -0.4, 2.0), Vec3::new(hx, hy, hz)).unwrap();
            let grid = GridSpec::over_box(&bx, [nx, ny, nz], rule).unwrap();
            let total = integrate_box(|_| 1.0, &grid);
            prop_assert!((total - bx.volume()).abs() <= 1e-12 * bx.volume());
            prop_assert_eq!(grid.len(), nx * ny * nz);
            let slack = bx.scaled(1.0 + 1e-12).unwrap();
            prop_assert!((0..grid.len()).all(|i| slack.contains(&grid.node(i))));
        }

        #[test]
        fn box_monotonicity_for_nonnegative_integrands(h1 in 0.5f64..3.0, grow in 1.0f64..2.0) {
            let f = |r: &Vec3| (-(r.norm_squared())).exp() * (1.0 + r.x * r.x);
            let inner = CompactBox::cube(Vec3::zeros(), h1).unwrap();
            let outer = inner.scaled(grow).unwrap();
            let a = restrict_local(f, &inner, [41; 3]).unwrap();
            let b = restrict_local(f, &outer, [41; 3]).unwrap();
            prop_assert!(a <= b * (1.0 + 1e-6));
        }

        #[test]
        fn sums_do_not_depend_on_thread_count(n in 1usize..20_000, threads in 1usize..5) {
            let f = |i: usize| ((i as f64) * 0.37).sin() / (1.0 + i as f64);
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let a = pool.install(|| deterministic_sum(n, f));
            let b = deterministic_sum(n, f);
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
