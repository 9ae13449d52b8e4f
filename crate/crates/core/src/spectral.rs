//! Nyström discretization `M_ij = sqrt(w_i w_j) K(r_i, r_j)` and spectra.

use ndarray::{Array1, Array2, Axis};
use ndarray_linalg::{EigValsh, UPLO};
use rayon::prelude::*;
use serde::Serialize;

use crate::kernels::{Admissibility, KernelKind, KernelPoint, RdmKernel};
use crate::quadrature::{pairwise_sum, GridSpec};
use crate::report::Check;
use crate::{Vec3, C64};

/// Largest node count assembled as a dense matrix by default.
pub const DEFAULT_DENSE_LIMIT: usize = 4096;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpectralError {
    #[error("grid has {nodes} nodes, above the dense limit {limit}; use the matrix-free path")]
    DenseLimit { nodes: usize, limit: usize },
    #[error("eigensolver failed on a {n}x{n} matrix (Frobenius norm {frobenius:e}): {message}")]
    Eigensolver {
        n: usize,
        frobenius: f64,
        message: String,
    },
}

/// Hermitian matrix of a kernel over grid nodes.
#[derive(Debug, Clone)]
pub struct DiscretizedOperator {
    pub nodes: Vec<Vec3>,
    pub weights: Vec<f64>,
    pub matrix: Array2<C64>,
    pub label: String,
    pub occ_max: f64,
    /// Trace the spectrum should reproduce.
    pub expected_trace: f64,
}

fn kernel_points(kernel: &RdmKernel, grid: &GridSpec) -> (Vec<Vec3>, Vec<f64>, Vec<KernelPoint>) {
    let nodes: Vec<Vec3> = (0..grid.len()).map(|i| grid.node(i)).collect();
    let weights: Vec<f64> = (0..grid.len()).map(|i| grid.weight(i)).collect();
    let points = nodes.par_iter().map(|r| kernel.point(r)).collect();
    (nodes, weights, points)
}

pub fn discretize(
    kernel: &RdmKernel,
    grid: &GridSpec,
    dense_limit: usize,
) -> Result<DiscretizedOperator, SpectralError> {
    let n = grid.len();
    if n > dense_limit {
        return Err(SpectralError::DenseLimit {
            nodes: n,
            limit: dense_limit,
        });
    }
    let (nodes, weights, points) = kernel_points(kernel, grid);
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut matrix = Array2::<C64>::zeros((n, n));
    matrix
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            for j in 0..n {
                row[j] = kernel.eval_points(&points[i], &points[j]) * (sqrt_w[i] * sqrt_w[j]);
            }
        });
    Ok(DiscretizedOperator {
        nodes,
        weights,
        matrix,
        label: kernel.label(),
        occ_max: kernel.occ_max(),
        expected_trace: kernel.rho().declared_n(),
    })
}

impl DiscretizedOperator {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn frobenius(&self) -> f64 {
        self.matrix.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `||M - M^dagger||_F / ||M||_F`.
    pub fn hermiticity_residual(&self) -> f64 {
        let n = self.len();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += (self.matrix[(i, j)] - self.matrix[(j, i)].conj()).norm_sqr();
            }
        }
        acc.sqrt() / self.frobenius()
    }

    pub fn is_real(&self) -> bool {
        self.matrix.iter().all(|z| z.im == 0.0)
    }

    pub fn trace(&self) -> f64 {
        let diag: Vec<f64> = self.matrix.diag().iter().map(|z| z.re).collect();
        pairwise_sum(&diag)
    }

    /// All eigenvalues, descending.
    pub fn eigenvalues(&self) -> Result<Vec<f64>, SpectralError> {
        let fail = |e: ndarray_linalg::error::LinalgError| SpectralError::Eigensolver {
            n: self.len(),
            frobenius: self.frobenius(),
            message: e.to_string(),
        };
        let ev: Array1<f64> = if self.is_real() {
            self.matrix
                .mapv(|z| z.re)
                .eigvalsh(UPLO::Lower)
                .map_err(fail)?
        } else {
            self.matrix.eigvalsh(UPLO::Lower).map_err(fail)?
        };
        let mut ev = ev.to_vec();
        ev.sort_by(|a, b| b.total_cmp(a));
        Ok(ev)
    }
}

/// Tolerances for the spectral checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectrumTolerances {
    /// Negative eigenvalues allowed down to `-neg_rel * ||M||`.
    pub neg_rel: f64,
    /// Occupations allowed up to `occ_max * (1 + occ_rel)`.
    pub occ_rel: f64,
    /// Relative distance of the trace from `N`.
    pub trace_rel: f64,
    /// Relative slack on the Hölder eigenvalue bound.
    pub bound_rel: f64,
    pub hermiticity: f64,
}

impl Default for SpectrumTolerances {
    fn default() -> Self {
        Self {
            neg_rel: 1e-8,
            occ_rel: 1e-4,
            trace_rel: 0.02,
            bound_rel: 1e-4,
            hermiticity: 1e-13,
        }
    }
}

/// Hölder eigenvalue bound evaluated at the kernel's narrowest width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EigenBound {
    pub q: f64,
    pub width: f64,
    /// `sqrt(N ||rho||_q (pi/(2 p w))^{3/(2p)})`, a bound on the eigenvalue.
    pub value: f64,
    /// `N ||rho||_q (pi/(2 p w))^{3/(2p)}`, a bound on its square.
    pub squared: f64,
}

impl EigenBound {
    pub fn new(adm: &Admissibility, width: f64) -> Self {
        Self {
            q: adm.q,
            width,
            value: adm.eigenvalue_bound(width),
            squared: adm.eigenvalue_bound_squared(width),
        }
    }
}

/// The width entering the eigenvalue bound: the narrower Gaussian dominates.
pub fn bound_width(kernel: &RdmKernel) -> f64 {
    match kernel.kind() {
        KernelKind::P => kernel.lambda(),
        KernelKind::Q => kernel.mu(),
        KernelKind::D => kernel.lambda().min(kernel.mu()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumReport {
    pub label: String,
    pub nodes: usize,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub trace: f64,
    pub eigenvalue_sum: f64,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub matrix_norm: f64,
    pub hermiticity_residual: f64,
    pub occ_max: f64,
    pub expected_trace: f64,
    pub bounds: Vec<EigenBound>,
    pub tolerances: SpectrumTolerances,
    pub checks: Vec<Check>,
}

pub fn eigen_dense(
    op: &DiscretizedOperator,
    bounds: &[EigenBound],
    tol: SpectrumTolerances,
) -> Result<SpectrumReport, SpectralError> {
    let eigenvalues = op.eigenvalues()?;
    let max = eigenvalues[0];
    let min = eigenvalues[eigenvalues.len() - 1];
    let norm = max.abs().max(min.abs());
    let trace = op.trace();
    let eigenvalue_sum = pairwise_sum(&eigenvalues);
    let herm = op.hermiticity_residual();
    let mut checks = vec![
        Check::at_most("hermiticity", herm, 0.0, tol.hermiticity),
        Check::at_least("positivity", min, 0.0, tol.neg_rel * norm),
        Check::at_most("occupation", max, op.occ_max, tol.occ_rel * op.occ_max),
        Check::within_rel("trace", trace, op.expected_trace, tol.trace_rel),
        Check::within("trace_identity", eigenvalue_sum, trace, 1e-10 * trace.abs()),
    ];
    for b in bounds {
        checks.push(Check::at_most(
            format!("eigen_bound.q{}", b.q),
            max,
            b.value,
            tol.bound_rel * b.value,
        ));
        checks.push(Check::at_most(
            format!("eigen_bound_unsquared.q{}", b.q),
            max,
            b.squared,
            tol.bound_rel * b.squared,
        ));
    }
    Ok(SpectrumReport {
        label: op.label.clone(),
        nodes: op.len(),
        eigenvalues,
        trace,
        eigenvalue_sum,
        min_eigenvalue: min,
        max_eigenvalue: max,
        matrix_norm: norm,
        hermiticity_residual: herm,
        occ_max: op.occ_max,
        expected_trace: op.expected_trace,
        bounds: bounds.to_vec(),
        tolerances: tol,
        checks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerIteration {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `||M x - value x||` for the final unit vector.
    pub residual: f64,
}

/// Dominant eigenvalue of the Nyström matrix without storing it.
///
/// Starts from the normalized all-ones vector and stops when successive
/// Rayleigh quotients differ by at most `tol` relative.
pub fn top_eigenvalue_matfree(
    kernel: &RdmKernel,
    grid: &GridSpec,
    iters: usize,
    tol: f64,
) -> PowerIteration {
    let (_, weights, points) = kernel_points(kernel, grid);
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let n = points.len();
    let apply = |x: &[C64]| -> Vec<C64> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let row: Vec<C64> = (0..n)
                    .map(|j| {
                        kernel.eval_points(&points[i], &points[j]) * (sqrt_w[i] * sqrt_w[j]) * x[j]
                    })
                    .collect();
                pairwise_sum(&row)
            })
            .collect()
    };
    let norm = |x: &[C64]| pairwise_sum(&x.iter().map(|z| z.norm_sqr()).collect::<Vec<_>>()).sqrt();
    let dot = |x: &[C64], y: &[C64]| {
        pairwise_sum(
            &x.iter()
                .zip(y)
                .map(|(a, b)| a.conj() * b)
                .collect::<Vec<_>>(),
        )
    };

    let mut x = vec![C64::new(1.0 / (n as f64).sqrt(), 0.0); n];
    let mut y = apply(&x);
    let mut value = dot(&x, &y).re;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < iters {
        iterations += 1;
        let ny = norm(&y);
        if ny == 0.0 {
            converged = true;
            break;
        }
        x = y.iter().map(|z| z / ny).collect();
        y = apply(&x);
        let next = dot(&x, &y).re;
        let delta = (next - value).abs();
        value = next;
        if delta <= tol * value.abs() {
            converged = true;
            break;
        }
    }
    let residual = norm(
        &y.iter()
            .zip(&x)
            .map(|(a, b)| a - b * value)
            .collect::<Vec<_>>(),
    );
    PowerIteration {
        value,
        iterations,
        converged,
        residual,
    }
}

/// `sum_i w_i D(r_i, r_i)`.
pub fn trace_via_diag(kernel: &RdmKernel, grid: &GridSpec) -> f64 {
    grid.reduce(|r, w| w * kernel.eval(r, r).re)
}
