//! Functional principal components: eigen-decomposition of a fitted
//! covariance surface into eigenvalues and L²-orthonormal eigenfunctions.
//!
//! With `Ĉ(s, t) = B(s)ᵀ Ξ̂ B(t)` and Gram matrix `W = ∫BBᵀ`, the operator
//! eigenproblem `∫Ĉ(s,t)φ(s)ds = κ·φ(t)` reduces to the symmetric matrix
//! problem `W^{1/2} Ξ̂ W^{1/2} u = κ u`, with eigenfunction coefficients
//! `c = W^{−1/2}u` so that `cᵀWc = 1`. Negative eigenvalues (the symmetric
//! fit is not constrained to be PSD) are reported in the spectrum but never
//! retained as components.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bspline::{BasisError, KnotVector, SplineBasis};
use crate::covariance::CovFit;

#[derive(Debug, Error)]
pub enum FpcaError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("requested {requested} components but the basis dimension is {q}")]
    TooManyComponents { requested: usize, q: usize },
    #[error("component index {index} out of range (retained {retained})")]
    ComponentOutOfRange { index: usize, retained: usize },
    #[error("evaluation grid must contain at least two points")]
    GridTooSmall,
}

/// One retained principal component: eigenvalue and basis coefficients of
/// the eigenfunction `φ̂_j(t) = B(t)ᵀ c_j`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrincipalComponent {
    pub eigenvalue: f64,
    pub coefficients: Vec<f64>,
}

/// Spectrum and retained components of a fitted covariance operator.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(into = "FpcaResultDto", try_from = "FpcaResultDto")]
pub struct FpcaResult {
    basis: SplineBasis,
    /// Full spectrum, sorted nonincreasing (negative values included for
    /// diagnostics).
    pub eigenvalues: Vec<f64>,
    /// Retained components: the requested number among the positive part of
    /// the spectrum, sign-normalized.
    components: Vec<PrincipalComponent>,
    pub num_requested: usize,
}

impl FpcaResult {
    pub fn basis(&self) -> &SplineBasis {
        &self.basis
    }

    pub fn components(&self) -> &[PrincipalComponent] {
        &self.components
    }

    pub fn num_retained(&self) -> usize {
        self.components.len()
    }

    /// Evaluate the `j`-th retained eigenfunction (0-based).
    pub fn eval_component(&self, j: usize, t: f64) -> Result<f64, FpcaError> {
        let comp = self
            .components
            .get(j)
            .ok_or(FpcaError::ComponentOutOfRange {
                index: j,
                retained: self.components.len(),
            })?;
        let row = self.basis.row(t)?;
        Ok(row
            .iter()
            .zip(&comp.coefficients)
            .map(|(b, c)| b * c)
            .sum())
    }

    pub fn eval_component_grid(&self, j: usize, grid: &[f64]) -> Result<Vec<f64>, FpcaError> {
        grid.iter().map(|&t| self.eval_component(j, t)).collect()
    }

    /// Rank-`p` Mercer reconstruction `Σ_{j<p} κ̂_j φ̂_j(t) φ̂_j(s)`.
    pub fn reconstruct(&self, p: usize, t: f64, s: f64) -> Result<f64, FpcaError> {
        if p > self.components.len() {
            return Err(FpcaError::ComponentOutOfRange {
                index: p,
                retained: self.components.len(),
            });
        }
        let bt = self.basis.row(t)?;
        let bs = self.basis.row(s)?;
        Ok(self.components[..p]
            .iter()
            .map(|c| {
                let phi_t: f64 = bt.iter().zip(&c.coefficients).map(|(b, v)| b * v).sum();
                let phi_s: f64 = bs.iter().zip(&c.coefficients).map(|(b, v)| b * v).sum();
                c.eigenvalue * phi_t * phi_s
            })
            .sum())
    }

    /// Cumulative share of each retained eigenvalue in the positive spectrum.
    pub fn variance_shares(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().filter(|&&v| v > 0.0).sum();
        if total <= 0.0 {
            return vec![0.0; self.components.len()];
        }
        let mut acc = 0.0;
        self.components
            .iter()
            .map(|c| {
                acc += c.eigenvalue;
                acc / total
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct FpcaResultDto {
    domain_end: f64,
    interior_knots: Vec<f64>,
    order: usize,
    eigenvalues: Vec<f64>,
    components: Vec<PrincipalComponent>,
    num_requested: usize,
}

impl From<FpcaResult> for FpcaResultDto {
    fn from(r: FpcaResult) -> Self {
        Self {
            domain_end: r.basis.domain_end(),
            interior_knots: r.basis.knots().interior().to_vec(),
            order: r.basis.order(),
            eigenvalues: r.eigenvalues,
            components: r.components,
            num_requested: r.num_requested,
        }
    }
}

impl TryFrom<FpcaResultDto> for FpcaResult {
    type Error = String;

    fn try_from(d: FpcaResultDto) -> Result<Self, String> {
        let knots = KnotVector::new(d.interior_knots, d.domain_end, d.order, Some(f64::INFINITY))
            .map_err(|e| e.to_string())?;
        let basis = SplineBasis::from_knots(knots).map_err(|e| e.to_string())?;
        Ok(Self {
            basis,
            eigenvalues: d.eigenvalues,
            components: d.components,
            num_requested: d.num_requested,
        })
    }
}

/// Solve the operator eigenproblem of the fitted covariance and retain up to
/// `num_components` components with positive eigenvalues.
pub fn eigen_decompose(fit: &CovFit, num_components: usize) -> Result<FpcaResult, FpcaError> {
    let basis = fit.basis();
    let q = basis.dim();
    if num_components > q {
        return Err(FpcaError::TooManyComponents {
            requested: num_components,
            q,
        });
    }

    // W^{1/2} and W^{−1/2} from the symmetric eigendecomposition of the
    // Gram matrix (SPD by construction).
    let w = basis.gram().clone();
    let w_eig = nalgebra::SymmetricEigen::new(w);
    let mut w_half = DMatrix::zeros(q, q);
    let mut w_half_inv = DMatrix::zeros(q, q);
    for k in 0..q {
        let d = w_eig.eigenvalues[k].max(0.0).sqrt();
        let col = w_eig.eigenvectors.column(k);
        let outer = &col * col.transpose();
        w_half += &outer * d;
        w_half_inv += outer / d;
    }

    let mid = &w_half * fit.coefficients() * &w_half;
    let mid = (&mid + mid.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(mid);

    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();

    let integrals = basis.integrals();
    let mut components = Vec::new();
    for &k in &order {
        if components.len() >= num_components || eig.eigenvalues[k] <= 0.0 {
            break;
        }
        let mut c: DVector<f64> = &w_half_inv * eig.eigenvectors.column(k);
        apply_sign_convention(&mut c, &integrals);
        components.push(PrincipalComponent {
            eigenvalue: eig.eigenvalues[k],
            coefficients: c.iter().copied().collect(),
        });
    }

    Ok(FpcaResult {
        basis: basis.clone(),
        eigenvalues,
        components,
        num_requested: num_components,
    })
}

/// Orient `c` so `∫φ̂ > 0`; when that integral is numerically zero, make the
/// first non-negligible coefficient positive.
fn apply_sign_convention(c: &mut DVector<f64>, integrals: &DVector<f64>) {
    let integral = c.dot(integrals);
    if integral < -1e-8 {
        *c = -&*c;
    } else if integral.abs() <= 1e-8 {
        let scale = c.amax();
        if let Some(first) = c.iter().find(|v| v.abs() > 1e-8 * scale.max(1e-300)) {
            if *first < 0.0 {
                *c = -&*c;
            }
        }
    }
}

/// Integrated squared error `∫ {φ̂₁(t) − φ₁(t)}² dt` on a grid, after sign
/// alignment (flip `φ̂₁` when `∫φ̂₁φ₁ < 0`).
pub fn first_pc_mise<F: Fn(f64) -> f64>(
    result: &FpcaResult,
    truth: F,
    grid: &[f64],
) -> Result<f64, FpcaError> {
    if grid.len() < 2 {
        return Err(FpcaError::GridTooSmall);
    }
    let est = result.eval_component_grid(0, grid)?;
    let truth_vals: Vec<f64> = grid.iter().map(|&t| truth(t)).collect();
    Ok(aligned_squared_error(&est, &truth_vals, grid))
}

/// Trapezoid `∫(est − truth)²` after sign-aligning `est` to `truth`.
pub fn aligned_squared_error(est: &[f64], truth: &[f64], grid: &[f64]) -> f64 {
    let inner = trapezoid(grid, est.iter().zip(truth).map(|(e, t)| e * t));
    let sign = if inner < 0.0 { -1.0 } else { 1.0 };
    trapezoid(
        grid,
        est.iter().zip(truth).map(|(e, t)| {
            let d = sign * e - t;
            d * d
        }),
    )
}

fn trapezoid(grid: &[f64], values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.collect();
    let mut acc = 0.0;
    for i in 1..grid.len() {
        acc += 0.5 * (grid[i] - grid[i - 1]) * (vals[i] + vals[i - 1]);
    }
    acc
}
