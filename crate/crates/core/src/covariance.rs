//! Weighted penalized tensor-product spline estimation of the covariance
//! surface `C(s, t)`, with the symmetry constraint imposed through a
//! half-vectorized parameterization.
//!
//! Raw inputs are within-subject products of centered observations at pairs
//! of distinct times (diagonal pairs are excluded, which keeps measurement
//! error out of the surface). The coefficient matrix `Ξ` is symmetric by
//! construction: the regression runs in the `q(q+1)/2` free coordinates
//! `θ_(a,b), a ≤ b`, connected to `vec(Ξ)` by the duplication mapping. The
//! reduced normal equations are accumulated by streaming over pair points;
//! the `N_pairs × q²` design is never materialized.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bspline::{BasisError, KnotVector, SplineBasis};
use crate::intensity::PairWeight;
use crate::io::LongitudinalDataset;
use crate::mean::MeanFit;

#[derive(Debug, Error)]
pub enum CovError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("mean fit evaluation failed: {0}")]
    Mean(#[from] crate::mean::MeanError),
    #[error("smoothing parameter must be positive, got {0}")]
    LambdaNonPositive(f64),
    #[error("negative weight {weight} on pair ({t1}, {t2})")]
    NegativeWeight { t1: f64, t2: f64, weight: f64 },
    #[error("only {got} pair points with positive weight; need at least {needed}")]
    InsufficientData { needed: usize, got: usize },
    #[error("reduced penalized system is singular (min eigenvalue {min_eig:.3e})")]
    RankDeficient { min_eig: f64 },
    #[error("pair weights shape does not match the dataset")]
    WeightShapeMismatch,
    #[error("all GCV scores are non-finite")]
    AllScoresInfinite,
    #[error("empty smoothing-parameter grid")]
    EmptyGrid,
}

/// One raw covariance point: centered product for an ordered within-subject
/// pair of observation times.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawCovPoint {
    pub subject: usize,
    pub t1: f64,
    pub t2: f64,
    /// `G_i = {X_ij − μ̂(t_ij)}{X_il − μ̂(t_il)}`
    pub value: f64,
    pub weight: f64,
}

/// Build raw covariance points from the dataset, the fitted mean, and the
/// pair weights. A subject with a single observation contributes nothing.
pub fn raw_cov_points(
    data: &LongitudinalDataset,
    mean_fit: &MeanFit,
    pair_weights: &[Vec<PairWeight>],
) -> Result<Vec<RawCovPoint>, CovError> {
    if pair_weights.len() != data.n() {
        return Err(CovError::WeightShapeMismatch);
    }
    let mut points = Vec::new();
    for (idx, (s, pw)) in data.subjects().iter().zip(pair_weights).enumerate() {
        // Center once per observation.
        let centered: Vec<(f64, f64)> = s
            .outcomes
            .iter()
            .map(|o| Ok((o.time, o.value - mean_fit.evaluate(o.time)?)))
            .collect::<Result<_, CovError>>()?;
        for p in pw {
            let (t1, r1) = centered[p.first];
            let (t2, r2) = centered[p.second];
            points.push(RawCovPoint {
                subject: idx,
                t1,
                t2,
                value: r1 * r2,
                weight: p.weight,
            });
        }
    }
    Ok(points)
}

/// Fitted covariance surface `Ĉ(t, s) = B(t)ᵀ Ξ̂ B(s)` with `Ξ̂ = Ξ̂ᵀ`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(into = "CovFitDto", try_from = "CovFitDto")]
pub struct CovFit {
    basis: SplineBasis,
    xi: DMatrix<f64>,
    lambda: f64,
    penalty_order: usize,
    pub edf: f64,
    pub gcv_score: Option<f64>,
}

impl CovFit {
    pub fn basis(&self) -> &SplineBasis {
        &self.basis
    }

    /// Symmetric coefficient matrix `Ξ̂`.
    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.xi
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn penalty_order(&self) -> usize {
        self.penalty_order
    }

    pub fn evaluate(&self, t: f64, s: f64) -> Result<f64, CovError> {
        let bt = self.basis.row(t)?;
        let bs = self.basis.row(s)?;
        Ok((bt.transpose() * &self.xi * bs)[(0, 0)])
    }

    /// Evaluate on a tensor grid; entry `(i, j)` is `Ĉ(grid[i], grid[j])`.
    pub fn evaluate_grid(&self, grid: &[f64]) -> Result<DMatrix<f64>, CovError> {
        let rows: Vec<DVector<f64>> = grid
            .iter()
            .map(|&t| self.basis.row(t).map_err(CovError::from))
            .collect::<Result<_, _>>()?;
        let mut out = DMatrix::zeros(grid.len(), grid.len());
        for (i, bt) in rows.iter().enumerate() {
            let xi_bt = &self.xi * bt;
            for (j, bs) in rows.iter().enumerate() {
                out[(i, j)] = xi_bt.dot(bs);
            }
        }
        Ok(out)
    }

    /// Roughness `η̂ᵀ Q_C η̂` of the fitted surface.
    pub fn roughness(&self) -> f64 {
        let q = self.basis.dim();
        let qc = self
            .basis
            .penalty_cov(self.penalty_order)
            .expect("order validated at fit time");
        let eta = DVector::from_fn(q * q, |k, _| self.xi[(k / q, k % q)]);
        (eta.transpose() * qc * &eta)[(0, 0)]
    }
}

#[derive(Serialize, Deserialize)]
struct CovFitDto {
    domain_end: f64,
    interior_knots: Vec<f64>,
    order: usize,
    penalty_order: usize,
    /// Upper triangle of `Ξ̂`, row-major.
    xi_upper: Vec<f64>,
    lambda: f64,
    edf: f64,
    gcv_score: Option<f64>,
}

impl From<CovFit> for CovFitDto {
    fn from(f: CovFit) -> Self {
        let q = f.basis.dim();
        let mut xi_upper = Vec::with_capacity(q * (q + 1) / 2);
        for a in 0..q {
            for b in a..q {
                xi_upper.push(f.xi[(a, b)]);
            }
        }
        Self {
            domain_end: f.basis.domain_end(),
            interior_knots: f.basis.knots().interior().to_vec(),
            order: f.basis.order(),
            penalty_order: f.penalty_order,
            xi_upper,
            lambda: f.lambda,
            edf: f.edf,
            gcv_score: f.gcv_score,
        }
    }
}

impl TryFrom<CovFitDto> for CovFit {
    type Error = String;

    fn try_from(d: CovFitDto) -> Result<Self, String> {
        let knots = KnotVector::new(d.interior_knots, d.domain_end, d.order, Some(f64::INFINITY))
            .map_err(|e| e.to_string())?;
        let basis = SplineBasis::from_knots(knots).map_err(|e| e.to_string())?;
        let q = basis.dim();
        if d.xi_upper.len() != q * (q + 1) / 2 {
            return Err("coefficient length does not match basis dimension".into());
        }
        let mut xi = DMatrix::zeros(q, q);
        let mut it = d.xi_upper.iter();
        for a in 0..q {
            for b in a..q {
                let v = *it.next().unwrap();
                xi[(a, b)] = v;
                xi[(b, a)] = v;
            }
        }
        Ok(Self {
            basis,
            xi,
            lambda: d.lambda,
            penalty_order: d.penalty_order,
            edf: d.edf,
            gcv_score: d.gcv_score,
        })
    }
}

/// Index of the free coordinate for basis pair `(a, b)`, `a ≤ b`.
fn reduced_index(q: usize, a: usize, b: usize) -> usize {
    debug_assert!(a <= b);
    a * (2 * q - a + 1) / 2 + (b - a)
}

/// Reduced design machinery shared by fitting and GCV.
struct CovSystem {
    q: usize,
    /// Sparse reduced design rows `(index, value)` per point.
    rows: Vec<Vec<(usize, f64)>>,
    values: Vec<f64>,
    weights: Vec<f64>,
    /// `Σ w φφᵀ`
    m_mat: DMatrix<f64>,
    /// `Σ w G φ`
    rhs: DVector<f64>,
    /// Duplication-reduced penalty `Q_r = DᵀQ_C D`.
    penalty: DMatrix<f64>,
}

impl CovSystem {
    fn build(
        points: &[RawCovPoint],
        basis: &SplineBasis,
        penalty_order: usize,
    ) -> Result<Self, CovError> {
        let q = basis.dim();
        let r = q * (q + 1) / 2;
        let qc = basis.penalty_cov(penalty_order)?;

        // Q_r[(a,b),(c,d)] sums Q_C over the 1–2 vec positions of each
        // reduced coordinate.
        let mut penalty = DMatrix::zeros(r, r);
        let positions = |a: usize, b: usize| -> Vec<usize> {
            if a == b {
                vec![a * q + a]
            } else {
                vec![a * q + b, b * q + a]
            }
        };
        for a in 0..q {
            for b in a..q {
                let pj = positions(a, b);
                let j = reduced_index(q, a, b);
                for c in 0..q {
                    for d in c..q {
                        let pk = positions(c, d);
                        let k = reduced_index(q, c, d);
                        let mut v = 0.0;
                        for &p1 in &pj {
                            for &p2 in &pk {
                                v += qc[(p1, p2)];
                            }
                        }
                        penalty[(j, k)] = v;
                    }
                }
            }
        }

        let mut m_mat = DMatrix::zeros(r, r);
        let mut rhs = DVector::zeros(r);
        let mut rows = Vec::with_capacity(points.len());
        let mut values = Vec::with_capacity(points.len());
        let mut weights = Vec::with_capacity(points.len());
        let mut scratch = vec![0.0_f64; r];
        let mut positive = 0usize;

        for p in points {
            if p.weight < 0.0 || !p.weight.is_finite() {
                return Err(CovError::NegativeWeight {
                    t1: p.t1,
                    t2: p.t2,
                    weight: p.weight,
                });
            }
            if p.weight > 0.0 {
                positive += 1;
            }
            let bt = basis.row(p.t1)?;
            let bs = basis.row(p.t2)?;
            // Reduced row: φ_(a,b) = B_a(t)B_b(s) + B_b(t)B_a(s) for a < b,
            // φ_(a,a) = B_a(t)B_a(s).
            let mut touched: Vec<usize> = Vec::with_capacity(basis.order() * basis.order());
            for (a, &va) in bt.iter().enumerate() {
                if va == 0.0 {
                    continue;
                }
                for (b, &vb) in bs.iter().enumerate() {
                    if vb == 0.0 {
                        continue;
                    }
                    let idx = if a <= b {
                        reduced_index(q, a, b)
                    } else {
                        reduced_index(q, b, a)
                    };
                    if scratch[idx] == 0.0 {
                        touched.push(idx);
                    }
                    scratch[idx] += va * vb;
                }
            }
            touched.sort_unstable();
            let row: Vec<(usize, f64)> = touched
                .iter()
                .map(|&idx| {
                    let v = scratch[idx];
                    scratch[idx] = 0.0;
                    (idx, v)
                })
                .collect();

            for &(i, vi) in &row {
                rhs[i] += p.weight * p.value * vi;
                for &(j, vj) in &row {
                    m_mat[(i, j)] += p.weight * vi * vj;
                }
            }
            rows.push(row);
            values.push(p.value);
            weights.push(p.weight);
        }

        if positive < r {
            return Err(CovError::InsufficientData {
                needed: r,
                got: positive,
            });
        }

        Ok(Self {
            q,
            rows,
            values,
            weights,
            m_mat,
            rhs,
            penalty,
        })
    }

    fn solve(
        &self,
        lambda: f64,
    ) -> Result<(DVector<f64>, Cholesky<f64, nalgebra::Dyn>), CovError> {
        let a = &self.m_mat + &self.penalty * (lambda / 2.0);
        let chol = Cholesky::new(a.clone()).ok_or_else(|| {
            let eig = nalgebra::SymmetricEigen::new(a.clone());
            CovError::RankDeficient {
                min_eig: eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min),
            }
        })?;
        let mut theta = chol.solve(&self.rhs);
        let resid = &self.rhs - &a * &theta;
        theta += chol.solve(&resid);
        Ok((theta, chol))
    }

    fn gcv(&self, theta: &DVector<f64>, chol: &Cholesky<f64, nalgebra::Dyn>) -> (f64, f64) {
        let n = self.rows.len() as f64;
        let edf = chol.solve(&self.m_mat).trace();
        let denom = (n - edf) / n;
        if denom <= 0.0 {
            return (f64::INFINITY, edf);
        }
        let rss: f64 = self
            .rows
            .iter()
            .zip(&self.values)
            .zip(&self.weights)
            .map(|((row, &y), &w)| {
                let fit: f64 = row.iter().map(|&(i, v)| v * theta[i]).sum();
                let r = y - fit;
                w * r * r
            })
            .sum();
        ((rss / n) / (denom * denom), edf)
    }

    fn xi_from(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let q = self.q;
        let mut xi = DMatrix::zeros(q, q);
        for a in 0..q {
            for b in a..q {
                let v = theta[reduced_index(q, a, b)];
                xi[(a, b)] = v;
                xi[(b, a)] = v;
            }
        }
        xi
    }
}

/// Fit the symmetric penalized surface at a fixed smoothing parameter.
pub fn fit_cov(
    points: &[RawCovPoint],
    basis: &SplineBasis,
    penalty_order: usize,
    lambda: f64,
) -> Result<CovFit, CovError> {
    if !(lambda > 0.0) {
        return Err(CovError::LambdaNonPositive(lambda));
    }
    let system = CovSystem::build(points, basis, penalty_order)?;
    let (theta, chol) = system.solve(lambda)?;
    let edf = chol.solve(&system.m_mat).trace();
    Ok(CovFit {
        basis: basis.clone(),
        xi: system.xi_from(&theta),
        lambda,
        penalty_order,
        edf,
        gcv_score: None,
    })
}

/// GCV selection result for the covariance smoothing parameter.
#[derive(Clone, Debug)]
pub struct CovGcv {
    pub fit: CovFit,
    pub lambda: f64,
    pub scores: Vec<(f64, f64)>,
    /// Theory cap `q^{−(2m−2)}` from the covariance consistency rate;
    /// diagnostic only.
    pub lambda_theory_cap: f64,
}

pub fn gcv_select_cov(
    points: &[RawCovPoint],
    basis: &SplineBasis,
    penalty_order: usize,
    grid: &[f64],
) -> Result<CovGcv, CovError> {
    if grid.is_empty() {
        return Err(CovError::EmptyGrid);
    }
    let system = CovSystem::build(points, basis, penalty_order)?;
    let mut best: Option<(f64, f64, DVector<f64>, f64)> = None;
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        if !(lambda > 0.0) {
            return Err(CovError::LambdaNonPositive(lambda));
        }
        let (theta, chol) = system.solve(lambda)?;
        let (score, edf) = system.gcv(&theta, &chol);
        scores.push((lambda, score));
        let better = match &best {
            None => score.is_finite(),
            Some((s, ..)) => score < *s,
        };
        if better {
            best = Some((score, lambda, theta, edf));
        }
    }
    let (score, lambda, theta, edf) = best.ok_or(CovError::AllScoresInfinite)?;
    let exponent = 2 * penalty_order as i32 - 2;
    Ok(CovGcv {
        fit: CovFit {
            basis: basis.clone(),
            xi: system.xi_from(&theta),
            lambda,
            penalty_order,
            edf,
            gcv_score: Some(score),
        },
        lambda,
        scores,
        lambda_theory_cap: (basis.dim() as f64).powi(-exponent),
    })
}

/// Default smoothing grid for the pair regression, log-spaced over
/// `[1e-8, 1e4]` times the mean diagonal scale of the reduced cross-product.
pub fn default_lambda_grid(
    points: &[RawCovPoint],
    basis: &SplineBasis,
    size: usize,
) -> Vec<f64> {
    let q = basis.dim() as f64;
    let r = q * (q + 1.0) / 2.0;
    let trace: f64 = points
        .iter()
        .filter(|p| p.weight > 0.0)
        .map(|p| {
            let bt = basis.row(p.t1).map(|b| b.norm_squared()).unwrap_or(0.0);
            let bs = basis.row(p.t2).map(|b| b.norm_squared()).unwrap_or(0.0);
            p.weight * bt * bs
        })
        .sum();
    let scale = (trace / r).max(f64::MIN_POSITIVE);
    crate::mean::log_grid(1e-8 * scale, 1e4 * scale, size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{CovariateRecord, Observation, Subject};
    use crate::mean::{fit_mean, MeanObservation};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn basis(q_minus_order: usize) -> SplineBasis {
        SplineBasis::uniform(1.0, q_minus_order, 4).unwrap()
    }

    fn rank_one_points(
        basis: &SplineBasis,
        v: &DVector<f64>,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<RawCovPoint> {
        (0..n)
            .map(|i| {
                let t1 = rng.random_range(0.0..1.0);
                let t2 = rng.random_range(0.0..1.0);
                let g = basis.row(t1).unwrap().dot(v) * basis.row(t2).unwrap().dot(v);
                RawCovPoint {
                    subject: i,
                    t1,
                    t2,
                    value: g,
                    weight: 1.0,
                }
            })
            .collect()
    }

    #[test]
    fn recovers_representable_rank_one_surface() {
        let basis = basis(1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = DVector::from_fn(basis.dim(), |i, _| 0.3 + 0.5 * (i as f64).cos());
        let points = rank_one_points(&basis, &v, 400, &mut rng);
        let fit = fit_cov(&points, &basis, 2, 1e-9).unwrap();
        let target = &v * v.transpose();
        for a in 0..basis.dim() {
            for b in 0..basis.dim() {
                assert_abs_diff_eq!(fit.coefficients()[(a, b)], target[(a, b)], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn zero_values_give_zero_surface() {
        let basis = basis(1);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let points: Vec<RawCovPoint> = (0..200)
            .map(|i| RawCovPoint {
                subject: i,
                t1: rng.random_range(0.0..1.0),
                t2: rng.random_range(0.0..1.0),
                value: 0.0,
                weight: rng.random_range(0.5..2.0),
            })
            .collect();
        let fit = fit_cov(&points, &basis, 2, 0.1).unwrap();
        assert!(fit.coefficients().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn surface_is_exactly_symmetric() {
        let basis = basis(2);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let points: Vec<RawCovPoint> = (0..300)
            .map(|i| RawCovPoint {
                subject: i,
                t1: rng.random_range(0.0..1.0),
                t2: rng.random_range(0.0..1.0),
                value: rng.random_range(-1.0..1.0),
                weight: rng.random_range(0.1..3.0),
            })
            .collect();
        let fit = fit_cov(&points, &basis, 2, 0.05).unwrap();
        let xi = fit.coefficients();
        assert_eq!(xi, &xi.transpose());
        for _ in 0..50 {
            let t = rng.random_range(0.0..1.0);
            let s = rng.random_range(0.0..1.0);
            let d = (fit.evaluate(t, s).unwrap() - fit.evaluate(s, t).unwrap()).abs();
            assert!(d < 1e-14);
        }
    }

    #[test]
    fn matches_lagrange_constrained_oracle() {
        // Brute force: minimize over the full q² coefficients with the
        // symmetry constraints imposed by Lagrange multipliers.
        let basis = basis(0); // q = 4
        let q = basis.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let points: Vec<RawCovPoint> = (0..250)
            .map(|i| RawCovPoint {
                subject: i,
                t1: rng.random_range(0.0..1.0),
                t2: rng.random_range(0.0..1.0),
                value: rng.random_range(-2.0..2.0),
                weight: rng.random_range(0.2..2.0),
            })
            .collect();
        let lambda = 0.3;
        let fit = fit_cov(&points, &basis, 2, lambda).unwrap();

        // Full design cross-products over vec(Ξ) (row-major, a·q+b).
        let dim = q * q;
        let mut m_full = DMatrix::zeros(dim, dim);
        let mut rhs_full = DVector::zeros(dim);
        for p in &points {
            let bt = basis.row(p.t1).unwrap();
            let bs = basis.row(p.t2).unwrap();
            let mut d = DVector::zeros(dim);
            for a in 0..q {
                for b in 0..q {
                    d[a * q + b] = bt[a] * bs[b];
                }
            }
            m_full += &d * d.transpose() * p.weight;
            rhs_full.axpy(p.weight * p.value, &d, 1.0);
        }
        let qc = basis.penalty_cov(2).unwrap();

        // KKT system: [2M + λQ_C, Cᵀ; C, 0] (η; ν) = (2·rhs; 0) with
        // constraint rows η_ab − η_ba = 0 for a < b.
        let ncon = q * (q - 1) / 2;
        let mut kkt = DMatrix::zeros(dim + ncon, dim + ncon);
        let mut krhs = DVector::zeros(dim + ncon);
        for i in 0..dim {
            for j in 0..dim {
                kkt[(i, j)] = 2.0 * m_full[(i, j)] + lambda * qc[(i, j)];
            }
            krhs[i] = 2.0 * rhs_full[i];
        }
        let mut c = 0;
        for a in 0..q {
            for b in (a + 1)..q {
                kkt[(dim + c, a * q + b)] = 1.0;
                kkt[(dim + c, b * q + a)] = -1.0;
                kkt[(a * q + b, dim + c)] = 1.0;
                kkt[(b * q + a, dim + c)] = -1.0;
                c += 1;
            }
        }
        let sol = kkt.lu().solve(&krhs).unwrap();
        for a in 0..q {
            for b in 0..q {
                assert_abs_diff_eq!(
                    fit.coefficients()[(a, b)],
                    sol[a * q + b],
                    epsilon = 1e-7
                );
            }
        }
    }

    #[test]
    fn gcv_matches_materialized_smoother() {
        let basis = basis(0);
        let q = basis.dim();
        let r = q * (q + 1) / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let points: Vec<RawCovPoint> = (0..40)
            .map(|i| RawCovPoint {
                subject: i,
                t1: rng.random_range(0.0..1.0),
                t2: rng.random_range(0.0..1.0),
                value: rng.random_range(-1.0..1.0),
                weight: rng.random_range(0.3..2.0),
            })
            .collect();
        let grid = vec![0.03, 0.3, 3.0];
        let sel = gcv_select_cov(&points, &basis, 2, &grid).unwrap();

        // Dense reduced design.
        let system = CovSystem::build(&points, &basis, 2).unwrap();
        let n = points.len();
        let mut design = DMatrix::zeros(n, r);
        let mut w_half = DMatrix::zeros(n, n);
        let mut y = DVector::zeros(n);
        for (i, (row, p)) in system.rows.iter().zip(&points).enumerate() {
            for &(j, v) in row {
                design[(i, j)] = v;
            }
            w_half[(i, i)] = p.weight.sqrt();
            y[i] = p.value;
        }
        for (lambda, score) in &sel.scores {
            let a = design.transpose() * &w_half * &w_half * &design
                + &system.penalty * (lambda / 2.0);
            let a_inv = a.try_inverse().unwrap();
            let smoother = &w_half * &design * a_inv * design.transpose() * &w_half;
            let y_w = &w_half * &y;
            let resid = &y_w - &smoother * &y_w;
            let nf = n as f64;
            let oracle = (resid.norm_squared() / nf) / ((nf - smoother.trace()) / nf).powi(2);
            assert_abs_diff_eq!(*score, oracle, epsilon = 1e-10 * oracle.max(1.0));
        }
    }

    #[test]
    fn gcv_extremes() {
        let basis = basis(1);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let grid = crate::mean::log_grid(1e-7, 1e7, 20);

        let noise: Vec<RawCovPoint> = (0..600)
            .map(|i| RawCovPoint {
                subject: i,
                t1: rng.random_range(0.0..1.0),
                t2: rng.random_range(0.0..1.0),
                value: rng.sample::<f64, _>(rand_distr::StandardNormal),
                weight: 1.0,
            })
            .collect();
        let sel = gcv_select_cov(&noise, &basis, 2, &grid).unwrap();
        let rank = grid.iter().position(|&l| l == sel.lambda).unwrap();
        assert!(rank >= grid.len() * 3 / 4, "noise picked λ index {rank}");

        let v = DVector::from_fn(basis.dim(), |i, _| ((i * i) as f64 * 0.71).sin() + 0.2);
        let clean = rank_one_points(&basis, &v, 600, &mut rng);
        let sel = gcv_select_cov(&clean, &basis, 2, &grid).unwrap();
        let rank = grid.iter().position(|&l| l == sel.lambda).unwrap();
        assert!(rank <= grid.len() / 4, "clean surface picked λ index {rank}");
    }

    #[test]
    fn roughness_monotone_in_lambda() {
        let basis = basis(1);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let points: Vec<RawCovPoint> = (0..500)
            .map(|i| {
                let t1 = rng.random_range(0.0..1.0);
                let t2 = rng.random_range(0.0..1.0);
                RawCovPoint {
                    subject: i,
                    t1,
                    t2,
                    value: (6.0 * t1).sin() * (6.0 * t2).sin() + rng.random_range(-0.3..0.3),
                    weight: 1.0,
                }
            })
            .collect();
        let mut prev = f64::INFINITY;
        for lambda in crate::mean::log_grid(1e-6, 1e6, 15) {
            let fit = fit_cov(&points, &basis, 2, lambda).unwrap();
            let rough = fit.roughness();
            assert!(rough <= prev * (1.0 + 1e-9));
            prev = rough;
        }
    }

    #[test]
    fn raw_points_from_dataset() {
        // Subjects with m_i = 1 contribute nothing; m_i = 3 gives 6 ordered
        // pairs; values vanish when X equals the fitted mean.
        let subjects = vec![
            Subject {
                id: "a".into(),
                end_time: 1.0,
                outcomes: vec![
                    Observation { time: 0.2, value: 1.0 },
                    Observation { time: 0.5, value: 1.0 },
                    Observation { time: 0.9, value: 1.0 },
                ],
                covariates: vec![CovariateRecord { time: 0.0, values: vec![0.0] }],
                true_intensities: None,
            },
            Subject {
                id: "b".into(),
                end_time: 1.0,
                outcomes: vec![Observation { time: 0.4, value: 1.0 }],
                covariates: vec![CovariateRecord { time: 0.0, values: vec![0.0] }],
                true_intensities: None,
            },
        ];
        let data = LongitudinalDataset::new(subjects).unwrap();
        let basis = basis(1);
        let obs: Vec<MeanObservation> = (0..20)
            .map(|i| MeanObservation {
                time: i as f64 / 19.0,
                value: 1.0,
                weight: 1.0,
            })
            .collect();
        let mean = fit_mean(&obs, &basis, 2, 1.0).unwrap();
        let unit: Vec<Vec<f64>> = data.subjects().iter().map(|s| vec![1.0; s.num_obs()]).collect();
        let pairs = crate::intensity::pair_weights_from_mean(&unit);
        let points = raw_cov_points(&data, &mean, &pairs).unwrap();
        assert_eq!(points.len(), 6);
        // Constant data equals the mean fit, so all centered products vanish.
        assert!(points.iter().all(|p| p.value.abs() < 1e-8));
        // Swapping the pair gives the same value at transposed times.
        let p01 = points.iter().find(|p| p.t1 == 0.2 && p.t2 == 0.5).unwrap();
        let p10 = points.iter().find(|p| p.t1 == 0.5 && p.t2 == 0.2).unwrap();
        assert_eq!(p01.value, p10.value);
    }

    #[test]
    fn error_paths() {
        let basis = basis(1);
        let bad = vec![RawCovPoint {
            subject: 0,
            t1: 0.5,
            t2: 0.6,
            value: 1.0,
            weight: -1.0,
        }];
        assert!(matches!(
            fit_cov(&bad, &basis, 2, 1.0),
            Err(CovError::NegativeWeight { .. })
        ));

        let few = vec![
            RawCovPoint {
                subject: 0,
                t1: 0.5,
                t2: 0.6,
                value: 1.0,
                weight: 1.0
            };
            4
        ];
        assert!(matches!(
            fit_cov(&few, &basis, 2, 1.0),
            Err(CovError::InsufficientData { .. })
        ));
        assert!(fit_cov(&few, &basis, 2, 0.0).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let basis = basis(1);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let v = DVector::from_fn(basis.dim(), |i, _| 1.0 / (i as f64 + 1.0));
        let points = rank_one_points(&basis, &v, 300, &mut rng);
        let fit = fit_cov(&points, &basis, 2, 0.01).unwrap();
        let json = serde_json::to_string(&fit).unwrap();
        let back: CovFit = serde_json::from_str(&json).unwrap();
        for _ in 0..20 {
            let t = rng.random_range(0.0..1.0);
            let s = rng.random_range(0.0..1.0);
            assert_abs_diff_eq!(
                back.evaluate(t, s).unwrap(),
                fit.evaluate(t, s).unwrap(),
                epsilon = 1e-14
            );
        }
    }
}
