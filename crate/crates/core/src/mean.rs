//! Weighted penalized-spline estimation of the mean function with
//! generalized cross-validation for the smoothing parameter.
//!
//! The estimator minimizes `Σ_ij w_ij {X_ij − B(t_ij)ᵀγ}² + (λ_μ/2)·γᵀQ_μγ`.
//! Setting the gradient to zero gives normal equations
//! `(BᵀWB + (λ_μ/2)·Q_μ)γ = BᵀWy` — the penalty enters the solved system
//! with the factor `λ_μ/2` exactly as written (the residual term's factor 2
//! cancels against it after differentiation). All linear algebra is on the
//! `q × q` scale; the `N × N` smoother matrix is never materialized.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bspline::{BasisError, KnotVector, SplineBasis};
use crate::io::LongitudinalDataset;

#[derive(Debug, Error)]
pub enum MeanError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("smoothing parameter must be positive, got {0}")]
    LambdaNonPositive(f64),
    #[error("negative weight {weight} at t = {time}")]
    NegativeWeight { time: f64, weight: f64 },
    #[error("only {got} observations with positive weight; need at least {needed}")]
    InsufficientData { needed: usize, got: usize },
    #[error(
        "penalized system is singular: {count} near-null directions, smallest eigenvalue {min_eig:.3e}; leading deficient basis indices {indices:?}"
    )]
    Singular {
        count: usize,
        min_eig: f64,
        indices: Vec<usize>,
    },
    #[error("weights shape does not match the dataset")]
    WeightShapeMismatch,
    #[error("all GCV scores are non-finite")]
    AllScoresInfinite,
    #[error("empty smoothing-parameter grid")]
    EmptyGrid,
}

/// One weighted observation `(t_ij, X_ij, w_ij)` of the pooled regression.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanObservation {
    pub time: f64,
    pub value: f64,
    pub weight: f64,
}

/// Flatten a dataset and per-subject weights into pooled observations.
pub fn mean_observations(
    data: &LongitudinalDataset,
    weights: &[Vec<f64>],
) -> Result<Vec<MeanObservation>, MeanError> {
    if weights.len() != data.n() {
        return Err(MeanError::WeightShapeMismatch);
    }
    let mut out = Vec::with_capacity(data.total_observations());
    for (s, ws) in data.subjects().iter().zip(weights) {
        if ws.len() != s.num_obs() {
            return Err(MeanError::WeightShapeMismatch);
        }
        for (o, &w) in s.outcomes.iter().zip(ws) {
            out.push(MeanObservation {
                time: o.time,
                value: o.value,
                weight: w,
            });
        }
    }
    Ok(out)
}

/// Fitted mean function `μ̂(t) = B(t)ᵀγ̂`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(into = "MeanFitDto", try_from = "MeanFitDto")]
pub struct MeanFit {
    basis: SplineBasis,
    gamma: DVector<f64>,
    lambda: f64,
    penalty_order: usize,
    /// Effective degrees of freedom, `tr(A_w)`.
    pub edf: f64,
    /// GCV score at `lambda` when the fit came from `gcv_select_mean`.
    pub gcv_score: Option<f64>,
}

impl MeanFit {
    pub fn basis(&self) -> &SplineBasis {
        &self.basis
    }

    pub fn coefficients(&self) -> &DVector<f64> {
        &self.gamma
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn penalty_order(&self) -> usize {
        self.penalty_order
    }

    pub fn evaluate(&self, t: f64) -> Result<f64, MeanError> {
        Ok(self.basis.row(t)?.dot(&self.gamma))
    }

    pub fn evaluate_grid(&self, grid: &[f64]) -> Result<Vec<f64>, MeanError> {
        grid.iter().map(|&t| self.evaluate(t)).collect()
    }

    /// Roughness of the fit, `γ̂ᵀQ_μγ̂`.
    pub fn roughness(&self) -> f64 {
        let q = self
            .basis
            .penalty_mean(self.penalty_order)
            .expect("order validated at fit time");
        (self.gamma.transpose() * q * &self.gamma)[(0, 0)]
    }
}

#[derive(Serialize, Deserialize)]
struct MeanFitDto {
    domain_end: f64,
    interior_knots: Vec<f64>,
    order: usize,
    penalty_order: usize,
    gamma: Vec<f64>,
    lambda: f64,
    edf: f64,
    gcv_score: Option<f64>,
}

impl From<MeanFit> for MeanFitDto {
    fn from(f: MeanFit) -> Self {
        Self {
            domain_end: f.basis.domain_end(),
            interior_knots: f.basis.knots().interior().to_vec(),
            order: f.basis.order(),
            penalty_order: f.penalty_order,
            gamma: f.gamma.iter().copied().collect(),
            lambda: f.lambda,
            edf: f.edf,
            gcv_score: f.gcv_score,
        }
    }
}

impl TryFrom<MeanFitDto> for MeanFit {
    type Error = String;

    fn try_from(d: MeanFitDto) -> Result<Self, String> {
        let knots = KnotVector::new(d.interior_knots, d.domain_end, d.order, Some(f64::INFINITY))
            .map_err(|e| e.to_string())?;
        let basis = SplineBasis::from_knots(knots).map_err(|e| e.to_string())?;
        if d.gamma.len() != basis.dim() {
            return Err(format!(
                "coefficient length {} does not match basis dimension {}",
                d.gamma.len(),
                basis.dim()
            ));
        }
        Ok(Self {
            basis,
            gamma: DVector::from_vec(d.gamma),
            lambda: d.lambda,
            penalty_order: d.penalty_order,
            edf: d.edf,
            gcv_score: d.gcv_score,
        })
    }
}

/// Pooled-regression cross products, assembled once and reused across the
/// smoothing-parameter grid.
struct MeanSystem {
    rows: Vec<DVector<f64>>,
    values: Vec<f64>,
    weights: Vec<f64>,
    /// `BᵀWB`
    m_mat: DMatrix<f64>,
    /// `BᵀWy`
    rhs: DVector<f64>,
}

impl MeanSystem {
    fn build(obs: &[MeanObservation], basis: &SplineBasis) -> Result<Self, MeanError> {
        let q = basis.dim();
        let mut m_mat = DMatrix::zeros(q, q);
        let mut rhs = DVector::zeros(q);
        let mut rows = Vec::with_capacity(obs.len());
        let mut values = Vec::with_capacity(obs.len());
        let mut weights = Vec::with_capacity(obs.len());
        let mut positive = 0usize;
        for o in obs {
            if o.weight < 0.0 || !o.weight.is_finite() {
                return Err(MeanError::NegativeWeight {
                    time: o.time,
                    weight: o.weight,
                });
            }
            if o.weight > 0.0 {
                positive += 1;
            }
            let b = basis.row(o.time)?;
            for r in 0..q {
                if b[r] == 0.0 {
                    continue;
                }
                for c in 0..=r {
                    m_mat[(r, c)] += o.weight * b[r] * b[c];
                }
            }
            rhs.axpy(o.weight * o.value, &b, 1.0);
            rows.push(b);
            values.push(o.value);
            weights.push(o.weight);
        }
        if positive < q {
            return Err(MeanError::InsufficientData {
                needed: q,
                got: positive,
            });
        }
        for r in 0..q {
            for c in 0..r {
                m_mat[(c, r)] = m_mat[(r, c)];
            }
        }
        Ok(Self {
            rows,
            values,
            weights,
            m_mat,
            rhs,
        })
    }

    /// Solve `(M + (λ/2)Q)γ = rhs` with one iterative-refinement step.
    fn solve(
        &self,
        penalty: &DMatrix<f64>,
        lambda: f64,
    ) -> Result<(DVector<f64>, Cholesky<f64, nalgebra::Dyn>), MeanError> {
        let a = &self.m_mat + penalty * (lambda / 2.0);
        let chol = Cholesky::new(a.clone()).ok_or_else(|| singular_error(&a))?;
        let mut gamma = chol.solve(&self.rhs);
        let resid = &self.rhs - &a * &gamma;
        gamma += chol.solve(&resid);
        Ok((gamma, chol))
    }

    /// `tr(A_w) = tr{(M + (λ/2)Q)⁻¹ M}` via the q×q system.
    fn trace_smoother(&self, chol: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
        let x = chol.solve(&self.m_mat);
        x.trace()
    }

    /// Weighted residual sum of squares `Σ w (y − B γ)²`.
    fn weighted_rss(&self, gamma: &DVector<f64>) -> f64 {
        self.rows
            .iter()
            .zip(&self.values)
            .zip(&self.weights)
            .map(|((b, &y), &w)| {
                let r = y - b.dot(gamma);
                w * r * r
            })
            .sum()
    }

    fn gcv(&self, gamma: &DVector<f64>, chol: &Cholesky<f64, nalgebra::Dyn>) -> (f64, f64) {
        let n = self.rows.len() as f64;
        let edf = self.trace_smoother(chol);
        let denom = (n - edf) / n;
        let score = if denom <= 0.0 {
            f64::INFINITY
        } else {
            (self.weighted_rss(gamma) / n) / (denom * denom)
        };
        (score, edf)
    }
}

fn singular_error(a: &DMatrix<f64>) -> MeanError {
    let eig = nalgebra::SymmetricEigen::new(a.clone());
    let max_eig = eig.eigenvalues.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    let tol = 1e-12 * max_eig.max(1.0);
    let mut indices = Vec::new();
    let mut min_eig = f64::INFINITY;
    for (k, &v) in eig.eigenvalues.iter().enumerate() {
        min_eig = min_eig.min(v);
        if v <= tol {
            // Report the dominant basis index of the deficient direction.
            let col = eig.eigenvectors.column(k);
            let lead = col.iter().enumerate().fold(
                (0usize, 0.0_f64),
                |acc, (i, &x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc },
            );
            indices.push(lead.0);
        }
    }
    MeanError::Singular {
        count: indices.len(),
        min_eig,
        indices,
    }
}

/// Fit the weighted penalized spline at a fixed smoothing parameter.
pub fn fit_mean(
    obs: &[MeanObservation],
    basis: &SplineBasis,
    penalty_order: usize,
    lambda: f64,
) -> Result<MeanFit, MeanError> {
    if !(lambda > 0.0) {
        return Err(MeanError::LambdaNonPositive(lambda));
    }
    let penalty = basis.penalty_mean(penalty_order)?.clone();
    let system = MeanSystem::build(obs, basis)?;
    let (gamma, chol) = system.solve(&penalty, lambda)?;
    let edf = system.trace_smoother(&chol);
    Ok(MeanFit {
        basis: basis.clone(),
        gamma,
        lambda,
        penalty_order,
        edf,
        gcv_score: None,
    })
}

/// GCV selection result: scores along the grid and the fit at the argmin.
#[derive(Clone, Debug)]
pub struct MeanGcv {
    pub fit: MeanFit,
    pub lambda: f64,
    /// `(λ, V_μ(λ))` along the grid.
    pub scores: Vec<(f64, f64)>,
    /// Upper bound `q^{−(2m−1)}` implied by the consistency theory; recorded
    /// for diagnostics, never enforced.
    pub lambda_theory_cap: f64,
}

/// Evaluate `V_μ(λ) = N⁻¹·Σw·r² / [N⁻¹·tr(I−A_w)]²` over a grid and return
/// the fit at the minimizing `λ`.
pub fn gcv_select_mean(
    obs: &[MeanObservation],
    basis: &SplineBasis,
    penalty_order: usize,
    grid: &[f64],
) -> Result<MeanGcv, MeanError> {
    if grid.is_empty() {
        return Err(MeanError::EmptyGrid);
    }
    let penalty = basis.penalty_mean(penalty_order)?.clone();
    let system = MeanSystem::build(obs, basis)?;

    let mut best: Option<(f64, f64, DVector<f64>, f64)> = None;
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        if !(lambda > 0.0) {
            return Err(MeanError::LambdaNonPositive(lambda));
        }
        let (gamma, chol) = system.solve(&penalty, lambda)?;
        let (score, edf) = system.gcv(&gamma, &chol);
        scores.push((lambda, score));
        let better = match &best {
            None => score.is_finite(),
            Some((s, ..)) => score < *s,
        };
        if better {
            best = Some((score, lambda, gamma, edf));
        }
    }
    let (score, lambda, gamma, edf) = best.ok_or(MeanError::AllScoresInfinite)?;
    Ok(MeanGcv {
        fit: MeanFit {
            basis: basis.clone(),
            gamma,
            lambda,
            penalty_order,
            edf,
            gcv_score: Some(score),
        },
        lambda,
        scores,
        lambda_theory_cap: (basis.dim() as f64).powi(-(2 * penalty_order as i32 - 1)),
    })
}

/// Default smoothing grid: `size` log-spaced points spanning
/// `[1e-8, 1e4]` times the mean diagonal scale of `BᵀWB`.
pub fn default_lambda_grid(
    obs: &[MeanObservation],
    basis: &SplineBasis,
    size: usize,
) -> Vec<f64> {
    let q = basis.dim() as f64;
    let trace: f64 = obs
        .iter()
        .filter(|o| o.weight > 0.0)
        .map(|o| {
            let b = basis.row(o.time).map(|b| b.norm_squared()).unwrap_or(0.0);
            o.weight * b
        })
        .sum();
    let scale = (trace / q).max(f64::MIN_POSITIVE);
    log_grid(1e-8 * scale, 1e4 * scale, size)
}

/// Log-spaced grid between `lo` and `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, size: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && size >= 2);
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..size)
        .map(|i| (llo + (lhi - llo) * i as f64 / (size - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn basis() -> SplineBasis {
        SplineBasis::uniform(3.0, 4, 4).unwrap()
    }

    fn spline_data(
        basis: &SplineBasis,
        gamma: &DVector<f64>,
        n: usize,
        noise: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<MeanObservation> {
        (0..n)
            .map(|_| {
                let t = rng.random_range(0.0..3.0);
                let y = basis.row(t).unwrap().dot(gamma)
                    + if noise > 0.0 {
                        noise * rng.sample::<f64, _>(rand_distr::StandardNormal)
                    } else {
                        0.0
                    };
                MeanObservation {
                    time: t,
                    value: y,
                    weight: 1.0,
                }
            })
            .collect()
    }

    #[test]
    fn recovers_representable_spline_at_tiny_lambda() {
        let basis = basis();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gamma = DVector::from_fn(basis.dim(), |i, _| (i as f64 * 0.7).sin() + 1.0);
        let obs = spline_data(&basis, &gamma, 240, 0.0, &mut rng);
        let fit = fit_mean(&obs, &basis, 2, 1e-10).unwrap();
        for (a, b) in fit.coefficients().iter().zip(gamma.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn huge_lambda_gives_weighted_least_squares_line() {
        let basis = basis();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs: Vec<MeanObservation> = (0..200)
            .map(|_| {
                let t: f64 = rng.random_range(0.0..3.0);
                MeanObservation {
                    time: t,
                    value: 2.0 * t - 1.0 + rng.random_range(-0.5..0.5),
                    weight: rng.random_range(0.5..2.0),
                }
            })
            .collect();
        let fit = fit_mean(&obs, &basis, 2, 1e9).unwrap();

        // Direct weighted least-squares line.
        let (mut sw, mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for o in &obs {
            sw += o.weight;
            st += o.weight * o.time;
            sy += o.weight * o.value;
            stt += o.weight * o.time * o.time;
            sty += o.weight * o.time * o.value;
        }
        let det = sw * stt - st * st;
        let intercept = (stt * sy - st * sty) / det;
        let slope = (sw * sty - st * sy) / det;

        for i in 0..30 {
            let t = 3.0 * i as f64 / 29.0;
            let line = intercept + slope * t;
            assert_relative_eq!(fit.evaluate(t).unwrap(), line, epsilon = 1e-4);
        }
    }

    #[test]
    fn trivial_coefficient_fits() {
        let basis = basis();
        let zero = MeanFit {
            basis: basis.clone(),
            gamma: DVector::zeros(basis.dim()),
            lambda: 1.0,
            penalty_order: 2,
            edf: 0.0,
            gcv_score: None,
        };
        let ones = MeanFit {
            basis: basis.clone(),
            gamma: DVector::from_element(basis.dim(), 1.0),
            lambda: 1.0,
            penalty_order: 2,
            edf: 0.0,
            gcv_score: None,
        };
        for i in 0..20 {
            let t = 3.0 * i as f64 / 19.0;
            assert_abs_diff_eq!(zero.evaluate(t).unwrap(), 0.0);
            assert_abs_diff_eq!(ones.evaluate(t).unwrap(), 1.0, epsilon = 1e-12);
        }
        assert!(zero.evaluate(3.5).is_err());
    }

    #[test]
    fn normal_equation_residual_is_tiny() {
        let basis = basis();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gamma = DVector::from_fn(basis.dim(), |i, _| i as f64);
        let obs = spline_data(&basis, &gamma, 150, 0.3, &mut rng);
        let lambda = 0.37;
        let fit = fit_mean(&obs, &basis, 2, lambda).unwrap();

        let system = MeanSystem::build(&obs, &basis).unwrap();
        let a = &system.m_mat + basis.penalty_mean(2).unwrap() * (lambda / 2.0);
        let resid = (&a * fit.coefficients() - &system.rhs).norm();
        assert!(resid <= 1e-8 * system.rhs.norm().max(1.0));
    }

    #[test]
    fn matches_dense_weighted_least_squares_oracle() {
        let basis = basis();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs: Vec<MeanObservation> = (0..120)
            .map(|_| MeanObservation {
                time: rng.random_range(0.0..3.0),
                value: rng.random_range(-2.0..2.0),
                weight: rng.random_range(0.1..5.0),
            })
            .collect();
        let lambda = 2.5;
        let fit = fit_mean(&obs, &basis, 2, lambda).unwrap();

        // Dense design-matrix solve.
        let q = basis.dim();
        let n = obs.len();
        let mut b = DMatrix::zeros(n, q);
        let mut w = DMatrix::zeros(n, n);
        let mut y = DVector::zeros(n);
        for (i, o) in obs.iter().enumerate() {
            b.row_mut(i).copy_from(&basis.row(o.time).unwrap().transpose());
            w[(i, i)] = o.weight;
            y[i] = o.value;
        }
        let a = b.transpose() * &w * &b + basis.penalty_mean(2).unwrap() * (lambda / 2.0);
        let rhs = b.transpose() * &w * &y;
        let dense = a.lu().solve(&rhs).unwrap();
        for (u, v) in fit.coefficients().iter().zip(dense.iter()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-8);
        }
    }

    #[test]
    fn gcv_matches_materialized_smoother() {
        // Brute-force oracle: build the N×N smoother and its trace directly.
        let basis = SplineBasis::uniform(3.0, 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let obs: Vec<MeanObservation> = (0..30)
            .map(|_| MeanObservation {
                time: rng.random_range(0.0..3.0),
                value: rng.random_range(-1.0..1.0),
                weight: rng.random_range(0.2..3.0),
            })
            .collect();
        let grid = vec![0.01, 0.1, 1.0, 10.0];
        let sel = gcv_select_mean(&obs, &basis, 2, &grid).unwrap();

        let q = basis.dim();
        let n = obs.len();
        let mut b = DMatrix::zeros(n, q);
        let mut w_half = DMatrix::zeros(n, n);
        let mut y = DVector::zeros(n);
        for (i, o) in obs.iter().enumerate() {
            b.row_mut(i).copy_from(&basis.row(o.time).unwrap().transpose());
            w_half[(i, i)] = o.weight.sqrt();
            y[i] = o.value;
        }
        for (lambda, score) in &sel.scores {
            let a = b.transpose() * &w_half * &w_half * &b
                + basis.penalty_mean(2).unwrap() * (lambda / 2.0);
            let a_inv = a.clone().try_inverse().unwrap();
            let smoother = &w_half * &b * a_inv * b.transpose() * &w_half;
            let y_w = &w_half * &y;
            let resid = &y_w - &smoother * &y_w;
            let nf = n as f64;
            let oracle = (resid.norm_squared() / nf)
                / ((nf - smoother.trace()) / nf).powi(2);
            assert_abs_diff_eq!(*score, oracle, epsilon = 1e-10 * oracle.max(1.0));
        }
    }

    #[test]
    fn gcv_extremes_for_noise_and_signal() {
        let basis = basis();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let grid = log_grid(1e-6, 1e6, 25);

        // Pure noise: the smoothest fit wins. Beyond the point where the
        // smoother collapses onto the penalty null space the GCV curve is
        // flat, so assert smoothness through the effective dof.
        let noise: Vec<MeanObservation> = (0..300)
            .map(|_| MeanObservation {
                time: rng.random_range(0.0..3.0),
                value: rng.sample::<f64, _>(rand_distr::StandardNormal),
                weight: 1.0,
            })
            .collect();
        let sel = gcv_select_mean(&noise, &basis, 2, &grid).unwrap();
        assert!(sel.fit.edf < 3.0, "noise fit kept edf {}", sel.fit.edf);
        assert!(sel.lambda >= grid[grid.len() / 2], "noise picked λ {}", sel.lambda);

        // Noise-free representable signal: the roughest fit wins.
        let gamma = DVector::from_fn(basis.dim(), |i, _| ((i * i) as f64 * 0.37).sin());
        let clean = spline_data(&basis, &gamma, 300, 0.0, &mut rng);
        let sel = gcv_select_mean(&clean, &basis, 2, &grid).unwrap();
        let rank = grid.iter().position(|&l| l == sel.lambda).unwrap();
        assert!(rank <= grid.len() / 4, "clean signal picked λ index {rank}");
        assert!(sel.fit.edf > basis.dim() as f64 - 0.5);
    }

    #[test]
    fn roughness_is_monotone_in_lambda() {
        let basis = basis();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let obs: Vec<MeanObservation> = (0..250)
            .map(|_| MeanObservation {
                time: rng.random_range(0.0..3.0),
                value: (rng.random_range(0.0..3.0) as f64).sin() * 4.0
                    + rng.random_range(-1.0..1.0),
                weight: rng.random_range(0.5..2.0),
            })
            .collect();
        let mut prev = f64::INFINITY;
        for lambda in log_grid(1e-6, 1e6, 20) {
            let fit = fit_mean(&obs, &basis, 2, lambda).unwrap();
            let rough = fit.roughness();
            assert!(rough <= prev * (1.0 + 1e-9), "roughness rose at λ={lambda}");
            prev = rough;
        }
    }

    #[test]
    fn error_paths() {
        let basis = basis();
        let obs = vec![MeanObservation {
            time: 1.0,
            value: 1.0,
            weight: -0.5,
        }];
        assert!(matches!(
            fit_mean(&obs, &basis, 2, 1.0),
            Err(MeanError::NegativeWeight { .. })
        ));

        let few = vec![
            MeanObservation {
                time: 1.0,
                value: 1.0,
                weight: 1.0
            };
            3
        ];
        assert!(matches!(
            fit_mean(&few, &basis, 2, 1.0),
            Err(MeanError::InsufficientData { .. })
        ));

        // All mass at one point cannot identify the penalty null space.
        let degenerate = vec![
            MeanObservation {
                time: 1.0,
                value: 1.0,
                weight: 1.0
            };
            20
        ];
        assert!(matches!(
            fit_mean(&degenerate, &basis, 2, 1e-9),
            Err(MeanError::Singular { .. })
        ));

        assert!(fit_mean(&degenerate, &basis, 2, 0.0).is_err());
        assert!(gcv_select_mean(&degenerate, &basis, 2, &[]).is_err());
    }

    #[test]
    fn duplicate_times_are_legal() {
        let basis = basis();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut obs = spline_data(&basis, &DVector::from_element(basis.dim(), 1.0), 60, 0.1, &mut rng);
        let dup = obs[0];
        obs.push(dup);
        assert!(fit_mean(&obs, &basis, 2, 0.1).is_ok());
    }

    #[test]
    fn serde_round_trip() {
        let basis = basis();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gamma = DVector::from_fn(basis.dim(), |i, _| i as f64 / 3.0);
        let obs = spline_data(&basis, &gamma, 100, 0.05, &mut rng);
        let fit = fit_mean(&obs, &basis, 2, 0.01).unwrap();
        let json = serde_json::to_string(&fit).unwrap();
        let back: MeanFit = serde_json::from_str(&json).unwrap();
        for i in 0..30 {
            let t = 3.0 * i as f64 / 29.0;
            assert_abs_diff_eq!(
                back.evaluate(t).unwrap(),
                fit.evaluate(t).unwrap(),
                epsilon = 1e-14
            );
        }
    }
}
