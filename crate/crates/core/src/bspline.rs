//! Normalized B-spline bases on `[0, τ]` with derivative evaluation, Gram
//! matrices, and the roughness penalties used by the mean and covariance
//! smoothers.
//!
//! A basis of order `l` (degree `l - 1`) with `K` interior knots has
//! `q = K + l` basis functions. The full knot vector pads `l` copies of `0`
//! and `τ` at the ends, so the basis forms a partition of unity on the whole
//! domain. All integrals are composite Gauss–Legendre with `l` nodes per knot
//! interval, which is exact for every spline-product integrand appearing here
//! (degree at most `2l - 2`).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::quad::GaussLegendre;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("spline order must be at least 2, got {0}")]
    OrderTooSmall(usize),
    #[error("domain end must be positive and finite, got {0}")]
    BadDomain(f64),
    #[error("interior knots must be strictly inside (0, {tau}) and nondecreasing; offending knot {knot}")]
    BadKnot { knot: f64, tau: f64 },
    #[error("mesh ratio {ratio:.3} exceeds the configured bound {bound:.3}")]
    MeshRatio { ratio: f64, bound: f64 },
    #[error("evaluation point {t} outside the domain [0, {tau}]")]
    OutOfDomain { t: f64, tau: f64 },
    #[error("derivative order {deriv} too large for spline order {order} (max {})", order - 1)]
    DerivativeTooLarge { deriv: usize, order: usize },
    #[error("penalty derivative order must lie in 1..={} for spline order {order}, got {m}", order - 1)]
    PenaltyOrderOutOfRange { m: usize, order: usize },
}

/// Knot configuration: interior knots strictly inside `(0, τ)` plus the
/// domain and spline order. The full padded vector repeats the boundary
/// knots `order` times at each end.
#[derive(Clone, Debug, PartialEq)]
pub struct KnotVector {
    interior: Vec<f64>,
    domain_end: f64,
    order: usize,
}

impl KnotVector {
    /// Validate and build a knot configuration. `max_mesh_ratio` bounds
    /// max/min adjacent knot spacing; pass `None` for the default bound of
    /// `1 + 1e-8` appropriate to equally spaced knots, or `Some(c0)` to
    /// allow uneven (e.g. quantile-placed) knots.
    pub fn new(
        interior: Vec<f64>,
        domain_end: f64,
        order: usize,
        max_mesh_ratio: Option<f64>,
    ) -> Result<Self, BasisError> {
        if order < 2 {
            return Err(BasisError::OrderTooSmall(order));
        }
        if !(domain_end.is_finite() && domain_end > 0.0) {
            return Err(BasisError::BadDomain(domain_end));
        }
        let mut prev = 0.0;
        for &k in &interior {
            if !(k > 0.0 && k < domain_end) || k < prev {
                return Err(BasisError::BadKnot {
                    knot: k,
                    tau: domain_end,
                });
            }
            prev = k;
        }
        let kv = Self {
            interior,
            domain_end,
            order,
        };
        if !kv.interior.is_empty() {
            let bound = max_mesh_ratio.unwrap_or(1.0 + 1e-8);
            let ratio = kv.mesh_ratio();
            if ratio > bound {
                return Err(BasisError::MeshRatio { ratio, bound });
            }
        }
        Ok(kv)
    }

    /// Equally spaced interior knots.
    pub fn uniform(domain_end: f64, num_interior: usize, order: usize) -> Result<Self, BasisError> {
        if !(domain_end.is_finite() && domain_end > 0.0) {
            return Err(BasisError::BadDomain(domain_end));
        }
        let step = domain_end / (num_interior as f64 + 1.0);
        let interior = (1..=num_interior).map(|i| i as f64 * step).collect();
        Self::new(interior, domain_end, order, None)
    }

    /// Knots at empirical quantiles of `points` (which need not be sorted).
    /// Duplicated quantiles collapse toward distinct values only through the
    /// mesh-ratio bound, so heavily tied data can be rejected.
    pub fn from_quantiles(
        points: &[f64],
        domain_end: f64,
        num_interior: usize,
        order: usize,
        max_mesh_ratio: f64,
    ) -> Result<Self, BasisError> {
        let mut sorted: Vec<f64> = points.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let interior: Vec<f64> = (1..=num_interior)
            .map(|i| {
                let p = i as f64 / (num_interior as f64 + 1.0);
                let idx = (p * (sorted.len().saturating_sub(1)) as f64).round() as usize;
                sorted[idx.min(sorted.len() - 1)]
            })
            .collect();
        Self::new(interior, domain_end, order, Some(max_mesh_ratio))
    }

    /// `max spacing / min spacing` over consecutive breakpoints `0, ξ₁, …, ξ_K, τ`.
    pub fn mesh_ratio(&self) -> f64 {
        let bp = self.breakpoints();
        let mut min = f64::INFINITY;
        let mut max = 0.0_f64;
        for w in bp.windows(2) {
            let d = w[1] - w[0];
            min = min.min(d);
            max = max.max(d);
        }
        max / min
    }

    /// Breakpoints `0, ξ₁, …, ξ_K, τ` without multiplicity.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut bp = Vec::with_capacity(self.interior.len() + 2);
        bp.push(0.0);
        bp.extend_from_slice(&self.interior);
        bp.push(self.domain_end);
        bp
    }

    pub fn interior(&self) -> &[f64] {
        &self.interior
    }

    pub fn domain_end(&self) -> f64 {
        self.domain_end
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Full padded knot vector: `order` copies of 0, interior knots, `order`
    /// copies of `τ`.
    fn padded(&self) -> Vec<f64> {
        let l = self.order;
        let mut t = Vec::with_capacity(2 * l + self.interior.len());
        t.extend(std::iter::repeat(0.0).take(l));
        t.extend_from_slice(&self.interior);
        t.extend(std::iter::repeat(self.domain_end).take(l));
        t
    }
}

/// A normalized B-spline basis with cached Gram and derivative-Gram
/// (roughness-penalty) matrices. Immutable after construction, so it can be
/// shared freely across parallel workers.
#[derive(Clone, Debug)]
pub struct SplineBasis {
    knots: KnotVector,
    padded: Vec<f64>,
    q: usize,
    /// `derivative_grams[i] = ∫ B⁽ⁱ⁾(t) {B⁽ⁱ⁾(t)}ᵀ dt` for `i = 0..order`.
    /// Index 0 is the Gram matrix W; index `m` is the mean penalty Q_μ.
    derivative_grams: Vec<DMatrix<f64>>,
}

impl SplineBasis {
    /// Basis with equally spaced interior knots: `q = num_interior + order`.
    pub fn uniform(
        domain_end: f64,
        num_interior: usize,
        order: usize,
    ) -> Result<Self, BasisError> {
        Self::from_knots(KnotVector::uniform(domain_end, num_interior, order)?)
    }

    pub fn from_knots(knots: KnotVector) -> Result<Self, BasisError> {
        let q = knots.interior().len() + knots.order();
        let padded = knots.padded();
        let mut basis = Self {
            knots,
            padded,
            q,
            derivative_grams: Vec::new(),
        };
        basis.derivative_grams = (0..basis.order())
            .map(|i| basis.derivative_gram_by_quadrature(i, basis.order()))
            .collect();
        Ok(basis)
    }

    pub fn dim(&self) -> usize {
        self.q
    }

    pub fn order(&self) -> usize {
        self.knots.order()
    }

    pub fn domain_end(&self) -> f64 {
        self.knots.domain_end()
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    /// Evaluate all `q` basis functions (or their `deriv`-th derivatives)
    /// at `t`. At most `order` entries are nonzero; for `deriv = 0` the
    /// entries are nonnegative and sum to one. The right endpoint `τ` is
    /// evaluated by left-continuity of the last interval.
    pub fn eval(&self, t: f64, deriv: usize) -> Result<DVector<f64>, BasisError> {
        let tau = self.domain_end();
        let l = self.order();
        if !(t >= 0.0 && t <= tau) {
            return Err(BasisError::OutOfDomain { t, tau });
        }
        if deriv >= l {
            return Err(BasisError::DerivativeTooLarge { deriv, order: l });
        }
        let knots = &self.padded;
        let n = knots.len();

        // Order-1 indicators, closing the last positive-length interval at τ.
        let mut values = vec![0.0; n - 1];
        let mut hit = None;
        for j in 0..n - 1 {
            if knots[j] <= t && t < knots[j + 1] {
                hit = Some(j);
                break;
            }
        }
        if hit.is_none() && t == tau {
            hit = (0..n - 1).rev().find(|&j| knots[j] < knots[j + 1]);
        }
        let j = hit.expect("domain check guarantees a containing interval");
        values[j] = 1.0;

        // Raise the order with the Cox–de Boor recursion up to `l - deriv`.
        for k in 2..=(l - deriv) {
            for j in 0..n - k {
                let d1 = knots[j + k - 1] - knots[j];
                let d2 = knots[j + k] - knots[j + 1];
                let left = if d1 > 0.0 {
                    (t - knots[j]) / d1 * values[j]
                } else {
                    0.0
                };
                let right = if d2 > 0.0 {
                    (knots[j + k] - t) / d2 * values[j + 1]
                } else {
                    0.0
                };
                values[j] = left + right;
            }
            values.truncate(n - k);
        }

        // Differentiate: each step maps order-(k-1) values to derivatives of
        // the order-k functions.
        for k in (l - deriv + 1)..=l {
            let factor = (k - 1) as f64;
            for j in 0..n - k {
                let d1 = knots[j + k - 1] - knots[j];
                let d2 = knots[j + k] - knots[j + 1];
                let left = if d1 > 0.0 { values[j] / d1 } else { 0.0 };
                let right = if d2 > 0.0 { values[j + 1] / d2 } else { 0.0 };
                values[j] = factor * (left - right);
            }
            values.truncate(n - k);
        }

        debug_assert_eq!(values.len(), self.q);
        Ok(DVector::from_vec(values))
    }

    /// Basis values at `t` (derivative order 0).
    pub fn row(&self, t: f64) -> Result<DVector<f64>, BasisError> {
        self.eval(t, 0)
    }

    /// Greville abscissae: coefficients `γ = greville()` reproduce the
    /// identity function, `Σ γ_j B_j(t) = t`.
    pub fn greville(&self) -> DVector<f64> {
        let l = self.order();
        DVector::from_iterator(
            self.q,
            (0..self.q).map(|j| {
                self.padded[j + 1..j + l].iter().sum::<f64>() / (l as f64 - 1.0)
            }),
        )
    }

    /// Gram matrix `W = ∫ B(t) B(t)ᵀ dt`; symmetric positive definite.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.derivative_grams[0]
    }

    /// `∫ B_j(t) dt` for each j.
    pub fn integrals(&self) -> DVector<f64> {
        let l = self.order() as f64;
        DVector::from_iterator(
            self.q,
            (0..self.q).map(|j| (self.padded[j + self.order()] - self.padded[j]) / l),
        )
    }

    /// Mean-fit roughness penalty `Q_μ = ∫ {B⁽ᵐ⁾(t)}{B⁽ᵐ⁾(t)}ᵀ dt`,
    /// `1 ≤ m ≤ order − 1`. Symmetric PSD with the degree-`< m` polynomial
    /// coefficient vectors in its null space.
    pub fn penalty_mean(&self, m: usize) -> Result<&DMatrix<f64>, BasisError> {
        if m == 0 || m >= self.order() {
            return Err(BasisError::PenaltyOrderOutOfRange {
                m,
                order: self.order(),
            });
        }
        Ok(&self.derivative_grams[m])
    }

    /// Derivative Gram `∫ B⁽ⁱ⁾ {B⁽ⁱ⁾}ᵀ dt` for `0 ≤ i ≤ order − 1`
    /// (index 0 is the Gram matrix itself).
    pub fn derivative_gram(&self, i: usize) -> Result<&DMatrix<f64>, BasisError> {
        self.derivative_grams.get(i).ok_or({
            BasisError::PenaltyOrderOutOfRange {
                m: i,
                order: self.order(),
            }
        })
    }

    /// Tensor-product surface penalty of total derivative order `m`: the
    /// `q² × q²` matrix with entry `((a₁,a₂),(b₁,b₂))` equal to
    /// `Σ_{i+j=m} C(m,i) ∫B⁽ⁱ⁾_{a₁}B⁽ⁱ⁾_{b₁} · ∫B⁽ʲ⁾_{a₂}B⁽ʲ⁾_{b₂}`,
    /// assembled as `Σ_i C(m,i) · G_i ⊗ G_{m−i}` from the one-dimensional
    /// derivative Grams. Row/column index layout is `a₁·q + a₂`, matching
    /// a row-major vec of the coefficient matrix.
    pub fn penalty_cov(&self, m: usize) -> Result<DMatrix<f64>, BasisError> {
        if m == 0 || m >= self.order() {
            return Err(BasisError::PenaltyOrderOutOfRange {
                m,
                order: self.order(),
            });
        }
        let q = self.q;
        let mut out = DMatrix::zeros(q * q, q * q);
        for i in 0..=m {
            let c = binomial(m, i);
            let left = &self.derivative_grams[i];
            let right = &self.derivative_grams[m - i];
            for a1 in 0..q {
                for b1 in 0..q {
                    let lv = left[(a1, b1)];
                    if lv == 0.0 {
                        continue;
                    }
                    let scale = c * lv;
                    for a2 in 0..q {
                        for b2 in 0..q {
                            out[(a1 * q + a2, b1 * q + b2)] += scale * right[(a2, b2)];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Composite quadrature nodes covering `[0, τ]`: `nodes_per_interval`
    /// Gauss–Legendre nodes on each knot interval.
    pub fn quadrature_nodes(&self, nodes_per_interval: usize) -> Vec<(f64, f64)> {
        let rule = GaussLegendre::new(nodes_per_interval);
        let bp = self.knots.breakpoints();
        let mut out = Vec::with_capacity((bp.len() - 1) * nodes_per_interval);
        for w in bp.windows(2) {
            out.extend(rule.mapped(w[0], w[1]));
        }
        out
    }

    fn derivative_gram_by_quadrature(&self, i: usize, nodes: usize) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.q, self.q);
        for (t, w) in self.quadrature_nodes(nodes) {
            let b = self.eval(t, i).expect("node inside domain");
            for r in 0..self.q {
                if b[r] == 0.0 {
                    continue;
                }
                for c in 0..=r {
                    g[(r, c)] += w * b[r] * b[c];
                }
            }
        }
        // Only the lower triangle was accumulated; mirror it.
        for r in 0..self.q {
            for c in 0..r {
                g[(c, r)] = g[(r, c)];
            }
        }
        g
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut v = 1.0;
    for i in 0..k {
        v = v * (n - i) as f64 / (i + 1) as f64;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::gauss_legendre_integrate;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn bernstein_cubic() -> SplineBasis {
        SplineBasis::uniform(1.0, 0, 4).unwrap()
    }

    #[test]
    fn basis_dimension_and_knots() {
        let b = bernstein_cubic();
        assert_eq!(b.dim(), 4);

        let b = SplineBasis::uniform(3.0, 5, 4).unwrap();
        assert_eq!(b.dim(), 9);
        let expected = [0.5, 1.0, 1.5, 2.0, 2.5];
        for (k, e) in b.knots().interior().iter().zip(expected) {
            assert_abs_diff_eq!(*k, e, epsilon = 1e-15);
        }

        let hats = SplineBasis::uniform(1.0, 3, 2).unwrap();
        assert_eq!(hats.dim(), 5);
    }

    #[test]
    fn construction_errors() {
        assert!(SplineBasis::uniform(0.0, 3, 4).is_err());
        assert!(SplineBasis::uniform(-1.0, 3, 4).is_err());
        assert!(SplineBasis::uniform(1.0, 3, 1).is_err());
        assert!(KnotVector::new(vec![0.5, 0.2], 1.0, 4, None).is_err());
        assert!(KnotVector::new(vec![1.5], 1.0, 4, None).is_err());
        // Uneven knots rejected under the default mesh-ratio bound,
        // accepted with an explicit one.
        assert!(KnotVector::new(vec![0.1, 0.2], 1.0, 4, None).is_err());
        assert!(KnotVector::new(vec![0.1, 0.2], 1.0, 4, Some(10.0)).is_ok());
    }

    #[test]
    fn bernstein_endpoint_and_midpoint() {
        let b = bernstein_cubic();
        let at0 = b.row(0.0).unwrap();
        assert_abs_diff_eq!(at0[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(at0[1], 0.0, epsilon = 1e-15);

        // de Boor recursion by hand at t = 1/2.
        let mid = b.row(0.5).unwrap();
        let expected = [0.125, 0.375, 0.375, 0.125];
        for (v, e) in mid.iter().zip(expected) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-14);
        }

        let at1 = b.row(1.0).unwrap();
        assert_abs_diff_eq!(at1[3], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn eval_errors() {
        let b = bernstein_cubic();
        assert!(b.eval(-0.01, 0).is_err());
        assert!(b.eval(1.01, 0).is_err());
        assert!(b.eval(0.5, 4).is_err());
        assert!(b.eval(0.5, 3).is_ok());
    }

    #[test]
    fn hat_basis_is_piecewise_linear() {
        let b = SplineBasis::uniform(1.0, 3, 2).unwrap();
        // Hat centered at 0.25 peaks there and vanishes two knots away.
        let at = b.row(0.25).unwrap();
        assert_abs_diff_eq!(at[1], 1.0, epsilon = 1e-15);
        let at = b.row(0.5).unwrap();
        assert_abs_diff_eq!(at[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(at[2], 1.0, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn partition_of_unity(t in 0.0_f64..=3.0) {
            let b = SplineBasis::uniform(3.0, 5, 4).unwrap();
            let row = b.row(t).unwrap();
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= -1e-15));
            prop_assert!(row.iter().filter(|&&v| v != 0.0).count() <= 4);
        }

        #[test]
        fn derivative_matches_finite_difference(t in 0.05_f64..=2.95) {
            let b = SplineBasis::uniform(3.0, 4, 4).unwrap();
            let h = 1e-6;
            let up = b.row(t + h).unwrap();
            let dn = b.row(t - h).unwrap();
            let d1 = b.eval(t, 1).unwrap();
            for j in 0..b.dim() {
                let fd = (up[j] - dn[j]) / (2.0 * h);
                prop_assert!((fd - d1[j]).abs() < 1e-5 * (1.0 + d1[j].abs()));
            }
        }
    }

    #[test]
    fn partition_of_unity_dense_sweep() {
        // 1000 deterministic points including both endpoints.
        let b = SplineBasis::uniform(3.0, 7, 4).unwrap();
        for i in 0..1000 {
            let t = 3.0 * i as f64 / 999.0;
            let sum: f64 = b.row(t).unwrap().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum {} at t {}", sum, t);
        }
    }

    #[test]
    fn gram_is_spd_and_quadrature_exact() {
        let b = SplineBasis::uniform(3.0, 5, 4).unwrap();
        let w = b.gram();
        assert_eq!(w.nrows(), 9);
        // SPD: Cholesky succeeds.
        assert!(nalgebra::Cholesky::new(w.clone()).is_some());
        // l nodes per interval is already exact: refining changes nothing.
        let refined = b.derivative_gram_by_quadrature(0, 2 * b.order());
        for r in 0..9 {
            for c in 0..9 {
                assert_abs_diff_eq!(w[(r, c)], refined[(r, c)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn hat_stiffness_is_tridiagonal_with_zero_row_sums() {
        let b = SplineBasis::uniform(1.0, 3, 2).unwrap();
        let q1 = b.penalty_mean(1).unwrap();
        for r in 0..5 {
            let row_sum: f64 = (0..5).map(|c| q1[(r, c)]).sum();
            assert_abs_diff_eq!(row_sum, 0.0, epsilon = 1e-10);
            for c in 0..5 {
                if (r as i64 - c as i64).abs() > 1 {
                    assert_abs_diff_eq!(q1[(r, c)], 0.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn bernstein_second_derivative_penalty_corner() {
        // B₀ = (1−t)³ has B₀'' = 6(1−t); ∫₀¹ 36(1−t)² dt = 12.
        let b = bernstein_cubic();
        let q2 = b.penalty_mean(2).unwrap();
        assert_relative_eq!(q2[(0, 0)], 12.0, epsilon = 1e-10);
    }

    #[test]
    fn penalty_annihilates_low_degree_polynomials() {
        let b = SplineBasis::uniform(3.0, 5, 4).unwrap();
        let q2 = b.penalty_mean(2).unwrap();
        // Coefficients of 2 + 0.7·t via Greville abscissae.
        let gamma = b.greville() * 0.7 + DVector::from_element(b.dim(), 2.0);
        let form = (gamma.transpose() * q2 * &gamma)[(0, 0)];
        assert_abs_diff_eq!(form, 0.0, epsilon = 1e-10);

        let q1 = b.penalty_mean(1).unwrap();
        let ones = DVector::from_element(b.dim(), 1.0);
        assert_abs_diff_eq!((ones.transpose() * q1 * &ones)[(0, 0)], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn penalties_are_symmetric_psd() {
        let b = SplineBasis::uniform(3.0, 4, 4).unwrap();
        for m in 1..=3 {
            let qm = b.penalty_mean(m).unwrap();
            assert_eq!(qm, &qm.transpose());
            let eig = nalgebra::SymmetricEigen::new(qm.clone());
            assert!(eig.eigenvalues.iter().all(|&v| v >= -1e-10));
        }
        assert!(b.penalty_mean(0).is_err());
        assert!(b.penalty_mean(4).is_err());
    }

    #[test]
    fn greville_reproduces_identity() {
        let b = SplineBasis::uniform(3.0, 6, 4).unwrap();
        let g = b.greville();
        for i in 0..50 {
            let t = 3.0 * i as f64 / 49.0;
            let v = b.row(t).unwrap().dot(&g);
            assert_abs_diff_eq!(v, t, epsilon = 1e-12);
        }
    }

    #[test]
    fn tensor_penalty_constant_and_bilinear_surfaces() {
        let tau = 3.0_f64;
        let b = SplineBasis::uniform(tau, 2, 4).unwrap();
        let q = b.dim();
        let qc = b.penalty_cov(2).unwrap();

        // Constant surface: coefficient matrix of all ones.
        let eta_const = DVector::from_element(q * q, 1.0);
        let form = (eta_const.transpose() * &qc * &eta_const)[(0, 0)];
        assert_abs_diff_eq!(form, 0.0, epsilon = 1e-9);

        // f(t,s) = t·s: Ξ = g gᵀ with Greville g; only the mixed term
        // survives, with binomial weight 2, giving 2·τ².
        let g = b.greville();
        let mut eta = DVector::zeros(q * q);
        for a in 0..q {
            for c in 0..q {
                eta[a * q + c] = g[a] * g[c];
            }
        }
        let form = (eta.transpose() * &qc * &eta)[(0, 0)];
        assert_relative_eq!(form, 2.0 * tau * tau, epsilon = 1e-8);
    }

    #[test]
    fn tensor_penalty_matches_two_dimensional_quadrature() {
        // Direct 2-D quadrature oracle on a small basis (q = 5), m = 2.
        let b = SplineBasis::uniform(1.0, 1, 4).unwrap();
        let q = b.dim();
        let m = 2usize;
        let qc = b.penalty_cov(m).unwrap();

        let nodes = b.quadrature_nodes(b.order() + 2);
        let mut oracle = DMatrix::zeros(q * q, q * q);
        // Partial derivative rows ∂ᵢ_t ∂ʲ_s D(t,s) for each (i, j = m−i).
        for i in 0..=m {
            let j = m - i;
            let coef = super::binomial(m, i);
            for (t, wt) in &nodes {
                let bt = b.eval(*t, i).unwrap();
                for (s, ws) in &nodes {
                    let bs = b.eval(*s, j).unwrap();
                    let w = coef * wt * ws;
                    for a1 in 0..q {
                        for a2 in 0..q {
                            let da = bt[a1] * bs[a2];
                            if da == 0.0 {
                                continue;
                            }
                            for b1 in 0..q {
                                for b2 in 0..q {
                                    oracle[(a1 * q + a2, b1 * q + b2)] +=
                                        w * da * bt[b1] * bs[b2];
                                }
                            }
                        }
                    }
                }
            }
        }
        for r in 0..q * q {
            for c in 0..q * q {
                assert_abs_diff_eq!(qc[(r, c)], oracle[(r, c)], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn quadrature_helper_is_consistent() {
        // The free function and the per-basis composite nodes agree.
        let b = SplineBasis::uniform(3.0, 5, 4).unwrap();
        let f = |t: f64| (t + 0.5).sin();
        let via_nodes: f64 = b.quadrature_nodes(8).iter().map(|(t, w)| w * f(*t)).sum();
        let direct = gauss_legendre_integrate(f, 0.0, 3.0, 8, 6);
        assert_relative_eq!(via_nodes, direct, epsilon = 1e-12);
    }
}
