//! Gauss–Legendre quadrature.
//!
//! All spline-product integrals in this crate (Gram matrices, roughness
//! penalties, likelihood exposure integrals) are computed with composite
//! Gauss–Legendre rules, so a rule with `n` nodes must be exact for
//! polynomials of degree `2n - 1` to machine precision.

/// A one-dimensional Gauss–Legendre rule on a reference interval `[a, b]`.
#[derive(Clone, Debug)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Build the `n`-node rule on `[-1, 1]`.
    ///
    /// Nodes are the roots of the Legendre polynomial `P_n`, found by Newton
    /// iteration from the Chebyshev-like initial guesses; weights follow from
    /// the derivative identity `w_i = 2 / [(1 - x_i^2) P_n'(x_i)^2]`.
    ///
    /// # Panics
    /// Panics if `n == 0`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Initial guess for the i-th root (descending order).
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (p, d) = legendre_value_and_derivative(n, x);
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            // One polishing step after convergence.
            let (p, d) = legendre_value_and_derivative(n, x);
            x -= p / d;
            let dp = legendre_value_and_derivative(n, x).1;
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            // Middle node is exactly zero for odd rules.
            nodes[n / 2] = 0.0;
            let dp = legendre_value_and_derivative(n, 0.0).1;
            weights[n / 2] = 2.0 / (dp * dp);
        }
        Self { nodes, weights }
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True if the rule has no nodes (never, by construction).
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped affinely onto `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }

    /// Integrate `f` over `[a, b]` with this rule.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre_value_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Integrate `f` over `[a, b]` with a composite rule: the interval is split
/// into `intervals` equal pieces, each integrated with `nodes_per_interval`
/// Gauss–Legendre nodes.
///
/// # Panics
/// Panics if `a >= b` or `nodes_per_interval == 0` or `intervals == 0`.
pub fn gauss_legendre_integrate<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    nodes_per_interval: usize,
    intervals: usize,
) -> f64 {
    assert!(a < b, "integration bounds must satisfy a < b");
    assert!(intervals >= 1 && nodes_per_interval >= 1);
    let rule = GaussLegendre::new(nodes_per_interval);
    let h = (b - a) / intervals as f64;
    (0..intervals)
        .map(|k| {
            let lo = a + k as f64 * h;
            let hi = if k + 1 == intervals { b } else { lo + h };
            rule.integrate(lo, hi, &mut f)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn two_nodes_integrate_cubic_exactly() {
        let v = gauss_legendre_integrate(|t| t * t * t, 0.0, 1.0, 2, 1);
        assert_relative_eq!(v, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn constant_integrates_to_one() {
        let v = gauss_legendre_integrate(|_| 1.0, 0.0, 1.0, 1, 1);
        assert_relative_eq!(v, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn sine_matches_closed_form() {
        // ∫₀³ sin(t + 1/2) dt = cos(1/2) − cos(3.5)
        let v = gauss_legendre_integrate(|t| (t + 0.5).sin(), 0.0, 3.0, 16, 4);
        let truth = 0.5_f64.cos() - 3.5_f64.cos();
        assert_relative_eq!(v, truth, epsilon = 1e-13);
    }

    #[test]
    fn exactness_degree_2n_minus_1() {
        for n in 1..=12 {
            let deg = 2 * n - 1;
            let exact = 1.0 / (deg as f64 + 1.0);
            let v = gauss_legendre_integrate(|t| t.powi(deg as i32), 0.0, 1.0, n, 1);
            assert_relative_eq!(v, exact, epsilon = 1e-13, max_relative = 1e-12);
        }
    }

    #[test]
    fn rule_weights_sum_to_interval_length() {
        for n in [1, 2, 3, 5, 8, 13, 32, 64] {
            let rule = GaussLegendre::new(n);
            let total: f64 = rule.mapped(-2.0, 5.0).map(|(_, w)| w).sum();
            assert_relative_eq!(total, 7.0, epsilon = 1e-12);
        }
    }
}
