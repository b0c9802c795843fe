//! Proportional observation-time intensity `λ{t | history} = λ₀(t)·exp[g{Z(t)}ᵀβ]`:
//! full-likelihood estimation of the parametric baseline and regression
//! coefficients, and the inverse-intensity weights that correct the mean and
//! covariance smoothers for outcome-dependent visit times.
//!
//! The likelihood of subject `i` with events `t_i1 < … < t_im` on `[0, τ_i]` is
//! `Π_j λ(t_ij) · exp{−∫₀^{τᵢ} λ(s) ds}`. The covariate enters through the
//! carry-forward lookup, so the exposure integrand is piecewise smooth with
//! breaks at the covariate record times; it is integrated segment by segment
//! with Gauss–Legendre nodes, at least 64 nodes per subject.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{DataError, LongitudinalDataset, Subject};
use crate::quad::GaussLegendre;

const MIN_NODES_PER_SUBJECT: usize = 64;

#[derive(Debug, Error)]
pub enum IntensityError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("baseline parameters invalid for family {family}: {reason}")]
    BadBaseline { family: &'static str, reason: String },
    #[error("baseline intensity nonpositive at t = {t}")]
    NonPositiveBaseline { t: f64 },
    #[error("parameter vector has length {found}, expected {expected}")]
    ParamLength { expected: usize, found: usize },
    #[error("subject {subject}: covariate history must start at t = 0 (first record at {first})")]
    CovariateGap { subject: String, first: f64 },
    #[error("dataset has no observation events; the intensity is not identified")]
    NoEvents,
    #[error(
        "optimizer did not converge after {iterations} iterations (‖grad‖∞ = {grad_norm:.3e}, nll = {nll:.6e})"
    )]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        nll: f64,
        last_params: Vec<f64>,
    },
    #[error("observed information is not positive semidefinite (min eigenvalue {min_eig:.3e})")]
    InformationNotPsd { min_eig: f64 },
    #[error("nonpositive or non-finite weight {weight:.3e} for subject {subject} at t = {time}")]
    BadWeight {
        subject: String,
        time: f64,
        weight: f64,
    },
    #[error("truncation quantile must lie in (0, 1], got {0}")]
    BadQuantile(f64),
}

/// Parametric baseline families, stored with natural-scale parameters.
///
/// Internally the optimizer works on an unconstrained scale (`log` links on
/// positive parameters); natural parameters are what serializes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineFamily {
    /// `λ₀(t) = exp(θ₀ + θ₁ t)`; both parameters unconstrained.
    LogLinear,
    /// `λ₀(t) = θ₀·(t + θ₁)` with `θ₀ > 0`, `θ₁ > 0`.
    LinearShift,
}

impl BaselineFamily {
    pub fn param_len(&self) -> usize {
        2
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaselineFamily::LogLinear => "log-linear",
            BaselineFamily::LinearShift => "linear-shift",
        }
    }

    /// Natural → unconstrained.
    fn to_unconstrained(&self, theta: &[f64]) -> Result<Vec<f64>, IntensityError> {
        match self {
            BaselineFamily::LogLinear => Ok(theta.to_vec()),
            BaselineFamily::LinearShift => {
                if theta[0] <= 0.0 || theta[1] <= 0.0 {
                    return Err(IntensityError::BadBaseline {
                        family: self.name(),
                        reason: format!("need θ₀ > 0 and θ₁ > 0, got ({}, {})", theta[0], theta[1]),
                    });
                }
                Ok(vec![theta[0].ln(), theta[1].ln()])
            }
        }
    }

    /// Unconstrained → natural.
    fn to_natural(&self, u: &[f64]) -> Vec<f64> {
        match self {
            BaselineFamily::LogLinear => u.to_vec(),
            BaselineFamily::LinearShift => vec![u[0].exp(), u[1].exp()],
        }
    }

    /// `λ₀(t)` on the unconstrained scale.
    fn lambda0(&self, u: &[f64], t: f64) -> f64 {
        match self {
            BaselineFamily::LogLinear => (u[0] + u[1] * t).exp(),
            BaselineFamily::LinearShift => u[0].exp() * (t + u[1].exp()),
        }
    }

    fn log_lambda0(&self, u: &[f64], t: f64) -> f64 {
        match self {
            BaselineFamily::LogLinear => u[0] + u[1] * t,
            BaselineFamily::LinearShift => u[0] + (t + u[1].exp()).ln(),
        }
    }

    /// Gradient of `log λ₀(t)` in the unconstrained parameters.
    fn dlog_lambda0(&self, u: &[f64], t: f64, out: &mut [f64]) {
        match self {
            BaselineFamily::LogLinear => {
                out[0] = 1.0;
                out[1] = t;
            }
            BaselineFamily::LinearShift => {
                let shift = u[1].exp();
                out[0] = 1.0;
                out[1] = shift / (t + shift);
            }
        }
    }
}

/// Pre-specified covariate transform `g{Z(t)}`; the identity by default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum CovariateMap {
    Identity,
    /// Componentwise scaling, `g(z)_k = factors_k · z_k`.
    Scale { factors: Vec<f64> },
}

impl CovariateMap {
    fn apply(&self, z: &[f64], out: &mut [f64]) {
        match self {
            CovariateMap::Identity => out.copy_from_slice(z),
            CovariateMap::Scale { factors } => {
                for ((o, z), f) in out.iter_mut().zip(z).zip(factors) {
                    *o = f * z;
                }
            }
        }
    }
}

/// Optional weight post-processing.
#[derive(Clone, Copy, Debug, Default)]
pub struct WeightOptions {
    /// Cap weights at their p-th quantile (diagnostic only; off by default).
    pub truncate_quantile: Option<f64>,
}

/// Convergence diagnostics of a fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub nll: f64,
}

/// A proportional-intensity model, either fitted from data or explicitly
/// parameterized (e.g. with the known truth in a simulation arm).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntensityModel {
    pub family: BaselineFamily,
    /// Baseline parameters on the natural scale.
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub covariate_map: CovariateMap,
    pub fitted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<FitDiagnostics>,
    /// Model-based standard errors of `β̂` from the inverse observed
    /// information, available after fitting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_se: Option<Vec<f64>>,
    /// Observed information at the optimum, row-major, over the internal
    /// unconstrained parameterization `(θ̃, β)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_information: Option<Vec<Vec<f64>>>,
}

impl IntensityModel {
    /// Build an explicitly parameterized model (no fitting). Parameters are
    /// validated against the family's positivity constraints.
    pub fn from_params(
        family: BaselineFamily,
        theta: &[f64],
        beta: &[f64],
        covariate_map: CovariateMap,
    ) -> Result<Self, IntensityError> {
        if theta.len() != family.param_len() {
            return Err(IntensityError::ParamLength {
                expected: family.param_len(),
                found: theta.len(),
            });
        }
        family.to_unconstrained(theta)?;
        Ok(Self {
            family,
            theta: theta.to_vec(),
            beta: beta.to_vec(),
            covariate_map,
            fitted: false,
            diagnostics: None,
            beta_se: None,
            observed_information: None,
        })
    }

    /// Baseline intensity `λ₀(t)`.
    pub fn baseline_at(&self, t: f64) -> f64 {
        let u = self.family.to_unconstrained(&self.theta).unwrap();
        self.family.lambda0(&u, t)
    }

    /// Intensity `λ₀(t)·exp[g{Z(t)}ᵀβ]` for one subject, with the covariate
    /// looked up by carry-forward.
    pub fn intensity_at(&self, subject: &Subject, t: f64) -> Result<f64, IntensityError> {
        let lp = self.linear_predictor(subject, t)?;
        let lam = self.baseline_at(t) * lp.exp();
        if !(lam > 0.0 && lam.is_finite()) {
            return Err(IntensityError::NonPositiveBaseline { t });
        }
        Ok(lam)
    }

    fn linear_predictor(&self, subject: &Subject, t: f64) -> Result<f64, IntensityError> {
        if self.beta.is_empty() {
            return Ok(0.0);
        }
        let z = subject.covariate_at(t)?;
        let mut g = vec![0.0; z.len()];
        self.covariate_map.apply(z, &mut g);
        Ok(g.iter().zip(&self.beta).map(|(a, b)| a * b).sum())
    }

    /// Inverse-intensity weights `w_ij = λ̂₀(t_ij)⁻¹·exp[−β̂ᵀg{Z(t_ij)}]`,
    /// aligned with each subject's outcomes.
    pub fn mean_weights(&self, data: &LongitudinalDataset) -> Result<Vec<Vec<f64>>, IntensityError> {
        self.mean_weights_with(data, &WeightOptions::default())
    }

    pub fn mean_weights_with(
        &self,
        data: &LongitudinalDataset,
        options: &WeightOptions,
    ) -> Result<Vec<Vec<f64>>, IntensityError> {
        let mut all = Vec::with_capacity(data.n());
        for s in data.subjects() {
            let mut ws = Vec::with_capacity(s.num_obs());
            for o in &s.outcomes {
                let w = 1.0 / self.intensity_at(s, o.time)?;
                if !(w > 0.0 && w.is_finite()) {
                    return Err(IntensityError::BadWeight {
                        subject: s.id.clone(),
                        time: o.time,
                        weight: w,
                    });
                }
                ws.push(w);
            }
            all.push(ws);
        }
        if let Some(p) = options.truncate_quantile {
            truncate_weights(&mut all, p)?;
        }
        Ok(all)
    }

    /// Pair weights `w_ijl = w_ij · w_il` for ordered pairs `j ≠ l` within
    /// each subject (empty for subjects with fewer than two observations).
    pub fn pair_weights(
        &self,
        data: &LongitudinalDataset,
    ) -> Result<Vec<Vec<PairWeight>>, IntensityError> {
        let mean = self.mean_weights(data)?;
        Ok(pair_weights_from_mean(&mean))
    }
}

/// Weight of one ordered within-subject pair of observations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairWeight {
    pub first: usize,
    pub second: usize,
    pub weight: f64,
}

/// Product pair weights from per-observation weights.
pub fn pair_weights_from_mean(mean: &[Vec<f64>]) -> Vec<Vec<PairWeight>> {
    mean.iter()
        .map(|ws| {
            let m = ws.len();
            let mut out = Vec::with_capacity(m.saturating_sub(1) * m);
            for j in 0..m {
                for l in 0..m {
                    if j != l {
                        out.push(PairWeight {
                            first: j,
                            second: l,
                            weight: ws[j] * ws[l],
                        });
                    }
                }
            }
            out
        })
        .collect()
}

fn truncate_weights(all: &mut [Vec<f64>], p: f64) -> Result<(), IntensityError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(IntensityError::BadQuantile(p));
    }
    let mut flat: Vec<f64> = all.iter().flatten().copied().collect();
    if flat.is_empty() {
        return Ok(());
    }
    flat.sort_by(|a, b| a.total_cmp(b));
    let idx = ((p * flat.len() as f64).ceil() as usize).clamp(1, flat.len()) - 1;
    let cap = flat[idx];
    for ws in all.iter_mut() {
        for w in ws.iter_mut() {
            *w = w.min(cap);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Likelihood evaluation
// ---------------------------------------------------------------------------

/// Pre-assembled quadrature plan and covariate values for one dataset; fixed
/// across optimizer iterations.
struct Workspace {
    /// Per subject: exposure nodes `(t, quadrature weight, g(z))`.
    nodes: Vec<Vec<(f64, f64, Vec<f64>)>>,
    /// Per subject: event terms `(t, g(z))`.
    events: Vec<Vec<(f64, Vec<f64>)>>,
    beta_dim: usize,
}

impl Workspace {
    fn build(
        data: &LongitudinalDataset,
        map: &CovariateMap,
        beta_dim: usize,
    ) -> Result<Self, IntensityError> {
        let mut nodes = Vec::with_capacity(data.n());
        let mut events = Vec::with_capacity(data.n());
        for s in data.subjects() {
            // Segment boundaries where the carried-forward covariate changes.
            let mut bounds = vec![0.0];
            if beta_dim > 0 {
                match s.covariates.first() {
                    Some(first) if first.time <= 0.0 => {}
                    Some(first) => {
                        return Err(IntensityError::CovariateGap {
                            subject: s.id.clone(),
                            first: first.time,
                        });
                    }
                    None => {
                        return Err(IntensityError::CovariateGap {
                            subject: s.id.clone(),
                            first: f64::NAN,
                        });
                    }
                }
                for r in &s.covariates {
                    if r.time > 0.0 && r.time < s.end_time {
                        bounds.push(r.time);
                    }
                }
            } else {
                // No covariate effect: use a fixed composite grid.
                for k in 1..16 {
                    bounds.push(s.end_time * k as f64 / 16.0);
                }
            }
            bounds.push(s.end_time);

            let nsegs = bounds.len() - 1;
            let per_seg = MIN_NODES_PER_SUBJECT.div_ceil(nsegs).max(2);
            let rule = GaussLegendre::new(per_seg);
            let mut subj_nodes = Vec::with_capacity(nsegs * per_seg);
            for seg in bounds.windows(2) {
                if seg[1] <= seg[0] {
                    continue;
                }
                for (t, w) in rule.mapped(seg[0], seg[1]) {
                    let g = lookup_g(s, map, beta_dim, t)?;
                    subj_nodes.push((t, w, g));
                }
            }
            nodes.push(subj_nodes);

            let mut subj_events = Vec::with_capacity(s.num_obs());
            for o in &s.outcomes {
                subj_events.push((o.time, lookup_g(s, map, beta_dim, o.time)?));
            }
            events.push(subj_events);
        }
        Ok(Self {
            nodes,
            events,
            beta_dim,
        })
    }

    fn num_events(&self) -> usize {
        self.events.iter().map(Vec::len).sum()
    }

    /// Negative log-likelihood on the unconstrained scale. Returns
    /// `+∞` when the linear predictor overflows, so line searches back off.
    fn nll(&self, family: BaselineFamily, u: &[f64]) -> f64 {
        let (theta_u, beta) = u.split_at(family.param_len());
        let mut total = 0.0;
        for (subj_nodes, subj_events) in self.nodes.iter().zip(&self.events) {
            for (t, w, g) in subj_nodes {
                let lp: f64 = g.iter().zip(beta).map(|(a, b)| a * b).sum();
                if lp > 700.0 {
                    return f64::INFINITY;
                }
                total += w * family.lambda0(theta_u, *t) * lp.exp();
            }
            for (t, g) in subj_events {
                let lp: f64 = g.iter().zip(beta).map(|(a, b)| a * b).sum();
                total -= family.log_lambda0(theta_u, *t) + lp;
            }
        }
        total
    }

    /// Negative log-likelihood and its analytic gradient, unconstrained scale.
    fn nll_grad(&self, family: BaselineFamily, u: &[f64]) -> (f64, Vec<f64>) {
        let p_theta = family.param_len();
        let (theta_u, beta) = u.split_at(p_theta);
        let mut f = 0.0;
        let mut grad = vec![0.0; u.len()];
        let mut dlog = vec![0.0; p_theta];
        for (subj_nodes, subj_events) in self.nodes.iter().zip(&self.events) {
            for (t, w, g) in subj_nodes {
                let lp: f64 = g.iter().zip(beta).map(|(a, b)| a * b).sum();
                if lp > 700.0 {
                    return (f64::INFINITY, grad);
                }
                let lam0 = family.lambda0(theta_u, *t);
                let contrib = w * lam0 * lp.exp();
                f += contrib;
                // d/dθ̃ λ₀ = λ₀ · d/dθ̃ log λ₀ for both families.
                family.dlog_lambda0(theta_u, *t, &mut dlog);
                for k in 0..p_theta {
                    grad[k] += contrib * dlog[k];
                }
                for k in 0..self.beta_dim {
                    grad[p_theta + k] += contrib * g[k];
                }
            }
            for (t, g) in subj_events {
                let lp: f64 = g.iter().zip(beta).map(|(a, b)| a * b).sum();
                f -= family.log_lambda0(theta_u, *t) + lp;
                family.dlog_lambda0(theta_u, *t, &mut dlog);
                for k in 0..p_theta {
                    grad[k] -= dlog[k];
                }
                for k in 0..self.beta_dim {
                    grad[p_theta + k] -= g[k];
                }
            }
        }
        (f, grad)
    }
}

fn lookup_g(
    s: &Subject,
    map: &CovariateMap,
    beta_dim: usize,
    t: f64,
) -> Result<Vec<f64>, IntensityError> {
    if beta_dim == 0 {
        return Ok(Vec::new());
    }
    let z = s.covariate_at(t)?;
    let mut g = vec![0.0; z.len()];
    map.apply(z, &mut g);
    Ok(g)
}

/// Negative log-likelihood of natural-scale parameters `θ_λ ⊕ β`.
///
/// Validates the baseline on the quadrature grid; an empty dataset gives 0.
pub fn neg_log_likelihood(
    family: BaselineFamily,
    covariate_map: &CovariateMap,
    theta: &[f64],
    beta: &[f64],
    data: &LongitudinalDataset,
) -> Result<f64, IntensityError> {
    if theta.len() != family.param_len() {
        return Err(IntensityError::ParamLength {
            expected: family.param_len(),
            found: theta.len(),
        });
    }
    let mut u = family.to_unconstrained(theta)?;
    u.extend_from_slice(beta);
    let ws = Workspace::build(data, covariate_map, beta.len())?;
    // Baseline positivity over the whole grid.
    for subj_nodes in &ws.nodes {
        for (t, _, _) in subj_nodes {
            if !(family.lambda0(&u[..family.param_len()], *t) > 0.0) {
                return Err(IntensityError::NonPositiveBaseline { t: *t });
            }
        }
    }
    Ok(ws.nll(family, &u))
}

/// Fitting controls.
#[derive(Clone, Debug)]
pub struct FitOptions {
    /// Initial natural-scale parameters `θ_λ ⊕ β`; a data-driven default
    /// when `None`.
    pub init: Option<Vec<f64>>,
    /// Convergence threshold on `‖∇nll‖∞`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            init: None,
            tol: 1e-6,
            max_iter: 300,
        }
    }
}

/// Maximize the likelihood jointly in `(θ_λ, β)` by BFGS with a backtracking
/// line search; retries once from a perturbed start before reporting
/// non-convergence. The fitted model carries the observed information
/// (PSD-checked) and model-based standard errors for `β̂`.
pub fn fit_intensity(
    data: &LongitudinalDataset,
    family: BaselineFamily,
    covariate_map: CovariateMap,
    options: &FitOptions,
) -> Result<IntensityModel, IntensityError> {
    let beta_dim = data.covariate_dim();
    let ws = Workspace::build(data, &covariate_map, beta_dim)?;
    let num_events = ws.num_events();
    if num_events == 0 {
        return Err(IntensityError::NoEvents);
    }

    let u0 = match &options.init {
        Some(init) => {
            let expected = family.param_len() + beta_dim;
            if init.len() != expected {
                return Err(IntensityError::ParamLength {
                    expected,
                    found: init.len(),
                });
            }
            let mut u = family.to_unconstrained(&init[..family.param_len()])?;
            u.extend_from_slice(&init[family.param_len()..]);
            u
        }
        None => default_init(data, family, num_events, beta_dim),
    };

    let objective = |u: &[f64]| ws.nll_grad(family, u);
    let result = match bfgs(&objective, &u0, options.tol, options.max_iter) {
        Ok(r) => r,
        Err(_) => {
            // One retry from a deterministically perturbed start.
            let perturbed: Vec<f64> = u0
                .iter()
                .enumerate()
                .map(|(i, &v)| v + if i % 2 == 0 { 0.25 } else { -0.25 })
                .collect();
            bfgs(&objective, &perturbed, options.tol, options.max_iter).map_err(|last| {
                IntensityError::NonConvergence {
                    iterations: options.max_iter,
                    grad_norm: last.grad_norm,
                    nll: last.f,
                    last_params: last.x,
                }
            })?
        }
    };

    // Observed information via central differences of the analytic gradient.
    let dim = result.x.len();
    let mut info = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        let h = 1e-4 * (1.0 + result.x[i].abs());
        let mut xp = result.x.clone();
        xp[i] += h;
        let mut xm = result.x.clone();
        xm[i] -= h;
        let gp = ws.nll_grad(family, &xp).1;
        let gm = ws.nll_grad(family, &xm).1;
        for j in 0..dim {
            info[(i, j)] += (gp[j] - gm[j]) / (2.0 * h);
        }
    }
    let info = (&info + info.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(info.clone());
    let max_eig = eig.eigenvalues.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min_eig < -1e-6 * max_eig.max(1.0) {
        return Err(IntensityError::InformationNotPsd { min_eig });
    }

    let beta_se = nalgebra::Cholesky::new(info.clone()).map(|chol| {
        let cov = chol.inverse();
        (0..beta_dim)
            .map(|k| {
                let idx = family.param_len() + k;
                cov[(idx, idx)].max(0.0).sqrt()
            })
            .collect::<Vec<f64>>()
    });

    let p_theta = family.param_len();
    Ok(IntensityModel {
        family,
        theta: family.to_natural(&result.x[..p_theta]),
        beta: result.x[p_theta..].to_vec(),
        covariate_map,
        fitted: true,
        diagnostics: Some(FitDiagnostics {
            converged: true,
            iterations: result.iterations,
            grad_norm: result.grad_norm,
            nll: result.f,
        }),
        beta_se,
        observed_information: Some(
            (0..dim)
                .map(|r| (0..dim).map(|c| info[(r, c)]).collect())
                .collect(),
        ),
    })
}

fn default_init(
    data: &LongitudinalDataset,
    family: BaselineFamily,
    num_events: usize,
    beta_dim: usize,
) -> Vec<f64> {
    let exposure: f64 = data.subjects().iter().map(|s| s.end_time).sum();
    let rate = (num_events as f64 / exposure.max(1e-12)).max(1e-12);
    let mut u = match family {
        BaselineFamily::LogLinear => vec![rate.ln(), 0.0],
        // λ₀ = e^a (t + e^b); match the average rate with shift 1.
        BaselineFamily::LinearShift => {
            let tau = data.tau();
            vec![(rate / (0.5 * tau + 1.0)).ln(), 0.0]
        }
    };
    u.extend(std::iter::repeat(0.0).take(beta_dim));
    u
}

// ---------------------------------------------------------------------------
// BFGS with backtracking line search
// ---------------------------------------------------------------------------

struct Minimum {
    x: Vec<f64>,
    f: f64,
    grad_norm: f64,
    iterations: usize,
}

/// Minimize `f` from `x0`. On failure, returns the last iterate so callers
/// can surface it.
fn bfgs<F>(objective: &F, x0: &[f64], tol: f64, max_iter: usize) -> Result<Minimum, Minimum>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let dim = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut f, g) = objective(x.as_slice());
    let mut g = DVector::from_vec(g);
    let mut h_inv = DMatrix::identity(dim, dim);
    let mut reset_used = false;

    for iter in 0..max_iter {
        let gnorm = g.amax();
        if gnorm < tol && f.is_finite() {
            return Ok(Minimum {
                x: x.as_slice().to_vec(),
                f,
                grad_norm: gnorm,
                iterations: iter,
            });
        }

        let mut dir = -(&h_inv * &g);
        if dir.dot(&g) >= 0.0 {
            h_inv = DMatrix::identity(dim, dim);
            dir = -g.clone();
        }

        // Backtracking Armijo search; ∞ objective values simply reject.
        let slope = g.dot(&dir);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let x_new = &x + &dir * alpha;
            let (f_new, g_new) = objective(x_new.as_slice());
            if f_new.is_finite() && f_new <= f + 1e-4 * alpha * slope {
                accepted = Some((x_new, f_new, DVector::from_vec(g_new)));
                break;
            }
            alpha *= 0.5;
        }

        let (x_new, f_new, g_new) = match accepted {
            Some(t) => t,
            None => {
                if reset_used {
                    return Err(Minimum {
                        x: x.as_slice().to_vec(),
                        f,
                        grad_norm: gnorm,
                        iterations: iter,
                    });
                }
                reset_used = true;
                h_inv = DMatrix::identity(dim, dim);
                continue;
            }
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if iter == 0 {
                let scale = sy / y.dot(&y);
                if scale.is_finite() && scale > 0.0 {
                    h_inv = DMatrix::identity(dim, dim) * scale;
                }
            }
            // H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            let ss = &s * s.transpose();
            let hy_s = &hy * s.transpose();
            h_inv = h_inv - (&hy_s + hy_s.transpose()) * rho + ss * (rho * (1.0 + rho * yhy));
        }

        x = x_new;
        f = f_new;
        g = g_new;
    }

    let gnorm = g.amax();
    if gnorm < tol && f.is_finite() {
        return Ok(Minimum {
            x: x.as_slice().to_vec(),
            f,
            grad_norm: gnorm,
            iterations: max_iter,
        });
    }
    Err(Minimum {
        x: x.as_slice().to_vec(),
        f,
        grad_norm: gnorm,
        iterations: max_iter,
    })
}
