//! Generative model for the Monte Carlo study: a smooth covariate process,
//! outcomes observed at the events of an inhomogeneous Poisson process whose
//! intensity depends on the covariate, and the experiment harness comparing
//! unweighted, true-weight, and estimated-weight estimators.
//!
//! The covariate is `Z_i(t) = sin(t + 1/2) + Σ_k ν_k ζ_ik φ_k(t)` with
//! `ν_k = (−1)^{k+1}(k+1)⁻¹`, `ζ_ik ~ U[−√3, √3]` and
//! `φ_k(t) = √(2/3)·cos(kπt)` on `[0, 3]`; outcomes are `X = 5Z + ε`.
//! Observation times follow the intensity `θ₀(t + 1/4)·exp{β·Z_i(t)}`,
//! sampled exactly by thinning against a per-subject piecewise-constant
//! envelope. Each subject draws from its own counter-derived ChaCha stream,
//! so subject `i`'s data is invariant to the total sample size.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bspline::{BasisError, SplineBasis};
use crate::covariance::{self, CovError, CovFit};
use crate::fpca::{self, FpcaError, FpcaResult};
use crate::intensity::{
    fit_intensity, pair_weights_from_mean, BaselineFamily, CovariateMap, FitOptions,
    IntensityError, IntensityModel,
};
use crate::io::{CovariateRecord, DataError, LongitudinalDataset, Observation, Subject};
use crate::mean::{self, MeanError, MeanFit, MeanObservation};

/// Baseline slope calibrated so the default design yields an average of 8.3
/// observations per trajectory (`θ₀ = 8.3 / ∫(t+1/4)·E[e^{3Z(t)}]dt`).
pub const DEFAULT_BASELINE_SCALE: f64 = 0.0814733994973258;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Intensity(#[from] IntensityError),
    #[error(transparent)]
    Mean(#[from] MeanError),
    #[error(transparent)]
    Cov(#[from] CovError),
    #[error(transparent)]
    Fpca(#[from] FpcaError),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("no positive eigenvalue retained; first component undefined")]
    NoComponents,
    #[error("replicate {replicate}, arm {arm}: {message}")]
    Replicate {
        replicate: usize,
        arm: String,
        message: String,
    },
}

/// Configuration of the generative design.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub seed: u64,
    pub tau: f64,
    /// Number of Karhunen–Loève terms in the covariate process.
    pub num_terms: usize,
    /// Measurement-error variance of the outcome.
    pub sigma_eps2: f64,
    /// Covariate effect in the observation intensity.
    pub beta: f64,
    /// Baseline intensity `λ₀(t) = baseline_scale·(t + baseline_shift)`.
    pub baseline_scale: f64,
    pub baseline_shift: f64,
    /// Mean number of covariate sampling times per subject (Poisson count of
    /// uniform times, plus a baseline record at t = 0).
    pub covariate_rate: f64,
}

impl SimConfig {
    /// The default design at sample size `n`.
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            tau: 3.0,
            num_terms: 50,
            sigma_eps2: 0.01,
            beta: 3.0,
            baseline_scale: DEFAULT_BASELINE_SCALE,
            baseline_shift: 0.25,
            covariate_rate: 40.0,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.tau <= 0.0
            || self.baseline_scale <= 0.0
            || self.baseline_shift <= 0.0
            || self.sigma_eps2 < 0.0
            || self.covariate_rate <= 0.0
            || self.num_terms == 0
        {
            return Err(SimError::BadConfig(format!("{self:?}")));
        }
        Ok(())
    }

    /// Karhunen–Loève weight `ν_k`.
    pub fn nu(&self, k: usize) -> f64 {
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        sign / (k as f64 + 1.0)
    }

    /// True mean `μ(t) = 5·sin(t + 1/2)`.
    pub fn mu_true(&self, t: f64) -> f64 {
        5.0 * (t + 0.5).sin()
    }

    /// Orthonormal eigenfunction `φ_k(t) = √(2/3)·cos(kπt)`.
    pub fn phi_true(&self, k: usize, t: f64) -> f64 {
        (2.0 / self.tau).sqrt() * (k as f64 * std::f64::consts::PI * t).cos()
    }

    /// True eigenvalue `κ_k = 25·ν_k²`.
    pub fn kappa_true(&self, k: usize) -> f64 {
        25.0 * self.nu(k) * self.nu(k)
    }

    /// True covariance `C(s, t) = 25·Σ_k ν_k² φ_k(s) φ_k(t)`.
    pub fn cov_true(&self, s: f64, t: f64) -> f64 {
        (1..=self.num_terms)
            .map(|k| self.kappa_true(k) * self.phi_true(k, s) * self.phi_true(k, t))
            .sum()
    }

    /// The true observation-intensity model, usable for weights when a
    /// dataset lacks stored intensities.
    pub fn true_model(&self) -> Result<IntensityModel, IntensityError> {
        IntensityModel::from_params(
            BaselineFamily::LinearShift,
            &[self.baseline_scale, self.baseline_shift],
            &[self.beta],
            CovariateMap::Identity,
        )
    }
}

/// One subject's Karhunen–Loève draw; evaluates `Z_i(t)` exactly.
struct CovariatePath {
    coeffs: Vec<f64>,
}

impl CovariatePath {
    fn draw(config: &SimConfig, rng: &mut ChaCha8Rng) -> Self {
        let sqrt3 = 3.0_f64.sqrt();
        let amp = (2.0 / config.tau).sqrt();
        let coeffs = (1..=config.num_terms)
            .map(|k| config.nu(k) * amp * rng.random_range(-sqrt3..sqrt3))
            .collect();
        Self { coeffs }
    }

    /// `Z(t)` via the Chebyshev recurrence for `cos(kπt)`.
    fn eval(&self, t: f64) -> f64 {
        let x = std::f64::consts::PI * t;
        let c1 = x.cos();
        let mut prev = 1.0; // cos(0)
        let mut cur = c1; // cos(x)
        let mut sum = 0.0;
        for &c in &self.coeffs {
            sum += c * cur;
            let next = 2.0 * c1 * cur - prev;
            prev = cur;
            cur = next;
        }
        (t + 0.5).sin() + sum
    }

    /// `Σ|coeff|`, a uniform bound on the stochastic part of `Z`.
    fn noise_bound(&self) -> f64 {
        self.coeffs.iter().map(|c| c.abs()).sum()
    }
}

/// Derive the per-subject ChaCha seed from the master seed, replicate index
/// and subject index with a splitmix64 chain.
fn subject_rng(master: u64, replicate: u64, subject: u64) -> ChaCha8Rng {
    let mut state = splitmix64(master ^ 0x9e37_79b9_7f4a_7c15);
    state = splitmix64(state ^ replicate.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    state = splitmix64(state ^ subject.wrapping_mul(0x94d0_49bb_1331_11eb));
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Largest value of `sin(t + 1/2)` on `[a, b]`.
fn sup_sin(a: f64, b: f64) -> f64 {
    let peak = std::f64::consts::FRAC_PI_2 - 0.5;
    if a <= peak && peak <= b {
        1.0
    } else {
        (a + 0.5).sin().max((b + 0.5).sin())
    }
}

/// Sample the event times of the observation process by thinning against a
/// piecewise-constant majorant built from the subject's coefficient bound.
fn sample_event_times(config: &SimConfig, path: &CovariatePath, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const INTERVALS: usize = 32;
    let tau = config.tau;
    let bound = path.noise_bound();
    let mut events = Vec::new();
    for j in 0..INTERVALS {
        let a = tau * j as f64 / INTERVALS as f64;
        let b = tau * (j + 1) as f64 / INTERVALS as f64;
        // exp{βZ} ≤ exp of the signed envelope of βZ on the interval.
        let log_factor = if config.beta >= 0.0 {
            config.beta * (sup_sin(a, b) + bound)
        } else {
            -config.beta * (1.0 + bound)
        };
        let lam_bar = config.baseline_scale * (b + config.baseline_shift) * log_factor.exp();
        let expected = lam_bar * (b - a);
        if expected <= 0.0 {
            continue;
        }
        let count = Poisson::new(expected)
            .expect("positive mean")
            .sample(rng) as usize;
        for _ in 0..count {
            let t = rng.random_range(a..b);
            let lam = config.baseline_scale
                * (t + config.baseline_shift)
                * (config.beta * path.eval(t)).exp();
            debug_assert!(lam <= lam_bar * (1.0 + 1e-9));
            if rng.random::<f64>() * lam_bar <= lam {
                events.push(t);
            }
        }
    }
    events.sort_by(f64::total_cmp);
    events.dedup();
    events
}

/// Generate one subject: covariate draw, dense covariate records (baseline
/// record at t = 0 plus a Poisson count of uniform times), event times by
/// thinning, and noisy outcomes with the true event intensity recorded.
pub fn gen_subject(config: &SimConfig, index: usize, rng: &mut ChaCha8Rng) -> Subject {
    let path = CovariatePath::draw(config, rng);

    let count = Poisson::new(config.covariate_rate)
        .expect("positive rate")
        .sample(rng) as usize;
    let mut times: Vec<f64> = (0..count)
        .map(|_| rng.random_range(0.0..config.tau))
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut covariates = Vec::with_capacity(times.len() + 1);
    covariates.push(CovariateRecord {
        time: 0.0,
        values: vec![path.eval(0.0)],
    });
    for t in times {
        if t > 0.0 {
            covariates.push(CovariateRecord {
                time: t,
                values: vec![path.eval(t)],
            });
        }
    }

    let event_times = sample_event_times(config, &path, rng);
    let noise = Normal::new(0.0, config.sigma_eps2.sqrt()).expect("valid variance");
    let mut outcomes = Vec::with_capacity(event_times.len());
    let mut intensities = Vec::with_capacity(event_times.len());
    for &t in &event_times {
        let z = path.eval(t);
        outcomes.push(Observation {
            time: t,
            value: 5.0 * z + noise.sample(rng),
        });
        intensities.push(
            config.baseline_scale * (t + config.baseline_shift) * (config.beta * z).exp(),
        );
    }

    Subject {
        id: format!("s{index:05}"),
        end_time: config.tau,
        outcomes,
        covariates,
        true_intensities: Some(intensities),
    }
}

/// Generate a full dataset for one replicate. Subject `i` depends only on
/// `(seed, replicate, i)`.
pub fn gen_dataset(config: &SimConfig, replicate: u64) -> Result<LongitudinalDataset, SimError> {
    config.validate()?;
    let subjects: Vec<Subject> = (0..config.n)
        .map(|i| {
            let mut rng = subject_rng(config.seed, replicate, i as u64);
            gen_subject(config, i, &mut rng)
        })
        .collect();
    Ok(LongitudinalDataset::new(subjects)?)
}

// ---------------------------------------------------------------------------
// Integrated squared error metrics
// ---------------------------------------------------------------------------

/// Uniform grid of `points` values on `[0, end]`.
pub fn uniform_grid(end: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| end * i as f64 / (points - 1) as f64)
        .collect()
}

/// Trapezoid `∫(est − truth)²` over the grid.
pub fn mise_curve(est: &[f64], truth: &[f64], grid: &[f64]) -> f64 {
    assert_eq!(est.len(), grid.len());
    assert_eq!(truth.len(), grid.len());
    let mut acc = 0.0;
    for i in 1..grid.len() {
        let d1 = est[i] - truth[i];
        let d0 = est[i - 1] - truth[i - 1];
        acc += 0.5 * (grid[i] - grid[i - 1]) * (d1 * d1 + d0 * d0);
    }
    acc
}

/// Tensor-grid trapezoid `∫∫(est − truth)²`.
pub fn mise_surface(est: &DMatrix<f64>, truth: &DMatrix<f64>, grid: &[f64]) -> f64 {
    assert_eq!(est.nrows(), grid.len());
    assert_eq!(truth.nrows(), grid.len());
    let w = trapezoid_weights(grid);
    let mut acc = 0.0;
    for i in 0..grid.len() {
        for j in 0..grid.len() {
            let d = est[(i, j)] - truth[(i, j)];
            acc += w[i] * w[j] * d * d;
        }
    }
    acc
}

/// Trapezoid quadrature weights for an increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    for i in 1..n {
        let h = 0.5 * (grid[i] - grid[i - 1]);
        w[i - 1] += h;
        w[i] += h;
    }
    w
}

/// Sup-norm difference over the grid values.
pub fn sup_diff(est: &[f64], truth: &[f64]) -> f64 {
    est.iter()
        .zip(truth)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Experiment harness
// ---------------------------------------------------------------------------

/// The three estimation arms of the study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExperimentArm {
    /// Unit weights (ignores the observation process).
    Unweighted,
    /// Inverse of the true intensity.
    TrueWeights,
    /// Inverse of the fitted intensity.
    EstimatedWeights,
}

impl ExperimentArm {
    pub const ALL: [ExperimentArm; 3] = [
        ExperimentArm::Unweighted,
        ExperimentArm::TrueWeights,
        ExperimentArm::EstimatedWeights,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            ExperimentArm::Unweighted => "UW",
            ExperimentArm::TrueWeights => "TW",
            ExperimentArm::EstimatedWeights => "EW",
        }
    }
}

impl std::fmt::Display for ExperimentArm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for ExperimentArm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "uw" | "unweighted" => Ok(ExperimentArm::Unweighted),
            "tw" | "true" | "true-weights" => Ok(ExperimentArm::TrueWeights),
            "ew" | "estimated" | "estimated-weights" => Ok(ExperimentArm::EstimatedWeights),
            other => Err(format!("unknown arm {other:?} (expected uw, tw, or ew)")),
        }
    }
}

/// Estimator settings shared by all arms.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSettings {
    /// Interior knot count; `None` selects `⌊n^0.3⌋`.
    pub num_interior_knots: Option<usize>,
    pub order: usize,
    pub penalty_order: usize,
    pub lambda_grid_size: usize,
    pub num_components: usize,
    pub grid_points_curve: usize,
    pub grid_points_surface: usize,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            num_interior_knots: None,
            order: 4,
            penalty_order: 2,
            lambda_grid_size: 40,
            num_components: 3,
            grid_points_curve: 201,
            grid_points_surface: 101,
        }
    }
}

impl ExperimentSettings {
    pub fn interior_knots_for(&self, n: usize) -> usize {
        self.num_interior_knots
            .unwrap_or_else(|| (n as f64).powf(0.3).floor() as usize)
    }
}

/// Per-observation weights for one arm. Estimated weights come with the
/// fitted intensity model.
pub fn arm_weights(
    data: &LongitudinalDataset,
    arm: ExperimentArm,
    config: &SimConfig,
) -> Result<(Vec<Vec<f64>>, Option<IntensityModel>), SimError> {
    match arm {
        ExperimentArm::Unweighted => Ok((
            data.subjects()
                .iter()
                .map(|s| vec![1.0; s.num_obs()])
                .collect(),
            None,
        )),
        ExperimentArm::TrueWeights => {
            let fallback = config.true_model()?;
            let weights = data
                .subjects()
                .iter()
                .map(|s| match &s.true_intensities {
                    Some(lams) => Ok(lams.iter().map(|l| 1.0 / l).collect()),
                    None => s
                        .outcomes
                        .iter()
                        .map(|o| Ok(1.0 / fallback.intensity_at(s, o.time)?))
                        .collect::<Result<Vec<f64>, IntensityError>>(),
                })
                .collect::<Result<Vec<_>, IntensityError>>()?;
            Ok((weights, None))
        }
        ExperimentArm::EstimatedWeights => {
            let model = fit_intensity(
                data,
                BaselineFamily::LinearShift,
                CovariateMap::Identity,
                &FitOptions::default(),
            )?;
            let weights = model.mean_weights(data)?;
            Ok((weights, Some(model)))
        }
    }
}

/// All fitted artifacts of one arm on one dataset.
pub struct ArmFit {
    pub arm: ExperimentArm,
    pub intensity: Option<IntensityModel>,
    pub mean: MeanFit,
    pub cov: CovFit,
    pub fpca: FpcaResult,
    pub lambda_mu: f64,
    pub lambda_c: f64,
}

/// Run the full pipeline (weights → mean → covariance → eigen) for one arm,
/// selecting both smoothing parameters by GCV.
pub fn fit_arm(
    data: &LongitudinalDataset,
    arm: ExperimentArm,
    config: &SimConfig,
    settings: &ExperimentSettings,
) -> Result<ArmFit, SimError> {
    let (weights, intensity) = arm_weights(data, arm, config)?;
    let basis = SplineBasis::uniform(
        data.tau(),
        settings.interior_knots_for(data.n()),
        settings.order,
    )?;

    let obs = mean::mean_observations(data, &weights)?;
    let grid = mean::default_lambda_grid(&obs, &basis, settings.lambda_grid_size);
    let mean_sel = mean::gcv_select_mean(&obs, &basis, settings.penalty_order, &grid)?;

    let pair_weights = pair_weights_from_mean(&weights);
    let points = covariance::raw_cov_points(data, &mean_sel.fit, &pair_weights)?;
    let grid = covariance::default_lambda_grid(&points, &basis, settings.lambda_grid_size);
    let cov_sel = covariance::gcv_select_cov(&points, &basis, settings.penalty_order, &grid)?;

    let fpca = fpca::eigen_decompose(&cov_sel.fit, settings.num_components)?;

    Ok(ArmFit {
        arm,
        intensity,
        mean: mean_sel.fit,
        cov: cov_sel.fit,
        fpca,
        lambda_mu: mean_sel.lambda,
        lambda_c: cov_sel.lambda,
    })
}

/// Accuracy metrics of one replicate × arm against the generative truth.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub mise_mu: f64,
    pub mise_cov: f64,
    pub mise_phi1: f64,
    pub sup_mu: f64,
    pub sup_cov: f64,
    pub kappa1: f64,
    pub kappa1_abs_err: f64,
    pub beta_hat: Option<f64>,
    pub beta_se: Option<f64>,
}

/// One row of the per-replicate log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub arm: String,
    pub metrics: Option<ReplicateMetrics>,
    pub error: Option<String>,
}

/// Metric summary of one arm, Table-style: mean and standard deviation of
/// each integrated squared error over the successful replicates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub replicates_used: usize,
    pub failures: usize,
    pub mise_mu_mean: f64,
    pub mise_mu_sd: Option<f64>,
    pub mise_cov_mean: f64,
    pub mise_cov_sd: Option<f64>,
    pub mise_phi1_mean: f64,
    pub mise_phi1_sd: Option<f64>,
    pub median_sup_mu: f64,
    pub median_sup_cov: f64,
    pub median_kappa1_abs_err: f64,
}

/// Replicate-averaged estimate curves of one arm on the evaluation grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmCurves {
    pub arm: String,
    pub mu_mean: Vec<f64>,
    pub phi1_mean: Vec<f64>,
}

/// Full experiment output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub grid: Vec<f64>,
    pub records: Vec<ReplicateRecord>,
    pub summaries: Vec<ArmSummary>,
    pub curves: Vec<ArmCurves>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Record a failed replicate and keep going instead of aborting.
    pub continue_on_failure: bool,
}

struct ArmOutcome {
    arm: ExperimentArm,
    result: Result<(ReplicateMetrics, Vec<f64>, Vec<f64>), String>,
}

/// Evaluate one arm's metrics and estimate curves against the truth.
fn arm_metrics(
    fit: &ArmFit,
    config: &SimConfig,
    grid1: &[f64],
    grid2: &[f64],
) -> Result<(ReplicateMetrics, Vec<f64>, Vec<f64>), SimError> {
    let mu_est = fit.mean.evaluate_grid(grid1)?;
    let mu_truth: Vec<f64> = grid1.iter().map(|&t| config.mu_true(t)).collect();
    let mise_mu = mise_curve(&mu_est, &mu_truth, grid1);
    let sup_mu = sup_diff(&mu_est, &mu_truth);

    let cov_est = fit.cov.evaluate_grid(grid2)?;
    let cov_truth =
        DMatrix::from_fn(grid2.len(), grid2.len(), |i, j| config.cov_true(grid2[i], grid2[j]));
    let mise_cov = mise_surface(&cov_est, &cov_truth, grid2);
    let sup_cov = (&cov_est - &cov_truth).amax();

    if fit.fpca.num_retained() == 0 {
        return Err(SimError::NoComponents);
    }
    let phi1_est = fit.fpca.eval_component_grid(0, grid1)?;
    let phi1_truth: Vec<f64> = grid1.iter().map(|&t| config.phi_true(1, t)).collect();
    let mise_phi1 = fpca::aligned_squared_error(&phi1_est, &phi1_truth, grid1);
    // Align the stored curve to the truth so replicate averages do not cancel.
    let inner: f64 = phi1_est
        .iter()
        .zip(&phi1_truth)
        .map(|(a, b)| a * b)
        .sum();
    let phi1_aligned: Vec<f64> = if inner < 0.0 {
        phi1_est.iter().map(|v| -v).collect()
    } else {
        phi1_est
    };

    let kappa1 = fit.fpca.components()[0].eigenvalue;
    Ok((
        ReplicateMetrics {
            mise_mu,
            mise_cov,
            mise_phi1,
            sup_mu,
            sup_cov,
            kappa1,
            kappa1_abs_err: (kappa1 - config.kappa_true(1)).abs(),
            beta_hat: fit.intensity.as_ref().map(|m| m.beta[0]),
            beta_se: fit
                .intensity
                .as_ref()
                .and_then(|m| m.beta_se.as_ref().map(|se| se[0])),
        },
        mu_est,
        phi1_aligned,
    ))
}

/// Run `replicates` Monte Carlo replicates of the design over the given
/// arms, in parallel, with a fixed reduction order so output is independent
/// of the worker count.
pub fn run_experiment(
    config: &SimConfig,
    settings: &ExperimentSettings,
    arms: &[ExperimentArm],
    replicates: usize,
    options: &RunOptions,
) -> Result<ExperimentOutput, SimError> {
    config.validate()?;
    if replicates == 0 {
        return Err(SimError::BadConfig("replicates must be ≥ 1".into()));
    }
    let grid1 = uniform_grid(config.tau, settings.grid_points_curve);
    let grid2 = uniform_grid(config.tau, settings.grid_points_surface);

    let per_replicate: Vec<Vec<ArmOutcome>> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let data = match gen_dataset(config, rep as u64) {
                Ok(d) => d,
                Err(e) => {
                    return arms
                        .iter()
                        .map(|&arm| ArmOutcome {
                            arm,
                            result: Err(e.to_string()),
                        })
                        .collect();
                }
            };
            arms.iter()
                .map(|&arm| ArmOutcome {
                    arm,
                    result: fit_arm(&data, arm, config, settings)
                        .and_then(|fit| arm_metrics(&fit, config, &grid1, &grid2))
                        .map_err(|e| e.to_string()),
                })
                .collect()
        })
        .collect();

    let mut records = Vec::with_capacity(replicates * arms.len());
    let mut mu_acc: std::collections::HashMap<ExperimentArm, Vec<f64>> = Default::default();
    let mut phi_acc: std::collections::HashMap<ExperimentArm, Vec<f64>> = Default::default();

    for (rep, outcomes) in per_replicate.iter().enumerate() {
        for out in outcomes {
            match &out.result {
                Ok((metrics, mu, phi)) => {
                    records.push(ReplicateRecord {
                        replicate: rep,
                        arm: out.arm.tag().to_string(),
                        metrics: Some(metrics.clone()),
                        error: None,
                    });
                    let acc = mu_acc
                        .entry(out.arm)
                        .or_insert_with(|| vec![0.0; grid1.len()]);
                    for (a, v) in acc.iter_mut().zip(mu) {
                        *a += v;
                    }
                    let acc = phi_acc
                        .entry(out.arm)
                        .or_insert_with(|| vec![0.0; grid1.len()]);
                    for (a, v) in acc.iter_mut().zip(phi) {
                        *a += v;
                    }
                }
                Err(msg) => {
                    if !options.continue_on_failure {
                        return Err(SimError::Replicate {
                            replicate: rep,
                            arm: out.arm.tag().to_string(),
                            message: msg.clone(),
                        });
                    }
                    records.push(ReplicateRecord {
                        replicate: rep,
                        arm: out.arm.tag().to_string(),
                        metrics: None,
                        error: Some(msg.clone()),
                    });
                }
            }
        }
    }

    let mut summaries = Vec::new();
    let mut curves = Vec::new();
    for &arm in arms {
        let used: Vec<&ReplicateMetrics> = records
            .iter()
            .filter(|r| r.arm == arm.tag() && r.metrics.is_some())
            .map(|r| r.metrics.as_ref().unwrap())
            .collect();
        let failures = records
            .iter()
            .filter(|r| r.arm == arm.tag() && r.metrics.is_none())
            .count();
        let (mu_mean, mu_sd) = mean_sd(used.iter().map(|m| m.mise_mu));
        let (cov_mean, cov_sd) = mean_sd(used.iter().map(|m| m.mise_cov));
        let (phi_mean, phi_sd) = mean_sd(used.iter().map(|m| m.mise_phi1));
        summaries.push(ArmSummary {
            arm: arm.tag().to_string(),
            replicates_used: used.len(),
            failures,
            mise_mu_mean: mu_mean,
            mise_mu_sd: mu_sd,
            mise_cov_mean: cov_mean,
            mise_cov_sd: cov_sd,
            mise_phi1_mean: phi_mean,
            mise_phi1_sd: phi_sd,
            median_sup_mu: median(used.iter().map(|m| m.sup_mu)),
            median_sup_cov: median(used.iter().map(|m| m.sup_cov)),
            median_kappa1_abs_err: median(used.iter().map(|m| m.kappa1_abs_err)),
        });
        let count = used.len().max(1) as f64;
        curves.push(ArmCurves {
            arm: arm.tag().to_string(),
            mu_mean: mu_acc
                .remove(&arm)
                .unwrap_or_else(|| vec![0.0; grid1.len()])
                .into_iter()
                .map(|v| v / count)
                .collect(),
            phi1_mean: phi_acc
                .remove(&arm)
                .unwrap_or_else(|| vec![0.0; grid1.len()])
                .into_iter()
                .map(|v| v / count)
                .collect(),
        });
    }

    Ok(ExperimentOutput {
        grid: grid1,
        records,
        summaries,
        curves,
    })
}

fn mean_sd(values: impl Iterator<Item = f64>) -> (f64, Option<f64>) {
    let vals: Vec<f64> = values.collect();
    if vals.is_empty() {
        return (f64::NAN, None);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, None);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut vals: Vec<f64> = values.collect();
    if vals.is_empty() {
        return f64::NAN;
    }
    vals.sort_by(f64::total_cmp);
    let mid = vals.len() / 2;
    if vals.len() % 2 == 1 {
        vals[mid]
    } else {
        0.5 * (vals[mid - 1] + vals[mid])
    }
}

// ---------------------------------------------------------------------------
// Identification diagnostics
// ---------------------------------------------------------------------------

/// Weighted and unweighted bias of binned outcome means against the true
/// mean, for checking that inverse-intensity weighting removes the sampling
/// tilt.
#[derive(Clone, Debug)]
pub struct BinBias {
    pub center: f64,
    pub count: usize,
    pub weighted_bias: f64,
    pub unweighted_bias: f64,
}

/// Bin observations by time and compare `Σwx/Σw` and `Σx/m` against the
/// bin-averaged true mean, using the dataset's stored true intensities.
pub fn binned_mean_bias(
    data: &LongitudinalDataset,
    config: &SimConfig,
    num_bins: usize,
) -> Result<Vec<BinBias>, SimError> {
    if num_bins == 0 {
        return Err(SimError::BadConfig("num_bins must be ≥ 1".into()));
    }
    let tau = config.tau;
    let mut sum_w = vec![0.0; num_bins];
    let mut sum_wx = vec![0.0; num_bins];
    let mut sum_x = vec![0.0; num_bins];
    let mut count = vec![0usize; num_bins];
    let fallback = config.true_model()?;
    for s in data.subjects() {
        for (j, o) in s.outcomes.iter().enumerate() {
            let lam = match &s.true_intensities {
                Some(lams) => lams[j],
                None => fallback.intensity_at(s, o.time)?,
            };
            let w = 1.0 / lam;
            let bin = ((o.time / tau * num_bins as f64) as usize).min(num_bins - 1);
            sum_w[bin] += w;
            sum_wx[bin] += w * o.value;
            sum_x[bin] += o.value;
            count[bin] += 1;
        }
    }
    Ok((0..num_bins)
        .map(|b| {
            let lo = tau * b as f64 / num_bins as f64;
            let hi = tau * (b + 1) as f64 / num_bins as f64;
            // Bin-averaged truth by fine trapezoid.
            let grid = 51;
            let mut mu_bar = 0.0;
            for i in 0..grid {
                let t = lo + (hi - lo) * i as f64 / (grid - 1) as f64;
                let w = if i == 0 || i == grid - 1 { 0.5 } else { 1.0 };
                mu_bar += w * config.mu_true(t);
            }
            mu_bar /= (grid - 1) as f64;
            BinBias {
                center: 0.5 * (lo + hi),
                count: count[b],
                weighted_bias: if sum_w[b] > 0.0 {
                    sum_wx[b] / sum_w[b] - mu_bar
                } else {
                    f64::NAN
                },
                unweighted_bias: if count[b] > 0 {
                    sum_x[b] / count[b] as f64 - mu_bar
                } else {
                    f64::NAN
                },
            }
        })
        .collect())
}
