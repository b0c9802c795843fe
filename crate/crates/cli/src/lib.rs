//! Subcommand implementations behind the `fpca` binary: dataset simulation,
//! single-dataset fitting, the Monte Carlo experiment table, and the
//! empirical convergence-rate study. Every run ends by writing a manifest
//! with the resolved configuration and a SHA-256 digest of each artifact.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fpca_core::bspline::SplineBasis;
use fpca_core::covariance::{self, CovFit};
use fpca_core::fpca::{self, FpcaResult};
use fpca_core::intensity::{
    fit_intensity, pair_weights_from_mean, BaselineFamily, CovariateMap, FitOptions,
    IntensityModel,
};
use fpca_core::io::{
    self, apply_transform, CovariateTransform, LoadOptions, LongitudinalDataset, OutcomeTransform,
};
use fpca_core::mean::{self, MeanFit};
use fpca_core::simulate::{
    self, gen_dataset, run_experiment, ExperimentArm, ExperimentSettings, RunOptions, SimConfig,
};

#[derive(Parser, Debug)]
#[command(
    name = "fpca",
    version,
    about = "Functional PCA for longitudinal data with outcome-dependent observation times"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a benchmark dataset (outcome, covariate, and true-intensity
    /// CSVs plus the true functions on a grid).
    Simulate(SimulateArgs),
    /// Fit the full pipeline (weights, mean, covariance, components) on CSV
    /// data and persist every artifact.
    Fit(FitArgs),
    /// Reproduce the Monte Carlo comparison of unweighted, true-weight, and
    /// estimated-weight estimators.
    Experiment(ExperimentArgs),
    /// Empirical convergence-rate study across sample sizes.
    Rates(RatesArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct OutputArgs {
    /// Output directory (created if missing).
    #[arg(long, env = "FPCA_OUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct DesignArgs {
    /// Subjects per dataset.
    #[arg(long)]
    pub n: usize,
    /// Master seed; every output is a pure function of it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Covariate effect in the observation intensity.
    #[arg(long, default_value_t = 3.0)]
    pub beta: f64,
    /// Baseline intensity slope θ₀ in λ₀(t) = θ₀(t + θ₁).
    #[arg(long, default_value_t = simulate::DEFAULT_BASELINE_SCALE)]
    pub baseline_scale: f64,
    /// Baseline intensity shift θ₁.
    #[arg(long, default_value_t = 0.25)]
    pub baseline_shift: f64,
    /// Mean number of covariate sampling times per subject.
    #[arg(long, default_value_t = 40.0)]
    pub covariate_rate: f64,
    /// End of follow-up.
    #[arg(long, default_value_t = 3.0)]
    pub tau: f64,
}

impl DesignArgs {
    fn config(&self) -> SimConfig {
        let mut c = SimConfig::new(self.n, self.seed);
        c.beta = self.beta;
        c.baseline_scale = self.baseline_scale;
        c.baseline_shift = self.baseline_shift;
        c.covariate_rate = self.covariate_rate;
        c.tau = self.tau;
        c
    }
}

#[derive(Args, Debug, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub design: DesignArgs,
    /// Replicate index to generate (a dataset is a function of seed and
    /// replicate).
    #[arg(long, default_value_t = 0)]
    pub replicate: u64,
    /// Points of the truth grid export.
    #[arg(long, default_value_t = 201)]
    pub grid_points: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct EstimatorArgs {
    /// Interior knot count; defaults to ⌊n^0.3⌋.
    #[arg(long)]
    pub knots: Option<usize>,
    /// Spline order (4 = cubic).
    #[arg(long, default_value_t = 4)]
    pub order: usize,
    /// Derivative order of the roughness penalty.
    #[arg(long, default_value_t = 2)]
    pub penalty_order: usize,
    /// Points of the log-spaced smoothing-parameter grid.
    #[arg(long, default_value_t = 40)]
    pub lambda_grid: usize,
    /// Principal components to retain.
    #[arg(long, default_value_t = 3)]
    pub components: usize,
}

impl EstimatorArgs {
    fn settings(&self) -> ExperimentSettings {
        ExperimentSettings {
            num_interior_knots: self.knots,
            order: self.order,
            penalty_order: self.penalty_order,
            lambda_grid_size: self.lambda_grid,
            num_components: self.components,
            ..ExperimentSettings::default()
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct FitArgs {
    /// Outcome CSV (subject_id, time, value).
    #[arg(long)]
    pub outcome: PathBuf,
    /// Covariate CSV (subject_id, time, z1[, z2, …]).
    #[arg(long)]
    pub covariate: PathBuf,
    /// Optional true-intensity sidecar CSV (subject_id, time, intensity).
    #[arg(long)]
    pub intensity: Option<PathBuf>,
    /// End of follow-up applied to all subjects (defaults to each subject's
    /// last recorded time).
    #[arg(long)]
    pub tau: Option<f64>,
    /// Weighting arm: uw (unit), tw (true intensity), ew (estimated).
    #[arg(long, default_value = "ew")]
    pub arm: String,
    /// True baseline θ₀ for --arm tw without an intensity sidecar.
    #[arg(long)]
    pub theta0: Option<f64>,
    /// True baseline θ₁ for --arm tw without an intensity sidecar.
    #[arg(long)]
    pub theta1: Option<f64>,
    /// True β for --arm tw without an intensity sidecar.
    #[arg(long)]
    pub beta_true: Option<f64>,
    /// Outcome transform: identity | sqrt.
    #[arg(long, default_value = "identity")]
    pub outcome_transform: String,
    /// Covariate transform: identity | log.
    #[arg(long, default_value = "identity")]
    pub covariate_transform: String,
    /// Points of the exported curve grids.
    #[arg(long, default_value_t = 201)]
    pub grid_points: usize,
    /// Points per axis of the exported surface grid.
    #[arg(long, default_value_t = 61)]
    pub surface_grid_points: usize,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub design: DesignArgs,
    /// Monte Carlo replicates.
    #[arg(long)]
    pub reps: usize,
    /// Comma-separated arms (uw, tw, ew).
    #[arg(long, default_value = "uw,tw,ew", value_delimiter = ',')]
    pub arms: Vec<String>,
    /// Worker threads for replicate-level parallelism (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Record failed replicates and continue instead of aborting.
    #[arg(long, default_value_t = false)]
    pub keep_going: bool,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct RatesArgs {
    /// Comma-separated sample sizes.
    #[arg(long, default_value = "200,400,800", value_delimiter = ',')]
    pub ns: Vec<usize>,
    /// Replicates per sample size.
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Arm to study (the estimated-weight estimator by default).
    #[arg(long, default_value = "ew")]
    pub arm: String,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Experiment(args) => cmd_experiment(args),
        Command::Rates(args) => cmd_rates(args),
    }
}

// ---------------------------------------------------------------------------
// Manifest plumbing
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct Manifest {
    command: String,
    version: String,
    config: serde_json::Value,
    artifacts: Vec<ArtifactEntry>,
}

#[derive(Serialize)]
struct ArtifactEntry {
    path: String,
    sha256: String,
}

struct Artifacts {
    dir: PathBuf,
    entries: Vec<ArtifactEntry>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, name: &str) -> Result<()> {
        use sha2::{Digest, Sha256};
        let path = self.path(name);
        let bytes =
            std::fs::read(&path).with_context(|| format!("hashing {}", path.display()))?;
        let digest = Sha256::digest(&bytes);
        let sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.entries.push(ArtifactEntry {
            path: name.to_string(),
            sha256,
        });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        let file = std::fs::File::create(&path)
            .with_context(|| format!("creating {}", path.display()))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)?;
        self.record(name)
    }

    /// Write a CSV of string rows.
    fn write_csv<I, R>(&mut self, name: &str, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = String>,
    {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path)
            .with_context(|| format!("creating {}", path.display()))?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row.into_iter().collect::<Vec<String>>())?;
        }
        w.flush()?;
        self.record(name)
    }

    fn finish(self, command: &str, config: serde_json::Value) -> Result<()> {
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            artifacts: self.entries,
        };
        let path = self.dir.join("manifest.json");
        let file = std::fs::File::create(&path)
            .with_context(|| format!("creating {}", path.display()))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &manifest)?;
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    io::fmt_float(v)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(io::fmt_float).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let config = args.design.config();
    let data = gen_dataset(&config, args.replicate)?;
    let mut artifacts = Artifacts::new(&args.output.out_dir)?;

    io::write_outcome_csv(&data, &artifacts.path("outcome.csv"))?;
    artifacts.record("outcome.csv")?;
    io::write_covariate_csv(&data, &artifacts.path("covariate.csv"))?;
    artifacts.record("covariate.csv")?;
    io::write_intensity_csv(&data, &artifacts.path("intensity.csv"))?;
    artifacts.record("intensity.csv")?;

    let grid = simulate::uniform_grid(config.tau, args.grid_points);
    artifacts.write_csv(
        "truth.csv",
        &["t", "mu", "phi1", "cov_diag"],
        grid.iter().map(|&t| {
            vec![
                fmt(t),
                fmt(config.mu_true(t)),
                fmt(config.phi_true(1, t)),
                fmt(config.cov_true(t, t)),
            ]
        }),
    )?;

    let mean_obs = data.total_observations() as f64 / data.n().max(1) as f64;
    println!(
        "simulated {} subjects, {:.2} observations per trajectory",
        data.n(),
        mean_obs
    );
    artifacts.finish("simulate", serde_json::to_value(&args)?)
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

fn parse_outcome_transform(s: &str) -> Result<OutcomeTransform> {
    match s {
        "identity" => Ok(OutcomeTransform::Identity),
        "sqrt" => Ok(OutcomeTransform::Sqrt),
        other => bail!("unknown outcome transform {other:?} (identity|sqrt)"),
    }
}

fn parse_covariate_transform(s: &str) -> Result<CovariateTransform> {
    match s {
        "identity" => Ok(CovariateTransform::Identity),
        "log" => Ok(CovariateTransform::Log),
        other => bail!("unknown covariate transform {other:?} (identity|log)"),
    }
}

/// Weights for the requested arm on file-loaded data.
fn fit_weights(
    data: &LongitudinalDataset,
    arm: ExperimentArm,
    args: &FitArgs,
) -> Result<(Vec<Vec<f64>>, Option<IntensityModel>)> {
    match arm {
        ExperimentArm::Unweighted => Ok((
            data.subjects()
                .iter()
                .map(|s| vec![1.0; s.num_obs()])
                .collect(),
            None,
        )),
        ExperimentArm::TrueWeights => {
            if data
                .subjects()
                .iter()
                .all(|s| s.true_intensities.is_some() || s.num_obs() == 0)
            {
                let weights = data
                    .subjects()
                    .iter()
                    .map(|s| {
                        s.true_intensities
                            .as_ref()
                            .map(|l| l.iter().map(|v| 1.0 / v).collect())
                            .unwrap_or_default()
                    })
                    .collect();
                return Ok((weights, None));
            }
            let (theta0, theta1, beta) = match (args.theta0, args.theta1, args.beta_true) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => bail!(
                    "--arm tw needs either an --intensity sidecar or all of --theta0, --theta1, --beta-true"
                ),
            };
            let model = IntensityModel::from_params(
                BaselineFamily::LinearShift,
                &[theta0, theta1],
                &[beta],
                CovariateMap::Identity,
            )?;
            let weights = model.mean_weights(data)?;
            Ok((weights, Some(model)))
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

struct FittedPipeline {
    intensity: Option<IntensityModel>,
    mean: MeanFit,
    mean_theory_cap: f64,
    cov: CovFit,
    cov_theory_cap: f64,
    fpca: FpcaResult,
}

fn fit_pipeline(
    data: &LongitudinalDataset,
    weights: Vec<Vec<f64>>,
    intensity: Option<IntensityModel>,
    knots: usize,
    est: &EstimatorArgs,
) -> Result<FittedPipeline> {
    let basis = SplineBasis::uniform(data.tau(), knots, est.order)?;

    let obs = mean::mean_observations(data, &weights)?;
    let grid = mean::default_lambda_grid(&obs, &basis, est.lambda_grid);
    let mean_sel = mean::gcv_select_mean(&obs, &basis, est.penalty_order, &grid)?;

    let pair_weights = pair_weights_from_mean(&weights);
    let points = covariance::raw_cov_points(data, &mean_sel.fit, &pair_weights)?;
    let grid = covariance::default_lambda_grid(&points, &basis, est.lambda_grid);
    let cov_sel = covariance::gcv_select_cov(&points, &basis, est.penalty_order, &grid)?;

    let fpca = fpca::eigen_decompose(&cov_sel.fit, est.components)?;
    Ok(FittedPipeline {
        intensity,
        mean: mean_sel.fit,
        mean_theory_cap: mean_sel.lambda_theory_cap,
        cov: cov_sel.fit,
        cov_theory_cap: cov_sel.lambda_theory_cap,
        fpca,
    })
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let arm: ExperimentArm = args.arm.parse().map_err(anyhow::Error::msg)?;
    let load = LoadOptions {
        end_of_followup: args.tau,
        intensity_path: args.intensity.clone(),
    };
    let (raw, report) = io::load_csv(&args.outcome, &args.covariate, &load)?;
    let data = apply_transform(
        &raw,
        parse_outcome_transform(&args.outcome_transform)?,
        parse_covariate_transform(&args.covariate_transform)?,
    )?;
    if data.n() == 0 {
        bail!("dataset is empty");
    }

    let knots = args
        .estimator
        .knots
        .unwrap_or_else(|| (data.n() as f64).powf(0.3).floor() as usize);
    let (weights, intensity) = fit_weights(&data, arm, &args)?;
    let fitted = fit_pipeline(&data, weights, intensity, knots, &args.estimator)?;

    let mut artifacts = Artifacts::new(&args.output.out_dir)?;
    if let Some(model) = &fitted.intensity {
        artifacts.write_json("intensity.json", model)?;
    }
    artifacts.write_json("mean.json", &fitted.mean)?;
    artifacts.write_json("covariance.json", &fitted.cov)?;
    artifacts.write_json("fpca.json", &fitted.fpca)?;

    let grid = simulate::uniform_grid(data.tau(), args.grid_points);
    let mu = fitted.mean.evaluate_grid(&grid)?;
    artifacts.write_csv(
        "mean_grid.csv",
        &["t", "mu_hat"],
        grid.iter().zip(&mu).map(|(&t, &m)| vec![fmt(t), fmt(m)]),
    )?;

    let sgrid = simulate::uniform_grid(data.tau(), args.surface_grid_points);
    let surface = fitted.cov.evaluate_grid(&sgrid)?;
    let mut surface_rows = Vec::with_capacity(sgrid.len() * sgrid.len());
    for (i, &t) in sgrid.iter().enumerate() {
        for (j, &s) in sgrid.iter().enumerate() {
            surface_rows.push(vec![fmt(t), fmt(s), fmt(surface[(i, j)])]);
        }
    }
    artifacts.write_csv("cov_grid.csv", &["t", "s", "c_hat"], surface_rows)?;

    let mut phi_rows = Vec::new();
    for j in 0..fitted.fpca.num_retained() {
        let vals = fitted.fpca.eval_component_grid(j, &grid)?;
        for (&t, &v) in grid.iter().zip(&vals) {
            phi_rows.push(vec![(j + 1).to_string(), fmt(t), fmt(v)]);
        }
    }
    artifacts.write_csv("eigenfunctions.csv", &["component", "t", "phi_hat"], phi_rows)?;

    #[derive(Serialize)]
    struct EigenSummary<'a> {
        eigenvalues: &'a [f64],
        retained: usize,
        cumulative_shares: Vec<f64>,
        lambda_mu: f64,
        lambda_mu_theory_cap: f64,
        lambda_c: f64,
        lambda_c_theory_cap: f64,
        beta_hat: Option<&'a [f64]>,
        beta_se: Option<&'a [f64]>,
    }
    artifacts.write_json(
        "eigenvalues.json",
        &EigenSummary {
            eigenvalues: &fitted.fpca.eigenvalues,
            retained: fitted.fpca.num_retained(),
            cumulative_shares: fitted.fpca.variance_shares(),
            lambda_mu: fitted.mean.lambda(),
            lambda_mu_theory_cap: fitted.mean_theory_cap,
            lambda_c: fitted.cov.lambda(),
            lambda_c_theory_cap: fitted.cov_theory_cap,
            beta_hat: fitted.intensity.as_ref().map(|m| m.beta.as_slice()),
            beta_se: fitted
                .intensity
                .as_ref()
                .and_then(|m| m.beta_se.as_deref()),
        },
    )?;

    println!(
        "fitted arm {} on {} subjects ({} outcome rows, {} covariate rows)",
        arm,
        data.n(),
        report.outcome_rows,
        report.covariate_rows
    );
    if let Some(model) = &fitted.intensity {
        println!("beta_hat = {:?}", model.beta);
    }
    artifacts.finish("fit", serde_json::to_value(&args)?)
}

// ---------------------------------------------------------------------------
// experiment
// ---------------------------------------------------------------------------

fn parse_arms(tags: &[String]) -> Result<Vec<ExperimentArm>> {
    let mut arms = Vec::new();
    for t in tags {
        let arm: ExperimentArm = t.parse().map_err(anyhow::Error::msg)?;
        if !arms.contains(&arm) {
            arms.push(arm);
        }
    }
    if arms.is_empty() {
        bail!("no arms requested");
    }
    Ok(arms)
}

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .context("building worker pool")?;
    Ok(pool.install(f))
}

fn cmd_experiment(args: ExperimentArgs) -> Result<()> {
    let config = args.design.config();
    let settings = args.estimator.settings();
    let arms = parse_arms(&args.arms)?;
    let options = RunOptions {
        continue_on_failure: args.keep_going,
    };
    let output = in_pool(args.jobs, || {
        run_experiment(&config, &settings, &arms, args.reps, &options)
    })??;

    let mut artifacts = Artifacts::new(&args.output.out_dir)?;
    artifacts.write_csv(
        "summary.csv",
        &[
            "n",
            "arm",
            "replicates",
            "failures",
            "mise_mu_mean",
            "mise_mu_sd",
            "mise_cov_mean",
            "mise_cov_sd",
            "mise_phi1_mean",
            "mise_phi1_sd",
        ],
        output.summaries.iter().map(|s| {
            vec![
                config.n.to_string(),
                s.arm.clone(),
                s.replicates_used.to_string(),
                s.failures.to_string(),
                fmt(s.mise_mu_mean),
                fmt_opt(s.mise_mu_sd),
                fmt(s.mise_cov_mean),
                fmt_opt(s.mise_cov_sd),
                fmt(s.mise_phi1_mean),
                fmt_opt(s.mise_phi1_sd),
            ]
        }),
    )?;

    // One JSON record per replicate × arm.
    {
        use std::io::Write;
        let path = artifacts.path("replicates.jsonl");
        let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
        for record in &output.records {
            serde_json::to_writer(&mut file, record)?;
            file.write_all(b"\n")?;
        }
        file.flush()?;
    }
    artifacts.record("replicates.jsonl")?;

    // Replicate-averaged curves next to the truth, one column per arm.
    let mut mean_header: Vec<String> = vec!["t".into(), "truth".into()];
    let mut phi_header: Vec<String> = vec!["t".into(), "truth".into()];
    for c in &output.curves {
        mean_header.push(format!("mu_hat_{}", c.arm));
        phi_header.push(format!("phi1_hat_{}", c.arm));
    }
    let mean_rows: Vec<Vec<String>> = output
        .grid
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut row = vec![fmt(t), fmt(config.mu_true(t))];
            row.extend(output.curves.iter().map(|c| fmt(c.mu_mean[i])));
            row
        })
        .collect();
    let phi_rows: Vec<Vec<String>> = output
        .grid
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut row = vec![fmt(t), fmt(config.phi_true(1, t))];
            row.extend(output.curves.iter().map(|c| fmt(c.phi1_mean[i])));
            row
        })
        .collect();
    let mean_header_refs: Vec<&str> = mean_header.iter().map(String::as_str).collect();
    let phi_header_refs: Vec<&str> = phi_header.iter().map(String::as_str).collect();
    artifacts.write_csv("mean_curves.csv", &mean_header_refs, mean_rows)?;
    artifacts.write_csv("phi1_curves.csv", &phi_header_refs, phi_rows)?;

    for s in &output.summaries {
        println!(
            "n={} {:>2}: MISE(mu)={:.3} ({}), MISE(C)={:.3}, MISE(phi1)={:.4} over {} replicates",
            config.n,
            s.arm,
            s.mise_mu_mean,
            s.mise_mu_sd.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
            s.mise_cov_mean,
            s.mise_phi1_mean,
            s.replicates_used
        );
    }
    artifacts.finish("experiment", serde_json::to_value(&args)?)
}

// ---------------------------------------------------------------------------
// rates
// ---------------------------------------------------------------------------

fn cmd_rates(args: RatesArgs) -> Result<()> {
    if args.ns.is_empty() {
        bail!("--ns must list at least one sample size");
    }
    let arm: ExperimentArm = args.arm.parse().map_err(anyhow::Error::msg)?;
    let settings = args.estimator.settings();

    let mut rows = Vec::new();
    for &n in &args.ns {
        let config = {
            let mut c = SimConfig::new(n, args.seed);
            c.n = n;
            c
        };
        let out = in_pool(args.jobs, || {
            run_experiment(&config, &settings, &[arm], args.reps, &RunOptions::default())
        })??;
        let s = &out.summaries[0];
        println!(
            "n={n}: median sup|mu_hat-mu|={:.4}, median sup|C_hat-C|={:.4}, median |kappa1_hat-kappa1|={:.4}",
            s.median_sup_mu, s.median_sup_cov, s.median_kappa1_abs_err
        );
        rows.push(vec![
            n.to_string(),
            arm.tag().to_string(),
            s.replicates_used.to_string(),
            fmt(s.median_sup_mu),
            fmt(s.median_sup_cov),
            fmt(s.median_kappa1_abs_err),
            fmt(s.mise_mu_mean),
            fmt(s.mise_cov_mean),
            fmt(s.mise_phi1_mean),
        ]);
    }

    let mut artifacts = Artifacts::new(&args.output.out_dir)?;
    artifacts.write_csv(
        "rates.csv",
        &[
            "n",
            "arm",
            "replicates",
            "median_sup_mu",
            "median_sup_cov",
            "median_kappa1_abs_err",
            "mise_mu_mean",
            "mise_cov_mean",
            "mise_phi1_mean",
        ],
        rows,
    )?;
    artifacts.finish("rates", serde_json::to_value(&args)?)
}
