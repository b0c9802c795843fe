//! Functional principal component analysis for longitudinal data whose
//! observation times depend on the outcome history.
//!
//! Visit times are modeled as a counting process with a proportional
//! intensity `λ₀(t)·exp[g{Z(t)}ᵀβ]`; weighting each observation by the
//! inverse of its fitted intensity removes the sampling tilt, after which
//! the mean function and covariance surface are estimated by weighted
//! penalized B-splines (GCV-tuned) and the principal components by an
//! eigen-decomposition of the fitted surface.
//!
//! Module map:
//! - [`bspline`]: bases, Gram matrices, roughness penalties, quadrature.
//! - [`io`]: longitudinal panels, CSV ingestion, transforms.
//! - [`intensity`]: intensity likelihood, fitting, inverse-intensity weights.
//! - [`mean`]: weighted penalized mean smoother with GCV.
//! - [`covariance`]: symmetric tensor-product surface smoother with GCV.
//! - [`fpca`]: eigenvalues, eigenfunctions, Mercer reconstruction.
//! - [`simulate`]: the generative benchmark design and experiment harness.

pub mod bspline;
pub mod covariance;
pub mod fpca;
pub mod intensity;
pub mod io;
pub mod mean;
pub mod quad;
pub mod simulate;

pub use bspline::{KnotVector, SplineBasis};
pub use covariance::{fit_cov, gcv_select_cov, raw_cov_points, CovFit, RawCovPoint};
pub use fpca::{eigen_decompose, first_pc_mise, FpcaResult};
pub use intensity::{
    fit_intensity, neg_log_likelihood, BaselineFamily, CovariateMap, IntensityModel,
};
pub use io::{load_csv, LongitudinalDataset, Subject};
pub use mean::{fit_mean, gcv_select_mean, MeanFit, MeanObservation};
pub use quad::gauss_legendre_integrate;
pub use simulate::{gen_dataset, run_experiment, ExperimentArm, SimConfig};
