//! Likelihood assembly, MAP fitting, posterior sampling and prediction.

mod fit;
mod mcmc;
mod optimize;
mod posterior;
mod predict;

pub use fit::{
    attach_posterior, default_blocks, fit_map, log_posterior, FitOptions, FitResult, McmcReport, ParamSummary,
    PosteriorSummary, StartOutcome,
};
pub use mcmc::{sample_posterior, split_rhat, ChainOutput, McmcOptions, McmcOutput, ProposalBlock};
pub use optimize::{hessian_from_gradient, invert_curvature, minimize, Curvature, OptimOptions, OptimResult};
pub use posterior::{gamma_log_density, loglik, loglik_terms, numeric_gradient, LogDensity, Posterior, PriorSpec};
pub use predict::{
    negbin_mixture_quantiles, pearson_residuals, predict_one_step, prediction_bands, quantile_sorted, Band,
    PredictSource,
};
