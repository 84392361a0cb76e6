//! MAP fitting with multi-start, curvature standard errors, optional
//! posterior sampling, and fitted bands.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mcmc::{sample_posterior, McmcOptions, McmcOutput, ProposalBlock};
use super::optimize::{hessian_from_gradient, invert_curvature, minimize, OptimOptions, OptimResult};
use super::posterior::{LogDensity, Posterior, PriorSpec};
use super::predict::{pearson_residuals, prediction_bands, quantile_sorted, Band, PredictSource};
use crate::error::{Error, Result};
use crate::model::{Component, Model, ModelSpec, ParamKind, ParamVector};
use crate::par::{map_indexed, Execution};
use crate::rng::child_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    #[serde(default)]
    pub optim: OptimOptions,
    /// Number of starts; the first is unjittered.
    #[serde(default = "five")]
    pub starts: usize,
    /// Standard deviation of the Gaussian jitter applied to later starts.
    #[serde(default = "half")]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
    /// Laplace draws used for bands when no posterior sample is taken.
    #[serde(default = "five_hundred")]
    pub band_draws: usize,
}

fn five() -> usize {
    5
}
fn half() -> f64 {
    0.5
}
fn five_hundred() -> usize {
    500
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            optim: OptimOptions::default(),
            starts: 5,
            jitter: 0.5,
            seed: 0,
            band_draws: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartOutcome {
    pub start: usize,
    pub log_posterior: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
    pub rhat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    /// MAP value on the unconstrained scale.
    pub estimate: f64,
    pub std_error: Option<f64>,
    /// The likelihood keeps improving as this parameter moves outward.
    pub boundary: bool,
    /// The curvature is singular along this parameter.
    pub singular: bool,
    pub posterior: Option<PosteriorSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcReport {
    pub chains: usize,
    pub draws_per_chain: usize,
    pub burnin: usize,
    pub seed: u64,
    pub blocks: Vec<String>,
    pub acceptance: Vec<f64>,
    pub max_rhat_fixed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub priors: PriorSpec,
    pub options: FitOptions,
    pub areas: Vec<String>,
    pub map_estimate: ParamVector,
    /// MAP on the natural scale (`theta`, `phi`, `alpha`, `sigma_*`).
    pub natural: BTreeMap<String, f64>,
    pub params: Vec<ParamSummary>,
    pub log_posterior: f64,
    pub log_likelihood: f64,
    /// `2 d - 2 loglik` at the MAP.
    pub aic: f64,
    pub converged: bool,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub trace: Vec<f64>,
    pub starts: Vec<StartOutcome>,
    /// Laplace covariance on the unconstrained scale.
    pub covariance: Vec<Vec<f64>>,
    pub mcmc: Option<McmcReport>,
    /// Posterior draws used for bands (thinned); empty for MAP-only fits.
    pub draws: Vec<Vec<f64>>,
    /// Plug-in means at the MAP, `[i][t - 2]` for `t = 2..=T`.
    pub fitted_means: Vec<Vec<f64>>,
    pub bands: Vec<Band>,
}

impl FitResult {
    pub fn phi(&self) -> f64 {
        self.natural["phi"]
    }

    pub fn pearson_residuals(&self, model: &Model) -> Vec<Vec<Option<f64>>> {
        pearson_residuals(model, &self.fitted_means, self.phi())
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).and_then(|p| p.std_error)
    }

    pub fn estimate(&self, name: &str) -> Option<f64> {
        self.map_estimate.get(name)
    }

    /// Draws used for prediction: posterior draws when present, otherwise
    /// the same Laplace draws that produced the fitted bands.
    pub fn prediction_draws(&self) -> Vec<Vec<f64>> {
        if self.draws.is_empty() {
            let x = &self.map_estimate.values;
            if self.options.band_draws > 0 {
                laplace_draws(x, &self.covariance, self.options.band_draws, self.options.seed)
            } else {
                vec![x.clone()]
            }
        } else {
            self.draws.clone()
        }
    }
}

/// Lexicographic order with total ordering on floats.
fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Best of several optimiser runs: highest objective, ties (within
/// `1e-9 (1 + |f|)`) broken by the lexicographically smallest vector.
fn pick_best(runs: &[OptimResult]) -> usize {
    let mut best = 0;
    for k in 1..runs.len() {
        let (a, b) = (&runs[k], &runs[best]);
        // Objective is minimised (negative log-posterior).
        if !b.f.is_finite() && a.f.is_finite() {
            best = k;
            continue;
        }
        let tie = (a.f - b.f).abs() <= 1e-9 * (1.0 + b.f.abs());
        if (tie && lex_cmp(&a.x, &b.x) == Ordering::Less) || (!tie && a.f < b.f) {
            best = k;
        }
    }
    best
}

/// Parameters along which the log-likelihood does not drop when moving
/// five units further in the direction it already favours.
fn boundary_flags(post: &Posterior<'_>, x: &[f64]) -> Vec<bool> {
    let model = post.model;
    let mut grad = vec![0.0; x.len()];
    let ll = super::posterior::loglik_with_grad(model, x, Some(&mut grad));
    let mut z = x.to_vec();
    (0..x.len())
        .map(|k| {
            if matches!(model.layout().kinds[k], ParamKind::LogSigma(_)) {
                return false;
            }
            let dirs: &[f64] = if grad[k] > 0.0 {
                &[1.0]
            } else if grad[k] < 0.0 {
                &[-1.0]
            } else {
                &[1.0, -1.0]
            };
            let flagged = dirs.iter().any(|&s| {
                z[k] = x[k] + 5.0 * s;
                let moved = post.loglik(&z);
                z[k] = x[k];
                moved >= ll - 1e-6 * (1.0 + ll.abs())
            });
            flagged
        })
        .collect()
}

fn laplace_draws(x: &[f64], cov: &[Vec<f64>], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let d = x.len();
    let m = nalgebra::DMatrix::from_fn(d, d, |i, j| cov[i][j]);
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut rng = child_rng(seed, u64::MAX);
    (0..n)
        .map(|_| {
            let mut out = x.to_vec();
            for (e, &lam) in eig.eigenvalues.iter().enumerate() {
                if lam > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    let v = eig.eigenvectors.column(e);
                    for i in 0..d {
                        out[i] += lam.sqrt() * z * v[i];
                    }
                }
            }
            out
        })
        .collect()
}

/// Maximises the log-posterior from `start` (or the model default) plus
/// jittered restarts, then attaches standard errors and Laplace bands.
pub fn fit_map(
    model: &Model,
    priors: PriorSpec,
    start: Option<&[f64]>,
    opts: &FitOptions,
    exec: Execution,
) -> Result<FitResult> {
    if model.panel().n_times() < 3 {
        return Err(Error::Shape("fitting needs at least three time points".into()));
    }
    if opts.starts == 0 {
        return Err(Error::InvalidParameter("at least one start is required".into()));
    }
    let post = Posterior::new(model, priors)?;
    let x0 = match start {
        Some(s) if s.len() == model.dim() => s.to_vec(),
        Some(s) => {
            return Err(Error::Shape(format!(
                "start has {} entries, model has {}",
                s.len(),
                model.dim()
            )))
        }
        None => model.default_start(),
    };
    let objective = |x: &[f64]| {
        let (f, g) = post.value_and_grad(x);
        if f.is_finite() {
            (-f, g.into_iter().map(|v| -v).collect())
        } else {
            (f64::INFINITY, vec![0.0; x.len()])
        }
    };
    let runs = map_indexed(opts.starts, exec, |s| {
        let mut x = x0.clone();
        if s > 0 {
            let mut rng = child_rng(opts.seed, s as u64);
            for v in &mut x {
                *v += opts.jitter * rng.sample::<f64, _>(StandardNormal);
            }
        }
        minimize(objective, &x, &opts.optim)
    });
    let best = pick_best(&runs);
    let run = &runs[best];
    if !run.f.is_finite() {
        return Err(Error::Domain("log-posterior is -inf at every start".into()));
    }
    let x = run.x.clone();
    let hessian = hessian_from_gradient(|z| objective(z).1, &x);
    let curvature = invert_curvature(&hessian);
    let se = curvature.std_errors();
    let boundary = boundary_flags(&post, &x);
    let log_likelihood = post.loglik(&x);
    let params = model
        .layout()
        .names
        .iter()
        .enumerate()
        .map(|(k, name)| ParamSummary {
            name: name.clone(),
            estimate: x[k],
            std_error: se[k],
            boundary: boundary[k],
            singular: curvature.singular[k],
            posterior: None,
        })
        .collect();
    let mut fit = FitResult {
        spec: model.spec().clone(),
        priors,
        options: *opts,
        areas: model.panel().areas().to_vec(),
        map_estimate: model.vector(x.clone()),
        natural: model.natural_named(&x),
        params,
        log_posterior: -run.f,
        log_likelihood,
        aic: 2.0 * model.dim() as f64 - 2.0 * log_likelihood,
        converged: run.converged,
        gradient_norm: run.grad_norm(),
        iterations: run.iterations,
        trace: run.trace.iter().map(|f| -f).collect(),
        starts: runs
            .iter()
            .enumerate()
            .map(|(s, r)| StartOutcome {
                start: s,
                log_posterior: -r.f,
                converged: r.converged,
                iterations: r.iterations,
            })
            .collect(),
        covariance: curvature.covariance,
        mcmc: None,
        draws: Vec::new(),
        fitted_means: model.fitted_means(&x)?,
        bands: Vec::new(),
    };
    let draws = fit.prediction_draws();
    fit.bands = prediction_bands(model, PredictSource::Draws(&draws), exec)?;
    Ok(fit)
}

/// Proposal blocks from the layout, scaled by the Laplace covariance, plus
/// a joint block over every parameter. The joint move follows correlations
/// between blocks, such as an intercept against the mean of its random effects.
pub fn default_blocks(model: &Model, covariance: &[Vec<f64>]) -> Vec<ProposalBlock> {
    let layout = model.layout();
    let mut blocks: Vec<ProposalBlock> = layout
        .blocks
        .iter()
        .map(|b| ProposalBlock::from_covariance(b.name.clone(), b.range.clone().collect(), covariance))
        .collect();
    if layout.blocks.len() > 1 {
        blocks.push(ProposalBlock::from_covariance("joint", (0..layout.len()).collect(), covariance));
    }
    blocks
}

/// Runs the sampler from the MAP and replaces the Laplace bands with
/// posterior bands. At most `keep` pooled draws are stored in the result.
pub fn attach_posterior(
    model: &Model,
    fit: &mut FitResult,
    opts: &McmcOptions,
    keep: usize,
    exec: Execution,
) -> Result<McmcOutput> {
    let post = Posterior::new(model, fit.priors)?;
    let target = NonCentred::new(&post, model);
    let x0 = &fit.map_estimate.values;
    let blocks = default_blocks(model, &target.covariance(x0, &fit.covariance));
    let mut out = sample_posterior(&target, &target.to_z(x0), &blocks, opts, exec)?;
    for chain in &mut out.chains {
        for d in &mut chain.draws {
            *d = target.to_x(d);
        }
    }
    let pooled = out.pooled();
    let fixed = model.layout().fixed_effects();
    let mut max_rhat: Option<f64> = None;
    for (k, summary) in fit.params.iter_mut().enumerate() {
        let mut v: Vec<f64> = pooled.iter().map(|d| d[k]).collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
        v.sort_by(f64::total_cmp);
        let rhat = out.rhat(k);
        if fixed.contains(&k) {
            if let Some(r) = rhat {
                max_rhat = Some(max_rhat.map_or(r, |m: f64| m.max(r)));
            }
        }
        summary.posterior = Some(PosteriorSummary {
            mean,
            sd,
            q025: quantile_sorted(&v, 0.025),
            q50: quantile_sorted(&v, 0.5),
            q975: quantile_sorted(&v, 0.975),
            rhat,
        });
    }
    let stored: Vec<Vec<f64>> = if pooled.len() <= keep {
        pooled
    } else {
        (0..keep).map(|j| pooled[j * pooled.len() / keep].clone()).collect()
    };
    fit.bands = prediction_bands(model, PredictSource::Draws(&stored), exec)?;
    fit.draws = stored;
    fit.mcmc = Some(McmcReport {
        chains: opts.chains,
        draws_per_chain: opts.draws,
        burnin: opts.burnin,
        seed: opts.seed,
        blocks: out.block_names.clone(),
        acceptance: out.acceptance(),
        max_rhat_fixed: max_rhat,
    });
    Ok(out)
}

/// The posterior in sampling coordinates: random effects as `z = b / sigma`
/// and each component's intercept as `lambda + mean(b)`. The sampler then
/// moves `z`, `ln sigma` and the overall level nearly independently instead
/// of along the funnel and the intercept ridge. The map from sampling
/// coordinates has Jacobian `sigma^n` per component.
struct NonCentred<'a> {
    post: &'a Posterior<'a>,
    groups: Vec<ReGroup>,
}

struct ReGroup {
    log_sigma: usize,
    intercept: usize,
    effects: std::ops::Range<usize>,
}

impl<'a> NonCentred<'a> {
    fn new(post: &'a Posterior<'a>, model: &Model) -> Self {
        let layout = model.layout();
        let groups = model
            .random_effect_blocks()
            .into_iter()
            .filter_map(|(c, ls, range)| {
                let name = match c {
                    Component::Ar => "lambda_ar",
                    Component::Ne => "lambda_ne",
                    Component::En => "beta0_en",
                };
                layout.index_of(name).map(|intercept| ReGroup {
                    log_sigma: ls,
                    intercept,
                    effects: range,
                })
            })
            .collect();
        Self { post, groups }
    }

    fn to_x(&self, y: &[f64]) -> Vec<f64> {
        let mut x = y.to_vec();
        for g in &self.groups {
            let sigma = y[g.log_sigma].exp();
            let zbar = y[g.effects.clone()].iter().sum::<f64>() / g.effects.len() as f64;
            x[g.intercept] = y[g.intercept] - sigma * zbar;
            for k in g.effects.clone() {
                x[k] = sigma * y[k];
            }
        }
        x
    }

    fn to_z(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for g in &self.groups {
            let sigma = x[g.log_sigma].exp();
            let bbar = x[g.effects.clone()].iter().sum::<f64>() / g.effects.len() as f64;
            y[g.intercept] = x[g.intercept] + bbar;
            for k in g.effects.clone() {
                y[k] = x[k] / sigma;
            }
        }
        y
    }

    /// `A cov A'` with `A = dy/dx` at `x`.
    fn covariance(&self, x: &[f64], cov: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = x.len();
        let mut a = nalgebra::DMatrix::<f64>::identity(d, d);
        for g in &self.groups {
            let sigma = x[g.log_sigma].exp();
            let n = g.effects.len() as f64;
            for k in g.effects.clone() {
                a[(k, k)] = 1.0 / sigma;
                a[(k, g.log_sigma)] = -x[k] / sigma;
                a[(g.intercept, k)] = 1.0 / n;
            }
        }
        let c = nalgebra::DMatrix::from_fn(d, d, |i, j| cov[i][j]);
        let t = &a * c * a.transpose();
        (0..d).map(|i| (0..d).map(|j| t[(i, j)]).collect()).collect()
    }
}

impl LogDensity for NonCentred<'_> {
    fn dim(&self) -> usize {
        self.post.dim()
    }

    fn log_density(&self, y: &[f64]) -> f64 {
        let jac: f64 = self
            .groups
            .iter()
            .map(|g| g.effects.len() as f64 * y[g.log_sigma])
            .sum();
        self.post.log_density(&self.to_x(y)) + jac
    }
}

/// Log-posterior of `x` for the fit's priors; handy for reports.
pub fn log_posterior(model: &Model, priors: PriorSpec, x: &[f64]) -> Result<f64> {
    Ok(Posterior::new(model, priors)?.log_density(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Populations, SpatialStructure, SurveillancePanel};
    use crate::model::{Component, EeSpec};

    fn spatial(n: usize) -> SpatialStructure {
        let d = (0..n).map(|i| (0..n).map(|j| i.abs_diff(j) as f64).collect()).collect();
        let a = (0..n).map(|i| (0..n).map(|j| i.abs_diff(j) == 1).collect()).collect();
        SpatialStructure::new((0..n).map(|i| format!("a{i}")).collect(), Some(d), Some(a)).unwrap()
    }

    fn endemic_only() -> EeSpec {
        EeSpec {
            components: [Component::En].into_iter().collect(),
            endemic_trend: false,
            seasonal: false,
            ..Default::default()
        }
    }

    #[test]
    fn constant_mean_closed_form() {
        let y = vec![3u64, 7, 0, 12, 5, 9, 4, 1, 8, 6];
        let n_pop = 2500u64;
        let panel = SurveillancePanel::new(
            vec!["a0".into()],
            52,
            vec![y.clone()],
            Populations::Constant(vec![n_pop]),
        )
        .unwrap();
        let model = Model::new(ModelSpec::Ee(endemic_only()), panel, &spatial(1)).unwrap();
        let fit = fit_map(&model, PriorSpec::flat(), None, &FitOptions::default(), Execution::Sequential).unwrap();
        assert!(fit.converged);
        let want = y[1..].iter().sum::<u64>() as f64 / ((y.len() - 1) as f64 * n_pop as f64);
        let got = fit.estimate("beta0_en").unwrap().exp();
        assert!((got / want - 1.0).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn all_zero_panel_is_a_boundary_solution() {
        let panel = SurveillancePanel::new(
            vec!["a0".into(), "a1".into()],
            52,
            vec![vec![0; 8], vec![0; 8]],
            Populations::Constant(vec![1000, 1000]),
        )
        .unwrap();
        let model = Model::new(ModelSpec::Ee(endemic_only()), panel, &spatial(2)).unwrap();
        let fit = fit_map(&model, PriorSpec::default(), None, &FitOptions::default(), Execution::Sequential).unwrap();
        let p = fit.params.iter().find(|p| p.name == "beta0_en").unwrap();
        assert!(p.boundary);
        assert!(fit.fitted_means.iter().flatten().all(|&m| m < 0.1));
        assert!(fit.bands.iter().all(|b| b.q025 <= b.q50 && b.q50 <= b.q975));
    }

    #[test]
    fn ties_resolve_to_smallest_vector() {
        let mk = |x: Vec<f64>, f: f64| OptimResult {
            x,
            f,
            grad: vec![],
            iterations: 0,
            converged: true,
            trace: vec![],
        };
        let runs = vec![mk(vec![1.0, 0.0], -5.0), mk(vec![0.5, 3.0], -5.0 + 1e-12), mk(vec![2.0, 0.0], -4.0)];
        assert_eq!(pick_best(&runs), 1);
        let runs = vec![mk(vec![1.0], -5.0), mk(vec![0.0], -6.0)];
        assert_eq!(pick_best(&runs), 1);
    }
}
