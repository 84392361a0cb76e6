//! Log-likelihood, priors and log-posterior on the unconstrained scale.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::distributions::{negbin_logpmf_grad, negbin_logpmf_raw};
use crate::error::{Error, Result};
use crate::model::{Model, ParamKind};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Prior hyperparameters. An infinite standard deviation means a flat prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    #[serde(default = "ten")]
    pub normal_sd_fixed: f64,
    #[serde(default = "half")]
    pub re_precision_shape: f64,
    #[serde(default = "tenth")]
    pub re_precision_rate: f64,
    /// Standard deviation of the zero-mean normal prior on `log phi`.
    #[serde(default = "ten")]
    pub log_phi_sd: f64,
}

fn ten() -> f64 {
    10.0
}
fn half() -> f64 {
    0.5
}
fn tenth() -> f64 {
    0.1
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            normal_sd_fixed: 10.0,
            re_precision_shape: 0.5,
            re_precision_rate: 0.1,
            log_phi_sd: 10.0,
        }
    }
}

impl PriorSpec {
    /// Flat priors on fixed effects and `log phi`; the gamma prior on
    /// random-effect precisions is kept.
    pub fn flat() -> Self {
        Self {
            normal_sd_fixed: f64::INFINITY,
            log_phi_sd: f64::INFINITY,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("normal_sd_fixed", self.normal_sd_fixed),
            ("re_precision_shape", self.re_precision_shape),
            ("re_precision_rate", self.re_precision_rate),
            ("log_phi_sd", self.log_phi_sd),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidParameter(format!("prior {name} must be > 0, got {v}")));
            }
        }
        if !self.re_precision_shape.is_finite() || !self.re_precision_rate.is_finite() {
            return Err(Error::InvalidParameter("gamma prior hyperparameters must be finite".into()));
        }
        Ok(())
    }
}

/// Gamma log-density in the shape/rate parameterisation.
pub fn gamma_log_density(x: f64, shape: f64, rate: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

fn normal_log_density(x: f64, sd: f64) -> (f64, f64) {
    if sd.is_infinite() {
        (0.0, 0.0)
    } else {
        let v = sd * sd;
        (-0.5 * (LN_2PI + v.ln()) - 0.5 * x * x / v, -x / v)
    }
}

/// `ln(s (1 - s))` for `s = sigmoid(u)`, and its derivative `1 - 2s`.
fn logit_jacobian(u: f64) -> (f64, f64) {
    let softplus = |z: f64| if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    let s = 1.0 / (1.0 + (-u).exp());
    (-softplus(u) - softplus(-u), 1.0 - 2.0 * s)
}

/// Anything that exposes a log-density on `R^d`.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Log-density, `-inf` outside the support.
    fn log_density(&self, x: &[f64]) -> f64;

    /// Log-density and gradient. Defaults to central differences.
    fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let f = self.log_density(x);
        (f, numeric_gradient(|z| self.log_density(z), x))
    }
}

/// Central-difference gradient with Richardson extrapolation.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut z = x.to_vec();
    (0..x.len())
        .map(|k| {
            let h = 1e-3 * x[k].abs().max(1.0);
            let mut diff = |h: f64| {
                z[k] = x[k] + h;
                let up = f(&z);
                z[k] = x[k] - h;
                let down = f(&z);
                z[k] = x[k];
                (up - down) / (2.0 * h)
            };
            let d1 = diff(h);
            let d2 = diff(h / 2.0);
            (4.0 * d2 - d1) / 3.0
        })
        .collect()
}

/// A model paired with priors: the target of fitting and sampling.
#[derive(Debug, Clone)]
pub struct Posterior<'a> {
    pub model: &'a Model,
    pub priors: PriorSpec,
}

impl<'a> Posterior<'a> {
    pub fn new(model: &'a Model, priors: PriorSpec) -> Result<Self> {
        priors.validate()?;
        Ok(Self { model, priors })
    }

    pub fn loglik(&self, x: &[f64]) -> f64 {
        loglik(self.model, x)
    }

    pub fn log_prior(&self, x: &[f64]) -> f64 {
        self.log_prior_with_grad(x, None)
    }

    fn log_prior_with_grad(&self, x: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let p = &self.priors;
        let layout = self.model.layout();
        let mut total = 0.0;
        let mut add = |k: usize, v: f64, d: f64, grad: &mut Option<&mut [f64]>| {
            total += v;
            if let Some(g) = grad.as_deref_mut() {
                g[k] += d;
            }
        };
        for (k, kind) in layout.kinds.iter().enumerate() {
            match *kind {
                ParamKind::Fixed | ParamKind::Exponent => {
                    let (v, d) = normal_log_density(x[k], p.normal_sd_fixed);
                    add(k, v, d, &mut grad);
                }
                ParamKind::LogitTheta | ParamKind::LogitAlpha => {
                    let (v, d) = logit_jacobian(x[k]);
                    add(k, v, d, &mut grad);
                }
                ParamKind::LogPhi => {
                    let (v, d) = normal_log_density(x[k], p.log_phi_sd);
                    add(k, v, d, &mut grad);
                }
                ParamKind::LogSigma(_) => {
                    // Gamma prior on tau = exp(-2 s), with |dtau/ds| = 2 tau.
                    let (a, b) = (p.re_precision_shape, p.re_precision_rate);
                    let tau = (-2.0 * x[k]).exp();
                    let v = a * b.ln() - ln_gamma(a) + std::f64::consts::LN_2 - 2.0 * a * x[k] - b * tau;
                    add(k, v, -2.0 * a + 2.0 * b * tau, &mut grad);
                }
                ParamKind::RandomEffect(..) => {}
            }
        }
        for (_, ls, range) in self.model.random_effect_blocks() {
            let s = x[ls];
            let prec = (-2.0 * s).exp();
            let mut ss = 0.0;
            for k in range.clone() {
                ss += x[k] * x[k];
                add(k, 0.0, -x[k] * prec, &mut grad);
            }
            let n = range.len() as f64;
            add(ls, -0.5 * n * LN_2PI - n * s - 0.5 * ss * prec, -n + ss * prec, &mut grad);
        }
        total
    }

    /// Log-posterior and its analytic gradient; `(-inf, zeros)` off support.
    pub fn value_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; x.len()];
        let ll = loglik_with_grad(self.model, x, Some(&mut grad));
        if ll == f64::NEG_INFINITY {
            return (f64::NEG_INFINITY, vec![0.0; x.len()]);
        }
        let lp = self.log_prior_with_grad(x, Some(&mut grad));
        let f = ll + lp;
        if !f.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return (f64::NEG_INFINITY, vec![0.0; x.len()]);
        }
        (f, grad)
    }
}

impl LogDensity for Posterior<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let ll = self.loglik(x);
        if ll == f64::NEG_INFINITY {
            return ll;
        }
        let f = ll + self.log_prior(x);
        if f.is_finite() {
            f
        } else {
            f64::NEG_INFINITY
        }
    }

    fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        self.value_and_grad(x)
    }
}

/// Sum of NegBin log-pmfs over all cells `t = 2..=T`; `-inf` off support.
pub fn loglik(model: &Model, x: &[f64]) -> f64 {
    loglik_with_grad(model, x, None)
}

/// Per-cell log-pmf terms, `[i][t - 2]`.
pub fn loglik_terms(model: &Model, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let means = model.fitted_means(x)?;
    let phi = model.phi(x);
    let panel = model.panel();
    Ok(means
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(k, &mu)| negbin_logpmf_raw(panel.count(i, k + 2), mu, phi))
                .collect()
        })
        .collect())
}

pub(crate) fn loglik_with_grad(model: &Model, x: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
    if x.len() != model.dim() || x.iter().any(|v| !v.is_finite()) {
        return f64::NEG_INFINITY;
    }
    let phi = model.phi(x);
    if !(phi > 0.0) || !phi.is_finite() {
        return f64::NEG_INFINITY;
    }
    let Ok(decay) = model.decay(x) else {
        return f64::NEG_INFINITY;
    };
    let panel = model.panel();
    let mut total = 0.0;
    let mut d_phi = 0.0;
    for i in 0..panel.n_areas() {
        for t in 2..=panel.n_times() {
            let terms = model.cell_terms(x, &decay, i, t);
            let mu = terms.mu;
            if !(mu >= 0.0) || !mu.is_finite() {
                return f64::NEG_INFINITY;
            }
            let y = panel.count(i, t);
            let l = negbin_logpmf_raw(y, mu, phi);
            if l == f64::NEG_INFINITY {
                return l;
            }
            total += l;
            if let Some(g) = grad.as_deref_mut() {
                let (dmu, dsize) = negbin_logpmf_grad(y, mu, phi);
                model.scatter_mean_grad(x, &decay, &terms, i, t, dmu, g);
                d_phi += dsize * phi;
            }
        }
    }
    if let Some(g) = grad {
        g[model.phi_index()] += d_phi;
    }
    if total.is_finite() {
        total
    } else {
        f64::NEG_INFINITY
    }
}
