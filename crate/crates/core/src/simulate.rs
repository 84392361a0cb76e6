//! Forward simulation of the count models and of the exact processes they
//! approximate.
//!
//! Multi-area simulations run from the first column of a model's panel.
//! Replicate `k` of a batch draws from `child_rng(seed, k)`.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::data::SurveillancePanel;
use crate::distributions::{
    binomial_logpmf, chain_binomial_infection_probability, sample_binomial, sample_negbin, sample_poisson,
    NegBinParams,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::par::{map_indexed, Execution};
use crate::rng::{child_rng, root_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    /// `counts[i][t - 1]` for `t = 1..=T`.
    pub counts: Vec<Vec<u64>>,
    /// Susceptibles `x[i][t - 1]`, for SIR-type simulations.
    pub susceptibles: Option<Vec<Vec<u64>>>,
    /// Prevalence `I_t`, for the latent-recovery simulation.
    pub prevalence: Option<Vec<u64>>,
    /// Recoveries `Z_t`, for the latent-recovery simulation.
    pub recoveries: Option<Vec<u64>>,
    pub seed: u64,
    /// First time at which the process was absorbed at zero; later entries
    /// are explicit zeros.
    pub extinct_at: Option<usize>,
    /// `beta / gamma` for the latent-recovery simulation.
    pub r0: Option<f64>,
    pub notes: Vec<String>,
}

impl SimResult {
    fn new(counts: Vec<Vec<u64>>, seed: u64) -> Self {
        Self {
            counts,
            susceptibles: None,
            prevalence: None,
            recoveries: None,
            seed,
            extinct_at: None,
            r0: None,
            notes: Vec::new(),
        }
    }

    /// Simulated counts as a panel sharing areas and populations with `template`.
    pub fn to_panel(&self, template: &SurveillancePanel) -> Result<SurveillancePanel> {
        SurveillancePanel::new(
            template.areas().to_vec(),
            template.period(),
            self.counts.clone(),
            template.populations().clone(),
        )
    }
}

/// Negative binomial size used by TSIR simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overdispersion {
    /// Size equals the lagged count; a zero lag gives a structural zero.
    #[default]
    LaggedCount,
    /// Size equals the fitted `phi`.
    Phi,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TsirSimOptions {
    #[serde(default)]
    pub overdispersion: Overdispersion,
    /// When every area is at zero, replace the lagged counts by Poisson
    /// draws with this mean before computing the next step. Off by default:
    /// a global fade-out is absorbing.
    #[serde(default)]
    pub reseed_poisson: Option<f64>,
}

fn check_horizon(model: &Model, t_len: usize) -> Result<Vec<u64>> {
    if t_len == 0 {
        return Err(Error::InvalidParameter("horizon must be >= 1".into()));
    }
    Ok((0..model.panel().n_areas()).map(|i| model.panel().count(i, 1)).collect())
}

fn validated_phi(model: &Model, x: &[f64]) -> Result<f64> {
    if x.len() != model.dim() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("parameter vector has wrong length or non-finite entries".into()));
    }
    let phi = model.phi(x);
    if !(phi > 0.0) || !phi.is_finite() {
        return Err(Error::InvalidParameter(format!("phi = {phi} is out of support")));
    }
    Ok(phi)
}

fn checked_mean(mu: f64, i: usize, t: usize) -> Result<f64> {
    if mu.is_finite() && mu >= 0.0 {
        Ok(mu)
    } else {
        Err(Error::InvalidParameter(format!("mean of area {i} at time {t} is {mu}")))
    }
}

/// EE simulation: `Y_it ~ NegBin(mu_it, phi)` for `t = 2..=T`.
pub fn simulate_ee<R: Rng + ?Sized>(model: &Model, x: &[f64], t_len: usize, rng: &mut R) -> Result<SimResult> {
    if !matches!(model.spec(), ModelSpec::Ee(_)) {
        return Err(Error::InvalidParameter("simulate_ee needs an EE model".into()));
    }
    let phi = validated_phi(model, x)?;
    let init = check_horizon(model, t_len)?;
    let n = init.len();
    let mut counts: Vec<Vec<u64>> = init.iter().map(|&y| vec![y]).collect();
    let mut lags: Vec<f64> = init.iter().map(|&y| y as f64).collect();
    for t in 2..=t_len {
        let means = model.step_means(x, t, &lags)?;
        for i in 0..n {
            let mu = checked_mean(means[i], i, t)?;
            let y = sample_negbin(rng, &NegBinParams::new(mu, phi)?);
            counts[i].push(y);
            lags[i] = y as f64;
        }
    }
    let mut out = SimResult::new(counts, 0);
    out.extinct_at = absorbed_at(&out.counts);
    Ok(out)
}

/// First `t >= 2` from which every area is zero, if any.
fn absorbed_at(counts: &[Vec<u64>]) -> Option<usize> {
    let t_len = counts.first()?.len();
    let mut first = None;
    for t in (2..=t_len).rev() {
        if counts.iter().all(|row| row[t - 1] == 0) {
            first = Some(t);
        } else {
            break;
        }
    }
    first
}

/// TSIR simulation with the configured negative binomial size.
pub fn simulate_tsir<R: Rng + ?Sized>(
    model: &Model,
    x: &[f64],
    t_len: usize,
    opts: &TsirSimOptions,
    rng: &mut R,
) -> Result<SimResult> {
    if !matches!(model.spec(), ModelSpec::Tsir(_)) {
        return Err(Error::InvalidParameter("simulate_tsir needs a TSIR model".into()));
    }
    let phi = validated_phi(model, x)?;
    if let Some(m) = opts.reseed_poisson {
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::InvalidParameter(format!("reseeding mean must be > 0, got {m}")));
        }
    }
    let init = check_horizon(model, t_len)?;
    let n = init.len();
    let mut counts: Vec<Vec<u64>> = init.iter().map(|&y| vec![y]).collect();
    let mut lags: Vec<f64> = init.iter().map(|&y| y as f64).collect();
    let mut notes = Vec::new();
    for t in 2..=t_len {
        if let Some(m) = opts.reseed_poisson {
            if lags.iter().all(|&y| y == 0.0) {
                for y in lags.iter_mut() {
                    *y = sample_poisson(rng, m) as f64;
                }
                notes.push(format!("reseeded lagged counts at time {t}"));
            }
        }
        let means = model.step_means(x, t, &lags)?;
        for i in 0..n {
            let mu = checked_mean(means[i], i, t)?;
            let size = match opts.overdispersion {
                Overdispersion::Phi => phi,
                Overdispersion::LaggedCount => lags[i],
            };
            let y = if size > 0.0 {
                sample_negbin(rng, &NegBinParams::new(mu, size)?)
            } else {
                0
            };
            counts[i].push(y);
        }
        for i in 0..n {
            lags[i] = counts[i][t - 1] as f64;
        }
    }
    let mut out = SimResult::new(counts, 0);
    out.extinct_at = absorbed_at(&out.counts);
    out.notes = notes;
    Ok(out)
}

/// Independent replicates of the model's own family; replicate `k` uses
/// `child_rng(seed, k)`.
pub fn simulate_replicates(
    model: &Model,
    x: &[f64],
    t_len: usize,
    reps: usize,
    seed: u64,
    tsir: &TsirSimOptions,
    exec: Execution,
) -> Result<Vec<SimResult>> {
    map_indexed(reps, exec, |k| {
        let mut rng = child_rng(seed, k as u64);
        let mut sim = match model.spec() {
            ModelSpec::Ee(_) => simulate_ee(model, x, t_len, &mut rng)?,
            ModelSpec::Tsir(_) => simulate_tsir(model, x, t_len, tsir, &mut rng)?,
        };
        sim.seed = seed;
        Ok(sim)
    })
    .into_iter()
    .collect()
}

/// Exact linear pure-birth process: from size `n`, the next birth comes
/// after an `Exponential(n alpha)` wait. Returns the size at `horizon`.
pub fn simulate_purebirth_exact<R: Rng + ?Sized>(n0: u64, alpha: f64, horizon: f64, rng: &mut R) -> Result<u64> {
    if n0 == 0 {
        return Err(Error::InvalidParameter("initial population must be >= 1".into()));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() || !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidParameter("birth rate and horizon must be finite and >= 0".into()));
    }
    let mut n = n0;
    if alpha == 0.0 {
        return Ok(n);
    }
    let mut clock = 0.0;
    loop {
        let wait = Exp::new(n as f64 * alpha)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?
            .sample(rng);
        clock += wait;
        if clock > horizon {
            return Ok(n);
        }
        n += 1;
    }
}

fn check_closed(x0: u64, y0: u64, population: u64, beta: f64) -> Result<()> {
    if population == 0 || x0 + y0 > population {
        return Err(Error::InvalidParameter(format!(
            "initial state x0 = {x0}, y0 = {y0} does not fit population {population}"
        )));
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::InvalidParameter(format!("transmission rate must be >= 0, got {beta}")));
    }
    Ok(())
}

/// Reed–Frost chain binomial, `Y_t ~ Binomial(x_{t-1}, 1 - eta^{y_{t-1}})`
/// with `eta = exp(-beta / N)` and `x_t = x_{t-1} - y_t`. Time 1 holds the
/// initial state; after extinction the horizon is filled with zeros.
pub fn simulate_chain_binomial<R: Rng + ?Sized>(
    x0: u64,
    y0: u64,
    beta: f64,
    population: u64,
    t_len: usize,
    rng: &mut R,
) -> Result<SimResult> {
    check_closed(x0, y0, population, beta)?;
    if t_len == 0 {
        return Err(Error::InvalidParameter("horizon must be >= 1".into()));
    }
    let mut ys = vec![y0];
    let mut xs = vec![x0];
    let mut extinct_at = (y0 == 0).then_some(1);
    for _ in 2..=t_len {
        let (x, y) = (*xs.last().unwrap(), *ys.last().unwrap());
        let next = if y == 0 {
            0
        } else {
            sample_binomial(rng, x, chain_binomial_infection_probability(y, beta, population))
        };
        if next == 0 && extinct_at.is_none() {
            extinct_at = Some(ys.len() + 1);
        }
        ys.push(next);
        xs.push(x - next);
    }
    let mut out = SimResult::new(vec![ys], 0);
    out.susceptibles = Some(vec![xs]);
    out.extinct_at = extinct_at;
    Ok(out)
}

/// Exact final-size law of the chain binomial: `P(k susceptibles infected)`
/// for `k = 0..=x0`, by enumerating every outcome path over `t_len` steps.
/// Paths still active at the horizon are counted by their infections so far.
pub fn chain_binomial_final_size_exact(x0: u64, y0: u64, beta: f64, population: u64, t_len: usize) -> Result<Vec<f64>> {
    check_closed(x0, y0, population, beta)?;
    if population > 12 || t_len > 12 {
        return Err(Error::InvalidParameter("exact enumeration is limited to N, T <= 12".into()));
    }
    let mut out = vec![0.0; x0 as usize + 1];
    fn walk(x: u64, y: u64, x0: u64, steps: usize, prob: f64, beta: f64, n: u64, out: &mut [f64]) {
        if y == 0 || steps == 0 {
            out[(x0 - x) as usize] += prob;
            return;
        }
        let p = chain_binomial_infection_probability(y, beta, n);
        for k in 0..=x {
            let pk = binomial_logpmf(k, x, p).exp();
            if pk > 0.0 {
                walk(x - k, k, x0, steps - 1, prob * pk, beta, n, out);
            }
        }
    }
    walk(x0, y0, x0, t_len.saturating_sub(1), 1.0, beta, population, &mut out);
    Ok(out)
}

/// Every outcome path `(y_1..y_T)` with its probability, for small instances.
pub fn chain_binomial_paths(x0: u64, y0: u64, beta: f64, population: u64, t_len: usize) -> Result<Vec<(Vec<u64>, f64)>> {
    check_closed(x0, y0, population, beta)?;
    if population > 4 || t_len > 4 || t_len == 0 {
        return Err(Error::InvalidParameter("path listing is limited to N <= 4, 1 <= T <= 4".into()));
    }
    let mut paths = vec![(vec![y0], x0, 1.0)];
    for _ in 2..=t_len {
        let mut next = Vec::new();
        for (path, x, prob) in paths {
            let y = *path.last().unwrap();
            let p = chain_binomial_infection_probability(y, beta, population);
            for k in 0..=x {
                let pk = if y == 0 {
                    if k == 0 { 1.0 } else { 0.0 }
                } else {
                    binomial_logpmf(k, x, p).exp()
                };
                if pk > 0.0 {
                    let mut p2 = path.clone();
                    p2.push(k);
                    next.push((p2, x - k, prob * pk));
                }
            }
        }
        paths = next;
    }
    Ok(paths.into_iter().map(|(p, _, prob)| (p, prob)).collect())
}

/// Chain binomial with latent recovery:
/// `Y_t ~ Binomial(x_{t-1}, 1 - exp(-beta I_{t-1} / N))`,
/// `Z_t ~ Binomial(I_{t-1}, 1 - exp(-gamma))`,
/// `I_t = I_{t-1} + Y_t - Z_t`, `x_t = x_{t-1} - Y_t`.
pub fn simulate_sir_latent<R: Rng + ?Sized>(
    x0: u64,
    i0: u64,
    beta: f64,
    gamma: f64,
    population: u64,
    t_len: usize,
    rng: &mut R,
) -> Result<SimResult> {
    check_closed(x0, i0, population, beta)?;
    if !(gamma > 0.0) {
        return Err(Error::InvalidParameter(format!("recovery rate must be > 0, got {gamma}")));
    }
    if t_len == 0 {
        return Err(Error::InvalidParameter("horizon must be >= 1".into()));
    }
    let recover = -(-gamma).exp_m1();
    let (mut xs, mut ys, mut is, mut zs) = (vec![x0], vec![0u64], vec![i0], vec![0u64]);
    let mut extinct_at = (i0 == 0).then_some(1);
    for t in 2..=t_len {
        let (x, i) = (xs[t - 2], is[t - 2]);
        let y = if i == 0 {
            0
        } else {
            sample_binomial(rng, x, chain_binomial_infection_probability(i, beta, population))
        };
        let z = sample_binomial(rng, i, recover);
        let i_next = i + y - z;
        if i_next == 0 && extinct_at.is_none() {
            extinct_at = Some(t);
        }
        xs.push(x - y);
        ys.push(y);
        is.push(i_next);
        zs.push(z);
    }
    let mut out = SimResult::new(vec![ys], 0);
    out.susceptibles = Some(vec![xs]);
    out.prevalence = Some(is);
    out.recoveries = Some(zs);
    out.extinct_at = extinct_at;
    out.r0 = Some(beta / gamma);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SusceptibleSeries {
    /// `values[i][t - 1]` for `t = 1..=T`.
    pub values: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// `X_t = X_{t-1} - rho Y_t + B_{t-d}` from `X_0 = xbar0[i]`, with births
/// before the first time point taken as zero.
pub fn reconstruct_susceptibles(panel: &SurveillancePanel, rho: f64, xbar0: &[f64]) -> Result<SusceptibleSeries> {
    let births = panel
        .births()
        .ok_or_else(|| Error::MissingData("susceptible reconstruction needs births".into()))?;
    let d = panel
        .maternal_lag()
        .ok_or_else(|| Error::MissingData("susceptible reconstruction needs the maternal lag".into()))?;
    if xbar0.len() != panel.n_areas() {
        return Err(Error::Shape("one initial susceptible level per area is required".into()));
    }
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::InvalidParameter(format!("reporting factor must be finite and >= 0, got {rho}")));
    }
    let mut warnings = Vec::new();
    let values = (0..panel.n_areas())
        .map(|i| {
            let mut x = xbar0[i];
            let mut row = Vec::with_capacity(panel.n_times());
            for t in 1..=panel.n_times() {
                let b = if t > d { births[i][t - d - 1] as f64 } else { 0.0 };
                x = x - rho * panel.count(i, t) as f64 + b;
                if x < 0.0 {
                    warnings.push(format!("negative susceptibles in area {} at time {t}", panel.areas()[i]));
                }
                row.push(x);
            }
            row
        })
        .collect();
    Ok(SusceptibleSeries { values, warnings })
}

/// Seeded final sizes of `reps` chain-binomial runs, in parallel.
pub fn chain_binomial_final_sizes(
    x0: u64,
    y0: u64,
    beta: f64,
    population: u64,
    t_len: usize,
    reps: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<u64>> {
    check_closed(x0, y0, population, beta)?;
    map_indexed(reps, exec, |k| {
        let mut rng = child_rng(seed, k as u64);
        let sim = simulate_chain_binomial(x0, y0, beta, population, t_len, &mut rng)?;
        Ok(x0 - sim.susceptibles.as_ref().unwrap()[0].last().unwrap())
    })
    .into_iter()
    .collect()
}

/// Seeded pure-birth sizes at `horizon`, in parallel.
pub fn purebirth_sizes(n0: u64, alpha: f64, horizon: f64, reps: usize, seed: u64, exec: Execution) -> Result<Vec<u64>> {
    map_indexed(reps, exec, |k| {
        let mut rng = child_rng(seed, k as u64);
        simulate_purebirth_exact(n0, alpha, horizon, &mut rng)
    })
    .into_iter()
    .collect()
}

/// Convenience single-run entry points taking a seed.
pub fn simulate_ee_seeded(model: &Model, x: &[f64], t_len: usize, seed: u64) -> Result<SimResult> {
    let mut sim = simulate_ee(model, x, t_len, &mut root_rng(seed))?;
    sim.seed = seed;
    Ok(sim)
}
