//! One-step prediction bands and Pearson residuals.

use serde::{Deserialize, Serialize};

use crate::distributions::negbin_cdf;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par::{map_indexed, Execution};

/// Pointwise quantiles of the conditional mean, and of the predictive
/// count distribution, for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub area: String,
    pub time: usize,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
    /// Observed count; absent for the one-step forecast.
    pub observed: Option<u64>,
    pub pred025: u64,
    pub pred975: u64,
}

/// What predictions are computed from.
#[derive(Debug, Clone, Copy)]
pub enum PredictSource<'a> {
    Point(&'a [f64]),
    Draws(&'a [Vec<f64>]),
}

/// Largest number of draws mixed for predictive count quantiles.
const MIXTURE_DRAWS: usize = 200;

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Above this many support points the mixture quantiles are found by
/// bisection on the closed-form CDF instead of summing the pmf.
const DIRECT_SUM_LIMIT: u64 = 5_000;

/// Smallest `k` with `F(k) >= q` for each `q` (ascending), where `F` is the
/// equal-weight mixture of `NegBin(mu_d, r_d)`.
pub fn negbin_mixture_quantiles(components: &[(f64, f64)], qs: &[f64]) -> Vec<u64> {
    let cap = components
        .iter()
        .map(|&(mu, r)| {
            crate::distributions::NegBinParams::new(mu, r)
                .map(|p| p.tail_cutoff())
                .unwrap_or(0)
        })
        .max()
        .unwrap_or(0);
    if cap <= DIRECT_SUM_LIMIT {
        summed_quantiles(components, qs, cap)
    } else {
        qs.iter().map(|&q| bisected_quantile(components, q)).collect()
    }
}

fn bisected_quantile(components: &[(f64, f64)], q: f64) -> u64 {
    let params: Vec<_> = components
        .iter()
        .filter_map(|&(mu, r)| crate::distributions::NegBinParams::new(mu, r).ok())
        .collect();
    if params.is_empty() {
        return 0;
    }
    let cdf = |k: u64| params.iter().map(|p| negbin_cdf(k, p)).sum::<f64>() / params.len() as f64;
    // Cantelli's bound puts every component's q-quantile below mu + sd sqrt(q / (1 - q)).
    let tail = (q / (1.0 - q)).sqrt();
    let bound = params
        .iter()
        .map(|p| p.mu() + p.variance().sqrt() * tail + 1.0)
        .fold(0.0, f64::max);
    let mut hi = bound.min((1u64 << 62) as f64).ceil() as u64;
    let mut lo = 0;
    if cdf(0) >= q {
        return 0;
    }
    // Invariant: cdf(lo) < q <= cdf(hi), or hi is the saturated bound.
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if cdf(mid) >= q {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

fn summed_quantiles(components: &[(f64, f64)], qs: &[f64], cap: u64) -> Vec<u64> {
    let m = components.len() as f64;
    // log pmf at the current k for every component, by the ratio recursion
    // pmf(k+1) / pmf(k) = (k + r) / (k + 1) * mu / (mu + r).
    let mut lp: Vec<f64> = components
        .iter()
        .map(|&(mu, r)| if mu == 0.0 { 0.0 } else { r * (r / (r + mu)).ln() })
        .collect();
    let log_ratio: Vec<f64> = components
        .iter()
        .map(|&(mu, r)| if mu == 0.0 { f64::NEG_INFINITY } else { (mu / (mu + r)).ln() })
        .collect();
    let mut out = Vec::with_capacity(qs.len());
    let mut cdf = 0.0;
    let mut next = 0;
    let mut k = 0u64;
    while next < qs.len() {
        cdf += lp.iter().map(|v| v.exp()).sum::<f64>() / m;
        while next < qs.len() && (cdf >= qs[next] || k >= cap) {
            out.push(k);
            next += 1;
        }
        for (d, &(_, r)) in components.iter().enumerate() {
            let kf = k as f64;
            lp[d] += ((kf + r) / (kf + 1.0)).ln() + log_ratio[d];
        }
        k += 1;
    }
    out
}

fn thin<T: Clone>(items: &[T], max: usize) -> Vec<T> {
    if items.len() <= max {
        return items.to_vec();
    }
    (0..max).map(|j| items[j * items.len() / max].clone()).collect()
}

/// Means for all cells `t = 2..=T+1` under parameters `x`, `[i][t - 2]`.
fn means_with_forecast(model: &Model, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut means = model.fitted_means(x)?;
    let t_next = model.panel().n_times() + 1;
    for (i, row) in means.iter_mut().enumerate() {
        row.push(model.mean(x, i, t_next)?);
    }
    Ok(means)
}

/// Bands for every cell `t = 2..=T+1`, area-major, time-minor.
pub fn prediction_bands(model: &Model, source: PredictSource<'_>, exec: Execution) -> Result<Vec<Band>> {
    let draws: Vec<Vec<f64>> = match source {
        PredictSource::Point(x) => vec![x.to_vec()],
        PredictSource::Draws(d) if d.is_empty() => {
            return Err(Error::InvalidParameter("no posterior draws to predict from".into()))
        }
        PredictSource::Draws(d) => d.to_vec(),
    };
    let all_means = map_indexed(draws.len(), exec, |d| means_with_forecast(model, &draws[d]));
    let all_means: Vec<Vec<Vec<f64>>> = all_means.into_iter().collect::<Result<_>>()?;
    let phis: Vec<f64> = draws.iter().map(|x| model.phi(x)).collect();
    let panel = model.panel();
    let n = panel.n_areas();
    let t_len = panel.n_times();
    let mix_ix: Vec<usize> = thin(&(0..draws.len()).collect::<Vec<_>>(), MIXTURE_DRAWS);
    let cells = n * t_len;
    let bands = map_indexed(cells, exec, |c| {
        let (i, k) = (c / t_len, c % t_len);
        let t = k + 2;
        let mut mus: Vec<f64> = all_means.iter().map(|m| m[i][k]).collect();
        let comps: Vec<(f64, f64)> = mix_ix.iter().map(|&d| (mus[d], phis[d])).collect();
        mus.sort_by(f64::total_cmp);
        let pred = negbin_mixture_quantiles(&comps, &[0.025, 0.975]);
        Band {
            area: panel.areas()[i].clone(),
            time: t,
            q025: quantile_sorted(&mus, 0.025),
            q50: quantile_sorted(&mus, 0.5),
            q975: quantile_sorted(&mus, 0.975),
            observed: (t <= t_len).then(|| panel.count(i, t)),
            pred025: pred[0],
            pred975: pred[1],
        }
    });
    Ok(bands)
}

/// Per-area prediction at a single time `2 <= t <= T + 1`.
pub fn predict_one_step(model: &Model, source: PredictSource<'_>, t: usize, exec: Execution) -> Result<Vec<Band>> {
    model.check_time(t)?;
    let bands = prediction_bands(model, source, exec)?;
    Ok(bands.into_iter().filter(|b| b.time == t).collect())
}

/// `(y - mu) / sqrt(mu (1 + mu / phi))`; `None` where `mu = 0`.
pub fn pearson_residuals(model: &Model, means: &[Vec<f64>], phi: f64) -> Vec<Vec<Option<f64>>> {
    let panel = model.panel();
    means
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(k, &mu)| {
                    (mu > 0.0).then(|| (panel.count(i, k + 2) as f64 - mu) / (mu * (1.0 + mu / phi)).sqrt())
                })
                .collect()
        })
        .collect()
}
