//! Constant reporting factor from cumulative births and cumulative cases.
//!
//! With births lagged by the maternal-immunity delay `d`, cumulative births
//! `B~_k` are regressed on cumulative reported cases `C~_k` over the aligned
//! points `k = 1..T-d`, with an intercept. The slope `rho` scales reported
//! counts to true counts. If the per-step residuals `U_s` are uncorrelated
//! with constant variance, `Var(U~_k) = k sigma^2`, hence weights `1/k`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SurveillancePanel;
use crate::error::{Error, Result};
use crate::rng::root_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Ols,
    #[default]
    CumulativeVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportingOptions {
    #[serde(default)]
    pub weighting: Weighting,
    /// Residual-increment bootstrap replicates; 0 disables the bootstrap.
    #[serde(default = "two_hundred")]
    pub bootstrap: usize,
    #[serde(default)]
    pub seed: u64,
}

fn two_hundred() -> usize {
    200
}

impl Default for ReportingOptions {
    fn default() -> Self {
        Self {
            weighting: Weighting::CumulativeVariance,
            bootstrap: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportingFit {
    pub rho_hat: f64,
    pub intercept: f64,
    pub weighting: Weighting,
    pub weights: Vec<f64>,
    /// `B~_k - intercept - rho C~_k`.
    pub residuals: Vec<f64>,
    pub bootstrap_se: Option<f64>,
    /// t statistic of a linear drift in the reporting factor.
    pub trend_t: f64,
    /// `|trend_t| > 1.96`.
    pub nonconstant_reporting: bool,
    pub maternal_lag: usize,
    pub notes: Vec<String>,
}

/// Weighted least squares fit of `y = a + b x`; returns `(a, b)`.
fn wls_line(x: &[f64], y: &[f64], w: &[f64]) -> Result<(f64, f64)> {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(y, w)| y * w).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(x, w)| w * (x - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((x, y), w)| w * (x - mx) * (y - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Domain("cumulative cases do not vary; the slope is undefined".into()));
    }
    let b = sxy / sxx;
    Ok((my - b * mx, b))
}

fn weights_for(weighting: Weighting, n: usize) -> Vec<f64> {
    match weighting {
        Weighting::Ols => vec![1.0; n],
        Weighting::CumulativeVariance => (1..=n).map(|k| 1.0 / k as f64).collect(),
    }
}

fn cumsum(v: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    v.into_iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect()
}

/// t statistic for `delta` in `e_k - e_{k-1} = (c + delta (k - kbar)) C_k`,
/// fitted by least squares without intercept over `k >= 2`.
fn drift_t(residuals: &[f64], cases: &[f64]) -> f64 {
    let n = residuals.len();
    if n < 4 {
        return 0.0;
    }
    let kbar = (2..=n).map(|k| k as f64).sum::<f64>() / (n - 1) as f64;
    let rows: Vec<([f64; 2], f64)> = (1..n)
        .map(|j| {
            let c = cases[j];
            ([c, c * ((j + 1) as f64 - kbar)], residuals[j] - residuals[j - 1])
        })
        .collect();
    let mut xtx = [[0.0; 2]; 2];
    let mut xty = [0.0; 2];
    for (x, y) in &rows {
        for a in 0..2 {
            xty[a] += x[a] * y;
            for b in 0..2 {
                xtx[a][b] += x[a] * x[b];
            }
        }
    }
    let det = xtx[0][0] * xtx[1][1] - xtx[0][1] * xtx[1][0];
    if !(det.abs() > 1e-12 * (xtx[0][0] * xtx[1][1]).abs().max(1e-300)) {
        return 0.0;
    }
    let inv = [[xtx[1][1] / det, -xtx[0][1] / det], [-xtx[1][0] / det, xtx[0][0] / det]];
    let beta = [
        inv[0][0] * xty[0] + inv[0][1] * xty[1],
        inv[1][0] * xty[0] + inv[1][1] * xty[1],
    ];
    let rss: f64 = rows
        .iter()
        .map(|(x, y)| (y - beta[0] * x[0] - beta[1] * x[1]).powi(2))
        .sum();
    let dof = rows.len() as f64 - 2.0;
    let sigma2 = rss / dof;
    let scale = y_scale(&rows);
    if sigma2 <= 1e-24 * scale {
        return 0.0;
    }
    beta[1] / (sigma2 * inv[1][1]).sqrt()
}

fn y_scale(rows: &[([f64; 2], f64)]) -> f64 {
    rows.iter().map(|(_, y)| y * y).sum::<f64>().max(1.0)
}

/// Fits the reporting factor to single series of births and reported cases
/// (equal length, births lagged by `lag`).
pub fn fit_reporting_series(births: &[f64], cases: &[f64], lag: usize, opts: &ReportingOptions) -> Result<ReportingFit> {
    if births.len() != cases.len() {
        return Err(Error::Shape("births and cases differ in length".into()));
    }
    let t_len = cases.len();
    if t_len < lag + 3 {
        return Err(Error::Shape(format!(
            "need at least three aligned time points, have {} after a lag of {lag}",
            t_len.saturating_sub(lag)
        )));
    }
    if births.iter().chain(cases).any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter("births and cases must be finite and >= 0".into()));
    }
    let c_inc: Vec<f64> = cases[lag..].to_vec();
    let b_cum = cumsum(births[..t_len - lag].iter().copied());
    let c_cum = cumsum(c_inc.iter().copied());
    if *c_cum.last().unwrap() == 0.0 {
        return Err(Error::Domain("no reported cases: the reporting factor is undefined".into()));
    }
    let weights = weights_for(opts.weighting, c_cum.len());
    let (intercept, rho_hat) = wls_line(&c_cum, &b_cum, &weights)?;
    let residuals: Vec<f64> = b_cum
        .iter()
        .zip(&c_cum)
        .map(|(b, c)| b - intercept - rho_hat * c)
        .collect();
    let mut notes = vec![
        "scaled counts carry no allowance for the uncertainty in the estimated factor".to_string(),
    ];
    if rho_hat < 0.0 {
        notes.push("negative slope: births and cases are not consistent with constant reporting".into());
    }
    let bootstrap_se = (opts.bootstrap > 1).then(|| {
        let fitted: Vec<f64> = c_cum.iter().map(|c| intercept + rho_hat * c).collect();
        let incs: Vec<f64> = std::iter::once(residuals[0])
            .chain(residuals.windows(2).map(|w| w[1] - w[0]))
            .collect();
        let mut rng = root_rng(opts.seed);
        let reps: Vec<f64> = (0..opts.bootstrap)
            .filter_map(|_| {
                let noise = cumsum((0..incs.len()).map(|_| incs[rng.random_range(0..incs.len())]));
                let b_star: Vec<f64> = fitted.iter().zip(&noise).map(|(f, e)| f + e).collect();
                wls_line(&c_cum, &b_star, &weights).ok().map(|(_, b)| b)
            })
            .collect();
        let n = reps.len() as f64;
        let mean = reps.iter().sum::<f64>() / n;
        (reps.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    let trend_t = drift_t(&residuals, &c_inc);
    Ok(ReportingFit {
        rho_hat,
        intercept,
        weighting: opts.weighting,
        weights,
        residuals,
        bootstrap_se,
        trend_t,
        nonconstant_reporting: trend_t.abs() > 1.96,
        maternal_lag: lag,
        notes,
    })
}

/// Fits the reporting factor to the panel totals over all areas.
pub fn fit_reporting(panel: &SurveillancePanel, opts: &ReportingOptions) -> Result<ReportingFit> {
    let births = panel
        .births()
        .ok_or_else(|| Error::MissingData("reporting estimation needs births".into()))?;
    let lag = panel.maternal_lag().unwrap_or(0);
    let t_len = panel.n_times();
    let b: Vec<f64> = (0..t_len).map(|t| births.iter().map(|r| r[t] as f64).sum()).collect();
    let c: Vec<f64> = (1..=t_len)
        .map(|t| (0..panel.n_areas()).map(|i| panel.count(i, t) as f64).sum())
        .collect();
    fit_reporting_series(&b, &c, lag, opts)
}

/// Counts replaced by `rho_hat * C`, rounded to nearest with ties to even.
pub fn scale_counts(panel: &SurveillancePanel, fit: &ReportingFit) -> Result<SurveillancePanel> {
    scale_counts_by(panel, fit.rho_hat)
}

pub fn scale_counts_by(panel: &SurveillancePanel, rho: f64) -> Result<SurveillancePanel> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::InvalidParameter(format!("cannot scale counts by {rho}")));
    }
    let counts = panel
        .counts()
        .iter()
        .map(|row| row.iter().map(|&c| (rho * c as f64).round_ties_even() as u64).collect())
        .collect();
    panel.with_counts(counts)
}
