//! Blockwise random-walk Metropolis with burn-in scale adaptation.
//!
//! Each block proposes `x_b + s_b L_b z` with `z ~ N(0, I)` and `L_b` a
//! Cholesky factor of a reference covariance (typically the Laplace
//! covariance of the block). During burn-in `ln s_b` follows a Robbins–Monro
//! recursion towards a target acceptance rate, and `L_b` is re-estimated
//! from the chain's own burn-in draws at a quarter, half and three quarters
//! of the way through. Afterwards both are frozen, so the retained draws come
//! from a fixed Metropolis kernel.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::posterior::LogDensity;
use crate::error::{Error, Result};
use crate::par::{map_indexed, Execution};
use crate::rng::child_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalBlock {
    pub name: String,
    pub indices: Vec<usize>,
    /// Lower-triangular factor of the proposal covariance, row-major.
    pub factor: Vec<Vec<f64>>,
}

impl ProposalBlock {
    /// Block with covariance taken from `cov` restricted to `indices`.
    /// Falls back to a diagonal built from positive variances (or `0.01`)
    /// when the sub-block is not positive definite.
    pub fn from_covariance(name: impl Into<String>, indices: Vec<usize>, cov: &[Vec<f64>]) -> Self {
        let d = indices.len();
        let sub = DMatrix::from_fn(d, d, |a, b| cov[indices[a]][indices[b]]);
        let factor = match sub.clone().cholesky() {
            Some(ch) if sub.iter().all(|v| v.is_finite()) => {
                let l = ch.l();
                (0..d).map(|a| (0..d).map(|b| l[(a, b)]).collect()).collect()
            }
            _ => (0..d)
                .map(|a| {
                    (0..d)
                        .map(|b| {
                            let v = sub[(a, a)];
                            if a == b {
                                if v > 0.0 && v.is_finite() {
                                    v.sqrt()
                                } else {
                                    0.1
                                }
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect(),
        };
        Self {
            name: name.into(),
            indices,
            factor,
        }
    }

    /// Isotropic block with standard deviation `sd` per coordinate.
    pub fn isotropic(name: impl Into<String>, indices: Vec<usize>, sd: f64) -> Self {
        let d = indices.len();
        Self {
            name: name.into(),
            indices,
            factor: (0..d)
                .map(|a| (0..d).map(|b| if a == b { sd } else { 0.0 }).collect())
                .collect(),
        }
    }

    fn target_acceptance(&self) -> f64 {
        if self.indices.len() == 1 {
            0.44
        } else {
            0.25
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcOptions {
    pub draws: usize,
    pub burnin: usize,
    pub chains: usize,
    pub seed: u64,
    /// Multiplier on the initial `2.38 / sqrt(d)` proposal scale.
    #[serde(default = "one")]
    pub initial_scale: f64,
    #[serde(default = "yes")]
    pub adapt: bool,
    /// Keep every `thin`-th retained draw.
    #[serde(default = "one_usize")]
    pub thin: usize,
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn yes() -> bool {
    true
}

impl Default for McmcOptions {
    fn default() -> Self {
        Self {
            draws: 2000,
            burnin: 1000,
            chains: 4,
            seed: 1,
            initial_scale: 1.0,
            adapt: true,
            thin: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub draws: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    /// Post-burn-in acceptance rate per block.
    pub acceptance: Vec<f64>,
    /// Frozen proposal scale per block.
    pub scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcOutput {
    pub chains: Vec<ChainOutput>,
    pub block_names: Vec<String>,
}

impl McmcOutput {
    /// Draws pooled over chains, chain by chain.
    pub fn pooled(&self) -> Vec<Vec<f64>> {
        self.chains.iter().flat_map(|c| c.draws.iter().cloned()).collect()
    }

    /// Mean acceptance rate of each block over chains.
    pub fn acceptance(&self) -> Vec<f64> {
        let nc = self.chains.len() as f64;
        (0..self.block_names.len())
            .map(|b| self.chains.iter().map(|c| c.acceptance[b]).sum::<f64>() / nc)
            .collect()
    }

    /// Split-chain scale reduction for coordinate `k`.
    pub fn rhat(&self, k: usize) -> Option<f64> {
        let series: Vec<Vec<f64>> = self
            .chains
            .iter()
            .map(|c| c.draws.iter().map(|d| d[k]).collect())
            .collect();
        split_rhat(&series)
    }
}

/// Draws `opts.chains` independent chains. Chain 0 starts at `init`; other
/// chains start one proposal step away from it in every block.
pub fn sample_posterior<D: LogDensity>(
    target: &D,
    init: &[f64],
    blocks: &[ProposalBlock],
    opts: &McmcOptions,
    exec: Execution,
) -> Result<McmcOutput> {
    if init.len() != target.dim() {
        return Err(Error::Shape(format!(
            "initial point has {} entries, target has {}",
            init.len(),
            target.dim()
        )));
    }
    if opts.chains == 0 || opts.thin == 0 {
        return Err(Error::InvalidParameter("chains and thin must be >= 1".into()));
    }
    if !(opts.initial_scale >= 0.0) {
        return Err(Error::InvalidParameter("proposal scale must be >= 0".into()));
    }
    let f0 = target.log_density(init);
    if !f0.is_finite() {
        return Err(Error::Sampler("initial point is outside the support".into()));
    }
    let chains = map_indexed(opts.chains, exec, |c| run_chain(target, init, blocks, opts, c));
    let chains: Vec<ChainOutput> = chains.into_iter().collect::<Result<_>>()?;
    Ok(McmcOutput {
        chains,
        block_names: blocks.iter().map(|b| b.name.clone()).collect(),
    })
}

fn propose(rng: &mut impl Rng, x: &[f64], block: &ProposalBlock, scale: f64) -> Vec<f64> {
    let d = block.indices.len();
    let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut y = x.to_vec();
    for a in 0..d {
        let step: f64 = (0..=a).map(|b| block.factor[a][b] * z[b]).sum();
        y[block.indices[a]] += scale * step;
    }
    y
}

fn run_chain<D: LogDensity>(
    target: &D,
    init: &[f64],
    blocks: &[ProposalBlock],
    opts: &McmcOptions,
    chain: usize,
) -> Result<ChainOutput> {
    let mut rng = child_rng(opts.seed, chain as u64);
    let mut log_scale: Vec<f64> = blocks
        .iter()
        .map(|b| (opts.initial_scale * 2.38 / (b.indices.len() as f64).sqrt()).ln())
        .collect();
    let mut x = init.to_vec();
    let mut fx = target.log_density(&x);
    if chain > 0 {
        for (b, block) in blocks.iter().enumerate() {
            for _ in 0..20 {
                let y = propose(&mut rng, &x, block, log_scale[b].exp());
                let fy = target.log_density(&y);
                if fy.is_finite() {
                    x = y;
                    fx = fy;
                    break;
                }
            }
        }
    }
    let mut accepted = vec![0usize; blocks.len()];
    let mut draws = Vec::with_capacity(opts.draws / opts.thin + 1);
    let mut trace = Vec::with_capacity(opts.draws / opts.thin + 1);
    let mut blocks: Vec<ProposalBlock> = blocks.to_vec();
    let refresh_at: Vec<usize> = if opts.adapt && opts.burnin >= MIN_REFRESH_BURNIN {
        (1..4).map(|q| q * opts.burnin / 4).collect()
    } else {
        Vec::new()
    };
    let mut history: Vec<Vec<f64>> = Vec::with_capacity(if refresh_at.is_empty() { 0 } else { opts.burnin });
    for it in 0..opts.burnin + opts.draws {
        let burning = it < opts.burnin;
        if refresh_at.contains(&it) {
            refresh_blocks(&mut blocks, &mut log_scale, &history[it / 2..]);
        }
        for (b, block) in blocks.iter().enumerate() {
            let y = propose(&mut rng, &x, block, log_scale[b].exp());
            let fy = target.log_density(&y);
            let u: f64 = rng.random();
            let accept = fy.is_finite() && u.ln() < fy - fx;
            if accept {
                x = y;
                fx = fy;
            }
            if burning && opts.adapt {
                let rate = if accept { 1.0 } else { 0.0 };
                log_scale[b] += (rate - block.target_acceptance()) / ((it + 1) as f64).powf(0.6);
            } else if !burning && accept {
                accepted[b] += 1;
            }
        }
        if burning && !refresh_at.is_empty() {
            history.push(x.clone());
        }
        if !burning && (it - opts.burnin).is_multiple_of(opts.thin) {
            draws.push(x.clone());
            trace.push(fx);
        }
    }
    let acceptance: Vec<f64> = accepted
        .iter()
        .map(|&a| if opts.draws == 0 { 0.0 } else { a as f64 / opts.draws as f64 })
        .collect();
    if opts.draws > 0 {
        if let Some(b) = acceptance.iter().position(|&a| a == 0.0) {
            return Err(Error::Sampler(format!(
                "chain {chain}: block {} accepted no proposals after adaptation",
                blocks[b].name
            )));
        }
    }
    Ok(ChainOutput {
        draws,
        log_density: trace,
        acceptance,
        scales: log_scale.iter().map(|s| s.exp()).collect(),
    })
}

/// Shortest burn-in for which proposal covariances are re-estimated.
const MIN_REFRESH_BURNIN: usize = 400;

/// Replaces each block's factor by one from the empirical covariance of
/// `window`, and restarts its scale at `2.38 / sqrt(d)`. Blocks with a zero
/// scale, or whose window does not move along every coordinate, are kept.
fn refresh_blocks(blocks: &mut [ProposalBlock], log_scale: &mut [f64], window: &[Vec<f64>]) {
    let n = window.len();
    if n < 2 {
        return;
    }
    let d = window[0].len();
    let mean: Vec<f64> = (0..d).map(|k| window.iter().map(|x| x[k]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for x in window {
        for a in 0..d {
            let da = x[a] - mean[a];
            for b in 0..=a {
                cov[a][b] += da * (x[b] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[b][a] = cov[a][b];
        }
    }
    for (block, ls) in blocks.iter_mut().zip(log_scale.iter_mut()) {
        if *ls == f64::NEG_INFINITY || block.indices.iter().any(|&k| !(cov[k][k] > 0.0)) {
            continue;
        }
        let mut c = cov.clone();
        for &k in &block.indices {
            c[k][k] *= 1.0 + 1e-6;
        }
        let fresh = ProposalBlock::from_covariance(block.name.clone(), block.indices.clone(), &c);
        block.factor = fresh.factor;
        *ls = (2.38 / (block.indices.len() as f64).sqrt()).ln();
    }
}

/// Split-chain potential scale reduction factor. Each chain is halved and
/// the halves are treated as separate chains. `None` for fewer than four
/// draws per chain.
pub fn split_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    let n = chains.iter().map(|c| c.len()).min()? / 2;
    if n < 2 {
        return None;
    }
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..n], &c[c.len() - n..]])
        .collect();
    let m = halves.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / nf).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = nf / (m - 1.0) * means.iter().map(|u| (u - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, u)| h.iter().map(|v| (v - u).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m;
    if w == 0.0 {
        return if b == 0.0 { Some(1.0) } else { None };
    }
    let var = (nf - 1.0) / nf * w + b / nf;
    Some((var / w).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Gaussian2 {
        mean: [f64; 2],
        sd: [f64; 2],
    }

    impl LogDensity for Gaussian2 {
        fn dim(&self) -> usize {
            2
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            (0..2)
                .map(|k| -0.5 * ((x[k] - self.mean[k]) / self.sd[k]).powi(2))
                .sum()
        }
    }

    /// Normal prior N(0, 2^2) on each coordinate times a normal likelihood of
    /// observations with known unit variance; the posterior is conjugate.
    struct Conjugate {
        obs: Vec<[f64; 2]>,
    }

    impl LogDensity for Conjugate {
        fn dim(&self) -> usize {
            2
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            let prior: f64 = x.iter().map(|v| -0.5 * v * v / 4.0).sum();
            let lik: f64 = self
                .obs
                .iter()
                .map(|o| -0.5 * ((o[0] - x[0]).powi(2) + (o[1] - x[1]).powi(2)))
                .sum();
            prior + lik
        }
    }

    #[test]
    fn conjugate_posterior_moments() {
        let obs: Vec<[f64; 2]> = (0..10).map(|i| [1.0 + 0.1 * i as f64, -0.5 + 0.05 * i as f64]).collect();
        let n = obs.len() as f64;
        let prec = 1.0 / 4.0 + n;
        let post_sd = (1.0 / prec).sqrt();
        let sums = [obs.iter().map(|o| o[0]).sum::<f64>(), obs.iter().map(|o| o[1]).sum::<f64>()];
        let target = Conjugate { obs };
        let block = ProposalBlock::isotropic("all", vec![0, 1], post_sd);
        let opts = McmcOptions {
            draws: 20_000,
            burnin: 2000,
            chains: 4,
            seed: 3,
            ..Default::default()
        };
        let out = sample_posterior(&target, &[0.0, 0.0], &[block], &opts, Execution::Parallel).unwrap();
        let pooled = out.pooled();
        for k in 0..2 {
            let mean = pooled.iter().map(|d| d[k]).sum::<f64>() / pooled.len() as f64;
            let sd = (pooled.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / pooled.len() as f64).sqrt();
            let want = sums[k] / prec;
            // Effective sample size of random-walk draws is far below the
            // raw count; 0.02 is about five Monte Carlo errors here.
            assert!((mean - want).abs() < 0.02, "mean {mean} want {want}");
            assert!((sd / post_sd - 1.0).abs() < 0.05, "sd {sd} want {post_sd}");
            assert!(out.rhat(k).unwrap() < 1.01);
        }
    }

    #[test]
    fn zero_scale_stays_at_init() {
        let target = Gaussian2 {
            mean: [1.0, 2.0],
            sd: [1.0, 1.0],
        };
        let block = ProposalBlock::isotropic("all", vec![0, 1], 1.0);
        let opts = McmcOptions {
            draws: 200,
            burnin: 0,
            chains: 2,
            seed: 1,
            initial_scale: 0.0,
            adapt: false,
            thin: 1,
        };
        let out = sample_posterior(&target, &[0.3, -0.4], &[block], &opts, Execution::Sequential).unwrap();
        assert!(out.pooled().iter().all(|d| d == &vec![0.3, -0.4]));
    }

    #[test]
    fn discretised_target_cdf() {
        // Target on the integers 0..5 with weights 1..=5, embedded as a
        // step density on [0, 5). The empirical CDF at the cell edges must
        // match the exact one.
        struct Steps;
        impl LogDensity for Steps {
            fn dim(&self) -> usize {
                1
            }
            fn log_density(&self, x: &[f64]) -> f64 {
                if (0.0..5.0).contains(&x[0]) {
                    (x[0].floor() + 1.0).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
        let block = ProposalBlock::isotropic("x", vec![0], 1.5);
        let opts = McmcOptions {
            draws: 100_000,
            burnin: 2000,
            chains: 4,
            seed: 17,
            ..Default::default()
        };
        let out = sample_posterior(&Steps, &[2.5], &[block], &opts, Execution::Parallel).unwrap();
        let pooled = out.pooled();
        let total = pooled.len() as f64;
        let mut cdf = 0.0;
        for cell in 0..5 {
            cdf += (cell + 1) as f64 / 15.0;
            let emp = pooled.iter().filter(|d| d[0] < (cell + 1) as f64).count() as f64 / total;
            assert!((emp - cdf).abs() < 0.01, "cell {cell}: {emp} vs {cdf}");
        }
    }

    #[test]
    fn seeded_runs_repeat() {
        let target = Gaussian2 {
            mean: [0.0, 0.0],
            sd: [1.0, 3.0],
        };
        let blocks = [
            ProposalBlock::isotropic("a", vec![0], 1.0),
            ProposalBlock::isotropic("b", vec![1], 3.0),
        ];
        let opts = McmcOptions {
            draws: 500,
            burnin: 100,
            chains: 3,
            seed: 5,
            ..Default::default()
        };
        let a = sample_posterior(&target, &[0.0, 0.0], &blocks, &opts, Execution::Parallel).unwrap();
        let b = sample_posterior(&target, &[0.0, 0.0], &blocks, &opts, Execution::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rhat_detects_disagreement() {
        let same: Vec<Vec<f64>> = (0..4).map(|c| (0..100).map(|i| ((i * 7 + c * 3) % 11) as f64).collect()).collect();
        assert!(split_rhat(&same).unwrap() < 1.1);
        let apart: Vec<Vec<f64>> = (0..4).map(|c| (0..100).map(|i| (i % 3) as f64 + 10.0 * c as f64).collect()).collect();
        assert!(split_rhat(&apart).unwrap() > 2.0);
    }
}
