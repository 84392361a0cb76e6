//! Count kernels shared by both model families.
//!
//! The negative binomial is used in a single mean/size form: `NegBin(mu, r)`
//! has `p = mu / (mu + r)`, mean `mu` and variance `mu (1 + mu / r)`.
//! The linear pure-birth process exposes the total-population form through
//! [`purebirth_total_pmf`] only.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

/// Below this count, rising factorials are summed term by term instead of
/// differenced through `ln_gamma`, which loses digits when `r` is large.
const SMALL_COUNT: u64 = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegBinParams {
    mu: f64,
    size: f64,
}

impl NegBinParams {
    pub fn new(mu: f64, size: f64) -> Result<Self> {
        if !(size > 0.0) || !size.is_finite() {
            return Err(Error::InvalidParameter(format!("negative binomial size must be > 0, got {size}")));
        }
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(Error::InvalidParameter(format!("negative binomial mean must be >= 0, got {mu}")));
        }
        Ok(Self { mu, size })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn size(&self) -> f64 {
        self.size
    }

    pub fn p(&self) -> f64 {
        self.mu / (self.mu + self.size)
    }

    pub fn variance(&self) -> f64 {
        self.mu * (1.0 + self.mu / self.size)
    }

    /// Truncation point for tail sums: `mu + 20 sd + 50`, pushed further out
    /// until a geometric bound puts the remaining mass below `1e-12`.
    pub fn tail_cutoff(&self) -> u64 {
        let mut k = (self.mu + 20.0 * self.variance().sqrt() + 50.0).ceil() as u64;
        let p = self.p();
        loop {
            // pmf(j+1)/pmf(j) = (j+r)/(j+1) p, non-increasing in j when r >= 1.
            let ratio = if self.size >= 1.0 {
                (k as f64 + self.size) / (k as f64 + 1.0) * p
            } else {
                p
            };
            if ratio < 1.0 {
                let bound = negbin_logpmf_raw(k, self.mu, self.size).exp() * ratio / (1.0 - ratio);
                if bound < 1e-12 {
                    return k;
                }
            }
            k += k / 4 + 1;
        }
    }
}

/// `P(Y <= k)` as the regularized incomplete beta `I_{r/(r+mu)}(r, k + 1)`.
pub fn negbin_cdf(k: u64, params: &NegBinParams) -> f64 {
    if params.mu == 0.0 {
        return 1.0;
    }
    let q = params.size / (params.size + params.mu);
    statrs::function::beta::beta_reg(params.size, k as f64 + 1.0, q)
}

/// `ln Γ(k + r) - ln Γ(r)`.
fn ln_rising(r: f64, k: u64) -> f64 {
    if k <= SMALL_COUNT {
        (0..k).map(|j| (r + j as f64).ln()).sum()
    } else {
        ln_gamma(k as f64 + r) - ln_gamma(r)
    }
}

/// `ψ(k + r) - ψ(r)`.
fn digamma_rising(r: f64, k: u64) -> f64 {
    if k <= SMALL_COUNT {
        (0..k).map(|j| 1.0 / (r + j as f64)).sum()
    } else {
        digamma(k as f64 + r) - digamma(r)
    }
}

fn ln_factorial(k: u64) -> f64 {
    ln_gamma(k as f64 + 1.0)
}

/// `ln C(n, k)`.
pub fn ln_choose(n: u64, k: u64) -> f64 {
    debug_assert!(k <= n);
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// Unchecked kernel of [`negbin_logpmf`]; `size > 0`, `mu >= 0` assumed.
pub(crate) fn negbin_logpmf_raw(k: u64, mu: f64, size: f64) -> f64 {
    if mu == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let kf = k as f64;
    let log_mu_r = (mu + size).ln();
    ln_rising(size, k) - ln_factorial(k) - size * (mu / size).ln_1p() + kf * (mu.ln() - log_mu_r)
}

/// Partial derivatives `(d/dmu, d/dsize)` of the negative binomial log-pmf.
pub(crate) fn negbin_logpmf_grad(k: u64, mu: f64, size: f64) -> (f64, f64) {
    let kf = k as f64;
    let d_mu = if k == 0 { 0.0 } else { kf / mu } - (kf + size) / (size + mu);
    let d_size = digamma_rising(size, k) - (mu / size).ln_1p() + (mu - kf) / (size + mu);
    (d_mu, d_size)
}

pub fn negbin_logpmf(k: u64, params: &NegBinParams) -> f64 {
    negbin_logpmf_raw(k, params.mu, params.size)
}

pub fn negbin_pmf(k: u64, params: &NegBinParams) -> f64 {
    negbin_logpmf(k, params).exp()
}

/// Draws from `NegBin(mu, size)` as a gamma–Poisson mixture.
pub fn sample_negbin<R: Rng + ?Sized>(rng: &mut R, params: &NegBinParams) -> u64 {
    if params.mu == 0.0 {
        return 0;
    }
    let gamma = Gamma::new(params.size, params.mu / params.size).expect("validated shape and scale");
    let lambda: f64 = gamma.sample(rng);
    sample_poisson(rng, lambda)
}

pub fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    if !(mean > 0.0) {
        return 0;
    }
    let d = Poisson::new(mean).expect("finite positive mean");
    let v: f64 = d.sample(rng);
    v as u64
}

pub fn sample_binomial<R: Rng + ?Sized>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("p in (0, 1)").sample(rng)
}

pub fn poisson_logpmf(k: u64, mean: f64) -> Result<f64> {
    if !(mean >= 0.0) || !mean.is_finite() {
        return Err(Error::InvalidParameter(format!("Poisson mean must be >= 0, got {mean}")));
    }
    if mean == 0.0 {
        return Ok(if k == 0 { 0.0 } else { f64::NEG_INFINITY });
    }
    Ok(k as f64 * mean.ln() - mean - ln_factorial(k))
}

pub fn binomial_logpmf(k: u64, n: u64, p: f64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    if p <= 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if p >= 1.0 {
        return if k == n { 0.0 } else { f64::NEG_INFINITY };
    }
    ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * (-p).ln_1p()
}

/// Linear (Yule–Furry) birth process started from `n0` individuals, each
/// giving birth at rate `rate`, observed after `horizon` time units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PureBirthLaw {
    n0: u64,
    rate: f64,
    horizon: f64,
}

impl PureBirthLaw {
    pub fn new(n0: u64, rate: f64, horizon: f64) -> Result<Self> {
        if n0 == 0 {
            return Err(Error::InvalidParameter("initial population must be >= 1".into()));
        }
        if !(rate >= 0.0) || !rate.is_finite() {
            return Err(Error::InvalidParameter(format!("birth rate must be >= 0, got {rate}")));
        }
        if !(horizon >= 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!("horizon must be >= 0, got {horizon}")));
        }
        Ok(Self { n0, rate, horizon })
    }

    pub fn n0(&self) -> u64 {
        self.n0
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `p_t = 1 - exp(-rate * horizon)`.
    pub fn success_probability(&self) -> f64 {
        -(-self.rate * self.horizon).exp_m1()
    }

    /// Mean number of births, `n0 (e^{rate t} - 1)`.
    pub fn births_mean(&self) -> f64 {
        self.n0 as f64 * (self.rate * self.horizon).exp_m1()
    }

    pub fn births_variance(&self) -> f64 {
        let m = self.births_mean();
        m * (1.0 + m / self.n0 as f64)
    }
}

/// `P(N(t) = n) = C(n-1, n-n0) e^{-rate t n0} (1 - e^{-rate t})^{n-n0}`.
pub fn purebirth_total_pmf(n: u64, law: &PureBirthLaw) -> Result<f64> {
    if n < law.n0 {
        return Err(Error::Domain(format!(
            "population {n} is below the initial size {}",
            law.n0
        )));
    }
    let births = n - law.n0;
    let at = law.rate * law.horizon;
    if births == 0 {
        return Ok((-at * law.n0 as f64).exp());
    }
    if at == 0.0 {
        return Ok(0.0);
    }
    let log_p = (-(-at).exp_m1()).ln();
    let log = ln_choose(n - 1, births) - at * law.n0 as f64 + births as f64 * log_p;
    Ok(log.exp())
}

/// Number of births `M(t) = N(t) - n0`, distributed `NegBin(n0 (e^{rate t} - 1), n0)`.
pub fn purebirth_births_pmf(b: u64, law: &PureBirthLaw) -> f64 {
    purebirth_total_pmf(b + law.n0, law).expect("b + n0 >= n0")
}

/// Reed–Frost step: `Binomial(x_prev, 1 - eta^{y_prev})` with `eta = exp(-beta / N)`.
pub fn chain_binomial_pmf(y_t: u64, x_prev: u64, y_prev: u64, beta: f64, population: u64) -> Result<f64> {
    if y_t > x_prev {
        return Err(Error::Domain(format!(
            "{y_t} new infections exceed the {x_prev} susceptibles"
        )));
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::InvalidParameter(format!("transmission rate must be >= 0, got {beta}")));
    }
    if population == 0 {
        return Err(Error::InvalidParameter("population must be >= 1".into()));
    }
    let p = chain_binomial_infection_probability(y_prev, beta, population);
    Ok(binomial_logpmf(y_t, x_prev, p).exp())
}

/// `1 - exp(-beta y_prev / N)`.
pub fn chain_binomial_infection_probability(y_prev: u64, beta: f64, population: u64) -> f64 {
    -(-beta * y_prev as f64 / population as f64).exp_m1()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::root_rng;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::ToPrimitive;
    use proptest::prelude::*;

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    fn rat_pow(x: &BigRational, k: u32) -> BigRational {
        (0..k).fold(rat(1, 1), |acc, _| acc * x)
    }

    fn factorial(k: i64) -> BigInt {
        (1..=k).fold(BigInt::from(1), |a, v| a * BigInt::from(v))
    }

    #[test]
    fn cdf_matches_summed_pmf() {
        for &(mu, r) in &[(0.3, 0.5), (4.0, 2.0), (60.0, 7.5)] {
            let p = NegBinParams::new(mu, r).unwrap();
            let mut acc = 0.0;
            for k in 0..200 {
                acc += negbin_pmf(k, &p);
                assert!((negbin_cdf(k, &p) - acc).abs() < 1e-12, "mu {mu} r {r} k {k}");
            }
        }
        assert_eq!(negbin_cdf(0, &NegBinParams::new(0.0, 3.0).unwrap()), 1.0);
    }

    #[test]
    fn geometric_cases() {
        let p = NegBinParams::new(1.0, 1.0).unwrap();
        assert!((negbin_logpmf(0, &p) - 0.5f64.ln()).abs() < 1e-14);
        assert!((negbin_logpmf(1, &p) - 0.25f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn negbin_matches_exact_rational_factorial_form() {
        // k = 3, mu = 5/2, r = 4: C(6, 3) (1 - p)^4 p^3 with p = 5/13.
        let p = rat(5, 13);
        let q = rat(8, 13);
        let choose = factorial(6) / (factorial(3) * factorial(3));
        let exact = BigRational::from_integer(choose) * rat_pow(&q, 4) * rat_pow(&p, 3);
        let want = exact.to_f64().unwrap().ln();
        let got = negbin_logpmf(3, &NegBinParams::new(2.5, 4.0).unwrap());
        assert!((got - want).abs() < 1e-13, "{got} vs {want}");
    }

    #[test]
    fn negbin_zero_mean_is_point_mass() {
        let p = NegBinParams::new(0.0, 3.0).unwrap();
        assert_eq!(negbin_logpmf(0, &p), 0.0);
        assert_eq!(negbin_logpmf(2, &p), f64::NEG_INFINITY);
    }

    #[test]
    fn invalid_size_rejected() {
        assert!(NegBinParams::new(1.0, 0.0).is_err());
        assert!(NegBinParams::new(1.0, -2.0).is_err());
        assert!(NegBinParams::new(-1.0, 2.0).is_err());
    }

    #[test]
    fn poisson_cases() {
        assert_eq!(poisson_logpmf(0, 0.0).unwrap(), 0.0);
        assert!((poisson_logpmf(0, 1.0).unwrap() + 1.0).abs() < 1e-15);
        // 3.2^7 / 7! exactly, times e^{-3.2}.
        let ratio = rat_pow(&rat(16, 5), 7) / BigRational::from_integer(factorial(7));
        let want = ratio.to_f64().unwrap().ln() - 3.2;
        assert!((poisson_logpmf(7, 3.2).unwrap() - want).abs() < 1e-13);
        assert!(poisson_logpmf(1, -0.5).is_err());
    }

    #[test]
    fn purebirth_geometric_and_degenerate() {
        let law = PureBirthLaw::new(1, 2f64.ln(), 1.0).unwrap();
        assert!((purebirth_total_pmf(1, &law).unwrap() - 0.5).abs() < 1e-15);
        assert!((purebirth_total_pmf(2, &law).unwrap() - 0.25).abs() < 1e-15);
        let still = PureBirthLaw::new(4, 0.0, 3.0).unwrap();
        assert_eq!(purebirth_total_pmf(4, &still).unwrap(), 1.0);
        assert_eq!(purebirth_total_pmf(5, &still).unwrap(), 0.0);
        assert!(purebirth_total_pmf(3, &still).is_err());
    }

    #[test]
    fn purebirth_no_births_probability() {
        let law = PureBirthLaw::new(3, 0.35, 2.0).unwrap();
        assert!((purebirth_births_pmf(0, &law) - (-0.7f64 * 3.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn births_law_is_negbin() {
        let law = PureBirthLaw::new(3, 0.7, 1.0).unwrap();
        let nb = NegBinParams::new(law.births_mean(), 3.0).unwrap();
        for b in 0..40 {
            assert!((purebirth_births_pmf(b, &law) - negbin_pmf(b, &nb)).abs() < 1e-13);
        }
    }

    #[test]
    fn chain_binomial_hand_expansion() {
        // beta / N = ln 2 gives eta = 1/2, infection probability 1/2.
        let n = 3;
        let beta = 2f64.ln() * n as f64;
        let p: Vec<f64> = (0..=2).map(|y| chain_binomial_pmf(y, 2, 1, beta, n).unwrap()).collect();
        for (got, want) in p.iter().zip([0.25, 0.5, 0.25]) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
        assert_eq!(chain_binomial_pmf(0, 5, 3, 0.0, 10).unwrap(), 1.0);
        assert_eq!(chain_binomial_pmf(0, 5, 0, 2.0, 10).unwrap(), 1.0);
        assert!(chain_binomial_pmf(6, 5, 1, 2.0, 10).is_err());
    }

    #[test]
    fn poisson_limit_of_negbin() {
        for mu in [0.5, 5.0, 20.0] {
            let nb = NegBinParams::new(mu, 1e6).unwrap();
            let gap = (0..200)
                .map(|k| (negbin_pmf(k, &nb) - poisson_logpmf(k, mu).unwrap().exp()).abs())
                .fold(0.0, f64::max);
            assert!(gap < 1e-3, "mu {mu}: {gap}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for &(k, mu, r) in &[(0u64, 1.3, 0.7), (4, 2.5, 4.0), (200, 150.0, 3.0), (7, 0.2, 50.0)] {
            let (gm, gr) = negbin_logpmf_grad(k, mu, r);
            let h = 1e-6;
            let fm = (negbin_logpmf_raw(k, mu + h, r) - negbin_logpmf_raw(k, mu - h, r)) / (2.0 * h);
            let fr = (negbin_logpmf_raw(k, mu, r + h) - negbin_logpmf_raw(k, mu, r - h)) / (2.0 * h);
            assert!((gm - fm).abs() < 1e-6 * (1.0 + fm.abs()));
            assert!((gr - fr).abs() < 1e-6 * (1.0 + fr.abs()));
        }
    }

    #[test]
    fn negbin_sample_moments() {
        let mut rng = root_rng(11);
        for &(mu, r) in &[(3.0, 0.8), (12.0, 5.0)] {
            let p = NegBinParams::new(mu, r).unwrap();
            let n = 100_000;
            let xs: Vec<f64> = (0..n).map(|_| sample_negbin(&mut rng, &p) as f64).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n as f64;
            let se_mean = (p.variance() / n as f64).sqrt();
            let se_var = ((m4 - var * var) / n as f64).sqrt();
            assert!((mean - mu).abs() < 4.0 * se_mean, "mean {mean} vs {mu}");
            assert!((var - p.variance()).abs() < 4.0 * se_var, "var {var} vs {}", p.variance());
        }
    }

    proptest! {
        #[test]
        fn kernels_normalise(mu in 0.0f64..60.0, r in 0.05f64..80.0, n0 in 1u64..20, at in 0.0f64..1.5,
                             x in 0u64..40, y in 0u64..20, beta in 0.0f64..5.0) {
            let nb = NegBinParams::new(mu, r).unwrap();
            let total: f64 = (0..=nb.tail_cutoff()).map(|k| negbin_pmf(k, &nb)).sum();
            prop_assert!(total >= 1.0 - 1e-9 && total <= 1.0 + 1e-9);

            let pois: f64 = (0..=nb.tail_cutoff()).map(|k| poisson_logpmf(k, mu).unwrap().exp()).sum();
            prop_assert!(pois >= 1.0 - 1e-9);

            let law = PureBirthLaw::new(n0, at, 1.0).unwrap();
            let births = NegBinParams::new(law.births_mean(), n0 as f64).unwrap();
            let pb: f64 = (0..=births.tail_cutoff()).map(|b| purebirth_births_pmf(b, &law)).sum();
            prop_assert!(pb >= 1.0 - 1e-9 && pb <= 1.0 + 1e-9);

            let cb: f64 = (0..=x).map(|k| chain_binomial_pmf(k, x, y, beta, 50).unwrap()).sum();
            prop_assert!((cb - 1.0).abs() < 1e-9);
        }

        #[test]
        fn births_pmf_is_shifted_total(n0 in 1u64..15, at in 0.0f64..2.0) {
            let law = PureBirthLaw::new(n0, at, 1.0).unwrap();
            for b in 0..=50u64 {
                prop_assert_eq!(purebirth_births_pmf(b, &law), purebirth_total_pmf(b + n0, &law).unwrap());
            }
        }
    }
}
