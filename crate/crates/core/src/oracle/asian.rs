//! Discrete-average Asian options: closed-form geometric average and Monte
//! Carlo arithmetic average with antithetic pairs and a geometric control
//! variate.

use rand_distr::{Distribution, StandardNormal};

use super::PricingRequest;
use crate::error::{Error, Result};
use crate::market_data::{norm_cdf, OptionRight};
use crate::pricer::InstrumentKind;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub n_paths: usize,
    /// Averaging dates `i T / n` for `i = 1..=n`; spot at time 0 excluded.
    pub n_observations: usize,
    pub seed: u64,
    pub antithetic: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { n_paths: 100_000, n_observations: 50, seed: 0, antithetic: true }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 1000 || self.n_observations < 2 {
            return Err(Error::Domain(format!(
                "Monte Carlo needs n_paths >= 1000 and n_observations >= 2, got {} and {}",
                self.n_paths, self.n_observations
            )));
        }
        Ok(())
    }
}

fn payoff(average: f64, strike: f64, right: OptionRight) -> f64 {
    match right {
        OptionRight::Call => (average - strike).max(0.0),
        OptionRight::Put => (strike - average).max(0.0),
    }
}

/// Black-Scholes price of an option on the geometric average of
/// `n_observations` equally spaced fixings in `(0, T]`, unit spot.
pub fn geometric_asian_closed_form(vol: f64, rate: f64, k: f64, expiry: f64, n_observations: usize, right: OptionRight) -> f64 {
    let m = n_observations.max(1) as f64;
    let strike = k.exp();
    let disc = (-rate * expiry).exp();
    let mean = (rate - 0.5 * vol * vol) * expiry * (m + 1.0) / (2.0 * m);
    let var = vol * vol * expiry * (m + 1.0) * (2.0 * m + 1.0) / (6.0 * m * m);
    if var <= 0.0 {
        return disc * payoff(mean.exp(), strike, right);
    }
    let sd = var.sqrt();
    let d2 = (mean - strike.ln()) / sd;
    let d1 = d2 + sd;
    let forward = (mean + 0.5 * var).exp();
    match right {
        OptionRight::Call => disc * (forward * norm_cdf(d1) - strike * norm_cdf(d2)),
        OptionRight::Put => disc * (strike * norm_cdf(-d2) - forward * norm_cdf(-d1)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub price: f64,
    pub standard_error: f64,
}

/// Everything one simulation produces; the control-variate estimate is the
/// reported price.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsianMcDetail {
    pub arithmetic: McEstimate,
    pub geometric: McEstimate,
    pub geometric_exact: f64,
    pub beta: f64,
    pub controlled: McEstimate,
}

fn mean_and_se(xs: &[f64]) -> McEstimate {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    McEstimate { price: mean, standard_error: (var / n).sqrt() }
}

/// Simulates unit-spot GBM paths at constant `vol` and prices the
/// arithmetic-average option with and without the geometric control.
pub fn asian_mc_detail(vol: f64, rate: f64, k: f64, expiry: f64, right: OptionRight, config: &McConfig) -> Result<AsianMcDetail> {
    config.validate()?;
    if !(vol >= 0.0 && vol.is_finite() && expiry > 0.0 && rate.is_finite() && k.is_finite()) {
        return Err(Error::Domain(format!("asian: invalid inputs vol={vol}, T={expiry}, r={rate}, k={k}")));
    }
    let m = config.n_observations;
    let strike = k.exp();
    let disc = (-rate * expiry).exp();
    let geometric_exact = geometric_asian_closed_form(vol, rate, k, expiry, m, right);
    if vol == 0.0 {
        let sum: f64 = (1..=m).map(|i| (rate * expiry * i as f64 / m as f64).exp()).sum();
        let exact = McEstimate { price: disc * payoff(sum / m as f64, strike, right), standard_error: 0.0 };
        let geo = McEstimate { price: geometric_exact, standard_error: 0.0 };
        return Ok(AsianMcDetail { arithmetic: exact, geometric: geo, geometric_exact, beta: 0.0, controlled: exact });
    }
    let dt = expiry / m as f64;
    let drift = (rate - 0.5 * vol * vol) * dt;
    let diffusion = vol * dt.sqrt();
    let mut rng = rng::stream(config.seed, &[0xa5]);
    let n_samples = if config.antithetic { config.n_paths / 2 } else { config.n_paths };
    let mut xs = Vec::with_capacity(n_samples);
    let mut ys = Vec::with_capacity(n_samples);
    let mut z = vec![0.0; m];
    let path = |sign: f64, z: &[f64]| -> (f64, f64) {
        let (mut log_s, mut sum, mut log_sum) = (0.0, 0.0, 0.0);
        for &zi in z {
            log_s += drift + diffusion * sign * zi;
            sum += log_s.exp();
            log_sum += log_s;
        }
        let arith = disc * payoff(sum / m as f64, strike, right);
        let geo = disc * payoff((log_sum / m as f64).exp(), strike, right);
        (arith, geo)
    };
    for _ in 0..n_samples {
        z.iter_mut().for_each(|x| *x = StandardNormal.sample(&mut rng));
        let (a, g) = path(1.0, &z);
        if config.antithetic {
            let (a2, g2) = path(-1.0, &z);
            xs.push(0.5 * (a + a2));
            ys.push(0.5 * (g + g2));
        } else {
            xs.push(a);
            ys.push(g);
        }
    }
    let arithmetic = mean_and_se(&xs);
    let geometric = mean_and_se(&ys);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - arithmetic.price) * (y - geometric.price)).sum();
    let var_y: f64 = ys.iter().map(|y| (y - geometric.price).powi(2)).sum();
    let beta = if var_y > 0.0 { cov / var_y } else { 0.0 };
    let residuals: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| x - beta * (y - geometric_exact)).collect();
    let controlled = mean_and_se(&residuals);
    Ok(AsianMcDetail { arithmetic, geometric, geometric_exact, beta, controlled })
}

/// Control-variate price and its standard error for an Asian request.
pub fn asian_arithmetic(request: &PricingRequest<'_>, config: &McConfig) -> Result<McEstimate> {
    request.validate()?;
    let right = match request.kind {
        InstrumentKind::AsianCall => OptionRight::Call,
        InstrumentKind::AsianPut => OptionRight::Put,
        other => return Err(Error::Domain(format!("asian_arithmetic cannot price {other}"))),
    };
    let vol = request.vol()?;
    let mut est = asian_mc_detail(vol, request.rate, request.k, request.t, right, config)?.controlled;
    est.price = est.price.max(0.0);
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::bs_price;

    #[test]
    fn zero_vol_zero_rate_is_intrinsic() {
        for k in [-0.2, 0.0, 0.15] {
            let c = geometric_asian_closed_form(0.0, 0.0, k, 0.7, 50, OptionRight::Call);
            let p = geometric_asian_closed_form(0.0, 0.0, k, 0.7, 50, OptionRight::Put);
            assert!((c - (1.0 - f64::exp(k)).max(0.0)).abs() < 1e-15);
            assert!((p - (f64::exp(k) - 1.0).max(0.0)).abs() < 1e-15);
            let d = asian_mc_detail(0.0, 0.0, k, 0.7, OptionRight::Call, &McConfig::default()).unwrap();
            assert_eq!(d.controlled.standard_error, 0.0);
            assert!((d.controlled.price - (1.0 - f64::exp(k)).max(0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn single_observation_is_european() {
        for (vol, r, k, t) in [(0.2, 0.03, 0.1, 0.5), (0.5, 0.0, -0.2, 1.0), (0.1, 0.05, 0.0, 0.05)] {
            for right in [OptionRight::Call, OptionRight::Put] {
                let g = geometric_asian_closed_form(vol, r, k, t, 1, right);
                let e = bs_price(1.0, f64::exp(k), r, t, vol, right).unwrap();
                assert!((g - e).abs() < 1e-12, "{g} {e}");
            }
        }
    }

    #[test]
    fn geometric_closed_form_matches_simulation() {
        let cfg = McConfig { n_paths: 200_000, seed: 3, antithetic: false, ..McConfig::default() };
        let d = asian_mc_detail(0.2, 0.0, 0.0, 1.0, OptionRight::Call, &cfg).unwrap();
        let gap = (d.geometric.price - d.geometric_exact).abs();
        assert!(gap < 3.0 * d.geometric.standard_error, "{gap} vs se {}", d.geometric.standard_error);
    }

    #[test]
    fn arithmetic_dominates_geometric_call() {
        let cfg = McConfig { n_paths: 20_000, seed: 9, ..McConfig::default() };
        let d = asian_mc_detail(0.3, 0.02, 0.05, 0.8, OptionRight::Call, &cfg).unwrap();
        assert!(d.arithmetic.price >= d.geometric.price);
    }

    #[test]
    fn control_variate_shrinks_error() {
        let d = asian_mc_detail(0.25, 0.02, 0.0, 1.0, OptionRight::Call, &McConfig { seed: 1, ..McConfig::default() }).unwrap();
        assert!(d.controlled.standard_error <= 0.5 * d.arithmetic.standard_error);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = McConfig { n_paths: 4000, seed: 77, ..McConfig::default() };
        let a = asian_mc_detail(0.3, 0.01, -0.1, 0.4, OptionRight::Put, &cfg).unwrap();
        let b = asian_mc_detail(0.3, 0.01, -0.1, 0.4, OptionRight::Put, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_bounds() {
        assert!(McConfig { n_paths: 999, ..McConfig::default() }.validate().is_err());
        assert!(McConfig { n_observations: 1, ..McConfig::default() }.validate().is_err());
    }
}
