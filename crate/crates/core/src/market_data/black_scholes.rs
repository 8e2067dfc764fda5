use std::f64::consts::{PI, SQRT_2};

use super::OptionRight;
use crate::error::{domain, Result};

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Static no-arbitrage price bounds `(lower, upper)` for a European option.
pub fn price_bounds(spot: f64, strike: f64, rate: f64, expiry: f64, right: OptionRight) -> (f64, f64) {
    let df_strike = strike * (-rate * expiry).exp();
    match right {
        OptionRight::Call => ((spot - df_strike).max(0.0), spot),
        OptionRight::Put => ((df_strike - spot).max(0.0), df_strike),
    }
}

/// Black-Scholes price of a European option without dividends.
///
/// A zero volatility gives the discounted intrinsic value on the forward.
pub fn bs_price(
    spot: f64,
    strike: f64,
    rate: f64,
    expiry: f64,
    vol: f64,
    right: OptionRight,
) -> Result<f64> {
    if ![spot, strike, rate, expiry, vol].iter().all(|x| x.is_finite()) {
        return Err(domain("bs_price: non-finite input"));
    }
    if spot <= 0.0 || strike <= 0.0 || expiry <= 0.0 || vol < 0.0 {
        return Err(domain(format!(
            "bs_price: need spot, strike, expiry > 0 and vol >= 0 (spot={spot}, strike={strike}, expiry={expiry}, vol={vol})"
        )));
    }
    let (lo, hi) = price_bounds(spot, strike, rate, expiry, right);
    if vol == 0.0 {
        return Ok(lo);
    }
    let df = (-rate * expiry).exp();
    let sd = vol * expiry.sqrt();
    let d1 = ((spot / strike).ln() + (rate + 0.5 * vol * vol) * expiry) / sd;
    let d2 = d1 - sd;
    let price = match right {
        OptionRight::Call => spot * norm_cdf(d1) - df * strike * norm_cdf(d2),
        OptionRight::Put => df * strike * norm_cdf(-d2) - spot * norm_cdf(-d1),
    };
    Ok(price.clamp(lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on P_n.
    fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
        (1..=n)
            .map(|i| {
                let mut x = (PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
                let mut dp = 0.0;
                for _ in 0..100 {
                    let (mut p0, mut p1) = (1.0, x);
                    for k in 2..=n {
                        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                        p0 = p1;
                        p1 = p2;
                    }
                    dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                    let dx = p1 / dp;
                    x -= dx;
                    if dx.abs() < 1e-16 {
                        break;
                    }
                }
                (x, 2.0 / ((1.0 - x * x) * dp * dp))
            })
            .collect()
    }

    /// Undiscounted lognormal call payoff integrated over the standard normal
    /// variable from the kink to twelve deviations beyond it.
    fn call_by_quadrature(strike: f64, expiry: f64, vol: f64) -> f64 {
        let sd = vol * expiry.sqrt();
        let z0 = (strike.ln() + 0.5 * sd * sd) / sd;
        let (a, b) = (z0, z0 + 12.0);
        gauss_legendre(96)
            .into_iter()
            .map(|(x, w)| {
                let z = 0.5 * (b - a) * x + 0.5 * (a + b);
                let payoff = ((sd * z - 0.5 * sd * sd).exp() - strike).max(0.0);
                0.5 * (b - a) * w * payoff * norm_pdf(z)
            })
            .sum()
    }

    #[test]
    fn atm_call_matches_quadrature() {
        let oracle = call_by_quadrature(1.0, 1.0, 0.2);
        assert!((oracle - 0.0796557).abs() < 5e-8, "oracle {oracle}");
        let price = bs_price(1.0, 1.0, 0.0, 1.0, 0.2, OptionRight::Call).unwrap();
        assert!((price - oracle).abs() < 1e-12, "{price} vs {oracle}");
    }

    #[test]
    fn zero_vol_atm_forward_is_worthless() {
        let price = bs_price(1.0, 1.0, 0.0, 1.0, 0.0, OptionRight::Call).unwrap();
        assert_eq!(price, 0.0);
        let itm = bs_price(1.0, 0.9, 0.05, 1.0, 0.0, OptionRight::Call).unwrap();
        assert!((itm - (1.0 - 0.9 * (-0.05f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        assert!(bs_price(f64::NAN, 1.0, 0.0, 1.0, 0.2, OptionRight::Call).is_err());
        assert!(bs_price(1.0, 1.0, 0.0, f64::INFINITY, 0.2, OptionRight::Put).is_err());
        assert!(bs_price(1.0, 1.0, 0.0, 1.0, -0.1, OptionRight::Put).is_err());
    }

    proptest! {
        #[test]
        fn put_call_parity(k in -0.5f64..0.5, t in 0.05f64..2.0, r in 0.0f64..0.08, vol in 0.01f64..2.0) {
            let strike = k.exp();
            let c = bs_price(1.0, strike, r, t, vol, OptionRight::Call).unwrap();
            let p = bs_price(1.0, strike, r, t, vol, OptionRight::Put).unwrap();
            prop_assert!((c - p - (1.0 - strike * (-r * t).exp())).abs() < 1e-12);
        }

        #[test]
        fn monotone_in_vol(k in -0.5f64..0.5, t in 0.05f64..1.0, r in 0.0f64..0.05,
                           mut vols in proptest::array::uniform3(0.01f64..2.0)) {
            vols.sort_by(f64::total_cmp);
            for right in [OptionRight::Call, OptionRight::Put] {
                let p: Vec<f64> = vols.iter()
                    .map(|&v| bs_price(1.0, k.exp(), r, t, v, right).unwrap())
                    .collect();
                prop_assert!(p[0] <= p[1] && p[1] <= p[2], "{:?} -> {:?}", vols, p);
            }
        }

        #[test]
        fn prices_respect_bounds(k in -1.0f64..1.0, t in 0.01f64..3.0, r in -0.01f64..0.1, vol in 0.0f64..3.0) {
            for right in [OptionRight::Call, OptionRight::Put] {
                let (lo, hi) = price_bounds(1.0, k.exp(), r, t, right);
                let p = bs_price(1.0, k.exp(), r, t, vol, right).unwrap();
                prop_assert!(lo <= p && p <= hi);
            }
        }
    }
}
