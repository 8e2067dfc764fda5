//! Cox-Ross-Rubinstein lattice for the American put.

use super::PricingRequest;
use crate::error::{Error, Result};
use crate::market_data::{bs_price, OptionRight};
use crate::pricer::InstrumentKind;

pub const DEFAULT_STEPS: usize = 800;

/// American put on a unit spot with early exercise at every step.
///
/// Uses CRR factors `e^{±σ√dt}`; when that leaves the risk-neutral
/// probability outside `[0, 1]` (vol below `r√dt`) the lattice is centred on
/// the drift instead, `e^{r dt ± σ√dt}`.
pub fn crr_american_put(strike: f64, expiry: f64, rate: f64, vol: f64, n_steps: usize) -> f64 {
    let intrinsic = |s: f64| (strike - s).max(0.0);
    if vol == 0.0 {
        // Spot grows deterministically at `r`; exercise now or at expiry.
        return intrinsic(1.0).max((strike * (-rate * expiry).exp() - 1.0).max(0.0));
    }
    let n = n_steps.max(1);
    let dt = expiry / n as f64;
    let growth = (rate * dt).exp();
    let disc = 1.0 / growth;
    let spread = vol * dt.sqrt();
    let (mut up, mut down) = (spread.exp(), (-spread).exp());
    if !(down..=up).contains(&growth) {
        up = (rate * dt + spread).exp();
        down = (rate * dt - spread).exp();
    }
    let p = (growth - down) / (up - down);
    let ratio = up / down;
    let mut values: Vec<f64> = {
        let mut s = down.powi(n as i32);
        (0..=n)
            .map(|_| {
                let v = intrinsic(s);
                s *= ratio;
                v
            })
            .collect()
    };
    for i in (0..n).rev() {
        let mut s = down.powi(i as i32);
        for j in 0..=i {
            let cont = disc * (p * values[j + 1] + (1.0 - p) * values[j]);
            values[j] = cont.max(intrinsic(s));
            s *= ratio;
        }
    }
    values[0]
}

/// Mean of the `n_steps` and `n_steps + 1` lattices, floored at the European
/// put and intrinsic value.
pub fn american_put(request: &PricingRequest<'_>, n_steps: usize) -> Result<f64> {
    request.validate()?;
    if request.kind != InstrumentKind::AmericanPut {
        return Err(Error::Domain(format!("american_put cannot price {}", request.kind)));
    }
    let vol = request.vol()?;
    let strike = request.strike();
    let lattice = 0.5
        * (crr_american_put(strike, request.t, request.rate, vol, n_steps)
            + crr_american_put(strike, request.t, request.rate, vol, n_steps + 1));
    let european = bs_price(1.0, strike, request.rate, request.t, vol, OptionRight::Put)?;
    Ok(lattice.max(european).max(strike - 1.0).max(0.0))
}
