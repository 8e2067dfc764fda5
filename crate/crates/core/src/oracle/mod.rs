//! Reference pricers used as ground truth for the learned pricer.
//!
//! Every request uses a single Black-Scholes vol read off the surface at the
//! option's own `(k, T)`; spot is normalized to 1 and the strike is `e^k`.

mod asian;
mod dataset;
mod lattice;

pub use asian::{asian_arithmetic, asian_mc_detail, geometric_asian_closed_form, AsianMcDetail, McConfig, McEstimate};
pub use dataset::{generate_price_dataset, price_record, OracleConfig};
pub use lattice::{american_put, crr_american_put, DEFAULT_STEPS};

use crate::error::{Error, Result};
use crate::market_data::{t_axis, VolSurface, K_MAX, K_MIN, N_K, N_T, T_MAX, T_MIN};
use crate::pricer::InstrumentKind;

#[derive(Debug, Clone, Copy)]
pub struct PricingRequest<'a> {
    pub surface: &'a VolSurface,
    pub k: f64,
    pub t: f64,
    pub rate: f64,
    pub kind: InstrumentKind,
}

impl PricingRequest<'_> {
    pub fn validate(&self) -> Result<()> {
        check_domain(self.k, self.t)?;
        if !self.rate.is_finite() {
            return Err(Error::Domain(format!("rate must be finite, got {}", self.rate)));
        }
        Ok(())
    }

    pub fn strike(&self) -> f64 {
        self.k.exp()
    }

    pub fn vol(&self) -> Result<f64> {
        surface_vol_at(self.surface, self.k, self.t)
    }
}

pub(crate) fn check_domain(k: f64, t: f64) -> Result<()> {
    if (K_MIN..=K_MAX).contains(&k) && (T_MIN..=T_MAX).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "(k, T) = ({k}, {t}) outside [{K_MIN}, {K_MAX}] x [{T_MIN}, {T_MAX}]"
        )))
    }
}

/// Largest axis index `i < len - 1` with `axis[i] <= x`, and the fractional
/// position of `x` in `[axis[i], axis[i + 1]]`.
fn locate(axis: &[f64], x: f64) -> (usize, f64) {
    let i = axis[..axis.len() - 1].iter().rposition(|&a| a <= x).unwrap_or(0);
    if x == axis[i + 1] {
        return (i + 1, 0.0);
    }
    (i, (x - axis[i]) / (axis[i + 1] - axis[i]))
}

/// Vol at `(k, T)` from bilinear interpolation of total variance; grid nodes
/// return the stored vol.
pub fn surface_vol_at(surface: &VolSurface, k: f64, t: f64) -> Result<f64> {
    check_domain(k, t)?;
    let (ki, fk) = locate(&surface.k_axis(), k);
    let ts = t_axis();
    let (ti, ft) = locate(&ts, t);
    if fk == 0.0 && ft == 0.0 {
        return Ok(surface.vol(ki, ti));
    }
    let w = |i: usize, j: usize| surface.total_variance(i.min(N_K - 1), j.min(N_T - 1));
    let w_lo = (1.0 - fk) * w(ki, ti) + fk * w(ki + 1, ti);
    let w_hi = (1.0 - fk) * w(ki, ti + 1) + fk * w(ki + 1, ti + 1);
    let total = (1.0 - ft) * w_lo + ft * w_hi;
    Ok((total / t).sqrt())
}
