//! Static-arbitrage diagnostics on the fixed grid.
//!
//! Butterfly: call prices (unit forward, undiscounted) computed from the grid
//! vols must be convex in strike along every maturity column. Calendar: total
//! variance must be non-decreasing in maturity along every log-moneyness row.

use super::{bs_price, k_axis, t_axis, OptionRight, VolSurface, N_K, N_T};

pub const ARB_TOLERANCE: f64 = 1e-7;

/// Negative change of call-price slope in strike at an interior k node.
#[derive(Debug, Clone, PartialEq)]
pub struct ButterflyViolation {
    pub k_index: usize,
    pub t_index: usize,
    /// `slope(k_i, k_{i+1}) - slope(k_{i-1}, k_i)`; negative means concave.
    pub slope_change: f64,
}

/// Total variance decreasing between maturity `t_index - 1` and `t_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalendarViolation {
    pub k_index: usize,
    pub t_index: usize,
    pub variance_short: f64,
    pub variance_long: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArbReport {
    pub butterfly: Vec<ButterflyViolation>,
    pub calendar: Vec<CalendarViolation>,
}

impl ArbReport {
    pub fn is_arbitrage_free(&self) -> bool {
        self.butterfly.is_empty() && self.calendar.is_empty()
    }
}

pub fn check_arbitrage(surface: &VolSurface) -> ArbReport {
    let (ks, ts) = (k_axis(), t_axis());
    let strikes: Vec<f64> = ks.iter().map(|k| k.exp()).collect();
    let mut report = ArbReport::default();

    for (j, &t) in ts.iter().enumerate() {
        let calls: Vec<f64> = (0..N_K)
            .map(|i| bs_price(1.0, strikes[i], 0.0, t, surface.vol(i, j), OptionRight::Call).unwrap_or(f64::NAN))
            .collect();
        for i in 1..N_K - 1 {
            let left = (calls[i] - calls[i - 1]) / (strikes[i] - strikes[i - 1]);
            let right = (calls[i + 1] - calls[i]) / (strikes[i + 1] - strikes[i]);
            let slope_change = right - left;
            if !(slope_change >= -ARB_TOLERANCE) {
                report.butterfly.push(ButterflyViolation {
                    k_index: i,
                    t_index: j,
                    slope_change,
                });
            }
        }
    }

    for i in 0..N_K {
        for j in 1..N_T {
            let (short, long) = (surface.total_variance(i, j - 1), surface.total_variance(i, j));
            if !(long - short >= -ARB_TOLERANCE) {
                report.calendar.push(CalendarViolation {
                    k_index: i,
                    t_index: j,
                    variance_short: short,
                    variance_long: long,
                });
            }
        }
    }
    report
}
