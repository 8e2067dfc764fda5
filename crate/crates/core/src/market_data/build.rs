use std::collections::BTreeMap;

use chrono::NaiveDate;

use super::{implied_vol, k_axis, t_axis, OptionQuote, OptionRight, VolSurface, N_K, N_T};
use crate::error::{domain, Error, Result};

/// Flat total-variance extrapolation allowed beyond the quoted strike range
/// of an expiry, in log-moneyness.
pub const K_EXTRAPOLATION_MARGIN: f64 = 0.05;

/// One expiry's OTM smile as sorted `(k, total variance)` points.
struct Slice {
    expiry: f64,
    points: Vec<(f64, f64)>,
}

impl Slice {
    fn covers(&self, k: f64) -> bool {
        let first = self.points[0].0;
        let last = self.points[self.points.len() - 1].0;
        k >= first - K_EXTRAPOLATION_MARGIN - 1e-12 && k <= last + K_EXTRAPOLATION_MARGIN + 1e-12
    }

    /// Linear in k, flat beyond the quoted range.
    fn total_variance(&self, k: f64) -> f64 {
        let pts = &self.points;
        if k <= pts[0].0 {
            return pts[0].1;
        }
        if k >= pts[pts.len() - 1].0 {
            return pts[pts.len() - 1].1;
        }
        let hi = pts.partition_point(|p| p.0 < k);
        let (k0, w0) = pts[hi - 1];
        let (k1, w1) = pts[hi];
        w0 + (w1 - w0) * (k - k0) / (k1 - k0)
    }
}

fn float_key(x: f64) -> u64 {
    x.to_bits()
}

/// Assembles a fixed-grid surface from one date's option chain.
///
/// Only out-of-the-money quotes contribute: puts for `K < S`, calls for
/// `K > S`, and the average of both at `K = S`. Each expiry's smile is
/// interpolated linearly in total variance along k, then grid maturities are
/// interpolated linearly in total variance between the bracketing expiries
/// that cover the node. No extrapolation in maturity is performed.
pub fn build_surface(chain: &[OptionQuote], quote_date: NaiveDate) -> Result<VolSurface> {
    let first = chain.first().ok_or_else(|| domain("build_surface: empty chain"))?;
    let (spot, rate) = (first.spot, first.rate);
    if let Some(q) = chain
        .iter()
        .find(|q| q.quote_date != quote_date || q.spot != spot || q.rate != rate)
    {
        return Err(domain(format!(
            "build_surface: quotes must share date {quote_date}, spot {spot} and rate {rate} (found {} / {} / {})",
            q.quote_date, q.spot, q.rate
        )));
    }

    // expiry -> k -> implied vols from the OTM side(s)
    let mut by_expiry: BTreeMap<u64, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    let mut strikes: Vec<u64> = Vec::new();
    for q in chain {
        strikes.push(float_key(q.strike));
        let k = q.log_moneyness();
        let otm = match q.right {
            OptionRight::Put => k <= 0.0,
            OptionRight::Call => k >= 0.0,
        };
        if !otm {
            continue;
        }
        let vol = implied_vol(q)?;
        by_expiry
            .entry(float_key(q.expiry))
            .or_default()
            .entry(float_key(k))
            .or_default()
            .push(vol);
    }
    strikes.sort_unstable();
    strikes.dedup();
    let mut expiries: Vec<u64> = chain.iter().map(|q| float_key(q.expiry)).collect();
    expiries.sort_unstable();
    expiries.dedup();
    if expiries.len() < 3 || strikes.len() < 5 {
        return Err(domain(format!(
            "build_surface: need >= 3 expiries and >= 5 strikes, got {} and {}",
            expiries.len(),
            strikes.len()
        )));
    }

    // BTreeMap over the bit pattern of positive floats iterates in numeric order;
    // negative log-moneyness keys need an explicit sort.
    let slices: Vec<Slice> = by_expiry
        .into_iter()
        .map(|(texp, smile)| {
            let expiry = f64::from_bits(texp);
            let mut points: Vec<(f64, f64)> = smile
                .into_iter()
                .map(|(kb, vols)| {
                    let vol = vols.iter().sum::<f64>() / vols.len() as f64;
                    (f64::from_bits(kb), vol * vol * expiry)
                })
                .collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Slice { expiry, points }
        })
        .collect();

    let (ks, ts) = (k_axis(), t_axis());
    let mut vols = vec![0.0; N_K * N_T];
    let mut uncovered = Vec::new();
    for (i, &k) in ks.iter().enumerate() {
        let covering: Vec<&Slice> = slices.iter().filter(|s| s.covers(k)).collect();
        for (j, &t) in ts.iter().enumerate() {
            let below = covering.iter().rev().find(|s| s.expiry <= t + 1e-12);
            let above = covering.iter().find(|s| s.expiry >= t - 1e-12);
            let w = match (below, above) {
                (Some(b), Some(a)) if (a.expiry - b.expiry).abs() < 1e-12 => b.total_variance(k),
                (Some(b), Some(a)) => {
                    let (wb, wa) = (b.total_variance(k), a.total_variance(k));
                    wb + (wa - wb) * (t - b.expiry) / (a.expiry - b.expiry)
                }
                _ => {
                    uncovered.push((i, j));
                    continue;
                }
            };
            vols[N_T * i + j] = (w / t).sqrt();
        }
    }
    if !uncovered.is_empty() {
        return Err(Error::Coverage { nodes: uncovered });
    }
    VolSurface::new(quote_date, vols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::bs_price;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn date() -> NaiveDate {
        NaiveDate::from_ymd_opt(2022, 9, 1).unwrap()
    }

    fn quotes_from(vol_fn: impl Fn(f64, f64) -> f64, points: &[(f64, f64)], spot: f64, rate: f64) -> Vec<OptionQuote> {
        let mut out = Vec::new();
        for &(k, t) in points {
            let strike = spot * k.exp();
            let vol = vol_fn(k, t);
            for right in [OptionRight::Call, OptionRight::Put] {
                out.push(OptionQuote {
                    quote_date: date(),
                    spot,
                    strike,
                    expiry: t,
                    right,
                    mid_price: bs_price(spot, strike, rate, t, vol, right).unwrap(),
                    rate,
                });
            }
        }
        out
    }

    fn regular_points(expiries: &[f64]) -> Vec<(f64, f64)> {
        let ks: Vec<f64> = (0..=14).map(|i| -0.35 + 0.05 * i as f64).collect();
        expiries.iter().flat_map(|&t| ks.iter().map(move |&k| (k, t))).collect()
    }

    #[test]
    fn flat_chain_gives_flat_surface() {
        let pts = regular_points(&[0.03, 0.25, 0.5, 0.75, 1.1]);
        let chain = quotes_from(|_, _| 0.2, &pts, 2750.0, 0.015);
        let s = build_surface(&chain, date()).unwrap();
        for &v in s.as_slice() {
            assert!((v - 0.2).abs() < 1e-6, "{v}");
        }
    }

    /// Raw SVI-style total variance with maturity-linear level.
    fn svi_w(k: f64, t: f64) -> f64 {
        let (a, b, rho, m, s) = (0.01 * t + 0.002, 0.08 * t.sqrt(), -0.5, 0.02, 0.15);
        a + b * (rho * (k - m) + ((k - m).powi(2) + s * s).sqrt())
    }

    #[test]
    fn scattered_svi_chain_is_reproduced_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let expiries = [0.04, 0.1, 0.2, 0.3, 0.45, 0.6, 0.75, 0.9, 1.0, 1.05];
        let mut pts = Vec::new();
        for &t in &expiries {
            for _ in 0..20 {
                pts.push((rng.random_range(-0.36..0.36), t));
            }
        }
        assert_eq!(pts.len(), 200);
        let vol_fn = |k: f64, t: f64| (svi_w(k, t) / t).sqrt();
        let chain = quotes_from(vol_fn, &pts, 1.0, 0.02);
        let s = build_surface(&chain, date()).unwrap();
        let (ks, ts) = (k_axis(), t_axis());
        let mut worst = 0.0f64;
        for i in 0..N_K {
            for j in 0..N_T {
                worst = worst.max((s.vol(i, j) - vol_fn(ks[i], ts[j])).abs());
            }
        }
        assert!(worst < 0.005, "max abs error {worst}");
    }

    #[test]
    fn short_chain_fails_coverage() {
        let pts = regular_points(&[0.03, 0.2, 0.35, 0.5]);
        let chain = quotes_from(|_, _| 0.25, &pts, 1.0, 0.0);
        match build_surface(&chain, date()) {
            Err(Error::Coverage { nodes }) => {
                let ts = t_axis();
                assert!(nodes.iter().all(|&(_, j)| ts[j] > 0.5));
                assert_eq!(nodes.len(), N_K * ts.iter().filter(|&&t| t > 0.5).count());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn atm_averages_put_and_call() {
        let mut pts = regular_points(&[0.03, 0.5, 1.1]);
        pts.retain(|p| p.0.abs() > 1e-9);
        let mut chain = quotes_from(|_, _| 0.2, &pts, 1.0, 0.0);
        for (t, vc, vp) in [(0.03, 0.22, 0.18), (0.5, 0.22, 0.18), (1.1, 0.22, 0.18)] {
            for (right, vol) in [(OptionRight::Call, vc), (OptionRight::Put, vp)] {
                chain.push(OptionQuote {
                    quote_date: date(),
                    spot: 1.0,
                    strike: 1.0,
                    expiry: t,
                    right,
                    mid_price: bs_price(1.0, 1.0, 0.0, t, vol, right).unwrap(),
                    rate: 0.0,
                });
            }
        }
        let s = build_surface(&chain, date()).unwrap();
        assert!((s.vol(20, 9) - 0.2).abs() < 1e-8, "{}", s.vol(20, 9));
    }

    #[test]
    fn bad_otm_quote_propagates() {
        let pts = regular_points(&[0.03, 0.5, 1.1]);
        let mut chain = quotes_from(|_, _| 0.2, &pts, 1.0, 0.0);
        let idx = chain
            .iter()
            .position(|q| q.right == OptionRight::Call && q.log_moneyness() > 0.1)
            .unwrap();
        chain[idx].mid_price = 1.5;
        assert!(matches!(build_surface(&chain, date()), Err(Error::NoSolution { .. })));
    }

    #[test]
    fn too_few_strikes_is_domain_error() {
        let pts: Vec<(f64, f64)> = [0.03, 0.5, 1.1]
            .iter()
            .flat_map(|&t| [-0.1, 0.1].map(|k| (k, t)))
            .collect();
        let chain = quotes_from(|_, _| 0.2, &pts, 1.0, 0.0);
        assert!(matches!(build_surface(&chain, date()), Err(Error::Domain(_))));
        assert!(build_surface(&[], date()).is_err());
    }
}
