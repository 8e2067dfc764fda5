//! Seeded synthetic surfaces from SVI slices.
//!
//! Each surface is drawn from a six-factor family: a long-run ATM vol, a
//! short/long ATM ratio with an exponential decay time (the ATM term
//! structure), and SSVI-style skew `rho`, curvature level `eta` and power
//! `gamma`. Every maturity slice is a raw SVI smile; the full grid is
//! rejection-tested against the static-arbitrage checks.

use chrono::{Days, NaiveDate};
use rand::Rng;

use crate::error::{Error, Result};
use crate::market_data::{check_arbitrage, k_axis, split_dataset, t_axis, SurfaceDataset, VolSurface, N_K, N_T};
use crate::rng;

/// Raw SVI total variance `w(k) = a + b (rho (k - m) + sqrt((k - m)^2 + s^2))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SviSlice {
    pub a: f64,
    pub b: f64,
    pub rho: f64,
    pub m: f64,
    pub s: f64,
}

impl SviSlice {
    pub fn validate(&self) -> Result<()> {
        let ok = self.b >= 0.0
            && self.rho.abs() < 1.0
            && self.s > 0.0
            && self.a + self.b * self.s * (1.0 - self.rho * self.rho).sqrt() >= 0.0
            && [self.a, self.b, self.rho, self.m, self.s].iter().all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Generation(format!("invalid SVI slice {self:?}")))
        }
    }

    pub fn total_variance(&self, k: f64) -> f64 {
        let x = k - self.m;
        self.a + self.b * (self.rho * x + (x * x + self.s * self.s).sqrt())
    }

    /// The SSVI smile `θ/2 (1 + ρφk + sqrt((φk + ρ)^2 + 1 − ρ^2))` in raw form.
    pub fn from_ssvi(theta: f64, phi: f64, rho: f64) -> Self {
        Self {
            a: 0.5 * theta * (1.0 - rho * rho),
            b: 0.5 * theta * phi,
            rho,
            m: -rho / phi,
            s: (1.0 - rho * rho).sqrt() / phi,
        }
    }
}

/// Evaluates 20 slices (one per grid maturity) on the fixed grid.
pub fn svi_surface(slices: &[SviSlice], quote_date: NaiveDate) -> Result<VolSurface> {
    if slices.len() != N_T {
        return Err(Error::Generation(format!("need {N_T} slices, got {}", slices.len())));
    }
    slices.iter().try_for_each(SviSlice::validate)?;
    let (ks, ts) = (k_axis(), t_axis());
    for j in 1..N_T {
        if let Some(&k) = ks
            .iter()
            .find(|&&k| slices[j].total_variance(k) < slices[j - 1].total_variance(k) - 1e-12)
        {
            return Err(Error::Generation(format!(
                "calendar violation between slices {} and {j} (T = {:.4} and {:.4}) at k = {k}",
                j - 1,
                ts[j - 1],
                ts[j]
            )));
        }
    }
    let mut vols = Vec::with_capacity(N_K * N_T);
    for &k in &ks {
        for (j, &t) in ts.iter().enumerate() {
            vols.push((slices[j].total_variance(k).max(0.0) / t).sqrt());
        }
    }
    let surface = VolSurface::new(quote_date, vols).map_err(|e| Error::Generation(e.to_string()))?;
    let report = check_arbitrage(&surface);
    if !report.is_arbitrage_free() {
        return Err(Error::Generation(format!(
            "surface fails static-arbitrage checks ({} butterfly, {} calendar)",
            report.butterfly.len(),
            report.calendar.len()
        )));
    }
    Ok(surface)
}

/// The six factors behind one synthetic surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceFactors {
    pub atm_long: f64,
    pub short_ratio: f64,
    pub decay: f64,
    pub rho: f64,
    pub eta: f64,
    pub gamma: f64,
}

impl SurfaceFactors {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let rho: f64 = rng.random_range(-0.75..-0.05);
        // Power-law SSVI is free of static arbitrage when eta (1 + |rho|) <= 2.
        let eta_max: f64 = 1.9 / (1.0 + rho.abs());
        Self {
            atm_long: rng.random_range(0.11..0.47),
            short_ratio: rng.random_range(0.8..1.35),
            decay: rng.random_range(0.1..0.6),
            rho,
            eta: rng.random_range(0.3..eta_max.min(1.4)),
            gamma: rng.random_range(0.3..0.5),
        }
    }

    pub fn atm_vol(&self, t: f64) -> f64 {
        self.atm_long * (1.0 + (self.short_ratio - 1.0) * (-t / self.decay).exp())
    }

    pub fn slices(&self) -> Vec<SviSlice> {
        t_axis()
            .iter()
            .map(|&t| {
                let theta = self.atm_vol(t).powi(2) * t;
                let phi = self.eta / (theta.powf(self.gamma) * (1.0 + theta).powf(1.0 - self.gamma));
                SviSlice::from_ssvi(theta, phi, self.rho)
            })
            .collect()
    }
}

const MAX_ATTEMPTS: usize = 200;

pub fn synthetic_date(index: usize) -> NaiveDate {
    NaiveDate::from_ymd_opt(2018, 1, 1).expect("valid base date") + Days::new(index as u64)
}

/// `n` arbitrage-free surfaces, dated consecutively from 2018-01-01.
pub fn make_surfaces(n: usize, seed: u64) -> Result<Vec<VolSurface>> {
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, &[0x5e3, i as u64]);
            for _ in 0..MAX_ATTEMPTS {
                let factors = SurfaceFactors::sample(&mut rng);
                if let Ok(s) = svi_surface(&factors.slices(), synthetic_date(i)) {
                    return Ok(s);
                }
            }
            Err(Error::Generation(format!("surface {i}: rejection budget of {MAX_ATTEMPTS} exhausted")))
        })
        .collect()
}

/// Synthetic surfaces split 80/20 with the same seed.
pub fn make_dataset(n_surfaces: usize, seed: u64) -> Result<SurfaceDataset> {
    if n_surfaces < 2 {
        return Err(Error::Domain(format!("make_dataset: need at least 2 surfaces, got {n_surfaces}")));
    }
    split_dataset(make_surfaces(n_surfaces, seed)?, 0.8, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date() -> NaiveDate {
        synthetic_date(0)
    }

    #[test]
    fn degenerate_svi_is_flat() {
        let slices: Vec<SviSlice> = t_axis()
            .iter()
            .map(|&t| SviSlice {
                a: 0.3f64.powi(2) * t,
                b: 0.0,
                rho: 0.0,
                m: 0.0,
                s: 0.1,
            })
            .collect();
        let s = svi_surface(&slices, date()).unwrap();
        assert!(s.as_slice().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn negative_rho_lifts_put_wing() {
        let f = SurfaceFactors {
            atm_long: 0.2,
            short_ratio: 1.0,
            decay: 0.3,
            rho: -0.6,
            eta: 1.0,
            gamma: 0.4,
        };
        let s = svi_surface(&f.slices(), date()).unwrap();
        for j in 0..N_T {
            for d in 1..=20 {
                assert!(s.vol(20 - d, j) > s.vol(20 + d, j));
            }
        }
    }

    #[test]
    fn decreasing_level_names_calendar_pair() {
        let mut slices = SurfaceFactors {
            atm_long: 0.2,
            short_ratio: 1.0,
            decay: 0.3,
            rho: -0.3,
            eta: 0.8,
            gamma: 0.4,
        }
        .slices();
        slices[7].a *= 0.2;
        slices[7].b *= 0.2;
        let err = svi_surface(&slices, date()).unwrap_err().to_string();
        assert!(err.contains("slices 6 and 7"), "{err}");
    }

    #[test]
    fn invalid_slice_rejected() {
        let bad = SviSlice { a: 0.01, b: -0.1, rho: 0.0, m: 0.0, s: 0.1 };
        assert!(bad.validate().is_err());
        let neg_min = SviSlice { a: -0.1, b: 0.1, rho: 0.0, m: 0.0, s: 0.1 };
        assert!(neg_min.validate().is_err());
    }

    #[test]
    fn dataset_is_deterministic_and_free() {
        let a = make_dataset(30, 42).unwrap();
        let b = make_dataset(30, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train_indices.len(), 24);
        for s in &a.surfaces {
            assert!(check_arbitrage(s).is_arbitrage_free());
        }
        let c = make_dataset(30, 43).unwrap();
        assert_ne!(a.surfaces[0], c.surfaces[0]);
    }
}
