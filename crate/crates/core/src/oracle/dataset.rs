use rand::Rng;
use rayon::prelude::*;

use super::{american_put, asian_arithmetic, McConfig, PricingRequest, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::market_data::{SurfaceDataset, VolSurface, K_MAX, K_MIN, T_MAX, T_MIN};
use crate::pricer::{InstrumentKind, PriceRecord};
use crate::rng;

/// Oracle settings shared by every record of a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub rate: f64,
    pub lattice_steps: usize,
    /// `seed` is replaced per record.
    pub mc: McConfig,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { rate: 0.02, lattice_steps: DEFAULT_STEPS, mc: McConfig::default() }
    }
}

/// Prices one instrument with the matching oracle.
pub fn price_record(surface: &VolSurface, kind: InstrumentKind, k: f64, t: f64, config: &OracleConfig, mc_seed: u64) -> Result<f64> {
    let request = PricingRequest { surface, k, t, rate: config.rate, kind };
    match kind {
        InstrumentKind::AmericanPut => american_put(&request, config.lattice_steps),
        InstrumentKind::AsianCall | InstrumentKind::AsianPut => {
            let mc = McConfig { seed: mc_seed, ..config.mc };
            asian_arithmetic(&request, &mc).map(|e| e.price)
        }
    }
}

fn generate_split(
    dataset: &SurfaceDataset,
    indices: &[usize],
    kind: InstrumentKind,
    n: usize,
    split_tag: u64,
    seed: u64,
    config: &OracleConfig,
) -> Result<Vec<PriceRecord>> {
    if n > 0 && indices.is_empty() {
        return Err(Error::Domain("cannot draw price records from an empty split".into()));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let coords = [kind.code(), split_tag, i as u64];
            let mut r = rng::stream(seed, &coords);
            let surface_id = indices[r.random_range(0..indices.len())];
            let k = r.random_range(K_MIN..=K_MAX);
            let t = r.random_range(T_MIN..=T_MAX);
            let mc_seed = rng::derive_seed(seed, &[coords[0], coords[1], coords[2], 0x3c]);
            let price = price_record(&dataset.surfaces[surface_id], kind, k, t, config, mc_seed)?;
            Ok(PriceRecord { surface_id, kind, k, t, rate: config.rate, price })
        })
        .collect()
}

/// Oracle-priced records on surfaces drawn uniformly from each split, with
/// `(k, T)` uniform over the grid domain. Record `i` depends only on
/// `(seed, kind, split, i)`.
pub fn generate_price_dataset(
    dataset: &SurfaceDataset,
    kind: InstrumentKind,
    n_train: usize,
    n_test: usize,
    seed: u64,
    config: &OracleConfig,
) -> Result<(Vec<PriceRecord>, Vec<PriceRecord>)> {
    let train = generate_split(dataset, &dataset.train_indices, kind, n_train, 0, seed, config)?;
    let test = generate_split(dataset, &dataset.test_indices, kind, n_test, 1, seed, config)?;
    Ok((train, test))
}
