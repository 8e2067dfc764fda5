use rand::seq::SliceRandom;

use super::VolSurface;
use crate::error::{domain, Result};
use crate::rng;

/// Surfaces plus a disjoint train/test partition of their indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceDataset {
    pub surfaces: Vec<VolSurface>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl SurfaceDataset {
    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn train(&self) -> impl Iterator<Item = &VolSurface> + '_ {
        self.train_indices.iter().map(|&i| &self.surfaces[i])
    }

    pub fn test(&self) -> impl Iterator<Item = &VolSurface> + '_ {
        self.test_indices.iter().map(|&i| &self.surfaces[i])
    }
}

/// Seeded random split with `round(train_fraction * N)` training surfaces,
/// clamped so that neither side is empty.
pub fn split_dataset(surfaces: Vec<VolSurface>, train_fraction: f64, seed: u64) -> Result<SurfaceDataset> {
    let n = surfaces.len();
    if n < 2 {
        return Err(domain(format!("split_dataset: need at least 2 surfaces, got {n}")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(domain(format!("split_dataset: train_fraction {train_fraction} not in (0, 1)")));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[0x5917]));
    let test_indices = order.split_off(n_train);
    Ok(SurfaceDataset {
        surfaces,
        train_indices: order,
        test_indices,
    })
}
