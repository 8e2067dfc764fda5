//! Singular value decomposition of the stacked surface matrix.
//!
//! Rows are surfaces, columns the 820 grid nodes in `20 * k_index + t_index`
//! order. The decomposition diagonalizes the smaller Gram matrix with cyclic
//! Jacobi rotations and recovers the other side by projection.

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::market_data::{SurfaceDataset, VolSurface, N_K, N_T};

pub const N_COLS: usize = N_K * N_T;

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMatrix {
    /// Row-major `n_surfaces x 820`.
    pub data: Vec<f64>,
    pub n_surfaces: usize,
}

impl SurfaceMatrix {
    pub fn from_surfaces(surfaces: &[VolSurface]) -> Result<Self> {
        if surfaces.is_empty() {
            return Err(Error::Domain("cannot assemble an empty surface matrix".into()));
        }
        let data = surfaces.iter().flat_map(|s| s.as_slice().iter().copied()).collect();
        Ok(Self { data, n_surfaces: surfaces.len() })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * N_COLS..(i + 1) * N_COLS]
    }

    pub fn unflatten(&self, i: usize, quote_date: NaiveDate) -> Result<VolSurface> {
        VolSurface::new(quote_date, self.row(i).to_vec())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

pub fn assemble_matrix(dataset: &SurfaceDataset) -> Result<SurfaceMatrix> {
    SurfaceMatrix::from_surfaces(&dataset.surfaces)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// Nonincreasing, nonnegative.
    pub singular_values: Vec<f64>,
    /// Row-major `820 x R`; columns orthonormal.
    pub right_vectors: Vec<f64>,
    /// Row-major `N x R`.
    pub left_vectors: Vec<f64>,
    pub n_rows: usize,
    pub rank: usize,
}

impl SvdResult {
    pub fn right_vector(&self, r: usize) -> Vec<f64> {
        (0..N_COLS).map(|c| self.right_vectors[c * self.rank + r]).collect()
    }

    pub fn left_vector(&self, r: usize) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.left_vectors[i * self.rank + r]).collect()
    }

    /// `U_r Σ_r V_rᵀ` using the leading `r` components, row-major `N x 820`.
    pub fn reconstruct(&self, r: usize) -> Vec<f64> {
        let r = r.min(self.rank);
        let mut out = vec![0.0; self.n_rows * N_COLS];
        for i in 0..self.n_rows {
            let row = &mut out[i * N_COLS..(i + 1) * N_COLS];
            for q in 0..r {
                let coef = self.left_vectors[i * self.rank + q] * self.singular_values[q];
                for (c, x) in row.iter_mut().enumerate() {
                    *x += coef * self.right_vectors[c * self.rank + q];
                }
            }
        }
        out
    }
}

/// `‖F − U_r Σ_r V_rᵀ‖_F / ‖F‖_F`.
pub fn relative_reconstruction_error(matrix: &SurfaceMatrix, svd: &SvdResult, r: usize) -> f64 {
    let approx = svd.reconstruct(r);
    let diff: f64 = matrix.data.iter().zip(&approx).map(|(a, b)| (a - b).powi(2)).sum();
    diff.sqrt() / matrix.frobenius_norm()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormalizes `vectors` in place (modified Gram-Schmidt). Vectors that
/// collapse to zero are replaced by unit basis vectors orthogonal to the rest.
fn orthonormalize(vectors: &mut [Vec<f64>]) {
    let dim = vectors.first().map_or(0, Vec::len);
    for i in 0..vectors.len() {
        for pass in 0..2 {
            for j in 0..i {
                let proj = dot(&vectors[i], &vectors[j]);
                let (head, tail) = vectors.split_at_mut(i);
                tail[0].iter_mut().zip(&head[j]).for_each(|(x, y)| *x -= proj * y);
            }
            let norm = dot(&vectors[i], &vectors[i]).sqrt();
            if norm > 1e-10 {
                vectors[i].iter_mut().for_each(|x| *x /= norm);
                break;
            }
            if pass == 0 {
                // Seed with the basis vector least covered by earlier vectors.
                let e = (0..dim)
                    .min_by(|&a, &b| {
                        let ca: f64 = (0..i).map(|j| vectors[j][a].powi(2)).sum();
                        let cb: f64 = (0..i).map(|j| vectors[j][b].powi(2)).sum();
                        ca.total_cmp(&cb)
                    })
                    .unwrap_or(0);
                vectors[i] = vec![0.0; dim];
                vectors[i][e] = 1.0;
            }
        }
    }
}

/// Leading `rank` singular triplets of `matrix`.
///
/// One-sided Jacobi: surface rows are rotated pairwise until mutually
/// orthogonal, which diagonalizes the row Gram matrix `F Fᵀ` implicitly
/// without squaring its condition number. The accumulated rotations give
/// the left vectors; the normalized rows give the right vectors.
pub fn compute_svd(matrix: &SurfaceMatrix, rank: usize) -> Result<SvdResult> {
    let n = matrix.n_surfaces;
    let max_rank = n.min(N_COLS);
    if rank == 0 || rank > max_rank {
        return Err(Error::Domain(format!("svd rank {rank} outside [1, {max_rank}]")));
    }
    if matrix.data.len() != n * N_COLS {
        return Err(Error::Shape(format!(
            "surface matrix has {} values for {n} rows",
            matrix.data.len()
        )));
    }
    let mut w: Vec<Vec<f64>> = (0..n).map(|i| matrix.row(i).to_vec()).collect();
    let mut q: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            e
        })
        .collect();
    let mut norms: Vec<f64> = w.iter().map(|r| dot(r, r)).collect();
    const MAX_SWEEPS: usize = 80;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let (alpha, beta) = (norms[i], norms[j]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&w[i], &w[j]);
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, i, j, c, s);
                rotate(&mut q, i, j, c, s);
                norms[i] = dot(&w[i], &w[i]);
                norms[j] = dot(&w[j], &w[j]);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence { iterations: MAX_SWEEPS, lo: 0.0, hi: 0.0 });
    }

    let sigma: Vec<f64> = norms.iter().map(|x| x.sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let order = &order[..rank];
    let singular_values: Vec<f64> = order.iter().map(|&i| sigma[i]).collect();
    let floor = 1e-13 * singular_values[0];
    let mut rights: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| {
            if sigma[i] > floor {
                w[i].iter().map(|x| x / sigma[i]).collect()
            } else {
                vec![0.0; N_COLS]
            }
        })
        .collect();
    orthonormalize(&mut rights);
    let mut lefts: Vec<Vec<f64>> = order.iter().map(|&i| q[i].clone()).collect();

    for k in 0..rank {
        let pivot = rights[k].iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        if pivot < 0.0 {
            rights[k].iter_mut().for_each(|x| *x = -*x);
            lefts[k].iter_mut().for_each(|x| *x = -*x);
        }
    }
    let mut right_vectors = vec![0.0; N_COLS * rank];
    let mut left_vectors = vec![0.0; n * rank];
    for k in 0..rank {
        for c in 0..N_COLS {
            right_vectors[c * rank + k] = rights[k][c];
        }
        for i in 0..n {
            left_vectors[i * rank + k] = lefts[k][i];
        }
    }
    Ok(SvdResult { singular_values, right_vectors, left_vectors, n_rows: n, rank })
}

fn rotate(rows: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (head, tail) = rows.split_at_mut(j);
    for (x, y) in head[i].iter_mut().zip(tail[0].iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumRow {
    pub rank: usize,
    pub singular_value: f64,
    pub cumulative_energy: f64,
}

/// Cumulative share of `Σ s_i²` over the returned singular values.
pub fn explained_spectrum(result: &SvdResult) -> Vec<SpectrumRow> {
    let total: f64 = result.singular_values.iter().map(|s| s * s).sum();
    let mut acc = 0.0;
    result
        .singular_values
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            acc += s * s;
            let cumulative_energy = if i + 1 == result.singular_values.len() || total == 0.0 {
                1.0
            } else {
                acc / total
            };
            SpectrumRow { rank: i + 1, singular_value: s, cumulative_energy }
        })
        .collect()
}
