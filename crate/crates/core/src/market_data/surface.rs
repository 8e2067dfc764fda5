use std::io::{BufRead, Write};

use chrono::NaiveDate;

use crate::error::{Error, Result};

pub const N_K: usize = 41;
pub const N_T: usize = 20;
pub const K_MIN: f64 = -0.3;
pub const K_MAX: f64 = 0.3;
pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 1.0;

/// Upper sanity cap on any grid volatility.
const VOL_CAP: f64 = 5.0;

/// The 41 log-moneyness nodes, exactly symmetric about zero.
pub fn k_axis() -> [f64; N_K] {
    let half = (N_K - 1) as f64 / 2.0;
    std::array::from_fn(|i| K_MAX * (i as f64 - half) / half)
}

/// The 20 maturity nodes in years.
pub fn t_axis() -> [f64; N_T] {
    std::array::from_fn(|j| T_MIN + (T_MAX - T_MIN) * j as f64 / (N_T - 1) as f64)
}

/// Black-Scholes implied volatilities on the fixed 41×20 `(k, T)` grid.
///
/// Storage is row-major with rows indexed by log-moneyness, so the flat index
/// of node `(i, j)` is `N_T * i + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolSurface {
    pub quote_date: NaiveDate,
    vols: Vec<f64>,
}

impl VolSurface {
    pub fn new(quote_date: NaiveDate, vols: Vec<f64>) -> Result<Self> {
        if vols.len() != N_K * N_T {
            return Err(Error::Shape(format!(
                "surface needs {} vols ({N_K}x{N_T}), got {}",
                N_K * N_T,
                vols.len()
            )));
        }
        if let Some(idx) = vols.iter().position(|v| !(v.is_finite() && *v > 0.0 && *v < VOL_CAP)) {
            return Err(Error::Domain(format!(
                "surface vol at node ({}, {}) is {} (must be finite, > 0 and < {VOL_CAP})",
                idx / N_T,
                idx % N_T,
                vols[idx]
            )));
        }
        Ok(Self { quote_date, vols })
    }

    pub fn from_fn(quote_date: NaiveDate, mut f: impl FnMut(f64, f64) -> f64) -> Result<Self> {
        let (ks, ts) = (k_axis(), t_axis());
        let vols = ks
            .iter()
            .flat_map(|&k| ts.iter().map(move |&t| (k, t)))
            .map(|(k, t)| f(k, t))
            .collect();
        Self::new(quote_date, vols)
    }

    pub fn flat(quote_date: NaiveDate, vol: f64) -> Result<Self> {
        Self::new(quote_date, vec![vol; N_K * N_T])
    }

    #[inline]
    pub fn vol(&self, k_index: usize, t_index: usize) -> f64 {
        self.vols[N_T * k_index + t_index]
    }

    /// Row-major vols (`index = 20 * k_index + t_index`).
    pub fn as_slice(&self) -> &[f64] {
        &self.vols
    }

    pub fn k_axis(&self) -> [f64; N_K] {
        k_axis()
    }

    pub fn t_axis(&self) -> [f64; N_T] {
        t_axis()
    }

    /// Total implied variance `σ²T` at a grid node.
    pub fn total_variance(&self, k_index: usize, t_index: usize) -> f64 {
        let v = self.vol(k_index, t_index);
        v * v * t_axis()[t_index]
    }

    /// Writes the grid CSV: header row of maturities, first column of log-moneyness.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_grid_csv(writer, &self.vols)
    }

    pub fn read_csv<R: BufRead>(reader: R, quote_date: NaiveDate) -> Result<Self> {
        Self::new(quote_date, read_grid_csv(reader)?)
    }
}

/// Formats `x` with `digits` significant digits in positional notation.
pub fn fmt_sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Writes any 41×20 row-major grid in the surface CSV layout; values use the
/// shortest representation that reads back exactly.
pub fn write_grid_csv<W: Write>(writer: W, values: &[f64]) -> Result<()> {
    if values.len() != N_K * N_T {
        return Err(Error::Shape(format!("grid CSV needs {} values, got {}", N_K * N_T, values.len())));
    }
    let mut w = std::io::BufWriter::new(writer);
    let header: Vec<String> = t_axis().iter().map(|&t| fmt_sig(t, 9)).collect();
    writeln!(w, "k,{}", header.join(","))?;
    for (i, k) in k_axis().iter().enumerate() {
        let row: Vec<String> = values[N_T * i..N_T * (i + 1)].iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{}", fmt_sig(*k, 9), row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a grid CSV written by [`write_grid_csv`], checking both axes.
pub fn read_grid_csv<R: BufRead>(reader: R) -> Result<Vec<f64>> {
    let (ks, ts) = (k_axis(), t_axis());
    let mut lines = reader.lines();
    let bad = |line: u64, message: String| Error::Parse { line, message };
    let header = lines.next().ok_or_else(|| bad(1, "empty surface file".into()))??;
    let cells: Vec<&str> = header.trim().split(',').collect();
    if cells.len() != N_T + 1 {
        return Err(bad(1, format!("expected {} header cells, found {}", N_T + 1, cells.len())));
    }
    for (j, cell) in cells[1..].iter().enumerate() {
        let t: f64 = cell.trim().parse().map_err(|_| bad(1, format!("bad maturity `{cell}`")))?;
        if (t - ts[j]).abs() > 1e-8 {
            return Err(bad(1, format!("maturity axis mismatch at column {j}: {t} vs {}", ts[j])));
        }
    }
    let mut values = Vec::with_capacity(N_K * N_T);
    for i in 0..N_K {
        let line_no = i as u64 + 2;
        let line = lines.next().ok_or_else(|| bad(line_no, "missing row".into()))??;
        let cells: Vec<&str> = line.trim().split(',').collect();
        if cells.len() != N_T + 1 {
            return Err(bad(line_no, format!("expected {} cells, found {}", N_T + 1, cells.len())));
        }
        let k: f64 = cells[0].trim().parse().map_err(|_| bad(line_no, format!("bad log-moneyness `{}`", cells[0])))?;
        if (k - ks[i]).abs() > 1e-8 {
            return Err(bad(line_no, format!("log-moneyness axis mismatch: {k} vs {}", ks[i])));
        }
        for cell in &cells[1..] {
            let v: f64 = cell.trim().parse().map_err(|_| bad(line_no, format!("bad value `{cell}`")))?;
            values.push(v);
        }
    }
    Ok(values)
}
