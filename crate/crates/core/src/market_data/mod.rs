//! Option-chain ingestion, Black-Scholes inversion, fixed-grid surfaces,
//! static-arbitrage checks and the train/test split of a surface dataset.

mod arbitrage;
mod black_scholes;
mod build;
mod chain;
mod dataset;
mod implied_vol;
mod surface;

pub use arbitrage::{check_arbitrage, ArbReport, ButterflyViolation, CalendarViolation, ARB_TOLERANCE};
pub use black_scholes::{bs_price, norm_cdf, norm_pdf, price_bounds};
pub use build::{build_surface, K_EXTRAPOLATION_MARGIN};
pub use chain::{read_chain_csv, write_chain_csv, OptionQuote, OptionRight};
pub use dataset::{split_dataset, SurfaceDataset};
pub use implied_vol::{brent, implied_vol, VOL_MAX, VOL_MIN};
pub use surface::{fmt_sig, k_axis, read_grid_csv, write_grid_csv, t_axis, VolSurface, K_MAX, K_MIN, N_K, N_T, T_MAX, T_MIN};
