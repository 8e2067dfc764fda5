//! Option pricing from whole implied-volatility surfaces.
//!
//! The crate covers the full pipeline: Black-Scholes inversion and fixed-grid
//! surface assembly ([`market_data`]), SVD analysis of a surface dataset
//! ([`surface_analysis`]), a small reverse-mode neural-network kernel set
//! ([`nn`]), the convolutional variational autoencoder ([`vae`]), the latent
//! MLP pricer ([`pricer`]), numerical ground-truth pricers ([`oracle`]) and a
//! synthetic SVI surface generator ([`synthetic`]).

pub mod error;
pub mod market_data;
pub mod nn;
pub mod oracle;
pub mod pricer;
pub mod rng;
pub mod surface_analysis;
pub mod synthetic;
pub mod vae;

pub use error::{Error, PriceBound, Result};
