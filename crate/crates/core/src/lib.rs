//! Factor-based option hedging engine.
//!
//! The pipeline: normalized call-price surfaces on a liquid lattice are
//! decomposed into a small factor basis; static-arbitrage constraints are
//! built in price space, projected to factor space and pruned; factor
//! dynamics are estimated as an SDE with network drift and diffusion;
//! hedge ratios (sensitivity-based and minimum-variance) come out of small
//! linear systems; and a backtest harness measures relative hedging errors
//! against Black-Scholes and Heston benchmarks on synthetic markets.

pub mod arbitrage;
pub mod backtest;
pub mod datagen;
pub mod dynamics;
pub mod error;
pub mod factors;
pub mod hedging;
pub mod lp;
pub mod models;
pub mod spline;
pub mod surface;

pub use error::{Error, ErrorKind, Result};
