//! Benchmark pricing models: Black-Scholes closed forms and Heston
//! characteristic-function pricing, numerical Greeks, the minimum-variance
//! Heston delta and daily calibration.

mod bs;
mod calibrate;
mod heston;

pub use bs::{bs_delta, bs_price, bs_vega, implied_vol, norm_cdf, norm_pdf, BsQuote};
pub use calibrate::{
    calibrate_heston, write_calibration_csv, CalibrationOptions, CalibrationResult,
};
pub use heston::{
    heston_greeks, heston_greeks_batch, heston_mv_delta, heston_price, HestonParams,
    HestonSlice,
};
