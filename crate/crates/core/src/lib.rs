//! Walk-forward empirical wavelet features feeding random vector functional
//! link (RVFL) forecasters, with a backtesting, tuning and evaluation harness.

pub mod edrvfl;
pub mod ewt;
pub mod harness;
pub mod metrics;
pub mod rvfl;
pub mod series;
pub mod walkforward;

mod matrix_serde;
