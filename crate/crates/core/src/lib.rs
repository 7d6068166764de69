//! Laboratory for coordinated transaction scheduling (CTS) on a tie-line.
//!
//! The crate is organized around the life of a CTS interval:
//!
//! - [`spread`]: the inter-area price spread and the tie-optimization benchmark.
//! - [`clearing`]: the operators' flow allocation for a profile of transport offers.
//! - [`game`]: payoffs, closed-form Nash equilibria and a brute-force deviation oracle.
//! - [`learning`]: UCB bidders playing the clearing game repeatedly.
//! - [`calibrate`]: LMP/interchange ingestion, regression and spread statistics.

pub mod calibrate;
pub mod clearing;
pub mod error;
pub mod game;
pub mod learning;
pub mod spread;

pub use error::{Error, Result};
