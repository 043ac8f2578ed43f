//! Counterparty exposure simulation and potential-future-loss limit metrics.
//!
//! The crate is organised along the calculation pipeline:
//!
//! * [`market_models`] simulates seeded market paths,
//! * [`instruments`] values swaps and forwards on those paths and lists their cashflows,
//! * [`collateral`] applies variation margin, initial margin and default-timing conventions,
//! * [`exposure`] assembles the per-date, per-path conditional exposure cube,
//! * [`metrics`] turns the cube into PFE, PFL, aPFL and paPFL profiles,
//! * [`limits`] checks profiles against limits and splits loss appetite,
//! * [`scenario`] loads declarative run descriptions, and
//! * [`report`] runs the whole pipeline and writes its outputs.

pub mod collateral;
pub mod error;
pub mod exposure;
pub mod instruments;
pub mod limits;
pub mod market_models;
pub mod metrics;
pub mod report;
pub mod scenario;

pub use error::{Error, Result};
