//! Auction-information-enhanced CTR prediction.
//!
//! The crate bundles everything needed to study how posterior auction
//! signals (market price, CPC bid) improve click-through-rate models:
//!
//! - [`tensor`]: dense float64 math, activations, Adam.
//! - [`data`]: feature schema, categorical encoding, TSV ingestion, splits.
//! - [`synth`]: a second-price auction simulator with a known ground-truth
//!   CTR process, producing a biased training log and an unbiased holdout.
//! - [`model`]: embedding + DNN / cross-network backbones with manual
//!   forward/backward and a deterministic training loop.
//! - [`am2`]: the adaptive market-price auxiliary tower whose weights are
//!   generated per scenario by a hypernetwork.
//! - [`bcm`]: bid-driven reweighting of positive samples in the CTR loss.
//! - [`metrics`]: AUC, CPM-sensitive AUC, simulated auction revenue,
//!   revenue NDCG, predicted bias, relative-improvement reporting.
//! - [`runner`]: config-driven end-to-end experiments and the CLI surface.

pub mod am2;
pub mod bcm;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod synth;
pub mod tensor;
mod util;

pub use error::{AieError, Result};
