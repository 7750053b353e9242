//! Temporal-attention bilinear (TABL) networks with low-rank auxiliary
//! adapters, for mid-price direction classification on limit order book
//! time-series.
//!
//! The crate covers the full pipeline:
//!
//! - `linalg` — dense f64 matrix kernel with an instrumented MAC counter
//! - `layers` — bilinear (BL) and TABL layers, forward and manual backward
//! - `adapters` — frozen-base augmentation with rank-K factor pairs, two
//!   forward strategies, and the deployment-time weight fold
//! - `conv` — 1D convolution layers and their CP-factored adapters
//! - `training` — weighted entropy loss, Adam, plateau scheduling, freeze
//!   masks, the training loop and a finite-difference gradient checker
//! - `data` — LOB ingestion, z-score normalization, windowing, labeling,
//!   experiment splits and a synthetic LOB generator
//! - `metrics` / `trading` — classification metrics, win-rate and the
//!   long-only trading simulation
//! - `model` — network assembly, topology registry, parameter/MAC
//!   accounting and model serialization
//! - `experiments` — the three experiment protocols and the rank sweep

pub mod adapters;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod experiments;
pub mod layers;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod trading;
pub mod training;

pub use error::{Result, TablError};
pub use linalg::{Matrix, OpCounter};
