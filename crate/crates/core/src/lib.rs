//! Multivariate and propagation graph attention network (MPGAT) for
//! spatial-temporal forecasting of per-intersection outdoor cellular traffic.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: dense tensors, a reverse-mode tape and Adam.
//! * [`graph`]: the directed intersection network and its attention masks.
//! * [`features`]: CSV ingestion, multivariate windowing, normalization,
//!   chronological splits and a synthetic traffic generator.
//! * [`model`]: the M-GAT / TCN / P-GAT network.
//! * [`train`]: loss, MAPE, the training loop, multi-seed runs and the
//!   Wilcoxon rank-sum comparison.
//! * [`checkpoint`]: bit-exact parameter files.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod features;
pub mod graph;
pub mod model;
pub mod train;

pub use error::{MpgatError, Result};
