//! Single-stream RNN inference that processes several time steps per weight
//! fetch.
//!
//! SRU and QRNN gates depend only on inputs, so a block of `T` steps can be
//! computed with matrix-matrix products ([`blocked::run_blocked`]); only the
//! cheap elementwise `c_t` recurrence stays sequential. LSTM gets the partial
//! form ([`blocked::lstm_run_precomputed`]). [`cells::run_stepwise`] is the
//! step-at-a-time oracle, [`traffic`] models DRAM weight traffic, and
//! [`harness`] verifies and times everything.
//!
//! The `parallel` feature (on by default) runs kernels on the ambient rayon
//! pool; without it everything runs on the calling thread.

pub mod blocked;
pub mod cells;
mod error;
pub mod harness;
pub mod model;
pub mod numeric;
mod par;
pub mod traffic;

pub use error::{Error, Result};
pub use par::{parallel_enabled, with_threads, worker_count};
