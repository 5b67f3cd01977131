//! Kolmogorov-Arnold recurrent network (KARN) for short-term load forecasting.
//!
//! The crate is `no_std` and only needs `alloc`. It contains everything that is
//! pure computation:
//!
//! * [`spline`]: uniform knot grids, Cox-de Boor basis evaluation and
//!   least-squares grid extension.
//! * [`grad`]: parameter storage with share groups, gradient sets and a
//!   central finite-difference gradient checker.
//! * [`karn`]: the KARN cell (SiLU residual branch + per-edge B-spline branch +
//!   linear memory) and its stacked network with a direct multi-horizon head.
//! * [`baseline`]: vanilla RNN, GRU and LSTM networks with the same head.
//! * [`data`]: min-max scaling, chronological splitting and sliding windows.
//! * [`loss`], [`optim`], [`train`], [`search`]: objectives, metrics,
//!   optimizers, the epoch loop with plateau schedule and early stopping, and
//!   hyperparameter grid search.
//!
//! File formats, CSV ingestion and the command-line tool live in the `karn`
//! companion crate.
#![no_std]
#![deny(rustdoc::broken_intra_doc_links)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod baseline;
pub mod data;
pub mod error;
pub mod grad;
pub mod head;
pub mod karn;
pub mod loss;
mod lstsq;
pub mod model;
pub mod ops;
pub mod optim;
pub mod search;
pub mod spline;
pub mod train;

pub use error::{Error, Result};
pub use grad::{GradientSet, ParameterSet, Recurrent};
pub use karn::{KarnConfig, KarnNetwork};
pub use model::{Model, ModelFamily};
pub use spline::KnotGrid;
