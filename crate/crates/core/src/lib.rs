//! Neural approximation of time-bounded reachability for hybrid systems.
//!
//! The crate covers the whole pipeline: benchmark models ([`models`]),
//! simulation and labeling ([`sim`]), sampled datasets ([`data`]), neural
//! classifiers ([`nn`]) and their statistical assessment ([`eval`]).

pub mod cli;
pub mod error;
pub mod eval;
pub mod models;
pub mod nn;
pub mod data;
pub mod sim;

pub use error::{Error, Result};
pub use models::{Benchmark, HybridModel, State};
