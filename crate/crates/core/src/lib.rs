//! Safe Bayesian optimization for tuning controller gains under unknown
//! safety constraints.
//!
//! Two drivers share the same Gaussian-process surrogates and safe-set
//! semantics:
//!
//! * [`grid`] searches a fixed discretization exhaustively for the safe set,
//!   the potential minimizers and the expanders;
//! * [`gridfree`] replaces the exhaustive search with constrained local
//!   optimization problems solved by [`pattern_search`], started from
//!   feasible safe/unsafe pairs drawn by [`sampling`].
//!
//! [`plant`] provides a simulated cascade P/PI drive as the black box being
//! tuned, and [`harness`] runs configured experiments and writes records.

pub mod config;
pub mod error;
pub mod gp;
pub mod grid;
pub mod gridfree;
pub mod harness;
pub mod pattern_search;
pub mod plant;
pub mod record;
pub mod run;
pub mod safety;
pub mod sampling;
pub mod space;

pub use error::{Error, Result};
pub use gp::{kernel_eval, ConfidenceBounds, GaussianProcess, KernelSpec, Posterior};
pub use safety::{SafeOptState, SafetyVerdict, Sample};
pub use space::SearchBox;
