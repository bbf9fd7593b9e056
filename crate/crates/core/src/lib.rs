//! Numerical Morse homology for height functions whose trajectory spaces are
//! cleanly cut out, using obstruction-bundle gluing to recover the counts that
//! transverse gluing misses.
//!
//! The crate is organised bottom-up: [`geometry`] holds the embedded model
//! manifolds and their critical points, [`trajectories`] integrates the
//! negative gradient flow and collects moduli spaces, [`linearized`] builds the
//! discretised linearised operator along a trajectory, [`asymptotics`] and
//! [`gluing`] turn kernel/cokernel data into obstruction sections,
//! [`kuranishi`] handles the combinatorics of compactified moduli spaces and
//! [`homology`] assembles the chain complex. [`pipeline`] ties them together
//! into a reproducible run with a JSON report.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod error;
pub mod geometry;
pub mod gluing;
pub mod homology;
pub mod kuranishi;
pub mod linearized;
pub mod ode;
pub mod pipeline;
pub mod trajectories;

pub use error::{Error, Result};
