//! Point-based crowd counting from sparse head annotations, at desk scale.
//!
//! The library builds synthetic crowd scenes, samples annotated subsets of the
//! ground-truth head points under several protocols, and trains a compact
//! two-stage point detector on them:
//!
//! * a **proposal matching** stage whose dense point proposals are matched
//!   one-to-one against the sparse annotations (Hungarian assignment over a
//!   distance/confidence cost), and
//! * a **performance restoration** stage supervised by pseudo points that a
//!   progressive confidence threshold selects from the first stage's output.
//!
//! Counting (MAE / root-mean-square error) and localization (precision,
//! recall, F1 at a match radius) metrics close the loop. Everything is seeded
//! and deterministic so experiment runs replay bit-for-bit.

pub mod assignment;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pseudo;
pub mod seed;
pub mod synth;
pub mod train;

mod error;

pub use error::{Error, Result};
