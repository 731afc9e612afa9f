//! Partially-supervised generic object counting.
//!
//! Two frameworks are provided: lower-count (LC) supervision, where every
//! category carries an exact count only inside a small range and a
//! "beyond range" flag otherwise, and reduced lower-count (RLC)
//! supervision, where only a subset of categories carries count labels at
//! all. Both are trained and evaluated on procedurally generated scenes.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scenegen;
pub mod segscore;

pub use error::{Error, Result};
