//! Self-supervised point-cloud shape completion.
//!
//! A completion network proposes the missing part `Y` of a partial scan `X'`
//! and is asked to be an involution: completing `Y` must give back `X'`.
//! A template-based implicit field (warp + UDF decoder) supplies a shared
//! canonical shape that rules out the trivial identity solution. Everything
//! runs on CPU with a small tape-based autodiff.

pub mod autodiff;
pub mod completion;
pub mod error;
pub mod evalharness;
pub mod exec;
pub mod extract;
pub mod geometry;
pub mod scansynth;
pub mod seeds;
pub mod templateinr;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;
