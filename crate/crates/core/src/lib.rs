//! Numerical toolkit for stratified semialgebraic sets.
//!
//! The crate evaluates the Kuo functions `p_a`, `p_b'` and `p_b` on pairs of
//! strata `(X, Y)` with `Y` in the frontier of `X`, searches for good
//! sequences that witness or refute Whitney conditions (a) and (b), computes
//! local and essential components, and refines stratifications by slicing
//! along level sets of `p_a` until a fault scan comes back clean.
//!
//! Typical entry points:
//!
//! * [`fixtures`] for the built-in pairs (Santa's hat, Whitney umbrella, ...),
//! * [`whitney::check_a`] / [`whitney::check_b`] for point verdicts,
//! * [`whitney::scan_faults`] for fault sets along `Y`,
//! * [`refine::refine_until_regular`] for the refinement loop,
//! * [`io::load_set`] for JSON set descriptions.

pub mod cli;
pub mod error;
pub mod expr;
pub mod fixtures;
pub mod flatness;
pub mod grassmann;
pub mod io;
pub mod kuo;
pub mod refine;
pub mod rng;
pub mod sequence;
pub mod strata;
pub mod whitney;

pub use error::{Error, Result};
pub use expr::{ExprError, Expression};
pub use grassmann::Subspace;
pub use strata::{PairXY, SamplePoint, Stratum};
