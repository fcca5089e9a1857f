//! Optimal stopping for the Brownian spider (Walsh Brownian motion on `n`
//! half-lines joined at the origin).
//!
//! * [`value_fn`]: closed-form value functions and constants for n = 0, 1, 2.
//! * [`verifier`]: finite-difference and Monte Carlo checks of those forms.
//! * [`walk`], [`stopping`], [`mc`]: lattice simulation and estimation.
//! * [`dp`]: grid dynamic programming for any n, including n = 3.

pub mod cli;
pub mod dp;
pub mod error;
pub mod mc;
pub mod stats;
pub mod stopping;
pub mod value_fn;
pub mod verifier;
pub mod walk;

pub use error::{Result, SpiderError};
pub use stopping::StoppingRule;
pub use value_fn::{EvalPoint, ValueParams};
pub use walk::{InitialState, LineState, SpiderState, WalkConfig};
