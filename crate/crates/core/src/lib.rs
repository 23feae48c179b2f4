//! Exact laboratory for offline preference-alignment objectives.
//!
//! Policies are tabular softmax tables (or bag-of-words models) small enough
//! that every objective, gradient and optimum can be computed exactly and
//! cross-checked against closed forms and brute-force grids.

pub mod bow;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod oracles;
pub mod synthdata;

pub use error::{Error, Result};
