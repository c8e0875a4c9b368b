//! Counterfactual-mimicking processes for continuous-time structural nested
//! models: backward ODE solutions, the discrete-time quantile composition,
//! simulation with counterfactual oracles, g-estimation and G-computation.

// Guards like `!(x > 0.0)` are written that way on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gcomp;
pub mod inference;
pub mod discrete_mimic;
pub mod mimic_ode;
pub mod numeric;
pub mod paths;
pub mod shift_models;
pub mod simulate;
pub mod validate;

pub use error::{Error, Result};
