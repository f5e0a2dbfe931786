//! Run-to-run indirect trajectory tracking for single-coil reluctance
//! actuators.
//!
//! A flatness-based feedforward controller and current predictor are obtained
//! by inverting an identifiable actuator model. Between operations an online
//! Nelder–Mead search adapts the model parameters using only the error
//! between the measured and predicted coil current.

pub mod config;
pub mod error;
pub mod flatctrl;
pub mod harness;
pub mod model;
pub mod ode;
pub mod r2r;
pub mod reference;
pub mod sensitivity;
pub mod simulator;

pub use error::{Error, Result};
