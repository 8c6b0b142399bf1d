//! Cold damping of electrical normal modes: closed-form predictions checked
//! against a time-domain simulator with spectral estimators.

pub mod cli;
pub mod error;
pub mod estimation;
pub mod feedback;
pub mod modes;
pub mod optim;
pub mod simulator;
pub mod spectra;

pub use error::{Error, Result};
pub use modes::{ModeSet, NormalMode, K_B};
