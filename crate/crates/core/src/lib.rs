//! Ensemble Kalman inversion with adaptive tempering, random-field
//! parameterisations and an electrical impedance tomography forward model.

pub mod driver;
pub mod ensemble;
pub mod eit;
pub mod experiments;
pub mod error;
pub mod fields;
pub mod level_set;
pub mod param;
pub mod schedules;
pub mod tempering;

pub use error::{EkiError, Result};
