//! Complete electrode model on the unit disc.

mod cem;
mod electrodes;
mod forward;
mod mesh;
mod validate;

pub use cem::{CemSolution, CemSolver};
pub use electrodes::{adjacent_patterns, CurrentPatterns, ElectrodeLayout};
pub use forward::{read_measurements_csv, write_measurements_csv, ForwardModel};
pub use mesh::{build_disc_mesh, BoundaryEdge, DiscMesh};
pub use validate::{validate_cem, CemValidationReport, CemValidationSettings};
