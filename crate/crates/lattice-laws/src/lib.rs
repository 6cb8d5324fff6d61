//! Toda Lattice and Ablowitz-Ladik dynamics together with the Green's
//! functions of their Lax operators, and numerical verification of the
//! microscopic conservation laws (densities, currents, positivity,
//! convexity, determinant/trace ledgers, coercivity) at desk scale.

pub mod al;
pub mod cli;
pub mod error;
pub mod flow;
pub mod linalg;
pub mod series;
pub mod toda;
pub mod window;

pub use error::{LatticeError, Result};
pub use window::LatticeWindow;
