//! Integrable Hamiltonian hierarchy on complex matrix phase spaces.

pub mod error;
pub mod flow;
pub mod hierarchy;
pub mod linalg;
pub mod quad;
pub mod reduction22;
pub mod reduction23;
pub mod verify;

pub use error::{Error, Result};
