//! Measurement-based simulation of Abelian lattice gauge theories.

pub mod cluster;
pub mod complex;
pub mod error;
pub mod fermion;
pub mod gauss;
pub mod imagtime;
pub mod oracle;
pub mod protocol;
pub mod qstate;
pub mod spt;
pub mod verify;

pub use error::{Error, Result};
