//! Numerical laboratory for the polaron in a quantum crystal: periodic reduced
//! Hartree-Fock ground states, Bloch linear response and the macroscopic dielectric
//! matrix, the nonlinear defect energy of a Fermi sea, and Pekar's continuum polaron.

pub mod cell;
pub mod checkpoint;
pub mod config;
pub mod crystal;
pub mod defect;
pub mod error;
pub mod fit;
pub mod harness;
pub mod lattice;
pub mod linalg;
pub mod pekar;
pub mod verify;
pub mod response;
pub mod supercell;

pub use error::{Error, Result};
pub use lattice::{
    coulomb_d, coulomb_potential, dilate, dilate_adjoint, gaussian_density, laplacian, poisson_periodic,
    BZMesh, Domain, Field, FieldKind, Lattice, PlaneWaveBasis,
};
pub use num_complex::Complex64 as C64;
