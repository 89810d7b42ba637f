//! Matrix-free FFT-preconditioned homogenization of periodic linear-elastic
//! microstructures with interface-enriched (X-FEM) tetrahedral voxel elements.
//!
//! The crate is `no_std` + `alloc`. Enable the `parallel` feature to run the
//! element loops on the rayon pool; results are bit-identical for any thread
//! count.
//!
//! Conventions used throughout:
//!
//! * Strains and stresses are Mandel 6-vectors ordered `(11, 22, 33, 23, 13, 12)`
//!   with shear components carrying a factor `√2`.
//! * Level sets are positive inside their region.
//! * Grid nodes sit at voxel corners, node `(0, 0, 0)` at the origin, indexed
//!   x-fastest. Nodal vector fields are stored node-major, component-minor.
//! * Units are MPa and µm.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod assembly;
pub mod element;
pub mod error;
pub mod geometry;
pub mod greenop;
pub mod homogenize;
pub mod mesh;
pub mod properties;
pub mod solver;
pub mod voigt;

pub use error::{Error, Result};

