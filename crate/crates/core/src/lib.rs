//! Separation of magnetic-susceptibility and chemical-shift/exchange
//! contributions to the MRI resonance frequency shift, from field maps
//! acquired at several main-field orientations.
//!
//! The pipeline, bottom-up:
//!
//! * [`volume`]: grids, volumes, 3D DFT, exact and interpolated rotations, ROI statistics
//! * [`phantom`]: labeled numerical phantoms
//! * [`forward`]: k-space dipole kernel and field simulation
//! * [`echo`]: multi-echo signal synthesis, reference division, frequency fitting
//! * [`separation`]: orthogonal averaging, symmetry completion, per-k least squares
//! * [`inversion`]: dipole inversion (TKD and gradient-regularized CG)
//! * [`studies`]: scripted experiments with machine-readable reports
//! * [`io`]: file formats, run configuration, slice renders

pub mod echo;
pub mod error;
pub mod forward;
pub mod inversion;
pub mod io;
pub mod phantom;
pub mod separation;
pub mod studies;
pub mod volume;

pub use error::{Error, Result};
