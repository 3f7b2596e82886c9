//! Aberration estimation for 3D fluorescence microscopy.
//!
//! Zernike wavefronts, scalar PSF synthesis, a phantom-based training data
//! generator, a small 3D CNN regressor trained from scratch, and
//! Richardson–Lucy restoration with the predicted PSF.

pub mod error;
pub mod estimator;
pub mod fft;
pub mod generator;
pub mod imageio;
pub mod optics;
pub mod phantom;
pub mod restore;
pub mod volume;
pub mod zernike;

pub use error::{Error, ErrorKind, Result};
pub use volume::{Volume, VoxelSize};
pub use zernike::{AmplitudeVector, ModeIndex, Scheme};
