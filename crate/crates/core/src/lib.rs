//! Surface segmentation on terrain-like patches.
//!
//! A closed genus-0 pre-segmentation mesh is mapped to the unit sphere,
//! remeshed with a cube-sphere quad grid and unfolded into six patches of
//! image columns sampled along the surface normals. The boundary surface is
//! then recovered column by column with mean-field inference on a surface
//! CRF whose label set is the position along each column.
//!
//! Module map:
//!
//! * [`volume`]: scalar volumes, `.svol` I/O, interpolation, phantoms.
//! * [`mesh`]: triangle meshes, validation, normals, smoothing, harmonic
//!   sphere maps.
//! * [`quadsphere`]: cube-sphere quad parameterization and remeshing.
//! * [`patches`]: column sampling, ground truth and back-projection.
//! * [`crf`]: unary providers, kernels, compatibility, mean-field inference.
//! * [`train`]: losses, reverse-mode gradients through inference, fitting.
//! * [`eval`]: voxelization and DSC / HD / ASD metrics.
//! * [`pipeline`]: run configuration and the end-to-end stages.

pub mod crf;
pub mod error;
pub mod eval;
pub mod geom;
pub mod mesh;
pub mod patches;
pub mod pipeline;
pub mod quadsphere;
pub mod ray;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use geom::Vec3;
