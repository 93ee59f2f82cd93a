//! Field transfer between non-matching volume meshes by rescaled, localized
//! radial basis function interpolation with geodesic distance thresholding.

pub mod benchmark;
pub mod cli;
pub mod dist;
pub mod error;
pub mod geodesic;
pub mod geom;
pub mod interp;
pub mod mesh;
pub mod solver;
pub mod spatial;

pub use error::{Error, Result};
pub use geom::Point3;
