//! Volumetric scene decomposition toolkit.
//!
//! The pipeline turns depth views of stacked objects into a compact parametric
//! scene description: depth images are fused into a truncated signed distance
//! field, a center-voting field is segmented into instances by 3D Hough voting,
//! and each instance is refined into a superquadric by trust-region least
//! squares. A differentiable depth renderer, training-loss kernels and an
//! evaluation suite round out the toolkit.
//!
//! Grids, depth maps, meshes and scenes all have on-disk formats (`VXG1`,
//! `DPT1`/PFM, OBJ, JSON) so external tools — in particular learned predictors
//! that produce TSDFs and vote fields — can plug into any stage.

pub mod diffrender;
pub mod fusion;
pub mod grid;
pub mod hough;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod refine;
pub mod sq;

mod dda;
mod parallel;

pub use grid::{Camera, DepthView, GridSpec, InstanceLabels, TsdfGrid, VectorField};
pub use sq::{Scene, Superquadric};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point ({0}, {1}, {2}) lies outside the interpolation domain")]
    OutOfDomain(f64, f64, f64),
    #[error("format error: {0}")]
    Format(String),
    #[error("grid specs incompatible: {0}")]
    SpecMismatch(String),
    #[error("query point coincides with the superquadric center")]
    DegeneratePoint,
    #[error("scene synthesis failed: {0}")]
    Synthesis(String),
    #[error("no pixel ray observed the grid")]
    EmptyObservation,
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("{0} points are too few to fit a superquadric (need {1})")]
    Underdetermined(usize, usize),
    #[error("no centers supplied for a non-empty occupancy")]
    NoCenters,
    #[error("no valid pixel backprojects into the grid")]
    NoUsablePixels,
    #[error("missing loss component: {0}")]
    MissingComponent(&'static str),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("point set is empty")]
    EmptyPointSet,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
