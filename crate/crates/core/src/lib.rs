//! Batch estimation of fruit count and weight from a sideways-looking
//! depth camera driven along a crop row.
//!
//! The input is a recorded dataset: per-frame 2D detector boxes, 16-bit
//! depth images, and camera poses. The output is a set of world-frame 3D
//! tracks of stationary fruits and a yield report (count plus per-fruit
//! weight from a height-to-weight model). A seeded simulator generates
//! synthetic datasets with exact ground truth so every stage can be
//! verified end to end, and the eval module scores runs against that
//! truth.
//!
//! Data flows one way through the modules:
//!
//! ```text
//! dataset ──> detect3d ──> tracker ──> yield_est
//!    ▲            (depth fusion)  (association)  (count + weight)
//!    │
//! simulator (synthetic scenes)          eval (scoring, overlays)
//! ```
//!
//! `geometry` carries the shared camera model and frame conventions;
//! `pipeline` glues the stages together behind one config. Heavy per-frame
//! work (rendering, depth fusion) runs data-parallel under the `parallel`
//! feature (on by default) with sequential fallbacks that produce identical
//! results.

pub mod dataset;
pub mod detect3d;
pub mod eval;
pub mod geometry;
pub mod pipeline;
pub mod simulator;
pub mod tracker;
pub mod yield_est;

pub use geometry::{BBox2D, CameraIntrinsics, Cube, CubeFrame, FrameId, Pose6D};
pub use pipeline::{run_on_dataset, run_on_frames, PipelineConfig, PipelineOutput};
pub use tracker::{TrackRecord, TrackStore, TrackerConfig};
pub use yield_est::{estimate_yield, WeightModel, YieldConfig, YieldReport};
