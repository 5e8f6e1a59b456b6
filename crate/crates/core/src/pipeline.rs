//! End-to-end orchestration: synced frames in, counted-and-weighed fruit
//! out.
//!
//! The stages are deliberately thin wrappers around the per-module APIs —
//! fuse boxes with depth, feed the tracker in frame order, filter and weigh
//! the survivors — so a caller can swap any stage without touching the
//! others. Fusion fans out across threads when the `parallel` feature is
//! on; tracking is inherently sequential and stays so.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetError, FrameIterStats, SyncedFrame};
use crate::detect3d::{self, RejectionStats};
use crate::geometry::CameraIntrinsics;
use crate::simulator::{NoiseSpec, SceneSpec, TrajectorySpec};
use crate::tracker::{FrameSummary, TrackRecord, TrackStore, TrackerConfig, TrackerError};
use crate::yield_est::{estimate_yield, YieldConfig, YieldError, YieldReport};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Yield(#[from] YieldError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Everything a run produces besides side-effect artifacts.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Every track the tracker ever created, reliable or not.
    pub all_tracks: Vec<TrackRecord>,
    /// Tracks that cleared the association threshold — the counting input.
    pub reliable_tracks: Vec<TrackRecord>,
    /// Count and weight over the filtered reliable tracks.
    pub report: YieldReport,
    /// Per-frame association history.
    pub frame_summaries: Vec<FrameSummary>,
    /// Why 2D boxes failed to become 3D detections.
    pub rejections: RejectionStats,
}

/// Run fusion, tracking, and yield estimation over in-memory frames.
/// Frames must be in ascending frame order (dataset iteration order).
pub fn run_on_frames(
    frames: &[SyncedFrame],
    intr: &CameraIntrinsics,
    tracker_cfg: &TrackerConfig,
    yield_cfg: &YieldConfig,
) -> Result<PipelineOutput, PipelineError> {
    yield_cfg.validate()?;
    let fused = detect3d::fuse_frames(frames, intr);
    let mut store = TrackStore::new(tracker_cfg.clone())?;
    let mut rejections = RejectionStats::default();
    for frame in &fused {
        rejections.merge(&frame.stats);
        store.process_frame(frame.frame_id, &frame.detections)?;
    }
    finish(store, yield_cfg, rejections)
}

/// Same pipeline, reading frames from an on-disk dataset. Returns the
/// iteration stats so callers can report skipped/missing frames.
pub fn run_on_dataset(
    dataset: &Dataset,
    tracker_cfg: &TrackerConfig,
    yield_cfg: &YieldConfig,
) -> Result<(PipelineOutput, FrameIterStats), PipelineError> {
    yield_cfg.validate()?;
    let (fused, iter_stats, rejections) = detect3d::fuse_dataset(dataset);
    let mut store = TrackStore::new(tracker_cfg.clone())?;
    for frame in &fused {
        store.process_frame(frame.frame_id, &frame.detections)?;
    }
    let output = finish(store, yield_cfg, rejections)?;
    Ok((output, iter_stats))
}

fn finish(
    store: TrackStore,
    yield_cfg: &YieldConfig,
    rejections: RejectionStats,
) -> Result<PipelineOutput, PipelineError> {
    let all_tracks: Vec<TrackRecord> = store.tracks().iter().map(|t| t.to_record()).collect();
    let reliable_tracks: Vec<TrackRecord> =
        store.reliable_tracks().iter().map(|t| t.to_record()).collect();
    let report = estimate_yield(&reliable_tracks, yield_cfg);
    Ok(PipelineOutput {
        all_tracks,
        reliable_tracks,
        report,
        frame_summaries: store.history().to_vec(),
        rejections,
    })
}

/// One config file for the whole system. Every section is optional and
/// falls back to its documented default; unknown keys — top-level or
/// inside any section — are rejected so typos fail loudly instead of
/// silently running defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed for scene generation and rendering.
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub noise: NoiseSpec,
    pub tracker: TrackerConfig,
    #[serde(rename = "yield")]
    pub yield_config: YieldConfig,
}

impl PipelineConfig {
    /// Check every section that has static invariants. Simulation specs
    /// are validated by the simulator entry points; this covers the rest
    /// plus cheap early rejection for CLI use.
    pub fn validate(&self) -> Result<(), String> {
        self.intrinsics.validate().map_err(|e| e.to_string())?;
        self.scene.validate().map_err(|e| e.to_string())?;
        self.trajectory.validate().map_err(|e| e.to_string())?;
        self.noise.validate().map_err(|e| e.to_string())?;
        self.tracker.validate().map_err(|e| e.to_string())?;
        self.yield_config.validate().map_err(|e| e.to_string())?;
        Ok(())
    }
}
