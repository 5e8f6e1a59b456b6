//! Fusing 2D detections with depth into world-frame 3D detections.
//!
//! Each detection box gets a single depth: the median over every raw pixel
//! of its (clamped) region of interest, invalid zeros included. Sorting
//! puts the zeros first, so any region that is mostly invalid lands its
//! median on a zero and the box is rejected instead of being given a
//! made-up range. The median is the element at index `n / 2` of the sorted
//! values — one actual sample, never an average of two.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DepthFrame, FrameIterStats, SyncedFrame};
use crate::geometry::{
    back_project, to_world, BBox2D, CameraIntrinsics, Cube, FrameId, Pose6D,
};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Error, PartialEq)]
pub enum Detect3dError {
    #[error("box belongs to frame {bbox} but depth image is frame {depth}")]
    FrameMismatch { bbox: FrameId, depth: FrameId },
}

/// Why a detection box produced no 3D detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectCause {
    /// The box does not cover a single pixel after clamping to the image.
    EmptyRoi,
    /// The median pixel is the invalid-depth sentinel.
    InvalidMedian,
    /// The median depth falls outside the sensor working range.
    OutOfRange,
}

/// Rejection counts, split by cause. Summed across frames for run reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionStats {
    pub empty_roi: usize,
    pub invalid_median: usize,
    pub out_of_range: usize,
}

impl RejectionStats {
    pub fn total(&self) -> usize {
        self.empty_roi + self.invalid_median + self.out_of_range
    }

    pub fn merge(&mut self, other: &RejectionStats) {
        self.empty_roi += other.empty_roi;
        self.invalid_median += other.invalid_median;
        self.out_of_range += other.out_of_range;
    }

    fn count(&mut self, cause: RejectCause) {
        match cause {
            RejectCause::EmptyRoi => self.empty_roi += 1,
            RejectCause::InvalidMedian => self.invalid_median += 1,
            RejectCause::OutOfRange => self.out_of_range += 1,
        }
    }
}

impl std::fmt::Display for RejectionStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} total ({} empty roi, {} invalid median, {} out of range)",
            self.total(),
            self.empty_roi,
            self.invalid_median,
            self.out_of_range
        )
    }
}

/// A detection lifted to 3D, in the world frame, with its 2D source kept
/// around for overlays and debugging.
#[derive(Debug, Clone)]
pub struct Detection3D {
    pub cube: Cube,
    pub class_id: u32,
    pub frame_id: FrameId,
    pub source: BBox2D,
}

// ============================================================================
// ROI median depth
// ============================================================================

/// Integer pixel bounds of a box clamped to the image: `(u0..u1, v0..v1)`.
pub(crate) fn roi_bounds(
    bbox: &BBox2D,
    width: u32,
    height: u32,
) -> Option<(u32, u32, u32, u32)> {
    let u0 = (bbox.u - bbox.du / 2.0).floor().max(0.0) as i64;
    let u1 = ((bbox.u + bbox.du / 2.0).ceil() as i64).min(width as i64);
    let v0 = (bbox.v - bbox.dv / 2.0).floor().max(0.0) as i64;
    let v1 = ((bbox.v + bbox.dv / 2.0).ceil() as i64).min(height as i64);
    if u0 >= u1 || v0 >= v1 {
        return None;
    }
    Some((u0 as u32, u1 as u32, v0 as u32, v1 as u32))
}

fn classify_roi_depth(
    depth: &DepthFrame,
    bbox: &BBox2D,
    intr: &CameraIntrinsics,
) -> Result<f64, RejectCause> {
    let (u0, u1, v0, v1) = roi_bounds(bbox, depth.width, depth.height).ok_or(RejectCause::EmptyRoi)?;
    let mut raw: Vec<u16> = Vec::with_capacity(((u1 - u0) * (v1 - v0)) as usize);
    for row in v0..v1 {
        let offset = row as usize * depth.width as usize;
        raw.extend_from_slice(&depth.values[offset + u0 as usize..offset + u1 as usize]);
    }
    let mid = raw.len() / 2;
    let (_, median, _) = raw.select_nth_unstable(mid);
    let median = *median;
    if median == 0 {
        return Err(RejectCause::InvalidMedian);
    }
    let z = median as f64 * intr.depth_scale;
    if !intr.depth_in_range(z) {
        return Err(RejectCause::OutOfRange);
    }
    Ok(z)
}

/// Median depth in meters over the box's clamped pixel region, or `None`
/// when the box is rejected (empty region, invalid median, out of range).
pub fn roi_median_depth(depth: &DepthFrame, bbox: &BBox2D, intr: &CameraIntrinsics) -> Option<f64> {
    classify_roi_depth(depth, bbox, intr).ok()
}

// ============================================================================
// Detection fusion
// ============================================================================

/// Fuses one box with its frame's depth image and pose. `Ok(None)` means
/// the box was rejected; mismatched frame ids are a caller bug and error.
pub fn make_detection(
    bbox: &BBox2D,
    depth: &DepthFrame,
    intr: &CameraIntrinsics,
    pose: &Pose6D,
) -> Result<Option<Detection3D>, Detect3dError> {
    if bbox.frame_id != depth.frame_id {
        return Err(Detect3dError::FrameMismatch { bbox: bbox.frame_id, depth: depth.frame_id });
    }
    Ok(fuse_one_box(bbox, depth, intr, pose).ok())
}

fn fuse_one_box(
    bbox: &BBox2D,
    depth: &DepthFrame,
    intr: &CameraIntrinsics,
    pose: &Pose6D,
) -> Result<Detection3D, RejectCause> {
    let z = classify_roi_depth(depth, bbox, intr)?;
    // The median passed the range check, so the lift itself cannot fail;
    // treat a disagreement as the range rejection it is.
    let cam_cube = back_project(bbox, z, intr).map_err(|_| RejectCause::OutOfRange)?;
    Ok(Detection3D {
        cube: to_world(&cam_cube, pose),
        class_id: bbox.class_id,
        frame_id: bbox.frame_id,
        source: *bbox,
    })
}

/// Fuses every detection of a synchronized frame, in input order, counting
/// rejected boxes by cause.
pub fn detections_for_frame(
    frame: &SyncedFrame,
    intr: &CameraIntrinsics,
) -> (Vec<Detection3D>, RejectionStats) {
    let mut stats = RejectionStats::default();
    let mut out = Vec::with_capacity(frame.detections.len());
    for bbox in &frame.detections {
        match fuse_one_box(bbox, &frame.depth, intr, &frame.pose) {
            Ok(det) => out.push(det),
            Err(cause) => stats.count(cause),
        }
    }
    (out, stats)
}

/// Per-frame fusion output, emitted in frame order.
#[derive(Debug, Clone)]
pub struct FusedFrame {
    pub frame_id: FrameId,
    pub detections: Vec<Detection3D>,
    pub stats: RejectionStats,
}

fn fuse_synced(frame: &SyncedFrame, intr: &CameraIntrinsics) -> FusedFrame {
    let (detections, stats) = detections_for_frame(frame, intr);
    FusedFrame { frame_id: frame.frame_id, detections, stats }
}

/// Sequential reference fusion over in-memory frames. The parallel path
/// must produce exactly this output.
pub fn fuse_frames_seq(frames: &[SyncedFrame], intr: &CameraIntrinsics) -> Vec<FusedFrame> {
    frames.iter().map(|f| fuse_synced(f, intr)).collect()
}

/// Fuses frames, preserving frame order in the output. Runs on the rayon
/// pool when the `parallel` feature is enabled (frames are independent),
/// falling back to the sequential path otherwise.
pub fn fuse_frames(frames: &[SyncedFrame], intr: &CameraIntrinsics) -> Vec<FusedFrame> {
    #[cfg(feature = "parallel")]
    {
        frames.par_iter().map(|f| fuse_synced(f, intr)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        fuse_frames_seq(frames, intr)
    }
}

/// Streams a dataset frame by frame — depth images are loaded, fused and
/// dropped without ever holding the whole run in memory — and returns the
/// fused frames in pose order plus iteration and rejection totals.
pub fn fuse_dataset(dataset: &Dataset) -> (Vec<FusedFrame>, FrameIterStats, RejectionStats) {
    let intr = &dataset.intrinsics;

    let fuse_pose = |rec: &crate::dataset::PoseRecord| -> Option<FusedFrame> {
        let depth = dataset.depth_frame(rec.frame_id).ok()?;
        let frame = SyncedFrame {
            frame_id: rec.frame_id,
            timestamp: rec.timestamp,
            pose: rec.pose,
            detections: dataset.detections_for(rec.frame_id).to_vec(),
            depth,
        };
        Some(fuse_synced(&frame, intr))
    };

    #[cfg(feature = "parallel")]
    let per_pose: Vec<Option<FusedFrame>> = dataset.poses.par_iter().map(fuse_pose).collect();
    #[cfg(not(feature = "parallel"))]
    let per_pose: Vec<Option<FusedFrame>> = dataset.poses.iter().map(fuse_pose).collect();

    let mut stats = dataset.frames().stats();
    let mut rejections = RejectionStats::default();
    let mut fused = Vec::with_capacity(per_pose.len());
    for item in per_pose {
        match item {
            Some(frame) => {
                stats.yielded += 1;
                rejections.merge(&frame.stats);
                fused.push(frame);
            }
            None => stats.depth_skipped += 1,
        }
    }
    (fused, stats, rejections)
}

// ============================================================================
// Tests
// ============================================================================
