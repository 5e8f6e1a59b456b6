//! Scoring a run against ground truth, plus human-facing diagnostics.
//!
//! Three consumers share this module:
//!
//! * `match_to_ground_truth` + `compute_metrics` — the quantitative verdict:
//!   greedy one-to-one assignment of reliable tracks to true fruits inside a
//!   match radius, then counting/weight/localization scores. Unmatched
//!   reliable tracks are exactly the duplicates that inflate counts, so
//!   they get first-class billing in the metrics.
//! * `frame_sample_report` — a spot-check table: every N seconds, how many
//!   true fruits sit in the counting window versus how many tracks project
//!   there. Useful for eyeballing drift without full ground truth math.
//! * `overlay_records` / `export_overlay` — re-projection of final tracks
//!   into each frame for visual inspection, as JSONL and optionally as PPM
//!   rasters over the depth image.
//!
//! Matching is deterministic: candidate pairs are ordered by (distance,
//! track id, fruit id) with total ordering on the floats, so ties never
//! depend on iteration order.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{self, DatasetError, GroundTruthFruit, PoseRecord, SyncedFrame};
use crate::geometry::{CameraIntrinsics, FrameId, Pose6D};
use crate::tracker::{TrackId, TrackRecord};
use crate::yield_est::YieldReport;

/// Default assignment radius: a track farther than this from every true
/// fruit counts as a phantom.
pub const DEFAULT_MATCH_RADIUS: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{0} requires ground truth, but the dataset has none")]
    MissingGroundTruth(&'static str),
    #[error("sampling interval must be positive, got {0}")]
    BadInterval(f64),
    #[error("frame rate must be positive, got {0}")]
    BadFrameRate(f64),
}

/// One matched (track, fruit) pair and their center distance in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub track_id: TrackId,
    pub fruit_id: u64,
    pub distance: f64,
}

/// Outcome of one-to-one assignment between tracks and true fruits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    /// Tracks with no fruit inside the radius — duplicates or phantoms.
    pub unmatched_tracks: Vec<TrackId>,
    /// True fruits no track landed on — misses.
    pub unmatched_fruits: Vec<u64>,
    /// The radius the assignment was cut off at, meters.
    pub radius: f64,
}

fn center_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Greedily assign each track to the nearest unclaimed fruit within
/// `radius`. Global nearest-first order; ties break on lower track id, then
/// lower fruit id.
pub fn match_to_ground_truth(
    tracks: &[TrackRecord],
    fruits: &[GroundTruthFruit],
    radius: f64,
) -> MatchResult {
    let mut edges: Vec<(f64, TrackId, u64)> = Vec::new();
    for t in tracks {
        for f in fruits {
            let d = center_dist(&t.center, &f.center);
            if d <= radius {
                edges.push((d, t.id, f.id));
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut used_tracks: BTreeSet<TrackId> = BTreeSet::new();
    let mut used_fruits: BTreeSet<u64> = BTreeSet::new();
    let mut pairs = Vec::new();
    for (distance, track_id, fruit_id) in edges {
        if used_tracks.contains(&track_id) || used_fruits.contains(&fruit_id) {
            continue;
        }
        used_tracks.insert(track_id);
        used_fruits.insert(fruit_id);
        pairs.push(MatchPair { track_id, fruit_id, distance });
    }
    let unmatched_tracks =
        tracks.iter().map(|t| t.id).filter(|id| !used_tracks.contains(id)).collect();
    let unmatched_fruits =
        fruits.iter().map(|f| f.id).filter(|id| !used_fruits.contains(id)).collect();
    MatchResult { pairs, unmatched_tracks, unmatched_fruits, radius }
}

/// Quantitative comparison of an estimate against ground truth. Ratio
/// fields are `None` whenever their denominator is empty or zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub estimated_count: usize,
    pub true_count: usize,
    /// `|est - true| / true`.
    pub count_error: Option<f64>,
    /// `1 - count_error`.
    pub counting_accuracy: Option<f64>,
    pub estimated_weight_g: f64,
    /// Sum of ground-truth weights, when every fruit carries one.
    pub true_weight_g: Option<f64>,
    /// `|est - true| / true` on total weight.
    pub total_weight_error: Option<f64>,
    /// `|avg_est - avg_true| / avg_true` on per-fruit average weight.
    pub avg_weight_error: Option<f64>,
    /// Matched tracks / all tracks offered to the matcher.
    pub precision: Option<f64>,
    /// Matched fruits / all true fruits.
    pub recall: Option<f64>,
    /// Mean center distance over matched pairs, meters.
    pub mean_center_error_m: Option<f64>,
    /// Reliable tracks that matched no fruit.
    pub duplicate_track_count: usize,
}

/// Format a ratio as a one-decimal percentage, e.g. `0.05618 -> "5.6"`.
pub fn percent(ratio: f64) -> String {
    format!("{:.1}", ratio * 100.0)
}

/// Relative count error and its complement, the counting accuracy.
/// `None` when there is nothing to count against.
pub fn count_error(estimated: f64, true_count: f64) -> Option<f64> {
    (true_count > 0.0).then(|| (estimated - true_count).abs() / true_count)
}

pub fn compute_metrics(
    report: &YieldReport,
    fruits: &[GroundTruthFruit],
    matching: &MatchResult,
) -> Metrics {
    let true_count = fruits.len();
    let err = count_error(report.count as f64, true_count as f64);

    let true_weight_g: Option<f64> = if fruits.is_empty() {
        None
    } else {
        fruits.iter().map(|f| f.weight).sum()
    };
    let total_weight_error = true_weight_g
        .filter(|&w| w > 0.0)
        .map(|w| (report.total_weight_g - w).abs() / w);
    let avg_true_weight = true_weight_g.map(|w| w / true_count as f64);
    let avg_weight_error = match (report.average_weight_g, avg_true_weight) {
        (Some(est), Some(truth)) if truth > 0.0 => Some((est - truth).abs() / truth),
        _ => None,
    };

    let offered = matching.pairs.len() + matching.unmatched_tracks.len();
    let precision = (offered > 0).then(|| matching.pairs.len() as f64 / offered as f64);
    let recall = (true_count > 0).then(|| matching.pairs.len() as f64 / true_count as f64);
    let mean_center_error_m = (!matching.pairs.is_empty()).then(|| {
        matching.pairs.iter().map(|p| p.distance).sum::<f64>() / matching.pairs.len() as f64
    });

    Metrics {
        estimated_count: report.count,
        true_count,
        count_error: err,
        counting_accuracy: err.map(|e| 1.0 - e),
        estimated_weight_g: report.total_weight_g,
        true_weight_g,
        total_weight_error,
        avg_weight_error,
        precision,
        recall,
        mean_center_error_m,
        duplicate_track_count: matching.unmatched_tracks.len(),
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "count: estimated {} vs true {}", self.estimated_count, self.true_count)?;
        match (self.count_error, self.counting_accuracy) {
            (Some(e), Some(a)) => {
                writeln!(f, "  count error {}%, counting accuracy {}%", percent(e), percent(a))?
            }
            _ => writeln!(f, "  count error n/a (no ground truth)")?,
        }
        writeln!(f, "weight: estimated {:.1} g total", self.estimated_weight_g)?;
        if let (Some(w), Some(e)) = (self.true_weight_g, self.total_weight_error) {
            writeln!(f, "  true {:.1} g, total weight error {}%", w, percent(e))?;
        }
        if let Some(e) = self.avg_weight_error {
            writeln!(f, "  average weight error {}%", percent(e))?;
        }
        if let (Some(p), Some(r)) = (self.precision, self.recall) {
            writeln!(f, "precision {}%, recall {}%", percent(p), percent(r))?;
        }
        if let Some(c) = self.mean_center_error_m {
            writeln!(f, "mean center error {:.1} mm", c * 1000.0)?;
        }
        write!(f, "duplicate tracks: {}", self.duplicate_track_count)
    }
}

/// True when a world point falls in the counting window of this frame: in
/// front of the camera inside the working depth range, projecting into the
/// leading half of the image (full height). Half-width keeps each fruit's
/// appearances from being double-counted at both image edges.
fn in_counting_window(p_world: &[f64; 3], pose: &Pose6D, intr: &CameraIntrinsics) -> bool {
    let p_cam = pose.to_camera_point(&nalgebra::Vector3::from(*p_world));
    if !(p_cam.z > intr.min_depth && p_cam.z <= intr.max_depth) {
        return false;
    }
    let u = intr.fx * p_cam.x / p_cam.z + intr.cx;
    let v = intr.fy * p_cam.y / p_cam.z + intr.cy;
    u >= 0.0 && u < intr.width as f64 / 2.0 && v >= 0.0 && v < intr.height as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSampleRow {
    pub frame_id: FrameId,
    pub timestamp: f64,
    /// True fruits inside the counting window.
    pub gt_visible: usize,
    /// Track estimates inside the counting window.
    pub tracks_visible: usize,
}

/// Spot-check table produced by [`frame_sample_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSampleReport {
    pub rows: Vec<FrameSampleRow>,
    pub total_gt: usize,
    pub total_tracks: usize,
}

impl FrameSampleReport {
    /// Tracks-to-truth ratio over all sampled windows; 1.0 is ideal.
    pub fn ratio(&self) -> Option<f64> {
        (self.total_gt > 0).then(|| self.total_tracks as f64 / self.total_gt as f64)
    }
}

/// Sample one frame every `interval_s` seconds and compare how many true
/// fruits versus track estimates sit in its counting window.
pub fn frame_sample_report(
    poses: &[PoseRecord],
    fruits: &[GroundTruthFruit],
    tracks: &[TrackRecord],
    intr: &CameraIntrinsics,
    frame_rate: f64,
    interval_s: f64,
) -> Result<FrameSampleReport, EvalError> {
    if !(interval_s > 0.0) {
        return Err(EvalError::BadInterval(interval_s));
    }
    if !(frame_rate > 0.0) {
        return Err(EvalError::BadFrameRate(frame_rate));
    }
    let step = ((interval_s * frame_rate).round() as usize).max(1);
    let mut rows = Vec::new();
    let mut total_gt = 0;
    let mut total_tracks = 0;
    for rec in poses.iter().step_by(step) {
        let gt_visible =
            fruits.iter().filter(|f| in_counting_window(&f.center, &rec.pose, intr)).count();
        let tracks_visible =
            tracks.iter().filter(|t| in_counting_window(&t.center, &rec.pose, intr)).count();
        total_gt += gt_visible;
        total_tracks += tracks_visible;
        rows.push(FrameSampleRow {
            frame_id: rec.frame_id,
            timestamp: rec.timestamp,
            gt_visible,
            tracks_visible,
        });
    }
    Ok(FrameSampleReport { rows, total_gt, total_tracks })
}

impl fmt::Display for FrameSampleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8} {:>10} {:>6} {:>7}", "frame", "time_s", "truth", "tracks")?;
        for row in &self.rows {
            writeln!(
                f,
                "{:>8} {:>10.3} {:>6} {:>7}",
                row.frame_id, row.timestamp, row.gt_visible, row.tracks_visible
            )?;
        }
        match self.ratio() {
            Some(r) => write!(
                f,
                "totals: truth {}, tracks {} (ratio {:.2})",
                self.total_gt, self.total_tracks, r
            ),
            None => write!(f, "totals: truth 0, tracks {}", self.total_tracks),
        }
    }
}

/// One track re-projected into one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayRecord {
    pub frame_id: FrameId,
    pub track_id: TrackId,
    /// Box center, pixels.
    pub u: f64,
    pub v: f64,
    /// Box extents, pixels, from the track's world extents at its depth.
    pub du: f64,
    pub dv: f64,
    pub class_id: u32,
}

/// Project every track into every frame; keep only projections whose center
/// lands inside the image and inside the working depth range.
pub fn overlay_records(
    frames: &[SyncedFrame],
    tracks: &[TrackRecord],
    intr: &CameraIntrinsics,
) -> Vec<OverlayRecord> {
    let mut records = Vec::new();
    for frame in frames {
        for t in tracks {
            let p_cam = frame.pose.to_camera_point(&nalgebra::Vector3::from(t.center));
            let z = p_cam.z;
            if !(z > intr.min_depth && z <= intr.max_depth) {
                continue;
            }
            let u = intr.fx * p_cam.x / z + intr.cx;
            let v = intr.fy * p_cam.y / z + intr.cy;
            if !(u >= 0.0 && u < intr.width as f64 && v >= 0.0 && v < intr.height as f64) {
                continue;
            }
            records.push(OverlayRecord {
                frame_id: frame.frame_id,
                track_id: t.id,
                u,
                v,
                du: t.extents[0] * intr.fx / z,
                dv: t.extents[1] * intr.fy / z,
                class_id: t.class_id,
            });
        }
    }
    records
}

/// What [`export_overlay`] wrote.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverlayStats {
    pub records: usize,
    pub frames: usize,
    pub rasters: usize,
}

/// Depth value to display gray: zero stays black, valid range maps to
/// 40..=255 so faint returns stay visible.
fn depth_to_gray(units: u16, max_units: u16) -> u8 {
    if units == 0 || max_units == 0 {
        return 0;
    }
    let t = units.min(max_units) as f64 / max_units as f64;
    (40.0 + t * 215.0) as u8
}

fn draw_box_outline(rgb: &mut [u8], width: u32, height: u32, rec: &OverlayRecord) {
    let u0 = (rec.u - rec.du / 2.0).floor().max(0.0) as i64;
    let v0 = (rec.v - rec.dv / 2.0).floor().max(0.0) as i64;
    let u1 = ((rec.u + rec.du / 2.0).ceil() as i64).min(width as i64 - 1);
    let v1 = ((rec.v + rec.dv / 2.0).ceil() as i64).min(height as i64 - 1);
    if u0 > u1 || v0 > v1 {
        return;
    }
    let mut put = |u: i64, v: i64| {
        let i = (v as usize * width as usize + u as usize) * 3;
        rgb[i] = 255;
        rgb[i + 1] = 64;
        rgb[i + 2] = 64;
    };
    for u in u0..=u1 {
        put(u, v0);
        put(u, v1);
    }
    for v in v0..=v1 {
        put(u0, v);
        put(u1, v);
    }
}

/// Write `overlay.jsonl` (all records) into `out_dir`, plus — when `raster`
/// is set — one `overlay_XXXXXX.ppm` per frame showing the depth image with
/// track boxes outlined.
pub fn export_overlay(
    frames: &[SyncedFrame],
    tracks: &[TrackRecord],
    intr: &CameraIntrinsics,
    out_dir: &Path,
    raster: bool,
) -> Result<OverlayStats, DatasetError> {
    std::fs::create_dir_all(out_dir).map_err(|e| DatasetError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let records = overlay_records(frames, tracks, intr);
    dataset::write_jsonl(&out_dir.join("overlay.jsonl"), &records)?;

    let mut rasters = 0;
    if raster {
        let max_units = ((intr.max_depth / intr.depth_scale).floor() as i64)
            .clamp(1, u16::MAX as i64) as u16;
        for frame in frames {
            let (w, h) = (intr.width, intr.height);
            let mut rgb = vec![0u8; w as usize * h as usize * 3];
            for (i, &units) in frame.depth.values.iter().enumerate() {
                let g = depth_to_gray(units, max_units);
                rgb[i * 3] = g;
                rgb[i * 3 + 1] = g;
                rgb[i * 3 + 2] = g;
            }
            for rec in records.iter().filter(|r| r.frame_id == frame.frame_id) {
                draw_box_outline(&mut rgb, w, h, rec);
            }
            let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
            bytes.extend_from_slice(&rgb);
            let path = out_dir.join(format!("overlay_{:06}.ppm", frame.frame_id));
            dataset::atomic_write(&path, &bytes)?;
            rasters += 1;
        }
    }
    Ok(OverlayStats { records: records.len(), frames: frames.len(), rasters })
}
