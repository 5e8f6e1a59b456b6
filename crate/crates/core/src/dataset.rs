//! On-disk dataset format and synchronized frame access.
//!
//! A dataset is a directory with a fixed layout:
//!
//! ```text
//! root/
//!   manifest.json        top-level index (paths, frame count, frame rate)
//!   intrinsics.json      camera model, depth scale and working range
//!   poses.jsonl          one camera pose per frame, strictly increasing ids
//!   detections.jsonl     2D detector output, any number of boxes per frame
//!   depth/000000.pgm     one 16-bit depth image per frame
//!   ground_truth.json    optional list of true fruit states
//! ```
//!
//! Depth images are binary PGM (`P5`), maxval 65535, big-endian samples.
//! Raw value `0` marks an invalid pixel; anything else converts to meters
//! via the `depth_scale` in the intrinsics. Records join across files on
//! the integer `frame_id` — timestamps are carried but never used as keys.
//!
//! All writers in this module go through [`atomic_write`]: content lands
//! under a temporary name in the target directory and is renamed into
//! place, so readers never observe partially written files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write as IoWrite};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox2D, CameraIntrinsics, FrameId, GeometryError, Pose6D};

/// One detector output line; the box itself carries the joining `frame_id`.
pub type DetectionRecord = BBox2D;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing dataset file {path}")]
    Missing { path: PathBuf },
    #[error("{file}:{line}: {msg}")]
    Parse { file: PathBuf, line: usize, msg: String },
    #[error("{file}: {msg}")]
    Invariant { file: PathBuf, msg: String },
    #[error("{path}: not a usable depth image: {msg}")]
    Pgm { path: PathBuf, msg: String },
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

// ============================================================================
// Records
// ============================================================================

/// A single 16-bit depth image. `values` is row-major, `width * height`
/// samples, raw units (multiply by `depth_scale` for meters), `0` invalid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthFrame {
    pub frame_id: FrameId,
    pub width: u32,
    pub height: u32,
    pub values: Vec<u16>,
}

impl DepthFrame {
    /// All-invalid frame of the given size.
    pub fn empty(frame_id: FrameId, width: u32, height: u32) -> Self {
        Self { frame_id, width, height, values: vec![0; width as usize * height as usize] }
    }

    pub fn get(&self, col: u32, row: u32) -> u16 {
        debug_assert!(col < self.width && row < self.height);
        self.values[row as usize * self.width as usize + col as usize]
    }

    pub fn set(&mut self, col: u32, row: u32, value: u16) {
        debug_assert!(col < self.width && row < self.height);
        self.values[row as usize * self.width as usize + col as usize] = value;
    }
}

/// Camera pose for one frame. The timestamp is informational only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseRecord {
    pub frame_id: FrameId,
    pub timestamp: f64,
    pub pose: Pose6D,
}

/// Wire form of [`PoseRecord`]: quaternion as `[qx, qy, qz, qw]`.
#[derive(Debug, Serialize, Deserialize)]
struct RawPose {
    frame_id: FrameId,
    timestamp: f64,
    translation: [f64; 3],
    rotation: [f64; 4],
}

impl Serialize for PoseRecord {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        let q = self.pose.rotation.quaternion();
        RawPose {
            frame_id: self.frame_id,
            timestamp: self.timestamp,
            translation: [self.pose.translation.x, self.pose.translation.y, self.pose.translation.z],
            rotation: [q.i, q.j, q.k, q.w],
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for PoseRecord {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let raw = RawPose::deserialize(de)?;
        let pose = Pose6D::from_raw(raw.translation, raw.rotation)
            .map_err(|e: GeometryError| serde::de::Error::custom(e.to_string()))?;
        Ok(PoseRecord { frame_id: raw.frame_id, timestamp: raw.timestamp, pose })
    }
}

/// True state of one simulated fruit, for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFruit {
    pub id: u64,
    /// World-frame center, meters.
    pub center: [f64; 3],
    /// Fruit diameter, meters.
    pub diameter: f64,
    pub class_id: u32,
    /// Reference weight in grams, when the generator assigned one.
    pub weight: Option<f64>,
}

impl GroundTruthFruit {
    pub fn center_vec(&self) -> nalgebra::Vector3<f64> {
        nalgebra::Vector3::from(self.center)
    }
}

/// Top-level dataset index. Paths are relative to the dataset root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub intrinsics: String,
    pub poses: String,
    pub detections: String,
    pub depth_dir: String,
    pub ground_truth: Option<String>,
    pub frame_count: u64,
    pub frame_rate: f64,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            intrinsics: "intrinsics.json".into(),
            poses: "poses.jsonl".into(),
            detections: "detections.jsonl".into(),
            depth_dir: "depth".into(),
            ground_truth: Some("ground_truth.json".into()),
            frame_count: 0,
            frame_rate: 30.0,
        }
    }
}

// ============================================================================
// Atomic file helpers
// ============================================================================

/// Writes `bytes` to `path` via a temporary file in the same directory plus
/// a rename, so concurrent readers see either the old or the new content,
/// never a torn file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{stem}.tmp.{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| DatasetError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| DatasetError::io(&tmp, e))?;
    f.sync_all().map_err(|e| DatasetError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| DatasetError::io(path, e))
}

/// Serializes one value per line (JSON Lines) and writes atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    let mut out = String::new();
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| DatasetError::Invariant { file: path.to_path_buf(), msg: e.to_string() })?;
        out.push_str(&line);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Reads a JSON Lines file, reporting the 1-based line number on failure.
/// Blank lines are rejected rather than skipped: a blank line in a record
/// stream means something upstream truncated or interleaved writes.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    let mut items = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let parsed = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
            file: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        items.push(parsed);
    }
    Ok(items)
}

/// Reads a whole-file JSON document with path context on failure.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        file: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Pretty-prints a JSON document and writes atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| DatasetError::Invariant { file: path.to_path_buf(), msg: e.to_string() })?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

// ============================================================================
// Depth PGM codec
// ============================================================================

/// Writes a binary `P5` PGM, maxval 65535, big-endian samples. The frame id
/// is kept in a standard `#` comment so the file round-trips losslessly and
/// still opens in ordinary image viewers.
pub fn write_depth_pgm(frame: &DepthFrame, path: &Path) -> Result<(), DatasetError> {
    let mut buf = Vec::with_capacity(frame.values.len() * 2 + 64);
    buf.extend_from_slice(
        format!("P5\n# frame {}\n{} {}\n65535\n", frame.frame_id, frame.width, frame.height)
            .as_bytes(),
    );
    for v in &frame.values {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    atomic_write(path, &buf)
}

/// Reads a depth PGM written by [`write_depth_pgm`]. Also accepts files
/// from other tools as long as they are binary `P5` with maxval 65535;
/// without the frame comment the id defaults to 0.
pub fn read_depth_pgm(path: &Path) -> Result<DepthFrame, DatasetError> {
    let bad = |msg: &str| DatasetError::Pgm { path: path.to_path_buf(), msg: msg.into() };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| DatasetError::io(path, e))?;

    // Header: magic, width, height, maxval as whitespace-separated tokens,
    // with '#' comments running to end of line. A single whitespace byte
    // after maxval separates header from payload.
    let mut pos = 0usize;
    let mut frame_id: FrameId = 0;
    let mut tokens: Vec<String> = Vec::new();
    while tokens.len() < 3 + 1 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(bad("truncated header"));
        }
        if bytes[pos] == b'#' {
            let start = pos;
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            let comment = String::from_utf8_lossy(&bytes[start..pos]);
            if let Some(rest) = comment.strip_prefix("# frame ") {
                frame_id = rest.trim().parse().unwrap_or(0);
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(bad(&format!("expected binary P5, got magic {:?}", tokens[0])));
    }
    let width: u32 = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let height: u32 = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let maxval: u32 = tokens[3].parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 65535 {
        return Err(bad(&format!("maxval must be 65535 for 16-bit depth, got {maxval}")));
    }
    // Exactly one whitespace byte after maxval, then the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing separator after maxval"));
    }
    pos += 1;
    let expected = width as usize * height as usize * 2;
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(bad(&format!("payload is {} bytes, expected {expected}", payload.len())));
    }
    let values = payload
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok(DepthFrame { frame_id, width, height, values })
}

// ============================================================================
// Dataset
// ============================================================================

/// A loaded dataset. Poses, detections and ground truth live in memory;
/// depth images are read from disk on demand so arbitrarily long runs
/// stay cheap, and the read path keeps no mutable state so frames can be
/// fetched from multiple threads at once.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    pub manifest: DatasetManifest,
    pub intrinsics: CameraIntrinsics,
    pub poses: Vec<PoseRecord>,
    detections: BTreeMap<FrameId, Vec<BBox2D>>,
    pub ground_truth: Option<Vec<GroundTruthFruit>>,
    dropped_detections: usize,
}

/// One frame with everything joined on `frame_id`.
#[derive(Debug, Clone)]
pub struct SyncedFrame {
    pub frame_id: FrameId,
    pub timestamp: f64,
    pub pose: Pose6D,
    pub detections: Vec<BBox2D>,
    pub depth: DepthFrame,
}

/// Soft-skip bookkeeping from iterating a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrameIterStats {
    /// Frames actually produced.
    pub yielded: usize,
    /// Frame ids in `0..frame_count` with no pose record.
    pub missing_pose: usize,
    /// Poses whose depth image was absent or unreadable.
    pub depth_skipped: usize,
    /// Detection records whose frame id matches no pose.
    pub dropped_detections: usize,
}

/// Conventional file name of the depth image for a frame.
pub fn depth_file_name(frame_id: FrameId) -> String {
    format!("{frame_id:06}.pgm")
}

/// Loads and validates a dataset directory. Structural problems (missing
/// files, unparseable lines, non-increasing pose ids, boxes outside the
/// image) are hard errors with file and line context; per-frame problems
/// are left to [`Dataset::frames`] to skip and count.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let root = root.as_ref().to_path_buf();
    let manifest_path = root.join("manifest.json");
    if !manifest_path.exists() {
        return Err(DatasetError::Missing { path: manifest_path });
    }
    let manifest: DatasetManifest = read_json(&manifest_path)?;

    let required = [&manifest.intrinsics, &manifest.poses, &manifest.detections, &manifest.depth_dir];
    for rel in required {
        let p = root.join(rel);
        if !p.exists() {
            return Err(DatasetError::Missing { path: p });
        }
    }
    if let Some(gt) = &manifest.ground_truth {
        let p = root.join(gt);
        if !p.exists() {
            return Err(DatasetError::Missing { path: p });
        }
    }

    let intr_path = root.join(&manifest.intrinsics);
    let intrinsics: CameraIntrinsics = read_json(&intr_path)?;
    intrinsics
        .validate()
        .map_err(|e| DatasetError::Invariant { file: intr_path.clone(), msg: e.to_string() })?;

    let poses_path = root.join(&manifest.poses);
    let poses: Vec<PoseRecord> = read_jsonl(&poses_path)?;
    for pair in poses.windows(2) {
        if pair[1].frame_id <= pair[0].frame_id {
            return Err(DatasetError::Invariant {
                file: poses_path.clone(),
                msg: format!(
                    "pose frame ids must be strictly increasing, saw {} then {}",
                    pair[0].frame_id, pair[1].frame_id
                ),
            });
        }
    }

    let det_path = root.join(&manifest.detections);
    let det_records: Vec<DetectionRecord> = read_jsonl(&det_path)?;
    for (idx, det) in det_records.iter().enumerate() {
        det.validate(&intrinsics).map_err(|e| DatasetError::Parse {
            file: det_path.clone(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
    }

    let ground_truth = match &manifest.ground_truth {
        Some(rel) => {
            let gt_path = root.join(rel);
            let fruits: Vec<GroundTruthFruit> = read_json(&gt_path)?;
            for fruit in &fruits {
                if !(fruit.diameter > 0.0) {
                    return Err(DatasetError::Invariant {
                        file: gt_path.clone(),
                        msg: format!("fruit {} has non-positive diameter", fruit.id),
                    });
                }
            }
            Some(fruits)
        }
        None => None,
    };

    // Group detections by frame, dropping (and counting) orphans whose
    // frame id has no pose to join against.
    let pose_ids: std::collections::BTreeSet<FrameId> =
        poses.iter().map(|p| p.frame_id).collect();
    let mut detections: BTreeMap<FrameId, Vec<BBox2D>> = BTreeMap::new();
    let mut dropped = 0usize;
    for det in det_records {
        if pose_ids.contains(&det.frame_id) {
            detections.entry(det.frame_id).or_default().push(det);
        } else {
            dropped += 1;
        }
    }

    Ok(Dataset {
        root,
        manifest,
        intrinsics,
        poses,
        detections,
        ground_truth,
        dropped_detections: dropped,
    })
}

impl Dataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Detections recorded for one frame, empty when none were.
    pub fn detections_for(&self, frame_id: FrameId) -> &[BBox2D] {
        self.detections.get(&frame_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Reads the depth image for a frame from disk. Checks the image size
    /// against the intrinsics; the requested frame id is authoritative
    /// over whatever the file header says.
    pub fn depth_frame(&self, frame_id: FrameId) -> Result<DepthFrame, DatasetError> {
        let path = self.root.join(&self.manifest.depth_dir).join(depth_file_name(frame_id));
        let mut frame = read_depth_pgm(&path)?;
        if frame.width != self.intrinsics.width || frame.height != self.intrinsics.height {
            return Err(DatasetError::Pgm {
                path,
                msg: format!(
                    "image is {}x{} but intrinsics say {}x{}",
                    frame.width, frame.height, self.intrinsics.width, self.intrinsics.height
                ),
            });
        }
        frame.frame_id = frame_id;
        Ok(frame)
    }

    /// Iterates synchronized frames in pose order. Frames whose depth
    /// image is missing or unreadable are skipped and counted rather than
    /// failing the run; inspect [`FrameIter::stats`] when done.
    pub fn frames(&self) -> FrameIter<'_> {
        let missing_pose = (self.manifest.frame_count as usize).saturating_sub(
            self.poses
                .iter()
                .filter(|p| (0..self.manifest.frame_count as FrameId).contains(&p.frame_id))
                .count(),
        );
        FrameIter {
            dataset: self,
            next: 0,
            stats: FrameIterStats {
                missing_pose,
                dropped_detections: self.dropped_detections,
                ..FrameIterStats::default()
            },
        }
    }

    /// Collects every synchronized frame into memory. Convenient for small
    /// runs and tests; long runs should prefer streaming via [`Self::frames`].
    pub fn load_frames(&self) -> (Vec<SyncedFrame>, FrameIterStats) {
        let mut iter = self.frames();
        let mut frames = Vec::with_capacity(self.poses.len());
        for frame in &mut iter {
            frames.push(frame);
        }
        let stats = iter.stats();
        (frames, stats)
    }
}

/// See [`Dataset::frames`].
pub struct FrameIter<'a> {
    dataset: &'a Dataset,
    next: usize,
    stats: FrameIterStats,
}

impl FrameIter<'_> {
    pub fn stats(&self) -> FrameIterStats {
        self.stats
    }
}

impl Iterator for FrameIter<'_> {
    type Item = SyncedFrame;

    fn next(&mut self) -> Option<SyncedFrame> {
        while self.next < self.dataset.poses.len() {
            let rec = self.dataset.poses[self.next];
            self.next += 1;
            match self.dataset.depth_frame(rec.frame_id) {
                Ok(depth) => {
                    self.stats.yielded += 1;
                    return Some(SyncedFrame {
                        frame_id: rec.frame_id,
                        timestamp: rec.timestamp,
                        pose: rec.pose,
                        detections: self.dataset.detections_for(rec.frame_id).to_vec(),
                        depth,
                    });
                }
                Err(_) => {
                    self.stats.depth_skipped += 1;
                }
            }
        }
        None
    }
}

impl fmt::Display for FrameIterStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} frames ({} pose gaps, {} depth skips, {} orphan detections)",
            self.yielded, self.missing_pose, self.depth_skipped, self.dropped_detections
        )
    }
}

// ============================================================================
// Tests
// ============================================================================
