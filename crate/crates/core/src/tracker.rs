//! Tracking-by-detection for stationary targets.
//!
//! Targets do not move, so there is no motion model: a detection within
//! `dist_max` of a track's center is the same object seen again. Matching
//! for a frame runs against a snapshot of track centers taken at frame
//! start — updates applied while processing the frame never influence the
//! gating of later detections in that frame, and tracks created from this
//! frame's unmatched detections only become candidates next frame.
//!
//! Tracks are never deleted and ids are never reused. A track is trusted
//! ("reliable") once it has accumulated `min_associations` detections;
//! everything below that is kept but treated as unconfirmed clutter.
//!
//! Detection order within a frame matters when gates overlap: updates are
//! applied sequentially in ascending detection index, so feeding the same
//! detections in a different order can produce a different final center.
//! That is an accepted property of the scheme, not a bug — see the
//! `detection_order_shifts_center_when_gates_overlap` test.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect3d::Detection3D;
use crate::geometry::{Cube, CubeFrame, FrameId};

pub type TrackId = u64;

#[derive(Debug, Error, PartialEq)]
pub enum TrackerError {
    #[error("frames must advance: last processed {last}, got {got}")]
    OutOfOrder { last: FrameId, got: FrameId },
    #[error("detection {index} belongs to frame {got}, processing frame {expected}")]
    MixedFrame { expected: FrameId, got: FrameId, index: usize },
    #[error("detection {index} is not in the world frame")]
    NotWorldFrame { index: usize },
    #[error("bad tracker config: {0}")]
    BadConfig(String),
}

/// Association and update parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Largest center distance (meters) that still associates a detection
    /// with an existing track.
    pub dist_max: f64,
    /// Blend weight pulling a matched track's center toward the detection.
    pub w_p: f64,
    /// Blend weight pulling a matched track's extents toward the detection.
    pub w_v: f64,
    /// Detections a track needs before it counts as reliable.
    pub min_associations: u32,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { dist_max: 0.04, w_p: 0.7, w_v: 0.7, min_associations: 3 }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        if !(self.dist_max > 0.0) {
            return Err(TrackerError::BadConfig(format!("dist_max must be positive, got {}", self.dist_max)));
        }
        for (name, w) in [("w_p", self.w_p), ("w_v", self.w_v)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(TrackerError::BadConfig(format!("{name} must be in [0, 1], got {w}")));
            }
        }
        if self.min_associations == 0 {
            return Err(TrackerError::BadConfig("min_associations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-class association bookkeeping: how often and how recently a class
/// was seen on this track.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct ClassObs {
    count: u32,
    last_seq: u32,
}

/// One tracked object.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: TrackId,
    /// Current world-frame state estimate.
    pub cube: Cube,
    /// Total detections associated, the creation one included.
    pub n_assoc: u32,
    pub created_frame: FrameId,
    pub last_matched_frame: FrameId,
    class_obs: BTreeMap<u32, ClassObs>,
    seq: u32,
}

impl Track {
    fn new(id: TrackId, det: &Detection3D, frame_id: FrameId) -> Self {
        let mut class_obs = BTreeMap::new();
        class_obs.insert(det.class_id, ClassObs { count: 1, last_seq: 1 });
        Self {
            id,
            cube: det.cube,
            n_assoc: 1,
            created_frame: frame_id,
            last_matched_frame: frame_id,
            class_obs,
            seq: 1,
        }
    }

    fn absorb(&mut self, det: &Detection3D, w_p: f64, w_v: f64, frame_id: FrameId) {
        // Incremental blend form: identical detections leave the state
        // bit-for-bit unchanged, so a perfectly observed stationary target
        // is an exact fixed point.
        self.cube.center += w_p * (det.cube.center - self.cube.center);
        self.cube.w += w_v * (det.cube.w - self.cube.w);
        self.cube.h += w_v * (det.cube.h - self.cube.h);
        self.cube.l += w_v * (det.cube.l - self.cube.l);
        self.n_assoc += 1;
        self.seq += 1;
        let obs = self.class_obs.entry(det.class_id).or_default();
        obs.count += 1;
        obs.last_seq = self.seq;
        self.last_matched_frame = frame_id;
    }

    /// Majority class over all associations; a count tie goes to the class
    /// seen most recently.
    pub fn class_id(&self) -> u32 {
        self.class_obs
            .iter()
            .max_by_key(|(_, obs)| (obs.count, obs.last_seq))
            .map(|(&class, _)| class)
            .expect("a track always has at least one class observation")
    }

    pub fn to_record(&self) -> TrackRecord {
        TrackRecord {
            id: self.id,
            center: [self.cube.center.x, self.cube.center.y, self.cube.center.z],
            extents: [self.cube.w, self.cube.h, self.cube.l],
            class_id: self.class_id(),
            n_assoc: self.n_assoc,
            created_frame: self.created_frame,
            last_matched_frame: self.last_matched_frame,
        }
    }
}

/// Flat on-disk form of a track (one line of `tracks.jsonl`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub id: TrackId,
    /// World-frame center `[x, y, z]`, meters.
    pub center: [f64; 3],
    /// Extents `[w, h, l]`, meters.
    pub extents: [f64; 3],
    pub class_id: u32,
    pub n_assoc: u32,
    pub created_frame: FrameId,
    pub last_matched_frame: FrameId,
}

impl TrackRecord {
    pub fn cube(&self) -> Cube {
        Cube::new(
            nalgebra::Vector3::from(self.center),
            self.extents[0],
            self.extents[1],
            self.extents[2],
            CubeFrame::World,
        )
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.extents.iter().any(|e| !(*e > 0.0)) {
            return Err(format!("track {} has non-positive extents", self.id));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(format!("track {} has non-finite center", self.id));
        }
        Ok(())
    }
}

/// What happened to each detection of one processed frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameReport {
    pub frame_id: FrameId,
    /// `(detection index, track id)` for every association made.
    pub matches: Vec<(usize, TrackId)>,
    /// Tracks created from unmatched detections, in detection order.
    pub created: Vec<TrackId>,
}

/// Compact per-frame history row kept by the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub frame_id: FrameId,
    pub detections: usize,
    pub matched: usize,
    pub created: usize,
}

/// All tracks plus processing history. Feed frames in ascending order
/// through [`TrackStore::process_frame`] from a single thread; reads can
/// happen freely between frames.
#[derive(Debug)]
pub struct TrackStore {
    config: TrackerConfig,
    tracks: Vec<Track>,
    next_id: TrackId,
    history: Vec<FrameSummary>,
    last_frame: Option<FrameId>,
}

impl TrackStore {
    pub fn new(config: TrackerConfig) -> Result<Self, TrackerError> {
        config.validate()?;
        Ok(Self { config, tracks: Vec::new(), next_id: 0, history: Vec::new(), last_frame: None })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    /// All tracks ever created, in id order.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn history(&self) -> &[FrameSummary] {
        &self.history
    }

    /// Tracks with at least `min_associations` detections, in id order.
    pub fn reliable_tracks(&self) -> Vec<&Track> {
        self.tracks.iter().filter(|t| t.n_assoc >= self.config.min_associations).collect()
    }

    /// Associates and applies one frame of world-frame detections.
    ///
    /// Gating runs detection by detection, in input order, against the
    /// frame-start snapshot of track centers; the nearest track within
    /// `dist_max` wins, an exact distance tie going to the lower track id.
    /// Several detections may land on the same track — each applies its
    /// own update, sequentially.
    pub fn process_frame(
        &mut self,
        frame_id: FrameId,
        detections: &[Detection3D],
    ) -> Result<FrameReport, TrackerError> {
        if let Some(last) = self.last_frame {
            if frame_id <= last {
                return Err(TrackerError::OutOfOrder { last, got: frame_id });
            }
        }
        for (index, det) in detections.iter().enumerate() {
            if det.frame_id != frame_id {
                return Err(TrackerError::MixedFrame { expected: frame_id, got: det.frame_id, index });
            }
            if det.cube.frame != CubeFrame::World {
                return Err(TrackerError::NotWorldFrame { index });
            }
        }

        let snapshot: Vec<nalgebra::Vector3<f64>> =
            self.tracks.iter().map(|t| t.cube.center).collect();

        let mut matches = Vec::new();
        let mut created = Vec::new();
        for (index, det) in detections.iter().enumerate() {
            let mut best: Option<(f64, usize)> = None;
            for (ti, center) in snapshot.iter().enumerate() {
                let d = (det.cube.center - center).norm();
                if d <= self.config.dist_max {
                    // Strict < keeps the first (lowest-id) track on a tie.
                    if best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, ti));
                    }
                }
            }
            match best {
                Some((_, ti)) => {
                    self.tracks[ti].absorb(det, self.config.w_p, self.config.w_v, frame_id);
                    matches.push((index, self.tracks[ti].id));
                }
                None => {
                    let id = self.next_id;
                    self.next_id += 1;
                    self.tracks.push(Track::new(id, det, frame_id));
                    created.push(id);
                }
            }
        }

        self.history.push(FrameSummary {
            frame_id,
            detections: detections.len(),
            matched: matches.len(),
            created: created.len(),
        });
        self.last_frame = Some(frame_id);
        Ok(FrameReport { frame_id, matches, created })
    }
}

// ============================================================================
// Tests
// ============================================================================
