//! Seeded synthetic orchard-row generator used as the test oracle for the
//! rest of the pipeline.
//!
//! A scene is a set of stationary fruits hanging in a band alongside a
//! straight lane. The camera drives down the lane at constant speed looking
//! sideways at the row and renders, per frame, a 16-bit depth image plus the
//! 2D boxes an idealized detector would emit. Because every fruit's true
//! position, diameter and class are known, downstream stages can be checked
//! end to end against exact ground truth.
//!
//! Determinism contract: all randomness flows from one `u64` seed through
//! ChaCha8 streams. Stream 0 drives scene generation; stream `frame_id + 1`
//! drives everything random inside that frame's render. Frames therefore
//! render independently — in parallel or sequentially — with byte-identical
//! results, and re-running with the same seed reproduces every artifact
//! exactly.
//!
//! Rendering model, per frame:
//!
//! 1. Visibility: a fruit is a candidate when its camera-frame depth lies in
//!    `(min_depth, max_depth]` and its projected center falls inside the
//!    image.
//! 2. Noise draws happen for every candidate in scene order, before any
//!    painting, with a fixed count per candidate — so toggling one fruit's
//!    outcome never shifts another's draws within a config.
//! 3. Depth splats paint far-to-near (painter's algorithm) so closer fruits
//!    overwrite farther ones where boxes overlap. A splat fills the fruit's
//!    axis-aligned ROI with the quantized, noise-perturbed center depth.
//! 4. Occluders (random per fruit-frame, or scripted against a specific
//!    fruit id) overwrite the first `ceil(coverage * n)` ROI pixels in
//!    row-major order with depth `z - depth_offset`, emulating a leaf or
//!    wire in front of the fruit.
//! 5. Missed detections keep their depth splat (the fruit is still
//!    physically there) but drop the 2D box.
//! 6. False positives are extra boxes placed where the depth image is
//!    majority-invalid, so a correct median filter rejects them.
//!
//! The splat box spans the fruit's diameter at its center depth
//! (`du = d*fx/z`, `dv = d*fy/z`), which is exactly what back-projection
//! inverts — a noiseless render closes the loop to within depth
//! quantization.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    self, DatasetError, DatasetManifest, DepthFrame, GroundTruthFruit, PoseRecord, SyncedFrame,
};
use crate::detect3d::roi_bounds;
use crate::geometry::{BBox2D, CameraIntrinsics, FrameId, GeometryError, Pose6D};
use crate::yield_est::{WeightModel, CLASS_RIPENED, CLASS_UNRIPENED};

/// Placement retries per fruit before giving up on the spacing constraint
/// and keeping the last candidate. Only matters for over-packed scenes.
const MAX_PLACEMENT_ATTEMPTS: u32 = 200;

/// Retries when looking for a majority-invalid spot for a false positive.
const MAX_FP_ATTEMPTS: u32 = 20;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid scene spec: {0}")]
    BadScene(String),
    #[error("invalid trajectory spec: {0}")]
    BadTrajectory(String),
    #[error("invalid noise spec: {0}")]
    BadNoise(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Static description of the fruit row.
///
/// Fruits live in an axis-aligned band: `x` in `[0, lane_length]` along the
/// lane, `z` between `height_min` and `height_max`, all on the row plane
/// `y = lateral_offset`. Placement is clustered — trusses of a few fruits
/// around shared anchor points — with a minimum spacing in the `(x, z)`
/// plane so neighboring projected boxes stay distinguishable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// Lane length in meters; fruit `x` spans `[0, lane_length]`.
    pub lane_length: f64,
    /// Total number of fruits to place.
    pub fruit_count: usize,
    /// Smallest fruit diameter, meters.
    pub diameter_min: f64,
    /// Largest fruit diameter, meters.
    pub diameter_max: f64,
    /// Row plane offset from the lane centerline (world `y`), meters.
    pub lateral_offset: f64,
    /// Lower edge of the hanging band (world `z`), meters.
    pub height_min: f64,
    /// Upper edge of the hanging band (world `z`), meters.
    pub height_max: f64,
    /// Fruits per cluster anchor.
    pub fruits_per_cluster: usize,
    /// Half-width of the uniform scatter around a cluster anchor, meters.
    pub cluster_spread: f64,
    /// Minimum pairwise distance between fruit centers in the `(x, z)`
    /// plane, meters.
    pub min_spacing: f64,
    /// Probability that a fruit is ripened (class 1) rather than unripened
    /// (class 2).
    pub ripened_fraction: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            lane_length: 13.2,
            fruit_count: 50,
            diameter_min: 0.028,
            diameter_max: 0.045,
            lateral_offset: 0.4,
            height_min: 0.85,
            height_max: 1.15,
            fruits_per_cluster: 4,
            cluster_spread: 0.08,
            min_spacing: 0.1,
            ripened_fraction: 1.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::BadScene(msg));
        if !(self.lane_length > 0.0) {
            return bad(format!("lane_length must be positive, got {}", self.lane_length));
        }
        if !(self.diameter_min > 0.0 && self.diameter_min <= self.diameter_max) {
            return bad(format!(
                "need 0 < diameter_min <= diameter_max, got {}..{}",
                self.diameter_min, self.diameter_max
            ));
        }
        if !(self.height_min < self.height_max) {
            return bad(format!(
                "need height_min < height_max, got {}..{}",
                self.height_min, self.height_max
            ));
        }
        if self.fruits_per_cluster == 0 {
            return bad("fruits_per_cluster must be at least 1".into());
        }
        if !(self.cluster_spread >= 0.0) {
            return bad(format!("cluster_spread must be >= 0, got {}", self.cluster_spread));
        }
        if !(self.min_spacing >= 0.0) {
            return bad(format!("min_spacing must be >= 0, got {}", self.min_spacing));
        }
        if !(0.0..=1.0).contains(&self.ripened_fraction) {
            return bad(format!(
                "ripened_fraction must be in [0, 1], got {}",
                self.ripened_fraction
            ));
        }
        Ok(())
    }
}

/// How the camera is mounted on the rover.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mounting {
    /// Optical axis points straight at the row (world `+y`), image x along
    /// the lane, image y down.
    Forward,
    /// Forward mounting composed with a yaw about the world up axis and a
    /// pitch about the camera's own x axis, both in degrees.
    Tilted { yaw_deg: f64, pitch_deg: f64 },
}

/// Straight-lane constant-speed camera path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    /// Rover speed along the lane, m/s.
    pub speed: f64,
    /// Capture rate, frames per second.
    pub frame_rate: f64,
    /// Camera mounting relative to the rover.
    pub mounting: Mounting,
    /// Distance from the camera path to the row plane, meters. The camera
    /// travels at `y = scene.lateral_offset - lateral_distance`.
    pub lateral_distance: f64,
    /// Camera height above the ground (world `z`), meters.
    pub camera_height: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            speed: 2.0,
            frame_rate: 30.0,
            mounting: Mounting::Forward,
            lateral_distance: 0.4,
            camera_height: 1.0,
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.speed > 0.0) {
            return Err(SimError::BadTrajectory(format!(
                "speed must be positive, got {}",
                self.speed
            )));
        }
        if !(self.frame_rate > 0.0) {
            return Err(SimError::BadTrajectory(format!(
                "frame_rate must be positive, got {}",
                self.frame_rate
            )));
        }
        if let Mounting::Tilted { yaw_deg, pitch_deg } = self.mounting {
            if !yaw_deg.is_finite() || !pitch_deg.is_finite() {
                return Err(SimError::BadTrajectory("tilt angles must be finite".into()));
            }
        }
        Ok(())
    }
}

/// An occluder scripted against one specific fruit for a run of frames —
/// the knob for reproducing the split-track failure mode on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedOccluder {
    /// Ground-truth id of the fruit to occlude.
    pub fruit_id: u64,
    /// First frame the occluder is active.
    pub start_frame: FrameId,
    /// Number of consecutive frames it stays active.
    pub frames: u32,
    /// Fraction of the fruit's ROI pixels it covers, `[0, 1]`.
    pub coverage: f64,
    /// How far in front of the fruit the occluder sits, meters.
    pub depth_offset: f64,
}

/// Sensor / detector imperfection model. `NoiseSpec::none()` gives the
/// noiseless renderer used for closed-loop exactness tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Std-dev of Gaussian jitter on box centers, pixels.
    pub pixel_jitter_sigma: f64,
    /// Std-dev of Gaussian noise on splat depth, meters.
    pub depth_sigma: f64,
    /// Probability a visible fruit's box is dropped (depth still rendered).
    pub miss_rate: f64,
    /// Expected false-positive boxes per frame (Poisson).
    pub false_positive_rate: f64,
    /// Probability a visible fruit is partially occluded this frame.
    pub occluder_prob: f64,
    /// Depth offset of random occluders, meters toward the camera.
    pub occluder_depth_offset: f64,
    /// ROI coverage fraction of random occluders, `[0, 1]`.
    pub occluder_coverage: f64,
    /// Optional deterministic occluder targeting one fruit.
    pub scripted_occluder: Option<ScriptedOccluder>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            pixel_jitter_sigma: 1.0,
            depth_sigma: 0.005,
            miss_rate: 0.10,
            false_positive_rate: 0.05,
            occluder_prob: 0.0,
            occluder_depth_offset: 0.15,
            occluder_coverage: 0.6,
            scripted_occluder: None,
        }
    }
}

impl NoiseSpec {
    /// All noise sources off. Rendering becomes an exact analytic model up
    /// to depth quantization.
    pub fn none() -> Self {
        Self {
            pixel_jitter_sigma: 0.0,
            depth_sigma: 0.0,
            miss_rate: 0.0,
            false_positive_rate: 0.0,
            occluder_prob: 0.0,
            occluder_depth_offset: 0.0,
            occluder_coverage: 0.0,
            scripted_occluder: None,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::BadNoise(msg));
        for (name, value) in [
            ("pixel_jitter_sigma", self.pixel_jitter_sigma),
            ("depth_sigma", self.depth_sigma),
            ("false_positive_rate", self.false_positive_rate),
            ("occluder_depth_offset", self.occluder_depth_offset),
        ] {
            if !(value >= 0.0) || !value.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {value}"));
            }
        }
        for (name, value) in [
            ("miss_rate", self.miss_rate),
            ("occluder_prob", self.occluder_prob),
            ("occluder_coverage", self.occluder_coverage),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return bad(format!("{name} must be in [0, 1], got {value}"));
            }
        }
        if let Some(s) = &self.scripted_occluder {
            if !(0.0..=1.0).contains(&s.coverage) {
                return bad(format!(
                    "scripted occluder coverage must be in [0, 1], got {}",
                    s.coverage
                ));
            }
            if !(s.depth_offset >= 0.0) {
                return bad(format!(
                    "scripted occluder depth_offset must be >= 0, got {}",
                    s.depth_offset
                ));
            }
        }
        Ok(())
    }
}

/// RNG for scene generation: stream 0 of the seed.
fn scene_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

/// RNG for one frame's render: stream `frame_id + 1` of the seed, disjoint
/// from the scene stream and from every other frame.
fn frame_rng(seed: u64, frame_id: FrameId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_id as u64 + 1);
    rng
}

/// Place fruits in the band: scattered over the lane (`x`) and the hanging
/// height range (`z`), all sitting on the row plane `y = lateral_offset`.
/// Ids are assigned in placement order starting at 0; ground-truth weight
/// comes from the calibration-fit model evaluated at the true diameter.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Vec<GroundTruthFruit>, SimError> {
    spec.validate()?;
    let mut rng = scene_rng(seed);
    let weight_model = WeightModel::fitted();

    let cluster_count = spec.fruit_count.div_ceil(spec.fruits_per_cluster).max(1);
    let anchors: Vec<(f64, f64)> = (0..cluster_count)
        .map(|_| {
            (
                rng.random_range(0.0..=spec.lane_length),
                rng.random_range(spec.height_min..=spec.height_max),
            )
        })
        .collect();

    let mut fruits: Vec<GroundTruthFruit> = Vec::with_capacity(spec.fruit_count);
    for i in 0..spec.fruit_count {
        let (ax, az) = anchors[i / spec.fruits_per_cluster];
        let mut center = [0.0; 3];
        for attempt in 0..MAX_PLACEMENT_ATTEMPTS {
            // Late attempts abandon the cluster anchor and sample the whole
            // band, which unsticks dense clusters.
            let (bx, bz, spread) = if attempt < MAX_PLACEMENT_ATTEMPTS / 2 {
                (ax, az, spec.cluster_spread)
            } else {
                (
                    rng.random_range(0.0..=spec.lane_length),
                    rng.random_range(spec.height_min..=spec.height_max),
                    spec.cluster_spread,
                )
            };
            let x = (bx + rng.random_range(-spread..=spread)).clamp(0.0, spec.lane_length);
            let z = (bz + rng.random_range(-spread..=spread)).clamp(spec.height_min, spec.height_max);
            center = [x, spec.lateral_offset, z];
            let clear = fruits.iter().all(|f| {
                let dx = f.center[0] - x;
                let dz = f.center[2] - z;
                (dx * dx + dz * dz).sqrt() >= spec.min_spacing
            });
            if clear {
                break;
            }
            // Last attempt falls through and keeps the candidate: a crowded
            // spec still yields a scene, just without the spacing guarantee.
        }
        let diameter = rng.random_range(spec.diameter_min..=spec.diameter_max);
        let ripened = rng.random_bool(spec.ripened_fraction);
        let class_id = if ripened { CLASS_RIPENED } else { CLASS_UNRIPENED };
        let weight = weight_model.evaluate(diameter * 1000.0);
        fruits.push(GroundTruthFruit {
            id: i as u64,
            center,
            diameter,
            class_id,
            weight: Some(weight),
        });
    }
    Ok(fruits)
}

/// Number of frames captured while traversing the lane. Guarded against
/// float representation pushing an exact product just above an integer.
pub fn frame_count(lane_length: f64, speed: f64, frame_rate: f64) -> usize {
    let frames = (lane_length / speed * frame_rate - 1e-9).ceil();
    (frames as usize).max(1)
}

fn mounting_rotation(mounting: Mounting) -> nalgebra::UnitQuaternion<f64> {
    use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
    // Columns: where the camera's x (right), y (down), z (forward) axes land
    // in the world. Forward mounting: right along the lane, down is -z,
    // optical axis at the row (+y).
    let base = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
        Matrix3::from_columns(&[
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::new(0.0, 1.0, 0.0),
        ]),
    ));
    match mounting {
        Mounting::Forward => base,
        Mounting::Tilted { yaw_deg, pitch_deg } => {
            let yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw_deg * PI / 180.0);
            let pitch = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), pitch_deg * PI / 180.0);
            // Yaw swings the whole rig about world up; pitch nods the camera
            // about its own x axis.
            yaw * base * pitch
        }
    }
}

/// Camera poses along the lane: frame k sits at `x = k * speed / frame_rate`
/// with a constant mounting rotation. Timestamps are seconds from the run
/// start.
pub fn generate_trajectory(
    scene: &SceneSpec,
    traj: &TrajectorySpec,
) -> Result<Vec<PoseRecord>, SimError> {
    scene.validate()?;
    traj.validate()?;
    let n = frame_count(scene.lane_length, traj.speed, traj.frame_rate);
    let step = traj.speed / traj.frame_rate;
    let rotation = mounting_rotation(traj.mounting);
    let y = scene.lateral_offset - traj.lateral_distance;
    Ok((0..n)
        .map(|k| PoseRecord {
            frame_id: k as FrameId,
            timestamp: k as f64 / traj.frame_rate,
            pose: Pose6D {
                translation: nalgebra::Vector3::new(k as f64 * step, y, traj.camera_height),
                rotation,
            },
        })
        .collect())
}

/// Round a metric depth to sensor units, clamped to the valid payload range
/// (zero is reserved for "no return").
fn quantize_depth(z_m: f64, intr: &CameraIntrinsics) -> u16 {
    let max_units = ((intr.max_depth / intr.depth_scale).floor() as i64).min(u16::MAX as i64);
    let units = (z_m / intr.depth_scale).round() as i64;
    units.clamp(1, max_units.max(1)) as u16
}

struct Candidate {
    fruit_idx: usize,
    /// Camera-frame depth of the fruit center.
    z: f64,
    u: f64,
    v: f64,
    du: f64,
    dv: f64,
    // Pre-drawn noise outcomes; see module docs for the draw order.
    depth_noise: f64,
    missed: bool,
    jitter_u: f64,
    jitter_v: f64,
    occlusion: Option<(f64, f64)>, // (coverage, depth_offset)
}

fn fill_roi(depth: &mut DepthFrame, bbox: &BBox2D, intr: &CameraIntrinsics, units: u16) {
    if let Some((u0, u1, v0, v1)) = roi_bounds(bbox, intr.width, intr.height) {
        for v in v0..v1 {
            for u in u0..u1 {
                depth.set(u, v, units);
            }
        }
    }
}

/// Overwrite the first `ceil(coverage * n)` ROI pixels in row-major order.
fn paint_occluder(
    depth: &mut DepthFrame,
    bbox: &BBox2D,
    intr: &CameraIntrinsics,
    coverage: f64,
    units: u16,
) {
    let Some((u0, u1, v0, v1)) = roi_bounds(bbox, intr.width, intr.height) else {
        return;
    };
    let total = ((u1 - u0) as usize) * ((v1 - v0) as usize);
    let mut remaining = (coverage * total as f64).ceil() as usize;
    'rows: for v in v0..v1 {
        for u in u0..u1 {
            if remaining == 0 {
                break 'rows;
            }
            depth.set(u, v, units);
            remaining -= 1;
        }
    }
}

fn splat_bbox(frame_id: FrameId, c: &Candidate, class_id: u32) -> BBox2D {
    BBox2D {
        frame_id,
        u: c.u,
        v: c.v,
        du: c.du,
        dv: c.dv,
        class_id,
        confidence: 1.0,
    }
}

/// Render one frame: the depth image and the detector boxes.
///
/// `rng` must be this frame's dedicated stream (`frame_rng`); the function
/// draws nothing from any other source. Boxes come out in scene order
/// (minus misses) followed by any false positives.
pub fn render_frame(
    fruits: &[GroundTruthFruit],
    pose_rec: &PoseRecord,
    intr: &CameraIntrinsics,
    noise: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> (Vec<BBox2D>, DepthFrame) {
    let frame_id = pose_rec.frame_id;
    let mut depth = DepthFrame::empty(frame_id, intr.width, intr.height);

    // Pass 1: visibility.
    let mut candidates: Vec<Candidate> = Vec::new();
    for (idx, fruit) in fruits.iter().enumerate() {
        let p_cam = pose_rec.pose.to_camera_point(&fruit.center_vec());
        let z = p_cam.z;
        if !(z > intr.min_depth && z <= intr.max_depth) {
            continue;
        }
        let u = intr.fx * p_cam.x / z + intr.cx;
        let v = intr.fy * p_cam.y / z + intr.cy;
        if !(u >= 0.0 && u < intr.width as f64 && v >= 0.0 && v < intr.height as f64) {
            continue;
        }
        candidates.push(Candidate {
            fruit_idx: idx,
            z,
            u,
            v,
            du: fruit.diameter * intr.fx / z,
            dv: fruit.diameter * intr.fy / z,
            depth_noise: 0.0,
            missed: false,
            jitter_u: 0.0,
            jitter_v: 0.0,
            occlusion: None,
        });
    }

    // Pass 2: noise draws, fixed count per candidate, in scene order.
    for c in &mut candidates {
        let n1: f64 = StandardNormal.sample(rng);
        c.depth_noise = noise.depth_sigma * n1;
        c.missed = rng.random_bool(noise.miss_rate);
        let n2: f64 = StandardNormal.sample(rng);
        let n3: f64 = StandardNormal.sample(rng);
        c.jitter_u = noise.pixel_jitter_sigma * n2;
        c.jitter_v = noise.pixel_jitter_sigma * n3;
        let random_hit = rng.random_bool(noise.occluder_prob);
        let scripted_hit = noise.scripted_occluder.as_ref().filter(|s| {
            fruits[c.fruit_idx].id == s.fruit_id
                && frame_id >= s.start_frame
                && frame_id < s.start_frame + s.frames as FrameId
        });
        c.occlusion = match (scripted_hit, random_hit) {
            (Some(s), _) => Some((s.coverage, s.depth_offset)),
            (None, true) => Some((noise.occluder_coverage, noise.occluder_depth_offset)),
            (None, false) => None,
        };
    }

    // Pass 3: depth splats, far to near so near fruit wins overlaps.
    let mut paint_order: Vec<usize> = (0..candidates.len()).collect();
    paint_order.sort_by(|&a, &b| candidates[b].z.total_cmp(&candidates[a].z));
    for &i in &paint_order {
        let c = &candidates[i];
        let bbox = splat_bbox(frame_id, c, fruits[c.fruit_idx].class_id);
        fill_roi(&mut depth, &bbox, intr, quantize_depth(c.z + c.depth_noise, intr));
    }

    // Pass 4: occluders overwrite on top of every splat.
    for c in &candidates {
        if let Some((coverage, offset)) = c.occlusion {
            let bbox = splat_bbox(frame_id, c, fruits[c.fruit_idx].class_id);
            let units = quantize_depth(c.z + c.depth_noise - offset, intr);
            paint_occluder(&mut depth, &bbox, intr, coverage, units);
        }
    }

    // Pass 5: boxes. Jittered centers clamp to the image so every emitted
    // box still intersects the frame.
    let mut boxes: Vec<BBox2D> = Vec::new();
    for c in &candidates {
        if c.missed {
            continue;
        }
        let mut bbox = splat_bbox(frame_id, c, fruits[c.fruit_idx].class_id);
        bbox.u = (c.u + c.jitter_u).clamp(0.0, intr.width as f64 - f64::EPSILON);
        bbox.v = (c.v + c.jitter_v).clamp(0.0, intr.height as f64 - f64::EPSILON);
        boxes.push(bbox);
    }

    // Pass 6: false positives over majority-invalid depth.
    if noise.false_positive_rate > 0.0 {
        let poisson = Poisson::new(noise.false_positive_rate)
            .expect("validated: false_positive_rate > 0");
        let n_fp = poisson.sample(rng) as usize;
        for _ in 0..n_fp {
            for _ in 0..MAX_FP_ATTEMPTS {
                let bbox = BBox2D {
                    frame_id,
                    u: rng.random_range(0.0..intr.width as f64),
                    v: rng.random_range(0.0..intr.height as f64),
                    du: rng.random_range(10.0..=50.0),
                    dv: rng.random_range(10.0..=50.0),
                    class_id: CLASS_RIPENED,
                    confidence: 1.0,
                };
                let majority_invalid = match roi_bounds(&bbox, intr.width, intr.height) {
                    None => false,
                    Some((u0, u1, v0, v1)) => {
                        let mut invalid = 0usize;
                        let mut total = 0usize;
                        for v in v0..v1 {
                            for u in u0..u1 {
                                total += 1;
                                if depth.get(u, v) == 0 {
                                    invalid += 1;
                                }
                            }
                        }
                        total > 0 && 2 * invalid > total
                    }
                };
                if majority_invalid {
                    boxes.push(bbox);
                    break;
                }
            }
        }
    }

    (boxes, depth)
}

fn render_one(
    fruits: &[GroundTruthFruit],
    pose_rec: &PoseRecord,
    intr: &CameraIntrinsics,
    noise: &NoiseSpec,
    seed: u64,
) -> SyncedFrame {
    let mut rng = frame_rng(seed, pose_rec.frame_id);
    let (detections, depth) = render_frame(fruits, pose_rec, intr, noise, &mut rng);
    SyncedFrame {
        frame_id: pose_rec.frame_id,
        timestamp: pose_rec.timestamp,
        pose: pose_rec.pose.clone(),
        detections,
        depth,
    }
}

/// Sequential reference renderer.
pub fn render_all_seq(
    fruits: &[GroundTruthFruit],
    poses: &[PoseRecord],
    intr: &CameraIntrinsics,
    noise: &NoiseSpec,
    seed: u64,
) -> Vec<SyncedFrame> {
    poses
        .iter()
        .map(|p| render_one(fruits, p, intr, noise, seed))
        .collect()
}

/// Render every frame. With the `parallel` feature this fans out across
/// threads; per-frame RNG streams make the output identical either way.
pub fn render_all(
    fruits: &[GroundTruthFruit],
    poses: &[PoseRecord],
    intr: &CameraIntrinsics,
    noise: &NoiseSpec,
    seed: u64,
) -> Vec<SyncedFrame> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        poses
            .par_iter()
            .map(|p| render_one(fruits, p, intr, noise, seed))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        render_all_seq(fruits, poses, intr, noise, seed)
    }
}

/// A fully rendered run, ready to feed the pipeline in memory or export to
/// disk.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub intrinsics: CameraIntrinsics,
    pub fruits: Vec<GroundTruthFruit>,
    pub frames: Vec<SyncedFrame>,
    pub frame_rate: f64,
}

/// Validate all specs, generate the scene and trajectory, render every
/// frame.
pub fn simulate(
    scene: &SceneSpec,
    traj: &TrajectorySpec,
    noise: &NoiseSpec,
    intr: &CameraIntrinsics,
    seed: u64,
) -> Result<Simulation, SimError> {
    noise.validate()?;
    intr.validate()?;
    let fruits = generate_scene(scene, seed)?;
    let poses = generate_trajectory(scene, traj)?;
    let frames = render_all(&fruits, &poses, intr, noise, seed);
    Ok(Simulation {
        intrinsics: *intr,
        fruits,
        frames,
        frame_rate: traj.frame_rate,
    })
}

/// Write a simulation out in the on-disk dataset layout. The manifest goes
/// last so its presence implies a complete dataset; every file is written
/// atomically. Same simulation in, byte-identical tree out.
pub fn export(sim: &Simulation, root: &Path) -> Result<(), DatasetError> {
    let io_err = |path: &Path, source: std::io::Error| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    let depth_dir = root.join("depth");
    std::fs::create_dir_all(&depth_dir).map_err(|e| io_err(&depth_dir, e))?;

    dataset::write_json(&root.join("intrinsics.json"), &sim.intrinsics)?;

    let poses: Vec<PoseRecord> = sim
        .frames
        .iter()
        .map(|f| PoseRecord {
            frame_id: f.frame_id,
            timestamp: f.timestamp,
            pose: f.pose.clone(),
        })
        .collect();
    dataset::write_jsonl(&root.join("poses.jsonl"), &poses)?;

    let detections: Vec<BBox2D> = sim
        .frames
        .iter()
        .flat_map(|f| f.detections.iter().cloned())
        .collect();
    dataset::write_jsonl(&root.join("detections.jsonl"), &detections)?;

    dataset::write_json(&root.join("ground_truth.json"), &sim.fruits)?;

    for frame in &sim.frames {
        let path = depth_dir.join(dataset::depth_file_name(frame.frame_id));
        dataset::write_depth_pgm(&frame.depth, &path)?;
    }

    let manifest = DatasetManifest {
        intrinsics: "intrinsics.json".into(),
        poses: "poses.jsonl".into(),
        detections: "detections.jsonl".into(),
        depth_dir: "depth".into(),
        ground_truth: Some("ground_truth.json".into()),
        frame_count: sim.frames.len() as u64,
        frame_rate: sim.frame_rate,
    };
    dataset::write_json(&root.join("manifest.json"), &manifest)?;
    Ok(())
}
