//! Camera model and box geometry shared by the whole pipeline.
//!
//! Conventions used throughout the crate:
//!
//! * **Camera frame**: right-handed, `x` right, `y` down, `z` along the
//!   optical axis (in front of the camera means `z > 0`).
//! * **World frame**: right-handed, `x` along the lane the camera travels,
//!   `z` up. Poses map camera coordinates *into* world coordinates.
//! * Lengths are meters, image coordinates are pixels, `f64` everywhere.

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frame index type used across datasets, tracks and reports.
pub type FrameId = i64;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("depth {z} m outside accepted range [{min}, {max}] m")]
    DepthOutOfRange { z: f64, min: f64, max: f64 },
    #[error("cubes live in different frames")]
    FrameMismatch,
    #[error("invalid intrinsics: {0}")]
    BadIntrinsics(String),
    #[error("quaternion norm {norm} too far from 1")]
    BadQuaternion { norm: f64 },
    #[error("invalid bounding box: {0}")]
    BadBBox(String),
}

// ============================================================================
// Intrinsics
// ============================================================================

/// Pinhole camera intrinsics plus the depth-sensor working range.
///
/// `depth_scale` converts raw 16-bit depth units to meters; raw value `0`
/// is the invalid-pixel sentinel and never a measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    /// Focal length in pixels, horizontal.
    pub fx: f64,
    /// Focal length in pixels, vertical.
    pub fy: f64,
    /// Principal point, horizontal pixels.
    pub cx: f64,
    /// Principal point, vertical pixels.
    pub cy: f64,
    /// Image width in pixels.
    pub width: u32,
    /// Image height in pixels.
    pub height: u32,
    /// Meters per raw depth unit.
    pub depth_scale: f64,
    /// Closest depth the sensor reports, meters.
    pub min_depth: f64,
    /// Farthest depth accepted by the pipeline, meters.
    pub max_depth: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 430.0,
            fy: 430.0,
            cx: 424.0,
            cy: 240.0,
            width: 848,
            height: 480,
            depth_scale: 0.001,
            min_depth: 0.07,
            max_depth: 1.0,
        }
    }
}

impl CameraIntrinsics {
    /// Checks the fields form a usable pinhole model.
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: String| Err(GeometryError::BadIntrinsics(msg));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad(format!("focal lengths must be positive, got {} {}", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return bad("image dimensions must be nonzero".into());
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad(format!("cx {} outside [0, {})", self.cx, self.width));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad(format!("cy {} outside [0, {})", self.cy, self.height));
        }
        if !(self.depth_scale > 0.0) {
            return bad(format!("depth_scale must be positive, got {}", self.depth_scale));
        }
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth) {
            return bad(format!(
                "depth range [{}, {}] must satisfy 0 < min < max",
                self.min_depth, self.max_depth
            ));
        }
        Ok(())
    }

    /// True when `z` lies inside the accepted depth range (inclusive).
    pub fn depth_in_range(&self, z: f64) -> bool {
        z >= self.min_depth && z <= self.max_depth
    }
}

// ============================================================================
// Pose
// ============================================================================

/// Rigid camera pose: rotation + translation mapping camera frame to world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6D {
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl Pose6D {
    pub fn new(translation: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Self { translation, rotation }
    }

    pub fn identity() -> Self {
        Self { translation: Vector3::zeros(), rotation: UnitQuaternion::identity() }
    }

    /// Builds a pose from raw quaternion components `(qx, qy, qz, qw)`,
    /// normalizing when the norm is within `1e-6` of one and rejecting
    /// anything further off as corrupt input.
    pub fn from_raw(translation: [f64; 3], quat_xyzw: [f64; 4]) -> Result<Self, GeometryError> {
        let [qx, qy, qz, qw] = quat_xyzw;
        let q = nalgebra::Quaternion::new(qw, qx, qy, qz);
        let norm = q.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(GeometryError::BadQuaternion { norm });
        }
        // Already unit to round-off: keep the exact bits so records written
        // by this crate survive a load bit-for-bit. Renormalize only real
        // drift.
        let rotation = if (norm - 1.0).abs() <= 1e-12 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        Ok(Self { translation: Vector3::from(translation), rotation })
    }

    /// Maps a camera-frame point into the world frame.
    pub fn to_world_point(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_cam + self.translation
    }

    /// Maps a world-frame point into the camera frame.
    pub fn to_camera_point(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p_world - self.translation)
    }
}

// ============================================================================
// Boxes
// ============================================================================

/// Axis-aligned 2D detection box, center + extent in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox2D {
    pub frame_id: FrameId,
    /// Box center, horizontal pixels.
    pub u: f64,
    /// Box center, vertical pixels.
    pub v: f64,
    /// Box width in pixels.
    pub du: f64,
    /// Box height in pixels.
    pub dv: f64,
    pub class_id: u32,
    /// Detector confidence in `[0, 1]`.
    pub confidence: f64,
}

impl BBox2D {
    /// Checks extents are positive, confidence is in range and the box
    /// overlaps the image rectangle at all.
    pub fn validate(&self, intr: &CameraIntrinsics) -> Result<(), GeometryError> {
        if !(self.du > 0.0 && self.dv > 0.0) {
            return Err(GeometryError::BadBBox(format!(
                "extents must be positive, got {}x{}",
                self.du, self.dv
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(GeometryError::BadBBox(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        let (w, h) = (intr.width as f64, intr.height as f64);
        if self.u + self.du / 2.0 <= 0.0
            || self.u - self.du / 2.0 >= w
            || self.v + self.dv / 2.0 <= 0.0
            || self.v - self.dv / 2.0 >= h
        {
            return Err(GeometryError::BadBBox(format!(
                "box at ({}, {}) size {}x{} misses the {}x{} image",
                self.u, self.v, self.du, self.dv, intr.width, intr.height
            )));
        }
        Ok(())
    }
}

/// Which coordinate frame a cube's center is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CubeFrame {
    Camera,
    World,
}

/// Box-shaped 3D object state: center plus extents along the three axes.
/// Orientation is deliberately not modeled; extents ride along unchanged
/// through rigid transforms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cube {
    pub center: Vector3<f64>,
    /// Extent along x, meters.
    pub w: f64,
    /// Extent along y, meters.
    pub h: f64,
    /// Extent along z, meters.
    pub l: f64,
    pub frame: CubeFrame,
}

impl Cube {
    pub fn new(center: Vector3<f64>, w: f64, h: f64, l: f64, frame: CubeFrame) -> Self {
        debug_assert!(w > 0.0 && h > 0.0 && l > 0.0, "cube extents must be positive");
        Self { center, w, h, l, frame }
    }
}

// ============================================================================
// Operations
// ============================================================================

/// Lifts a 2D detection with a fused depth into a camera-frame cube.
///
/// Center: `X = (u - cx) z / fx`, `Y = (v - cy) z / fy`, `Z = z`.
/// Extents: `W = du z / fx`, `H = dv z / fy`, and the unobservable
/// along-axis extent is filled with `L = (W + H) / 2`.
pub fn back_project(
    bbox: &BBox2D,
    z: f64,
    intr: &CameraIntrinsics,
) -> Result<Cube, GeometryError> {
    if !intr.depth_in_range(z) {
        return Err(GeometryError::DepthOutOfRange {
            z,
            min: intr.min_depth,
            max: intr.max_depth,
        });
    }
    let x = (bbox.u - intr.cx) * z / intr.fx;
    let y = (bbox.v - intr.cy) * z / intr.fy;
    let w = bbox.du * z / intr.fx;
    let h = bbox.dv * z / intr.fy;
    let l = (w + h) / 2.0;
    Ok(Cube::new(Vector3::new(x, y, z), w, h, l, CubeFrame::Camera))
}

/// Moves a camera-frame cube into the world frame. Extents are preserved
/// exactly; only the center is transformed.
pub fn to_world(cube: &Cube, pose: &Pose6D) -> Cube {
    debug_assert_eq!(cube.frame, CubeFrame::Camera, "to_world expects a camera-frame cube");
    Cube {
        center: pose.to_world_point(&cube.center),
        frame: CubeFrame::World,
        ..*cube
    }
}

/// Projects a world point through a pose into pixel coordinates.
/// Returns `None` for points at or behind the camera plane; callers do
/// their own visibility checks against the image rectangle.
pub fn project_point(
    p_world: &Vector3<f64>,
    pose: &Pose6D,
    intr: &CameraIntrinsics,
) -> Option<(f64, f64)> {
    let p = pose.to_camera_point(p_world);
    if p.z <= 0.0 {
        return None;
    }
    Some((intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy))
}

/// Euclidean distance between cube centers; the cubes must agree on frame.
pub fn center_distance(a: &Cube, b: &Cube) -> Result<f64, GeometryError> {
    if a.frame != b.frame {
        return Err(GeometryError::FrameMismatch);
    }
    Ok((a.center - b.center).norm())
}

/// Volume of the box spanned by the three extents.
pub fn cube_volume(cube: &Cube) -> f64 {
    cube.w * cube.h * cube.l
}

// ============================================================================
// Tests
// ============================================================================
