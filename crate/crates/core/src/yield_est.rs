//! Yield estimation from reliable tracks: filtering, per-fruit weight from
//! height, and the aggregated report.
//!
//! Filtering applies three tests in a fixed order — world region, minimum
//! volume, target class — and a rejected track is attributed to the first
//! test it fails, so rejection counts are stable and comparable between
//! runs.
//!
//! Two weight models ship side by side. `paper` is the built-in reference
//! cubic mapping height to weight, and the default. `fitted`
//! is the exact quadratic through the built-in calibration samples; the
//! cubic does *not* pass through those samples (it sits roughly 9 g above
//! them), so closed-loop checks against generated ground truth use the
//! fitted model. Pick per run via [`WeightModelChoice`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tracker::{TrackId, TrackRecord};

/// Detector class id for harvest-ready fruit.
pub const CLASS_RIPENED: u32 = 1;
/// Detector class id for fruit left on the vine.
pub const CLASS_UNRIPENED: u32 = 2;

/// Measured (height mm, weight g) calibration samples for the fitted model.
pub const CALIBRATION_SAMPLES: [(f64, f64); 3] = [(35.0, 13.5), (40.0, 18.1), (42.0, 23.0)];

#[derive(Debug, Error, PartialEq)]
pub enum YieldError {
    #[error("fruit height must be positive, got {h_mm} mm")]
    NonPositiveHeight { h_mm: f64 },
    #[error("calibration heights must be distinct, got {heights:?}")]
    SingularFit { heights: [f64; 3] },
    #[error("fit residual {residual} exceeds tolerance")]
    FitResidual { residual: f64 },
    #[error("bad yield config: {0}")]
    BadConfig(String),
}

// ============================================================================
// Region filter
// ============================================================================

/// Optional per-axis world bounds; an unset bound passes everything.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionFilter {
    pub x_min: Option<f64>,
    pub x_max: Option<f64>,
    pub y_min: Option<f64>,
    pub y_max: Option<f64>,
    pub z_min: Option<f64>,
    pub z_max: Option<f64>,
}

impl RegionFilter {
    pub fn validate(&self) -> Result<(), YieldError> {
        let pairs = [
            ("x", self.x_min, self.x_max),
            ("y", self.y_min, self.y_max),
            ("z", self.z_min, self.z_max),
        ];
        for (axis, min, max) in pairs {
            if let (Some(min), Some(max)) = (min, max) {
                if min >= max {
                    return Err(YieldError::BadConfig(format!(
                        "{axis} bounds [{min}, {max}] are empty"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, center: &[f64; 3]) -> bool {
        let inside = |v: f64, min: Option<f64>, max: Option<f64>| {
            min.is_none_or(|m| v >= m) && max.is_none_or(|m| v <= m)
        };
        inside(center[0], self.x_min, self.x_max)
            && inside(center[1], self.y_min, self.y_max)
            && inside(center[2], self.z_min, self.z_max)
    }
}

// ============================================================================
// Weight models
// ============================================================================

/// Cubic polynomial mapping fruit height (mm) to weight (grams):
/// `w = a3 h^3 + a2 h^2 + a1 h + a0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightModel {
    pub a3: f64,
    pub a2: f64,
    pub a1: f64,
    pub a0: f64,
}

impl WeightModel {
    /// Built-in reference cubic with fixed coefficients.
    pub fn paper() -> Self {
        Self { a3: 0.00178, a2: 0.00993, a1: -7.36, a0: 192.0 }
    }

    /// Exact quadratic through [`CALIBRATION_SAMPLES`].
    pub fn fitted() -> Self {
        fit_weight_quadratic(&CALIBRATION_SAMPLES)
            .expect("built-in calibration samples have distinct heights")
    }

    /// Evaluates the polynomial at a height in millimeters.
    pub fn evaluate(&self, h_mm: f64) -> f64 {
        ((self.a3 * h_mm + self.a2) * h_mm + self.a1) * h_mm + self.a0
    }

    /// Checks the model stays finite across the plausible height range.
    pub fn validate(&self) -> Result<(), YieldError> {
        let mut h = 20.0;
        while h <= 60.0 {
            if !self.evaluate(h).is_finite() {
                return Err(YieldError::BadConfig(format!("model not finite at {h} mm")));
            }
            h += 5.0;
        }
        Ok(())
    }
}

/// Weight of a fruit of height `h_mm` under the given model.
pub fn weight_from_height(h_mm: f64, model: &WeightModel) -> Result<f64, YieldError> {
    if !(h_mm > 0.0) {
        return Err(YieldError::NonPositiveHeight { h_mm });
    }
    Ok(model.evaluate(h_mm))
}

/// Fits the unique quadratic through three (height mm, weight g) samples
/// by a direct 3x3 solve (Cramer's rule on the Vandermonde system). The
/// returned model has `a3 = 0`.
pub fn fit_weight_quadratic(samples: &[(f64, f64); 3]) -> Result<WeightModel, YieldError> {
    let [(h0, w0), (h1, w1), (h2, w2)] = *samples;
    if h0 == h1 || h0 == h2 || h1 == h2 {
        return Err(YieldError::SingularFit { heights: [h0, h1, h2] });
    }
    let det3 = |a: [f64; 3], b: [f64; 3], c: [f64; 3]| -> f64 {
        a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
            + a[2] * (b[0] * c[1] - b[1] * c[0])
    };
    let col_h2 = [h0 * h0, h1 * h1, h2 * h2];
    let col_h = [h0, h1, h2];
    let col_1 = [1.0, 1.0, 1.0];
    let col_w = [w0, w1, w2];
    let d = det3(col_h2, col_h, col_1);
    let a2 = det3(col_w, col_h, col_1) / d;
    let a1 = det3(col_h2, col_w, col_1) / d;
    let a0 = det3(col_h2, col_h, col_w) / d;
    let model = WeightModel { a3: 0.0, a2, a1, a0 };

    let residual = [(h0, w0), (h1, w1), (h2, w2)]
        .iter()
        .map(|&(h, w)| (model.evaluate(h) - w).abs())
        .fold(0.0f64, f64::max);
    // Scale-relative: a solve that fails to reproduce its own inputs beyond
    // round-off means the heights were too close to support a quadratic.
    let scale = w0.abs().max(w1.abs()).max(w2.abs()).max(1.0);
    if !(residual <= 1e-9 * scale) {
        return Err(YieldError::FitResidual { residual });
    }
    Ok(model)
}

/// How a model is chosen in configuration: by name or literal coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightModelChoice {
    #[default]
    Paper,
    Fitted,
    Custom(WeightModel),
}

impl WeightModelChoice {
    pub fn resolve(&self) -> WeightModel {
        match self {
            Self::Paper => WeightModel::paper(),
            Self::Fitted => WeightModel::fitted(),
            Self::Custom(model) => *model,
        }
    }
}

// ============================================================================
// Yield estimation
// ============================================================================

/// Everything needed to turn reliable tracks into a yield figure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct YieldConfig {
    pub region: RegionFilter,
    /// Smallest `w*h*l` (cubic meters) still counted as a fruit.
    pub min_volume: f64,
    /// Only tracks of this class are counted; `None` disables the check.
    pub target_class: Option<u32>,
    pub weight_model: WeightModelChoice,
}

impl Default for YieldConfig {
    fn default() -> Self {
        Self {
            region: RegionFilter::default(),
            min_volume: 1.2e-5,
            target_class: Some(CLASS_RIPENED),
            weight_model: WeightModelChoice::Paper,
        }
    }
}

impl YieldConfig {
    pub fn validate(&self) -> Result<(), YieldError> {
        self.region.validate()?;
        if !(self.min_volume >= 0.0) {
            return Err(YieldError::BadConfig(format!(
                "min_volume must be non-negative, got {}",
                self.min_volume
            )));
        }
        self.weight_model.resolve().validate()
    }
}

/// Rejections by first failing test, in application order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub region: usize,
    pub volume: usize,
    pub class: usize,
}

impl FilterStats {
    pub fn total(&self) -> usize {
        self.region + self.volume + self.class
    }
}

/// Applies region, volume and class tests in that order, keeping input
/// order among survivors and attributing each rejection to the first
/// failed test.
pub fn filter_tracks<'a>(
    tracks: &'a [TrackRecord],
    config: &YieldConfig,
) -> (Vec<&'a TrackRecord>, FilterStats) {
    let mut stats = FilterStats::default();
    let mut kept = Vec::with_capacity(tracks.len());
    for track in tracks {
        if !config.region.contains(&track.center) {
            stats.region += 1;
            continue;
        }
        if crate::geometry::cube_volume(&track.cube()) < config.min_volume {
            stats.volume += 1;
            continue;
        }
        if config.target_class.is_some_and(|target| track.class_id != target) {
            stats.class += 1;
            continue;
        }
        kept.push(track);
    }
    (kept, stats)
}

/// One counted fruit in a [`YieldReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldEntry {
    pub track_id: TrackId,
    pub height_mm: f64,
    pub weight_g: f64,
}

/// Final yield figures plus the filter audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldReport {
    /// Number of fruits counted.
    pub count: usize,
    pub entries: Vec<YieldEntry>,
    pub total_weight_g: f64,
    /// Absent when nothing was counted.
    pub average_weight_g: Option<f64>,
    pub rejections: FilterStats,
}

/// Counts surviving tracks and weighs each by its height (the vertical
/// extent, converted to millimeters) under the configured model.
pub fn estimate_yield(tracks: &[TrackRecord], config: &YieldConfig) -> YieldReport {
    let model = config.weight_model.resolve();
    let (kept, rejections) = filter_tracks(tracks, config);
    let entries: Vec<YieldEntry> = kept
        .iter()
        .map(|track| {
            let height_mm = track.extents[1] * 1000.0;
            debug_assert!(height_mm > 0.0, "track extents are validated positive");
            YieldEntry { track_id: track.id, height_mm, weight_g: model.evaluate(height_mm) }
        })
        .collect();
    let total_weight_g: f64 = entries.iter().map(|e| e.weight_g).sum();
    let count = entries.len();
    YieldReport {
        count,
        average_weight_g: (count > 0).then(|| total_weight_g / count as f64),
        entries,
        total_weight_g,
        rejections,
    }
}

// ============================================================================
// Tests
// ============================================================================
