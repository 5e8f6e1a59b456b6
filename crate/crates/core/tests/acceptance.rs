//! Release acceptance gate: seven criteria, one test and one printed
//! PASS/FAIL line each. Failures print their line and panic; on success run
//! with `--nocapture` to see the lines. Tolerances are pinned in the
//! assertions and repeated in the printed notes.
//!
//! The heavy end-to-end criteria serialize on a mutex so their wall-clock
//! budgets are not distorted by the parallel test harness.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vinetrack::dataset::{
    load_dataset, read_depth_pgm, read_jsonl, write_depth_pgm, write_jsonl, DepthFrame,
    GroundTruthFruit, PoseRecord,
};
use vinetrack::detect3d::{roi_median_depth, Detection3D};
use vinetrack::eval::{
    compute_metrics, match_to_ground_truth, percent, FrameSampleReport, DEFAULT_MATCH_RADIUS,
};
use vinetrack::geometry::{back_project, project_point, Cube, CubeFrame, FrameId, Pose6D};
use vinetrack::simulator::{
    export, generate_scene, generate_trajectory, simulate, NoiseSpec, SceneSpec, ScriptedOccluder,
    TrajectorySpec,
};
use vinetrack::tracker::TrackId;
use vinetrack::yield_est::{
    filter_tracks, fit_weight_quadratic, FilterStats, RegionFilter, WeightModelChoice,
    YieldReport, CALIBRATION_SAMPLES,
};
use vinetrack::{
    run_on_dataset, run_on_frames, BBox2D, CameraIntrinsics, TrackRecord, TrackStore,
    TrackerConfig, WeightModel, YieldConfig,
};

/// Serializes the compute-heavy criteria so per-criterion runtime budgets
/// measure the work itself, not scheduler contention.
static HEAVY: Mutex<()> = Mutex::new(());

// ============================================================================
// Reporting scaffold
// ============================================================================

struct Gate {
    name: &'static str,
    start: Instant,
    notes: Vec<String>,
    failures: Vec<String>,
}

impl Gate {
    fn open(name: &'static str) -> Self {
        Gate { name, start: Instant::now(), notes: Vec::new(), failures: Vec::new() }
    }

    fn check(&mut self, ok: bool, note: String) {
        if ok {
            self.notes.push(note);
        } else {
            self.failures.push(note);
        }
    }

    /// Prints the criterion's single PASS/FAIL line, enforcing the runtime
    /// budget when one is pinned, and panics if anything failed.
    fn close(mut self, budget: Option<Duration>) {
        let elapsed = self.start.elapsed().as_secs_f64();
        if let Some(budget) = budget {
            self.check(
                elapsed < budget.as_secs_f64(),
                format!("runtime {elapsed:.2}s (budget {}s)", budget.as_secs_f64()),
            );
        }
        if self.failures.is_empty() {
            println!("PASS {} — {}", self.name, self.notes.join("; "));
        } else {
            let line = format!("FAIL {} — {}", self.name, self.failures.join("; "));
            println!("{line}");
            panic!("{line}");
        }
    }
}

fn det3(frame_id: FrameId, center: [f64; 3], extents: [f64; 3]) -> Detection3D {
    Detection3D {
        cube: Cube::new(
            Vector3::new(center[0], center[1], center[2]),
            extents[0],
            extents[1],
            extents[2],
            CubeFrame::World,
        ),
        class_id: 1,
        frame_id,
        source: BBox2D {
            frame_id,
            u: 0.0,
            v: 0.0,
            du: 1.0,
            dv: 1.0,
            class_id: 1,
            confidence: 1.0,
        },
    }
}

fn max_abs_err(got: &[f64], want: &[f64]) -> f64 {
    got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max)
}

// ============================================================================
// Criterion 1: formula fidelity
// ============================================================================

#[test]
fn criterion_1_formula_fidelity() {
    let mut gate = Gate::open("criterion 1 (formula fidelity)");
    const TOL: f64 = 1e-9;

    // Box-with-depth fusion, worked example: a 24x32 px box centered at
    // (624, 240) seen 0.5 m away through a 400 px lens.
    let intr = CameraIntrinsics {
        fx: 400.0,
        fy: 400.0,
        cx: 424.0,
        cy: 240.0,
        ..CameraIntrinsics::default()
    };
    let bbox = BBox2D {
        frame_id: 0,
        u: 624.0,
        v: 240.0,
        du: 24.0,
        dv: 32.0,
        class_id: 1,
        confidence: 1.0,
    };
    let cube = back_project(&bbox, 0.5, &intr).expect("depth in range");
    let err_a = max_abs_err(
        &[cube.center.x, cube.center.y, cube.center.z, cube.w, cube.h, cube.l],
        &[0.25, 0.0, 0.5, 0.03, 0.04, 0.035],
    );
    gate.check(
        err_a <= TOL,
        format!("back-projection (0.25,0,0.5)+(0.03,0.04,0.035) max err {err_a:.1e} ≤ 1e-9"),
    );

    // Asymmetric-focal variant exercises the vertical scaling path.
    let intr_b = CameraIntrinsics { fy: 500.0, ..intr };
    let bbox_b = BBox2D { u: 524.0, v: 340.0, du: 40.0, dv: 20.0, ..bbox };
    let cube_b = back_project(&bbox_b, 0.8, &intr_b).expect("depth in range");
    let err_b = max_abs_err(
        &[cube_b.center.x, cube_b.center.y, cube_b.center.z, cube_b.w, cube_b.h, cube_b.l],
        &[0.2, 0.16, 0.8, 0.08, 0.032, 0.056],
    );
    gate.check(
        err_b <= TOL,
        format!("back-projection fx≠fy max err {err_b:.1e} ≤ 1e-9"),
    );

    // Convex blend of a matched detection into a track: a track at the
    // origin absorbing a detection 0.03 m away moves to 0.021 m (w = 0.7),
    // and extents blend with the same rule.
    let mut store = TrackStore::new(TrackerConfig::default()).expect("default config valid");
    store.process_frame(0, &[det3(0, [0.0; 3], [0.03; 3])]).expect("frame 0");
    store.process_frame(1, &[det3(1, [0.03, 0.0, 0.0], [0.05, 0.03, 0.03])]).expect("frame 1");
    let rec = store.tracks()[0].to_record();
    let err_c = max_abs_err(&rec.center, &[0.021, 0.0, 0.0]);
    let err_v = (rec.extents[0] - 0.044).abs();
    gate.check(
        err_c <= TOL && err_v <= TOL && rec.n_assoc == 2,
        format!("blend update center 0.021 m (err {err_c:.1e}), extent 0.044 m (err {err_v:.1e}), both ≤ 1e-9"),
    );

    // Height→weight cubic at the three reference heights.
    let cubic = WeightModel::paper();
    let err_w = max_abs_err(
        &[cubic.evaluate(35.0), cubic.evaluate(40.0), cubic.evaluate(42.0)],
        &[22.88175, 27.408, 32.27316],
    );
    gate.check(
        err_w <= TOL,
        format!("cubic 22.88175/27.408/32.27316 g at 35/40/42 mm, max err {err_w:.1e} ≤ 1e-9"),
    );

    gate.close(Some(Duration::from_secs(1)));
}

// ============================================================================
// Criterion 2: calibration fit
// ============================================================================

#[test]
fn criterion_2_calibration_fit() {
    let mut gate = Gate::open("criterion 2 (calibration fit)");

    // The quadratic fitted through the three calibration samples must pass
    // through them exactly (to float precision).
    let fit = fit_weight_quadratic(&CALIBRATION_SAMPLES).expect("samples are well-conditioned");
    let err_fit = CALIBRATION_SAMPLES
        .iter()
        .map(|&(h, w)| (fit.evaluate(h) - w).abs())
        .fold(0.0, f64::max);
    gate.check(
        err_fit <= 1e-9,
        format!("fit through (35,13.5) (40,18.1) (42,23) max err {err_fit:.1e} ≤ 1e-9 g"),
    );

    // The built-in fitted model is the same polynomial.
    let frozen = WeightModel::fitted();
    let err_frozen = (20..=60)
        .map(|h| (frozen.evaluate(h as f64) - fit.evaluate(h as f64)).abs())
        .fold(0.0, f64::max);
    gate.check(
        err_frozen <= 1e-9,
        format!("built-in fitted model matches a fresh fit, max err {err_frozen:.1e} ≤ 1e-9 g"),
    );

    // Sampled models round-trip through serialization bit-for-bit.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut trips = 0usize;
    for _ in 0..150 {
        let model = WeightModel {
            a3: rng.random_range(-0.01..0.01),
            a2: rng.random_range(-1.0..1.0),
            a1: rng.random_range(-20.0..20.0),
            a0: rng.random_range(-200.0..200.0),
        };
        let json = serde_json::to_string(&model).expect("serialize");
        let back: WeightModel = serde_json::from_str(&json).expect("parse");
        if back == model {
            trips += 1;
        }
    }
    gate.check(trips == 150, format!("{trips}/150 sampled models round-trip exactly"));

    gate.close(Some(Duration::from_secs(1)));
}

// ============================================================================
// Criterion 3: noiseless end-to-end
// ============================================================================

#[test]
fn criterion_3_noiseless_end_to_end() {
    let _serial = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let mut gate = Gate::open("criterion 3 (noiseless end-to-end)");

    let scene = SceneSpec::default(); // 50 fruits over a 13.2 m lane
    let traj = TrajectorySpec::default(); // 2 m/s at 30 Hz
    let intr = CameraIntrinsics::default();
    let sim = simulate(&scene, &traj, &NoiseSpec::none(), &intr, 7).expect("simulate");

    // Full disk round trip: export the dataset and run the pipeline on it.
    let dir = tempfile::tempdir().expect("tempdir");
    export(&sim, dir.path()).expect("export");
    let dataset = load_dataset(dir.path()).expect("load");
    let yield_cfg = YieldConfig { weight_model: WeightModelChoice::Fitted, ..YieldConfig::default() };
    let (out, _iter_stats) =
        run_on_dataset(&dataset, &TrackerConfig::default(), &yield_cfg).expect("pipeline");

    let matching = match_to_ground_truth(&out.reliable_tracks, &sim.fruits, DEFAULT_MATCH_RADIUS);
    let metrics = compute_metrics(&out.report, &sim.fruits, &matching);

    gate.check(
        out.report.count == 50 && metrics.counting_accuracy == Some(1.0),
        format!("counted {}/50, accuracy {:?} (want exactly 1.0)", out.report.count,
            metrics.counting_accuracy),
    );

    let worst_mm = matching.pairs.iter().map(|p| p.distance).fold(0.0, f64::max) * 1000.0;
    gate.check(
        matching.unmatched_fruits.is_empty() && matching.pairs.len() == 50,
        format!("{}/50 fruits matched within {} m", matching.pairs.len(), DEFAULT_MATCH_RADIUS),
    );
    gate.check(worst_mm <= 2.0, format!("worst center error {worst_mm:.3} mm ≤ 2 mm"));

    gate.check(
        metrics.duplicate_track_count == 0,
        format!("{} duplicate tracks (want 0)", metrics.duplicate_track_count),
    );

    let weight_err = metrics.total_weight_error.expect("ground truth carries weights");
    gate.check(
        weight_err < 0.02,
        format!("total weight error {:.2}% < 2% (fitted model)", weight_err * 100.0),
    );

    gate.close(Some(Duration::from_secs(10)));
}

// ============================================================================
// Criterion 4: noisy end-to-end
// ============================================================================

#[test]
fn criterion_4_noisy_end_to_end() {
    let _serial = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let mut gate = Gate::open("criterion 4 (noisy end-to-end)");

    let scene = SceneSpec::default();
    let traj = TrajectorySpec::default();
    let intr = CameraIntrinsics::default();

    // Default noise: 1 px jitter, 5 mm depth noise, 10% misses, 5%/frame
    // false positives placed on invalid depth.
    let mut accuracies = Vec::new();
    for seed in 0..10u64 {
        let sim = simulate(&scene, &traj, &NoiseSpec::default(), &intr, seed).expect("simulate");
        let out = run_on_frames(
            &sim.frames,
            &sim.intrinsics,
            &TrackerConfig::default(),
            &YieldConfig::default(),
        )
        .expect("pipeline");
        let acc = 1.0 - (out.report.count as f64 - 50.0).abs() / 50.0;
        accuracies.push(acc);
    }
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let lo = accuracies.iter().copied().fold(f64::INFINITY, f64::min);
    gate.check(
        mean >= 0.90,
        format!(
            "mean counting accuracy {:.1}% over seeds 0..9 (≥ 90%), worst seed {:.1}%",
            mean * 100.0,
            lo * 100.0
        ),
    );

    gate.close(Some(Duration::from_secs(120)));
}

// ============================================================================
// Criterion 5: double-counting regression
// ============================================================================

/// Frames in which the fruit's center projects inside the image with depth
/// in the sensor's reporting range.
fn visible_frames(
    fruit: &GroundTruthFruit,
    poses: &[PoseRecord],
    intr: &CameraIntrinsics,
) -> Vec<FrameId> {
    poses
        .iter()
        .filter(|p| {
            let cam = p.pose.to_camera_point(&fruit.center_vec());
            if !(cam.z > intr.min_depth && cam.z <= intr.max_depth) {
                return false;
            }
            match project_point(&fruit.center_vec(), &p.pose, intr) {
                Some((u, v)) => {
                    u >= 0.0 && u < intr.width as f64 && v >= 0.0 && v < intr.height as f64
                }
                None => false,
            }
        })
        .map(|p| p.frame_id)
        .collect()
}

/// Longest run of consecutive frame ids, returned as (start, length).
fn longest_run(frames: &[FrameId]) -> (FrameId, usize) {
    let mut best = (0, 0);
    let mut run_start = 0;
    let mut run_len = 0;
    for (i, &f) in frames.iter().enumerate() {
        if i == 0 || f != frames[i - 1] + 1 {
            run_start = f;
            run_len = 0;
        }
        run_len += 1;
        if run_len > best.1 {
            best = (run_start, run_len);
        }
    }
    best
}

#[test]
fn criterion_5_double_counting_regression() {
    let _serial = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let mut gate = Gate::open("criterion 5 (double-counting regression)");

    let scene = SceneSpec::default();
    let traj = TrajectorySpec::default();
    let intr = CameraIntrinsics::default();
    let seed = 7u64;

    // Pick a fruit with a long unbroken visibility window and occlude the
    // middle 3 frames, leaving enough clean frames on both sides for the
    // genuine track to stay reliable.
    let fruits = generate_scene(&scene, seed).expect("scene");
    let poses = generate_trajectory(&scene, &traj).expect("trajectory");
    let target = fruits
        .iter()
        .filter_map(|f| {
            let (start, len) = longest_run(&visible_frames(f, &poses, &intr));
            (len >= 9).then_some((f.id, start, len))
        })
        .next()
        .expect("some fruit is visible for at least 9 consecutive frames");
    let (fruit_id, window_start, window_len) = target;
    let occlusion_start = window_start + (window_len as FrameId - 3) / 2;

    let occluded_noise = NoiseSpec {
        scripted_occluder: Some(ScriptedOccluder {
            fruit_id,
            start_frame: occlusion_start,
            frames: 3,
            coverage: 0.6,
            depth_offset: 0.15,
        }),
        ..NoiseSpec::none()
    };

    let run = |noise: &NoiseSpec| {
        let sim = simulate(&scene, &traj, noise, &intr, seed).expect("simulate");
        let out = run_on_frames(
            &sim.frames,
            &sim.intrinsics,
            &TrackerConfig::default(),
            &YieldConfig::default(),
        )
        .expect("pipeline");
        match_to_ground_truth(&out.reliable_tracks, &sim.fruits, DEFAULT_MATCH_RADIUS)
            .unmatched_tracks
            .len()
    };

    let dupes_occluded = run(&occluded_noise);
    let dupes_clean = run(&NoiseSpec::none());

    gate.check(
        dupes_occluded >= 1,
        format!(
            "occluder (coverage 0.6, 0.15 m offset, frames {occlusion_start}..{} on fruit \
             {fruit_id}) → {dupes_occluded} duplicate track(s) (want ≥ 1)",
            occlusion_start + 2
        ),
    );
    gate.check(
        dupes_clean == 0,
        format!("occluder disabled → {dupes_clean} duplicate tracks (want 0)"),
    );

    gate.close(None);
}

// ============================================================================
// Criterion 6: metric fidelity
// ============================================================================

#[test]
fn criterion_6_metric_fidelity() {
    let mut gate = Gate::open("criterion 6 (metric fidelity)");

    let fruit = |id: u64, weight: Option<f64>| GroundTruthFruit {
        id,
        center: [id as f64, 0.0, 0.0],
        diameter: 0.03,
        class_id: 1,
        weight,
    };
    let report = |count: usize, avg: Option<f64>| YieldReport {
        count,
        entries: Vec::new(),
        total_weight_g: avg.map_or(0.0, |a| a * count as f64),
        average_weight_g: avg,
        rejections: FilterStats::default(),
    };

    // Estimated 94 against 89 true.
    let truth: Vec<GroundTruthFruit> = (0..89).map(|id| fruit(id, None)).collect();
    let matching = match_to_ground_truth(&[], &truth, DEFAULT_MATCH_RADIUS);
    let m = compute_metrics(&report(94, None), &truth, &matching);
    let err = percent(m.count_error.expect("true count > 0"));
    let acc = percent(m.counting_accuracy.expect("true count > 0"));
    gate.check(
        err == "5.6" && acc == "94.4",
        format!("count 94 vs 89 → error {err}%, accuracy {acc}% (want 5.6/94.4)"),
    );

    // Average weight 21.53 g estimated against 19.14 g true.
    let truth: Vec<GroundTruthFruit> = (0..4).map(|id| fruit(id, Some(19.14))).collect();
    let matching = match_to_ground_truth(&[], &truth, DEFAULT_MATCH_RADIUS);
    let m = compute_metrics(&report(4, Some(21.53)), &truth, &matching);
    let werr = percent(m.avg_weight_error.expect("weights present"));
    gate.check(werr == "12.5", format!("avg weight 21.53 vs 19.14 g → error {werr}% (want 12.5)"));

    // Frame-sample totals 82 tracked over 193 visible.
    let sample = FrameSampleReport { rows: Vec::new(), total_gt: 193, total_tracks: 82 };
    let ratio = percent(sample.ratio().expect("nonzero truth"));
    gate.check(ratio == "42.5", format!("window totals 82/193 → {ratio}% (want 42.5)"));

    gate.close(None);
}

// ============================================================================
// Criterion 7: invariant suites (≥ 100 random cases each)
// ============================================================================

const CASES: u32 = 128;

fn prop_config() -> PropConfig {
    PropConfig { cases: CASES, failure_persistence: None, ..PropConfig::default() }
}

/// Relative paths of every file under `root`, sorted.
fn dir_files(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) {
        for entry in std::fs::read_dir(dir).expect("read_dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

/// Same simulation seed twice → byte-identical exported trees.
fn suite_determinism() -> Result<(), String> {
    let intr = CameraIntrinsics {
        fx: 60.0,
        fy: 60.0,
        cx: 32.0,
        cy: 24.0,
        width: 64,
        height: 48,
        ..CameraIntrinsics::default()
    };
    let scene = SceneSpec {
        lane_length: 1.2,
        fruit_count: 4,
        fruits_per_cluster: 2,
        cluster_spread: 0.05,
        min_spacing: 0.08,
        height_min: 0.92,
        height_max: 1.08,
        ..SceneSpec::default()
    };
    let traj = TrajectorySpec { frame_rate: 10.0, ..TrajectorySpec::default() };
    let noise = NoiseSpec::default();

    let mut runner = TestRunner::new(prop_config());
    runner
        .run(&any::<u64>(), |seed| {
            let dir = tempfile::tempdir().expect("tempdir");
            let (path_a, path_b) = (dir.path().join("a"), dir.path().join("b"));
            for path in [&path_a, &path_b] {
                let sim = simulate(&scene, &traj, &noise, &intr, seed)
                    .map_err(|e| TestCaseError::fail(e.to_string()))?;
                export(&sim, path).map_err(|e| TestCaseError::fail(e.to_string()))?;
            }
            let files_a = dir_files(&path_a);
            prop_assert_eq!(&files_a, &dir_files(&path_b), "file lists differ (seed {})", seed);
            for rel in files_a {
                let bytes_a = std::fs::read(path_a.join(&rel)).expect("read a");
                let bytes_b = std::fs::read(path_b.join(&rel)).expect("read b");
                prop_assert!(bytes_a == bytes_b, "bytes differ in {:?} (seed {})", rel, seed);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// A track needs 3 associations to count, so the reliable-track count can
/// never exceed a third of all detections fed in.
fn suite_association_bound() -> Result<(), String> {
    let frames = prop::collection::vec(
        prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64), 0..6),
        1..10,
    );
    let mut runner = TestRunner::new(prop_config());
    runner
        .run(&frames, |frames| {
            let mut store = TrackStore::new(TrackerConfig::default()).expect("default config");
            let mut total = 0usize;
            for (i, centers) in frames.iter().enumerate() {
                let dets: Vec<Detection3D> = centers
                    .iter()
                    .map(|&(x, y, z)| det3(i as FrameId, [x, y, z], [0.03; 3]))
                    .collect();
                total += dets.len();
                store.process_frame(i as FrameId, &dets).expect("process");
            }
            let reliable = store.reliable_tracks().len();
            prop_assert!(
                reliable <= total / 3,
                "{} reliable tracks from {} detections",
                reliable,
                total
            );
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Tightening the yield filter (higher volume floor, narrower class set)
/// only ever removes tracks, and kept + rejected always partitions the
/// input.
fn suite_filter_monotonicity() -> Result<(), String> {
    let tracks = prop::collection::vec(
        (
            (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64),
            (0.005..0.06f64, 0.005..0.06f64, 0.005..0.06f64),
            0u32..3,
        ),
        0..40,
    );
    let strategy = (tracks, 0.0..1e-4f64, 0.0..1e-4f64);
    let mut runner = TestRunner::new(prop_config());
    runner
        .run(&strategy, |(specs, v1, v2)| {
            let tracks: Vec<TrackRecord> = specs
                .iter()
                .enumerate()
                .map(|(i, &((x, y, z), (w, h, l), class_id))| TrackRecord {
                    id: i as TrackId,
                    center: [x, y, z],
                    extents: [w, h, l],
                    class_id,
                    n_assoc: 3,
                    created_frame: 0,
                    last_matched_frame: 0,
                })
                .collect();
            let loose = YieldConfig {
                region: RegionFilter::default(),
                min_volume: v1.min(v2),
                target_class: None,
                weight_model: WeightModelChoice::Paper,
            };
            let tight = YieldConfig {
                min_volume: v1.max(v2),
                target_class: Some(1),
                ..loose.clone()
            };
            let (kept_loose, stats_loose) = filter_tracks(&tracks, &loose);
            let (kept_tight, stats_tight) = filter_tracks(&tracks, &tight);
            prop_assert_eq!(kept_loose.len() + stats_loose.total(), tracks.len());
            prop_assert_eq!(kept_tight.len() + stats_tight.total(), tracks.len());
            let loose_ids: BTreeSet<TrackId> = kept_loose.iter().map(|t| t.id).collect();
            for track in &kept_tight {
                prop_assert!(
                    loose_ids.contains(&track.id),
                    "track {} kept by the tighter filter only",
                    track.id
                );
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Poses, boxes, ground truth, and depth images survive a disk round trip
/// unchanged.
fn suite_round_trip_io() -> Result<(), String> {
    let poses = prop::collection::vec(
        ((-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64), (-3.1..3.1f64, -1.5..1.5f64, -3.1..3.1f64)),
        0..12,
    );
    let boxes = prop::collection::vec(
        (0.0..848.0f64, 0.0..480.0f64, 0.5..60.0f64, 0.5..60.0f64, 0u32..3, 0.0..=1.0f64),
        0..15,
    );
    let fruits = prop::collection::vec(
        (
            (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64),
            0.01..0.08f64,
            1u32..3,
            prop::option::of(0.1..500.0f64),
        ),
        0..15,
    );
    let depth = (1u32..20, 1u32..14, any::<i64>()).prop_flat_map(|(w, h, frame_id)| {
        prop::collection::vec(any::<u16>(), (w * h) as usize)
            .prop_map(move |values| (w, h, frame_id, values))
    });
    let strategy = (poses, boxes, fruits, depth);

    let mut runner = TestRunner::new(prop_config());
    runner
        .run(&strategy, |(poses, boxes, fruits, (w, h, frame_id, values))| {
            let dir = tempfile::tempdir().expect("tempdir");

            let pose_records: Vec<PoseRecord> = poses
                .iter()
                .enumerate()
                .map(|(i, &((tx, ty, tz), (r, p, y)))| PoseRecord {
                    frame_id: i as FrameId,
                    timestamp: i as f64 * 0.1,
                    pose: Pose6D::new(
                        Vector3::new(tx, ty, tz),
                        UnitQuaternion::from_euler_angles(r, p, y),
                    ),
                })
                .collect();
            let path = dir.path().join("poses.jsonl");
            write_jsonl(&path, &pose_records).expect("write poses");
            let back: Vec<PoseRecord> = read_jsonl(&path).expect("read poses");
            prop_assert_eq!(&back, &pose_records);

            let box_records: Vec<BBox2D> = boxes
                .iter()
                .enumerate()
                .map(|(i, &(u, v, du, dv, class_id, confidence))| BBox2D {
                    frame_id: i as FrameId,
                    u,
                    v,
                    du,
                    dv,
                    class_id,
                    confidence,
                })
                .collect();
            let path = dir.path().join("detections.jsonl");
            write_jsonl(&path, &box_records).expect("write boxes");
            let back: Vec<BBox2D> = read_jsonl(&path).expect("read boxes");
            prop_assert_eq!(&back, &box_records);

            let fruit_records: Vec<GroundTruthFruit> = fruits
                .iter()
                .enumerate()
                .map(|(i, &((x, y, z), diameter, class_id, weight))| GroundTruthFruit {
                    id: i as u64,
                    center: [x, y, z],
                    diameter,
                    class_id,
                    weight,
                })
                .collect();
            let path = dir.path().join("ground_truth.jsonl");
            write_jsonl(&path, &fruit_records).expect("write fruits");
            let back: Vec<GroundTruthFruit> = read_jsonl(&path).expect("read fruits");
            prop_assert_eq!(&back, &fruit_records);

            let frame = DepthFrame { frame_id, width: w, height: h, values };
            let path = dir.path().join("depth.pgm");
            write_depth_pgm(&frame, &path).expect("write depth");
            let back = read_depth_pgm(&path).expect("read depth");
            prop_assert_eq!(&back, &frame);

            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// A region whose pixels are more than half invalid yields no depth; at
/// exactly half or less (with valid survivors) it yields the plateau depth.
fn suite_majority_invalid() -> Result<(), String> {
    let strategy = (2.0..62.0f64, 2.0..46.0f64, 2.0..40.0f64, 2.0..40.0f64, 71u16..1000);
    let intr = CameraIntrinsics {
        fx: 60.0,
        fy: 60.0,
        cx: 32.0,
        cy: 24.0,
        width: 64,
        height: 48,
        ..CameraIntrinsics::default()
    };

    let mut runner = TestRunner::new(prop_config());
    runner
        .run(&strategy, |(u, v, du, dv, raw)| {
            // Clamped integer pixel bounds, recomputed independently.
            let u0 = (u - du / 2.0).floor().max(0.0) as i64;
            let u1 = (((u + du / 2.0).ceil()) as i64).min(intr.width as i64);
            let v0 = (v - dv / 2.0).floor().max(0.0) as i64;
            let v1 = (((v + dv / 2.0).ceil()) as i64).min(intr.height as i64);
            prop_assert!(u0 < u1 && v0 < v1, "strategy produced an empty region");
            let roi: Vec<(u32, u32)> = (v0..v1)
                .flat_map(|row| (u0..u1).map(move |col| (col as u32, row as u32)))
                .collect();
            let n = roi.len();

            let bbox = BBox2D { frame_id: 0, u, v, du, dv, class_id: 1, confidence: 1.0 };
            let mut frame = DepthFrame::empty(0, intr.width, intr.height);
            for &(col, row) in &roi {
                frame.set(col, row, raw);
            }

            // Strictly more than half invalid → rejected.
            for &(col, row) in roi.iter().take(n / 2 + 1) {
                frame.set(col, row, 0);
            }
            prop_assert!(
                roi_median_depth(&frame, &bbox, &intr).is_none(),
                "{} of {} pixels invalid but a depth came back",
                n / 2 + 1,
                n
            );

            // Half or less invalid → the valid plateau depth comes back.
            for &(col, row) in &roi {
                frame.set(col, row, raw);
            }
            for &(col, row) in roi.iter().take(n / 2) {
                frame.set(col, row, 0);
            }
            let got = roi_median_depth(&frame, &bbox, &intr);
            let want = raw as f64 * intr.depth_scale;
            prop_assert!(
                got.is_some_and(|z| (z - want).abs() <= 1e-12),
                "expected {} m, got {:?}",
                want,
                got
            );

            Ok(())
        })
        .map_err(|e| e.to_string())
}

#[test]
fn criterion_7_invariant_suites() {
    let mut gate = Gate::open("criterion 7 (invariant suites)");

    let suites: [(&str, fn() -> Result<(), String>); 5] = [
        ("determinism", suite_determinism),
        ("association bound", suite_association_bound),
        ("filter monotonicity", suite_filter_monotonicity),
        ("round-trip I/O", suite_round_trip_io),
        ("majority-invalid rejection", suite_majority_invalid),
    ];
    for (name, suite) in suites {
        match suite() {
            Ok(()) => gate.check(true, format!("{name} ({CASES} cases)")),
            Err(e) => gate.check(false, format!("{name}: {e}")),
        }
    }

    gate.close(None);
}
