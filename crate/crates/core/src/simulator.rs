//! Deterministic synthetic sequences with known ground truth.
//!
//! Static cuboids stand on a flat ground plane; a camera drives past them
//! and "detects" each visible object once per frame. Every random draw comes
//! from its own ChaCha stream keyed by `(frame, object, kind)`, so adding an
//! object or a frame leaves the other draws untouched.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::{annotate_sequence, visible_box, FrameAnnotation, VisibilityConfig};
use crate::association::Track;
use crate::dataio::{DetectionRecord, Pixel, Trajectory};
use crate::geometry::{wrap_angle, Box2D, Dimensions3D, Pose, ProjectionMatrix, YawAngle};
use crate::landmark::Landmark;

/// Camera height above the ground; objects sit at `y = CAMERA_HEIGHT`.
pub const CAMERA_HEIGHT: f64 = 1.65;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("infeasible scene: object {0} is never visible from the trajectory")]
    InfeasibleScene(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectorySpec {
    /// Forward along `+z`, `step` meters per frame.
    Straight { step: f64 },
    /// Constant-curvature turn; positive radius turns right.
    Arc { radius: f64, step: f64 },
    /// Piecewise-linear path through `[x, z, yaw]` keyframes, sampled
    /// evenly over the frame count.
    Waypoints { points: Vec<[f64; 3]> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma_z: f64,
    /// Radians.
    pub sigma_yaw: f64,
    pub sigma_px: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_z: 0.0,
            sigma_yaw: 0.0,
            sigma_px: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutlierMagnitude {
    pub dz: f64,
    pub dyaw: f64,
}

impl Default for OutlierMagnitude {
    fn default() -> Self {
        Self { dz: 20.0, dyaw: 0.0 }
    }
}

/// `score = base · exp(−decay · depth)`, clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreModel {
    pub base: f64,
    pub decay: f64,
}

impl Default for ScoreModel {
    fn default() -> Self {
        Self {
            base: 0.95,
            decay: 0.004,
        }
    }
}

impl ScoreModel {
    pub fn score(&self, depth: f64) -> f64 {
        (self.base * (-self.decay * depth).exp()).clamp(0.0, 1.0)
    }
}

/// Emitted `σ = offset + slope · depth`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaModel {
    pub offset: f64,
    pub slope: f64,
}

/// Pinhole intrinsics plus the stereo-rig offset column of KITTI's `P2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub offset: [f64; 3],
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            fx: 721.5377,
            fy: 721.5377,
            cx: 609.5593,
            cy: 172.854,
            offset: [44.85728, 0.2163791, 0.002745884],
        }
    }
}

impl CameraModel {
    pub fn projection(&self) -> ProjectionMatrix {
        ProjectionMatrix::from_row_slice(&[
            self.fx,
            0.0,
            self.cx,
            self.offset[0],
            0.0,
            self.fy,
            self.cy,
            self.offset[1],
            0.0,
            0.0,
            1.0,
            self.offset[2],
        ])
        .expect("P[2][2] = 1")
    }
}

/// Random placement relative to the camera at a random anchor frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementConfig {
    pub ahead_min: f64,
    pub ahead_max: f64,
    pub lateral_min: f64,
    pub lateral_max: f64,
    /// Minimum ground distance between objects.
    pub min_separation: f64,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            ahead_min: 15.0,
            ahead_max: 45.0,
            lateral_min: 3.0,
            lateral_max: 9.0,
            min_separation: 6.0,
        }
    }
}

/// An explicitly placed object, in world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub x: f64,
    pub z: f64,
    pub yaw: f64,
    #[serde(default = "default_category")]
    pub category: String,
    /// `[h, w, l]`; car-sized when absent.
    #[serde(default)]
    pub dims: Option<[f64; 3]>,
}

fn default_category() -> String {
    "Car".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcedDropout {
    pub object: u64,
    pub frame: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    /// Randomly placed objects, in addition to `objects`.
    pub n_objects: usize,
    pub frames: u32,
    pub trajectory: TrajectorySpec,
    pub noise: NoiseConfig,
    pub dropout_prob: f64,
    pub outlier_prob: f64,
    pub outlier_magnitude: OutlierMagnitude,
    pub score_model: ScoreModel,
    pub sigma_model: Option<SigmaModel>,
    pub camera: CameraModel,
    pub visibility: VisibilityConfig,
    /// Objects farther than this are never detected.
    pub max_depth: f64,
    pub placement: PlacementConfig,
    pub objects: Vec<ObjectSpec>,
    pub forced_dropouts: Vec<ForcedDropout>,
    /// Appearance descriptor length; 0 disables descriptors.
    pub descriptor_dim: usize,
    pub descriptor_noise: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_objects: 3,
            frames: 60,
            trajectory: TrajectorySpec::Straight { step: 1.0 },
            noise: NoiseConfig::default(),
            dropout_prob: 0.0,
            outlier_prob: 0.0,
            outlier_magnitude: OutlierMagnitude::default(),
            score_model: ScoreModel::default(),
            sigma_model: None,
            camera: CameraModel::default(),
            visibility: VisibilityConfig::default(),
            max_depth: 70.0,
            placement: PlacementConfig::default(),
            objects: Vec::new(),
            forced_dropouts: Vec::new(),
            descriptor_dim: 0,
            descriptor_noise: 0.05,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.frames < 1 {
            return bad("frames must be at least 1".into());
        }
        for (name, p) in [("dropout_prob", self.dropout_prob), ("outlier_prob", self.outlier_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        let n = &self.noise;
        for (name, s) in [
            ("sigma_z", n.sigma_z),
            ("sigma_yaw", n.sigma_yaw),
            ("sigma_px", n.sigma_px),
            ("descriptor_noise", self.descriptor_noise),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("{name} = {s} must be finite and non-negative"));
            }
        }
        if !(self.max_depth > 0.0) {
            return bad("max_depth must be positive".into());
        }
        let p = &self.placement;
        if !(p.ahead_min > 0.0 && p.ahead_min <= p.ahead_max && p.lateral_min >= 0.0 && p.lateral_min <= p.lateral_max)
        {
            return bad("placement ranges must be ordered and positive".into());
        }
        match &self.trajectory {
            TrajectorySpec::Straight { step } if !step.is_finite() => {
                return bad("trajectory step must be finite".into())
            }
            TrajectorySpec::Arc { radius, step } if !(radius.abs() > 0.0 && step.is_finite()) => {
                return bad("arc radius must be non-zero".into())
            }
            TrajectorySpec::Waypoints { points } if points.is_empty() => {
                return bad("waypoint trajectory needs at least one point".into())
            }
            _ => {}
        }
        self.visibility.validate().map_err(SimError::InvalidConfig)?;
        for o in &self.objects {
            if let Some([h, w, l]) = o.dims {
                Dimensions3D::new(h, w, l).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
            }
        }
        let total = self.objects.len() + self.n_objects;
        if let Some(f) = self.forced_dropouts.iter().find(|f| f.object as usize >= total) {
            return bad(format!("forced dropout names object {} of {total}", f.object));
        }
        Ok(())
    }
}

/// Draw kinds; each gets its own stream per (frame, object).
#[derive(Debug, Clone, Copy)]
#[repr(u8)]
enum Draw {
    Placement = 0,
    Dropout = 1,
    Outlier = 2,
    Depth = 3,
    Yaw = 4,
    Pixel = 5,
    Descriptor = 6,
    DescriptorNoise = 7,
}

/// Frame slot used for per-object draws that do not belong to a frame.
const SCENE_FRAME: u64 = 0xFFFF_FFFF;

fn stream(seed: u64, frame: u64, object: u64, kind: Draw) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((frame << 32) | ((object & 0x00FF_FFFF) << 8) | kind as u64);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn camera_poses(spec: &TrajectorySpec, frames: u32) -> Vec<Pose> {
    (0..frames)
        .map(|k| {
            let k = k as f64;
            match spec {
                TrajectorySpec::Straight { step } => {
                    Pose::from_translation(Vector3::new(0.0, 0.0, k * step))
                }
                TrajectorySpec::Arc { radius, step } => {
                    let theta = k * step / radius;
                    Pose::from_yaw(
                        theta,
                        Vector3::new(radius * (1.0 - theta.cos()), 0.0, radius * theta.sin()),
                    )
                }
                TrajectorySpec::Waypoints { points } => {
                    let [x, z, yaw] = interpolate(points, k, frames);
                    Pose::from_yaw(yaw, Vector3::new(x, 0.0, z))
                }
            }
        })
        .collect()
}

fn interpolate(points: &[[f64; 3]], k: f64, frames: u32) -> [f64; 3] {
    if points.len() == 1 || frames == 1 {
        return points[0];
    }
    let s = k / (frames - 1) as f64 * (points.len() - 1) as f64;
    let i = (s.floor() as usize).min(points.len() - 2);
    let f = s - i as f64;
    let (a, b) = (points[i], points[i + 1]);
    [0, 1, 2].map(|j| a[j] + f * (b[j] - a[j]))
}

/// A ground-truth object.
#[derive(Debug, Clone, PartialEq)]
pub struct SimObject {
    pub object_id: u64,
    pub category: String,
    pub pose: Pose,
    pub dims: Dimensions3D,
}

fn car_dims(rng: &mut impl Rng) -> Dimensions3D {
    Dimensions3D {
        height: 1.5 + 0.1 * rng.random_range(-1.0..1.0),
        width: 1.6 + 0.1 * rng.random_range(-1.0..1.0),
        length: 3.9 + 0.3 * rng.random_range(-1.0..1.0),
    }
}

fn place_objects(cfg: &SimConfig, cams: &[Pose]) -> Vec<SimObject> {
    let mut objects: Vec<SimObject> = cfg
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let dims = match o.dims {
                Some([h, w, l]) => Dimensions3D::new(h, w, l).expect("validated"),
                None => car_dims(&mut stream(cfg.seed, SCENE_FRAME, i as u64, Draw::Placement)),
            };
            SimObject {
                object_id: i as u64,
                category: o.category.clone(),
                pose: Pose::from_yaw(o.yaw, Vector3::new(o.x, CAMERA_HEIGHT, o.z)),
                dims,
            }
        })
        .collect();
    let p = &cfg.placement;
    for n in 0..cfg.n_objects {
        let id = (cfg.objects.len() + n) as u64;
        let mut rng = stream(cfg.seed, SCENE_FRAME, id, Draw::Placement);
        let dims = car_dims(&mut rng);
        let mut pose = Pose::identity();
        // rejection sampling for separation; keeps the last draw if crowded
        for _ in 0..200 {
            let anchor = &cams[rng.random_range(0..cams.len())];
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let local = Vector3::new(
                side * rng.random_range(p.lateral_min..=p.lateral_max),
                CAMERA_HEIGHT,
                rng.random_range(p.ahead_min..=p.ahead_max),
            );
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let world = anchor.transform_point(&Point3::from(local));
            pose = Pose::from_yaw(yaw, Vector3::new(world.x, CAMERA_HEIGHT, world.z));
            let t = pose.translation();
            let clear = objects.iter().all(|o| {
                let d = o.pose.translation() - t;
                d.x.hypot(d.z) >= p.min_separation
            });
            if clear {
                break;
            }
        }
        objects.push(SimObject {
            object_id: id,
            category: "Car".into(),
            pose,
            dims,
        });
    }
    objects
}

/// Reference data for a simulated sequence.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub objects: Vec<SimObject>,
    /// One landmark per detected object, numbered like a built map:
    /// by `(first_frame, object_id)`. `track_id` holds the object id.
    pub landmarks: Vec<Landmark>,
    pub trajectory: Trajectory,
    pub projection: ProjectionMatrix,
}

impl GroundTruth {
    pub fn annotations(&self, vis: &VisibilityConfig) -> Vec<FrameAnnotation> {
        annotate_sequence(&self.landmarks, &self.trajectory, &self.projection, vis)
    }

    /// The object's true pose in a camera frame.
    pub fn local_pose(&self, object_id: u64, frame_id: u32) -> Option<Pose> {
        let obj = self.objects.iter().find(|o| o.object_id == object_id)?;
        Some(self.trajectory.get(frame_id)?.inverse().compose(&obj.pose))
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub ground_truth: GroundTruth,
    /// Ordered by frame, then object.
    pub detections: Vec<DetectionRecord>,
    /// `(frame, object)` keys of injected gross outliers.
    pub outliers: Vec<(u32, u64)>,
    /// `(frame, object)` keys of visible objects that were not detected.
    pub dropped: Vec<(u32, u64)>,
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn jitter_box(b: &Box2D, sigma: f64, rng: &mut impl Rng, cfg: &VisibilityConfig) -> Box2D {
    if sigma == 0.0 {
        return *b;
    }
    let mut j = Box2D {
        left: b.left + sigma * normal(rng),
        top: b.top + sigma * normal(rng),
        right: b.right + sigma * normal(rng),
        bottom: b.bottom + sigma * normal(rng),
    };
    if j.right <= j.left {
        std::mem::swap(&mut j.left, &mut j.right);
        j.right += 1.0;
    }
    if j.bottom <= j.top {
        std::mem::swap(&mut j.top, &mut j.bottom);
        j.bottom += 1.0;
    }
    j.clip(cfg.image_width, cfg.image_height).unwrap_or(*b)
}

/// Builds the scene and its detection stream.
pub fn generate(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let proj = cfg.camera.projection();
    let cams = camera_poses(&cfg.trajectory, cfg.frames);
    let objects = place_objects(cfg, &cams);
    let forced: std::collections::HashSet<(u32, u64)> =
        cfg.forced_dropouts.iter().map(|f| (f.frame, f.object)).collect();
    let base_desc: Vec<Vec<f64>> = objects
        .iter()
        .map(|o| {
            let mut rng = stream(cfg.seed, SCENE_FRAME, o.object_id, Draw::Descriptor);
            unit_vector(&mut rng, cfg.descriptor_dim)
        })
        .collect();

    let mut detections = Vec::new();
    let mut outliers = Vec::new();
    let mut dropped = Vec::new();
    let mut visible_any = vec![false; objects.len()];
    // object index -> (frames, scores)
    let mut seen: BTreeMap<usize, (Vec<u32>, Vec<f64>)> = BTreeMap::new();

    for (frame, cam) in cams.iter().enumerate() {
        let frame = frame as u32;
        let f64frame = frame as u64;
        let cam_inv = cam.inverse();
        for (i, obj) in objects.iter().enumerate() {
            let local = cam_inv.compose(&obj.pose);
            let Ok(vis) = visible_box(&local, &obj.dims, &proj, &cfg.visibility) else {
                continue;
            };
            if vis.depth > cfg.max_depth {
                continue;
            }
            visible_any[i] = true;
            let id = obj.object_id;
            let drop_draw = stream(cfg.seed, f64frame, id, Draw::Dropout).random_bool(cfg.dropout_prob);
            if drop_draw || forced.contains(&(frame, id)) {
                dropped.push((frame, id));
                continue;
            }
            let t = local.translation();
            let (u, v, depth) = proj
                .project_point(&Point3::from(*t))
                .expect("visible objects have positive depth");
            let yaw_true = wrap_angle(crate::geometry::yaw_from_rotation(local.rotation()).radians());

            let n = &cfg.noise;
            let mut depth_d = depth + n.sigma_z * normal(&mut stream(cfg.seed, f64frame, id, Draw::Depth));
            let mut yaw_d = yaw_true + n.sigma_yaw * normal(&mut stream(cfg.seed, f64frame, id, Draw::Yaw));
            let mut px = stream(cfg.seed, f64frame, id, Draw::Pixel);
            let center2d = if n.sigma_px == 0.0 {
                Pixel { u, v }
            } else {
                Pixel {
                    u: u + n.sigma_px * normal(&mut px),
                    v: v + n.sigma_px * normal(&mut px),
                }
            };
            let box2d = jitter_box(&vis.clipped, n.sigma_px, &mut px, &cfg.visibility);
            if stream(cfg.seed, f64frame, id, Draw::Outlier).random_bool(cfg.outlier_prob) {
                depth_d += cfg.outlier_magnitude.dz;
                yaw_d += cfg.outlier_magnitude.dyaw;
                outliers.push((frame, id));
            }
            // a detector never reports a point behind the camera
            depth_d = depth_d.max(0.1);
            let score = cfg.score_model.score(depth);
            let descriptor = (cfg.descriptor_dim > 0).then(|| {
                let mut rng = stream(cfg.seed, f64frame, id, Draw::DescriptorNoise);
                base_desc[i]
                    .iter()
                    .map(|x| x + cfg.descriptor_noise * normal(&mut rng))
                    .collect()
            });
            detections.push(DetectionRecord {
                frame_id: frame,
                category: obj.category.clone(),
                box2d,
                depth: depth_d,
                yaw: YawAngle::new(yaw_d),
                dims: obj.dims,
                center2d,
                score,
                sigma: cfg.sigma_model.map(|s| s.offset + s.slope * depth),
                descriptor,
                gt_id: Some(id),
            });
            let e = seen.entry(i).or_default();
            e.0.push(frame);
            e.1.push(score);
        }
    }

    if let Some(i) = visible_any.iter().position(|v| !v) {
        return Err(SimError::InfeasibleScene(objects[i].object_id));
    }

    let mut landmarks: Vec<Landmark> = seen
        .into_iter()
        .map(|(i, (frames, scores))| {
            let obj = &objects[i];
            Landmark {
                landmark_id: 0,
                track_id: obj.object_id,
                category: obj.category.clone(),
                global_pose: obj.pose,
                dims: obj.dims,
                support: frames.len(),
                first_frame: frames[0],
                last_frame: *frames.last().expect("non-empty"),
                observed_frames: frames,
                mean_score: scores.iter().sum::<f64>() / scores.len() as f64,
            }
        })
        .collect();
    landmarks.sort_by_key(|l| (l.first_frame, l.track_id));
    for (i, l) in landmarks.iter_mut().enumerate() {
        l.landmark_id = i as u64;
    }
    if landmarks.len() < objects.len() {
        log::warn!(
            "{} object(s) visible but never detected",
            objects.len() - landmarks.len()
        );
    }

    Ok(SimOutput {
        ground_truth: GroundTruth {
            objects,
            landmarks,
            trajectory: Trajectory::new(cams),
            projection: proj,
        },
        detections,
        outliers,
        dropped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationScore {
    /// Mean over tracks of the modal-id share.
    pub purity: f64,
    /// Share of objects that are the modal id of at least one track.
    pub coverage: f64,
}

/// Scores tracks against the hidden object ids carried by detections.
/// Tracks without hidden ids are ignored.
pub fn score_association(tracks: &[Track], gt_ids: &[u64]) -> AssociationScore {
    let mut purities = Vec::new();
    let mut covered = std::collections::HashSet::new();
    for t in tracks {
        let mut counts: HashMap<u64, usize> = HashMap::new();
        for o in t.observations() {
            if let Some(id) = o.detection.gt_id {
                *counts.entry(id).or_default() += 1;
            }
        }
        let total: usize = counts.values().sum();
        // ties resolved towards the smaller id for determinism
        if let Some((&id, &n)) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) {
            purities.push(n as f64 / total as f64);
            covered.insert(id);
        }
    }
    let purity = if purities.is_empty() {
        1.0
    } else {
        purities.iter().sum::<f64>() / purities.len() as f64
    };
    let coverage = if gt_ids.is_empty() {
        1.0
    } else {
        gt_ids.iter().filter(|id| covered.contains(id)).count() as f64 / gt_ids.len() as f64
    };
    AssociationScore { purity, coverage }
}
