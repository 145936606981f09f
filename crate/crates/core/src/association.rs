//! Online data association of per-frame detections into tracks.
//!
//! Each frame's detections are lifted to global poses and matched against
//! the live tracks by an optimal one-to-one assignment. The pair cost mixes
//! three cues: overlap of the track's predicted box with the detection box,
//! distance between global positions, and descriptor similarity.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment;
use crate::dataio::{DetectionRecord, FrameDetections, Trajectory};
use crate::geometry::{
    box3d_corners, iou_2d, project_box, yaw_from_rotation, yaw_to_rotation, Dimensions3D,
    GeometryError, Pose, ProjectionMatrix,
};
use crate::landmark::{fuse_observations, FusionConfig, FusionError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssociationError {
    #[error("frame {frame_id}: detection depth {depth} is not positive")]
    NonPositiveDepth { frame_id: u32, depth: f64 },
    #[error("frame {frame_id}: {source}")]
    Geometry {
        frame_id: u32,
        #[source]
        source: GeometryError,
    },
    #[error("no camera pose for frame {0}")]
    MissingCameraPose(u32),
    #[error("observation for frame {frame_id} is not after the track's last frame {last_seen}")]
    OutOfOrder { frame_id: u32, last_seen: u32 },
    #[error("invalid association config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationConfig {
    pub score_threshold: f64,
    pub iou_gate: f64,
    /// Meters.
    pub dist_gate: f64,
    pub descriptor_gate: f64,
    pub max_frame_gap: u32,
    pub w_iou: f64,
    pub w_dist: f64,
    pub w_desc: f64,
    /// Per-axis variance (m²) above which a track counts as moving.
    pub var_gate: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.7,
            iou_gate: 0.3,
            dist_gate: 3.0,
            descriptor_gate: 0.5,
            max_frame_gap: 20,
            w_iou: 0.5,
            w_dist: 0.4,
            w_desc: 0.1,
            var_gate: 1.0,
        }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<(), AssociationError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(AssociationError::InvalidConfig(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("score_threshold", self.score_threshold)?;
        unit("iou_gate", self.iou_gate)?;
        unit("descriptor_gate", self.descriptor_gate)?;
        if !(self.dist_gate > 0.0 && self.dist_gate.is_finite()) {
            return Err(AssociationError::InvalidConfig(format!(
                "dist_gate = {} must be positive",
                self.dist_gate
            )));
        }
        if !(self.var_gate > 0.0) {
            return Err(AssociationError::InvalidConfig("var_gate must be positive".into()));
        }
        let ws = [self.w_iou, self.w_dist, self.w_desc];
        if ws.iter().any(|w| !(*w >= 0.0)) || (ws.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(AssociationError::InvalidConfig(format!(
                "cost weights {ws:?} must be non-negative and sum to 1"
            )));
        }
        Ok(())
    }
}

/// A detection lifted into camera and world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub detection: DetectionRecord,
    /// Object pose in the camera frame of its detection.
    pub local_pose: Pose,
    /// `camera_pose ∘ local_pose`.
    pub global_pose: Pose,
    pub weight: f64,
}

impl Observation {
    pub fn frame_id(&self) -> u32 {
        self.detection.frame_id
    }

    pub fn global_yaw(&self) -> f64 {
        yaw_from_rotation(self.global_pose.rotation()).radians()
    }
}

/// Back-projects the detection centre at its depth, attaches the yaw, and
/// moves the result into the world frame with the camera pose.
pub fn lift_detection(
    d: &DetectionRecord,
    proj: &ProjectionMatrix,
    cam: &Pose,
) -> Result<Observation, AssociationError> {
    if !(d.depth > 0.0) {
        return Err(AssociationError::NonPositiveDepth {
            frame_id: d.frame_id,
            depth: d.depth,
        });
    }
    let centre = proj
        .back_project(d.center2d.u, d.center2d.v, d.depth)
        .map_err(|source| AssociationError::Geometry {
            frame_id: d.frame_id,
            source,
        })?;
    let local_pose = Pose::from_parts_unchecked(yaw_to_rotation(d.yaw.radians()), centre.coords);
    Ok(Observation {
        detection: d.clone(),
        global_pose: cam.compose(&local_pose),
        local_pose,
        weight: d.score.max(crate::landmark::MIN_WEIGHT),
    })
}

/// Observations believed to belong to one physical object.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub track_id: u64,
    pub category: String,
    observations: Vec<Observation>,
    predicted_global_pose: Pose,
    dims: Dimensions3D,
    descriptor_sum: Option<Vec<f64>>,
    /// No longer matchable: the frame gap exceeded `max_frame_gap`.
    pub frozen: bool,
    /// Global position varies too much for a static object.
    pub dynamic: bool,
}

impl Track {
    pub fn new(track_id: u64, first: Observation) -> Self {
        Self {
            track_id,
            category: first.detection.category.clone(),
            predicted_global_pose: first.global_pose,
            dims: first.detection.dims,
            descriptor_sum: first.detection.descriptor.clone(),
            observations: vec![first],
            frozen: false,
            dynamic: false,
        }
    }

    /// Builds a track from observations in strictly ascending frame order.
    pub fn from_observations(
        track_id: u64,
        observations: Vec<Observation>,
        fusion: &FusionConfig,
    ) -> Result<Self, AssociationError> {
        let mut it = observations.into_iter();
        let first = it.next().ok_or(FusionError::EmptyInput)?;
        let mut track = Track::new(track_id, first);
        for o in it {
            track.push(o, fusion)?;
        }
        Ok(track)
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn last_seen(&self) -> u32 {
        self.observations.last().expect("track is never empty").frame_id()
    }

    pub fn first_seen(&self) -> u32 {
        self.observations[0].frame_id()
    }

    pub fn predicted_global_pose(&self) -> &Pose {
        &self.predicted_global_pose
    }

    pub fn dims(&self) -> &Dimensions3D {
        &self.dims
    }

    /// Mean descriptor, when every observation so far carried one.
    pub fn descriptor(&self) -> Option<Vec<f64>> {
        let n = self.observations.len() as f64;
        self.descriptor_sum
            .as_ref()
            .map(|s| s.iter().map(|v| v / n).collect())
    }

    pub fn is_alive(&self, frame_id: u32, max_frame_gap: u32) -> bool {
        !self.frozen && frame_id.saturating_sub(self.last_seen()) <= max_frame_gap
    }

    /// Appends an observation and refreshes the running fused estimate.
    pub fn push(&mut self, obs: Observation, fusion: &FusionConfig) -> Result<(), AssociationError> {
        if obs.frame_id() <= self.last_seen() {
            return Err(AssociationError::OutOfOrder {
                frame_id: obs.frame_id(),
                last_seen: self.last_seen(),
            });
        }
        self.descriptor_sum = match (self.descriptor_sum.take(), &obs.detection.descriptor) {
            (Some(sum), Some(d)) if sum.len() == d.len() => {
                Some(sum.iter().zip(d).map(|(a, b)| a + b).collect())
            }
            _ => None,
        };
        self.observations.push(obs);
        self.refresh_prediction(fusion)
    }

    fn refresh_prediction(&mut self, fusion: &FusionConfig) -> Result<(), AssociationError> {
        let cfg = FusionConfig {
            min_support: 1,
            ..*fusion
        };
        let weights: Vec<f64> = self.observations.iter().map(|o| o.weight).collect();
        match fuse_observations(&self.observations, &weights, &cfg)? {
            Ok(fused) => {
                self.predicted_global_pose = fused.pose;
                self.dims = fused.dims;
            }
            Err(_) => {
                let last = self.observations.last().expect("non-empty");
                self.predicted_global_pose = last.global_pose;
                self.dims = last.detection.dims;
            }
        }
        Ok(())
    }

    /// Robust per-axis variance of the global positions, `(1.4826·MAD)²`.
    pub fn position_spread(&self) -> Vector3<f64> {
        let mut out = Vector3::zeros();
        for axis in 0..3 {
            let vals: Vec<f64> = self
                .observations
                .iter()
                .map(|o| o.global_pose.translation()[axis])
                .collect();
            let med = median(vals.clone());
            let mad = median(vals.iter().map(|v| (v - med).abs()).collect());
            out[axis] = (1.4826 * mad).powi(2);
        }
        out
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Cost of pairing a track with an observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cost {
    Feasible(f64),
    Infeasible,
}

fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Track's fused pose reprojected into the current frame.
pub fn predicted_box(
    track: &Track,
    proj: &ProjectionMatrix,
    cam: &Pose,
) -> Option<crate::geometry::Box2D> {
    let local = cam.inverse().compose(track.predicted_global_pose());
    project_box(&box3d_corners(&local, track.dims()), proj).ok()
}

/// Convex mix of `1 − IoU`, normalized global distance and `1 − cosine`
/// similarity. The descriptor term is dropped (weights renormalized) when
/// either side lacks a descriptor. Infeasible when categories differ, when
/// IoU and distance gates both fail, or when descriptor similarity falls
/// below `descriptor_gate`.
pub fn association_cost(
    track: &Track,
    obs: &Observation,
    proj: &ProjectionMatrix,
    cam: &Pose,
    cfg: &AssociationConfig,
) -> Cost {
    if track.category != obs.detection.category {
        return Cost::Infeasible;
    }
    let iou = predicted_box(track, proj, cam)
        .and_then(|b| iou_2d(&b, &obs.detection.box2d).ok())
        .unwrap_or(0.0);
    let dist = (track.predicted_global_pose().translation() - obs.global_pose.translation()).norm();
    if iou < cfg.iou_gate && dist > cfg.dist_gate {
        return Cost::Infeasible;
    }
    let similarity = match (track.descriptor(), &obs.detection.descriptor) {
        (Some(a), Some(b)) => cosine_similarity(&a, b),
        _ => None,
    };
    let mut cost = cfg.w_iou * (1.0 - iou) + cfg.w_dist * (dist / cfg.dist_gate).min(1.0);
    let mut total_w = cfg.w_iou + cfg.w_dist;
    if let Some(sim) = similarity {
        if sim < cfg.descriptor_gate {
            return Cost::Infeasible;
        }
        cost += cfg.w_desc * (1.0 - sim.max(0.0));
        total_w += cfg.w_desc;
    }
    if total_w > 0.0 {
        Cost::Feasible((cost / total_w).clamp(0.0, 1.0))
    } else {
        Cost::Feasible(0.0)
    }
}

/// Matching decided for one frame.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrameAssignment {
    /// `(track index, observation index)`.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_observations: Vec<usize>,
}

/// Optimal assignment of a frame's observations to the live tracks.
pub fn associate_frame(
    tracks: &[Track],
    observations: &[Observation],
    frame_id: u32,
    proj: &ProjectionMatrix,
    cam: &Pose,
    cfg: &AssociationConfig,
) -> FrameAssignment {
    let live: Vec<usize> = (0..tracks.len())
        .filter(|&i| tracks[i].is_alive(frame_id, cfg.max_frame_gap))
        .collect();
    let costs: Vec<Vec<assignment::Entry>> = live
        .iter()
        .map(|&ti| {
            observations
                .iter()
                .map(|o| match association_cost(&tracks[ti], o, proj, cam, cfg) {
                    Cost::Feasible(c) => Some(c),
                    Cost::Infeasible => None,
                })
                .collect()
        })
        .collect();
    let pairs = if live.is_empty() {
        Vec::new()
    } else {
        assignment::solve(&costs)
    };
    let mut matched = vec![false; observations.len()];
    let matches = pairs
        .into_iter()
        .map(|(r, c)| {
            matched[c] = true;
            (live[r], c)
        })
        .collect();
    FrameAssignment {
        matches,
        unmatched_observations: (0..observations.len()).filter(|&i| !matched[i]).collect(),
    }
}

/// Stateful frame-by-frame tracker.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: AssociationConfig,
    fusion: FusionConfig,
    tracks: Vec<Track>,
    next_id: u64,
}

impl Tracker {
    pub fn new(cfg: AssociationConfig, fusion: FusionConfig) -> Result<Self, AssociationError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            fusion,
            tracks: Vec::new(),
            next_id: 0,
        })
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Processes one frame. Detections below the score threshold are
    /// dropped. Returns the ids of tracks spawned in this frame.
    pub fn step(
        &mut self,
        frame_id: u32,
        detections: &[DetectionRecord],
        proj: &ProjectionMatrix,
        cam: &Pose,
    ) -> Result<Vec<u64>, AssociationError> {
        for t in &mut self.tracks {
            if !t.frozen && frame_id.saturating_sub(t.last_seen()) > self.cfg.max_frame_gap {
                t.frozen = true;
            }
        }
        let observations = detections
            .iter()
            .filter(|d| d.score >= self.cfg.score_threshold)
            .map(|d| lift_detection(d, proj, cam))
            .collect::<Result<Vec<_>, _>>()?;
        let plan = associate_frame(&self.tracks, &observations, frame_id, proj, cam, &self.cfg);

        let mut slots: Vec<Option<Observation>> = observations.into_iter().map(Some).collect();
        for &(ti, oi) in &plan.matches {
            let obs = slots[oi].take().expect("each observation matched once");
            self.tracks[ti].push(obs, &self.fusion)?;
        }
        let mut spawned = Vec::new();
        for oi in plan.unmatched_observations {
            let obs = slots[oi].take().expect("unmatched observation present");
            let id = self.next_id;
            self.next_id += 1;
            self.tracks.push(Track::new(id, obs));
            spawned.push(id);
        }
        Ok(spawned)
    }

    /// Flags moving tracks and returns all tracks ordered by id.
    pub fn finish(mut self) -> Vec<Track> {
        for t in &mut self.tracks {
            let spread = t.position_spread();
            t.dynamic = t.observations.len() >= 3 && spread.iter().any(|v| *v > self.cfg.var_gate);
        }
        self.tracks.sort_by_key(|t| t.track_id);
        self.tracks
    }
}

/// Runs the tracker over a whole sequence (frames in ascending order).
pub fn run_association(
    frames: &[FrameDetections],
    trajectory: &Trajectory,
    proj: &ProjectionMatrix,
    cfg: &AssociationConfig,
    fusion: &FusionConfig,
) -> Result<Vec<Track>, AssociationError> {
    let mut tracker = Tracker::new(*cfg, *fusion)?;
    let mut ordered: Vec<&FrameDetections> = frames.iter().collect();
    ordered.sort_by_key(|f| f.frame_id);
    for f in ordered {
        let cam = trajectory
            .get(f.frame_id)
            .ok_or(AssociationError::MissingCameraPose(f.frame_id))?;
        tracker.step(f.frame_id, &f.detections, proj, cam)?;
    }
    Ok(tracker.finish())
}
