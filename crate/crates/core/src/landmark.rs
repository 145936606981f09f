//! Fusion of an associated track into a single static landmark.
//!
//! Each observation's global pose is weighted (detection score or inverse
//! variance), gross outliers are removed around a weighted median, and the
//! remaining poses are averaged: translation per axis, rotation by projecting
//! the weighted mean matrix back onto SO(3). The fused rotation is then reduced
//! to its yaw.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{Observation, Track};
use crate::geometry::{
    wrap_angle, yaw_from_rotation, yaw_to_rotation, Dimensions3D, Pose, YawAngle,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("inverse-variance weighting needs sigma, missing in frame {frame_id}")]
    MissingSigma { frame_id: u32 },
    #[error("empty input")]
    EmptyInput,
    #[error("weights sum to zero")]
    ZeroWeightSum,
    #[error("{values} values but {weights} weights")]
    LengthMismatch { values: usize, weights: usize },
    #[error("mean rotation collapsed (singular values {0:?})")]
    DegenerateMean([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    #[default]
    Score,
    InverseVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightPolicy {
    pub mode: WeightMode,
    pub sigma_floor: f64,
}

impl Default for WeightPolicy {
    fn default() -> Self {
        Self {
            mode: WeightMode::Score,
            sigma_floor: 1e-3,
        }
    }
}

/// Outlier gates and support requirement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    /// Meters around the weighted median global `z`.
    pub depth_tol: f64,
    /// Radians around the weighted circular median yaw.
    pub yaw_tol: f64,
    pub min_support: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            depth_tol: 2.0,
            yaw_tol: 30f64.to_radians(),
            min_support: 2,
        }
    }
}

/// Smallest weight handed out; keeps score-weighted observations positive.
pub const MIN_WEIGHT: f64 = 1e-12;

pub fn observation_weight(obs: &Observation, policy: &WeightPolicy) -> Result<f64, FusionError> {
    match policy.mode {
        WeightMode::Score => Ok(obs.detection.score.max(MIN_WEIGHT)),
        WeightMode::InverseVariance => {
            let sigma = obs.detection.sigma.ok_or(FusionError::MissingSigma {
                frame_id: obs.detection.frame_id,
            })?;
            let s = sigma.max(policy.sigma_floor);
            Ok(1.0 / (s * s))
        }
    }
}

fn normalized(weights: &[f64], values: usize) -> Result<Vec<f64>, FusionError> {
    if values == 0 {
        return Err(FusionError::EmptyInput);
    }
    if weights.len() != values {
        return Err(FusionError::LengthMismatch {
            values,
            weights: weights.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(FusionError::ZeroWeightSum);
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// `Σ wᵢ·zᵢ / Σ wᵢ`.
pub fn weighted_depth_mean(depths: &[f64], weights: &[f64]) -> Result<f64, FusionError> {
    let n = normalized(weights, depths.len())?;
    Ok(depths.iter().zip(&n).map(|(z, w)| z * w).sum())
}

fn weighted_vector_mean(values: &[Vector3<f64>], weights: &[f64]) -> Result<Vector3<f64>, FusionError> {
    let n = normalized(weights, values.len())?;
    Ok(values
        .iter()
        .zip(&n)
        .fold(Vector3::zeros(), |acc, (v, w)| acc + v * *w))
}

/// Weighted chordal mean of rotations: the proper rotation closest (in
/// Frobenius norm) to `M = Σ wᵢ·Rᵢ / Σ wᵢ`, i.e. `U·diag(1, 1, det(UVᵀ))·Vᵀ`
/// from the SVD `M = U·D·Vᵀ`.
pub fn rotation_average(
    rotations: &[Matrix3<f64>],
    weights: &[f64],
) -> Result<Matrix3<f64>, FusionError> {
    let n = normalized(weights, rotations.len())?;
    let mean = rotations
        .iter()
        .zip(&n)
        .fold(Matrix3::zeros(), |acc, (r, w)| acc + r * *w);
    // singular values come back sorted in descending order
    let svd = mean.svd(true, true);
    let sv = svd.singular_values;
    if sv[0] < 1e-9 || sv[1] < 1e-9 {
        return Err(FusionError::DegenerateMean([sv[0], sv[1], sv[2]]));
    }
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let d = (u * vt).determinant().signum();
    Ok(u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt)
}

/// Weighted median as the sample minimizing `Σ wⱼ·|x − xⱼ|`; ties go to the
/// lowest index.
pub fn weighted_median(values: &[f64], weights: &[f64]) -> Result<f64, FusionError> {
    let n = normalized(weights, values.len())?;
    Ok(values[argmin_spread(values, &n, |a, b| (a - b).abs())])
}

/// Weighted circular median: the sample angle minimizing
/// `Σ wⱼ·|wrap(θ − θⱼ)|`; ties go to the lowest index.
pub fn weighted_circular_median(angles: &[f64], weights: &[f64]) -> Result<f64, FusionError> {
    let n = normalized(weights, angles.len())?;
    Ok(angles[argmin_spread(angles, &n, |a, b| wrap_angle(a - b).abs())])
}

fn argmin_spread(values: &[f64], weights: &[f64], dist: impl Fn(f64, f64) -> f64) -> usize {
    let mut best = (0usize, f64::INFINITY);
    for (i, &c) in values.iter().enumerate() {
        let s: f64 = values.iter().zip(weights).map(|(&v, &w)| w * dist(c, v)).sum();
        if s < best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Circular mean `atan2(Σ wᵢ sin θᵢ, Σ wᵢ cos θᵢ)`.
pub fn weighted_circular_mean(angles: &[f64], weights: &[f64]) -> f64 {
    let (s, c) = angles
        .iter()
        .zip(weights)
        .fold((0.0, 0.0), |(s, c), (a, w)| (s + w * a.sin(), c + w * a.cos()));
    s.atan2(c)
}

/// Result of outlier classification: indices into the observation slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutlierSplit {
    pub inliers: Vec<usize>,
    pub outliers: Vec<usize>,
    /// Fewer than `min_support` inliers remain.
    pub rejected: bool,
}

/// Keeps observations whose global `z` lies within `depth_tol` of the
/// weighted median and whose global yaw lies within `yaw_tol` of the weighted
/// circular median.
pub fn reject_outliers(
    observations: &[Observation],
    weights: &[f64],
    cfg: &FusionConfig,
) -> Result<OutlierSplit, FusionError> {
    let zs: Vec<f64> = observations.iter().map(|o| o.global_pose.translation().z).collect();
    let yaws: Vec<f64> = observations.iter().map(Observation::global_yaw).collect();
    let z_med = weighted_median(&zs, weights)?;
    let yaw_med = weighted_circular_median(&yaws, weights)?;
    let (inliers, outliers): (Vec<usize>, Vec<usize>) = (0..observations.len()).partition(|&i| {
        (zs[i] - z_med).abs() <= cfg.depth_tol && wrap_angle(yaws[i] - yaw_med).abs() <= cfg.yaw_tol
    });
    let rejected = inliers.len() < cfg.min_support.max(1);
    Ok(OutlierSplit {
        inliers,
        outliers,
        rejected,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Dynamic,
    LowSupport,
    DegenerateMean,
}

/// Why a track produced no landmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub track_id: u64,
    pub reason: RejectReason,
    pub observations: usize,
    pub inliers: usize,
}

/// A fused static object.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub landmark_id: u64,
    pub track_id: u64,
    pub category: String,
    pub global_pose: Pose,
    pub dims: Dimensions3D,
    pub support: usize,
    pub first_frame: u32,
    pub last_frame: u32,
    /// Frames of the inlier observations, ascending.
    pub observed_frames: Vec<u32>,
    pub mean_score: f64,
}

impl Landmark {
    pub fn yaw(&self) -> YawAngle {
        yaw_from_rotation(self.global_pose.rotation())
    }

    pub fn observed_in(&self, frame_id: u32) -> bool {
        self.observed_frames.binary_search(&frame_id).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Fused {
    Landmark(Landmark),
    Rejected(Rejection),
}

/// Pose, dims and score statistics of a set of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPose {
    pub pose: Pose,
    pub dims: Dimensions3D,
    pub inliers: Vec<usize>,
    pub mean_score: f64,
}

/// Outlier rejection followed by weighted averaging.
///
/// Returns `Ok(Err(reason))` when the observations cannot support a pose.
pub fn fuse_observations(
    observations: &[Observation],
    weights: &[f64],
    cfg: &FusionConfig,
) -> Result<Result<FusedPose, RejectReason>, FusionError> {
    let split = reject_outliers(observations, weights, cfg)?;
    if split.rejected {
        return Ok(Err(RejectReason::LowSupport));
    }
    let inl: Vec<&Observation> = split.inliers.iter().map(|&i| &observations[i]).collect();
    let w: Vec<f64> = split.inliers.iter().map(|&i| weights[i]).collect();

    let translations: Vec<Vector3<f64>> = inl.iter().map(|o| *o.global_pose.translation()).collect();
    let mut t = weighted_vector_mean(&translations, &w)?;
    let zs: Vec<f64> = translations.iter().map(|v| v.z).collect();
    t.z = weighted_depth_mean(&zs, &w)?;

    let rotations: Vec<Matrix3<f64>> = inl.iter().map(|o| *o.global_pose.rotation()).collect();
    let r_avg = match rotation_average(&rotations, &w) {
        Ok(r) => r,
        Err(FusionError::DegenerateMean(_)) => return Ok(Err(RejectReason::DegenerateMean)),
        Err(e) => return Err(e),
    };
    let yaw = yaw_from_rotation(&r_avg).radians();
    let pose = Pose::from_parts_unchecked(yaw_to_rotation(yaw), t);

    let dims_v: Vec<Vector3<f64>> = inl
        .iter()
        .map(|o| {
            let d = o.detection.dims;
            Vector3::new(d.height, d.width, d.length)
        })
        .collect();
    let d = weighted_vector_mean(&dims_v, &w)?;
    let dims = Dimensions3D {
        height: d.x,
        width: d.y,
        length: d.z,
    };
    let mean_score = inl.iter().map(|o| o.detection.score).sum::<f64>() / inl.len() as f64;
    Ok(Ok(FusedPose {
        pose,
        dims,
        inliers: split.inliers,
        mean_score,
    }))
}

/// Fuses one track. The landmark id is left at 0; see [`build_map`].
pub fn fuse_track(
    track: &Track,
    policy: &WeightPolicy,
    cfg: &FusionConfig,
) -> Result<Fused, FusionError> {
    let obs = track.observations();
    let reject = |reason, inliers| {
        Fused::Rejected(Rejection {
            track_id: track.track_id,
            reason,
            observations: obs.len(),
            inliers,
        })
    };
    if track.dynamic {
        return Ok(reject(RejectReason::Dynamic, 0));
    }
    let weights = obs
        .iter()
        .map(|o| observation_weight(o, policy))
        .collect::<Result<Vec<_>, _>>()?;
    let fused = match fuse_observations(obs, &weights, cfg)? {
        Ok(f) => f,
        Err(reason) => {
            let inliers = reject_outliers(obs, &weights, cfg)?.inliers.len();
            return Ok(reject(reason, inliers));
        }
    };
    let observed_frames: Vec<u32> = fused.inliers.iter().map(|&i| obs[i].frame_id()).collect();
    Ok(Fused::Landmark(Landmark {
        landmark_id: 0,
        track_id: track.track_id,
        category: track.category.clone(),
        global_pose: fused.pose,
        dims: fused.dims,
        support: fused.inliers.len(),
        first_frame: observed_frames[0],
        last_frame: *observed_frames.last().expect("non-empty inliers"),
        observed_frames,
        mean_score: fused.mean_score,
    }))
}

/// Landmarks plus the rejected tracks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LandmarkMap {
    pub landmarks: Vec<Landmark>,
    pub rejections: Vec<Rejection>,
}

/// Fuses every track and numbers the landmarks by `(first_frame, track_id)`.
pub fn build_map(
    tracks: &[Track],
    policy: &WeightPolicy,
    cfg: &FusionConfig,
) -> Result<LandmarkMap, FusionError> {
    let mut map = LandmarkMap::default();
    for track in tracks {
        match fuse_track(track, policy, cfg)? {
            Fused::Landmark(l) => map.landmarks.push(l),
            Fused::Rejected(r) => map.rejections.push(r),
        }
    }
    map.landmarks.sort_by_key(|l| (l.first_frame, l.track_id));
    for (i, l) in map.landmarks.iter_mut().enumerate() {
        l.landmark_id = i as u64;
    }
    map.rejections.sort_by_key(|r| r.track_id);
    Ok(map)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireLandmark {
    id: u64,
    track_id: u64,
    category: String,
    pose: Vec<f64>,
    dims: [f64; 3],
    support: usize,
    first_frame: u32,
    last_frame: u32,
    observed_frames: Vec<u32>,
    mean_score: f64,
}

/// JSONL line for one landmark. Pose is row-major `[R|t]`, dims `[h, w, l]`.
pub fn landmark_to_json(l: &Landmark) -> String {
    let wire = WireLandmark {
        id: l.landmark_id,
        track_id: l.track_id,
        category: l.category.clone(),
        pose: l.global_pose.to_row_major().to_vec(),
        dims: [l.dims.height, l.dims.width, l.dims.length],
        support: l.support,
        first_frame: l.first_frame,
        last_frame: l.last_frame,
        observed_frames: l.observed_frames.clone(),
        mean_score: l.mean_score,
    };
    serde_json::to_string(&wire).expect("landmark serializes")
}

#[derive(Debug, Error)]
#[error("map line {line}: {reason}")]
pub struct MapParseError {
    pub line: usize,
    pub reason: String,
}

/// Reads a landmark map written by [`landmark_to_json`]; `#` lines are skipped.
pub fn parse_map(text: &str) -> Result<Vec<Landmark>, MapParseError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let err = |reason: String| MapParseError { line, reason };
        let w: WireLandmark = serde_json::from_str(t).map_err(|e| err(e.to_string()))?;
        let pose: [f64; 12] = w
            .pose
            .as_slice()
            .try_into()
            .map_err(|_| err(format!("pose has {} values, expected 12", w.pose.len())))?;
        let global_pose = Pose::from_row_major(&pose).map_err(|e| err(e.to_string()))?;
        let dims = Dimensions3D::new(w.dims[0], w.dims[1], w.dims[2]).map_err(|e| err(e.to_string()))?;
        if w.first_frame > w.last_frame {
            return Err(err("first_frame > last_frame".into()));
        }
        out.push(Landmark {
            landmark_id: w.id,
            track_id: w.track_id,
            category: w.category,
            global_pose,
            dims,
            support: w.support,
            first_frame: w.first_frame,
            last_frame: w.last_frame,
            observed_frames: w.observed_frames,
            mean_score: w.mean_score,
        });
    }
    Ok(out)
}

/// Angle spread helper used by tests and diagnostics: largest pairwise
/// wrapped difference.
pub fn angular_spread(angles: &[f64]) -> f64 {
    let mut spread: f64 = 0.0;
    for (i, a) in angles.iter().enumerate() {
        for b in &angles[i + 1..] {
            spread = spread.max(wrap_angle(a - b).abs());
        }
    }
    spread.min(PI)
}
