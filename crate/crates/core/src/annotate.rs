//! Map-driven per-frame annotation.
//!
//! Every landmark is moved into the frame's camera coordinates and projected.
//! It is kept when it lies in front of the camera, the frame falls inside the
//! landmark's observed span widened by `frame_window`, and enough of its box
//! lands on the image.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::dataio::{KittiLabelLine, Trajectory};
use crate::geometry::{
    box3d_corners, project_box, wrap_angle, yaw_from_rotation, Box2D, Dimensions3D, Pose,
    ProjectionMatrix, YawAngle,
};
use crate::landmark::Landmark;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisibilityConfig {
    pub image_width: f64,
    pub image_height: f64,
    /// Pixels².
    pub min_box_area: f64,
    pub frame_window: u32,
    pub min_visible_fraction: f64,
}

impl Default for VisibilityConfig {
    fn default() -> Self {
        Self {
            image_width: 1241.0,
            image_height: 376.0,
            min_box_area: 100.0,
            frame_window: 10,
            min_visible_fraction: 0.25,
        }
    }
}

impl VisibilityConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return Err("image size must be positive".into());
        }
        if !(self.min_box_area >= 0.0) {
            return Err("min_box_area must be non-negative".into());
        }
        if !(self.min_visible_fraction > 0.0 && self.min_visible_fraction <= 1.0) {
            return Err(format!(
                "min_visible_fraction = {} outside (0, 1]",
                self.min_visible_fraction
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// The landmark has an inlier detection in this frame.
    ObservedInFrame,
    /// Present only through the map projection.
    MapProjected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationEntry {
    pub landmark_id: u64,
    pub category: String,
    pub local_pose: Pose,
    /// Clipped to the image.
    pub box2d: Box2D,
    /// Before clipping.
    pub box2d_full: Box2D,
    /// Projective depth of the object origin.
    pub depth: f64,
    pub yaw_local: YawAngle,
    pub dims: Dimensions3D,
    pub provenance: Provenance,
    pub score: f64,
}

impl AnnotationEntry {
    /// Fraction of the projected box that falls outside the image.
    pub fn truncation(&self) -> f64 {
        let full = self.box2d_full.area();
        if full <= 0.0 {
            0.0
        } else {
            (1.0 - self.box2d.area() / full).clamp(0.0, 1.0)
        }
    }

    pub fn to_kitti_line(&self) -> KittiLabelLine {
        let t = self.local_pose.translation();
        let ry = self.yaw_local.radians();
        KittiLabelLine {
            kind: self.category.clone(),
            truncated: self.truncation(),
            occluded: 0,
            alpha: wrap_angle(ry - t.x.atan2(t.z)),
            bbox: self.box2d,
            dims: self.dims,
            location: *t,
            rotation_y: ry,
            score: Some(self.score),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameAnnotation {
    pub frame_id: u32,
    /// Ordered by landmark id.
    pub entries: Vec<AnnotationEntry>,
}

impl FrameAnnotation {
    pub fn to_kitti_lines(&self) -> Vec<KittiLabelLine> {
        self.entries.iter().map(AnnotationEntry::to_kitti_line).collect()
    }
}

/// Reason a landmark was left out of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionCause {
    /// Frame outside `[first − window, last + window]`.
    OutsideWindow,
    /// Non-positive depth (rule a).
    BehindCamera,
    /// Projected box misses the image (rule c).
    OffImage,
    /// Clipped box smaller than `min_box_area` (rule c).
    TooSmall,
    /// Clipped/unclipped area ratio below `min_visible_fraction` (rule c).
    MostlyOffImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub frame_id: u32,
    pub landmark_id: u64,
    pub cause: ExclusionCause,
}

/// `C⁻¹ · X₀`.
pub fn landmark_to_local(lm: &Landmark, cam: &Pose) -> Pose {
    cam.inverse().compose(&lm.global_pose)
}

/// Geometric visibility of a camera-frame cuboid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibleBox {
    pub depth: f64,
    pub full: Box2D,
    pub clipped: Box2D,
}

/// Depth and on-image checks shared by the annotator and the simulator.
pub fn visible_box(
    local: &Pose,
    dims: &Dimensions3D,
    proj: &ProjectionMatrix,
    cfg: &VisibilityConfig,
) -> Result<VisibleBox, ExclusionCause> {
    let depth = proj
        .project_point(&Point3::from(*local.translation()))
        .map(|(_, _, d)| d)
        .unwrap_or(0.0);
    if !(depth > 0.0) {
        return Err(ExclusionCause::BehindCamera);
    }
    let full = project_box(&box3d_corners(local, dims), proj)
        .map_err(|_| ExclusionCause::BehindCamera)?;
    let clipped = full
        .clip(cfg.image_width, cfg.image_height)
        .ok_or(ExclusionCause::OffImage)?;
    let area = clipped.area();
    if area < cfg.min_box_area || area <= 0.0 {
        return Err(ExclusionCause::TooSmall);
    }
    if area / full.area() < cfg.min_visible_fraction {
        return Err(ExclusionCause::MostlyOffImage);
    }
    Ok(VisibleBox {
        depth,
        full,
        clipped,
    })
}

fn in_window(lm: &Landmark, frame_id: u32, window: u32) -> bool {
    let lo = lm.first_frame.saturating_sub(window);
    let hi = lm.last_frame.saturating_add(window);
    (lo..=hi).contains(&frame_id)
}

/// Annotation of one frame plus the reasons for every excluded landmark.
pub fn annotate_frame_with_diagnostics(
    map: &[Landmark],
    frame_id: u32,
    cam: &Pose,
    proj: &ProjectionMatrix,
    cfg: &VisibilityConfig,
) -> (FrameAnnotation, Vec<Exclusion>) {
    let mut entries = Vec::new();
    let mut excluded = Vec::new();
    for lm in map {
        let exclude = |cause| Exclusion {
            frame_id,
            landmark_id: lm.landmark_id,
            cause,
        };
        if !in_window(lm, frame_id, cfg.frame_window) {
            excluded.push(exclude(ExclusionCause::OutsideWindow));
            continue;
        }
        let local = landmark_to_local(lm, cam);
        match visible_box(&local, &lm.dims, proj, cfg) {
            Ok(vis) => entries.push(AnnotationEntry {
                landmark_id: lm.landmark_id,
                category: lm.category.clone(),
                local_pose: local,
                box2d: vis.clipped,
                box2d_full: vis.full,
                depth: vis.depth,
                yaw_local: yaw_from_rotation(local.rotation()),
                dims: lm.dims,
                provenance: if lm.observed_in(frame_id) {
                    Provenance::ObservedInFrame
                } else {
                    Provenance::MapProjected
                },
                score: lm.mean_score,
            }),
            Err(cause) => excluded.push(exclude(cause)),
        }
    }
    entries.sort_by_key(|e| e.landmark_id);
    (FrameAnnotation { frame_id, entries }, excluded)
}

pub fn annotate_frame(
    map: &[Landmark],
    frame_id: u32,
    cam: &Pose,
    proj: &ProjectionMatrix,
    cfg: &VisibilityConfig,
) -> FrameAnnotation {
    annotate_frame_with_diagnostics(map, frame_id, cam, proj, cfg).0
}

/// One annotation per trajectory frame, in frame order.
pub fn annotate_sequence(
    map: &[Landmark],
    trajectory: &Trajectory,
    proj: &ProjectionMatrix,
    cfg: &VisibilityConfig,
) -> Vec<FrameAnnotation> {
    trajectory
        .iter()
        .map(|(frame_id, cam)| annotate_frame(map, frame_id, cam, proj, cfg))
        .collect()
}

#[derive(Serialize)]
struct WireEntry<'a> {
    frame_id: u32,
    landmark_id: u64,
    category: &'a str,
    provenance: Provenance,
    box2d: [f64; 4],
    depth: f64,
    yaw_local: f64,
    location: [f64; 3],
    dims: [f64; 3],
    score: f64,
}

/// JSONL dump lines (one per entry) for analysis tooling.
pub fn annotation_to_jsonl(ann: &FrameAnnotation) -> String {
    let mut out = String::new();
    for e in &ann.entries {
        let t = e.local_pose.translation();
        let wire = WireEntry {
            frame_id: ann.frame_id,
            landmark_id: e.landmark_id,
            category: &e.category,
            provenance: e.provenance,
            box2d: [e.box2d.left, e.box2d.top, e.box2d.right, e.box2d.bottom],
            depth: e.depth,
            yaw_local: e.yaw_local.radians(),
            location: [t.x, t.y, t.z],
            dims: [e.dims.height, e.dims.width, e.dims.length],
            score: e.score,
        };
        out.push_str(&serde_json::to_string(&wire).expect("entry serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::yaw_to_rotation;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn proj() -> ProjectionMatrix {
        ProjectionMatrix::from_row_slice(&[
            700.0, 0.0, 600.0, 0.0, 0.0, 700.0, 180.0, 0.0, 0.0, 0.0, 1.0, 0.0,
        ])
        .unwrap()
    }

    fn landmark(t: Vector3<f64>, yaw: f64, span: (u32, u32)) -> Landmark {
        Landmark {
            landmark_id: 0,
            track_id: 0,
            category: "Car".into(),
            global_pose: Pose::from_yaw(yaw, t),
            dims: Dimensions3D::new(1.5, 1.6, 3.9).unwrap(),
            support: 2,
            first_frame: span.0,
            last_frame: span.1,
            observed_frames: vec![span.0, span.1],
            mean_score: 0.9,
        }
    }

    #[test]
    fn landmark_to_local_examples() {
        let lm = landmark(Vector3::new(0.0, 0.0, 15.0), 0.4, (0, 0));
        assert_eq!(landmark_to_local(&lm, &Pose::identity()), lm.global_pose);
        let cam = Pose::from_translation(Vector3::new(0.0, 0.0, 5.0));
        assert_eq!(
            *landmark_to_local(&lm, &cam).translation(),
            Vector3::new(0.0, 0.0, 10.0)
        );
        let cam = Pose::from_yaw(0.3, Vector3::new(1.0, 0.0, 2.0));
        let local = Pose::from_yaw(-0.2, Vector3::new(0.5, 1.6, 12.0));
        let lm = Landmark {
            global_pose: cam.compose(&local),
            ..lm
        };
        let back = landmark_to_local(&lm, &cam);
        assert_abs_diff_eq!(*back.translation(), *local.translation(), epsilon = 1e-9);
        assert_abs_diff_eq!(*back.rotation(), *local.rotation(), epsilon = 1e-9);
    }

    #[test]
    fn annotate_frame_rules() {
        let cfg = VisibilityConfig::default();
        let behind = landmark(Vector3::new(0.0, 1.65, -5.0), 0.0, (0, 10));
        let (a, ex) = annotate_frame_with_diagnostics(&[behind], 5, &Pose::identity(), &proj(), &cfg);
        assert!(a.entries.is_empty());
        assert_eq!(ex[0].cause, ExclusionCause::BehindCamera);

        let late = landmark(Vector3::new(0.0, 1.65, 20.0), 0.0, (100, 120));
        let (a, ex) = annotate_frame_with_diagnostics(&[late], 50, &Pose::identity(), &proj(), &cfg);
        assert!(a.entries.is_empty());
        assert_eq!(ex[0].cause, ExclusionCause::OutsideWindow);
        // 90 is inside the widened window
        assert_eq!(annotate_frame(&[landmark(Vector3::new(0.0, 1.65, 20.0), 0.0, (100, 120))], 90, &Pose::identity(), &proj(), &cfg).entries.len(), 1);

        let centred = landmark(Vector3::new(0.0, 0.75, 10.0), 0.0, (0, 10));
        let a = annotate_frame(&[centred.clone()], 3, &Pose::identity(), &proj(), &cfg);
        assert_eq!(a.entries.len(), 1);
        let e = &a.entries[0];
        let oracle = project_box(&box3d_corners(&centred.global_pose, &centred.dims), &proj()).unwrap();
        assert_eq!(e.box2d_full, oracle);
        assert_eq!(e.depth, 10.0);
        assert_eq!(e.provenance, Provenance::MapProjected);
        let a = annotate_frame(&[centred], 10, &Pose::identity(), &proj(), &cfg);
        assert_eq!(a.entries[0].provenance, Provenance::ObservedInFrame);
    }

    #[test]
    fn off_image_and_small_boxes() {
        let cfg = VisibilityConfig::default();
        let side = landmark(Vector3::new(60.0, 1.65, 10.0), 0.0, (0, 0));
        let (_, ex) = annotate_frame_with_diagnostics(&[side], 0, &Pose::identity(), &proj(), &cfg);
        assert_eq!(ex[0].cause, ExclusionCause::OffImage);
        let tiny = Landmark {
            dims: Dimensions3D::new(0.01, 0.01, 0.01).unwrap(),
            ..landmark(Vector3::new(0.0, 1.65, 50.0), 0.0, (0, 0))
        };
        let (_, ex) = annotate_frame_with_diagnostics(&[tiny], 0, &Pose::identity(), &proj(), &cfg);
        assert_eq!(ex[0].cause, ExclusionCause::TooSmall);
        // straddling the left border with most of the box outside
        let edge = landmark(Vector3::new(-8.2, 0.75, 8.0), 0.0, (0, 0));
        let (_, ex) = annotate_frame_with_diagnostics(&[edge], 0, &Pose::identity(), &proj(), &cfg);
        assert_eq!(ex[0].cause, ExclusionCause::MostlyOffImage);
    }

    #[test]
    fn annotate_sequence_examples() {
        let traj = Trajectory::new(
            (0..5)
                .map(|k| Pose::from_translation(Vector3::new(0.0, 0.0, k as f64)))
                .collect(),
        );
        let cfg = VisibilityConfig::default();
        let anns = annotate_sequence(&[], &traj, &proj(), &cfg);
        assert_eq!(anns.len(), 5);
        assert!(anns.iter().all(|a| a.entries.is_empty()));

        let lm = landmark(Vector3::new(1.0, 1.65, 30.0), 1.0, (0, 4));
        let anns = annotate_sequence(&[lm], &traj, &proj(), &cfg);
        assert!(anns.iter().all(|a| a.entries.len() == 1));
        assert_eq!(
            anns.iter().map(|a| a.frame_id).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 4]
        );
    }

    #[test]
    fn kitti_line_alpha_convention() {
        let lm = landmark(Vector3::new(2.0, 0.75, 8.0), 0.5, (0, 0));
        let a = annotate_frame(&[lm], 0, &Pose::identity(), &proj(), &VisibilityConfig::default());
        let line = a.entries[0].to_kitti_line();
        assert_abs_diff_eq!(line.alpha, 0.5 - (2.0f64).atan2(8.0), epsilon = 1e-12);
        assert_abs_diff_eq!(line.rotation_y, 0.5, epsilon = 1e-12);
        assert_eq!(line.location, Vector3::new(2.0, 0.75, 8.0));
    }

    proptest! {
        #[test]
        fn entries_are_sound(
            x in -20.0f64..20.0, z in -30.0f64..60.0, yaw in -3.0f64..3.0,
            cam_yaw in -0.5f64..0.5, cam_z in 0.0f64..20.0,
            first in 0u32..50, len in 0u32..20, frame in 0u32..100,
        ) {
            let cfg = VisibilityConfig::default();
            let lm = landmark(Vector3::new(x, 1.65, z), yaw, (first, first + len));
            let cam = Pose::new(yaw_to_rotation(cam_yaw), Vector3::new(0.0, 0.0, cam_z)).unwrap();
            let a = annotate_frame(std::slice::from_ref(&lm), frame, &cam, &proj(), &cfg);
            let image = Box2D { left: 0.0, top: 0.0, right: cfg.image_width, bottom: cfg.image_height };
            for e in &a.entries {
                prop_assert!(e.depth > 0.0);
                prop_assert!(frame + cfg.frame_window >= first && frame <= first + len + cfg.frame_window);
                let local = landmark_to_local(&lm, &cam);
                let b = project_box(&box3d_corners(&local, &lm.dims), &proj()).unwrap();
                prop_assert!((b.left - e.box2d_full.left).abs() < 1e-9);
                prop_assert!((b.bottom - e.box2d_full.bottom).abs() < 1e-9);
                prop_assert!(e.box2d.intersection(&image).is_some());
            }
        }
    }
}
