//! Map-based self-annotation of monocular 3D object detections.
//!
//! Per-frame detections are associated across a sequence, fused into static
//! landmarks, and projected back into every frame to produce annotations.

pub mod annotate;
pub mod assignment;
pub mod association;
pub mod dataio;
pub mod geometry;
pub mod landmark;
pub mod metrics;
pub mod simulator;

pub use annotate::{annotate_frame, annotate_sequence, FrameAnnotation, VisibilityConfig};
pub use association::{run_association, AssociationConfig, Track};
pub use dataio::{DetectionRecord, Trajectory};
pub use geometry::{Box2D, Dimensions3D, Pose, ProjectionMatrix, YawAngle};
pub use landmark::{build_map, FusionConfig, Landmark, LandmarkMap, WeightPolicy};
pub use metrics::{depth_metrics, viewpoint_metrics, DepthReport, ViewpointReport};
pub use simulator::{generate, SimConfig};
