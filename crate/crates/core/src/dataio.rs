//! KITTI calibration / odometry / label text formats and the detection JSONL
//! interchange format.

use std::io::BufRead;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::FrameAnnotation;
use crate::geometry::{
    orthogonality_error, Box2D, Dimensions3D, GeometryError, Pose, ProjectionMatrix, YawAngle,
};

/// Poses whose rotation deviates less than this are re-orthonormalized.
pub const ORTHONORMALITY_INPUT_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: rotation deviates from orthonormal by {deviation:e}")]
    Orthonormality { line: usize, deviation: f64 },
    #[error("camera `{0}` not present in calibration")]
    MissingCamera(String),
    #[error("line {line}: field `{field}`: {reason}")]
    Schema {
        line: usize,
        field: String,
        reason: String,
    },
    #[error("line {line}: {source}")]
    Geometry {
        line: usize,
        #[source]
        source: GeometryError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DataError {
    /// Source line of the error, when it has one.
    pub fn line(&self) -> Option<usize> {
        match self {
            DataError::Parse { line, .. }
            | DataError::Orthonormality { line, .. }
            | DataError::Schema { line, .. }
            | DataError::Geometry { line, .. } => Some(*line),
            _ => None,
        }
    }
}

fn parse_reals(fields: &[&str], line: usize) -> Result<Vec<f64>, DataError> {
    fields
        .iter()
        .map(|s| {
            let v: f64 = s.parse().map_err(|_| DataError::Parse {
                line,
                reason: format!("`{s}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    line,
                    reason: format!("`{s}` is not finite"),
                });
            }
            Ok(v)
        })
        .collect()
}

fn skip_line(raw: &str) -> bool {
    let t = raw.trim();
    t.is_empty() || t.starts_with('#')
}

/// C `%.{prec}e` rendering (`1.000000e+00`), used by KITTI tooling.
pub fn format_sci(v: f64, prec: usize) -> String {
    let v = if v == 0.0 { 0.0 } else { v };
    let s = format!("{v:.prec$e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent always present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

/// Two-decimal rendering without a negative zero.
pub fn format_fixed2(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".to_string()
    } else {
        s
    }
}

/// Camera-to-world poses, one per frame.
///
/// Parsed files keep their values as read, so writing them back reproduces
/// the input even when the rotations were re-orthonormalized for use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    poses: Vec<Pose>,
    rows: Vec<[f64; 12]>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Self {
        let rows = poses.iter().map(Pose::to_row_major).collect();
        Self { poses, rows }
    }

    pub fn get(&self, frame: u32) -> Option<&Pose> {
        self.poses.get(frame as usize)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    /// `(frame_id, pose)` pairs in frame order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, &Pose)> {
        self.poses.iter().enumerate().map(|(i, p)| (i as u32, p))
    }
}

fn nearest_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * vt).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt
}

/// Parses a KITTI odometry pose file: twelve reals per line, row-major `[R|t]`.
pub fn parse_trajectory(text: &str) -> Result<Trajectory, DataError> {
    let mut poses = Vec::new();
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 12 {
            return Err(DataError::Parse {
                line,
                reason: format!("expected 12 values, found {}", fields.len()),
            });
        }
        let vals = parse_reals(&fields, line)?;
        let mut rotation = Matrix3::new(
            vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
        );
        let translation = Vector3::new(vals[3], vals[7], vals[11]);
        let deviation = orthogonality_error(&rotation);
        if deviation > ORTHONORMALITY_INPUT_TOL || rotation.determinant() <= 0.0 {
            return Err(DataError::Orthonormality { line, deviation });
        }
        if deviation >= 1e-10 || (rotation.determinant() - 1.0).abs() >= 1e-10 {
            rotation = nearest_rotation(&rotation);
        }
        let pose =
            Pose::new(rotation, translation).map_err(|source| DataError::Geometry { line, source })?;
        poses.push(pose);
        rows.push(vals.try_into().expect("twelve values"));
    }
    Ok(Trajectory { poses, rows })
}

/// Writes poses in the KITTI odometry layout (`%e` with six decimals).
pub fn write_trajectory(traj: &Trajectory) -> String {
    let mut out = String::new();
    for values in &traj.rows {
        let row: Vec<String> = values.iter().map(|v| format_sci(*v, 6)).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Named 3×4 matrices from a KITTI calibration file, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibFile {
    entries: Vec<(String, [f64; 12])>,
}

impl CalibFile {
    pub fn insert(&mut self, key: impl Into<String>, values: [f64; 12]) {
        let key = key.into();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = values,
            None => self.entries.push((key, values)),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&[f64; 12]> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Projection matrix stored under `key` (e.g. `"P2"`).
    pub fn camera(&self, key: &str) -> Result<ProjectionMatrix, DataError> {
        let raw = self
            .raw(key)
            .ok_or_else(|| DataError::MissingCamera(key.to_string()))?;
        let line = self
            .entries
            .iter()
            .position(|(k, _)| k == key)
            .map_or(0, |i| i + 1);
        ProjectionMatrix::from_row_slice(raw).map_err(|source| DataError::Geometry { line, source })
    }
}

/// Parses `KEY: v1 … v12` lines.
pub fn parse_calib(text: &str) -> Result<CalibFile, DataError> {
    let mut calib = CalibFile::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if skip_line(raw) {
            continue;
        }
        let (key, rest) = raw.split_once(':').ok_or_else(|| DataError::Parse {
            line,
            reason: "expected `KEY: values`".into(),
        })?;
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(DataError::Parse {
                line,
                reason: format!("invalid key `{key}`"),
            });
        }
        let fields: Vec<&str> = rest.split_whitespace().collect();
        if fields.len() != 12 {
            return Err(DataError::Parse {
                line,
                reason: format!("`{key}` has {} values, expected 12", fields.len()),
            });
        }
        let vals = parse_reals(&fields, line)?;
        let mut arr = [0.0; 12];
        arr.copy_from_slice(&vals);
        calib.insert(key, arr);
    }
    Ok(calib)
}

/// Writes calibration entries with twelve-decimal `%e` values.
pub fn write_calib(calib: &CalibFile) -> String {
    let mut out = String::new();
    for (key, vals) in &calib.entries {
        let row: Vec<String> = vals.iter().map(|v| format_sci(*v, 12)).collect();
        out.push_str(&format!("{key}: {}\n", row.join(" ")));
    }
    out
}

/// Pixel coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

/// One detector output for one object in one frame.
///
/// `center2d` is the projection of the object's bottom-face centre and
/// `depth` its projective depth (third row of `P·X`), so the pair lifts back
/// to the camera-frame location exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub frame_id: u32,
    pub category: String,
    pub box2d: Box2D,
    pub depth: f64,
    pub yaw: YawAngle,
    pub dims: Dimensions3D,
    pub center2d: Pixel,
    pub score: f64,
    pub sigma: Option<f64>,
    pub descriptor: Option<Vec<f64>>,
    /// Ground-truth object id; only set by the simulator, for diagnostics.
    pub gt_id: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireBox {
    l: f64,
    t: f64,
    r: f64,
    b: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireDims {
    h: f64,
    w: f64,
    l: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireDetection {
    frame_id: u32,
    category: String,
    box2d: WireBox,
    depth: f64,
    yaw: f64,
    dims: WireDims,
    center2d: Pixel,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    descriptor: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_id: Option<u64>,
}

impl From<&DetectionRecord> for WireDetection {
    fn from(d: &DetectionRecord) -> Self {
        WireDetection {
            frame_id: d.frame_id,
            category: d.category.clone(),
            box2d: WireBox {
                l: d.box2d.left,
                t: d.box2d.top,
                r: d.box2d.right,
                b: d.box2d.bottom,
            },
            depth: d.depth,
            yaw: d.yaw.radians(),
            dims: WireDims {
                h: d.dims.height,
                w: d.dims.width,
                l: d.dims.length,
            },
            center2d: d.center2d,
            score: d.score,
            sigma: d.sigma,
            descriptor: d.descriptor.clone(),
            gt_id: d.gt_id,
        }
    }
}

fn schema(line: usize, field: &str, reason: impl Into<String>) -> DataError {
    DataError::Schema {
        line,
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn validate_wire(w: WireDetection, line: usize) -> Result<DetectionRecord, DataError> {
    if !(0.0..=1.0).contains(&w.score) {
        return Err(schema(line, "score", format!("{} outside [0, 1]", w.score)));
    }
    if !w.depth.is_finite() {
        return Err(schema(line, "depth", "not finite"));
    }
    if !w.yaw.is_finite() {
        return Err(schema(line, "yaw", "not finite"));
    }
    if !(w.center2d.u.is_finite() && w.center2d.v.is_finite()) {
        return Err(schema(line, "center2d", "not finite"));
    }
    if let Some(s) = w.sigma {
        if !(s.is_finite() && s > 0.0) {
            return Err(schema(line, "sigma", format!("{s} must be positive")));
        }
    }
    if let Some(d) = &w.descriptor {
        if d.iter().any(|v| !v.is_finite()) {
            return Err(schema(line, "descriptor", "non-finite element"));
        }
    }
    let box2d = Box2D::new(w.box2d.l, w.box2d.t, w.box2d.r, w.box2d.b)
        .map_err(|e| schema(line, "box2d", e.to_string()))?;
    let dims = Dimensions3D::new(w.dims.h, w.dims.w, w.dims.l)
        .map_err(|e| schema(line, "dims", e.to_string()))?;
    Ok(DetectionRecord {
        frame_id: w.frame_id,
        category: w.category,
        box2d,
        depth: w.depth,
        yaw: YawAngle::new(w.yaw),
        dims,
        center2d: w.center2d,
        score: w.score,
        sigma: w.sigma,
        descriptor: w.descriptor,
        gt_id: w.gt_id,
    })
}

/// Pulls the offending field name out of a serde_json message.
fn serde_field(msg: &str) -> String {
    msg.split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "record".to_string())
}

/// Detections of one frame, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    pub frame_id: u32,
    pub detections: Vec<DetectionRecord>,
}

/// Reads detection JSONL and groups it by frame, ascending. Blank lines and
/// `#` comment lines are skipped.
pub fn read_detections<R: BufRead>(reader: R) -> Result<Vec<FrameDetections>, DataError> {
    let mut records: Vec<DetectionRecord> = Vec::new();
    let mut descriptor_len: Option<usize> = None;
    for (idx, raw) in reader.lines().enumerate() {
        let line = idx + 1;
        let raw = raw?;
        if skip_line(&raw) {
            continue;
        }
        let wire: WireDetection = serde_json::from_str(&raw).map_err(|e| {
            let msg = e.to_string();
            schema(line, &serde_field(&msg), msg)
        })?;
        let rec = validate_wire(wire, line)?;
        if let Some(d) = &rec.descriptor {
            match descriptor_len {
                None => descriptor_len = Some(d.len()),
                Some(n) if n != d.len() => {
                    return Err(schema(
                        line,
                        "descriptor",
                        format!("length {} differs from earlier length {n}", d.len()),
                    ))
                }
                _ => {}
            }
        }
        records.push(rec);
    }
    // stable sort keeps input order within a frame
    records.sort_by_key(|r| r.frame_id);
    let mut groups: Vec<FrameDetections> = Vec::new();
    for rec in records {
        match groups.last_mut() {
            Some(g) if g.frame_id == rec.frame_id => g.detections.push(rec),
            _ => groups.push(FrameDetections {
                frame_id: rec.frame_id,
                detections: vec![rec],
            }),
        }
    }
    Ok(groups)
}

/// Serializes one record as a JSONL line (no trailing newline).
pub fn detection_to_json(d: &DetectionRecord) -> String {
    serde_json::to_string(&WireDetection::from(d)).expect("detection serializes")
}

pub fn write_detections<'a>(records: impl IntoIterator<Item = &'a DetectionRecord>) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&detection_to_json(r));
        out.push('\n');
    }
    out
}

/// One line of a KITTI object label file.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiLabelLine {
    pub kind: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    pub bbox: Box2D,
    pub dims: Dimensions3D,
    pub location: Vector3<f64>,
    pub rotation_y: f64,
    /// Optional 16th column.
    pub score: Option<f64>,
}

impl KittiLabelLine {
    /// Fifteen space-separated fields, numeric values with two decimals.
    /// The score column is never written.
    pub fn to_line(&self) -> String {
        let f = format_fixed2;
        format!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            self.kind,
            f(self.truncated),
            self.occluded,
            f(self.alpha),
            f(self.bbox.left),
            f(self.bbox.top),
            f(self.bbox.right),
            f(self.bbox.bottom),
            f(self.dims.height),
            f(self.dims.width),
            f(self.dims.length),
            f(self.location.x),
            f(self.location.y),
            f(self.location.z),
            f(self.rotation_y),
        )
    }
}

/// Parses a KITTI label file (15 fields, optional 16th score).
pub fn parse_kitti_labels(text: &str) -> Result<Vec<KittiLabelLine>, DataError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if skip_line(raw) {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 15 && fields.len() != 16 {
            return Err(DataError::Parse {
                line,
                reason: format!("expected 15 or 16 fields, found {}", fields.len()),
            });
        }
        let occluded: i32 = fields[2].parse().map_err(|_| DataError::Parse {
            line,
            reason: format!("occluded `{}` is not an integer", fields[2]),
        })?;
        let mut nums = vec![parse_reals(&fields[1..2], line)?[0]];
        nums.extend(parse_reals(&fields[3..], line)?);
        // nums: truncated, alpha, l t r b, h w l, x y z, ry, [score]
        let bbox = Box2D::new(nums[2], nums[3], nums[4], nums[5])
            .map_err(|source| DataError::Geometry { line, source })?;
        let dims = Dimensions3D::new(nums[6], nums[7], nums[8])
            .map_err(|source| DataError::Geometry { line, source })?;
        out.push(KittiLabelLine {
            kind: fields[0].to_string(),
            truncated: nums[0],
            occluded,
            alpha: nums[1],
            bbox,
            dims,
            location: Vector3::new(nums[9], nums[10], nums[11]),
            rotation_y: nums[12],
            score: nums.get(13).copied(),
        });
    }
    Ok(out)
}

pub fn format_kitti_lines(lines: &[KittiLabelLine]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l.to_line());
        out.push('\n');
    }
    out
}

/// Label file text for one annotated frame, ordered by landmark id.
pub fn write_kitti_labels(annotation: &FrameAnnotation) -> String {
    format_kitti_lines(&annotation.to_kitti_lines())
}

/// Label file name for a frame (`%06d.txt`).
pub fn label_file_name(frame_id: u32) -> String {
    format!("{frame_id:06}.txt")
}
