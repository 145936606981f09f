//! The four subcommands, as library functions.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use objmap_core::annotate::{annotate_frame, annotation_to_jsonl, FrameAnnotation};
use objmap_core::association::{run_association, AssociationError};
use objmap_core::dataio::{
    label_file_name, parse_calib, parse_kitti_labels, parse_trajectory, read_detections,
    write_calib, write_detections, write_kitti_labels, write_trajectory, CalibFile, DataError,
    FrameDetections, Trajectory,
};
use objmap_core::landmark::{self, landmark_to_json, parse_map, Landmark, LandmarkMap};
use objmap_core::metrics::{
    self, depth_table, interval_table, viewpoint_table, DepthReport, EvalFrame, MatchResult,
    ViewpointReport,
};
use objmap_core::simulator::{self, SimError, SimOutput};
use objmap_core::ProjectionMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::provenance::Provenance;

pub const MAP_FILE: &str = "map.jsonl";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.jsonl";
pub const LABELS_DIR: &str = "labels";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

fn parse_err(path: &Path, e: DataError) -> CliError {
    match e {
        DataError::Io(io) => CliError::io(path, io),
        other => CliError::Parse(format!("{}: {other}", path.display())),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", path.display())))
}

fn load_trajectory(cfg: &PipelineConfig) -> Result<Trajectory> {
    let path = cfg.input("trajectory")?;
    parse_trajectory(&read(path)?).map_err(|e| parse_err(path, e))
}

fn load_camera(cfg: &PipelineConfig) -> Result<ProjectionMatrix> {
    let path = cfg.input("calib")?;
    let calib = parse_calib(&read(path)?).map_err(|e| parse_err(path, e))?;
    calib.camera(&cfg.camera.key).map_err(|e| match e {
        DataError::MissingCamera(_) => CliError::Config(format!("{}: {e}", path.display())),
        other => parse_err(path, other),
    })
}

#[derive(Debug, Serialize)]
struct TrackDiagnostic<'a> {
    track_id: u64,
    category: &'a str,
    observations: usize,
    first_frame: u32,
    last_frame: u32,
    inliers: usize,
    dynamic: bool,
    status: &'a str,
    landmark_id: Option<u64>,
}

#[derive(Debug)]
pub struct BuildMapOutcome {
    pub map: LandmarkMap,
    pub tracks: usize,
    pub map_path: PathBuf,
}

/// Detections → tracks → landmarks, written as `map.jsonl` plus per-track
/// diagnostics.
pub fn build_map(cfg: &PipelineConfig) -> Result<BuildMapOutcome> {
    cfg.validate()?;
    let trajectory = load_trajectory(cfg)?;
    let proj = load_camera(cfg)?;
    let det_path = cfg.input("detections")?;
    let file = fs::File::open(det_path).map_err(|e| CliError::io(det_path, e))?;
    let frames: Vec<FrameDetections> = read_detections(BufReader::new(file))
        .map_err(|e| parse_err(det_path, e))?
        .into_iter()
        .filter(|f| cfg.sequence.contains(f.frame_id))
        .collect();
    if frames.iter().all(|f| f.detections.is_empty()) {
        log::warn!("{}: no detections; the map will be empty", det_path.display());
    }

    let fusion = cfg.outliers.fusion();
    let tracks = run_association(&frames, &trajectory, &proj, &cfg.association, &fusion)
        .map_err(|e| match e {
            AssociationError::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Parse(format!("{}: {other}", det_path.display())),
        })?;
    let map = landmark::build_map(&tracks, &cfg.weights, &fusion)
        .map_err(|e| CliError::Parse(format!("{}: {e}", det_path.display())))?;
    log::info!(
        "{} track(s), {} landmark(s), {} rejected",
        tracks.len(),
        map.landmarks.len(),
        map.rejections.len()
    );

    let provenance = Provenance::new(cfg)
        .with_input(cfg.input("trajectory")?)?
        .with_input(cfg.input("calib")?)?
        .with_input(det_path)?;
    let out = cfg.output_dir();
    create_dir(&out)?;
    let map_path = out.join(MAP_FILE);
    write(&map_path, &(provenance.header() + &map_jsonl(&map.landmarks)))?;

    let mut diag = provenance.header();
    for t in &tracks {
        let obs = t.observations();
        let landmark = map.landmarks.iter().find(|l| l.track_id == t.track_id);
        let rejection = map.rejections.iter().find(|r| r.track_id == t.track_id);
        let status = match (landmark, rejection) {
            (Some(_), _) => "landmark",
            (None, Some(r)) => match r.reason {
                landmark::RejectReason::Dynamic => "dynamic",
                landmark::RejectReason::LowSupport => "low_support",
                landmark::RejectReason::DegenerateMean => "degenerate_mean",
            },
            (None, None) => unreachable!("every track is fused or rejected"),
        };
        let d = TrackDiagnostic {
            track_id: t.track_id,
            category: &t.category,
            observations: obs.len(),
            first_frame: t.first_seen(),
            last_frame: t.last_seen(),
            inliers: landmark
                .map(|l| l.support)
                .or(rejection.map(|r| r.inliers))
                .unwrap_or(0),
            dynamic: t.dynamic,
            status,
            landmark_id: landmark.map(|l| l.landmark_id),
        };
        diag += &serde_json::to_string(&d).expect("diagnostic serializes");
        diag.push('\n');
    }
    write(&out.join(DIAGNOSTICS_FILE), &diag)?;

    Ok(BuildMapOutcome {
        tracks: tracks.len(),
        map,
        map_path,
    })
}

pub fn map_jsonl(landmarks: &[Landmark]) -> String {
    let mut s = String::new();
    for l in landmarks {
        s += &landmark_to_json(l);
        s.push('\n');
    }
    s
}

#[derive(Debug)]
pub struct AnnotateOutcome {
    pub annotations: Vec<FrameAnnotation>,
    pub labels_dir: PathBuf,
}

/// Projects the map into every trajectory frame; one label file per frame.
pub fn annotate(cfg: &PipelineConfig, map_path: Option<&Path>) -> Result<AnnotateOutcome> {
    cfg.validate()?;
    let out = cfg.output_dir();
    let map_path = map_path.map(Path::to_path_buf).unwrap_or_else(|| out.join(MAP_FILE));
    if !map_path.is_file() {
        return Err(CliError::Config(format!(
            "map {} does not exist",
            map_path.display()
        )));
    }
    let map_text = read(&map_path)?;
    let map = parse_map(&map_text)
        .map_err(|e| CliError::Parse(format!("{}: {e}", map_path.display())))?;
    let trajectory = load_trajectory(cfg)?;
    let proj = load_camera(cfg)?;

    let frames: Vec<(u32, &objmap_core::Pose)> = trajectory
        .iter()
        .filter(|(f, _)| cfg.sequence.contains(*f))
        .collect();
    let annotations: Vec<FrameAnnotation> = frames
        .par_iter()
        .map(|(f, cam)| annotate_frame(&map, *f, cam, &proj, &cfg.visibility))
        .collect();

    let labels_dir = out.join(LABELS_DIR);
    create_dir(&labels_dir)?;
    annotations
        .par_iter()
        .map(|a| write(&labels_dir.join(label_file_name(a.frame_id)), &write_kitti_labels(a)))
        .collect::<Result<()>>()?;

    let provenance = Provenance::new(cfg)
        .with_bytes(&file_name(&map_path), map_text.as_bytes())
        .with_input(cfg.input("trajectory")?)?
        .with_input(cfg.input("calib")?)?;
    let mut dump = provenance.header();
    for a in &annotations {
        dump += &annotation_to_jsonl(a);
    }
    write(&out.join(ANNOTATIONS_FILE), &dump)?;
    Ok(AnnotateOutcome {
        annotations,
        labels_dir,
    })
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub provenance: Provenance,
    pub frames: usize,
    pub pairs: usize,
    pub predictions: usize,
    pub ground_truth: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub depth: DepthReport,
    pub viewpoint: ViewpointReport,
}

impl EvaluationReport {
    pub fn table(&self) -> String {
        format!(
            "{}\n{}\n{}",
            depth_table(&[("objmap", &self.depth)]),
            viewpoint_table(&[("objmap", &self.viewpoint)]),
            interval_table(&self.depth, &self.viewpoint)
        )
    }
}

fn label_files(dir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let frame: u32 = stem.parse().map_err(|_| {
            CliError::Parse(format!("{}: file name is not a frame number", path.display()))
        })?;
        out.push((frame, path));
    }
    out.sort();
    Ok(out)
}

fn read_labels(frame: u32, path: &Path) -> Result<EvalFrame> {
    let text = read(path)?;
    let labels = parse_kitti_labels(&text).map_err(|e| parse_err(path, e))?;
    Ok(EvalFrame::from_labels(frame, &labels))
}

/// Matches every ground-truth frame file against the prediction file of the
/// same name (missing prediction files count as empty) and writes
/// `report.json` and `report.txt`.
pub fn evaluate(cfg: &PipelineConfig, pred_dir: &Path, gt_dir: &Path) -> Result<EvaluationReport> {
    cfg.validate()?;
    if !pred_dir.is_dir() {
        return Err(CliError::Config(format!("{} is not a directory", pred_dir.display())));
    }
    let gt_files = label_files(gt_dir)?;
    let per_frame: Vec<(MatchResult, Vec<u8>)> = gt_files
        .par_iter()
        .map(|(frame, gt_path)| {
            let gt = read_labels(*frame, gt_path)?;
            let pred_path = pred_dir.join(gt_path.file_name().expect("listed file"));
            let (pred, pred_bytes) = if pred_path.is_file() {
                (read_labels(*frame, &pred_path)?, read(&pred_path)?.into_bytes())
            } else {
                log::debug!("{}: no prediction file", pred_path.display());
                (EvalFrame { frame_id: *frame, objects: vec![] }, Vec::new())
            };
            let m = metrics::match_frames(&pred, &gt, cfg.metrics.iou_min)
                .expect("frames share an id");
            Ok((m, pred_bytes))
        })
        .collect::<Result<_>>()?;

    let mut all = MatchResult::default();
    let mut pred_bytes = Vec::new();
    for (m, b) in per_frame {
        all.extend(m);
        pred_bytes.extend(b);
    }
    let mut gt_bytes = Vec::new();
    for (_, p) in &gt_files {
        gt_bytes.extend(read(p)?.into_bytes());
    }
    if all.pairs.is_empty() {
        return Err(CliError::EmptyEvaluation(format!(
            "no matched pairs between {} and {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    let report = EvaluationReport {
        provenance: Provenance::new(cfg)
            .with_bytes("pred", &pred_bytes)
            .with_bytes("gt", &gt_bytes),
        frames: gt_files.len(),
        pairs: all.pairs.len(),
        predictions: all.n_pred,
        ground_truth: all.n_gt,
        precision: all.precision(),
        recall: all.recall(),
        depth: metrics::depth_metrics(&all.pairs).expect("non-empty"),
        viewpoint: metrics::viewpoint_metrics(&all.pairs).expect("non-empty"),
    };
    let out = cfg.output_dir();
    create_dir(&out)?;
    write(
        &out.join(REPORT_JSON),
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    write(&out.join(REPORT_TXT), &(report.provenance.header() + &report.table()))?;
    Ok(report)
}

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const CALIB_FILE: &str = "calib.txt";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const GT_MAP_FILE: &str = "gt_map.jsonl";
pub const GT_LABELS_DIR: &str = "gt_labels";
pub const GT_ANNOTATIONS_FILE: &str = "gt_annotations.jsonl";
pub const PIPELINE_CONFIG_FILE: &str = "pipeline.toml";

/// Writes a synthetic dataset plus a `pipeline.toml` that runs the other
/// subcommands on it.
pub fn simulate(cfg: &PipelineConfig) -> Result<SimOutput> {
    let sim = simulator::generate(&cfg.simulator).map_err(|e| match e {
        SimError::InvalidConfig(_) | SimError::InfeasibleScene(_) => CliError::Config(e.to_string()),
    })?;
    let out = cfg.output_dir();
    create_dir(&out)?;
    let gt = &sim.ground_truth;
    let header = Provenance::new(cfg).header();

    write(&out.join(TRAJECTORY_FILE), &write_trajectory(&gt.trajectory))?;
    let mut calib = CalibFile::default();
    calib.insert(cfg.camera.key.clone(), gt.projection.to_row_major());
    write(&out.join(CALIB_FILE), &write_calib(&calib))?;
    write(
        &out.join(DETECTIONS_FILE),
        &(header.clone() + &write_detections(&sim.detections)),
    )?;
    write(&out.join(GT_MAP_FILE), &(header.clone() + &map_jsonl(&gt.landmarks)))?;

    let annotations = gt.annotations(&cfg.visibility);
    let labels = out.join(GT_LABELS_DIR);
    create_dir(&labels)?;
    let mut dump = header.clone();
    for a in &annotations {
        write(&labels.join(label_file_name(a.frame_id)), &write_kitti_labels(a))?;
        dump += &annotation_to_jsonl(a);
    }
    write(&out.join(GT_ANNOTATIONS_FILE), &dump)?;

    let mut pipeline = cfg.clone();
    pipeline.paths.trajectory = Some(TRAJECTORY_FILE.into());
    pipeline.paths.calib = Some(CALIB_FILE.into());
    pipeline.paths.detections = Some(DETECTIONS_FILE.into());
    pipeline.paths.output = Some("pipeline".into());
    write(
        &out.join(PIPELINE_CONFIG_FILE),
        &(header + &pipeline.to_toml()),
    )?;
    Ok(sim)
}
