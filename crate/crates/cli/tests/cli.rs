//! End-to-end runs of the `objmap` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use objmap_core::landmark::parse_map;

fn objmap(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_objmap"))
        .args(args)
        .current_dir(cwd)
        .env_remove("OBJMAP_OUTPUT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixtures() -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "tests", "fixtures"].iter().collect()
}

fn simulate(dir: &Path, body: &str) -> Output {
    fs::write(dir.join("sim.toml"), body).unwrap();
    objmap(&["simulate", "--config", "sim.toml", "--output", "data"], dir)
}

/// Every file under `dir`, relative path → bytes.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn simulate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = objmap(&["simulate", "--seed", "42", "--output", "out"], d.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (sa, sb) = (snapshot(&a.path().join("out")), snapshot(&b.path().join("out")));
    assert!(sa.len() > 60);
    assert_eq!(sa, sb);
    let c = tempfile::tempdir().unwrap();
    objmap(&["simulate", "--seed", "43", "--output", "out"], c.path());
    assert_ne!(sa, snapshot(&c.path().join("out")));
}

#[test]
fn pipeline_composes_on_simulated_data() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate(
        dir.path(),
        "[simulator]\nseed = 7\nn_objects = 4\n[simulator.noise]\nsigma_z = 0.3\nsigma_yaw = 0.1\nsigma_px = 1.0\n",
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let data = dir.path().join("data");
    for args in [
        vec!["build-map", "--config", "pipeline.toml"],
        vec!["annotate", "--config", "pipeline.toml"],
        vec!["evaluate", "--config", "pipeline.toml", "--pred", "pipeline/labels", "--gt", "gt_labels"],
    ] {
        let o = objmap(&args, &data);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data.join("pipeline/report.json")).unwrap()).unwrap();
    assert!(report["pairs"].as_u64().unwrap() > 0);
    assert!(report["depth"]["overall"]["abs_rel"].as_f64().unwrap() < 0.05);
    assert!(report["provenance"]["config"].is_string());
    let map = fs::read_to_string(data.join("pipeline/map.jsonl")).unwrap();
    assert!(map.starts_with("# objmap "));
    assert!(map.lines().next().unwrap().contains("detections.jsonl:"));
    assert!(fs::read_to_string(data.join("pipeline/diagnostics.jsonl")).unwrap().contains("\"status\""));
}

#[test]
fn noiseless_map_matches_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&simulate(dir.path(), "[simulator]\nseed = 3\n")), 0);
    let data = dir.path().join("data");
    assert_eq!(code(&objmap(&["build-map", "--config", "pipeline.toml"], &data)), 0);
    let gt = parse_map(&fs::read_to_string(data.join("gt_map.jsonl")).unwrap()).unwrap();
    let got = parse_map(&fs::read_to_string(data.join("pipeline/map.jsonl")).unwrap()).unwrap();
    assert_eq!(gt.len(), got.len());
    for g in &gt {
        let m = got
            .iter()
            .find(|l| (l.global_pose.translation() - g.global_pose.translation()).norm() < 1e-6)
            .expect("landmark recovered");
        assert!((m.global_pose.rotation() - g.global_pose.rotation()).amax() < 1e-6);
        assert_eq!((m.first_frame, m.last_frame), (g.first_frame, g.last_frame));
    }
}

#[test]
fn empty_scene_gives_empty_outputs() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&simulate(dir.path(), "[simulator]\nn_objects = 0\nframes = 5\n")), 0);
    let data = dir.path().join("data");
    let o = objmap(&["build-map", "--config", "pipeline.toml"], &data);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("no detections"), "{}", stderr(&o));
    let map = fs::read_to_string(data.join("pipeline/map.jsonl")).unwrap();
    assert_eq!(map.lines().filter(|l| !l.starts_with('#')).count(), 0);
    assert_eq!(code(&objmap(&["annotate", "--config", "pipeline.toml"], &data)), 0);
    let labels = snapshot(&data.join("pipeline/labels"));
    assert_eq!(labels.len(), 5);
    assert!(labels.iter().all(|(_, b)| b.is_empty()));
}

#[test]
fn infeasible_scene_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate(
        dir.path(),
        r#"
[simulator]
n_objects = 0
frames = 10
trajectory = { kind = "waypoints", points = [[0.0, 0.0, 0.0], [0.0, 10.0, 0.0]] }
objects = [{ x = 0.0, z = -30.0, yaw = 0.0 }]
"#,
    );
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("infeasible scene"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_and_bad_config_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[paths]\ntrajectory = \"nope.txt\"\n").unwrap();
    let o = objmap(&["build-map", "--config", "c.toml"], dir.path());
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nope.txt"));
    fs::write(dir.path().join("c.toml"), "[association]\nw_iou = -1.0\n").unwrap();
    assert_eq!(code(&objmap(&["build-map", "--config", "c.toml"], dir.path())), 3);
    fs::write(dir.path().join("c.toml"), "[assoc]\n").unwrap();
    assert_eq!(code(&objmap(&["build-map", "--config", "c.toml"], dir.path())), 3);
}

#[test]
fn malformed_detections_exit_2_with_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&simulate(dir.path(), "[simulator]\nseed = 1\n")), 0);
    let data = dir.path().join("data");
    let det = data.join("detections.jsonl");
    let mut text = fs::read_to_string(&det).unwrap();
    text.push_str("{\"frame_id\": 3}\n");
    let line = text.lines().count();
    fs::write(&det, text).unwrap();
    let o = objmap(&["build-map", "--config", "pipeline.toml"], &data);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("detections.jsonl") && err.contains(&format!("line {line}")), "{err}");
}

#[test]
fn annotate_matches_golden_labels() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixtures();
    let cfg = f.join("annotate.toml");
    let map = f.join("map.jsonl");
    let o = objmap(
        &["annotate", "--config", cfg.to_str().unwrap(), "--map", map.to_str().unwrap(), "--output", "out"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(snapshot(&dir.path().join("out/labels")), snapshot(&f.join("golden_labels")));
}

#[test]
fn annotations_cover_only_trajectory_frames() {
    // the fixture map has a landmark seen up to frame 4; a 3-frame trajectory
    // yields exactly three label files
    let dir = tempfile::tempdir().unwrap();
    let f = fixtures();
    let traj: String = fs::read_to_string(f.join("traj5.txt")).unwrap().lines().take(3).map(|l| format!("{l}\n")).collect();
    fs::write(dir.path().join("t.txt"), traj).unwrap();
    fs::copy(f.join("calib.txt"), dir.path().join("calib.txt")).unwrap();
    fs::write(dir.path().join("c.toml"), "[paths]\ntrajectory = \"t.txt\"\ncalib = \"calib.txt\"\noutput = \"out\"\n").unwrap();
    let map = f.join("map.jsonl");
    let o = objmap(&["annotate", "--config", "c.toml", "--map", map.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let names: Vec<_> = snapshot(&dir.path().join("out/labels")).into_iter().map(|(p, _)| p).collect();
    assert_eq!(names, ["000000.txt", "000001.txt", "000002.txt"].map(PathBuf::from));
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&simulate(dir.path(), "[simulator]\nseed = 11\nn_objects = 5\n[simulator.noise]\nsigma_z = 0.4\n")), 0);
    let data = dir.path().join("data");
    assert_eq!(code(&objmap(&["build-map", "--config", "pipeline.toml"], &data)), 0);
    let mut snaps = Vec::new();
    for t in ["1", "4"] {
        let out = format!("ann{t}");
        let o = objmap(
            &["annotate", "--config", "pipeline.toml", "--map", "pipeline/map.jsonl", "--threads", t, "--output", &out],
            &data,
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        snaps.push(snapshot(&data.join(&out)));
    }
    assert_eq!(snaps[0], snaps[1]);
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_objmap"))
        .args(["simulate", "--seed", "1"])
        .current_dir(dir.path())
        .env("OBJMAP_OUTPUT", "from_env")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("from_env/trajectory.txt").is_file());
}

#[test]
fn evaluate_perfect_and_disjoint() {
    let f = fixtures();
    let gt = f.join("golden_labels");
    let dir = tempfile::tempdir().unwrap();
    let o = objmap(
        &["evaluate", "--pred", gt.to_str().unwrap(), "--gt", gt.to_str().unwrap(), "--output", "r"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("1.0000"), "{table}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r/report.json")).unwrap()).unwrap();
    assert_eq!(report["pairs"], 10);
    assert_eq!(report["depth"]["overall"]["abs_rel"], 0.0);
    assert_eq!(report["viewpoint"]["overall"]["acc_pi6"], 1.0);

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = objmap(
        &["evaluate", "--pred", empty.to_str().unwrap(), "--gt", gt.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(code(&o), 4);
}
