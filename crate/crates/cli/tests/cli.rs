//! Drives the compiled binary through the documented command flows and checks
//! the exit-code contract: 0 success, 2 configuration, 3 data.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use weldscan::synth::{write_job, SceneSpec};

const BIN: &str = env!("CARGO_BIN_EXE_weldscan");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn weldscan binary")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Renders a one-pass flat-plate job on disk for the error-path tests.
fn tiny_job(dir: &Path) -> std::path::PathBuf {
    let scene = SceneSpec::flat_plate(40.0, 20.0, 1.0, 3.0).generate().unwrap();
    write_job(&scene, dir).unwrap()
}

#[test]
fn synth_pipeline_and_check_mesh_flow_succeeds() {
    let tmp = TempDir::new().unwrap();
    let job_dir = tmp.path().join("job");
    let out_dir = tmp.path().join("out");

    let synth = run(&["synth", "--scene", "compact", "--seed", "11", "--out-dir", s(&job_dir)]);
    assert!(synth.status.success(), "synth: {}", stderr(&synth));
    let job = job_dir.join("job.json");
    assert!(job.exists());

    let pipeline = run(&["pipeline", s(&job), "--out-dir", s(&out_dir)]);
    assert!(pipeline.status.success(), "pipeline: {}", stderr(&pipeline));
    let mesh = out_dir.join("mesh.stl");
    assert!(mesh.exists());
    assert!(out_dir.join("report.json").exists());
    assert!(stdout(&pipeline).contains("report.json"), "{}", stdout(&pipeline));

    let check = run(&["check-mesh", s(&mesh)]);
    assert!(check.status.success(), "check-mesh: {}", stderr(&check));
    let text = stdout(&check);
    assert!(text.contains("watertight:"), "{text}");
    assert!(text.contains("boundary edges:"), "{text}");

    let check_json = run(&["check-mesh", s(&mesh), "--json"]);
    assert!(check_json.status.success());
    let report: serde_json::Value = serde_json::from_str(&stdout(&check_json)).unwrap();
    assert!(report["watertight"].is_boolean(), "{report}");

    // Selecting the external backend without configuring a tool is caught
    // before any stage runs.
    let recon = run(&["reconstruct", s(&job), "--out-dir", s(&out_dir), "--recon", "external"]);
    assert_eq!(recon.status.code(), Some(2), "stderr: {}", stderr(&recon));
    assert!(stderr(&recon).contains("tool_template"), "{}", stderr(&recon));
}

#[test]
fn rejected_config_file_exits_with_usage_code() {
    let tmp = TempDir::new().unwrap();
    let job = tiny_job(tmp.path());

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{\"voxel_mm\": -1.0}\n").unwrap();
    let out_dir = tmp.path().join("out");
    let out = run(&["ingest", s(&job), "--config", s(&bad), "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("voxel_mm"), "{}", stderr(&out));

    std::fs::write(&bad, "not json\n").unwrap();
    let out = run(&["ingest", s(&job), "--config", s(&bad), "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
}

#[test]
fn scan_without_a_pose_exits_with_data_code_naming_the_stage() {
    let tmp = TempDir::new().unwrap();
    let job = tiny_job(tmp.path());
    std::fs::write(tmp.path().join("poses.txt"), "[]\n").unwrap();

    let out_dir = tmp.path().join("out");
    let out = run(&["ingest", s(&job), "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    let msg = stderr(&out);
    assert!(msg.contains("stage ingest"), "{msg}");
    assert!(msg.contains("top_0"), "{msg}");
}
