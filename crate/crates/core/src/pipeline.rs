//! End-to-end orchestration.
//!
//! The pipeline runs as six named stages (ingest, denoise, detect, register,
//! merge, reconstruct) that communicate only through files in the output
//! directory, so any stage can be rerun in isolation and a full run is
//! byte-identical to running the stages one at a time. Each stage writes a
//! report fragment; the reconstruct stage assembles them into `report.json`
//! with all wall-clock timings isolated under one key.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{PipelineConfig, ReconMode};
use crate::denoise::remove_outliers;
use crate::detect::{detect_targets, DetectParams, Target};
use crate::error::{Error, Result};
use crate::geom::{Frame, ScanId};
use crate::ingest::{self, ScanJob};
use crate::merge::{box_grid_merge, segment_keep_part};
use crate::register::{register, RegisterParams, ScanTargets};
use crate::surface::{
    check_watertight, estimate_normals, export_mesh, reconstruct_builtin, reconstruct_external,
    WatertightReport,
};

/// Stage names in execution order.
pub const STAGES: [&str; 6] = [
    "ingest",
    "denoise",
    "detect",
    "register",
    "merge",
    "reconstruct",
];

/// Final artifact paths of a completed pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineArtifacts {
    pub merged_cloud: PathBuf,
    pub part_cloud: PathBuf,
    pub mesh: PathBuf,
    pub report: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct IngestReport {
    reference: String,
    scans: Vec<ScanEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScanEntry {
    id: String,
    points: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct DenoiseEntry {
    id: String,
    kept: usize,
    removed: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TargetEntry {
    id: String,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RegisterReport {
    reference: String,
    iterations: usize,
    initial_cost: f64,
    final_cost: f64,
    edges: Vec<EdgeSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeSummary {
    scan_a: String,
    scan_b: String,
    match_count: usize,
    rmse_pairwise_mm: f64,
    rmse_refined_mm: f64,
    max_residual_mm: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct MergeReport {
    merged_points: usize,
    part_points: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct MeshReport {
    vertices: usize,
    facets: usize,
    file: String,
    watertight: WatertightReport,
}

/// Ordered scan ids of a job, derived from the scan file stems.
pub fn scan_ids(job: &ScanJob) -> Vec<ScanId> {
    job.scans
        .iter()
        .map(|p| ingest::scan_id_for_path(p))
        .collect()
}

fn scans_dir(out: &Path) -> PathBuf {
    out.join("scans")
}

fn denoised_dir(out: &Path) -> PathBuf {
    out.join("denoised")
}

fn targets_dir(out: &Path) -> PathBuf {
    out.join("targets")
}

fn poses_path(out: &Path) -> PathBuf {
    out.join("poses.json")
}

fn refined_poses_path(out: &Path) -> PathBuf {
    out.join("poses_refined.json")
}

fn merged_path(out: &Path) -> PathBuf {
    out.join("merged.txt")
}

fn part_path(out: &Path) -> PathBuf {
    out.join("part.txt")
}

fn mesh_path(out: &Path, cfg: &PipelineConfig) -> PathBuf {
    out.join(format!("mesh.{}", cfg.mesh_format.extension()))
}

fn report_path(out: &Path) -> PathBuf {
    out.join("report.json")
}

fn fragment_path(out: &Path, stage: &str) -> PathBuf {
    out.join("fragments").join(format!("{stage}.json"))
}

fn scan_file(dir: &Path, id: &ScanId) -> PathBuf {
    dir.join(format!("{id}.txt"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Copies scans and poses into the output directory in normalized form,
/// validating that every scan parses and has a pose.
fn stage_ingest(job: &ScanJob, out: &Path) -> Result<Value> {
    if job.scans.is_empty() {
        return Err(Error::Data("job lists no scans".into()));
    }
    let poses = ingest::read_poses(&job.poses)?;
    let dir = scans_dir(out);
    std::fs::create_dir_all(&dir)?;
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for path in &job.scans {
        let id = ingest::scan_id_for_path(path);
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!(
                "duplicate scan id '{id}' from {}",
                path.display()
            )));
        }
        ingest::find_pose(&poses, &id)?;
        let (cloud, image) = ingest::read_scan(path, id.clone())?;
        ingest::write_scan(&scan_file(&dir, &id), &cloud, &image)?;
        entries.push(ScanEntry {
            id: id.to_string(),
            points: cloud.len(),
        });
    }
    ingest::write_poses(&poses_path(out), &poses)?;
    Ok(serde_json::to_value(IngestReport {
        reference: entries[0].id.clone(),
        scans: entries,
    })?)
}

/// Statistical outlier removal per scan, preserving the range images.
fn stage_denoise(job: &ScanJob, out: &Path) -> Result<Value> {
    let dir = denoised_dir(out);
    std::fs::create_dir_all(&dir)?;
    let mut entries = Vec::new();
    for id in scan_ids(job) {
        let (cloud, image) = ingest::read_scan(&scan_file(&scans_dir(out), &id), id.clone())?;
        let (kept, removed) =
            remove_outliers(&cloud, job.config.denoise_knn, job.config.denoise_alpha)?;
        let image = image.without_points(&removed, cloud.len());
        ingest::write_scan(&scan_file(&dir, &id), &kept, &image)?;
        entries.push(DenoiseEntry {
            id: id.to_string(),
            kept: kept.len(),
            removed: removed.len(),
        });
    }
    Ok(serde_json::to_value(entries)?)
}

/// Circular target detection per scan; centres are in scanner-local frames.
fn stage_detect(job: &ScanJob, out: &Path) -> Result<Value> {
    let dir = targets_dir(out);
    std::fs::create_dir_all(&dir)?;
    let params = DetectParams::from_config(&job.config);
    let mut entries = Vec::new();
    for id in scan_ids(job) {
        let (cloud, image) = ingest::read_scan(&scan_file(&denoised_dir(out), &id), id.clone())?;
        let targets = detect_targets(&image, &cloud, &params)?;
        write_json(&dir.join(format!("{id}.json")), &targets)?;
        entries.push(TargetEntry {
            id: id.to_string(),
            count: targets.len(),
        });
    }
    Ok(serde_json::to_value(entries)?)
}

/// Target-based pose refinement; writes the refined pose file.
fn stage_register(job: &ScanJob, out: &Path) -> Result<Value> {
    let poses = ingest::read_poses(&poses_path(out))?;
    let mut scans = Vec::new();
    for id in scan_ids(job) {
        let targets: Vec<Target> = read_json(&targets_dir(out).join(format!("{id}.json")))?;
        let coarse = ingest::find_pose(&poses, &id)?.pose.clone();
        scans.push(ScanTargets {
            scan_id: id,
            targets,
            coarse,
        });
    }
    let reg = register(&scans, &RegisterParams::from_config(&job.config))?;
    ingest::write_poses(&refined_poses_path(out), &reg.poses)?;
    let edges = reg
        .edges
        .iter()
        .map(|e| EdgeSummary {
            scan_a: e.scan_a.to_string(),
            scan_b: e.scan_b.to_string(),
            match_count: e.match_count,
            rmse_pairwise_mm: e.rmse_pairwise_mm,
            rmse_refined_mm: e.rmse_refined_mm,
            max_residual_mm: e
                .matches
                .iter()
                .map(|m| m.residual_mm)
                .fold(0.0, f64::max),
        })
        .collect();
    Ok(serde_json::to_value(RegisterReport {
        reference: reg.reference.to_string(),
        iterations: reg.iterations,
        initial_cost: reg.initial_cost,
        final_cost: reg.final_cost,
        edges,
    })?)
}

/// Applies refined poses, merges on the box grid, and keeps the part cluster.
fn stage_merge(job: &ScanJob, out: &Path) -> Result<Value> {
    let poses = ingest::read_poses(&refined_poses_path(out))?;
    let mut clouds = Vec::new();
    let mut ref_targets = Vec::new();
    for id in scan_ids(job) {
        let (cloud, _) = ingest::read_scan(&scan_file(&denoised_dir(out), &id), id.clone())?;
        let pose = &ingest::find_pose(&poses, &id)?.pose;
        clouds.push(cloud.transformed(pose, Frame::Reference));
        let targets: Vec<Target> = read_json(&targets_dir(out).join(format!("{id}.json")))?;
        for t in targets {
            let c = t.center()?;
            let v = pose.apply(nalgebra::Vector3::from(c));
            ref_targets.push(Target {
                center3d: Some([v.x, v.y, v.z]),
                ..t
            });
        }
    }
    let merged = box_grid_merge(&clouds, job.config.voxel_mm)?;
    let part = segment_keep_part(
        &merged,
        &ref_targets,
        job.config.cluster_radius_mm,
        job.config.keep_radius_mm,
    )?;
    ingest::write_cloud(&merged_path(out), &merged)?;
    ingest::write_cloud(&part_path(out), &part)?;
    Ok(serde_json::to_value(MergeReport {
        merged_points: merged.len(),
        part_points: part.len(),
    })?)
}

/// Normal estimation, reconstruction, and mesh export.
fn stage_reconstruct(job: &ScanJob, out: &Path) -> Result<Value> {
    let cfg = &job.config;
    let (part, _) = ingest::read_scan(&part_path(out), ScanId::new("part"))?;
    let oriented = estimate_normals(&part, cfg.normals_k)?;
    let mesh = match cfg.reconstruction {
        ReconMode::Builtin => reconstruct_builtin(&oriented, cfg.cell_mm)?,
        ReconMode::External => {
            let template = cfg.tool_template.as_ref().ok_or_else(|| {
                Error::Config("reconstruction = external requires tool_template".into())
            })?;
            reconstruct_external(&oriented, cfg.depth, template)?
        }
    };
    let mesh_file = mesh_path(out, cfg);
    export_mesh(&mesh, &mesh_file, cfg.mesh_format)?;
    Ok(serde_json::to_value(MeshReport {
        vertices: mesh.vertices.len(),
        facets: mesh.facets.len(),
        file: mesh_file
            .file_name()
            .expect("mesh path has a file name")
            .to_string_lossy()
            .into_owned(),
        watertight: check_watertight(&mesh),
    })?)
}

fn dispatch(stage: &str, job: &ScanJob, out: &Path) -> Result<Value> {
    match stage {
        "ingest" => stage_ingest(job, out),
        "denoise" => stage_denoise(job, out),
        "detect" => stage_detect(job, out),
        "register" => stage_register(job, out),
        "merge" => stage_merge(job, out),
        "reconstruct" => stage_reconstruct(job, out),
        other => Err(Error::Config(format!(
            "unknown stage '{other}'; stages are: {}",
            STAGES.join(", ")
        ))),
    }
}

/// Artifacts a stage is responsible for, removed when it fails partway.
fn stage_outputs(stage: &str, cfg: &PipelineConfig, out: &Path) -> Vec<PathBuf> {
    match stage {
        "ingest" => vec![scans_dir(out), poses_path(out)],
        "denoise" => vec![denoised_dir(out)],
        "detect" => vec![targets_dir(out)],
        "register" => vec![refined_poses_path(out)],
        "merge" => vec![merged_path(out), part_path(out)],
        "reconstruct" => vec![mesh_path(out, cfg), report_path(out)],
        _ => Vec::new(),
    }
}

fn remove_outputs(paths: &[PathBuf]) {
    for p in paths {
        if p.is_dir() {
            let _ = std::fs::remove_dir_all(p);
        } else {
            let _ = std::fs::remove_file(p);
        }
    }
}

/// Runs a closure on the configured number of rayon threads, or on the
/// global pool when no count is set.
fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot build a {n}-thread pool: {e}")))?
            .install(f),
    }
}

/// Runs one named stage against the artifacts in `out`. On failure the
/// stage's partial outputs are removed and the error names the stage.
pub fn run_stage(stage: &str, job: &ScanJob, out: &Path) -> Result<()> {
    job.config.validate()?;
    if !STAGES.contains(&stage) {
        return dispatch(stage, job, out).map(|_| ());
    }
    std::fs::create_dir_all(out.join("fragments"))?;
    let started = Instant::now();
    match with_pool(job.config.threads, || dispatch(stage, job, out)) {
        Ok(data) => {
            let fragment = serde_json::json!({
                "seconds": started.elapsed().as_secs_f64(),
                "data": data,
            });
            write_json(&fragment_path(out, stage), &fragment)?;
            if stage == "reconstruct" {
                assemble_report(job, out)?;
            }
            Ok(())
        }
        Err(e) => {
            remove_outputs(&stage_outputs(stage, &job.config, out));
            Err(e.in_stage(stage))
        }
    }
}

/// Builds `report.json` from the stage fragments: resolved config, one
/// section per stage, and every timing isolated under `timings_seconds`.
fn assemble_report(job: &ScanJob, out: &Path) -> Result<()> {
    let mut report = serde_json::Map::new();
    report.insert("config".into(), serde_json::to_value(&job.config)?);
    let mut timings = serde_json::Map::new();
    for stage in STAGES {
        let path = fragment_path(out, stage);
        if path.exists() {
            let fragment: Value = read_json(&path)?;
            timings.insert(stage.into(), fragment["seconds"].clone());
            report.insert(stage.into(), fragment["data"].clone());
        } else {
            report.insert(stage.into(), Value::Null);
        }
    }
    report.insert("timings_seconds".into(), Value::Object(timings));
    write_json(&report_path(out), &Value::Object(report))
}

/// Runs every stage in order and returns the final artifact paths.
pub fn run_pipeline(job: &ScanJob, out: &Path) -> Result<PipelineArtifacts> {
    for stage in STAGES {
        run_stage(stage, job, out)?;
    }
    Ok(PipelineArtifacts {
        merged_cloud: merged_path(out),
        part_cloud: part_path(out),
        mesh: mesh_path(out, &job.config),
        report: report_path(out),
    })
}

/// Loads a mesh file and reports its watertightness.
pub fn check_mesh(path: &Path) -> Result<WatertightReport> {
    let mesh = crate::surface::import_mesh(path)?;
    Ok(check_watertight(&mesh))
}
