//! Scan-file parsing, range images, and nominal poses.
//!
//! A scan file is line-oriented ASCII. The first non-blank line is the header
//! `# pitch_x pitch_y rows cols`; every following non-blank line is one valid
//! pixel `row col x y z intensity` with coordinates in millimetres and the
//! intensity in [0, 1]. Pixels appear in raster order: rows non-decreasing,
//! columns strictly increasing within a row. Values are written with six
//! decimal places, so a read-then-rewrite cycle is idempotent.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geom::{Frame, Point3, PointCloud, RigidTransform, ScanId, ScanPose};

const NO_POINT: u32 = u32::MAX;

/// Pixel-addressable view of one pass: per-pixel depth, intensity, validity,
/// and the index of the cloud point each valid pixel produced.
#[derive(Debug, Clone)]
pub struct RangeImage {
    rows: usize,
    cols: usize,
    pitch_x: f64,
    pitch_y: f64,
    depth: Vec<f64>,
    intensity: Vec<f64>,
    valid: Vec<bool>,
    point_index: Vec<u32>,
}

impl RangeImage {
    fn empty(rows: usize, cols: usize, pitch_x: f64, pitch_y: f64) -> Self {
        let n = rows * cols;
        Self {
            rows,
            cols,
            pitch_x,
            pitch_y,
            depth: vec![0.0; n],
            intensity: vec![0.0; n],
            valid: vec![false; n],
            point_index: vec![NO_POINT; n],
        }
    }

    /// Builds an image from raw buffers; point indices follow raster order of
    /// the valid pixels, matching the cloud a simulator emits alongside.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        pitch_x: f64,
        pitch_y: f64,
        depth: Vec<f64>,
        intensity: Vec<f64>,
        valid: Vec<bool>,
    ) -> Self {
        assert_eq!(depth.len(), rows * cols);
        assert_eq!(intensity.len(), rows * cols);
        assert_eq!(valid.len(), rows * cols);
        let mut point_index = vec![NO_POINT; rows * cols];
        let mut next = 0u32;
        for (i, &ok) in valid.iter().enumerate() {
            if ok {
                point_index[i] = next;
                next += 1;
            }
        }
        Self {
            rows,
            cols,
            pitch_x,
            pitch_y,
            depth,
            intensity,
            valid,
            point_index,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Millimetres per pixel along the laser line (columns).
    pub fn pitch_x(&self) -> f64 {
        self.pitch_x
    }

    /// Millimetres per pixel along the travel direction (rows).
    pub fn pitch_y(&self) -> f64 {
        self.pitch_y
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        row < self.rows && col < self.cols && self.valid[row * self.cols + col]
    }

    pub fn depth(&self, row: usize, col: usize) -> Option<f64> {
        self.is_valid(row, col).then(|| self.depth[row * self.cols + col])
    }

    pub fn intensity(&self, row: usize, col: usize) -> Option<f64> {
        self.is_valid(row, col)
            .then(|| self.intensity[row * self.cols + col])
    }

    /// Index into the originating cloud of the point behind a valid pixel.
    pub fn point_index(&self, row: usize, col: usize) -> Option<usize> {
        self.is_valid(row, col)
            .then(|| self.point_index[row * self.cols + col] as usize)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// The image after dropping the given cloud points: their pixels become
    /// invalid and the remaining pixel indices are remapped to the compacted
    /// cloud. `removed` must be sorted ascending.
    pub fn without_points(&self, removed: &[usize], cloud_len: usize) -> RangeImage {
        let mut keep_rank = vec![NO_POINT; cloud_len];
        let mut removed_iter = removed.iter().peekable();
        let mut rank: u32 = 0;
        for (i, slot) in keep_rank.iter_mut().enumerate() {
            if removed_iter.peek() == Some(&&i) {
                removed_iter.next();
            } else {
                *slot = rank;
                rank += 1;
            }
        }
        let mut out = self.clone();
        for pix in 0..out.point_index.len() {
            if !out.valid[pix] {
                continue;
            }
            let old = out.point_index[pix] as usize;
            let new = keep_rank[old];
            if new == NO_POINT {
                out.valid[pix] = false;
                out.point_index[pix] = NO_POINT;
            } else {
                out.point_index[pix] = new;
            }
        }
        out
    }
}

/// Everything one pipeline run consumes: ordered scan files (the first scan
/// is the reference), the nominal pose file, and the stage configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanJob {
    pub scans: Vec<PathBuf>,
    pub poses: PathBuf,
    pub config: PipelineConfig,
}

impl ScanJob {
    /// Reads a job file; relative scan and pose paths are resolved against
    /// the job file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut job: ScanJob = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        job.scans.iter_mut().for_each(rebase);
        rebase(&mut job.poses);
        job.config.validate()?;
        Ok(job)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Scan id derived from a scan path: the file stem.
pub fn scan_id_for_path(path: &Path) -> ScanId {
    ScanId::new(path.file_stem().map_or_else(
        || path.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    ))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Parses one scan file into its point cloud (scanner-local frame, raster
/// order) and range image.
pub fn read_scan(path: &Path, scan_id: ScanId) -> Result<(PointCloud, RangeImage)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open scan {}: {e}", path.display())))?;
    let reader = BufReader::new(file);

    let mut image: Option<RangeImage> = None;
    let mut points: Vec<Point3> = Vec::new();
    let mut last_pixel: Option<(usize, usize)> = None;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| parse_err(path, lineno, e.to_string()))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        match &mut image {
            None => {
                let rest = trimmed.strip_prefix('#').ok_or_else(|| {
                    parse_err(path, lineno, "expected header '# pitch_x pitch_y rows cols'")
                })?;
                let fields: Vec<&str> = rest.split_whitespace().collect();
                if fields.len() != 4 {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("header needs 4 fields, got {}", fields.len()),
                    ));
                }
                let pitch_x: f64 = fields[0]
                    .parse()
                    .map_err(|_| parse_err(path, lineno, "bad pitch_x"))?;
                let pitch_y: f64 = fields[1]
                    .parse()
                    .map_err(|_| parse_err(path, lineno, "bad pitch_y"))?;
                let rows: usize = fields[2]
                    .parse()
                    .map_err(|_| parse_err(path, lineno, "bad rows"))?;
                let cols: usize = fields[3]
                    .parse()
                    .map_err(|_| parse_err(path, lineno, "bad cols"))?;
                if !(pitch_x.is_finite() && pitch_x > 0.0 && pitch_y.is_finite() && pitch_y > 0.0) {
                    return Err(parse_err(path, lineno, "pitches must be positive"));
                }
                if rows == 0 || cols == 0 {
                    return Err(parse_err(path, lineno, "rows and cols must be at least 1"));
                }
                image = Some(RangeImage::empty(rows, cols, pitch_x, pitch_y));
            }
            Some(img) => {
                let fields: Vec<&str> = trimmed.split_whitespace().collect();
                if fields.len() != 6 {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("pixel line needs 6 fields, got {}", fields.len()),
                    ));
                }
                let row: usize = fields[0]
                    .parse()
                    .map_err(|_| parse_err(path, lineno, "bad row index"))?;
                let col: usize = fields[1]
                    .parse()
                    .map_err(|_| parse_err(path, lineno, "bad col index"))?;
                let mut coords = [0.0f64; 4];
                for (slot, field) in coords.iter_mut().zip(&fields[2..]) {
                    *slot = field
                        .parse()
                        .map_err(|_| parse_err(path, lineno, format!("bad number '{field}'")))?;
                }
                let [x, y, z, intensity] = coords;
                if !(x.is_finite() && y.is_finite() && z.is_finite()) {
                    return Err(parse_err(path, lineno, "non-finite coordinate"));
                }
                if !(0.0..=1.0).contains(&intensity) {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("intensity {intensity} outside [0, 1]"),
                    ));
                }
                if row >= img.rows || col >= img.cols {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!(
                            "pixel ({row}, {col}) outside {}x{} image",
                            img.rows, img.cols
                        ),
                    ));
                }
                if let Some((pr, pc)) = last_pixel {
                    if row < pr {
                        return Err(parse_err(
                            path,
                            lineno,
                            format!("non-monotonic row index: {row} after {pr}"),
                        ));
                    }
                    if row == pr && col <= pc {
                        return Err(parse_err(
                            path,
                            lineno,
                            format!("column {col} not increasing after {pc} in row {row}"),
                        ));
                    }
                }
                last_pixel = Some((row, col));
                let pix = row * img.cols + col;
                img.depth[pix] = z;
                img.intensity[pix] = intensity;
                img.valid[pix] = true;
                img.point_index[pix] = points.len() as u32;
                points.push(Point3::with_intensity(x, y, z, intensity));
            }
        }
    }

    let image = image.ok_or_else(|| parse_err(path, 1, "empty scan file"))?;
    if points.is_empty() {
        return Err(parse_err(path, 1, "scan file has a header but no pixels"));
    }
    Ok((
        PointCloud::new(points, Some(scan_id), Frame::ScannerLocal),
        image,
    ))
}

fn format_pixel_line(out: &mut String, row: usize, col: usize, p: &Point3) {
    let intensity = p.intensity.unwrap_or(0.0);
    let _ = writeln!(
        out,
        "{row} {col} {:.6} {:.6} {:.6} {:.6}",
        p.x, p.y, p.z, intensity
    );
}

/// Writes a cloud and its range image back to the scan format, raster order.
pub fn write_scan(path: &Path, cloud: &PointCloud, image: &RangeImage) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "# {} {} {} {}",
        image.pitch_x, image.pitch_y, image.rows, image.cols
    )?;
    let mut buf = String::new();
    for row in 0..image.rows {
        for col in 0..image.cols {
            if let Some(i) = image.point_index(row, col) {
                buf.clear();
                format_pixel_line(&mut buf, row, col, &cloud.points[i]);
                w.write_all(buf.as_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes a non-raster cloud (merged or segmented) in the scan format using a
/// synthetic n-by-1 grid, so every cloud artifact reads back with `read_scan`.
pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# 1 1 {} 1", cloud.len())?;
    let mut buf = String::new();
    for (i, p) in cloud.points.iter().enumerate() {
        buf.clear();
        format_pixel_line(&mut buf, i, 0, p);
        w.write_all(buf.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    scan_id: ScanId,
    /// Row-major 3x3 rotation.
    rotation: [f64; 9],
    translation: [f64; 3],
}

/// Reads the nominal pose file: a JSON array of scan poses, each validated
/// to be a proper rigid transform.
pub fn read_poses(path: &Path) -> Result<Vec<ScanPose>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot open poses {}: {e}", path.display())))?;
    let records: Vec<PoseRecord> = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut poses = Vec::with_capacity(records.len());
    for rec in records {
        let r = &rec.rotation;
        let rotation = nalgebra::Matrix3::new(
            r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8],
        );
        let translation = nalgebra::Vector3::from(rec.translation);
        let pose = RigidTransform::new(rotation, translation).map_err(|e| {
            Error::Data(format!("pose of scan '{}' is not rigid: {e}", rec.scan_id))
        })?;
        poses.push(ScanPose {
            scan_id: rec.scan_id,
            pose,
        });
    }
    Ok(poses)
}

pub fn write_poses(path: &Path, poses: &[ScanPose]) -> Result<()> {
    let records: Vec<PoseRecord> = poses
        .iter()
        .map(|sp| {
            let m = sp.pose.rotation();
            PoseRecord {
                scan_id: sp.scan_id.clone(),
                rotation: [
                    m[(0, 0)],
                    m[(0, 1)],
                    m[(0, 2)],
                    m[(1, 0)],
                    m[(1, 1)],
                    m[(1, 2)],
                    m[(2, 0)],
                    m[(2, 1)],
                    m[(2, 2)],
                ],
                translation: [
                    sp.pose.translation().x,
                    sp.pose.translation().y,
                    sp.pose.translation().z,
                ],
            }
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&records)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Looks up the cloud's pose by scan id and moves it into the coarse-aligned
/// frame. The cloud must still be scanner-local.
pub fn coarse_align(cloud: &PointCloud, poses: &[ScanPose]) -> Result<PointCloud> {
    if cloud.frame != Frame::ScannerLocal {
        return Err(Error::Data(format!(
            "coarse alignment expects a scanner-local cloud, got {:?}",
            cloud.frame
        )));
    }
    let id = cloud
        .scan_id
        .as_ref()
        .ok_or_else(|| Error::Data("cloud has no scan id to look up a pose for".into()))?;
    let pose = find_pose(poses, id)?;
    Ok(cloud.transformed(&pose.pose, Frame::CoarseAligned))
}

/// The pose for `id`, or a data error naming the scan.
pub fn find_pose<'a>(poses: &'a [ScanPose], id: &ScanId) -> Result<&'a ScanPose> {
    poses
        .iter()
        .find(|sp| &sp.scan_id == id)
        .ok_or_else(|| Error::Data(format!("no pose for scan '{id}'")))
}
