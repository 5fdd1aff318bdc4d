//! Synthetic scan generator with exact ground truth.
//!
//! Builds a scene (a dog-bone part with a transverse weld bead floating above
//! a zero-thickness carrier band, or a bare flat plate), then renders line
//! scanner passes over it: a regular raster in the pass's own frame, Gaussian
//! depth noise, labelled outlier spikes, dropouts, and circular sticker discs
//! in the intensity channel. The bottom of the part is scanned after a 180
//! degree flip about the x axis; the carrier band is flipped with the part,
//! so its stickers are seen by both sessions at identical positions and tie
//! the two sessions together. Every random draw comes from a per-pass seeded
//! stream, so re-rendering a scene is bit-identical.
//!
//! Ground truth records the true pose of every pass, every sticker's world
//! position, per-point outlier labels, and per-point part/fixture labels,
//! which is enough to score every pipeline stage independently.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geom::{Frame, Point3, PointCloud, RigidTransform, ScanId, ScanPose};
use crate::ingest::{self, RangeImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Session {
    Top,
    Bottom,
}

/// Which physical face a sticker is glued to. Band stickers sit on the
/// zero-thickness carrier and are visible from both sides; part stickers
/// belong to one session only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Surface {
    Band,
    PartTop,
    PartBottom,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sticker {
    pub surface: Surface,
    /// World-frame centre, x/y on the surface.
    pub x: f64,
    pub y: f64,
    pub radius_mm: f64,
    /// Added to the base intensity inside the disc; may be negative.
    pub contrast: f64,
}

#[derive(Debug, Clone)]
pub struct PassSpec {
    pub session: Session,
    /// Strip start along the travel axis, in session-frame millimetres.
    pub y0_mm: f64,
    pub fov_mm: f64,
    pub pitch_x: f64,
    pub pitch_y: f64,
    /// Mounting error: true pose = nominal pose composed with this.
    pub pose_err: RigidTransform,
}

/// Dog-bone tensile-specimen shape with a transverse weld bead on top and a
/// weld root underneath, floating `lift` mm above the carrier plane. Edges
/// taper over `apron` mm to a knife edge at mid-thickness so each session
/// sees the silhouette without vertical walls.
#[derive(Debug, Clone)]
pub struct DogBone {
    pub length: f64,
    pub width: f64,
    pub thickness: f64,
    pub lift: f64,
    pub grip_len: f64,
    pub neck_half_width: f64,
    pub fillet_len: f64,
    pub apron: f64,
    pub bead_height: f64,
    pub bead_sigma: f64,
    pub bead_x: f64,
    pub root_height: f64,
    pub root_sigma: f64,
}

impl DogBone {
    fn half_width(&self, x: f64) -> f64 {
        let full = self.width / 2.0;
        let drop = full - self.neck_half_width;
        let neck_start = self.grip_len + self.fillet_len;
        let neck_end = self.length - neck_start;
        let smooth = |s: f64| {
            let s = s.clamp(0.0, 1.0);
            s * s * (3.0 - 2.0 * s)
        };
        if x < self.grip_len || x > self.length - self.grip_len {
            full
        } else if x < neck_start {
            full - drop * smooth((x - self.grip_len) / self.fillet_len)
        } else if x <= neck_end {
            self.neck_half_width
        } else {
            full - drop * smooth((self.length - self.grip_len - x) / -self.fillet_len + 1.0)
        }
    }

    /// Distance from (x, y) inward to the outline (0 on or outside it);
    /// approximate near fillets but monotone, which is all shaping needs.
    pub fn inner_depth(&self, x: f64, y: f64) -> f64 {
        let lateral = self.half_width(x) - (y - self.width / 2.0).abs();
        x.min(self.length - x).min(lateral).max(0.0)
    }

    fn bead(&self, x: f64) -> f64 {
        let d = x - self.bead_x;
        self.bead_height * (-d * d / (2.0 * self.bead_sigma * self.bead_sigma)).exp()
    }

    fn root(&self, x: f64) -> f64 {
        let d = x - self.bead_x;
        self.root_height * (-d * d / (2.0 * self.root_sigma * self.root_sigma)).exp()
    }

    fn shape(&self, core: f64, depth: f64) -> f64 {
        let knife = self.lift + self.thickness / 2.0;
        if depth >= self.apron {
            core
        } else {
            knife + (depth / self.apron) * (core - knife)
        }
    }

    pub fn top_z(&self, x: f64, y: f64) -> Option<f64> {
        let depth = self.inner_depth(x, y);
        if depth <= 0.0 {
            return None;
        }
        Some(self.shape(self.lift + self.thickness + self.bead(x), depth))
    }

    pub fn bottom_z(&self, x: f64, y: f64) -> Option<f64> {
        let depth = self.inner_depth(x, y);
        if depth <= 0.0 {
            return None;
        }
        Some(self.shape(self.lift - self.root(x), depth))
    }
}

#[derive(Debug, Clone)]
pub enum PartSpec {
    /// Flat plate at z = 0 with an optional bead; top session only.
    Plate {
        length: f64,
        width: f64,
        bead_height: f64,
        bead_sigma: f64,
        bead_x: f64,
    },
    DogBone(DogBone),
}

impl PartSpec {
    fn top_z(&self, x: f64, y: f64) -> Option<f64> {
        match self {
            PartSpec::Plate {
                length,
                width,
                bead_height,
                bead_sigma,
                bead_x,
            } => {
                if x < 0.0 || x > *length || y < 0.0 || y > *width {
                    None
                } else {
                    let d = x - bead_x;
                    Some(bead_height * (-d * d / (2.0 * bead_sigma * bead_sigma)).exp())
                }
            }
            PartSpec::DogBone(d) => d.top_z(x, y),
        }
    }

    fn bottom_z(&self, x: f64, y: f64) -> Option<f64> {
        match self {
            PartSpec::Plate { .. } => None,
            PartSpec::DogBone(d) => d.bottom_z(x, y),
        }
    }

    fn width(&self) -> f64 {
        match self {
            PartSpec::Plate { width, .. } => *width,
            PartSpec::DogBone(d) => d.width,
        }
    }
}

/// Zero-thickness carrier band: the region between the outer rectangle and
/// the window cutout, at z = 0 in the top session's world frame.
#[derive(Debug, Clone)]
pub struct BandSpec {
    pub outer: [f64; 4],
    pub window: [f64; 4],
}

impl BandSpec {
    fn contains(&self, x: f64, y: f64) -> bool {
        let [ox0, ox1, oy0, oy1] = self.outer;
        let [wx0, wx1, wy0, wy1] = self.window;
        let in_outer = x >= ox0 && x <= ox1 && y >= oy0 && y <= oy1;
        let in_window = x > wx0 && x < wx1 && y > wy0 && y < wy1;
        in_outer && !in_window
    }

    /// Distance to the nearest band boundary (outer or window edge).
    fn edge_clearance(&self, x: f64, y: f64) -> f64 {
        let [ox0, ox1, oy0, oy1] = self.outer;
        let [wx0, wx1, wy0, wy1] = self.window;
        let to_outer = (x - ox0).min(ox1 - x).min(y - oy0).min(oy1 - y);
        let to_window = (x - wx0)
            .abs()
            .min((wx1 - x).abs())
            .min((y - wy0).abs())
            .min((wy1 - y).abs());
        to_outer.min(to_window)
    }
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub part: PartSpec,
    pub band: Option<BandSpec>,
    /// Height of the flip plane: the physical flip maps z to flip_z − z.
    pub flip_z: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub stickers: Vec<Sticker>,
    pub passes: Vec<PassSpec>,
    pub noise_sigma_mm: f64,
    pub intensity_noise: f64,
    pub outlier_fraction: f64,
    pub dropout_fraction: f64,
    /// Tuned pipeline configuration emitted with the job files.
    pub job_config: PipelineConfig,
}

/// One rendered pass plus everything needed to score it.
#[derive(Debug, Clone)]
pub struct SynthPass {
    pub scan_id: ScanId,
    pub cloud: PointCloud,
    pub image: RangeImage,
    pub true_pose: RigidTransform,
    pub nominal_pose: RigidTransform,
    pub outlier_indices: Vec<usize>,
    /// Per-point surface label: 0 = part, 1 = band.
    pub point_labels: Vec<u8>,
    /// Indices into the scene's sticker list, fully inside this pass's FoV.
    pub visible_targets: Vec<usize>,
}

#[derive(Debug)]
pub struct SynthScene {
    pub passes: Vec<SynthPass>,
    pub truth: GroundTruth,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthPose {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl TruthPose {
    pub fn from_transform(t: &RigidTransform) -> Self {
        let r = t.rotation();
        let mut rotation = [0.0; 9];
        for row in 0..3 {
            for col in 0..3 {
                rotation[row * 3 + col] = r[(row, col)];
            }
        }
        let tr = t.translation();
        Self {
            rotation,
            translation: [tr.x, tr.y, tr.z],
        }
    }

    pub fn to_transform(&self) -> Result<RigidTransform> {
        let r = nalgebra::Matrix3::from_row_slice(&self.rotation);
        RigidTransform::new(r, nalgebra::Vector3::from_column_slice(&self.translation))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthTarget {
    pub id: usize,
    pub surface: Surface,
    pub world: [f64; 3],
    pub radius_mm: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthPass {
    pub scan_id: ScanId,
    pub session: Session,
    pub true_pose: TruthPose,
    pub nominal_pose: TruthPose,
    pub outlier_indices: Vec<usize>,
    /// One character per point: '0' part, '1' band.
    pub point_labels: String,
    pub visible_targets: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub noise_sigma_mm: f64,
    pub outlier_fraction: f64,
    pub flip: TruthPose,
    pub targets: Vec<TruthTarget>,
    pub passes: Vec<TruthPass>,
}

impl GroundTruth {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn splitmix64(seed: u64, salt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E3779B97F4A7C15)
        .wrapping_add(salt.wrapping_mul(0xD1B54A32D192ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl SceneSpec {
    /// The physical flip between sessions: 180 degrees about the x axis
    /// through y = width/2, z = flip_z/2. Involutive.
    pub fn flip(&self) -> RigidTransform {
        let r = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, -1.0, -1.0));
        RigidTransform::new(
            r,
            nalgebra::Vector3::new(0.0, self.part.width(), self.flip_z),
        )
        .expect("flip rotation is proper")
    }

    /// Surface height and label at session-frame coordinates. For the bottom
    /// session the frame is the flipped world, so the part shows its bottom
    /// face and the band sits at z = flip_z.
    fn surface_at(&self, session: Session, sx: f64, sy: f64) -> Option<(f64, Surface)> {
        match session {
            Session::Top => {
                if let Some(z) = self.part.top_z(sx, sy) {
                    return Some((z, Surface::PartTop));
                }
                match &self.band {
                    Some(b) if b.contains(sx, sy) => Some((0.0, Surface::Band)),
                    _ => None,
                }
            }
            Session::Bottom => {
                let wy = self.part.width() - sy;
                if let Some(z) = self.part.bottom_z(sx, wy) {
                    return Some((self.flip_z - z, Surface::PartBottom));
                }
                match &self.band {
                    Some(b) if b.contains(sx, wy) => Some((self.flip_z, Surface::Band)),
                    _ => None,
                }
            }
        }
    }

    /// Sticker world-frame 3D centre (on its surface).
    pub fn sticker_world(&self, s: &Sticker) -> [f64; 3] {
        let z = match s.surface {
            Surface::Band => 0.0,
            Surface::PartTop => self.part.top_z(s.x, s.y).unwrap_or(0.0),
            Surface::PartBottom => self.part.bottom_z(s.x, s.y).unwrap_or(0.0),
        };
        [s.x, s.y, z]
    }

    /// Session-frame (x, y) of a sticker, if its surface faces that session.
    fn sticker_session_xy(&self, s: &Sticker, session: Session) -> Option<(f64, f64)> {
        match (session, s.surface) {
            (Session::Top, Surface::Band | Surface::PartTop) => Some((s.x, s.y)),
            (Session::Bottom, Surface::Band | Surface::PartBottom) => {
                Some((s.x, self.part.width() - s.y))
            }
            _ => None,
        }
    }

    /// Scanner-frame origin of a pass: the centre of its field of view at
    /// carrier height, mirroring how a line scanner reports ranges relative
    /// to its optical centre. Centring keeps lever arms short so small pose
    /// errors move targets by millimetres, not centimetres.
    fn pass_centre(&self, pass: &PassSpec) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, pass.y0_mm + pass.fov_mm / 2.0)
    }

    fn nominal_pose(&self, pass: &PassSpec) -> RigidTransform {
        let (cx, cy) = self.pass_centre(pass);
        let shift = RigidTransform::new(
            nalgebra::Matrix3::identity(),
            nalgebra::Vector3::new(cx, cy, 0.0),
        )
        .expect("translation is rigid");
        match pass.session {
            Session::Top => shift,
            Session::Bottom => self.flip().compose(&shift),
        }
    }

    /// Sticker ids fully inside the pass FoV (margin radius + 1 mm) on a
    /// surface that session can see.
    pub fn visible_stickers(&self, pass: &PassSpec) -> Vec<usize> {
        self.stickers
            .iter()
            .enumerate()
            .filter_map(|(id, s)| {
                let (sx, sy) = self.sticker_session_xy(s, pass.session)?;
                let m = s.radius_mm + 1.0;
                let in_y = sy >= pass.y0_mm + m && sy <= pass.y0_mm + pass.fov_mm - m;
                let in_x = sx >= self.x_min + m && sx <= self.x_max - m;
                (in_x && in_y).then_some(id)
            })
            .collect()
    }

    /// Pass pairs sharing at least 3 fully visible stickers, with counts.
    pub fn overlap_pairs(&self) -> Vec<(usize, usize, usize)> {
        let vis: Vec<Vec<usize>> = self.passes.iter().map(|p| self.visible_stickers(p)).collect();
        let mut pairs = Vec::new();
        for i in 0..vis.len() {
            for j in i + 1..vis.len() {
                let shared = vis[i].iter().filter(|id| vis[j].contains(id)).count();
                if shared >= 3 {
                    pairs.push((i, j, shared));
                }
            }
        }
        pairs
    }

    /// Checks sticker separation and that the shared-sticker graph connects
    /// every pass to the first one. Stickers on the same surface must keep
    /// `min_separation`; stickers on opposite faces are allowed as close as
    /// the part thickness since no session ever sees both.
    pub fn validate(&self, min_separation: f64) -> Result<()> {
        for (i, a) in self.stickers.iter().enumerate() {
            for b in self.stickers.iter().skip(i + 1) {
                let pa = self.sticker_world(a);
                let pb = self.sticker_world(b);
                let d = pa
                    .iter()
                    .zip(pb)
                    .map(|(u, v)| (u - v) * (u - v))
                    .sum::<f64>()
                    .sqrt();
                let opposite_faces = matches!(
                    (a.surface, b.surface),
                    (Surface::PartTop, Surface::PartBottom)
                        | (Surface::PartBottom, Surface::PartTop)
                );
                let needed = if opposite_faces { 8.0 } else { min_separation };
                if d < needed {
                    return Err(Error::Data(format!(
                        "stickers {d:.1} mm apart; minimum is {needed}"
                    )));
                }
            }
        }
        let n = self.passes.len();
        let mut reach = vec![false; n];
        reach[0] = true;
        let pairs = self.overlap_pairs();
        loop {
            let mut grew = false;
            for &(i, j, _) in &pairs {
                if reach[i] != reach[j] {
                    reach[i] = true;
                    reach[j] = true;
                    grew = true;
                }
            }
            if !grew {
                break;
            }
        }
        if let Some(orphan) = reach.iter().position(|r| !r) {
            return Err(Error::Data(format!(
                "pass {orphan} shares fewer than 3 stickers with every pass reachable from pass 0"
            )));
        }
        Ok(())
    }

    /// Renders one pass: raster sampling of the session surface, noise,
    /// labelled outliers, dropouts, and sticker discs in intensity.
    pub fn render_pass(&self, idx: usize) -> Result<SynthPass> {
        let pass = self
            .passes
            .get(idx)
            .ok_or_else(|| Error::Config(format!("pass index {idx} out of range")))?;
        let rows = (pass.fov_mm / pass.pitch_y).round() as usize + 1;
        let cols = ((self.x_max - self.x_min) / pass.pitch_x).round() as usize + 1;
        let scan_id = ScanId::new(match pass.session {
            Session::Top => format!("top_{}", idx),
            Session::Bottom => format!("bottom_{}", self.passes[..idx]
                .iter()
                .filter(|p| p.session == Session::Bottom)
                .count()),
        });

        let err_inv = pass.pose_err.inverse();
        let (cx, cy) = self.pass_centre(pass);
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed, 0xA55 + idx as u64));
        let depth_noise = Normal::new(0.0, self.noise_sigma_mm.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::Config(format!("bad noise sigma: {e}")))?;

        // Stickers this session can see, in session-frame coordinates.
        let discs: Vec<(f64, f64, f64, f64)> = self
            .stickers
            .iter()
            .filter_map(|s| {
                self.sticker_session_xy(s, pass.session)
                    .map(|(sx, sy)| (sx, sy, s.radius_mm, s.contrast))
            })
            .collect();

        let n_px = rows * cols;
        let mut depth = vec![0.0; n_px];
        let mut intensity = vec![0.0; n_px];
        let mut valid = vec![false; n_px];
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut outliers = Vec::new();

        for r in 0..rows {
            let sy = pass.y0_mm + r as f64 * pass.pitch_y;
            for c in 0..cols {
                let sx = self.x_min + c as f64 * pass.pitch_x;
                let Some((sz, surf)) = self.surface_at(pass.session, sx, sy) else {
                    continue;
                };
                let dz = if self.noise_sigma_mm > 0.0 {
                    depth_noise.sample(&mut rng)
                } else {
                    0.0
                };
                let di = if self.intensity_noise > 0.0 {
                    rng.random_range(-self.intensity_noise..self.intensity_noise)
                } else {
                    0.0
                };
                let outlier_roll: f64 = rng.random();
                let dropout_roll: f64 = rng.random();

                // Stickers are matte: dropouts and specular spikes happen on
                // the bare surface only, never inside or just beside a disc.
                let near_sticker = discs
                    .iter()
                    .any(|&(dx, dy, dr, _)| ((sx - dx).powi(2) + (sy - dy).powi(2)).sqrt() <= dr + 1.0);
                let mut z = sz + dz;
                let mut is_outlier = false;
                if !near_sticker {
                    if dropout_roll < self.dropout_fraction {
                        continue;
                    }
                    if outlier_roll < self.outlier_fraction {
                        let magnitude = rng.random_range(10.0..20.0);
                        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        z += sign * magnitude;
                        is_outlier = true;
                    }
                }

                let mut shade = 0.45 + di;
                for &(dx, dy, dr, contrast) in &discs {
                    let d = ((sx - dx).powi(2) + (sy - dy).powi(2)).sqrt();
                    let cover = ((dr - d) / pass.pitch_y + 0.5).clamp(0.0, 1.0);
                    shade += contrast * cover;
                }
                let shade = shade.clamp(0.0, 1.0);

                let nominal = nalgebra::Vector3::new(sx - cx, sy - cy, z);
                let local = err_inv.apply(nominal);
                let px = r * cols + c;
                depth[px] = local.z;
                intensity[px] = shade;
                valid[px] = true;
                if is_outlier {
                    outliers.push(points.len());
                }
                labels.push(if surf == Surface::Band { 1 } else { 0 });
                points.push(Point3::with_intensity(local.x, local.y, local.z, shade));
            }
        }
        if points.is_empty() {
            return Err(Error::Data(format!(
                "pass {idx} ({scan_id}) sees no surface in its field of view"
            )));
        }

        let nominal_pose = self.nominal_pose(pass);
        let true_pose = nominal_pose.compose(&pass.pose_err);
        let image = RangeImage::from_parts(
            rows,
            cols,
            pass.pitch_x,
            pass.pitch_y,
            depth,
            intensity,
            valid,
        );
        Ok(SynthPass {
            cloud: PointCloud::new(points, Some(scan_id.clone()), Frame::ScannerLocal),
            scan_id,
            image,
            true_pose,
            nominal_pose,
            outlier_indices: outliers,
            point_labels: labels,
            visible_targets: self.visible_stickers(pass),
        })
    }

    /// Renders every pass and assembles the ground truth.
    pub fn generate(&self) -> Result<SynthScene> {
        let passes: Vec<SynthPass> = (0..self.passes.len())
            .into_par_iter()
            .map(|i| self.render_pass(i))
            .collect::<Result<_>>()?;
        let targets = self
            .stickers
            .iter()
            .enumerate()
            .map(|(id, s)| TruthTarget {
                id,
                surface: s.surface,
                world: self.sticker_world(s),
                radius_mm: s.radius_mm,
                contrast: s.contrast,
            })
            .collect();
        let truth_passes = passes
            .iter()
            .map(|p| TruthPass {
                scan_id: p.scan_id.clone(),
                session: self.passes[passes
                    .iter()
                    .position(|q| q.scan_id == p.scan_id)
                    .unwrap()]
                .session,
                true_pose: TruthPose::from_transform(&p.true_pose),
                nominal_pose: TruthPose::from_transform(&p.nominal_pose),
                outlier_indices: p.outlier_indices.clone(),
                point_labels: p.point_labels.iter().map(|&l| (b'0' + l) as char).collect(),
                visible_targets: p.visible_targets.clone(),
            })
            .collect();
        Ok(SynthScene {
            truth: GroundTruth {
                seed: self.seed,
                noise_sigma_mm: self.noise_sigma_mm,
                outlier_fraction: self.outlier_fraction,
                flip: TruthPose::from_transform(&self.flip()),
                targets,
                passes: truth_passes,
            },
            passes,
            config: self.job_config.clone(),
        })
    }
}

/// Sticker row layout: walks `x_range` in jittered steps, keeping positions
/// that clear the given acceptance test.
fn layout_row(
    rng: &mut ChaCha8Rng,
    surface: Surface,
    row_y: f64,
    y_jitter: f64,
    x_range: (f64, f64),
    step: f64,
    x_jitter: f64,
    radius: f64,
    accept: impl Fn(f64, f64) -> bool,
    out: &mut Vec<Sticker>,
) {
    let mut x = x_range.0;
    while x <= x_range.1 {
        let cx = x + rng.random_range(-x_jitter..=x_jitter);
        let cy = row_y + rng.random_range(-y_jitter..=y_jitter);
        if accept(cx, cy) {
            out.push(Sticker {
                surface,
                x: cx,
                y: cy,
                radius_mm: radius,
                contrast: 0.0,
            });
        }
        x += step;
    }
}

fn assign_contrasts(stickers: &mut [Sticker]) {
    for (i, s) in stickers.iter_mut().enumerate() {
        s.contrast = if i % 2 == 0 { 0.40 } else { -0.32 };
    }
}

impl SceneSpec {
    /// The default desk-scale scene: a 570 x 100 x 20 mm dog-bone with a
    /// transverse bead, floating over a carrier band, scanned in 4 top and 4
    /// bottom passes at 0.5 mm pitch with a 90 mm field of view.
    pub fn default_scene(seed: u64) -> Result<SceneSpec> {
        let part = DogBone {
            length: 570.0,
            width: 100.0,
            thickness: 20.0,
            lift: 5.0,
            grip_len: 150.0,
            neck_half_width: 20.0,
            fillet_len: 50.0,
            apron: 3.0,
            bead_height: 3.0,
            bead_sigma: 4.0,
            bead_x: 285.0,
            root_height: 1.5,
            root_sigma: 2.5,
        };
        let band = BandSpec {
            outer: [-30.0, 600.0, -30.0, 130.0],
            window: [-10.0, 580.0, -10.0, 110.0],
        };
        let radius = 4.0;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed, 0x57C));
        let mut stickers = Vec::new();
        let clear_band =
            |x: f64, y: f64| band.contains(x, y) && band.edge_clearance(x, y) >= radius + 2.0;
        // Band anchor rows couple the two sessions: row -20 is seen by the
        // first top pass and the last bottom pass, row 120 the other way
        // round, and their 140 mm spacing resists rotation about either line.
        for row_y in [-20.0, 120.0] {
            layout_row(
                &mut rng,
                Surface::Band,
                row_y,
                2.0,
                (-16.0, 586.0),
                68.0,
                8.0,
                radius,
                &clear_band,
                &mut stickers,
            );
        }
        // Part rows 18 mm apart, so every neighbouring pass pair shares at
        // least two full rows: one shared row would leave the pair free to
        // pivot about that line. The centre row chains the full length
        // through the neck; all rows avoid the bead.
        let clear_part = |x: f64, y: f64| {
            part.inner_depth(x, y) >= radius + part.apron + 2.0 && (x - part.bead_x).abs() >= 25.0
        };
        for surface in [Surface::PartTop, Surface::PartBottom] {
            for row_y in [14.0, 32.0, 50.0, 68.0, 86.0] {
                layout_row(
                    &mut rng,
                    surface,
                    row_y,
                    1.0,
                    (14.0, 556.0),
                    66.0,
                    8.0,
                    radius,
                    &clear_part,
                    &mut stickers,
                );
            }
        }
        assign_contrasts(&mut stickers);

        let mut err_rng = ChaCha8Rng::seed_from_u64(splitmix64(seed, 0xE44));
        let mut passes = Vec::new();
        for session in [Session::Top, Session::Bottom] {
            for y0 in [-32.0, -7.0, 18.0, 43.0] {
                passes.push(PassSpec {
                    session,
                    y0_mm: y0,
                    fov_mm: 90.0,
                    pitch_x: 0.5,
                    pitch_y: 0.5,
                    pose_err: random_pose_error(&mut err_rng, 0.5_f64.to_radians(), 1.0),
                });
            }
        }

        let mut job_config = PipelineConfig::default();
        job_config.seed = seed;
        job_config.denoise_knn = 30;
        job_config.denoise_alpha = 3.0;
        job_config.filter_tau_mm = 0.2;
        job_config.match_epsilon_mm = 2.5;
        job_config.voxel_mm = 0.5;
        job_config.cluster_radius_mm = 1.5;
        job_config.keep_radius_mm = 5.0;
        job_config.normals_k = 40;
        job_config.cell_mm = 1.0;

        let scene = SceneSpec {
            seed,
            part: PartSpec::DogBone(part),
            band: Some(band),
            flip_z: 30.0,
            x_min: -30.0,
            x_max: 600.0,
            stickers,
            passes,
            noise_sigma_mm: 0.02,
            intensity_noise: 0.008,
            outlier_fraction: 0.002,
            dropout_fraction: 0.003,
            job_config,
        };
        scene.validate(15.0)?;
        Ok(scene)
    }

    /// A small rectangular variant of the default scene (3 + 3 passes) for
    /// fast end-to-end runs.
    pub fn compact_scene(seed: u64) -> Result<SceneSpec> {
        let part = DogBone {
            length: 160.0,
            width: 60.0,
            thickness: 12.0,
            lift: 4.0,
            grip_len: 60.0,
            neck_half_width: 30.0,
            fillet_len: 10.0,
            apron: 2.5,
            bead_height: 2.0,
            bead_sigma: 3.0,
            bead_x: 80.0,
            root_height: 1.0,
            root_sigma: 2.0,
        };
        let band = BandSpec {
            outer: [-25.0, 185.0, -25.0, 85.0],
            window: [-8.0, 168.0, -8.0, 68.0],
        };
        let radius = 3.5;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed, 0x57C));
        let mut stickers = Vec::new();
        let clear_band =
            |x: f64, y: f64| band.contains(x, y) && band.edge_clearance(x, y) >= radius + 2.0;
        for row_y in [-16.5, 76.5] {
            layout_row(
                &mut rng,
                Surface::Band,
                row_y,
                1.5,
                (-19.0, 179.0),
                40.0,
                5.0,
                radius,
                &clear_band,
                &mut stickers,
            );
        }
        // Three part rows 16 mm apart give every neighbouring pass pair two
        // shared rows, same rationale as the full scene.
        let clear_part = |x: f64, y: f64| {
            part.inner_depth(x, y) >= radius + part.apron + 2.0 && (x - part.bead_x).abs() >= 18.0
        };
        for surface in [Surface::PartTop, Surface::PartBottom] {
            for row_y in [14.0, 30.0, 46.0] {
                layout_row(
                    &mut rng,
                    surface,
                    row_y,
                    1.0,
                    (10.0, 150.0),
                    32.0,
                    4.0,
                    radius,
                    &clear_part,
                    &mut stickers,
                );
            }
        }
        assign_contrasts(&mut stickers);

        let mut err_rng = ChaCha8Rng::seed_from_u64(splitmix64(seed, 0xE44));
        let mut passes = Vec::new();
        for session in [Session::Top, Session::Bottom] {
            for y0 in [-27.0, -2.0, 23.0] {
                passes.push(PassSpec {
                    session,
                    y0_mm: y0,
                    fov_mm: 70.0,
                    pitch_x: 0.5,
                    pitch_y: 0.5,
                    pose_err: random_pose_error(&mut err_rng, 0.5_f64.to_radians(), 1.0),
                });
            }
        }

        let mut job_config = PipelineConfig::default();
        job_config.seed = seed;
        job_config.denoise_knn = 30;
        job_config.denoise_alpha = 3.0;
        job_config.filter_tau_mm = 0.2;
        job_config.match_epsilon_mm = 2.5;
        job_config.voxel_mm = 0.5;
        job_config.cluster_radius_mm = 1.5;
        job_config.keep_radius_mm = 5.0;
        job_config.normals_k = 40;
        job_config.cell_mm = 1.0;

        let scene = SceneSpec {
            seed,
            part: PartSpec::DogBone(part),
            band: Some(band),
            flip_z: 20.0,
            x_min: -25.0,
            x_max: 185.0,
            stickers,
            passes,
            noise_sigma_mm: 0.02,
            intensity_noise: 0.008,
            outlier_fraction: 0.002,
            dropout_fraction: 0.003,
            job_config,
        };
        scene.validate(13.0)?;
        Ok(scene)
    }

    /// A bare flat plate at z = 0 with an optional bead, one top pass
    /// covering the whole plate; no band, no stickers, no noise.
    pub fn flat_plate(length: f64, width: f64, bead_height: f64, bead_sigma: f64) -> SceneSpec {
        SceneSpec {
            seed: 0,
            part: PartSpec::Plate {
                length,
                width,
                bead_height,
                bead_sigma,
                bead_x: length / 2.0,
            },
            band: None,
            flip_z: 0.0,
            x_min: 0.0,
            x_max: length,
            stickers: Vec::new(),
            passes: vec![PassSpec {
                session: Session::Top,
                y0_mm: 0.0,
                fov_mm: width,
                pitch_x: 0.5,
                pitch_y: 0.5,
                pose_err: RigidTransform::identity(),
            }],
            noise_sigma_mm: 0.0,
            intensity_noise: 0.0,
            outlier_fraction: 0.0,
            dropout_fraction: 0.0,
            job_config: PipelineConfig::default(),
        }
    }
}

/// Random mounting error: rotation of up to `max_angle` radians about a
/// random axis, translation of up to `max_shift` mm in a random direction.
fn random_pose_error(rng: &mut ChaCha8Rng, max_angle: f64, max_shift: f64) -> RigidTransform {
    let unit = |rng: &mut ChaCha8Rng| -> nalgebra::Vector3<f64> {
        loop {
            let v = nalgebra::Vector3::new(
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                break v / n;
            }
        }
    };
    let axis = unit(rng);
    let angle = rng.random_range(0.0..=max_angle);
    let dir = unit(rng);
    let shift = rng.random_range(0.0..=max_shift);
    RigidTransform::from_rotvec(axis * angle, dir * shift)
}

/// Writes a rendered scene as a runnable job directory:
/// `scans/<id>.txt`, `poses.txt` (nominal), `config.json`, `truth.json`,
/// and `job.json` tying them together. Returns the job file path.
pub fn write_job(scene: &SynthScene, dir: &Path) -> Result<PathBuf> {
    let scans_dir = dir.join("scans");
    std::fs::create_dir_all(&scans_dir)?;
    let mut scan_paths = Vec::new();
    for pass in &scene.passes {
        let rel = PathBuf::from("scans").join(format!("{}.txt", pass.scan_id));
        ingest::write_scan(&dir.join(&rel), &pass.cloud, &pass.image)?;
        scan_paths.push(rel);
    }
    let poses: Vec<ScanPose> = scene
        .passes
        .iter()
        .map(|p| ScanPose {
            scan_id: p.scan_id.clone(),
            pose: p.nominal_pose.clone(),
        })
        .collect();
    ingest::write_poses(&dir.join("poses.txt"), &poses)?;
    scene.config.to_json_file(&dir.join("config.json"))?;
    scene.truth.save(&dir.join("truth.json"))?;
    let job = ingest::ScanJob {
        scans: scan_paths,
        poses: PathBuf::from("poses.txt"),
        config: scene.config.clone(),
    };
    let job_path = dir.join("job.json");
    job.save(&job_path)?;
    Ok(job_path)
}
