//! Circular reference-target detection in backscatter intensity images.
//!
//! Targets are high-contrast circular stickers. Detection is a gradient Hough
//! transform split into centre accumulation and a radius histogram: edge
//! pixels vote along their gradient line for every radius in range, centre
//! candidates are accumulator peaks refined by the 3x3 vote centroid, the
//! radius is the peak of the distance histogram of direction-coherent edge
//! pixels, and the confidence is the fraction of the perimeter covered by
//! such pixels. Anisotropic images are first resampled to square pixels at
//! the travel pitch so circles stay circular in pixel space.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geom::{PointCloud, ScanId};
use crate::ingest::RangeImage;

/// One detected circular target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Target {
    pub scan_id: ScanId,
    /// Centre lifted to 3D in the cloud's frame; `None` until lifted.
    pub center3d: Option<[f64; 3]>,
    /// Subpixel centre (row, col) in the original image grid.
    pub center_px: (f64, f64),
    /// Radius in detection pixels (square-pixel units).
    pub radius_px: f64,
    pub radius_mm: f64,
    /// Fraction of the perimeter supported by coherent edge pixels, in [0, 1].
    pub confidence: f64,
}

impl Target {
    /// The lifted centre, or a data error for targets that were never lifted.
    pub fn center(&self) -> Result<[f64; 3]> {
        self.center3d
            .ok_or_else(|| Error::Data("target has no 3D centre; run lift first".into()))
    }
}

/// Tunables for circle detection; see `PipelineConfig` for semantics.
#[derive(Debug, Clone)]
pub struct DetectParams {
    pub r_min_mm: f64,
    pub r_max_mm: f64,
    pub vote_threshold: f64,
    pub edge_percentile: f64,
    pub refine_fit: bool,
    pub accumulator_dump: Option<PathBuf>,
}

impl DetectParams {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        Self {
            r_min_mm: cfg.target_radius_min_mm,
            r_max_mm: cfg.target_radius_max_mm,
            vote_threshold: cfg.vote_threshold,
            edge_percentile: cfg.edge_percentile,
            refine_fit: cfg.refine_fit,
            accumulator_dump: cfg.accumulator_dump.clone(),
        }
    }
}

impl Default for DetectParams {
    fn default() -> Self {
        Self::from_config(&PipelineConfig::default())
    }
}

/// Angular tolerance for an edge gradient to count as radial: cos(30 deg).
const COHERENCE_MIN: f64 = 0.866;
/// Accumulator cells below this many votes are never considered peaks.
const PEAK_FLOOR: f64 = 3.0;
/// At most this many accumulator peaks are evaluated, strongest first.
const MAX_PEAKS: usize = 512;
/// Edge pixels within this distance of the circle count as perimeter support.
const BAND_HALF_WIDTH: f64 = 1.5;

/// Intensity image resampled to square pixels of side `pitch` mm.
struct SquareImage {
    rows: usize,
    cols: usize,
    pitch: f64,
    /// Original column = square column * col_scale (rows are unchanged).
    col_scale: f64,
    value: Vec<f64>,
    valid: Vec<bool>,
}

impl SquareImage {
    fn at(&self, r: usize, c: usize) -> f64 {
        self.value[r * self.cols + c]
    }

    fn is_valid(&self, r: usize, c: usize) -> bool {
        self.valid[r * self.cols + c]
    }
}

fn square_resample(img: &RangeImage) -> SquareImage {
    let (rows, cols) = (img.rows(), img.cols());
    let (px, py) = (img.pitch_x(), img.pitch_y());
    if (px - py).abs() <= 1e-12 * px.max(py) {
        let mut value = vec![0.0; rows * cols];
        let mut valid = vec![false; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                if let Some(v) = img.intensity(r, c) {
                    value[r * cols + c] = v;
                    valid[r * cols + c] = true;
                }
            }
        }
        return SquareImage {
            rows,
            cols,
            pitch: py,
            col_scale: 1.0,
            value,
            valid,
        };
    }
    let col_scale = py / px;
    let sq_cols = (((cols - 1) as f64 * px / py).floor() as usize) + 1;
    let sq_cols = sq_cols.max(2);
    let mut value = vec![0.0; rows * sq_cols];
    let mut valid = vec![false; rows * sq_cols];
    for r in 0..rows {
        for sc in 0..sq_cols {
            let src = sc as f64 * col_scale;
            let c0 = src.floor() as usize;
            let frac = src - c0 as f64;
            let c1 = (c0 + 1).min(cols - 1);
            let (w0, w1) = (1.0 - frac, frac);
            let mut acc = 0.0;
            let mut wsum = 0.0;
            if w0 > 0.0 {
                if let Some(v) = img.intensity(r, c0) {
                    acc += w0 * v;
                    wsum += w0;
                }
            }
            if w1 > 0.0 && c1 != c0 {
                if let Some(v) = img.intensity(r, c1) {
                    acc += w1 * v;
                    wsum += w1;
                }
            }
            // Valid only when every contributing pixel was valid, so dropout
            // borders never invent intensity.
            if wsum > 0.999 {
                value[r * sq_cols + sc] = acc / wsum;
                valid[r * sq_cols + sc] = true;
            }
        }
    }
    SquareImage {
        rows,
        cols: sq_cols,
        pitch: py,
        col_scale,
        value,
        valid,
    }
}

/// Scales valid intensities to [0, 1]; returns false for a blank image.
fn normalize(sq: &mut SquareImage) -> bool {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..sq.value.len() {
        if sq.valid[i] {
            lo = lo.min(sq.value[i]);
            hi = hi.max(sq.value[i]);
        }
    }
    if !(hi - lo > 1e-12) {
        return false;
    }
    for i in 0..sq.value.len() {
        if sq.valid[i] {
            sq.value[i] = (sq.value[i] - lo) / (hi - lo);
        }
    }
    true
}

struct EdgePoint {
    row: f64,
    col: f64,
    /// Unit gradient (d/drow, d/dcol).
    grow: f64,
    gcol: f64,
    mag: f64,
}

/// Sobel gradients where the full 3x3 neighbourhood is valid; returns the
/// magnitude image (zero elsewhere) and edge pixels above the percentile.
fn edge_points(sq: &SquareImage, percentile: f64) -> (Vec<f64>, Vec<EdgePoint>) {
    let (rows, cols) = (sq.rows, sq.cols);
    let mut mag = vec![0.0; rows * cols];
    let mut grad = vec![(0.0f64, 0.0f64); rows * cols];
    let mut mags_only = Vec::new();
    if rows < 3 || cols < 3 {
        return (mag, Vec::new());
    }
    for r in 1..rows - 1 {
        for c in 1..cols - 1 {
            let mut ok = true;
            'window: for dr in 0..3 {
                for dc in 0..3 {
                    if !sq.is_valid(r + dr - 1, c + dc - 1) {
                        ok = false;
                        break 'window;
                    }
                }
            }
            if !ok {
                continue;
            }
            let v = |dr: i64, dc: i64| {
                sq.at((r as i64 + dr) as usize, (c as i64 + dc) as usize)
            };
            let gc = (v(-1, 1) + 2.0 * v(0, 1) + v(1, 1))
                - (v(-1, -1) + 2.0 * v(0, -1) + v(1, -1));
            let gr = (v(1, -1) + 2.0 * v(1, 0) + v(1, 1))
                - (v(-1, -1) + 2.0 * v(-1, 0) + v(-1, 1));
            let m = (gc * gc + gr * gr).sqrt() / 8.0;
            mag[r * cols + c] = m;
            grad[r * cols + c] = (gr, gc);
            mags_only.push(m);
        }
    }
    if mags_only.is_empty() {
        return (mag, Vec::new());
    }
    mags_only.sort_by(f64::total_cmp);
    let idx = ((percentile / 100.0) * (mags_only.len() - 1) as f64).floor() as usize;
    let threshold = mags_only[idx].max(1e-9);
    let mut edges = Vec::new();
    for r in 1..rows - 1 {
        for c in 1..cols - 1 {
            let m = mag[r * cols + c];
            if m >= threshold {
                let (gr, gc) = grad[r * cols + c];
                let norm = (gr * gr + gc * gc).sqrt();
                edges.push(EdgePoint {
                    row: r as f64,
                    col: c as f64,
                    grow: gr / norm,
                    gcol: gc / norm,
                    mag: m,
                });
            }
        }
    }
    (mag, edges)
}

fn splat(acc: &mut [f64], rows: usize, cols: usize, r: f64, c: f64) {
    if !(r > 0.0 && c > 0.0 && r < (rows - 1) as f64 && c < (cols - 1) as f64) {
        return;
    }
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (fr, fc) = (r - r0 as f64, c - c0 as f64);
    acc[r0 * cols + c0] += (1.0 - fr) * (1.0 - fc);
    acc[r0 * cols + c0 + 1] += (1.0 - fr) * fc;
    acc[(r0 + 1) * cols + c0] += fr * (1.0 - fc);
    acc[(r0 + 1) * cols + c0 + 1] += fr * fc;
}

fn bilinear(map: &[f64], rows: usize, cols: usize, r: f64, c: f64) -> f64 {
    let r = r.clamp(0.0, (rows - 1) as f64);
    let c = c.clamp(0.0, (cols - 1) as f64);
    let r0 = (r.floor() as usize).min(rows - 2);
    let c0 = (c.floor() as usize).min(cols - 2);
    let (fr, fc) = (r - r0 as f64, c - c0 as f64);
    map[r0 * cols + c0] * (1.0 - fr) * (1.0 - fc)
        + map[r0 * cols + c0 + 1] * (1.0 - fr) * fc
        + map[(r0 + 1) * cols + c0] * fr * (1.0 - fc)
        + map[(r0 + 1) * cols + c0 + 1] * fr * fc
}

/// Vote-weighted centroid of the 3x3 accumulator patch around a peak.
fn centroid_3x3(acc: &[f64], rows: usize, cols: usize, pr: usize, pc: usize) -> (f64, f64) {
    let mut wsum = 0.0;
    let mut rsum = 0.0;
    let mut csum = 0.0;
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            let r = pr as i64 + dr;
            let c = pc as i64 + dc;
            if r < 0 || c < 0 || r >= rows as i64 || c >= cols as i64 {
                continue;
            }
            let w = acc[r as usize * cols + c as usize];
            wsum += w;
            rsum += w * r as f64;
            csum += w * c as f64;
        }
    }
    if wsum > 0.0 {
        (rsum / wsum, csum / wsum)
    } else {
        (pr as f64, pc as f64)
    }
}

/// Radius histogram peak and perimeter coverage at a candidate centre.
/// Returns (radius_px, confidence) or None when no bin has support.
fn radius_and_confidence(
    edges: &[EdgePoint],
    cr: f64,
    cc: f64,
    r_min_px: f64,
    r_max_px: f64,
) -> Option<(f64, f64)> {
    let base = r_min_px - BAND_HALF_WIDTH;
    let n_bins = ((r_max_px - r_min_px) + 2.0 * BAND_HALF_WIDTH).ceil() as usize + 1;
    let mut bins = vec![0usize; n_bins];
    let coherent: Vec<(f64, f64)> = edges
        .iter()
        .filter_map(|e| {
            let dr = e.row - cr;
            let dc = e.col - cc;
            let dist = (dr * dr + dc * dc).sqrt();
            if dist < base || dist > r_max_px + BAND_HALF_WIDTH || dist < 1.0 {
                return None;
            }
            let dot = (dr * e.grow + dc * e.gcol) / dist;
            if dot.abs() < COHERENCE_MIN {
                return None;
            }
            Some((dist, dc.atan2(dr)))
        })
        .collect();
    for &(dist, _) in &coherent {
        let idx = (dist - base).floor() as usize;
        if idx < n_bins {
            bins[idx] += 1;
        }
    }
    let (best_bin, &best_count) = bins
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    if best_count == 0 {
        return None;
    }
    let bin_center = base + best_bin as f64 + 0.5;
    let mut rsum = 0.0;
    let mut rcount = 0usize;
    for &(dist, _) in &coherent {
        if (dist - bin_center).abs() <= 1.0 {
            rsum += dist;
            rcount += 1;
        }
    }
    let radius = (rsum / rcount as f64).clamp(r_min_px, r_max_px);
    let n_angular = ((2.0 * PI * radius).round() as usize).max(16);
    let mut occupied = vec![false; n_angular];
    for &(dist, theta) in &coherent {
        if (dist - radius).abs() <= BAND_HALF_WIDTH {
            let mut t = theta / (2.0 * PI) + 0.5;
            if t >= 1.0 {
                t -= 1.0;
            }
            let idx = ((t * n_angular as f64) as usize).min(n_angular - 1);
            occupied[idx] = true;
        }
    }
    let coverage = occupied.iter().filter(|&&b| b).count() as f64 / n_angular as f64;
    Some((radius, coverage))
}

/// Gauss-Newton circle fit on subpixel edge positions near the seed circle.
/// Falls back to the seed when the fit wanders more than 2 px.
fn fit_circle(
    edges: &[EdgePoint],
    mag: &[f64],
    rows: usize,
    cols: usize,
    seed: (f64, f64, f64),
) -> (f64, f64, f64) {
    let (mut cr, mut cc, mut radius) = seed;
    let mut pts: Vec<(f64, f64, f64)> = Vec::new();
    for e in edges {
        let dr = e.row - seed.0;
        let dc = e.col - seed.1;
        let dist = (dr * dr + dc * dc).sqrt();
        if dist < 1.0 || (dist - seed.2).abs() > 2.0 {
            continue;
        }
        let dot = (dr * e.grow + dc * e.gcol) / dist;
        if dot.abs() < COHERENCE_MIN {
            continue;
        }
        // Parabolic subpixel shift of the edge along its gradient.
        let m0 = e.mag;
        let m_minus = bilinear(mag, rows, cols, e.row - e.grow, e.col - e.gcol);
        let m_plus = bilinear(mag, rows, cols, e.row + e.grow, e.col + e.gcol);
        let denom = m_minus - 2.0 * m0 + m_plus;
        let shift = if denom.abs() > 1e-12 {
            (0.5 * (m_minus - m_plus) / denom).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        pts.push((e.row + shift * e.grow, e.col + shift * e.gcol, m0));
    }
    if pts.len() < 6 {
        return seed;
    }
    for _ in 0..5 {
        let mut ata = nalgebra::Matrix3::<f64>::zeros();
        let mut atb = nalgebra::Vector3::<f64>::zeros();
        for &(pr, pc, w) in &pts {
            let dr = pr - cr;
            let dc = pc - cc;
            let dist = (dr * dr + dc * dc).sqrt().max(1e-9);
            let resid = dist - radius;
            let j = nalgebra::Vector3::new(-dr / dist, -dc / dist, -1.0);
            ata += w * j * j.transpose();
            atb -= w * resid * j;
        }
        let Some(delta) = ata.lu().solve(&atb) else {
            return seed;
        };
        cr += delta.x;
        cc += delta.y;
        radius += delta.z;
        if delta.norm() < 1e-9 {
            break;
        }
    }
    let moved = ((cr - seed.0).powi(2) + (cc - seed.1).powi(2)).sqrt();
    if !(cr.is_finite() && cc.is_finite() && radius.is_finite()) || moved > 2.0 {
        return seed;
    }
    (cr, cc, radius)
}

/// Grey-value weighted centroid of a fully visible disc: background comes
/// from the median of an annulus around the disc, every interior pixel is
/// weighted by its contrast against that background, and the weighted mean
/// position is the centre. Far more precise than an edge fit (the whole
/// interior votes), but only unbiased when the disc is complete, so it
/// returns None whenever any support pixel is invalid or outside the image
/// and the caller keeps the circle-fit centre.
fn refine_centroid(sq: &SquareImage, cr: f64, cc: f64, radius: f64) -> Option<(f64, f64)> {
    let support = radius + 1.5;
    let ring_out = radius + 4.0;
    // The support disc must be complete; the background annulus may be
    // clipped by the image border since the background is uniform anyway.
    if cr - support < 0.0
        || cc - support < 0.0
        || cr + support >= sq.rows as f64
        || cc + support >= sq.cols as f64
    {
        return None;
    }
    let r_lo = (cr - ring_out).floor().max(0.0) as usize;
    let r_hi = ((cr + ring_out).ceil() as usize).min(sq.rows - 1);
    let c_lo = (cc - ring_out).floor().max(0.0) as usize;
    let c_hi = ((cc + ring_out).ceil() as usize).min(sq.cols - 1);
    let mut ring = Vec::new();
    let mut inner = Vec::new();
    for r in r_lo..=r_hi {
        for c in c_lo..=c_hi {
            let dist = ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)).sqrt();
            if dist <= support {
                if !sq.is_valid(r, c) {
                    return None;
                }
                inner.push((r as f64, c as f64, sq.at(r, c)));
            } else if dist <= ring_out {
                if sq.is_valid(r, c) {
                    ring.push(sq.at(r, c));
                }
            }
        }
    }
    if ring.len() < 8 || inner.len() < 4 {
        return None;
    }
    ring.sort_by(f64::total_cmp);
    let background = ring[ring.len() / 2];
    let core = inner
        .iter()
        .filter(|(r, c, _)| {
            ((r - cr).powi(2) + (c - cc).powi(2)).sqrt() <= (radius - 1.0).max(1.0)
        })
        .map(|(_, _, v)| v - background)
        .sum::<f64>();
    let sign = if core >= 0.0 { 1.0 } else { -1.0 };
    let mut wsum = 0.0;
    let mut rsum = 0.0;
    let mut csum = 0.0;
    for (r, c, v) in inner {
        let w = (sign * (v - background)).max(0.0);
        wsum += w;
        rsum += w * r;
        csum += w * c;
    }
    if wsum <= 1e-9 {
        return None;
    }
    let (nr, nc) = (rsum / wsum, csum / wsum);
    // A centroid that disagrees with the edge fit by more than a pixel means
    // the support holds structure that is not this disc; distrust it.
    if ((nr - cr).powi(2) + (nc - cc).powi(2)).sqrt() > 1.0 {
        return None;
    }
    Some((nr, nc))
}

fn write_pgm(path: &Path, acc: &[f64], rows: usize, cols: usize) -> Result<()> {
    use std::io::Write as _;
    let peak = acc.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let mut out = Vec::with_capacity(acc.len() + 32);
    write!(out, "P5\n{cols} {rows}\n255\n")?;
    out.extend(acc.iter().map(|&v| ((v / peak) * 255.0).round() as u8));
    std::fs::write(path, out)?;
    Ok(())
}

/// Detects circular targets in the intensity image of one pass. Returned
/// targets are strongest-first, have confidence >= the vote threshold,
/// radius_mm within the search range, and centres no closer than r_min.
pub fn detect_circles(
    img: &RangeImage,
    scan_id: &ScanId,
    params: &DetectParams,
) -> Result<Vec<Target>> {
    if !(params.r_min_mm > 0.0 && params.r_min_mm < params.r_max_mm) {
        return Err(Error::Config(format!(
            "bad target radius range [{}, {}]",
            params.r_min_mm, params.r_max_mm
        )));
    }
    let mut sq = square_resample(img);
    if !normalize(&mut sq) {
        return Ok(Vec::new());
    }
    let (mag, edges) = edge_points(&sq, params.edge_percentile);
    if edges.is_empty() {
        return Ok(Vec::new());
    }

    let r_min_px = params.r_min_mm / sq.pitch;
    let r_max_px = params.r_max_mm / sq.pitch;
    let lo = r_min_px.ceil() as i64;
    let hi = r_max_px.floor() as i64;
    let radii: Vec<f64> = if lo > hi {
        vec![(r_min_px + r_max_px) / 2.0]
    } else {
        (lo..=hi).map(|r| r as f64).collect()
    };

    let (rows, cols) = (sq.rows, sq.cols);
    let mut acc = vec![0.0f64; rows * cols];
    for e in &edges {
        for &r in &radii {
            splat(&mut acc, rows, cols, e.row + r * e.grow, e.col + r * e.gcol);
            splat(&mut acc, rows, cols, e.row - r * e.grow, e.col - r * e.gcol);
        }
    }

    if let Some(dir) = &params.accumulator_dump {
        std::fs::create_dir_all(dir)?;
        write_pgm(&dir.join(format!("accumulator_{scan_id}.pgm")), &acc, rows, cols)?;
    }

    // Accumulator peaks, strongest first; ties resolve in raster order.
    let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let v = acc[r * cols + c];
            if v < PEAK_FLOOR {
                continue;
            }
            let mut is_peak = true;
            'neigh: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                        continue;
                    }
                    if acc[nr as usize * cols + nc as usize] > v {
                        is_peak = false;
                        break 'neigh;
                    }
                }
            }
            if is_peak {
                peaks.push((v, r, c));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    peaks.truncate(MAX_PEAKS);

    let mut targets: Vec<Target> = Vec::new();
    let mut accepted: Vec<(f64, f64)> = Vec::new();
    for &(_, pr, pc) in &peaks {
        let (cr, cc) = centroid_3x3(&acc, rows, cols, pr, pc);
        if accepted
            .iter()
            .any(|&(ar, ac)| ((ar - cr).powi(2) + (ac - cc).powi(2)).sqrt() < r_min_px)
        {
            continue;
        }
        let Some((radius_seed, confidence)) =
            radius_and_confidence(&edges, cr, cc, r_min_px, r_max_px)
        else {
            continue;
        };
        if confidence < params.vote_threshold {
            continue;
        }
        let (mut fr, mut fc, fradius) = if params.refine_fit {
            fit_circle(&edges, &mag, rows, cols, (cr, cc, radius_seed))
        } else {
            (cr, cc, radius_seed)
        };
        let radius_px = fradius.clamp(r_min_px, r_max_px);
        if params.refine_fit {
            if let Some((nr, nc)) = refine_centroid(&sq, fr, fc, radius_px) {
                (fr, fc) = (nr, nc);
            }
        }
        accepted.push((fr, fc));
        targets.push(Target {
            scan_id: scan_id.clone(),
            center3d: None,
            center_px: (fr, fc * sq.col_scale),
            radius_px,
            radius_mm: radius_px * sq.pitch,
            confidence,
        });
    }
    Ok(targets)
}

/// Lifts a detected centre to 3D. Stickers are flat, so over the disc
/// interior every cloud coordinate is an affine function of (row, col); a
/// least-squares affine fit evaluated at the subpixel centre averages the
/// depth noise of the whole interior away. Falls back to bilinear
/// interpolation of the 4 surrounding pixels when the interior is too sparse,
/// then to the nearest valid pixel in the 3x3 neighbourhood, and returns
/// `None` when there is none (the target is discarded).
pub fn lift_to_3d(target: &Target, img: &RangeImage, cloud: &PointCloud) -> Option<Target> {
    let (r, c) = target.center_px;
    let point_at = |row: usize, col: usize| -> Option<[f64; 3]> {
        img.point_index(row, col).map(|i| {
            let p = &cloud.points[i];
            [p.x, p.y, p.z]
        })
    };

    if let Some(center) = plane_lift(target, img, cloud) {
        return Some(Target {
            center3d: Some(center),
            ..target.clone()
        });
    }

    let r0 = r.floor();
    let c0 = c.floor();
    let (fr, fc) = (r - r0, c - c0);
    let mut wsum = 0.0;
    let mut pos = [0.0f64; 3];
    for (dr, dc, w) in [
        (0.0, 0.0, (1.0 - fr) * (1.0 - fc)),
        (0.0, 1.0, (1.0 - fr) * fc),
        (1.0, 0.0, fr * (1.0 - fc)),
        (1.0, 1.0, fr * fc),
    ] {
        if w <= 0.0 {
            continue;
        }
        let (row, col) = (r0 + dr, c0 + dc);
        if row < 0.0 || col < 0.0 {
            continue;
        }
        if let Some(p) = point_at(row as usize, col as usize) {
            for (axis, v) in p.iter().enumerate() {
                pos[axis] += w * v;
            }
            wsum += w;
        }
    }
    if wsum > 1e-12 {
        let center = [pos[0] / wsum, pos[1] / wsum, pos[2] / wsum];
        return Some(Target {
            center3d: Some(center),
            ..target.clone()
        });
    }

    // No valid pixel under the bilinear footprint: nearest valid in 3x3.
    let (rr, rc) = (r.round() as i64, c.round() as i64);
    let mut best: Option<(f64, [f64; 3])> = None;
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            let (row, col) = (rr + dr, rc + dc);
            if row < 0 || col < 0 {
                continue;
            }
            if let Some(p) = point_at(row as usize, col as usize) {
                let d2 = (row as f64 - r).powi(2) + (col as f64 - c).powi(2);
                if best.as_ref().is_none_or(|(bd, _)| d2 < *bd) {
                    best = Some((d2, p));
                }
            }
        }
    }
    best.map(|(_, p)| Target {
        center3d: Some(p),
        ..target.clone()
    })
}

/// Affine fit of the cloud coordinates over the disc's interior pixels,
/// evaluated at the subpixel centre. Requires at least 12 valid interior
/// pixels; centring the basis on the centre makes the evaluation the
/// constant term of each fit.
fn plane_lift(target: &Target, img: &RangeImage, cloud: &PointCloud) -> Option<[f64; 3]> {
    let (cr, cc) = target.center_px;
    let (px, py) = (img.pitch_x(), img.pitch_y());
    let radius = target.radius_mm;
    let row_half = radius / py;
    let col_half = radius / px;
    let r_lo = ((cr - row_half).floor().max(0.0)) as usize;
    let r_hi = ((cr + row_half).ceil().max(0.0) as usize).min(img.rows().saturating_sub(1));
    let c_lo = ((cc - col_half).floor().max(0.0)) as usize;
    let c_hi = ((cc + col_half).ceil().max(0.0) as usize).min(img.cols().saturating_sub(1));

    let mut m = nalgebra::Matrix3::<f64>::zeros();
    let mut rhs = [nalgebra::Vector3::<f64>::zeros(); 3];
    let mut count = 0usize;
    for row in r_lo..=r_hi {
        for col in c_lo..=c_hi {
            let dr = (row as f64 - cr) * py;
            let dc = (col as f64 - cc) * px;
            if dr * dr + dc * dc > radius * radius {
                continue;
            }
            let Some(i) = img.point_index(row, col) else {
                continue;
            };
            let p = &cloud.points[i];
            let b = nalgebra::Vector3::new(1.0, row as f64 - cr, col as f64 - cc);
            m += b * b.transpose();
            for (axis, v) in [p.x, p.y, p.z].into_iter().enumerate() {
                rhs[axis] += b * v;
            }
            count += 1;
        }
    }
    if count < 12 {
        return None;
    }
    let lu = m.lu();
    let mut center = [0.0f64; 3];
    for axis in 0..3 {
        center[axis] = lu.solve(&rhs[axis])?.x;
    }
    center.iter().all(|v| v.is_finite()).then_some(center)
}

/// Detect plus lift for one pass; targets that cannot be lifted are dropped
/// with a warning.
pub fn detect_targets(
    img: &RangeImage,
    cloud: &PointCloud,
    params: &DetectParams,
) -> Result<Vec<Target>> {
    let scan_id = cloud
        .scan_id
        .clone()
        .ok_or_else(|| Error::Data("cloud has no scan id for target detection".into()))?;
    let detections = detect_circles(img, &scan_id, params)?;
    let mut lifted = Vec::with_capacity(detections.len());
    for t in &detections {
        match lift_to_3d(t, img, cloud) {
            Some(full) => lifted.push(full),
            None => log::warn!(
                "scan {scan_id}: discarding target at ({:.1}, {:.1}); no valid pixel in 3x3",
                t.center_px.0,
                t.center_px.1
            ),
        }
    }
    Ok(lifted)
}
