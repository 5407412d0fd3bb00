//! Visual constraint generation: lift masked depth images through the
//! pinhole model, merge multi-view point sets, and fit oriented bounding
//! boxes that feed the obstacle-avoidance constraints.
//!
//! Segmentation itself is out of scope; masks arrive as inputs. Depth value
//! zero is the invalid-pixel sentinel.

use crate::constraints::OrientedBBox;
use nalgebra::{Isometry3, Matrix3, Point3, Rotation3, Vector3};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid camera model: {0}")]
    InvalidCamera(String),
    #[error("mask/depth rasters disagree: {0}")]
    InvalidRaster(String),
    #[error("need at least 4 points to fit a box, got {0}")]
    TooFewPoints(usize),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Constraint(#[from] crate::constraints::ConstraintError),
}

fn io_err(path: &Path, source: std::io::Error) -> GeometryError {
    GeometryError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Pinhole camera: intrinsics in pixels and the camera-to-base pose.
#[derive(Debug, Clone)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub pose: Isometry3<f64>,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, pose: Isometry3<f64>) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) || ![fx, fy, cx, cy].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive and finite (fx={fx}, fy={fy})"
            )));
        }
        Ok(Self { fx, fy, cx, cy, pose })
    }
}

/// Boolean instance mask plus per-pixel depth, same raster dimensions.
#[derive(Debug, Clone)]
pub struct MaskedDepth {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    pub depth: Vec<f64>,
}

impl MaskedDepth {
    pub fn new(
        width: usize,
        height: usize,
        mask: Vec<bool>,
        depth: Vec<f64>,
    ) -> Result<Self, GeometryError> {
        if mask.len() != width * height || depth.len() != width * height {
            return Err(GeometryError::InvalidRaster(format!(
                "rasters must hold {}x{} pixels",
                width, height
            )));
        }
        if depth.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(GeometryError::InvalidRaster(
                "depths must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            mask,
            depth,
        })
    }

    #[inline]
    pub fn idx(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }
}

/// Back-projects every masked pixel with valid depth into the base frame.
/// Pixels are scanned row-major; an empty result is a normal outcome.
pub fn lift_mask(cam: &CameraModel, md: &MaskedDepth) -> Vec<Vector3<f64>> {
    let mut points = Vec::new();
    for v in 0..md.height {
        for u in 0..md.width {
            let i = md.idx(u, v);
            let z = md.depth[i];
            if !md.mask[i] || z <= 0.0 {
                continue;
            }
            let x_cam = Point3::new(
                (u as f64 - cam.cx) * z / cam.fx,
                (v as f64 - cam.cy) * z / cam.fy,
                z,
            );
            points.push((cam.pose * x_cam).coords);
        }
    }
    points
}

/// Projects a base-frame point back into the image; `None` behind the camera.
pub fn project_point(cam: &CameraModel, p_base: &Vector3<f64>) -> Option<(f64, f64, f64)> {
    let p_cam = cam.pose.inverse() * Point3::from(*p_base);
    if p_cam.z <= 0.0 {
        return None;
    }
    Some((
        p_cam.x / p_cam.z * cam.fx + cam.cx,
        p_cam.y / p_cam.z * cam.fy + cam.cy,
        p_cam.z,
    ))
}

/// Union of per-view point sets, sorted lexicographically so the result is
/// independent of view order, with optional voxel deduplication.
pub fn merge_views(point_sets: &[Vec<Vector3<f64>>], voxel: Option<f64>) -> Vec<Vector3<f64>> {
    let mut all: Vec<Vector3<f64>> = point_sets.iter().flatten().cloned().collect();
    all.sort_by(|a, b| {
        a.x.total_cmp(&b.x)
            .then(a.y.total_cmp(&b.y))
            .then(a.z.total_cmp(&b.z))
    });
    match voxel {
        None => all,
        Some(size) => {
            let key = |p: &Vector3<f64>| {
                (
                    (p.x / size).floor() as i64,
                    (p.y / size).floor() as i64,
                    (p.z / size).floor() as i64,
                )
            };
            let mut seen = std::collections::HashSet::new();
            all.into_iter().filter(|p| seen.insert(key(p))).collect()
        }
    }
}

const YAW_SWEEP_STEPS: usize = 180;
const MIN_EXTENT: f64 = 1e-3;

/// Fits an oriented bounding box around a point cloud.
///
/// Candidate orientations are the principal axes of the centered points
/// plus an exhaustive sweep of gravity-aligned boxes over 180 yaw steps of
/// one degree; the candidate with the smallest volume wins. Extents come
/// from min/max projections, so every input point is contained. Degenerate
/// clouds get their extents floored at one millimeter.
pub fn fit_obb(points: &[Vector3<f64>]) -> Result<OrientedBBox, GeometryError> {
    if points.len() < 4 {
        return Err(GeometryError::TooFewPoints(points.len()));
    }
    let n = points.len() as f64;
    let centroid: Vector3<f64> = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut pca = eig.eigenvectors;
    if pca.determinant() < 0.0 {
        let flipped = -pca.column(2).into_owned();
        pca.set_column(2, &flipped);
    }

    let mut candidates: Vec<Rotation3<f64>> = Vec::with_capacity(YAW_SWEEP_STEPS + 1);
    candidates.push(Rotation3::from_matrix_unchecked(pca));
    for k in 0..YAW_SWEEP_STEPS {
        let yaw = (k as f64).to_radians();
        candidates.push(Rotation3::from_axis_angle(&Vector3::z_axis(), yaw));
    }

    let mut best: Option<(f64, OrientedBBox)> = None;
    let mut floored = false;
    for rot in candidates {
        let inv = rot.inverse();
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            let local = inv * p;
            for i in 0..3 {
                lo[i] = lo[i].min(local[i]);
                hi[i] = hi[i].max(local[i]);
            }
        }
        let mut extents = hi - lo;
        for i in 0..3 {
            if extents[i] < MIN_EXTENT {
                extents[i] = MIN_EXTENT;
                floored = true;
            }
        }
        let volume = extents.x * extents.y * extents.z;
        let center = rot * ((lo + hi) / 2.0);
        let obb = OrientedBBox::from_rotation(center, rot, extents)?;
        if best.as_ref().map_or(true, |(v, _)| volume < *v) {
            best = Some((volume, obb));
        }
    }
    if floored {
        log::warn!("degenerate point cloud: box extent floored at {MIN_EXTENT} m");
    }
    Ok(best.expect("candidate list is never empty").1)
}

const OBB_FILE_HEADER: &str = "obbset v1";
const MASKDEPTH_HEADER: &str = "maskdepth v1";

/// Writes boxes as one whitespace-separated record per line:
/// center (3), rotation row-major (9), extents (3). Floats use the shortest
/// representation that round-trips, so write/read is lossless.
pub fn export_obbs(path: &Path, boxes: &[OrientedBBox]) -> Result<(), GeometryError> {
    let mut out = String::new();
    writeln!(out, "{OBB_FILE_HEADER}").unwrap();
    writeln!(out, "# center_m(3) rotation_row_major(9) extents_m(3)").unwrap();
    for b in boxes {
        let r = b.rotation.matrix();
        let mut fields: Vec<String> = Vec::with_capacity(15);
        fields.extend(b.center.iter().map(|v| v.to_string()));
        for row in 0..3 {
            for col in 0..3 {
                fields.push(r[(row, col)].to_string());
            }
        }
        fields.extend(b.extents.iter().map(|v| v.to_string()));
        writeln!(out, "{}", fields.join(" ")).unwrap();
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Reads a box file written by [`export_obbs`].
pub fn load_obbs(path: &Path) -> Result<Vec<OrientedBBox>, GeometryError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, msg: String| GeometryError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut boxes = Vec::new();
    let mut saw_header = false;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let lineno = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if !saw_header {
            if trimmed != OBB_FILE_HEADER {
                return Err(parse_err(lineno, format!("expected header '{OBB_FILE_HEADER}'")));
            }
            saw_header = true;
            continue;
        }
        let vals: Result<Vec<f64>, _> = trimmed.split_whitespace().map(str::parse).collect();
        let vals = vals.map_err(|e| parse_err(lineno, format!("bad float: {e}")))?;
        if vals.len() != 15 {
            return Err(parse_err(lineno, format!("expected 15 fields, got {}", vals.len())));
        }
        let center = Vector3::new(vals[0], vals[1], vals[2]);
        let rotation = Matrix3::from_row_slice(&vals[3..12]);
        let extents = Vector3::new(vals[12], vals[13], vals[14]);
        boxes.push(OrientedBBox::new(center, rotation, extents)?);
    }
    if !saw_header {
        return Err(parse_err(0, format!("missing '{OBB_FILE_HEADER}' header")));
    }
    Ok(boxes)
}

/// Writes a masked depth raster: header, dimensions, then one line per
/// pixel row with the depth in meters for masked pixels and `x` elsewhere.
pub fn write_maskdepth(path: &Path, md: &MaskedDepth) -> Result<(), GeometryError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let emit = |w: &mut dyn Write| -> std::io::Result<()> {
        writeln!(w, "{MASKDEPTH_HEADER}")?;
        writeln!(w, "width {}", md.width)?;
        writeln!(w, "height {}", md.height)?;
        for v in 0..md.height {
            let row: Vec<String> = (0..md.width)
                .map(|u| {
                    let i = md.idx(u, v);
                    if md.mask[i] {
                        md.depth[i].to_string()
                    } else {
                        "x".to_string()
                    }
                })
                .collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    };
    emit(&mut w).map_err(|e| io_err(path, e))
}

/// Reads a raster written by [`write_maskdepth`].
pub fn read_maskdepth(path: &Path) -> Result<MaskedDepth, GeometryError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, msg: String| GeometryError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = reader.lines().enumerate();
    let next_content = |lines: &mut dyn Iterator<Item = (usize, std::io::Result<String>)>|
     -> Result<(usize, String), GeometryError> {
        for (no, line) in lines {
            let line = line.map_err(|e| io_err(path, e))?;
            let t = line.trim().to_string();
            if !t.is_empty() && !t.starts_with('#') {
                return Ok((no + 1, t));
            }
        }
        Err(parse_err(0, "unexpected end of file".into()))
    };

    let (no, header) = next_content(&mut lines)?;
    if header != MASKDEPTH_HEADER {
        return Err(parse_err(no, format!("expected header '{MASKDEPTH_HEADER}'")));
    }
    let parse_dim = |no: usize, line: &str, key: &str| -> Result<usize, GeometryError> {
        let mut it = line.split_whitespace();
        if it.next() != Some(key) {
            return Err(parse_err(no, format!("expected '{key} <n>'")));
        }
        it.next()
            .ok_or_else(|| parse_err(no, format!("missing {key} value")))?
            .parse()
            .map_err(|e| parse_err(no, format!("bad {key}: {e}")))
    };
    let (no, wline) = next_content(&mut lines)?;
    let width = parse_dim(no, &wline, "width")?;
    let (no, hline) = next_content(&mut lines)?;
    let height = parse_dim(no, &hline, "height")?;

    let mut mask = Vec::with_capacity(width * height);
    let mut depth = Vec::with_capacity(width * height);
    for _ in 0..height {
        let (no, row) = next_content(&mut lines)?;
        let tokens: Vec<&str> = row.split_whitespace().collect();
        if tokens.len() != width {
            return Err(parse_err(no, format!("expected {width} pixels, got {}", tokens.len())));
        }
        for tok in tokens {
            if tok == "x" {
                mask.push(false);
                depth.push(0.0);
            } else {
                let d: f64 = tok
                    .parse()
                    .map_err(|e| parse_err(no, format!("bad depth '{tok}': {e}")))?;
                mask.push(true);
                depth.push(d);
            }
        }
    }
    MaskedDepth::new(width, height, mask, depth)
}

/// Ray-casts an oriented box into a synthetic masked depth image. Every hit
/// pixel carries the exact z-depth of the nearest box surface along the
/// pixel ray, so lifting the result reproduces surface points exactly.
pub fn render_box_depth(
    cam: &CameraModel,
    obb: &OrientedBBox,
    width: usize,
    height: usize,
) -> MaskedDepth {
    let mut mask = vec![false; width * height];
    let mut depth = vec![0.0; width * height];
    let cam_pos = cam.pose.translation.vector;
    let origin_local = obb.rotation.inverse() * (cam_pos - obb.center);
    for v in 0..height {
        for u in 0..width {
            let dir_cam = Vector3::new(
                (u as f64 - cam.cx) / cam.fx,
                (v as f64 - cam.cy) / cam.fy,
                1.0,
            );
            let dir_local = obb.rotation.inverse() * (cam.pose.rotation * dir_cam);
            if let Some(t) = ray_box_entry(&origin_local, &dir_local, &obb.extents) {
                let i = v * width + u;
                mask[i] = true;
                depth[i] = t;
            }
        }
    }
    MaskedDepth {
        width,
        height,
        mask,
        depth,
    }
}

/// Slab test: smallest positive ray parameter entering the centered box.
fn ray_box_entry(origin: &Vector3<f64>, dir: &Vector3<f64>, extents: &Vector3<f64>) -> Option<f64> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for i in 0..3 {
        let h = extents[i] / 2.0;
        if dir[i].abs() < 1e-300 {
            if origin[i].abs() > h {
                return None;
            }
            continue;
        }
        let t1 = (-h - origin[i]) / dir[i];
        let t2 = (h - origin[i]) / dir[i];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        t_enter = t_enter.max(lo);
        t_exit = t_exit.min(hi);
        if t_enter > t_exit {
            return None;
        }
    }
    (t_enter > 0.0).then_some(t_enter)
}
