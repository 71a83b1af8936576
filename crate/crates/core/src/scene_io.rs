//! Geometry/configuration types and file formats: 16-bit PGM depth maps,
//! ASCII PLY point clouds, JSON run configuration.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DVector, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two rectified pinhole cameras sharing a focal length, separated by a
/// horizontal baseline. Distances are in the same unit as the depth values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    /// Focal length in pixels.
    pub focal_px: f64,
    /// Baseline between the two camera centers, in depth units.
    pub baseline: f64,
    /// Principal point, in pixels.
    pub cx: f64,
    pub cy: f64,
    /// Image dimensions in pixels.
    pub width: usize,
    pub height: usize,
}

impl CameraRig {
    pub fn new(
        focal_px: f64,
        baseline: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(focal_px > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal length must be positive, got {focal_px}"
            )));
        }
        if !(baseline >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "baseline must be nonnegative, got {baseline}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(CameraRig {
            focal_px,
            baseline,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Product f*D that appears in the disparity relation.
    pub fn focal_baseline(&self) -> f64 {
        self.focal_px * self.baseline
    }
}

/// Dense depth map with a validity mask. Values are row-major, height x width.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    values: Vec<f64>,
    mask: Vec<bool>,
    width: usize,
    height: usize,
    bit_depth: u32,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || mask.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "expected {} samples for a {}x{} image, got {} values / {} mask entries",
                width * height,
                width,
                height,
                values.len(),
                mask.len()
            )));
        }
        for (idx, (&v, &m)) in values.iter().zip(&mask).enumerate() {
            if m && !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "valid pixel {idx} holds non-finite or negative depth {v}"
                )));
            }
        }
        Ok(DepthImage {
            values,
            mask,
            width,
            height,
            bit_depth: 16,
        })
    }

    /// Fully valid image from a value grid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let mask = vec![true; values.len()];
        DepthImage::new(width, height, values, mask)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bit_depth(&self) -> u32 {
        self.bit_depth
    }

    pub fn with_bit_depth(mut self, bits: u32) -> Self {
        self.bit_depth = bits;
        self
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn row_values(&self, row: usize) -> &[f64] {
        &self.values[row * self.width..(row + 1) * self.width]
    }

    pub fn row_mask(&self, row: usize) -> &[bool] {
        &self.mask[row * self.width..(row + 1) * self.width]
    }

    pub fn row_vector(&self, row: usize) -> DVector<f64> {
        DVector::from_column_slice(self.row_values(row))
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn matches_rig(&self, rig: &CameraRig) -> bool {
        self.width == rig.width && self.height == rig.height
    }
}

/// 3D points with optional unit normals, in the left-camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
    normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        PointCloud {
            points,
            normals: None,
        }
    }

    pub fn with_normals(points: Vec<Point3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if normals.len() != points.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} normals for {} points",
                normals.len(),
                points.len()
            )));
        }
        for (idx, n) in normals.iter().enumerate() {
            if (n.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "normal {idx} has norm {}, expected 1",
                    n.norm()
                )));
            }
        }
        Ok(PointCloud {
            points,
            normals: Some(normals),
        })
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vector3<f64>]> {
        self.normals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Concatenates two clouds. Normals are kept only if both sides carry them.
    pub fn merged(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        match (&self.normals, &other.normals) {
            (Some(a), Some(b)) => {
                let mut normals = a.clone();
                normals.extend_from_slice(b);
                PointCloud {
                    points,
                    normals: Some(normals),
                }
            }
            _ => PointCloud {
                points,
                normals: None,
            },
        }
    }
}

// ---------------------------------------------------------------------------
// 16-bit PGM depth maps
//
// Layout: "P5" magic, a `# scale=<float>` comment, dimensions, maxval 65535,
// then big-endian u16 samples. Raw 0 is reserved for invalid pixels; the
// physical depth of a valid pixel is raw * scale.
// ---------------------------------------------------------------------------

const PGM_MAXVAL: u32 = 65535;

pub fn read_depth_image(path: impl AsRef<Path>) -> Result<DepthImage> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);

    let mut scale: Option<f64> = None;
    let mut tokens: Vec<String> = Vec::new();
    // Header: tokens separated by whitespace, comments run to end of line.
    // The binary payload starts after the single whitespace byte that follows
    // the maxval token.
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::malformed("pgm", path, "truncated header"));
        }
        let content = match line.find('#') {
            Some(pos) => {
                let comment = line[pos + 1..].trim();
                if let Some(rest) = comment.strip_prefix("scale=") {
                    scale = Some(rest.trim().parse::<f64>().map_err(|_| {
                        Error::malformed("pgm", path, format!("unparseable scale comment: {rest}"))
                    })?);
                }
                &line[..pos]
            }
            None => line.as_str(),
        };
        tokens.extend(content.split_whitespace().map(str::to_owned));
    }
    if tokens.len() > 4 {
        return Err(Error::malformed("pgm", path, "extra tokens in header"));
    }
    if tokens[0] != "P5" {
        return Err(Error::malformed(
            "pgm",
            path,
            format!("bad magic {:?}, expected P5", tokens[0]),
        ));
    }
    let width: usize = tokens[1]
        .parse()
        .map_err(|_| Error::malformed("pgm", path, format!("bad width {:?}", tokens[1])))?;
    let height: usize = tokens[2]
        .parse()
        .map_err(|_| Error::malformed("pgm", path, format!("bad height {:?}", tokens[2])))?;
    let maxval: u32 = tokens[3]
        .parse()
        .map_err(|_| Error::malformed("pgm", path, format!("bad maxval {:?}", tokens[3])))?;
    if maxval != PGM_MAXVAL {
        return Err(Error::malformed(
            "pgm",
            path,
            format!("maxval {maxval}, expected {PGM_MAXVAL} (16-bit)"),
        ));
    }
    let scale = scale.ok_or_else(|| Error::malformed("pgm", path, "missing '# scale=' comment"))?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::malformed(
            "pgm",
            path,
            format!("scale must be positive, got {scale}"),
        ));
    }
    let count = width
        .checked_mul(height)
        .ok_or_else(|| Error::malformed("pgm", path, "dimension overflow"))?;
    if count == 0 {
        return Err(Error::malformed("pgm", path, "zero-sized image"));
    }
    let byte_count = count
        .checked_mul(2)
        .ok_or_else(|| Error::malformed("pgm", path, "dimension overflow"))?;

    let mut payload = vec![0u8; byte_count];
    reader
        .read_exact(&mut payload)
        .map_err(|e| Error::io(path, e))?;

    let mut values = Vec::with_capacity(count);
    let mut mask = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(2) {
        let raw = u16::from_be_bytes([chunk[0], chunk[1]]);
        if raw == 0 {
            values.push(0.0);
            mask.push(false);
        } else {
            values.push(raw as f64 * scale);
            mask.push(true);
        }
    }
    DepthImage::new(width, height, values, mask)
}

/// Writes a 16-bit PGM with the given depth scale. Valid pixels are stored as
/// round(value / scale) clamped to [1, 65535]; invalid pixels as raw 0.
pub fn write_depth_image(img: &DepthImage, path: impl AsRef<Path>, scale: f64) -> Result<()> {
    let path = path.as_ref();
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "depth scale must be positive, got {scale}"
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(
        w,
        "P5\n# scale={scale}\n{} {}\n{PGM_MAXVAL}\n",
        img.width(),
        img.height()
    )
    .map_err(|e| Error::io(path, e))?;
    for idx in 0..img.width() * img.height() {
        let raw: u16 = if img.mask()[idx] {
            let q = (img.values()[idx] / scale).round();
            q.clamp(1.0, PGM_MAXVAL as f64) as u16
        } else {
            0
        };
        w.write_all(&raw.to_be_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// ASCII PLY point clouds
// ---------------------------------------------------------------------------

pub fn write_point_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let has_normals = cloud.normals().is_some();
    write!(
        w,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n",
        cloud.len()
    )
    .map_err(|e| Error::io(path, e))?;
    if has_normals {
        write!(
            w,
            "property float nx\nproperty float ny\nproperty float nz\n"
        )
        .map_err(|e| Error::io(path, e))?;
    }
    writeln!(w, "end_header").map_err(|e| Error::io(path, e))?;
    for (idx, p) in cloud.points().iter().enumerate() {
        if let Some(normals) = cloud.normals() {
            let n = normals[idx];
            writeln!(w, "{} {} {} {} {} {}", p.x, p.y, p.z, n.x, n.y, n.z)
                .map_err(|e| Error::io(path, e))?;
        } else {
            writeln!(w, "{} {} {}", p.x, p.y, p.z).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();

    let mut next_line = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::malformed("ply", path, "truncated file"))?
            .map_err(|e| Error::io(path, e))
    };

    if next_line()?.trim() != "ply" {
        return Err(Error::malformed("ply", path, "missing 'ply' magic"));
    }
    if next_line()?.trim() != "format ascii 1.0" {
        return Err(Error::malformed("ply", path, "only ascii 1.0 supported"));
    }
    let mut vertex_count: Option<usize> = None;
    let mut properties: Vec<String> = Vec::new();
    loop {
        let line = next_line()?;
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        if line.starts_with("comment") {
            continue;
        }
        if let Some(rest) = line.strip_prefix("element vertex ") {
            vertex_count = Some(rest.trim().parse().map_err(|_| {
                Error::malformed("ply", path, format!("bad vertex count {rest:?}"))
            })?);
        } else if line.starts_with("element ") {
            return Err(Error::malformed(
                "ply",
                path,
                format!("unsupported element: {line}"),
            ));
        } else if let Some(rest) = line.strip_prefix("property float ") {
            properties.push(rest.trim().to_owned());
        } else if !line.is_empty() {
            return Err(Error::malformed(
                "ply",
                path,
                format!("unsupported header line: {line}"),
            ));
        }
    }
    let vertex_count =
        vertex_count.ok_or_else(|| Error::malformed("ply", path, "no vertex element"))?;
    let has_normals = match properties.as_slice() {
        [x, y, z] if x == "x" && y == "y" && z == "z" => false,
        [x, y, z, nx, ny, nz]
            if x == "x" && y == "y" && z == "z" && nx == "nx" && ny == "ny" && nz == "nz" =>
        {
            true
        }
        other => {
            return Err(Error::malformed(
                "ply",
                path,
                format!("unsupported property layout: {other:?}"),
            ))
        }
    };

    let mut points = Vec::with_capacity(vertex_count);
    let mut normals = Vec::with_capacity(if has_normals { vertex_count } else { 0 });
    for _ in 0..vertex_count {
        let line = next_line()?;
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::malformed("ply", path, format!("bad float {t:?}")))
            })
            .collect::<Result<_>>()?;
        let expected = if has_normals { 6 } else { 3 };
        if fields.len() != expected {
            return Err(Error::malformed(
                "ply",
                path,
                format!("expected {expected} fields per vertex, got {}", fields.len()),
            ));
        }
        points.push(Point3::new(fields[0], fields[1], fields[2]));
        if has_normals {
            normals.push(Vector3::new(fields[3], fields[4], fields[5]));
        }
    }
    if has_normals {
        PointCloud::with_normals(points, normals)
    } else {
        Ok(PointCloud::new(points))
    }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// One JSON document per experiment: geometry, scene, formation, and all
/// enhancement parameters. CLI flags override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub rig: CameraRig,
    /// Clean-depth range [min, max] used to derive the quantization step and
    /// to normalize the depth feature.
    pub depth_range: [f64; 2],
    pub scene: crate::formation::SceneSpec,
    pub formation: FormationConfig,
    pub warp: crate::warp::WarpConfig,
    pub graph: crate::graph::GraphConfig,
    pub solver: crate::solver::SolverConfig,
    pub pipeline: crate::pipeline::PipelineConfig,
    pub synthesis: SynthesisConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FormationConfig {
    /// Additive noise variance, in squared depth units.
    pub sigma_n2: f64,
    /// Quantizer resolution: the depth range is split into 2^bits levels.
    pub bits: u32,
    pub seed: u64,
}

impl Default for FormationConfig {
    fn default() -> Self {
        FormationConfig {
            sigma_n2: 50.0,
            bits: 8,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    /// Neighbor count for normal estimation.
    pub normal_k: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig { normal_k: 16 }
    }
}

/// The default configuration is the bundled desk-scale experiment
/// (configs/desk.json): a 256x64 slanted-sinusoid scene with sigma_n2 = 50
/// quantized to 8 bits, and enhancement parameters tuned on it.
impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            rig: CameraRig {
                focal_px: 525.0,
                baseline: 35.0,
                cx: 128.0,
                cy: 32.0,
                width: 256,
                height: 64,
            },
            depth_range: [1450.0, 1700.0],
            scene: crate::formation::SceneSpec::default(),
            formation: FormationConfig::default(),
            warp: crate::warp::WarpConfig::default(),
            graph: crate::graph::GraphConfig::default(),
            solver: crate::solver::SolverConfig {
                max_iters: 40,
                grad_tol: 1e-3,
                ..crate::solver::SolverConfig::default()
            },
            pipeline: crate::pipeline::PipelineConfig {
                pass_count: 12,
                lambda_l: 0.03,
                lambda_r: 0.03,
                ..crate::pipeline::PipelineConfig::default()
            },
            synthesis: SynthesisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        CameraRig::new(
            self.rig.focal_px,
            self.rig.baseline,
            self.rig.cx,
            self.rig.cy,
            self.rig.width,
            self.rig.height,
        )?;
        let [lo, hi] = self.depth_range;
        if !(hi > lo) {
            return Err(Error::Config(format!(
                "degenerate depth range [{lo}, {hi}]"
            )));
        }
        if !(self.formation.sigma_n2 >= 0.0) {
            return Err(Error::Config("noise variance must be nonnegative".into()));
        }
        if self.formation.bits == 0 {
            return Err(Error::Config("bit depth must be at least 1".into()));
        }
        self.warp.validate()?;
        self.solver.validate()?;
        self.graph.validate()?;
        self.pipeline.validate()?;
        Ok(())
    }

    /// Quantization step implied by the depth range and bit depth.
    pub fn quantization_step(&self) -> f64 {
        let [lo, hi] = self.depth_range;
        (hi - lo) / (1u64 << self.formation.bits.min(63)) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn rig_rejects_bad_fields() {
        assert!(CameraRig::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraRig::new(1.0, -1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraRig::new(1.0, 1.0, 0.0, 0.0, 0, 4).is_err());
        assert!(CameraRig::new(500.0, 0.0, 2.0, 2.0, 4, 4).is_ok());
    }

    #[test]
    fn all_zero_pgm_reads_fully_masked_out() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zeros.pgm");
        let img = DepthImage::new(3, 2, vec![0.0; 6], vec![false; 6]).unwrap();
        write_depth_image(&img, &path, 0.5).unwrap();
        let back = read_depth_image(&path).unwrap();
        assert_eq!(back.valid_count(), 0);
        assert_eq!(back.width(), 3);
        assert_eq!(back.height(), 2);
    }

    #[test]
    fn raw_value_times_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.pgm");
        // Hand-assembled file: raw sample 1000 at scale 0.1.
        let mut bytes = b"P5\n# scale=0.1\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&1000u16.to_be_bytes());
        std::fs::write(&path, bytes).unwrap();
        let img = read_depth_image(&path).unwrap();
        assert!(img.is_valid(0, 0));
        assert!((img.get(0, 0) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn depth_round_trip_within_half_scale() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let dir = tempfile::tempdir().unwrap();
        for case in 0..20 {
            let w = rng.gen_range(1..12);
            let h = rng.gen_range(1..12);
            let scale = rng.gen_range(0.01..2.0);
            let values: Vec<f64> = (0..w * h)
                .map(|_| rng.gen_range(scale..scale * 60000.0))
                .collect();
            let mask: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.9)).collect();
            let img = DepthImage::new(
                w,
                h,
                values
                    .iter()
                    .zip(&mask)
                    .map(|(&v, &m)| if m { v } else { 0.0 })
                    .collect(),
                mask.clone(),
            )
            .unwrap();
            let path = dir.path().join(format!("rt{case}.pgm"));
            write_depth_image(&img, &path, scale).unwrap();
            let back = read_depth_image(&path).unwrap();
            assert_eq!(back.mask(), img.mask());
            for idx in 0..w * h {
                if mask[idx] {
                    let err = (back.values()[idx] - img.values()[idx]).abs();
                    assert!(
                        err <= scale / 2.0 + 1e-12,
                        "round-trip error {err} exceeds half scale {scale}"
                    );
                }
            }
        }
    }

    #[test]
    fn pgm_rejects_missing_scale_and_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let no_scale = dir.path().join("noscale.pgm");
        let mut bytes = b"P5\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&7u16.to_be_bytes());
        std::fs::write(&no_scale, bytes).unwrap();
        assert!(matches!(
            read_depth_image(&no_scale),
            Err(Error::MalformedFile { .. })
        ));

        let bad_magic = dir.path().join("p2.pgm");
        std::fs::write(&bad_magic, b"P2\n# scale=1\n1 1\n65535\n7").unwrap();
        assert!(matches!(
            read_depth_image(&bad_magic),
            Err(Error::MalformedFile { .. })
        ));

        let eight_bit = dir.path().join("8bit.pgm");
        let mut bytes = b"P5\n# scale=1\n1 1\n255\n".to_vec();
        bytes.push(7);
        std::fs::write(&eight_bit, bytes).unwrap();
        assert!(matches!(
            read_depth_image(&eight_bit),
            Err(Error::MalformedFile { .. })
        ));
    }

    #[test]
    fn empty_cloud_writes_zero_vertices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ply");
        write_point_cloud(&PointCloud::new(vec![]), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("element vertex 0"));
        let back = read_point_cloud(&path).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn single_point_cloud_lists_its_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.ply");
        let cloud = PointCloud::new(vec![Point3::new(1.5, -2.25, 3.0)]);
        write_point_cloud(&cloud, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().any(|l| l == "1.5 -2.25 3"));
    }

    #[test]
    fn cloud_round_trip_preserves_coordinates() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let dir = tempfile::tempdir().unwrap();
        let points: Vec<Point3<f64>> = (0..100)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-1e3..1e3),
                    rng.gen_range(-1e3..1e3),
                    rng.gen_range(0.1..1e3),
                )
            })
            .collect();
        let normals: Vec<Vector3<f64>> = (0..100)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..-0.1),
                )
                .normalize()
            })
            .collect();
        let cloud = PointCloud::with_normals(points, normals).unwrap();
        let path = dir.path().join("rt.ply");
        write_point_cloud(&cloud, &path).unwrap();
        let back = read_point_cloud(&path).unwrap();
        assert_eq!(back.len(), cloud.len());
        for (p, q) in cloud.points().iter().zip(back.points()) {
            let rel = (p - q).norm() / p.coords.norm().max(1.0);
            assert!(rel < 1e-6);
        }
        for (n, m) in cloud
            .normals()
            .unwrap()
            .iter()
            .zip(back.normals().unwrap())
        {
            assert!((n - m).norm() < 1e-9);
        }
    }

    #[test]
    fn normals_must_be_unit_and_matching_count() {
        let pts = vec![Point3::new(0.0, 0.0, 1.0)];
        assert!(PointCloud::with_normals(pts.clone(), vec![Vector3::new(0.0, 0.0, 2.0)]).is_err());
        assert!(PointCloud::with_normals(pts, vec![]).is_err());
    }

    #[test]
    fn config_round_trip_is_field_exact() {
        let cfg = RunConfig::default();
        let json = cfg.to_json();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn config_rejects_degenerate_depth_range() {
        let mut cfg = RunConfig::default();
        cfg.depth_range = [10.0, 10.0];
        assert!(cfg.validate().is_err());
    }
}
