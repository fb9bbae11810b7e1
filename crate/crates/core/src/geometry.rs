//! Point clouds, rotations, farthest point sampling and k-NN patch grouping.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

pub type Point3 = [f64; 3];

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// An ordered, non-empty set of finite 3D points. Index identity is stable
/// through every operation in this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::validation("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::validation(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false for a constructed cloud; present for API symmetry.
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    #[inline]
    pub fn point(&self, i: usize) -> &Point3 {
        &self.points[i]
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        c.map(|v| v / n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudFormat {
    XyzAscii,
    PcfBinary,
}

impl CloudFormat {
    /// `.pcf` is binary, anything else is read as XYZ text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("pcf") => CloudFormat::PcfBinary,
            _ => CloudFormat::XyzAscii,
        }
    }
}

pub const PCF_MAGIC: &[u8; 4] = b"PCF1";
const PCF_HEADER_LEN: u64 = 8;

pub fn load_cloud(path: impl AsRef<Path>, format: CloudFormat) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        CloudFormat::PcfBinary => parse_pcf(&bytes),
        CloudFormat::XyzAscii => {
            let text = std::str::from_utf8(&bytes).map_err(|e| {
                Error::at_byte(e.valid_up_to() as u64, "XYZ file is not valid UTF-8")
            })?;
            parse_xyz(text)
        }
    }
}

/// One point per line, three whitespace-separated reals; lines whose first
/// non-blank character is `#` are comments and blank lines are skipped.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let mut p = [0.0; 3];
        for (d, slot) in p.iter_mut().enumerate() {
            let tok = fields
                .next()
                .ok_or_else(|| Error::at_line(lineno + 1, format!("expected 3 values, found {d}")))?;
            *slot = tok
                .parse::<f64>()
                .map_err(|_| Error::at_line(lineno + 1, format!("cannot parse {tok:?} as a real")))?;
        }
        if fields.next().is_some() {
            return Err(Error::at_line(lineno + 1, "more than 3 values on line"));
        }
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite coordinate on line {}",
                lineno + 1
            )));
        }
        points.push(p);
    }
    PointCloud::new(points)
}

/// Layout: `"PCF1"`, `u32` LE count, then `count * 3` LE `f32` values (x,y,z interleaved).
pub fn parse_pcf(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < 4 || &bytes[..4] != PCF_MAGIC {
        return Err(Error::at_byte(0, "bad magic, expected \"PCF1\""));
    }
    if bytes.len() < PCF_HEADER_LEN as usize {
        return Err(Error::at_byte(4, "truncated header: missing point count"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    if count == 0 {
        return Err(Error::validation("PCF point count is 0"));
    }
    let payload = &bytes[PCF_HEADER_LEN as usize..];
    let expected = count * 12;
    let available = payload.len() as u64;
    if available < expected {
        let first_missing = PCF_HEADER_LEN + (available / 4) * 4;
        return Err(Error::at_byte(
            first_missing,
            format!(
                "truncated payload: {count} points need {} floats, found {}",
                count * 3,
                available / 4
            ),
        ));
    }
    if available > expected {
        return Err(Error::at_byte(
            PCF_HEADER_LEN + expected,
            "trailing bytes after point payload",
        ));
    }
    let floats: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let points: Vec<Point3> = floats.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
        return Err(Error::validation(format!("point {i} has a non-finite coordinate")));
    }
    PointCloud::new(points)
}

pub fn encode_pcf(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + cloud.len() * 12);
    out.extend_from_slice(PCF_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in cloud.points() {
        for c in p {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out
}

pub fn encode_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 24);
    for p in cloud.points() {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    out
}

pub fn save_cloud(cloud: &PointCloud, path: impl AsRef<Path>, format: CloudFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        CloudFormat::PcfBinary => encode_pcf(cloud),
        CloudFormat::XyzAscii => encode_xyz(cloud).into_bytes(),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rotation regimes: canonical pose, random spin about +z, or uniform over SO(3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationMode {
    Aligned,
    ZAxis,
    Full,
}

impl std::str::FromStr for RotationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "aligned" => Ok(RotationMode::Aligned),
            "z" | "z-axis" | "zaxis" => Ok(RotationMode::ZAxis),
            "r" | "full" | "random" => Ok(RotationMode::Full),
            other => Err(Error::argument(format!("unknown rotation mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    matrix: [[f64; 3]; 3],
    mode: RotationMode,
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation {
        matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        mode: RotationMode::Aligned,
    };

    /// Rotation about +z by `angle` radians.
    pub fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation {
            matrix: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            mode: RotationMode::ZAxis,
        }
    }

    /// Rotation matrix of the unit quaternion `w + xi + yj + zk`; the input is
    /// normalized first.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let (w, x, y, z) = (w / n, x / n, y / n, z / n);
        Rotation {
            matrix: [
                [
                    1.0 - 2.0 * (y * y + z * z),
                    2.0 * (x * y - w * z),
                    2.0 * (x * z + w * y),
                ],
                [
                    2.0 * (x * y + w * z),
                    1.0 - 2.0 * (x * x + z * z),
                    2.0 * (y * z - w * x),
                ],
                [
                    2.0 * (x * z - w * y),
                    2.0 * (y * z + w * x),
                    1.0 - 2.0 * (x * x + y * y),
                ],
            ],
            mode: RotationMode::Full,
        }
    }

    #[inline]
    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.matrix
    }

    #[inline]
    pub fn mode(&self) -> RotationMode {
        self.mode
    }

    pub fn is_identity(&self) -> bool {
        self.matrix == Rotation::IDENTITY.matrix
    }

    pub fn trace(&self) -> f64 {
        self.matrix[0][0] + self.matrix[1][1] + self.matrix[2][2]
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    #[inline]
    pub fn apply(&self, p: &Point3) -> Point3 {
        let m = &self.matrix;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
        ]
    }
}

/// Deterministic in `(mode, seed)`. Full rotations use the subgroup
/// algorithm on unit quaternions (three uniforms), which is Haar-uniform.
pub fn sample_rotation(mode: RotationMode, seed: u64) -> Rotation {
    match mode {
        RotationMode::Aligned => Rotation::IDENTITY,
        RotationMode::ZAxis => {
            let mut rng = seeded(seed);
            Rotation::about_z(2.0 * PI * rng.gen::<f64>())
        }
        RotationMode::Full => {
            let mut rng = seeded(seed);
            let u1: f64 = rng.gen();
            let u2: f64 = rng.gen();
            let u3: f64 = rng.gen();
            let a = (1.0 - u1).sqrt();
            let b = u1.sqrt();
            let (s2, c2) = (2.0 * PI * u2).sin_cos();
            let (s3, c3) = (2.0 * PI * u3).sin_cos();
            Rotation::from_quaternion(b * c3, a * s2, a * c2, b * s3)
        }
    }
}

pub fn apply_rotation(cloud: &PointCloud, rot: &Rotation) -> PointCloud {
    if rot.is_identity() {
        return cloud.clone();
    }
    PointCloud {
        points: cloud.points.iter().map(|p| rot.apply(p)).collect(),
    }
}

/// How the first farthest-point-sampling center is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FpsStart {
    /// Point farthest from the centroid, smallest index on ties. Rotation-stable.
    #[default]
    FarthestFromCentroid,
    /// Uniformly random index drawn from the seed.
    Random,
}

/// Greedy max-min selection of `k` centers. The default start ignores `seed`.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize, seed: u64) -> Result<Vec<usize>> {
    farthest_point_sample_with(cloud, k, FpsStart::default(), seed)
}

pub fn farthest_point_sample_with(
    cloud: &PointCloud,
    k: usize,
    start: FpsStart,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::argument(format!(
            "patch count must be in 1..={n}, got {k}"
        )));
    }
    let pts = cloud.points();
    let first = match start {
        FpsStart::FarthestFromCentroid => {
            let c = cloud.centroid();
            argmax_first(pts.iter().map(|p| dist2(p, &c)))
        }
        FpsStart::Random => seeded(seed).gen_range(0..n),
    };

    let mut chosen = Vec::with_capacity(k);
    let mut selected = vec![false; n];
    let mut min_d: Vec<f64> = pts.iter().map(|p| dist2(p, &pts[first])).collect();
    chosen.push(first);
    selected[first] = true;

    while chosen.len() < k {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if !selected[i] && d > best_d {
                best = i;
                best_d = d;
            }
        }
        chosen.push(best);
        selected[best] = true;
        let anchor = pts[best];
        for (d, p) in min_d.iter_mut().zip(pts) {
            let nd = dist2(p, &anchor);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(chosen)
}

fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// `K` local regions: center indices, their coordinates, and the `k` nearest
/// source points of each center (center first).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    centers: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
    center_coords: Vec<Point3>,
    source_size: usize,
}

impl PatchSet {
    #[inline]
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[usize] {
        &self.centers
    }

    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn center_coords(&self) -> &[Point3] {
        &self.center_coords
    }

    pub fn source_size(&self) -> usize {
        self.source_size
    }

    /// Neighborhood size `k`.
    pub fn patch_size(&self) -> usize {
        self.neighbors.first().map_or(0, Vec::len)
    }
}

/// For each center: the center itself, then the `k - 1` nearest other points
/// ordered by (distance, index).
pub fn knn_patchify(cloud: &PointCloud, centers: &[usize], k: usize) -> Result<PatchSet> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::argument(format!(
            "neighborhood size must be in 1..={n}, got {k}"
        )));
    }
    if centers.is_empty() {
        return Err(Error::argument("at least one patch center is required"));
    }
    let mut seen = vec![false; n];
    for &c in centers {
        if c >= n {
            return Err(Error::argument(format!("center index {c} out of range for {n} points")));
        }
        if std::mem::replace(&mut seen[c], true) {
            return Err(Error::argument(format!("duplicate center index {c}")));
        }
    }

    let pts = cloud.points();
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);
    let neighbors = centers
        .iter()
        .map(|&c| {
            scratch.clear();
            scratch.extend(
                pts.iter()
                    .enumerate()
                    .filter(|&(i, _)| i != c)
                    .map(|(i, p)| (dist2(p, &pts[c]), i)),
            );
            let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k - 1 < scratch.len() && k > 1 {
                scratch.select_nth_unstable_by(k - 2, by_dist);
                scratch.truncate(k - 1);
            } else if k == 1 {
                scratch.clear();
            }
            scratch.sort_unstable_by(by_dist);
            let mut list = Vec::with_capacity(k);
            list.push(c);
            list.extend(scratch.iter().map(|&(_, i)| i));
            list
        })
        .collect();

    Ok(PatchSet {
        centers: centers.to_vec(),
        neighbors,
        center_coords: centers.iter().map(|&c| pts[c]).collect(),
        source_size: n,
    })
}

/// FPS followed by k-NN grouping.
pub fn patchify(cloud: &PointCloud, num_patches: usize, k: usize) -> Result<PatchSet> {
    let centers = farthest_point_sample(cloud, num_patches, 0)?;
    knn_patchify(cloud, &centers, k)
}
