//! Synthetic labelled point clouds and the text file formats.
//!
//! # `stpc-xyz` clouds
//!
//! ```text
//! stpc-xyz v1 <channels> <has_label>
//! # comment lines and blank lines are skipped
//! x y z [c1 … cC] [label]
//! ```
//!
//! Fields are whitespace separated. Floats are written in Rust's shortest
//! round-trip form, so write→read is lossless for finite values.
//!
//! # Prediction files
//!
//! One non-negative integer label per line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::nn::mix_seed;

pub const FORMAT_TAG: &str = "stpc-xyz";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Flat square patches; the label is the orientation bin of the normal.
    OrientedPlanes,
    /// Axis-aligned one-, two- and three-face corners, labelled by face count.
    CornerShapes,
    /// Gaussian clusters labelled by cluster (direction-insensitive control).
    RandomBlobs,
}

impl SyntheticKind {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::OrientedPlanes => "oriented-planes",
            SyntheticKind::CornerShapes => "corner-shapes",
            SyntheticKind::RandomBlobs => "random-blobs",
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SyntheticKind::OrientedPlanes,
            SyntheticKind::CornerShapes,
            SyntheticKind::RandomBlobs,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::config("kind", format!("unknown kind `{s}` (expected oriented-planes, corner-shapes or random-blobs)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub clouds: usize,
    pub points: usize,
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clouds == 0 {
            return Err(Error::config("clouds", "must be at least 1"));
        }
        if self.classes == 0 {
            return Err(Error::config("classes", "must be at least 1"));
        }
        if self.points < self.classes {
            return Err(Error::config("points", "must be at least the class count"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::config("noise", "must be finite and non-negative"));
        }
        let max = match self.kind {
            SyntheticKind::OrientedPlanes => REFERENCE_DIRECTIONS.len(),
            SyntheticKind::CornerShapes => 3,
            SyntheticKind::RandomBlobs => usize::MAX,
        };
        if self.classes > max {
            return Err(Error::config("classes", format!("{} supports at most {max} classes", self.kind.name())));
        }
        Ok(())
    }
}

/// A generated cloud together with the construction metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCloud {
    pub cloud: PointCloud,
    /// Index of the patch, corner or cluster each point came from.
    pub part: Vec<usize>,
    /// Unit normal of each patch (oriented planes only).
    pub normals: Vec<[f64; 3]>,
    /// A point on each patch plane (oriented planes only).
    pub anchors: Vec<[f64; 3]>,
}

// Three axes, six face diagonals and four body diagonals of the cube, one
// per antipodal pair.
const REFERENCE_DIRECTIONS: [[f64; 3]; 13] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, -1.0, 0.0],
    [1.0, 0.0, -1.0],
    [0.0, 1.0, -1.0],
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0],
    [-1.0, 1.0, 1.0],
];

/// The first `classes` unit reference directions for orientation bins.
pub fn reference_directions(classes: usize) -> Vec<[f64; 3]> {
    REFERENCE_DIRECTIONS[..classes.min(REFERENCE_DIRECTIONS.len())]
        .iter()
        .map(|&d| normalize(d))
        .collect()
}

/// Orientation bin of a normal: the reference direction with the largest
/// `|cos|` (a plane and its flipped normal share a bin).
pub fn orientation_bin(normal: &[f64; 3], references: &[[f64; 3]]) -> usize {
    let mut best = 0;
    let mut best_cos = f64::NEG_INFINITY;
    for (c, r) in references.iter().enumerate() {
        let cos = dot3(normal, r).abs();
        if cos > best_cos {
            best = c;
            best_cos = cos;
        }
    }
    best
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot3(&v, &v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn gaussian3(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    ]
}

/// Cell spacing of the placement grid; every part fits inside a cell.
const CELL: f64 = 2.0;
/// Side of a patch or corner face.
const FACE: f64 = 1.0;

/// Distinct grid cells for `parts` objects, centred on the origin.
fn place_parts(rng: &mut ChaCha8Rng, parts: usize) -> Vec<[f64; 3]> {
    let mut side = 1;
    while side * side * side < parts {
        side += 1;
    }
    let cells = rand::seq::index::sample(rng, side * side * side, parts).into_vec();
    let half = (side as f64 - 1.0) / 2.0;
    cells
        .into_iter()
        .map(|c| {
            let (x, y, z) = (c % side, (c / side) % side, c / (side * side));
            let jitter = 0.15 * CELL;
            [
                (x as f64 - half) * CELL + rng.gen_range(-jitter..=jitter),
                (y as f64 - half) * CELL + rng.gen_range(-jitter..=jitter),
                (z as f64 - half) * CELL + rng.gen_range(-jitter..=jitter),
            ]
        })
        .collect()
}

/// Splits `n` points over `parts` as evenly as possible.
fn split_counts(n: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|p| n / parts + usize::from(p < n % parts)).collect()
}

/// Generates `spec.clouds` labelled clouds. Pure function of `spec`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<SyntheticCloud>> {
    spec.validate()?;
    (0..spec.clouds)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, i as u64]));
            match spec.kind {
                SyntheticKind::OrientedPlanes => oriented_planes(&mut rng, spec),
                SyntheticKind::CornerShapes => corner_shapes(&mut rng, spec),
                SyntheticKind::RandomBlobs => random_blobs(&mut rng, spec),
            }
        })
        .collect()
}

struct Builder {
    coords: Vec<[f64; 3]>,
    labels: Vec<usize>,
    part: Vec<usize>,
}

impl Builder {
    fn new(n: usize) -> Self {
        Builder {
            coords: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
            part: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, p: [f64; 3], label: usize, part: usize) {
        self.coords.push(p);
        self.labels.push(label);
        self.part.push(part);
    }

    fn finish(mut self, rng: &mut ChaCha8Rng, noise: f64, normals: Vec<[f64; 3]>, anchors: Vec<[f64; 3]>) -> Result<SyntheticCloud> {
        if noise > 0.0 {
            let dist = Normal::new(0.0, noise).map_err(|e| Error::config("noise", e.to_string()))?;
            for p in &mut self.coords {
                for v in p.iter_mut() {
                    *v += dist.sample(rng);
                }
            }
        }
        let mut order: Vec<usize> = (0..self.coords.len()).collect();
        order.shuffle(rng);
        let coords = order.iter().map(|&i| self.coords[i]).collect();
        let labels = order.iter().map(|&i| self.labels[i]).collect();
        let part = order.iter().map(|&i| self.part[i]).collect();
        Ok(SyntheticCloud {
            cloud: PointCloud::new(coords)?.with_labels(labels)?,
            part,
            normals,
            anchors,
        })
    }
}

fn oriented_planes(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Result<SyntheticCloud> {
    let refs = reference_directions(spec.classes);
    let parts = 2 * spec.classes;
    let centers = place_parts(rng, parts);
    let counts = split_counts(spec.points, parts);
    let mut b = Builder::new(spec.points);
    let mut normals = Vec::with_capacity(parts);
    for (p, (center, &count)) in centers.iter().zip(&counts).enumerate() {
        let class = p % spec.classes;
        let normal = loop {
            let g = gaussian3(rng);
            let r = refs[class];
            let n = normalize([r[0] + 0.12 * g[0], r[1] + 0.12 * g[1], r[2] + 0.12 * g[2]]);
            if orientation_bin(&n, &refs) == class {
                break n;
            }
        };
        let helper = if normal[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let u0 = normalize(cross(&normal, &helper));
        let v0 = cross(&normal, &u0);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (s, c) = theta.sin_cos();
        let u = [c * u0[0] + s * v0[0], c * u0[1] + s * v0[1], c * u0[2] + s * v0[2]];
        let v = cross(&normal, &u);
        for _ in 0..count {
            let a = rng.gen_range(-0.5..0.5) * FACE;
            let bb = rng.gen_range(-0.5..0.5) * FACE;
            let pt = [
                center[0] + a * u[0] + bb * v[0],
                center[1] + a * u[1] + bb * v[1],
                center[2] + a * u[2] + bb * v[2],
            ];
            b.push(pt, class, p);
        }
        normals.push(normal);
    }
    b.finish(rng, spec.noise, normals, centers)
}

fn corner_shapes(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Result<SyntheticCloud> {
    let parts = 2 * spec.classes;
    let centers = place_parts(rng, parts);
    let counts = split_counts(spec.points, parts);
    let mut b = Builder::new(spec.points);
    for (p, (center, &count)) in centers.iter().zip(&counts).enumerate() {
        let class = p % spec.classes;
        let faces = class + 1;
        let mut axes = [0usize, 1, 2];
        axes.shuffle(rng);
        let signs: [f64; 3] = [0, 1, 2].map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
        for (f, &fc) in split_counts(count, faces).iter().enumerate() {
            for _ in 0..fc {
                // face f spans the two local axes other than f
                let mut local = [0.0; 3];
                for (d, l) in local.iter_mut().enumerate() {
                    if d != f {
                        *l = rng.gen_range(0.0..FACE) - 0.5 * FACE;
                    } else {
                        *l = -0.5 * FACE;
                    }
                }
                let mut pt = *center;
                for d in 0..3 {
                    pt[axes[d]] += signs[d] * local[d];
                }
                b.push(pt, class, p);
            }
        }
    }
    b.finish(rng, spec.noise, Vec::new(), Vec::new())
}

fn random_blobs(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Result<SyntheticCloud> {
    let parts = 2 * spec.classes;
    let centers = place_parts(rng, parts);
    let counts = split_counts(spec.points, parts);
    let mut b = Builder::new(spec.points);
    for (p, (center, &count)) in centers.iter().zip(&counts).enumerate() {
        for _ in 0..count {
            let g = gaussian3(rng);
            let pt = [center[0] + 0.25 * g[0], center[1] + 0.25 * g[1], center[2] + 0.25 * g[2]];
            b.push(pt, p % spec.classes, p);
        }
    }
    b.finish(rng, spec.noise, Vec::new(), Vec::new())
}

// ------------------------------------------------------------------ files

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

pub fn format_cloud(cloud: &PointCloud) -> String {
    let c = cloud.channels();
    let labels = cloud.labels();
    let mut s = format!("{FORMAT_TAG} v{FORMAT_VERSION} {c} {}\n", u8::from(labels.is_some()));
    for (i, p) in cloud.coords().iter().enumerate() {
        write!(s, "{} {} {}", p[0], p[1], p[2]).unwrap();
        for v in &cloud.attrs()[i * c..(i + 1) * c] {
            write!(s, " {v}").unwrap();
        }
        if let Some(l) = labels {
            write!(s, " {}", l[i]).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, format_cloud(cloud))?;
    Ok(())
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    parse_cloud(path, &fs::read_to_string(path)?)
}

/// Parses `stpc-xyz` text; `path` is only used in error messages.
pub fn parse_cloud(path: &Path, text: &str) -> Result<PointCloud> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hline, header) = lines.next().ok_or_else(|| parse_err(path, 1, "missing header"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let bad_header = || parse_err(path, hline, format!("expected `{FORMAT_TAG} v{FORMAT_VERSION} <channels> <has_label>`, found `{header}`"));
    if fields.len() != 4 || fields[0] != FORMAT_TAG {
        return Err(bad_header());
    }
    if fields[1] != format!("v{FORMAT_VERSION}") {
        return Err(parse_err(path, hline, format!("unsupported version `{}`", fields[1])));
    }
    let channels: usize = fields[2].parse().map_err(|_| bad_header())?;
    let has_label = match fields[3] {
        "0" => false,
        "1" => true,
        _ => return Err(bad_header()),
    };
    let width = 3 + channels + usize::from(has_label);

    let mut coords = Vec::new();
    let mut attrs = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != width {
            return Err(parse_err(path, n, format!("expected {width} fields, found {}", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| parse_err(path, n, format!("`{s}` is not a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(path, n, format!("non-finite value `{s}`")))
            }
        };
        coords.push([num(f[0])?, num(f[1])?, num(f[2])?]);
        for s in &f[3..3 + channels] {
            attrs.push(num(s)?);
        }
        if has_label {
            let s = f[width - 1];
            labels.push(s.parse().map_err(|_| parse_err(path, n, format!("`{s}` is not a label")))?);
        }
    }
    let cloud = PointCloud::new(coords)?.with_attrs(channels, attrs)?;
    if has_label {
        cloud.with_labels(labels)
    } else {
        Ok(cloud)
    }
}

pub fn write_predictions(path: &Path, labels: &[usize]) -> Result<()> {
    let mut s = String::with_capacity(labels.len() * 2);
    for l in labels {
        writeln!(s, "{l}").unwrap();
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| parse_err(path, i + 1, format!("`{}` is not a label", l.trim())))
        })
        .collect()
}

/// Writes `cloud_NNNN.xyz` files plus a manifest listing them in order.
pub fn write_dataset(dir: &Path, clouds: &[PointCloud]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut paths = Vec::with_capacity(clouds.len());
    for (i, cloud) in clouds.iter().enumerate() {
        let name = format!("cloud_{i:04}.xyz");
        write_cloud(&dir.join(&name), cloud)?;
        manifest.push_str(&name);
        manifest.push('\n');
        paths.push(dir.join(name));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(paths)
}

/// Reads every cloud named in `dir/manifest.txt`, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<PointCloud>> {
    let manifest = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest)?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|name| read_cloud(&dir.join(name)))
        .collect()
}

/// Deterministic split by sample index: the first 80% (at least one) train,
/// the rest are held out. A single sample serves as both.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    if n <= 1 {
        return ((0..n).collect(), (0..n).collect());
    }
    let train = ((n * 4) as f64 / 5.0).round().clamp(1.0, (n - 1) as f64) as usize;
    ((0..train).collect(), (train..n).collect())
}
