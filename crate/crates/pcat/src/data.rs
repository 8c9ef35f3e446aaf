//! Point-cloud file formats, synthetic datasets, normalization, metrics.
//!
//! Text format: header `N d` (or `N d L` when a trailing integer label
//! column is present), then `N` rows of `d` whitespace-separated floats
//! whose first three are coordinates.
//!
//! Binary format: magic `PCAT`, u32 version = 1, u32 N, u32 d, u8
//! has_labels, then N×d f32 little-endian row-major, then N×u32 labels if
//! flagged.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::network::ByteReader;
use crate::spatial::PointCloud;
use crate::tensor::Tensor;

const CLOUD_MAGIC: &[u8; 4] = b"PCAT";
const CLOUD_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Text,
    Binary,
}

impl CloudFormat {
    /// `.txt` and `.xyz` are text, everything else binary.
    pub fn from_path(path: &Path) -> CloudFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("txt") | Some("xyz") => CloudFormat::Text,
            _ => CloudFormat::Binary,
        }
    }
}

pub fn load_cloud<T: Float>(path: &Path, format: CloudFormat) -> Result<PointCloud<T>> {
    let pstr = path.display().to_string();
    match format {
        CloudFormat::Text => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(pstr.clone(), e))?;
            parse_text_cloud(&text, &pstr)
        }
        CloudFormat::Binary => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(pstr.clone(), e))?;
            parse_binary_cloud(&bytes, &pstr)
        }
    }
}

pub fn save_cloud<T: Float>(
    cloud: &PointCloud<T>,
    path: &Path,
    format: CloudFormat,
) -> Result<()> {
    let pstr = path.display().to_string();
    let bytes = match format {
        CloudFormat::Text => write_text_cloud(cloud).into_bytes(),
        CloudFormat::Binary => write_binary_cloud(cloud),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(pstr, e))
}

pub fn parse_text_cloud<T: Float>(text: &str, path: &str) -> Result<PointCloud<T>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::TextParse {
        path: path.to_string(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let head: Vec<&str> = header.split_whitespace().collect();
    let err = |line: usize, msg: String| Error::TextParse {
        path: path.to_string(),
        line,
        msg,
    };
    if head.len() < 2 || head.len() > 3 {
        return Err(err(1, format!("expected header `N d` or `N d L`, got `{header}`")));
    }
    let n: usize = head[0]
        .parse()
        .map_err(|_| err(1, format!("bad point count `{}`", head[0])))?;
    let d: usize = head[1]
        .parse()
        .map_err(|_| err(1, format!("bad dimension `{}`", head[1])))?;
    let has_labels = match head.get(2) {
        None => false,
        Some(&"L") => true,
        Some(other) => return Err(err(1, format!("bad label flag `{other}` (expected `L`)"))),
    };
    if n == 0 || d < 3 {
        return Err(err(1, format!("need N >= 1 and d >= 3, got N = {n}, d = {d}")));
    }

    let mut coords = Vec::with_capacity(n);
    let mut feats: Vec<T> = Vec::with_capacity(n * (d - 3));
    let mut labels: Vec<u32> = Vec::with_capacity(if has_labels { n } else { 0 });
    let mut rows = 0usize;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if rows == n {
            return Err(err(lineno + 1, format!("more than {n} data rows")));
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let want = d + usize::from(has_labels);
        if cols.len() != want {
            return Err(err(
                lineno + 1,
                format!("expected {want} columns, got {}", cols.len()),
            ));
        }
        let mut vals = Vec::with_capacity(d);
        for c in &cols[..d] {
            let v: f64 = c
                .parse()
                .map_err(|_| err(lineno + 1, format!("bad number `{c}`")))?;
            if !v.is_finite() {
                return Err(err(lineno + 1, format!("non-finite value `{c}`")));
            }
            vals.push(T::of(v));
        }
        coords.push([vals[0], vals[1], vals[2]]);
        feats.extend_from_slice(&vals[3..]);
        if has_labels {
            let l: u32 = cols[d]
                .parse()
                .map_err(|_| err(lineno + 1, format!("bad label `{}`", cols[d])))?;
            labels.push(l);
        }
        rows += 1;
    }
    if rows != n {
        return Err(err(
            text.lines().count(),
            format!("header says {n} rows, found {rows}"),
        ));
    }
    let feats = if d > 3 {
        Some(Tensor::new(vec![n, d - 3], feats)?)
    } else {
        None
    };
    PointCloud::new(coords, feats, has_labels.then_some(labels))
}

pub fn write_text_cloud<T: Float>(cloud: &PointCloud<T>) -> String {
    let n = cloud.len();
    let d = 3 + cloud.feat_dim();
    let mut out = String::new();
    out.push_str(&format!(
        "{n} {d}{}\n",
        if cloud.labels().is_some() { " L" } else { "" }
    ));
    for i in 0..n {
        let p = cloud.coords()[i];
        out.push_str(&format!("{} {} {}", p[0], p[1], p[2]));
        if let Some(f) = cloud.feats() {
            for v in f.row(i) {
                out.push_str(&format!(" {v}"));
            }
        }
        if let Some(l) = cloud.labels() {
            out.push_str(&format!(" {}", l[i]));
        }
        out.push('\n');
    }
    out
}

pub fn parse_binary_cloud<T: Float>(bytes: &[u8], path: &str) -> Result<PointCloud<T>> {
    let mut r = ByteReader::new(bytes, path);
    let magic = r.take(4)?;
    if magic != CLOUD_MAGIC {
        return Err(Error::BinaryParse {
            path: path.to_string(),
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {CLOUD_MAGIC:?}"),
        });
    }
    let version = r.u32()?;
    if version != CLOUD_VERSION {
        return Err(Error::BinaryParse {
            path: path.to_string(),
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let has_labels = match r.take(1)?[0] {
        0 => false,
        1 => true,
        other => {
            return Err(Error::BinaryParse {
                path: path.to_string(),
                offset: 16,
                msg: format!("bad has_labels byte {other}"),
            })
        }
    };
    if n == 0 || d < 3 {
        return Err(Error::BinaryParse {
            path: path.to_string(),
            offset: 8,
            msg: format!("need N >= 1 and d >= 3, got N = {n}, d = {d}"),
        });
    }
    let body = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::BinaryParse {
            path: path.to_string(),
            offset: 8,
            msg: "size overflow".into(),
        })?;
    let label_bytes = if has_labels { n * 4 } else { 0 };
    if r.remaining() != body + label_bytes {
        return Err(Error::BinaryParse {
            path: path.to_string(),
            offset: 17,
            msg: format!(
                "body size mismatch: expected {} bytes, found {}",
                body + label_bytes,
                r.remaining()
            ),
        });
    }
    let mut coords = Vec::with_capacity(n);
    let mut feats: Vec<T> = Vec::with_capacity(n * (d - 3));
    for _ in 0..n {
        let mut row = Vec::with_capacity(d);
        for j in 0..d {
            let v = r.f32()?;
            if !v.is_finite() {
                return Err(Error::BinaryParse {
                    path: path.to_string(),
                    offset: r.pos - 4,
                    msg: format!("non-finite value in column {j}"),
                });
            }
            row.push(T::of(f64::from(v)));
        }
        coords.push([row[0], row[1], row[2]]);
        feats.extend_from_slice(&row[3..]);
    }
    let labels = if has_labels {
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            l.push(r.u32()?);
        }
        Some(l)
    } else {
        None
    };
    let feats = if d > 3 {
        Some(Tensor::new(vec![n, d - 3], feats)?)
    } else {
        None
    };
    PointCloud::new(coords, feats, labels)
}

pub fn write_binary_cloud<T: Float>(cloud: &PointCloud<T>) -> Vec<u8> {
    let n = cloud.len();
    let d = 3 + cloud.feat_dim();
    let mut out = Vec::with_capacity(17 + n * d * 4);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.push(u8::from(cloud.labels().is_some()));
    for i in 0..n {
        for v in cloud.coords()[i] {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        if let Some(f) = cloud.feats() {
            for v in f.row(i) {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
    }
    if let Some(labels) = cloud.labels() {
        for &l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

// ── normalization ────────────────────────────────────────────────────

/// Centering and scaling applied to a cloud, kept for inversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormRecord<T> {
    pub centroid: [T; 3],
    pub scale: T,
}

impl<T: Float> NormRecord<T> {
    pub fn identity() -> Self {
        NormRecord {
            centroid: [T::zero(); 3],
            scale: T::one(),
        }
    }
}

/// Subtract the centroid and scale the max norm to 1.
pub fn normalize<T: Float>(cloud: &PointCloud<T>) -> Result<(PointCloud<T>, NormRecord<T>)> {
    let n = cloud.len();
    let nt = T::of_usize(n);
    let mut c = [T::zero(); 3];
    for p in cloud.coords() {
        for d in 0..3 {
            c[d] += p[d];
        }
    }
    for v in &mut c {
        *v /= nt;
    }
    let mut max_norm = T::zero();
    for p in cloud.coords() {
        let d = crate::spatial::dist(p, &c);
        if d > max_norm {
            max_norm = d;
        }
    }
    let scale = if max_norm > T::zero() {
        max_norm
    } else {
        T::one()
    };
    let coords = cloud
        .coords()
        .iter()
        .map(|p| {
            [
                (p[0] - c[0]) / scale,
                (p[1] - c[1]) / scale,
                (p[2] - c[2]) / scale,
            ]
        })
        .collect();
    let out = PointCloud::new(coords, cloud.feats().cloned(), cloud.labels().map(<[u32]>::to_vec))?;
    Ok((
        out,
        NormRecord {
            centroid: c,
            scale,
        },
    ))
}

// ── synthetic datasets ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Three-class shape classification: sphere / cube / torus surfaces.
    Cls3,
    /// Two-part segmentation: cube body with a pole on top.
    Seg2,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls3" => Ok(SyntheticKind::Cls3),
            "seg2" => Ok(SyntheticKind::Seg2),
            other => Err(Error::invalid(format!(
                "unknown synthetic kind `{other}` (expected cls3|seg2)"
            ))),
        }
    }
}

/// Samples, per-sample class (shape class, or category id for
/// segmentation), class names, and train/test split indices.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub samples: Vec<PointCloud<T>>,
    pub sample_labels: Vec<u32>,
    pub class_names: Vec<String>,
    pub num_classes: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub norms: Vec<NormRecord<T>>,
}

impl<T: Float> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn rotation_from_quaternion(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
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
    ]
}

/// Uniform random rotation (Shoemake's quaternion construction).
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let u1: f64 = rng.gen_range(0.0..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let u3: f64 = rng.gen_range(0.0..1.0);
    let tau = std::f64::consts::TAU;
    let q = [
        (1.0 - u1).sqrt() * (tau * u2).sin(),
        (1.0 - u1).sqrt() * (tau * u2).cos(),
        u1.sqrt() * (tau * u3).sin(),
        u1.sqrt() * (tau * u3).cos(),
    ];
    rotation_from_quaternion(q)
}

fn yaw_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    [
        [a.cos(), -a.sin(), 0.0],
        [a.sin(), a.cos(), 0.0],
        [0.0, 0.0, 1.0],
    ]
}

fn apply3(m: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

fn sphere_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).sqrt();
    [r * a.cos(), r * a.sin(), z]
}

fn cube_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let face: u8 = rng.gen_range(0..6);
    let a: f64 = rng.gen_range(-1.0..1.0);
    let b: f64 = rng.gen_range(-1.0..1.0);
    match face {
        0 => [1.0, a, b],
        1 => [-1.0, a, b],
        2 => [a, 1.0, b],
        3 => [a, -1.0, b],
        4 => [a, b, 1.0],
        _ => [a, b, -1.0],
    }
}

fn torus_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let major = 0.75;
    let minor = 0.3;
    let u: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    [
        (major + minor * v.cos()) * u.cos(),
        (major + minor * v.cos()) * u.sin(),
        minor * v.sin(),
    ]
}

/// Cube body (label 0) with a cylindrical pole on top (label 1).
fn pole_shape_point(rng: &mut ChaCha8Rng, pole: bool) -> [f64; 3] {
    if pole {
        let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = 0.15;
        if rng.gen_range(0.0..1.0) < 0.9 {
            // side of the pole
            let z: f64 = rng.gen_range(0.5..1.5);
            [r * a.cos(), r * a.sin(), z]
        } else {
            // top cap
            let rr: f64 = r * rng.gen_range(0.0f64..1.0).sqrt();
            [rr * a.cos(), rr * a.sin(), 1.5]
        }
    } else {
        let p = cube_point(rng);
        [p[0] * 0.6, p[1] * 0.6, p[2] * 0.5]
    }
}

/// Deterministic synthetic dataset with an 80/20 train/test split.
pub fn gen_synthetic<T: Float>(
    kind: SyntheticKind,
    n_samples: usize,
    points_per_cloud: usize,
    seed: u64,
) -> Result<Dataset<T>> {
    if n_samples == 0 || points_per_cloud == 0 {
        return Err(Error::invalid(
            "gen_synthetic needs n_samples >= 1 and points_per_cloud >= 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_samples);
    let mut sample_labels = Vec::with_capacity(n_samples);
    let mut norms = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let (cloud, label) = match kind {
            SyntheticKind::Cls3 => {
                let class = (i % 3) as u32;
                let rot = random_rotation(&mut rng);
                let jitter: f64 = rng.gen_range(0.01..0.02);
                let mut pts = Vec::with_capacity(points_per_cloud);
                for _ in 0..points_per_cloud {
                    let p = match class {
                        0 => sphere_point(&mut rng),
                        1 => cube_point(&mut rng),
                        _ => torus_point(&mut rng),
                    };
                    let mut p = apply3(&rot, p);
                    for v in &mut p {
                        *v += rng.gen_range(-jitter..jitter);
                    }
                    pts.push([T::of(p[0]), T::of(p[1]), T::of(p[2])]);
                }
                (PointCloud::new(pts, None, None)?, class)
            }
            SyntheticKind::Seg2 => {
                let rot = yaw_rotation(&mut rng);
                let jitter: f64 = rng.gen_range(0.005..0.01);
                let n_pole = points_per_cloud / 4;
                let mut pts = Vec::with_capacity(points_per_cloud);
                let mut labels = Vec::with_capacity(points_per_cloud);
                for j in 0..points_per_cloud {
                    let pole = j < n_pole;
                    let p = pole_shape_point(&mut rng, pole);
                    let mut p = apply3(&rot, p);
                    for v in &mut p {
                        *v += rng.gen_range(-jitter..jitter);
                    }
                    pts.push([T::of(p[0]), T::of(p[1]), T::of(p[2])]);
                    labels.push(u32::from(pole));
                }
                (PointCloud::new(pts, None, Some(labels))?, 0)
            }
        };
        let (normed, rec) = normalize(&cloud)?;
        samples.push(normed);
        sample_labels.push(label);
        norms.push(rec);
    }
    // seeded shuffle, then 80/20
    let mut order: Vec<usize> = (0..n_samples).collect();
    for i in (1..n_samples).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_test = (n_samples / 5).max(usize::from(n_samples > 1));
    let test: Vec<usize> = order[..n_test].to_vec();
    let train: Vec<usize> = order[n_test..].to_vec();
    let (class_names, num_classes) = match kind {
        SyntheticKind::Cls3 => (
            vec!["sphere".to_string(), "cube".to_string(), "torus".to_string()],
            3,
        ),
        SyntheticKind::Seg2 => (vec!["body".to_string(), "pole".to_string()], 2),
    };
    Ok(Dataset {
        samples,
        sample_labels,
        class_names,
        num_classes,
        train,
        test,
        norms,
    })
}

// ── dataset directory layout ─────────────────────────────────────────

/// Write one binary cloud file per sample plus `manifest.txt` mapping
/// filename to class id and split.
pub fn save_dataset<T: Float>(ds: &Dataset<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut manifest = String::new();
    manifest.push_str(&format!("classes {}\n", ds.num_classes));
    for (i, name) in ds.class_names.iter().enumerate() {
        manifest.push_str(&format!("class {i} {name}\n"));
    }
    let test: std::collections::HashSet<usize> = ds.test.iter().copied().collect();
    for (i, sample) in ds.samples.iter().enumerate() {
        let fname = format!("sample_{i:05}.pcb");
        save_cloud(sample, &dir.join(&fname), CloudFormat::Binary)?;
        let split = if test.contains(&i) { "test" } else { "train" };
        manifest.push_str(&format!("sample {fname} {} {split}\n", ds.sample_labels[i]));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)
        .map_err(|e| Error::io(dir.display().to_string(), e))
}

pub fn load_dataset<T: Float>(dir: &Path) -> Result<Dataset<T>> {
    let mpath = dir.join("manifest.txt");
    let pstr = mpath.display().to_string();
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(pstr.clone(), e))?;
    let mut num_classes = 0usize;
    let mut class_names: BTreeMap<usize, String> = BTreeMap::new();
    let mut samples = Vec::new();
    let mut sample_labels = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::TextParse {
            path: pstr.clone(),
            line: lineno + 1,
            msg,
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        match cols[0] {
            "classes" => {
                num_classes = cols
                    .get(1)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| err("bad classes line".into()))?;
            }
            "class" => {
                let id: usize = cols
                    .get(1)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| err("bad class id".into()))?;
                let name = cols.get(2).unwrap_or(&"?").to_string();
                class_names.insert(id, name);
            }
            "sample" => {
                if cols.len() != 4 {
                    return Err(err(format!("expected `sample file label split`, got `{line}`")));
                }
                let fname = cols[1];
                let label: u32 = cols[2]
                    .parse()
                    .map_err(|_| err(format!("bad label `{}`", cols[2])))?;
                let path = dir.join(fname);
                let cloud = load_cloud(&path, CloudFormat::from_path(&path))?;
                let idx = samples.len();
                match cols[3] {
                    "train" => train.push(idx),
                    "test" => test.push(idx),
                    other => return Err(err(format!("bad split `{other}`"))),
                }
                samples.push(cloud);
                sample_labels.push(label);
            }
            other => return Err(err(format!("unknown manifest entry `{other}`"))),
        }
    }
    if samples.is_empty() {
        return Err(Error::TextParse {
            path: pstr,
            line: 1,
            msg: "manifest lists no samples".into(),
        });
    }
    if num_classes == 0 {
        num_classes = sample_labels.iter().map(|&l| l as usize + 1).max().unwrap_or(2);
    }
    for (i, sample) in samples.iter().enumerate() {
        if let Some(bad) = sample
            .labels()
            .and_then(|ls| ls.iter().find(|&&l| l as usize >= num_classes))
        {
            return Err(Error::invalid(format!(
                "sample {i}: point label {bad} out of range for {num_classes} classes"
            )));
        }
    }
    let names = (0..num_classes)
        .map(|i| class_names.get(&i).cloned().unwrap_or_else(|| format!("class{i}")))
        .collect();
    let n = samples.len();
    Ok(Dataset {
        samples,
        sample_labels,
        class_names: names,
        num_classes,
        train,
        test,
        norms: vec![NormRecord::identity(); n],
    })
}

/// Sample cloud paths in manifest order (for tooling).
pub fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mpath = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&mpath)
        .map_err(|e| Error::io(mpath.display().to_string(), e))?;
    Ok(text
        .lines()
        .filter_map(|l| {
            let cols: Vec<&str> = l.split_whitespace().collect();
            (cols.first() == Some(&"sample")).then(|| dir.join(cols[1]))
        })
        .collect())
}

// ── metrics ──────────────────────────────────────────────────────────

/// Shape structure for IoU metrics: contiguous run lengths of `preds`
/// belonging to each shape, each shape's category, and the part classes of
/// each category.
#[derive(Debug, Clone)]
pub struct ShapeGrouping {
    pub shape_sizes: Vec<usize>,
    pub shape_categories: Vec<u32>,
    pub category_parts: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub oa: f64,
    pub macc: f64,
    pub ins_miou: f64,
    pub cat_miou: f64,
    /// Per-class accuracy; `None` for classes absent from the ground truth.
    pub per_class_acc: Vec<Option<f64>>,
}

impl MetricsReport {
    pub fn to_kv_lines(&self) -> String {
        let mut out = format!(
            "oa={}\nmacc={}\nins_miou={}\ncat_miou={}\n",
            self.oa, self.macc, self.ins_miou, self.cat_miou
        );
        for (i, acc) in self.per_class_acc.iter().enumerate() {
            if let Some(a) = acc {
                out.push_str(&format!("class{i}_acc={a}\n"));
            }
        }
        out
    }
}

fn iou_for_part(preds: &[u32], labels: &[u32], part: u32) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &l) in preds.iter().zip(labels) {
        let pp = p == part;
        let ll = l == part;
        if pp && ll {
            inter += 1;
        }
        if pp || ll {
            union += 1;
        }
    }
    // a part absent from both prediction and ground truth counts as 1
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Overall accuracy, mean per-class accuracy (classes with ground truth
/// only), and instance / category mIoU. Without a grouping, the whole
/// input counts as one shape whose parts are all classes, making the mIoU
/// fields the macro-averaged IoU over classes.
pub fn metrics(
    preds: &[u32],
    labels: &[u32],
    num_classes: usize,
    grouping: Option<&ShapeGrouping>,
) -> Result<MetricsReport> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!(
            "metrics: {} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::invalid("metrics: empty input"));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&v| v as usize >= num_classes) {
        return Err(Error::invalid(format!(
            "metrics: class id {bad} out of range for {num_classes} classes"
        )));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let oa = correct as f64 / preds.len() as f64;

    let mut per_total = vec![0usize; num_classes];
    let mut per_correct = vec![0usize; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        per_total[l as usize] += 1;
        if p == l {
            per_correct[l as usize] += 1;
        }
    }
    let per_class_acc: Vec<Option<f64>> = per_total
        .iter()
        .zip(&per_correct)
        .map(|(&t, &c)| (t > 0).then(|| c as f64 / t as f64))
        .collect();
    let present: Vec<f64> = per_class_acc.iter().flatten().copied().collect();
    let macc = present.iter().sum::<f64>() / present.len() as f64;

    let all_parts: Vec<u32> = (0..num_classes as u32).collect();
    let default_grouping;
    let grouping = match grouping {
        Some(g) => g,
        None => {
            default_grouping = ShapeGrouping {
                shape_sizes: vec![preds.len()],
                shape_categories: vec![0],
                category_parts: vec![all_parts],
            };
            &default_grouping
        }
    };
    let total: usize = grouping.shape_sizes.iter().sum();
    if total != preds.len() || grouping.shape_sizes.len() != grouping.shape_categories.len() {
        return Err(Error::invalid(
            "metrics grouping does not cover the predictions",
        ));
    }

    let mut shape_mious = Vec::with_capacity(grouping.shape_sizes.len());
    let mut per_cat: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut offset = 0usize;
    for (&size, &cat) in grouping.shape_sizes.iter().zip(&grouping.shape_categories) {
        let p = &preds[offset..offset + size];
        let l = &labels[offset..offset + size];
        offset += size;
        let parts = grouping
            .category_parts
            .get(cat as usize)
            .ok_or_else(|| Error::invalid(format!("grouping lacks parts for category {cat}")))?;
        let miou = parts
            .iter()
            .map(|&part| iou_for_part(p, l, part))
            .sum::<f64>()
            / parts.len() as f64;
        shape_mious.push(miou);
        per_cat.entry(cat).or_default().push(miou);
    }
    let ins_miou = shape_mious.iter().sum::<f64>() / shape_mious.len() as f64;
    let cat_miou = per_cat
        .values()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .sum::<f64>()
        / per_cat.len() as f64;

    Ok(MetricsReport {
        oa,
        macc,
        ins_miou,
        cat_miou,
        per_class_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_format_single_point() {
        let cloud: PointCloud<f64> = parse_text_cloud("1 3\n0 0 0\n", "mem").unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.coords()[0], [0.0, 0.0, 0.0]);
        assert!(cloud.feats().is_none());
    }

    #[test]
    fn text_roundtrip_with_labels_is_exact_at_f32() {
        let coords = vec![[0.125f32, -3.5, 7.0], [1.0e-8, 2.0, -0.25]];
        let feats = Tensor::new(vec![2, 2], vec![0.1f32, 0.2, 0.3, 0.4]).unwrap();
        let cloud = PointCloud::new(coords, Some(feats), Some(vec![4, 9])).unwrap();
        let text = write_text_cloud(&cloud);
        let back: PointCloud<f32> = parse_text_cloud(&text, "mem").unwrap();
        assert_eq!(cloud, back);
    }

    #[test]
    fn text_errors_carry_line_numbers() {
        let err = parse_text_cloud::<f64>("2 3\n0 0 0\n", "f.txt").unwrap_err();
        assert!(err.to_string().contains("f.txt"), "{err}");
        let err = parse_text_cloud::<f64>("2 3\n0 0 0\n1 nan 0\n", "f.txt").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = parse_text_cloud::<f64>("1 3\n0 0\n", "f.txt").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn binary_roundtrip_and_truncation_error() {
        let coords = vec![[0.5f32, 1.5, -2.5]; 5];
        let cloud = PointCloud::new(coords, None, Some(vec![0, 1, 0, 1, 0])).unwrap();
        let bytes = write_binary_cloud(&cloud);
        let back: PointCloud<f32> = parse_binary_cloud(&bytes, "mem").unwrap();
        assert_eq!(cloud, back);

        let err = parse_binary_cloud::<f32>(&bytes[..bytes.len() - 3], "mem").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected") && msg.contains("found"), "{msg}");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = parse_binary_cloud::<f32>(&bad, "mem").unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn normalize_fits_unit_ball() {
        let cloud = PointCloud::<f64>::from_coords(vec![
            [10.0, 0.0, 0.0],
            [12.0, 1.0, 0.0],
            [11.0, -1.0, 3.0],
        ])
        .unwrap();
        let (normed, rec) = normalize(&cloud).unwrap();
        for p in normed.coords() {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!(n <= 1.0 + 1e-6);
        }
        assert!(rec.scale > 0.0);
    }

    #[test]
    fn gen_synthetic_deterministic_and_normalized() {
        let a: Dataset<f64> = gen_synthetic(SyntheticKind::Cls3, 9, 64, 77).unwrap();
        let b: Dataset<f64> = gen_synthetic(SyntheticKind::Cls3, 9, 64, 77).unwrap();
        assert_eq!(a.samples.len(), 9);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x, y);
        }
        assert_eq!(a.train, b.train);
        for s in &a.samples {
            for p in s.coords() {
                assert!((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() <= 1.0 + 1e-6);
            }
        }
        // balanced labels
        assert_eq!(a.sample_labels.iter().filter(|&&l| l == 0).count(), 3);
    }

    #[test]
    fn seg2_has_both_parts_labeled() {
        let ds: Dataset<f64> = gen_synthetic(SyntheticKind::Seg2, 2, 128, 5).unwrap();
        for s in &ds.samples {
            let labels = s.labels().unwrap();
            assert!(labels.iter().any(|&l| l == 0));
            assert!(labels.iter().any(|&l| l == 1));
        }
    }

    #[test]
    fn dataset_directory_roundtrip() {
        let ds: Dataset<f64> = gen_synthetic(SyntheticKind::Seg2, 4, 32, 1).unwrap();
        let dir = std::env::temp_dir().join("pcat_ds_test");
        std::fs::remove_dir_all(&dir).ok();
        save_dataset(&ds, &dir).unwrap();
        let back: Dataset<f64> = load_dataset(&dir).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back.num_classes, 2);
        let mut tr = back.train.clone();
        tr.extend(&back.test);
        tr.sort_unstable();
        assert_eq!(tr, vec![0, 1, 2, 3]);
        // binary storage is f32-exact, and generation was f64: compare at f32
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.labels(), b.labels());
            for (pa, pb) in a.coords().iter().zip(b.coords()) {
                for d in 0..3 {
                    assert_eq!(pa[d] as f32, pb[d] as f32);
                }
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn metrics_all_correct_is_ones() {
        let preds = vec![0, 1, 2, 1];
        let r = metrics(&preds, &preds, 3, None).unwrap();
        assert_eq!(r.oa, 1.0);
        assert_eq!(r.macc, 1.0);
        assert_eq!(r.ins_miou, 1.0);
        assert_eq!(r.cat_miou, 1.0);
    }

    #[test]
    fn metrics_half_right_hand_case() {
        // 2 classes, class 0 always right, class 1 always wrong, 50/50
        let labels = vec![0, 0, 1, 1];
        let preds = vec![0, 0, 0, 0];
        let r = metrics(&preds, &labels, 2, None).unwrap();
        assert_eq!(r.oa, 0.5);
        assert_eq!(r.macc, 0.5);
    }

    #[test]
    fn macc_skips_absent_classes() {
        let labels = vec![0, 0];
        let preds = vec![0, 1];
        let r = metrics(&preds, &labels, 3, None).unwrap();
        assert_eq!(r.macc, 0.5);
        assert_eq!(r.per_class_acc[1], None);
        assert_eq!(r.per_class_acc[2], None);
    }

    #[test]
    fn iou_absent_part_counts_as_one() {
        // one shape, category with parts {0, 1}, nobody uses part 1
        let g = ShapeGrouping {
            shape_sizes: vec![3],
            shape_categories: vec![0],
            category_parts: vec![vec![0, 1]],
        };
        let r = metrics(&[0, 0, 0], &[0, 0, 0], 2, Some(&g)).unwrap();
        assert_eq!(r.ins_miou, 1.0);
    }

    #[test]
    fn ins_and_cat_miou_differ_across_categories() {
        // category 0: two shapes at IoU 1.0 and 0.5 (for its single part set)
        // category 1: one shape at IoU 1.0
        let g = ShapeGrouping {
            shape_sizes: vec![2, 2, 2],
            shape_categories: vec![0, 0, 1],
            category_parts: vec![vec![0, 1], vec![0, 1]],
        };
        let labels = vec![0, 1, 0, 1, 0, 1];
        let preds = vec![0, 1, 0, 0, 0, 1];
        let r = metrics(&preds, &labels, 2, Some(&g)).unwrap();
        // shape 2 of cat 0: part0 IoU = 1/2, part1 IoU = 0 → miou 0.25
        let s2 = (0.5 + 0.0) / 2.0;
        let ins = (1.0 + s2 + 1.0) / 3.0;
        let cat = ((1.0 + s2) / 2.0 + 1.0) / 2.0;
        assert!((r.ins_miou - ins).abs() < 1e-12);
        assert!((r.cat_miou - cat).abs() < 1e-12);
    }
}
