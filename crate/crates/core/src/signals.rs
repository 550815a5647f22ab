//! Signals sampled on coordinate grids, image IO and procedural datasets.
//!
//! Coordinates are flattened row-major with the first dimension varying
//! slowest. Conventions per modality:
//!
//! | modality | coordinates            | targets |
//! |----------|------------------------|---------|
//! | Image    | `[-1, 1]^2`            | `[0, 1]` per channel |
//! | Sdf      | `[-1, 1]^2`            | `[0, 1]` (shifted, scaled distance) |
//! | Voxel    | `[0, 1]^3`             | occupancy in `{0, 1}` |
//! | Manifold | unit sphere in `R^3`   | `[0, 1]` |

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum SignalError {
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid signal {id}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, SignalError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Voxel,
    Sdf,
    Manifold,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Voxel => 1,
            Modality::Sdf => 2,
            Modality::Manifold => 3,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Voxel => "voxel",
            Modality::Sdf => "sdf",
            Modality::Manifold => "manifold",
        })
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "image" => Ok(Modality::Image),
            "voxel" => Ok(Modality::Voxel),
            "sdf" => Ok(Modality::Sdf),
            "manifold" => Ok(Modality::Manifold),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}

/// One data item: coordinates `[N, in_dim]` and targets `[N, out_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal<T> {
    pub id: String,
    pub modality: Modality,
    /// Native grid dimensions; their product is `N`.
    pub dims: Vec<usize>,
    pub coords: Tensor<T>,
    pub targets: Tensor<T>,
}

impl<T: Real> Signal<T> {
    pub fn len(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn in_dim(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.targets.shape()[1]
    }

    /// Checks the shape, coordinate-range and target-range invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| SignalError::Invalid {
            id: self.id.clone(),
            reason,
        };
        let n: usize = self.dims.iter().product();
        if self.coords.shape().len() != 2 || self.targets.shape().len() != 2 {
            return Err(bad("coords and targets must be matrices".into()));
        }
        if self.len() != n || self.targets.shape()[0] != n {
            return Err(bad(format!("{} rows for dims {:?}", self.len(), self.dims)));
        }
        if !self.coords.is_finite() || !self.targets.is_finite() {
            return Err(bad("non-finite values".into()));
        }
        let tol = 1e-6;
        let coords = self.coords.data();
        match self.modality {
            Modality::Image | Modality::Sdf => {
                if coords.iter().any(|c| c.as_f64().abs() > 1.0 + tol) {
                    return Err(bad("coordinates outside [-1, 1]".into()));
                }
            }
            Modality::Voxel => {
                if coords.iter().any(|c| !(-tol..=1.0 + tol).contains(&c.as_f64())) {
                    return Err(bad("coordinates outside [0, 1]".into()));
                }
            }
            Modality::Manifold => {
                for row in coords.chunks(self.in_dim()) {
                    let norm: f64 = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                    if (norm - 1.0).abs() > 1e-5 {
                        return Err(bad(format!("coordinate norm {norm}")));
                    }
                }
            }
        }
        if self.targets.data().iter().any(|t| !(0.0..=1.0).contains(&t.as_f64())) {
            return Err(bad("targets outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Evenly spaced grid over `[lo, hi]^d` with endpoints included.
pub fn make_grid_in<T: Real>(dims: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let d = dims.len();
    let n: usize = dims.iter().product();
    let axis = |size: usize, i: usize| -> f64 {
        if size == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (size - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(n * d);
    let mut idx = vec![0usize; d];
    for _ in 0..n {
        for (k, &i) in idx.iter().enumerate() {
            data.push(T::from_f64_lossy(axis(dims[k], i)));
        }
        for k in (0..d).rev() {
            idx[k] += 1;
            if idx[k] < dims[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Tensor::new(vec![n, d], data).expect("grid shape")
}

/// Coordinate grid following the modality's convention.
pub fn make_grid<T: Real>(dims: &[usize], modality: Modality) -> Tensor<T> {
    match modality {
        Modality::Image | Modality::Sdf => make_grid_in(dims, -1.0, 1.0),
        Modality::Voxel => make_grid_in(dims, 0.0, 1.0),
        Modality::Manifold => era5_coords(dims[0], dims[1]),
    }
}

/// Latitude/longitude grid mapped onto the unit sphere,
/// `(cos λ cos φ, cos λ sin φ, sin λ)` with `λ ∈ [−π/2, π/2]` and
/// `φ ∈ [0, 2π(n−1)/n]`. Rows are latitude-major.
pub fn era5_coords<T: Real>(lat_count: usize, lon_count: usize) -> Tensor<T> {
    use std::f64::consts::PI;
    let mut data = Vec::with_capacity(lat_count * lon_count * 3);
    for i in 0..lat_count {
        let lat = if lat_count == 1 {
            0.0
        } else {
            -PI / 2.0 + PI * i as f64 / (lat_count - 1) as f64
        };
        for j in 0..lon_count {
            let lon = 2.0 * PI * j as f64 / lon_count as f64;
            for v in [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()] {
                data.push(T::from_f64_lossy(v));
            }
        }
    }
    Tensor::new(vec![lat_count * lon_count, 3], data).expect("sphere grid shape")
}

/// Reads an 8-bit grayscale or RGB image (PNG, PGM or PPM) into an image
/// signal with targets in `[0, 1]`.
pub fn load_image<T: Real>(path: &Path) -> Result<Signal<T>> {
    let img = image::open(path)?;
    use image::ColorType::*;
    let (channels, raw): (usize, Vec<u8>) = match img.color() {
        L8 | La8 => (1, img.to_luma8().into_raw()),
        Rgb8 | Rgba8 => (3, img.to_rgb8().into_raw()),
        other => return Err(SignalError::Unsupported(format!("{other:?} images; only 8-bit channels are read"))),
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let targets: Vec<T> = raw.iter().map(|&b| T::from_f64_lossy(b as f64 / 255.0)).collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Signal {
        id,
        modality: Modality::Image,
        dims: vec![h, w],
        coords: make_grid(&[h, w], Modality::Image),
        targets: Tensor::new(vec![h * w, channels], targets).expect("image shape"),
    })
}

/// Writes `[height·width, channels]` values in `[0, 1]` as an 8-bit image;
/// the format follows the file extension.
pub fn save_image<T: Real>(path: &Path, values: &Tensor<T>, height: usize, width: usize) -> Result<()> {
    let channels = values.shape().get(1).copied().unwrap_or(1);
    if values.len() != height * width * channels {
        return Err(SignalError::Unsupported(format!(
            "{} values for a {height}x{width}x{channels} image",
            values.len()
        )));
    }
    let bytes: Vec<u8> = values
        .data()
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let (w, h) = (width as u32, height as u32);
    match channels {
        1 => image::GrayImage::from_raw(w, h, bytes).expect("buffer size").save(path)?,
        3 => image::RgbImage::from_raw(w, h, bytes).expect("buffer size").save(path)?,
        c => return Err(SignalError::Unsupported(format!("{c}-channel images"))),
    }
    Ok(())
}

/// Procedural dataset families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// RGB images made of a few oriented Gabor patches.
    GaborMix,
    /// Grayscale sums of plane waves.
    SineMix,
    /// Distance fields of unions of discs.
    BlobSdf,
    /// Smooth fields on the sphere.
    SphereField,
    /// Occupancy grids of unions of balls.
    VoxelShapes,
}

impl FromStr for SynthKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gabor_mix" => Ok(SynthKind::GaborMix),
            "sine_mix" => Ok(SynthKind::SineMix),
            "blob_sdf" => Ok(SynthKind::BlobSdf),
            "sphere_field" => Ok(SynthKind::SphereField),
            "voxel_shapes" => Ok(SynthKind::VoxelShapes),
            other => Err(format!("unknown dataset kind `{other}`")),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::GaborMix => "gabor_mix",
            SynthKind::SineMix => "sine_mix",
            SynthKind::BlobSdf => "blob_sdf",
            SynthKind::SphereField => "sphere_field",
            SynthKind::VoxelShapes => "voxel_shapes",
        })
    }
}

impl SynthKind {
    pub fn modality(self) -> Modality {
        match self {
            SynthKind::GaborMix | SynthKind::SineMix => Modality::Image,
            SynthKind::BlobSdf => Modality::Sdf,
            SynthKind::SphereField => Modality::Manifold,
            SynthKind::VoxelShapes => Modality::Voxel,
        }
    }

    pub fn out_dim(self) -> usize {
        match self {
            SynthKind::GaborMix => 3,
            _ => 1,
        }
    }

    /// Grid dimensionality the family is defined on.
    pub fn grid_rank(self) -> usize {
        match self {
            SynthKind::VoxelShapes => 3,
            _ => 2,
        }
    }
}

/// `n` signals of one family on a grid of `dims`. Deterministic per seed.
pub fn synth_dataset<T: Real>(kind: SynthKind, n: usize, dims: &[usize], seed: u64) -> Result<Vec<Signal<T>>> {
    if dims.len() != kind.grid_rank() || dims.contains(&0) {
        return Err(SignalError::Unsupported(format!("{kind} on grid {dims:?}")));
    }
    let modality = kind.modality();
    let coords: Tensor<T> = make_grid(dims, modality);
    let coords64: Tensor<f64> = coords.cast();
    let in_dim = coords.shape()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let field = Field::draw(kind, &mut rng);
            let out = kind.out_dim();
            let mut targets = Vec::with_capacity(coords.shape()[0] * out);
            for row in coords64.data().chunks(in_dim) {
                for v in field.eval(row, out) {
                    targets.push(T::from_f64_lossy(v.clamp(0.0, 1.0)));
                }
            }
            Ok(Signal {
                id: format!("{kind}-{seed}-{i}"),
                modality,
                dims: dims.to_vec(),
                coords: coords.clone(),
                targets: Tensor::new(vec![coords.shape()[0], out], targets).expect("target shape"),
            })
        })
        .collect()
}

struct Gabor {
    center: [f64; 2],
    dir: [f64; 2],
    freq: f64,
    sigma: f64,
    phase: f64,
    color: [f64; 3],
}

enum Field {
    Gabor { base: [f64; 3], patches: Vec<Gabor> },
    Sines { waves: Vec<([f64; 2], f64, f64, f64)> },
    Discs { discs: Vec<([f64; 2], f64)> },
    Sphere { bumps: Vec<([f64; 3], f64, f64)> },
    Balls { balls: Vec<([f64; 3], f64)> },
}

impl Field {
    fn draw(kind: SynthKind, rng: &mut ChaCha8Rng) -> Field {
        use std::f64::consts::PI;
        match kind {
            SynthKind::GaborMix => {
                let base = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
                let patches = (0..3)
                    .map(|_| {
                        let angle: f64 = rng.gen_range(0.0..PI);
                        Gabor {
                            center: [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)],
                            dir: [angle.cos(), angle.sin()],
                            freq: rng.gen_range(2.0..5.0),
                            sigma: rng.gen_range(0.25..0.5),
                            phase: rng.gen_range(0.0..2.0 * PI),
                            color: [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)],
                        }
                    })
                    .collect();
                Field::Gabor { base, patches }
            }
            SynthKind::SineMix => {
                let waves = (0..3)
                    .map(|_| {
                        let angle: f64 = rng.gen_range(0.0..2.0 * PI);
                        (
                            [angle.cos(), angle.sin()],
                            rng.gen_range(1.0..4.0),
                            rng.gen_range(0.0..2.0 * PI),
                            rng.gen_range(0.05..0.15),
                        )
                    })
                    .collect();
                Field::Sines { waves }
            }
            SynthKind::BlobSdf => {
                let k = rng.gen_range(2..=3);
                let discs = (0..k)
                    .map(|_| ([rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)], rng.gen_range(0.15..0.4)))
                    .collect();
                Field::Discs { discs }
            }
            SynthKind::SphereField => {
                let bumps = (0..4)
                    .map(|_| {
                        let z: f64 = rng.gen_range(-1.0..1.0);
                        let t: f64 = rng.gen_range(0.0..2.0 * PI);
                        let r = (1.0 - z * z).sqrt();
                        ([r * t.cos(), r * t.sin(), z], rng.gen_range(1.0..4.0), rng.gen_range(-0.25..0.25))
                    })
                    .collect();
                Field::Sphere { bumps }
            }
            SynthKind::VoxelShapes => {
                let k = rng.gen_range(1..=3);
                let balls = (0..k)
                    .map(|_| {
                        (
                            [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)],
                            rng.gen_range(0.1..0.3),
                        )
                    })
                    .collect();
                Field::Balls { balls }
            }
        }
    }

    fn eval(&self, x: &[f64], out: usize) -> Vec<f64> {
        match self {
            Field::Gabor { base, patches } => {
                let mut v = base[..out].to_vec();
                for p in patches {
                    let (dx, dy) = (x[0] - p.center[0], x[1] - p.center[1]);
                    let env = (-(dx * dx + dy * dy) / (2.0 * p.sigma * p.sigma)).exp();
                    let wave = (std::f64::consts::PI * p.freq * (dx * p.dir[0] + dy * p.dir[1]) + p.phase).cos();
                    for (c, vc) in v.iter_mut().enumerate() {
                        *vc += p.color[c] * env * wave;
                    }
                }
                v
            }
            Field::Sines { waves } => {
                let s: f64 = waves
                    .iter()
                    .map(|(d, f, ph, a)| a * (std::f64::consts::PI * f * (x[0] * d[0] + x[1] * d[1]) + ph).sin())
                    .sum();
                vec![0.5 + s]
            }
            Field::Discs { discs } => {
                let d = discs
                    .iter()
                    .map(|(c, r)| ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)).sqrt() - r)
                    .fold(f64::INFINITY, f64::min);
                vec![0.5 + 0.5 * d]
            }
            Field::Sphere { bumps } => {
                let s: f64 = bumps
                    .iter()
                    .map(|(mu, kappa, a)| {
                        let dot = x[0] * mu[0] + x[1] * mu[1] + x[2] * mu[2];
                        a * (kappa * (dot - 1.0)).exp()
                    })
                    .sum();
                vec![0.5 + 0.2 * x[2] + s]
            }
            Field::Balls { balls } => {
                let inside = balls.iter().any(|(c, r)| {
                    (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2) + (x[2] - c[2]).powi(2) <= r * r
                });
                vec![if inside { 1.0 } else { 0.0 }]
            }
        }
    }
}

fn format_dims(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_dims(s: &str) -> Option<Vec<usize>> {
    s.split('x').map(|p| p.trim().parse().ok()).collect()
}

/// Writes 2D signals as PNG files plus an `index.csv` manifest with columns
/// `id,path,modality,dims`.
pub fn write_manifest<T: Real>(dir: &Path, signals: &[Signal<T>]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = String::from("id,path,modality,dims\n");
    for s in signals {
        if s.dims.len() != 2 {
            return Err(SignalError::Unsupported(format!("{}-D signal {} in an image manifest", s.dims.len(), s.id)));
        }
        let file = format!("{}.png", s.id);
        save_image(&dir.join(&file), &s.targets, s.dims[0], s.dims[1])?;
        index.push_str(&format!("{},{},{},{}\n", s.id, file, s.modality, format_dims(&s.dims)));
    }
    std::fs::write(dir.join("index.csv"), index)?;
    Ok(())
}

/// Loads every signal listed in a manifest index file. Paths are relative to
/// the index file's directory.
pub fn read_manifest<T: Real>(index: &Path) -> Result<Vec<Signal<T>>> {
    let text = std::fs::read_to_string(index)?;
    let root = index.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| SignalError::Manifest {
            line: line_no + 1,
            reason: reason.to_string(),
        };
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 4 {
            return Err(bad("expected 4 columns"));
        }
        let modality: Modality = cols[2].parse().map_err(|e: String| bad(&e))?;
        let dims = parse_dims(cols[3]).ok_or_else(|| bad("bad dims"))?;
        let mut s: Signal<T> = load_image(&root.join(cols[1]))?;
        if s.dims != dims {
            return Err(bad(&format!("file has dims {:?}", s.dims)));
        }
        s.id = cols[0].to_string();
        s.modality = modality;
        s.coords = make_grid(&dims, modality);
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_grids() {
        let g: Tensor<f64> = make_grid(&[2, 2], Modality::Image);
        assert_eq!(g.data(), &[-1.0, -1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0]);
        let g: Tensor<f64> = make_grid(&[3], Modality::Image);
        assert_eq!(g.data(), &[-1.0, 0.0, 1.0]);
        let g: Tensor<f32> = make_grid(&[64, 64, 64], Modality::Voxel);
        assert_eq!(g.shape(), &[262_144, 3]);
        assert!(g.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(g, make_grid(&[64, 64, 64], Modality::Voxel));
    }

    #[test]
    fn sphere_coordinates() {
        let c: Tensor<f64> = era5_coords(181, 360);
        for row in c.data().chunks(3) {
            let n = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        // Equator row, first longitude: (1, 0, 0).
        let eq = 90 * 360;
        assert!((c.data()[eq * 3] - 1.0).abs() < 1e-15);
        assert!(c.data()[eq * 3 + 1].abs() < 1e-15 && c.data()[eq * 3 + 2].abs() < 1e-15);
        // North pole: (0, 0, 1) for every longitude.
        for j in 0..360 {
            let r = &c.data()[(180 * 360 + j) * 3..][..3];
            assert!(r[0].abs() < 1e-15 && r[1].abs() < 1e-15 && (r[2] - 1.0).abs() < 1e-15);
        }
        // Last longitude is 2π·359/360.
        let last = &c.data()[(eq + 359) * 3..][..2];
        let phi = last[1].atan2(last[0]).rem_euclid(2.0 * std::f64::consts::PI);
        assert!((phi - 2.0 * std::f64::consts::PI * 359.0 / 360.0).abs() < 1e-12);
    }

    #[test]
    fn synthetic_sets_are_valid_and_seeded() {
        for (kind, dims) in [
            (SynthKind::GaborMix, vec![8, 8]),
            (SynthKind::SineMix, vec![8, 8]),
            (SynthKind::BlobSdf, vec![8, 8]),
            (SynthKind::SphereField, vec![6, 12]),
            (SynthKind::VoxelShapes, vec![6, 6, 6]),
        ] {
            let a = synth_dataset::<f64>(kind, 3, &dims, 1).unwrap();
            for s in &a {
                s.validate().unwrap();
                assert_eq!(s.modality, kind.modality());
                assert_eq!(s.out_dim(), kind.out_dim());
            }
            assert_eq!(a, synth_dataset::<f64>(kind, 3, &dims, 1).unwrap());
        }
        assert!(synth_dataset::<f64>(SynthKind::GaborMix, 1, &[8], 1).is_err());
    }

    #[test]
    fn different_seeds_differ() {
        let a = synth_dataset::<f64>(SynthKind::GaborMix, 4, &[16, 16], 1).unwrap();
        let b = synth_dataset::<f64>(SynthKind::GaborMix, 4, &[16, 16], 2).unwrap();
        let mut total = 0.0;
        for x in &a {
            for y in &b {
                total += crate::inr::mean_squared_error(&x.targets, &y.targets).unwrap();
            }
        }
        assert!(total / 16.0 > 0.0);
    }

    #[test]
    fn validation_catches_violations() {
        let mut s = synth_dataset::<f64>(SynthKind::SineMix, 1, &[4, 4], 0).unwrap().remove(0);
        s.targets.data_mut()[0] = 1.5;
        assert!(s.validate().is_err());
        let mut s = synth_dataset::<f64>(SynthKind::SineMix, 1, &[4, 4], 0).unwrap().remove(0);
        s.dims = vec![4, 5];
        assert!(s.validate().is_err());
    }

    #[test]
    fn image_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let black = dir.path().join("black.pgm");
        save_image(&black, &Tensor::<f64>::zeros(vec![16, 1]), 4, 4).unwrap();
        let s: Signal<f64> = load_image(&black).unwrap();
        assert_eq!(s.out_dim(), 1);
        assert!(s.targets.data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bytes: Vec<f64> = (0..5 * 7 * 3).map(|_| rng.gen_range(0..=255u8) as f64 / 255.0).collect();
        let t = Tensor::new(vec![35, 3], bytes).unwrap();
        for ext in ["png", "ppm"] {
            let p = dir.path().join(format!("rgb.{ext}"));
            save_image(&p, &t, 5, 7).unwrap();
            let back: Signal<f64> = load_image(&p).unwrap();
            assert_eq!(back.dims, vec![5, 7]);
            assert_eq!(back.out_dim(), 3);
            assert_eq!(back.targets, t);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = synth_dataset::<f64>(SynthKind::GaborMix, 2, &[6, 6], 4).unwrap();
        write_manifest(dir.path(), &set).unwrap();
        let back: Vec<Signal<f64>> = read_manifest(&dir.path().join("index.csv")).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in set.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.coords, b.coords);
            for (x, y) in a.targets.data().iter().zip(b.targets.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }
}
