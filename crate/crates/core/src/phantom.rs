//! Synthetic ground truth: Shepp-Logan, random ellipse phantoms and paired
//! datasets.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Error, Result};
use crate::io;
use crate::projector::{forward_project, Grid, Image, ProjectionGeometry, Sinogram};
use crate::sampling::{apply_mask, fbp_acquired, limited_angle_mask, sparse_view_mask, ViewMask};

/// Ellipse in normalized coordinates (`[-1, 1]^2`, `y` up).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseSpec {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub rotation_deg: f64,
    /// Added to every point inside; may be negative.
    pub intensity: f64,
}

impl EllipseSpec {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.semi_axes;
        if !(a > 0.0 && a <= 1.0 && b > 0.0 && b <= 1.0) {
            return config_err(format!("semi-axes ({a}, {b}) outside (0, 1]"));
        }
        let (cx, cy) = self.center;
        if (cx * cx + cy * cy).sqrt() + a.max(b) > 1.0 + 1e-12 {
            return config_err(format!("ellipse at ({cx}, {cy}) leaves the unit disk"));
        }
        Ok(())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (sin, cos) = signed_sin_cos(self.rotation_deg);
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        let (a, b) = self.semi_axes;
        (u * u) / (a * a) + (v * v) / (b * b) <= 1.0
    }
}

/// sin/cos with `sin(-t) == -sin(t)` bit-exactly, so mirrored ellipses
/// rasterize to mirrored pixels.
fn signed_sin_cos(deg: f64) -> (f64, f64) {
    let (s, c) = deg.abs().to_radians().sin_cos();
    (s.copysign(deg), c)
}

/// Normalized coordinate of pixel `(row, col)` centre on an `n x n` grid.
fn pixel_coords(n: usize, row: usize, col: usize) -> (f64, f64) {
    let nf = n as f64;
    let x = (2.0 * col as f64 - (nf - 1.0)) / nf;
    let y = ((nf - 1.0) - 2.0 * row as f64) / nf;
    (x, y)
}

/// Sum of ellipse intensities at each pixel centre.
pub fn rasterize(n: usize, ellipses: &[EllipseSpec]) -> Vec<f64> {
    let mut data = vec![0.0; n * n];
    for row in 0..n {
        for col in 0..n {
            let (x, y) = pixel_coords(n, row, col);
            data[row * n + col] = ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.intensity).sum();
        }
    }
    data
}

/// Subsamples per pixel side used when rasterizing [`shepp_logan`].
pub const SHEPP_LOGAN_SUPERSAMPLE: usize = 4;

/// Area-averaged rasterization: each pixel is the mean of an `s x s`
/// lattice of point samples.
pub fn rasterize_supersampled(n: usize, ellipses: &[EllipseSpec], s: usize) -> Vec<f64> {
    let s = s.max(1);
    let fine = rasterize(n * s, ellipses);
    let mut data = vec![0.0; n * n];
    let weight = 1.0 / (s * s) as f64;
    for row in 0..n {
        for col in 0..n {
            let mut acc = 0.0;
            for r in row * s..(row + 1) * s {
                acc += fine[r * n * s + col * s..r * n * s + (col + 1) * s].iter().sum::<f64>();
            }
            data[row * n + col] = acc * weight;
        }
    }
    data
}

/// The original ten-ellipse head phantom.
pub fn shepp_logan_ellipses() -> Vec<EllipseSpec> {
    #[rustfmt::skip]
    let table: [(f64, f64, f64, f64, f64, f64); 10] = [
        // intensity, a, b, x0, y0, rotation
        ( 2.00, 0.69,   0.92,    0.0,   0.0,    0.0),
        (-0.98, 0.6624, 0.8740,  0.0,  -0.0184, 0.0),
        (-0.02, 0.1100, 0.3100,  0.22,  0.0,  -18.0),
        (-0.02, 0.1600, 0.4100, -0.22,  0.0,   18.0),
        ( 0.01, 0.2100, 0.2500,  0.0,   0.35,   0.0),
        ( 0.01, 0.0460, 0.0460,  0.0,   0.1,    0.0),
        ( 0.01, 0.0460, 0.0460,  0.0,  -0.1,    0.0),
        ( 0.01, 0.0460, 0.0230, -0.08, -0.605,  0.0),
        ( 0.01, 0.0230, 0.0230,  0.0,  -0.606,  0.0),
        ( 0.01, 0.0230, 0.0460,  0.06, -0.605,  0.0),
    ];
    table
        .iter()
        .map(|&(intensity, a, b, x0, y0, rot)| EllipseSpec {
            center: (x0, y0),
            semi_axes: (a, b),
            rotation_deg: rot,
            intensity,
        })
        .collect()
}

/// Shepp-Logan phantom on an `n x n` grid, area-averaged over
/// [`SHEPP_LOGAN_SUPERSAMPLE`] subsamples per side and rescaled to `[0, 1]`.
pub fn shepp_logan(n: usize) -> Result<Image> {
    if n < 32 {
        return config_err(format!("phantom grid must be at least 32, got {n}"));
    }
    let mut data = rasterize_supersampled(n, &shepp_logan_ellipses(), SHEPP_LOGAN_SUPERSAMPLE);
    normalize_unit(&mut data);
    Image::from_data(Grid::square(n)?, data)
}

fn normalize_unit(data: &mut [f64]) {
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        data.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    }
}

/// Ranges for [`random_phantom_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct RandomPhantomParams {
    pub body_radius: f64,
    pub body_intensity: f64,
    pub min_ellipses: usize,
    pub max_ellipses: usize,
    pub center_radius: f64,
    pub semi_axis_range: (f64, f64),
    pub intensity_range: (f64, f64),
}

impl Default for RandomPhantomParams {
    fn default() -> Self {
        Self {
            body_radius: 0.9,
            body_intensity: 0.2,
            min_ellipses: 3,
            max_ellipses: 8,
            center_radius: 0.6,
            semi_axis_range: (0.05, 0.4),
            intensity_range: (-0.3, 0.5),
        }
    }
}

pub fn random_phantom(n: usize, seed: u64) -> Result<Image> {
    random_phantom_with(n, seed, &RandomPhantomParams::default())
}

/// A body disk with random soft-contrast ellipses, clipped to `[0, 1]`.
/// Everything outside the body disk is exactly zero.
pub fn random_phantom_with(n: usize, seed: u64, p: &RandomPhantomParams) -> Result<Image> {
    if n < 32 {
        return config_err(format!("phantom grid must be at least 32, got {n}"));
    }
    if p.min_ellipses > p.max_ellipses || p.semi_axis_range.0 > p.semi_axis_range.1 {
        return config_err("empty random phantom range");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(p.min_ellipses..=p.max_ellipses);
    let mut ellipses = Vec::with_capacity(count);
    for _ in 0..count {
        let r = p.center_radius * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let e = EllipseSpec {
            center: (r * phi.cos(), r * phi.sin()),
            semi_axes: (
                rng.random_range(p.semi_axis_range.0..=p.semi_axis_range.1),
                rng.random_range(p.semi_axis_range.0..=p.semi_axis_range.1),
            ),
            rotation_deg: rng.random_range(0.0..180.0),
            intensity: rng.random_range(p.intensity_range.0..=p.intensity_range.1),
        };
        e.validate()?;
        ellipses.push(e);
    }
    let mut data = rasterize(n, &ellipses);
    for row in 0..n {
        for col in 0..n {
            let (x, y) = pixel_coords(n, row, col);
            let v = &mut data[row * n + col];
            *v = if x * x + y * y <= p.body_radius * p.body_radius {
                (p.body_intensity + *v).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
    Image::from_data(Grid::square(n)?, data)
}

/// How the acquired views are chosen from the full scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    SparseView { keep: usize },
    LimitedAngle { max_deg: f64 },
}

impl Sampling {
    pub fn mask(&self, geometry: &ProjectionGeometry) -> Result<ViewMask> {
        match *self {
            Sampling::SparseView { keep } => sparse_view_mask(geometry.n_views(), keep),
            Sampling::LimitedAngle { max_deg } => {
                limited_angle_mask(geometry.n_views(), max_deg, geometry.angles_deg())
            }
        }
    }
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sampling::SparseView { keep } => write!(f, "sparse-view {keep}"),
            Sampling::LimitedAngle { max_deg } => write!(f, "limited-angle {max_deg}"),
        }
    }
}

impl FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad sampling description {s:?}"));
        let (kind, value) = s.split_once(' ').ok_or_else(bad)?;
        match kind {
            "sparse-view" => Ok(Sampling::SparseView {
                keep: value.trim().parse().map_err(|_| bad())?,
            }),
            "limited-angle" => Ok(Sampling::LimitedAngle {
                max_deg: value.trim().parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub grid_size: usize,
    pub n_views: usize,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            n_train: 128,
            n_val: 16,
            n_test: 32,
            grid_size: 64,
            n_views: 60,
            sampling: Sampling::SparseView { keep: 10 },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return config_err("every split needs at least one sample");
        }
        self.geometry()?;
        self.mask()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::square(self.grid_size)
    }

    pub fn geometry(&self) -> Result<ProjectionGeometry> {
        ProjectionGeometry::uniform(self.n_views, &self.grid()?)
    }

    pub fn mask(&self) -> Result<ViewMask> {
        self.sampling.mask(&self.geometry()?)
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    /// Phantom seed of sample `index` in `split`; unique across splits.
    pub fn sample_seed(&self, split: Split, index: usize) -> u64 {
        let offset = match split {
            Split::Train => 0,
            Split::Val => self.n_train,
            Split::Test => self.n_train + self.n_val,
        };
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((offset + index) as u64)
    }

    pub fn to_text(&self) -> Result<String> {
        let geom = self.geometry()?;
        Ok(format!(
            "format=limview-dataset-1\n\
             grid={}\n\
             views={}\n\
             detectors={}\n\
             sampling={}\n\
             mask={}\n\
             seed={}\n\
             n_train={}\n\
             n_val={}\n\
             n_test={}\n",
            self.grid_size,
            self.n_views,
            geom.n_detectors(),
            self.sampling,
            self.mask()?.to_line(),
            self.seed,
            self.n_train,
            self.n_val,
            self.n_test
        ))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line without '=': {line:?}")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| Error::Format(format!("manifest is missing {k:?}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("manifest field {k:?} is not a number")))
        };
        if get("format")? != "limview-dataset-1" {
            return Err(Error::Format("unsupported manifest format".into()));
        }
        let m = Self {
            n_train: num("n_train")? as usize,
            n_val: num("n_val")? as usize,
            n_test: num("n_test")? as usize,
            grid_size: num("grid")? as usize,
            n_views: num("views")? as usize,
            sampling: get("sampling")?.parse()?,
            seed: num("seed")?,
        };
        m.validate()?;
        Ok(m)
    }
}

/// One paired example: ground truth, its full and masked sinograms, and the
/// FBP of the masked sinogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub gt: Image,
    pub sino: Sinogram,
    pub sinou: Sinogram,
    pub fbpu: Image,
}

/// Runs the acquisition pipeline on a ground-truth image. The image is
/// rounded to single precision first so stored files reproduce exactly.
pub fn make_sample(gt: Image, geometry: &ProjectionGeometry, mask: &ViewMask) -> Result<Sample> {
    let mut gt = gt;
    gt.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    let sino = forward_project(&gt, geometry)?;
    let sinou = apply_mask(&sino, mask)?;
    let fbpu = fbp_acquired(&sino, mask, &gt.grid)?;
    Ok(Sample { gt, sino, sinou, fbpu })
}

pub fn sample_path(dir: &Path, split: Split, index: usize, kind: &str) -> PathBuf {
    dir.join(split.dir_name()).join(format!("{index:04}.{kind}.bin"))
}

pub const SAMPLE_KINDS: [&str; 4] = ["gt", "sino", "sinou", "fbpu"];

/// Writes `manifest.txt` and four files per sample under `out_dir`.
pub fn generate_dataset(manifest: &DatasetManifest, out_dir: &Path) -> Result<DatasetManifest> {
    manifest.validate()?;
    let geometry = manifest.geometry()?;
    let mask = manifest.mask()?;
    fs::create_dir_all(out_dir)?;
    for split in Split::ALL {
        fs::create_dir_all(out_dir.join(split.dir_name()))?;
        for i in 0..manifest.count(split) {
            let gt = random_phantom(manifest.grid_size, manifest.sample_seed(split, i))?;
            let s = make_sample(gt, &geometry, &mask)?;
            io::save_image(&sample_path(out_dir, split, i, "gt"), &s.gt)?;
            io::save_sinogram(&sample_path(out_dir, split, i, "sino"), &s.sino)?;
            io::save_sinogram(&sample_path(out_dir, split, i, "sinou"), &s.sinou)?;
            io::save_image(&sample_path(out_dir, split, i, "fbpu"), &s.fbpu)?;
        }
    }
    fs::write(out_dir.join("manifest.txt"), manifest.to_text()?)?;
    Ok(manifest.clone())
}

/// A dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::from_text(&fs::read_to_string(dir.join("manifest.txt"))?)?;
        let geometry = manifest.geometry()?;
        let load_split = |split: Split| -> Result<Vec<Sample>> {
            (0..manifest.count(split))
                .map(|i| {
                    Ok(Sample {
                        gt: io::load_image(&sample_path(dir, split, i, "gt"))?,
                        sino: io::load_sinogram_with(&sample_path(dir, split, i, "sino"), &geometry)?,
                        sinou: io::load_sinogram_with(&sample_path(dir, split, i, "sinou"), &geometry)?,
                        fbpu: io::load_image(&sample_path(dir, split, i, "fbpu"))?,
                    })
                })
                .collect()
        };
        Ok(Self {
            train: load_split(Split::Train)?,
            val: load_split(Split::Val)?,
            test: load_split(Split::Test)?,
            manifest,
        })
    }

    /// Builds the dataset in memory without touching the filesystem. Sample
    /// values match what [`generate_dataset`] writes after f32 storage.
    pub fn synthesize(manifest: &DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        let geometry = manifest.geometry()?;
        let mask = manifest.mask()?;
        let make = |split: Split| -> Result<Vec<Sample>> {
            (0..manifest.count(split))
                .map(|i| {
                    let gt = random_phantom(manifest.grid_size, manifest.sample_seed(split, i))?;
                    let mut s = make_sample(gt, &geometry, &mask)?;
                    for v in s
                        .sino
                        .data
                        .iter_mut()
                        .chain(s.sinou.data.iter_mut())
                        .chain(s.fbpu.data.iter_mut())
                    {
                        *v = *v as f32 as f64;
                    }
                    Ok(s)
                })
                .collect()
        };
        Ok(Self {
            train: make(Split::Train)?,
            val: make(Split::Val)?,
            test: make(Split::Test)?,
            manifest: manifest.clone(),
        })
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shepp_logan_centre_and_range() {
        let img = shepp_logan(128).unwrap();
        // Analytic value at the origin: the sum of intensities of the
        // ellipses containing (0, 0), rescaled by the [0, 1] normalization
        // (raw min 0, raw max 2). The centre pixel lies in a flat region.
        let analytic: f64 = shepp_logan_ellipses()
            .iter()
            .filter(|e| e.contains(0.0, 0.0))
            .map(|e| e.intensity)
            .sum::<f64>()
            / 2.0;
        assert!((analytic - 0.51).abs() < 1e-12);
        let centre = img.get(64, 64);
        assert!((centre - analytic).abs() < 1e-12);
        assert!(centre > 0.0 && centre < 1.0);
        let lo = img.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = img.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
        assert!(shepp_logan(16).is_err());
    }

    #[test]
    fn shepp_logan_mirror_symmetry() {
        let n = 128;
        let img = shepp_logan(n).unwrap();
        // The two side ellipses differ in size and the three small features
        // near y = -0.605 are not mirror images; every pixel clear of them
        // (and of its mirror) matches its mirror.
        let table = shepp_logan_ellipses();
        let asym: Vec<&EllipseSpec> = [2, 3, 7, 8, 9].iter().map(|&i| &table[i]).collect();
        let s = SHEPP_LOGAN_SUPERSAMPLE;
        let touches = |row: usize, col: usize| {
            (row * s..(row + 1) * s).any(|r| {
                (col * s..(col + 1) * s).any(|c| {
                    let (x, y) = pixel_coords(n * s, r, c);
                    asym.iter().any(|e| e.contains(x, y) || e.contains(-x, y))
                })
            })
        };
        let mut checked = 0;
        for row in 0..n {
            for col in 0..n {
                if touches(row, col) {
                    continue;
                }
                checked += 1;
                assert!((img.get(row, col) - img.get(row, n - 1 - col)).abs() <= 1e-12);
            }
        }
        assert!(checked > n * n * 3 / 4);
    }

    #[test]
    fn random_phantom_contract() {
        let a = random_phantom(64, 11).unwrap();
        let b = random_phantom(64, 11).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        for row in 0..64 {
            for col in 0..64 {
                let (x, y) = pixel_coords(64, row, col);
                let v = a.get(row, col);
                assert!((0.0..=1.0).contains(&v));
                if x * x + y * y > 0.81 {
                    assert_eq!(v, 0.0);
                }
            }
        }
        let c = random_phantom(64, 12).unwrap();
        let differing = a.data.iter().zip(&c.data).filter(|(x, y)| x != y).count();
        assert!(differing * 100 >= a.data.len(), "{differing}");
    }

    #[test]
    fn ellipse_validation() {
        let e = EllipseSpec {
            center: (0.7, 0.0),
            semi_axes: (0.4, 0.1),
            rotation_deg: 0.0,
            intensity: 1.0,
        };
        assert!(e.validate().is_err());
        let e = EllipseSpec { semi_axes: (0.0, 0.1), center: (0.0, 0.0), ..e };
        assert!(e.validate().is_err());
        for e in shepp_logan_ellipses() {
            e.validate().unwrap();
        }
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = DatasetManifest {
            sampling: Sampling::LimitedAngle { max_deg: 120.0 },
            seed: 42,
            ..DatasetManifest::default()
        };
        let text = m.to_text().unwrap();
        assert!(text.contains("mask=LimitedAngle 60 0,1,2"));
        assert_eq!(DatasetManifest::from_text(&text).unwrap(), m);
        assert!(DatasetManifest::from_text("format=other\n").is_err());
        let bad = DatasetManifest { n_val: 0, ..m };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sample_seeds_are_distinct() {
        let m = DatasetManifest::default();
        let mut seeds: Vec<u64> = Split::ALL
            .iter()
            .flat_map(|&s| (0..m.count(s)).map(move |i| (s, i)))
            .map(|(s, i)| m.sample_seed(s, i))
            .collect();
        let n = seeds.len();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), n);
    }
}
