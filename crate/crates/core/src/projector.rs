//! Parallel-beam projection operators.
//!
//! The forward projector is ray driven: each detector bin integrates the
//! bilinear interpolant of the image along its ray with a midpoint rule at
//! half-pixel steps. Back projection is the exact transpose of that
//! discretization, so the pair passes dot-product tests to round-off.
//!
//! Coordinates: the image centre is the origin, `x` grows with the column
//! index and `y` grows upwards (row 0 is the top row). A view at angle `a`
//! integrates along the lines `x cos a + y sin a = d`.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{config_err, shape_err, Result};

/// Square pixel grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub pixel_size: f64,
}

impl Grid {
    /// Square `n x n` grid with unit pixels.
    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n, 1.0)
    }

    pub fn new(nx: usize, ny: usize, pixel_size: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return config_err(format!("grid must be at least 2x2, got {nx}x{ny}"));
        }
        if nx != ny {
            return config_err(format!("only square grids are supported, got {nx}x{ny}"));
        }
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return config_err(format!("pixel size must be positive, got {pixel_size}"));
        }
        Ok(Self { nx, ny, pixel_size })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Length of the grid diagonal in pixels.
    pub fn diagonal_pixels(&self) -> f64 {
        ((self.nx * self.nx + self.ny * self.ny) as f64).sqrt()
    }

    /// Smallest even detector count covering the grid diagonal.
    pub fn default_detector_count(&self) -> usize {
        let n = (std::f64::consts::SQRT_2 * self.nx as f64).ceil() as usize;
        n + n % 2
    }
}

/// Angles and detector layout of a parallel-beam scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGeometry {
    angles_deg: Vec<f64>,
    n_detectors: usize,
    detector_spacing: f64,
    /// View count of the full scan this geometry belongs to. Sets the FBP
    /// normalization, which stays fixed for sub-sampled scans.
    full_scan_views: usize,
}

impl ProjectionGeometry {
    pub fn new(angles_deg: Vec<f64>, n_detectors: usize, detector_spacing: f64) -> Result<Self> {
        let full = angles_deg.len();
        Self::with_full_scan(angles_deg, n_detectors, detector_spacing, full)
    }

    pub fn with_full_scan(
        angles_deg: Vec<f64>,
        n_detectors: usize,
        detector_spacing: f64,
        full_scan_views: usize,
    ) -> Result<Self> {
        if angles_deg.is_empty() {
            return config_err("geometry needs at least one view");
        }
        if let Some(a) = angles_deg.iter().find(|a| !(**a >= 0.0 && **a < 180.0)) {
            return config_err(format!("angle {a} outside [0, 180)"));
        }
        if angles_deg.windows(2).any(|w| w[1] <= w[0]) {
            return config_err("angles must be strictly increasing");
        }
        if n_detectors == 0 {
            return config_err("detector count must be positive");
        }
        if !(detector_spacing > 0.0 && detector_spacing.is_finite()) {
            return config_err(format!("detector spacing must be positive, got {detector_spacing}"));
        }
        if full_scan_views < angles_deg.len() {
            return config_err("full scan view count smaller than the number of angles");
        }
        Ok(Self {
            angles_deg,
            n_detectors,
            detector_spacing,
            full_scan_views,
        })
    }

    /// `n_views` angles uniformly covering [0, 180) with the default detector
    /// layout for `grid`.
    pub fn uniform(n_views: usize, grid: &Grid) -> Result<Self> {
        if n_views == 0 {
            return config_err("view count must be positive");
        }
        let angles = uniform_angles(n_views);
        Self::new(angles, grid.default_detector_count(), grid.pixel_size)
    }

    /// Geometry restricted to the given view indices; keeps the full-scan
    /// normalization.
    pub fn subset(&self, views: &[usize]) -> Result<Self> {
        if let Some(&v) = views.iter().find(|&&v| v >= self.n_views()) {
            return config_err(format!("view index {v} out of range"));
        }
        let angles = views.iter().map(|&v| self.angles_deg[v]).collect();
        Self::with_full_scan(angles, self.n_detectors, self.detector_spacing, self.full_scan_views)
    }

    /// Geometry of only the given views, normalized as a scan in its own
    /// right.
    pub fn acquired(&self, views: &[usize]) -> Result<Self> {
        let sub = self.subset(views)?;
        Self::new(sub.angles_deg, sub.n_detectors, sub.detector_spacing)
    }

    pub fn angles_deg(&self) -> &[f64] {
        &self.angles_deg
    }

    pub fn n_views(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn detector_spacing(&self) -> f64 {
        self.detector_spacing
    }

    pub fn full_scan_views(&self) -> usize {
        self.full_scan_views
    }

    /// Signed offset of detector bin `k` from the rotation centre.
    pub fn detector_offset(&self, k: usize) -> f64 {
        (k as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.detector_spacing
    }

    pub fn check_covers(&self, grid: &Grid) -> Result<()> {
        let span = self.n_detectors as f64 * self.detector_spacing;
        let diag = grid.diagonal_pixels() * grid.pixel_size;
        if span + 1e-9 < diag {
            return config_err(format!(
                "detector span {span} shorter than grid diagonal {diag}"
            ));
        }
        Ok(())
    }
}

pub fn uniform_angles(n_views: usize) -> Vec<f64> {
    (0..n_views).map(|i| 180.0 * i as f64 / n_views as f64).collect()
}

/// Row-major `(ny, nx)` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub grid: Grid,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            data: vec![0.0; grid.len()],
            grid,
        }
    }

    pub fn from_data(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return shape_err(format!(
                "image data has {} values, grid needs {}",
                data.len(),
                grid.len()
            ));
        }
        Ok(Self { grid, data })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.grid.nx + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.grid.nx + col] = v;
    }

    pub fn dot(&self, other: &Image) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// Row-major `(n_views, n_detectors)` sinogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub geometry: ProjectionGeometry,
    pub data: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(geometry: ProjectionGeometry) -> Self {
        Self {
            data: vec![0.0; geometry.n_views() * geometry.n_detectors()],
            geometry,
        }
    }

    pub fn from_data(geometry: ProjectionGeometry, data: Vec<f64>) -> Result<Self> {
        let want = geometry.n_views() * geometry.n_detectors();
        if data.len() != want {
            return shape_err(format!("sinogram data has {} values, geometry needs {want}", data.len()));
        }
        Ok(Self { geometry, data })
    }

    pub fn n_views(&self) -> usize {
        self.geometry.n_views()
    }

    pub fn n_detectors(&self) -> usize {
        self.geometry.n_detectors()
    }

    pub fn view(&self, i: usize) -> &[f64] {
        let nd = self.n_detectors();
        &self.data[i * nd..(i + 1) * nd]
    }

    pub fn view_mut(&mut self, i: usize) -> &mut [f64] {
        let nd = self.n_detectors();
        &mut self.data[i * nd..(i + 1) * nd]
    }

    pub fn dot(&self, other: &Sinogram) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sample layout shared by the forward projector and its transpose.
struct RayTracer {
    nx: usize,
    ny: usize,
    inv_pixel: f64,
    cx: f64,
    cy: f64,
    step: f64,
    t0: f64,
    n_samples: usize,
    radius_sq: f64,
}

impl RayTracer {
    fn new(grid: &Grid) -> Self {
        let ps = grid.pixel_size;
        let step = 0.5 * ps;
        // One extra pixel past the half diagonal keeps the bilinear footprint
        // of corner pixels inside the sampled segment.
        let radius = (grid.diagonal_pixels() / 2.0 + 1.0) * ps;
        let half = (radius / step).ceil() as usize;
        let n_samples = 2 * half;
        Self {
            nx: grid.nx,
            ny: grid.ny,
            inv_pixel: 1.0 / ps,
            cx: (grid.nx as f64 - 1.0) / 2.0,
            cy: (grid.ny as f64 - 1.0) / 2.0,
            step,
            t0: -(half as f64) * step + 0.5 * step,
            n_samples,
            radius_sq: radius * radius,
        }
    }

    /// Calls `visit(pixel_index, weight)` for every bilinear tap of every
    /// sample on the ray `x cos + y sin = d`. Weights include the step length.
    #[inline]
    fn trace(&self, cos: f64, sin: f64, d: f64, mut visit: impl FnMut(usize, f64)) {
        let rem = self.radius_sq - d * d;
        if rem <= 0.0 {
            return;
        }
        let t_max = rem.sqrt();
        let first = (((-t_max - self.t0) / self.step).floor().max(0.0)) as usize;
        let last = ((((t_max - self.t0) / self.step).ceil()) as usize).min(self.n_samples);
        let (px, py) = (d * cos, d * sin);
        for j in first..last {
            let t = self.t0 + j as f64 * self.step;
            let x = px - t * sin;
            let y = py + t * cos;
            let fx = x * self.inv_pixel + self.cx;
            let fy = self.cy - y * self.inv_pixel;
            let x0 = fx.floor();
            let y0 = fy.floor();
            let wx = fx - x0;
            let wy = fy - y0;
            let (ix, iy) = (x0 as isize, y0 as isize);
            if ix < -1 || iy < -1 || ix >= self.nx as isize || iy >= self.ny as isize {
                continue;
            }
            let taps = [
                (iy, ix, (1.0 - wy) * (1.0 - wx)),
                (iy, ix + 1, (1.0 - wy) * wx),
                (iy + 1, ix, wy * (1.0 - wx)),
                (iy + 1, ix + 1, wy * wx),
            ];
            for (r, c, w) in taps {
                if r >= 0 && c >= 0 && (r as usize) < self.ny && (c as usize) < self.nx {
                    visit(r as usize * self.nx + c as usize, w * self.step);
                }
            }
        }
    }
}

fn check_grid_geometry(grid: &Grid, geom: &ProjectionGeometry) -> Result<()> {
    if grid.nx != grid.ny {
        return config_err("image grid must be square");
    }
    geom.check_covers(grid)
}

/// Discrete line integrals of `img` for every (view, detector) pair.
pub fn forward_project(img: &Image, geom: &ProjectionGeometry) -> Result<Sinogram> {
    check_grid_geometry(&img.grid, geom)?;
    let tracer = RayTracer::new(&img.grid);
    let mut sino = Sinogram::zeros(geom.clone());
    let nd = geom.n_detectors();
    for (v, &angle) in geom.angles_deg().iter().enumerate() {
        let (sin, cos) = angle.to_radians().sin_cos();
        let row = &mut sino.data[v * nd..(v + 1) * nd];
        for (k, out) in row.iter_mut().enumerate() {
            let d = geom.detector_offset(k);
            let mut acc = 0.0;
            tracer.trace(cos, sin, d, |idx, w| acc += w * img.data[idx]);
            *out = acc;
        }
    }
    Ok(sino)
}

/// Transpose of [`forward_project`].
pub fn back_project(sino: &Sinogram, grid: &Grid) -> Result<Image> {
    let geom = &sino.geometry;
    check_grid_geometry(grid, geom)?;
    if sino.data.len() != geom.n_views() * geom.n_detectors() {
        return shape_err("sinogram data does not match its geometry");
    }
    let tracer = RayTracer::new(grid);
    let mut img = Image::zeros(*grid);
    for (v, &angle) in geom.angles_deg().iter().enumerate() {
        let (sin, cos) = angle.to_radians().sin_cos();
        for (k, &val) in sino.view(v).iter().enumerate() {
            if val == 0.0 {
                continue;
            }
            let d = geom.detector_offset(k);
            tracer.trace(cos, sin, d, |idx, w| img.data[idx] += w * val);
        }
    }
    Ok(img)
}

/// Ram-Lak ramp filter applied per view row in the frequency domain.
pub struct RampFilter {
    n_detectors: usize,
    padded: usize,
    response: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl RampFilter {
    pub fn new(n_detectors: usize, detector_spacing: f64) -> Self {
        let padded = (2 * n_detectors).next_power_of_two();
        // Ram-Lak kernel defined on the detector grid (1/4 at zero, -1/(pi n)^2
        // at odd offsets), transformed to the frequency domain. Its response
        // tracks 2|f| (1 at Nyquist) without zeroing the low-frequency bin
        // that the padded row's finite support leaks into.
        let mut planner = FftPlanner::new();
        let mut kernel: Vec<Complex<f64>> = (0..padded)
            .map(|i| {
                let n = if i <= padded / 2 { i } else { padded - i };
                let v = if n == 0 {
                    0.25
                } else if n % 2 == 1 {
                    -1.0 / (PI * n as f64).powi(2)
                } else {
                    0.0
                };
                Complex::new(v, 0.0)
            })
            .collect();
        planner.plan_fft_forward(padded).process(&mut kernel);
        let response = kernel.iter().map(|c| 2.0 * c.re / detector_spacing).collect();
        let mut planner = FftPlanner::new();
        Self {
            n_detectors,
            padded,
            response,
            fft: planner.plan_fft_forward(padded),
            ifft: planner.plan_fft_inverse(padded),
        }
    }

    pub fn padded_len(&self) -> usize {
        self.padded
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    /// Filters one row in place.
    pub fn apply_row(&self, row: &mut [f64]) {
        debug_assert_eq!(row.len(), self.n_detectors);
        let mut buf: Vec<Complex<f64>> = row
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(self.padded)
            .collect();
        self.fft.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(&self.response) {
            *b *= *h;
        }
        self.ifft.process(&mut buf);
        let scale = 1.0 / self.padded as f64;
        for (out, b) in row.iter_mut().zip(&buf) {
            *out = b.re * scale;
        }
    }

    /// Filters a zero-padded row and returns the full padded-length output.
    pub fn apply_padded(&self, row: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = row
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(self.padded)
            .collect();
        self.fft.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(&self.response) {
            *b *= *h;
        }
        self.ifft.process(&mut buf);
        buf.iter().map(|b| b.re / self.padded as f64).collect()
    }
}

pub fn ramp_filter(sino: &Sinogram) -> Sinogram {
    let filter = RampFilter::new(sino.n_detectors(), sino.geometry.detector_spacing());
    let mut out = sino.clone();
    let nd = sino.n_detectors();
    for row in out.data.chunks_mut(nd) {
        filter.apply_row(row);
    }
    out
}

/// FBP scale `pi / (2 M ps)`, with `M` the full-scan view count.
pub fn fbp_scale(geom: &ProjectionGeometry, grid: &Grid) -> f64 {
    PI / (2.0 * geom.full_scan_views() as f64 * grid.pixel_size)
}

/// Filtered back projection.
pub fn fbp(sino: &Sinogram, grid: &Grid) -> Result<Image> {
    let filtered = ramp_filter(sino);
    let mut img = back_project(&filtered, grid)?;
    let c = fbp_scale(&sino.geometry, grid);
    img.data.iter_mut().for_each(|v| *v *= c);
    Ok(img)
}

/// Adjoint of [`fbp`]: `c * ramp(forward_project(img))`.
pub fn fbp_transpose(img: &Image, geom: &ProjectionGeometry) -> Result<Sinogram> {
    let mut sino = ramp_filter(&forward_project(img, geom)?);
    let c = fbp_scale(geom, &img.grid);
    sino.data.iter_mut().for_each(|v| *v *= c);
    Ok(sino)
}

/// Ray-tracer weights stored as a sparse matrix (rows are rays, view-major),
/// with repeated taps of one ray merged. Cheap to apply many times.
#[derive(Debug, Clone)]
pub struct SystemMatrix {
    grid: Grid,
    geometry: ProjectionGeometry,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl SystemMatrix {
    pub fn new(grid: &Grid, geom: &ProjectionGeometry) -> Result<Self> {
        check_grid_geometry(grid, geom)?;
        let tracer = RayTracer::new(grid);
        let nd = geom.n_detectors();
        let mut row_ptr = Vec::with_capacity(geom.n_views() * nd + 1);
        row_ptr.push(0);
        let (mut cols, mut vals) = (Vec::new(), Vec::new());
        let mut dense = vec![0.0; grid.len()];
        let mut touched: Vec<usize> = Vec::new();
        for &angle in geom.angles_deg() {
            let (sin, cos) = angle.to_radians().sin_cos();
            for k in 0..nd {
                tracer.trace(cos, sin, geom.detector_offset(k), |idx, w| {
                    if dense[idx] == 0.0 {
                        touched.push(idx);
                    }
                    dense[idx] += w;
                });
                touched.sort_unstable();
                for &idx in &touched {
                    cols.push(idx as u32);
                    vals.push(dense[idx]);
                    dense[idx] = 0.0;
                }
                touched.clear();
                row_ptr.push(cols.len());
            }
        }
        Ok(Self {
            grid: *grid,
            geometry: geom.clone(),
            row_ptr,
            cols,
            vals,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn geometry(&self) -> &ProjectionGeometry {
        &self.geometry
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn n_rays(&self) -> usize {
        self.row_ptr.len() - 1
    }

    /// Sinogram data (view-major) of an image given as raw pixels.
    pub fn apply(&self, img: &[f64]) -> Vec<f64> {
        assert_eq!(img.len(), self.grid.len());
        self.row_ptr
            .windows(2)
            .map(|r| {
                let (c, v) = (&self.cols[r[0]..r[1]], &self.vals[r[0]..r[1]]);
                c.iter().zip(v).map(|(&j, &w)| w * img[j as usize]).sum()
            })
            .collect()
    }

    pub fn apply_transpose(&self, sino: &[f64]) -> Vec<f64> {
        assert_eq!(sino.len(), self.n_rays());
        let mut out = vec![0.0; self.grid.len()];
        for (r, &s) in self.row_ptr.windows(2).zip(sino) {
            if s == 0.0 {
                continue;
            }
            for (&j, &w) in self.cols[r[0]..r[1]].iter().zip(&self.vals[r[0]..r[1]]) {
                out[j as usize] += w * s;
            }
        }
        out
    }
}

/// Projector, ramp filter and FBP scale bundled for repeated use.
pub struct FbpOperator {
    matrix: SystemMatrix,
    filter: RampFilter,
    scale: f64,
}

impl FbpOperator {
    pub fn new(grid: &Grid, geom: &ProjectionGeometry) -> Result<Self> {
        Ok(Self {
            matrix: SystemMatrix::new(grid, geom)?,
            filter: RampFilter::new(geom.n_detectors(), geom.detector_spacing()),
            scale: fbp_scale(geom, grid),
        })
    }

    pub fn matrix(&self) -> &SystemMatrix {
        &self.matrix
    }

    pub fn grid(&self) -> &Grid {
        &self.matrix.grid
    }

    pub fn geometry(&self) -> &ProjectionGeometry {
        &self.matrix.geometry
    }

    pub fn project(&self, img: &[f64]) -> Vec<f64> {
        self.matrix.apply(img)
    }

    pub fn back_project(&self, sino: &[f64]) -> Vec<f64> {
        self.matrix.apply_transpose(sino)
    }

    fn filter_rows(&self, sino: &mut [f64]) {
        for row in sino.chunks_mut(self.geometry().n_detectors()) {
            self.filter.apply_row(row);
        }
    }

    pub fn fbp(&self, sino: &[f64]) -> Vec<f64> {
        let mut filtered = sino.to_vec();
        self.filter_rows(&mut filtered);
        let mut img = self.matrix.apply_transpose(&filtered);
        img.iter_mut().for_each(|v| *v *= self.scale);
        img
    }

    pub fn fbp_transpose(&self, img: &[f64]) -> Vec<f64> {
        let mut sino = self.matrix.apply(img);
        self.filter_rows(&mut sino);
        sino.iter_mut().for_each(|v| *v *= self.scale);
        sino
    }
}
