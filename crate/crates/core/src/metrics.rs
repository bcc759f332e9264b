//! PSNR, SSIM and per-split evaluation tables.

use std::fmt::Write as _;

use crate::error::{config_err, shape_err, Result};
use crate::projector::{Grid, Image};

pub const DEFAULT_DATA_RANGE: f64 = 1.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(x: &Image, reference: &Image, data_range: f64) -> Result<()> {
    if x.grid.nx != reference.grid.nx || x.grid.ny != reference.grid.ny {
        return shape_err(format!(
            "image is {}x{}, reference is {}x{}",
            x.grid.ny, x.grid.nx, reference.grid.ny, reference.grid.nx
        ));
    }
    if !(data_range > 0.0 && data_range.is_finite()) {
        return config_err(format!("data range must be positive, got {data_range}"));
    }
    Ok(())
}

pub fn mse(x: &Image, reference: &Image) -> Result<f64> {
    check_pair(x, reference, 1.0)?;
    let n = x.data.len() as f64;
    Ok(x.data.iter().zip(&reference.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// `10 log10(range^2 / mse)`; `f64::INFINITY` when the images are identical.
pub fn psnr(x: &Image, reference: &Image, data_range: f64) -> Result<f64> {
    check_pair(x, reference, data_range)?;
    let m = mse(x, reference)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering with the normalized Gaussian window.
fn filter_valid(data: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|t| win[t] * data[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|t| win[t] * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over every fully interior 11x11 Gaussian window.
pub fn ssim(x: &Image, reference: &Image, data_range: f64) -> Result<f64> {
    check_pair(x, reference, data_range)?;
    let (h, w) = (x.grid.ny, x.grid.nx);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return shape_err(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"));
    }
    let win = gaussian_window();
    let a = &x.data;
    let b = &reference.data;
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect() };
    let mu_a = filter_valid(a, h, w, &win);
    let mu_b = filter_valid(b, h, w, &win);
    let e_aa = filter_valid(&prod(&|p, _| p * p), h, w, &win);
    let e_bb = filter_valid(&prod(&|_, q| q * q), h, w, &win);
    let e_ab = filter_valid(&prod(&|p, q| p * q), h, w, &win);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Rectangular region of interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Roi {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl Roi {
    pub fn crop(&self, img: &Image) -> Result<Image> {
        if self.size < 2 || self.row + self.size > img.grid.ny || self.col + self.size > img.grid.nx {
            return shape_err(format!("ROI {self:?} does not fit a {}x{} image", img.grid.ny, img.grid.nx));
        }
        let mut data = Vec::with_capacity(self.size * self.size);
        for r in self.row..self.row + self.size {
            let start = r * img.grid.nx + self.col;
            data.extend_from_slice(&img.data[start..start + self.size]);
        }
        Image::from_data(Grid::new(self.size, self.size, img.grid.pixel_size)?, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub data_range: f64,
}

impl MetricReport {
    pub fn psnr_is_infinite(&self) -> bool {
        self.psnr_db.is_infinite()
    }
}

pub fn evaluate(x: &Image, reference: &Image, data_range: f64, roi: Option<Roi>) -> Result<MetricReport> {
    let (x, reference) = match roi {
        Some(r) => (r.crop(x)?, r.crop(reference)?),
        None => (x.clone(), reference.clone()),
    };
    Ok(MetricReport {
        psnr_db: psnr(&x, &reference, data_range)?,
        ssim: ssim(&x, &reference, data_range)?,
        data_range,
    })
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    if n == 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-sample metrics of one method over one split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    pub method: String,
    pub rows: Vec<MetricReport>,
}

impl EvalTable {
    pub fn psnr_mean_std(&self) -> (f64, f64) {
        mean_std(self.rows.iter().map(|r| r.psnr_db))
    }

    pub fn ssim_mean_std(&self) -> (f64, f64) {
        mean_std(self.rows.iter().map(|r| r.ssim))
    }

    /// Tab-separated `sample psnr ssim` rows followed by a `MEAN±STD` line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{:.4}\t{:.6}", r.psnr_db, r.ssim);
        }
        let (pm, ps) = self.psnr_mean_std();
        let (sm, ss) = self.ssim_mean_std();
        let _ = writeln!(out, "MEAN±STD\t{pm:.4}±{ps:.4}\t{sm:.6}±{ss:.6}");
        out
    }

    /// Line count of [`Self::to_tsv`].
    pub fn line_count(&self) -> usize {
        self.rows.len() + 1
    }
}

/// Runs `method` on every `(input, reference)` pair and scores it.
pub fn evaluate_split<'a, I>(
    method: &str,
    pairs: I,
    data_range: f64,
    roi: Option<Roi>,
    mut reconstruct: impl FnMut(usize) -> Result<Image>,
) -> Result<EvalTable>
where
    I: IntoIterator<Item = &'a Image>,
{
    let rows = pairs
        .into_iter()
        .enumerate()
        .map(|(i, reference)| evaluate(&reconstruct(i)?, reference, data_range, roi))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalTable {
        method: method.to_string(),
        rows,
    })
}

/// Aligned summary with one line per method.
pub fn summary_table(tables: &[EvalTable]) -> String {
    let width = tables.iter().map(|t| t.method.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}  {:>17}  {:>17}\n", "method", "psnr", "ssim");
    for t in tables {
        let (pm, ps) = t.psnr_mean_std();
        let (sm, ss) = t.ssim_mean_std();
        let _ = writeln!(
            out,
            "{:<width$}  {:>17}  {:>17}",
            t.method,
            format!("{pm:.2}±{ps:.2}"),
            format!("{sm:.4}±{ss:.4}")
        );
    }
    out
}
