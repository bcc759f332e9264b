//! Sparse-view and limited-angle view subsets.

use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, shape_err, Error, Result};
use crate::projector::{fbp, Grid, Image, Sinogram};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    SparseView,
    LimitedAngle,
    Custom,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::SparseView => "SparseView",
            MaskMode::LimitedAngle => "LimitedAngle",
            MaskMode::Custom => "Custom",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SparseView" => Ok(MaskMode::SparseView),
            "LimitedAngle" => Ok(MaskMode::LimitedAngle),
            "Custom" => Ok(MaskMode::Custom),
            other => Err(Error::Format(format!("unknown mask mode {other:?}"))),
        }
    }
}

/// Acquired subset of the full view set, as sorted 0-based view indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewMask {
    n_views_full: usize,
    kept: Vec<usize>,
    mode: MaskMode,
}

impl ViewMask {
    pub fn new(n_views_full: usize, kept: Vec<usize>, mode: MaskMode) -> Result<Self> {
        if kept.is_empty() {
            return config_err("view mask keeps no views");
        }
        if kept.windows(2).any(|w| w[1] <= w[0]) {
            return config_err("mask indices must be strictly increasing");
        }
        if let Some(&last) = kept.last() {
            if last >= n_views_full {
                return config_err(format!("mask index {last} out of range for {n_views_full} views"));
            }
        }
        Ok(Self {
            n_views_full,
            kept,
            mode,
        })
    }

    pub fn full(n_views_full: usize) -> Result<Self> {
        Self::new(n_views_full, (0..n_views_full).collect(), MaskMode::Custom)
    }

    pub fn n_views_full(&self) -> usize {
        self.n_views_full
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn n_kept(&self) -> usize {
        self.kept.len()
    }

    pub fn contains(&self, view: usize) -> bool {
        self.kept.binary_search(&view).is_ok()
    }

    /// Per-view membership flags.
    pub fn membership(&self) -> Vec<bool> {
        let mut flags = vec![false; self.n_views_full];
        for &k in &self.kept {
            flags[k] = true;
        }
        flags
    }

    /// `mode n_full idx0,idx1,...`
    pub fn to_line(&self) -> String {
        let idx: Vec<String> = self.kept.iter().map(|k| k.to_string()).collect();
        format!("{} {} {}", self.mode, self.n_views_full, idx.join(","))
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let mut parts = line.split_whitespace();
        let (Some(mode), Some(n), Some(idx), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::Format(format!("bad mask line {line:?}")));
        };
        let mode: MaskMode = mode.parse()?;
        let n: usize = n
            .parse()
            .map_err(|_| Error::Format(format!("bad view count {n:?}")))?;
        let kept = idx
            .split(',')
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad view index {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(n, kept, mode)
    }
}

/// Every `n_full / n_keep`-th view starting at view 0.
pub fn sparse_view_mask(n_full: usize, n_keep: usize) -> Result<ViewMask> {
    if n_keep == 0 || n_keep > n_full {
        return config_err(format!("cannot keep {n_keep} of {n_full} views"));
    }
    if !n_full.is_multiple_of(n_keep) {
        return config_err(format!(
            "{n_full} views are not evenly divisible into {n_keep} kept views"
        ));
    }
    let stride = n_full / n_keep;
    ViewMask::new(n_full, (0..n_keep).map(|i| i * stride).collect(), MaskMode::SparseView)
}

/// Views whose angle is strictly below `max_angle_deg`.
pub fn limited_angle_mask(n_full: usize, max_angle_deg: f64, angles: &[f64]) -> Result<ViewMask> {
    if !(max_angle_deg > 0.0 && max_angle_deg <= 180.0) {
        return config_err(format!("maximum angle {max_angle_deg} outside (0, 180]"));
    }
    if angles.len() != n_full {
        return config_err(format!("{} angles given for {n_full} views", angles.len()));
    }
    let kept: Vec<usize> = angles
        .iter()
        .enumerate()
        .filter(|(_, &a)| a < max_angle_deg)
        .map(|(i, _)| i)
        .collect();
    if kept.is_empty() {
        return config_err(format!("no view below {max_angle_deg} degrees"));
    }
    ViewMask::new(n_full, kept, MaskMode::LimitedAngle)
}

/// Zeroes every view row outside the mask; the result keeps the full shape.
pub fn apply_mask(sino: &Sinogram, mask: &ViewMask) -> Result<Sinogram> {
    check_mask(sino, mask)?;
    let mut out = sino.clone();
    let keep = mask.membership();
    for (v, kept) in keep.iter().enumerate() {
        if !kept {
            out.view_mut(v).fill(0.0);
        }
    }
    Ok(out)
}

/// Only the kept rows, over the matching sub-geometry.
pub fn apply_mask_compact(sino: &Sinogram, mask: &ViewMask) -> Result<Sinogram> {
    check_mask(sino, mask)?;
    let geometry = sino.geometry.subset(mask.kept())?;
    let mut data = Vec::with_capacity(mask.n_kept() * sino.n_detectors());
    for &v in mask.kept() {
        data.extend_from_slice(sino.view(v));
    }
    Sinogram::from_data(geometry, data)
}

/// FBP of the acquired views alone, normalized by their own count. This is
/// the usual limited-data starting image; applying [`fbp`] to the
/// zero-filled full-shape sinogram instead darkens it by the kept fraction.
pub fn fbp_acquired(sino: &Sinogram, mask: &ViewMask, grid: &Grid) -> Result<Image> {
    let compact = apply_mask_compact(sino, mask)?;
    let geometry = sino.geometry.acquired(mask.kept())?;
    fbp(&Sinogram::from_data(geometry, compact.data)?, grid)
}

fn check_mask(sino: &Sinogram, mask: &ViewMask) -> Result<()> {
    if sino.n_views() != mask.n_views_full() {
        return shape_err(format!(
            "mask covers {} views, sinogram has {}",
            mask.n_views_full(),
            sino.n_views()
        ));
    }
    Ok(())
}
