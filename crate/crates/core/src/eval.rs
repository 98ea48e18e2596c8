//! Depth-accuracy metrics on the panel-board scene.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::fitting::DepthRaster;
use crate::scene::{BoardLayout, Rect};
use crate::Real;

/// Side of the square statistics patch placed in each panel.
pub const PATCH_PX: usize = 25;

fn valid_depths_cm<T: Real>(depth: &DepthRaster<T>, region: &Rect) -> Result<Vec<f64>> {
    let (h, w) = depth.depth_m.dim();
    if !region.fits_in(h, w) {
        return Err(Error::dims(format!("region {region:?} leaves the {h}x{w} raster")));
    }
    Ok(region
        .pixels()
        .filter(|&(r, c)| depth.valid[[r, c]])
        .map(|(r, c)| depth.depth_m[[r, c]].as_f64() * 100.0)
        .collect())
}

/// Sample standard deviation of the valid depths in `patch`, in cm.
pub fn patch_stddev<T: Real>(depth: &DepthRaster<T>, patch: &Rect) -> Result<f64> {
    let v = valid_depths_cm(depth, patch)?;
    if v.len() < 2 {
        return Err(Error::data(format!("patch {patch:?} has {} valid pixels, need 2", v.len())));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let ss: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
    Ok((ss / (n - 1.0)).sqrt())
}

/// Mean of the valid depths in `region`, in cm.
pub fn region_mean_cm<T: Real>(depth: &DepthRaster<T>, region: &Rect) -> Result<f64> {
    let v = valid_depths_cm(depth, region)?;
    if v.is_empty() {
        return Err(Error::data(format!("region {region:?} has no valid pixel")));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// `PATCH_PX`-square patches centred in the four panels, clockwise from
/// top-left.
pub fn panel_patches(layout: &BoardLayout) -> [Rect; 4] {
    layout.quadrants().map(|q| q.centered(PATCH_PX))
}

/// Absolute differences of region means for the clockwise adjacent pairs
/// (TL,TR), (TR,BR), (BR,BL), (BL,TL), in cm.
pub fn panel_mean_differences<T: Real>(depth: &DepthRaster<T>, regions: &[Rect; 4]) -> Result<[f64; 4]> {
    let mut means = [0.0; 4];
    for (m, region) in means.iter_mut().zip(regions) {
        *m = region_mean_cm(depth, region)?;
    }
    Ok([0, 1, 2, 3].map(|i| (means[(i + 1) % 4] - means[i]).abs()))
}

/// Root-mean-square depth error over pixels where `valid` is set, in cm.
pub fn depth_rmse<T: Real>(estimate: &Array2<T>, truth: &Array2<T>, valid: &Array2<bool>) -> Result<f64> {
    ensure_same_dims("estimate vs truth", estimate.dim(), truth.dim())?;
    ensure_same_dims("validity mask", valid.dim(), truth.dim())?;
    let mut ss = 0.0;
    let mut n = 0usize;
    for ((e, t), &v) in estimate.iter().zip(truth).zip(valid) {
        if v {
            ss += ((e.as_f64() - t.as_f64()) * 100.0).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::data("no valid pixel for RMSE"));
    }
    Ok((ss / n as f64).sqrt())
}

/// Fraction of set entries.
pub fn coverage(mask: &Array2<bool>) -> f64 {
    mask.iter().filter(|&&m| m).count() as f64 / mask.len().max(1) as f64
}

/// Fraction of entries that are finite.
pub fn finite_fraction<T: Real>(values: &Array2<T>) -> f64 {
    values.iter().filter(|v| v.is_finite()).count() as f64 / values.len().max(1) as f64
}

/// Summary of one reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub patch_stddev_cm: [f64; 4],
    /// Clockwise adjacent panel differences.
    pub panel_differences_cm: [f64; 4],
    pub valid_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub depth_rmse_cm: Option<f64>,
    /// Pixel coverage of the scan subset, when subsampled.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scan_coverage: Option<f64>,
    /// Wall-clock time; left out of stage outputs to keep them reproducible.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub runtime_s: Option<f64>,
}

impl MetricsReport {
    /// Patch and panel statistics of `depth` over `layout`.
    pub fn from_depth<T: Real>(label: &str, depth: &DepthRaster<T>, layout: &BoardLayout) -> Result<Self> {
        let patches = panel_patches(layout);
        let mut std = [0.0; 4];
        for (s, p) in std.iter_mut().zip(&patches) {
            *s = patch_stddev(depth, p)?;
        }
        Ok(MetricsReport {
            label: label.to_string(),
            patch_stddev_cm: std,
            panel_differences_cm: panel_mean_differences(depth, &patches)?,
            valid_fraction: coverage(&depth.valid),
            depth_rmse_cm: None,
            scan_coverage: None,
            runtime_s: None,
        })
    }

    pub const CSV_HEADER: &'static str = "label,std_tl_cm,std_tr_cm,std_br_cm,std_bl_cm,diff_tl_tr_cm,diff_tr_br_cm,diff_br_bl_cm,diff_bl_tl_cm,valid_fraction,depth_rmse_cm,scan_coverage";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut cols = vec![self.label.clone()];
        cols.extend(self.patch_stddev_cm.iter().map(|v| format!("{v:.6}")));
        cols.extend(self.panel_differences_cm.iter().map(|v| format!("{v:.6}")));
        cols.push(format!("{:.6}", self.valid_fraction));
        cols.push(opt(self.depth_rmse_cm));
        cols.push(opt(self.scan_coverage));
        cols.join(",")
    }
}
