//! PNG rendering of depth rasters.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{ensure_same_dims, Error, Result};
use crate::fitting::DepthRaster;
use crate::Real;

/// Colour of invalid pixels. Never produced by the colormap.
pub const SENTINEL: [u8; 3] = [255, 0, 255];

// Perceptual blue→green→yellow ramp, sampled at equal steps.
const RAMP: [[f64; 3]; 6] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [190.0, 223.0, 36.0],
    [253.0, 231.0, 37.0],
];

/// Colormap lookup for `t ∈ [0, 1]` (clamped).
pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    [0, 1, 2].map(|k| (RAMP[i][k] * (1.0 - f) + RAMP[i + 1][k] * f).round() as u8)
}

/// What to blend over the depth colours.
#[derive(Debug, Clone, Copy)]
pub enum Overlay<'a, T> {
    None,
    /// Brightness scaled by intensity normalized to its valid maximum.
    Intensity(&'a Array2<T>),
    /// Half-and-half blend with an interleaved RGB image.
    Rgb(&'a Array3<u8>),
}

/// Colour-maps valid depths over `range_m` (min/max of valid depths when
/// `None`); invalid pixels get [`SENTINEL`].
pub fn depth_image<T: Real>(depth: &DepthRaster<T>, range_m: Option<(f64, f64)>, overlay: Overlay<'_, T>) -> Result<RgbImage> {
    let (h, w) = depth.depth_m.dim();
    ensure_same_dims("depth validity", depth.valid.dim(), (h, w))?;
    let usable = |r: usize, c: usize| depth.valid[[r, c]] && depth.depth_m[[r, c]].is_finite();
    let (lo, hi) = range_m.unwrap_or_else(|| {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for ((r, c), v) in depth.depth_m.indexed_iter() {
            if usable(r, c) {
                lo = lo.min(v.as_f64());
                hi = hi.max(v.as_f64());
            }
        }
        (lo, hi)
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let imax = match overlay {
        Overlay::Intensity(i) => {
            ensure_same_dims("intensity overlay", i.dim(), (h, w))?;
            let m = i
                .indexed_iter()
                .filter(|&((r, c), v)| usable(r, c) && v.is_finite())
                .map(|(_, v)| v.as_f64())
                .fold(0.0, f64::max);
            if m > 0.0 { m } else { 1.0 }
        }
        Overlay::Rgb(rgb) => {
            if rgb.dim() != (h, w, 3) {
                return Err(Error::dims(format!("rgb overlay {:?} vs raster {h}x{w}", rgb.dim())));
            }
            1.0
        }
        Overlay::None => 1.0,
    };
    let width = u32::try_from(w).map_err(|_| Error::dims("raster too wide"))?;
    let height = u32::try_from(h).map_err(|_| Error::dims("raster too tall"))?;
    Ok(RgbImage::from_fn(width, height, |x, y| {
        let (r, c) = (y as usize, x as usize);
        if !usable(r, c) {
            return Rgb(SENTINEL);
        }
        let base = colormap((depth.depth_m[[r, c]].as_f64() - lo) / span);
        let px = match overlay {
            Overlay::None => base,
            Overlay::Intensity(i) => {
                let g = (i[[r, c]].as_f64() / imax).clamp(0.0, 1.0);
                let g = if g.is_finite() { 0.25 + 0.75 * g } else { 0.25 };
                base.map(|v| (v as f64 * g).round() as u8)
            }
            Overlay::Rgb(rgb) => [0, 1, 2].map(|k| ((base[k] as u16 + rgb[[r, c, k]] as u16) / 2) as u8),
        };
        // keep rendered pixels distinguishable from the sentinel
        Rgb(if px == SENTINEL { [254, 0, 255] } else { px })
    }))
}

/// Renders and writes a PNG.
pub fn render_depth<T: Real>(depth: &DepthRaster<T>, range_m: Option<(f64, f64)>, overlay: Overlay<'_, T>, path: &Path) -> Result<()> {
    let img = depth_image(depth, range_m, overlay)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(other.to_string())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn raster(d: Array2<f64>) -> DepthRaster<f64> {
        let valid = Array2::from_elem(d.dim(), true);
        DepthRaster { depth_m: d, valid }
    }

    fn colors(img: &RgbImage) -> HashSet<[u8; 3]> {
        img.pixels().map(|p| p.0).collect()
    }

    #[test]
    fn constant_and_two_level() {
        let img = depth_image(&raster(Array2::from_elem((6, 5), 3.0)), None, Overlay::None).unwrap();
        assert_eq!(colors(&img).len(), 1);
        let two = raster(Array2::from_shape_fn((6, 5), |(r, _)| if r < 3 { 1.0 } else { 2.0 }));
        let img = depth_image(&two, None, Overlay::None).unwrap();
        assert_eq!(colors(&img).len(), 2);
    }

    #[test]
    fn invalid_pixels_use_sentinel() {
        let mut d = raster(Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64));
        d.valid[[1, 2]] = false;
        let img = depth_image(&d, None, Overlay::None).unwrap();
        assert_eq!(img.get_pixel(2, 1).0, SENTINEL);
        assert_eq!(img.pixels().filter(|p| p.0 == SENTINEL).count(), 1);
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [68, 1, 84]);
        assert_eq!(colormap(1.0), [253, 231, 37]);
        assert_eq!(colormap(-3.0), colormap(0.0));
    }

    #[test]
    fn unwritable_path_fails() {
        let d = raster(Array2::from_elem((2, 2), 1.0));
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        std::fs::write(&file, b"x").unwrap();
        assert!(render_depth(&d, None, Overlay::None, &file.join("sub.png")).is_err());
    }
}
