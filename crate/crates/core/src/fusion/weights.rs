//! Non-local weights from the co-registered colour image.
//!
//! For each pixel `n` and each offset `m` in a square field, the mean absolute
//! channel difference `Δ_nm` is turned into an intensity weight
//! `exp(-Δ_nm/σ_c)`. Depth weights additionally decay with the normalized
//! offset length: `w^d = w^r · exp(-(‖m‖/‖m‖_max)/σ_s)`.

use ndarray::{Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Real;

/// Colour transform applied before differencing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorSpace {
    #[default]
    Rgb,
    /// ITU-R BT.601 full-range YCbCr.
    Ycbcr,
}

impl ColorSpace {
    pub fn convert<T: Real>(self, rgb: &Array3<u8>) -> Array3<T> {
        let (h, w, _) = rgb.dim();
        match self {
            ColorSpace::Rgb => rgb.mapv(|v| T::lit(v as f64)),
            ColorSpace::Ycbcr => Array3::from_shape_fn((h, w, 3), |(r, c, ch)| {
                let (red, g, b) = (rgb[[r, c, 0]] as f64, rgb[[r, c, 1]] as f64, rgb[[r, c, 2]] as f64);
                T::lit(match ch {
                    0 => 0.299 * red + 0.587 * g + 0.114 * b,
                    1 => 128.0 - 0.168_736 * red - 0.331_264 * g + 0.5 * b,
                    _ => 128.0 + 0.5 * red - 0.418_688 * g - 0.081_312 * b,
                })
            }),
        }
    }
}

/// Bilinear resampling of an interleaved RGB image to `height`×`width`,
/// corner-aligned so source corners map onto target corners.
pub fn rescale_rgb(rgb: &Array3<u8>, height: usize, width: usize) -> Result<Array3<u8>> {
    let (sh, sw, ch) = rgb.dim();
    if height == 0 || width == 0 {
        return Err(Error::dims("rescale target must be non-empty"));
    }
    if sh == 0 || sw == 0 || ch != 3 {
        return Err(Error::dims(format!("source image must be non-empty RGB, got {:?}", rgb.dim())));
    }
    if (sh, sw) == (height, width) {
        return Ok(rgb.clone());
    }
    let scale = |n_src: usize, n_dst: usize, i: usize| -> f64 {
        if n_dst > 1 {
            i as f64 * (n_src - 1) as f64 / (n_dst - 1) as f64
        } else {
            0.0
        }
    };
    Ok(Array3::from_shape_fn((height, width, 3), |(r, c, k)| {
        let y = scale(sh, height, r);
        let x = scale(sw, width, c);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(sh - 1), (x0 + 1).min(sw - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let p = |yy: usize, xx: usize| rgb[[yy, xx, k]] as f64;
        let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
        let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
        (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8
    }))
}

/// Square neighbourhood of odd side; offsets indexed row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldGeometry {
    side: usize,
}

impl FieldGeometry {
    pub fn new(side: usize) -> Result<Self> {
        if side.is_multiple_of(2) {
            return Err(Error::config(format!("field side must be odd, got {side}")));
        }
        Ok(FieldGeometry { side })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn half(&self) -> usize {
        self.side / 2
    }

    pub fn len(&self) -> usize {
        self.side * self.side
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the zero offset.
    pub fn center(&self) -> usize {
        self.len() / 2
    }

    /// `(drow, dcol)` of offset `m`.
    pub fn offset(&self, m: usize) -> (isize, isize) {
        let h = self.half() as isize;
        ((m / self.side) as isize - h, (m % self.side) as isize - h)
    }

    /// Index of the opposite offset `-m`.
    pub fn mirror(&self, m: usize) -> usize {
        self.len() - 1 - m
    }

    pub fn distance(&self, m: usize) -> f64 {
        let (dr, dc) = self.offset(m);
        ((dr * dr + dc * dc) as f64).sqrt()
    }

    /// Length of the corner offsets.
    pub fn max_distance(&self) -> f64 {
        self.half() as f64 * std::f64::consts::SQRT_2
    }

    /// Neighbour of `(row, col)` along offset `m`, if inside `height`×`width`.
    #[inline]
    pub fn neighbor(&self, row: usize, col: usize, m: usize, height: usize, width: usize) -> Option<(usize, usize)> {
        let (dr, dc) = self.offset(m);
        let r = row as isize + dr;
        let c = col as isize + dc;
        (r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width).then_some((r as usize, c as usize))
    }
}

/// Mean absolute channel difference per pixel and offset,
/// `(height, width, side²)`. Offsets leaving the image hold `+∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceField<T> {
    pub field: FieldGeometry,
    pub values: Array3<T>,
}

/// Non-negative weight per pixel and offset, `(height, width, side²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightField<T> {
    pub field: FieldGeometry,
    pub weights: Array3<T>,
}

impl<T: Real> WeightField<T> {
    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.weights.dim();
        (h, w)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, m: usize) -> T {
        self.weights[[row, col, m]]
    }
}

/// `Δ_nm = (1/3)·Σ_c |I_c(n) - I_c(n+m)|` on raw RGB.
pub fn compute_color_differences<T: Real>(rgb: &Array3<u8>, field_side: usize) -> Result<DifferenceField<T>> {
    compute_channel_differences(&ColorSpace::Rgb.convert::<T>(rgb), field_side)
}

/// Same as [`compute_color_differences`] on arbitrary float channels.
pub fn compute_channel_differences<T: Real>(channels: &Array3<T>, field_side: usize) -> Result<DifferenceField<T>> {
    let field = FieldGeometry::new(field_side)?;
    let (h, w, nch) = channels.dim();
    if nch == 0 {
        return Err(Error::dims("image has no channels"));
    }
    let inv = T::one() / T::lit(nch as f64);
    let mut values = Array3::<T>::from_elem((h, w, field.len()), T::infinity());
    values.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(r, mut row)| {
        for c in 0..w {
            for m in 0..field.len() {
                if let Some((nr, nc)) = field.neighbor(r, c, m, h, w) {
                    let s: T = (0..nch).map(|k| (channels[[r, c, k]] - channels[[nr, nc, k]]).abs()).sum();
                    row[[c, m]] = s * inv;
                }
            }
        }
    });
    Ok(DifferenceField { field, values })
}

/// `w^r_nm = exp(-Δ_nm/σ_c)`, zero at the centre and outside the image.
pub fn compute_intensity_weights<T: Real>(diff: &DifferenceField<T>, sigma_c: T) -> Result<WeightField<T>> {
    if !(sigma_c > T::zero()) {
        return Err(Error::config("sigma_c must be > 0"));
    }
    let center = diff.field.center();
    let mut weights = diff.values.mapv(|d| if d.is_finite() { (-d / sigma_c).exp() } else { T::zero() });
    weights.index_axis_mut(Axis(2), center).fill(T::zero());
    Ok(WeightField { field: diff.field, weights })
}

/// `w^d_nm = w^r_nm · exp(-(‖m‖/‖m‖_max)/σ_s)`.
pub fn compute_depth_weights<T: Real>(intensity: &WeightField<T>, sigma_s: T) -> Result<WeightField<T>> {
    if !(sigma_s > T::zero()) {
        return Err(Error::config("sigma_s must be > 0"));
    }
    let field = intensity.field;
    let dmax = field.max_distance();
    let factor: Vec<T> = (0..field.len())
        .map(|m| {
            let norm = if dmax > 0.0 { field.distance(m) / dmax } else { 0.0 };
            (-T::lit(norm) / sigma_s).exp()
        })
        .collect();
    let mut weights = intensity.weights.clone();
    for mut lane in weights.lanes_mut(Axis(2)) {
        for (w, f) in lane.iter_mut().zip(&factor) {
            *w = *w * *f;
        }
    }
    Ok(WeightField { field, weights })
}
