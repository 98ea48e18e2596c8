//! Noise-floor removal and hot-pixel masking.
//!
//! The downstream edge model carries no background term, so the constant
//! floor from ambient light and dark counts is estimated per pixel and
//! subtracted here. Binary-frame counts can optionally be linearized first
//! (`-N·ln(1 - y/N)`), which turns the saturating detection response back
//! into an additive photon count so the floor subtracts exactly.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::acquisition::SampleCube;
use crate::error::{ensure_same_dims, Error, Result};
use crate::Real;

/// Per-pixel constant noise floor, in counts per gate sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundMap<T>(pub Array2<T>);

/// `true` marks an excluded pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HotPixelMask(pub Array2<bool>);

impl HotPixelMask {
    pub fn empty(height: usize, width: usize) -> Self {
        HotPixelMask(Array2::from_elem((height, width), false))
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.0.len().max(1) as f64
    }
}

/// Background-subtracted samples plus the pixels that may be used.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanedCube<T> {
    /// `[gate][row][col]`, every entry ≥ 0.
    pub samples: Array3<T>,
    /// `false` for hot-masked pixels.
    pub valid: Array2<bool>,
}

impl<T: Real> CleanedCube<T> {
    /// Wraps an already clean cube, with every pixel valid.
    pub fn from_samples(samples: Array3<T>) -> Self {
        let (_, h, w) = samples.dim();
        CleanedCube { samples, valid: Array2::from_elem((h, w), true) }
    }

    pub fn num_gates(&self) -> usize {
        self.samples.dim().0
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.samples.dim();
        (h, w)
    }
}

/// Inverts the binary-frame response: `y ↦ -N·ln(1 - y/N)`. Saturated samples
/// (`y = N`) are clamped to `N - 1/2` before inversion.
pub fn linearize_binary<T: Real>(cube: &SampleCube<T>) -> SampleCube<T> {
    let n = T::lit(cube.bitplanes as f64);
    let cap = n - T::lit(0.5);
    let data = cube.data.mapv(|y| {
        let y = y.max(T::zero()).min(cap);
        -n * (-y / n).ln_1p()
    });
    SampleCube { data, bitplanes: cube.bitplanes }
}

/// Median of each pixel's samples over `calib_gates`, which must precede any
/// target return.
pub fn estimate_background<T: Real>(cube: &SampleCube<T>, calib_gates: &[usize]) -> Result<BackgroundMap<T>> {
    if calib_gates.is_empty() {
        return Err(Error::config("preprocess.calib_gates is empty"));
    }
    let k = cube.num_gates();
    if let Some(&bad) = calib_gates.iter().find(|&&g| g >= k) {
        return Err(Error::config(format!("calibration gate {bad} out of range (cube has {k} gates)")));
    }
    let (h, w) = cube.dims();
    let mut scratch = Vec::with_capacity(calib_gates.len());
    let map = Array2::from_shape_fn((h, w), |(r, c)| {
        scratch.clear();
        scratch.extend(calib_gates.iter().map(|&g| cube.data[[g, r, c]]));
        median(&mut scratch)
    });
    Ok(BackgroundMap(map))
}

fn median<T: Real>(v: &mut [T]) -> T {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / T::lit(2.0)
    }
}

/// Masks pixels whose dark-count rate exceeds `threshold_hz`.
pub fn detect_hot_pixels<T: Real>(dcr_map_hz: &Array2<T>, threshold_hz: T) -> HotPixelMask {
    HotPixelMask(dcr_map_hz.mapv(|v| v > threshold_hz))
}

/// Dark-count proxy from the estimated floor: floor counts divided by the
/// exposure accumulated per gate sample (`bitplanes × exposure_s`).
pub fn dcr_proxy_from_background<T: Real>(background: &BackgroundMap<T>, bitplanes: u32, exposure_s: T) -> Array2<T> {
    let per_sample = T::lit(bitplanes as f64) * exposure_s;
    background.0.mapv(|b| if per_sample > T::zero() { b / per_sample } else { T::zero() })
}

/// Hot-pixel detection from cube statistics alone.
pub fn detect_hot_pixels_from_background<T: Real>(
    background: &BackgroundMap<T>,
    bitplanes: u32,
    exposure_s: T,
    threshold_hz: T,
) -> HotPixelMask {
    detect_hot_pixels(&dcr_proxy_from_background(background, bitplanes, exposure_s), threshold_hz)
}

/// `max(0, y - background)`; masked pixels are flagged invalid.
pub fn subtract_background<T: Real>(
    cube: &SampleCube<T>,
    background: &BackgroundMap<T>,
    mask: &HotPixelMask,
) -> Result<CleanedCube<T>> {
    let dims = cube.dims();
    ensure_same_dims("background vs cube", background.0.dim(), dims)?;
    ensure_same_dims("hot mask vs cube", mask.0.dim(), dims)?;
    let mut samples = cube.data.clone();
    for mut plane in samples.axis_iter_mut(Axis(0)) {
        plane.zip_mut_with(&background.0, |y, &b| *y = (*y - b).max(T::zero()));
    }
    Ok(CleanedCube { samples, valid: mask.0.mapv(|m| !m) })
}

/// Preprocessing parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Gate indices that precede every target return.
    pub calib_gates: Vec<usize>,
    pub hot_threshold_hz: f64,
    /// Invert the binary-frame saturation before subtracting the floor.
    pub linearize: bool,
    /// Bit-plane exposure used to turn floor counts into a DCR proxy.
    pub exposure_s: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            calib_gates: vec![0, 1, 2],
            hot_threshold_hz: 10_000.0,
            linearize: true,
            exposure_s: 215e-6 / 256.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Preprocessed<T> {
    pub cleaned: CleanedCube<T>,
    pub background: BackgroundMap<T>,
    pub hot_mask: HotPixelMask,
}

/// Linearize (optional), estimate floor, mask hot pixels, subtract.
///
/// With a known DCR map the mask comes from it; otherwise it is derived from
/// the floor estimate.
pub fn preprocess<T: Real>(
    cube: &SampleCube<T>,
    config: &PreprocessConfig,
    dcr_map_hz: Option<&Array2<T>>,
) -> Result<Preprocessed<T>> {
    if !(config.hot_threshold_hz > 0.0) {
        return Err(Error::config("preprocess.hot_threshold_hz must be > 0"));
    }
    let work = if config.linearize { linearize_binary(cube) } else { cube.clone() };
    let background = estimate_background(&work, &config.calib_gates)?;
    let threshold = T::lit(config.hot_threshold_hz);
    let hot_mask = match dcr_map_hz {
        Some(map) => {
            ensure_same_dims("dcr map vs cube", map.dim(), cube.dims())?;
            detect_hot_pixels(map, threshold)
        }
        None => detect_hot_pixels_from_background(&background, cube.bitplanes, T::lit(config.exposure_s), threshold),
    };
    let cleaned = subtract_background(&work, &background, &hot_mask)?;
    Ok(Preprocessed { cleaned, background, hot_mask })
}
