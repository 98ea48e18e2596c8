//! Per-pixel leading-edge fitting.
//!
//! Each pixel's gated profile is modelled as
//! `s(k) = (r/2)·{1 + erf[(k - d)/h]} + b` with the edge width `h` fixed and
//! `b = 0` after preprocessing. `(d, r)` are found by projected
//! Levenberg-Marquardt least squares.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::GateConfig;
use crate::error::{ensure_same_dims, Error, Result};
use crate::preprocess::CleanedCube;
use crate::Real;

/// Bounded monotone edge shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeFunction {
    #[default]
    Erf,
    /// `(1/2)·{1 + (2/π)·arctan(u)}`, same asymptotes as erf.
    Arctan,
}

impl EdgeFunction {
    /// Unit edge in `[0, 1]` at normalized offset `u = (k - d)/h`.
    #[inline]
    pub fn unit<T: Real>(self, u: T) -> T {
        let half = T::lit(0.5);
        match self {
            EdgeFunction::Erf => half * (T::one() + u.erf()),
            EdgeFunction::Arctan => half * (T::one() + T::FRAC_2_PI() * u.atan()),
        }
    }

    /// Derivative of [`EdgeFunction::unit`] with respect to `u`.
    #[inline]
    pub fn unit_slope<T: Real>(self, u: T) -> T {
        match self {
            EdgeFunction::Erf => (-u * u).exp() * T::FRAC_2_SQRT_PI() * T::lit(0.5),
            EdgeFunction::Arctan => T::FRAC_1_PI() / (T::one() + u * u),
        }
    }

    /// Unit edge at gate `k` for an edge at `d` of width `h`. `h = 0` is the
    /// ideal step: 0 before `d`, 1/2 at `d`, 1 after.
    #[inline]
    pub fn shape<T: Real>(self, k: T, d: T, h: T) -> T {
        if h > T::zero() {
            self.unit((k - d) / h)
        } else if k < d {
            T::zero()
        } else if k > d {
            T::one()
        } else {
            T::lit(0.5)
        }
    }

    /// Expected counts `r·shape(k; d, h) + b`.
    #[inline]
    pub fn model<T: Real>(self, k: T, d: T, r: T, h: T, b: T) -> T {
        r * self.shape(k, d, h) + b
    }
}

/// The erf leading-edge model `(r/2)·{1 + erf[(k - d)/h]} + b`.
pub fn erf_model<T: Real>(k: T, d: T, r: T, h: T, b: T) -> T {
    EdgeFunction::Erf.model(k, d, r, h, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct FitConfig<T> {
    /// Edge width in gate-index units, shared by all pixels.
    #[serde(rename = "h_steps")]
    pub h: T,
    pub max_iters: usize,
    /// Relative parameter change at which the solver stops.
    pub convergence_tol: T,
    /// Fits with a smaller amplitude are reported invalid.
    #[serde(rename = "min_amplitude_counts")]
    pub min_amplitude: T,
    pub edge_function: EdgeFunction,
    /// Samples that must sit on the fitted plateau for the fit to count.
    pub min_plateau_samples: usize,
}

impl<T: Real> Default for FitConfig<T> {
    fn default() -> Self {
        FitConfig {
            h: T::one(),
            max_iters: 100,
            convergence_tol: T::lit(1e-10),
            min_amplitude: T::lit(2.0),
            edge_function: EdgeFunction::Erf,
            min_plateau_samples: 3,
        }
    }
}

impl<T: Real> FitConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.h >= T::zero()) {
            return Err(Error::config("fit.h_steps must be >= 0"));
        }
        if !(self.convergence_tol > T::zero()) || self.max_iters == 0 {
            return Err(Error::config("fit tolerances must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelEstimate<T> {
    /// Edge position in gate-index units.
    pub d: T,
    /// Plateau amplitude in counts.
    pub r: T,
    /// Background, pinned to zero.
    pub b: T,
    pub residual_ss: T,
    pub valid: bool,
    pub iterations: usize,
}

impl<T: Real> PixelEstimate<T> {
    pub fn invalid() -> Self {
        PixelEstimate {
            d: T::zero(),
            r: T::zero(),
            b: T::zero(),
            residual_ss: T::zero(),
            valid: false,
            iterations: 0,
        }
    }
}

fn sse<T: Real>(profile: &[T], edge: EdgeFunction, d: T, r: T, h: T) -> T {
    profile
        .iter()
        .enumerate()
        .map(|(k, &y)| {
            let e = y - edge.model(T::lit(k as f64), d, r, h, T::zero());
            e * e
        })
        .sum()
}

/// Least-squares amplitude for a fixed edge position, clamped at zero.
pub fn best_amplitude<T: Real>(profile: &[T], edge: EdgeFunction, d: T, h: T) -> T {
    let (mut num, mut den) = (T::zero(), T::zero());
    for (k, &y) in profile.iter().enumerate() {
        let s = edge.shape(T::lit(k as f64), d, h);
        num = num + y * s;
        den = den + s * s;
    }
    if den > T::zero() {
        (num / den).max(T::zero())
    } else {
        T::zero()
    }
}

/// Initial guess: plateau from the mean of the top quartile, edge at the
/// first half-plateau crossing (linearly interpolated).
fn initial_guess<T: Real>(profile: &[T]) -> Option<(T, T)> {
    let mut sorted: Vec<T> = profile.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let q = profile.len().div_ceil(4);
    let plateau = sorted[..q].iter().copied().sum::<T>() / T::lit(q as f64);
    if !(plateau > T::zero()) {
        return None;
    }
    let half = plateau * T::lit(0.5);
    let k = profile.iter().position(|&y| y > half)?;
    let d0 = if k == 0 {
        T::zero()
    } else {
        let (y0, y1) = (profile[k - 1], profile[k]);
        T::lit((k - 1) as f64) + (half - y0) / (y1 - y0)
    };
    Some((d0, plateau))
}

/// Fits `(d, r)` to one profile. Invalid when the profile has no discernible
/// edge, the amplitude is below `min_amplitude`, the edge sits on the `d = 0`
/// bound, the plateau is seen on too few samples, or the solver stalls.
pub fn fit_pixel<T: Real>(profile: &[T], config: &FitConfig<T>) -> PixelEstimate<T> {
    if profile.len() < 3 || profile.iter().any(|y| !y.is_finite()) {
        return PixelEstimate::invalid();
    }
    let Some((d0, r0)) = initial_guess(profile) else {
        return PixelEstimate::invalid();
    };
    let edge = config.edge_function;
    let h = config.h;
    let (d, r, iterations, converged) = if h > T::zero() {
        levenberg_marquardt(profile, config, d0, r0)
    } else {
        let (d, r) = step_search(profile, edge);
        (d, r, 1, true)
    };
    let residual_ss = sse(profile, edge, d, r, h);
    let plateau_samples = (0..profile.len())
        .filter(|&k| edge.shape(T::lit(k as f64), d, h) >= T::lit(0.95))
        .count();
    let valid = converged
        && r >= config.min_amplitude
        && r > T::zero()
        && d > T::zero()
        && plateau_samples >= config.min_plateau_samples;
    PixelEstimate { d, r, b: T::zero(), residual_ss, valid, iterations }
}

fn levenberg_marquardt<T: Real>(profile: &[T], config: &FitConfig<T>, d0: T, r0: T) -> (T, T, usize, bool) {
    let edge = config.edge_function;
    let h = config.h;
    let (mut d, mut r) = (d0.max(T::zero()), r0.max(T::zero()));
    let mut cost = sse(profile, edge, d, r, h);
    let mut lambda = T::lit(1e-3);
    let tol = config.convergence_tol;
    let mut iter = 0;
    while iter < config.max_iters {
        iter += 1;
        // normal equations of the Gauss-Newton step
        let (mut a_dd, mut a_dr, mut a_rr, mut g_d, mut g_r) = (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
        for (k, &y) in profile.iter().enumerate() {
            let u = (T::lit(k as f64) - d) / h;
            let s = edge.unit(u);
            let j_d = -r * edge.unit_slope(u) / h;
            let j_r = s;
            let e = y - r * s;
            a_dd = a_dd + j_d * j_d;
            a_dr = a_dr + j_d * j_r;
            a_rr = a_rr + j_r * j_r;
            g_d = g_d + j_d * e;
            g_r = g_r + j_r * e;
        }
        loop {
            let m_dd = a_dd * (T::one() + lambda) + T::epsilon();
            let m_rr = a_rr * (T::one() + lambda) + T::epsilon();
            let det = m_dd * m_rr - a_dr * a_dr;
            if !(det > T::zero()) {
                lambda = lambda * T::lit(10.0);
                if lambda > T::lit(1e12) {
                    return (d, r, iter, true);
                }
                continue;
            }
            let step_d = (m_rr * g_d - a_dr * g_r) / det;
            let step_r = (m_dd * g_r - a_dr * g_d) / det;
            let nd = (d + step_d).max(T::zero());
            let nr = (r + step_r).max(T::zero());
            let ncost = sse(profile, edge, nd, nr, h);
            if ncost <= cost {
                let small = (nd - d).abs() <= tol * (T::one() + d.abs()) && (nr - r).abs() <= tol * (T::one() + r.abs());
                let stalled = cost - ncost <= tol * tol * cost;
                d = nd;
                r = nr;
                cost = ncost;
                lambda = (lambda / T::lit(3.0)).max(T::lit(1e-12));
                if small || stalled {
                    return (d, r, iter, true);
                }
                break;
            }
            lambda = lambda * T::lit(4.0);
            if lambda > T::lit(1e12) {
                // no descent direction left at working precision
                return (d, r, iter, true);
            }
        }
    }
    (d, r, iter, false)
}

/// Ideal-step fit: the squared error is piecewise constant in `d` between
/// samples, so sample points and midpoints are exhaustive candidates.
fn step_search<T: Real>(profile: &[T], edge: EdgeFunction) -> (T, T) {
    let mut best = (T::zero(), T::zero(), T::infinity());
    for j in 0..(2 * profile.len()) {
        let d = T::lit(j as f64 * 0.5);
        let r = best_amplitude(profile, edge, d, T::zero());
        let c = sse(profile, edge, d, r, T::zero());
        if c < best.2 {
            best = (d, r, c);
        }
    }
    (best.0, best.1)
}

/// Edge-index and amplitude rasters with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction<T> {
    /// Edge position in gate-index units.
    pub depth_index: Array2<T>,
    pub intensity: Array2<T>,
    pub valid: Array2<bool>,
}

impl<T: Real> Reconstruction<T> {
    pub fn dims(&self) -> (usize, usize) {
        self.depth_index.dim()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len().max(1) as f64
    }

    /// Converts edge indices to range in metres.
    pub fn depth_raster(&self, gate: &GateConfig<T>) -> DepthRaster<T> {
        DepthRaster {
            depth_m: self.depth_index.mapv(|d| gate.index_to_depth(d)),
            valid: self.valid.clone(),
        }
    }

    pub fn intensity_raster(&self) -> IntensityRaster<T> {
        IntensityRaster { intensity: self.intensity.clone(), valid: self.valid.clone() }
    }
}

/// Per-pixel range in metres.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthRaster<T> {
    pub depth_m: Array2<T>,
    pub valid: Array2<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntensityRaster<T> {
    pub intensity: Array2<T>,
    pub valid: Array2<bool>,
}

/// Result of fitting every pixel of a cube.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeFit<T> {
    pub reconstruction: Reconstruction<T>,
    pub residual_ss: Array2<T>,
}

/// Fits every pixel; pixels flagged invalid in the cube are skipped.
pub fn fit_cube<T: Real>(cleaned: &CleanedCube<T>, config: &FitConfig<T>) -> Result<CubeFit<T>> {
    config.validate()?;
    let (h, w) = cleaned.dims();
    ensure_same_dims("cube validity mask", cleaned.valid.dim(), (h, w))?;
    let profiles = cleaned.samples.view().permuted_axes([1, 2, 0]);
    let profiles = profiles.as_standard_layout();
    let k = cleaned.num_gates();
    let flat = profiles.as_slice().expect("standard layout");
    let estimates: Vec<PixelEstimate<T>> = (0..h * w)
        .into_par_iter()
        .map(|n| {
            if cleaned.valid[[n / w, n % w]] {
                fit_pixel(&flat[n * k..(n + 1) * k], config)
            } else {
                PixelEstimate::invalid()
            }
        })
        .collect();
    let pick = |f: fn(&PixelEstimate<T>) -> T| {
        Array2::from_shape_vec((h, w), estimates.iter().map(f).collect()).expect("shape")
    };
    Ok(CubeFit {
        reconstruction: Reconstruction {
            depth_index: pick(|e| e.d),
            intensity: pick(|e| e.r),
            valid: Array2::from_shape_vec((h, w), estimates.iter().map(|e| e.valid).collect()).expect("shape"),
        },
        residual_ss: pick(|e| e.residual_ss),
    })
}

/// Profile of pixel `(row, col)` as a contiguous vector.
pub fn pixel_profile<T: Real>(cleaned: &CleanedCube<T>, row: usize, col: usize) -> Vec<T> {
    cleaned.samples.index_axis(Axis(2), col).index_axis(Axis(1), row).to_vec()
}

/// Post-fit range correction for gate-edge timing mismatch.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum EdgeCorrection<T> {
    #[default]
    None,
    /// Same offset (metres) for every pixel.
    Constant(T),
    /// Per-pixel offset in metres.
    Map(Array2<T>),
}

/// Adds the correction to every valid depth.
pub fn apply_edge_correction<T: Real>(depth: &DepthRaster<T>, correction: &EdgeCorrection<T>) -> Result<DepthRaster<T>> {
    let mut out = depth.clone();
    match correction {
        EdgeCorrection::None => {}
        EdgeCorrection::Constant(c) => {
            out.depth_m.zip_mut_with(&depth.valid, |d, &v| {
                if v {
                    *d = *d + *c
                }
            });
        }
        EdgeCorrection::Map(map) => {
            ensure_same_dims("edge correction map", map.dim(), depth.depth_m.dim())?;
            ndarray::Zip::from(&mut out.depth_m)
                .and(&depth.valid)
                .and(map)
                .for_each(|d, &v, &c| {
                    if v {
                        *d = *d + c
                    }
                });
        }
    }
    Ok(out)
}

/// Calibrates a correction from a flat reference plane at a known range: a
/// least-squares plane `a + b·row + c·col` fitted to `known - measured`.
pub fn calibrate_edge_correction<T: Real>(reference: &DepthRaster<T>, known_range_m: T) -> Result<EdgeCorrection<T>> {
    let coeffs = fit_plane(&reference.depth_m.mapv(|d| known_range_m - d), &reference.valid)
        .ok_or_else(|| Error::data("reference plane has too few valid pixels to calibrate"))?;
    let (h, w) = reference.depth_m.dim();
    Ok(EdgeCorrection::Map(Array2::from_shape_fn((h, w), |(r, c)| {
        coeffs[0] + coeffs[1] * T::lit(r as f64) + coeffs[2] * T::lit(c as f64)
    })))
}

/// Least-squares plane `[a, b, c]` with `z ≈ a + b·row + c·col` over valid
/// pixels. `None` when the normal equations are singular.
pub fn fit_plane<T: Real>(z: &Array2<T>, valid: &Array2<bool>) -> Option<[T; 3]> {
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for ((r, c), &v) in valid.indexed_iter() {
        if !v {
            continue;
        }
        let row = [1.0, r as f64, c as f64];
        let y = z[[r, c]].as_f64();
        for i in 0..3 {
            atb[i] += row[i] * y;
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    solve3(ata, atb).map(|x| x.map(T::lit))
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            let pivot_row = a[col];
            for (dst, src) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                *dst -= f * src;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        let s: f64 = (i + 1..3).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Some(x)
}
