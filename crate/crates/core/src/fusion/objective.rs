//! Terms of the fusion objective
//! `C(d, r) = NLL(d, r) + ι≥0(d, r) + τ_d·R(d; w^d) + τ_r·R(r; w^r)`.

use ndarray::Array2;
use rayon::prelude::*;

use super::weights::WeightField;
use crate::error::{ensure_same_dims, Result};
use crate::fitting::EdgeFunction;
use crate::preprocess::CleanedCube;
use crate::Real;

/// Guard inside the logarithm so `λ = 0, y = 0` contributes nothing.
pub const LOG_GUARD: f64 = 1e-12;

/// Poisson data term over the observed pixels, profiles stored pixel-major.
#[derive(Debug, Clone)]
pub struct DataTerm<T> {
    /// Linear (row-major) indices of observed pixels.
    pub pixels: Vec<usize>,
    profiles: Vec<T>,
    num_gates: usize,
    h: T,
    edge: EdgeFunction,
}

impl<T: Real> DataTerm<T> {
    /// Observed pixels are those set in `mask` and valid in the cube.
    pub fn new(cleaned: &CleanedCube<T>, mask: &Array2<bool>, h: T, edge: EdgeFunction) -> Result<Self> {
        let (height, width) = cleaned.dims();
        ensure_same_dims("observation mask vs cube", mask.dim(), (height, width))?;
        let k = cleaned.num_gates();
        let pixels: Vec<usize> = (0..height * width)
            .filter(|&n| mask[[n / width, n % width]] && cleaned.valid[[n / width, n % width]])
            .collect();
        let mut profiles = Vec::with_capacity(pixels.len() * k);
        for &n in &pixels {
            profiles.extend((0..k).map(|g| cleaned.samples[[g, n / width, n % width]]));
        }
        Ok(DataTerm { pixels, profiles, num_gates: k, h, edge })
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    fn profile(&self, i: usize) -> &[T] {
        &self.profiles[i * self.num_gates..(i + 1) * self.num_gates]
    }

    /// `Σ_k λ_k - y_k·ln(λ_k + ε)` for one pixel.
    pub fn pixel_nll(&self, i: usize, d: T, r: T) -> T {
        let eps = T::lit(LOG_GUARD);
        self.profile(i)
            .iter()
            .enumerate()
            .map(|(k, &y)| {
                let lam = r * self.edge.shape(T::lit(k as f64), d, self.h);
                lam - y * (lam + eps).ln()
            })
            .sum()
    }

    /// Total NLL for flat row-major rasters.
    pub fn nll(&self, d: &[T], r: &[T]) -> T {
        self.pixels
            .par_iter()
            .enumerate()
            .map(|(i, &n)| self.pixel_nll(i, d[n], r[n]))
            .collect::<Vec<T>>()
            .into_iter()
            .sum()
    }

    /// NLL of the saturated model (`λ = y` everywhere). `nll - saturated_nll`
    /// is half the Poisson deviance, the part of the data term that depends
    /// on the fit.
    pub fn saturated_nll(&self) -> T {
        let eps = T::lit(LOG_GUARD);
        self.profiles.iter().map(|&y| y - y * (y + eps).ln()).sum()
    }

    /// Gradient and Fisher curvature of the NLL per observed pixel, with
    /// respect to depth (`wrt_depth`) or intensity.
    pub fn derivatives(&self, d: &[T], r: &[T], wrt_depth: bool) -> Vec<(T, T)> {
        let eps = T::lit(LOG_GUARD);
        let h = self.h;
        self.pixels
            .par_iter()
            .enumerate()
            .map(|(i, &n)| {
                let (dn, rn) = (d[n], r[n]);
                let mut g = T::zero();
                let mut f = T::zero();
                if wrt_depth && !(h > T::zero()) {
                    return (g, f);
                }
                for (k, &y) in self.profile(i).iter().enumerate() {
                    let kk = T::lit(k as f64);
                    let s = self.edge.shape(kk, dn, h);
                    let lam = rn * s + eps;
                    let dlam = if wrt_depth { -rn * self.edge.unit_slope((kk - dn) / h) / h } else { s };
                    g = g + (T::one() - y / lam) * dlam;
                    f = f + dlam * dlam / lam;
                }
                (g, f)
            })
            .collect()
    }
}

/// `Σ_n Σ_m w_nm·|x_n - x_m|` over ordered pairs inside the image.
pub fn weighted_l1<T: Real>(x: &[T], weights: &WeightField<T>) -> T {
    let (h, w) = weights.dims();
    let field = weights.field;
    (0..h)
        .into_par_iter()
        .map(|r| {
            let mut acc = T::zero();
            for c in 0..w {
                let xn = x[r * w + c];
                for m in 0..field.len() {
                    let wt = weights.weights[[r, c, m]];
                    if wt == T::zero() {
                        continue;
                    }
                    if let Some((nr, nc)) = field.neighbor(r, c, m, h, w) {
                        acc = acc + wt * (xn - x[nr * w + nc]).abs();
                    }
                }
            }
            acc
        })
        .collect::<Vec<T>>()
        .into_iter()
        .sum()
}

/// Poisson negative log-likelihood of `(d, r)` over observed pixels.
pub fn negative_log_likelihood<T: Real>(
    d: &Array2<T>,
    r: &Array2<T>,
    cleaned: &CleanedCube<T>,
    mask: &Array2<bool>,
    h: T,
    edge: EdgeFunction,
) -> Result<T> {
    ensure_same_dims("depth raster vs cube", d.dim(), cleaned.dims())?;
    ensure_same_dims("intensity raster vs cube", r.dim(), cleaned.dims())?;
    let term = DataTerm::new(cleaned, mask, h, edge)?;
    let d = d.as_standard_layout();
    let r = r.as_standard_layout();
    Ok(term.nll(d.as_slice().expect("contiguous"), r.as_slice().expect("contiguous")))
}

/// Breakdown of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue<T> {
    pub nll: T,
    pub reg_depth: T,
    pub reg_intensity: T,
    pub total: T,
}

impl<T: Real> ObjectiveValue<T> {
    pub fn assemble(nll: T, reg_depth: T, reg_intensity: T, tau_d: T, tau_r: T, feasible: bool) -> Self {
        let total = if feasible { nll + tau_d * reg_depth + tau_r * reg_intensity } else { T::infinity() };
        ObjectiveValue { nll, reg_depth, reg_intensity, total }
    }
}

/// Non-negativity indicator: `true` when every entry is ≥ 0.
pub fn feasible<T: Real>(x: &[T]) -> bool {
    x.iter().all(|&v| v >= T::zero())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitting::erf_model;
    use crate::fusion::weights::{compute_color_differences, compute_intensity_weights};
    use ndarray::Array3;

    fn single(y: f64) -> CleanedCube<f64> {
        CleanedCube::from_samples(Array3::from_elem((1, 1, 1), y))
    }

    #[test]
    fn zero_data_zero_intensity() {
        let cube = CleanedCube::from_samples(Array3::zeros((5, 2, 2)));
        let z = Array2::zeros((2, 2));
        let mask = Array2::from_elem((2, 2), true);
        let v = negative_log_likelihood(&Array2::from_elem((2, 2), 3.0), &z, &cube, &mask, 1.0, EdgeFunction::Erf).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn single_sample_matches_scalar() {
        // gate 0, edge at 0 → λ = r/2; choose y = λ
        let r = 7.0;
        let lam = r / 2.0;
        let cube = single(lam);
        let mask = Array2::from_elem((1, 1), true);
        let v = negative_log_likelihood(
            &Array2::zeros((1, 1)),
            &Array2::from_elem((1, 1), r),
            &cube,
            &mask,
            1.0,
            EdgeFunction::Erf,
        )
        .unwrap();
        let want = lam - lam * (lam + LOG_GUARD).ln();
        assert!((v - want).abs() < 1e-9);
    }

    #[test]
    fn unobserved_pixels_do_not_count() {
        let cube = single(5.0);
        let mask = Array2::from_elem((1, 1), false);
        let v = negative_log_likelihood(&Array2::zeros((1, 1)), &Array2::from_elem((1, 1), 3.0), &cube, &mask, 1.0, EdgeFunction::Erf).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn generating_parameters_are_a_local_minimum() {
        let (d0, r0, h) = (12.3, 80.0, 1.1);
        let samples = Array3::from_shape_fn((40, 1, 1), |(k, _, _)| erf_model(k as f64, d0, r0, h, 0.0));
        let cube = CleanedCube::from_samples(samples);
        let term = DataTerm::new(&cube, &Array2::from_elem((1, 1), true), h, EdgeFunction::Erf).unwrap();
        let base = term.pixel_nll(0, d0, r0);
        for dd in [-0.2, -0.05, -0.01, 0.0, 0.01, 0.05, 0.2] {
            for dr in [-2.0, -0.1, 0.0, 0.1, 2.0] {
                assert!(term.pixel_nll(0, d0 + dd, r0 + dr) >= base - 1e-9);
            }
        }
        let g = term.derivatives(&[d0], &[r0], true);
        assert!(g[0].0.abs() < 1e-6 && g[0].1 > 0.0);
        let g = term.derivatives(&[d0], &[r0], false);
        assert!(g[0].0.abs() < 1e-6 && g[0].1 > 0.0);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let samples = Array3::from_shape_fn((30, 1, 1), |(k, _, _)| {
            (1.0 + 0.2 * (k as f64).sin()) * erf_model(k as f64, 9.0, 50.0, 1.3, 0.0)
        });
        let cube = CleanedCube::from_samples(samples);
        let term = DataTerm::new(&cube, &Array2::from_elem((1, 1), true), 1.3, EdgeFunction::Erf).unwrap();
        let (d, r) = (10.2, 41.0);
        let step = 1e-6;
        let fd_d = (term.pixel_nll(0, d + step, r) - term.pixel_nll(0, d - step, r)) / (2.0 * step);
        let fd_r = (term.pixel_nll(0, d, r + step) - term.pixel_nll(0, d, r - step)) / (2.0 * step);
        assert!((term.derivatives(&[d], &[r], true)[0].0 - fd_d).abs() < 1e-4 * (1.0 + fd_d.abs()));
        assert!((term.derivatives(&[d], &[r], false)[0].0 - fd_r).abs() < 1e-4 * (1.0 + fd_r.abs()));
    }

    #[test]
    fn l1_regularizer_brute_force() {
        let img = Array3::from_shape_fn((4, 5, 3), |(r, c, k)| ((r * 37 + c * 11 + k * 5) % 256) as u8);
        let w = compute_intensity_weights(&compute_color_differences::<f64>(&img, 3).unwrap(), 20.0).unwrap();
        let x: Vec<f64> = (0..20).map(|i| ((i * 7) % 5) as f64).collect();
        let mut want = 0.0;
        for r in 0..4isize {
            for c in 0..5isize {
                for m in 0..9usize {
                    let (dr, dc) = (m as isize / 3 - 1, m as isize % 3 - 1);
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= 4 || nc >= 5 {
                        continue;
                    }
                    let wt = w.get(r as usize, c as usize, m);
                    want += wt * (x[(r * 5 + c) as usize] - x[(nr * 5 + nc) as usize]).abs();
                }
            }
        }
        assert!((weighted_l1(&x, &w) - want).abs() < 1e-9);
        assert_eq!(weighted_l1(&[2.5; 20], &w), 0.0);
    }
}
