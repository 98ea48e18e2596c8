//! Minimization of the four-term fusion objective.
//!
//! Depth and intensity are updated alternately. For each block the weighted
//! ℓ1 term is majorized by a weighted quadratic (`|a| ≤ a²/(2c) + c/2`, with
//! `c` the current pair difference floored at `irls_eps`) and the Poisson term
//! by a Fisher-scoring quadratic. The resulting sparse SPD system couples
//! every pixel to its field neighbours, so one preconditioned CG solve carries
//! information across holes much wider than the field. The candidate is
//! projected onto `x ≥ 0` and accepted only if the true objective does not
//! increase (step halving otherwise), which makes the objective trace
//! non-increasing by construction.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::objective::{feasible, weighted_l1, DataTerm, ObjectiveValue};
use super::weights::{ColorSpace, WeightField};
use crate::error::{ensure_same_dims, Error, Result};
use crate::fill::{guided_fill, nearest_valid_fill};
use crate::fitting::{FitConfig, Reconstruction};
use crate::preprocess::CleanedCube;
use crate::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct FusionConfig<T> {
    /// Depth regularization strength.
    pub tau_d: T,
    /// Intensity regularization strength.
    pub tau_r: T,
    /// Colour-similarity scale, RGB units.
    #[serde(rename = "sigma_c_rgb")]
    pub sigma_c: T,
    /// Spatial decay scale on the normalized offset length.
    pub sigma_s: T,
    /// Side of the square non-local field (odd).
    #[serde(rename = "field_side_px")]
    pub field_side: usize,
    pub color_space: ColorSpace,
    pub max_iters: usize,
    /// Stop when the relative objective decrease over one sweep drops below this.
    pub rel_tol: T,
    pub cg_max_iters: usize,
    pub cg_rel_tol: T,
    /// Floor on pair differences in the ℓ1 majorizer, gate units.
    #[serde(rename = "irls_eps_depth_steps")]
    pub irls_eps_depth: T,
    /// Same, in counts.
    #[serde(rename = "irls_eps_intensity_counts")]
    pub irls_eps_intensity: T,
    /// Proximal term keeping the surrogate strictly convex.
    pub prox_delta: T,
    /// Pairs with summed weight below this are left out of the surrogate.
    pub weight_prune: T,
    pub max_backtracks: usize,
}

impl<T: Real> Default for FusionConfig<T> {
    fn default() -> Self {
        let l = T::lit;
        FusionConfig {
            tau_d: l(2.0),
            tau_r: l(0.05),
            sigma_c: l(10.0),
            sigma_s: l(0.5),
            field_side: 15,
            color_space: ColorSpace::Rgb,
            max_iters: 12,
            rel_tol: l(1e-5),
            cg_max_iters: 60,
            cg_rel_tol: l(1e-6),
            irls_eps_depth: l(1e-4),
            irls_eps_intensity: l(1e-3),
            prox_delta: l(1e-6),
            weight_prune: l(1e-6),
            max_backtracks: 8,
        }
    }
}

impl<T: Real> FusionConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: T| v > T::zero() && v.is_finite();
        if !(self.tau_d >= T::zero() && self.tau_r >= T::zero()) {
            return Err(Error::config("fusion.tau_d and fusion.tau_r must be >= 0"));
        }
        if !pos(self.sigma_c) || !pos(self.sigma_s) {
            return Err(Error::config("fusion.sigma_c_rgb and fusion.sigma_s must be > 0"));
        }
        if self.field_side.is_multiple_of(2) {
            return Err(Error::config("fusion.field_side_px must be odd"));
        }
        if !pos(self.irls_eps_depth) || !pos(self.irls_eps_intensity) || !pos(self.prox_delta) {
            return Err(Error::config("fusion solver constants must be > 0"));
        }
        if !(self.rel_tol >= T::zero()) || !(self.cg_rel_tol > T::zero()) {
            return Err(Error::config("fusion tolerances must be positive"));
        }
        Ok(())
    }
}

/// Everything the fusion consumes besides its configuration.
#[derive(Debug, Clone, Copy)]
pub struct FusionInputs<'a, T> {
    pub cleaned: &'a CleanedCube<T>,
    /// Pixels with count data under the chosen scan subset.
    pub observed: &'a Array2<bool>,
    pub depth_weights: &'a WeightField<T>,
    pub intensity_weights: &'a WeightField<T>,
    /// Edge-fitting result used as the starting point.
    pub init: &'a Reconstruction<T>,
    /// Co-registered colour image; when given, holes in the starting point
    /// are filled along colour-coherent paths instead of by plain distance.
    pub rgb: Option<&'a Array3<u8>>,
}

#[derive(Debug, Clone)]
pub struct FusionOutput<T> {
    /// NLL of the saturated model; `trace[i].nll - saturated_nll` is the
    /// fit-dependent size of the data term.
    pub saturated_nll: T,
    /// Complete rasters; every pixel is valid.
    pub reconstruction: Reconstruction<T>,
    /// Objective at the start and after every sweep.
    pub trace: Vec<ObjectiveValue<T>>,
    pub iterations: usize,
    pub converged: bool,
}

/// Symmetric pair list with summed ordered-pair weights `w_nm + w_mn`.
struct PairGraph<T> {
    a: Vec<u32>,
    b: Vec<u32>,
    w: Vec<T>,
}

impl<T: Real> PairGraph<T> {
    fn build(weights: &WeightField<T>, prune: T) -> Self {
        let (h, w) = weights.dims();
        let field = weights.field;
        let (mut a, mut b, mut wt) = (Vec::new(), Vec::new(), Vec::new());
        for r in 0..h {
            for c in 0..w {
                for m in field.center() + 1..field.len() {
                    if let Some((nr, nc)) = field.neighbor(r, c, m, h, w) {
                        let s = weights.get(r, c, m) + weights.get(nr, nc, field.mirror(m));
                        if s > prune {
                            a.push((r * w + c) as u32);
                            b.push((nr * w + nc) as u32);
                            wt.push(s);
                        }
                    }
                }
            }
        }
        PairGraph { a, b, w: wt }
    }
}

/// Sparse SPD operator `diag + Σ_p q_p (e_a - e_b)(e_a - e_b)ᵀ`.
struct Surrogate<'g, T> {
    graph: &'g PairGraph<T>,
    diag: Vec<T>,
    q: Vec<T>,
}

impl<T: Real> Surrogate<'_, T> {
    fn apply(&self, x: &[T], out: &mut [T]) {
        for (o, (&dg, &xv)) in out.iter_mut().zip(self.diag.iter().zip(x)) {
            *o = dg * xv;
        }
        for p in 0..self.q.len() {
            let (i, j) = (self.graph.a[p] as usize, self.graph.b[p] as usize);
            let f = self.q[p] * (x[i] - x[j]);
            out[i] = out[i] + f;
            out[j] = out[j] - f;
        }
    }

    fn jacobi(&self) -> Vec<T> {
        let mut m = self.diag.clone();
        for p in 0..self.q.len() {
            m[self.graph.a[p] as usize] = m[self.graph.a[p] as usize] + self.q[p];
            m[self.graph.b[p] as usize] = m[self.graph.b[p] as usize] + self.q[p];
        }
        m
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Preconditioned conjugate gradients from `x`.
fn pcg<T: Real>(op: &Surrogate<'_, T>, rhs: &[T], x: &mut [T], max_iters: usize, rel_tol: T) {
    let n = rhs.len();
    let precond = op.jacobi();
    let mut ax = vec![T::zero(); n];
    op.apply(x, &mut ax);
    let mut res: Vec<T> = rhs.iter().zip(&ax).map(|(&b, &v)| b - v).collect();
    let mut z: Vec<T> = res.iter().zip(&precond).map(|(&r, &m)| r / m).collect();
    let mut p = z.clone();
    let mut rz = dot(&res, &z);
    let target = rel_tol * dot(rhs, rhs).sqrt().max(T::min_positive_value());
    let mut ap = vec![T::zero(); n];
    for _ in 0..max_iters {
        if dot(&res, &res).sqrt() <= target {
            break;
        }
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > T::zero()) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] = x[i] + alpha * p[i];
            res[i] = res[i] - alpha * ap[i];
        }
        for i in 0..n {
            z[i] = res[i] / precond[i];
        }
        let rz_new = dot(&res, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
}

struct Problem<'a, T> {
    data: DataTerm<T>,
    depth_weights: &'a WeightField<T>,
    intensity_weights: &'a WeightField<T>,
    depth_graph: PairGraph<T>,
    intensity_graph: PairGraph<T>,
    config: &'a FusionConfig<T>,
}

impl<T: Real> Problem<'_, T> {
    fn evaluate(&self, d: &[T], r: &[T]) -> ObjectiveValue<T> {
        let ok = feasible(d) && feasible(r);
        let nll = self.data.nll(d, r);
        let rd = weighted_l1(d, self.depth_weights);
        let rr = weighted_l1(r, self.intensity_weights);
        ObjectiveValue::assemble(nll, rd, rr, self.config.tau_d, self.config.tau_r, ok)
    }

    /// Minimizer of the quadratic surrogate of one block around `x0`.
    fn surrogate_minimizer(&self, d: &[T], r: &[T], depth_block: bool) -> Vec<T> {
        let cfg = self.config;
        let (x0, graph, tau, eps) = if depth_block {
            (d, &self.depth_graph, cfg.tau_d, cfg.irls_eps_depth)
        } else {
            (r, &self.intensity_graph, cfg.tau_r, cfg.irls_eps_intensity)
        };
        let n = x0.len();
        let mut diag = vec![cfg.prox_delta; n];
        let mut rhs: Vec<T> = x0.iter().map(|&v| cfg.prox_delta * v).collect();
        for (&(g, f), &px) in self.data.derivatives(d, r, depth_block).iter().zip(&self.data.pixels) {
            diag[px] = diag[px] + f;
            rhs[px] = rhs[px] + f * x0[px] - g;
        }
        let q: Vec<T> = (0..graph.w.len())
            .map(|p| {
                let diff = (x0[graph.a[p] as usize] - x0[graph.b[p] as usize]).abs().max(eps);
                tau * graph.w[p] / diff
            })
            .collect();
        let op = Surrogate { graph, diag, q };
        let mut x = x0.to_vec();
        pcg(&op, &rhs, &mut x, cfg.cg_max_iters, cfg.cg_rel_tol);
        x
    }
}

/// Fuses sparse count data with colour-guided non-local regularization.
///
/// Starts from the edge-fitting rasters with unobserved (or invalid) pixels
/// filled from their nearest valid observed neighbour. Fails when no pixel is
/// observed.
pub fn fuse<T: Real>(inputs: FusionInputs<'_, T>, fit: &FitConfig<T>, config: &FusionConfig<T>) -> Result<FusionOutput<T>> {
    config.validate()?;
    fit.validate()?;
    let dims = inputs.cleaned.dims();
    ensure_same_dims("observation mask", inputs.observed.dim(), dims)?;
    ensure_same_dims("depth weights", inputs.depth_weights.dims(), dims)?;
    ensure_same_dims("intensity weights", inputs.intensity_weights.dims(), dims)?;
    ensure_same_dims("initial rasters", inputs.init.dims(), dims)?;

    let data = DataTerm::new(inputs.cleaned, inputs.observed, fit.h, fit.edge_function)?;
    if data.is_empty() {
        return Err(Error::data("observation mask selects no usable pixel; nothing anchors the solution"));
    }

    let seeds = Array2::from_shape_fn(dims, |(r, c)| {
        inputs.observed[[r, c]] && inputs.cleaned.valid[[r, c]] && inputs.init.valid[[r, c]]
    });
    if !seeds.iter().any(|&s| s) {
        return Err(Error::data("no observed pixel has a valid fit to start from"));
    }
    if let Some(rgb) = inputs.rgb {
        if rgb.dim() != (dims.0, dims.1, 3) {
            return Err(Error::dims(format!("rgb {:?} vs raster {}x{}", rgb.dim(), dims.0, dims.1)));
        }
    }
    let start = |values: &Array2<T>| -> Vec<T> {
        let filled = match inputs.rgb {
            Some(rgb) => guided_fill(values, &seeds, rgb, config.field_side, config.sigma_c.as_f64()),
            None => nearest_valid_fill(values, &seeds),
        }
        .expect("seeds checked above");
        filled.iter().map(|&v| v.max(T::zero())).collect()
    };
    let mut d = start(&inputs.init.depth_index);
    let mut r = start(&inputs.init.intensity);

    let problem = Problem {
        data,
        depth_weights: inputs.depth_weights,
        intensity_weights: inputs.intensity_weights,
        depth_graph: PairGraph::build(inputs.depth_weights, config.weight_prune),
        intensity_graph: PairGraph::build(inputs.intensity_weights, config.weight_prune),
        config,
    };

    let saturated_nll = problem.data.saturated_nll();
    let mut current = problem.evaluate(&d, &r);
    let mut trace = vec![current];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..config.max_iters {
        iterations += 1;
        let before = current.total;
        for depth_block in [true, false] {
            let target = problem.surrogate_minimizer(&d, &r, depth_block);
            let x0 = if depth_block { d.clone() } else { r.clone() };
            let mut t = T::one();
            for _ in 0..=config.max_backtracks {
                let cand: Vec<T> = x0
                    .iter()
                    .zip(&target)
                    .map(|(&a, &b)| (a + t * (b - a)).max(T::zero()))
                    .collect();
                let value = if depth_block { problem.evaluate(&cand, &r) } else { problem.evaluate(&d, &cand) };
                if value.total <= current.total {
                    if depth_block {
                        d = cand;
                    } else {
                        r = cand;
                    }
                    current = value;
                    break;
                }
                t = t * T::lit(0.5);
            }
        }
        trace.push(current);
        let scale = before.abs().max(T::one());
        if (before - current.total) <= config.rel_tol * scale {
            converged = true;
            break;
        }
    }

    let to_raster = |v: Vec<T>| Array2::from_shape_vec(dims, v).expect("raster shape");
    Ok(FusionOutput {
        saturated_nll,
        reconstruction: Reconstruction {
            depth_index: to_raster(d),
            intensity: to_raster(r),
            valid: Array2::from_elem(dims, true),
        },
        trace,
        iterations,
        converged,
    })
}
