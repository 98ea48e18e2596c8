//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use gatedepth::{GateConfig, GroundTruthScene};
use ndarray::{Array2, Array3};

/// erf from its Maclaurin series for |x| < 3 and the Laplace continued
/// fraction of erfc beyond.
pub fn erf(x: f64) -> f64 {
    let a = x.abs();
    let v = if a < 3.0 {
        let mut term = a;
        let mut sum = a;
        let mut n = 0.0;
        while term.abs() > 1e-17 * sum.abs().max(1e-300) {
            n += 1.0;
            term *= -a * a / n;
            sum += term / (2.0 * n + 1.0);
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    } else {
        let mut f = a;
        for n in (1..80).rev() {
            f = a + (n as f64 / 2.0) / f;
        }
        1.0 - (-a * a).exp() / (std::f64::consts::PI.sqrt() * f)
    };
    v.copysign(x)
}

/// `(r/2)(1 + erf((k - d)/h))`.
pub fn edge(k: f64, d: f64, r: f64, h: f64) -> f64 {
    0.5 * r * (1.0 + erf((k - d) / h))
}

pub fn edge_profile(len: usize, d: f64, r: f64, h: f64) -> Vec<f64> {
    (0..len).map(|k| edge(k as f64, d, r, h)).collect()
}

fn sse_at(profile: &[f64], d: f64, h: f64) -> (f64, f64) {
    let s: Vec<f64> = (0..profile.len()).map(|k| edge(k as f64, d, 1.0, h)).collect();
    let num: f64 = profile.iter().zip(&s).map(|(y, s)| y * s).sum();
    let den: f64 = s.iter().map(|s| s * s).sum();
    let r = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
    let e = profile.iter().zip(&s).map(|(y, s)| (y - r * s).powi(2)).sum();
    (e, r)
}

/// Least-squares `(d, r)`: grid search over `d` with the closed-form
/// amplitude, then golden-section refinement around the best grid point.
pub fn grid_fit(profile: &[f64], h: f64) -> (f64, f64) {
    let kmax = profile.len() as f64;
    let step = 0.05;
    let mut best = (f64::INFINITY, 0.0);
    let mut d = 0.0;
    while d <= kmax {
        let (e, _) = sse_at(profile, d, h);
        if e < best.0 {
            best = (e, d);
        }
        d += step;
    }
    let (mut a, mut b) = ((best.1 - step).max(0.0), best.1 + step);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let x1 = b - g * (b - a);
        let x2 = a + g * (b - a);
        if sse_at(profile, x1, h).0 < sse_at(profile, x2, h).0 {
            b = x2;
        } else {
            a = x1;
        }
    }
    let d = 0.5 * (a + b);
    (d, sse_at(profile, d, h).1)
}

/// Mean absolute RGB difference between two pixels.
pub fn color_diff(rgb: &Array3<u8>, a: (usize, usize), b: (usize, usize)) -> f64 {
    (0..3).map(|k| (rgb[[a.0, a.1, k]] as f64 - rgb[[b.0, b.1, k]] as f64).abs()).sum::<f64>() / 3.0
}

/// `Σ λ - y ln λ` with the same log guard as the library.
pub fn poisson_nll(y: &[f64], lam: &[f64]) -> f64 {
    y.iter().zip(lam).map(|(&y, &l)| l - y * (l + 1e-12).ln()).sum()
}

pub fn sample_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Flat scene with a per-pixel depth function and uniform reflectivity.
pub fn scene_from(
    h: usize,
    w: usize,
    depth: impl Fn(usize, usize) -> f64,
    refl: f64,
    rgb: impl Fn(usize, usize) -> [u8; 3],
) -> GroundTruthScene<f64> {
    GroundTruthScene::new(
        Array2::from_shape_fn((h, w), |(r, c)| depth(r, c)),
        Array2::from_elem((h, w), refl),
        Array3::from_shape_fn((h, w, 3), |(r, c, k)| rgb(r, c)[k]),
    )
    .unwrap()
}

/// Depth in metres of gate index `k` under `gate`.
pub fn depth_of_index(gate: &GateConfig<f64>, k: f64) -> f64 {
    gate.base_range_m + (k - gate.index_offset) * gate.range_per_step_m
}
