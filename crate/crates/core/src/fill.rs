//! Hole filling: nearest valid pixel (exact Euclidean feature transform) and
//! a colour-guided geodesic variant.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ndarray::{Array2, Array3};

/// For every pixel, the coordinates of a valid pixel at minimal Euclidean
/// distance. `None` when nothing is valid.
///
/// Separable lower-envelope transform: a column pass finds the nearest valid
/// row per column, a row pass minimizes `(c - c')² + g(c')²` over columns.
pub fn nearest_valid_index(valid: &Array2<bool>) -> Option<Array2<(usize, usize)>> {
    let (h, w) = valid.dim();
    if !valid.iter().any(|&v| v) {
        return None;
    }
    // column pass: vertical distance to the nearest valid row
    let mut g = Array2::<f64>::from_elem((h, w), f64::INFINITY);
    let mut src_row = Array2::<usize>::zeros((h, w));
    for c in 0..w {
        let mut last: Option<usize> = None;
        for r in 0..h {
            if valid[[r, c]] {
                last = Some(r);
            }
            if let Some(lr) = last {
                g[[r, c]] = (r - lr) as f64;
                src_row[[r, c]] = lr;
            }
        }
        let mut next: Option<usize> = None;
        for r in (0..h).rev() {
            if valid[[r, c]] {
                next = Some(r);
            }
            if let Some(nr) = next {
                let d = (nr - r) as f64;
                if d < g[[r, c]] {
                    g[[r, c]] = d;
                    src_row[[r, c]] = nr;
                }
            }
        }
    }

    let mut out = Array2::from_elem((h, w), (0usize, 0usize));
    let mut f = vec![0.0f64; w];
    let mut v = vec![0usize; w];
    let mut z = vec![0.0f64; w + 1];
    for r in 0..h {
        for c in 0..w {
            let gv = g[[r, c]];
            f[c] = if gv.is_finite() { gv * gv } else { f64::INFINITY };
        }
        // lower envelope of parabolas rooted at finite entries
        let mut k: isize = -1;
        for q in 0..w {
            if !f[q].is_finite() {
                continue;
            }
            let qf = q as f64;
            let mut s = f64::NEG_INFINITY;
            while k >= 0 {
                let p = v[k as usize];
                let pf = p as f64;
                s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf);
                if s <= z[k as usize] {
                    k -= 1;
                } else {
                    break;
                }
            }
            k += 1;
            let ku = k as usize;
            v[ku] = q;
            z[ku] = if ku == 0 { f64::NEG_INFINITY } else { s };
            z[ku + 1] = f64::INFINITY;
        }
        let mut j = 0usize;
        for q in 0..w {
            while z[j + 1] < q as f64 {
                j += 1;
            }
            let col = v[j];
            out[[r, q]] = (src_row[[r, col]], col);
        }
    }
    Some(out)
}

/// Copies each invalid pixel's value from its nearest valid pixel.
pub fn nearest_valid_fill<T: Copy>(values: &Array2<T>, valid: &Array2<bool>) -> Option<Array2<T>> {
    let idx = nearest_valid_index(valid)?;
    Some(Array2::from_shape_fn(values.dim(), |(r, c)| {
        if valid[[r, c]] {
            values[[r, c]]
        } else {
            values[idx[[r, c]]]
        }
    }))
}

/// Per-pixel path cost in [`guided_nearest_index`]; breaks ties inside
/// uniformly coloured regions in favour of nearby sources.
pub const LENGTH_COST: f64 = 0.01;

/// Geodesic source assignment. Paths hop between pixels at most
/// `field_side / 2` apart in each direction (the non-local field); a hop
/// costs `Δ/σ_c + LENGTH_COST·length`, `Δ` being the mean absolute RGB
/// difference of its end points. Paths can therefore cross thin gaps between
/// same-coloured regions but pay for every change of colour.
/// Returns the source pixel of every pixel, or `None` when nothing is valid.
pub fn guided_nearest_index(
    valid: &Array2<bool>,
    rgb: &Array3<u8>,
    field_side: usize,
    sigma_c: f64,
) -> Option<Array2<(usize, usize)>> {
    let (h, w) = valid.dim();
    assert_eq!(rgb.dim(), (h, w, 3), "rgb must match the validity raster");
    assert!(sigma_c > 0.0, "sigma_c must be positive");
    let half = (field_side / 2).max(1) as isize;
    let hops: Vec<(isize, isize, f64)> = (-half..=half)
        .flat_map(|dr| (-half..=half).map(move |dc| (dr, dc)))
        .filter(|&(dr, dc)| (dr, dc) != (0, 0))
        .map(|(dr, dc)| (dr, dc, LENGTH_COST * ((dr * dr + dc * dc) as f64).sqrt()))
        .collect();
    let mut dist = vec![f64::INFINITY; h * w];
    let mut src = vec![usize::MAX; h * w];
    // costs are non-negative, so their IEEE bit patterns order like the values
    let mut heap = BinaryHeap::new();
    for ((r, c), &v) in valid.indexed_iter() {
        if v {
            let n = r * w + c;
            dist[n] = 0.0;
            src[n] = n;
            heap.push(Reverse((0u64, n)));
        }
    }
    if heap.is_empty() {
        return None;
    }
    let scale = 1.0 / (3.0 * sigma_c);
    while let Some(Reverse((bits, n))) = heap.pop() {
        let cost = f64::from_bits(bits);
        if cost > dist[n] {
            continue;
        }
        let (r, c) = (n / w, n % w);
        let here = [rgb[[r, c, 0]] as i32, rgb[[r, c, 1]] as i32, rgb[[r, c, 2]] as i32];
        for &(dr, dc, len) in &hops {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            let m = nr * w + nc;
            let delta: i32 = (0..3).map(|k| (here[k] - rgb[[nr, nc, k]] as i32).abs()).sum();
            let next = cost + delta as f64 * scale + len;
            if next < dist[m] {
                dist[m] = next;
                src[m] = src[n];
                heap.push(Reverse((next.to_bits(), m)));
            }
        }
    }
    Some(Array2::from_shape_fn((h, w), |(r, c)| {
        let s = src[r * w + c];
        (s / w, s % w)
    }))
}

/// Copies each invalid pixel's value from its geodesically nearest valid
/// pixel; see [`guided_nearest_index`].
pub fn guided_fill<T: Copy>(
    values: &Array2<T>,
    valid: &Array2<bool>,
    rgb: &Array3<u8>,
    field_side: usize,
    sigma_c: f64,
) -> Option<Array2<T>> {
    let idx = guided_nearest_index(valid, rgb, field_side, sigma_c)?;
    Some(Array2::from_shape_fn(values.dim(), |(r, c)| values[idx[[r, c]]]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_nearest_sq(valid: &Array2<bool>, r: usize, c: usize) -> usize {
        valid
            .indexed_iter()
            .filter(|(_, &v)| v)
            .map(|((vr, vc), _)| (vr as isize - r as isize).pow(2) as usize + (vc as isize - c as isize).pow(2) as usize)
            .min()
            .unwrap()
    }

    #[test]
    fn nothing_valid_gives_none() {
        assert!(nearest_valid_index(&Array2::from_elem((3, 3), false)).is_none());
    }

    #[test]
    fn valid_pixels_map_to_themselves() {
        let valid = Array2::from_shape_fn((5, 7), |(r, c)| (r + c) % 3 == 0);
        let idx = nearest_valid_index(&valid).unwrap();
        for ((r, c), &v) in valid.indexed_iter() {
            if v {
                assert_eq!(idx[[r, c]], (r, c));
            }
        }
    }

    #[test]
    fn fill_copies_from_single_seed() {
        let mut valid = Array2::from_elem((4, 4), false);
        valid[[2, 1]] = true;
        let vals = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64);
        let out = nearest_valid_fill(&vals, &valid).unwrap();
        assert!(out.iter().all(|&v| v == 9.0));
    }

    #[test]
    fn guided_fill_follows_colour() {
        // left half dark, right half bright; the right seed sits closer to
        // the boundary than the left one
        let rgb = Array3::from_shape_fn((9, 12, 3), |(_, c, _)| if c < 6 { 20u8 } else { 220u8 });
        let mut valid = Array2::from_elem((9, 12), false);
        valid[[4, 0]] = true;
        valid[[4, 8]] = true;
        let vals = Array2::from_shape_fn((9, 12), |(_, c)| if c < 6 { 1.0 } else { 2.0 });
        let out = guided_fill(&vals, &valid, &rgb, 3, 10.0).unwrap();
        assert_eq!(out, vals);
        let plain = nearest_valid_fill(&vals, &valid).unwrap();
        assert_eq!(plain[[4, 5]], 2.0);
        assert!(guided_nearest_index(&Array2::from_elem((9, 12), false), &rgb, 3, 10.0).is_none());
    }

    #[test]
    fn guided_fill_on_flat_colour_is_a_nearest_fill() {
        let rgb = Array3::from_elem((7, 7, 3), 50u8);
        let mut valid = Array2::from_elem((7, 7), false);
        valid[[0, 0]] = true;
        valid[[6, 6]] = true;
        let vals = Array2::from_shape_fn((7, 7), |(r, c)| (r * 7 + c) as f64);
        let out = guided_fill(&vals, &valid, &rgb, 3, 10.0).unwrap();
        assert_eq!(out[[1, 1]], 0.0);
        assert_eq!(out[[5, 6]], 48.0);
    }

    #[test]
    fn guided_fill_jumps_thin_gaps_within_the_field() {
        // two bright regions split by a 2-px dark stripe; only the upper one
        // has a source, the dark side has its own
        let rgb = Array3::from_shape_fn((12, 6, 3), |(r, _, _)| if r == 5 || r == 6 { 0u8 } else { 200u8 });
        let mut valid = Array2::from_elem((12, 6), false);
        valid[[0, 0]] = true;
        valid[[5, 0]] = true;
        let vals = Array2::from_shape_fn((12, 6), |(r, _)| r as f64);
        let wide = guided_fill(&vals, &valid, &rgb, 7, 10.0).unwrap();
        assert_eq!(wide[[11, 5]], 0.0);
        assert_eq!(wide[[6, 5]], 5.0);
        // a 3×3 field cannot step over the stripe without changing colour
        let narrow = guided_fill(&vals, &valid, &rgb, 3, 10.0).unwrap();
        assert_eq!(narrow[[11, 5]], 5.0);
    }

    proptest! {
        #[test]
        fn matches_brute_force_distance(bits in proptest::collection::vec(proptest::bool::weighted(0.15), 13 * 17)) {
            let valid = Array2::from_shape_vec((13, 17), bits).unwrap();
            prop_assume!(valid.iter().any(|&v| v));
            let idx = nearest_valid_index(&valid).unwrap();
            for r in 0..13 {
                for c in 0..17 {
                    let (sr, sc) = idx[[r, c]];
                    prop_assert!(valid[[sr, sc]]);
                    let d2 = (sr as isize - r as isize).pow(2) as usize + (sc as isize - c as isize).pow(2) as usize;
                    prop_assert_eq!(d2, brute_nearest_sq(&valid, r, c));
                }
            }
        }
    }
}
