mod common;

use gatedepth::preprocess::{estimate_background, linearize_binary};
use gatedepth::{
    expected_cube, preprocess, simulate, simulate_positions, DarkCountSpec, GateConfig, NoiseConfig, PreprocessConfig,
    SampleCube, ScanPattern, SpotProfile,
};
use ndarray::Array3;
use proptest::prelude::*;

fn flat(h: usize, w: usize, k: f64, gate: &GateConfig<f64>) -> gatedepth::GroundTruthScene<f64> {
    let depth = common::depth_of_index(gate, k);
    common::scene_from(h, w, |_, _| depth, 0.6, |_, _| [10, 20, 30])
}

#[test]
fn expected_cube_matches_binary_response_oracle() {
    let gate = GateConfig::<f64>::default();
    let (h, w) = (10, 12);
    let scene = common::scene_from(h, w, |r, c| 150.0 + 0.05 * r as f64 - 0.02 * c as f64, 0.55, |_, _| [0; 3]);
    let scan = ScanPattern::tiling(h, w, 2, 6, 200);
    let mut noise = NoiseConfig::signal_only(0.9, h, w, 1);
    noise.background_pp = 0.01;
    noise.dcr_map = ndarray::Array2::from_shape_fn((h, w), |(r, c)| 100.0 * (r + c) as f64);
    let all: Vec<usize> = (0..scan.num_positions()).collect();
    let cube = expected_cube(&scene, &gate, &scan, &noise, &all).unwrap();
    for ((k, r, c), &got) in cube.data.indexed_iter() {
        let d = common::depth_of_index(&gate, 0.0);
        let d_idx = (scene.depth_m[[r, c]] - d) / gate.range_per_step_m;
        let b = 0.01 + 100.0 * (r + c) as f64 * noise.exposure_s;
        let lam = common::edge(k as f64, d_idx, 0.55 * 0.9, 1.0) + b;
        let want = 200.0 * (1.0 - (-lam).exp());
        assert!((got - want).abs() < 1e-9, "({k},{r},{c}) {got} vs {want}");
    }
}

#[test]
fn simulated_means_match_expectation() {
    let gate = GateConfig::<f64> { num_gates: 12, ..GateConfig::default() };
    let (h, w) = (60, 60);
    let scene = flat(h, w, 6.0, &gate);
    let scan = ScanPattern::tiling(h, w, 1, 60, 256);
    let noise = NoiseConfig::signal_only(0.8, h, w, 77);
    let cube = simulate(&scene, &gate, &scan, &noise).unwrap();
    let exp = expected_cube(&scene, &gate, &scan, &noise, &[0]).unwrap();
    let n = (h * w) as f64;
    for k in 0..12 {
        let plane = cube.counts.index_axis(ndarray::Axis(0), k);
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mu = exp.data[[k, 0, 0]];
        let p = mu / 256.0;
        let se = (256.0 * p * (1.0 - p) / n).sqrt();
        assert!((mean - mu).abs() <= 4.0 * se + 1e-12, "gate {k}: {mean} vs {mu} (se {se})");
        assert!(plane.iter().all(|&v| v <= 256));
    }
}

#[test]
fn seeds_and_scheduling() {
    let gate = GateConfig::<f64>::default();
    let (h, w) = (20, 20);
    let scene = flat(h, w, 20.0, &gate);
    let scan = ScanPattern::tiling(h, w, 2, 10, 64);
    let noise = NoiseConfig::signal_only(0.5, h, w, 3);
    let a = simulate_positions(&scene, &gate, &scan, &noise, &[0, 3]).unwrap();
    let b = simulate_positions(&scene, &gate, &scan, &noise, &[3, 0]).unwrap();
    assert_eq!(a, b, "disjoint footprints: order must not matter");
    let other = NoiseConfig { rng_seed: 4, ..noise.clone() };
    assert_ne!(a, simulate_positions(&scene, &gate, &scan, &other, &[0, 3]).unwrap());
    // pixels outside the selected spots stay dark
    let mask = scan.coverage_mask(&[0, 3], h, w);
    for ((_, r, c), &v) in a.counts.indexed_iter() {
        if !mask[[r, c]] {
            assert_eq!(v, 0);
        }
    }
    assert!(simulate_positions(&scene, &gate, &scan, &noise, &[4]).is_err());
}

#[test]
fn pixels_read_from_most_strongly_lit_spot() {
    let scan = ScanPattern {
        spot_profile: SpotProfile::Gaussian { sigma_px: 6.0 },
        ..ScanPattern::tiling(30, 30, 3, 20, 16)
    };
    let all: Vec<usize> = (0..9).collect();
    let assign = scan.assign_pixels(&all, 30, 30);
    for ((r, c), slot) in assign.indexed_iter() {
        let (p, _) = slot.expect("tiling covers everything");
        // oracle: among spots whose footprint contains the pixel, the nearest centre
        let best = all
            .iter()
            .filter(|&&q| {
                let f = scan.footprint(q, 30, 30);
                (f.row0..f.row1).contains(&r) && (f.col0..f.col1).contains(&c)
            })
            .map(|&q| {
                let (cr, cc) = scan.spot_center(q);
                ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2), q)
            })
            .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a });
        let (cr, cc) = scan.spot_center(p as usize);
        let dp = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
        assert!((dp - best.0).abs() < 1e-9, "pixel ({r},{c}) read from {p}, nearest is {}", best.1);
    }
}

#[test]
fn linearization_inverts_the_binary_response() {
    let gate = GateConfig::<f64>::default();
    let (h, w) = (6, 6);
    let scene = flat(h, w, 17.5, &gate);
    let scan = ScanPattern::tiling(h, w, 1, 6, 256);
    let mut noise = NoiseConfig::signal_only(3.0, h, w, 0);
    noise.background_pp = 0.02;
    let cube = expected_cube(&scene, &gate, &scan, &noise, &[0]).unwrap();
    let lin = linearize_binary(&cube);
    for ((k, _, _), &v) in lin.data.indexed_iter() {
        let lam = common::edge(k as f64, 17.5, 0.6 * 3.0, 1.0) + 0.02;
        assert!((v / (256.0 * lam) - 1.0).abs() < 1e-9);
    }
    // background subtraction leaves the bare edge
    let pre = preprocess(&cube, &PreprocessConfig::default(), Some(&noise.dcr_map)).unwrap();
    for ((k, _, _), &v) in pre.cleaned.samples.indexed_iter() {
        let want = 256.0 * common::edge(k as f64, 17.5, 1.8, 1.0);
        assert!((v - want).abs() < 1e-6 * 256.0, "gate {k}: {v} vs {want}");
    }
}

#[test]
fn hot_pixels_follow_the_dcr_threshold() {
    let (h, w) = (40, 40);
    let spec = DarkCountSpec::default();
    let dcr = spec.sample_map::<f64>(h, w, 11);
    let hot_expected = dcr.iter().filter(|&&v| v > 10_000.0).count();
    assert!(hot_expected > 0);
    let cube = SampleCube { data: Array3::from_elem((8, h, w), 0.0), bitplanes: 256 };
    let pre = preprocess(&cube, &PreprocessConfig::default(), Some(&dcr)).unwrap();
    assert_eq!(pre.hot_mask.count(), hot_expected);
    for ((r, c), &v) in pre.cleaned.valid.indexed_iter() {
        assert_eq!(v, dcr[[r, c]] <= 10_000.0);
    }
}

proptest! {
    #[test]
    fn floor_is_the_calibration_median(vals in proptest::collection::vec(0.0f64..50.0, 5 * 3), tail in 0.0f64..200.0) {
        let mut data = Array3::from_elem((8, 1, 3), tail);
        for (i, v) in vals.iter().enumerate() {
            data[[i / 3, 0, i % 3]] = *v;
        }
        let cube = SampleCube { data, bitplanes: 256 };
        let bg = estimate_background(&cube, &[0, 1, 2, 3, 4]).unwrap();
        for c in 0..3 {
            let mut col: Vec<f64> = (0..5).map(|g| vals[g * 3 + c]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            prop_assert_eq!(bg.0[[0, c]], col[2]);
        }
    }

    #[test]
    fn cleaned_samples_are_non_negative(vals in proptest::collection::vec(0u16..=64, 10 * 2 * 2)) {
        let data = Array3::from_shape_vec((10, 2, 2), vals.iter().map(|&v| v as f64).collect()).unwrap();
        let pre = preprocess(&SampleCube { data, bitplanes: 64 }, &PreprocessConfig::default(), None).unwrap();
        prop_assert!(pre.cleaned.samples.iter().all(|&v| v >= 0.0 && v.is_finite()));
    }
}
