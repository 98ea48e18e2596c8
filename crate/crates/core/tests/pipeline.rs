use gatedepth::eval::MetricsReport;
use gatedepth::pipeline::{calibrate_signal_level, fraction_tag, measure_patch_stddev, run_stage, subsample, RunConfig, Stage};
use gatedepth::ScanPattern;

fn small(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::reference(seed);
    cfg.scene.height_px = 64;
    cfg.scene.width_px = 64;
    cfg.scene.board.board_px = 60;
    cfg.scene.board.blobs.clear();
    cfg.scan = ScanPattern::tiling(64, 64, 8, 16, 256);
    cfg.fusion.field_side = 7;
    cfg.fractions = vec![0.5, 0.25];
    cfg
}

#[test]
fn nested_subsets_and_shrinking_coverage() {
    let cfg = RunConfig::reference(42);
    let subs: Vec<_> = [0.25, 0.10, 0.05].iter().map(|&f| subsample(&cfg, f).unwrap()).collect();
    assert_eq!(subs.iter().map(|s| s.positions.len()).collect::<Vec<_>>(), [100, 40, 20]);
    assert!(subs[0].coverage > subs[1].coverage && subs[1].coverage > subs[2].coverage);
    assert_eq!(subs[1].positions[..], subs[0].positions[..40]);
    assert_ne!(fraction_tag(0.10), fraction_tag(0.05));
}

#[test]
fn full_run_writes_metrics_and_beats_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(3);
    cfg.output_dir = dir.path().to_path_buf();
    let manifests = run_stage(Stage::Full, &cfg).unwrap();
    assert_eq!(manifests.len(), 5);
    let reports: Vec<MetricsReport> =
        serde_json::from_slice(&std::fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    let get = |label: &str| reports.iter().find(|r| r.label == label).unwrap();
    let full = get("fit_full");
    for (d, want) in full.panel_differences_cm.iter().zip([10.0, 10.0, 10.0, 30.0]) {
        assert!((d - want).abs() < 1.5, "{d}");
    }
    for tag in ["f500", "f250"] {
        let fused = get(&format!("fused_{tag}")).depth_rmse_cm.unwrap();
        let nearest = get(&format!("nearest_{tag}")).depth_rmse_cm.unwrap();
        assert!(fused < nearest, "{tag}: fused {fused} vs nearest {nearest}");
        assert_eq!(get(&format!("fused_{tag}")).valid_fraction, 1.0);
    }
    assert!(dir.path().join("fused_f250_overlay.png").exists());
}

#[test]
fn calibration_follows_the_inverse_sqrt_law() {
    let cfg = small(8);
    let base = measure_patch_stddev(&cfg).unwrap();
    let base_mean = base.iter().sum::<f64>() / 4.0;
    // ask for 1.4x the spread: the level should drop to about 1/1.96
    let cal = calibrate_signal_level(&cfg, 1.4 * base_mean, 6).unwrap();
    assert!((cal.mean_stddev_cm() / (1.4 * base_mean) - 1.0).abs() < 0.1, "{cal:?}");
    let ratio = cfg.noise.mean_signal_pp / cal.mean_signal_pp;
    assert!((ratio - 1.96).abs() < 0.5, "level ratio {ratio}");
    assert!(calibrate_signal_level(&cfg, 0.0, 3).is_err());
}
