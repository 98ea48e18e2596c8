//! End-to-end runs: configuration, file-to-file stages and manifests.
//!
//! Each stage reads the previous stage's files from the output directory,
//! writes its own, and records both sets with SHA-256 hashes in
//! `manifest_<stage>.json`. No state is shared between stages, so any stage
//! can be re-run on its own.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acquisition::{simulate_positions, CountCube, DarkCountSpec, GateConfig, NoiseConfig, ScanPattern};
use crate::error::{Error, Result};
use crate::eval::{depth_rmse, panel_patches, patch_stddev, MetricsReport};
use crate::fill::nearest_valid_fill;
use crate::fitting::{fit_cube, DepthRaster, FitConfig, Reconstruction};
use crate::fusion::{
    compute_channel_differences, compute_depth_weights, compute_intensity_weights, fuse, subsample_scan_positions,
    FusionConfig, FusionInputs, FusionOutput, Subsample,
};
use crate::io;
use crate::preprocess::{preprocess, CleanedCube, PreprocessConfig, Preprocessed};
use crate::render::{render_depth, Overlay};
use crate::scene::{build_panel_board_scene, BoardLayout, GroundTruthScene, PanelBoardSpec};

/// Signal level of the reference configuration, photons per bit plane at
/// unit reflectivity. Chosen with [`calibrate_signal_level`] so that panel
/// patches show 0.5 to 1.0 cm of depth spread at 256 bit planes.
pub const REFERENCE_SIGNAL_PP: f64 = 0.84;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSettings {
    pub height_px: usize,
    pub width_px: usize,
    pub board: PanelBoardSpec<f64>,
}

impl Default for SceneSettings {
    fn default() -> Self {
        SceneSettings { height_px: 228, width_px: 228, board: PanelBoardSpec::reference() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSettings {
    pub mean_signal_pp: f64,
    pub background_pp: f64,
    pub exposure_s: f64,
    pub dark_counts: DarkCountSpec,
    /// Mask hot pixels from the known DCR map rather than from the cube.
    pub mask_from_dcr_map: bool,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        NoiseSettings {
            mean_signal_pp: REFERENCE_SIGNAL_PP,
            background_pp: 0.002,
            exposure_s: NoiseConfig::<f64>::default_exposure_s(),
            dark_counts: DarkCountSpec::default(),
            mask_from_dcr_map: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSettings {
    pub render_png: bool,
    /// Per-pixel fit report CSV next to each fit raster.
    pub fit_report_csv: bool,
    /// Cache the depth weight field as GLW1 (about 47 MB at 228×228).
    pub write_weights: bool,
}

impl Default for OutputSettings {
    fn default() -> Self {
        OutputSettings { render_png: true, fit_report_csv: false, write_weights: false }
    }
}

/// Everything a run needs. `seed` has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Scan-position fractions to subsample and fuse.
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub scene: SceneSettings,
    #[serde(default)]
    pub gate: GateConfig<f64>,
    #[serde(default)]
    pub scan: ScanPattern,
    #[serde(default)]
    pub noise: NoiseSettings,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub fit: FitConfig<f64>,
    #[serde(default)]
    pub fusion: FusionConfig<f64>,
    #[serde(default)]
    pub output: OutputSettings,
}

fn default_fractions() -> Vec<f64> {
    vec![0.25, 0.10, 0.05]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    /// The reference configuration with the given seed.
    pub fn reference(seed: u64) -> Self {
        RunConfig {
            seed,
            fractions: default_fractions(),
            output_dir: default_output_dir(),
            scene: SceneSettings::default(),
            gate: GateConfig::default(),
            scan: ScanPattern::default(),
            noise: NoiseSettings::default(),
            preprocess: PreprocessConfig::default(),
            fit: FitConfig::default(),
            fusion: FusionConfig::default(),
            output: OutputSettings::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.scene.height_px, self.scene.width_px);
        if h == 0 || w == 0 {
            return Err(Error::Config("scene.height_px and scene.width_px must be > 0".into()));
        }
        self.scene.board.validate()?;
        BoardLayout::centered(self.scene.board.board_px, h, w)?;
        self.gate.validate()?;
        self.scan.validate()?;
        self.fit.validate()?;
        self.fusion.validate()?;
        let n = &self.noise;
        if ![n.mean_signal_pp, n.background_pp, n.exposure_s].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::Config("noise.mean_signal_pp, background_pp and exposure_s must be finite and >= 0".into()));
        }
        let dc = &n.dark_counts;
        if !(dc.low_hz >= 0.0 && dc.high_hz >= dc.low_hz && (0.0..=1.0).contains(&dc.hot_fraction) && dc.hot_hz >= 0.0) {
            return Err(Error::Config("noise.dark_counts: need 0 <= low_hz <= high_hz, hot_fraction in [0, 1], hot_hz >= 0".into()));
        }
        if let Some(&g) = self.preprocess.calib_gates.iter().find(|&&g| g >= self.gate.num_gates) {
            return Err(Error::Config(format!("preprocess.calib_gates: gate {g} >= gate.num_gates")));
        }
        if self.preprocess.calib_gates.is_empty() {
            return Err(Error::Config("preprocess.calib_gates is empty".into()));
        }
        if !(self.preprocess.hot_threshold_hz > 0.0) {
            return Err(Error::Config("preprocess.hot_threshold_hz must be > 0".into()));
        }
        let mut tags = Vec::new();
        for &f in &self.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("fractions: {f} is outside (0, 1]")));
            }
            let t = fraction_tag(f);
            if tags.contains(&t) {
                return Err(Error::Config(format!("fractions: {f} duplicates another entry")));
            }
            tags.push(t);
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.scene.height_px, self.scene.width_px)
    }

    pub fn layout(&self) -> Result<BoardLayout> {
        BoardLayout::centered(self.scene.board.board_px, self.scene.height_px, self.scene.width_px)
    }
}

/// Independent sub-seeds for the stochastic parts of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    Photons,
    DarkCounts,
    Subsample,
}

/// SplitMix64 of `seed` mixed with the stream id.
pub fn derive_seed(seed: u64, stream: SeedStream) -> u64 {
    let mut z = seed ^ (stream as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// File-name tag of a scan fraction, e.g. `f050` for 5%.
pub fn fraction_tag(fraction: f64) -> String {
    format!("f{:03}", (fraction * 1000.0).round() as u64)
}

pub const FULL_TAG: &str = "full";

pub fn build_scene(cfg: &RunConfig) -> Result<GroundTruthScene<f64>> {
    build_panel_board_scene(&cfg.scene.board, cfg.scene.height_px, cfg.scene.width_px)
}

pub fn noise_config(cfg: &RunConfig) -> NoiseConfig<f64> {
    let (h, w) = cfg.dims();
    NoiseConfig {
        mean_signal_pp: cfg.noise.mean_signal_pp,
        background_pp: cfg.noise.background_pp,
        dcr_map: cfg.noise.dark_counts.sample_map(h, w, derive_seed(cfg.seed, SeedStream::DarkCounts)),
        exposure_s: cfg.noise.exposure_s,
        rng_seed: derive_seed(cfg.seed, SeedStream::Photons),
    }
}

pub fn subsample(cfg: &RunConfig, fraction: f64) -> Result<Subsample> {
    let (h, w) = cfg.dims();
    subsample_scan_positions(&cfg.scan, fraction, derive_seed(cfg.seed, SeedStream::Subsample), h, w)
}

pub fn preprocess_cube(cfg: &RunConfig, cube: &CountCube, noise: &NoiseConfig<f64>) -> Result<Preprocessed<f64>> {
    let pcfg = PreprocessConfig { exposure_s: cfg.noise.exposure_s, ..cfg.preprocess.clone() };
    let dcr = cfg.noise.mask_from_dcr_map.then_some(&noise.dcr_map);
    preprocess(&cube.to_samples::<f64>(), &pcfg, dcr)
}

/// Non-local weights from an RGB image, `(depth, intensity)`.
pub fn weights(
    fusion: &FusionConfig<f64>,
    rgb: &Array3<u8>,
) -> Result<(crate::fusion::WeightField<f64>, crate::fusion::WeightField<f64>)> {
    let channels = fusion.color_space.convert::<f64>(rgb);
    let diff = compute_channel_differences(&channels, fusion.field_side)?;
    let wr = compute_intensity_weights(&diff, fusion.sigma_c)?;
    drop(diff);
    let wd = compute_depth_weights(&wr, fusion.sigma_s)?;
    Ok((wd, wr))
}

/// Fuses one subsampled acquisition.
pub fn fuse_observed(
    cfg: &RunConfig,
    cleaned: &CleanedCube<f64>,
    scan_mask: &Array2<bool>,
    init: &Reconstruction<f64>,
    rgb: &Array3<u8>,
) -> Result<FusionOutput<f64>> {
    let (wd, wr) = weights(&cfg.fusion, rgb)?;
    let observed = observed_mask(scan_mask, cleaned);
    fuse(
        FusionInputs { cleaned, observed: &observed, depth_weights: &wd, intensity_weights: &wr, init, rgb: Some(rgb) },
        &cfg.fit,
        &cfg.fusion,
    )
}

/// Pixels under the scan footprints whose data survived preprocessing.
pub fn observed_mask(scan_mask: &Array2<bool>, cleaned: &CleanedCube<f64>) -> Array2<bool> {
    Array2::from_shape_fn(scan_mask.dim(), |(r, c)| scan_mask[[r, c]] && cleaned.valid[[r, c]])
}

/// Baseline completion: every pixel takes the depth of the nearest observed
/// valid fit.
pub fn nearest_neighbor_baseline(fit: &Reconstruction<f64>, observed: &Array2<bool>) -> Result<Array2<f64>> {
    let seeds = Array2::from_shape_fn(fit.dims(), |(r, c)| observed[[r, c]] && fit.valid[[r, c]]);
    nearest_valid_fill(&fit.depth_index, &seeds).ok_or_else(|| Error::Data("no valid observed pixel to fill from".into()))
}

/// Outcome of [`calibrate_signal_level`].
#[derive(Debug, Clone, PartialEq)]
pub struct SignalCalibration {
    pub mean_signal_pp: f64,
    pub patch_stddev_cm: [f64; 4],
    pub rounds: usize,
}

impl SignalCalibration {
    pub fn mean_stddev_cm(&self) -> f64 {
        self.patch_stddev_cm.iter().sum::<f64>() / 4.0
    }
}

/// Full-scan patch spread at the configured signal level.
pub fn measure_patch_stddev(cfg: &RunConfig) -> Result<[f64; 4]> {
    let scene = build_scene(cfg)?;
    let noise = noise_config(cfg);
    let all: Vec<usize> = (0..cfg.scan.num_positions()).collect();
    let cube = simulate_positions(&scene, &cfg.gate, &cfg.scan, &noise, &all)?;
    let pre = preprocess_cube(cfg, &cube, &noise)?;
    let fit = fit_cube(&pre.cleaned, &cfg.fit)?;
    let depth = fit.reconstruction.depth_raster(&cfg.gate);
    let patches = panel_patches(&cfg.layout()?);
    let mut out = [0.0; 4];
    for (o, p) in out.iter_mut().zip(&patches) {
        *o = patch_stddev(&depth, p)?;
    }
    Ok(out)
}

/// Monte-Carlo search for the signal level that gives a mean patch spread of
/// `target_cm`. Spread scales like `1/√signal`, so each round rescales the
/// level by `(measured/target)²`; stops within 2% of the target.
pub fn calibrate_signal_level(cfg: &RunConfig, target_cm: f64, max_rounds: usize) -> Result<SignalCalibration> {
    if !(target_cm > 0.0) || max_rounds == 0 {
        return Err(Error::Config("calibration target and round count must be positive".into()));
    }
    let mut trial = cfg.clone();
    let mut last = None;
    for round in 1..=max_rounds {
        let std = measure_patch_stddev(&trial)?;
        let mean = std.iter().sum::<f64>() / 4.0;
        info!("calibration round {round}: {:.4} pp -> {:.3} cm", trial.noise.mean_signal_pp, mean);
        last = Some(SignalCalibration { mean_signal_pp: trial.noise.mean_signal_pp, patch_stddev_cm: std, rounds: round });
        if (mean / target_cm - 1.0).abs() < 0.02 {
            break;
        }
        trial.noise.mean_signal_pp *= (mean / target_cm).powi(2);
    }
    Ok(last.expect("at least one round"))
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    Preprocess,
    Fit,
    Fuse,
    Eval,
    Full,
}

impl Stage {
    pub const ORDERED: [Stage; 5] = [Stage::Simulate, Stage::Preprocess, Stage::Fit, Stage::Fuse, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Preprocess => "preprocess",
            Stage::Fit => "fit",
            Stage::Fuse => "fuse",
            Stage::Eval => "eval",
            Stage::Full => "full",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ORDERED
            .into_iter()
            .chain([Stage::Full])
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// One file recorded in a manifest, path relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub stage: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

pub fn manifest_name(stage: Stage) -> String {
    format!("manifest_{}.json", stage.name())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Tracks a stage's reads and writes inside the output directory.
struct StageFiles<'a> {
    dir: &'a Path,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
}

impl<'a> StageFiles<'a> {
    fn new(dir: &'a Path) -> Self {
        StageFiles { dir, inputs: Vec::new(), outputs: Vec::new() }
    }

    fn read(&mut self, name: &str, made_by: Stage) -> Result<Vec<u8>> {
        let path = self.dir.join(name);
        let bytes = fs::read(&path).map_err(|e| {
            Error::Data(format!("missing input {} ({e}); run stage `{made_by}` first", path.display()))
        })?;
        self.inputs.push(FileRecord { path: name.to_string(), sha256: sha256_hex(&bytes) });
        Ok(bytes)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        io::write_file(&self.dir.join(name), bytes)?;
        self.outputs.push(FileRecord { path: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    fn record_existing(&mut self, name: &str) -> Result<()> {
        let bytes = fs::read(self.dir.join(name))?;
        self.outputs.push(FileRecord { path: name.to_string(), sha256: sha256_hex(&bytes) });
        Ok(())
    }

    fn finish(self, stage: Stage, cfg: &RunConfig) -> Result<Manifest> {
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            stage: stage.name().to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
        io::write_file(&self.dir.join(manifest_name(stage)), &json)?;
        Ok(manifest)
    }
}

fn tags(cfg: &RunConfig) -> Vec<String> {
    std::iter::once(FULL_TAG.to_string()).chain(cfg.fractions.iter().map(|&f| fraction_tag(f))).collect()
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    v.push(b'\n');
    Ok(v)
}

/// Runs `stage` (or all stages for [`Stage::Full`]) in `cfg.output_dir`.
pub fn run_stage(stage: Stage, cfg: &RunConfig) -> Result<Vec<Manifest>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let stages: Vec<Stage> = if stage == Stage::Full { Stage::ORDERED.to_vec() } else { vec![stage] };
    stages
        .into_iter()
        .map(|s| {
            info!("stage {s}");
            let mut files = StageFiles::new(&cfg.output_dir);
            match s {
                Stage::Simulate => stage_simulate(cfg, &mut files)?,
                Stage::Preprocess => stage_preprocess(cfg, &mut files)?,
                Stage::Fit => stage_fit(cfg, &mut files)?,
                Stage::Fuse => stage_fuse(cfg, &mut files)?,
                Stage::Eval => stage_eval(cfg, &mut files)?,
                Stage::Full => unreachable!("expanded above"),
            }
            files.finish(s, cfg)
        })
        .collect()
}

fn stage_simulate(cfg: &RunConfig, files: &mut StageFiles<'_>) -> Result<()> {
    let scene = build_scene(cfg)?;
    let noise = noise_config(cfg);
    files.write("scene.glr", &io::encode_scene(&scene)?)?;
    files.write("dcr_hz.glf", &io::encode_planes(&[&noise.dcr_map])?)?;
    let all: Vec<usize> = (0..cfg.scan.num_positions()).collect();
    let cube = simulate_positions(&scene, &cfg.gate, &cfg.scan, &noise, &all)?;
    files.write("cube_full.glc", &io::encode_cube(&cube)?)?;
    for &f in &cfg.fractions {
        let tag = fraction_tag(f);
        let sub = subsample(cfg, f)?;
        info!("fraction {f}: {} positions, coverage {:.3}", sub.positions.len(), sub.coverage);
        files.write(&format!("scan_{tag}.glm"), &io::encode_mask(&sub.mask)?)?;
        files.write(&format!("positions_{tag}.json"), &json_bytes(&sub.positions)?)?;
        let cube = simulate_positions(&scene, &cfg.gate, &cfg.scan, &noise, &sub.positions)?;
        files.write(&format!("cube_{tag}.glc"), &io::encode_cube(&cube)?)?;
    }
    Ok(())
}

fn stage_preprocess(cfg: &RunConfig, files: &mut StageFiles<'_>) -> Result<()> {
    let planes: Vec<Array2<f64>> = io::decode_planes(&files.read("dcr_hz.glf", Stage::Simulate)?)?;
    let dcr = planes.into_iter().next().ok_or_else(|| Error::Data("dcr_hz.glf has no plane".into()))?;
    let pcfg = PreprocessConfig { exposure_s: cfg.noise.exposure_s, ..cfg.preprocess.clone() };
    for tag in tags(cfg) {
        let cube = io::decode_cube(&files.read(&format!("cube_{tag}.glc"), Stage::Simulate)?)?;
        if cube.dims() != dcr.dim() {
            return Err(Error::Data(format!("cube_{tag}.glc does not match dcr_hz.glf")));
        }
        let pre = preprocess(&cube.to_samples::<f64>(), &pcfg, cfg.noise.mask_from_dcr_map.then_some(&dcr))?;
        files.write(&format!("cleaned_{tag}.gls"), &io::encode_cleaned(&pre.cleaned, cube.bitplanes)?)?;
        files.write(&format!("hot_{tag}.glm"), &io::encode_mask(&pre.hot_mask.0)?)?;
    }
    Ok(())
}

/// Planes of a fit or fusion raster file.
const RASTER_PLANES: [&str; 4] = ["depth_index", "depth_m", "intensity", "valid"];

fn encode_reconstruction(rec: &Reconstruction<f64>, gate: &GateConfig<f64>) -> Result<Vec<u8>> {
    let depth_m = rec.depth_raster(gate).depth_m;
    let valid = rec.valid.mapv(|v| if v { 1.0 } else { 0.0 });
    io::encode_planes(&[&rec.depth_index, &depth_m, &rec.intensity, &valid])
}

fn decode_reconstruction(bytes: &[u8], what: &str) -> Result<(Reconstruction<f64>, Array2<f64>)> {
    let planes: Vec<Array2<f64>> = io::decode_planes(bytes)?;
    let [depth_index, depth_m, intensity, valid]: [Array2<f64>; 4] = planes
        .try_into()
        .map_err(|_| Error::Data(format!("{what}: expected planes {RASTER_PLANES:?}")))?;
    Ok((Reconstruction { depth_index, intensity, valid: valid.mapv(|v| v != 0.0) }, depth_m))
}

fn load_cleaned(files: &mut StageFiles<'_>, tag: &str) -> Result<CleanedCube<f64>> {
    Ok(io::decode_cleaned(&files.read(&format!("cleaned_{tag}.gls"), Stage::Preprocess)?)?.0)
}

fn stage_fit(cfg: &RunConfig, files: &mut StageFiles<'_>) -> Result<()> {
    for tag in tags(cfg) {
        let cleaned = load_cleaned(files, &tag)?;
        let fit = fit_cube(&cleaned, &cfg.fit)?;
        let rec = &fit.reconstruction;
        let frac = rec.valid_fraction();
        if frac == 0.0 {
            warn!("fit_{tag}: no pixel produced a valid fit");
        } else {
            info!("fit_{tag}: {:.2}% valid", frac * 100.0);
        }
        files.write(&format!("fit_{tag}.glf"), &encode_reconstruction(rec, &cfg.gate)?)?;
        if cfg.output.fit_report_csv {
            let depth = rec.depth_raster(&cfg.gate);
            let mut csv = String::from("row,col,depth_m,intensity,residual_ss,valid\n");
            for ((r, c), &v) in rec.valid.indexed_iter() {
                csv.push_str(&format!(
                    "{r},{c},{:.6},{:.6},{:.6},{}\n",
                    depth.depth_m[[r, c]],
                    rec.intensity[[r, c]],
                    fit.residual_ss[[r, c]],
                    v as u8
                ));
            }
            files.write(&format!("fit_report_{tag}.csv"), csv.as_bytes())?;
        }
    }
    Ok(())
}

fn stage_fuse(cfg: &RunConfig, files: &mut StageFiles<'_>) -> Result<()> {
    if cfg.fractions.is_empty() {
        return Ok(());
    }
    let scene: GroundTruthScene<f64> = io::decode_scene(&files.read("scene.glr", Stage::Simulate)?)?;
    let (wd, wr) = weights(&cfg.fusion, &scene.rgb)?;
    if cfg.output.write_weights {
        files.write("weights_depth.glw", &io::encode_weights(&wd)?)?;
    }
    for &f in &cfg.fractions {
        let tag = fraction_tag(f);
        let cleaned = load_cleaned(files, &tag)?;
        let mask = io::decode_mask(&files.read(&format!("scan_{tag}.glm"), Stage::Simulate)?)?;
        let (init, _) = decode_reconstruction(&files.read(&format!("fit_{tag}.glf"), Stage::Fit)?, "fit")?;
        let observed = observed_mask(&mask, &cleaned);
        let out = fuse(
            FusionInputs {
                cleaned: &cleaned,
                observed: &observed,
                depth_weights: &wd,
                intensity_weights: &wr,
                init: &init,
                rgb: Some(&scene.rgb),
            },
            &cfg.fit,
            &cfg.fusion,
        )?;
        info!("fuse_{tag}: {} sweeps, converged {}", out.iterations, out.converged);
        files.write(&format!("fused_{tag}.glf"), &encode_reconstruction(&out.reconstruction, &cfg.gate)?)?;
        files.write(&format!("trace_{tag}.csv"), trace_csv(&out).as_bytes())?;
    }
    Ok(())
}

/// Objective per sweep, sweep 0 being the starting point.
pub fn trace_csv(out: &FusionOutput<f64>) -> String {
    let mut s = String::from("iteration,nll,reg_depth,reg_intensity,total\n");
    for (i, v) in out.trace.iter().enumerate() {
        s.push_str(&format!("{i},{:e},{:e},{:e},{:e}\n", v.nll, v.reg_depth, v.reg_intensity, v.total));
    }
    s
}

fn stage_eval(cfg: &RunConfig, files: &mut StageFiles<'_>) -> Result<()> {
    let scene: GroundTruthScene<f64> = io::decode_scene(&files.read("scene.glr", Stage::Simulate)?)?;
    let layout = cfg.layout()?;
    let all = Array2::from_elem(scene.dims(), true);
    let mut reports = Vec::new();
    let mut renders: Vec<(String, DepthRaster<f64>, Array2<f64>)> = Vec::new();

    let (fit_full, depth_m) = decode_reconstruction(&files.read("fit_full.glf", Stage::Fit)?, "fit_full")?;
    let full = DepthRaster { depth_m, valid: fit_full.valid.clone() };
    let mut report = MetricsReport::from_depth("fit_full", &full, &layout)?;
    report.depth_rmse_cm = Some(depth_rmse(&full.depth_m, &scene.depth_m, &full.valid)?);
    report.scan_coverage = Some(1.0);
    reports.push(report);
    renders.push(("depth_full".into(), full, fit_full.intensity.clone()));

    for &f in &cfg.fractions {
        let tag = fraction_tag(f);
        let mask = io::decode_mask(&files.read(&format!("scan_{tag}.glm"), Stage::Simulate)?)?;
        let coverage = crate::eval::coverage(&mask);
        let (fit, _) = decode_reconstruction(&files.read(&format!("fit_{tag}.glf"), Stage::Fit)?, "fit")?;
        let (fused, fused_m) = decode_reconstruction(&files.read(&format!("fused_{tag}.glf"), Stage::Fuse)?, "fused")?;

        let nn = nearest_neighbor_baseline(&fit, &mask)?;
        let nn_depth = DepthRaster { depth_m: nn.mapv(|d| cfg.gate.index_to_depth(d)), valid: all.clone() };
        let mut r = MetricsReport::from_depth(&format!("nearest_{tag}"), &nn_depth, &layout)?;
        r.depth_rmse_cm = Some(depth_rmse(&nn_depth.depth_m, &scene.depth_m, &all)?);
        r.scan_coverage = Some(coverage);
        reports.push(r);

        let fused_depth = DepthRaster { depth_m: fused_m, valid: fused.valid.clone() };
        let mut r = MetricsReport::from_depth(&format!("fused_{tag}"), &fused_depth, &layout)?;
        r.depth_rmse_cm = Some(depth_rmse(&fused_depth.depth_m, &scene.depth_m, &fused.valid)?);
        r.scan_coverage = Some(coverage);
        reports.push(r);
        renders.push((format!("fused_{tag}"), fused_depth, fused.intensity.clone()));
    }

    files.write("metrics.json", &json_bytes(&reports)?)?;
    let mut csv = String::from(MetricsReport::CSV_HEADER);
    csv.push('\n');
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    files.write("metrics.csv", csv.as_bytes())?;

    if cfg.output.render_png {
        let range = depth_range(&scene.depth_m);
        for (name, depth, intensity) in &renders {
            let path = format!("{name}.png");
            render_depth(depth, Some(range), Overlay::None, &cfg.output_dir.join(&path))?;
            files.record_existing(&path)?;
            let path = format!("{name}_overlay.png");
            render_depth(depth, Some(range), Overlay::Intensity(intensity), &cfg.output_dir.join(&path))?;
            files.record_existing(&path)?;
        }
    }
    Ok(())
}

fn depth_range(depth: &Array2<f64>) -> (f64, f64) {
    depth.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}
