//! Forward model of time-gated SPAD acquisition.
//!
//! A scene is illuminated spot by spot on a scan grid. For every scan position
//! and gate delay the sensor records `bitplanes_per_position` binary frames; a
//! pixel reads 1 in a frame with probability `1 - exp(-λ)` where `λ` is the
//! expected photon number for that frame. Frames are summed into a
//! [`CountCube`].

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::fitting::EdgeFunction;
use crate::scene::GroundTruthScene;
use crate::Real;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT_M_PER_S: f64 = 299_792_458.0;

/// Gate timing and its mapping onto range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct GateConfig<T> {
    pub gate_width_ns: T,
    pub gate_step_ns: T,
    pub num_gates: usize,
    /// Leading-edge width `h` in gate-index units.
    #[serde(rename = "edge_width_h_steps")]
    pub edge_width_h: T,
    pub range_per_step_m: T,
    /// Range that maps to gate index `index_offset`.
    pub base_range_m: T,
    /// Gate index assigned to `base_range_m`.
    #[serde(rename = "index_offset_steps")]
    pub index_offset: T,
    /// Per-pixel gate delay skew in steps per row / per column. Models a
    /// timing mismatch across the array; zero for an ideal sensor.
    pub skew_steps_per_px: [T; 2],
}

impl<T: Real> Default for GateConfig<T> {
    fn default() -> Self {
        let l = T::lit;
        GateConfig {
            gate_width_ns: l(18.0),
            gate_step_ns: l(0.25),
            num_gates: 51,
            edge_width_h: l(1.0),
            range_per_step_m: l(0.075),
            base_range_m: l(150.0),
            index_offset: l(10.0),
            skew_steps_per_px: [T::zero(); 2],
        }
    }
}

impl<T: Real> GateConfig<T> {
    /// Range per gate step from round-trip time of flight, `c·Δt/2`.
    pub fn round_trip_range_per_step_m(&self) -> T {
        T::lit(SPEED_OF_LIGHT_M_PER_S * 0.5e-9) * self.gate_step_ns
    }

    /// Switches the range mapping to round-trip time of flight.
    pub fn with_round_trip_ranging(mut self) -> Self {
        self.range_per_step_m = self.round_trip_range_per_step_m();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gate_step_ns > T::zero()) {
            return Err(Error::config("gate.gate_step_ns must be > 0"));
        }
        if self.num_gates < 2 {
            return Err(Error::config("gate.num_gates must be >= 2"));
        }
        if !(self.edge_width_h >= T::zero()) {
            return Err(Error::config("gate.edge_width_h_steps must be >= 0"));
        }
        if !(self.range_per_step_m > T::zero()) {
            return Err(Error::config("gate.range_per_step_m must be > 0"));
        }
        Ok(())
    }

    pub fn depth_to_index(&self, depth_m: T) -> T {
        (depth_m - self.base_range_m) / self.range_per_step_m + self.index_offset
    }

    pub fn index_to_depth(&self, index: T) -> T {
        (index - self.index_offset) * self.range_per_step_m + self.base_range_m
    }

    /// Gate delay skew at a pixel, in steps.
    pub fn skew_at(&self, row: usize, col: usize) -> T {
        self.skew_steps_per_px[0] * T::lit(row as f64) + self.skew_steps_per_px[1] * T::lit(col as f64)
    }
}

/// Converts a range in metres to fractional gate-index units.
pub fn depth_to_gate_index<T: Real>(depth_m: T, base_range_m: T, gate: &GateConfig<T>) -> Result<T> {
    if !(gate.range_per_step_m > T::zero()) {
        return Err(Error::config("range_per_step_m must be > 0"));
    }
    Ok((depth_m - base_range_m) / gate.range_per_step_m + gate.index_offset)
}

/// Inverse of [`depth_to_gate_index`].
pub fn gate_index_to_depth<T: Real>(index: T, base_range_m: T, gate: &GateConfig<T>) -> Result<T> {
    if !(gate.range_per_step_m > T::zero()) {
        return Err(Error::config("range_per_step_m must be > 0"));
    }
    Ok((index - gate.index_offset) * gate.range_per_step_m + base_range_m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SpotProfile {
    /// Uniform illumination over the square footprint.
    TopHat,
    /// Gaussian falloff from the spot centre, truncated to the footprint.
    Gaussian { sigma_px: f64 },
}

/// Beam-scan grid. Spot centres sit on a regular `grid_rows`×`grid_cols`
/// lattice with spacing `pitch_px`, centred on `(center_row, center_col)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanPattern {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub spot_px: usize,
    pub pitch_px: f64,
    #[serde(rename = "center_row_px")]
    pub center_row: f64,
    #[serde(rename = "center_col_px")]
    pub center_col: f64,
    pub bitplanes_per_position: u32,
    pub spot_profile: SpotProfile,
}

/// Footprint of one scan position on the sensor, clipped to the raster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpotFootprint {
    pub center_row: f64,
    pub center_col: f64,
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl Default for ScanPattern {
    fn default() -> Self {
        Self::reference_geometry(228, 228)
    }
}

impl ScanPattern {
    /// 20×20 grid of 50×50 px spots at an 18 px pitch, centred on a
    /// `height`×`width` crop, 256 bit planes per position.
    pub fn reference_geometry(height: usize, width: usize) -> Self {
        ScanPattern {
            grid_rows: 20,
            grid_cols: 20,
            spot_px: 50,
            pitch_px: 18.0,
            center_row: (height as f64 - 1.0) / 2.0,
            center_col: (width as f64 - 1.0) / 2.0,
            bitplanes_per_position: 256,
            spot_profile: SpotProfile::TopHat,
        }
    }

    /// A grid whose spots tile `height`×`width` edge to edge.
    pub fn tiling(height: usize, width: usize, grid: usize, spot_px: usize, bitplanes: u32) -> Self {
        let span = height.max(width) as f64;
        let pitch = if grid > 1 { (span - spot_px as f64) / (grid - 1) as f64 } else { 0.0 };
        ScanPattern {
            grid_rows: grid,
            grid_cols: grid,
            spot_px,
            pitch_px: pitch.max(0.0),
            center_row: (height as f64 - 1.0) / 2.0,
            center_col: (width as f64 - 1.0) / 2.0,
            bitplanes_per_position: bitplanes,
            spot_profile: SpotProfile::TopHat,
        }
    }

    pub fn num_positions(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_rows == 0 || self.grid_cols == 0 || self.spot_px == 0 {
            return Err(Error::config("scan grid and spot size must be non-zero"));
        }
        if !(self.pitch_px >= 0.0) || !self.pitch_px.is_finite() {
            return Err(Error::config("scan.pitch_px must be finite and >= 0"));
        }
        if self.bitplanes_per_position == 0 || self.bitplanes_per_position > u16::MAX as u32 {
            return Err(Error::config("scan.bitplanes_per_position must be in 1..=65535"));
        }
        if let SpotProfile::Gaussian { sigma_px } = self.spot_profile {
            if !(sigma_px > 0.0) {
                return Err(Error::config("gaussian spot sigma_px must be > 0"));
            }
        }
        Ok(())
    }

    /// Spot centre of position `index` (row-major over the grid).
    pub fn spot_center(&self, index: usize) -> (f64, f64) {
        let (i, j) = (index / self.grid_cols, index % self.grid_cols);
        let r = self.center_row + (i as f64 - (self.grid_rows as f64 - 1.0) / 2.0) * self.pitch_px;
        let c = self.center_col + (j as f64 - (self.grid_cols as f64 - 1.0) / 2.0) * self.pitch_px;
        (r, c)
    }

    /// Footprint of position `index` clipped to a `height`×`width` raster.
    pub fn footprint(&self, index: usize, height: usize, width: usize) -> SpotFootprint {
        let (cr, cc) = self.spot_center(index);
        let half = self.spot_px as f64 / 2.0;
        let clip = |lo: f64, n: usize| -> (usize, usize) {
            let start = (lo + 0.5).round();
            let end = start + self.spot_px as f64;
            let s = start.clamp(0.0, n as f64) as usize;
            let e = end.clamp(0.0, n as f64) as usize;
            (s, e)
        };
        let (row0, row1) = clip(cr - half, height);
        let (col0, col1) = clip(cc - half, width);
        SpotFootprint { center_row: cr, center_col: cc, row0, row1, col0, col1 }
    }

    /// Relative illumination of pixel `(row, col)` inside a footprint.
    pub fn illumination(&self, spot: &SpotFootprint, row: usize, col: usize) -> f64 {
        match self.spot_profile {
            SpotProfile::TopHat => 1.0,
            SpotProfile::Gaussian { sigma_px } => {
                let dr = row as f64 - spot.center_row;
                let dc = col as f64 - spot.center_col;
                (-(dr * dr + dc * dc) / (2.0 * sigma_px * sigma_px)).exp()
            }
        }
    }

    /// Assigns each pixel the scan position (among `positions`) whose frame it
    /// is read from: the one illuminating it most strongly, ties going to the
    /// earlier entry. `None` for pixels no selected spot reaches.
    pub fn assign_pixels(&self, positions: &[usize], height: usize, width: usize) -> Array2<Option<(u32, f64)>> {
        let mut out: Array2<Option<(u32, f64)>> = Array2::from_elem((height, width), None);
        for &p in positions {
            let fp = self.footprint(p, height, width);
            for r in fp.row0..fp.row1 {
                for c in fp.col0..fp.col1 {
                    let g = self.illumination(&fp, r, c);
                    let slot = &mut out[[r, c]];
                    if slot.is_none_or(|(_, best)| g > best) {
                        *slot = Some((p as u32, g));
                    }
                }
            }
        }
        out
    }

    /// Union of the footprints of `positions`.
    pub fn coverage_mask(&self, positions: &[usize], height: usize, width: usize) -> Array2<bool> {
        let mut mask = Array2::from_elem((height, width), false);
        for &p in positions {
            let fp = self.footprint(p, height, width);
            for r in fp.row0..fp.row1 {
                for c in fp.col0..fp.col1 {
                    mask[[r, c]] = true;
                }
            }
        }
        mask
    }
}

/// Per-pixel dark-count model used to synthesize a DCR map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DarkCountSpec {
    /// DCR of ordinary pixels is drawn uniformly from `[low_hz, high_hz]`.
    pub low_hz: f64,
    pub high_hz: f64,
    /// Fraction of hot pixels, which get `hot_hz`.
    pub hot_fraction: f64,
    pub hot_hz: f64,
}

impl Default for DarkCountSpec {
    fn default() -> Self {
        DarkCountSpec { low_hz: 200.0, high_hz: 6_000.0, hot_fraction: 0.02, hot_hz: 150_000.0 }
    }
}

impl DarkCountSpec {
    pub fn quiet() -> Self {
        DarkCountSpec { low_hz: 0.0, high_hz: 0.0, hot_fraction: 0.0, hot_hz: 0.0 }
    }

    /// Draws a DCR map in Hz.
    pub fn sample_map<T: Real>(&self, height: usize, width: usize, seed: u64) -> Array2<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0D_C0_DE);
        let spread = Uniform::new_inclusive(self.low_hz, self.high_hz.max(self.low_hz)).expect("ordered bounds");
        Array2::from_shape_simple_fn((height, width), || {
            let base = spread.sample(&mut rng);
            let hot = rng.random::<f64>() < self.hot_fraction;
            T::lit(if hot { self.hot_hz } else { base })
        })
    }
}

/// Photon budget and noise sources.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig<T> {
    /// Expected signal photons per bit plane at reflectivity 1, full plateau.
    pub mean_signal_pp: T,
    /// Expected ambient photons per bit plane.
    pub background_pp: T,
    /// Dark-count rate per pixel, Hz.
    pub dcr_map: Array2<T>,
    /// Exposure of a single bit plane, seconds.
    pub exposure_s: T,
    pub rng_seed: u64,
}

impl<T: Real> NoiseConfig<T> {
    /// Default per-bit-plane exposure: 215 µs per scan position over 256 planes.
    pub fn default_exposure_s() -> T {
        T::lit(215e-6 / 256.0)
    }

    /// Signal only: no ambient light, no dark counts.
    pub fn signal_only(mean_signal_pp: T, height: usize, width: usize, rng_seed: u64) -> Self {
        NoiseConfig {
            mean_signal_pp,
            background_pp: T::zero(),
            dcr_map: Array2::zeros((height, width)),
            exposure_s: Self::default_exposure_s(),
            rng_seed,
        }
    }

    pub fn validate(&self, dims: (usize, usize)) -> Result<()> {
        ensure_same_dims("dcr_map vs scene", self.dcr_map.dim(), dims)?;
        let ok = |v: T| v.is_finite() && v >= T::zero();
        if !ok(self.mean_signal_pp) || !ok(self.background_pp) || !ok(self.exposure_s) {
            return Err(Error::config("noise rates and exposure must be finite and >= 0"));
        }
        if !self.dcr_map.iter().all(|&v| ok(v)) {
            return Err(Error::config("dcr_map entries must be finite and >= 0"));
        }
        Ok(())
    }

    /// Background photons per bit plane at a pixel.
    pub fn background_at(&self, row: usize, col: usize) -> T {
        self.background_pp + self.dcr_map[[row, col]] * self.exposure_s
    }
}

/// Observed photon counts, stored `[gate][row][col]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountCube {
    pub counts: Array3<u16>,
    /// Bit planes summed per sample; upper bound of every count.
    pub bitplanes: u32,
}

impl CountCube {
    pub fn num_gates(&self) -> usize {
        self.counts.dim().0
    }

    pub fn height(&self) -> usize {
        self.counts.dim().1
    }

    pub fn width(&self) -> usize {
        self.counts.dim().2
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    /// Real-valued copy of the counts.
    pub fn to_samples<T: Real>(&self) -> SampleCube<T> {
        SampleCube { data: self.counts.mapv(|c| T::lit(c as f64)), bitplanes: self.bitplanes }
    }
}

/// Real-valued cube, `[gate][row][col]`: expected counts, linearized counts
/// or background-subtracted counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCube<T> {
    pub data: Array3<T>,
    pub bitplanes: u32,
}

impl<T: Real> SampleCube<T> {
    pub fn num_gates(&self) -> usize {
        self.data.dim().0
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// Expected photons per bit plane for pixel `(row, col)` at gate `k`:
/// `(r/2)·{1 + erf[(k - d)/h]} + b` with `r = reflectivity·mean_signal_pp`,
/// `d` the pixel depth in gate units and `b` its background rate.
pub fn expected_rate<T: Real>(
    scene: &GroundTruthScene<T>,
    row: usize,
    col: usize,
    k: usize,
    gate: &GateConfig<T>,
    noise: &NoiseConfig<T>,
) -> T {
    expected_rate_lit(scene, row, col, k, gate, noise, T::one())
}

fn expected_rate_lit<T: Real>(
    scene: &GroundTruthScene<T>,
    row: usize,
    col: usize,
    k: usize,
    gate: &GateConfig<T>,
    noise: &NoiseConfig<T>,
    illumination: T,
) -> T {
    let d = gate.depth_to_index(scene.depth_m[[row, col]]) + gate.skew_at(row, col);
    let r = scene.reflectivity[[row, col]] * noise.mean_signal_pp * illumination;
    let b = noise.background_at(row, col);
    EdgeFunction::Erf.model(T::lit(k as f64), d, r, gate.edge_width_h, b)
}

fn check_inputs<T: Real>(
    scene: &GroundTruthScene<T>,
    gate: &GateConfig<T>,
    scan: &ScanPattern,
    noise: &NoiseConfig<T>,
    positions: &[usize],
) -> Result<()> {
    scene.validate()?;
    gate.validate()?;
    scan.validate()?;
    noise.validate(scene.dims())?;
    if let Some(&p) = positions.iter().find(|&&p| p >= scan.num_positions()) {
        return Err(Error::config(format!("scan position {p} out of range")));
    }
    Ok(())
}

/// Simulates the full scan. See [`simulate_positions`].
pub fn simulate<T: Real>(
    scene: &GroundTruthScene<T>,
    gate: &GateConfig<T>,
    scan: &ScanPattern,
    noise: &NoiseConfig<T>,
) -> Result<CountCube> {
    let all: Vec<usize> = (0..scan.num_positions()).collect();
    simulate_positions(scene, gate, scan, noise, &all)
}

/// Simulates acquisition using only the listed scan positions.
///
/// Every pixel is read from the frame of the position that illuminates it
/// most strongly, so each count is a sum of `bitplanes_per_position` binary
/// exposures. Pixels outside every selected spot stay zero. Each position
/// draws from its own ChaCha stream keyed by `(rng_seed, position)`, which
/// makes the result independent of scheduling.
pub fn simulate_positions<T: Real>(
    scene: &GroundTruthScene<T>,
    gate: &GateConfig<T>,
    scan: &ScanPattern,
    noise: &NoiseConfig<T>,
    positions: &[usize],
) -> Result<CountCube> {
    check_inputs(scene, gate, scan, noise, positions)?;
    let (h, w) = scene.dims();
    let k_gates = gate.num_gates;
    let n_planes = scan.bitplanes_per_position;
    let assignment = scan.assign_pixels(positions, h, w);

    let mut per_position: Vec<Vec<(usize, usize)>> = vec![Vec::new(); scan.num_positions()];
    for ((r, c), slot) in assignment.indexed_iter() {
        if let Some((p, _)) = slot {
            per_position[*p as usize].push((r, c));
        }
    }

    let draws: Vec<(usize, Vec<u16>)> = per_position
        .par_iter()
        .enumerate()
        .filter(|(_, px)| !px.is_empty())
        .map(|(p, pixels)| {
            let mut rng = ChaCha8Rng::seed_from_u64(noise.rng_seed);
            rng.set_stream(p as u64);
            let mut out = Vec::with_capacity(pixels.len() * k_gates);
            for &(r, c) in pixels {
                let illum = T::lit(assignment[[r, c]].map_or(0.0, |(_, g)| g));
                for k in 0..k_gates {
                    let lambda = expected_rate_lit(scene, r, c, k, gate, noise, illum).as_f64();
                    out.push(sample_binary_sum(&mut rng, n_planes, lambda));
                }
            }
            (p, out)
        })
        .collect();

    let mut counts = Array3::<u16>::zeros((k_gates, h, w));
    for (p, values) in draws {
        for (i, &(r, c)) in per_position[p].iter().enumerate() {
            for k in 0..k_gates {
                counts[[k, r, c]] = values[i * k_gates + k];
            }
        }
    }
    Ok(CountCube { counts, bitplanes: n_planes })
}

/// Number of ones among `n` binary exposures with detection probability
/// `1 - exp(-lambda)`.
fn sample_binary_sum<R: Rng>(rng: &mut R, n: u32, lambda: f64) -> u16 {
    if lambda <= 0.0 {
        return 0;
    }
    let p = -(-lambda).exp_m1();
    if p >= 1.0 {
        return n as u16;
    }
    Binomial::new(n as u64, p).expect("probability in [0, 1)").sample(rng) as u16
}

/// Noiseless counterpart of [`simulate_positions`]: the expected count
/// `N·(1 - exp(-λ))` at every covered pixel.
pub fn expected_cube<T: Real>(
    scene: &GroundTruthScene<T>,
    gate: &GateConfig<T>,
    scan: &ScanPattern,
    noise: &NoiseConfig<T>,
    positions: &[usize],
) -> Result<SampleCube<T>> {
    check_inputs(scene, gate, scan, noise, positions)?;
    let (h, w) = scene.dims();
    let assignment = scan.assign_pixels(positions, h, w);
    let n = T::lit(scan.bitplanes_per_position as f64);
    let mut data = Array3::<T>::zeros((gate.num_gates, h, w));
    for ((r, c), slot) in assignment.indexed_iter() {
        if let Some((_, g)) = slot {
            for k in 0..gate.num_gates {
                let lambda = expected_rate_lit(scene, r, c, k, gate, noise, T::lit(*g));
                data[[k, r, c]] = -n * (-lambda).exp_m1();
            }
        }
    }
    Ok(SampleCube { data, bitplanes: scan.bitplanes_per_position })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_panel_board_scene, PanelBoardSpec};

    fn flat_scene(h: usize, w: usize, depth: f64, refl: f64) -> GroundTruthScene<f64> {
        GroundTruthScene::new(
            Array2::from_elem((h, w), depth),
            Array2::from_elem((h, w), refl),
            Array3::zeros((h, w, 3)),
        )
        .unwrap()
    }

    #[test]
    fn rate_at_edge_midpoint_is_half_amplitude() {
        let gate = GateConfig::<f64>::default();
        // depth exactly at gate index 20
        let depth = gate.index_to_depth(20.0);
        let scene = flat_scene(1, 1, depth, 1.0);
        let noise = NoiseConfig::signal_only(0.8, 1, 1, 0);
        let lam = expected_rate(&scene, 0, 0, 20, &gate, &noise);
        assert!((lam - 0.4).abs() < 1e-12);
        let late = expected_rate(&scene, 0, 0, 50, &gate, &noise);
        assert!((late - 0.8).abs() < 1e-12);
    }

    #[test]
    fn sharp_edge_approaches_step() {
        let gate = GateConfig::<f64> { edge_width_h: 1e-3, ..GateConfig::default() };
        let scene = flat_scene(1, 1, gate.index_to_depth(20.3), 1.0);
        let noise = NoiseConfig::signal_only(2.0, 1, 1, 0);
        for k in 0..gate.num_gates {
            let d: f64 = 20.3;
            if (k as f64 - d).abs() >= 5.0 * gate.edge_width_h {
                let step = if (k as f64) > d { 2.0 } else { 0.0 };
                assert!((expected_rate(&scene, 0, 0, k, &gate, &noise) - step).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rate_is_monotone_in_gate() {
        let mut spec = PanelBoardSpec::<f64>::reference();
        spec.board_px = 40;
        spec.blobs.clear();
        let scene = build_panel_board_scene(&spec, 60, 60).unwrap();
        let gate = GateConfig::default();
        let noise = NoiseConfig::signal_only(0.5, 60, 60, 0);
        for (r, c) in [(0, 0), (20, 20), (45, 50)] {
            let prof: Vec<f64> = (0..51).map(|k| expected_rate(&scene, r, c, k, &gate, &noise)).collect();
            assert!(prof.windows(2).all(|p| p[1] >= p[0]));
        }
    }

    #[test]
    fn depth_index_conversion() {
        let gate = GateConfig::<f64>::default();
        let a = depth_to_gate_index(150.0, 150.0, &gate).unwrap();
        let b = depth_to_gate_index(150.075, 150.0, &gate).unwrap();
        assert!((b - a - 1.0).abs() < 1e-9);
        assert_eq!(a, gate.index_offset);
        for d in [149.2, 150.0, 150.3137, 152.9] {
            let i = depth_to_gate_index(d, 150.0, &gate).unwrap();
            let back = gate_index_to_depth(i, 150.0, &gate).unwrap();
            assert!((back - d).abs() < 1e-9);
        }
        let mut bad = gate.clone();
        bad.range_per_step_m = 0.0;
        assert!(depth_to_gate_index(150.0, 150.0, &bad).is_err());
    }

    #[test]
    fn round_trip_ranging_halves_the_step() {
        let g = GateConfig::<f64>::default().with_round_trip_ranging();
        assert!((g.range_per_step_m - 0.037_474_057).abs() < 1e-8);
    }

    #[test]
    fn zero_rates_give_empty_cube() {
        let scene = flat_scene(30, 30, 150.0, 1.0);
        let noise = NoiseConfig::signal_only(0.0, 30, 30, 7);
        let scan = ScanPattern::tiling(30, 30, 3, 10, 256);
        let cube = simulate(&scene, &GateConfig::default(), &scan, &noise).unwrap();
        assert!(cube.counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn uncovered_pixels_stay_zero_and_counts_bounded() {
        let scene = flat_scene(40, 40, 150.0, 1.0);
        let mut noise = NoiseConfig::signal_only(1.5, 40, 40, 3);
        noise.background_pp = 0.2;
        let scan = ScanPattern::tiling(40, 40, 4, 10, 64);
        let cube = simulate_positions(&scene, &GateConfig::default(), &scan, &noise, &[0, 5]).unwrap();
        let covered = scan.coverage_mask(&[0, 5], 40, 40);
        for ((k, r, c), &v) in cube.counts.indexed_iter() {
            assert!(v as u32 <= 64);
            if !covered[[r, c]] {
                assert_eq!(v, 0, "gate {k} pixel ({r},{c})");
            }
        }
        assert!(cube.counts.iter().any(|&v| v > 0));
    }

    #[test]
    fn binomial_moments() {
        // λ = 0.1 everywhere (background only) → Binomial(256, 1 - e^-0.1)
        let (h, w) = (100, 100);
        let scene = flat_scene(h, w, 150.0, 0.0);
        let mut noise = NoiseConfig::signal_only(0.0, h, w, 11);
        noise.background_pp = 0.1;
        let gate = GateConfig { num_gates: 2, ..GateConfig::default() };
        let scan = ScanPattern::tiling(h, w, 2, 50, 256);
        let cube = simulate(&scene, &gate, &scan, &noise).unwrap();
        let vals: Vec<f64> = cube.counts.iter().map(|&c| c as f64).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let p = 1.0 - (-0.1f64).exp();
        let (mu, sigma2) = (256.0 * p, 256.0 * p * (1.0 - p));
        assert!((mu - 24.36).abs() < 0.01);
        assert!((mean - mu).abs() < 3.0 * (sigma2 / n).sqrt(), "mean {mean} vs {mu}");
        // variance of the sample variance ≈ 2σ⁴/n for near-normal counts
        assert!((var - sigma2).abs() < 4.0 * (2.0 * sigma2 * sigma2 / n).sqrt(), "var {var} vs {sigma2}");
    }

    #[test]
    fn seed_determinism() {
        let scene = flat_scene(32, 32, 150.2, 0.7);
        let gate = GateConfig::default();
        let scan = ScanPattern::tiling(32, 32, 4, 12, 128);
        let mut noise = NoiseConfig::signal_only(0.4, 32, 32, 99);
        noise.background_pp = 0.01;
        let a = simulate(&scene, &gate, &scan, &noise).unwrap();
        let b = simulate(&scene, &gate, &scan, &noise).unwrap();
        assert_eq!(a, b);
        noise.rng_seed = 100;
        assert_ne!(a, simulate(&scene, &gate, &scan, &noise).unwrap());
    }

    #[test]
    fn reference_pattern_covers_crop() {
        let scan = ScanPattern::reference_geometry(228, 228);
        let all: Vec<usize> = (0..scan.num_positions()).collect();
        assert!(scan.coverage_mask(&all, 228, 228).iter().all(|&m| m));
        // a spot near the middle of the grid is not clipped
        let single = scan.footprint(210, 228, 228);
        assert_eq!(single.row1 - single.row0, 50);
        assert_eq!(single.col1 - single.col0, 50);
    }

    #[test]
    fn gaussian_spot_prefers_nearest_center() {
        let mut scan = ScanPattern::tiling(40, 40, 2, 30, 8);
        scan.spot_profile = SpotProfile::Gaussian { sigma_px: 10.0 };
        let a = scan.assign_pixels(&[0, 1, 2, 3], 40, 40);
        let (p, g) = a[[5, 5]].unwrap();
        assert_eq!(p, 0);
        assert!(g > 0.0 && g <= 1.0);
        assert_eq!(a[[35, 35]].unwrap().0, 3);
    }
}
