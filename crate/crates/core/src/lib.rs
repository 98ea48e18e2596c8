//! Depth and intensity imaging from time-gated single-photon data.
//!
//! The pipeline simulates gated SPAD acquisition of a scene, removes the
//! noise floor, fits an erf leading edge per pixel and, for sparse scans,
//! fuses the counts with a co-registered colour image through a non-local
//! total-variation prior.
//!
//! Numeric code is generic over [`Real`]; the [`f64`] and [`f32`] modules
//! provide concrete aliases.

// `!(x > 0)` also rejects NaN, which is the point of those checks
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acquisition;
pub mod error;
pub mod eval;
pub mod fill;
pub mod fitting;
pub mod fusion;
pub mod io;
pub mod pipeline;
pub mod preprocess;
pub mod render;
pub mod scalar;
pub mod scene;

pub use acquisition::{
    depth_to_gate_index, expected_cube, gate_index_to_depth, simulate, simulate_positions, CountCube, DarkCountSpec,
    GateConfig, NoiseConfig, SampleCube, ScanPattern, SpotProfile,
};
pub use error::{Error, Result};
pub use fill::{guided_fill, guided_nearest_index, nearest_valid_fill, nearest_valid_index};
pub use fitting::{
    apply_edge_correction, calibrate_edge_correction, fit_cube, fit_pixel, CubeFit, DepthRaster, EdgeCorrection,
    EdgeFunction, FitConfig, IntensityRaster, PixelEstimate, Reconstruction,
};
pub use fusion::{fuse, subsample_scan_positions, FusionConfig, FusionInputs, FusionOutput, Subsample};
pub use pipeline::{run_stage, RunConfig, Stage};
pub use preprocess::{preprocess, CleanedCube, HotPixelMask, PreprocessConfig, Preprocessed};
pub use scalar::Real;
pub use scene::{build_panel_board_scene, BoardLayout, GroundTruthScene, PanelBoardSpec, Rect};

/// Double-precision aliases.
pub mod f64 {
    pub type GateConfig = crate::GateConfig<f64>;
    pub type NoiseConfig = crate::NoiseConfig<f64>;
    pub type GroundTruthScene = crate::GroundTruthScene<f64>;
    pub type PanelBoardSpec = crate::PanelBoardSpec<f64>;
    pub type CleanedCube = crate::CleanedCube<f64>;
    pub type FitConfig = crate::FitConfig<f64>;
    pub type FusionConfig = crate::FusionConfig<f64>;
    pub type Reconstruction = crate::Reconstruction<f64>;
}

/// Single-precision aliases.
pub mod f32 {
    pub type GateConfig = crate::GateConfig<f32>;
    pub type NoiseConfig = crate::NoiseConfig<f32>;
    pub type GroundTruthScene = crate::GroundTruthScene<f32>;
    pub type PanelBoardSpec = crate::PanelBoardSpec<f32>;
    pub type CleanedCube = crate::CleanedCube<f32>;
    pub type FitConfig = crate::FitConfig<f32>;
    pub type FusionConfig = crate::FusionConfig<f32>;
    pub type Reconstruction = crate::Reconstruction<f32>;
}
