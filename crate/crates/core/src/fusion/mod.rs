//! RGB-guided non-local fusion of sparse gated data.

pub mod objective;
pub mod solver;
pub mod subsample;
pub mod weights;

pub use objective::{negative_log_likelihood, weighted_l1, DataTerm, ObjectiveValue, LOG_GUARD};
pub use solver::{fuse, FusionConfig, FusionInputs, FusionOutput};
pub use subsample::{subsample_scan_positions, Subsample};
pub use weights::{
    compute_channel_differences, compute_color_differences, compute_depth_weights, compute_intensity_weights,
    rescale_rgb, ColorSpace, DifferenceField, FieldGeometry, WeightField,
};
