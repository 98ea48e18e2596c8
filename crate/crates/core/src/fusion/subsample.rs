//! Random subsets of scan positions.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acquisition::ScanPattern;
use crate::error::{Error, Result};

/// A chosen subset of scan positions and the pixels its spots reach.
#[derive(Debug, Clone, PartialEq)]
pub struct Subsample {
    /// Selected positions in acquisition order.
    pub positions: Vec<usize>,
    /// Union of the selected footprints.
    pub mask: Array2<bool>,
    /// Fraction of the raster covered by `mask`.
    pub coverage: f64,
}

/// Keeps `ceil(fraction · positions)` scan positions drawn without
/// replacement. The draw is a prefix of one seeded permutation, so for a fixed
/// seed smaller fractions select subsets of larger ones.
pub fn subsample_scan_positions(
    pattern: &ScanPattern,
    fraction: f64,
    seed: u64,
    height: usize,
    width: usize,
) -> Result<Subsample> {
    pattern.validate()?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("scan fraction must lie in (0, 1], got {fraction}")));
    }
    let total = pattern.num_positions();
    let keep = ((fraction * total as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(keep.min(total));
    let mask = pattern.coverage_mask(&order, height, width);
    let coverage = mask.iter().filter(|&&m| m).count() as f64 / mask.len().max(1) as f64;
    Ok(Subsample { positions: order, mask, coverage })
}
