//! Ground-truth scenes: a four-panel depth board with optional foreground
//! blobs, rendered together with a perfectly registered RGB image.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Real;

/// Axis-aligned pixel rectangle, half-open on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(row: usize, col: usize, height: usize, width: usize) -> Self {
        Rect { row, col, height, width }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row && row < self.row + self.height && col >= self.col && col < self.col + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn fits_in(&self, rows: usize, cols: usize) -> bool {
        self.row + self.height <= rows && self.col + self.width <= cols
    }

    /// Iterates `(row, col)` pairs in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.row..self.row + self.height)
            .flat_map(move |r| (self.col..self.col + self.width).map(move |c| (r, c)))
    }

    /// A `side`×`side` rectangle centred in `self`.
    pub fn centered(&self, side: usize) -> Rect {
        Rect::new(
            self.row + (self.height.saturating_sub(side)) / 2,
            self.col + (self.width.saturating_sub(side)) / 2,
            side.min(self.height),
            side.min(self.width),
        )
    }
}

/// Elliptical foreground region with its own range, reflectivity and colour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob<T> {
    #[serde(rename = "center_row_px")]
    pub center_row: T,
    #[serde(rename = "center_col_px")]
    pub center_col: T,
    #[serde(rename = "radius_rows_px")]
    pub radius_rows: T,
    #[serde(rename = "radius_cols_px")]
    pub radius_cols: T,
    pub depth_m: T,
    pub reflectivity: T,
    #[serde(rename = "color_rgb")]
    pub color: [u8; 3],
}

impl<T: Real> Blob<T> {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let dr = (T::lit(row as f64) - self.center_row) / self.radius_rows;
        let dc = (T::lit(col as f64) - self.center_col) / self.radius_cols;
        dr * dr + dc * dc <= T::one()
    }
}

/// Four-panel depth board. Panels are listed clockwise from the top-left:
/// top-left, top-right, bottom-right, bottom-left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct PanelBoardSpec<T> {
    pub base_range_m: T,
    pub panel_offsets_m: [T; 4],
    pub panel_reflectivity: [T; 4],
    #[serde(rename = "panel_colors_rgb")]
    pub panel_colors: [[u8; 3]; 4],
    pub board_px: usize,
    /// Range of everything outside the board.
    pub backdrop_range_m: T,
    pub backdrop_reflectivity: T,
    #[serde(rename = "backdrop_color_rgb")]
    pub backdrop_color: [u8; 3],
    #[serde(default)]
    pub blobs: Vec<Blob<T>>,
}

impl<T: Real> Default for PanelBoardSpec<T> {
    fn default() -> Self {
        Self::reference()
    }
}

impl<T: Real> PanelBoardSpec<T> {
    /// Board at 150 m with panels stepped 0/10/20/30 cm and a mannequin-like
    /// figure (head, torso, arm) standing half a metre in front of it.
    pub fn reference() -> Self {
        let l = T::lit;
        let skin = [225, 190, 160];
        let blob = |cr: f64, cc: f64, rr: f64, rc: f64| Blob {
            center_row: l(cr),
            center_col: l(cc),
            radius_rows: l(rr),
            radius_cols: l(rc),
            depth_m: l(149.6),
            reflectivity: l(0.8),
            color: skin,
        };
        PanelBoardSpec {
            base_range_m: l(150.0),
            panel_offsets_m: [l(0.0), l(0.10), l(0.20), l(0.30)],
            panel_reflectivity: [l(0.62), l(0.74), l(0.68), l(0.85)],
            panel_colors: [[200, 55, 45], [60, 160, 70], [45, 80, 195], [215, 190, 55]],
            board_px: 200,
            backdrop_range_m: l(151.5),
            backdrop_reflectivity: l(0.5),
            backdrop_color: [95, 95, 95],
            blobs: vec![
                blob(62.0, 114.0, 17.0, 14.0),
                blob(126.0, 114.0, 44.0, 24.0),
                blob(104.0, 150.0, 7.0, 34.0),
            ],
        }
    }

    /// A board without foreground blobs.
    pub fn without_blobs(mut self) -> Self {
        self.blobs.clear();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.board_px == 0 || !self.board_px.is_multiple_of(2) {
            return Err(Error::config(format!(
                "board_px must be a positive even number, got {}",
                self.board_px
            )));
        }
        let finite_nonneg = |v: T| v.is_finite() && v >= T::zero();
        let unit = |v: T| v.is_finite() && v >= T::zero() && v <= T::one();
        let mut depths = vec![self.base_range_m, self.backdrop_range_m];
        depths.extend(self.panel_offsets_m.iter().map(|&o| self.base_range_m + o));
        depths.extend(self.blobs.iter().map(|b| b.depth_m));
        if !depths.into_iter().all(finite_nonneg) {
            return Err(Error::config("scene depths must be finite and non-negative"));
        }
        let mut refl = vec![self.backdrop_reflectivity];
        refl.extend(self.panel_reflectivity);
        refl.extend(self.blobs.iter().map(|b| b.reflectivity));
        if !refl.into_iter().all(unit) {
            return Err(Error::config("reflectivities must lie in [0, 1]"));
        }
        for b in &self.blobs {
            if !(b.radius_rows > T::zero() && b.radius_cols > T::zero()) {
                return Err(Error::config("blob radii must be positive"));
            }
        }
        Ok(())
    }
}

/// Placement of the board inside a raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoardLayout {
    pub board: Rect,
}

impl BoardLayout {
    /// Centres a `board_px` board in a `height`×`width` raster.
    pub fn centered(board_px: usize, height: usize, width: usize) -> Result<Self> {
        if board_px > height || board_px > width {
            return Err(Error::dims(format!(
                "board of {board_px} px does not fit a {height}x{width} raster"
            )));
        }
        Ok(BoardLayout {
            board: Rect::new((height - board_px) / 2, (width - board_px) / 2, board_px, board_px),
        })
    }

    /// Quadrant rectangle for panel `id` (0 = TL, 1 = TR, 2 = BR, 3 = BL).
    pub fn quadrant(&self, id: usize) -> Rect {
        let half = self.board.height / 2;
        let (r, c) = match id {
            0 => (0, 0),
            1 => (0, half),
            2 => (half, half),
            3 => (half, 0),
            _ => panic!("panel id {id} out of range"),
        };
        Rect::new(self.board.row + r, self.board.col + c, half, half)
    }

    pub fn quadrants(&self) -> [Rect; 4] {
        [0, 1, 2, 3].map(|i| self.quadrant(i))
    }

    /// Panel id of a pixel, `None` outside the board.
    pub fn panel_at(&self, row: usize, col: usize) -> Option<usize> {
        if !self.board.contains(row, col) {
            return None;
        }
        let half = self.board.height / 2;
        let top = row < self.board.row + half;
        let left = col < self.board.col + half;
        Some(match (top, left) {
            (true, true) => 0,
            (true, false) => 1,
            (false, false) => 2,
            (false, true) => 3,
        })
    }
}

/// Per-pixel true range, reflectivity and co-registered RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthScene<T> {
    /// Range in metres, `(height, width)`.
    pub depth_m: Array2<T>,
    /// Return efficiency in `[0, 1]`, `(height, width)`.
    pub reflectivity: Array2<T>,
    /// Interleaved RGB, `(height, width, 3)`.
    pub rgb: Array3<u8>,
}

impl<T: Real> GroundTruthScene<T> {
    pub fn new(depth_m: Array2<T>, reflectivity: Array2<T>, rgb: Array3<u8>) -> Result<Self> {
        let scene = GroundTruthScene { depth_m, reflectivity, rgb };
        scene.validate()?;
        Ok(scene)
    }

    pub fn height(&self) -> usize {
        self.depth_m.nrows()
    }

    pub fn width(&self) -> usize {
        self.depth_m.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.depth_m.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.depth_m.dim();
        if self.reflectivity.dim() != (h, w) || self.rgb.dim() != (h, w, 3) {
            return Err(Error::dims(format!(
                "scene channels disagree: depth {:?}, reflectivity {:?}, rgb {:?}",
                self.depth_m.dim(),
                self.reflectivity.dim(),
                self.rgb.dim()
            )));
        }
        if !self.depth_m.iter().all(|&d| d.is_finite() && d >= T::zero()) {
            return Err(Error::data("scene depth must be finite and non-negative"));
        }
        if !self.reflectivity.iter().all(|&r| r >= T::zero() && r <= T::one()) {
            return Err(Error::data("scene reflectivity must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Rasterizes a panel board into a `height`×`width` scene. Blobs occlude the
/// board; where several surfaces overlap the nearest one wins.
pub fn build_panel_board_scene<T: Real>(
    spec: &PanelBoardSpec<T>,
    height: usize,
    width: usize,
) -> Result<GroundTruthScene<T>> {
    spec.validate()?;
    let layout = BoardLayout::centered(spec.board_px, height, width)?;
    let mut depth = Array2::from_elem((height, width), spec.backdrop_range_m);
    let mut refl = Array2::from_elem((height, width), spec.backdrop_reflectivity);
    let mut rgb = Array3::<u8>::zeros((height, width, 3));
    for ((r, c), d) in depth.indexed_iter_mut() {
        let (mut depth_here, mut refl_here, mut color) = match layout.panel_at(r, c) {
            Some(p) => (
                spec.base_range_m + spec.panel_offsets_m[p],
                spec.panel_reflectivity[p],
                spec.panel_colors[p],
            ),
            None => (spec.backdrop_range_m, spec.backdrop_reflectivity, spec.backdrop_color),
        };
        for blob in &spec.blobs {
            if blob.depth_m < depth_here && blob.contains(r, c) {
                depth_here = blob.depth_m;
                refl_here = blob.reflectivity;
                color = blob.color;
            }
        }
        *d = depth_here;
        refl[[r, c]] = refl_here;
        for (ch, v) in color.into_iter().enumerate() {
            rgb[[r, c, ch]] = v;
        }
    }
    GroundTruthScene::new(depth, refl, rgb)
}

/// Boolean raster of pixels belonging to any blob.
pub fn blob_mask<T: Real>(spec: &PanelBoardSpec<T>, height: usize, width: usize) -> Array2<bool> {
    Array2::from_shape_fn((height, width), |(r, c)| spec.blobs.iter().any(|b| b.contains(r, c)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_over(a: &Array2<f64>, rect: Rect) -> f64 {
        rect.pixels().map(|(r, c)| a[[r, c]]).sum::<f64>() / rect.area() as f64
    }

    #[test]
    fn quadrant_depths_match_offsets() {
        let spec = PanelBoardSpec::<f64>::reference().without_blobs();
        let scene = build_panel_board_scene(&spec, 228, 228).unwrap();
        let layout = BoardLayout::centered(spec.board_px, 228, 228).unwrap();
        let expected = [150.0, 150.0 + 0.10, 150.0 + 0.20, 150.0 + 0.30];
        for (id, &e) in expected.iter().enumerate() {
            let q = layout.quadrant(id);
            assert!(q.pixels().all(|(r, c)| scene.depth_m[[r, c]] == e));
            assert!((mean_over(&scene.depth_m, q) - e).abs() < 1e-9);
        }
    }

    #[test]
    fn flat_board_is_uniform() {
        let mut spec = PanelBoardSpec::<f64>::reference().without_blobs();
        spec.panel_offsets_m = [0.0; 4];
        spec.board_px = 228;
        let scene = build_panel_board_scene(&spec, 228, 228).unwrap();
        assert!(scene.depth_m.iter().all(|&d| d == 150.0));
    }

    #[test]
    fn blob_occludes_with_min_depth() {
        let mut spec = PanelBoardSpec::<f64>::reference().without_blobs();
        // straddles the TL/TR boundary at column 114
        spec.blobs.push(Blob {
            center_row: 60.0,
            center_col: 114.0,
            radius_rows: 12.0,
            radius_cols: 20.0,
            depth_m: 149.5,
            reflectivity: 0.7,
            color: [1, 2, 3],
        });
        let scene = build_panel_board_scene(&spec, 228, 228).unwrap();
        // brute-force min-depth rasterizer
        let layout = BoardLayout::centered(spec.board_px, 228, 228).unwrap();
        let mut touched = [false; 4];
        for r in 0..228 {
            for c in 0..228 {
                let mut candidates = vec![match layout.panel_at(r, c) {
                    Some(p) => 150.0 + spec.panel_offsets_m[p],
                    None => spec.backdrop_range_m,
                }];
                let b = &spec.blobs[0];
                let (dr, dc) = ((r as f64 - 60.0) / 12.0, (c as f64 - 114.0) / 20.0);
                if dr * dr + dc * dc <= 1.0 {
                    candidates.push(149.5);
                    touched[layout.panel_at(r, c).unwrap()] = true;
                    assert_eq!(scene.rgb[[r, c, 0]], b.color[0]);
                }
                let want = candidates.into_iter().fold(f64::INFINITY, f64::min);
                assert_eq!(scene.depth_m[[r, c]], want);
            }
        }
        assert!(touched[0] && touched[1]);
    }

    #[test]
    fn quadrants_partition_board() {
        let layout = BoardLayout::centered(200, 228, 228).unwrap();
        let mut count = Array2::<u8>::zeros((228, 228));
        for q in layout.quadrants() {
            for (r, c) in q.pixels() {
                count[[r, c]] += 1;
            }
        }
        for ((r, c), &n) in count.indexed_iter() {
            assert_eq!(n == 1, layout.board.contains(r, c));
            assert!(n <= 1);
            if n == 1 {
                let id = layout.panel_at(r, c).unwrap();
                assert!(layout.quadrant(id).contains(r, c));
            }
        }
    }

    #[test]
    fn rasterization_is_deterministic() {
        let spec = PanelBoardSpec::<f32>::reference();
        let a = build_panel_board_scene(&spec, 228, 228).unwrap();
        let b = build_panel_board_scene(&spec, 228, 228).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_board_is_rejected() {
        let spec = PanelBoardSpec::<f64>::reference();
        assert!(matches!(build_panel_board_scene(&spec, 100, 300), Err(Error::Dimension(_))));
    }

    #[test]
    fn odd_board_is_rejected() {
        let mut spec = PanelBoardSpec::<f64>::reference();
        spec.board_px = 201;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }
}
