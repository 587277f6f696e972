//! Activation compression: average pooling over patches, left/right region
//! pooling, tile reassembly, and the visual-mean + last-token representation
//! used for language-model layers.
//!
//! All means are accumulated in `f64` over values sorted per dimension, so the
//! output is bit-identical under any permutation of the pooled rows and for any
//! caller (extractor-side or engine-side) that goes through these kernels.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A `rows × cols` grid of `dim`-wide patch embeddings, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub values: Vec<f32>,
    /// Optional class token; never part of any pooled mean.
    pub cls: Option<Vec<f32>>,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * cols * dim {
            return Err(Error::ShapeMismatch(format!(
                "grid {rows}x{cols}x{dim} needs {} values, got {}",
                rows * cols * dim,
                values.len()
            )));
        }
        Ok(PatchGrid { rows, cols, dim, values, cls: None })
    }

    pub fn with_cls(mut self, cls: Vec<f32>) -> Result<Self> {
        if cls.len() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, found: cls.len() });
        }
        self.cls = Some(cls);
        Ok(self)
    }

    pub fn has_cls(&self) -> bool {
        self.cls.is_some()
    }

    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn patch(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.cols + col) * self.dim;
        &self.values[start..start + self.dim]
    }

    fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.dim)
    }
}

/// Column at which a grid is split into left/right regions when a category
/// does not configure one.
pub fn default_split_col(cols: usize) -> usize {
    cols / 2
}

/// Mean of the selected `dim`-wide rows of `data`, appended to `out`.
fn mean_rows_into(data: &[f32], dim: usize, rows: &[usize], out: &mut Vec<f32>) {
    let n = rows.len() as f64;
    let mut column = Vec::with_capacity(rows.len());
    for j in 0..dim {
        column.clear();
        column.extend(rows.iter().map(|&r| data[r * dim + j]));
        column.sort_unstable_by(f32::total_cmp);
        let sum: f64 = column.iter().map(|&v| v as f64).sum();
        out.push((sum / n) as f32);
    }
}

/// Element-wise mean over every patch (class token excluded).
pub fn avg_pool(grid: &PatchGrid) -> Result<Vec<f32>> {
    if grid.patch_count() == 0 || grid.dim == 0 {
        return Err(Error::EmptyGrid);
    }
    let rows: Vec<usize> = (0..grid.patch_count()).collect();
    let mut out = Vec::with_capacity(grid.dim);
    mean_rows_into(&grid.values, grid.dim, &rows, &mut out);
    Ok(out)
}

fn region_rows(rows: usize, cols: usize, split_col: usize) -> (Vec<usize>, Vec<usize>) {
    let mut left = Vec::with_capacity(rows * split_col);
    let mut right = Vec::with_capacity(rows * (cols - split_col));
    for r in 0..rows {
        for c in 0..cols {
            let idx = r * cols + c;
            if c < split_col { left.push(idx) } else { right.push(idx) }
        }
    }
    (left, right)
}

fn check_split(rows: usize, cols: usize, split_col: usize) -> Result<()> {
    if rows == 0 || split_col == 0 || split_col >= cols {
        return Err(Error::BadSplit { split_col, cols });
    }
    Ok(())
}

/// `[mean(left columns), mean(right columns)]`, left = `[0, split_col)`.
pub fn region_pool(grid: &PatchGrid, split_col: usize) -> Result<Vec<f32>> {
    if grid.dim == 0 {
        return Err(Error::EmptyGrid);
    }
    check_split(grid.rows, grid.cols, split_col)?;
    let (left, right) = region_rows(grid.rows, grid.cols, split_col);
    let mut out = Vec::with_capacity(2 * grid.dim);
    mean_rows_into(&grid.values, grid.dim, &left, &mut out);
    mean_rows_into(&grid.values, grid.dim, &right, &mut out);
    Ok(out)
}

/// Arrangement of image tiles in the original picture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLayout {
    pub tile_rows: usize,
    pub tile_cols: usize,
}

/// Stitch per-tile grids (row-major tile order) back into one image grid.
///
/// When `thumbnail_discarded` is set the last tile is the downscaled overview
/// and is dropped before stitching.
pub fn reassemble_tiles(
    tiles: &[PatchGrid],
    layout: TileLayout,
    thumbnail_discarded: bool,
) -> Result<PatchGrid> {
    let used = if thumbnail_discarded && !tiles.is_empty() {
        &tiles[..tiles.len() - 1]
    } else {
        tiles
    };
    let wanted = layout.tile_rows * layout.tile_cols;
    if used.len() != wanted || wanted == 0 {
        return Err(Error::ShapeMismatch(format!(
            "layout {}x{} needs {wanted} tiles, got {}",
            layout.tile_rows,
            layout.tile_cols,
            used.len()
        )));
    }
    let first = used[0].shape();
    if let Some((index, t)) = used.iter().enumerate().find(|(_, t)| t.shape() != first) {
        return Err(Error::TileShapeMismatch { index, expected: first, found: t.shape() });
    }
    let (tr, tc, dim) = first;
    let rows = layout.tile_rows * tr;
    let cols = layout.tile_cols * tc;
    let mut values = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        let tile_row = r / tr;
        for t_col in 0..layout.tile_cols {
            let tile = &used[tile_row * layout.tile_cols + t_col];
            let start = (r % tr) * tc * dim;
            values.extend_from_slice(&tile.values[start..start + tc * dim]);
        }
    }
    PatchGrid::new(rows, cols, dim, values)
}

/// Activations of one language-model layer over the full token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmSequence {
    pub len: usize,
    pub dim: usize,
    /// `len × dim`, row-major.
    pub values: Vec<f32>,
    /// Visual token positions; never contains the last position.
    pub visual: Vec<usize>,
}

impl LlmSequence {
    pub fn new(len: usize, dim: usize, values: Vec<f32>, visual: Vec<usize>) -> Result<Self> {
        if values.len() != len * dim {
            return Err(Error::ShapeMismatch(format!(
                "sequence {len}x{dim} needs {} values, got {}",
                len * dim,
                values.len()
            )));
        }
        if visual.is_empty() {
            return Err(Error::EmptyVisualSet);
        }
        if let Some(&bad) = visual.iter().find(|&&i| i + 1 >= len) {
            return Err(Error::ShapeMismatch(format!(
                "visual index {bad} must precede the last position {}",
                len.saturating_sub(1)
            )));
        }
        Ok(LlmSequence { len, dim, values, visual })
    }

    pub fn last_index(&self) -> usize {
        self.len - 1
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// `[mean over visual tokens, last token]`, length `2·dim`.
pub fn llm_concat(seq: &LlmSequence) -> Result<Vec<f32>> {
    if seq.visual.is_empty() {
        return Err(Error::EmptyVisualSet);
    }
    let mut out = Vec::with_capacity(2 * seq.dim);
    mean_rows_into(&seq.values, seq.dim, &seq.visual, &mut out);
    out.extend_from_slice(seq.row(seq.last_index()));
    Ok(out)
}

/// `[mean left visual, mean right visual, last token]`, length `3·dim`.
///
/// Visual tokens are taken in `seq.visual` order as a row-major
/// `grid_rows × grid_cols` grid.
pub fn llm_region_concat(
    seq: &LlmSequence,
    grid_rows: usize,
    grid_cols: usize,
    split_col: usize,
) -> Result<Vec<f32>> {
    if seq.visual.len() != grid_rows * grid_cols {
        return Err(Error::ShapeMismatch(format!(
            "{} visual tokens do not fill a {grid_rows}x{grid_cols} grid",
            seq.visual.len()
        )));
    }
    check_split(grid_rows, grid_cols, split_col)?;
    let (left, right) = region_rows(grid_rows, grid_cols, split_col);
    let left: Vec<usize> = left.into_iter().map(|i| seq.visual[i]).collect();
    let right: Vec<usize> = right.into_iter().map(|i| seq.visual[i]).collect();
    let mut out = Vec::with_capacity(3 * seq.dim);
    mean_rows_into(&seq.values, seq.dim, &left, &mut out);
    mean_rows_into(&seq.values, seq.dim, &right, &mut out);
    out.extend_from_slice(seq.row(seq.last_index()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn grid(rows: usize, cols: usize, dim: usize, values: &[f32]) -> PatchGrid {
        PatchGrid::new(rows, cols, dim, values.to_vec()).unwrap()
    }

    #[test]
    fn avg_pool_hand_arithmetic() {
        assert_eq!(avg_pool(&grid(1, 2, 1, &[2.0, 4.0])).unwrap(), [3.0]);
        let u = [0.25f32, -1.5, 7.0];
        let uniform: Vec<f32> = u.iter().copied().cycle().take(12).collect();
        assert_eq!(avg_pool(&grid(2, 2, 3, &uniform)).unwrap(), u);
    }

    #[test]
    fn cls_token_is_excluded() {
        let g = grid(1, 2, 1, &[2.0, 4.0]).with_cls(vec![1000.0]).unwrap();
        assert!(g.has_cls());
        assert_eq!(avg_pool(&g).unwrap(), [3.0]);
        assert!(grid(1, 1, 2, &[1.0, 2.0]).with_cls(vec![1.0]).is_err());
    }

    #[test]
    fn empty_grid() {
        assert_eq!(avg_pool(&grid(0, 3, 2, &[])), Err(Error::EmptyGrid));
    }

    #[test]
    fn region_pool_hand_arithmetic() {
        // column 0 holds 1 and 2, column 1 holds 3 and 5
        let g = grid(2, 2, 1, &[1.0, 3.0, 2.0, 5.0]);
        assert_eq!(region_pool(&g, 1).unwrap(), [1.5, 4.0]);
        let u = grid(2, 4, 1, &[0.5; 8]);
        assert_eq!(region_pool(&u, 2).unwrap(), [0.5, 0.5]);
    }

    #[test]
    fn region_pool_bad_split() {
        let g = grid(2, 2, 1, &[1.0; 4]);
        assert_eq!(region_pool(&g, 0), Err(Error::BadSplit { split_col: 0, cols: 2 }));
        assert!(region_pool(&g, 2).is_err());
        assert_eq!(default_split_col(7), 3);
    }

    #[test]
    fn tiles_with_thumbnail() {
        // 2x4 layout of 2x3 tiles + a thumbnail; tile k is filled with k.
        let tiles: Vec<PatchGrid> = (0..9).map(|k| grid(2, 3, 1, &[k as f32; 6])).collect();
        let layout = TileLayout { tile_rows: 2, tile_cols: 4 };
        let g = reassemble_tiles(&tiles, layout, true).unwrap();
        assert_eq!((g.rows, g.cols, g.dim), (4, 12, 1));
        assert_eq!(g.patch(0, 0), [0.0]);
        assert_eq!(g.patch(1, 11), [3.0]);
        assert_eq!(g.patch(2, 3), [5.0]);
        assert_eq!(g.patch(3, 11), [7.0]);
        assert!(g.values.iter().all(|&v| v < 8.0));
        assert!(reassemble_tiles(&tiles, layout, false).is_err());
    }

    #[test]
    fn single_tile_identity() {
        let t = grid(2, 2, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let g = reassemble_tiles(&[t.clone()], TileLayout { tile_rows: 1, tile_cols: 1 }, false)
            .unwrap();
        assert_eq!(g, t);
    }

    #[test]
    fn tile_shape_mismatch() {
        let tiles = [grid(1, 2, 1, &[0.0; 2]), grid(1, 3, 1, &[0.0; 3])];
        let err = reassemble_tiles(&tiles, TileLayout { tile_rows: 1, tile_cols: 2 }, false);
        assert!(matches!(err, Err(Error::TileShapeMismatch { index: 1, .. })));
    }

    #[test]
    fn llm_concat_hand_arithmetic() {
        let s = LlmSequence::new(3, 1, vec![2.0, 4.0, 9.0], vec![0, 1]).unwrap();
        assert_eq!(llm_concat(&s).unwrap(), [3.0, 9.0]);
        let s = LlmSequence::new(2, 2, vec![1.0, -1.0, 0.5, 0.25], vec![0]).unwrap();
        assert_eq!(llm_concat(&s).unwrap(), [1.0, -1.0, 0.5, 0.25]);
    }

    #[test]
    fn llm_sequence_validation() {
        assert_eq!(LlmSequence::new(2, 1, vec![0.0; 2], vec![]), Err(Error::EmptyVisualSet));
        assert!(LlmSequence::new(2, 1, vec![0.0; 2], vec![1]).is_err());
        assert!(LlmSequence::new(2, 1, vec![0.0; 3], vec![0]).is_err());
    }

    #[test]
    fn llm_region_hand_arithmetic() {
        let s = LlmSequence::new(3, 1, vec![1.0, 5.0, 7.0], vec![0, 1]).unwrap();
        assert_eq!(llm_region_concat(&s, 1, 2, 1).unwrap(), [1.0, 5.0, 7.0]);
        let s = LlmSequence::new(5, 2, [[0.5f32, 2.0]; 4].concat().into_iter().chain([3.0, -3.0]).collect(), vec![0, 1, 2, 3]).unwrap();
        assert_eq!(llm_region_concat(&s, 2, 2, 1).unwrap(), [0.5, 2.0, 0.5, 2.0, 3.0, -3.0]);
        assert!(matches!(llm_region_concat(&s, 1, 3, 1), Err(Error::ShapeMismatch(_))));
        assert!(matches!(llm_region_concat(&s, 2, 2, 2), Err(Error::BadSplit { .. })));
    }
}
