//! Sample grids: one row per example showing the original patch, the
//! generator input and the synthetic opposite-class output.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::patch::{build_conditioned_input, Patch};
use crate::raster::save_png8;
use crate::rng;

/// Pixels of white space between cells.
pub const GRID_GAP: usize = 2;
pub const GRID_COLUMNS: usize = 3;

pub struct GridRow<'a> {
    pub original: ArrayView2<'a, f32>,
    pub input: ArrayView2<'a, f32>,
    pub synthetic: ArrayView2<'a, f32>,
}

pub fn sample_grid(rows: &[GridRow<'_>]) -> Result<Array2<f32>> {
    let Some(first) = rows.first() else {
        return Err(Error::invalid("sample grid needs at least one row"));
    };
    let (h, w) = first.original.dim();
    let cell = |r: usize, c: usize| (GRID_GAP + r * (h + GRID_GAP), GRID_GAP + c * (w + GRID_GAP));
    let mut out = Array2::<f32>::ones(cell(rows.len(), GRID_COLUMNS));
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in [row.original, row.input, row.synthetic].into_iter().enumerate() {
            if img.dim() != (h, w) {
                return Err(Error::invalid(format!("grid cell ({r}, {c}) is {:?}, expected {:?}", img.dim(), (h, w))));
            }
            let (y, x) = cell(r, c);
            out.slice_mut(s![y..y + h, x..x + w]).assign(&img);
        }
    }
    Ok(out)
}

pub fn save_sample_grid(path: &Path, rows: &[GridRow<'_>]) -> Result<()> {
    save_png8(path, sample_grid(rows)?.view())
}

/// Grid of the first `max_rows` synthesis results. `sources[i]` must be
/// the patch `synthetic[i]` was generated from with `seed`; the generator
/// input is rebuilt from the synthetic patch's mask and target class.
pub fn save_synthesis_grid(path: &Path, sources: &[Patch], synthetic: &[Patch], seed: u64, max_rows: usize) -> Result<()> {
    let n = sources.len().min(synthetic.len()).min(max_rows);
    let mut inputs = Vec::with_capacity(n);
    for (i, (src, syn)) in sources.iter().zip(synthetic).take(n).enumerate() {
        let noise = rng::derive_seed(seed, "synthesis-noise", i as u64);
        inputs.push(build_conditioned_input(src, &syn.mask, syn.label, noise)?);
    }
    let rows: Vec<GridRow> = (0..n)
        .map(|i| GridRow { original: sources[i].image.view(), input: inputs[i].corrupted(), synthetic: synthetic[i].image.view() })
        .collect();
    save_sample_grid(path, &rows)
}

/// Number of rows in a grid image of height `height` built from `cell`-sized patches.
pub fn grid_rows(height: usize, cell: usize) -> usize {
    (height - GRID_GAP) / (cell + GRID_GAP)
}

/// Number of columns in a grid image of width `width`.
pub fn grid_columns(width: usize, cell: usize) -> usize {
    (width - GRID_GAP) / (cell + GRID_GAP)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_columns_per_row() {
        let a = Array2::<f32>::zeros((8, 8));
        let rows: Vec<GridRow> = (0..4).map(|_| GridRow { original: a.view(), input: a.view(), synthetic: a.view() }).collect();
        let g = sample_grid(&rows).unwrap();
        assert_eq!(grid_columns(g.dim().1, 8), 3);
        assert_eq!(grid_rows(g.dim().0, 8), 4);
        assert_eq!(g[[GRID_GAP, GRID_GAP]], 0.0);
        assert_eq!(g[[0, 0]], 1.0);
    }
}
