//! Counting metrics: MAE, RMSE and the grid average mean absolute error.

use crate::error::{Error, Result};
use crate::tensor::Grid2;

/// Mean absolute and root-mean-square error over per-image counts.
pub fn mae_rmse(preds: &[f64], gts: &[f64]) -> Result<(f64, f64)> {
    if preds.len() != gts.len() {
        return Err(Error::Usage(format!("{} predictions vs {} ground truths", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return Err(Error::Usage("no samples".into()));
    }
    let n = preds.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, g) in preds.iter().zip(gts) {
        let d = g - p;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

/// Cell boundaries along one axis for `cells` equal cells; the last cell
/// absorbs the remainder.
fn bounds(len: usize, cells: usize) -> Vec<(usize, usize)> {
    let step = len / cells;
    (0..cells)
        .map(|c| {
            let start = c * step;
            let end = if c + 1 == cells { len } else { start + step };
            (start, end)
        })
        .collect()
}

fn cell_sum(g: &Grid2, (i0, i1): (usize, usize), (j0, j1): (usize, usize)) -> f64 {
    let mut acc = 0.0f64;
    for i in i0..i1 {
        for j in j0..j1 {
            acc += g.get(i, j) as f64;
        }
    }
    acc
}

/// GAME(L): sum over a `2^L x 2^L` partition of the absolute per-cell count
/// error.
pub fn game(pred: &Grid2, gt: &Grid2, level: u32) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Usage(format!("shape {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let cells = 1usize << level;
    let rows = bounds(pred.h(), cells);
    let cols = bounds(pred.w(), cells);
    let mut total = 0.0;
    for &r in &rows {
        for &c in &cols {
            total += (cell_sum(pred, r, c) - cell_sum(gt, r, c)).abs();
        }
    }
    Ok(total)
}

/// Sum of a grid in the same order [`game`] uses for a single cell.
pub fn grid_count(g: &Grid2) -> f64 {
    cell_sum(g, (0, g.h()), (0, g.w()))
}
