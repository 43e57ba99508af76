//! Count-preserving density targets.

use crate::error::{Error, Result};
use crate::tensor::Grid2;

pub const KERNEL_SIZE: usize = 15;
pub const KERNEL_SIGMA: f32 = 4.0;

/// Head positions in image pixel coordinates (`x` = column, `y` = row).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadAnnotations {
    pub image_id: String,
    pub points: Vec<(f32, f32)>,
}

impl HeadAnnotations {
    pub fn new(image_id: impl Into<String>, points: Vec<(f32, f32)>) -> Self {
        Self {
            image_id: image_id.into(),
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Rejects points outside `[0, w) x [0, h)`.
    pub fn check_bounds(&self, h: usize, w: usize) -> Result<()> {
        for &(x, y) in &self.points {
            if !(x >= 0.0 && y >= 0.0 && x < w as f32 && y < h as f32) {
                return Err(Error::Data(format!(
                    "head ({x}, {y}) outside {w}x{h} image {}",
                    self.image_id
                )));
            }
        }
        Ok(())
    }

    /// Mirrors the points for a horizontally flipped image of width `w`.
    pub fn flip_horizontal(&self, w: usize) -> Self {
        Self {
            image_id: self.image_id.clone(),
            points: self.points.iter().map(|&(x, y)| (w as f32 - 1.0 - x, y)).collect(),
        }
    }
}

/// Nonnegative grid whose sum is the number of heads it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap(pub Grid2);

impl DensityMap {
    pub fn grid(&self) -> &Grid2 {
        &self.0
    }

    pub fn count(&self) -> f64 {
        self.0.sum()
    }
}

fn gaussian_1d() -> [f64; KERNEL_SIZE] {
    let half = (KERNEL_SIZE / 2) as i64;
    let mut k = [0.0; KERNEL_SIZE];
    let s2 = 2.0 * (KERNEL_SIGMA as f64).powi(2);
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as i64 - half;
        *v = (-(d * d) as f64 / s2).exp();
    }
    k
}

/// Stamps a 15x15, sigma 4 Gaussian at each head (snapped to the nearest
/// pixel). Each stamp is clipped to the grid and renormalized so it adds
/// exactly one person.
pub fn make_density(heads: &HeadAnnotations, shape: (usize, usize)) -> Result<DensityMap> {
    let (h, w) = shape;
    if h == 0 || w == 0 {
        return Err(Error::InvalidShape(format!("{h}x{w}")));
    }
    heads.check_bounds(h, w)?;
    let g = gaussian_1d();
    let half = (KERNEL_SIZE / 2) as i64;
    let mut grid = Grid2::zeros(h, w);
    for &(x, y) in &heads.points {
        let ci = ((y + 0.5).floor() as i64).min(h as i64 - 1);
        let cj = ((x + 0.5).floor() as i64).min(w as i64 - 1);
        let (i0, i1) = ((ci - half).max(0), (ci + half).min(h as i64 - 1));
        let (j0, j1) = ((cj - half).max(0), (cj + half).min(w as i64 - 1));
        let mut total = 0.0f64;
        for i in i0..=i1 {
            for j in j0..=j1 {
                total += g[(i - ci + half) as usize] * g[(j - cj + half) as usize];
            }
        }
        for i in i0..=i1 {
            for j in j0..=j1 {
                let v = g[(i - ci + half) as usize] * g[(j - cj + half) as usize] / total;
                let idx = i as usize * w + j as usize;
                grid.data_mut()[idx] += v as f32;
            }
        }
    }
    Ok(DensityMap(grid))
}
