//! Synthetic crowd scenes.
//!
//! Each scene is a planar ground viewed by a tilted camera: the perspective
//! value grows linearly down the image. The ground carries a stripe texture
//! spaced at a fixed real-world interval, and every person is rendered as a
//! dark disc whose radius is proportional to the perspective value at its
//! row. Both cues let a network read scale off the image alone.

use crate::data::density::HeadAnnotations;
use crate::error::{Error, Result};
use crate::perspective::PerspectiveMap;
use crate::tensor::{Grid2, Rng, Tensor4};

/// Head radius in meters; disc radius in pixels is this times the
/// perspective value.
pub const HEAD_RADIUS_M: f32 = 0.11;
/// Real-world spacing of the ground stripes in meters.
const STRIPE_M: f32 = 0.5;
const MAX_ATTEMPTS: usize = 400;

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    /// `1 x 3 x H x W`, values in `[0, 1]`.
    pub image: Tensor4,
    pub heads: HeadAnnotations,
    pub persp: PerspectiveMap,
    /// Rendered disc radius per head, in the order of `heads.points`.
    pub radii: Vec<f32>,
    pub seed: u64,
}

impl SyntheticScene {
    /// Radius of a disc centered on row `y` of this scene.
    pub fn radius_at_row(&self, y: f32) -> f32 {
        let row = (y.max(0.0) as usize).min(self.persp.grid().h() - 1);
        HEAD_RADIUS_M * self.persp.grid().get(row, 0)
    }
}

/// Deterministic per-scene seed derivation (splitmix64 finalizer).
fn child_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn synth_dataset(n_scenes: usize, image_shape: (usize, usize), heads: (usize, usize), seed: u64) -> Result<Vec<SyntheticScene>> {
    if n_scenes == 0 {
        return Err(Error::Usage("n_scenes must be >= 1".into()));
    }
    let (h, w) = image_shape;
    if h < 2 || w < 2 {
        return Err(Error::InvalidShape(format!("{h}x{w}")));
    }
    if heads.0 > heads.1 {
        return Err(Error::Usage(format!("head range {}..{}", heads.0, heads.1)));
    }
    (0..n_scenes)
        .map(|i| synth_scene(image_shape, heads, child_seed(seed, i as u64)))
        .collect()
}

pub fn synth_scene(image_shape: (usize, usize), heads: (usize, usize), seed: u64) -> Result<SyntheticScene> {
    let (h, w) = image_shape;
    let mut rng = Rng::new(seed);
    let hf = h as f32;
    let s_top = hf * rng.range(0.03, 0.10);
    let s_bot = hf * rng.range(0.18, 0.40);
    let slope = (s_bot - s_top) / (hf - 1.0);
    let persp_row: Vec<f32> = (0..h).map(|y| s_top + slope * y as f32).collect();
    let mut pgrid = Grid2::zeros(h, w);
    for (y, &s) in persp_row.iter().enumerate() {
        pgrid.data_mut()[y * w..(y + 1) * w].fill(s);
    }

    // ground stripes: phase advances by 1/s(y) meters per pixel
    let mut phase = vec![0.0f32; h];
    for y in 1..h {
        phase[y] = phase[y - 1] + 0.5 * (1.0 / persp_row[y - 1] + 1.0 / persp_row[y]);
    }
    let offset = rng.range(0.0, STRIPE_M);
    let tint = [rng.range(0.7, 1.0), rng.range(0.7, 1.0), rng.range(0.7, 1.0)];
    let base = rng.range(0.45, 0.6);
    let mut image = Tensor4::zeros([1, 3, h, w]);
    for y in 0..h {
        let stripe = (2.0 * std::f32::consts::PI * (phase[y] + offset) / STRIPE_M).sin();
        let bg = base + 0.12 * stripe;
        for x in 0..w {
            for (c, t) in tint.iter().enumerate() {
                let v = t * bg + rng.normal(0.0, 0.02);
                image.set(0, c, y, x, v);
            }
        }
    }

    let count = rng.between(heads.0, heads.1);
    let mut points: Vec<(f32, f32)> = Vec::with_capacity(count);
    let mut radii: Vec<f32> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let x = rng.range(0.0, w as f32);
            let y = rng.range(0.0, hf);
            let r = HEAD_RADIUS_M * persp_row[(y as usize).min(h - 1)];
            let clear = points
                .iter()
                .zip(&radii)
                .all(|(&(px, py), &pr)| ((px - x).powi(2) + (py - y).powi(2)).sqrt() >= r + pr);
            if clear {
                points.push((x, y));
                radii.push(r);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place {count} heads in a {h}x{w} scene"
            )));
        }
    }

    for (&(cx, cy), &r) in points.iter().zip(&radii) {
        let color = [rng.range(0.05, 0.25), rng.range(0.05, 0.2), rng.range(0.05, 0.2)];
        let reach = r + 1.0;
        let (i0, i1) = ((cy - reach).floor().max(0.0) as usize, ((cy + reach).ceil() as usize).min(h - 1));
        let (j0, j1) = ((cx - reach).floor().max(0.0) as usize, ((cx + reach).ceil() as usize).min(w - 1));
        for i in i0..=i1 {
            for j in j0..=j1 {
                let d = ((i as f32 + 0.5 - cy).powi(2) + (j as f32 + 0.5 - cx).powi(2)).sqrt();
                let alpha = (r + 0.5 - d).clamp(0.0, 1.0);
                if alpha == 0.0 {
                    continue;
                }
                for (c, col) in color.iter().enumerate() {
                    let v = image.get(0, c, i, j);
                    image.set(0, c, i, j, (1.0 - alpha) * v + alpha * col);
                }
            }
        }
    }
    image.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    Ok(SyntheticScene {
        image,
        heads: HeadAnnotations::new(format!("scene_{seed:016x}"), points),
        persp: PerspectiveMap::new(pgrid)?,
        radii,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = synth_dataset(3, (64, 64), (5, 15), 42).unwrap();
        let b = synth_dataset(3, (64, 64), (5, 15), 42).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.heads, y.heads);
            assert_eq!(x.persp, y.persp);
        }
        let c = synth_dataset(1, (64, 64), (5, 15), 43).unwrap();
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn radius_follows_perspective() {
        for s in synth_dataset(5, (96, 80), (10, 30), 7).unwrap() {
            assert_eq!(s.radii.len(), s.heads.len());
            s.heads.check_bounds(96, 80).unwrap();
            for (&(_, y), &r) in s.heads.points.iter().zip(&s.radii) {
                assert_eq!(r, s.radius_at_row(y));
            }
            for (&(_, y1), &r1) in s.heads.points.iter().zip(&s.radii) {
                for (&(_, y2), &r2) in s.heads.points.iter().zip(&s.radii) {
                    let (p1, p2) = (s.persp.grid().get(y1 as usize, 0), s.persp.grid().get(y2 as usize, 0));
                    if p2 > p1 {
                        assert!(r2 > r1);
                    }
                }
            }
        }
    }

    #[test]
    fn infeasible_density_reported() {
        let r = synth_dataset(1, (32, 32), (4000, 4000), 1);
        assert!(matches!(r, Err(Error::Generation(_))));
    }
}
