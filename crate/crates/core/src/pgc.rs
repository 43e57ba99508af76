//! Spatially variant Gaussian smoothing, the forward half of
//! perspective-guided convolution. Used only as a runtime baseline.
//!
//! Each output pixel is a Gaussian-weighted average of its `k x k`
//! neighborhood with a per-pixel standard deviation. The window is
//! renormalized over its in-bounds taps so constants pass through
//! unchanged; a standard deviation below [`SIGMA_MIN`] copies the input.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Grid2, Tensor4};

pub const SIGMA_MIN: f32 = 1e-3;

/// Normalized window weights for pixel `(i, j)`, as `(flat index, weight)`.
fn window(h: usize, w: usize, i: usize, j: usize, sigma: f32, k: usize) -> Vec<(u32, f32)> {
    if sigma < SIGMA_MIN {
        return vec![((i * w + j) as u32, 1.0)];
    }
    let half = (k / 2) as i64;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut taps = Vec::with_capacity(k * k);
    let mut total = 0.0f32;
    for di in -half..=half {
        for dj in -half..=half {
            let (qi, qj) = (i as i64 + di, j as i64 + dj);
            if qi < 0 || qj < 0 || qi >= h as i64 || qj >= w as i64 {
                continue;
            }
            let g = (-((di * di + dj * dj) as f32) * inv).exp();
            total += g;
            taps.push(((qi as usize * w + qj as usize) as u32, g));
        }
    }
    for t in &mut taps {
        t.1 /= total;
    }
    taps
}

pub fn pgc_smooth_forward(x: &Tensor4, sigma: &Grid2, kernel_size: usize) -> Result<Tensor4> {
    if kernel_size == 0 || kernel_size.is_multiple_of(2) {
        return Err(Error::Domain(format!("kernel size {kernel_size} must be odd")));
    }
    let [n, c, h, w] = x.shape();
    if sigma.shape() != (h, w) {
        return Err(Error::Shape(format!("sigma {:?} vs input {h}x{w}", sigma.shape())));
    }
    if let Some(s) = sigma.data().iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::Domain(format!("sigma entry {s} must be >= 0")));
    }
    let windows: Vec<Vec<(u32, f32)>> = (0..h * w)
        .into_par_iter()
        .map(|p| window(h, w, p / w, p % w, sigma.data()[p], kernel_size))
        .collect();
    let mut out = Tensor4::zeros([n, c, h, w]);
    let hw = h * w;
    out.data_mut()
        .par_chunks_mut(hw)
        .zip(x.data().par_chunks(hw))
        .for_each(|(dst, src)| {
            for (d, win) in dst.iter_mut().zip(&windows) {
                *d = win.iter().map(|&(q, g)| g * src[q as usize]).sum();
            }
        });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdconv::{dilated_conv_ref, ConvWeights};
    use crate::tensor::{Fill, Rng};

    #[test]
    fn zero_sigma_is_identity() {
        let mut rng = Rng::new(1);
        let x = Tensor4::new([1, 2, 5, 5], Fill::Gaussian { mean: 0.0, std: 1.0, rng: &mut rng }).unwrap();
        let y = pgc_smooth_forward(&x, &Grid2::zeros(5, 5), 7).unwrap();
        assert_eq!(x, y);
        // followed by a plain convolution, identical to the convolution alone
        let w = ConvWeights::gaussian(3, 2, 3, 1.0, &mut rng).unwrap();
        assert_eq!(dilated_conv_ref(&y, &w, 1).unwrap(), dilated_conv_ref(&x, &w, 1).unwrap());
    }

    #[test]
    fn constants_preserved() {
        let x = Tensor4::new([1, 1, 6, 6], Fill::Const(4.0)).unwrap();
        let s = Grid2::from_vec(6, 6, (0..36).map(|v| v as f32 * 0.1).collect()).unwrap();
        let y = pgc_smooth_forward(&x, &s, 5).unwrap();
        assert!(y.data().iter().all(|v| (v - 4.0).abs() < 1e-5));
    }

    #[test]
    fn matches_double_loop() {
        let mut rng = Rng::new(2);
        let x = Tensor4::new([1, 1, 6, 7], Fill::Gaussian { mean: 0.0, std: 1.0, rng: &mut rng }).unwrap();
        let sigma = 0.75f64;
        let y = pgc_smooth_forward(&x, &Grid2::filled(6, 7, sigma as f32), 3).unwrap();
        for i in 0..6i64 {
            for j in 0..7i64 {
                let (mut num, mut den) = (0.0f64, 0.0f64);
                for k in 0..6i64 {
                    for l in 0..7i64 {
                        if (k - i).abs() > 1 || (l - j).abs() > 1 {
                            continue;
                        }
                        let g = (-(((k - i).pow(2) + (l - j).pow(2)) as f64) / (2.0 * sigma * sigma)).exp()
                            / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
                        num += g * x.get(0, 0, k as usize, l as usize) as f64;
                        den += g;
                    }
                }
                assert!((y.get(0, 0, i as usize, j as usize) as f64 - num / den).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor4::zeros([1, 1, 3, 3]);
        assert!(matches!(pgc_smooth_forward(&x, &Grid2::zeros(3, 3), 4), Err(Error::Domain(_))));
    }
}
