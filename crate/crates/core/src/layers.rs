//! Standard network layers with hand-written backward passes: strided
//! convolution, stride-2 transposed convolution, (leaky) ReLU, 2x2 max
//! pooling and bilinear upsampling.
//!
//! Convolutions go through an im2col buffer and a single matrix product per
//! batch item. Batch items are processed independently and weight gradients
//! are summed in item order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fdconv::ConvWeights;
use crate::tensor::{gemm, half_pixel_source, Rng, Tensor4};

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }
}

fn im2col(src: &[f32], c: usize, h: usize, w: usize, g: ConvGeom, oh: usize, ow: usize, cols: &mut [f32]) {
    let k = g.k;
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ci * k + ki) * k + kj) * ohw..((ci * k + ki) * k + kj + 1) * ohw];
                for oi in 0..oh {
                    let si = (oi * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oi * ow..(oi + 1) * ow];
                    if si < 0 || si >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[si as usize * w..(si as usize + 1) * w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let sj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if sj < 0 || sj >= w as isize { 0.0 } else { src_row[sj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back onto a `c x h x w` buffer.
fn col2im(cols: &[f32], c: usize, h: usize, w: usize, g: ConvGeom, oh: usize, ow: usize, dst: &mut [f32]) {
    let k = g.k;
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ci * k + ki) * k + kj) * ohw..((ci * k + ki) * k + kj + 1) * ohw];
                for oi in 0..oh {
                    let si = (oi * g.stride + ki) as isize - g.pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let sj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if sj >= 0 && sj < w as isize {
                            plane[si as usize * w + sj as usize] += row[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &Tensor4, w: &ConvWeights, g: ConvGeom) -> Result<Tensor4> {
    if x.c() != w.cin() || g.k != w.k() {
        return Err(Error::Shape(format!(
            "conv {}x{}x{k}x{k} on input {:?}",
            w.cout(),
            w.cin(),
            x.shape(),
            k = w.k()
        )));
    }
    let [n, cin, h, wd] = x.shape();
    if h + 2 * g.pad < g.k || wd + 2 * g.pad < g.k {
        return Err(Error::Shape(format!("input {h}x{wd} smaller than kernel")));
    }
    let (oh, ow) = (g.out_len(h), g.out_len(wd));
    let (cout, kk) = (w.cout(), g.k * g.k);
    let items: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|b| {
            let mut cols = vec![0.0; cin * kk * oh * ow];
            im2col(x.item(b), cin, h, wd, g, oh, ow, &mut cols);
            let mut out = vec![0.0; cout * oh * ow];
            gemm(cout, cin * kk, oh * ow, &w.kernel, false, &cols, false, &mut out, false);
            for co in 0..cout {
                out[co * oh * ow..(co + 1) * oh * ow]
                    .iter_mut()
                    .for_each(|v| *v += w.bias[co]);
            }
            out
        })
        .collect();
    Tensor4::from_vec([n, cout, oh, ow], items.concat())
}

/// Returns `(d_input, d_weights)`.
pub fn conv2d_backward(x: &Tensor4, w: &ConvWeights, g: ConvGeom, dy: &Tensor4) -> Result<(Tensor4, ConvWeights)> {
    let [n, cin, h, wd] = x.shape();
    let (oh, ow) = (g.out_len(h), g.out_len(wd));
    let (cout, kk) = (w.cout(), g.k * g.k);
    if dy.shape() != [n, cout, oh, ow] {
        return Err(Error::Shape(format!("upstream {:?} vs {:?}", dy.shape(), [n, cout, oh, ow])));
    }
    let parts: Vec<(Vec<f32>, Vec<f32>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let mut cols = vec![0.0; cin * kk * oh * ow];
            im2col(x.item(b), cin, h, wd, g, oh, ow, &mut cols);
            let mut dk = vec![0.0; cout * cin * kk];
            gemm(cout, oh * ow, cin * kk, dy.item(b), false, &cols, true, &mut dk, false);
            gemm(cin * kk, cout, oh * ow, &w.kernel, true, dy.item(b), false, &mut cols, false);
            let mut dx = vec![0.0; cin * h * wd];
            col2im(&cols, cin, h, wd, g, oh, ow, &mut dx);
            (dx, dk)
        })
        .collect();
    let mut dw = w.zeros_like();
    let mut dx = Vec::with_capacity(x.len());
    for (b, (dxb, dk)) in parts.into_iter().enumerate() {
        dx.extend_from_slice(&dxb);
        for (a, v) in dw.kernel.iter_mut().zip(&dk) {
            *a += v;
        }
        let item = dy.item(b);
        for co in 0..cout {
            dw.bias[co] += item[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f32>();
        }
    }
    Ok((Tensor4::from_vec(x.shape(), dx)?, dw))
}

/// Transposed convolution weights, `cin x cout x k x k`, with stride 2,
/// padding 1 and one row/column of output padding, so each spatial
/// dimension exactly doubles.
#[derive(Clone, Debug, PartialEq)]
pub struct UpConvWeights {
    cin: usize,
    cout: usize,
    k: usize,
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

const UP: ConvGeom = ConvGeom { k: 3, stride: 2, pad: 1 };

impl UpConvWeights {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            k: UP.k,
            kernel: vec![0.0; cin * cout * UP.k * UP.k],
            bias: vec![0.0; cout],
        }
    }

    pub fn he(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let mut w = Self::zeros(cin, cout);
        // each output pixel receives on average cin * k^2 / stride^2 taps
        let std = (2.0 * 4.0 / (cin * UP.k * UP.k) as f32).sqrt();
        for v in &mut w.kernel {
            *v = rng.normal(0.0, std);
        }
        w
    }

    pub fn cin(&self) -> usize {
        self.cin
    }

    pub fn cout(&self) -> usize {
        self.cout
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.cin, self.cout, self.k, self.k]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.cin, self.cout)
    }
}

pub fn upconv_forward(x: &Tensor4, w: &UpConvWeights) -> Result<Tensor4> {
    if x.c() != w.cin {
        return Err(Error::Shape(format!("upconv expects {} channels, got {}", w.cin, x.c())));
    }
    let [n, cin, hi, wi] = x.shape();
    let (ho, wo) = (2 * hi, 2 * wi);
    let (cout, kk) = (w.cout, UP.k * UP.k);
    let items: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|b| {
            let mut cols = vec![0.0; cout * kk * hi * wi];
            gemm(cout * kk, cin, hi * wi, &w.kernel, true, x.item(b), false, &mut cols, false);
            let mut out = vec![0.0; cout * ho * wo];
            col2im(&cols, cout, ho, wo, UP, hi, wi, &mut out);
            for co in 0..cout {
                out[co * ho * wo..(co + 1) * ho * wo]
                    .iter_mut()
                    .for_each(|v| *v += w.bias[co]);
            }
            out
        })
        .collect();
    Tensor4::from_vec([n, cout, ho, wo], items.concat())
}

/// Returns `(d_input, d_weights)`.
pub fn upconv_backward(x: &Tensor4, w: &UpConvWeights, dy: &Tensor4) -> Result<(Tensor4, UpConvWeights)> {
    let [n, cin, hi, wi] = x.shape();
    let (ho, wo) = (2 * hi, 2 * wi);
    let (cout, kk) = (w.cout, UP.k * UP.k);
    if dy.shape() != [n, cout, ho, wo] {
        return Err(Error::Shape(format!("upstream {:?} vs {:?}", dy.shape(), [n, cout, ho, wo])));
    }
    let parts: Vec<(Vec<f32>, Vec<f32>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let mut dcols = vec![0.0; cout * kk * hi * wi];
            im2col(dy.item(b), cout, ho, wo, UP, hi, wi, &mut dcols);
            let mut dx = vec![0.0; cin * hi * wi];
            gemm(cin, cout * kk, hi * wi, &w.kernel, false, &dcols, false, &mut dx, false);
            let mut dk = vec![0.0; cin * cout * kk];
            gemm(cin, hi * wi, cout * kk, x.item(b), false, &dcols, true, &mut dk, false);
            (dx, dk)
        })
        .collect();
    let mut dw = w.zeros_like();
    let mut dx = Vec::with_capacity(x.len());
    for (b, (dxb, dk)) in parts.into_iter().enumerate() {
        dx.extend_from_slice(&dxb);
        for (a, v) in dw.kernel.iter_mut().zip(&dk) {
            *a += v;
        }
        let item = dy.item(b);
        for co in 0..cout {
            dw.bias[co] += item[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f32>();
        }
    }
    Ok((Tensor4::from_vec(x.shape(), dx)?, dw))
}

/// Leaky ReLU; `slope = 0` gives a plain ReLU.
pub fn leaky_relu(x: &Tensor4, slope: f32) -> Tensor4 {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

/// Gradient through [`leaky_relu`] given its input.
pub fn leaky_relu_backward(pre: &Tensor4, dy: &Tensor4, slope: f32) -> Tensor4 {
    let data = pre
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&p, &g)| if p > 0.0 { g } else { slope * g })
        .collect();
    Tensor4::from_vec(pre.shape(), data).expect("shapes match")
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(pre: &Tensor4, dy: &Tensor4) -> Tensor4 {
    leaky_relu_backward(pre, dy, 0.0)
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for each
/// output element, the flat input index that won.
pub fn maxpool2(x: &Tensor4) -> Result<(Tensor4, Vec<u32>)> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max-pool needs even dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor4::zeros([n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    let src = x.data();
    let mut o = 0;
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    y.data_mut()[o] = src[best];
                    arg[o] = best as u32;
                    o += 1;
                }
            }
        }
    }
    Ok((y, arg))
}

pub fn maxpool2_backward(input_shape: [usize; 4], argmax: &[u32], dy: &Tensor4) -> Tensor4 {
    let mut dx = Tensor4::zeros(input_shape);
    for (&a, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[a as usize] += g;
    }
    dx
}

/// Bilinear upsampling by an integer factor with half-pixel alignment and
/// edge clamping.
pub fn upsample_bilinear(x: &Tensor4, factor: usize) -> Tensor4 {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h * factor, w * factor);
    let rows: Vec<_> = (0..oh).map(|o| half_pixel_source(o, h, oh)).collect();
    let cols: Vec<_> = (0..ow).map(|o| half_pixel_source(o, w, ow)).collect();
    let mut y = Tensor4::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = y.plane_mut(b, ch);
            for (oi, &(i0, i1, ti)) in rows.iter().enumerate() {
                for (oj, &(j0, j1, tj)) in cols.iter().enumerate() {
                    let top = (1.0 - tj) * src[i0 * w + j0] + tj * src[i0 * w + j1];
                    let bot = (1.0 - tj) * src[i1 * w + j0] + tj * src[i1 * w + j1];
                    dst[oi * ow + oj] = (1.0 - ti) * top + ti * bot;
                }
            }
        }
    }
    y
}

pub fn upsample_bilinear_backward(input_shape: [usize; 4], factor: usize, dy: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = input_shape;
    let (oh, ow) = (h * factor, w * factor);
    let rows: Vec<_> = (0..oh).map(|o| half_pixel_source(o, h, oh)).collect();
    let cols: Vec<_> = (0..ow).map(|o| half_pixel_source(o, w, ow)).collect();
    let mut dx = Tensor4::zeros(input_shape);
    for b in 0..n {
        for ch in 0..c {
            let g = dy.plane(b, ch);
            let dst = dx.plane_mut(b, ch);
            for (oi, &(i0, i1, ti)) in rows.iter().enumerate() {
                for (oj, &(j0, j1, tj)) in cols.iter().enumerate() {
                    let v = g[oi * ow + oj];
                    dst[i0 * w + j0] += (1.0 - ti) * (1.0 - tj) * v;
                    dst[i0 * w + j1] += (1.0 - ti) * tj * v;
                    dst[i1 * w + j0] += ti * (1.0 - tj) * v;
                    dst[i1 * w + j1] += ti * tj * v;
                }
            }
        }
    }
    dx
}

/// Non-overlapping `f x f` average pooling; spatial dims must be multiples
/// of `f`.
pub fn avg_pool(x: &Tensor4, f: usize) -> Result<Tensor4> {
    let [n, c, h, w] = x.shape();
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::IncompatibleFactor(format!("{h}x{w} by {f}")));
    }
    let (oh, ow) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f32;
    let mut y = Tensor4::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = y.plane_mut(b, ch);
            for i in 0..h {
                for j in 0..w {
                    dst[(i / f) * ow + j / f] += src[i * w + j];
                }
            }
            dst.iter_mut().for_each(|v| *v *= norm);
        }
    }
    Ok(y)
}

pub fn avg_pool_backward(input_shape: [usize; 4], f: usize, dy: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = input_shape;
    let ow = w / f;
    let norm = 1.0 / (f * f) as f32;
    let mut dx = Tensor4::zeros(input_shape);
    for b in 0..n {
        for ch in 0..c {
            let g = dy.plane(b, ch);
            let dst = dx.plane_mut(b, ch);
            for i in 0..h {
                for j in 0..w {
                    dst[i * w + j] = g[(i / f) * ow + j / f] * norm;
                }
            }
        }
    }
    dx
}
