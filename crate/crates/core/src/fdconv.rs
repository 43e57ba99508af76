//! Fractional-dilation convolution.
//!
//! Every output position `p` owns a nonnegative dilation rate `r(p)`; tap
//! `p_k` of the `K x K` kernel reads the input at `p + p_k * r(p)`, which is
//! in general off-grid and resolved by bilinear interpolation with zero
//! padding outside the feature map. With an integer constant rate the
//! operator reduces to an ordinary dilated convolution
//! ([`dilated_conv_ref`]).
//!
//! The forward pass gathers interpolated samples into a column matrix and
//! multiplies it with the filter bank; the backward pass reuses the same
//! column layout. Work is split into fixed partitions that do not depend
//! on the thread count, and partial results are always merged in index
//! order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Grid2, Rng, Tensor4};

/// Filter bank of a 2-D convolution: `cout x cin x k x k` taps plus one
/// bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    cout: usize,
    cin: usize,
    k: usize,
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvWeights {
    pub fn zeros(cout: usize, cin: usize, k: usize) -> Result<Self> {
        if cout == 0 || cin == 0 {
            return Err(Error::InvalidShape(format!("conv {cout}x{cin}")));
        }
        if k == 0 || k.is_multiple_of(2) {
            return Err(Error::Domain(format!("kernel size {k} must be odd")));
        }
        Ok(Self {
            cout,
            cin,
            k,
            kernel: vec![0.0; cout * cin * k * k],
            bias: vec![0.0; cout],
        })
    }

    /// Kernel taps drawn from `N(0, std^2)`, zero bias.
    pub fn gaussian(cout: usize, cin: usize, k: usize, std: f32, rng: &mut Rng) -> Result<Self> {
        let mut w = Self::zeros(cout, cin, k)?;
        for v in &mut w.kernel {
            *v = rng.normal(0.0, std);
        }
        Ok(w)
    }

    /// He-normal initialization (`std = sqrt(2 / fan_in)`).
    pub fn he(cout: usize, cin: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        let std = (2.0 / (cin * k * k) as f32).sqrt();
        Self::gaussian(cout, cin, k, std, rng)
    }

    pub fn cout(&self) -> usize {
        self.cout
    }

    pub fn cin(&self) -> usize {
        self.cin
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn index(&self, co: usize, ci: usize, ki: usize, kj: usize) -> usize {
        ((co * self.cin + ci) * self.k + ki) * self.k + kj
    }

    #[inline]
    pub fn at(&self, co: usize, ci: usize, ki: usize, kj: usize) -> f32 {
        self.kernel[self.index(co, ci, ki, kj)]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.cout, self.cin, self.k, self.k]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            cout: self.cout,
            cin: self.cin,
            k: self.k,
            kernel: vec![0.0; self.kernel.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ConvWeights) {
        assert_eq!(self.kernel_shape(), other.kernel_shape());
        for (a, b) in self.kernel.iter_mut().zip(&other.kernel) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

/// Off-grid sampling location `(i_hat, j_hat)` in row/column units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint {
    pub i: f32,
    pub j: f32,
}

impl SamplePoint {
    pub fn new(i: f32, j: f32) -> Self {
        Self { i, j }
    }
}

/// Result of [`bilinear_sample_grads`].
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrads {
    pub d_di: f32,
    pub d_dj: f32,
    /// Interpolation coefficient `G(q, p_hat)` of each in-bounds neighbor
    /// `q = (row, col)` with a nonzero coefficient.
    pub d_dx: Vec<((usize, usize), f32)>,
}

#[derive(Clone, Debug)]
pub struct FdconvGrads {
    pub d_input: Tensor4,
    pub d_weights: ConvWeights,
    /// One grid per rate map passed to the forward call.
    pub d_rate: Vec<Grid2>,
}

/// Neighbor set of one sampling point. Slot order is `(i0,j0)`,
/// `(i0,j0+1)`, `(i0+1,j0)`, `(i0+1,j0+1)`; out-of-bounds slots carry a
/// zero weight and are masked out of `valid`.
#[derive(Clone, Copy, Debug, Default)]
struct Tap {
    idx: [u32; 4],
    wt: [f32; 4],
    lam: f32,
    mu: f32,
    valid: u8,
}

impl Tap {
    fn new(h: usize, w: usize, i: f32, j: f32) -> Self {
        let fi = i.floor();
        let fj = j.floor();
        let lam = i - fi;
        let mu = j - fj;
        let (i0, j0) = (fi as i64, fj as i64);
        let mut tap = Tap {
            lam,
            mu,
            ..Default::default()
        };
        let coeffs = [
            (1.0 - lam) * (1.0 - mu),
            (1.0 - lam) * mu,
            lam * (1.0 - mu),
            lam * mu,
        ];
        let offsets = [(0, 0), (0, 1), (1, 0), (1, 1)];
        for (slot, (&(di, dj), &c)) in offsets.iter().zip(&coeffs).enumerate() {
            let (qi, qj) = (i0 + di, j0 + dj);
            if qi >= 0 && qj >= 0 && (qi as usize) < h && (qj as usize) < w {
                tap.idx[slot] = (qi as usize * w + qj as usize) as u32;
                tap.wt[slot] = c;
                tap.valid |= 1 << slot;
            }
        }
        tap
    }

    #[inline]
    fn sample(&self, plane: &[f32]) -> f32 {
        let mut v = 0.0;
        for s in 0..4 {
            v += self.wt[s] * plane[self.idx[s] as usize];
        }
        v
    }

    #[inline]
    fn value(&self, plane: &[f32], slot: usize) -> f32 {
        if self.valid & (1 << slot) != 0 {
            plane[self.idx[slot] as usize]
        } else {
            0.0
        }
    }

    /// Spatial gradient of the interpolated value. On a grid line the
    /// derivative across that line is taken as zero.
    #[inline]
    fn spatial_grad(&self, plane: &[f32]) -> (f32, f32) {
        let x00 = self.value(plane, 0);
        let x01 = self.value(plane, 1);
        let x10 = self.value(plane, 2);
        let x11 = self.value(plane, 3);
        let d_di = if self.lam > 0.0 {
            (1.0 - self.mu) * (x10 - x00) + self.mu * (x11 - x01)
        } else {
            0.0
        };
        let d_dj = if self.mu > 0.0 {
            (1.0 - self.lam) * (x01 - x00) + self.lam * (x11 - x10)
        } else {
            0.0
        };
        (d_di, d_dj)
    }
}

fn check_item(x: &Tensor4, n: usize, c: usize, p: SamplePoint) -> Result<()> {
    if n >= x.n() || c >= x.c() {
        return Err(Error::Shape(format!(
            "index ({n}, {c}) outside tensor {:?}",
            x.shape()
        )));
    }
    if !p.i.is_finite() || !p.j.is_finite() {
        return Err(Error::InvalidCoordinate(format!("({}, {})", p.i, p.j)));
    }
    Ok(())
}

/// Bilinear interpolation of plane `(n, c)` at `p`; grid points outside the
/// plane read as zero.
pub fn bilinear_sample(x: &Tensor4, n: usize, c: usize, p: SamplePoint) -> Result<f32> {
    check_item(x, n, c, p)?;
    Ok(Tap::new(x.h(), x.w(), p.i, p.j).sample(x.plane(n, c)))
}

/// Derivatives of [`bilinear_sample`] with respect to the sampling location
/// and to the grid values it reads.
pub fn bilinear_sample_grads(x: &Tensor4, n: usize, c: usize, p: SamplePoint) -> Result<SampleGrads> {
    check_item(x, n, c, p)?;
    let tap = Tap::new(x.h(), x.w(), p.i, p.j);
    let plane = x.plane(n, c);
    let (d_di, d_dj) = tap.spatial_grad(plane);
    let w = x.w();
    let d_dx = (0..4)
        .filter(|&s| tap.valid & (1 << s) != 0 && tap.wt[s] != 0.0)
        .map(|s| {
            let q = tap.idx[s] as usize;
            ((q / w, q % w), tap.wt[s])
        })
        .collect();
    Ok(SampleGrads { d_di, d_dj, d_dx })
}

/// Tap offsets `(di, dj)` in kernel order.
fn offsets(k: usize) -> Vec<(f32, f32)> {
    let half = (k / 2) as i64;
    (0..k * k)
        .map(|t| ((t / k) as i64 - half, (t % k) as i64 - half))
        .map(|(a, b)| (a as f32, b as f32))
        .collect()
}

/// Sampling geometry for every (tap, position) pair, laid out tap-major.
fn build_taps(h: usize, w: usize, k: usize, rate: &Grid2) -> Vec<Tap> {
    let offs = offsets(k);
    let hw = h * w;
    let mut taps = vec![Tap::default(); k * k * hw];
    taps.par_chunks_mut(hw)
        .zip(offs.par_iter())
        .for_each(|(row, &(di, dj))| {
            for (p, tap) in row.iter_mut().enumerate() {
                let (pi, pj) = (p / w, p % w);
                let r = rate.data()[p];
                *tap = Tap::new(h, w, pi as f32 + di * r, pj as f32 + dj * r);
            }
        });
    taps
}

fn validate(x: &Tensor4, w: &ConvWeights, rates: &[Grid2]) -> Result<()> {
    if w.cin() != x.c() {
        return Err(Error::Shape(format!(
            "weights expect {} input channels, got {}",
            w.cin(),
            x.c()
        )));
    }
    if rates.len() != 1 && rates.len() != x.n() {
        return Err(Error::Shape(format!(
            "{} rate maps for batch of {}",
            rates.len(),
            x.n()
        )));
    }
    for r in rates {
        if r.shape() != (x.h(), x.w()) {
            return Err(Error::Shape(format!(
                "rate map {:?} vs output {}x{}",
                r.shape(),
                x.h(),
                x.w()
            )));
        }
        if let Some(v) = r.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!("rate entry {v} is not a finite nonnegative value")));
        }
    }
    Ok(())
}

const CHUNK_POSITIONS: usize = 2048;

/// Interpolated input samples for positions `p0..p1`: row `ci * k^2 + t`
/// holds tap `t` of channel `ci`.
fn gather_cols(x_item: &[f32], hw: usize, cin: usize, kk: usize, taps: &[Tap], p0: usize, p1: usize, cols: &mut [f32]) {
    let np = p1 - p0;
    for ci in 0..cin {
        let plane = &x_item[ci * hw..(ci + 1) * hw];
        for t in 0..kk {
            let row = &mut cols[(ci * kk + t) * np..(ci * kk + t + 1) * np];
            let geo = &taps[t * hw + p0..t * hw + p1];
            for (dst, tap) in row.iter_mut().zip(geo) {
                *dst = tap.sample(plane);
            }
        }
    }
}

/// Fractional-dilation convolution, stride 1, output the same size as the
/// input. `rates` holds either one map shared by the whole batch or one map
/// per batch item.
pub fn fdconv_forward(x: &Tensor4, w: &ConvWeights, rates: &[Grid2]) -> Result<Tensor4> {
    validate(x, w, rates)?;
    let [n, cin, h, wd] = x.shape();
    let (cout, kk, hw) = (w.cout(), w.k() * w.k(), h * wd);
    let mut y = Tensor4::zeros([n, cout, h, wd]);
    let mut shared = None;
    for b in 0..n {
        let taps_owned;
        let taps: &[Tap] = if rates.len() == 1 {
            shared.get_or_insert_with(|| build_taps(h, wd, w.k(), &rates[0]))
        } else {
            taps_owned = build_taps(h, wd, w.k(), &rates[b]);
            &taps_owned
        };
        let x_item = x.item(b);
        let chunks: Vec<(usize, usize)> = (0..hw)
            .step_by(CHUNK_POSITIONS)
            .map(|p0| (p0, (p0 + CHUNK_POSITIONS).min(hw)))
            .collect();
        let outs: Vec<Vec<f32>> = chunks
            .par_iter()
            .map(|&(p0, p1)| {
                let np = p1 - p0;
                let mut cols = vec![0.0; cin * kk * np];
                gather_cols(x_item, hw, cin, kk, taps, p0, p1, &mut cols);
                let mut out = vec![0.0; cout * np];
                gemm(cout, cin * kk, np, &w.kernel, false, &cols, false, &mut out, false);
                out
            })
            .collect();
        let y_item = y.item_mut(b);
        for (&(p0, p1), out) in chunks.iter().zip(&outs) {
            let np = p1 - p0;
            for co in 0..cout {
                let dst = &mut y_item[co * hw + p0..co * hw + p1];
                for (d, s) in dst.iter_mut().zip(&out[co * np..(co + 1) * np]) {
                    *d = s + w.bias[co];
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of a scalar loss with respect to input, weights and rate maps,
/// given `dl_dy` for the output of [`fdconv_forward`] on the same arguments.
pub fn fdconv_backward(x: &Tensor4, w: &ConvWeights, rates: &[Grid2], dl_dy: &Tensor4) -> Result<FdconvGrads> {
    validate(x, w, rates)?;
    let [n, cin, h, wd] = x.shape();
    let (cout, k) = (w.cout(), w.k());
    let (kk, hw) = (k * k, h * wd);
    if dl_dy.shape() != [n, cout, h, wd] {
        return Err(Error::Shape(format!(
            "upstream gradient {:?}, expected {:?}",
            dl_dy.shape(),
            [n, cout, h, wd]
        )));
    }
    let offs = offsets(k);
    let mut d_input = Tensor4::zeros(x.shape());
    let mut d_weights = w.zeros_like();
    let mut d_rate: Vec<Grid2> = rates.iter().map(|_| Grid2::zeros(h, wd)).collect();
    let mut shared = None;
    let mut cols = vec![0.0; cin * kk * hw];
    let mut dcols = vec![0.0; cin * kk * hw];

    for b in 0..n {
        let taps_owned;
        let taps: &[Tap] = if rates.len() == 1 {
            shared.get_or_insert_with(|| build_taps(h, wd, k, &rates[0]))
        } else {
            taps_owned = build_taps(h, wd, k, &rates[b]);
            &taps_owned
        };
        let x_item = x.item(b);
        let dy = dl_dy.item(b);

        cols.par_chunks_mut(kk * hw).enumerate().for_each(|(ci, block)| {
            let plane = &x_item[ci * hw..(ci + 1) * hw];
            for t in 0..kk {
                for (dst, tap) in block[t * hw..(t + 1) * hw].iter_mut().zip(&taps[t * hw..(t + 1) * hw]) {
                    *dst = tap.sample(plane);
                }
            }
        });

        gemm(cout, hw, cin * kk, dy, false, &cols, true, &mut d_weights.kernel, true);
        for co in 0..cout {
            d_weights.bias[co] += dy[co * hw..(co + 1) * hw].iter().sum::<f32>();
        }
        gemm(cin * kk, cout, hw, &w.kernel, true, dy, false, &mut dcols, false);

        let per_channel: Vec<(Vec<f32>, Vec<f32>)> = (0..cin)
            .into_par_iter()
            .map(|ci| {
                let plane = &x_item[ci * hw..(ci + 1) * hw];
                let mut d_plane = vec![0.0f32; hw];
                let mut d_r = vec![0.0f32; hw];
                for (t, &(oi, oj)) in offs.iter().enumerate() {
                    let g_row = &dcols[(ci * kk + t) * hw..(ci * kk + t + 1) * hw];
                    let geo = &taps[t * hw..(t + 1) * hw];
                    let moves = oi != 0.0 || oj != 0.0;
                    for p in 0..hw {
                        let g = g_row[p];
                        if g == 0.0 {
                            continue;
                        }
                        let tap = &geo[p];
                        for s in 0..4 {
                            if tap.valid & (1 << s) != 0 {
                                d_plane[tap.idx[s] as usize] += g * tap.wt[s];
                            }
                        }
                        if moves {
                            let (gi, gj) = tap.spatial_grad(plane);
                            d_r[p] += g * (oi * gi + oj * gj);
                        }
                    }
                }
                (d_plane, d_r)
            })
            .collect();

        let d_in_item = d_input.item_mut(b);
        let target = if rates.len() == 1 { 0 } else { b };
        let d_rate_b = d_rate[target].data_mut();
        for (ci, (d_plane, d_r)) in per_channel.iter().enumerate() {
            d_in_item[ci * hw..(ci + 1) * hw].copy_from_slice(d_plane);
            for (acc, v) in d_rate_b.iter_mut().zip(d_r) {
                *acc += v;
            }
        }
    }
    Ok(FdconvGrads {
        d_input,
        d_weights,
        d_rate,
    })
}

/// Direct nested-loop dilated convolution with integer rate and zero
/// padding. Slow; used as a correctness oracle.
pub fn dilated_conv_ref(x: &Tensor4, w: &ConvWeights, r: i64) -> Result<Tensor4> {
    if r < 1 {
        return Err(Error::Domain(format!("dilation rate {r} must be >= 1")));
    }
    if w.cin() != x.c() {
        return Err(Error::Shape("input channel mismatch".into()));
    }
    let [n, cin, h, wd] = x.shape();
    let k = w.k();
    let half = (k / 2) as i64;
    let mut y = Tensor4::zeros([n, w.cout(), h, wd]);
    for b in 0..n {
        for co in 0..w.cout() {
            for i in 0..h as i64 {
                for j in 0..wd as i64 {
                    let mut acc = w.bias[co] as f64;
                    for ci in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let si = i + (ki as i64 - half) * r;
                                let sj = j + (kj as i64 - half) * r;
                                if si < 0 || sj < 0 || si >= h as i64 || sj >= wd as i64 {
                                    continue;
                                }
                                acc += w.at(co, ci, ki, kj) as f64
                                    * x.get(b, ci, si as usize, sj as usize) as f64;
                            }
                        }
                    }
                    y.set(b, co, i as usize, j as usize, acc as f32);
                }
            }
        }
    }
    Ok(y)
}
