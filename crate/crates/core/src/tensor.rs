//! Dense containers shared by every other module.
//!
//! [`Tensor4`] is an `N x C x H x W` row-major `f32` array and [`Grid2`] a
//! single `H x W` plane. Reductions always walk the data in storage order
//! (`n`, then `c`, then `h`, then `w`) and accumulate in `f64`, so results
//! never depend on how work was scheduled.
//!
//! [`Rng`] is xoshiro256++ seeded through splitmix64. Normal draws use the
//! ziggurat sampler from `rand_distr`; both are platform independent.

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};

/// Seeded, platform-independent random source.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f32 {
        self.inner.gen::<f32>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn between(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.gen_bool(p)
    }

    pub fn normal(&mut self, mean: f32, std: f32) -> f32 {
        if std == 0.0 {
            return mean;
        }
        Normal::new(mean, std)
            .expect("std must be finite and positive")
            .sample(&mut self.inner)
    }

    /// Raw 64-bit draw, used to derive child seeds.
    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen::<u64>()
    }
}

/// Initial contents for [`Tensor4::new`].
pub enum Fill<'a> {
    Const(f32),
    Gaussian { mean: f32, std: f32, rng: &'a mut Rng },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f32>,
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidShape(format!("zero dimension in {dims:?}")));
    }
    Ok(())
}

impl Tensor4 {
    pub fn new(shape: [usize; 4], fill: Fill<'_>) -> Result<Self> {
        check_dims(&shape)?;
        let len = shape.iter().product();
        let data = match fill {
            Fill::Const(v) => vec![v; len],
            Fill::Gaussian { mean, std, rng } => (0..len).map(|_| rng.normal(mean, std)).collect(),
        };
        Ok(Self { shape, data })
    }

    /// All-zero tensor. Panics on a zero dimension; use [`Tensor4::new`] for
    /// untrusted shapes.
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::new(shape, Fill::Const(0.0)).expect("zero dimension in Tensor4::zeros")
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        check_dims(&shape)?;
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f32) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous `H x W` plane for item `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// All channels of batch item `n`, `C x H x W` contiguous.
    pub fn item(&self, n: usize) -> &[f32] {
        let chw = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * chw..(n + 1) * chw]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f32] {
        let chw = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[n * chw..(n + 1) * chw]
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor4) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Copies channel planes of item `src_n` in `src` to item `dst_n` here.
    pub fn copy_item_from(&mut self, dst_n: usize, src: &Tensor4, src_n: usize) {
        assert_eq!(self.shape[1..], src.shape[1..], "item shape mismatch");
        self.item_mut(dst_n).copy_from_slice(src.item(src_n));
    }

    /// Stacks single-item tensors of identical `C x H x W` along the batch axis.
    pub fn stack(items: &[&Tensor4]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidShape("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!(
                    "stack: {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let n = data.len() / (c * h * w);
        Self::from_vec([n, c, h, w], data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid2 {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Grid2 {
    pub fn filled(h: usize, w: usize, v: f32) -> Self {
        Self {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self::filled(h, w, 0.0)
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "grid data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(h * w);
        for r in rows {
            if r.len() != w {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { h, w, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.w + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.w + j] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Mirrors columns left to right.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.h {
            let row = &mut out.data[i * self.w..(i + 1) * self.w];
            row.reverse();
        }
        out
    }

    /// Single-channel, single-item tensor view of this grid.
    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4::from_vec([1, 1, self.h, self.w], self.data.clone())
            .expect("grid dimensions are nonzero")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleMode {
    AveragePool,
    Bilinear,
    SumPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
    Mean,
}

/// Source coordinate for output index `o` under half-pixel alignment,
/// clamped to the valid range. Returns the low index, high index and the
/// weight of the high index.
#[inline]
pub(crate) fn half_pixel_source(o: usize, in_len: usize, out_len: usize) -> (usize, usize, f32) {
    let scale = in_len as f32 / out_len as f32;
    let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    let t = if hi == lo { 0.0 } else { src - lo as f32 };
    (lo, hi, t)
}

/// Resizes a grid. The pooling modes only accept exact integer-factor
/// reductions; anything else is an [`Error::IncompatibleFactor`].
pub fn resample_grid(g: &Grid2, out_h: usize, out_w: usize, mode: ResampleMode) -> Result<Grid2> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidShape(format!("output {out_h}x{out_w}")));
    }
    match mode {
        ResampleMode::AveragePool | ResampleMode::SumPool => {
            if !g.h.is_multiple_of(out_h) || !g.w.is_multiple_of(out_w) {
                return Err(Error::IncompatibleFactor(format!(
                    "{}x{} -> {out_h}x{out_w}",
                    g.h, g.w
                )));
            }
            let (fh, fw) = (g.h / out_h, g.w / out_w);
            let norm = if mode == ResampleMode::AveragePool {
                1.0 / (fh * fw) as f64
            } else {
                1.0
            };
            let mut out = Grid2::zeros(out_h, out_w);
            for oi in 0..out_h {
                for oj in 0..out_w {
                    let mut acc = 0.0f64;
                    for i in oi * fh..(oi + 1) * fh {
                        for j in oj * fw..(oj + 1) * fw {
                            acc += g.get(i, j) as f64;
                        }
                    }
                    out.set(oi, oj, (acc * norm) as f32);
                }
            }
            Ok(out)
        }
        ResampleMode::Bilinear => {
            let mut out = Grid2::zeros(out_h, out_w);
            for oi in 0..out_h {
                let (i0, i1, ti) = half_pixel_source(oi, g.h, out_h);
                for oj in 0..out_w {
                    let (j0, j1, tj) = half_pixel_source(oj, g.w, out_w);
                    let top = (1.0 - tj) * g.get(i0, j0) + tj * g.get(i0, j1);
                    let bot = (1.0 - tj) * g.get(i1, j0) + tj * g.get(i1, j1);
                    out.set(oi, oj, (1.0 - ti) * top + ti * bot);
                }
            }
            Ok(out)
        }
    }
}

/// Sequential reduction in storage order, accumulated in `f64`.
pub fn reduce(t: &Tensor4, op: ReduceOp) -> f64 {
    match op {
        ReduceOp::Sum => t.data.iter().map(|&v| v as f64).sum(),
        ReduceOp::Mean => t.data.iter().map(|&v| v as f64).sum::<f64>() / t.data.len() as f64,
        ReduceOp::Max => t
            .data
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64)),
    }
}

/// `c = a * b (+ c if accumulate)` for row-major matrices, with optional
/// transposition of either operand. `a` is `m x k` after transposition,
/// `b` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strided access can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
