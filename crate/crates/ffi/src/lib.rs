//! C ABI over `pfdnet-core`.
//!
//! Every function returns a [`PfdStatus`]. On failure the message is kept
//! per thread and can be copied out with [`pfd_last_error`]. Tensors are
//! dense row-major `f32` buffers in NCHW order; kernels are
//! `cout x cin x k x k`. Models are opaque handles created by
//! [`pfd_model_load`] and released with [`pfd_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use pfdnet_core::data::density::{make_density, HeadAnnotations};
use pfdnet_core::data::io::Checkpoint;
use pfdnet_core::data::metrics::{game, mae_rmse};
use pfdnet_core::fdconv::{bilinear_sample_grads, fdconv_backward, fdconv_forward, ConvWeights, SamplePoint};
use pfdnet_core::perspective::PerspectiveMap;
use pfdnet_core::pfdnet::Pfdnet;
use pfdnet_core::tensor::{Grid2, Tensor4};
use pfdnet_core::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PfdStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Shapes, sizes or buffer lengths are inconsistent.
    Shape = 2,
    /// A value lies outside its domain, such as a negative rate or a NaN.
    Domain = 3,
    /// A model needs an input that was not supplied, or an argument is
    /// not valid for this call.
    Usage = 4,
    /// A file could not be read or is not a valid checkpoint.
    Format = 5,
    /// Input data is inconsistent, such as a head outside the image.
    Data = 6,
    /// A computation produced a non-finite value.
    Numerical = 7,
    /// The output buffer is too small; the needed size has been written.
    BufferTooSmall = 8,
    /// The call panicked. This indicates a bug in the library.
    Internal = 9,
}

/// Loaded counting network.
pub struct PfdModel {
    net: Pfdnet,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> PfdStatus {
    match e {
        Error::InvalidShape(_) | Error::Shape(_) => PfdStatus::Shape,
        Error::Domain(_) | Error::InvalidCoordinate(_) | Error::IncompatibleFactor(_) => PfdStatus::Domain,
        Error::Usage(_) | Error::Config(_) | Error::InvalidState(_) | Error::Underdetermined(_) => PfdStatus::Usage,
        Error::Format(_) | Error::Length(_) | Error::Io(_) => PfdStatus::Format,
        Error::Data(_) | Error::Generation(_) => PfdStatus::Data,
        Error::Numerical(_) => PfdStatus::Numerical,
    }
}

struct Fail(PfdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PfdStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic and mapping it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PfdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            PfdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PfdStatus::Internal
        }
    }
}

fn checked_len(dims: &[usize]) -> Result<usize, Fail> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Fail(PfdStatus::Shape, format!("size of {dims:?} overflows")))
}

unsafe fn input<'a>(p: *const f32, len: usize, what: &str) -> Result<&'a [f32], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f32, len: usize, what: &str) -> Result<&'a mut [f32], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn weights(kernel: *const f32, bias: *const f32, cout: usize, cin: usize, k: usize) -> Result<ConvWeights, Fail> {
    let mut w = ConvWeights::zeros(cout, cin, k)?;
    w.kernel.copy_from_slice(input(kernel, checked_len(&[cout, cin, k, k])?, "kernel")?);
    if !bias.is_null() {
        w.bias.copy_from_slice(slice::from_raw_parts(bias, cout));
    }
    Ok(w)
}

unsafe fn rate_maps(rates: *const f32, n: usize, h: usize, w: usize) -> Result<Vec<Grid2>, Fail> {
    let all = input(rates, checked_len(&[n, h, w])?, "rates")?;
    all.chunks(h * w)
        .map(|c| Grid2::from_vec(h, w, c.to_vec()).map_err(Fail::from))
        .collect()
}

/// Copies the message of the last failed call on this thread into `buf`
/// as a NUL-terminated string, truncating to `cap` bytes. Returns the
/// full message length in bytes, excluding the terminator.
///
/// # Safety
///
/// `buf` must be null or writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn pfd_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a counting-network checkpoint from `path` (UTF-8, NUL-terminated)
/// and stores a new handle in `*out`.
///
/// # Safety
///
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pfd_model_load(path: *const c_char, out: *mut *mut PfdModel) -> PfdStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(PfdStatus::Usage, "path is not UTF-8".into()))?;
        let net = Pfdnet::load(&Checkpoint::load(path)?)?;
        *out = Box::into_raw(Box::new(PfdModel { net }));
        Ok(())
    })
}

/// Releases a handle from [`pfd_model_load`]. Null is ignored.
///
/// # Safety
///
/// `model` must be null or a handle from [`pfd_model_load`] that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn pfd_model_free(model: *mut PfdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Predicts the density map of one `3 x h x w` image with values in
/// `[0, 1]`.
///
/// `persp` is an `h x w` perspective map, required by models trained on
/// ground-truth or mean perspective and ignored otherwise (pass null).
/// The map shape is written to `*out_h` and `*out_w`; when it exceeds
/// `cap` values the call returns `BufferTooSmall` without writing `out`.
///
/// # Safety
///
/// Every non-null pointer must be valid for the number of elements implied by the shape arguments, and `model` handles must be live.
#[no_mangle]
pub unsafe extern "C" fn pfd_model_predict(
    model: *const PfdModel,
    image: *const f32,
    h: usize,
    w: usize,
    persp: *const f32,
    out: *mut f32,
    cap: usize,
    out_h: *mut usize,
    out_w: *mut usize,
) -> PfdStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out_h.is_null() || out_w.is_null() {
            return Err(null("out_h/out_w"));
        }
        let img = Tensor4::from_vec([1, 3, h, w], input(image, checked_len(&[3, h, w])?, "image")?.to_vec())?;
        let maps = if persp.is_null() {
            Vec::new()
        } else {
            vec![PerspectiveMap::new(Grid2::from_vec(h, w, slice::from_raw_parts(persp, h * w).to_vec())?)?]
        };
        let pm = (!maps.is_empty()).then_some(maps.as_slice());
        let density = model.net.predict(&img, pm)?.remove(0);
        *out_h = density.h();
        *out_w = density.w();
        if density.data().len() > cap {
            return Err(Fail(
                PfdStatus::BufferTooSmall,
                format!("output needs {} values, buffer holds {cap}", density.data().len()),
            ));
        }
        output(out, density.data().len(), "out")?.copy_from_slice(density.data());
        Ok(())
    })
}

/// Fractional-dilation convolution with stride 1 and zero padding.
///
/// `x` is `n x cin x h x w`, `rates` holds one `h x w` map per item (or a
/// single map shared by all items when `rate_maps == 1`), `bias` may be
/// null for zero bias and `y` receives `n x cout x h x w` values.
///
/// # Safety
///
/// Every non-null pointer must be valid for the number of elements implied by the shape arguments, and `model` handles must be live.
#[no_mangle]
pub unsafe extern "C" fn pfd_fdconv_forward(
    x: *const f32,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kernel: *const f32,
    bias: *const f32,
    cout: usize,
    k: usize,
    rates: *const f32,
    rate_maps_count: usize,
    y: *mut f32,
) -> PfdStatus {
    guard(|| {
        let xt = Tensor4::from_vec([n, cin, h, w], input(x, checked_len(&[n, cin, h, w])?, "x")?.to_vec())?;
        let wt = weights(kernel, bias, cout, cin, k)?;
        let rm = rate_maps(rates, rate_maps_count, h, w)?;
        let out = fdconv_forward(&xt, &wt, &rm)?;
        output(y, out.len(), "y")?.copy_from_slice(out.data());
        Ok(())
    })
}

/// Backward pass of [`pfd_fdconv_forward`] for the upstream gradient `dy`
/// (`n x cout x h x w`).
///
/// Writes `d_x` (like `x`), `d_kernel` (like `kernel`), `d_bias` (`cout`)
/// and `d_rates` (like `rates`). Any output pointer may be null to skip it.
///
/// # Safety
///
/// Every non-null pointer must be valid for the number of elements implied by the shape arguments, and `model` handles must be live.
#[no_mangle]
pub unsafe extern "C" fn pfd_fdconv_backward(
    x: *const f32,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kernel: *const f32,
    cout: usize,
    k: usize,
    rates: *const f32,
    rate_maps_count: usize,
    dy: *const f32,
    d_x: *mut f32,
    d_kernel: *mut f32,
    d_bias: *mut f32,
    d_rates: *mut f32,
) -> PfdStatus {
    guard(|| {
        let xt = Tensor4::from_vec([n, cin, h, w], input(x, checked_len(&[n, cin, h, w])?, "x")?.to_vec())?;
        let wt = weights(kernel, ptr::null(), cout, cin, k)?;
        let rm = rate_maps(rates, rate_maps_count, h, w)?;
        let dyt = Tensor4::from_vec([n, cout, h, w], input(dy, checked_len(&[n, cout, h, w])?, "dy")?.to_vec())?;
        let g = fdconv_backward(&xt, &wt, &rm, &dyt)?;
        if !d_x.is_null() {
            output(d_x, g.d_input.len(), "d_x")?.copy_from_slice(g.d_input.data());
        }
        if !d_kernel.is_null() {
            output(d_kernel, g.d_weights.kernel.len(), "d_kernel")?.copy_from_slice(&g.d_weights.kernel);
        }
        if !d_bias.is_null() {
            output(d_bias, cout, "d_bias")?.copy_from_slice(&g.d_weights.bias);
        }
        if !d_rates.is_null() {
            let dst = output(d_rates, rate_maps_count * h * w, "d_rates")?;
            for (chunk, grid) in dst.chunks_mut(h * w).zip(&g.d_rate) {
                chunk.copy_from_slice(grid.data());
            }
        }
        Ok(())
    })
}

/// Bilinear sample of an `h x w` plane at `(i, j)`, with zero outside the
/// plane. Writes the value and its derivatives along rows and columns.
///
/// # Safety
///
/// Every non-null pointer must be valid for the number of elements implied by the shape arguments, and `model` handles must be live.
#[no_mangle]
pub unsafe extern "C" fn pfd_bilinear_sample(
    plane: *const f32,
    h: usize,
    w: usize,
    i: f32,
    j: f32,
    value: *mut f32,
    d_di: *mut f32,
    d_dj: *mut f32,
) -> PfdStatus {
    guard(|| {
        if value.is_null() {
            return Err(null("value"));
        }
        let x = Tensor4::from_vec([1, 1, h, w], input(plane, checked_len(&[h, w])?, "plane")?.to_vec())?;
        let g = bilinear_sample_grads(&x, 0, 0, SamplePoint::new(i, j))?;
        *value = g.d_dx.iter().map(|&((qi, qj), c)| c * x.get(0, 0, qi, qj)).sum();
        if !d_di.is_null() {
            *d_di = g.d_di;
        }
        if !d_dj.is_null() {
            *d_dj = g.d_dj;
        }
        Ok(())
    })
}

/// Geometry-adaptive density map of `count` heads given as interleaved
/// `(x, y)` pixel coordinates. Writes `h x w` values to `out`.
///
/// # Safety
///
/// Every non-null pointer must be valid for the number of elements implied by the shape arguments, and `model` handles must be live.
#[no_mangle]
pub unsafe extern "C" fn pfd_make_density(xy: *const f32, count: usize, h: usize, w: usize, out: *mut f32) -> PfdStatus {
    guard(|| {
        let pts = if count == 0 { &[][..] } else { input(xy, checked_len(&[count, 2])?, "xy")? };
        let heads = HeadAnnotations::new("ffi", pts.chunks(2).map(|p| (p[0], p[1])).collect());
        let d = make_density(&heads, (h, w))?;
        output(out, checked_len(&[h, w])?, "out")?.copy_from_slice(d.grid().data());
        Ok(())
    })
}

/// Grid Average Mean absolute Error of two `h x w` maps at `level`.
///
/// # Safety
///
/// Every non-null pointer must be valid for the number of elements implied by the shape arguments, and `model` handles must be live.
#[no_mangle]
pub unsafe extern "C" fn pfd_game(pred: *const f32, gt: *const f32, h: usize, w: usize, level: u32, out: *mut f64) -> PfdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = checked_len(&[h, w])?;
        let p = Grid2::from_vec(h, w, input(pred, len, "pred")?.to_vec())?;
        let g = Grid2::from_vec(h, w, input(gt, len, "gt")?.to_vec())?;
        *out = game(&p, &g, level)?;
        Ok(())
    })
}

/// Mean absolute and root mean squared error over `n` image counts.
///
/// # Safety
///
/// Every non-null pointer must be valid for the number of elements implied by the shape arguments, and `model` handles must be live.
#[no_mangle]
pub unsafe extern "C" fn pfd_mae_rmse(pred: *const f64, gt: *const f64, n: usize, mae: *mut f64, rmse: *mut f64) -> PfdStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || mae.is_null() || rmse.is_null() {
            return Err(null("argument"));
        }
        let (m, r) = mae_rmse(slice::from_raw_parts(pred, n), slice::from_raw_parts(gt, n))?;
        *mae = m;
        *rmse = r;
        Ok(())
    })
}
