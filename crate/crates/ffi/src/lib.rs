//! C ABI over the decount library: density rasterization, counting metrics,
//! and an opaque handle for running a trained counter on raw image buffers.
//!
//! Conventions: every fallible function returns a `DecountStatus`; on any
//! non-`Ok` status, `decount_last_error` yields a thread-local message that
//! stays valid until the next failing call on the same thread. Buffers are
//! caller-allocated and row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use candle_core::{Device, Tensor};
use decount::counter::Counter;
use decount::data::{rasterize_density, DotAnnotation};
use decount::evaluation::{mae, mse};
use decount::nn::ParamStore;
use decount::training::load_counter;

/// Result of every fallible call in this interface.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecountStatus {
    /// The call succeeded.
    DecountOk = 0,
    /// A required pointer argument was null.
    DecountNullPointer = 1,
    /// Arguments were structurally valid but semantically rejected.
    DecountInvalidArgument = 2,
    /// An internal failure; see `decount_last_error`.
    DecountInternal = 3,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: DecountStatus, message: &str) -> DecountStatus {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
    status
}

fn fail_error(err: decount::Error) -> DecountStatus {
    let status = match &err {
        decount::Error::Config(_) | decount::Error::Input(_) | decount::Error::Shape(_) => {
            DecountStatus::DecountInvalidArgument
        }
        _ => DecountStatus::DecountInternal,
    };
    fail(status, &err.to_string())
}

fn guard(f: impl FnOnce() -> DecountStatus) -> DecountStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(DecountStatus::DecountInternal, "panic across the C boundary"),
    }
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn decount_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failure on this thread; empty when nothing failed.
/// The pointer is invalidated by the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn decount_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Rasterizes dot annotations into a caller-provided `height * width`
/// row-major density buffer. Each dot contributes unit mass, so the buffer
/// sums to `num_dots`.
///
/// # Safety
/// `xs` and `ys` must point to `num_dots` doubles and `out` to
/// `height * width` doubles.
#[no_mangle]
pub unsafe extern "C" fn decount_rasterize_density(
    xs: *const f64,
    ys: *const f64,
    num_dots: usize,
    height: usize,
    width: usize,
    sigma: f64,
    out: *mut f64,
) -> DecountStatus {
    if out.is_null() || (num_dots > 0 && (xs.is_null() || ys.is_null())) {
        return fail(DecountStatus::DecountNullPointer, "null buffer passed to rasterize_density");
    }
    let xs = std::slice::from_raw_parts(xs, num_dots);
    let ys = std::slice::from_raw_parts(ys, num_dots);
    let out = std::slice::from_raw_parts_mut(out, height * width);
    guard(|| {
        let dots = DotAnnotation::new(xs.iter().copied().zip(ys.iter().copied()).collect());
        match rasterize_density(&dots, (height, width), sigma) {
            Ok(map) => {
                for (dst, src) in out.iter_mut().zip(map.values().iter()) {
                    *dst = *src;
                }
                DecountStatus::DecountOk
            }
            Err(err) => fail_error(err),
        }
    })
}

unsafe fn metric(
    predicted: *const f64,
    ground_truth: *const f64,
    len: usize,
    out: *mut f64,
    f: impl Fn(&[f64], &[f64]) -> decount::Result<f64>,
) -> DecountStatus {
    if predicted.is_null() || ground_truth.is_null() || out.is_null() {
        return fail(DecountStatus::DecountNullPointer, "null buffer passed to metric");
    }
    let predicted = std::slice::from_raw_parts(predicted, len);
    let ground_truth = std::slice::from_raw_parts(ground_truth, len);
    match f(predicted, ground_truth) {
        Ok(v) => {
            *out = v;
            DecountStatus::DecountOk
        }
        Err(err) => fail_error(err),
    }
}

/// Mean absolute counting error over `len` paired values.
///
/// # Safety
/// `predicted` and `ground_truth` must point to `len` doubles each.
#[no_mangle]
pub unsafe extern "C" fn decount_mae(
    predicted: *const f64,
    ground_truth: *const f64,
    len: usize,
    out: *mut f64,
) -> DecountStatus {
    metric(predicted, ground_truth, len, out, |p, g| mae(p, g))
}

/// Mean square counting error over `len` paired values.
///
/// # Safety
/// `predicted` and `ground_truth` must point to `len` doubles each.
#[no_mangle]
pub unsafe extern "C" fn decount_mse(
    predicted: *const f64,
    ground_truth: *const f64,
    len: usize,
    out: *mut f64,
) -> DecountStatus {
    metric(predicted, ground_truth, len, out, |p, g| mse(p, g))
}

/// Opaque handle to a trained counting network.
pub struct DecountCounter {
    counter: Counter,
    // Keeps the weight storage the counter's layers point into alive.
    _store: ParamStore,
}

/// Loads a counter from a stage-one checkpoint directory (the directory
/// containing `counter_config.json` and `counter.safetensors`). On success
/// `*out` owns the handle; release it with `decount_counter_free`.
///
/// # Safety
/// `dir` must be a nul-terminated path and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn decount_counter_load(
    dir: *const c_char,
    out: *mut *mut DecountCounter,
) -> DecountStatus {
    if dir.is_null() || out.is_null() {
        return fail(DecountStatus::DecountNullPointer, "null argument passed to counter_load");
    }
    let Ok(dir) = CStr::from_ptr(dir).to_str() else {
        return fail(DecountStatus::DecountInvalidArgument, "checkpoint path is not valid UTF-8");
    };
    let dir = dir.to_string();
    guard(move || match load_counter(Path::new(&dir)) {
        Ok((counter, store)) => {
            *out = Box::into_raw(Box::new(DecountCounter { counter, _store: store }));
            DecountStatus::DecountOk
        }
        Err(err) => fail_error(err),
    })
}

/// Predicts the cell count of one image. `image` is row-major interleaved
/// `height * width * channels` with intensities in `[0, 1]`; the channel
/// count and spatial dimensions must match what the counter was trained on
/// (spatial dimensions divisible by 16).
///
/// # Safety
/// `image` must point to `height * width * channels` floats; `handle` must
/// come from `decount_counter_load` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn decount_counter_predict(
    handle: *const DecountCounter,
    image: *const f32,
    height: usize,
    width: usize,
    channels: usize,
    out_count: *mut f64,
) -> DecountStatus {
    if handle.is_null() || image.is_null() || out_count.is_null() {
        return fail(DecountStatus::DecountNullPointer, "null argument passed to counter_predict");
    }
    if height == 0 || width == 0 || channels == 0 {
        return fail(DecountStatus::DecountInvalidArgument, "image dimensions must be nonzero");
    }
    let pixels = std::slice::from_raw_parts(image, height * width * channels);
    let handle = &*handle;
    guard(move || {
        // HWC interleaved to NCHW planar.
        let mut planar = Vec::with_capacity(pixels.len());
        for c in 0..channels {
            for r in 0..height {
                for col in 0..width {
                    planar.push(pixels[(r * width + col) * channels + c]);
                }
            }
        }
        let result = Tensor::from_vec(planar, (1, channels, height, width), &Device::Cpu)
            .map_err(decount::Error::from)
            .and_then(|t| handle.counter.forward(&t))
            .and_then(|coarse| coarse.count_values());
        match result {
            Ok(counts) => {
                *out_count = counts[0];
                DecountStatus::DecountOk
            }
            Err(err) => fail_error(err),
        }
    })
}

/// Releases a counter handle; a null handle is a no-op.
///
/// # Safety
/// `handle` must come from `decount_counter_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn decount_counter_free(handle: *mut DecountCounter) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}
