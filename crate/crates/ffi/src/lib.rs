//! C ABI for loading trained checkpoints and running inference.
//!
//! The API follows the usual C conventions: an opaque handle created by
//! a load function and destroyed by a free function, status codes for
//! every fallible call, and a thread-local textual message readable via
//! `ctxc_last_error` after a failure. All buffers are caller-allocated;
//! sizes are documented per function. No call panics across the
//! boundary.

use ctxconv::network::{self, ModelParams};
use ctxconv::runner;
use ctxconv::tensor::Tensor;
use ctxconv::transform::TransformSet;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Images are 28x28 grayscale, row-major, one f64 per pixel in [0,1].
pub const CTXC_IMAGE_PIXELS: usize = 28 * 28;
/// Each class-score row has this many entries.
pub const CTXC_CLASSES: usize = 10;
/// Each generated filter bank flattens to this many f64 values.
pub const CTXC_FILTER_VALUES: usize = 360;

/// Result of every fallible API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtxcStatus {
    /// The call succeeded.
    CtxcOk = 0,
    /// A required pointer argument was null.
    CtxcNullPointer = 1,
    /// A string argument was not valid UTF-8.
    CtxcInvalidString = 2,
    /// The checkpoint could not be read; see `ctxc_last_error`.
    CtxcLoadFailed = 3,
    /// An input buffer had an invalid size or non-finite values.
    CtxcInvalidInput = 4,
    /// An unexpected internal failure; see `ctxc_last_error`.
    CtxcInternalError = 5,
}

use CtxcStatus::*;

/// Opaque model handle: trained parameters plus the transformation set
/// recorded in the checkpoint.
pub struct CtxcNet {
    params: ModelParams,
    phi: TransformSet,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: CtxcStatus, message: &str) -> CtxcStatus {
    let sanitized: String = message.chars().map(|c| if c == '\0' { '?' } else { c }).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
    status
}

fn guard(body: impl FnOnce() -> CtxcStatus) -> CtxcStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(CtxcInternalError, "internal panic"),
    }
}

/// Returns the library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ctxc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Returns the message for the most recent failure on this thread. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ctxc_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a training checkpoint from `path` and stores a fresh handle in
/// `*out`. The handle must be released with `ctxc_net_free`.
///
/// # Safety
/// `path` must point to a NUL-terminated string and `out` to writable
/// pointer storage.
#[no_mangle]
pub unsafe extern "C" fn ctxc_net_load(path: *const c_char, out: *mut *mut CtxcNet) -> CtxcStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(CtxcNullPointer, "path and out must be non-null");
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => return fail(CtxcInvalidString, "path is not valid UTF-8"),
        };
        match runner::load_training_state(Path::new(path)) {
            Ok(state) => {
                let net = Box::new(CtxcNet {
                    params: state.params,
                    phi: state.phi,
                });
                unsafe { out.write(Box::into_raw(net)) };
                CtxcOk
            }
            Err(e) => fail(CtxcLoadFailed, &format!("{path}: {e}")),
        }
    })
}

/// Releases a handle returned by `ctxc_net_load`. Null is a no-op.
///
/// # Safety
/// `net` must be null or a pointer obtained from `ctxc_net_load` that
/// has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn ctxc_net_free(net: *mut CtxcNet) {
    if !net.is_null() {
        drop(unsafe { Box::from_raw(net) });
    }
}

/// Number of transformation branches the model votes over, or 0 if
/// `net` is null.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctxc_net_branches(net: *const CtxcNet) -> usize {
    if net.is_null() {
        0
    } else {
        unsafe { &*net }.phi.len()
    }
}

unsafe fn batch_from_raw(pixels: *const f64, count: usize) -> Result<Tensor, CtxcStatus> {
    if count == 0 || !count.is_multiple_of(CTXC_IMAGE_PIXELS) {
        return Err(fail(
            CtxcInvalidInput,
            &format!("pixel count {count} is not a positive multiple of {CTXC_IMAGE_PIXELS}"),
        ));
    }
    let data = unsafe { std::slice::from_raw_parts(pixels, count) };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(fail(CtxcInvalidInput, "pixel values must be finite"));
    }
    let n = count / CTXC_IMAGE_PIXELS;
    Tensor::from_vec(&[n, 1, 28, 28], data.to_vec())
        .map_err(|e| fail(CtxcInternalError, &e.to_string()))
}

/// Classifies `count / 784` images. `pixels` holds the images back to
/// back; `out_labels` receives one class index per image.
///
/// # Safety
/// `net` must be a live handle, `pixels` must hold `count` f64 values,
/// and `out_labels` must have room for `count / 784` entries.
#[no_mangle]
pub unsafe extern "C" fn ctxc_net_predict(
    net: *const CtxcNet,
    pixels: *const f64,
    count: usize,
    out_labels: *mut u32,
) -> CtxcStatus {
    guard(|| {
        if net.is_null() || pixels.is_null() || out_labels.is_null() {
            return fail(CtxcNullPointer, "net, pixels and out_labels must be non-null");
        }
        let net = unsafe { &*net };
        let batch = match unsafe { batch_from_raw(pixels, count) } {
            Ok(t) => t,
            Err(status) => return status,
        };
        match network::predict(&batch, &net.phi, &net.params) {
            Ok(labels) => {
                for (i, &l) in labels.iter().enumerate() {
                    unsafe { out_labels.add(i).write(l as u32) };
                }
                CtxcOk
            }
            Err(e) => fail(CtxcInternalError, &e.to_string()),
        }
    })
}

/// Computes the 10 class scores per image (higher is more likely).
/// `out_logits` receives `count / 784` rows of 10 values.
///
/// # Safety
/// As for `ctxc_net_predict`, with `out_logits` sized accordingly.
#[no_mangle]
pub unsafe extern "C" fn ctxc_net_logits(
    net: *const CtxcNet,
    pixels: *const f64,
    count: usize,
    out_logits: *mut f64,
) -> CtxcStatus {
    guard(|| {
        if net.is_null() || pixels.is_null() || out_logits.is_null() {
            return fail(CtxcNullPointer, "net, pixels and out_logits must be non-null");
        }
        let net = unsafe { &*net };
        let batch = match unsafe { batch_from_raw(pixels, count) } {
            Ok(t) => t,
            Err(status) => return status,
        };
        match network::predict_logits(&batch, &net.phi, &net.params) {
            Ok(logits) => {
                let src = logits.data();
                unsafe {
                    std::slice::from_raw_parts_mut(out_logits, src.len()).copy_from_slice(src)
                };
                CtxcOk
            }
            Err(e) => fail(CtxcInternalError, &e.to_string()),
        }
    })
}

/// Runs only the filter generator: each image yields its own bank of
/// 40 3x3 kernels, flattened to 360 values. `out_filters` receives
/// `count / 784` rows of 360 values.
///
/// # Safety
/// As for `ctxc_net_predict`, with `out_filters` sized accordingly.
#[no_mangle]
pub unsafe extern "C" fn ctxc_net_filters(
    net: *const CtxcNet,
    pixels: *const f64,
    count: usize,
    out_filters: *mut f64,
) -> CtxcStatus {
    guard(|| {
        if net.is_null() || pixels.is_null() || out_filters.is_null() {
            return fail(CtxcNullPointer, "net, pixels and out_filters must be non-null");
        }
        let net = unsafe { &*net };
        let batch = match unsafe { batch_from_raw(pixels, count) } {
            Ok(t) => t,
            Err(status) => return status,
        };
        match network::filter_banks(&batch, &net.params) {
            Ok(banks) => {
                let src = banks.data();
                unsafe {
                    std::slice::from_raw_parts_mut(out_filters, src.len()).copy_from_slice(src)
                };
                CtxcOk
            }
            Err(e) => fail(CtxcInternalError, &e.to_string()),
        }
    })
}
