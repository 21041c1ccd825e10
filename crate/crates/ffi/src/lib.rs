//! C ABI over `hff-core`: load a saved model, query its shape and run
//! inference on raw `[0, 1]` pixels. Every fallible call returns an
//! [`HffStatus`]; [`hff_last_error`] describes the most recent failure on the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use hff_core::artifact;
use hff_core::model::Model;
use hff_core::HffError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HffStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Config = 4,
    Format = 5,
    Io = 6,
    Artifact = 7,
    NonFinite = 8,
    Divergence = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Opaque handle to a loaded model.
pub struct HffModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &HffError) -> HffStatus {
    match err {
        HffError::Dimension(_) => HffStatus::Dimension,
        HffError::Config(_) => HffStatus::Config,
        HffError::Format { .. } => HffStatus::Format,
        HffError::Usage(_) => HffStatus::InvalidArgument,
        HffError::NonFinite(_) => HffStatus::NonFinite,
        HffError::Divergence(_) => HffStatus::Divergence,
        HffError::Artifact(_) => HffStatus::Artifact,
        HffError::Io { .. } => HffStatus::Io,
    }
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (HffStatus, String)>) -> HffStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HffStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            HffStatus::Panic
        }
    }
}

fn core(err: HffError) -> (HffStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (HffStatus, String) {
    (HffStatus::NullArgument, format!("`{what}` is null"))
}

/// Loads a `model.bin` file. On success `*out` owns a new handle that must be
/// released with [`hff_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hff_model_load(path: *const c_char, out: *mut *mut HffModel) -> HffStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path =
            CStr::from_ptr(path).to_str().map_err(|_| (HffStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let model = artifact::load(Path::new(path)).map_err(core)?;
        *out = Box::into_raw(Box::new(HffModel { model }));
        Ok(())
    })
}

/// Releases a handle from [`hff_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hff_model_free(model: *mut HffModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn model_ref<'a>(model: *const HffModel) -> Result<&'a Model, (HffStatus, String)> {
    model.as_ref().map(|m| &m.model).ok_or_else(|| null("model"))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), (HffStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = value;
    Ok(())
}

/// Number of classes the model predicts.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hff_model_num_classes(model: *const HffModel, out: *mut usize) -> HffStatus {
    guard(|| write_out(out, model_ref(model)?.network.classes()))
}

/// Number of layers, each of which produces its own prediction.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hff_model_num_layers(model: *const HffModel, out: *mut usize) -> HffStatus {
    guard(|| write_out(out, model_ref(model)?.network.depth()))
}

/// Values per input sample (for example 784 for MNIST).
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hff_model_input_len(model: *const HffModel, out: *mut usize) -> HffStatus {
    guard(|| write_out(out, model_ref(model)?.network.input_len()))
}

unsafe fn pixel_slice<'a>(m: &Model, pixels: *const f32, n: usize) -> Result<&'a [f32], (HffStatus, String)> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    if n == 0 {
        return Err((HffStatus::InvalidArgument, "n must be at least 1".into()));
    }
    let len = n
        .checked_mul(m.network.input_len())
        .ok_or_else(|| (HffStatus::InvalidArgument, "n x input_len overflows".to_string()))?;
    Ok(std::slice::from_raw_parts(pixels, len))
}

/// Predicts `n` samples of raw `[0, 1]` pixels (`n x input_len`,
/// channel-major), writing `n` class indices to `out_labels`.
///
/// # Safety
/// `pixels` must point to `n * input_len` floats and `out_labels` to `n`
/// writable `size_t` values.
#[no_mangle]
pub unsafe extern "C" fn hff_model_predict(
    model: *const HffModel,
    pixels: *const f32,
    n: usize,
    out_labels: *mut usize,
) -> HffStatus {
    guard(|| {
        let m = model_ref(model)?;
        let px = pixel_slice(m, pixels, n)?;
        if out_labels.is_null() {
            return Err(null("out_labels"));
        }
        let x = m.prepare_raw(px, n).map_err(core)?;
        let inf = m.infer(&x).map_err(core)?;
        std::slice::from_raw_parts_mut(out_labels, n).copy_from_slice(&inf.predictions);
        Ok(())
    })
}

/// Per-class scores of layer `layer` for `n` samples, written row-major to
/// `out_scores` (`n x classes` doubles; `capacity` is its length). FF models
/// report per-class goodness.
///
/// # Safety
/// `pixels` must point to `n * input_len` floats and `out_scores` to
/// `capacity` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn hff_model_layer_scores(
    model: *const HffModel,
    pixels: *const f32,
    n: usize,
    layer: usize,
    out_scores: *mut f64,
    capacity: usize,
) -> HffStatus {
    guard(|| {
        let m = model_ref(model)?;
        let px = pixel_slice(m, pixels, n)?;
        if out_scores.is_null() {
            return Err(null("out_scores"));
        }
        let depth = m.network.depth();
        if layer >= depth {
            return Err((HffStatus::InvalidArgument, format!("layer {layer} out of range for {depth} layers")));
        }
        let need = n * m.network.classes();
        if capacity < need {
            return Err((HffStatus::BufferTooSmall, format!("need {need} doubles, buffer holds {capacity}")));
        }
        let x = m.prepare_raw(px, n).map_err(core)?;
        let tables = m.network.layer_scores(&x, m.proto_set()).map_err(core)?;
        std::slice::from_raw_parts_mut(out_scores, need).copy_from_slice(tables[layer].data());
        Ok(())
    })
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call on this thread.
#[no_mangle]
pub extern "C" fn hff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a NUL-terminated string.
#[no_mangle]
pub extern "C" fn hff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
