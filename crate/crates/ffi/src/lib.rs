//! C ABI for loading a trained checkpoint, fusing an infrared/visible pair
//! under a text embedding, and scoring masks.
//!
//! Every function returns an [`RfStatus`]. On failure a description is kept
//! per thread and can be read with [`rf_last_error_message`]. Images cross the
//! boundary as planar `double` arrays with values in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use risfuse::imaging::{Mask, PlaneImage};
use risfuse::metrics::{iou, MetricsReport, PRECISION_THRESHOLDS};
use risfuse::model::Model;
use risfuse::text::{load_embedding, toy_embed, TextEmbedding};
use risfuse::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Arguments were inconsistent (sizes, dimensions, values).
    InvalidArgument = 2,
    /// A file was malformed.
    Format = 3,
    /// A file could not be read.
    Io = 4,
    /// Computation failed.
    Runtime = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// Number of precision thresholds written by [`rf_metrics`] (`P@0.5` .. `P@0.9`).
pub const RF_PRECISION_COUNT: usize = 5;

const _: () = assert!(RF_PRECISION_COUNT == PRECISION_THRESHOLDS.len());

/// Opaque trained model.
pub struct RfModel(Model);

/// Opaque `[tokens, dim]` text embedding.
pub struct RfEmbedding(TextEmbedding);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: RfStatus, msg: impl Into<String>) -> RfStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> RfStatus {
    let status = match &e {
        Error::Io(_) => RfStatus::Io,
        Error::Format(_) => RfStatus::Format,
        e if e.is_validation() => RfStatus::InvalidArgument,
        _ => RfStatus::Runtime,
    };
    fail(status, e.to_string())
}

/// Runs `f`, turning panics into [`RfStatus::Panic`] and clearing the error on success.
fn guard(f: impl FnOnce() -> RfStatus) -> RfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(RfStatus::Ok) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RfStatus::Ok
        }
        Ok(status) => status,
        Err(_) => fail(RfStatus::Panic, "internal panic"),
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, RfStatus> {
    if p.is_null() {
        return Err(fail(RfStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(RfStatus::InvalidArgument, "string is not UTF-8"))
}

/// Message for the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn rf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint. On success `*out` owns a model to release with [`rf_model_free`].
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rf_model_load(path: *const c_char, out: *mut *mut RfModel) -> RfStatus {
    guard(|| {
        if out.is_null() {
            return fail(RfStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Model::load(path) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(RfModel(m)));
                RfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`rf_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rf_model_free(model: *mut RfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width the model expects, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn rf_model_text_dim(model: *const RfModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().text_dim)
}

/// Reads a TEB embedding file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rf_embedding_load(path: *const c_char, out: *mut *mut RfEmbedding) -> RfStatus {
    guard(|| {
        if out.is_null() {
            return fail(RfStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_embedding(path) {
            Ok(e) => {
                *out = Box::into_raw(Box::new(RfEmbedding(e)));
                RfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Embeds `text` with the deterministic built-in toy embedder.
///
/// # Safety
/// `text` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rf_embedding_from_text(text: *const c_char, dim: usize, out: *mut *mut RfEmbedding) -> RfStatus {
    guard(|| {
        if out.is_null() {
            return fail(RfStatus::NullPointer, "out is null");
        }
        let text = match path_arg(text) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match toy_embed(text, dim) {
            Ok(e) => {
                *out = Box::into_raw(Box::new(RfEmbedding(e)));
                RfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Number of tokens in an embedding, or 0 for null.
///
/// # Safety
/// `emb` must be null or a live embedding handle.
#[no_mangle]
pub unsafe extern "C" fn rf_embedding_tokens(emb: *const RfEmbedding) -> usize {
    emb.as_ref().map_or(0, |e| e.0.tokens())
}

/// Releases an embedding. Null is ignored.
///
/// # Safety
/// `emb` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rf_embedding_free(emb: *mut RfEmbedding) {
    if !emb.is_null() {
        drop(Box::from_raw(emb));
    }
}

/// Fuses one pair. `vis` is planar RGB (`3 * height * width`), `ir` a single
/// plane. Writes the fused planar RGB to `out_rgb` and, when `out_prob` is not
/// null, the `height * width` mask probabilities.
///
/// # Safety
/// Buffers must hold the stated number of doubles; handles must be live.
#[no_mangle]
pub unsafe extern "C" fn rf_fuse(
    model: *const RfModel,
    vis: *const f64,
    ir: *const f64,
    height: usize,
    width: usize,
    emb: *const RfEmbedding,
    out_rgb: *mut f64,
    out_prob: *mut f64,
) -> RfStatus {
    guard(|| {
        let (Some(model), Some(emb)) = (model.as_ref(), emb.as_ref()) else {
            return fail(RfStatus::NullPointer, "model or embedding is null");
        };
        if vis.is_null() || ir.is_null() || out_rgb.is_null() {
            return fail(RfStatus::NullPointer, "image buffer is null");
        }
        let n = match height.checked_mul(width) {
            Some(n) if n > 0 && n <= isize::MAX as usize / 24 => n,
            _ => return fail(RfStatus::InvalidArgument, format!("bad image size {height}x{width}")),
        };
        let vis = std::slice::from_raw_parts(vis, 3 * n).to_vec();
        let ir = std::slice::from_raw_parts(ir, n).to_vec();
        let result = PlaneImage::new(3, height, width, vis)
            .and_then(|v| Ok((v, PlaneImage::new(1, height, width, ir)?)))
            .and_then(|(v, i)| model.0.infer(&v, &i, &emb.0));
        match result {
            Ok(inf) => {
                ptr::copy_nonoverlapping(inf.fused.data().as_ptr(), out_rgb, 3 * n);
                if !out_prob.is_null() {
                    ptr::copy_nonoverlapping(inf.prob.data().as_ptr(), out_prob, n);
                }
                RfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// IoU of two `height * width` masks given as bytes (nonzero = foreground).
///
/// # Safety
/// `pred` and `gt` must hold `height * width` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rf_iou(pred: *const u8, gt: *const u8, height: usize, width: usize, out: *mut f64) -> RfStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || out.is_null() {
            return fail(RfStatus::NullPointer, "null argument");
        }
        let Some(n) = height.checked_mul(width) else {
            return fail(RfStatus::InvalidArgument, "mask size overflows");
        };
        let to_mask = |p: *const u8| {
            let bits = std::slice::from_raw_parts(p, n).iter().map(|&b| b != 0).collect();
            Mask::new(height, width, bits)
        };
        match to_mask(pred).and_then(|p| iou(&p, &to_mask(gt)?)) {
            Ok(v) => {
                *out = v;
                RfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Aggregates `count` per-sample IoUs into mIoU and `P@0.5 .. P@0.9`
/// (`RF_PRECISION_COUNT` values written to `out_precision`).
///
/// # Safety
/// `ious` must hold `count` doubles and `out_precision` five.
#[no_mangle]
pub unsafe extern "C" fn rf_metrics(ious: *const f64, count: usize, out_miou: *mut f64, out_precision: *mut f64) -> RfStatus {
    guard(|| {
        if ious.is_null() || out_miou.is_null() || out_precision.is_null() {
            return fail(RfStatus::NullPointer, "null argument");
        }
        let values = std::slice::from_raw_parts(ious, count).to_vec();
        match MetricsReport::from_ious(values) {
            Ok(r) => {
                *out_miou = r.miou;
                for (i, &t) in PRECISION_THRESHOLDS.iter().enumerate() {
                    *out_precision.add(i) = r.precision(t).unwrap_or(f64::NAN);
                }
                RfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
