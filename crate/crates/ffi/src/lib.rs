//! C interface to the inference cascade.
//!
//! Every function returns an [`LcStatus`]; on failure a description is kept
//! per thread and can be read with [`lc_last_error_message`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use image::RgbImage;
use lanecascade::classifier::{remap_class, TaxonomyScheme};
use lanecascade::datasets::ClassLabel;
use lanecascade::pipeline::{Cascade, CascadeBoundary, CascadeOptions};
use lanecascade::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Incompatible = 5,
    OutOfRange = 6,
    Internal = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcScheme {
    TwoClass = 0,
    ThreeClass = 1,
    Full = 2,
}

impl From<LcScheme> for TaxonomyScheme {
    fn from(s: LcScheme) -> Self {
        match s {
            LcScheme::TwoClass => TaxonomyScheme::TwoClass,
            LcScheme::ThreeClass => TaxonomyScheme::ThreeClass,
            LcScheme::Full => TaxonomyScheme::Full,
        }
    }
}

/// A loaded segmentation + classification pair.
pub struct LcCascade {
    inner: Cascade,
}

/// Boundaries found in one image.
pub struct LcResult {
    boundaries: Vec<CascadeBoundary>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(err: &Error) -> LcStatus {
    match err {
        Error::Io { .. } => LcStatus::Io,
        Error::Checkpoint { .. } => LcStatus::Checkpoint,
        Error::Incompatible(_) => LcStatus::Incompatible,
        Error::Shape(_) | Error::Config(_) => LcStatus::InvalidArgument,
        _ => LcStatus::Internal,
    }
}

fn fail(status: LcStatus, message: impl Into<String>) -> LcStatus {
    set_error(message);
    status
}

/// Runs `f`, turning panics into [`LcStatus::Panic`].
fn guard(f: impl FnOnce() -> LcStatus) -> LcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(LcStatus::Panic, "internal panic"),
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, LcStatus> {
    if p.is_null() {
        return Err(fail(LcStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(LcStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

/// Version of the library as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads both checkpoints and checks that they belong together.
///
/// # Safety
/// `seg_path` and `cls_path` must be NUL-terminated strings and `out` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lc_cascade_open(
    seg_path: *const c_char,
    cls_path: *const c_char,
    out: *mut *mut LcCascade,
) -> LcStatus {
    guard(|| {
        if out.is_null() {
            return fail(LcStatus::NullPointer, "out is null");
        }
        let seg = match path_arg(seg_path, "seg_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let cls = match path_arg(cls_path, "cls_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Cascade::open(&seg, &cls, CascadeOptions::default()) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(LcCascade { inner }));
                LcStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Releases a cascade. NULL is ignored.
///
/// # Safety
/// `cascade` must come from [`lc_cascade_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lc_cascade_free(cascade: *mut LcCascade) {
    if !cascade.is_null() {
        drop(Box::from_raw(cascade));
    }
}

/// Classes the cascade's classifier predicts.
///
/// # Safety
/// `cascade` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn lc_cascade_num_classes(cascade: *const LcCascade, out: *mut usize) -> LcStatus {
    guard(|| match (cascade.as_ref(), out.is_null()) {
        (Some(c), false) => {
            *out = c.inner.scheme().num_outputs();
            LcStatus::Ok
        }
        _ => fail(LcStatus::NullPointer, "cascade or out is null"),
    })
}

/// Network forward passes made by this cascade so far.
///
/// # Safety
/// `cascade` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn lc_cascade_invocations(cascade: *const LcCascade, out: *mut usize) -> LcStatus {
    guard(|| match (cascade.as_ref(), out.is_null()) {
        (Some(c), false) => {
            *out = c.inner.invocations();
            LcStatus::Ok
        }
        _ => fail(LcStatus::NullPointer, "cascade or out is null"),
    })
}

/// Runs the cascade on an 8-bit RGB image with rows `stride` bytes apart.
///
/// # Safety
/// `rgb` must point to `stride * height` readable bytes; `cascade` and `out`
/// must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn lc_cascade_infer(
    cascade: *const LcCascade,
    rgb: *const u8,
    width: u32,
    height: u32,
    stride: usize,
    out: *mut *mut LcResult,
) -> LcStatus {
    guard(|| {
        let Some(c) = cascade.as_ref() else {
            return fail(LcStatus::NullPointer, "cascade is null");
        };
        if rgb.is_null() || out.is_null() {
            return fail(LcStatus::NullPointer, "rgb or out is null");
        }
        let row = width as usize * 3;
        if width == 0 || height == 0 || stride < row {
            return fail(
                LcStatus::InvalidArgument,
                format!("bad image geometry {width}x{height} with stride {stride}"),
            );
        }
        let src = std::slice::from_raw_parts(rgb, stride * height as usize);
        let mut data = Vec::with_capacity(row * height as usize);
        for y in 0..height as usize {
            data.extend_from_slice(&src[y * stride..y * stride + row]);
        }
        let image = RgbImage::from_raw(width, height, data).expect("buffer matches dimensions");
        match c.inner.infer(&image) {
            Ok(result) => {
                *out = Box::into_raw(Box::new(LcResult {
                    boundaries: result.boundaries,
                }));
                LcStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Releases a result. NULL is ignored.
///
/// # Safety
/// `result` must come from [`lc_cascade_infer`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lc_result_free(result: *mut LcResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Number of boundaries; 0 for NULL.
///
/// # Safety
/// `result` must be NULL or a valid result.
#[no_mangle]
pub unsafe extern "C" fn lc_result_count(result: *const LcResult) -> usize {
    result.as_ref().map_or(0, |r| r.boundaries.len())
}

unsafe fn boundary<'a>(result: *const LcResult, index: usize) -> Result<&'a CascadeBoundary, LcStatus> {
    let r = result
        .as_ref()
        .ok_or_else(|| fail(LcStatus::NullPointer, "result is null"))?;
    r.boundaries.get(index).ok_or_else(|| {
        fail(
            LcStatus::OutOfRange,
            format!("boundary {index} of {}", r.boundaries.len()),
        )
    })
}

/// Number of points of boundary `index`.
///
/// # Safety
/// `result` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn lc_result_point_count(result: *const LcResult, index: usize, out: *mut usize) -> LcStatus {
    guard(|| {
        if out.is_null() {
            return fail(LcStatus::NullPointer, "out is null");
        }
        match boundary(result, index) {
            Ok(b) => {
                *out = b.polyline.len();
                LcStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Copies the points of boundary `index` as parallel row and x arrays.
/// Fails with [`LcStatus::OutOfRange`] when `capacity` is too small.
///
/// # Safety
/// `rows` and `xs` must each have room for `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn lc_result_points(
    result: *const LcResult,
    index: usize,
    rows: *mut i32,
    xs: *mut f64,
    capacity: usize,
) -> LcStatus {
    guard(|| {
        if rows.is_null() || xs.is_null() {
            return fail(LcStatus::NullPointer, "rows or xs is null");
        }
        let b = match boundary(result, index) {
            Ok(b) => b,
            Err(s) => return s,
        };
        let n = b.polyline.len();
        if capacity < n {
            return fail(LcStatus::OutOfRange, format!("{n} points, capacity {capacity}"));
        }
        for (i, (r, x)) in b.polyline.points().enumerate() {
            *rows.add(i) = r;
            *xs.add(i) = x;
        }
        LcStatus::Ok
    })
}

/// Predicted class index and its confidence for boundary `index`.
///
/// # Safety
/// `class_index` and `confidence` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn lc_result_class(
    result: *const LcResult,
    index: usize,
    class_index: *mut u32,
    confidence: *mut f32,
) -> LcStatus {
    guard(|| {
        if class_index.is_null() || confidence.is_null() {
            return fail(LcStatus::NullPointer, "class_index or confidence is null");
        }
        match boundary(result, index) {
            Ok(b) => {
                *class_index = b.class_index as u32;
                *confidence = b.confidence;
                LcStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Output index of the label with code `label` (0..7) under `scheme`, or -1
/// when the scheme ignores it.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lc_remap_class(label: u8, scheme: LcScheme, out: *mut i32) -> LcStatus {
    guard(|| {
        if out.is_null() {
            return fail(LcStatus::NullPointer, "out is null");
        }
        let Some(label) = ClassLabel::from_code(label) else {
            return fail(LcStatus::InvalidArgument, format!("no class with code {label}"));
        };
        *out = remap_class(label, scheme.into()).map_or(-1, |i| i as i32);
        LcStatus::Ok
    })
}
