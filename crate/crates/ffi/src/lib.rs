//! C ABI over the moelab JSON API and the paged stash allocator.
//!
//! Every function returns a [`MoelabStatus`]. On failure a message is kept
//! per thread and can be read with [`moelab_last_error`]. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use moelab::api::{self, ApiResponse, Operation};
use moelab::planners::PagedStash;
use moelab::Error;

/// Result of an FFI call. Values from 10 up mirror the library's error kinds.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoelabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    UnknownOperation = 3,
    BufferTooSmall = 4,
    Panic = 5,
    InvalidArgument = 10,
    LayoutSyntax = 11,
    LayoutArity = 12,
    NonFiniteLogit = 13,
    Infeasible = 14,
    OutOfPages = 15,
    Deadlock = 16,
    OverlappingFragments = 17,
    Parse = 18,
}

impl From<&Error> for MoelabStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) => MoelabStatus::InvalidArgument,
            Error::LayoutSyntax { .. } => MoelabStatus::LayoutSyntax,
            Error::LayoutArity { .. } => MoelabStatus::LayoutArity,
            Error::NonFiniteLogit { .. } => MoelabStatus::NonFiniteLogit,
            Error::Infeasible(_) => MoelabStatus::Infeasible,
            Error::OutOfPages { .. } => MoelabStatus::OutOfPages,
            Error::Deadlock { .. } => MoelabStatus::Deadlock,
            Error::OverlappingFragments(_) => MoelabStatus::OverlappingFragments,
            Error::Parse(_) => MoelabStatus::Parse,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: MoelabStatus, msg: impl Into<String>) -> MoelabStatus {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

fn fail_with(e: &Error) -> MoelabStatus {
    fail(e.into(), format!("{}: {e}", e.code()))
}

fn guard(f: impl FnOnce() -> MoelabStatus) -> MoelabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(MoelabStatus::Panic, "internal panic"),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn moelab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn moelab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// A response envelope of the v1 JSON API.
pub struct MoelabResponse {
    json: CString,
    http_status: u16,
    exit_code: i32,
}

/// Run an API operation ("estimate", "cost", "simulate", ...) on a JSON body.
///
/// Returns `Ok` whenever an envelope was produced, including envelopes that
/// report a validation failure; inspect the envelope's HTTP status for that.
///
/// # Safety
/// `operation` must be a NUL-terminated string, `body` must point to `len`
/// readable bytes and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn moelab_call(
    operation: *const c_char,
    body: *const u8,
    len: usize,
    out: *mut *mut MoelabResponse,
) -> MoelabStatus {
    guard(|| {
        if operation.is_null() || out.is_null() || (body.is_null() && len > 0) {
            return fail(MoelabStatus::NullPointer, "null argument");
        }
        let Ok(name) = CStr::from_ptr(operation).to_str() else {
            return fail(MoelabStatus::InvalidUtf8, "operation name is not UTF-8");
        };
        let Some(op) = Operation::from_name(name) else {
            return fail(
                MoelabStatus::UnknownOperation,
                format!("unknown operation '{name}'"),
            );
        };
        let bytes = if len == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(body, len)
        };
        let resp: ApiResponse = api::handle(op, bytes);
        let json = CString::new(resp.to_json()).expect("JSON has no interior NUL");
        *out = Box::into_raw(Box::new(MoelabResponse {
            json,
            http_status: resp.status.http_code(),
            exit_code: resp.status.exit_code(),
        }));
        MoelabStatus::Ok
    })
}

/// The envelope as NUL-terminated JSON, owned by the response.
///
/// # Safety
/// `r` must come from [`moelab_call`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn moelab_response_json(r: *const MoelabResponse) -> *const c_char {
    r.as_ref().map_or(ptr::null(), |r| r.json.as_ptr())
}

/// Length of the JSON in bytes, without the terminator.
///
/// # Safety
/// As for [`moelab_response_json`].
#[no_mangle]
pub unsafe extern "C" fn moelab_response_json_len(r: *const MoelabResponse) -> usize {
    r.as_ref().map_or(0, |r| r.json.as_bytes().len())
}

/// HTTP status the service would answer with (200, 400 or 422).
///
/// # Safety
/// As for [`moelab_response_json`].
#[no_mangle]
pub unsafe extern "C" fn moelab_response_http_status(r: *const MoelabResponse) -> u16 {
    r.as_ref().map_or(0, |r| r.http_status)
}

/// Exit code the CLI would return (0, 1 or 2).
///
/// # Safety
/// As for [`moelab_response_json`].
#[no_mangle]
pub unsafe extern "C" fn moelab_response_exit_code(r: *const MoelabResponse) -> i32 {
    r.as_ref().map_or(2, |r| r.exit_code)
}

/// # Safety
/// `r` must come from [`moelab_call`] or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn moelab_response_free(r: *mut MoelabResponse) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Paged activation stash with a fixed page pool.
pub struct MoelabStash(PagedStash);

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn moelab_stash_new(
    num_pages: usize,
    page_tokens: usize,
    bytes_per_token: usize,
    tmp_tokens: usize,
    out: *mut *mut MoelabStash,
) -> MoelabStatus {
    guard(|| {
        if out.is_null() {
            return fail(MoelabStatus::NullPointer, "null argument");
        }
        match PagedStash::new(num_pages, page_tokens, bytes_per_token, tmp_tokens) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(MoelabStash(s)));
                MoelabStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Copy `len` bytes holding `tokens` rows into pages for `layer`. The number
/// of pages taken is written to `pages_out` when it is not null.
///
/// # Safety
/// `s` must be a live stash and `payload` must point to `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn moelab_stash_put(
    s: *mut MoelabStash,
    layer: usize,
    tokens: usize,
    payload: *const u8,
    len: usize,
    pages_out: *mut usize,
) -> MoelabStatus {
    guard(|| {
        let Some(s) = s.as_mut() else {
            return fail(MoelabStatus::NullPointer, "null stash");
        };
        if payload.is_null() && len > 0 {
            return fail(MoelabStatus::NullPointer, "null payload");
        }
        let bytes = if len == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(payload, len)
        };
        match s.0.stash(layer, tokens, bytes) {
            Ok(rec) => {
                if !pages_out.is_null() {
                    *pages_out = rec.pages.len();
                }
                MoelabStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Bytes stashed for `layer`, so callers can size the reload buffer.
///
/// # Safety
/// `s` must be a live stash and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn moelab_stash_layer_bytes(
    s: *const MoelabStash,
    layer: usize,
    out: *mut usize,
) -> MoelabStatus {
    guard(|| {
        let (Some(s), false) = (s.as_ref(), out.is_null()) else {
            return fail(MoelabStatus::NullPointer, "null argument");
        };
        match s.0.records().find(|r| r.layer == layer) {
            Some(r) => {
                *out = r.bytes;
                MoelabStatus::Ok
            }
            None => fail(
                MoelabStatus::InvalidArgument,
                format!("layer {layer} is not stashed"),
            ),
        }
    })
}

/// Move `layer` back into `buf` and release its pages. Nothing changes when
/// `cap` is too small.
///
/// # Safety
/// `s` must be a live stash, `buf` must point to `cap` writable bytes and
/// `len_out` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn moelab_stash_take(
    s: *mut MoelabStash,
    layer: usize,
    buf: *mut u8,
    cap: usize,
    len_out: *mut usize,
) -> MoelabStatus {
    guard(|| {
        let Some(st) = s.as_mut() else {
            return fail(MoelabStatus::NullPointer, "null stash");
        };
        let mut need = 0;
        let status = moelab_stash_layer_bytes(s, layer, &mut need);
        if status != MoelabStatus::Ok {
            return status;
        }
        if need > cap {
            return fail(
                MoelabStatus::BufferTooSmall,
                format!("need {need} bytes, buffer holds {cap}"),
            );
        }
        if buf.is_null() && need > 0 {
            return fail(MoelabStatus::NullPointer, "null buffer");
        }
        match st.0.reload(layer) {
            Ok(data) => {
                if !data.is_empty() {
                    ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
                }
                if !len_out.is_null() {
                    *len_out = data.len();
                }
                MoelabStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// # Safety
/// `s` must be a live stash or null.
#[no_mangle]
pub unsafe extern "C" fn moelab_stash_free_pages(s: *const MoelabStash) -> usize {
    s.as_ref().map_or(0, |s| s.0.free_pages())
}

/// # Safety
/// `s` must be a live stash or null.
#[no_mangle]
pub unsafe extern "C" fn moelab_stash_peak_pages(s: *const MoelabStash) -> usize {
    s.as_ref().map_or(0, |s| s.0.peak_pages())
}

/// # Safety
/// `s` must come from [`moelab_stash_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn moelab_stash_free(s: *mut MoelabStash) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}
