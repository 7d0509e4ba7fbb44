//! C ABI over the codec core. Handles are opaque pointers owned by the
//! library; every function is panic-safe and reports failures through
//! `GacStatus`. The most recent error message is kept per thread and can be
//! fetched with `gac_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gac_core::codec::BitstreamHeader;
use gac_core::signal::Waveform;
use gac_core::stage1::Stage1Model;
use gac_core::stage2::{Stage2Config, VelocityModel};
use gac_core::Error;

/// Status codes mirror the CLI exit codes where they overlap.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GacStatus {
    Ok = 0,
    /// Invalid configuration or argument.
    Config = 2,
    /// Malformed or corrupted data.
    Format = 3,
    /// Training/numerics diverged.
    Divergence = 4,
    /// A required pointer argument was null.
    NullArgument = 5,
    /// Internal panic; state of outputs is unspecified.
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: Vec<u8> = msg.bytes().filter(|&b| b != 0).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &Error) -> GacStatus {
    match err.exit_code() {
        2 => GacStatus::Config,
        4 => GacStatus::Divergence,
        _ => GacStatus::Format,
    }
}

fn guarded(f: impl FnOnce() -> GacStatus) -> GacStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            GacStatus::Panic
        }
    }
}

/// Message for the most recent error on this thread. Valid until the next
/// failing call on the same thread; never null.
#[no_mangle]
pub extern "C" fn gac_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Opaque tokenizer (stage-1) handle.
pub struct GacStage1(Stage1Model);

/// Opaque decoder (stage-2) handle.
pub struct GacStage2 {
    model: VelocityModel,
    cfg: Stage2Config,
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, GacStatus> {
    if path.is_null() {
        set_error("null path");
        return Err(GacStatus::NullArgument);
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(GacStatus::Config)
        }
    }
}

/// Load a stage-1 checkpoint (with its JSON sidecar) from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gac_stage1_load(
    path: *const c_char,
    out: *mut *mut GacStage1,
) -> GacStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null out pointer");
            return GacStatus::NullArgument;
        }
        let p = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Stage1Model::load(p) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(GacStage1(m)));
                GacStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// # Safety
/// `handle` must come from `gac_stage1_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gac_stage1_free(handle: *mut GacStage1) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Load a stage-2 checkpoint (with its JSON sidecar) from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gac_stage2_load(
    path: *const c_char,
    out: *mut *mut GacStage2,
) -> GacStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null out pointer");
            return GacStatus::NullArgument;
        }
        let p = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match VelocityModel::load(p) {
            Ok((model, cfg)) => {
                *out = Box::into_raw(Box::new(GacStage2 { model, cfg }));
                GacStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// # Safety
/// `handle` must come from `gac_stage2_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gac_stage2_free(handle: *mut GacStage2) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Encode `num_samples` 16-bit PCM samples at 8 kHz into a packed bitstream.
/// On success `*out_bytes` points to a library-owned buffer of `*out_len`
/// bytes; release it with `gac_bytes_free`.
///
/// # Safety
/// `samples` must point to `num_samples` readable values; out pointers must
/// be valid.
#[no_mangle]
pub unsafe extern "C" fn gac_encode_clip(
    stage1: *const GacStage1,
    samples: *const i16,
    num_samples: usize,
    out_bytes: *mut *mut u8,
    out_len: *mut usize,
) -> GacStatus {
    guarded(|| {
        if stage1.is_null() || samples.is_null() || out_bytes.is_null() || out_len.is_null() {
            set_error("null argument");
            return GacStatus::NullArgument;
        }
        let pcm = std::slice::from_raw_parts(samples, num_samples);
        let w = Waveform {
            samples: pcm.iter().map(|&s| s as f64 / 32767.0).collect(),
        };
        match gac_core::codec::encode_clip(&(*stage1).0, &w) {
            Ok(bytes) => {
                let mut boxed = bytes.into_boxed_slice();
                *out_len = boxed.len();
                *out_bytes = boxed.as_mut_ptr();
                std::mem::forget(boxed);
                GacStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Release a buffer returned by `gac_encode_clip`.
///
/// # Safety
/// `(ptr, len)` must be exactly as returned; free only once.
#[no_mangle]
pub unsafe extern "C" fn gac_bytes_free(ptr: *mut u8, len: usize) {
    if !ptr.is_null() {
        drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(ptr, len)));
    }
}

/// Decode a packed bitstream into a feature sequence (row-major f64). On
/// success `*out_features` holds `*out_rows * *out_cols` values owned by the
/// library; release with `gac_features_free`.
///
/// # Safety
/// `bytes` must point to `len` readable bytes; out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn gac_decode_clip(
    stage1: *const GacStage1,
    stage2: *const GacStage2,
    bytes: *const u8,
    len: usize,
    ode_steps: usize,
    seed: u64,
    out_features: *mut *mut f64,
    out_rows: *mut usize,
    out_cols: *mut usize,
) -> GacStatus {
    guarded(|| {
        if stage1.is_null()
            || stage2.is_null()
            || bytes.is_null()
            || out_features.is_null()
            || out_rows.is_null()
            || out_cols.is_null()
        {
            set_error("null argument");
            return GacStatus::NullArgument;
        }
        let data = std::slice::from_raw_parts(bytes, len);
        let s2 = &*stage2;
        match gac_core::codec::decode_clip(
            &(*stage1).0,
            &s2.model,
            data,
            ode_steps,
            seed,
            s2.cfg.cond_window,
        ) {
            Ok(features) => {
                *out_rows = features.rows;
                *out_cols = features.cols;
                let mut boxed = features.data.into_boxed_slice();
                *out_features = boxed.as_mut_ptr();
                std::mem::forget(boxed);
                GacStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Release a buffer returned by `gac_decode_clip`.
///
/// # Safety
/// `(ptr, rows*cols)` must be exactly as returned; free only once.
#[no_mangle]
pub unsafe extern "C" fn gac_features_free(ptr: *mut f64, rows: usize, cols: usize) {
    if !ptr.is_null() {
        drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(
            ptr,
            rows * cols,
        )));
    }
}

/// Token bitrate in bits/second for the given stream parameters, or a
/// negative value if they are invalid.
#[no_mangle]
pub extern "C" fn gac_bitrate(
    sample_rate: u32,
    hop: u16,
    codebook_size: u16,
    downsample: u8,
) -> f64 {
    let header = BitstreamHeader {
        sample_rate,
        hop,
        codebook_size,
        downsample,
        num_tokens: 0,
    };
    match header.validate() {
        Ok(()) => gac_core::codec::bitrate(&header),
        Err(e) => {
            set_error(&e.to_string());
            -1.0
        }
    }
}
