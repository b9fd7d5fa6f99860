//! C ABI for building toy models, scoring masks and running head selection.
//!
//! All objects are opaque handles released with their `*_free` function.
//! Every fallible call returns a [`SwaStatus`]; on failure the message is
//! available from [`swa_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use swa_hybrid::calibration::{generate, score, CalibrationSet, Split};
use swa_hybrid::commands::{run_method, RunConfig};
use swa_hybrid::{io, presets, Error, HeadMask, MaskShape, ToyModel};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SwaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Runtime = 3,
    Panic = 4,
}

pub struct SwaModel(ToyModel);
pub struct SwaCalibration(CalibrationSet);
pub struct SwaMask(HeadMask);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn from_error(e: Error) -> SwaStatus {
    let status = if e.is_config() { SwaStatus::InvalidArgument } else { SwaStatus::Runtime };
    set_error(e.to_string());
    status
}

fn guard(f: impl FnOnce() -> Result<(), SwaStatus>) -> SwaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SwaStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            SwaStatus::Panic
        }
    }
}

fn null() -> SwaStatus {
    set_error("null pointer argument".into());
    SwaStatus::NullPointer
}

unsafe fn as_ref<'a, T>(p: *const T) -> Result<&'a T, SwaStatus> {
    p.as_ref().ok_or_else(null)
}

unsafe fn as_str<'a>(p: *const c_char) -> Result<&'a str, SwaStatus> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("string is not valid UTF-8".into());
        SwaStatus::InvalidArgument
    })
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), SwaStatus> {
    if out.is_null() {
        return Err(null());
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or null. Owned by the library.
#[no_mangle]
pub extern "C" fn swa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// The standard planted toy: 4 layers, 8 heads, 4 KV groups.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn swa_model_standard(seed: u64, out: *mut *mut SwaModel) -> SwaStatus {
    guard(|| {
        let (spec, c) = presets::standard_toy(seed);
        let m = ToyModel::build(&spec, Some(&c)).map_err(from_error)?;
        put(out, SwaModel(m))
    })
}

/// Loads `model.json` and `model.bin` from a directory written by `gen`.
///
/// # Safety
/// `dir` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn swa_model_load(dir: *const c_char, out: *mut *mut SwaModel) -> SwaStatus {
    guard(|| {
        let m = io::load_model(Path::new(as_str(dir)?)).map_err(from_error)?;
        put(out, SwaModel(m))
    })
}

/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn swa_model_free(model: *mut SwaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn swa_model_shape(
    model: *const SwaModel,
    layers: *mut usize,
    heads: *mut usize,
    groups: *mut usize,
) -> SwaStatus {
    guard(|| {
        let s = as_ref(model)?.0.shape();
        if layers.is_null() || heads.is_null() || groups.is_null() {
            return Err(null());
        }
        (*layers, *heads, *groups) = (s.layers, s.heads, s.groups);
        Ok(())
    })
}

/// Needle-retrieval examples for the standard toy. `evaluation` selects the held-out stream.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn swa_calibration_standard(
    seed: u64,
    num_examples: usize,
    evaluation: bool,
    out: *mut *mut SwaCalibration,
) -> SwaStatus {
    guard(|| {
        let spec = presets::standard_calibration(seed, num_examples);
        let split = if evaluation { Split::Evaluation } else { Split::Calibration };
        let set = generate(&spec, 32, split).map_err(from_error)?;
        put(out, SwaCalibration(set))
    })
}

/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn swa_calibration_load(path: *const c_char, out: *mut *mut SwaCalibration) -> SwaStatus {
    guard(|| {
        let set: CalibrationSet = io::read_json(Path::new(as_str(path)?)).map_err(from_error)?;
        put(out, SwaCalibration(set))
    })
}

/// # Safety
/// `set` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn swa_calibration_free(set: *mut SwaCalibration) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Mask from one byte per KV group (non-zero = SWA), flat `layer * groups + group`.
///
/// # Safety
/// `swa` must point to `len` bytes and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn swa_mask_from_groups(
    layers: usize,
    heads: usize,
    groups: usize,
    swa: *const u8,
    len: usize,
    out: *mut *mut SwaMask,
) -> SwaStatus {
    guard(|| {
        let shape = MaskShape::new(layers, heads, groups).map_err(from_error)?;
        if swa.is_null() && len > 0 {
            return Err(null());
        }
        let bits = if len == 0 { &[][..] } else { std::slice::from_raw_parts(swa, len) };
        let m = HeadMask::from_groups(shape, bits.iter().map(|&b| b != 0).collect()).map_err(from_error)?;
        put(out, SwaMask(m))
    })
}

/// # Safety
/// `mask` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn swa_mask_free(mask: *mut SwaMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// # Safety
/// `mask` and `ratio` must be valid.
#[no_mangle]
pub unsafe extern "C" fn swa_mask_ratio(mask: *const SwaMask, ratio: *mut f64) -> SwaStatus {
    guard(|| {
        let m = as_ref(mask)?;
        if ratio.is_null() {
            return Err(null());
        }
        *ratio = m.0.ratio();
        Ok(())
    })
}

/// Writes one byte per KV group (1 = SWA) into `buf`, which must hold `len >= L * G` bytes.
///
/// # Safety
/// `mask` must be valid and `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn swa_mask_groups(mask: *const SwaMask, buf: *mut u8, len: usize) -> SwaStatus {
    guard(|| {
        let m = as_ref(mask)?;
        let bits = m.0.group_swa();
        if buf.is_null() {
            return Err(null());
        }
        if len < bits.len() {
            set_error(format!("buffer holds {len} bytes, need {}", bits.len()));
            return Err(SwaStatus::InvalidArgument);
        }
        for (i, &b) in bits.iter().enumerate() {
            *buf.add(i) = u8::from(b);
        }
        Ok(())
    })
}

/// Canonical text form of a mask. Release with [`swa_string_free`].
///
/// # Safety
/// `mask` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn swa_mask_canonical(mask: *const SwaMask, out: *mut *mut c_char) -> SwaStatus {
    guard(|| {
        let m = as_ref(mask)?;
        if out.is_null() {
            return Err(null());
        }
        *out = CString::new(m.0.canonical()).expect("ascii").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn swa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Exact-match retrieval accuracy of `mask` on `set`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn swa_score(
    model: *const SwaModel,
    set: *const SwaCalibration,
    mask: *const SwaMask,
    window: usize,
    out: *mut f64,
) -> SwaStatus {
    guard(|| {
        let (m, s, k) = (as_ref(model)?, as_ref(set)?, as_ref(mask)?);
        if out.is_null() {
            return Err(null());
        }
        *out = score(&m.0, &k.0, &s.0, window).map_err(from_error)?;
        Ok(())
    })
}

/// Runs a selection method (`bosch`, `b-single`, `fisher`, ...) and returns its mask.
///
/// # Safety
/// All pointers must be valid; `method` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn swa_select(
    model: *const SwaModel,
    set: *const SwaCalibration,
    method: *const c_char,
    rho: f64,
    window: usize,
    seed: u64,
    out: *mut *mut SwaMask,
) -> SwaStatus {
    guard(|| {
        let (m, s) = (as_ref(model)?, as_ref(set)?);
        let cfg = RunConfig { method: as_str(method)?.to_string(), rho, window, seed, ..RunConfig::default() };
        cfg.method_kind().map_err(from_error)?;
        cfg.bosch_config().validate().map_err(from_error)?;
        let (plan, _, _) = run_method(&cfg, &m.0, &s.0).map_err(from_error)?;
        put(out, SwaMask(plan.mask))
    })
}
