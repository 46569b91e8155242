//! C ABI over `vista_align`.
//!
//! Conventions:
//! * Every fallible function returns a [`VaStatus`]; results come back through
//!   out-pointers that are written only on success.
//! * Objects are opaque handles created by `va_*_new`/`va_*_load`/... and
//!   released with the matching `va_*_free`. Passing NULL to a free function
//!   is a no-op.
//! * Strings handed out by the library must be released with
//!   [`va_string_free`].
//! * After a failure, [`va_last_error`] returns a message for the calling
//!   thread. Panics are caught and reported as `VA_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use vista_align::alignment::{align_maps, AlignmentHypothesis};
use vista_align::association::consistency_score;
use vista_align::io::{config_from_str, map_from_json, map_to_json, read_config, read_map, tracks_from_json, write_map};
use vista_align::io::rotation_row_major;
use vista_align::model::{Hyperparameters, ObjectMap};
use vista_align::triangulation::build_map;
use vista_align::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    SizeLimit = 5,
    Degenerate = 6,
    Internal = 7,
}

/// Hyperparameter set.
pub struct VaParams(Hyperparameters);

/// Object map.
pub struct VaMap(ObjectMap);

/// Ranked list of alignment hypotheses.
pub struct VaHypotheses(Vec<AlignmentHypothesis>);

/// One alignment hypothesis: `b = R a + t` maps map-A points into map B.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaHypothesis {
    /// Row-major rotation matrix.
    pub rotation: [f64; 9],
    /// Translation, m.
    pub translation: [f64; 3],
    pub cardinality: usize,
    pub source_submap: usize,
    pub target_submap: usize,
    /// Degrees.
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

fn status_of(err: &Error) -> VaStatus {
    match err {
        Error::BehindCamera { .. } | Error::Degenerate(_) | Error::Diverged(_) => VaStatus::Degenerate,
        Error::SizeLimit { .. } | Error::TooLarge { .. } => VaStatus::SizeLimit,
        Error::InvalidField { .. } | Error::UnknownKey(_) => VaStatus::InvalidArgument,
        Error::Io { .. } => VaStatus::Io,
        Error::Json { .. } => VaStatus::Parse,
    }
}

struct Failure(VaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

/// Runs `body`, converting errors and panics into status codes.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> VaStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            VaStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {message}"));
            VaStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(VaStatus::NullPointer, format!("{name} is NULL")))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(VaStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("no interior NUL").into_raw()
}

/// Message describing the last failure on this thread; empty after success.
/// The pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn va_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn va_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by the library.
///
/// # Safety
/// `s` must be NULL or a string obtained from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn va_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Consistency score of a distance mismatch `x` (m).
#[no_mangle]
pub extern "C" fn va_consistency_score(x: f64, sigma: f64, epsilon: f64) -> f64 {
    consistency_score(x, sigma, epsilon)
}

// ---------------------------------------------------------------- params

/// Creates a hyperparameter set with default values.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn va_params_new_default(out: *mut *mut VaParams) -> VaStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = Box::into_raw(Box::new(VaParams(Hyperparameters::default())));
        Ok(())
    })
}

/// Sets one hyperparameter by name from its textual value.
///
/// # Safety
/// `params` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn va_params_set(params: *mut VaParams, key: *const c_char, value: *const c_char) -> VaStatus {
    guard(|| {
        non_null(params, "params")?;
        let key = str_arg(key, "key")?;
        let value = str_arg(value, "value")?;
        let mut candidate = (*params).0.clone();
        candidate.set(key, value)?;
        candidate.validate()?;
        (*params).0 = candidate;
        Ok(())
    })
}

/// Reads a `key = value` hyperparameter file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn va_params_load(path: *const c_char, out: *mut *mut VaParams) -> VaStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        non_null(out, "out")?;
        let p = read_config(path)?;
        *out = Box::into_raw(Box::new(VaParams(p)));
        Ok(())
    })
}

/// Parses hyperparameters from the text of a config file.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn va_params_from_str(text: *const c_char, out: *mut *mut VaParams) -> VaStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        non_null(out, "out")?;
        let p = config_from_str(text)?;
        *out = Box::into_raw(Box::new(VaParams(p)));
        Ok(())
    })
}

/// # Safety
/// `params` must be NULL or a live handle, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn va_params_free(params: *mut VaParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

// ------------------------------------------------------------------- maps

/// Reads a map file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn va_map_load(path: *const c_char, out: *mut *mut VaMap) -> VaStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        non_null(out, "out")?;
        let map = read_map(path)?;
        *out = Box::into_raw(Box::new(VaMap(map)));
        Ok(())
    })
}

/// Writes a map file atomically in canonical form.
///
/// # Safety
/// `map` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn va_map_save(map: *const VaMap, path: *const c_char) -> VaStatus {
    guard(|| {
        non_null(map, "map")?;
        let path = str_arg(path, "path")?;
        write_map(path, &(*map).0)?;
        Ok(())
    })
}

/// Parses a map from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn va_map_from_json(json: *const c_char, out: *mut *mut VaMap) -> VaStatus {
    guard(|| {
        let json = str_arg(json, "json")?;
        non_null(out, "out")?;
        let map = map_from_json(json)?;
        *out = Box::into_raw(Box::new(VaMap(map)));
        Ok(())
    })
}

/// Canonical JSON text of a map; release with [`va_string_free`].
///
/// # Safety
/// `map` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn va_map_to_json(map: *const VaMap, out: *mut *mut c_char) -> VaStatus {
    guard(|| {
        non_null(map, "map")?;
        non_null(out, "out")?;
        *out = into_c_string(map_to_json(&(*map).0));
        Ok(())
    })
}

/// Number of landmarks in a map.
///
/// # Safety
/// `map` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn va_map_len(map: *const VaMap, out: *mut usize) -> VaStatus {
    guard(|| {
        non_null(map, "map")?;
        non_null(out, "out")?;
        *out = (*map).0.len();
        Ok(())
    })
}

/// Triangulates the tracks in a track-file JSON text into a map.
///
/// # Safety
/// `tracks_json` and `agent_id` must be NUL-terminated strings, `params` a
/// live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn va_map_build_from_tracks(
    tracks_json: *const c_char,
    agent_id: *const c_char,
    params: *const VaParams,
    out: *mut *mut VaMap,
) -> VaStatus {
    guard(|| {
        let text = str_arg(tracks_json, "tracks_json")?;
        let agent = str_arg(agent_id, "agent_id")?;
        non_null(params, "params")?;
        non_null(out, "out")?;
        let set = tracks_from_json(text)?;
        let (map, _) = build_map(&set.tracks, &set.poses, &set.intrinsics, &(*params).0, agent)?;
        *out = Box::into_raw(Box::new(VaMap(map)));
        Ok(())
    })
}

/// # Safety
/// `map` must be NULL or a live handle, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn va_map_free(map: *mut VaMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

// -------------------------------------------------------------- alignment

/// Matches two maps; the surviving hypotheses are ranked by cardinality.
///
/// # Safety
/// `map_a`, `map_b` and `params` must be live handles; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn va_align(
    map_a: *const VaMap,
    map_b: *const VaMap,
    params: *const VaParams,
    out: *mut *mut VaHypotheses,
) -> VaStatus {
    guard(|| {
        non_null(map_a, "map_a")?;
        non_null(map_b, "map_b")?;
        non_null(params, "params")?;
        non_null(out, "out")?;
        let hyps = align_maps(&(*map_a).0, &(*map_b).0, &(*params).0)?;
        *out = Box::into_raw(Box::new(VaHypotheses(hyps)));
        Ok(())
    })
}

/// # Safety
/// `hyps` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn va_hypotheses_len(hyps: *const VaHypotheses, out: *mut usize) -> VaStatus {
    guard(|| {
        non_null(hyps, "hyps")?;
        non_null(out, "out")?;
        *out = (*hyps).0.len();
        Ok(())
    })
}

/// Copies hypothesis `index` (0 is the best) into `out`.
///
/// # Safety
/// `hyps` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn va_hypotheses_get(hyps: *const VaHypotheses, index: usize, out: *mut VaHypothesis) -> VaStatus {
    guard(|| {
        non_null(hyps, "hyps")?;
        non_null(out, "out")?;
        let list = &(*hyps).0;
        let h = list.get(index).ok_or_else(|| {
            Failure(
                VaStatus::InvalidArgument,
                format!("index {index} out of range for {} hypotheses", list.len()),
            )
        })?;
        *out = VaHypothesis {
            rotation: rotation_row_major(&h.transform.rotation),
            translation: h.transform.translation.into(),
            cardinality: h.cardinality,
            source_submap: h.source_submap,
            target_submap: h.target_submap,
            roll: h.attitude.roll,
            pitch: h.attitude.pitch,
            yaw: h.attitude.yaw,
        };
        Ok(())
    })
}

/// # Safety
/// `hyps` must be NULL or a live handle, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn va_hypotheses_free(hyps: *mut VaHypotheses) {
    if !hyps.is_null() {
        drop(Box::from_raw(hyps));
    }
}
