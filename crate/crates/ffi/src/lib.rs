//! C ABI over the `mime` crate.
//!
//! Every fallible function returns a [`MimeStatus`]; on failure the message
//! is kept per thread and read with [`mime_last_error_message`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, UnwindSafe};
use std::ptr;

use mime::ehr::{read_cohort, visit_complexity, Cohort, Patient};
use mime::model::{Checkpoint, Model};
use mime::synth::{generate, GenConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MimeStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullPointer = 1,
    Io = 2,
    Parse = 3,
    /// Configuration or record rejected.
    Invalid = 4,
    /// Dimensions of a model and a cohort disagree.
    Shape = 5,
    /// The library panicked; the handle arguments should not be reused.
    Panic = 6,
    /// Output buffer too short; the required length was written.
    BufferTooSmall = 7,
}

/// A loaded or generated cohort.
pub struct MimeCohort {
    inner: Cohort,
}

/// A model restored from a checkpoint.
pub struct MimeModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(MimeStatus, String);

impl From<mime::Error> for Failure {
    fn from(e: mime::Error) -> Self {
        use mime::Error as E;
        let status = match &e {
            E::Io { .. } => MimeStatus::Io,
            E::Parse { .. } | E::Json(_) => MimeStatus::Parse,
            E::Shape { .. } => MimeStatus::Shape,
            _ => MimeStatus::Invalid,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MimeStatus::NullPointer, format!("{what} is NULL"))
}

/// Runs `f`, recording its error and turning panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure> + UnwindSafe) -> MimeStatus {
    clear_error();
    match catch_unwind(f) {
        Ok(Ok(())) => MimeStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MimeStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be NULL or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MimeStatus::Invalid, format!("{what} is not valid UTF-8")))
}

/// # Safety
/// `p` must be NULL or point to a live handle of type `T`.
unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Copies `values` into `buf` when it fits; `written` always receives the
/// required length.
///
/// # Safety
/// `buf` must be NULL or valid for `len` writes; `written` must be valid.
unsafe fn fill(
    values: &[f64],
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> Result<(), Failure> {
    if written.is_null() {
        return Err(null("written"));
    }
    *written = values.len();
    if len < values.len() {
        return Err(Failure(
            MimeStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", values.len()),
        ));
    }
    if !values.is_empty() {
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
    }
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn mime_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mime_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads a cohort file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mime_cohort_load(
    path: *const c_char,
    out: *mut *mut MimeCohort,
) -> MimeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cohort = read_cohort(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(MimeCohort { inner: cohort }));
        Ok(())
    })
}

/// Generates a synthetic cohort from a generator configuration in JSON.
/// NULL or an empty string selects the defaults.
///
/// # Safety
/// `config_json` must be NULL or NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mime_cohort_generate(
    config_json: *const c_char,
    out: *mut *mut MimeCohort,
) -> MimeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = if config_json.is_null() {
            ""
        } else {
            str_arg(config_json, "config_json")?
        };
        let cfg: GenConfig = if text.trim().is_empty() {
            GenConfig::default()
        } else {
            serde_json::from_str(text).map_err(mime::Error::from)?
        };
        let (cohort, _) = generate(&cfg)?;
        *out = Box::into_raw(Box::new(MimeCohort { inner: cohort }));
        Ok(())
    })
}

/// Releases a cohort; NULL is ignored.
///
/// # Safety
/// `cohort` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mime_cohort_free(cohort: *mut MimeCohort) {
    if !cohort.is_null() {
        drop(Box::from_raw(cohort));
    }
}

/// # Safety
/// `cohort` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mime_cohort_num_patients(
    cohort: *const MimeCohort,
    out: *mut usize,
) -> MimeStatus {
    guard(|| {
        let c = handle(cohort, "cohort")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = c.inner.len();
        Ok(())
    })
}

/// Visit complexity of every patient, in file order.
///
/// # Safety
/// `cohort` must be a live handle, `buf` valid for `len` writes and
/// `written` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mime_cohort_visit_complexity(
    cohort: *const MimeCohort,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> MimeStatus {
    guard(|| {
        let c = handle(cohort, "cohort")?;
        let values: Vec<f64> = c.inner.patients.iter().map(visit_complexity).collect();
        fill(&values, buf, len, written)
    })
}

/// Restores a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mime_model_load(
    path: *const c_char,
    out: *mut *mut MimeModel,
) -> MimeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = Checkpoint::read(str_arg(path, "path")?)?;
        let model = Model::from_checkpoint(&ck)?;
        *out = Box::into_raw(Box::new(MimeModel { inner: model }));
        Ok(())
    })
}

/// Releases a model; NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mime_model_free(model: *mut MimeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Heart-failure probability for every patient of `cohort`.
///
/// # Safety
/// Handles must be live, `buf` valid for `len` writes and `written` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn mime_model_predict_hf(
    model: *const MimeModel,
    cohort: *const MimeCohort,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> MimeStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let c = handle(cohort, "cohort")?;
        m.inner
            .dims()
            .check_vocab(&c.inner.vocab)
            .map_err(|e| Failure(MimeStatus::Shape, e.to_string()))?;
        let refs: Vec<&Patient> = c.inner.patients.iter().collect();
        fill(&m.inner.predict_hf(&refs), buf, len, written)
    })
}
