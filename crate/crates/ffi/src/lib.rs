//! C interface over `dgr-core`.
//!
//! Every fallible call returns a [`DgrStatus`]. On failure the message is kept
//! per thread and can be read with [`dgr_last_error_message`]. Strings handed
//! out by the library must be released with [`dgr_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dgr_core::analysis::mcnemar_one_sided;
use dgr_core::config::DataFormat;
use dgr_core::corpus::{load_split, parse_record, Casing};
use dgr_core::model::Model;
use dgr_core::rulekit::disambiguate;
use dgr_core::trainer::{encode_split, evaluate_accuracy};
use dgr_core::DgrError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DgrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Contract = 5,
    Numerical = 6,
    Panic = 7,
}

/// Opaque handle to a loaded model.
pub struct DgrModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(DgrStatus, String);

impl From<DgrError> for Failure {
    fn from(e: DgrError) -> Self {
        let status = match &e {
            DgrError::Config { .. } => DgrStatus::Config,
            DgrError::Io { .. } => DgrStatus::Io,
            DgrError::Numerical(_) => DgrStatus::Numerical,
            _ => DgrStatus::Contract,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DgrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DgrStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DgrStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(DgrStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(DgrStatus::InvalidUtf8, format!("{what}: {e}")))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(DgrStatus::NullArgument, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn to_c(s: String) -> *mut c_char {
    CString::new(s).map(CString::into_raw).unwrap_or(std::ptr::null_mut())
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn dgr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dgr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint directory written by `dgr train`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dgr_model_load(dir: *const c_char, out: *mut *mut DgrModel) -> DgrStatus {
    guard(|| {
        non_null(out, "out")?;
        let dir = text(dir, "dir")?;
        let model = Model::load(Path::new(dir))?;
        *out = Box::into_raw(Box::new(DgrModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`dgr_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dgr_model_free(model: *mut DgrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Scores one JSON record and writes a prediction record as JSON to `out`.
///
/// # Safety
/// `model` must be a live handle, `record` a NUL-terminated string and `out`
/// a writable pointer. Free the result with [`dgr_string_free`].
#[no_mangle]
pub unsafe extern "C" fn dgr_model_predict_json(
    model: *const DgrModel,
    record: *const c_char,
    out: *mut *mut c_char,
) -> DgrStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let model = &(*model).inner;
        let sample = parse_record(text(record, "record")?, 1, "ffi", Casing::Lower)?;
        let rec = model.prediction_record(&model.encode(&sample)?)?;
        *out = to_c(serde_json::to_string(&rec).map_err(DgrError::from)?);
        Ok(())
    })
}

/// Accuracy of `model` on a JSON-lines or CBT file.
///
/// # Safety
/// `model` must be a live handle, `path` a NUL-terminated string and
/// `accuracy` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dgr_model_evaluate_jsonl(
    model: *const DgrModel,
    path: *const c_char,
    accuracy: *mut f64,
) -> DgrStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(accuracy, "accuracy")?;
        let model = &(*model).inner;
        let split = load_split(Path::new(text(path, "path")?), DataFormat::Auto, "data", Casing::Lower)?;
        *accuracy = evaluate_accuracy(model, &encode_split(model, &split)?)?;
        Ok(())
    })
}

/// One-sided exact McNemar p-value for `b` wins of A against `c` wins of B.
///
/// # Safety
/// `p_value` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dgr_mcnemar_one_sided(b: u64, c: u64, p_value: *mut f64) -> DgrStatus {
    guard(|| {
        non_null(p_value, "p_value")?;
        *p_value = mcnemar_one_sided(b, c).p_value;
        Ok(())
    })
}

/// Applies the capitalised-neighbour rule to one JSON record, keeping case,
/// and writes the decision as JSON to `out`.
///
/// # Safety
/// `record` must be a NUL-terminated string and `out` a writable pointer.
/// Free the result with [`dgr_string_free`].
#[no_mangle]
pub unsafe extern "C" fn dgr_disambiguate_json(record: *const c_char, out: *mut *mut c_char) -> DgrStatus {
    guard(|| {
        non_null(out, "out")?;
        let sample = parse_record(text(record, "record")?, 1, "ffi", Casing::Preserve)?;
        *out = to_c(serde_json::to_string(&disambiguate(&sample)).map_err(DgrError::from)?);
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dgr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
