//! C ABI over the core library.
//!
//! Every fallible function returns a [`PnnStatus`]; on failure the message
//! is available from [`pnn_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use pnn::compute::ops::sigmoid;
use pnn::compute::ParamStore;
use pnn::config::Config;
use pnn::data::{Dataset, EncodedInstance};
use pnn::featuremap::FeatureMap;
use pnn::metrics::{auc, mean_logloss};
use pnn::models::Model;
use pnn::optim::{gstar, long_tail_gradient};
use pnn::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Shape = 5,
    NonFinite = 6,
    Config = 7,
    Panic = 8,
}

/// A loaded feature map.
pub struct PnnFeatureMap {
    map: FeatureMap,
}

/// A model with its trained parameters.
pub struct PnnModel {
    model: Model,
    params: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PnnStatus {
    match e {
        Error::Io { .. } => PnnStatus::Io,
        Error::Parse { .. } => PnnStatus::Parse,
        Error::Shape(_) | Error::IndexOutOfRange { .. } => PnnStatus::Shape,
        Error::NonFinite(_) | Error::Diverged { .. } => PnnStatus::NonFinite,
        Error::Config { .. } => PnnStatus::Config,
        _ => PnnStatus::InvalidArgument,
    }
}

struct Failure(PnnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(PnnStatus::NullPointer, format!("`{what}` is null"))
}

/// Run `body`, record any failure or panic and map it to a status.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> PnnStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error(String::new());
            PnnStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PnnStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PnnStatus::InvalidArgument, format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn open(path: &PathBuf) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).map_err(|e| {
        Error::Io {
            path: path.clone(),
            source: e,
        }
        .into()
    })
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn pnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a feature-map file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pnn_featuremap_load(
    path: *const c_char,
    out: *mut *mut PnnFeatureMap,
) -> PnnStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let map = FeatureMap::read(open(&path)?)?;
        write_out(out, Box::into_raw(Box::new(PnnFeatureMap { map })), "out")
    })
}

/// Number of fields, or 0 for a null handle.
///
/// # Safety
/// `map` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pnn_featuremap_num_fields(map: *const PnnFeatureMap) -> usize {
    map.as_ref().map_or(0, |m| m.map.num_fields())
}

/// Size of field `field`, including its `other` category.
///
/// # Safety
/// `map` must be null or a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pnn_featuremap_field_size(
    map: *const PnnFeatureMap,
    field: usize,
    out: *mut usize,
) -> PnnStatus {
    guard(|| {
        let m = map.as_ref().ok_or_else(|| null("map"))?;
        let size = m.map.field_sizes().get(field).copied().ok_or_else(|| {
            Failure(
                PnnStatus::InvalidArgument,
                format!("field {field} out of range"),
            )
        })?;
        write_out(out, size, "out")
    })
}

/// # Safety
/// `map` must be null or a handle from [`pnn_featuremap_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pnn_featuremap_free(map: *mut PnnFeatureMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Load a checkpoint. The architecture comes from the run config at
/// `config_path` (null for defaults) and the field sizes from `map`.
///
/// # Safety
/// Strings must be NUL-terminated, `map` a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pnn_model_load(
    config_path: *const c_char,
    map: *const PnnFeatureMap,
    checkpoint_path: *const c_char,
    out: *mut *mut PnnModel,
) -> PnnStatus {
    guard(|| {
        let config = if config_path.is_null() {
            Config::default()
        } else {
            Config::load(&path_arg(config_path, "config_path")?)?
        };
        let map = map.as_ref().ok_or_else(|| null("map"))?;
        let model = Model::new(config.model_spec()?, &map.map.field_sizes())?;
        let ckpt = path_arg(checkpoint_path, "checkpoint_path")?;
        let (params, _) = model.load_checkpoint(open(&ckpt)?)?;
        write_out(
            out,
            Box::into_raw(Box::new(PnnModel { model, params })),
            "out",
        )
    })
}

/// Number of input fields, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pnn_model_num_fields(model: *const PnnModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.num_fields())
}

/// Click probabilities for `count` instances. `indices` holds one category
/// index per field, row-major `[count × num_fields]`; `out` receives
/// `count` values.
///
/// # Safety
/// `indices` must hold `count * num_fields` values and `out` `count`.
#[no_mangle]
pub unsafe extern "C" fn pnn_model_predict(
    model: *const PnnModel,
    indices: *const usize,
    count: usize,
    num_fields: usize,
    out: *mut f64,
) -> PnnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if num_fields != m.model.num_fields() {
            return Err(Failure(
                PnnStatus::Shape,
                format!(
                    "{num_fields} fields given, model has {}",
                    m.model.num_fields()
                ),
            ));
        }
        let len = count
            .checked_mul(num_fields)
            .ok_or_else(|| Failure(PnnStatus::InvalidArgument, "count overflows".into()))?;
        let indices = slice_arg(indices, len, "indices")?;
        if count == 0 {
            return Ok(());
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let mut data = Dataset::new(m.model.field_sizes().to_vec());
        for row in indices.chunks(num_fields) {
            data.push(&EncodedInstance::single(0, row))?;
        }
        let rows: Vec<usize> = (0..count).collect();
        let logits = m.model.predict(&m.params, &data.batch(&rows))?;
        let out = std::slice::from_raw_parts_mut(out, count);
        for (o, z) in out.iter_mut().zip(logits) {
            *o = sigmoid(z);
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`pnn_model_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pnn_model_free(model: *mut PnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Rank-based AUC with ties averaged. Labels are 0 or 1.
///
/// # Safety
/// `scores` and `labels` must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pnn_auc(
    scores: *const f64,
    labels: *const u8,
    len: usize,
    out: *mut f64,
) -> PnnStatus {
    guard(|| {
        let v = auc(
            slice_arg(scores, len, "scores")?,
            slice_arg(labels, len, "labels")?,
        )?;
        write_out(out, v, "out")
    })
}

/// Mean log loss of logits.
///
/// # Safety
/// `logits` and `labels` must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pnn_logloss(
    logits: *const f64,
    labels: *const u8,
    len: usize,
    out: *mut f64,
) -> PnnStatus {
    guard(|| {
        let v = mean_logloss(
            slice_arg(logits, len, "logits")?,
            slice_arg(labels, len, "labels")?,
        )?;
        write_out(out, v, "out")
    })
}

/// Smallest gradient Adam does not shrink at step `t`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pnn_gstar(eps: f64, beta2: f64, t: u64, out: *mut f64) -> PnnStatus {
    guard(|| write_out(out, gstar(eps, beta2, t)?, "out"))
}

/// Adam estimate `window` steps after a lone gradient `g_t` at step `t`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pnn_long_tail_gradient(
    g_t: f64,
    t: u64,
    window: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    out: *mut f64,
) -> PnnStatus {
    guard(|| {
        write_out(
            out,
            long_tail_gradient(g_t, t, window, beta1, beta2, eps)?,
            "out",
        )
    })
}

#[doc(hidden)]
pub fn last_error_string() -> String {
    // SAFETY: the pointer refers to the thread-local buffer, alive here.
    unsafe { CStr::from_ptr(pnn_last_error()) }
        .to_string_lossy()
        .into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    #[test]
    fn null_pointers_are_reported() {
        let s = unsafe { pnn_gstar(1e-8, 0.999, 1, ptr::null_mut()) };
        assert_eq!(s, PnnStatus::NullPointer);
        assert!(last_error_string().contains("out"));
        let mut v = 0.0;
        assert_eq!(unsafe { pnn_gstar(1e-8, 0.999, 1, &mut v) }, PnnStatus::Ok);
        assert_eq!(v, 1e-8);
        assert_eq!(last_error_string(), "");
    }
}
