//! C interface to brainenc.
//!
//! Every function returns a [`BrainencStatus`]. On failure the message is
//! available from [`brainenc_last_error`] on the same thread until the next
//! call. Handles are opaque; each `*_new`, `*_read`, `*_load` and
//! `*_predict` result must be released with the matching `*_free`.
//! Matrices cross the boundary as row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use brainenc::data::{
    read_bold_file, read_feature_file, write_bold_file, write_feature_file, BoldSeries, FeatureSeries, Modality,
    SourceData, Tr,
};
use brainenc::eval::pearson;
use brainenc::model::EncoderModel;
use brainenc::{Error, ErrorKind};
use faer::Mat;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BrainencStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8 or an out-of-range argument.
    InvalidArgument = 1,
    Config = 2,
    Data = 3,
    Numerical = 4,
    Io = 5,
    BufferTooSmall = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

pub struct BrainencFeatures(FeatureSeries);

pub struct BrainencBold(BoldSeries);

pub struct BrainencModel(EncoderModel);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(BrainencStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e.kind() {
            ErrorKind::Config => BrainencStatus::Config,
            ErrorKind::Data => BrainencStatus::Data,
            ErrorKind::Numerical => BrainencStatus::Numerical,
            ErrorKind::Io => BrainencStatus::Io,
        };
        Fail(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(BrainencStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BrainencStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BrainencStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            BrainencStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(invalid(format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    str_arg(p, "path").map(PathBuf::from)
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(format!("{name} is null")))
}

fn out_ptr<T>(p: *mut T) -> Result<(), Fail> {
    if p.is_null() {
        Err(invalid("output pointer is null"))
    } else {
        Ok(())
    }
}

unsafe fn matrix_arg(values: *const f64, rows: usize, cols: usize) -> Result<Mat<f64>, Fail> {
    if values.is_null() {
        return Err(invalid("values is null"));
    }
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| invalid("matrix size overflows"))?;
    let v = std::slice::from_raw_parts(values, n);
    Ok(Mat::from_fn(rows, cols, |i, j| v[i * cols + j]))
}

unsafe fn copy_out(m: &Mat<f64>, out: *mut f64, len: usize) -> Result<(), Fail> {
    let n = m.nrows() * m.ncols();
    if len < n {
        return Err(Fail(
            BrainencStatus::BufferTooSmall,
            format!("buffer holds {len} values, {n} needed"),
        ));
    }
    if out.is_null() {
        return Err(invalid("output buffer is null"));
    }
    let dst = std::slice::from_raw_parts_mut(out, n);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            dst[i * m.ncols() + j] = m[(i, j)];
        }
    }
    Ok(())
}

/// Message for the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call into this library.
#[no_mangle]
pub extern "C" fn brainenc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static, NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn brainenc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn brainenc_features_read(path: *const c_char, out: *mut *mut BrainencFeatures) -> BrainencStatus {
    guard(|| {
        out_ptr(out)?;
        let s = read_feature_file(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(BrainencFeatures(s)));
        Ok(())
    })
}

/// Builds a feature series from a `t_samples x dim` row-major buffer.
/// `modality` is 0 visual, 1 audio, 2 text.
///
/// # Safety
/// `values` must hold `t_samples * dim` doubles; `source_id` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn brainenc_features_new(
    modality: u8,
    tr_seconds: f64,
    source_id: *const c_char,
    values: *const f64,
    t_samples: usize,
    dim: usize,
    out: *mut *mut BrainencFeatures,
) -> BrainencStatus {
    guard(|| {
        out_ptr(out)?;
        let m = Modality::from_code(modality).map_err(|e| invalid(e.to_string()))?;
        let tr = Tr::from_seconds(tr_seconds).map_err(|e| invalid(e.to_string()))?;
        let id = str_arg(source_id, "source_id")?;
        let s = FeatureSeries::new(m, tr, id, matrix_arg(values, t_samples, dim)?)?;
        *out = Box::into_raw(Box::new(BrainencFeatures(s)));
        Ok(())
    })
}

/// # Safety
/// `h` must be a live handle; `t_samples` and `dim` writable.
#[no_mangle]
pub unsafe extern "C" fn brainenc_features_shape(
    h: *const BrainencFeatures,
    t_samples: *mut usize,
    dim: *mut usize,
) -> BrainencStatus {
    guard(|| {
        let s = &handle(h, "features")?.0;
        out_ptr(t_samples)?;
        out_ptr(dim)?;
        *t_samples = s.t_samples();
        *dim = s.dim();
        Ok(())
    })
}

/// # Safety
/// `h` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn brainenc_features_values(
    h: *const BrainencFeatures,
    out: *mut f64,
    len: usize,
) -> BrainencStatus {
    guard(|| copy_out(handle(h, "features")?.0.values(), out, len))
}

/// # Safety
/// `h` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn brainenc_features_write(h: *const BrainencFeatures, path: *const c_char) -> BrainencStatus {
    guard(|| {
        let s = &handle(h, "features")?.0;
        write_feature_file(s, path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn brainenc_features_free(h: *mut BrainencFeatures) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn brainenc_bold_read(path: *const c_char, out: *mut *mut BrainencBold) -> BrainencStatus {
    guard(|| {
        out_ptr(out)?;
        let s = read_bold_file(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(BrainencBold(s)));
        Ok(())
    })
}

/// Builds a BOLD series from a `t_samples x n_parcels` row-major buffer.
/// `subject_id` may be null for no subject.
///
/// # Safety
/// `values` must hold `t_samples * n_parcels` doubles; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn brainenc_bold_new(
    tr_seconds: f64,
    source_id: *const c_char,
    subject_id: *const c_char,
    values: *const f64,
    t_samples: usize,
    n_parcels: usize,
    out: *mut *mut BrainencBold,
) -> BrainencStatus {
    guard(|| {
        out_ptr(out)?;
        let tr = Tr::from_seconds(tr_seconds).map_err(|e| invalid(e.to_string()))?;
        let src = str_arg(source_id, "source_id")?;
        let subj = if subject_id.is_null() {
            ""
        } else {
            str_arg(subject_id, "subject_id")?
        };
        let s = BoldSeries::new(tr, src, subj, matrix_arg(values, t_samples, n_parcels)?)?;
        *out = Box::into_raw(Box::new(BrainencBold(s)));
        Ok(())
    })
}

/// # Safety
/// `h` must be a live handle; `t_samples` and `n_parcels` writable.
#[no_mangle]
pub unsafe extern "C" fn brainenc_bold_shape(
    h: *const BrainencBold,
    t_samples: *mut usize,
    n_parcels: *mut usize,
) -> BrainencStatus {
    guard(|| {
        let s = &handle(h, "bold")?.0;
        out_ptr(t_samples)?;
        out_ptr(n_parcels)?;
        *t_samples = s.t_samples();
        *n_parcels = s.n_parcels();
        Ok(())
    })
}

/// # Safety
/// `h` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn brainenc_bold_values(h: *const BrainencBold, out: *mut f64, len: usize) -> BrainencStatus {
    guard(|| copy_out(handle(h, "bold")?.0.values(), out, len))
}

/// # Safety
/// `h` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn brainenc_bold_write(h: *const BrainencBold, path: *const c_char) -> BrainencStatus {
    guard(|| {
        let s = &handle(h, "bold")?.0;
        write_bold_file(s, path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn brainenc_bold_free(h: *mut BrainencBold) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Loads a linear or attention bundle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn brainenc_model_load(path: *const c_char, out: *mut *mut BrainencModel) -> BrainencStatus {
    guard(|| {
        out_ptr(out)?;
        let m = EncoderModel::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(BrainencModel(m)));
        Ok(())
    })
}

/// `"linear"` or `"attention"`, static; null if `h` is null.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn brainenc_model_family(h: *const BrainencModel) -> *const c_char {
    match h.as_ref().map(|m| &m.0) {
        Some(EncoderModel::Linear(_)) => c"linear".as_ptr(),
        Some(EncoderModel::Attention(_)) => c"attention".as_ptr(),
        None => ptr::null(),
    }
}

/// # Safety
/// `h` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn brainenc_model_n_parcels(h: *const BrainencModel, out: *mut usize) -> BrainencStatus {
    guard(|| {
        let m = &handle(h, "model")?.0;
        out_ptr(out)?;
        *out = m.n_parcels();
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn brainenc_model_free(h: *mut BrainencModel) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Predicts BOLD for one source from its feature series, one per modality
/// the model was fit on. The result has no subject and carries the source
/// id and TR of the first series.
///
/// # Safety
/// `features` must point to `n_features` live handles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn brainenc_model_predict(
    h: *const BrainencModel,
    features: *const *const BrainencFeatures,
    n_features: usize,
    out: *mut *mut BrainencBold,
) -> BrainencStatus {
    guard(|| {
        let m = &handle(h, "model")?.0;
        out_ptr(out)?;
        if features.is_null() || n_features == 0 {
            return Err(invalid("no feature series given"));
        }
        let series = std::slice::from_raw_parts(features, n_features)
            .iter()
            .map(|&f| handle(f, "feature handle").map(|f| f.0.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let source = SourceData::new(series, None)?;
        let (_, pred) = m.predict_source(&source)?;
        let tr = source.features()[0].tr();
        let bold = BoldSeries::new(tr, source.source_id(), "", pred)?;
        *out = Box::into_raw(Box::new(BrainencBold(bold)));
        Ok(())
    })
}

/// Pearson correlation of two length-`n` vectors.
///
/// # Safety
/// `pred` and `actual` must hold `n` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn brainenc_pearson(
    pred: *const f64,
    actual: *const f64,
    n: usize,
    out: *mut f64,
) -> BrainencStatus {
    guard(|| {
        out_ptr(out)?;
        if pred.is_null() || actual.is_null() {
            return Err(invalid("input vector is null"));
        }
        let a = std::slice::from_raw_parts(pred, n);
        let b = std::slice::from_raw_parts(actual, n);
        *out = pearson(a, b)?;
        Ok(())
    })
}
