//! C ABI over ivx-core: opaque model handles, status codes and a per-thread error message.
//!
//! Every function returns an [`IvxStatus`]; on failure the message is available
//! from [`ivx_last_error`] until the next failing call on the same thread.
//! Matrices are passed row-major. Handles are released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};

use ivx_core::classify::Classifier;
use ivx_core::error::{Error, ExitStatus};
use ivx_core::eval::{mcc, roc_auc, BinaryCounts};
use ivx_core::frontend::{extract_features, prepare_for_modeling, read_wav, FeatureSequence, FrontendConfig};
use ivx_core::gmm::{log_likelihood, DiagonalGmm};
use ivx_core::sae::SaeArtifact;
use ivx_core::tvspace::{accumulate_stats, center_stats, extract_ivector, TotalVariabilityModel};

/// Status codes. Values 2–4 match the `ivx` CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IvxStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    /// An output buffer has the wrong length.
    BufferSize = 5,
    InvalidUtf8 = 6,
    Panic = 7,
}

/// Diagonal-covariance GMM (UBM).
pub struct IvxGmm(DiagonalGmm);

/// Total-variability model together with its UBM.
pub struct IvxTvModel(TotalVariabilityModel);

/// Trained auto-encoder with its input scaler.
pub struct IvxSae(SaeArtifact);

pub struct IvxClassifier {
    model: Classifier,
    names: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> IvxStatus {
    match e.exit_status() {
        ExitStatus::Config => IvxStatus::Config,
        ExitStatus::Data => IvxStatus::Data,
        ExitStatus::Numeric => IvxStatus::Numeric,
    }
}

struct Fail(IvxStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> IvxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IvxStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            IvxStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(IvxStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(IvxStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, expected: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len != expected {
        return Err(Fail(IvxStatus::BufferSize, format!("`{what}` has length {len}, expected {expected}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ivx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null if none. Owned by the library.
#[no_mangle]
pub extern "C" fn ivx_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ivx_gmm_load(path: *const c_char, out: *mut *mut IvxGmm) -> IvxStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        put(out, IvxGmm(DiagonalGmm::load(&p)?), "out")
    })
}

/// # Safety
/// `gmm` must come from `ivx_gmm_load` (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ivx_gmm_free(gmm: *mut IvxGmm) {
    if !gmm.is_null() {
        drop(Box::from_raw(gmm));
    }
}

/// # Safety
/// `gmm` must be a live handle; `components` and `dim` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ivx_gmm_shape(gmm: *const IvxGmm, components: *mut usize, dim: *mut usize) -> IvxStatus {
    guard(|| {
        let g = &handle(gmm, "gmm")?.0;
        if components.is_null() || dim.is_null() {
            return Err(null("components/dim"));
        }
        *components = g.components();
        *dim = g.dim();
        Ok(())
    })
}

/// Total log-likelihood of `n_frames` row-major frames of width `dim`.
///
/// # Safety
/// `frames` must hold `n_frames * dim` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ivx_gmm_log_likelihood(
    gmm: *const IvxGmm,
    frames: *const f64,
    n_frames: usize,
    dim: usize,
    out: *mut f64,
) -> IvxStatus {
    guard(|| {
        let g = &handle(gmm, "gmm")?.0;
        let data = slice_arg(frames, n_frames * dim, "frames")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = log_likelihood(g, &DMatrix::from_row_slice(n_frames, dim, data))?;
        Ok(())
    })
}

/// Loads a T matrix and the UBM it was trained against.
///
/// # Safety
/// Both paths must be NUL-terminated strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ivx_tv_load(tv_path: *const c_char, ubm_path: *const c_char, out: *mut *mut IvxTvModel) -> IvxStatus {
    guard(|| {
        let tv = path_arg(tv_path, "tv_path")?;
        let ubm = DiagonalGmm::load(&path_arg(ubm_path, "ubm_path")?)?;
        put(out, IvxTvModel(TotalVariabilityModel::load(&tv, ubm)?), "out")
    })
}

/// # Safety
/// `tv` must come from `ivx_tv_load` (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ivx_tv_free(tv: *mut IvxTvModel) {
    if !tv.is_null() {
        drop(Box::from_raw(tv));
    }
}

/// # Safety
/// `tv` must be a live handle and `rank` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ivx_tv_rank(tv: *const IvxTvModel, rank: *mut usize) -> IvxStatus {
    guard(|| {
        let m = &handle(tv, "tv")?.0;
        if rank.is_null() {
            return Err(null("rank"));
        }
        *rank = m.rank();
        Ok(())
    })
}

fn ivector_into(m: &TotalVariabilityModel, fs: &FeatureSequence, out: &mut [f64]) -> Result<(), Fail> {
    let stats = center_stats(&accumulate_stats(m.ubm(), fs)?, m.ubm())?;
    out.copy_from_slice(extract_ivector(m, &stats)?.w.as_slice());
    Ok(())
}

/// i-vector of already-normalized feature frames (all treated as voiced).
///
/// # Safety
/// `frames` must hold `n_frames * dim` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn ivx_tv_extract_frames(
    tv: *const IvxTvModel,
    frames: *const f64,
    n_frames: usize,
    dim: usize,
    out: *mut f64,
    out_len: usize,
) -> IvxStatus {
    guard(|| {
        let m = &handle(tv, "tv")?.0;
        let data = slice_arg(frames, n_frames * dim, "frames")?;
        let dest = out_slice(out, out_len, m.rank(), "out")?;
        let fs = FeatureSequence::from_parts(DMatrix::from_row_slice(n_frames, dim, data), vec![true; n_frames], true)?;
        ivector_into(m, &fs, dest)
    })
}

/// i-vector of a WAV file through the default front end.
///
/// # Safety
/// `wav_path` must be a NUL-terminated string and `out` hold `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn ivx_tv_extract_wav(tv: *const IvxTvModel, wav_path: *const c_char, out: *mut f64, out_len: usize) -> IvxStatus {
    guard(|| {
        let m = &handle(tv, "tv")?.0;
        let p = path_arg(wav_path, "wav_path")?;
        let dest = out_slice(out, out_len, m.rank(), "out")?;
        let cfg = FrontendConfig::default();
        let fs = prepare_for_modeling(&extract_features(&read_wav(&p)?, &cfg)?, &cfg)?;
        ivector_into(m, &fs, dest)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ivx_sae_load(path: *const c_char, out: *mut *mut IvxSae) -> IvxStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        put(out, IvxSae(SaeArtifact::load(&p)?), "out")
    })
}

/// # Safety
/// `sae` must come from `ivx_sae_load` (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ivx_sae_free(sae: *mut IvxSae) {
    if !sae.is_null() {
        drop(Box::from_raw(sae));
    }
}

/// # Safety
/// `sae` must be a live handle; `input_dim` and `code_dim` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ivx_sae_dims(sae: *const IvxSae, input_dim: *mut usize, code_dim: *mut usize) -> IvxStatus {
    guard(|| {
        let s = &handle(sae, "sae")?.0;
        if input_dim.is_null() || code_dim.is_null() {
            return Err(null("input_dim/code_dim"));
        }
        *input_dim = s.model.input_dim();
        *code_dim = s.model.code_dim();
        Ok(())
    })
}

/// # Safety
/// `input` must hold `input_len` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn ivx_sae_encode(
    sae: *const IvxSae,
    input: *const f64,
    input_len: usize,
    out: *mut f64,
    out_len: usize,
) -> IvxStatus {
    guard(|| {
        let s = &handle(sae, "sae")?.0;
        let x = slice_arg(input, input_len, "input")?;
        let dest = out_slice(out, out_len, s.model.code_dim(), "out")?;
        dest.copy_from_slice(s.encode(&DVector::from_column_slice(x))?.as_slice());
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ivx_classifier_load(path: *const c_char, out: *mut *mut IvxClassifier) -> IvxStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        let model = Classifier::load(&p)?;
        let names = model
            .codec()
            .classes()
            .iter()
            .map(|c| CString::new(c.as_str()).map_err(|_| Fail(IvxStatus::Data, "class name contains NUL".into())))
            .collect::<Result<_, _>>()?;
        put(out, IvxClassifier { model, names }, "out")
    })
}

/// # Safety
/// `clf` must come from `ivx_classifier_load` (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ivx_classifier_free(clf: *mut IvxClassifier) {
    if !clf.is_null() {
        drop(Box::from_raw(clf));
    }
}

/// # Safety
/// `clf` must be a live handle and `n` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ivx_classifier_num_classes(clf: *const IvxClassifier, n: *mut usize) -> IvxStatus {
    guard(|| {
        let c = handle(clf, "clf")?;
        if n.is_null() {
            return Err(null("n"));
        }
        *n = c.names.len();
        Ok(())
    })
}

/// Name of class `index`; null when out of range. Valid while the handle lives.
///
/// # Safety
/// `clf` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ivx_classifier_class_name(clf: *const IvxClassifier, index: usize) -> *const c_char {
    match clf.as_ref().and_then(|c| c.names.get(index)) {
        Some(n) => n.as_ptr(),
        None => std::ptr::null(),
    }
}

/// Per-class scores into `out` and the arg-max class into `predicted`.
///
/// # Safety
/// `input` must hold `input_len` values, `out` `out_len` values; `predicted` may be null.
#[no_mangle]
pub unsafe extern "C" fn ivx_classifier_score(
    clf: *const IvxClassifier,
    input: *const f64,
    input_len: usize,
    out: *mut f64,
    out_len: usize,
    predicted: *mut usize,
) -> IvxStatus {
    guard(|| {
        let c = handle(clf, "clf")?;
        let x = slice_arg(input, input_len, "input")?;
        let dest = out_slice(out, out_len, c.names.len(), "out")?;
        let s = c.model.score(&DVector::from_column_slice(x))?;
        dest.copy_from_slice(s.as_slice());
        if !predicted.is_null() {
            *predicted = ivx_core::classify::argmax(s.as_slice());
        }
        Ok(())
    })
}

/// Area under the ROC curve; `labels[i]` nonzero marks a positive.
///
/// # Safety
/// `scores` and `labels` must each hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ivx_roc_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> IvxStatus {
    guard(|| {
        let s = slice_arg(scores, n, "scores")?;
        let l: Vec<bool> = slice_arg(labels, n, "labels")?.iter().map(|&v| v != 0).collect();
        if out.is_null() {
            return Err(null("out"));
        }
        *out = roc_auc(s, &l)?.auc;
        Ok(())
    })
}

/// Matthews correlation coefficient of a confusion count; 0 when undefined.
#[no_mangle]
pub extern "C" fn ivx_mcc(tp: u64, fp: u64, tn: u64, fn_: u64) -> f64 {
    mcc(&BinaryCounts { tp, fp, tn, fn_ })
}
