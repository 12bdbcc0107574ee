//! C ABI over the core library.
//!
//! Datasets and models cross the boundary as opaque handles that the caller
//! releases with the matching `*_free` function. Every fallible call returns
//! an [`FbStatus`]; on failure the message is kept per thread and can be
//! copied out with [`fb_last_error_message`]. Panics never unwind into C:
//! they are caught and reported as `FB_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use freqboot::checkpoint::Checkpoint;
use freqboot::data::{generate_synthetic, load_dataset, SyntheticSpec, TimeSeriesDataset};
use freqboot::eval::{compute_metrics, ClassifierModel};
use freqboot::nn::DualNetworkState;
use freqboot::objective::normalized_regression_loss;
use freqboot::Error;
use ndarray::ArrayView2;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FbStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Format = 4,
    Data = 5,
    NotFound = 6,
    Shape = 7,
    State = 8,
    Contract = 9,
    Divergence = 10,
    Io = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

/// Opaque dataset handle.
pub struct FbDataset {
    inner: TimeSeriesDataset,
}

/// Opaque handle to a pretrained online/target pair.
pub struct FbModel {
    state: DualNetworkState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> FbStatus {
    match err {
        Error::Config(_) | Error::Json(_) => FbStatus::Config,
        Error::Format(_) | Error::Csv(_) => FbStatus::Format,
        Error::Data(_) => FbStatus::Data,
        Error::NotFound(_) => FbStatus::NotFound,
        Error::Shape(_) => FbStatus::Shape,
        Error::State(_) => FbStatus::State,
        Error::Contract(_) => FbStatus::Contract,
        Error::Divergence(_) => FbStatus::Divergence,
        Error::Io { .. } => FbStatus::Io,
    }
}

struct Failure(FbStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn guard(f: impl FnOnce() -> Outcome<()>) -> FbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FbStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FbStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(FbStatus::NullArgument, format!("{what} is null"))
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Outcome<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(FbStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

/// # Safety
/// `p` is null or points to a live value of type `T`.
unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Outcome<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

/// # Safety
/// `p` is null or valid for writes of one `T`.
unsafe fn write_out<T>(p: *mut T, v: T, what: &str) -> Outcome<()> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

/// # Safety
/// `p` is null (only allowed when `n == 0`) or valid for reads of `n` values.
unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Outcome<&'a [T]> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `cap` bytes). Returns the full message length excluding the
/// terminator, or 0 when the last call succeeded.
///
/// # Safety
/// `buf` is null or valid for writes of `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn fb_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && cap > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Load split `split` ("train", "val" or "test") of the dataset directory
/// `dir`, z-scored with train statistics.
///
/// # Safety
/// `dir` and `split` are NUL-terminated strings; `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fb_dataset_load(dir: *const c_char, split: *const c_char, out: *mut *mut FbDataset) -> FbStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let split = str_arg(split, "split")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = load_dataset(&dir, split)?;
        write_out(out, Box::into_raw(Box::new(FbDataset { inner: ds })), "out")
    })
}

/// Generate the synthetic dataset. `spec_json` is a JSON object overriding
/// fields of the default generator settings, or null for the defaults.
///
/// # Safety
/// `spec_json` is null or a NUL-terminated string; `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fb_dataset_generate_synthetic(
    spec_json: *const c_char,
    seed: u64,
    out: *mut *mut FbDataset,
) -> FbStatus {
    guard(|| {
        let mut spec = serde_json::to_value(SyntheticSpec::default()).map_err(Error::from)?;
        if !spec_json.is_null() {
            let user: serde_json::Value = serde_json::from_str(str_arg(spec_json, "spec_json")?)
                .map_err(|e| Failure(FbStatus::Config, format!("spec_json: {e}")))?;
            freqboot::config::merge_json(&mut spec, &user);
        }
        let spec: SyntheticSpec =
            serde_json::from_value(spec).map_err(|e| Failure(FbStatus::Config, format!("spec_json: {e}")))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = generate_synthetic(&spec, seed)?;
        write_out(out, Box::into_raw(Box::new(FbDataset { inner: ds })), "out")
    })
}

/// Sample count, channels, window length and class count.
///
/// # Safety
/// `ds` is a live handle; each output pointer is null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fb_dataset_shape(
    ds: *const FbDataset,
    n: *mut usize,
    channels: *mut usize,
    length: *mut usize,
    num_classes: *mut usize,
) -> FbStatus {
    guard(|| {
        let d = &ref_arg(ds, "dataset")?.inner;
        for (p, v) in [(n, d.len()), (channels, d.channels()), (length, d.length()), (num_classes, d.num_classes)] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// Copy the `n` labels into `out` (capacity `cap`).
///
/// # Safety
/// `ds` is a live handle; `out` is valid for writes of `cap` values.
#[no_mangle]
pub unsafe extern "C" fn fb_dataset_labels(ds: *const FbDataset, out: *mut u64, cap: usize) -> FbStatus {
    guard(|| {
        let d = &ref_arg(ds, "dataset")?.inner;
        if cap < d.len() {
            return Err(Failure(FbStatus::BufferTooSmall, format!("need {} labels, buffer holds {cap}", d.len())));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        for (i, &l) in d.labels.iter().enumerate() {
            out.add(i).write(l as u64);
        }
        Ok(())
    })
}

/// Release a dataset handle. Null is ignored.
///
/// # Safety
/// `ds` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fb_dataset_free(ds: *mut FbDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Load a checkpoint written by the pretraining command.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fb_model_load(path: *const c_char, out: *mut *mut FbModel) -> FbStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let state = Checkpoint::load(&path)?.into_state()?;
        write_out(out, Box::into_raw(Box::new(FbModel { state })), "out")
    })
}

/// Flattened representation size `d` produced by [`fb_model_embed`].
///
/// # Safety
/// `model` is a live handle; `dim` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fb_model_embedding_dim(model: *const FbModel, dim: *mut usize) -> FbStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        write_out(dim, m.state.net.representation_len(), "dim")
    })
}

/// Eval-mode encoder representations of every sample, row-major `[n, d]`.
///
/// # Safety
/// `model` and `ds` are live handles; `out` is valid for writes of `cap`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn fb_model_embed(model: *const FbModel, ds: *const FbDataset, out: *mut f64, cap: usize) -> FbStatus {
    guard(|| {
        let st = &ref_arg(model, "model")?.state;
        let d = &ref_arg(ds, "dataset")?.inner;
        let spec = &st.net.spec;
        if d.channels() != spec.in_channels || d.length() != spec.length {
            return Err(Failure(
                FbStatus::Shape,
                format!(
                    "model expects [{}, {}] windows, dataset has [{}, {}]",
                    spec.in_channels,
                    spec.length,
                    d.channels(),
                    d.length()
                ),
            ));
        }
        let need = d.len() * st.net.representation_len();
        if cap < need {
            return Err(Failure(FbStatus::BufferTooSmall, format!("need {need} values, buffer holds {cap}")));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let e = ClassifierModel::new(&st.net, &st.online, d.num_classes.max(1), 0).embed(d);
        for (i, v) in e.iter().enumerate() {
            out.add(i).write(*v);
        }
        Ok(())
    })
}

/// Release a model handle. Null is ignored.
///
/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fb_model_free(model: *mut FbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Accuracy, macro-F1 and (when `per_class_f1` is non-null) the
/// `num_classes` per-class F1 scores of `n` predictions.
///
/// # Safety
/// `preds` and `labels` are valid for reads of `n` values; `per_class_f1` is
/// null or valid for writes of `num_classes` values.
#[no_mangle]
pub unsafe extern "C" fn fb_compute_metrics(
    preds: *const u64,
    labels: *const u64,
    n: usize,
    num_classes: usize,
    accuracy: *mut f64,
    macro_f1: *mut f64,
    per_class_f1: *mut f64,
) -> FbStatus {
    guard(|| {
        let p: Vec<usize> = slice_arg(preds, n, "preds")?.iter().map(|&v| v as usize).collect();
        let l: Vec<usize> = slice_arg(labels, n, "labels")?.iter().map(|&v| v as usize).collect();
        if let Some(bad) = p.iter().chain(&l).find(|&&v| v >= num_classes) {
            return Err(Failure(FbStatus::Contract, format!("class index {bad} out of range for {num_classes} classes")));
        }
        let m = compute_metrics(&p, &l, num_classes)?;
        write_out(accuracy, m.accuracy, "accuracy")?;
        write_out(macro_f1, m.macro_f1, "macro_f1")?;
        if !per_class_f1.is_null() {
            for (i, v) in m.per_class_f1.iter().enumerate() {
                per_class_f1.add(i).write(*v);
            }
        }
        Ok(())
    })
}

/// Mean over rows of `‖q/‖q‖ − g/‖g‖‖²` for row-major `[rows, dim]` inputs.
///
/// # Safety
/// `q` and `g` are valid for reads of `rows * dim` values; `out` is valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn fb_regression_loss(q: *const f64, g: *const f64, rows: usize, dim: usize, out: *mut f64) -> FbStatus {
    guard(|| {
        let n = rows
            .checked_mul(dim)
            .ok_or_else(|| Failure(FbStatus::Shape, "rows * dim overflows".into()))?;
        let qv = ArrayView2::from_shape((rows, dim), slice_arg(q, n, "q")?).map_err(|e| Failure(FbStatus::Shape, e.to_string()))?;
        let gv = ArrayView2::from_shape((rows, dim), slice_arg(g, n, "g")?).map_err(|e| Failure(FbStatus::Shape, e.to_string()))?;
        let loss = normalized_regression_loss(qv, gv)?;
        write_out(out, loss.value, "out")
    })
}
