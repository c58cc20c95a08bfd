//! C ABI for fslab.
//!
//! Every object crosses the boundary as an opaque handle created by a
//! `fslab_*_new`/`_load`/`_generate` call and released by the matching
//! `_free`. Functions return an [`FslabStatus`]; on failure
//! [`fslab_last_error`] describes the error on the calling thread. Strings
//! returned to the caller are released with [`fslab_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use fslab::cli::{cmd_intensity_with, intensity_csv, run_with};
use fslab::config::{parse_text, RunConfig};
use fslab::episodes::{generate_synthetic, load_dataset, save_dataset, Dataset, SynthConfig};
use fslab::evaluate::Report;
use fslab::finetune::pretrain;
use fslab::model::{load_checkpoint, save_checkpoint, Network};
use fslab::{Error, RngStream};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FslabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Format = 4,
    Io = 5,
    InsufficientData = 6,
    InfeasibleMix = 7,
    Runtime = 8,
    Panic = 9,
}

pub struct FslabDataset(Dataset);
pub struct FslabModel(Network);
pub struct FslabConfig(RunConfig);
pub struct FslabReport {
    report: Report,
    csv: String,
    json: String,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> FslabStatus {
    match err {
        Error::InvalidArgument(_) | Error::ShapeMismatch { .. } | Error::LabelOutOfRange { .. } => {
            FslabStatus::InvalidArgument
        }
        Error::Config(_) => FslabStatus::Config,
        Error::Format(_) => FslabStatus::Format,
        Error::Io { .. } => FslabStatus::Io,
        Error::InsufficientData(_) => FslabStatus::InsufficientData,
        Error::InfeasibleMix { .. } => FslabStatus::InfeasibleMix,
        Error::BatchTooSmall(_) | Error::Episode { .. } => FslabStatus::Runtime,
    }
}

struct Fail(FslabStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(FslabStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FslabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            FslabStatus::Ok
        }
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
            FslabStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(FslabStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = CString::new(s)
        .map_err(|_| Fail(FslabStatus::Runtime, "string holds a NUL byte".into()))?
        .into_raw();
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next fslab call on the same thread.
#[no_mangle]
pub extern "C" fn fslab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `s` must come from an fslab function, or be null.
#[no_mangle]
pub unsafe extern "C" fn fslab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates a synthetic preset (`source-a`, `target-shifted`,
/// `target-near`). `height`/`width` of 0 keep the preset size.
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fslab_dataset_generate(
    preset: *const c_char,
    seed: u64,
    height: usize,
    width: usize,
    out: *mut *mut FslabDataset,
) -> FslabStatus {
    guard(|| {
        let mut cfg = SynthConfig::preset(str_arg(preset, "preset")?)?;
        if height > 0 && width > 0 {
            cfg = cfg.with_size(height, width);
        }
        cfg.validate()?;
        put(out, FslabDataset(generate_synthetic(&cfg, &RngStream::new(seed))?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fslab_dataset_load(path: *const c_char, out: *mut *mut FslabDataset) -> FslabStatus {
    guard(|| put(out, FslabDataset(load_dataset(Path::new(str_arg(path, "path")?))?)))
}

/// # Safety
/// `ds` must be a live dataset handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fslab_dataset_save(ds: *const FslabDataset, path: *const c_char) -> FslabStatus {
    guard(|| Ok(save_dataset(&handle(ds, "dataset")?.0, Path::new(str_arg(path, "path")?))?))
}

/// Number of examples; 0 for a null handle.
///
/// # Safety
/// `ds` must be a live dataset handle or null.
#[no_mangle]
pub unsafe extern "C" fn fslab_dataset_len(ds: *const FslabDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `ds` must be a live dataset handle or null.
#[no_mangle]
pub unsafe extern "C" fn fslab_dataset_n_classes(ds: *const FslabDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.n_classes())
}

/// # Safety
/// `ds` must come from fslab and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fslab_dataset_free(ds: *mut FslabDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Empty configuration holding the defaults.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fslab_config_new(out: *mut *mut FslabConfig) -> FslabStatus {
    guard(|| put(out, FslabConfig(RunConfig::default())))
}

/// Configuration from `key = value` text (or a summary JSON) over the defaults.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fslab_config_parse(text: *const c_char, out: *mut *mut FslabConfig) -> FslabStatus {
    guard(|| {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_text(str_arg(text, "text")?)? {
            cfg.set(&k, &v)?;
        }
        put(out, FslabConfig(cfg))
    })
}

/// # Safety
/// `cfg` must be a live config handle; `key`, `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn fslab_config_set(
    cfg: *mut FslabConfig,
    key: *const c_char,
    value: *const c_char,
) -> FslabStatus {
    guard(|| {
        let c = cfg.as_mut().ok_or_else(|| null("config"))?;
        Ok(c.0.set(str_arg(key, "key")?, str_arg(value, "value")?)?)
    })
}

/// # Safety
/// `cfg` must come from fslab and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fslab_config_free(cfg: *mut FslabConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fslab_model_load(path: *const c_char, out: *mut *mut FslabModel) -> FslabStatus {
    guard(|| put(out, FslabModel(load_checkpoint(Path::new(str_arg(path, "path")?))?)))
}

/// # Safety
/// `model` must be a live model handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fslab_model_save(model: *const FslabModel, path: *const c_char) -> FslabStatus {
    guard(|| Ok(save_checkpoint(&handle(model, "model")?.0, Path::new(str_arg(path, "path")?))?))
}

/// Pre-trains on `source` with the `model.*`, `pretrain.*` and `run.seed`
/// keys of `cfg`.
///
/// # Safety
/// Handles must be live; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fslab_model_pretrain(
    cfg: *const FslabConfig,
    source: *const FslabDataset,
    out: *mut *mut FslabModel,
) -> FslabStatus {
    guard(|| {
        let c = &handle(cfg, "config")?.0;
        let pre = pretrain(&handle(source, "dataset")?.0, &c.pretrain()?, &RngStream::new(c.seed()?))?;
        put(out, FslabModel(pre.net))
    })
}

/// # Safety
/// `model` must come from fslab and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fslab_model_free(model: *mut FslabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs the configured experiment on `target` starting from `model`'s
/// extractor. Output is identical for every `workers >= 1`.
///
/// # Safety
/// Handles must be live; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fslab_run(
    cfg: *const FslabConfig,
    target: *const FslabDataset,
    model: *const FslabModel,
    workers: usize,
    out: *mut *mut FslabReport,
) -> FslabStatus {
    guard(|| {
        let c = &handle(cfg, "config")?.0;
        let art = run_with(c, &handle(target, "dataset")?.0, &handle(model, "model")?.0.extractor, workers)?;
        put(
            out,
            FslabReport {
                report: art.report,
                csv: art.csv,
                json: art.json,
            },
        )
    })
}

/// # Safety
/// `r` must be a live report handle or null (NaN).
#[no_mangle]
pub unsafe extern "C" fn fslab_report_mean(r: *const FslabReport) -> f64 {
    r.as_ref().map_or(f64::NAN, |r| r.report.mean)
}

/// # Safety
/// `r` must be a live report handle or null (NaN).
#[no_mangle]
pub unsafe extern "C" fn fslab_report_ci95(r: *const FslabReport) -> f64 {
    r.as_ref().map_or(f64::NAN, |r| r.report.ci95)
}

/// # Safety
/// `r` must be a live report handle or null (0).
#[no_mangle]
pub unsafe extern "C" fn fslab_report_episodes(r: *const FslabReport) -> usize {
    r.as_ref().map_or(0, |r| r.report.rows.len())
}

/// Per-episode CSV; free with [`fslab_string_free`].
///
/// # Safety
/// `r` must be a live report handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fslab_report_csv(r: *const FslabReport, out: *mut *mut c_char) -> FslabStatus {
    guard(|| put_string(out, &handle(r, "report")?.csv))
}

/// Summary JSON; free with [`fslab_string_free`].
///
/// # Safety
/// `r` must be a live report handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fslab_report_json(r: *const FslabReport, out: *mut *mut c_char) -> FslabStatus {
    guard(|| put_string(out, &handle(r, "report")?.json))
}

/// # Safety
/// `r` must come from fslab and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fslab_report_free(r: *mut FslabReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Intensity CSV for the `intensity.*` keys of `cfg`, subset drawn from
/// `source`; free with [`fslab_string_free`].
///
/// # Safety
/// Handles must be live; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fslab_intensity(
    cfg: *const FslabConfig,
    source: *const FslabDataset,
    model: *const FslabModel,
    out: *mut *mut c_char,
) -> FslabStatus {
    guard(|| {
        let c = &handle(cfg, "config")?.0;
        let reports = cmd_intensity_with(c, &handle(source, "dataset")?.0, &handle(model, "model")?.0.extractor)?;
        put_string(out, &intensity_csv(&reports))
    })
}
