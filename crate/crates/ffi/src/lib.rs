//! C ABI over `riskmeta`.
//!
//! Every function returns an [`RmStatus`]. On failure a thread-local message is
//! kept and can be copied out with [`rm_last_error`]. Handles are opaque and
//! owned by the caller, who releases them with the matching `*_free`.
//! Results are written through out-pointers; passing null for a required
//! pointer yields [`RmStatus::NullPointer`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use riskmeta::data::{load_idx, DataError, LabeledDataset};
use riskmeta::harness::{self, HarnessError};
use riskmeta::learned::PhiParams;
use riskmeta::risk::RiskFunctional;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    /// A risk functional spec or evaluation was rejected.
    Risk = 4,
    /// Loss vector length does not match the head's batch size.
    LengthMismatch = 5,
    Io = 6,
    IdxBadMagic = 7,
    IdxCountMismatch = 8,
    IdxTruncated = 9,
    /// Other dataset validation failures.
    Data = 10,
    /// The experiment config failed to parse or validate.
    Config = 11,
    /// The experiment ran but at least one seed failed.
    SeedsFailed = 12,
    /// The output buffer is smaller than required.
    BufferTooSmall = 13,
    /// Training, evaluation or reporting failed outside a single seed.
    Run = 14,
    Panic = 15,
}

/// A parsed risk functional, e.g. `cvar:0.1`.
pub struct RmRisk(RiskFunctional);

/// A learned risk head: softmax weights over descending-sorted batch losses.
pub struct RmHead(PhiParams);

/// A labeled dataset loaded from an IDX pair.
pub struct RmDataset(LabeledDataset);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: RmStatus, msg: impl Into<String>) -> RmStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn guard(f: impl FnOnce() -> RmStatus) -> RmStatus {
    LAST_ERROR.with(|e| e.borrow_mut().clear());
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(RmStatus::Panic, msg)
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, RmStatus> {
    if p.is_null() {
        return Err(fail(RmStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|e| fail(RmStatus::InvalidUtf8, format!("{name}: {e}")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], RmStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(RmStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, RmStatus> {
    p.as_mut().ok_or_else(|| fail(RmStatus::NullPointer, format!("{name} is null")))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, RmStatus> {
    p.as_ref().ok_or_else(|| fail(RmStatus::NullPointer, "handle is null"))
}

fn data_status(e: &DataError) -> RmStatus {
    match e {
        DataError::BadMagic { .. } => RmStatus::IdxBadMagic,
        DataError::CountMismatch { .. } => RmStatus::IdxCountMismatch,
        DataError::Truncated { .. } => RmStatus::IdxTruncated,
        DataError::Io(_) => RmStatus::Io,
        _ => RmStatus::Data,
    }
}

fn copy_out<T: Copy>(src: &[T], dst: *mut T, cap: usize) -> RmStatus {
    if cap < src.len() {
        return fail(RmStatus::BufferTooSmall, format!("buffer holds {cap}, need {}", src.len()));
    }
    if src.is_empty() {
        return RmStatus::Ok;
    }
    if dst.is_null() {
        return fail(RmStatus::NullPointer, "output buffer is null");
    }
    unsafe { ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len()) };
    RmStatus::Ok
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to fit, into `buf`. Returns the full message length in bytes
/// (excluding the terminator); pass a null `buf` to query it.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rm_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Parses a risk functional spec such as `ev`, `cvar:0.1`, `icvar:0.1`,
/// `trimmed:0.1`, `meanvar:1.0` or `human:2.0`.
///
/// # Safety
/// `spec` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_risk_new(spec: *const c_char, out: *mut *mut RmRisk) -> RmStatus {
    guard(|| {
        let out = tri!(out_arg(out, "out"));
        let spec = tri!(str_arg(spec, "spec"));
        let rho = match spec.parse::<RiskFunctional>().and_then(|r| r.validate().map(|_| r)) {
            Ok(r) => r,
            Err(e) => return fail(RmStatus::Risk, e.to_string()),
        };
        *out = Box::into_raw(Box::new(RmRisk(rho)));
        RmStatus::Ok
    })
}

/// Evaluates the functional on `n` losses.
///
/// # Safety
/// `risk` must come from [`rm_risk_new`]; `losses` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn rm_risk_evaluate(
    risk: *const RmRisk,
    losses: *const f64,
    n: usize,
    out: *mut f64,
) -> RmStatus {
    guard(|| {
        let risk = tri!(handle(risk));
        let out = tri!(out_arg(out, "out"));
        let losses = tri!(slice_arg(losses, n, "losses"));
        match risk.0.evaluate(losses) {
            Ok(v) => {
                *out = v;
                RmStatus::Ok
            }
            Err(e) => fail(RmStatus::Risk, e.to_string()),
        }
    })
}

/// # Safety
/// `risk` must be null or come from [`rm_risk_new`], and not be used again.
#[no_mangle]
pub unsafe extern "C" fn rm_risk_free(risk: *mut RmRisk) {
    if !risk.is_null() {
        drop(Box::from_raw(risk));
    }
}

/// A head with uniform weights over `batch_size` sorted positions.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_head_new(batch_size: usize, out: *mut *mut RmHead) -> RmStatus {
    guard(|| {
        let out = tri!(out_arg(out, "out"));
        match PhiParams::init(batch_size) {
            Ok(p) => {
                *out = Box::into_raw(Box::new(RmHead(p)));
                RmStatus::Ok
            }
            Err(e) => fail(RmStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// A head from `n` pre-softmax logits; index 0 weighs the largest loss.
///
/// # Safety
/// `logits` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_head_from_logits(logits: *const f64, n: usize, out: *mut *mut RmHead) -> RmStatus {
    guard(|| {
        let out = tri!(out_arg(out, "out"));
        let logits = tri!(slice_arg(logits, n, "logits"));
        if logits.iter().any(|v| !v.is_finite()) {
            return fail(RmStatus::InvalidArgument, "logits must be finite");
        }
        match PhiParams::from_logits(logits.to_vec()) {
            Ok(p) => {
                *out = Box::into_raw(Box::new(RmHead(p)));
                RmStatus::Ok
            }
            Err(e) => fail(RmStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Number of sorted positions the head weighs.
///
/// # Safety
/// `head` must come from a head constructor; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_head_batch_size(head: *const RmHead, out: *mut usize) -> RmStatus {
    guard(|| {
        let head = tri!(handle(head));
        *tri!(out_arg(out, "out")) = head.0.batch_size();
        RmStatus::Ok
    })
}

/// Copies the softmax weights (largest-loss position first) into `buf`.
///
/// # Safety
/// `buf` must point to `cap` writable values.
#[no_mangle]
pub unsafe extern "C" fn rm_head_weights(head: *const RmHead, buf: *mut f64, cap: usize) -> RmStatus {
    guard(|| {
        let head = tri!(handle(head));
        copy_out(&head.0.weights(), buf, cap)
    })
}

/// Sorts `n` losses descending and returns their weighted sum.
///
/// # Safety
/// `losses` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_head_apply(head: *const RmHead, losses: *const f64, n: usize, out: *mut f64) -> RmStatus {
    guard(|| {
        let head = tri!(handle(head));
        let out = tri!(out_arg(out, "out"));
        let losses = tri!(slice_arg(losses, n, "losses"));
        match head.0.apply_values(losses) {
            Ok(v) => {
                *out = v;
                RmStatus::Ok
            }
            Err(e) => fail(RmStatus::LengthMismatch, e.to_string()),
        }
    })
}

/// # Safety
/// `head` must be null or come from a head constructor, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn rm_head_free(head: *mut RmHead) {
    if !head.is_null() {
        drop(Box::from_raw(head));
    }
}

/// Loads an IDX image/label pair; pixels are scaled to `[0, 1]`.
///
/// # Safety
/// Both paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_dataset_load_idx(
    images: *const c_char,
    labels: *const c_char,
    out: *mut *mut RmDataset,
) -> RmStatus {
    guard(|| {
        let out = tri!(out_arg(out, "out"));
        let images = tri!(str_arg(images, "images"));
        let labels = tri!(str_arg(labels, "labels"));
        match load_idx(images, labels) {
            Ok(ds) => {
                *out = Box::into_raw(Box::new(RmDataset(ds)));
                RmStatus::Ok
            }
            Err(e) => fail(data_status(&e), e.to_string()),
        }
    })
}

/// Sample count, feature dimension and class count.
///
/// # Safety
/// `ds` must come from [`rm_dataset_load_idx`]; each out-pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn rm_dataset_shape(
    ds: *const RmDataset,
    len: *mut usize,
    dim: *mut usize,
    classes: *mut usize,
) -> RmStatus {
    guard(|| {
        let ds = &tri!(handle(ds)).0;
        for (p, v) in [(len, ds.len()), (dim, ds.dim()), (classes, ds.num_classes())] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        RmStatus::Ok
    })
}

/// Copies the row-major `len × dim` feature matrix into `buf`.
///
/// # Safety
/// `buf` must point to `cap` writable values.
#[no_mangle]
pub unsafe extern "C" fn rm_dataset_features(ds: *const RmDataset, buf: *mut f64, cap: usize) -> RmStatus {
    guard(|| {
        let ds = tri!(handle(ds));
        copy_out(ds.0.features().data(), buf, cap)
    })
}

/// Copies the `len` labels into `buf`.
///
/// # Safety
/// `buf` must point to `cap` writable values.
#[no_mangle]
pub unsafe extern "C" fn rm_dataset_labels(ds: *const RmDataset, buf: *mut u32, cap: usize) -> RmStatus {
    guard(|| {
        let ds = tri!(handle(ds));
        let labels: Vec<u32> = ds.0.labels().iter().map(|&l| l as u32).collect();
        copy_out(&labels, buf, cap)
    })
}

/// # Safety
/// `ds` must be null or come from [`rm_dataset_load_idx`], and not be used again.
#[no_mangle]
pub unsafe extern "C" fn rm_dataset_free(ds: *mut RmDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Runs every seed of an experiment config and writes its artifacts.
///
/// `out_dir` may be null to use the config's `experiment.out`. When `grid` is
/// nonzero, comma-separated values expand into a run matrix. `failed`, if not
/// null, receives the number of failed seeds.
///
/// # Safety
/// Strings must be NUL-terminated; `failed` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn rm_run_experiment(
    config: *const c_char,
    out_dir: *const c_char,
    grid: i32,
    failed: *mut usize,
) -> RmStatus {
    guard(|| {
        let config = tri!(str_arg(config, "config"));
        let out_dir = if out_dir.is_null() { None } else { Some(PathBuf::from(tri!(str_arg(out_dir, "out_dir")))) };
        let points = match harness::load_points(config.as_ref(), grid != 0) {
            Ok(p) => p,
            Err(e) => return fail(harness_status(&e), e.to_string()),
        };
        let out = out_dir.unwrap_or_else(|| points[0].1.out.clone());
        match harness::run(&points, &out) {
            Ok(summary) => {
                if let Some(f) = failed.as_mut() {
                    *f = summary.failed;
                }
                if summary.failed > 0 {
                    return fail(
                        RmStatus::SeedsFailed,
                        format!("{} of {} runs failed", summary.failed, summary.rows.len()),
                    );
                }
                RmStatus::Ok
            }
            Err(e) => fail(harness_status(&e), e.to_string()),
        }
    })
}

fn harness_status(e: &HarnessError) -> RmStatus {
    match e {
        HarnessError::Config(_) | HarnessError::Parse { .. } => RmStatus::Config,
        HarnessError::Io { .. } => RmStatus::Io,
        HarnessError::Data(d) => data_status(d),
        HarnessError::Risk(_) => RmStatus::Risk,
        _ => RmStatus::Run,
    }
}
