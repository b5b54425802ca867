//! C ABI over `fracpole`.
//!
//! Objects cross the boundary as opaque handles and are released with the
//! matching `fp_*_free`. Every fallible call returns an [`FpStatus`]; the
//! message of the last failure on the calling thread is available from
//! [`fp_last_error`]. Panics are caught and reported as `FP_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fracpole::cli::{invert_trace, simulate, ExperimentConfig, Fixture, InvertReport};
use fracpole::forward::TimeTrace;
use fracpole::mlf::{ml, MlParams};
use fracpole::verifier::{compute_c0, Bounds};
use fracpole::Error;
use num_complex::Complex64;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numerical = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// A validated experiment config with its resolved per-mode data.
pub struct FpExperiment {
    cfg: ExperimentConfig,
    fixture: Fixture,
}

/// Samples h(iΔt), i = 0..len.
pub struct FpTrace(TimeTrace);

/// Recovered parameters, scored against the experiment's true values.
pub struct FpModel(InvertReport);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

type Failure = (FpStatus, String);

fn status_of(e: &Error) -> FpStatus {
    match e.root() {
        Error::Config { .. } | Error::Io(_) => FpStatus::Config,
        Error::Parameter(_) => FpStatus::InvalidArgument,
        _ => FpStatus::Numerical,
    }
}

fn lib(e: Error) -> Failure {
    (status_of(&e), e.to_string())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|l| *l.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FpStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside fracpole");
            FpStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err((FpStatus::NullPointer, format!("`{what}` is null")))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (FpStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len` bytes) and returns its full length without the NUL.
/// Pass a null `buf` to query the length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn fp_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|l| {
        let msg = l.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// E_{α,β}(z) for α ∈ (0, 2], β real.
///
/// # Safety
/// `out_re` and `out_im` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fp_mittag_leffler(
    alpha: f64,
    beta: f64,
    z_re: f64,
    z_im: f64,
    out_re: *mut f64,
    out_im: *mut f64,
) -> FpStatus {
    guard(|| {
        non_null(out_re, "out_re")?;
        non_null(out_im, "out_im")?;
        let p = MlParams::new(alpha, beta).map_err(lib)?;
        let v = ml(p, Complex64::new(z_re, z_im)).map_err(lib)?;
        *out_re = v.re;
        *out_im = v.im;
        Ok(())
    })
}

/// The constant C₀ of the data-dominance inequalities for the given bounds
/// on b₁, a, α and β_m, smoothness order n, source length T and λ₁.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn fp_c0(
    b_low: f64,
    a_high: f64,
    alpha_low: f64,
    alpha_high: f64,
    beta_low: f64,
    n: u32,
    t_src: f64,
    lambda1: f64,
    out: *mut f64,
) -> FpStatus {
    guard(|| {
        non_null(out, "out")?;
        let b = Bounds {
            b_low,
            a_high,
            alpha_low,
            alpha_high,
            beta_low,
        };
        *out = compute_c0(&b, n, t_src, lambda1).map_err(lib)?;
        Ok(())
    })
}

fn experiment(cfg: ExperimentConfig) -> Result<*mut FpExperiment, Failure> {
    let fixture = Fixture::from_config(&cfg).map_err(lib)?;
    Ok(Box::into_raw(Box::new(FpExperiment { cfg, fixture })))
}

/// Builds an experiment from a JSON config; relative file references are
/// resolved against the working directory.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fp_experiment_from_json(json: *const c_char, out: *mut *mut FpExperiment) -> FpStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let text = str_arg(json, "json")?;
        let cfg = ExperimentConfig::from_json(text, Path::new(".")).map_err(lib)?;
        *out = experiment(cfg)?;
        Ok(())
    })
}

/// Builds one of the built-in experiments (`two-term`, `zero-source`).
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fp_experiment_builtin(name: *const c_char, out: *mut *mut FpExperiment) -> FpStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let cfg = ExperimentConfig::builtin(str_arg(name, "name")?).map_err(lib)?;
        *out = experiment(cfg)?;
        Ok(())
    })
}

/// # Safety
/// `exp` must be null or a handle from `fp_experiment_*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fp_experiment_free(exp: *mut FpExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Solves the forward problem, adding the configured noise.
///
/// # Safety
/// `exp` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fp_experiment_forward(exp: *const FpExperiment, out: *mut *mut FpTrace) -> FpStatus {
    guard(|| {
        non_null(exp, "exp")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let e = &*exp;
        let (trace, _) = simulate(&e.cfg, &e.fixture).map_err(lib)?;
        *out = Box::into_raw(Box::new(FpTrace(trace)));
        Ok(())
    })
}

/// Recovers α, the operator terms, a and g from a trace, using only the
/// geometry, weights, initial data and known source parts of `exp`.
///
/// # Safety
/// `exp` and `trace` must be live handles; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fp_experiment_invert(
    exp: *const FpExperiment,
    trace: *const FpTrace,
    out: *mut *mut FpModel,
) -> FpStatus {
    guard(|| {
        non_null(exp, "exp")?;
        non_null(trace, "trace")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let e = &*exp;
        let report = invert_trace(&e.cfg, &e.fixture, &(*trace).0).map_err(lib)?;
        *out = Box::into_raw(Box::new(FpModel(report)));
        Ok(())
    })
}

/// Wraps caller-owned samples taken at spacing `dt` from t = 0.
///
/// # Safety
/// `values` must be valid for `len` reads; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fp_trace_from_samples(dt: f64, values: *const f64, len: usize, out: *mut *mut FpTrace) -> FpStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        non_null(values, "values")?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err((FpStatus::InvalidArgument, format!("dt must be positive, got {dt}")));
        }
        let v = std::slice::from_raw_parts(values, len).to_vec();
        *out = Box::into_raw(Box::new(FpTrace(TimeTrace::new(dt, v))));
        Ok(())
    })
}

/// # Safety
/// `trace` must be a live handle; `len` and `dt` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fp_trace_shape(trace: *const FpTrace, len: *mut usize, dt: *mut f64) -> FpStatus {
    guard(|| {
        non_null(trace, "trace")?;
        non_null(len, "len")?;
        non_null(dt, "dt")?;
        *len = (*trace).0.values.len();
        *dt = (*trace).0.dt;
        Ok(())
    })
}

/// Copies the samples into `buf`, which must hold at least the trace length.
///
/// # Safety
/// `trace` must be a live handle; `buf` must be valid for `capacity` writes.
#[no_mangle]
pub unsafe extern "C" fn fp_trace_copy(trace: *const FpTrace, buf: *mut f64, capacity: usize) -> FpStatus {
    guard(|| {
        non_null(trace, "trace")?;
        non_null(buf, "buf")?;
        let v = &(*trace).0.values;
        if capacity < v.len() {
            return Err((FpStatus::BufferTooSmall, format!("need {} samples, got room for {capacity}", v.len())));
        }
        ptr::copy_nonoverlapping(v.as_ptr(), buf, v.len());
        Ok(())
    })
}

/// # Safety
/// `trace` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fp_trace_free(trace: *mut FpTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Recovered α and a.
///
/// # Safety
/// `model` must be a live handle; the outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fp_model_scalars(model: *const FpModel, alpha: *mut f64, a: *mut f64) -> FpStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(alpha, "alpha")?;
        non_null(a, "a")?;
        *alpha = (*model).0.model.alpha_hat;
        *a = (*model).0.model.a_hat;
        Ok(())
    })
}

/// Writes the term count to `count`, then the weights and exponents if
/// `capacity` suffices (`FP_STATUS_BUFFER_TOO_SMALL` otherwise). Exponents
/// are in decreasing order.
///
/// # Safety
/// `model` must be a live handle; `b` and `beta` must be valid for
/// `capacity` writes; `count` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fp_model_terms(
    model: *const FpModel,
    b: *mut f64,
    beta: *mut f64,
    capacity: usize,
    count: *mut usize,
) -> FpStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(count, "count")?;
        let m = &(*model).0.model;
        *count = m.m_hat;
        if capacity < m.m_hat {
            return Err((FpStatus::BufferTooSmall, format!("{} terms, room for {capacity}", m.m_hat)));
        }
        non_null(b, "b")?;
        non_null(beta, "beta")?;
        ptr::copy_nonoverlapping(m.b_hat.as_ptr(), b, m.m_hat);
        ptr::copy_nonoverlapping(m.beta_hat.as_ptr(), beta, m.m_hat);
        Ok(())
    })
}

/// Whether every recovered quantity is within the experiment's tolerances.
///
/// # Safety
/// `model` must be a live handle; `pass` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fp_model_passed(model: *const FpModel, pass: *mut bool) -> FpStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(pass, "pass")?;
        *pass = (*model).0.pass;
        Ok(())
    })
}

/// The full report (parameters, ĝ, diagnostics, checks) as JSON. Release
/// the string with `fp_string_free`.
///
/// # Safety
/// `model` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fp_model_json(model: *const FpModel, out: *mut *mut c_char) -> FpStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let text = serde_json::to_string(&(*model).0).map_err(|e| (FpStatus::Numerical, e.to_string()))?;
        *out = CString::new(text)
            .map_err(|e| (FpStatus::Numerical, e.to_string()))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fp_model_free(model: *mut FpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
