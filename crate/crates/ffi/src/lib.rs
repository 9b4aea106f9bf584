//! C interface to reachnet.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free` function. Every fallible call returns an [`RnStatus`];
//! on failure [`rn_last_error`] describes the most recent error on the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use reachnet::eval::wilson_ci;
use reachnet::models::{Benchmark, HybridModel, State};
use reachnet::nn::{load_classifier, Classifier, Model};
use reachnet::sim::{reach_label, IntegratorConfig};
use reachnet::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownModel = 3,
    Io = 4,
    Schema = 5,
    Numerical = 6,
    Panic = 7,
}

/// A benchmark hybrid system.
pub struct RnModel {
    inner: Benchmark,
    integrator: IntegratorConfig,
}

/// A trained network or ensemble.
pub struct RnClassifier {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn status_of(e: &Error) -> RnStatus {
    match e {
        Error::UnknownModel { .. } => RnStatus::UnknownModel,
        Error::Io { .. } => RnStatus::Io,
        Error::Schema(_) | Error::Parse { .. } => RnStatus::Schema,
        e if e.is_numerical() => RnStatus::Numerical,
        _ => RnStatus::InvalidArgument,
    }
}

fn fail(status: RnStatus, message: &str) -> RnStatus {
    set_error(message);
    status
}

/// Runs `f`, turning errors and panics into status codes.
fn guarded<F>(f: F) -> RnStatus
where
    F: FnOnce() -> Result<(), RnStatus>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RnStatus::Ok,
        Ok(Err(status)) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(RnStatus::Panic, &format!("panic: {msg}"))
        }
    }
}

fn check(e: Error) -> RnStatus {
    fail(status_of(&e), &e.to_string())
}

unsafe fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, RnStatus> {
    p.as_ref().ok_or_else(|| fail(RnStatus::NullPointer, &format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, RnStatus> {
    p.as_mut().ok_or_else(|| fail(RnStatus::NullPointer, &format!("{what} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, RnStatus> {
    if p.is_null() {
        return Err(fail(RnStatus::NullPointer, &format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(RnStatus::InvalidArgument, &format!("{what} is not valid UTF-8")))
}

unsafe fn state<'a>(x: *const f64, n: usize, dim: usize) -> Result<&'a [f64], RnStatus> {
    if x.is_null() {
        return Err(fail(RnStatus::NullPointer, "state pointer is null"));
    }
    if n != dim {
        return Err(fail(RnStatus::InvalidArgument, &format!("expected {dim} state variables, got {n}")));
    }
    Ok(std::slice::from_raw_parts(x, n))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a benchmark by name ("pendulum", "neuron", "quadcopter") with
/// default parameters and integrator settings.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rn_model_new(name: *const c_char, out: *mut *mut RnModel) -> RnStatus {
    guarded(|| {
        let out = out_ptr(out, "out")?;
        let name = c_str(name, "name")?;
        let inner = Benchmark::by_name(name).map_err(check)?;
        *out = Box::into_raw(Box::new(RnModel { inner, integrator: IntegratorConfig::default() }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`rn_model_new`] and not be used afterwards.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn rn_model_free(model: *mut RnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of state variables, default time bound and trace step.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rn_model_info(model: *const RnModel, dim: *mut usize, t_bound: *mut f64, h: *mut f64) -> RnStatus {
    guarded(|| {
        let spec = non_null(model, "model")?.inner.spec();
        *out_ptr(dim, "dim")? = spec.dim;
        *out_ptr(t_bound, "t_bound")? = spec.default_t;
        *out_ptr(h, "h")? = spec.default_h;
        Ok(())
    })
}

/// Simulates from `x` (in the model's initial mode) and reports whether the
/// unsafe set is reached within `t_bound`.
///
/// # Safety
/// `model` must be a live handle, `x` must point to `n` doubles and
/// `reaches` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rn_reach_label(
    model: *const RnModel,
    x: *const f64,
    n: usize,
    t_bound: f64,
    h: f64,
    reaches: *mut bool,
) -> RnStatus {
    guarded(|| {
        let m = non_null(model, "model")?;
        let out = out_ptr(reaches, "reaches")?;
        let x = state(x, n, m.inner.spec().dim)?;
        let s = State::new(m.inner.initial_mode(), x.to_vec());
        *out = reach_label(&m.inner, &s, t_bound, h, &m.integrator).map_err(check)?;
        Ok(())
    })
}

/// Loads a network file or an ensemble manifest.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rn_classifier_load(path: *const c_char, out: *mut *mut RnClassifier) -> RnStatus {
    guarded(|| {
        let out = out_ptr(out, "out")?;
        let path = c_str(path, "path")?;
        let inner = load_classifier(Path::new(path)).map_err(check)?;
        *out = Box::into_raw(Box::new(RnClassifier { inner }));
        Ok(())
    })
}

/// # Safety
/// `clf` must come from [`rn_classifier_load`] and not be used afterwards.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn rn_classifier_free(clf: *mut RnClassifier) {
    if !clf.is_null() {
        drop(Box::from_raw(clf));
    }
}

/// # Safety
/// `clf` must be a live handle and `dim` valid.
#[no_mangle]
pub unsafe extern "C" fn rn_classifier_input_dim(clf: *const RnClassifier, dim: *mut usize) -> RnStatus {
    guarded(|| {
        *out_ptr(dim, "dim")? = non_null(clf, "classifier")?.inner.input_dim();
        Ok(())
    })
}

/// Network output in [0, 1]; for an ensemble, the fraction of positive votes.
///
/// # Safety
/// `clf` must be a live handle, `x` must point to `n` doubles and `score`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn rn_classifier_score(clf: *const RnClassifier, x: *const f64, n: usize, score: *mut f64) -> RnStatus {
    guarded(|| {
        let c = &non_null(clf, "classifier")?.inner;
        let out = out_ptr(score, "score")?;
        *out = c.score(state(x, n, c.input_dim())?);
        Ok(())
    })
}

/// # Safety
/// As for [`rn_classifier_score`].
#[no_mangle]
pub unsafe extern "C" fn rn_classifier_classify(
    clf: *const RnClassifier,
    x: *const f64,
    n: usize,
    positive: *mut bool,
) -> RnStatus {
    guarded(|| {
        let c = &non_null(clf, "classifier")?.inner;
        let out = out_ptr(positive, "positive")?;
        *out = c.classify(state(x, n, c.input_dim())?);
        Ok(())
    })
}

/// Sets the decision threshold of a single network.
///
/// # Safety
/// `clf` must be a live handle not shared with another thread.
#[no_mangle]
pub unsafe extern "C" fn rn_classifier_set_threshold(clf: *mut RnClassifier, theta: f64) -> RnStatus {
    guarded(|| {
        let c = out_ptr(clf, "classifier")?;
        match &mut c.inner {
            Model::Network(net) => net.set_threshold(theta).map_err(check),
            Model::Ensemble(_) => Err(fail(RnStatus::InvalidArgument, "ensembles vote with fixed member thresholds")),
        }
    })
}

/// Wilson score interval at confidence `1 - alpha`.
///
/// # Safety
/// `lo` and `hi` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rn_wilson_ci(p_hat: f64, n: usize, alpha: f64, lo: *mut f64, hi: *mut f64) -> RnStatus {
    guarded(|| {
        let lo = out_ptr(lo, "lo")?;
        let hi = out_ptr(hi, "hi")?;
        let ci = wilson_ci(p_hat, n, alpha).map_err(check)?;
        (*lo, *hi) = (ci.lo, ci.hi);
        Ok(())
    })
}
