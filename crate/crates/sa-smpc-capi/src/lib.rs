//! C ABI for the sa-smpc library: opaque handles, integer status codes, and
//! a thread-local last-error message. The header is generated by cbindgen at
//! build time (see build.rs); all functions are `extern "C"` and
//! panic-safe.
//!
//! Conventions: constructors write through an out-pointer and return a
//! status; every successful constructor output must be released with the
//! matching `_free`, which accepts NULL. String buffers use the
//! "call with NULL to query the required length (including NUL)" pattern.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DMatrix, DVector};
use sa_smpc::controller::{step, ControllerState, MpcConfig, StepStatus};
use sa_smpc::model::{LtiModel, NormalizedModel};
use sa_smpc::offline::{design_certificate, ContractionCertificate, DesignOptions};
use sa_smpc::sim::{build_arm, Arm, Scenario, SimSetup};
use sa_smpc::tightening::Polytope;
use sa_smpc::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaSmpcStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// An argument violated a documented precondition.
    InvalidArgument = 3,
    /// Offline synthesis failed.
    DesignFailure = 4,
    /// The instance has no solution (empty terminal set, infeasible start).
    Infeasible = 5,
    /// A validation check failed.
    ValidationFailure = 6,
    /// Serialization or I/O failure.
    IoFailure = 7,
    /// Internal error (including caught panics).
    InternalError = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> SaSmpcStatus {
    match err {
        Error::Contract(_) | Error::Config(_) | Error::Model(_) => SaSmpcStatus::InvalidArgument,
        Error::Design(_) => SaSmpcStatus::DesignFailure,
        Error::Infeasible(_) => SaSmpcStatus::Infeasible,
        Error::Validation(_) => SaSmpcStatus::ValidationFailure,
        Error::Io(_) | Error::Json(_) => SaSmpcStatus::IoFailure,
    }
}

fn fail(err: Error) -> SaSmpcStatus {
    let code = status_of(&err);
    set_error(err.to_string());
    code
}

/// Runs a closure, converting panics into `InternalError`.
fn guarded(f: impl FnOnce() -> SaSmpcStatus) -> SaSmpcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            SaSmpcStatus::InternalError
        }
    }
}

/// Copies `s` into `buf` (NUL-terminated, truncating) and returns the full
/// required capacity including the NUL. `buf` may be NULL to query.
fn copy_string(s: &str, buf: *mut c_char, cap: usize) -> usize {
    let bytes = s.as_bytes();
    if !buf.is_null() && cap > 0 {
        let n = bytes.len().min(cap - 1);
        unsafe {
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
    }
    bytes.len() + 1
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, SaSmpcStatus> {
    if p.is_null() {
        set_error("NULL string argument");
        return Err(SaSmpcStatus::NullArgument);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        SaSmpcStatus::InvalidUtf8
    })
}

/// Message text for the most recent failure on this thread. Returns the
/// required buffer capacity including the terminating NUL; `buf` may be NULL.
#[no_mangle]
pub extern "C" fn sa_smpc_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| copy_string(&e.borrow(), buf, cap))
}

// ---------------------------------------------------------------------------
// model handle

/// Opaque plant model handle.
pub struct SaSmpcModel {
    inner: LtiModel,
}

/// Builds the built-in CSTR benchmark model.
#[no_mangle]
pub extern "C" fn sa_smpc_model_cstr(out: *mut *mut SaSmpcModel) -> SaSmpcStatus {
    guarded(|| {
        if out.is_null() {
            set_error("NULL out pointer");
            return SaSmpcStatus::NullArgument;
        }
        let model = sa_smpc::presets::cstr_model();
        unsafe { *out = Box::into_raw(Box::new(SaSmpcModel { inner: model })) };
        SaSmpcStatus::Ok
    })
}

/// Parses a model from its JSON representation (keys "A", "B", "u_max", "W").
#[no_mangle]
pub extern "C" fn sa_smpc_model_from_json(
    json: *const c_char,
    out: *mut *mut SaSmpcModel,
) -> SaSmpcStatus {
    guarded(|| {
        if out.is_null() {
            set_error("NULL out pointer");
            return SaSmpcStatus::NullArgument;
        }
        let text = match unsafe { read_str(json) } {
            Ok(t) => t,
            Err(code) => return code,
        };
        match LtiModel::from_json(text) {
            Ok(model) => {
                unsafe { *out = Box::into_raw(Box::new(SaSmpcModel { inner: model })) };
                SaSmpcStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// State and input dimensions. Either out-pointer may be NULL.
#[no_mangle]
pub extern "C" fn sa_smpc_model_dims(
    model: *const SaSmpcModel,
    n_out: *mut usize,
    m_out: *mut usize,
) -> SaSmpcStatus {
    guarded(|| {
        let Some(model) = (unsafe { model.as_ref() }) else {
            set_error("NULL model handle");
            return SaSmpcStatus::NullArgument;
        };
        unsafe {
            if !n_out.is_null() {
                *n_out = model.inner.a.nrows();
            }
            if !m_out.is_null() {
                *m_out = model.inner.b.ncols();
            }
        }
        SaSmpcStatus::Ok
    })
}

/// Releases a model handle; NULL is a no-op.
#[no_mangle]
pub extern "C" fn sa_smpc_model_free(model: *mut SaSmpcModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

// ---------------------------------------------------------------------------
// certificate handle

/// Opaque contraction-certificate handle.
pub struct SaSmpcCertificate {
    inner: ContractionCertificate,
}

/// Builds the reference certificate for the built-in CSTR model.
#[no_mangle]
pub extern "C" fn sa_smpc_certificate_reference(
    out: *mut *mut SaSmpcCertificate,
) -> SaSmpcStatus {
    guarded(|| {
        if out.is_null() {
            set_error("NULL out pointer");
            return SaSmpcStatus::NullArgument;
        }
        match sa_smpc::presets::cstr_reference_certificate() {
            Ok(cert) => {
                unsafe { *out = Box::into_raw(Box::new(SaSmpcCertificate { inner: cert })) };
                SaSmpcStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Parses a certificate from JSON (the format written by the design tools).
#[no_mangle]
pub extern "C" fn sa_smpc_certificate_from_json(
    json: *const c_char,
    out: *mut *mut SaSmpcCertificate,
) -> SaSmpcStatus {
    guarded(|| {
        if out.is_null() {
            set_error("NULL out pointer");
            return SaSmpcStatus::NullArgument;
        }
        let text = match unsafe { read_str(json) } {
            Ok(t) => t,
            Err(code) => return code,
        };
        let cert: ContractionCertificate = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => return fail(e.into()),
        };
        if let Err(e) = cert.validate() {
            return fail(e);
        }
        unsafe { *out = Box::into_raw(Box::new(SaSmpcCertificate { inner: cert })) };
        SaSmpcStatus::Ok
    })
}

/// Serializes a certificate to JSON. Returns the status; `*len_out` receives
/// the required capacity including the NUL (call with `buf = NULL` to query).
#[no_mangle]
pub extern "C" fn sa_smpc_certificate_to_json(
    cert: *const SaSmpcCertificate,
    buf: *mut c_char,
    cap: usize,
    len_out: *mut usize,
) -> SaSmpcStatus {
    guarded(|| {
        let Some(cert) = (unsafe { cert.as_ref() }) else {
            set_error("NULL certificate handle");
            return SaSmpcStatus::NullArgument;
        };
        let text = match serde_json::to_string(&cert.inner) {
            Ok(t) => t,
            Err(e) => return fail(e.into()),
        };
        let needed = copy_string(&text, buf, cap);
        if !len_out.is_null() {
            unsafe { *len_out = needed };
        }
        SaSmpcStatus::Ok
    })
}

/// Synthesizes a certificate for `model` by rate bisection.
#[no_mangle]
pub extern "C" fn sa_smpc_certificate_design(
    model: *const SaSmpcModel,
    bisect_tol: f64,
    sdp_tol: f64,
    out: *mut *mut SaSmpcCertificate,
) -> SaSmpcStatus {
    guarded(|| {
        let Some(model) = (unsafe { model.as_ref() }) else {
            set_error("NULL model handle");
            return SaSmpcStatus::NullArgument;
        };
        if out.is_null() {
            set_error("NULL out pointer");
            return SaSmpcStatus::NullArgument;
        }
        let opts = DesignOptions {
            bisect_tol,
            sdp_tol,
            ..DesignOptions::default()
        };
        match design_certificate(&model.inner.normalize(), &opts) {
            Ok(cert) => {
                unsafe { *out = Box::into_raw(Box::new(SaSmpcCertificate { inner: cert })) };
                SaSmpcStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Contraction rates (lambda, lambda_L). Either out-pointer may be NULL.
#[no_mangle]
pub extern "C" fn sa_smpc_certificate_rates(
    cert: *const SaSmpcCertificate,
    lambda_out: *mut f64,
    lambda_l_out: *mut f64,
) -> SaSmpcStatus {
    guarded(|| {
        let Some(cert) = (unsafe { cert.as_ref() }) else {
            set_error("NULL certificate handle");
            return SaSmpcStatus::NullArgument;
        };
        unsafe {
            if !lambda_out.is_null() {
                *lambda_out = cert.inner.lambda;
            }
            if !lambda_l_out.is_null() {
                *lambda_l_out = cert.inner.lambda_l;
            }
        }
        SaSmpcStatus::Ok
    })
}

/// Releases a certificate handle; NULL is a no-op.
#[no_mangle]
pub extern "C" fn sa_smpc_certificate_free(cert: *mut SaSmpcCertificate) {
    if !cert.is_null() {
        drop(unsafe { Box::from_raw(cert) });
    }
}

// ---------------------------------------------------------------------------
// controller handle

/// Opaque online-controller handle (single trajectory, stateful).
pub struct SaSmpcController {
    model: NormalizedModel,
    cfg: MpcConfig,
    state: ControllerState,
}

/// Builds a constraint-tightened MPC controller.
///
/// - `q_diag` (`n` entries) and `r_diag` (`m` entries): diagonal stage
///   weights; `r_diag` is in actuator units.
/// - `v_ss`: steady-state nominal input bound, actuator units.
/// - `h` (`h_rows * n`, row-major) and `h_offsets` (`h_rows`): probabilistic
///   state constraints `H x <= h` at level `1 - epsilon`.
/// - `use_refined`: nonzero selects the refined contraction rate when its
///   applicability condition holds.
#[no_mangle]
pub extern "C" fn sa_smpc_controller_new(
    model: *const SaSmpcModel,
    cert: *const SaSmpcCertificate,
    q_diag: *const f64,
    r_diag: *const f64,
    v_ss: f64,
    horizon: usize,
    epsilon: f64,
    h: *const f64,
    h_offsets: *const f64,
    h_rows: usize,
    use_refined: i32,
    out: *mut *mut SaSmpcController,
) -> SaSmpcStatus {
    guarded(|| {
        let (Some(model), Some(cert)) = (unsafe { model.as_ref() }, unsafe { cert.as_ref() })
        else {
            set_error("NULL model or certificate handle");
            return SaSmpcStatus::NullArgument;
        };
        if out.is_null() || q_diag.is_null() || r_diag.is_null() || h.is_null()
            || h_offsets.is_null()
        {
            set_error("NULL array or out pointer");
            return SaSmpcStatus::NullArgument;
        }
        if h_rows == 0 {
            set_error("h_rows must be positive");
            return SaSmpcStatus::InvalidArgument;
        }
        let n = model.inner.a.nrows();
        let m = model.inner.b.ncols();
        let q = DMatrix::from_diagonal(&DVector::from_row_slice(unsafe {
            std::slice::from_raw_parts(q_diag, n)
        }));
        let r = DMatrix::from_diagonal(&DVector::from_row_slice(unsafe {
            std::slice::from_raw_parts(r_diag, m)
        }));
        let h_mat =
            DMatrix::from_row_slice(h_rows, n, unsafe { std::slice::from_raw_parts(h, h_rows * n) });
        let h_vec =
            DVector::from_row_slice(unsafe { std::slice::from_raw_parts(h_offsets, h_rows) });

        let build = || -> sa_smpc::Result<SaSmpcController> {
            let setup = SimSetup::new(&model.inner, cert.inner.clone(), q, r, v_ss, horizon)?;
            let scenario = Scenario {
                name: "capi".into(),
                state_poly: Polytope::new(&h_mat, &h_vec)?,
                x0: vec![0.0; n],
                epsilon,
                t_steps: 1,
                n_traj: 1,
            };
            let arm = if use_refined != 0 {
                Arm::LambdaStar
            } else {
                Arm::Lambda
            };
            let arts = build_arm(&setup, &scenario, arm)?;
            Ok(SaSmpcController {
                model: setup.model,
                cfg: arts.cfg,
                state: ControllerState::new(),
            })
        };
        match build() {
            Ok(ctrl) => {
                unsafe { *out = Box::into_raw(Box::new(ctrl)) };
                SaSmpcStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Advances the controller one step: reads the measured state `x` (`n`
/// entries) and writes the input to apply, in actuator units, to `u_out`
/// (`m` entries). `fallback_out` (optional) receives 1 when the shifted
/// previous plan was applied instead of a fresh optimum.
#[no_mangle]
pub extern "C" fn sa_smpc_controller_step(
    ctrl: *mut SaSmpcController,
    x: *const f64,
    u_out: *mut f64,
    fallback_out: *mut i32,
) -> SaSmpcStatus {
    guarded(|| {
        let Some(ctrl) = (unsafe { ctrl.as_mut() }) else {
            set_error("NULL controller handle");
            return SaSmpcStatus::NullArgument;
        };
        if x.is_null() || u_out.is_null() {
            set_error("NULL state or input pointer");
            return SaSmpcStatus::NullArgument;
        }
        let n = ctrl.model.n();
        let m = ctrl.model.m();
        let x_k = DVector::from_row_slice(unsafe { std::slice::from_raw_parts(x, n) });
        match step(&x_k, &mut ctrl.state, &ctrl.cfg, &ctrl.model) {
            Ok(res) => {
                unsafe {
                    ptr::copy_nonoverlapping(res.u_applied.as_slice().as_ptr(), u_out, m);
                    if !fallback_out.is_null() {
                        *fallback_out = (res.status == StepStatus::Fallback) as i32;
                    }
                }
                SaSmpcStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Resets the controller to its initial (k = 0) state.
#[no_mangle]
pub extern "C" fn sa_smpc_controller_reset(ctrl: *mut SaSmpcController) -> SaSmpcStatus {
    guarded(|| {
        let Some(ctrl) = (unsafe { ctrl.as_mut() }) else {
            set_error("NULL controller handle");
            return SaSmpcStatus::NullArgument;
        };
        ctrl.state = ControllerState::new();
        SaSmpcStatus::Ok
    })
}

/// Contraction rate used for the tightening of this controller.
#[no_mangle]
pub extern "C" fn sa_smpc_controller_hat_lambda(
    ctrl: *const SaSmpcController,
    out: *mut f64,
) -> SaSmpcStatus {
    guarded(|| {
        let Some(ctrl) = (unsafe { ctrl.as_ref() }) else {
            set_error("NULL controller handle");
            return SaSmpcStatus::NullArgument;
        };
        if out.is_null() {
            set_error("NULL out pointer");
            return SaSmpcStatus::NullArgument;
        }
        unsafe { *out = ctrl.cfg.schedule.hat_lambda };
        SaSmpcStatus::Ok
    })
}

/// Releases a controller handle; NULL is a no-op.
#[no_mangle]
pub extern "C" fn sa_smpc_controller_free(ctrl: *mut SaSmpcController) {
    if !ctrl.is_null() {
        drop(unsafe { Box::from_raw(ctrl) });
    }
}
