//! C ABI over `sns-core`.
//!
//! Every fallible call returns an [`SnsStatus`]; on failure the message is
//! kept per thread and read back with [`sns_last_error_message`]. Handles are
//! opaque and owned by the caller until passed to the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::{Array1, ArrayView1, ArrayView2};
use sns_core::dynamics::{DynamicsModel, HistoryDynamics};
use sns_core::robust_loss::cauchy_nll;
use sns_core::shooting_mpc::{mpc_solve, relaxed_barrier, relaxed_barrier_derivative, ShootingProblem};
use sns_core::smooth_net::{MlpParams, SmoothnessBudget, SmoothnessOrder};
use sns_core::tasks::{particle_step, ParticleConfig, ParticleState};
use sns_core::trainer::Checkpoint;
use sns_core::SnsError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    DimensionMismatch = 3,
    NonFinite = 4,
    Factorization = 5,
    Io = 6,
    Parse = 7,
    Panic = 8,
}

/// Smooth network loaded from JSON.
pub struct SnsNet {
    params: MlpParams,
}

/// Learned history dynamics loaded from a checkpoint.
pub struct SnsDynamics {
    model: DynamicsModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &SnsError) -> SnsStatus {
    match e {
        SnsError::InvalidInput(_) | SnsError::Config(_) => SnsStatus::InvalidInput,
        SnsError::DimensionMismatch { .. } => SnsStatus::DimensionMismatch,
        SnsError::NonFinite { .. } => SnsStatus::NonFinite,
        SnsError::Factorization { .. } => SnsStatus::Factorization,
        SnsError::Io(_) => SnsStatus::Io,
        SnsError::Json(_) => SnsStatus::Parse,
    }
}

fn guard<F: FnOnce() -> Result<(), SnsError>>(f: F) -> SnsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SnsStatus::Ok,
        Ok(Err(e)) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            SnsStatus::Panic
        }
    }
}

fn null_status<T>(p: *const T, what: &'static str) -> Option<SnsStatus> {
    if p.is_null() {
        set_error(format!("null pointer: {what}"));
        Some(SnsStatus::NullPointer)
    } else {
        None
    }
}

unsafe fn c_str<'a>(p: *const c_char) -> Result<&'a str, SnsError> {
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| SnsError::InvalidInput("string is not UTF-8".into()))
}

unsafe fn slice<'a>(p: *const f64, len: usize) -> &'a [f64] {
    if len == 0 {
        &[]
    } else {
        std::slice::from_raw_parts(p, len)
    }
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize) -> &'a mut [f64] {
    if len == 0 {
        &mut []
    } else {
        std::slice::from_raw_parts_mut(p, len)
    }
}

fn check_len(context: &'static str, expected: usize, got: usize) -> Result<(), SnsError> {
    if expected != got {
        return Err(SnsError::DimensionMismatch { context, expected, got });
    }
    Ok(())
}

/// Network checkpoint or bare parameter JSON.
fn parse_net(text: &str) -> Result<MlpParams, SnsError> {
    let params = match serde_json::from_str::<Checkpoint<MlpParams>>(text) {
        Ok(ck) => ck.model,
        Err(_) => serde_json::from_str::<MlpParams>(text)?,
    };
    params.validate()?;
    Ok(params)
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sns_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let bytes = e.borrow();
        let bytes = bytes.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Parses a network from a JSON string.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sns_net_from_json(json: *const c_char, out: *mut *mut SnsNet) -> SnsStatus {
    if let Some(s) = null_status(json, "json").or(null_status(out, "out")) {
        return s;
    }
    guard(|| {
        let params = parse_net(c_str(json)?)?;
        *out = Box::into_raw(Box::new(SnsNet { params }));
        Ok(())
    })
}

/// Loads a network from a JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sns_net_load(path: *const c_char, out: *mut *mut SnsNet) -> SnsStatus {
    if let Some(s) = null_status(path, "path").or(null_status(out, "out")) {
        return s;
    }
    guard(|| {
        let text = std::fs::read_to_string(Path::new(c_str(path)?))?;
        let params = parse_net(&text)?;
        *out = Box::into_raw(Box::new(SnsNet { params }));
        Ok(())
    })
}

/// # Safety
/// `net` must come from `sns_net_from_json`/`sns_net_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sns_net_free(net: *mut SnsNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// # Safety
/// `net` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sns_net_input_dim(net: *const SnsNet) -> usize {
    net.as_ref().map_or(0, |n| n.params.input_dim())
}

/// # Safety
/// `net` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sns_net_output_dim(net: *const SnsNet) -> usize {
    net.as_ref().map_or(0, |n| n.params.output_dim())
}

/// `out = f(x)` for one input.
///
/// # Safety
/// `x` valid for `x_len` reads, `out` for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn sns_net_forward(
    net: *const SnsNet,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> SnsStatus {
    if let Some(s) = null_status(net, "net").or(null_status(x, "x")).or(null_status(out, "out")) {
        return s;
    }
    guard(|| {
        let p = &(*net).params;
        check_len("network output", p.output_dim(), out_len)?;
        let y = p.forward(ArrayView1::from(slice(x, x_len)))?;
        slice_mut(out, out_len).copy_from_slice(y.as_slice().expect("contiguous"));
        Ok(())
    })
}

/// Input Jacobian, row-major `[outputs × inputs]`.
///
/// # Safety
/// `x` valid for `x_len` reads, `out` for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn sns_net_jacobian(
    net: *const SnsNet,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> SnsStatus {
    if let Some(s) = null_status(net, "net").or(null_status(x, "x")).or(null_status(out, "out")) {
        return s;
    }
    guard(|| {
        let p = &(*net).params;
        check_len("jacobian buffer", p.output_dim() * p.input_dim(), out_len)?;
        let j = p.input_jacobian(ArrayView1::from(slice(x, x_len)))?;
        for (o, v) in slice_mut(out, out_len).iter_mut().zip(j.iter()) {
            *o = *v;
        }
        Ok(())
    })
}

/// Product bound `C`, propagated sum `S` and the Jacobian-Lipschitz bound `C·S`.
///
/// # Safety
/// Output pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sns_net_bound(net: *const SnsNet, c: *mut f64, s: *mut f64, jac_bound: *mut f64) -> SnsStatus {
    if let Some(st) = null_status(net, "net")
        .or(null_status(c, "c"))
        .or(null_status(s, "s"))
        .or(null_status(jac_bound, "jac_bound"))
    {
        return st;
    }
    guard(|| {
        let b = (*net).params.lipschitz_bound();
        *c = b.c;
        *s = b.s;
        *jac_bound = b.jac_bound;
        Ok(())
    })
}

/// Smoothness penalty for order 1 or 2.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sns_net_penalty(
    net: *const SnsNet,
    order: u32,
    budget: f64,
    weight: f64,
    out: *mut f64,
) -> SnsStatus {
    if let Some(s) = null_status(net, "net").or(null_status(out, "out")) {
        return s;
    }
    guard(|| {
        let order = match order {
            1 => SmoothnessOrder::First,
            2 => SmoothnessOrder::Second,
            k => return Err(SnsError::InvalidInput(format!("smoothness order must be 1 or 2, got {k}"))),
        };
        let b = SmoothnessBudget::new(order, budget, weight)?;
        *out = (*net).params.smoothness_penalty(&b);
        Ok(())
    })
}

/// Relaxed log barrier value and first derivative.
///
/// # Safety
/// Output pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sns_relaxed_barrier(g: f64, delta: f64, value: *mut f64, derivative: *mut f64) -> SnsStatus {
    if let Some(s) = null_status(value, "value").or(null_status(derivative, "derivative")) {
        return s;
    }
    guard(|| {
        if !(delta > 0.0) || !g.is_finite() {
            return Err(SnsError::InvalidInput("barrier needs finite g and δ > 0".into()));
        }
        *value = relaxed_barrier(g, delta);
        *derivative = relaxed_barrier_derivative(g, delta);
        Ok(())
    })
}

/// One step of the particle with ground contact.
///
/// # Safety
/// Output pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sns_particle_step(
    q: f64,
    v: f64,
    u: f64,
    g: f64,
    dt: f64,
    q_out: *mut f64,
    v_out: *mut f64,
) -> SnsStatus {
    if let Some(s) = null_status(q_out, "q_out").or(null_status(v_out, "v_out")) {
        return s;
    }
    guard(|| {
        let cfg = ParticleConfig {
            g,
            dt,
            ..Default::default()
        };
        cfg.validate()?;
        let next = particle_step(ParticleState { q, v }, u, &cfg);
        *q_out = next.q;
        *v_out = next.v;
        Ok(())
    })
}

/// Multivariate Cauchy negative log-likelihood of `x` under `(mu, sigma)`,
/// dropping constant terms.
///
/// # Safety
/// The three arrays must be valid for `n` reads; `out` for a write.
#[no_mangle]
pub unsafe extern "C" fn sns_cauchy_nll(
    x: *const f64,
    mu: *const f64,
    sigma: *const f64,
    n: usize,
    out: *mut f64,
) -> SnsStatus {
    if let Some(s) = null_status(x, "x")
        .or(null_status(mu, "mu"))
        .or(null_status(sigma, "sigma"))
        .or(null_status(out, "out"))
    {
        return s;
    }
    guard(|| {
        *out = cauchy_nll(
            ArrayView1::from(slice(x, n)),
            ArrayView1::from(slice(mu, n)),
            ArrayView1::from(slice(sigma, n)),
        )?;
        Ok(())
    })
}

/// Loads learned dynamics from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sns_dynamics_load(path: *const c_char, out: *mut *mut SnsDynamics) -> SnsStatus {
    if let Some(s) = null_status(path, "path").or(null_status(out, "out")) {
        return s;
    }
    guard(|| {
        let ck = sns_core::trainer::load_checkpoint::<DynamicsModel>(Path::new(c_str(path)?))?;
        *out = Box::into_raw(Box::new(SnsDynamics { model: ck.model }));
        Ok(())
    })
}

/// # Safety
/// `d` must come from `sns_dynamics_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sns_dynamics_free(d: *mut SnsDynamics) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Writes `(history, state_dim, action_dim)`.
///
/// # Safety
/// Output pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sns_dynamics_dims(
    d: *const SnsDynamics,
    history: *mut usize,
    state_dim: *mut usize,
    action_dim: *mut usize,
) -> SnsStatus {
    if let Some(s) = null_status(d, "dynamics")
        .or(null_status(history, "history"))
        .or(null_status(state_dim, "state_dim"))
        .or(null_status(action_dim, "action_dim"))
    {
        return s;
    }
    let m = &(*d).model;
    *history = m.history();
    *state_dim = m.state_dim();
    *action_dim = m.action_dim();
    SnsStatus::Ok
}

/// Next state from row-major windows `x` `[(H+1) × n]` and `u` `[(H+1) × m]`.
///
/// # Safety
/// Arrays must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn sns_dynamics_step(
    d: *const SnsDynamics,
    x: *const f64,
    x_len: usize,
    u: *const f64,
    u_len: usize,
    out: *mut f64,
    out_len: usize,
) -> SnsStatus {
    if let Some(s) = null_status(d, "dynamics")
        .or(null_status(x, "x"))
        .or(null_status(u, "u"))
        .or(null_status(out, "out"))
    {
        return s;
    }
    guard(|| {
        let m = &(*d).model;
        let rows = m.history() + 1;
        check_len("state window", rows * m.state_dim(), x_len)?;
        check_len("action window", rows * m.action_dim(), u_len)?;
        check_len("next state", m.state_dim(), out_len)?;
        let xw = ArrayView2::from_shape((rows, m.state_dim()), slice(x, x_len)).expect("length checked");
        let uw = ArrayView2::from_shape((rows, m.action_dim()), slice(u, u_len)).expect("length checked");
        let next: Array1<f64> = m.step(xw, uw)?;
        slice_mut(out, out_len).copy_from_slice(next.as_slice().expect("contiguous"));
        Ok(())
    })
}

/// Solves a shooting problem given as JSON with the Gauss–Newton planner and
/// returns the report as a JSON string to be released with `sns_string_free`.
///
/// # Safety
/// `problem_json` must be NUL-terminated; `report_json` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sns_mpc_solve_json(
    d: *const SnsDynamics,
    problem_json: *const c_char,
    report_json: *mut *mut c_char,
) -> SnsStatus {
    if let Some(s) = null_status(d, "dynamics")
        .or(null_status(problem_json, "problem_json"))
        .or(null_status(report_json, "report_json"))
    {
        return s;
    }
    guard(|| {
        let problem: ShootingProblem = serde_json::from_str(c_str(problem_json)?)?;
        let report = mpc_solve(&(*d).model, &problem)?;
        let text = serde_json::to_string(&report)?;
        *report_json = CString::new(text).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sns_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
