//! C ABI over the core toolkit.
//!
//! Every fallible function returns an [`SrStatus`]. On failure a message is
//! kept per thread and can be copied out with [`sr_last_error_message`].
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use solenoid_r2r::flatctrl::{ControlTiming, FlatController};
use solenoid_r2r::model::{rho_to_theta, Geometry, IdentParams, PhysicalParams};
use solenoid_r2r::r2r::{apply_candidate, nm_init, NmCoefficients, OperationStatus, OptimizerState, R2RConfig};
use solenoid_r2r::simulator::compute_nrmse;
use solenoid_r2r::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Infeasible = 3,
    SimulationFailed = 4,
    Protocol = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Physical device parameters, SI units.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SrPhysicalParams {
    pub m: f64,
    pub k_s: f64,
    pub z_s: f64,
    pub c_f: f64,
    pub k_g: f64,
    pub r_g0: f64,
    pub r_c0: f64,
    pub lambda_sat: f64,
    pub r: f64,
}

impl From<SrPhysicalParams> for PhysicalParams {
    fn from(p: SrPhysicalParams) -> Self {
        PhysicalParams::from_array([p.m, p.k_s, p.z_s, p.c_f, p.k_g, p.r_g0, p.r_c0, p.lambda_sat, p.r])
    }
}

impl From<PhysicalParams> for SrPhysicalParams {
    fn from(p: PhysicalParams) -> Self {
        let [m, k_s, z_s, c_f, k_g, r_g0, r_c0, lambda_sat, r] = p.to_array();
        Self { m, k_s, z_s, c_f, k_g, r_g0, r_c0, lambda_sat, r }
    }
}

/// Identifiable parameters θ₁..θ₇ (index 0 holds θ₁).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SrIdentParams {
    pub theta: [f64; 7],
}

/// Metrics of one simulated operation. Flags are 1 when the value is defined.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SrOperationMetrics {
    pub has_impact: i32,
    pub v_c: f64,
    pub has_impact_time: i32,
    pub t_c: f64,
    pub nrmse_z: f64,
    /// Integrated squared current prediction error.
    pub j_im: f64,
}

pub struct SrController {
    inner: FlatController,
}

pub struct SrOptimizer {
    inner: OptimizerState,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> SrStatus {
    match e {
        Error::InfeasibleReference { .. } | Error::SingularInversion { .. } | Error::ZeroNormReference => {
            SrStatus::Infeasible
        }
        Error::Protocol(_) => SrStatus::Protocol,
        Error::SaturationDomain { .. } | Error::SaturationReached { .. } | Error::StepUnderflow { .. } => {
            SrStatus::SimulationFailed
        }
        _ => SrStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), SrStatus>) -> SrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SrStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            SrStatus::Panic
        }
    }
}

fn fail(e: Error) -> SrStatus {
    set_error(e.to_string());
    status_of(&e)
}

unsafe fn read<'a, T>(p: *const T) -> Result<&'a T, SrStatus> {
    p.as_ref().ok_or_else(|| {
        set_error("null pointer argument");
        SrStatus::NullPointer
    })
}

unsafe fn write<T>(p: *mut T, value: T) -> Result<(), SrStatus> {
    if p.is_null() {
        set_error("null output pointer");
        return Err(SrStatus::NullPointer);
    }
    p.write(value);
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to fit). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sr_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_nominal_params(out: *mut SrPhysicalParams) -> SrStatus {
    guard(|| write(out, PhysicalParams::nominal().into()))
}

/// # Safety
/// `params` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sr_rho_to_theta(params: *const SrPhysicalParams, out: *mut SrIdentParams) -> SrStatus {
    guard(|| {
        let p: PhysicalParams = (*read(params)?).into();
        p.validate(&Geometry::default()).map_err(fail)?;
        write(out, SrIdentParams { theta: rho_to_theta(&p).theta })
    })
}

/// Feedforward controller for the default reference and timing, mapped with
/// the nominal device.
///
/// # Safety
/// `theta` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sr_controller_new(theta: *const SrIdentParams, out: *mut *mut SrController) -> SrStatus {
    guard(|| {
        let th = IdentParams::new(read(theta)?.theta);
        let cfg = R2RConfig::default();
        let inner = FlatController::new(cfg.reference, th, ControlTiming::default()).map_err(fail)?;
        write(out, Box::into_raw(Box::new(SrController { inner })))
    })
}

/// # Safety
/// `handle` must come from [`sr_controller_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sr_controller_free(handle: *mut SrController) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Feedforward voltage at simulation time `t`.
///
/// # Safety
/// `handle` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sr_controller_voltage(handle: *const SrController, t: f64, out: *mut f64) -> SrStatus {
    guard(|| {
        let v = read(handle)?.inner.feedforward_input(t).map_err(fail)?;
        write(out, v)
    })
}

/// Predicted coil current at simulation time `t`.
///
/// # Safety
/// `handle` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sr_controller_predict_current(handle: *const SrController, t: f64, out: *mut f64) -> SrStatus {
    guard(|| {
        let i = read(handle)?.inner.predict_current(t).map_err(fail)?;
        write(out, i)
    })
}

/// Simulates one operation of `device` under the controller built from `theta`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sr_simulate_operation(
    device: *const SrPhysicalParams,
    theta: *const SrIdentParams,
    out: *mut SrOperationMetrics,
) -> SrStatus {
    guard(|| {
        let g = Geometry::default();
        let p: PhysicalParams = (*read(device)?).into();
        p.validate(&g).map_err(fail)?;
        let th = IdentParams::new(read(theta)?.theta);
        let cfg = R2RConfig::default();
        let op = apply_candidate(&p, &g, &th, &cfg);
        let rec = match (op.status, op.record) {
            (OperationStatus::Ok, Some(rec)) => rec,
            (OperationStatus::Infeasible, _) => {
                set_error("reference is infeasible for these parameters");
                return Err(SrStatus::Infeasible);
            }
            _ => {
                set_error("device simulation failed");
                return Err(SrStatus::SimulationFailed);
            }
        };
        let window = (rec.t[0], *rec.t.last().unwrap_or(&0.0));
        let z_ref = solenoid_r2r::r2r::position_reference(&cfg, &rec.t);
        let j_im = solenoid_r2r::r2r::compute_cost_im(&rec.t, &rec.y2, &rec.y2_hat, window).map_err(fail)?;
        write(
            out,
            SrOperationMetrics {
                has_impact: rec.impact.velocity.is_some() as i32,
                v_c: rec.impact.velocity.unwrap_or(f64::NAN),
                has_impact_time: rec.impact.time.is_some() as i32,
                t_c: rec.impact.time.unwrap_or(f64::NAN),
                nrmse_z: compute_nrmse(&rec.t, &rec.z, &z_ref, window).unwrap_or(f64::NAN),
                j_im,
            },
        )
    })
}

/// Online Nelder–Mead over `dim` normalized coordinates, started from the
/// all-ones point with relative spread `delta` and the classic coefficients.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_optimizer_new(dim: usize, delta: f64, out: *mut *mut SrOptimizer) -> SrStatus {
    guard(|| {
        let inner = nm_init(dim, delta, NmCoefficients::default()).map_err(fail)?;
        write(out, Box::into_raw(Box::new(SrOptimizer { inner })))
    })
}

/// # Safety
/// `handle` must come from [`sr_optimizer_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sr_optimizer_free(handle: *mut SrOptimizer) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

fn check_buffer(out: *mut f64, len: usize, needed: usize) -> Result<(), SrStatus> {
    if out.is_null() {
        set_error("null output buffer");
        return Err(SrStatus::NullPointer);
    }
    if len < needed {
        set_error(format!("buffer holds {len} values, {needed} needed"));
        return Err(SrStatus::BufferTooSmall);
    }
    Ok(())
}

fn copy_point(x: &[f64], out: *mut f64, len: usize) -> Result<(), SrStatus> {
    check_buffer(out, len, x.len())?;
    // SAFETY: caller guarantees `len` writable values at `out`.
    unsafe { std::ptr::copy_nonoverlapping(x.as_ptr(), out, x.len()) };
    Ok(())
}

/// Writes the next candidate into `out` (at least `dim` values).
///
/// # Safety
/// `handle` must be valid and `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sr_optimizer_propose(handle: *mut SrOptimizer, out: *mut f64, len: usize) -> SrStatus {
    guard(|| {
        let opt = handle.as_mut().ok_or_else(|| {
            set_error("null optimizer handle");
            SrStatus::NullPointer
        })?;
        check_buffer(out, len, opt.inner.dim())?;
        let x = opt.inner.propose().map_err(fail)?;
        copy_point(&x, out, len)
    })
}

/// Reports the cost of the pending candidate.
///
/// # Safety
/// `handle` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sr_optimizer_update(handle: *mut SrOptimizer, cost: f64) -> SrStatus {
    guard(|| {
        let opt = handle.as_mut().ok_or_else(|| {
            set_error("null optimizer handle");
            SrStatus::NullPointer
        })?;
        opt.inner.update(cost).map_err(fail)
    })
}

/// Best vertex so far and its cost.
///
/// # Safety
/// `handle` must be valid, `out` must point to `len` writable doubles and
/// `cost` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_optimizer_best(
    handle: *const SrOptimizer,
    out: *mut f64,
    len: usize,
    cost: *mut f64,
) -> SrStatus {
    guard(|| {
        let opt = read(handle)?;
        let (x, c) = opt.inner.best();
        copy_point(x, out, len)?;
        write(cost, c)
    })
}
