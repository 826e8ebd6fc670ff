//! C interface to the awjm library.
//!
//! Objects are opaque handles created by `*_new` functions and released with
//! the matching `*_free`. Every fallible call returns an [`AwjmStatus`]; on
//! failure [`awjm_last_error`] describes the problem. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use awjm::adjoint::{self, Component};
use awjm::cost::{Controls, CostSpec};
use awjm::data_gen::{Combine, MeasurementSet};
use awjm::model::{self, EtchRate, Grid1D, ModelParams, TimeScheme};
use awjm::optimizer::{self, OptConfig};
use awjm::presets;
use awjm::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AwjmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numerical = 3,
    Io = 4,
    Panic = 5,
}

/// How several measured profiles enter the misfit.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AwjmCombine {
    Single = 0,
    Independent = 1,
    Superposed = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AwjmRegularizer {
    /// Squared distance of the active controls from the start values.
    Background = 0,
    /// Squared gradient of the etch rate.
    GradE = 1,
}

/// Bit flags selecting the controls that are optimized.
pub const AWJM_CONTROL_A: u32 = 1;
pub const AWJM_CONTROL_K: u32 = 2;
pub const AWJM_CONTROL_E: u32 = 4;

/// Model parameters together with their grid and time scheme.
pub struct AwjmModel {
    params: ModelParams,
    grid: Grid1D,
    scheme: TimeScheme,
}

/// Measured final profiles on a model's grid.
pub struct AwjmMeasurements {
    set: MeasurementSet,
}

/// Misfit, regularization and their sum.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AwjmCost {
    pub misfit: f64,
    pub regularization: f64,
    pub total: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: AwjmStatus, msg: impl Into<String>) -> AwjmStatus {
    set_error(msg.into());
    status
}

fn status_of(err: &Error) -> AwjmStatus {
    match err {
        Error::Io(_) | Error::Csv(_) => AwjmStatus::Io,
        e if e.is_numerical() => AwjmStatus::Numerical,
        _ => AwjmStatus::InvalidArgument,
    }
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), AwjmStatus>) -> AwjmStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AwjmStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(AwjmStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, AwjmStatus>;
}

impl<T> OrStatus<T> for awjm::Result<T> {
    fn or_status(self) -> Result<T, AwjmStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], AwjmStatus> {
    if p.is_null() {
        return Err(fail(AwjmStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], AwjmStatus> {
    if p.is_null() {
        return Err(fail(AwjmStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, AwjmStatus> {
    p.as_ref()
        .ok_or_else(|| fail(AwjmStatus::NullPointer, format!("{what} is null")))
}

fn check_out<T>(out: *mut *mut T) -> Result<(), AwjmStatus> {
    if out.is_null() {
        return Err(fail(
            AwjmStatus::NullPointer,
            "output handle pointer is null",
        ));
    }
    Ok(())
}

fn expect_len(what: &str, want: usize, got: usize) -> Result<(), AwjmStatus> {
    if want != got {
        return Err(fail(
            AwjmStatus::InvalidArgument,
            format!("{what}: expected length {want}, got {got}"),
        ));
    }
    Ok(())
}

fn controls(mask: u32) -> Result<Controls, AwjmStatus> {
    if mask == 0 || mask & !(AWJM_CONTROL_A | AWJM_CONTROL_K | AWJM_CONTROL_E) != 0 {
        return Err(fail(
            AwjmStatus::InvalidArgument,
            format!("bad control mask {mask}"),
        ));
    }
    Ok(Controls {
        a: mask & AWJM_CONTROL_A != 0,
        k: mask & AWJM_CONTROL_K != 0,
        e: mask & AWJM_CONTROL_E != 0,
    })
}

fn cost_spec(
    model: &AwjmModel,
    reg: AwjmRegularizer,
    alpha: f64,
    mask: u32,
) -> Result<CostSpec, AwjmStatus> {
    let active = controls(mask)?;
    Ok(match reg {
        AwjmRegularizer::Background => CostSpec::background(model.params.clone(), alpha, active),
        AwjmRegularizer::GradE => CostSpec::grad_e(alpha, active),
    })
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn awjm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn awjm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a model on `n` uniform nodes over `[x_min, x_max]` with etch rate
/// `e` (length `n`), integrated to `t_end`. `n_steps == 0` picks the
/// stability-limited default.
///
/// # Safety
/// `e` must point to `n` doubles and `out` to writable storage.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn awjm_model_new(
    a: f64,
    k: f64,
    x_min: f64,
    x_max: f64,
    n: usize,
    e: *const f64,
    t_end: f64,
    n_steps: usize,
    out: *mut *mut AwjmModel,
) -> AwjmStatus {
    guard(|| {
        check_out(out)?;
        let e = slice(e, n, "etch rate")?;
        let grid = Grid1D::new(x_min, x_max, n).or_status()?;
        let scheme = if n_steps == 0 {
            TimeScheme::default_for(&grid, t_end)
        } else {
            TimeScheme::new(t_end, n_steps)
        }
        .or_status()?;
        let params = ModelParams::new(a, k, EtchRate::new(e.to_vec()).or_status()?).or_status()?;
        *out = Box::into_raw(Box::new(AwjmModel {
            params,
            grid,
            scheme,
        }));
        Ok(())
    })
}

/// Creates the true model of a named preset.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn awjm_model_from_preset(
    name: *const c_char,
    out: *mut *mut AwjmModel,
) -> AwjmStatus {
    guard(|| {
        check_out(out)?;
        if name.is_null() {
            return Err(fail(AwjmStatus::NullPointer, "preset name is null"));
        }
        let name = CStr::from_ptr(name)
            .to_str()
            .map_err(|_| fail(AwjmStatus::InvalidArgument, "preset name is not UTF-8"))?;
        let p = presets::preset(name).or_status()?;
        let model = AwjmModel {
            params: p.truth().or_status()?,
            grid: p.grid,
            scheme: p.scheme().or_status()?,
        };
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn awjm_model_free(model: *mut AwjmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of grid nodes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn awjm_model_nodes(model: *const AwjmModel) -> usize {
    model.as_ref().map_or(0, |m| m.grid.n())
}

/// Copies `a`, `k` and the etch rate (`len` must equal the node count).
/// Any output pointer may be null to skip it.
///
/// # Safety
/// Non-null pointers must be writable; `e` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn awjm_model_params(
    model: *const AwjmModel,
    a: *mut f64,
    k: *mut f64,
    e: *mut f64,
    len: usize,
) -> AwjmStatus {
    guard(|| {
        let m = deref(model, "model")?;
        if !a.is_null() {
            *a = m.params.a();
        }
        if !k.is_null() {
            *k = m.params.k();
        }
        if !e.is_null() {
            expect_len("etch rate buffer", m.grid.n(), len)?;
            slice_mut(e, len, "etch rate buffer")?.copy_from_slice(m.params.e().as_slice());
        }
        Ok(())
    })
}

/// Final profile from a flat initial surface.
///
/// # Safety
/// `z_out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn awjm_model_forward(
    model: *const AwjmModel,
    z_out: *mut f64,
    len: usize,
) -> AwjmStatus {
    guard(|| {
        let m = deref(model, "model")?;
        expect_len("profile buffer", m.grid.n(), len)?;
        let out = slice_mut(z_out, len, "profile buffer")?;
        let z = model::final_profile(&m.params, &m.grid, &m.scheme, &vec![0.0; len]).or_status()?;
        out.copy_from_slice(&z);
        Ok(())
    })
}

/// Wraps `count` profiles stored back to back in `profiles`, each on the
/// model's grid.
///
/// # Safety
/// `profiles` must hold `count * nodes` doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn awjm_measurements_new(
    model: *const AwjmModel,
    profiles: *const f64,
    count: usize,
    combine: AwjmCombine,
    out: *mut *mut AwjmMeasurements,
) -> AwjmStatus {
    guard(|| {
        check_out(out)?;
        let m = deref(model, "model")?;
        let n = m.grid.n();
        let total = count
            .checked_mul(n)
            .ok_or_else(|| fail(AwjmStatus::InvalidArgument, "profile count overflows"))?;
        let data = slice(profiles, total, "profiles")?;
        let combine = match combine {
            AwjmCombine::Single => Combine::Single,
            AwjmCombine::Independent => Combine::Independent,
            AwjmCombine::Superposed => Combine::Superposed,
        };
        let set = MeasurementSet::new(
            m.grid,
            data.chunks(n).map(<[f64]>::to_vec).collect(),
            combine,
        )
        .or_status()?;
        *out = Box::into_raw(Box::new(AwjmMeasurements { set }));
        Ok(())
    })
}

/// # Safety
/// `meas` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn awjm_measurements_free(meas: *mut AwjmMeasurements) {
    if !meas.is_null() {
        drop(Box::from_raw(meas));
    }
}

/// Cost of `model` against `meas` and its adjoint gradient. For the
/// background regularizer the model itself is the background. `grad_e`
/// must hold `len` (node count) doubles; null output pointers are skipped.
///
/// # Safety
/// Handles must be live; non-null outputs writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn awjm_gradient(
    model: *const AwjmModel,
    meas: *const AwjmMeasurements,
    regularizer: AwjmRegularizer,
    alpha: f64,
    controls_mask: u32,
    cost: *mut AwjmCost,
    grad_a: *mut f64,
    grad_k: *mut f64,
    grad_e: *mut f64,
    len: usize,
) -> AwjmStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let meas = deref(meas, "measurements")?;
        let spec = cost_spec(m, regularizer, alpha, controls_mask)?;
        let (c, g) =
            adjoint::gradient(&m.params, &meas.set, &spec, &m.grid, &m.scheme).or_status()?;
        if !cost.is_null() {
            *cost = AwjmCost {
                misfit: c.misfit,
                regularization: c.regularization,
                total: c.total,
            };
        }
        if !grad_a.is_null() {
            *grad_a = g.a;
        }
        if !grad_k.is_null() {
            *grad_k = g.k;
        }
        if !grad_e.is_null() {
            expect_len("gradient buffer", m.grid.n(), len)?;
            slice_mut(grad_e, len, "gradient buffer")?.copy_from_slice(&g.e);
        }
        Ok(())
    })
}

/// Largest relative difference between the adjoint gradient and central
/// differences with relative step `h`, over every active control.
///
/// # Safety
/// Handles must be live; `max_rel_error` writable.
#[no_mangle]
pub unsafe extern "C" fn awjm_fd_check(
    model: *const AwjmModel,
    meas: *const AwjmMeasurements,
    regularizer: AwjmRegularizer,
    alpha: f64,
    controls_mask: u32,
    h: f64,
    max_rel_error: *mut f64,
) -> AwjmStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let meas = deref(meas, "measurements")?;
        if max_rel_error.is_null() {
            return Err(fail(AwjmStatus::NullPointer, "result pointer is null"));
        }
        let spec = cost_spec(m, regularizer, alpha, controls_mask)?;
        let comps = Component::all(m.grid.n());
        let rep = adjoint::fd_check(&m.params, &meas.set, &spec, &m.grid, &m.scheme, h, &comps)
            .or_status()?;
        *max_rel_error = rep.max_rel_error();
        Ok(())
    })
}

/// Minimizes the cost from `start` with projected L-BFGS (controls kept
/// nonnegative) and returns the optimum as a new model. `iterations` may be
/// null.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn awjm_identify(
    start: *const AwjmModel,
    meas: *const AwjmMeasurements,
    regularizer: AwjmRegularizer,
    alpha: f64,
    controls_mask: u32,
    max_iters: usize,
    out: *mut *mut AwjmModel,
    iterations: *mut usize,
) -> AwjmStatus {
    guard(|| {
        check_out(out)?;
        let m = deref(start, "start model")?;
        let meas = deref(meas, "measurements")?;
        let spec = cost_spec(m, regularizer, alpha, controls_mask)?;
        let cfg = OptConfig {
            max_iters,
            ..OptConfig::default()
        };
        let (params, trace) =
            optimizer::minimize(&m.params, &meas.set, &spec, &m.grid, &m.scheme, &cfg)
                .or_status()?;
        if !iterations.is_null() {
            *iterations = trace.iterations();
        }
        *out = Box::into_raw(Box::new(AwjmModel {
            params,
            grid: m.grid,
            scheme: m.scheme,
        }));
        Ok(())
    })
}
