//! C ABI over the `dde` crate.
//!
//! Objects cross the boundary as opaque handles created by `*_new` or
//! `*_load` and released by the matching `*_free`. Every fallible call
//! returns a [`DdeStatus`]; on failure a message for the calling thread is
//! available from [`dde_last_error`]. Panics never unwind into C; they are
//! reported as `DDE_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dde::baselines::{method_loss, MethodKind, MethodSpec};
use dde::dde_core::{calibration_observation, CalibrationTable, LossContext, PairDraw, Role};
use dde::schedule::GaussianParams;
use dde::{Checkpoint, DdeError, NoisePredictor, PreferencePair, Schedule};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfRange = 3,
    DimensionMismatch = 4,
    ZeroVariance = 5,
    NonFinite = 6,
    Io = 7,
    Format = 8,
    Incompatible = 9,
    Internal = 99,
}

/// Which calibration array an update targets.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdeRole {
    TargetWinner = 0,
    TargetLoser = 1,
    ReferenceWinner = 2,
    ReferenceLoser = 3,
}

/// Training objective.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdeMethod {
    Dde = 0,
    DdeSingle = 1,
    DdeStep = 2,
    Uniform = 3,
    Discounted = 4,
    Sft = 5,
}

/// Opaque diffusion schedule.
pub struct DdeSchedule(Schedule);

/// Opaque noise predictor.
pub struct DdePredictor(NoisePredictor);

/// Opaque calibration table.
pub struct DdeCalibrationTable(CalibrationTable);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &DdeError) -> DdeStatus {
    match e {
        DdeError::InvalidRange(_)
        | DdeError::InvalidConfig(_)
        | DdeError::StepOrdering { .. }
        | DdeError::Empty(_)
        | DdeError::DegenerateReference { .. } => DdeStatus::InvalidArgument,
        DdeError::StepOutOfRange { .. } | DdeError::ClassOutOfRange { .. } | DdeError::IndexOutOfRange { .. } => {
            DdeStatus::OutOfRange
        }
        DdeError::DimensionMismatch { .. } => DdeStatus::DimensionMismatch,
        DdeError::ZeroVariance(_) => DdeStatus::ZeroVariance,
        DdeError::NonFinite { .. } => DdeStatus::NonFinite,
        DdeError::Io { .. } => DdeStatus::Io,
        DdeError::Format { .. } => DdeStatus::Format,
        DdeError::Incompatible(_) | DdeError::StateMismatch => DdeStatus::Incompatible,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Dde(DdeError),
}

impl From<DdeError> for Fail {
    fn from(e: DdeError) -> Self {
        Fail::Dde(e)
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DdeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DdeStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            DdeStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            DdeStatus::InvalidArgument
        }
        Ok(Err(Fail::Dde(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            DdeStatus::Internal
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn get_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out<T>(p: *mut T, v: T, what: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    p.write(v);
    Ok(())
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail::Arg("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn role(r: DdeRole) -> Role {
    match r {
        DdeRole::TargetWinner => Role::TargetW,
        DdeRole::TargetLoser => Role::TargetL,
        DdeRole::ReferenceWinner => Role::RefW,
        DdeRole::ReferenceLoser => Role::RefL,
    }
}

fn method(m: DdeMethod) -> MethodKind {
    match m {
        DdeMethod::Dde => MethodKind::Dde,
        DdeMethod::DdeSingle => MethodKind::DdeSingle,
        DdeMethod::DdeStep => MethodKind::DdeStep,
        DdeMethod::Uniform => MethodKind::Uniform,
        DdeMethod::Discounted => MethodKind::Discounted,
        DdeMethod::Sft => MethodKind::Sft,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dde_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dde_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

// ---------------------------------------------------------------------------
// Schedule

/// Linear-beta schedule with `steps` steps.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn dde_schedule_new_linear(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    out_schedule: *mut *mut DdeSchedule,
) -> DdeStatus {
    guard(|| {
        let s = Schedule::linear(steps, beta_start, beta_end)?;
        out(out_schedule, Box::into_raw(Box::new(DdeSchedule(s))), "out_schedule")
    })
}

/// # Safety
/// `schedule` must come from `dde_schedule_new_linear` and not be used
/// afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dde_schedule_free(schedule: *mut DdeSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Number of steps `T`, or 0 for a null handle.
///
/// # Safety
/// `schedule` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dde_schedule_steps(schedule: *const DdeSchedule) -> usize {
    schedule.as_ref().map_or(0, |s| s.0.steps())
}

/// `alpha_bar(t)` for `0 <= t <= T`.
///
/// # Safety
/// `schedule` must be a live handle and `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn dde_schedule_alpha_bar(
    schedule: *const DdeSchedule,
    t: usize,
    out_value: *mut f64,
) -> DdeStatus {
    guard(|| {
        let s = &get(schedule, "schedule")?.0;
        if t > s.steps() {
            return Err(DdeError::StepOutOfRange { t, max: s.steps() }.into());
        }
        out(out_value, s.alpha_bar(t), "out_value")
    })
}

/// Single-shot amplification `sqrt((1 - alpha_bar) / alpha_bar)` at step `t`.
///
/// # Safety
/// `schedule` must be a live handle and `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn dde_schedule_single_shot_coefficient(
    schedule: *const DdeSchedule,
    t: usize,
    out_value: *mut f64,
) -> DdeStatus {
    guard(|| {
        let s = &get(schedule, "schedule")?.0;
        s.check_step(t)?;
        out(out_value, s.single_shot_coefficient(t), "out_value")
    })
}

// ---------------------------------------------------------------------------
// Predictor

/// Loads the predictor stored in a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_predictor` writable.
#[no_mangle]
pub unsafe extern "C" fn dde_predictor_load(path_: *const c_char, out_predictor: *mut *mut DdePredictor) -> DdeStatus {
    guard(|| {
        let ck = Checkpoint::load(&path(path_)?)?;
        out(out_predictor, Box::into_raw(Box::new(DdePredictor(ck.predictor))), "out_predictor")
    })
}

/// Writes the predictor as a model-only checkpoint.
///
/// # Safety
/// `predictor` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dde_predictor_save(predictor: *const DdePredictor, path_: *const c_char) -> DdeStatus {
    guard(|| {
        let p = get(predictor, "predictor")?;
        Checkpoint::model_only(p.0.clone()).save(&path(path_)?)?;
        Ok(())
    })
}

/// # Safety
/// `predictor` must come from this library and not be used afterwards.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dde_predictor_free(predictor: *mut DdePredictor) {
    if !predictor.is_null() {
        drop(Box::from_raw(predictor));
    }
}

/// Data dimension `d`, or 0 for a null handle.
///
/// # Safety
/// `predictor` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dde_predictor_input_dim(predictor: *const DdePredictor) -> usize {
    predictor.as_ref().map_or(0, |p| p.0.architecture().input_dim)
}

/// Number of parameters, or 0 for a null handle.
///
/// # Safety
/// `predictor` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dde_predictor_num_params(predictor: *const DdePredictor) -> usize {
    predictor.as_ref().map_or(0, |p| p.0.num_params())
}

/// Predicted noise for `x_t` (length `dim`) at step `t` and `class`, written
/// to `out_eps` (length `dim`).
///
/// # Safety
/// Pointers must be valid for `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn dde_predictor_predict(
    predictor: *const DdePredictor,
    x_t: *const f64,
    dim: usize,
    t: usize,
    class: usize,
    out_eps: *mut f64,
) -> DdeStatus {
    guard(|| {
        let p = &get(predictor, "predictor")?.0;
        let x = slice(x_t, dim, "x_t")?;
        let eps = p.predict(x, t, class)?;
        if out_eps.is_null() {
            return Err(Fail::Null("out_eps"));
        }
        ptr::copy_nonoverlapping(eps.as_ptr(), out_eps, eps.len());
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Calibration

/// Zeroed table for `steps` indices with EMA rate `ema_decay`.
///
/// # Safety
/// `out_table` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dde_table_new(
    steps: usize,
    ema_decay: f64,
    out_table: *mut *mut DdeCalibrationTable,
) -> DdeStatus {
    guard(|| {
        let t = CalibrationTable::new(steps, ema_decay)?;
        out(out_table, Box::into_raw(Box::new(DdeCalibrationTable(t))), "out_table")
    })
}

/// # Safety
/// `table` must come from `dde_table_new` and not be used afterwards. Null
/// is ignored.
#[no_mangle]
pub unsafe extern "C" fn dde_table_free(table: *mut DdeCalibrationTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// One EMA step of entry `k` in `role` towards `observation`. The change in
/// the entry is written to `out_delta` when it is not null.
///
/// # Safety
/// `table` must be a live handle; `out_delta` null or writable.
#[no_mangle]
pub unsafe extern "C" fn dde_table_ema_update(
    table: *mut DdeCalibrationTable,
    role_: DdeRole,
    k: usize,
    observation: f64,
    out_delta: *mut f64,
) -> DdeStatus {
    guard(|| {
        let t = &mut get_mut(table, "table")?.0;
        let delta = t.ema_update(role(role_), k, observation)?;
        if !out_delta.is_null() {
            out_delta.write(delta);
        }
        Ok(())
    })
}

/// Reads entry `k` of `role`.
///
/// # Safety
/// `table` must be a live handle and `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn dde_table_get(
    table: *const DdeCalibrationTable,
    role_: DdeRole,
    k: usize,
    out_value: *mut f64,
) -> DdeStatus {
    guard(|| {
        let t = &get(table, "table")?.0;
        let arr = t.array(role(role_));
        let v = *arr.get(k).ok_or(DdeError::IndexOutOfRange { index: k, len: arr.len() })?;
        out(out_value, v, "out_value")
    })
}

/// Correction term for step `t`: the sum over `k = t..T-1` of the combined
/// calibration differences.
///
/// # Safety
/// `table` must be a live handle and `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn dde_table_correction_term(
    table: *const DdeCalibrationTable,
    t: usize,
    out_value: *mut f64,
) -> DdeStatus {
    guard(|| {
        let v = get(table, "table")?.0.correction_term(t)?;
        out(out_value, v, "out_value")
    })
}

/// Closed-form calibration observation at step `t >= 2` for a posterior and
/// a model mean of length `dim`, both with the schedule's posterior variance.
///
/// # Safety
/// Mean pointers must be valid for `dim` doubles; `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn dde_calibration_observation(
    schedule: *const DdeSchedule,
    posterior_mean: *const f64,
    model_mean: *const f64,
    dim: usize,
    t: usize,
    out_value: *mut f64,
) -> DdeStatus {
    guard(|| {
        let s = &get(schedule, "schedule")?.0;
        s.check_step(t)?;
        let var = s.posterior_var(t);
        let q = GaussianParams { mean: slice(posterior_mean, dim, "posterior_mean")?.to_vec(), var };
        let m = GaussianParams { mean: slice(model_mean, dim, "model_mean")?.to_vec(), var };
        out(out_value, calibration_observation(s, &q, &m, t)?, "out_value")
    })
}

// ---------------------------------------------------------------------------
// Loss

/// One preference pair and the noise used to diffuse it to step `t`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DdePairInput {
    pub class_index: usize,
    /// Winner sample, `dim` doubles.
    pub x0_winner: *const f64,
    /// Loser sample, `dim` doubles.
    pub x0_loser: *const f64,
    pub noise_winner: *const f64,
    pub noise_loser: *const f64,
    pub dim: usize,
    pub t: usize,
}

/// Scalar results of a loss evaluation. Fields that a method does not use
/// are zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DdeLossOutput {
    pub loss: f64,
    pub logit: f64,
    pub correction: f64,
    pub mse_target_winner: f64,
    pub mse_reference_winner: f64,
    pub mse_target_loser: f64,
    pub mse_reference_loser: f64,
}

/// Evaluates `method` for one pair. When `out_grad` is not null it receives
/// the gradient with respect to the target's parameters (`grad_len` must
/// equal the parameter count).
///
/// # Safety
/// Handles must be live, the pair pointers valid for `dim` doubles and
/// `out_grad` null or valid for `grad_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dde_pair_loss(
    schedule: *const DdeSchedule,
    target: *const DdePredictor,
    reference: *const DdePredictor,
    table: *const DdeCalibrationTable,
    method_: DdeMethod,
    beta_dpo: f64,
    pair: *const DdePairInput,
    out_loss: *mut DdeLossOutput,
    out_grad: *mut f64,
    grad_len: usize,
) -> DdeStatus {
    guard(|| {
        let s = &get(schedule, "schedule")?.0;
        let target = &get(target, "target")?.0;
        let reference = &get(reference, "reference")?.0;
        let table = &get(table, "table")?.0;
        let p = get(pair, "pair")?;
        let d = p.dim;
        let pp = PreferencePair {
            class: p.class_index,
            x0_w: slice(p.x0_winner, d, "x0_winner")?.to_vec(),
            x0_l: slice(p.x0_loser, d, "x0_loser")?.to_vec(),
            reward_w: 0.0,
            reward_l: 0.0,
        };
        let draw = PairDraw {
            t: p.t,
            noise_w: slice(p.noise_winner, d, "noise_winner")?.to_vec(),
            noise_l: slice(p.noise_loser, d, "noise_loser")?.to_vec(),
        };
        let want_grad = !out_grad.is_null();
        if want_grad && grad_len != target.num_params() {
            return Err(DdeError::DimensionMismatch { expected: target.num_params(), got: grad_len }.into());
        }
        let ctx = LossContext { schedule: s, target, reference, table, beta_dpo };
        let r = method_loss(&MethodSpec::new(method(method_)), &ctx, &pp, &draw, want_grad, false)?;
        let mut o = DdeLossOutput { loss: r.loss, ..DdeLossOutput::default() };
        if let Some(b) = r.breakdown {
            o.logit = b.logit;
            o.correction = b.correction;
            o.mse_target_winner = b.mse_target_w;
            o.mse_reference_winner = b.mse_ref_w;
            o.mse_target_loser = b.mse_target_l;
            o.mse_reference_loser = b.mse_ref_l;
        }
        out(out_loss, o, "out_loss")?;
        if let Some(g) = r.grad {
            ptr::copy_nonoverlapping(g.0.as_ptr(), out_grad, g.0.len());
        }
        Ok(())
    })
}
