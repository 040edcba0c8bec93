//! C ABI over `hybridpar`.
//!
//! Objects are opaque handles created by `hp_*_load`/`hp_*_build` and released
//! with the matching `hp_*_free`. Every fallible call returns an `HpStatus`;
//! on failure `hp_last_error_message` describes the error for the calling
//! thread until its next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hybridpar::cost::{CostProfile, LinkModel, PowerStates};
use hybridpar::error::Error;
use hybridpar::model::{demo_model, ModelGraph};
use hybridpar::netsim::{synth_trace, TraceKind};
use hybridpar::report::Report;
use hybridpar::runtime::sim::{simulate_session, SessionConfig};
use hybridpar::sched::{build_planbook, DeConfig, PlanBook};
use hybridpar::tensor::Tensor;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HpStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8, wrong buffer length or out-of-range value.
    InvalidArgument = 1,
    /// File could not be read or written.
    Io = 2,
    /// Malformed model, plan book or trace.
    Parse = 3,
    /// Tensor shapes do not agree with the model.
    Shape = 4,
    /// Plan book made for a different model.
    Checksum = 5,
    /// Search or simulation failed.
    Failed = 6,
    /// Internal panic; the library state is unchanged.
    Panic = 7,
}

/// Loaded model.
pub struct HpModel(ModelGraph);

/// Set of precomputed plans, one per bandwidth bucket.
pub struct HpPlanBook(PlanBook);

/// Synthetic bandwidth trace shapes for `hp_simulate`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HpTraceKind {
    Constant = 0,
    Indoor = 1,
    Outdoor = 2,
}

/// Session summary returned by `hp_simulate`. Times in seconds, energy in joules.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HpSimSummary {
    pub inferences: usize,
    pub wall_mean: f64,
    pub wall_rsd: f64,
    pub local_wall_mean: f64,
    pub pp_wall_mean: f64,
    pub energy_mean: f64,
    pub transmit_share_pct: f64,
    pub bandwidth_rsd: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(HpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) => HpStatus::Io,
            Error::Parse { .. } | Error::Model(_) | Error::Json(_) => HpStatus::Parse,
            Error::Shape(_) => HpStatus::Shape,
            Error::Checksum(_) => HpStatus::Checksum,
            Error::Invalid(_) => HpStatus::InvalidArgument,
            _ => HpStatus::Failed,
        };
        Fail(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(HpStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HpStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            HpStatus::Panic
        }
    }
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(invalid("null path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not UTF-8"))?;
    Ok(Path::new(s))
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(format!("null {what}")))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(invalid("null output pointer"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

/// Message for the last failing call on this thread, or null if none failed.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Reads a model description file. Relative weight paths resolve against the
/// file's directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_model_load(path_: *const c_char, out: *mut *mut HpModel) -> HpStatus {
    guard(|| {
        let g = ModelGraph::load(path(path_)?)?;
        put(out, HpModel(g))
    })
}

/// The built-in demonstration model.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_model_demo(out: *mut *mut HpModel) -> HpStatus {
    guard(|| put(out, HpModel(demo_model())))
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hp_model_free(model: *mut HpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of layers, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hp_model_layers(model: *const HpModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.len())
}

/// Element count of the model input.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hp_model_input_len(model: *const HpModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.input_spec().numel())
}

/// Element count of the model output.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hp_model_output_len(model: *const HpModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.output_spec().numel())
}

/// Runs the whole model locally on a row-major input buffer.
///
/// # Safety
/// `input` must hold `input_len` floats and `output` must have room for
/// `output_len` floats.
#[no_mangle]
pub unsafe extern "C" fn hp_model_infer(
    model: *const HpModel,
    input: *const f32,
    input_len: usize,
    output: *mut f32,
    output_len: usize,
) -> HpStatus {
    guard(|| {
        let g = &get(model, "model")?.0;
        if input.is_null() || output.is_null() {
            return Err(invalid("null buffer"));
        }
        let spec = g.input_spec().clone();
        if input_len != spec.numel() {
            return Err(invalid(format!(
                "input has {} elements, model expects {}",
                input_len,
                spec.numel()
            )));
        }
        let want = g.output_spec().numel();
        if output_len != want {
            return Err(invalid(format!(
                "output buffer has {} elements, model produces {}",
                output_len, want
            )));
        }
        let x = Tensor::new(spec, std::slice::from_raw_parts(input, input_len).to_vec())?;
        let y = g.infer_local(&x)?;
        std::slice::from_raw_parts_mut(output, output_len).copy_from_slice(y.data());
        Ok(())
    })
}

/// Solves one plan per bucket. The cost profile is FLOP-rate based: the robot
/// runs `robot_flops` FLOP/s and the server is `server_speedup` times faster.
///
/// # Safety
/// `buckets` must hold `n_buckets` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_planbook_build(
    model: *const HpModel,
    robot_flops: f64,
    server_speedup: f64,
    buckets: *const f64,
    n_buckets: usize,
    seed: u64,
    out: *mut *mut HpPlanBook,
) -> HpStatus {
    guard(|| {
        let g = &get(model, "model")?.0;
        if buckets.is_null() || n_buckets == 0 {
            return Err(invalid("no buckets"));
        }
        if !(robot_flops > 0.0 && server_speedup > 0.0) {
            return Err(invalid("robot_flops and server_speedup must be positive"));
        }
        let bw = std::slice::from_raw_parts(buckets, n_buckets);
        let profile = CostProfile::flop_rate(g, robot_flops, server_speedup, LinkModel::default());
        let cfg = DeConfig {
            seed,
            ..DeConfig::default()
        };
        let book = build_planbook(g, &profile, bw, &cfg, false, PowerStates::default())?;
        put(out, HpPlanBook(book))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_planbook_load(
    path_: *const c_char,
    out: *mut *mut HpPlanBook,
) -> HpStatus {
    guard(|| {
        let b = PlanBook::load(path(path_)?)?;
        put(out, HpPlanBook(b))
    })
}

/// # Safety
/// `book` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hp_planbook_save(
    book: *const HpPlanBook,
    path_: *const c_char,
) -> HpStatus {
    guard(|| Ok(get(book, "plan book")?.0.save(path(path_)?)?))
}

/// # Safety
/// `book` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hp_planbook_free(book: *mut HpPlanBook) {
    if !book.is_null() {
        drop(Box::from_raw(book));
    }
}

/// Number of buckets, or 0 for a null handle.
///
/// # Safety
/// `book` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hp_planbook_len(book: *const HpPlanBook) -> usize {
    book.as_ref().map_or(0, |b| b.0.buckets.len())
}

/// Bucket for a predicted bandwidth: the largest at or below it, else 0.
///
/// # Safety
/// `book` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_planbook_select(
    book: *const HpPlanBook,
    predicted_bps: f64,
    out: *mut usize,
) -> HpStatus {
    guard(|| {
        let b = &get(book, "plan book")?.0;
        if out.is_null() {
            return Err(invalid("null output pointer"));
        }
        *out = b.select(predicted_bps);
        Ok(())
    })
}

/// Bandwidth and predicted objective (seconds) of bucket `k`.
///
/// # Safety
/// `book` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_planbook_bucket(
    book: *const HpPlanBook,
    k: usize,
    bandwidth_bps: *mut f64,
    objective_s: *mut f64,
) -> HpStatus {
    guard(|| {
        let b = &get(book, "plan book")?.0;
        let bucket = b
            .buckets
            .get(k)
            .ok_or_else(|| invalid(format!("bucket {k} of {}", b.buckets.len())))?;
        if bandwidth_bps.is_null() || objective_s.is_null() {
            return Err(invalid("null output pointer"));
        }
        *bandwidth_bps = bucket.bandwidth_bps;
        *objective_s = bucket.plan.objective;
        Ok(())
    })
}

/// Simulates a session of back-to-back inferences over a synthetic trace.
/// `bandwidth_bps` is the level of a constant trace and ignored otherwise.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_simulate(
    model: *const HpModel,
    book: *const HpPlanBook,
    kind: HpTraceKind,
    bandwidth_bps: f64,
    duration_s: f64,
    seed: u64,
    out: *mut HpSimSummary,
) -> HpStatus {
    guard(|| {
        let g = &get(model, "model")?.0;
        let b = &get(book, "plan book")?.0;
        if out.is_null() {
            return Err(invalid("null output pointer"));
        }
        let kind = match kind {
            HpTraceKind::Constant => TraceKind::Constant(bandwidth_bps),
            HpTraceKind::Indoor => TraceKind::IndoorLike,
            HpTraceKind::Outdoor => TraceKind::OutdoorLike,
        };
        let trace = synth_trace(kind, duration_s, seed)?;
        let cfg = SessionConfig {
            seed,
            ..SessionConfig::default()
        };
        let s = simulate_session(g, b, &trace, &cfg)?;
        let r = Report::from_session(&s, &trace, &PowerStates::default())?;
        let wall = r.stat(|x| x.wall);
        *out = HpSimSummary {
            inferences: r.rows.len(),
            wall_mean: wall.mean,
            wall_rsd: wall.rsd(),
            local_wall_mean: r.stat(|x| x.local_wall).mean,
            pp_wall_mean: r.stat(|x| x.pp_wall).mean,
            energy_mean: r.stat(|x| x.energy).mean,
            transmit_share_pct: r.stat(|x| x.share_pct).mean,
            bandwidth_rsd: r.trace_bps.rsd(),
        };
        Ok(())
    })
}
