//! C interface to the fedrel simulator.
//!
//! Every function returns an [`FrStatus`]; on failure the message is kept per
//! thread and read back with [`fr_last_error`]. Handles are opaque and owned by
//! the caller, who releases them with the matching `_free` function. Panics
//! never cross the boundary; they surface as `FR_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fedrel::federation::{Mode, RunResult};
use fedrel::harness::{gradcheck_suite, parse_config_str, run_experiment, ExperimentConfig};
use fedrel::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    UnknownMode = 4,
    InvalidArgument = 5,
    Numeric = 6,
    Participant = 7,
    Io = 8,
    OutOfRange = 9,
    Panic = 10,
    Internal = 11,
}

/// Experiment configuration handle.
pub struct FrConfig(ExperimentConfig);

/// Finished run: per-round metrics and the final global model.
pub struct FrRun(RunResult);

/// Metrics for one communication round.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct FrRoundMetrics {
    pub round: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub participants: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FrStatus {
    match e {
        Error::Config { .. } => FrStatus::Config,
        Error::UnknownMode(_) => FrStatus::UnknownMode,
        Error::NonFinite(_) => FrStatus::Numeric,
        Error::Participant { .. } => FrStatus::Participant,
        Error::Io { .. } => FrStatus::Io,
        Error::InvalidArgument(_) => FrStatus::InvalidArgument,
        _ => FrStatus::Internal,
    }
}

struct Failure(FrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FrStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FrStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(FrStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(FrStatus::InvalidUtf8, format!("{what}: {e}")))
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default configuration for `seed`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn fr_config_new(seed: u64, out: *mut *mut FrConfig) -> FrStatus {
    guard(|| {
        let out = borrow_mut(out, "out")?;
        *out = Box::into_raw(Box::new(FrConfig(ExperimentConfig::new(seed))));
        Ok(())
    })
}

/// Parses and validates a TOML experiment config.
///
/// # Safety
/// `toml` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fr_config_parse(toml: *const c_char, out: *mut *mut FrConfig) -> FrStatus {
    guard(|| {
        let out = borrow_mut(out, "out")?;
        let cfg = parse_config_str(text(toml, "toml")?)?;
        *out = Box::into_raw(Box::new(FrConfig(cfg)));
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from `fr_config_new`/`fr_config_parse` or be null.
#[no_mangle]
pub unsafe extern "C" fn fr_config_free(cfg: *mut FrConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// # Safety
/// `cfg` must be a live config handle; `mode` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fr_config_set_mode(cfg: *mut FrConfig, mode: *const c_char) -> FrStatus {
    guard(|| {
        let cfg = borrow_mut(cfg, "cfg")?;
        cfg.0.mode = text(mode, "mode")?.parse::<Mode>()?;
        Ok(())
    })
}

/// Sets participants, rounds and the dataset size; zero keeps the current
/// value. The result is validated before it is stored.
///
/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn fr_config_set_sizes(cfg: *mut FrConfig, participants: usize, rounds: usize, sequences: usize) -> FrStatus {
    guard(|| {
        let cfg = borrow_mut(cfg, "cfg")?;
        let mut next = cfg.0.clone();
        if participants > 0 {
            next.federation.participants = participants;
        }
        if rounds > 0 {
            next.federation.rounds = rounds;
        }
        if sequences > 0 {
            next.data.generator.sequences = sequences;
        }
        next.validate()?;
        cfg.0 = next;
        Ok(())
    })
}

/// Runs the configured experiment to completion.
///
/// # Safety
/// `cfg` must be a live config handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fr_run(cfg: *const FrConfig, out: *mut *mut FrRun) -> FrStatus {
    guard(|| {
        let cfg = borrow(cfg, "cfg")?;
        let out = borrow_mut(out, "out")?;
        let result = run_experiment(&cfg.0, |_| {})?;
        *out = Box::into_raw(Box::new(FrRun(result)));
        Ok(())
    })
}

/// # Safety
/// `run` must come from `fr_run` or be null.
#[no_mangle]
pub unsafe extern "C" fn fr_run_free(run: *mut FrRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of recorded rounds; 0 for a null handle.
///
/// # Safety
/// `run` must be a live run handle or null.
#[no_mangle]
pub unsafe extern "C" fn fr_run_rounds(run: *const FrRun) -> usize {
    run.as_ref().map_or(0, |r| r.0.metrics.len())
}

/// Metrics of the `index`-th round (0-based).
///
/// # Safety
/// `run` must be a live run handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fr_run_round(run: *const FrRun, index: usize, out: *mut FrRoundMetrics) -> FrStatus {
    guard(|| {
        let run = borrow(run, "run")?;
        let out = borrow_mut(out, "out")?;
        let m = run.0.metrics.get(index).ok_or_else(|| {
            Failure(FrStatus::OutOfRange, format!("round index {index} of {}", run.0.metrics.len()))
        })?;
        *out = FrRoundMetrics {
            round: m.round,
            loss: m.global_loss,
            accuracy: m.global_acc,
            macro_f1: m.global_macro_f1,
            participants: m.relevance.len(),
        };
        Ok(())
    })
}

/// Copies the aggregation weights of round `index` into `weights`, which must
/// hold `len` values; `len` must be at least the participant count.
///
/// # Safety
/// `run` must be a live run handle; `weights` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fr_run_relevance(run: *const FrRun, index: usize, weights: *mut f64, len: usize) -> FrStatus {
    guard(|| {
        let run = borrow(run, "run")?;
        if weights.is_null() {
            return Err(null("weights"));
        }
        let m = run.0.metrics.get(index).ok_or_else(|| {
            Failure(FrStatus::OutOfRange, format!("round index {index} of {}", run.0.metrics.len()))
        })?;
        if len < m.relevance.len() {
            return Err(Failure(
                FrStatus::OutOfRange,
                format!("buffer holds {len} weights, round has {}", m.relevance.len()),
            ));
        }
        std::slice::from_raw_parts_mut(weights, m.relevance.len()).copy_from_slice(&m.relevance);
        Ok(())
    })
}

/// Best test macro-F1 across rounds.
///
/// # Safety
/// `run` must be a live run handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fr_run_best_macro_f1(run: *const FrRun, out: *mut f64) -> FrStatus {
    guard(|| {
        *borrow_mut(out, "out")? = borrow(run, "run")?.0.best_macro_f1();
        Ok(())
    })
}

/// Runs the finite-difference gradient suite and reports the worst relative
/// error.
///
/// # Safety
/// `max_relative_error` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fr_gradcheck(seed: u64, max_relative_error: *mut f64) -> FrStatus {
    guard(|| {
        let out = borrow_mut(max_relative_error, "max_relative_error")?;
        *out = gradcheck_suite(seed)?
            .iter()
            .map(|(_, r)| r.max_relative_error)
            .fold(0.0, f64::max);
        Ok(())
    })
}
