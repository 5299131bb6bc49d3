//! C ABI over `arlab-core`.
//!
//! Objects are opaque handles created by `arlab_*` constructors and
//! released with the matching `*_free`. Every fallible call returns an
//! [`ArlabStatus`]; on failure a message is kept per thread and can be read
//! with [`arlab_last_error`]. Strings handed out by the library must be
//! released with [`arlab_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use arlab_core::harness::{run_experiment, ExperimentConfig, RunSummary};
use arlab_core::mdp::{value_iteration, EpisodicMdp};
use arlab_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result codes of the C interface.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ConfigError = 3,
    GenerationFailure = 4,
    IoError = 5,
    ParseError = 6,
    Internal = 7,
}

/// A finite episodic MDP.
pub struct ArlabMdp(EpisodicMdp);

/// Results of an experiment run.
pub struct ArlabSummary(RunSummary);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> ArlabStatus {
    match e {
        Error::Config { .. } | Error::InfeasibleProfile(_) => ArlabStatus::ConfigError,
        Error::GenerationFailure { .. } => ArlabStatus::GenerationFailure,
        Error::Io(_) | Error::Csv(_) => ArlabStatus::IoError,
        Error::Parse(_) => ArlabStatus::ParseError,
        _ => ArlabStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (ArlabStatus, String)>) -> ArlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ArlabStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ArlabStatus::Internal
        }
    }
}

fn lib(e: Error) -> (ArlabStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (ArlabStatus, String) {
    (ArlabStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (ArlabStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (ArlabStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<(), (ArlabStatus, String)> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, (ArlabStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

fn owned_string(s: String) -> Result<*mut c_char, (ArlabStatus, String)> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| (ArlabStatus::Internal, "string contains a NUL byte".into()))
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn arlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn arlab_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn arlab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Random MDP with Dirichlet kernel rows and uniform rewards in `[0, 1]`.
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn arlab_mdp_random(
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    seed: u64,
    out: *mut *mut ArlabMdp,
) -> ArlabStatus {
    guard(|| {
        if n_states == 0 || n_actions == 0 || horizon == 0 {
            return Err((ArlabStatus::InvalidArgument, "sizes must be positive".into()));
        }
        let mdp = EpisodicMdp::random(n_states, n_actions, horizon, &mut ChaCha8Rng::seed_from_u64(seed));
        write(out, Box::into_raw(Box::new(ArlabMdp(mdp))), "out")
    })
}

/// Parses an MDP from its JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn arlab_mdp_from_json(json: *const c_char, out: *mut *mut ArlabMdp) -> ArlabStatus {
    guard(|| {
        let mdp = EpisodicMdp::from_json(text(json, "json")?).map_err(lib)?;
        write(out, Box::into_raw(Box::new(ArlabMdp(mdp))), "out")
    })
}

/// Serializes an MDP; release the result with `arlab_string_free`.
///
/// # Safety
/// `mdp` must be a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn arlab_mdp_to_json(mdp: *const ArlabMdp, out: *mut *mut c_char) -> ArlabStatus {
    guard(|| {
        let json = get(mdp, "mdp")?.0.to_json().map_err(lib)?;
        write(out, owned_string(json)?, "out")
    })
}

/// `V*_1(s_1)`.
///
/// # Safety
/// `mdp` must be a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn arlab_mdp_optimal_value(mdp: *const ArlabMdp, out: *mut f64) -> ArlabStatus {
    guard(|| {
        let m = &get(mdp, "mdp")?.0;
        let (v, _) = value_iteration(&m.kernel, &m.reward, m.horizon);
        write(out, v.v(0)[m.initial_state], "out")
    })
}

/// Writes the number of states, actions and the horizon.
///
/// # Safety
/// `mdp` must be a live handle; the out pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn arlab_mdp_shape(
    mdp: *const ArlabMdp,
    n_states: *mut usize,
    n_actions: *mut usize,
    horizon: *mut usize,
) -> ArlabStatus {
    guard(|| {
        let m = &get(mdp, "mdp")?.0;
        write(n_states, m.n_states(), "n_states")?;
        write(n_actions, m.n_actions(), "n_actions")?;
        write(horizon, m.horizon, "horizon")
    })
}

/// # Safety
/// `mdp` must be NULL or a handle that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn arlab_mdp_free(mdp: *mut ArlabMdp) {
    if !mdp.is_null() {
        drop(Box::from_raw(mdp));
    }
}

/// Runs an experiment described by a TOML document.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn arlab_experiment_run(config_toml: *const c_char, out: *mut *mut ArlabSummary) -> ArlabStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_toml(text(config_toml, "config_toml")?).map_err(lib)?;
        let summary = run_experiment(&cfg).map_err(lib)?;
        write(out, Box::into_raw(Box::new(ArlabSummary(summary))), "out")
    })
}

/// # Safety
/// `summary` must be a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn arlab_summary_seed_count(summary: *const ArlabSummary, out: *mut usize) -> ArlabStatus {
    guard(|| write(out, get(summary, "summary")?.0.seeds.len(), "out"))
}

/// Final cumulative regret of the `position`-th seed.
///
/// # Safety
/// `summary` must be a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn arlab_summary_final_regret(
    summary: *const ArlabSummary,
    position: usize,
    out: *mut f64,
) -> ArlabStatus {
    guard(|| {
        let s = &get(summary, "summary")?.0;
        let row = s
            .seeds
            .get(position)
            .ok_or_else(|| (ArlabStatus::InvalidArgument, format!("seed position {position} out of range")))?;
        write(out, row.final_regret, "out")
    })
}

/// # Safety
/// `summary` must be a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn arlab_summary_median_regret(summary: *const ArlabSummary, out: *mut f64) -> ArlabStatus {
    guard(|| write(out, get(summary, "summary")?.0.aggregate.median_final_regret, "out"))
}

/// Lock-in rate, or NaN for scenarios without a lock-in notion.
///
/// # Safety
/// `summary` must be a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn arlab_summary_lock_in_rate(summary: *const ArlabSummary, out: *mut f64) -> ArlabStatus {
    guard(|| write(out, get(summary, "summary")?.0.aggregate.lock_in_rate.unwrap_or(f64::NAN), "out"))
}

/// Hex SHA-256 digest of the result tables; release with `arlab_string_free`.
///
/// # Safety
/// `summary` must be a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn arlab_summary_digest(summary: *const ArlabSummary, out: *mut *mut c_char) -> ArlabStatus {
    guard(|| write(out, owned_string(get(summary, "summary")?.0.digest.clone())?, "out"))
}

/// Full summary document; release with `arlab_string_free`.
///
/// # Safety
/// `summary` must be a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn arlab_summary_to_json(summary: *const ArlabSummary, out: *mut *mut c_char) -> ArlabStatus {
    guard(|| {
        let json = get(summary, "summary")?.0.to_json().map_err(lib)?;
        write(out, owned_string(json)?, "out")
    })
}

/// # Safety
/// `summary` must be NULL or a handle that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn arlab_summary_free(summary: *mut ArlabSummary) {
    if !summary.is_null() {
        drop(Box::from_raw(summary));
    }
}
