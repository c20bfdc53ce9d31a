//! C ABI over the lastrank serving engine.
//!
//! An engine is created from an actor and an evaluator checkpoint and is
//! only ever seen by C as an opaque pointer. Every fallible call returns an
//! [`LrStatus`]; on failure a message for the calling thread is available
//! from [`lr_last_error_message`]. Serving never mutates the engine, so one
//! engine may be shared across threads.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use lastrank::checkpoint::{load_checkpoint, param_fingerprint};
use lastrank::evaluator::{gather_rows, ndcg_at_k};
use lastrank::last::{serve, LastConfig, Policy};
use lastrank::{ActorModel, Error, EvaluatorModel, Request, Tensor};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    SchemaVersion = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// Serving policies, as accepted by [`lr_engine_serve`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrPolicy {
    Greedy = 0,
    Sampling = 1,
    Last = 2,
    Cascade = 3,
}

/// Opaque serving engine.
pub struct LrEngine {
    actor: ActorModel,
    evaluator: EvaluatorModel,
    config: LastConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> LrStatus {
    match err {
        Error::Io { .. } => LrStatus::Io,
        Error::Parse { .. } | Error::Json(_) => LrStatus::Parse,
        Error::SchemaVersion { .. } => LrStatus::SchemaVersion,
        Error::Contract(_) | Error::Config(_) | Error::UnknownParam(_) => LrStatus::InvalidArgument,
    }
}

struct Failure(LrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(LrStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(LrStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LrStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LrStatus::Internal
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

fn policy_of(code: i32) -> Result<Policy, Failure> {
    match code {
        0 => Ok(Policy::Greedy),
        1 => Ok(Policy::Sampling),
        2 => Ok(Policy::Last),
        3 => Ok(Policy::Cascade),
        other => Err(invalid(format!("unknown policy code {other}"))),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread, or null if the last
/// call succeeded. Valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn lr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads an engine from an actor and an evaluator checkpoint. On success
/// `*out` owns the engine; release it with [`lr_engine_free`].
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lr_engine_load(
    actor_path: *const c_char,
    evaluator_path: *const c_char,
    out: *mut *mut LrEngine,
) -> LrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let actor = load_checkpoint(path_arg(actor_path, "actor_path")?)?.into_actor()?;
        let evaluator = load_checkpoint(path_arg(evaluator_path, "evaluator_path")?)?.into_evaluator()?;
        let (a, e) = (actor.dims(), evaluator.dims());
        if a.user_dim != e.user_dim || a.item_dim != e.item_dim {
            return Err(invalid("actor and evaluator feature sizes differ"));
        }
        let config = LastConfig::for_actor(&actor);
        *out = Box::into_raw(Box::new(LrEngine {
            actor,
            evaluator,
            config,
        }));
        Ok(())
    })
}

/// Releases an engine. Null is ignored.
///
/// # Safety
/// `engine` must come from [`lr_engine_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lr_engine_free(engine: *mut LrEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Feature sizes the engine expects.
///
/// # Safety
/// `engine` must be live; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn lr_engine_dims(
    engine: *const LrEngine,
    user_dim: *mut usize,
    item_dim: *mut usize,
) -> LrStatus {
    guard(|| {
        let e = engine.as_ref().ok_or_else(|| null("engine"))?;
        if user_dim.is_null() || item_dim.is_null() {
            return Err(null("dims out"));
        }
        *user_dim = e.actor.dims().user_dim;
        *item_dim = e.actor.dims().item_dim;
        Ok(())
    })
}

/// Sets the normalization factor α (default 0.01).
///
/// # Safety
/// `engine` must be live and not used concurrently.
#[no_mangle]
pub unsafe extern "C" fn lr_engine_set_alpha(engine: *mut LrEngine, alpha: f64) -> LrStatus {
    guard(|| {
        let e = engine.as_mut().ok_or_else(|| null("engine"))?;
        let mut cfg = e.config.clone();
        cfg.alpha = alpha;
        cfg.validate()?;
        e.config = cfg;
        Ok(())
    })
}

/// Sets the step sizes tried by parallel LAST; they must include 0. The
/// sampling policy draws as many lists as there are step sizes.
///
/// # Safety
/// `engine` must be live and not used concurrently; `steps` must hold
/// `len` values.
#[no_mangle]
pub unsafe extern "C" fn lr_engine_set_step_sizes(engine: *mut LrEngine, steps: *const f64, len: usize) -> LrStatus {
    guard(|| {
        let e = engine.as_mut().ok_or_else(|| null("engine"))?;
        let mut cfg = e.config.clone();
        cfg.step_sizes = slice_arg(steps, len, "steps")?.to_vec();
        cfg.validate()?;
        e.config = cfg;
        Ok(())
    })
}

/// Sets the seed of the sampling-based policies.
///
/// # Safety
/// `engine` must be live and not used concurrently.
#[no_mangle]
pub unsafe extern "C" fn lr_engine_set_seed(engine: *mut LrEngine, seed: u64) -> LrStatus {
    guard(|| {
        let e = engine.as_mut().ok_or_else(|| null("engine"))?;
        e.config.seed = seed;
        Ok(())
    })
}

/// Serves one request. `candidates` is row-major `num_candidates × item_dim`.
/// Writes `list_len` candidate indices to `order_out`, plus the chosen step
/// size and the evaluator score of the served list.
///
/// # Safety
/// `engine` must be live; buffers must hold the stated lengths; out
/// pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn lr_engine_serve(
    engine: *const LrEngine,
    policy: i32,
    user: *const f64,
    user_len: usize,
    candidates: *const f64,
    num_candidates: usize,
    item_dim: usize,
    list_len: usize,
    order_out: *mut usize,
    order_cap: usize,
    eta_star_out: *mut f64,
    score_out: *mut f64,
) -> LrStatus {
    guard(|| {
        let e = engine.as_ref().ok_or_else(|| null("engine"))?;
        let policy = policy_of(policy)?;
        if order_out.is_null() || eta_star_out.is_null() || score_out.is_null() {
            return Err(null("output buffer"));
        }
        if order_cap < list_len {
            return Err(Failure(
                LrStatus::BufferTooSmall,
                format!("order buffer holds {order_cap}, list needs {list_len}"),
            ));
        }
        let dims = e.actor.dims();
        if user_len != dims.user_dim || item_dim != dims.item_dim {
            return Err(invalid(format!(
                "expected user_dim {} and item_dim {}, got {user_len} and {item_dim}",
                dims.user_dim, dims.item_dim
            )));
        }
        let user = slice_arg(user, user_len, "user")?.to_vec();
        let total = num_candidates
            .checked_mul(item_dim)
            .ok_or_else(|| invalid("candidate matrix too large"))?;
        let cands = slice_arg(candidates, total, "candidates")?.to_vec();
        let request = Request::from_tensor(user, Tensor::new(vec![num_candidates, item_dim], cands)?, list_len)?;
        let served = serve(
            policy,
            &e.actor,
            &request,
            |order| {
                let items = gather_rows(request.candidates(), order)?;
                e.evaluator.evaluator_at_n(request.user(), &items, order.len())
            },
            &e.config,
        )?;
        slice::from_raw_parts_mut(order_out, list_len).copy_from_slice(&served.list.order);
        *eta_star_out = served.eta_star;
        *score_out = served.score;
        Ok(())
    })
}

/// Hash of the actor parameters; unchanged by any number of serve calls.
///
/// # Safety
/// `engine` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lr_engine_fingerprint(engine: *const LrEngine, out: *mut u64) -> LrStatus {
    guard(|| {
        let e = engine.as_ref().ok_or_else(|| null("engine"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = param_fingerprint(e.actor.params());
        Ok(())
    })
}

/// NDCG@k of binary relevance labels in presented order.
///
/// # Safety
/// `labels` must hold `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lr_ndcg_at_k(labels: *const u8, len: usize, k: usize, out: *mut f64) -> LrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let labels = slice_arg(labels, len, "labels")?;
        if labels.iter().any(|&l| l > 1) {
            return Err(invalid("labels must be 0 or 1"));
        }
        *out = ndcg_at_k(labels, k);
        Ok(())
    })
}
