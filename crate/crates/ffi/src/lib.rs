//! C interface: opaque instance and model handles, integer status codes and
//! a thread-local last-error message.
//!
//! Every function returns [`COLM_OK`] on success or a nonzero status. Codes
//! 10 and above mirror the core error codes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use colm::experts::solve_expert;
use colm::model::{load_checkpoint, Model, ModelConfig};
use colm::problems::{generate_instance, verify_solution, ProblemInstance, ProblemKind};
use colm::solver::{solve, DecodeStrategy};
use colm::tokenizer::{continuous_to_token, mu_law_encode};
use colm::Error;

pub const COLM_OK: i32 = 0;
pub const COLM_ERR_NULL: i32 = 1;
pub const COLM_ERR_UTF8: i32 = 2;
/// Output buffer too small; the required length is still written.
pub const COLM_ERR_BUFFER: i32 = 3;
pub const COLM_ERR_PANIC: i32 = 4;

/// A problem instance.
pub struct ColmInstance(ProblemInstance);

/// Sequence-model parameters used for decoding.
pub struct ColmModel(Model<f32>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Fail {
    Code(i32, String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => COLM_OK,
        Ok(Err(Fail::Code(c, m))) => {
            set_error(m);
            c
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(format!("{}: {e}", e.name()));
            e.code()
        }
        Err(_) => {
            set_error("panic inside colm".into());
            COLM_ERR_PANIC
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Code(COLM_ERR_NULL, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Code(COLM_ERR_UTF8, format!("{what} is not UTF-8")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn write_actions(actions: &[usize], buf: *mut usize, cap: usize, len: *mut usize) -> Result<(), Fail> {
    *out(len, "out_len")? = actions.len();
    if actions.len() > cap {
        return Err(Fail::Code(COLM_ERR_BUFFER, format!("{} actions do not fit in {cap}", actions.len())));
    }
    if !actions.is_empty() {
        if buf.is_null() {
            return Err(null("actions"));
        }
        ptr::copy_nonoverlapping(actions.as_ptr(), buf, actions.len());
    }
    Ok(())
}

/// Message of the last failure on this thread; valid until the next call
/// that fails.
#[no_mangle]
pub extern "C" fn colm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `kind` must be a NUL-terminated string and `out_instance` writable.
#[no_mangle]
pub unsafe extern "C" fn colm_instance_generate(
    kind: *const c_char,
    n: usize,
    seed: u64,
    out_instance: *mut *mut ColmInstance,
) -> i32 {
    guard(|| {
        let k: ProblemKind = text(kind, "kind")?.parse()?;
        let slot = out(out_instance, "out_instance")?;
        *slot = Box::into_raw(Box::new(ColmInstance(generate_instance(k, n, seed)?)));
        Ok(())
    })
}

/// Parses one JSON instance line.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out_instance` writable.
#[no_mangle]
pub unsafe extern "C" fn colm_instance_from_json(json: *const c_char, out_instance: *mut *mut ColmInstance) -> i32 {
    guard(|| {
        let inst = ProblemInstance::from_json_line(text(json, "json")?)?;
        *out(out_instance, "out_instance")? = Box::into_raw(Box::new(ColmInstance(inst)));
        Ok(())
    })
}

/// # Safety
/// `instance` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn colm_instance_free(instance: *mut ColmInstance) {
    if !instance.is_null() {
        drop(Box::from_raw(instance));
    }
}

/// Size of the action space (one past the largest action index).
///
/// # Safety
/// `instance` must be a live handle and `out_size` writable.
#[no_mangle]
pub unsafe extern "C" fn colm_instance_action_space(instance: *const ColmInstance, out_size: *mut usize) -> i32 {
    guard(|| {
        let inst = &instance.as_ref().ok_or_else(|| null("instance"))?.0;
        *out(out_size, "out_size")? = inst.kind.action_space(inst.n);
        Ok(())
    })
}

/// Solves with the expert: exact up to `exact_limit` nodes, heuristic beyond.
///
/// # Safety
/// `instance` must be a live handle; `actions` must hold `cap` entries;
/// `out_len` and `out_objective` must be writable.
#[no_mangle]
pub unsafe extern "C" fn colm_expert_solve(
    instance: *const ColmInstance,
    exact_limit: usize,
    actions: *mut usize,
    cap: usize,
    out_len: *mut usize,
    out_objective: *mut f64,
) -> i32 {
    guard(|| {
        let inst = &instance.as_ref().ok_or_else(|| null("instance"))?.0;
        let sol = solve_expert(inst, exact_limit)?;
        *out(out_objective, "out_objective")? = sol.objective;
        write_actions(&sol.actions, actions, cap, out_len)
    })
}

/// Replays `actions` with independent constraint checks. Infeasible input
/// is not an error: `out_feasible` is set to 0.
///
/// # Safety
/// `instance` must be a live handle; `actions` must hold `len` entries.
#[no_mangle]
pub unsafe extern "C" fn colm_verify(
    instance: *const ColmInstance,
    actions: *const usize,
    len: usize,
    out_feasible: *mut bool,
    out_objective: *mut f64,
) -> i32 {
    guard(|| {
        let inst = &instance.as_ref().ok_or_else(|| null("instance"))?.0;
        let acts: &[usize] = if len == 0 {
            &[]
        } else if actions.is_null() {
            return Err(null("actions"));
        } else {
            std::slice::from_raw_parts(actions, len)
        };
        let v = verify_solution(inst, acts);
        *out(out_feasible, "out_feasible")? = v.feasible;
        *out(out_objective, "out_objective")? = if v.feasible { v.objective } else { f64::NAN };
        Ok(())
    })
}

/// Randomly initialized model from a named preset (`default`, `desk`, `tiny`).
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn colm_model_init(preset: *const c_char, seed: u64, out_model: *mut *mut ColmModel) -> i32 {
    guard(|| {
        let cfg = ModelConfig::preset(text(preset, "preset")?)?;
        *out(out_model, "out_model")? = Box::into_raw(Box::new(ColmModel(Model::init(cfg, seed)?)));
        Ok(())
    })
}

/// Loads a checkpoint directory; fails with the compatibility code when its
/// vocabulary differs from the tokenizer's.
///
/// # Safety
/// `dir` must be a NUL-terminated path and `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn colm_model_load(dir: *const c_char, out_model: *mut *mut ColmModel) -> i32 {
    guard(|| {
        let ck = load_checkpoint::<f32>(Path::new(text(dir, "dir")?))?;
        *out(out_model, "out_model")? = Box::into_raw(Box::new(ColmModel(ck.model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn colm_model_free(model: *mut ColmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Decodes a solution. `samples <= 1` decodes greedily; otherwise the best
/// of `samples` rollouts at `temperature` is returned.
///
/// # Safety
/// Handles must be live; `actions` must hold `cap` entries; `out_len` and
/// `out_objective` must be writable.
#[no_mangle]
pub unsafe extern "C" fn colm_solve(
    model: *const ColmModel,
    instance: *const ColmInstance,
    samples: usize,
    temperature: f64,
    seed: u64,
    actions: *mut usize,
    cap: usize,
    out_len: *mut usize,
    out_objective: *mut f64,
) -> i32 {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let inst = &instance.as_ref().ok_or_else(|| null("instance"))?.0;
        let strategy = if samples <= 1 {
            DecodeStrategy::greedy()
        } else {
            DecodeStrategy { temperature, ..DecodeStrategy::sample(samples, seed) }
        };
        let sol = solve(inst, m, &strategy)?;
        *out(out_objective, "out_objective")? = sol.objective;
        write_actions(&sol.actions, actions, cap, out_len)
    })
}

/// # Safety
/// `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn colm_mu_law_encode(x: f64, out_value: *mut f64) -> i32 {
    guard(|| {
        *out(out_value, "out_value")? = mu_law_encode(x)?;
        Ok(())
    })
}

/// # Safety
/// `out_token` must be writable.
#[no_mangle]
pub unsafe extern "C" fn colm_continuous_to_token(x: f64, out_token: *mut u32) -> i32 {
    guard(|| {
        *out(out_token, "out_token")? = continuous_to_token(x)?;
        Ok(())
    })
}
