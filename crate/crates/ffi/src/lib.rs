//! C interface to the warehouse simulator and trained policies.
//!
//! Every fallible function returns a [`WmStatus`]; on failure the message is
//! available from [`wm_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use warehouse_marl::checkpoint::Checkpoint;
use warehouse_marl::env::{joint_action_count, EnvConfig, JointAction, Layout, Warehouse};
use warehouse_marl::harness::policy::{flat_obs, EpisodeActor};
use warehouse_marl::harness::{epsilon_at, evaluate_checkpoint, LoadedPolicy, TrainConfig};
use warehouse_marl::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Config = 4,
    Environment = 5,
    EpisodeDone = 6,
    Checkpoint = 7,
    Incompatible = 8,
    Io = 9,
    Internal = 10,
}

/// Simulator instance.
pub struct WmEnv {
    env: Warehouse,
}

/// Greedy policy plus its per-episode recurrent state.
pub struct WmPolicy {
    policy: LoadedPolicy,
    actor: EpisodeActor,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> WmStatus {
    match e {
        Error::Config(_) => WmStatus::Config,
        Error::EnvConfig(_) | Error::Layout { .. } | Error::Placement(_) => WmStatus::Environment,
        Error::Action(_) | Error::Shape(_) => WmStatus::InvalidArgument,
        Error::EpisodeDone => WmStatus::EpisodeDone,
        Error::Checkpoint(_) => WmStatus::Checkpoint,
        Error::Incompatible(_) => WmStatus::Incompatible,
        Error::Io(_) => WmStatus::Io,
        _ => WmStatus::Internal,
    }
}

struct Fail(WmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> WmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WmStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            WmStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(WmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(WmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err(Fail(
            WmStatus::BufferTooSmall,
            format!("{what} holds {len} values, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn env_ref<'a>(env: *const WmEnv) -> Result<&'a WmEnv, Fail> {
    env.as_ref().ok_or_else(|| null("env"))
}

unsafe fn env_mut<'a>(env: *mut WmEnv) -> Result<&'a mut WmEnv, Fail> {
    env.as_mut().ok_or_else(|| null("env"))
}

fn write_obs(dst: &mut [f64], obs: &[f64]) {
    dst.copy_from_slice(obs);
}

/// Message of the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn wm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Number of joint actions for `n_agents` agents with five actions each.
/// Returns 0 when the count does not fit in 64 bits.
#[no_mangle]
pub extern "C" fn wm_joint_action_count(n_agents: usize) -> u64 {
    u64::try_from(joint_action_count(n_agents)).unwrap_or(0)
}

/// Linear exploration schedule, constant at `end` after `anneal_steps`.
#[no_mangle]
pub extern "C" fn wm_epsilon_at(step: u64, start: f64, end: f64, anneal_steps: u64) -> f64 {
    let mut cfg = TrainConfig::default();
    cfg.epsilon_start = start;
    cfg.epsilon_end = end;
    cfg.epsilon_anneal_steps = anneal_steps;
    epsilon_at(step, &cfg)
}

fn new_env(cfg: EnvConfig, out: *mut *mut WmEnv) -> Result<(), Fail> {
    let env = Warehouse::new(cfg)?;
    unsafe { *out = Box::into_raw(Box::new(WmEnv { env })) };
    Ok(())
}

/// Creates an environment from a named preset such as `"tiny-2ag"`.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn wm_env_new_preset(name: *const c_char, out: *mut *mut WmEnv) -> WmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        new_env(EnvConfig::preset(text(name, "name")?)?, out)
    })
}

/// Creates an environment from layout text: a `height width` header, then
/// rows of `.` (floor), `S` (shelf slot) and `G` (goal).
///
/// # Safety
/// `layout` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn wm_env_new_layout(layout: *const c_char, n_agents: usize, out: *mut *mut WmEnv) -> WmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let layout = Layout::parse(text(layout, "layout")?)?;
        new_env(EnvConfig::from_layout("custom", layout, n_agents), out)
    })
}

/// # Safety
/// `env` must come from a `wm_env_new_*` call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wm_env_free(env: *mut WmEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// # Safety
/// `env` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn wm_env_n_agents(env: *const WmEnv) -> usize {
    env.as_ref().map_or(0, |e| e.env.n_agents())
}

/// Length of one agent's observation.
///
/// # Safety
/// `env` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn wm_env_obs_dim(env: *const WmEnv) -> usize {
    env.as_ref().map_or(0, |e| e.env.obs_dim())
}

/// # Safety
/// `env` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn wm_env_state_dim(env: *const WmEnv) -> usize {
    env.as_ref().map_or(0, |e| e.env.state_dim())
}

/// Resets the episode and writes `n_agents * obs_dim` observation values.
///
/// # Safety
/// `obs` must point to at least `obs_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn wm_env_reset(env: *mut WmEnv, seed: u64, obs: *mut f64, obs_len: usize) -> WmStatus {
    guard(|| {
        let e = env_mut(env)?;
        let need = e.env.n_agents() * e.env.obs_dim();
        let dst = out_slice(obs, obs_len, need, "obs")?;
        let o = e.env.reset(seed)?;
        write_obs(dst, &flat_obs(&o));
        Ok(())
    })
}

/// Applies one joint action. `actions` holds `n_actions` indices in
/// `0..5` (noop, forward, left, right, toggle load).
///
/// # Safety
/// Pointers must be valid for the stated lengths; `reward` and `done` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn wm_env_step(
    env: *mut WmEnv,
    actions: *const u32,
    n_actions: usize,
    reward: *mut f64,
    done: *mut bool,
    obs: *mut f64,
    obs_len: usize,
) -> WmStatus {
    guard(|| {
        let e = env_mut(env)?;
        if actions.is_null() {
            return Err(null("actions"));
        }
        if reward.is_null() || done.is_null() {
            return Err(null("reward/done"));
        }
        let need = e.env.n_agents() * e.env.obs_dim();
        let dst = out_slice(obs, obs_len, need, "obs")?;
        let idx: Vec<usize> = std::slice::from_raw_parts(actions, n_actions)
            .iter()
            .map(|&a| a as usize)
            .collect();
        let out = e.env.step(&JointAction::from_indices(&idx)?)?;
        write_obs(dst, &flat_obs(&out.observations));
        *reward = out.reward;
        *done = out.done;
        Ok(())
    })
}

/// Writes the global state vector used by centralized training.
///
/// # Safety
/// `state` must point to at least `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn wm_env_global_state(env: *const WmEnv, state: *mut f64, len: usize) -> WmStatus {
    guard(|| {
        let e = env_ref(env)?;
        let s = e.env.global_state();
        out_slice(state, len, s.len(), "state")?.copy_from_slice(&s);
        Ok(())
    })
}

/// ASCII picture of the grid. Release with [`wm_string_free`]; null on
/// failure.
///
/// # Safety
/// `env` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn wm_env_render(env: *const WmEnv) -> *mut c_char {
    match env.as_ref() {
        Some(e) => CString::new(e.env.render_ascii()).map_or(ptr::null_mut(), CString::into_raw),
        None => {
            set_error("env is null");
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a greedy policy from a checkpoint for the given environment.
///
/// # Safety
/// `path` must be a NUL-terminated string, `env` a live handle and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn wm_policy_load(path: *const c_char, env: *const WmEnv, out: *mut *mut WmPolicy) -> WmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let e = env_ref(env)?;
        let ck = Checkpoint::load(Path::new(text(path, "path")?))?;
        let policy = LoadedPolicy::from_checkpoint(&ck, e.env.config())?;
        let actor = policy.begin_episode(0);
        *out = Box::into_raw(Box::new(WmPolicy { policy, actor }));
        Ok(())
    })
}

/// Clears recurrent state; call at every episode start. `seed` only
/// matters for the random policy.
///
/// # Safety
/// `policy` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wm_policy_begin_episode(policy: *mut WmPolicy, seed: u64) -> WmStatus {
    guard(|| {
        let p = policy.as_mut().ok_or_else(|| null("policy"))?;
        p.actor = p.policy.begin_episode(seed);
        Ok(())
    })
}

/// Greedy joint action for the concatenated observations.
///
/// # Safety
/// `obs` must hold `obs_len` doubles and `actions` `n_actions` writable
/// slots.
#[no_mangle]
pub unsafe extern "C" fn wm_policy_act(
    policy: *mut WmPolicy,
    obs: *const f64,
    obs_len: usize,
    actions: *mut u32,
    n_actions: usize,
) -> WmStatus {
    guard(|| {
        let p = policy.as_mut().ok_or_else(|| null("policy"))?;
        if obs.is_null() || actions.is_null() {
            return Err(null("obs/actions"));
        }
        let n = p.policy.n_agents();
        if n_actions < n {
            return Err(Fail(
                WmStatus::BufferTooSmall,
                format!("actions holds {n_actions} slots, {n} needed"),
            ));
        }
        let o = std::slice::from_raw_parts(obs, obs_len);
        let a = p.policy.act(&mut p.actor, o)?;
        for (dst, src) in std::slice::from_raw_parts_mut(actions, n).iter_mut().zip(a) {
            *dst = src as u32;
        }
        Ok(())
    })
}

/// # Safety
/// `policy` must come from [`wm_policy_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wm_policy_free(policy: *mut WmPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Greedy test return of a checkpoint on its training environment.
///
/// # Safety
/// `path` must be a NUL-terminated string; `mean` and `std` writable.
#[no_mangle]
pub unsafe extern "C" fn wm_evaluate(path: *const c_char, episodes: usize, seed: u64, mean: *mut f64, std: *mut f64) -> WmStatus {
    guard(|| {
        if mean.is_null() || std.is_null() {
            return Err(null("mean/std"));
        }
        let ck = Checkpoint::load(Path::new(text(path, "path")?))?;
        let s = evaluate_checkpoint(&ck, None, episodes, seed)?;
        *mean = s.mean;
        *std = s.std;
        Ok(())
    })
}
