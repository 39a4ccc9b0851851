//! C ABI for the wamgate library.
//!
//! Conventions:
//!
//! - Every fallible function returns a [`WamStatus`]: `WAM_STATUS_OK` (0) on
//!   success, a positive code otherwise. The most recent error message
//!   for the calling thread is available through [`wam_last_error`].
//! - Objects cross the boundary as opaque handles created by `wam_*_load` /
//!   `wam_config_*` constructors and released by the matching `wam_*_free`.
//!   Handles are never invalidated by failed calls.
//! - All `char*` inputs are NUL-terminated UTF-8. Strings returned through
//!   out-parameters are owned by the caller and must be released with
//!   [`wam_string_free`].
//! - Panics never unwind across the boundary; they are caught and reported
//!   as `WAM_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use wamgate::backbone::{self, BackboneConfig};
use wamgate::config::RunConfig;
use wamgate::env;
use wamgate::gpn::{self, GPNConfig};
use wamgate::grpo;
use wamgate::params::ParamSet;
use wamgate::sched::{self, GatePolicy, SchedConfig};
use wamgate::stage1;
use wamgate::Error;

/// Status codes returned by every fallible `wam_*` function.
#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WamStatus {
    Ok = 0,
    /// Array or tensor shape mismatch.
    Shape = 1,
    /// A computation produced NaN or infinity.
    NonFinite = 2,
    /// Autodiff graph misuse.
    Autodiff = 3,
    /// Invalid configuration value or combination.
    Config = 4,
    /// Malformed or incompatible checkpoint.
    Checkpoint = 5,
    /// Malformed or incompatible dataset.
    Dataset = 6,
    /// Environment misuse (bad task id, dimension mismatch).
    Env = 7,
    /// Training-loop failure.
    Train = 8,
    /// Artifact verification failure.
    Verify = 9,
    /// Filesystem error.
    Io = 10,
    /// JSON (de)serialization error.
    Json = 11,
    /// A required pointer argument was NULL.
    NullPointer = 100,
    /// A string argument was not valid UTF-8.
    Utf8 = 101,
    /// An internal panic was caught at the boundary.
    Panic = 102,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> WamStatus {
    match err {
        Error::Shape(_) => WamStatus::Shape,
        Error::NonFinite(_) => WamStatus::NonFinite,
        Error::Autodiff(_) => WamStatus::Autodiff,
        Error::Config(_) => WamStatus::Config,
        Error::Checkpoint(_) => WamStatus::Checkpoint,
        Error::Dataset(_) => WamStatus::Dataset,
        Error::Env(_) => WamStatus::Env,
        Error::Train(_) => WamStatus::Train,
        Error::Verify(_) => WamStatus::Verify,
        Error::Io(_) => WamStatus::Io,
        Error::Json(_) => WamStatus::Json,
    }
}

/// Run `f` with panic containment; convert the outcome to a status code and
/// record the error message on failure.
fn guard(f: impl FnOnce() -> Result<(), Error>) -> WamStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_error();
            WamStatus::Ok
        }
        Ok(Err(e)) => {
            let code = status_of(&e);
            set_error(e.to_string());
            code
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            WamStatus::Panic
        }
    }
}

fn fail(code: WamStatus, msg: &str) -> WamStatus {
    set_error(msg.to_string());
    code
}

/// # Safety
/// `ptr` must be NULL or a NUL-terminated string valid for reads.
unsafe fn utf8_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, (WamStatus, String)> {
    if ptr.is_null() {
        return Err((WamStatus::NullPointer, format!("{name} is NULL")));
    }
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| (WamStatus::Utf8, format!("{name} is not valid UTF-8")))
}

macro_rules! try_arg {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err((code, msg)) => return fail(code, &msg),
        }
    };
}

fn require<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, (WamStatus, String)> {
    if ptr.is_null() {
        Err((WamStatus::NullPointer, format!("{name} is NULL")))
    } else {
        Ok(unsafe { &*ptr })
    }
}

fn require_out<'a, T>(ptr: *mut T, name: &str) -> Result<&'a mut T, (WamStatus, String)> {
    if ptr.is_null() {
        Err((WamStatus::NullPointer, format!("{name} is NULL")))
    } else {
        Ok(unsafe { &mut *ptr })
    }
}

// ---------------------------------------------------------------------------
// opaque handles
// ---------------------------------------------------------------------------

/// Opaque run configuration (environment, model, training, eval sections).
pub struct WamConfig {
    run: RunConfig,
}

/// Opaque trained video-action denoiser (model dimensions + parameters).
pub struct WamBackbone {
    cfg: BackboneConfig,
    params: ParamSet,
}

/// Opaque trained gating policy network.
pub struct WamGpn {
    cfg: GPNConfig,
    params: ParamSet,
}

/// Gate policy selector for evaluation.
#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WamGatePolicy {
    /// One shared scalar clock for every latent.
    Shared = 0,
    /// The fixed monotone per-frame shape.
    Handcrafted = 1,
    /// A trained gating network, applied deterministically.
    Learned = 2,
}

// ---------------------------------------------------------------------------
// diagnostics
// ---------------------------------------------------------------------------

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wam_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Copy the calling thread's most recent error message into `buf` (up to
/// `cap - 1` bytes plus a NUL terminator) and return the full message length
/// in bytes, excluding the terminator. Returns 0 when no error is recorded.
/// `buf` may be NULL (with `cap` 0) to query the required length.
///
/// # Safety
/// If non-NULL, `buf` must be valid for writes of `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn wam_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let borrow = e.borrow();
        let Some(msg) = borrow.as_ref() else {
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Release a string returned through an out-parameter.
///
/// # Safety
/// `s` must be NULL or a pointer previously returned by this library.
#[no_mangle]
pub unsafe extern "C" fn wam_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

fn emit_config(out: *mut *mut WamConfig, run: RunConfig) -> Result<(), Error> {
    let slot = require_out(out, "out").map_err(|(_, m)| Error::Config(m))?;
    *slot = Box::into_raw(Box::new(WamConfig { run }));
    Ok(())
}

/// Create a configuration with every field at its default.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wam_config_default(out: *mut *mut WamConfig) -> WamStatus {
    guard(|| emit_config(out, RunConfig::default()))
}

/// Parse a configuration from a JSON document. Unknown keys are rejected;
/// omitted sections keep their defaults.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wam_config_from_json(json: *const c_char, out: *mut *mut WamConfig) -> WamStatus {
    let text = try_arg!(unsafe { utf8_arg(json, "json") });
    guard(|| emit_config(out, RunConfig::from_json(text)?))
}

/// Load a configuration from a JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wam_config_load(path: *const c_char, out: *mut *mut WamConfig) -> WamStatus {
    let path = try_arg!(unsafe { utf8_arg(path, "path") });
    guard(|| emit_config(out, RunConfig::load(Path::new(path))?))
}

/// Serialize a configuration to pretty-printed JSON. The returned string is
/// owned by the caller; release it with [`wam_string_free`].
///
/// # Safety
/// `cfg` must be a live configuration handle; `out_json` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn wam_config_to_json(cfg: *const WamConfig, out_json: *mut *mut c_char) -> WamStatus {
    let cfg = try_arg!(require(cfg, "cfg"));
    let slot = try_arg!(require_out(out_json, "out_json"));
    guard(|| {
        let text = cfg.run.to_json()?;
        let c = CString::new(text).map_err(|_| Error::Config("JSON contains NUL".into()))?;
        *slot = c.into_raw();
        Ok(())
    })
}

/// Number of tasks in the configured environment (the length needed for
/// [`wam_eval_success`]'s output buffer).
///
/// # Safety
/// `cfg` must be a live configuration handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wam_config_task_count(cfg: *const WamConfig, out: *mut usize) -> WamStatus {
    let cfg = try_arg!(require(cfg, "cfg"));
    let slot = try_arg!(require_out(out, "out"));
    *slot = cfg.run.env.t_tasks;
    clear_error();
    WamStatus::Ok
}

/// Release a configuration handle.
///
/// # Safety
/// `cfg` must be NULL or a handle returned by a `wam_config_*` constructor,
/// not previously freed.
#[no_mangle]
pub unsafe extern "C" fn wam_config_free(cfg: *mut WamConfig) {
    if !cfg.is_null() {
        drop(unsafe { Box::from_raw(cfg) });
    }
}

// ---------------------------------------------------------------------------
// data generation and training
// ---------------------------------------------------------------------------

/// Generate the expert demonstration dataset configured in `cfg` and write
/// it into `out_dir` (created if missing).
///
/// # Safety
/// `cfg` must be a live configuration handle; `out_dir` a NUL-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn wam_generate_demos(cfg: *const WamConfig, out_dir: *const c_char) -> WamStatus {
    let cfg = try_arg!(require(cfg, "cfg"));
    let dir = try_arg!(unsafe { utf8_arg(out_dir, "out_dir") });
    guard(|| {
        let ds = env::generate_demos(
            &cfg.run.env,
            cfg.run.data.episodes,
            cfg.run.data.noise_scale,
            cfg.run.data.seed,
        )?;
        ds.save_dir(Path::new(dir))
    })
}

/// Train the denoising backbone on a demo dataset directory and write the
/// checkpoint to `out_path`. With `shared_times`, training uses one scalar
/// timestep per sample instead of independent per-latent timesteps.
///
/// # Safety
/// `cfg` must be a live configuration handle; `data_dir` and `out_path`
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn wam_train_backbone(
    cfg: *const WamConfig,
    data_dir: *const c_char,
    out_path: *const c_char,
    shared_times: bool,
) -> WamStatus {
    let cfg = try_arg!(require(cfg, "cfg"));
    let data_dir = try_arg!(unsafe { utf8_arg(data_dir, "data_dir") });
    let out_path = try_arg!(unsafe { utf8_arg(out_path, "out_path") });
    guard(|| {
        let dataset = env::DemoDataset::load_dir(Path::new(data_dir))?;
        if dataset.env_config_hash != cfg.run.env.config_hash() {
            return Err(Error::Dataset(
                "dataset was generated under a different environment configuration".into(),
            ));
        }
        let mut s1 = cfg.run.stage1.clone();
        s1.shared_times |= shared_times;
        let mut ps = backbone::init_params(&cfg.run.backbone, s1.seed, false)?;
        stage1::train_stage1(&cfg.run.backbone, &s1, &dataset, &mut ps, |_| {})?;
        backbone::save_backbone(Path::new(out_path), &cfg.run.backbone, &ps)
    })
}

/// Load a backbone checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wam_backbone_load(path: *const c_char, out: *mut *mut WamBackbone) -> WamStatus {
    let path = try_arg!(unsafe { utf8_arg(path, "path") });
    guard(|| {
        let slot = require_out(out, "out").map_err(|(_, m)| Error::Config(m))?;
        let (cfg, params) = backbone::load_backbone(Path::new(path))?;
        *slot = Box::into_raw(Box::new(WamBackbone { cfg, params }));
        Ok(())
    })
}

/// Release a backbone handle.
///
/// # Safety
/// `h` must be NULL or a handle from [`wam_backbone_load`], not previously
/// freed.
#[no_mangle]
pub unsafe extern "C" fn wam_backbone_free(h: *mut WamBackbone) {
    if !h.is_null() {
        drop(unsafe { Box::from_raw(h) });
    }
}

/// Train the gating policy network against task reward with the backbone
/// frozen, writing the checkpoint to `out_path`.
///
/// # Safety
/// `cfg` and `backbone` must be live handles; `out_path` a NUL-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn wam_train_gpn(
    cfg: *const WamConfig,
    backbone: *const WamBackbone,
    out_path: *const c_char,
) -> WamStatus {
    let cfg = try_arg!(require(cfg, "cfg"));
    let bb = try_arg!(require(backbone, "backbone"));
    let out_path = try_arg!(unsafe { utf8_arg(out_path, "out_path") });
    guard(|| {
        let mut gpn_params = gpn::init_params(&cfg.run.gpn, cfg.run.grpo.seed, false)?;
        grpo::train_stage2(
            &cfg.run.env,
            &bb.cfg,
            &bb.params,
            &cfg.run.gpn,
            &mut gpn_params,
            &cfg.run.grpo,
            |_| {},
        )?;
        gpn::save_gpn(Path::new(out_path), &cfg.run.gpn, &gpn_params)
    })
}

/// Load a gating-policy checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wam_gpn_load(path: *const c_char, out: *mut *mut WamGpn) -> WamStatus {
    let path = try_arg!(unsafe { utf8_arg(path, "path") });
    guard(|| {
        let slot = require_out(out, "out").map_err(|(_, m)| Error::Config(m))?;
        let (cfg, params) = gpn::load_gpn(Path::new(path))?;
        *slot = Box::into_raw(Box::new(WamGpn { cfg, params }));
        Ok(())
    })
}

/// Release a gating-policy handle.
///
/// # Safety
/// `h` must be NULL or a handle from [`wam_gpn_load`], not previously freed.
#[no_mangle]
pub unsafe extern "C" fn wam_gpn_free(h: *mut WamGpn) {
    if !h.is_null() {
        drop(unsafe { Box::from_raw(h) });
    }
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Roll out `episodes_per_task` episodes per task (0 uses the configured
/// default) under the selected gate policy and write one success rate per
/// task into `out_rates[0..task_count]`. `gpn` is required for
/// `WAM_GATE_POLICY_LEARNED` and ignored otherwise. Episode seeds derive
/// from `seed`, so identical calls reproduce identical rates.
///
/// # Safety
/// `cfg` and `bb` must be live handles; `gpn` NULL or a live handle;
/// `out_rates` valid for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn wam_eval_success(
    cfg: *const WamConfig,
    bb: *const WamBackbone,
    gpn: *const WamGpn,
    policy: WamGatePolicy,
    episodes_per_task: u32,
    seed: u64,
    out_rates: *mut f64,
    out_len: usize,
) -> WamStatus {
    let cfg = try_arg!(require(cfg, "cfg"));
    let bb = try_arg!(require(bb, "bb"));
    if out_rates.is_null() {
        return fail(WamStatus::NullPointer, "out_rates is NULL");
    }
    let tasks = cfg.run.env.t_tasks;
    if out_len < tasks {
        return fail(
            WamStatus::Config,
            &format!("out_len {out_len} < task count {tasks}"),
        );
    }
    let gpn_ref = if policy == WamGatePolicy::Learned {
        match require(gpn, "gpn") {
            Ok(g) => Some(g),
            Err((code, msg)) => return fail(code, &msg),
        }
    } else {
        None
    };
    let out = unsafe { std::slice::from_raw_parts_mut(out_rates, tasks) };
    guard(|| {
        let episodes = if episodes_per_task == 0 {
            cfg.run.eval.episodes_per_task
        } else {
            episodes_per_task as usize
        };
        let gate = match gpn_ref {
            Some(g) => GatePolicy::Learned {
                cfg: &g.cfg,
                params: &g.params,
                deterministic: true,
            },
            None => match policy {
                WamGatePolicy::Shared => GatePolicy::SharedT,
                WamGatePolicy::Handcrafted => GatePolicy::HandCrafted,
                WamGatePolicy::Learned => unreachable!("checked above"),
            },
        };
        let sched_cfg = SchedConfig {
            k_steps: cfg.run.grpo.k_steps,
        };
        let rates = sched::success_rates(
            &cfg.run.env,
            &bb.cfg,
            &bb.params,
            &sched_cfg,
            &gate,
            episodes,
            seed,
        )?;
        out.copy_from_slice(&rates);
        Ok(())
    })
}
