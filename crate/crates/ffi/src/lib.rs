//! C ABI over the flowplan core: load a trained checkpoint or a dataset
//! through opaque handles and plan trajectories in environment units.
//!
//! Every function returns an [`FpStatus`]. On failure the message is kept
//! per thread and can be read with [`fp_last_error`]. Handles are owned by the
//! caller and must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use flowplan::cli::plan_states;
use flowplan::model::VelocityNet;
use flowplan::store::{load_checkpoint, load_dataset, Checkpoint, PlanConfig};
use flowplan::world::{Dataset, Obstacle, HORIZON};
use flowplan::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpStatus {
    Ok = 0,
    /// A required pointer was null.
    NullArgument = 1,
    /// A value was out of range or a buffer too small.
    InvalidArgument = 2,
    /// The file could not be read.
    Io = 3,
    /// The file is not a valid dataset or checkpoint.
    Load = 4,
    /// Shapes or dimensions do not fit together.
    Dimension = 5,
    /// Training or sampling produced non-finite values.
    Numeric = 6,
    /// Unexpected internal failure.
    Internal = 7,
}

/// A trained velocity network with its environment and normalisation.
pub struct FpModel {
    ck: Checkpoint,
    net: VelocityNet,
}

/// A trajectory dataset.
pub struct FpDataset {
    ds: Dataset,
}

/// Circular workspace obstacle.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct FpObstacle {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

/// Planner settings. Start from [`fp_plan_options_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct FpPlanOptions {
    pub n_steps: u32,
    pub seed: u64,
    pub guidance_scale: f64,
    /// Nonzero enables inference-time trajectory splitting.
    pub split: u8,
    pub obstacles: *const FpObstacle,
    pub n_obstacles: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> FpStatus {
    match e {
        Error::Io(_) => FpStatus::Io,
        Error::Load { .. } | Error::ParamShape { .. } => FpStatus::Load,
        Error::Dimension { .. } | Error::Length(_) => FpStatus::Dimension,
        Error::Numeric(_) | Error::Sampling { .. } | Error::Guidance { .. } => FpStatus::Numeric,
        Error::Config(_) | Error::Contract(_) => FpStatus::InvalidArgument,
        _ => FpStatus::Internal,
    }
}

fn fail(status: FpStatus, msg: impl Into<String>) -> FpStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), FpStatus>) -> FpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            FpStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(FpStatus::Internal, "internal panic"),
    }
}

fn lift<T>(r: flowplan::Result<T>) -> Result<T, FpStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, FpStatus> {
    if p.is_null() {
        return Err(fail(FpStatus::NullArgument, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(FpStatus::InvalidArgument, "path is not valid UTF-8"))
}

fn nonnull<T>(p: *const T, what: &str) -> Result<(), FpStatus> {
    if p.is_null() {
        Err(fail(FpStatus::NullArgument, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn fp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `flowplan train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fp_model_load(path: *const c_char, out: *mut *mut FpModel) -> FpStatus {
    guard(|| {
        nonnull(out, "out")?;
        *out = std::ptr::null_mut();
        let path = path_arg(path)?;
        let ck = lift(load_checkpoint(&path))?;
        let net = lift(ck.net())?;
        *out = Box::into_raw(Box::new(FpModel { ck, net }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`fp_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fp_model_free(model: *mut FpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// State dimension D of the model's environment, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fp_model_state_dim(model: *const FpModel) -> usize {
    model.as_ref().map_or(0, |m| m.ck.env.state_dim())
}

/// Planning horizon T (states per plan).
#[no_mangle]
pub extern "C" fn fp_horizon() -> usize {
    HORIZON
}

/// Default planner settings: configured step count, seed 0, unit guidance
/// scale, no splitting, no obstacles.
#[no_mangle]
pub extern "C" fn fp_plan_options_default() -> FpPlanOptions {
    let p = PlanConfig::default();
    FpPlanOptions {
        n_steps: p.n_steps as u32,
        seed: 0,
        guidance_scale: p.guidance.scale,
        split: 0,
        obstacles: std::ptr::null(),
        n_obstacles: 0,
    }
}

/// Plans from `start` to `goal` (each `dim` values, environment units) and
/// writes the `T × dim` plan row-major into `out`, which holds `out_len`
/// values. `options` may be null for defaults.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `model` must be live.
#[no_mangle]
pub unsafe extern "C" fn fp_plan(
    model: *const FpModel,
    start: *const f64,
    goal: *const f64,
    dim: usize,
    options: *const FpPlanOptions,
    out: *mut f64,
    out_len: usize,
) -> FpStatus {
    guard(|| {
        nonnull(model, "model")?;
        nonnull(start, "start")?;
        nonnull(goal, "goal")?;
        nonnull(out, "out")?;
        let m = &*model;
        let d = m.ck.env.state_dim();
        if dim != d {
            return Err(fail(FpStatus::Dimension, format!("model state dimension is {d}, got {dim}")));
        }
        if out_len < HORIZON * d {
            return Err(fail(
                FpStatus::InvalidArgument,
                format!("output buffer holds {out_len} values, need {}", HORIZON * d),
            ));
        }
        let opts = options.as_ref().copied().unwrap_or_else(|| fp_plan_options_default());
        if opts.n_steps == 0 {
            return Err(fail(FpStatus::InvalidArgument, "n_steps must be ≥ 1"));
        }
        let obstacles: Vec<Obstacle> = if opts.n_obstacles == 0 {
            Vec::new()
        } else {
            nonnull(opts.obstacles, "options.obstacles")?;
            std::slice::from_raw_parts(opts.obstacles, opts.n_obstacles)
                .iter()
                .map(|o| Obstacle::new([o.cx, o.cy], o.radius))
                .collect()
        };
        let mut settings = PlanConfig {
            n_steps: opts.n_steps as usize,
            inference_split: opts.split != 0,
            ..PlanConfig::default()
        };
        settings.guidance.scale = opts.guidance_scale;
        let start = std::slice::from_raw_parts(start, d);
        let goal = std::slice::from_raw_parts(goal, d);
        let traj = lift(plan_states(&m.ck, &m.net, start, goal, &obstacles, &settings, opts.seed))?;
        std::slice::from_raw_parts_mut(out, traj.len()).copy_from_slice(&traj);
        Ok(())
    })
}

/// Loads a dataset written by `flowplan gen-data`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fp_dataset_load(path: *const c_char, out: *mut *mut FpDataset) -> FpStatus {
    guard(|| {
        nonnull(out, "out")?;
        *out = std::ptr::null_mut();
        let path = path_arg(path)?;
        let ds = lift(load_dataset(&path))?;
        *out = Box::into_raw(Box::new(FpDataset { ds }));
        Ok(())
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `dataset` must come from [`fp_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fp_dataset_free(dataset: *mut FpDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of trajectories, 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fp_dataset_len(dataset: *const FpDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.ds.len())
}

/// State dimension of the dataset, 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fp_dataset_state_dim(dataset: *const FpDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.ds.env.state_dim())
}

/// Copies trajectory `index` (`T × D`, environment units) into `out`.
///
/// # Safety
/// `out` must be valid for `out_len` values; `dataset` must be live.
#[no_mangle]
pub unsafe extern "C" fn fp_dataset_trajectory(
    dataset: *const FpDataset,
    index: usize,
    out: *mut f64,
    out_len: usize,
) -> FpStatus {
    guard(|| {
        nonnull(dataset, "dataset")?;
        nonnull(out, "out")?;
        let ds = &(*dataset).ds;
        if index >= ds.len() {
            return Err(fail(
                FpStatus::InvalidArgument,
                format!("index {index} out of range for {} trajectories", ds.len()),
            ));
        }
        let traj = ds.raw(index);
        if out_len < traj.len() {
            return Err(fail(
                FpStatus::InvalidArgument,
                format!("output buffer holds {out_len} values, need {}", traj.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, traj.len()).copy_from_slice(traj);
        Ok(())
    })
}
